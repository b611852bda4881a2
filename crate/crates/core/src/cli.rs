//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on usage errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::kernels;
use crate::mx::container::{self, Container};
use crate::nested::{self, MasterCode};
use crate::ocs::{self, CalibrationStats, MetricKind, SplitPlan, StepSizes};
use crate::qat::{self, LandscapeConfig, ScheduleVariant, Stage, TrainConfig, FULL_PRECISION};
use crate::quant::{self, GroupLayout, ScaleMode};
use crate::rng;
use crate::tensor::{parse_shape, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug, Clone, PartialEq)]
#[command(name = "lowbit", version, about = "Ultra-low-bit quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalesArg {
    /// One FP8 E4M3 byte per group plus a tensor-wide f32 scale.
    E4m3,
    /// One f64 per group.
    F64,
}

impl From<ScalesArg> for ScaleMode {
    fn from(s: ScalesArg) -> Self {
        match s {
            ScalesArg::E4m3 => ScaleMode::E4M3,
            ScalesArg::F64 => ScaleMode::Exact,
        }
    }
}

/// Tensor shape such as `64x128`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeArg(pub Vec<usize>);

/// Comma-separated stage list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageList(pub Vec<Stage>);

fn shape_arg(s: &str) -> std::result::Result<ShapeArg, String> {
    parse_shape(s).map(ShapeArg).map_err(|e| e.to_string())
}

fn metric_arg(s: &str) -> std::result::Result<MetricKind, String> {
    s.parse::<MetricKind>().map_err(|e| e.to_string())
}

fn variant_arg(s: &str) -> std::result::Result<qat::Variant, String> {
    s.parse::<qat::Variant>().map_err(|e| e.to_string())
}

fn ratio_arg(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("ratio {v} outside [0, 1]"))
    }
}

fn width_arg(s: &str) -> std::result::Result<u8, String> {
    let v: u8 = s.parse().map_err(|_| format!("`{s}` is not a bit-width"))?;
    if (quant::MIN_BITS..=quant::MAX_BITS).contains(&v) || v == FULL_PRECISION {
        Ok(v)
    } else {
        Err(format!("bit-width {v} must be in [2, 8] or 16"))
    }
}

/// `w8a16,w4a16,w2a16`
fn stages_arg(s: &str) -> std::result::Result<StageList, String> {
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let (w, a) = tok
                .strip_prefix('w')
                .and_then(|r| r.split_once('a'))
                .ok_or_else(|| format!("stage `{tok}` is not of the form w<bits>a<bits>"))?;
            Ok(Stage::new(width_arg(w)?, width_arg(a)?))
        })
        .collect::<std::result::Result<_, String>>()
        .map(StageList)
}

fn shapes_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    match shape_arg(s)?.0.as_slice() {
        [k, n] => Ok((*k, *n)),
        _ => Err(format!("shape `{s}` must be KxN")),
    }
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Write a seeded standard-normal tensor container.
    Random {
        /// Shape such as 64x128.
        #[arg(long, value_parser = shape_arg)]
        shape: ShapeArg,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Group-quantize a tensor container.
    Quantize {
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
        bits: u8,
        #[arg(long, default_value_t = quant::DEFAULT_GROUP_SIZE)]
        group: usize,
        /// Store a master code that any lower width can be shifted out of.
        #[arg(long)]
        master: bool,
        #[arg(long, value_enum, default_value_t = ScalesArg::E4m3)]
        scales: ScalesArg,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Reconstruct a tensor from a quantized or master container.
    Dequantize {
        /// View width for master containers (defaults to the stored width).
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
        bits: Option<u8>,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Truncate a master container to fewer bits.
    Shift {
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
        to: u8,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Duplicate the most sensitive input channels of an `in x out` weight.
    OcsSplit {
        #[arg(long, default_value_t = 0.1, value_parser = ratio_arg)]
        ratio_min: f64,
        #[arg(long, default_value_t = 0.1, value_parser = ratio_arg)]
        ratio_max: f64,
        #[arg(long, default_value = "xnorm_wmax", value_parser = metric_arg)]
        metric: MetricKind,
        /// Calibration activations, `tokens x in`.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// 1-based index of this layer's block.
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        /// Width whose step sizes the split is aligned to.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=8))]
        bits: u8,
        #[arg(long, default_value_t = quant::DEFAULT_GROUP_SIZE)]
        group: usize,
        /// CSV of `row,channel` for the widened weight.
        #[arg(long)]
        map: Option<PathBuf>,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-input-channel sensitivity scores as CSV.
    Metrics {
        #[arg(long, default_value = "xnorm_wmax", value_parser = metric_arg)]
        metric: MetricKind,
        #[arg(long)]
        calib: Option<PathBuf>,
        input: PathBuf,
        /// CSV destination; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Time the GEMV kernels on random data.
    GemvBench {
        /// Comma-separated KxN shapes.
        #[arg(long, value_delimiter = ',', value_parser = shapes_arg,
              default_value = "256x256,256x896,1024x1024,2048x2048")]
        shapes: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the toy MLP stack through a precision schedule.
    TrainToy {
        #[arg(long, default_value = "A", value_parser = variant_arg)]
        variant: qat::Variant,
        /// Explicit stage list such as w8a16,w4a16,w2a16; overrides --variant.
        #[arg(long, value_parser = stages_arg)]
        stages: Option<StageList>,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        steps_per_stage: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0.3)]
        init_noise: f64,
        /// Split this fraction of input channels before the last stage.
        #[arg(long, value_parser = ratio_arg)]
        ocs_ratio: Option<f64>,
        /// Train the expanding 8 / 8,4 / 8,4,2 bit sets on shared master
        /// weights instead of a schedule.
        #[arg(long)]
        curriculum: bool,
        /// Raise a layer's 2-bit activations to 4 bits when its input
        /// kurtosis exceeds TAU (10 when given without a value).
        #[arg(long, value_name = "TAU", num_args = 0..=1, default_missing_value = "10")]
        kurtosis_tau: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Loss over a 2-D slice of parameter space as CSV.
    Landscape {
        /// Weight width, or 16 for the unquantized model.
        #[arg(long, default_value_t = 2, value_parser = width_arg)]
        bits: u8,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 1e-4)]
        range: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Summarize a container, including storage per weight.
    Inspect { input: PathBuf },
}

/// Parses `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Command, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv).map(|c| c.command)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        Error::Parse { section, message } => Error::Parse {
            section,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn read(path: &Path) -> Result<Container> {
    with_path(path, container::read_file(path))
}

fn write(path: &Path, c: &Container) -> Result<()> {
    with_path(path, container::write_file(path, c))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    with_path(path, std::fs::write(path, text).map_err(Error::from))
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    match read(path)? {
        Container::Tensor(t) => Ok(t),
        c => Err(Error::invalid(format!(
            "{}: expected a tensor container, found {}",
            path.display(),
            c.kind().name()
        ))),
    }
}

fn read_master(path: &Path) -> Result<MasterCode> {
    match read(path)? {
        Container::Master(m) => Ok(m),
        c => Err(Error::invalid(format!(
            "{}: expected a master container, found {}",
            path.display(),
            c.kind().name()
        ))),
    }
}

fn calibration(calib: Option<&Path>, metric: MetricKind, m: usize) -> Result<CalibrationStats> {
    match calib {
        Some(p) => CalibrationStats::from_activations(&read_tensor(p)?),
        None if metric == MetricKind::WMax => CalibrationStats::from_norms(vec![1.0; m], 1),
        None => Err(Error::invalid(format!(
            "metric {} needs calibration activations (--calib)",
            metric.name()
        ))),
    }
}

fn sensitivity(
    w: &Tensor,
    calib: Option<&Path>,
    metric: MetricKind,
) -> Result<ocs::SensitivityReport> {
    if w.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "expected an in x out weight, got shape {:?}",
            w.shape()
        )));
    }
    let stats = calibration(calib, metric, w.rows())?;
    ocs::channel_metric(&stats, w, metric)
}

fn describe(c: &Container) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind: {}", c.kind().name());
    match c {
        Container::Tensor(t) => {
            let _ = writeln!(s, "shape: {:?}", t.shape());
            let _ = writeln!(s, "elements: {}", t.len());
            let _ = writeln!(s, "max_abs: {}", t.max_abs());
        }
        Container::Quantized(q) => {
            let _ = writeln!(s, "shape: {:?}", q.shape());
            let _ = writeln!(s, "bits: {}", q.bits());
            let _ = writeln!(s, "group_size: {}", q.layout().group_size);
            let _ = writeln!(s, "groups: {}", q.group_count());
            let _ = writeln!(s, "scale_format: {}", q.scale_format().name());
        }
        Container::Master(m) => {
            let _ = writeln!(s, "shape: {:?}", m.shape());
            let _ = writeln!(s, "master_bits: {}", m.master_bits());
            let _ = writeln!(s, "stored_bits: {}", m.stored_bits());
            let _ = writeln!(s, "group_size: {}", m.layout().group_size);
            let _ = writeln!(s, "groups: {}", m.params().len());
            let _ = writeln!(s, "scale_format: {}", m.scale_format().name());
        }
    }
    if let Some(a) = container::accounting(c) {
        let _ = writeln!(s, "code_bytes: {}", a.code_bytes);
        let _ = writeln!(s, "scale_bytes: {}", a.scale_bytes);
        let _ = writeln!(s, "zero_point_bytes: {}", a.zero_point_bytes);
        let _ = writeln!(s, "code_sum_bytes: {}", a.code_sum_bytes);
        let _ = writeln!(s, "bits_per_weight (codes+scales): {}", a.bits_per_weight());
        let _ = writeln!(s, "scale_bits_per_weight: {}", a.scale_bits_per_weight());
    }
    s
}

/// Runs a command, returning what it prints on standard output.
pub fn run(cmd: &Command) -> Result<String> {
    let mut out = String::new();
    match cmd {
        Command::Random {
            shape,
            std,
            seed,
            output,
        } => {
            if !(*std >= 0.0 && std.is_finite()) {
                return Err(Error::invalid("--std must be finite and >= 0"));
            }
            let t = rng::normal_tensor(&mut rng::seeded(*seed), &shape.0, *std);
            write(output, &Container::Tensor(t))?;
        }
        Command::Quantize {
            bits,
            group,
            master,
            scales,
            input,
            output,
        } => {
            let t = read_tensor(input)?;
            let layout = GroupLayout::new(*group)?;
            let c = if *master {
                Container::Master(nested::make_master_with(
                    &t,
                    layout,
                    *bits,
                    (*scales).into(),
                )?)
            } else {
                Container::Quantized(quant::quantize_tensor_with(
                    &t,
                    layout,
                    *bits,
                    (*scales).into(),
                )?)
            };
            write(output, &c)?;
            out = describe(&c);
        }
        Command::Dequantize {
            bits,
            input,
            output,
        } => {
            let t = match read(input)? {
                Container::Quantized(q) => {
                    if bits.is_some_and(|b| b != q.bits()) {
                        return Err(Error::invalid(
                            "--bits applies to master containers; quantize again for another width",
                        ));
                    }
                    q.dequantize()
                }
                Container::Master(m) => m.dequantize_at(bits.unwrap_or(m.stored_bits()))?,
                Container::Tensor(_) => {
                    return Err(Error::invalid(format!(
                        "{}: already a plain tensor",
                        input.display()
                    )))
                }
            };
            write(output, &Container::Tensor(t))?;
        }
        Command::Shift { to, input, output } => {
            let m = read_master(input)?.shifted(*to)?;
            let c = Container::Master(m);
            write(output, &c)?;
            out = describe(&c);
        }
        Command::OcsSplit {
            ratio_min,
            ratio_max,
            metric,
            calib,
            block,
            blocks,
            bits,
            group,
            map,
            input,
            output,
        } => {
            let w = read_tensor(input)?;
            let report = sensitivity(&w, calib.as_deref(), *metric)?;
            let sched = ocs::split_schedule(*blocks, *ratio_min, *ratio_max)?;
            if !(1..=*blocks).contains(block) {
                return Err(Error::invalid(format!(
                    "--block {block} outside 1..={blocks}"
                )));
            }
            let ratio = sched.ratio(*block);
            let plan = SplitPlan::from_report(&report, ratio)?;
            let q = quant::quantize_tensor(&w.transpose(), GroupLayout::new(*group)?, *bits)?;
            let steps = ocs::steps_from_output_major(&q)?;
            let layer = ocs::apply_ocs(&w, &plan, &StepSizes::PerElement(steps))?;
            write(output, &Container::Tensor(layer.weight.clone()))?;
            if let Some(p) = map {
                let mut csv = String::from("row,channel\n");
                for (r, c) in layer.index_map.iter().enumerate() {
                    let _ = writeln!(csv, "{r},{c}");
                }
                write_text(p, &csv)?;
            }
            let _ = writeln!(
                out,
                "split {} of {} channels (ratio {ratio}); widened {} -> {}",
                plan.channels().len(),
                plan.input_dim(),
                plan.input_dim(),
                plan.widened_dim()
            );
        }
        Command::Metrics {
            metric,
            calib,
            input,
            output,
        } => {
            let w = read_tensor(input)?;
            let csv = sensitivity(&w, calib.as_deref(), *metric)?.to_csv();
            match output {
                Some(p) => write_text(p, &csv)?,
                None => out = csv,
            }
        }
        Command::GemvBench {
            shapes,
            reps,
            seed,
            csv,
        } => {
            let reports = kernels::bench(shapes, *reps, *seed)?;
            let text = kernels::bench_csv(&reports);
            match csv {
                Some(p) => write_text(p, &text)?,
                None => out.push_str(&text),
            }
            for r in reports.iter().filter(|r| !r.verified) {
                let _ = writeln!(
                    out,
                    "warning: {} at {}x{} does not match its reference",
                    r.method, r.k, r.n
                );
            }
        }
        Command::TrainToy {
            variant,
            stages,
            blocks,
            dim,
            steps_per_stage,
            seed,
            lr,
            batch,
            init_noise,
            ocs_ratio,
            curriculum,
            kurtosis_tau,
            csv,
        } => {
            let mut task = qat::toy_task(*blocks, *dim, *init_noise, *seed)?;
            let cfg = TrainConfig {
                lr: *lr,
                batch: *batch,
                ocs: ocs_ratio.map(|r| qat::OcsConfig {
                    ratio_min: r,
                    ratio_max: r,
                    ..Default::default()
                }),
                kurtosis_tau: *kurtosis_tau,
                ..Default::default()
            };
            let report = if *curriculum {
                qat::train_curriculum(
                    &mut task,
                    &Default::default(),
                    *steps_per_stage,
                    &cfg,
                    *seed,
                )?
            } else {
                let sched = match stages {
                    Some(s) => ScheduleVariant::custom(s.0.clone(), *steps_per_stage)?,
                    None => qat::schedule_stages(*variant, *steps_per_stage)?,
                };
                qat::train_progressive(&mut task, &sched, &cfg, *seed)?
            };
            if let Some(p) = csv {
                write_text(p, &report.to_csv())?;
            }
            let _ = writeln!(out, "{}", report.config);
            let _ = writeln!(out, "initial_loss: {:.6e}", report.initial_loss);
            for (t, l) in report.stage_final_loss.iter().enumerate() {
                let _ = writeln!(out, "stage {t} final train loss: {l:.6e}");
            }
            for (b, l) in &report.eval_by_bits {
                let _ = writeln!(out, "eval w{b}: {l:.6e}");
            }
            let _ = writeln!(out, "final_loss: {:.6e}", report.final_loss);
            if report.split_channels > 0 {
                let _ = writeln!(out, "split_channels: {}", report.split_channels);
            }
            for o in &report.overrides {
                let _ = writeln!(
                    out,
                    "block {} {}: kurtosis {:.2} -> a{}",
                    o.block, o.layer, o.kurtosis, o.a_bits
                );
            }
            if let Some(step) = report.diverged_at {
                let loss = report.trace.last().map_or(f64::NAN, |r| r.loss);
                return Err(Error::Diverged { step, loss });
            }
        }
        Command::Landscape {
            bits,
            grid,
            range,
            seed,
            blocks,
            dim,
            csv,
        } => {
            let task = qat::toy_task(*blocks, *dim, 0.3, *seed)?;
            let mut r = rng::seeded(seed.wrapping_add(1));
            let x = rng::normal_tensor(&mut r, &[64, *dim], 1.0);
            let y = task.teacher.forward_uniform(&x, qat::QuantConfig::FULL)?;
            let cfg = LandscapeConfig {
                w_bits: *bits,
                grid: *grid,
                range: *range,
                seed: *seed,
                ..Default::default()
            };
            let g = qat::landscape_probe(&task.student, &x, &y, &cfg)?;
            let text = g.to_csv();
            match csv {
                Some(p) => {
                    write_text(p, &text)?;
                    let _ = writeln!(out, "adjacent repeated losses: {}", g.adjacent_repeats());
                }
                None => out = text,
            }
        }
        Command::Inspect { input } => out = describe(&read(input)?),
    }
    Ok(out)
}

/// Parses and runs `argv`, printing to standard output and error. Returns
/// the process exit code.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cmd = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cmd) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Command, clap::Error> {
        parse_args(std::iter::once("lowbit").chain(args.iter().copied()))
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn quantize_happy_path() {
        let c = parse(&[
            "quantize", "--bits", "2", "--group", "32", "in.bbqt", "-o", "out.bbqt",
        ])
        .unwrap();
        assert_eq!(
            c,
            Command::Quantize {
                bits: 2,
                group: 32,
                master: false,
                scales: ScalesArg::E4m3,
                input: "in.bbqt".into(),
                output: "out.bbqt".into(),
            }
        );
    }

    #[test]
    fn usage_errors() {
        for args in [
            &["quantize", "--bits", "9", "a", "-o", "b"][..],
            &["quantize", "--bits", "1", "a", "-o", "b"],
            &["frobnicate"],
            &["inspect", "a", "--nope"],
            &["shift", "a", "-o", "b"],
            &["train-toy", "--variant", "E"],
            &["ocs-split", "--ratio-min", "1.5", "a", "-o", "b"],
            &["landscape", "--bits", "12"],
        ] {
            let e = parse(args).unwrap_err();
            assert!(e.use_stderr(), "{args:?}");
        }
        assert_eq!(
            execute(["lowbit", "quantize", "--bits", "9", "a", "-o", "b"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn shift_parses() {
        let c = parse(&["shift", "--to", "2", "master.bbqt", "-o", "w2.bbqt"]).unwrap();
        assert_eq!(
            c,
            Command::Shift {
                to: 2,
                input: "master.bbqt".into(),
                output: "w2.bbqt".into()
            }
        );
    }

    #[test]
    fn stage_lists_and_shapes() {
        assert_eq!(
            stages_arg("w8a16, w2a2").unwrap().0,
            vec![Stage::new(8, 16), Stage::new(2, 2)]
        );
        match parse(&["train-toy", "--stages", "w8a16,w2a16", "--curriculum"]).unwrap() {
            Command::TrainToy {
                stages,
                curriculum,
                seed,
                ..
            } => {
                assert_eq!(stages.unwrap().0.len(), 2);
                assert!(curriculum);
                assert_eq!(seed, 42);
            }
            c => panic!("{c:?}"),
        }
        match parse(&["random", "--shape", "3x5", "-o", "t.bbqt"]).unwrap() {
            Command::Random { shape, .. } => assert_eq!(shape.0, vec![3, 5]),
            c => panic!("{c:?}"),
        }
        assert!(stages_arg("w9a16").is_err());
        assert!(stages_arg("8a16").is_err());
        match parse(&["gemv-bench", "--shapes", "4x8,16x2"]).unwrap() {
            Command::GemvBench {
                shapes, reps, seed, ..
            } => {
                assert_eq!(shapes, vec![(4, 8), (16, 2)]);
                assert_eq!((reps, seed), (50, 42));
            }
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn missing_file_is_a_runtime_error_naming_it() {
        let cmd = parse(&["inspect", "/nonexistent/x.bbqt"]).unwrap();
        let e = run(&cmd).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/x.bbqt"), "{e}");
        assert_eq!(
            execute(["lowbit", "inspect", "/nonexistent/x.bbqt"]),
            EXIT_RUNTIME
        );
    }
}
