//! Block-wise progressive training and the multi-bit curriculum objective.
//!
//! The task: a frozen full-precision teacher model and a student that starts
//! as a noisy copy of it. Each step draws a standard-normal batch and trains
//! every block `i` on
//!
//! ```text
//! MSE( block_i^student(x_i at teacher bits), block_i^teacher(x_i at full precision) )
//! ```
//!
//! where the student's block input comes from the preceding student blocks
//! run at the higher teacher bit-width.

use std::fmt::Write as _;

use super::model::{
    fake_quant_weight, matmul, mse, mse_grad, weight_steps, BlockGrads, BlockQuant, QuantConfig,
    ToyModel, FULL_PRECISION,
};
use super::schedule::{
    depth_biased_sample, BlockSamplingConfig, BlockwiseConfig, CurriculumConfig, ScheduleVariant,
    Stage,
};
use crate::error::{Error, Result};
use crate::nested::MasterCode;
use crate::ocs::{self, CalibrationStats, MetricKind, SplitPlan, StepSizes};
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Frozen teacher and trainable student.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub teacher: ToyModel,
    pub student: ToyModel,
}

/// Seeded teacher of `blocks` blocks of width `dim`, and a student equal to
/// the teacher plus relative Gaussian noise `init_noise`.
pub fn toy_task(blocks: usize, dim: usize, init_noise: f64, seed: u64) -> Result<Task> {
    if !(init_noise >= 0.0 && init_noise.is_finite()) {
        return Err(Error::invalid("init noise must be finite and >= 0"));
    }
    let mut r = rng::seeded(seed);
    let teacher = ToyModel::new(&mut r, blocks, dim)?;
    let student = teacher.perturbed(&mut r, init_noise);
    Ok(Task { teacher, student })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcsConfig {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub metric: MetricKind,
}

impl Default for OcsConfig {
    fn default() -> Self {
        Self {
            ratio_min: 0.1,
            ratio_max: 0.1,
            metric: MetricKind::XNormTimesWMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub group_size: usize,
    pub blockwise: BlockwiseConfig,
    /// Split outlier channels before the last stage.
    pub ocs: Option<OcsConfig>,
    pub sampling: Option<BlockSamplingConfig>,
    /// Raise a layer's 2-bit activations to 4 bits when the kurtosis of its
    /// calibration input exceeds this.
    pub kurtosis_tau: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            eval_batch: 256,
            lr: 1e-2,
            group_size: DEFAULT_GROUP_SIZE,
            blockwise: BlockwiseConfig::default(),
            ocs: None,
            sampling: None,
            kurtosis_tau: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        QuantConfig::FULL.with_group_size(self.group_size)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub w_bits: u8,
    pub a_bits: u8,
    pub loss: f64,
}

/// Activation width raised by the kurtosis gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOverride {
    pub block: usize,
    pub layer: &'static str,
    pub kurtosis: f64,
    pub a_bits: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    /// Human-readable echo of the schedule and configuration.
    pub config: String,
    pub trace: Vec<StepRecord>,
    pub stage_final_loss: Vec<f64>,
    /// End-to-end loss on the held-out batch before training, at the first
    /// stage's precision.
    pub initial_loss: f64,
    /// End-to-end held-out loss after training, at the final precision.
    pub final_loss: f64,
    /// Held-out loss per weight width, for curriculum runs.
    pub eval_by_bits: Vec<(u8, f64)>,
    pub diverged_at: Option<usize>,
    pub split_channels: usize,
    pub overrides: Vec<LayerOverride>,
}

impl TrainReport {
    /// `step,stage,w_bits,a_bits,loss`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,w_bits,a_bits,loss\n");
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.12e}",
                r.step, r.stage, r.w_bits, r.a_bits, r.loss
            );
        }
        out
    }
}

/// MSE between a student block's output on the teacher input and the
/// full-precision reference output.
pub fn blockwise_loss(
    block: &super::model::Block,
    teacher_input: &Tensor,
    q: &BlockQuant,
    reference_output: &Tensor,
) -> Result<f64> {
    mse(&block.forward_eval(teacher_input, q)?, reference_output)
}

/// `sum_b lambda_b MSE(x W_b, y)` with `W_b` the `b`-bit view of `master`
/// (an `in x out` weight).
pub fn curriculum_loss(
    master: &MasterCode,
    x: &Tensor,
    y: &Tensor,
    bits: &[u8],
    config: &CurriculumConfig,
) -> Result<f64> {
    if master.shape().len() != 2 || x.cols() != master.shape()[0] {
        return Err(Error::invalid(format!(
            "input width {} does not match master shape {:?}",
            x.cols(),
            master.shape()
        )));
    }
    let mut total = 0.0;
    for &b in bits {
        let lambda = config.lambda(b);
        if lambda == 0.0 {
            continue;
        }
        let w = master.dequantize_at(b)?;
        total += lambda * mse(&matmul(x, &w), y)?;
    }
    Ok(total)
}

fn stage_rng(seed: u64, stage: usize) -> Rng {
    rng::seeded(seed ^ ((stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn eval_batch(seed: u64, n: usize, dim: usize) -> Tensor {
    let mut r = rng::seeded(seed ^ 0x5EED_E7A1);
    rng::normal_tensor(&mut r, &[n, dim], 1.0)
}

struct Trainer<'a> {
    task: &'a mut Task,
    cfg: &'a TrainConfig,
    seed: u64,
    block_q: Vec<BlockQuant>,
    step: usize,
    report: TrainReport,
    eval_x: Tensor,
    eval_y: Tensor,
}

impl<'a> Trainer<'a> {
    fn new(task: &'a mut Task, cfg: &'a TrainConfig, seed: u64, config: String) -> Result<Self> {
        cfg.validate()?;
        if task.teacher.len() != task.student.len() || task.teacher.dim() != task.student.dim() {
            return Err(Error::invalid("teacher and student architectures differ"));
        }
        let eval_x = eval_batch(seed, cfg.eval_batch, task.student.dim());
        let eval_y = task.teacher.forward_uniform(&eval_x, QuantConfig::FULL)?;
        let n = task.student.len();
        Ok(Self {
            task,
            cfg,
            seed,
            block_q: vec![BlockQuant::FULL; n],
            step: 0,
            report: TrainReport {
                seed,
                config,
                trace: vec![],
                stage_final_loss: vec![],
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                eval_by_bits: vec![],
                diverged_at: None,
                split_channels: 0,
                overrides: vec![],
            },
            eval_x,
            eval_y,
        })
    }

    fn quant(&self, w_bits: u8, a_bits: u8) -> Result<QuantConfig> {
        QuantConfig::new(w_bits, a_bits)?.with_group_size(self.cfg.group_size)
    }

    fn eval(&self, q: &[BlockQuant]) -> Result<f64> {
        mse(
            &self.task.student.forward_eval(&self.eval_x, q)?,
            &self.eval_y,
        )
    }

    fn teacher_q(&self) -> Result<Vec<BlockQuant>> {
        self.block_q
            .iter()
            .map(|q| {
                let up =
                    self.quant(self.cfg.blockwise.teacher_bits(q.up.w_bits), FULL_PRECISION)?;
                let down = self.quant(
                    self.cfg.blockwise.teacher_bits(q.down.w_bits),
                    FULL_PRECISION,
                )?;
                Ok(BlockQuant { up, down })
            })
            .collect()
    }

    /// Inputs of every layer on `x`, full precision: `(block input, hidden)`.
    fn layer_inputs(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::with_capacity(self.task.student.len());
        let mut h = x.clone();
        for b in self.task.student.blocks() {
            let hidden = b.hidden_eval(&h, &BlockQuant::FULL)?;
            let next = b.down.forward_eval(&hidden, &QuantConfig::FULL)?;
            out.push((h, hidden));
            h = next;
        }
        Ok(out)
    }

    fn calibration(&self, t: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let mut r = rng::seeded(self.seed ^ 0xCA11_B000 ^ t as u64);
        let x = rng::normal_tensor(&mut r, &[self.cfg.eval_batch, self.task.student.dim()], 1.0);
        self.layer_inputs(&x)
    }

    fn apply_ocs(&mut self, ocs_cfg: &OcsConfig, t: usize) -> Result<()> {
        let n = self.task.student.len();
        let sched = ocs::split_schedule(n, ocs_cfg.ratio_min, ocs_cfg.ratio_max)?;
        let inputs = self.calibration(t)?;
        for (b, (x_in, hidden)) in inputs.iter().enumerate() {
            let q = self.block_q[b];
            let ratio = sched.ratio(b + 1);
            let block = &mut self.task.student.blocks_mut()[b];
            for (layer, x, lq) in [
                (&mut block.up, x_in, q.up),
                (&mut block.down, hidden, q.down),
            ] {
                if lq.w_bits == FULL_PRECISION || layer.index_map().is_some() {
                    continue;
                }
                let stats = CalibrationStats::from_activations(x)?;
                let report = ocs::channel_metric(&stats, layer.weight(), ocs_cfg.metric)?;
                let plan = SplitPlan::from_report(&report, ratio)?;
                let steps = weight_steps(layer.weight(), &lq)?;
                self.report.split_channels += plan.channels().len();
                layer.apply_ocs(&plan, &StepSizes::PerElement(steps))?;
            }
        }
        Ok(())
    }

    fn kurtosis_gate(&mut self, tau: f64, t: usize) -> Result<()> {
        let inputs = self.calibration(t)?;
        for (b, (x_in, hidden)) in inputs.iter().enumerate() {
            let q = &mut self.block_q[b];
            for (name, x, lq) in [("up", x_in, &mut q.up), ("down", hidden, &mut q.down)] {
                if lq.a_bits != 2 {
                    continue;
                }
                let k = ocs::kurtosis(x.values());
                if k > tau {
                    lq.a_bits = 4;
                    self.report.overrides.push(LayerOverride {
                        block: b,
                        layer: name,
                        kurtosis: k,
                        a_bits: 4,
                    });
                }
            }
        }
        Ok(())
    }

    /// One SGD step on every block; returns the mean block loss.
    fn step(&mut self, x: &Tensor, teacher_q: &[BlockQuant]) -> Result<f64> {
        let n = self.task.student.len();
        let mut student_in = Vec::with_capacity(n);
        let mut reference_out = Vec::with_capacity(n);
        let (mut h, mut r) = (x.clone(), x.clone());
        for (i, tq) in teacher_q.iter().enumerate().take(n) {
            let next_h = self.task.student.blocks()[i].forward_eval(&h, tq)?;
            let next_r = self.task.teacher.blocks()[i].forward_eval(&r, &BlockQuant::FULL)?;
            student_in.push(std::mem::replace(&mut h, next_h));
            reference_out.push(next_r.clone());
            r = next_r;
        }
        let mut total = 0.0;
        for i in 0..n {
            let q = self.block_q[i];
            let block = &mut self.task.student.blocks_mut()[i];
            let y = block.forward(&student_in[i], &q)?;
            total += mse(&y, &reference_out[i])?;
            let g = block.backward(&mse_grad(&y, &reference_out[i])?)?;
            block.sgd_step(&g, self.cfg.lr)?;
        }
        Ok(total / n as f64)
    }

    fn record(&mut self, stage: usize, s: Stage, loss: f64) -> bool {
        self.report.trace.push(StepRecord {
            step: self.step,
            stage,
            w_bits: s.w_bits,
            a_bits: s.a_bits,
            loss,
        });
        self.step += 1;
        if !loss.is_finite() || !self.task.student.is_finite() {
            self.report.diverged_at = Some(self.step - 1);
            return false;
        }
        true
    }

    fn run_stage(&mut self, t: usize, stages: &[Stage], steps: usize) -> Result<bool> {
        let stage = stages[t];
        let qc = self.quant(stage.w_bits, stage.a_bits)?;
        let n = self.task.student.len();
        let mut rng = stage_rng(self.seed, t);
        let selected = match &self.cfg.sampling {
            None => (0..n).collect(),
            Some(s) => {
                let cov = s.coverage(t, stages.len());
                depth_biased_sample(n, s.alpha, cov, s.deterministic, &mut rng)?
            }
        };
        for &j in &selected {
            self.block_q[j] = BlockQuant::uniform(qc);
        }
        if t + 1 == stages.len() {
            if let Some(o) = self.cfg.ocs {
                self.apply_ocs(&o, t)?;
            }
        }
        if let Some(tau) = self.cfg.kurtosis_tau {
            self.kurtosis_gate(tau, t)?;
        }
        let teacher_q = self.teacher_q()?;
        let dim = self.task.student.dim();
        let mut last = f64::NAN;
        for _ in 0..steps {
            let x = rng::normal_tensor(&mut rng, &[self.cfg.batch, dim], 1.0);
            last = self.step(&x, &teacher_q)?;
            if !self.record(t, stage, last) {
                self.report.stage_final_loss.push(last);
                return Ok(false);
            }
        }
        self.report.stage_final_loss.push(last);
        Ok(true)
    }
}

/// Runs the schedule's stages in order on `task.student`, each starting
/// from the weights the previous one ended with.
pub fn train_progressive(
    task: &mut Task,
    schedule: &ScheduleVariant,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let stages: Vec<String> = schedule.stages.iter().map(Stage::to_string).collect();
    let echo = format!(
        "variant={} stages=[{}] steps_per_stage={} batch={} lr={} delta={} ocs={:?} sampling={:?} kurtosis_tau={:?}",
        schedule.variant.map_or("custom".into(), |v| format!("{v:?}")),
        stages.join(","),
        schedule.steps_per_stage,
        cfg.batch,
        cfg.lr,
        cfg.blockwise.delta,
        cfg.ocs,
        cfg.sampling,
        cfg.kurtosis_tau,
    );
    let mut tr = Trainer::new(task, cfg, seed, echo)?;
    let n = tr.task.student.len();
    let first = match schedule.stages.first() {
        Some(s) => BlockQuant::uniform(tr.quant(s.w_bits, s.a_bits)?),
        None => BlockQuant::FULL,
    };
    tr.report.initial_loss = tr.eval(&vec![first; n])?;
    for t in 0..schedule.stages.len() {
        if !tr.run_stage(t, &schedule.stages, schedule.steps_per_stage)? {
            break;
        }
    }
    tr.report.final_loss = if schedule.stages.is_empty() {
        tr.report.initial_loss
    } else if tr.report.diverged_at.is_some() {
        f64::NAN
    } else {
        tr.eval(&tr.block_q)?
    };
    if let Some(s) = schedule.stages.last() {
        tr.report.eval_by_bits = vec![(s.w_bits, tr.report.final_loss)];
    }
    Ok(tr.report)
}

/// Multi-bit training against shared master weights: the weights of every
/// layer are quantized once at the master width per step and each bit-width
/// of the current set sees the truncated view, with loss
/// `sum_b lambda_b MSE_b` per block.
pub fn train_curriculum(
    task: &mut Task,
    curriculum: &CurriculumConfig,
    steps_per_set: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    curriculum.validate()?;
    if steps_per_set == 0 {
        return Err(Error::invalid("steps_per_set must be >= 1"));
    }
    let echo = format!(
        "curriculum sets={:?} lambdas={:?} master_bits={} steps_per_set={steps_per_set} batch={} lr={}",
        curriculum.sets, curriculum.lambdas, curriculum.master_bits, cfg.batch, cfg.lr
    );
    let mut tr = Trainer::new(task, cfg, seed, echo)?;
    let n = tr.task.student.len();
    let h = curriculum.master_bits;
    let view = |tr: &Trainer, b: u8| -> Result<Vec<BlockQuant>> {
        let q = tr.quant(b, FULL_PRECISION)?.with_master(h)?;
        Ok(vec![BlockQuant::uniform(q); n])
    };
    let lowest = |set: &[u8]| *set.iter().min().expect("nonempty set");
    tr.report.initial_loss = tr.eval(&view(&tr, lowest(&curriculum.sets[0]))?)?;
    let dim = tr.task.student.dim();

    'sets: for (t, set) in curriculum.sets.iter().enumerate() {
        let label = Stage::new(lowest(set), FULL_PRECISION);
        let feed = view(&tr, h)?;
        let views: Vec<(f64, Vec<BlockQuant>)> = set
            .iter()
            .map(|&b| Ok((curriculum.lambda(b), view(&tr, b)?)))
            .collect::<Result<_>>()?;
        let mut rng = stage_rng(seed, t);
        let mut last = f64::NAN;
        for _ in 0..steps_per_set {
            let x = rng::normal_tensor(&mut rng, &[cfg.batch, dim], 1.0);
            let (mut hcur, mut r) = (x.clone(), x);
            let mut total = 0.0;
            for i in 0..n {
                let next_h = tr.task.student.blocks()[i].forward_eval(&hcur, &feed[i])?;
                let next_r = tr.task.teacher.blocks()[i].forward_eval(&r, &BlockQuant::FULL)?;
                let block = &mut tr.task.student.blocks_mut()[i];
                let mut acc: Option<BlockGrads> = None;
                for (lambda, q) in &views {
                    if *lambda == 0.0 {
                        continue;
                    }
                    let y = block.forward(&hcur, &q[i])?;
                    total += lambda * mse(&y, &next_r)?;
                    let mut g = block.backward(&mse_grad(&y, &next_r)?)?;
                    for t in [&mut g.up, &mut g.down] {
                        t.values_mut().iter_mut().for_each(|v| *v *= lambda);
                    }
                    acc = Some(match acc {
                        None => g,
                        Some(mut a) => {
                            for (x, y) in a.up.values_mut().iter_mut().zip(g.up.values()) {
                                *x += y;
                            }
                            for (x, y) in a.down.values_mut().iter_mut().zip(g.down.values()) {
                                *x += y;
                            }
                            a
                        }
                    });
                }
                if let Some(g) = acc {
                    block.sgd_step(&g, cfg.lr)?;
                }
                hcur = next_h;
                r = next_r;
            }
            last = total / n as f64;
            if !tr.record(t, label, last) {
                tr.report.stage_final_loss.push(last);
                break 'sets;
            }
        }
        tr.report.stage_final_loss.push(last);
    }
    if tr.report.diverged_at.is_some() {
        return Ok(tr.report);
    }
    let final_set = curriculum.sets.last().expect("validated");
    let mut by_bits = Vec::new();
    for &b in final_set {
        by_bits.push((b, tr.eval(&view(&tr, b)?)?));
    }
    by_bits.sort_by_key(|p| std::cmp::Reverse(p.0));
    tr.report.final_loss = by_bits.last().map_or(f64::NAN, |p| p.1);
    tr.report.eval_by_bits = by_bits;
    Ok(tr.report)
}

/// Quantized weight views of every layer, used when reporting what a
/// trained student looks like at a given width.
pub fn quantized_weights(model: &ToyModel, cfg: &QuantConfig) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for b in model.blocks() {
        out.push(fake_quant_weight(b.up.weight(), cfg)?);
        out.push(fake_quant_weight(b.down.weight(), cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nested::make_master;
    use crate::qat::schedule::{schedule_stages, Variant};
    use crate::quant::GroupLayout;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch: 16,
            eval_batch: 64,
            ..Default::default()
        }
    }

    #[test]
    fn full_precision_stage_reduces_loss() {
        let mut task = toy_task(2, 16, 0.3, 1).unwrap();
        let sched = ScheduleVariant::custom(vec![Stage::new(16, 16)], 60).unwrap();
        let rep = train_progressive(&mut task, &sched, &small_cfg(), 1).unwrap();
        assert_eq!(rep.trace.len(), 60);
        assert!(rep.final_loss < rep.initial_loss);
        assert!(rep.trace.last().unwrap().loss < rep.trace[0].loss);
    }

    #[test]
    fn empty_schedule_echoes_initial_loss() {
        let mut task = toy_task(2, 8, 0.3, 2).unwrap();
        let before = task.clone();
        let sched = ScheduleVariant::custom(vec![], 0).unwrap();
        let rep = train_progressive(&mut task, &sched, &small_cfg(), 2).unwrap();
        assert!(rep.trace.is_empty());
        assert_eq!(rep.final_loss, rep.initial_loss);
        assert_eq!(task, before);
    }

    #[test]
    fn runs_are_deterministic() {
        let sched = schedule_stages(Variant::A, 3).unwrap();
        let run = || {
            let mut task = toy_task(2, 8, 0.3, 3).unwrap();
            train_progressive(&mut task, &sched, &small_cfg(), 3).unwrap()
        };
        assert_eq!(run(), run());
        let rep = run();
        assert_eq!(rep.trace.len(), sched.total_steps());
        assert_eq!(rep.stage_final_loss.len(), 6);
        let csv = rep.to_csv();
        assert!(csv.starts_with("step,stage,w_bits,a_bits,loss\n"));
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,8,16,"));
    }

    #[test]
    fn stages_continue_from_previous_weights() {
        let cfg = small_cfg();
        let two = ScheduleVariant::custom(vec![Stage::new(8, 16), Stage::new(4, 16)], 4).unwrap();
        let mut a = toy_task(2, 8, 0.3, 4).unwrap();
        train_progressive(&mut a, &two, &cfg, 4).unwrap();

        // Running only the first stage leaves the weights the second stage
        // starts from; their stage-1 trace matches the two-stage run.
        let one = ScheduleVariant::custom(vec![Stage::new(8, 16)], 4).unwrap();
        let mut b = toy_task(2, 8, 0.3, 4).unwrap();
        let rb = train_progressive(&mut b, &one, &cfg, 4).unwrap();
        let mut c = toy_task(2, 8, 0.3, 4).unwrap();
        let rc = train_progressive(&mut c, &two, &cfg, 4).unwrap();
        assert_eq!(rb.trace[..], rc.trace[..4]);
        assert_eq!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn blockwise_loss_cases() {
        let task = toy_task(1, 8, 0.0, 5).unwrap();
        let mut r = rng::seeded(5);
        let x = rng::normal_tensor(&mut r, &[6, 8], 1.0);
        let b = &task.student.blocks()[0];
        let y = task.teacher.blocks()[0]
            .forward_eval(&x, &BlockQuant::FULL)
            .unwrap();
        assert_eq!(blockwise_loss(b, &x, &BlockQuant::FULL, &y).unwrap(), 0.0);

        // Permuting the batch leaves the loss unchanged.
        let q = BlockQuant::uniform(QuantConfig::new(2, 16).unwrap());
        let l = blockwise_loss(b, &x, &q, &y).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let py = Tensor::from_rows(&perm.iter().map(|&i| y.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let lp = blockwise_loss(b, &px, &q, &py).unwrap();
        assert!((l - lp).abs() <= 1e-15 * l.max(1.0));
    }

    #[test]
    fn single_layer_loss_expands_directly() {
        let mut r = rng::seeded(6);
        let w = rng::normal_tensor(&mut r, &[8, 3], 1.0);
        let x = rng::normal_tensor(&mut r, &[5, 8], 1.0);
        let layer = crate::qat::QuantLinear::new(w.clone()).unwrap();
        let cfg = QuantConfig::new(2, 16).unwrap();
        let w_hat = layer.weight_hat(&cfg).unwrap();
        let y = layer.forward_eval(&x, &QuantConfig::FULL).unwrap();
        let got = mse(&layer.forward_eval(&x, &cfg).unwrap(), &y).unwrap();
        let mut want = 0.0;
        for b in 0..5 {
            for j in 0..3 {
                let d: f64 = (0..8)
                    .map(|i| x.get(b, i) * (w_hat.get(i, j) - w.get(i, j)))
                    .sum();
                want += d * d;
            }
        }
        want /= 15.0;
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn curriculum_loss_properties() {
        let mut r = rng::seeded(7);
        let x = rng::normal_tensor(&mut r, &[10, 4], 1.0);
        // Codes that are multiples of 64 keep their value under every
        // truncation, so all views coincide.
        let layout = GroupLayout::new(8).unwrap();
        let params = vec![crate::quant::GroupQuantParams::new(0.01, 100, 8).unwrap(); 4];
        let codes = (0..32).map(|i| [0u8, 64, 128, 192][(i * 3) % 4]).collect();
        let m = MasterCode::from_parts(
            8,
            8,
            vec![4, 8],
            layout,
            params,
            codes,
            crate::quant::ScaleFormat::Exact,
        )
        .unwrap();
        assert_eq!(m.dequantize_at(2).unwrap(), m.dequantize_at(8).unwrap());
        let y = matmul(&x, &m.dequantize_at(8).unwrap());
        let cc = CurriculumConfig::default();
        assert_eq!(curriculum_loss(&m, &x, &y, &[8, 4, 2], &cc).unwrap(), 0.0);

        let w = rng::normal_tensor(&mut r, &[4, 8], 1.0);
        let m = make_master(&w, GroupLayout::default(), 8).unwrap();
        let y = rng::normal_tensor(&mut r, &[10, 8], 1.0);
        let zero = CurriculumConfig {
            lambdas: vec![(8, 0.0), (4, 0.0), (2, 0.0)],
            ..Default::default()
        };
        assert_eq!(curriculum_loss(&m, &x, &y, &[8, 4, 2], &zero).unwrap(), 0.0);
        let cc = CurriculumConfig {
            lambdas: vec![(4, 0.7)],
            ..Default::default()
        };
        let l8 = curriculum_loss(&m, &x, &y, &[8], &cc).unwrap();
        let l84 = curriculum_loss(&m, &x, &y, &[8, 4], &cc).unwrap();
        let mse4 = mse(&matmul(&x, &m.dequantize_at(4).unwrap()), &y).unwrap();
        assert!((l84 - (l8 + 0.7 * mse4)).abs() <= 1e-12 * l84);
    }

    #[test]
    fn curriculum_training_runs() {
        let mut task = toy_task(2, 8, 0.3, 8).unwrap();
        let rep =
            train_curriculum(&mut task, &CurriculumConfig::default(), 5, &small_cfg(), 8).unwrap();
        assert_eq!(rep.trace.len(), 15);
        let bits: Vec<u8> = rep.eval_by_bits.iter().map(|p| p.0).collect();
        assert_eq!(bits, vec![8, 4, 2]);
        assert!(rep.eval_by_bits.iter().all(|p| p.1.is_finite()));
        assert!(
            train_curriculum(&mut task, &CurriculumConfig::default(), 0, &small_cfg(), 8).is_err()
        );
    }

    #[test]
    fn ocs_before_final_stage_widens_layers() {
        let mut task = toy_task(2, 32, 0.3, 9).unwrap();
        let cfg = TrainConfig {
            ocs: Some(OcsConfig::default()),
            ..small_cfg()
        };
        let sched = ScheduleVariant::progressive_weights(2).unwrap();
        let rep = train_progressive(&mut task, &sched, &cfg, 9).unwrap();
        // ceil(0.1 * 32) + ceil(0.1 * 128) per block.
        assert_eq!(rep.split_channels, 2 * (4 + 13));
        let b = &task.student.blocks()[0];
        assert_eq!(b.up.widened_dim(), 36);
        assert_eq!(b.down.widened_dim(), 141);
        assert!(rep.final_loss.is_finite());
    }

    #[test]
    fn kurtosis_gate_raises_heavy_tailed_layers() {
        let mut task = toy_task(2, 16, 0.3, 10).unwrap();
        let cfg = TrainConfig {
            kurtosis_tau: Some(0.0),
            ..small_cfg()
        };
        let sched = ScheduleVariant::custom(vec![Stage::new(2, 2)], 1).unwrap();
        let rep = train_progressive(&mut task, &sched, &cfg, 10).unwrap();
        assert_eq!(rep.overrides.len(), 4);
        assert!(rep.overrides.iter().all(|o| o.a_bits == 4));

        let cfg = TrainConfig {
            kurtosis_tau: Some(1e9),
            ..small_cfg()
        };
        let rep = train_progressive(&mut task, &sched, &cfg, 10).unwrap();
        assert!(rep.overrides.is_empty());
    }

    #[test]
    fn sampled_blocks_only_take_stage_precision() {
        let mut task = toy_task(4, 8, 0.3, 11).unwrap();
        let cfg = TrainConfig {
            sampling: Some(BlockSamplingConfig {
                deterministic: true,
                first_coverage: 0.5,
                alpha: 1.0,
            }),
            ..small_cfg()
        };
        let sched = ScheduleVariant::progressive_weights(2).unwrap();
        let rep = train_progressive(&mut task, &sched, &cfg, 11).unwrap();
        assert_eq!(rep.trace.len(), 6);
        assert!(rep.final_loss.is_finite());
    }

    #[test]
    fn divergence_stops_training() {
        let mut task = toy_task(2, 8, 0.3, 12).unwrap();
        let cfg = TrainConfig {
            lr: 1e6,
            ..small_cfg()
        };
        let sched = ScheduleVariant::custom(vec![Stage::new(16, 16)], 50).unwrap();
        let rep = train_progressive(&mut task, &sched, &cfg, 12).unwrap();
        let at = rep.diverged_at.expect("diverges");
        assert_eq!(rep.trace.len(), at + 1);
    }
}
