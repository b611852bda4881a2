//! Precision schedules, teacher bit-widths, curriculum bit sets and
//! depth-biased block sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use super::model::FULL_PRECISION;
use crate::error::{Error, Result};
use crate::quant::{check_bits, MAX_BITS};
use crate::rng::Rng;

/// One stage of a schedule: weight and activation widths (16 = unquantized).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub w_bits: u8,
    pub a_bits: u8,
}

impl Stage {
    pub const fn new(w_bits: u8, a_bits: u8) -> Self {
        Self { w_bits, a_bits }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}a{}", self.w_bits, self.a_bits)
    }
}

/// Named stage orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Weights down first, then activations.
    A,
    /// Activations down first, then weights.
    B,
    /// Weights and activations alternately.
    C,
    /// Warm up to 4 bits, cycle between 3 and 2, then lower activations.
    D,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            _ => Err(Error::invalid(format!("unknown schedule variant `{s}`"))),
        }
    }
}

impl Variant {
    pub fn stages(self) -> Vec<Stage> {
        const S: fn(u8, u8) -> Stage = Stage::new;
        match self {
            Variant::A => vec![S(8, 16), S(4, 16), S(2, 16), S(2, 8), S(2, 4), S(2, 2)],
            Variant::B => vec![S(16, 8), S(16, 4), S(16, 2), S(8, 2), S(4, 2), S(2, 2)],
            Variant::C => vec![S(8, 16), S(8, 8), S(4, 8), S(4, 4), S(2, 4), S(2, 2)],
            Variant::D => vec![
                S(8, 16),
                S(4, 16),
                S(3, 16),
                S(2, 16),
                S(3, 16),
                S(2, 16),
                S(2, 8),
                S(2, 4),
                S(2, 2),
            ],
        }
    }
}

/// Ordered stages, each run for the same number of steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleVariant {
    pub variant: Option<Variant>,
    pub stages: Vec<Stage>,
    pub steps_per_stage: usize,
}

fn check_width(bits: u8) -> Result<()> {
    if bits == FULL_PRECISION {
        Ok(())
    } else {
        check_bits(bits)
    }
}

impl ScheduleVariant {
    /// Arbitrary stage list. An empty list is allowed and trains nothing.
    pub fn custom(stages: Vec<Stage>, steps_per_stage: usize) -> Result<Self> {
        if steps_per_stage == 0 && !stages.is_empty() {
            return Err(Error::invalid("steps_per_stage must be >= 1"));
        }
        for s in &stages {
            check_width(s.w_bits)?;
            check_width(s.a_bits)?;
        }
        Ok(Self {
            variant: None,
            stages,
            steps_per_stage,
        })
    }

    /// Weight-only `8 -> 4 -> 2`.
    pub fn progressive_weights(steps_per_stage: usize) -> Result<Self> {
        Self::custom(
            vec![Stage::new(8, 16), Stage::new(4, 16), Stage::new(2, 16)],
            steps_per_stage,
        )
    }

    /// `stages` repeats of the same 2-bit weight-only stage, the equal-budget
    /// counterpart of [`ScheduleVariant::progressive_weights`].
    pub fn direct(w_bits: u8, stages: usize, steps_per_stage: usize) -> Result<Self> {
        Self::custom(vec![Stage::new(w_bits, 16); stages], steps_per_stage)
    }

    pub fn total_steps(&self) -> usize {
        self.stages.len() * self.steps_per_stage
    }
}

pub fn schedule_stages(variant: Variant, steps_per_stage: usize) -> Result<ScheduleVariant> {
    if steps_per_stage == 0 {
        return Err(Error::invalid(
            "empty schedule: steps_per_stage must be >= 1",
        ));
    }
    Ok(ScheduleVariant {
        variant: Some(variant),
        stages: variant.stages(),
        steps_per_stage,
    })
}

/// Teacher precision for the block-wise loss: preceding blocks run at
/// `k + delta` weight bits, where anything above 8 means full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockwiseConfig {
    pub delta: u8,
}

impl Default for BlockwiseConfig {
    fn default() -> Self {
        Self { delta: 2 }
    }
}

impl BlockwiseConfig {
    pub fn teacher_bits(&self, k: u8) -> u8 {
        if k == FULL_PRECISION || k as u32 + self.delta as u32 > MAX_BITS as u32 {
            FULL_PRECISION
        } else {
            k + self.delta
        }
    }
}

/// Expanding bit sets trained against shared master weights, with a weight
/// per bit-width.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumConfig {
    pub sets: Vec<Vec<u8>>,
    /// `(bits, lambda)` pairs; bit-widths not listed weigh 1.
    pub lambdas: Vec<(u8, f64)>,
    pub master_bits: u8,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            sets: vec![vec![8], vec![8, 4], vec![8, 4, 2]],
            lambdas: vec![],
            master_bits: 8,
        }
    }
}

impl CurriculumConfig {
    pub fn lambda(&self, bits: u8) -> f64 {
        self.lambdas
            .iter()
            .find(|(b, _)| *b == bits)
            .map_or(1.0, |(_, l)| *l)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.master_bits)?;
        if self.sets.is_empty() {
            return Err(Error::invalid("curriculum needs at least one bit set"));
        }
        for (i, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid("curriculum bit sets must be nonempty"));
            }
            for &b in set {
                check_bits(b)?;
                if b > self.master_bits {
                    return Err(Error::invalid(format!(
                        "bit-width {b} exceeds master width {}",
                        self.master_bits
                    )));
                }
            }
            if i > 0 && !self.sets[i - 1].iter().all(|b| set.contains(b)) {
                return Err(Error::invalid(
                    "curriculum bit sets must expand monotonically",
                ));
            }
        }
        if self
            .lambdas
            .iter()
            .any(|(_, l)| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(Error::invalid("curriculum weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Which blocks take the stage's precision at each stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSamplingConfig {
    /// Depth-bias exponent; 0 is uniform.
    pub alpha: f64,
    /// Coverage at the first stage; grows linearly to 1 at the last.
    pub first_coverage: f64,
    /// Take the first blocks instead of sampling.
    pub deterministic: bool,
}

impl Default for BlockSamplingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            first_coverage: 0.3,
            deterministic: false,
        }
    }
}

impl BlockSamplingConfig {
    /// Coverage ratio at stage `t` of `stages` (0-based).
    pub fn coverage(&self, t: usize, stages: usize) -> f64 {
        if stages <= 1 {
            return 1.0;
        }
        self.first_coverage + (1.0 - self.first_coverage) * t as f64 / (stages - 1) as f64
    }
}

/// `p_j` proportional to `(L + 1 - j)^alpha` for blocks `j = 1..=L`.
pub fn block_probabilities(l: usize, alpha: f64) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(Error::invalid("need at least one block"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("depth bias {alpha} must be >= 0")));
    }
    let w: Vec<f64> = (1..=l).map(|j| ((l + 1 - j) as f64).powf(alpha)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Draws `floor(coverage * L)` distinct 0-based block indices, returned in
/// ascending order.
pub fn depth_biased_sample(
    l: usize,
    alpha: f64,
    coverage: f64,
    deterministic: bool,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!(
            "coverage {coverage} outside (0, 1]"
        )));
    }
    let mut p = block_probabilities(l, alpha)?;
    let k = (coverage * l as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "coverage {coverage} of {l} blocks selects no block"
        )));
    }
    if deterministic || k == l {
        return Ok((0..k).collect());
    }
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = p.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = p.iter().rposition(|&v| v > 0.0).expect("mass left");
        for (j, &v) in p.iter().enumerate() {
            acc += v;
            if v > 0.0 && u < acc {
                pick = j;
                break;
            }
        }
        chosen.push(pick);
        p[pick] = 0.0;
    }
    chosen.sort_unstable();
    Ok(chosen)
}
