//! Fake-quantized linear layers and the MLP block stack they form.

use crate::error::{Error, Result};
use crate::nested;
use crate::ocs::{self, SplitPlan, StepSizes};
use crate::quant::{self, check_bits, GroupLayout, DEFAULT_GROUP_SIZE};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Bit-width sentinel meaning "not quantized".
pub const FULL_PRECISION: u8 = 16;

/// Quantization applied inside one linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub w_bits: u8,
    pub a_bits: u8,
    pub group_size: usize,
    /// When set, weights are quantized once at this width and the `w_bits`
    /// view is taken by truncating the codes.
    pub master_bits: Option<u8>,
}

fn check_width(bits: u8) -> Result<()> {
    if bits == FULL_PRECISION {
        Ok(())
    } else {
        check_bits(bits)
    }
}

impl QuantConfig {
    pub const FULL: QuantConfig = QuantConfig {
        w_bits: FULL_PRECISION,
        a_bits: FULL_PRECISION,
        group_size: DEFAULT_GROUP_SIZE,
        master_bits: None,
    };

    pub fn new(w_bits: u8, a_bits: u8) -> Result<Self> {
        check_width(w_bits)?;
        check_width(a_bits)?;
        Ok(Self {
            w_bits,
            a_bits,
            ..Self::FULL
        })
    }

    pub fn with_group_size(mut self, g: usize) -> Result<Self> {
        GroupLayout::new(g)?;
        self.group_size = g;
        Ok(self)
    }

    pub fn with_master(mut self, h: u8) -> Result<Self> {
        check_bits(h)?;
        if self.w_bits != FULL_PRECISION && self.w_bits > h {
            return Err(Error::invalid(format!(
                "view width {} exceeds master width {h}",
                self.w_bits
            )));
        }
        self.master_bits = Some(h);
        Ok(self)
    }

    pub fn is_full(&self) -> bool {
        self.w_bits == FULL_PRECISION && self.a_bits == FULL_PRECISION
    }

    fn layout(&self) -> GroupLayout {
        GroupLayout {
            group_size: self.group_size,
        }
    }
}

/// Quantize-dequantize of an `in x out` weight. Groups run along the input
/// dimension of each output column, with a short last group when the input
/// width is not a multiple of the group size.
pub fn fake_quant_weight(w: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if cfg.w_bits == FULL_PRECISION {
        return Ok(w.clone());
    }
    let wt = w.transpose();
    let (out, inp) = wt.matrix_dims();
    let mut vals = Vec::with_capacity(out * inp);
    for r in 0..out {
        let row = wt.row(r);
        match cfg.master_bits {
            None => vals.extend(quant::fake_quant(row, cfg.layout(), cfg.w_bits)?),
            Some(h) => {
                let m = nested::make_master(&Tensor::vector(row.to_vec())?, cfg.layout(), h)?;
                vals.extend(m.dequantize_at(cfg.w_bits)?.into_values());
            }
        }
    }
    Ok(Tensor::from_raw(vec![out, inp], vals).transpose())
}

/// Per-element step sizes that [`fake_quant_weight`] uses for `w`, in `w`'s
/// own `in x out` layout.
pub fn weight_steps(w: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    check_bits(cfg.w_bits)?;
    let bits = cfg.master_bits.unwrap_or(cfg.w_bits);
    let wt = w.transpose();
    let (out, inp) = wt.matrix_dims();
    let mut vals = Vec::with_capacity(out * inp);
    for r in 0..out {
        let row = wt.row(r);
        for g in cfg.layout().ranges(inp) {
            let p = quant::compute_group_params(&row[g.clone()], bits)?;
            vals.extend(std::iter::repeat_n(p.scale, g.len()));
        }
    }
    Ok(Tensor::from_raw(vec![out, inp], vals).transpose())
}

/// Dynamic activation quantize-dequantize, per batch row, group-wise along
/// the feature dimension.
pub fn fake_quant_activations(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if cfg.a_bits == FULL_PRECISION {
        return Ok(x.clone());
    }
    let (rows, _) = x.matrix_dims();
    let mut vals = Vec::with_capacity(x.len());
    for r in 0..rows {
        vals.extend(quant::fake_quant(x.row(r), cfg.layout(), cfg.a_bits)?);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), vals))
}

/// `a b` for `m x k` and `k x n` matrices.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.matrix_dims();
    let (k2, n) = b.matrix_dims();
    assert_eq!(k, k2, "matmul inner dimensions");
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `a^T b` for `m x k` and `m x n` matrices.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.matrix_dims();
    let (m2, n) = b.matrix_dims();
    assert_eq!(m, m2, "matmul_tn outer dimensions");
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &bv[i * n..(i + 1) * n];
        for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &b) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * b;
            }
        }
    }
    Tensor::from_raw(vec![k, n], out)
}

/// `a b^T` for `m x n` and `k x n` matrices.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = a.matrix_dims();
    let (k, n2) = b.matrix_dims();
    assert_eq!(n, n2, "matmul_nt inner dimensions");
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &av[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = arow
                .iter()
                .zip(&bv[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    Tensor::from_raw(vec![m, k], out)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("shape mismatch in mse gradient"));
    }
    let k = 2.0 / a.len().max(1) as f64;
    Ok(Tensor::from_raw(
        a.shape().to_vec(),
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| k * (x - y))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
struct LinearCache {
    x_hat: Tensor,
    w_hat: Tensor,
    batch: usize,
    generation: u64,
}

/// Gradients returned by [`QuantLinear::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    /// `dL/dW`, passed straight through the weight quantizer.
    pub weight: Tensor,
    /// `dL/dx` for the layer's original (unwidened) input.
    pub input: Tensor,
}

/// `y = Q_a(x) Q_w(W)` with `W: in x out`. After outlier channel splitting
/// the stored weight is wider than the input and `index_map` says which
/// input feature feeds each weight row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear {
    weight: Tensor,
    input_dim: usize,
    index_map: Option<Vec<usize>>,
    generation: u64,
    cache: Option<LinearCache>,
}

impl QuantLinear {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self {
            input_dim: weight.rows(),
            weight,
            index_map: None,
            generation: 0,
            cache: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Rows of the stored weight, `input_dim` plus any split copies.
    pub fn widened_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn index_map(&self) -> Option<&[usize]> {
        self.index_map.as_deref()
    }

    /// Replaces the weight (same shape) and invalidates any cached forward.
    pub fn set_weight(&mut self, w: Tensor) -> Result<()> {
        if w.shape() != self.weight.shape() {
            return Err(Error::invalid(format!(
                "weight shape {:?} does not match {:?}",
                w.shape(),
                self.weight.shape()
            )));
        }
        self.weight = w;
        self.generation += 1;
        Ok(())
    }

    /// `W <- W - lr * grad`.
    pub fn sgd_step(&mut self, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.shape() != self.weight.shape() {
            return Err(Error::invalid("gradient shape does not match weight"));
        }
        for (w, g) in self.weight.values_mut().iter_mut().zip(grad.values()) {
            *w -= lr * g;
        }
        self.generation += 1;
        Ok(())
    }

    fn widen(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.matrix_dims();
        if cols != self.input_dim {
            return Err(Error::invalid(format!(
                "input has {cols} features, layer expects {}",
                self.input_dim
            )));
        }
        let Some(map) = &self.index_map else {
            return Ok(x.clone());
        };
        let mut out = Vec::with_capacity(rows * map.len());
        for r in 0..rows {
            let row = x.row(r);
            out.extend(map.iter().map(|&c| row[c]));
        }
        Ok(Tensor::from_raw(vec![rows, map.len()], out))
    }

    fn prepare(&self, x: &Tensor, cfg: &QuantConfig) -> Result<(Tensor, Tensor)> {
        let x_hat = fake_quant_activations(&self.widen(x)?, cfg)?;
        let w_hat = fake_quant_weight(&self.weight, cfg)?;
        Ok((x_hat, w_hat))
    }

    /// The quantized weight the forward pass multiplies by.
    pub fn weight_hat(&self, cfg: &QuantConfig) -> Result<Tensor> {
        fake_quant_weight(&self.weight, cfg)
    }

    /// Forward pass without caching.
    pub fn forward_eval(&self, x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
        let (x_hat, w_hat) = self.prepare(x, cfg)?;
        Ok(matmul(&x_hat, &w_hat))
    }

    /// Forward pass that records what [`QuantLinear::backward`] needs.
    pub fn forward(&mut self, x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
        let (x_hat, w_hat) = self.prepare(x, cfg)?;
        let y = matmul(&x_hat, &w_hat);
        self.cache = Some(LinearCache {
            batch: x.rows(),
            x_hat,
            w_hat,
            generation: self.generation,
        });
        Ok(y)
    }

    /// Straight-through backward: `dL/dW = Q_a(x)^T dy`, `dL/dx = dy Q_w(W)^T`
    /// with split copies summed back onto their source feature.
    pub fn backward(&self, dy: &Tensor) -> Result<LinearGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidState("backward called before forward".into()))?;
        if cache.generation != self.generation {
            return Err(Error::InvalidState(
                "weights changed since the cached forward pass".into(),
            ));
        }
        if dy.matrix_dims() != (cache.batch, self.output_dim()) {
            return Err(Error::invalid(format!(
                "upstream gradient shape {:?} does not match output ({}, {})",
                dy.shape(),
                cache.batch,
                self.output_dim()
            )));
        }
        let weight = matmul_tn(&cache.x_hat, dy);
        let dxw = matmul_nt(dy, &cache.w_hat);
        let input = match &self.index_map {
            None => dxw,
            Some(map) => {
                let mut dx = vec![0.0; cache.batch * self.input_dim];
                for r in 0..cache.batch {
                    for (k, &c) in map.iter().enumerate() {
                        dx[r * self.input_dim + c] += dxw.get(r, k);
                    }
                }
                Tensor::from_raw(vec![cache.batch, self.input_dim], dx)
            }
        };
        Ok(LinearGrads { weight, input })
    }

    /// Duplicates the planned input channels with the rounding-aware split.
    pub fn apply_ocs(&mut self, plan: &SplitPlan, steps: &StepSizes) -> Result<()> {
        if self.index_map.is_some() {
            return Err(Error::InvalidState("layer is already split".into()));
        }
        let layer = ocs::apply_ocs(&self.weight, plan, steps)?;
        self.weight = layer.weight;
        self.index_map = Some(layer.index_map);
        self.generation += 1;
        self.cache = None;
        Ok(())
    }
}

/// Quantization of the two layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockQuant {
    pub up: QuantConfig,
    pub down: QuantConfig,
}

impl BlockQuant {
    pub const FULL: BlockQuant = BlockQuant {
        up: QuantConfig::FULL,
        down: QuantConfig::FULL,
    };

    pub fn uniform(cfg: QuantConfig) -> Self {
        Self { up: cfg, down: cfg }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub up: Tensor,
    pub down: Tensor,
    pub input: Tensor,
}

/// `relu(x W_up) W_down` with `W_up: d x 4d` and `W_down: 4d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub up: QuantLinear,
    pub down: QuantLinear,
    mask: Option<Vec<bool>>,
}

impl Block {
    pub fn new(up: Tensor, down: Tensor) -> Result<Self> {
        let (up, down) = (QuantLinear::new(up)?, QuantLinear::new(down)?);
        if up.output_dim() != down.input_dim() || down.output_dim() != up.input_dim() {
            return Err(Error::invalid("block layers do not chain d -> h -> d"));
        }
        Ok(Self {
            up,
            down,
            mask: None,
        })
    }

    /// He-normal initialization.
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        let up = rng::normal_tensor(rng, &[dim, hidden], (2.0 / dim as f64).sqrt());
        let down = rng::normal_tensor(rng, &[hidden, dim], (1.0 / hidden as f64).sqrt());
        Self::new(up, down).expect("consistent shapes")
    }

    pub fn dim(&self) -> usize {
        self.up.input_dim()
    }

    /// Input to the down projection.
    pub fn hidden_eval(&self, x: &Tensor, q: &BlockQuant) -> Result<Tensor> {
        let mut h = self.up.forward_eval(x, &q.up)?;
        for v in h.values_mut() {
            *v = v.max(0.0);
        }
        Ok(h)
    }

    pub fn forward_eval(&self, x: &Tensor, q: &BlockQuant) -> Result<Tensor> {
        self.down.forward_eval(&self.hidden_eval(x, q)?, &q.down)
    }

    pub fn forward(&mut self, x: &Tensor, q: &BlockQuant) -> Result<Tensor> {
        let mut h = self.up.forward(x, &q.up)?;
        let mut mask = Vec::with_capacity(h.len());
        for v in h.values_mut() {
            mask.push(*v > 0.0);
            *v = v.max(0.0);
        }
        self.mask = Some(mask);
        self.down.forward(&h, &q.down)
    }

    pub fn backward(&self, dy: &Tensor) -> Result<BlockGrads> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidState("backward called before forward".into()))?;
        let down = self.down.backward(dy)?;
        let mut dh = down.input;
        for (g, &m) in dh.values_mut().iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        let up = self.up.backward(&dh)?;
        Ok(BlockGrads {
            up: up.weight,
            down: down.weight,
            input: up.input,
        })
    }

    pub fn sgd_step(&mut self, g: &BlockGrads, lr: f64) -> Result<()> {
        self.up.sgd_step(&g.up, lr)?;
        self.down.sgd_step(&g.down, lr)
    }

    pub fn is_finite(&self) -> bool {
        self.up.weight().is_finite() && self.down.weight().is_finite()
    }
}

/// Stack of [`Block`]s of width `dim` and hidden width `4 * dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    blocks: Vec<Block>,
}

impl ToyModel {
    pub fn new(rng: &mut Rng, blocks: usize, dim: usize) -> Result<Self> {
        if blocks == 0 || dim == 0 {
            return Err(Error::invalid(
                "model needs at least one block of width >= 1",
            ));
        }
        Ok(Self {
            blocks: (0..blocks)
                .map(|_| Block::init(rng, dim, 4 * dim))
                .collect(),
        })
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        let Some(d) = blocks.first().map(Block::dim) else {
            return Err(Error::invalid("model needs at least one block"));
        };
        if blocks.iter().any(|b| b.dim() != d) {
            return Err(Error::invalid("blocks disagree on width"));
        }
        Ok(Self { blocks })
    }

    /// Copy with Gaussian noise added to every weight, scaled per layer by
    /// `noise` times the layer's RMS weight.
    pub fn perturbed(&self, rng: &mut Rng, noise: f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for layer in [&mut b.up, &mut b.down] {
                let w = layer.weight();
                let rms = w.frobenius_norm() / (w.len() as f64).sqrt();
                let n = rng::normal_tensor(rng, w.shape(), noise * rms);
                let vals = w
                    .values()
                    .iter()
                    .zip(n.values())
                    .map(|(a, b)| a + b)
                    .collect();
                layer
                    .set_weight(Tensor::from_raw(w.shape().to_vec(), vals))
                    .expect("same shape");
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Block::is_finite)
    }

    pub fn forward_eval(&self, x: &Tensor, q: &[BlockQuant]) -> Result<Tensor> {
        if q.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "{} block configs for {} blocks",
                q.len(),
                self.blocks.len()
            )));
        }
        let mut h = x.clone();
        for (b, q) in self.blocks.iter().zip(q) {
            h = b.forward_eval(&h, q)?;
        }
        Ok(h)
    }

    pub fn forward_uniform(&self, x: &Tensor, cfg: QuantConfig) -> Result<Tensor> {
        self.forward_eval(x, &vec![BlockQuant::uniform(cfg); self.blocks.len()])
    }

    /// Total number of weights.
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.up.weight().len() + b.down.weight().len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocs::SplitPlan;

    fn plain_linear(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (m, k) = x.matrix_dims();
        let n = w.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| x.get(i, p) * w.get(p, j)).sum();
            }
        }
        out
    }

    fn random_layer(seed: u64, inp: usize, out: usize, batch: usize) -> (QuantLinear, Tensor) {
        let mut r = rng::seeded(seed);
        let w = rng::normal_tensor(&mut r, &[inp, out], 0.3);
        let x = rng::normal_tensor(&mut r, &[batch, inp], 1.0);
        (QuantLinear::new(w).unwrap(), x)
    }

    #[test]
    fn full_precision_forward_is_plain_linear() {
        let (l, x) = random_layer(1, 32, 8, 5);
        let y = l.forward_eval(&x, &QuantConfig::FULL).unwrap();
        let want = plain_linear(&x, l.weight());
        assert!(crate::tensor::max_rel_err(y.values(), &want) < 1e-14);
    }

    #[test]
    fn on_grid_weights_pass_unchanged() {
        // Each column holds all four levels of {0, 1, 2, 3} * 0.5 - 0.5.
        let levels = [-0.5, 0.0, 0.5, 1.0];
        let w = Tensor::new(
            vec![8, 3],
            (0..24).map(|i| levels[(i / 3 + i % 3) % 4]).collect(),
        )
        .unwrap();
        let cfg = QuantConfig::new(2, 16).unwrap();
        assert_eq!(fake_quant_weight(&w, &cfg).unwrap(), w);
    }

    #[test]
    fn weight_perturbation_bounded_by_half_step() {
        let (l, x) = random_layer(2, 64, 16, 4);
        let cfg = QuantConfig::new(2, 16).unwrap();
        let w_hat = l.weight_hat(&cfg).unwrap();
        let steps = weight_steps(l.weight(), &cfg).unwrap();
        for ((w, wh), s) in l
            .weight()
            .values()
            .iter()
            .zip(w_hat.values())
            .zip(steps.values())
        {
            assert!((w - wh).abs() <= s / 2.0 + 1e-12);
        }
        // Output deviation per element bounded by sum_i |x_i| s_i / 2.
        let y = l.forward_eval(&x, &cfg).unwrap();
        let y_fp = l.forward_eval(&x, &QuantConfig::FULL).unwrap();
        for b in 0..4 {
            for j in 0..16 {
                let bound: f64 = (0..64)
                    .map(|i| x.get(b, i).abs() * steps.get(i, j) / 2.0)
                    .sum();
                assert!((y.get(b, j) - y_fp.get(b, j)).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn full_precision_backward_matches_closed_form() {
        let (mut l, x) = random_layer(3, 6, 4, 3);
        l.forward(&x, &QuantConfig::FULL).unwrap();
        let dy = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let g = l.backward(&dy).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|b| x.get(b, i) * dy.get(b, j)).sum();
                assert!((g.weight.get(i, j) - want).abs() < 1e-14);
            }
        }
        for b in 0..3 {
            for i in 0..6 {
                let want: f64 = (0..4).map(|j| dy.get(b, j) * l.weight().get(i, j)).sum();
                assert!((g.input.get(b, i) - want).abs() < 1e-14);
            }
        }
        let zero = l.backward(&Tensor::zeros(vec![3, 4])).unwrap();
        assert!(zero.weight.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut l, x) = random_layer(4, 8, 2, 2);
        let dy = Tensor::zeros(vec![2, 2]);
        assert!(matches!(l.backward(&dy), Err(Error::InvalidState(_))));
        l.forward(&x, &QuantConfig::FULL).unwrap();
        let g = l.backward(&dy).unwrap();
        l.sgd_step(&g.weight, 0.1).unwrap();
        assert!(matches!(l.backward(&dy), Err(Error::InvalidState(_))));
        assert!(l.backward(&Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn split_layer_preserves_output_and_gradients() {
        let (mut l, x) = random_layer(5, 8, 3, 4);
        let y0 = l.forward_eval(&x, &QuantConfig::FULL).unwrap();
        let mut l0 = l.clone();
        l0.forward(&x, &QuantConfig::FULL).unwrap();
        let dy = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let g0 = l0.backward(&dy).unwrap();

        let plan = SplitPlan::new(vec![1, 6], 8).unwrap();
        l.apply_ocs(&plan, &StepSizes::Uniform(0.25)).unwrap();
        assert_eq!(l.widened_dim(), 10);
        let y1 = l.forward(&x, &QuantConfig::FULL).unwrap();
        assert!(crate::tensor::max_rel_err(y1.values(), y0.values()) < 1e-12);
        let g1 = l.backward(&dy).unwrap();
        assert!(crate::tensor::max_rel_err(g1.input.values(), g0.input.values()) < 1e-12);
        assert!(l.apply_ocs(&plan, &StepSizes::Uniform(0.25)).is_err());
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut r = rng::seeded(6);
        let mut b = Block::init(&mut r, 4, 16);
        let x = rng::normal_tensor(&mut r, &[3, 4], 1.0);
        let target = rng::normal_tensor(&mut r, &[3, 4], 1.0);
        let q = BlockQuant::FULL;
        let y = b.forward(&x, &q).unwrap();
        let g = b.backward(&mse_grad(&y, &target).unwrap()).unwrap();
        let h = 1e-6;
        for idx in [0, 5, 17, 40, 63] {
            let mut plus = b.clone();
            let mut w = plus.up.weight().clone();
            w.values_mut()[idx] += h;
            plus.up.set_weight(w).unwrap();
            let mut minus = b.clone();
            let mut w = minus.up.weight().clone();
            w.values_mut()[idx] -= h;
            minus.up.set_weight(w).unwrap();
            let lp = mse(&plus.forward_eval(&x, &q).unwrap(), &target).unwrap();
            let lm = mse(&minus.forward_eval(&x, &q).unwrap(), &target).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.up.values()[idx]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn nested_weight_view_is_master_truncation() {
        let (l, _) = random_layer(7, 32, 4, 1);
        let cfg = QuantConfig::new(8, 16).unwrap().with_master(8).unwrap();
        let direct = QuantConfig::new(8, 16).unwrap();
        assert_eq!(l.weight_hat(&cfg).unwrap(), l.weight_hat(&direct).unwrap());
        assert!(QuantConfig::new(4, 16).unwrap().with_master(2).is_err());
        assert!(QuantConfig::new(9, 16).is_err());
        assert!(QuantConfig::new(2, 16).is_ok());
    }

    #[test]
    fn perturbed_model_differs_and_stays_finite() {
        let mut r = rng::seeded(8);
        let m = ToyModel::new(&mut r, 2, 8).unwrap();
        let p = m.perturbed(&mut r, 0.1);
        assert_ne!(m, p);
        assert!(p.is_finite());
        assert_eq!(m.parameter_count(), 2 * 2 * 8 * 32);
        assert!(ToyModel::new(&mut r, 0, 8).is_err());
    }
}
