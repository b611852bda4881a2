//! Loss surface on a 2-D slice `theta + alpha u + beta v` of parameter space.

use std::fmt::Write as _;

use super::model::{matmul, mse, ToyModel, FULL_PRECISION};
use crate::error::{Error, Result};
use crate::quant::{self, check_bits, GroupLayout, GroupQuantParams, DEFAULT_GROUP_SIZE};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeConfig {
    /// Weight width; 16 evaluates the unquantized model.
    pub w_bits: u8,
    /// Points per axis.
    pub grid: usize,
    /// Both offsets span `[-range, range]`.
    pub range: f64,
    pub seed: u64,
    pub group_size: usize,
    /// Keep each group's step and zero-point at their values for the
    /// unperturbed weights, so the surface shows the rounding alone.
    pub freeze_quantizer: bool,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            w_bits: 2,
            grid: 21,
            range: 1e-4,
            seed: 42,
            group_size: DEFAULT_GROUP_SIZE,
            freeze_quantizer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major, `loss[i * betas.len() + j]` at `(alphas[i], betas[j])`.
    pub loss: Vec<f64>,
    pub w_bits: u8,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.betas.len() + j]
    }

    /// Horizontally or vertically adjacent pairs with bit-identical loss.
    pub fn adjacent_repeats(&self) -> usize {
        let (na, nb) = (self.alphas.len(), self.betas.len());
        let mut n = 0;
        for i in 0..na {
            for j in 0..nb {
                let v = self.at(i, j).to_bits();
                if i + 1 < na && self.at(i + 1, j).to_bits() == v {
                    n += 1;
                }
                if j + 1 < nb && self.at(i, j + 1).to_bits() == v {
                    n += 1;
                }
            }
        }
        n
    }

    /// `alpha,beta,loss`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(out, "{a:.9e},{b:.9e},{:.17e}", self.at(i, j));
            }
        }
        out
    }
}

/// `n` evenly spaced points on `[-range, range]`; the middle point of an odd
/// grid is exactly zero.
pub fn axis(n: usize, range: f64) -> Vec<f64> {
    let d = (n - 1) as f64;
    (0..n).map(|i| range * (2.0 * i as f64 - d) / d).collect()
}

/// Gaussian direction per layer with every output column rescaled to the
/// norm of the matching weight column.
pub fn filter_normalized_direction(weights: &[Tensor], rng: &mut rng::Rng) -> Vec<Tensor> {
    weights
        .iter()
        .map(|w| {
            let (rows, cols) = w.matrix_dims();
            let mut d = rng::normal_tensor(rng, w.shape(), 1.0);
            for c in 0..cols {
                let wn = (0..rows).map(|r| w.get(r, c).powi(2)).sum::<f64>().sqrt();
                let dn = (0..rows).map(|r| d.get(r, c).powi(2)).sum::<f64>().sqrt();
                let k = if dn > 0.0 { wn / dn } else { 0.0 };
                for r in 0..rows {
                    d.values_mut()[r * cols + c] *= k;
                }
            }
            d
        })
        .collect()
}

/// Group parameters of an `in x out` weight, one list per output column.
fn column_params(w: &Tensor, layout: GroupLayout, bits: u8) -> Result<Vec<Vec<GroupQuantParams>>> {
    let wt = w.transpose();
    (0..wt.rows())
        .map(|c| {
            let row = wt.row(c);
            layout
                .ranges(row.len())
                .map(|r| quant::compute_group_params(&row[r], bits))
                .collect()
        })
        .collect()
}

fn quantize_with(w: &Tensor, params: &[Vec<GroupQuantParams>], layout: GroupLayout) -> Tensor {
    let (rows, cols) = w.matrix_dims();
    let mut out = w.clone();
    for (c, ps) in params.iter().enumerate() {
        for (r, p) in layout.ranges(rows).zip(ps) {
            for i in r {
                let v = &mut out.values_mut()[i * cols + c];
                *v = p.dequantize(p.quantize(*v));
            }
        }
    }
    out
}

fn layer_weights(model: &ToyModel) -> Vec<Tensor> {
    model
        .blocks()
        .iter()
        .flat_map(|b| [b.up.weight().clone(), b.down.weight().clone()])
        .collect()
}

/// End-to-end loss `MSE(f(x), y)` of an unsplit model with the given layer
/// weights (already quantized), activations unquantized.
fn loss_with(weights: &[Tensor], x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut h = x.clone();
    for pair in weights.chunks(2) {
        let mut hid = matmul(&h, &pair[0]);
        for v in hid.values_mut() {
            *v = v.max(0.0);
        }
        h = matmul(&hid, &pair[1]);
    }
    mse(&h, y)
}

/// Evaluates the loss of `model` on `(x, y)` over the grid.
pub fn landscape_probe(
    model: &ToyModel,
    x: &Tensor,
    y: &Tensor,
    cfg: &LandscapeConfig,
) -> Result<LandscapeGrid> {
    if cfg.grid < 2 {
        return Err(Error::invalid("landscape grid needs >= 2 points per axis"));
    }
    if !(cfg.range >= 0.0 && cfg.range.is_finite()) {
        return Err(Error::invalid("landscape range must be finite and >= 0"));
    }
    if cfg.w_bits != FULL_PRECISION {
        check_bits(cfg.w_bits)?;
    }
    if model
        .blocks()
        .iter()
        .any(|b| b.up.index_map().is_some() || b.down.index_map().is_some())
    {
        return Err(Error::invalid("landscape probe needs an unsplit model"));
    }
    let layout = GroupLayout::new(cfg.group_size)?;
    let theta = layer_weights(model);
    let mut r = rng::seeded(cfg.seed);
    let u = filter_normalized_direction(&theta, &mut r);
    let v = filter_normalized_direction(&theta, &mut r);
    let frozen = if cfg.w_bits != FULL_PRECISION && cfg.freeze_quantizer {
        Some(
            theta
                .iter()
                .map(|w| column_params(w, layout, cfg.w_bits))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let alphas = axis(cfg.grid, cfg.range);
    let betas = alphas.clone();
    let mut loss = Vec::with_capacity(cfg.grid * cfg.grid);
    for &a in &alphas {
        for &b in &betas {
            let mut ws = Vec::with_capacity(theta.len());
            for (k, w) in theta.iter().enumerate() {
                let vals = w
                    .values()
                    .iter()
                    .zip(u[k].values())
                    .zip(v[k].values())
                    .map(|((w, du), dv)| w + a * du + b * dv)
                    .collect();
                let p = Tensor::from_raw(w.shape().to_vec(), vals);
                let q = match (&frozen, cfg.w_bits) {
                    (_, FULL_PRECISION) => p,
                    (Some(f), _) => quantize_with(&p, &f[k], layout),
                    (None, bits) => {
                        let params = column_params(&p, layout, bits)?;
                        quantize_with(&p, &params, layout)
                    }
                };
                ws.push(q);
            }
            loss.push(loss_with(&ws, x, y)?);
        }
    }
    Ok(LandscapeGrid {
        alphas,
        betas,
        loss,
        w_bits: cfg.w_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qat::model::{BlockQuant, QuantConfig};
    use crate::qat::train::toy_task;

    fn setup() -> (ToyModel, Tensor, Tensor) {
        let task = toy_task(2, 8, 0.3, 1).unwrap();
        let mut r = rng::seeded(2);
        let x = rng::normal_tensor(&mut r, &[16, 8], 1.0);
        let y = task.teacher.forward_uniform(&x, QuantConfig::FULL).unwrap();
        (task.student, x, y)
    }

    #[test]
    fn axis_is_symmetric_with_exact_zero() {
        let a = axis(5, 0.3);
        assert_eq!(a[2], 0.0);
        assert_eq!(a[0], -0.3);
        assert_eq!(a[4], 0.3);
        assert_eq!(axis(2, 1.0), vec![-1.0, 1.0]);
    }

    #[test]
    fn origin_is_the_unperturbed_loss() {
        let (m, x, y) = setup();
        for bits in [2u8, 4, FULL_PRECISION] {
            let cfg = LandscapeConfig {
                w_bits: bits,
                grid: 5,
                range: 0.5,
                ..Default::default()
            };
            let g = landscape_probe(&m, &x, &y, &cfg).unwrap();
            assert_eq!((g.alphas.len(), g.betas.len(), g.loss.len()), (5, 5, 25));
            let q = QuantConfig::new(bits, FULL_PRECISION).unwrap();
            let direct = mse(
                &m.forward_eval(&x, &[BlockQuant::uniform(q); 2]).unwrap(),
                &y,
            )
            .unwrap();
            assert_eq!(g.at(2, 2), direct);
        }
    }

    #[test]
    fn directions_match_filter_norms() {
        let (m, _, _) = setup();
        let theta = layer_weights(&m);
        let d = filter_normalized_direction(&theta, &mut rng::seeded(3));
        for (w, u) in theta.iter().zip(&d) {
            for c in 0..w.cols() {
                let wn: f64 = (0..w.rows()).map(|r| w.get(r, c).powi(2)).sum();
                let un: f64 = (0..w.rows()).map(|r| u.get(r, c).powi(2)).sum();
                assert!((wn.sqrt() - un.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantized_surface_has_plateaus() {
        let (m, x, y) = setup();
        let base = LandscapeConfig {
            grid: 11,
            range: 1e-4,
            ..Default::default()
        };
        let q = landscape_probe(&m, &x, &y, &base).unwrap();
        let fp = landscape_probe(
            &m,
            &x,
            &y,
            &LandscapeConfig {
                w_bits: FULL_PRECISION,
                ..base
            },
        )
        .unwrap();
        assert!(q.adjacent_repeats() >= 10 * fp.adjacent_repeats().max(1));
        let csv = q.to_csv();
        assert!(csv.starts_with("alpha,beta,loss\n"));
        assert_eq!(csv.lines().count(), 1 + 121);
    }

    #[test]
    fn bad_configs() {
        let (m, x, y) = setup();
        let one = LandscapeConfig {
            grid: 1,
            ..Default::default()
        };
        assert!(landscape_probe(&m, &x, &y, &one).is_err());
        let bad = LandscapeConfig {
            w_bits: 9,
            ..Default::default()
        };
        assert!(landscape_probe(&m, &x, &y, &bad).is_err());
    }
}
