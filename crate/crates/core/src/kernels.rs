//! Portable bit-packed GEMV, `y = x W` with `x: 1 x K` and `W: K x N`.
//!
//! Quantized weights are held output-major (`N x K`, one row per output) so
//! that quantization groups run along `K` and line up with the activation
//! groups. Two kernels:
//!
//! - W2A2: both operands 2-bit packed. Each group contributes
//!   `s_w s_x [sum(q_w q_x) - z_x sum(q_w) - z_w sum(q_x) + g z_w z_x]`, with
//!   the integer dot product accumulated in 32 bits.
//! - W2A16: weights dequantized on the fly to `f32`, activations full
//!   precision, `f64` accumulation.
//!
//! Each output's accumulation order is fixed (group-major, left to right).

use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mx::pack::{pack_codes, PackedCodes};
use crate::quant::{self, GroupLayout, GroupQuantParams, QuantizedTensor, ScaleMode};
use crate::rng;
use crate::tensor::{max_rel_err, Tensor};

/// Largest `n` for which a 2-bit dot product cannot overflow an `i32`.
pub const MAX_DOT2_LEN: usize = (i32::MAX as usize) / 9;

/// Reference GEMV with `f64` accumulation over `k` in ascending order.
pub fn gemv_ref(x: &[f64], w: &Tensor) -> Result<Tensor> {
    let (k, n) = w.matrix_dims();
    if x.len() != k {
        return Err(Error::invalid(format!(
            "x has {} entries, W has {k} rows",
            x.len()
        )));
    }
    let mut y = vec![0.0; n];
    let wv = w.values();
    for (i, &xi) in x.iter().enumerate() {
        let row = &wv[i * n..(i + 1) * n];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    Tensor::new(vec![n], y)
}

const LO: u64 = 0x5555_5555_5555_5555;

#[inline]
fn dot2_word(a: u64, b: u64) -> u32 {
    let (a0, a1) = (a & LO, (a >> 1) & LO);
    let (b0, b1) = (b & LO, (b >> 1) & LO);
    4 * (a1 & b1).count_ones()
        + 2 * ((a1 & b0).count_ones() + (a0 & b1).count_ones())
        + (a0 & b0).count_ones()
}

/// Dot product of `len` 2-bit codes starting at byte offsets `a` and `b`.
/// `len` need not be a multiple of 4; trailing lanes past `len` are ignored.
#[inline]
fn dot2_bytes(a: &[u8], b: &[u8], len: usize) -> u32 {
    let full = len / 4;
    let mut acc = 0u32;
    let mut words_a = a[..full].chunks_exact(8);
    let mut words_b = b[..full].chunks_exact(8);
    for (wa, wb) in (&mut words_a).zip(&mut words_b) {
        acc += dot2_word(
            u64::from_le_bytes(wa.try_into().unwrap()),
            u64::from_le_bytes(wb.try_into().unwrap()),
        );
    }
    for (&ba, &bb) in words_a.remainder().iter().zip(words_b.remainder()) {
        acc += dot2_word(ba as u64, bb as u64);
    }
    let rest = len % 4;
    if rest > 0 {
        let mask = (1u64 << (2 * rest)) - 1;
        acc += dot2_word(a[full] as u64 & mask, b[full] as u64 & mask);
    }
    acc
}

/// `sum a_i * b_i` over unsigned 2-bit codes.
pub fn dot_packed2(a: &PackedCodes, b: &PackedCodes, n: usize) -> Result<u32> {
    if a.bits() != 2 || b.bits() != 2 {
        return Err(Error::invalid("dot_packed2 needs 2-bit operands"));
    }
    if n > a.len() || n > b.len() {
        return Err(Error::invalid(format!(
            "n = {n} exceeds operand lengths {} / {}",
            a.len(),
            b.len()
        )));
    }
    if n > MAX_DOT2_LEN {
        return Err(Error::invalid(format!(
            "n = {n} exceeds the safe 32-bit accumulation bound {MAX_DOT2_LEN}"
        )));
    }
    Ok(dot2_bytes(a.bytes(), b.bytes(), n))
}

/// Dynamically quantized, 2-bit packed activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedActivation {
    pub packed: PackedCodes,
    pub params: Vec<GroupQuantParams>,
    pub sums: Vec<u32>,
    pub group_size: usize,
}

impl PackedActivation {
    pub fn dequantize(&self) -> Vec<f64> {
        let layout = GroupLayout {
            group_size: self.group_size,
        };
        let mut out = Vec::with_capacity(self.packed.len());
        for (r, p) in layout.ranges(self.packed.len()).zip(&self.params) {
            out.extend(r.map(|i| p.dequantize(self.packed.get(i))));
        }
        out
    }
}

/// Per-vector asymmetric 2-bit quantization of an activation, grouped along
/// `K`.
pub fn quantize_activation(x: &[f64], group_size: usize) -> Result<PackedActivation> {
    let layout = GroupLayout::new(group_size)?;
    let t = Tensor::vector(x.to_vec())?;
    let q = quant::quantize_tensor(&t, layout, 2)?;
    Ok(PackedActivation {
        packed: pack_codes(q.codes(), 2)?,
        params: q.params().to_vec(),
        sums: q.code_sums().to_vec(),
        group_size,
    })
}

/// 2-bit weight in output-major packed form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeight {
    pub k: usize,
    pub n: usize,
    pub packed: PackedCodes,
    pub params: Vec<GroupQuantParams>,
    pub sums: Vec<u32>,
    pub group_size: usize,
    /// Bytes of stored scales (1 per group for E4M3, 8 for f64).
    pub scale_bytes: usize,
}

impl PackedWeight {
    /// Packs a 2-bit quantized `N x K` tensor whose groups stay within rows.
    pub fn from_quantized(q: &QuantizedTensor) -> Result<Self> {
        let (n, k) = match q.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::invalid(format!("expected N x K weight, got {s:?}"))),
        };
        if q.bits() != 2 {
            return Err(Error::invalid(format!(
                "packed GEMV needs 2-bit weights, got {}",
                q.bits()
            )));
        }
        let g = q.layout().group_size;
        if k % g != 0 {
            return Err(Error::invalid(format!(
                "K = {k} is not a multiple of the group size {g}"
            )));
        }
        let scale_bytes = match q.scale_format() {
            quant::ScaleFormat::E4M3 { .. } => q.group_count(),
            quant::ScaleFormat::Exact => 8 * q.group_count(),
        };
        Ok(Self {
            k,
            n,
            packed: pack_codes(q.codes(), 2)?,
            params: q.params().to_vec(),
            sums: q.code_sums().to_vec(),
            group_size: g,
            scale_bytes,
        })
    }

    pub fn groups_per_row(&self) -> usize {
        self.k / self.group_size
    }

    /// `K x N` dequantized weight, the layout [`gemv_ref`] takes.
    pub fn dequantize_kn(&self) -> Tensor {
        let mut out = vec![0.0; self.k * self.n];
        let gpr = self.groups_per_row();
        for j in 0..self.n {
            for i in 0..self.k {
                let p = &self.params[j * gpr + i / self.group_size];
                out[i * self.n + j] = p.dequantize(self.packed.get(j * self.k + i));
            }
        }
        Tensor::new(vec![self.k, self.n], out).expect("finite")
    }

    pub fn code_bytes(&self) -> usize {
        self.packed.bytes().len()
    }
}

/// Quantizes a `K x N` weight for the GEMV kernels: transposed to
/// output-major, 2-bit, group-wise along `K`.
pub fn quantize_weight_for_gemv(
    w: &Tensor,
    group_size: usize,
    mode: ScaleMode,
) -> Result<QuantizedTensor> {
    let layout = GroupLayout::new(group_size)?;
    quant::quantize_tensor_with(&w.transpose(), layout, 2, mode)
}

fn check_aligned(x_len: usize, x_group: usize, w: &PackedWeight) -> Result<()> {
    if x_len != w.k {
        return Err(Error::invalid(format!(
            "activation length {x_len} does not match K = {}",
            w.k
        )));
    }
    if x_group != w.group_size {
        return Err(Error::invalid(format!(
            "activation groups of {x_group} misaligned with weight groups of {}",
            w.group_size
        )));
    }
    Ok(())
}

/// Integer-path GEMV with zero-point correction.
pub fn gemv_w2a2(x: &PackedActivation, w: &PackedWeight) -> Result<Tensor> {
    check_aligned(x.packed.len(), x.group_size, w)?;
    if w.k > MAX_DOT2_LEN {
        return Err(Error::invalid("K exceeds the 32-bit accumulation bound"));
    }
    let g = w.group_size;
    let gpr = w.groups_per_row();
    let byte_aligned = g.is_multiple_of(4);
    let xb = x.packed.bytes();
    let wb = w.packed.bytes();
    let mut y = vec![0.0; w.n];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for gi in 0..gpr {
            let start = gi * g;
            let wstart = j * w.k + start;
            let dot = if byte_aligned && wstart.is_multiple_of(4) {
                dot2_bytes(&xb[start / 4..], &wb[wstart / 4..], g)
            } else {
                (0..g)
                    .map(|t| x.packed.get(start + t) as u32 * w.packed.get(wstart + t) as u32)
                    .sum()
            };
            let pw = &w.params[j * gpr + gi];
            let px = &x.params[gi];
            let (zw, zx) = (pw.zero_point as i64, px.zero_point as i64);
            let corr = dot as i64 - zx * w.sums[j * gpr + gi] as i64 - zw * x.sums[gi] as i64
                + g as i64 * zw * zx;
            acc += pw.scale * px.scale * corr as f64;
        }
        *yj = acc;
    }
    Tensor::new(vec![w.n], y)
}

/// Dequantize-on-the-fly GEMV with full-precision activations.
pub fn gemv_w2a16(x: &[f64], w: &PackedWeight) -> Result<Tensor> {
    check_aligned(x.len(), w.group_size, w)?;
    let g = w.group_size;
    let gpr = w.groups_per_row();
    let wb = w.packed.bytes();
    let fast = g.is_multiple_of(4) && w.k.is_multiple_of(4);
    let mut y = vec![0.0; w.n];
    for (j, yj) in y.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for gi in 0..gpr {
            let p = &w.params[j * gpr + gi];
            let lut: [f64; 4] = std::array::from_fn(|c| p.dequantize(c as u8) as f32 as f64);
            let start = gi * g;
            let xs = &x[start..start + g];
            if fast {
                let bytes = &wb[(j * w.k + start) / 4..(j * w.k + start + g) / 4];
                for (b, xq) in bytes.iter().zip(xs.chunks_exact(4)) {
                    let b = *b as usize;
                    acc += xq[0] * lut[b & 3];
                    acc += xq[1] * lut[(b >> 2) & 3];
                    acc += xq[2] * lut[(b >> 4) & 3];
                    acc += xq[3] * lut[b >> 6];
                }
            } else {
                for (t, &xv) in xs.iter().enumerate() {
                    acc += xv * lut[w.packed.get(j * w.k + start + t) as usize];
                }
            }
        }
        *yj = acc;
    }
    Tensor::new(vec![w.n], y)
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub k: usize,
    pub n: usize,
    pub method: String,
    pub reps: usize,
    pub mean_ns: f64,
    /// Weight bytes the method reads.
    pub bytes: usize,
    /// Sum of the outputs.
    pub checksum: f64,
    /// Sum of the outputs of the method's reference computation.
    pub reference_checksum: f64,
    /// Output within `1e-6` max-norm relative error of the reference.
    pub verified: bool,
}

pub const BENCH_METHODS: [&str; 3] = ["fp64_ref", "w2a16", "w2a2"];
pub const BENCH_TOLERANCE: f64 = 1e-6;

fn time_it<T>(reps: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut out = black_box(f());
    let start = Instant::now();
    for _ in 0..reps {
        out = black_box(f());
    }
    (start.elapsed().as_nanos() as f64 / reps as f64, out)
}

/// Times every method on every `(K, N)` shape with seeded random data.
pub fn bench(shapes: &[(usize, usize)], reps: usize, seed: u64) -> Result<Vec<BenchReport>> {
    if reps == 0 {
        return Err(Error::invalid("reps must be >= 1"));
    }
    let mut reports = Vec::new();
    for (si, &(k, n)) in shapes.iter().enumerate() {
        let mut r = rng::seeded(seed.wrapping_add(si as u64));
        let w = rng::normal_tensor(&mut r, &[k, n], 1.0 / (k.max(1) as f64).sqrt());
        let x = rng::normal_tensor(&mut r, &[k], 1.0).into_values();

        // Groups of 32 when K allows, otherwise one group per row.
        let g = if k % 32 == 0 { 32 } else { k.max(2) };
        let kpad_ok = k % g == 0;
        let sum = |t: &Tensor| t.values().iter().sum::<f64>();

        let (ns, y) = time_it(reps, || gemv_ref(&x, &w).unwrap());
        reports.push(BenchReport {
            k,
            n,
            method: "fp64_ref".into(),
            reps,
            mean_ns: ns,
            bytes: k * n * 8,
            checksum: sum(&y),
            reference_checksum: sum(&y),
            verified: true,
        });
        if !kpad_ok {
            continue;
        }

        let q = quantize_weight_for_gemv(&w, g, ScaleMode::E4M3)?;
        let pw = PackedWeight::from_quantized(&q)?;
        let w_deq = pw.dequantize_kn();
        let weight_bytes = pw.code_bytes() + pw.scale_bytes;

        let y_ref = gemv_ref(&x, &w_deq)?;
        let (ns, y) = time_it(reps, || gemv_w2a16(&x, &pw).unwrap());
        reports.push(BenchReport {
            k,
            n,
            method: "w2a16".into(),
            reps,
            mean_ns: ns,
            bytes: weight_bytes,
            checksum: sum(&y),
            reference_checksum: sum(&y_ref),
            verified: max_rel_err(y.values(), y_ref.values()) <= BENCH_TOLERANCE,
        });

        let xa = quantize_activation(&x, g)?;
        let y_ref = gemv_ref(&xa.dequantize(), &w_deq)?;
        let (ns, y) = time_it(reps, || gemv_w2a2(&xa, &pw).unwrap());
        reports.push(BenchReport {
            k,
            n,
            method: "w2a2".into(),
            reps,
            mean_ns: ns,
            bytes: weight_bytes,
            checksum: sum(&y),
            reference_checksum: sum(&y_ref),
            verified: max_rel_err(y.values(), y_ref.values()) <= BENCH_TOLERANCE,
        });
    }
    Ok(reports)
}

/// `shape,method,mean_ns,bytes,checksum`
pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("shape,method,mean_ns,bytes,checksum\n");
    for r in reports {
        out.push_str(&format!(
            "{}x{},{},{:.1},{},{:.9e}\n",
            r.k, r.n, r.method, r.mean_ns, r.bytes, r.checksum
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::ScaleFormat;

    /// Triple loop written independently of [`gemv_ref`]: column-major walk.
    fn gemv_oracle(x: &[f64], w: &Tensor) -> Vec<f64> {
        let (k, n) = w.matrix_dims();
        (0..n)
            .map(|j| {
                let mut s = 0.0;
                for (i, xi) in x.iter().enumerate().take(k) {
                    s += xi * w.values()[i * n + j];
                }
                s
            })
            .collect()
    }

    #[test]
    fn ref_examples() {
        let w = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(gemv_ref(&[1.0, 0.0], &w).unwrap().values(), &[2.0, 3.0]);
        assert_eq!(gemv_ref(&[0.0, 0.0], &w).unwrap().values(), &[0.0, 0.0]);
        assert!(gemv_ref(&[1.0], &w).is_err());

        let mut r = rng::seeded(3);
        let w = rng::normal_tensor(&mut r, &[64, 64], 1.0);
        let x = rng::normal_tensor(&mut r, &[64], 1.0).into_values();
        let y = gemv_ref(&x, &w).unwrap();
        assert!(max_rel_err(y.values(), &gemv_oracle(&x, &w)) <= 1e-12);
    }

    #[test]
    fn dot_examples() {
        let a = pack_codes(&[1, 2, 3, 0], 2).unwrap();
        let b = pack_codes(&[0, 1, 2, 3], 2).unwrap();
        assert_eq!(dot_packed2(&a, &b, 4).unwrap(), 8);
        let z = pack_codes(&[0; 4], 2).unwrap();
        assert_eq!(dot_packed2(&a, &z, 4).unwrap(), 0);
        assert!(dot_packed2(&a, &b, 5).is_err());
        let a4 = pack_codes(&[1, 2, 3, 0], 4).unwrap();
        assert!(dot_packed2(&a4, &b, 4).is_err());
    }

    #[test]
    fn dot_partial_lengths() {
        let a: Vec<u8> = (0..77).map(|i| (i * 7 % 4) as u8).collect();
        let b: Vec<u8> = (0..77).map(|i| (i * 5 % 4) as u8).collect();
        let (pa, pb) = (pack_codes(&a, 2).unwrap(), pack_codes(&b, 2).unwrap());
        for n in 0..=77 {
            let want: u32 = (0..n).map(|i| a[i] as u32 * b[i] as u32).sum();
            assert_eq!(dot_packed2(&pa, &pb, n).unwrap(), want);
        }
    }

    fn exact_weight(n: usize, k: usize, g: usize, codes: Vec<u8>, s: f64, z: i32) -> PackedWeight {
        let layout = GroupLayout::new(g).unwrap();
        let groups = layout.group_count(n * k);
        let q = QuantizedTensor::from_parts(
            vec![n, k],
            layout,
            2,
            vec![z; groups],
            codes,
            ScaleFormat::Exact,
            Some(vec![s; groups]),
        )
        .unwrap();
        PackedWeight::from_quantized(&q).unwrap()
    }

    #[test]
    fn w2a2_hand_example() {
        let w = exact_weight(1, 4, 4, vec![0, 1, 2, 3], 0.5, 2);
        let x = PackedActivation {
            packed: pack_codes(&[1, 2, 3, 0], 2).unwrap(),
            params: vec![GroupQuantParams::new(0.25, 1, 2).unwrap()],
            sums: vec![6],
            group_size: 4,
        };
        let y = gemv_w2a2(&x, &w).unwrap();
        assert!((y.values()[0] - -0.25).abs() < 1e-15);
        let y_ref = gemv_ref(&x.dequantize(), &w.dequantize_kn()).unwrap();
        assert_eq!(y.values(), y_ref.values());
    }

    #[test]
    fn w2a2_without_zero_points_is_scaled_dot() {
        let w = exact_weight(1, 8, 8, vec![3, 1, 2, 0, 1, 1, 3, 2], 0.5, 0);
        let xc = [2u8, 2, 1, 3, 0, 1, 3, 3];
        let x = PackedActivation {
            packed: pack_codes(&xc, 2).unwrap(),
            params: vec![GroupQuantParams::new(0.125, 0, 2).unwrap()],
            sums: vec![xc.iter().map(|&c| c as u32).sum()],
            group_size: 8,
        };
        let dot = dot_packed2(&x.packed, &w.packed, 8).unwrap();
        let y = gemv_w2a2(&x, &w).unwrap();
        assert_eq!(y.values()[0], 0.5 * 0.125 * dot as f64);
    }

    #[test]
    fn misaligned_groups_rejected() {
        let w = exact_weight(2, 8, 4, vec![1; 16], 1.0, 0);
        let x = quantize_activation(&[0.5; 8], 8).unwrap();
        assert!(gemv_w2a2(&x, &w).is_err());
        let x = quantize_activation(&[0.5; 4], 4).unwrap();
        assert!(gemv_w2a2(&x, &w).is_err());
        assert!(gemv_w2a16(&[0.5; 7], &w).is_err());
        let q = quant::quantize_tensor(&Tensor::zeros(vec![2, 6]), GroupLayout::new(4).unwrap(), 2)
            .unwrap();
        assert!(PackedWeight::from_quantized(&q).is_err());
    }

    #[test]
    fn w2a16_on_grid_is_exact() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let w = Tensor::from_rows(&rows).unwrap();
        let q = quantize_weight_for_gemv(&w, 8, ScaleMode::Exact).unwrap();
        let pw = PackedWeight::from_quantized(&q).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let y = gemv_w2a16(&x, &pw).unwrap();
        assert_eq!(y.values(), gemv_ref(&x, &w).unwrap().values());
    }

    #[test]
    fn odd_group_sizes_take_the_generic_path() {
        let mut r = rng::seeded(11);
        let w = rng::normal_tensor(&mut r, &[12, 5], 1.0);
        let x = rng::normal_tensor(&mut r, &[12], 1.0).into_values();
        let q = quantize_weight_for_gemv(&w, 6, ScaleMode::Exact).unwrap();
        let pw = PackedWeight::from_quantized(&q).unwrap();
        let xa = quantize_activation(&x, 6).unwrap();
        let y = gemv_w2a2(&xa, &pw).unwrap();
        let y_ref = gemv_ref(&xa.dequantize(), &pw.dequantize_kn()).unwrap();
        assert!(max_rel_err(y.values(), y_ref.values()) <= 1e-12);
        let y = gemv_w2a16(&x, &pw).unwrap();
        let y_ref = gemv_ref(&x, &pw.dequantize_kn()).unwrap();
        assert!(max_rel_err(y.values(), y_ref.values()) <= 1e-6);
    }

    #[test]
    fn bench_smoke() {
        let reports = bench(&[(1, 1), (64, 32)], 2, 5).unwrap();
        assert_eq!(reports.len(), 1 + 3);
        assert!(reports.iter().all(|r| r.verified && r.reps == 2));
        let csv = bench_csv(&reports);
        assert!(csv.starts_with("shape,method,mean_ns,bytes,checksum\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(bench(&[(4, 4)], 0, 1).is_err());
    }
}
