//! Group-wise asymmetric uniform quantization.
//!
//! For a group with range `[min, max]` at `n` bits the step size and
//! zero-point are closed-form:
//!
//! ```text
//! s = (max - min) / (2^n - 1)
//! z = round(-min / s)
//! q = clip(round(x / s + z), 0, 2^n - 1)
//! x_hat = s * (q - z)
//! ```
//!
//! `round` is round-half-up everywhere in the crate. The outlier split
//! identity in [`crate::ocs`] relies on using the same tie rule as the
//! quantizer.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::mx::e4m3;
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 32;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Round half up (ties toward +inf).
#[inline]
pub fn round_half_up(v: f64) -> f64 {
    let f = v.floor();
    if v - f >= 0.5 {
        f + 1.0
    } else {
        f
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Step size, zero-point and bit-width of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupQuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl GroupQuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
        })
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> u8 {
        let q = round_half_up(x / self.scale + self.zero_point as f64);
        q.clamp(0.0, max_code(self.bits) as f64) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f64 {
        self.scale * (q as f64 - self.zero_point as f64)
    }
}

fn finite_range(group: &[f64]) -> Result<(f64, f64)> {
    if group.is_empty() {
        return Err(Error::invalid("empty quantization group"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in group {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in quantization group"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

fn zero_point_for(min: f64, scale: f64) -> Option<i32> {
    let z = round_half_up(-min / scale);
    (z.is_finite() && z >= i32::MIN as f64 && z <= i32::MAX as f64).then_some(z as i32)
}

fn degenerate_params(min: f64, bits: u8) -> Result<GroupQuantParams> {
    let z = zero_point_for(min, 1.0)
        .ok_or_else(|| Error::invalid(format!("group minimum {min} overflows the zero-point")))?;
    GroupQuantParams::new(1.0, z, bits)
}

/// Closed-form parameters for one group.
///
/// A constant group (`max == min`) gets `s = 1, z = -round(min)`. The same
/// fallback is used when the range is so narrow that `z` would not fit in an
/// `i32`; the stored step then still bounds the reconstruction error.
pub fn compute_group_params(group: &[f64], bits: u8) -> Result<GroupQuantParams> {
    check_bits(bits)?;
    let (min, max) = finite_range(group)?;
    if max == min {
        return degenerate_params(min, bits);
    }
    let scale = (max - min) / max_code(bits) as f64;
    match zero_point_for(min, scale) {
        Some(z) if scale.is_normal() => GroupQuantParams::new(scale, z, bits),
        _ => degenerate_params(min, bits),
    }
}

/// Parameters for a group whose step size has been fixed externally (for
/// example snapped onto the E4M3 grid). `scale` must be at least the
/// closed-form step for the group or the top codes will clip.
pub fn params_with_scale(group: &[f64], bits: u8, scale: f64) -> Result<GroupQuantParams> {
    check_bits(bits)?;
    let (min, _) = finite_range(group)?;
    match zero_point_for(min, scale) {
        Some(z) => GroupQuantParams::new(scale, z, bits),
        None => degenerate_params(min, bits),
    }
}

pub fn quantize_group(group: &[f64], params: &GroupQuantParams) -> Vec<u8> {
    group.iter().map(|&x| params.quantize(x)).collect()
}

pub fn dequantize_group(codes: &[u8], params: &GroupQuantParams) -> Result<Vec<f64>> {
    let top = max_code(params.bits);
    if let Some(&q) = codes.iter().find(|&&q| q as u32 > top) {
        return Err(Error::invalid(format!(
            "code {q} out of range for {} bits",
            params.bits
        )));
    }
    Ok(codes.iter().map(|&q| params.dequantize(q)).collect())
}

/// `|x.w - x.w_hat| <= s/2 * ||x||_1` for one group.
pub fn group_error_bound(params: &GroupQuantParams, x_group: &[f64]) -> f64 {
    0.5 * params.scale * x_group.iter().map(|v| v.abs()).sum::<f64>()
}

/// Partition of a tensor into contiguous groups.
///
/// Groups are runs of `group_size` consecutive elements in row-major order,
/// i.e. along the innermost (input-channel) axis. When `group_size` does not
/// divide the element count, the final group is shorter. When the row length
/// is a multiple of `group_size` every group lies inside one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub group_size: usize,
}

impl Default for GroupLayout {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

impl GroupLayout {
    pub fn new(group_size: usize) -> Result<Self> {
        if group_size < 2 {
            return Err(Error::invalid(format!(
                "group size must be >= 2, got {group_size}"
            )));
        }
        Ok(Self { group_size })
    }

    pub fn group_count(&self, len: usize) -> usize {
        len.div_ceil(self.group_size)
    }

    pub fn ranges(&self, len: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        let g = self.group_size;
        (0..self.group_count(len)).map(move |i| i * g..((i + 1) * g).min(len))
    }
}

/// How group step sizes are represented.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleFormat {
    /// Closed-form `f64` step sizes.
    Exact,
    /// Microscaled: each step is `tensor_scale * e4m3(byte)`.
    E4M3 { tensor_scale: f32, bytes: Vec<u8> },
}

impl ScaleFormat {
    pub fn name(&self) -> &'static str {
        match self {
            ScaleFormat::Exact => "f64",
            ScaleFormat::E4M3 { .. } => "e4m3",
        }
    }
}

/// Requested step-size storage when quantizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    Exact,
    E4M3,
}

/// A tensor quantized group-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) layout: GroupLayout,
    pub(crate) bits: u8,
    pub(crate) params: Vec<GroupQuantParams>,
    pub(crate) codes: Vec<u8>,
    pub(crate) code_sums: Vec<u32>,
    pub(crate) scale_format: ScaleFormat,
}

impl QuantizedTensor {
    /// Assembles a quantized tensor from stored parts, validating every
    /// invariant. Used by the container parser and the FFI layer.
    pub fn from_parts(
        shape: Vec<usize>,
        layout: GroupLayout,
        bits: u8,
        zero_points: Vec<i32>,
        codes: Vec<u8>,
        scale_format: ScaleFormat,
        scales: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let n: usize = shape.iter().product();
        if codes.len() != n {
            return Err(Error::invalid(format!(
                "{} codes for {n} elements",
                codes.len()
            )));
        }
        let groups = layout.group_count(n);
        if zero_points.len() != groups {
            return Err(Error::invalid(format!(
                "{} zero-points for {groups} groups",
                zero_points.len()
            )));
        }
        let top = max_code(bits);
        if codes.iter().any(|&q| q as u32 > top) {
            return Err(Error::invalid(format!("code exceeds {bits}-bit range")));
        }
        let scales = match (&scale_format, scales) {
            (
                ScaleFormat::E4M3 {
                    tensor_scale,
                    bytes,
                },
                _,
            ) => {
                if bytes.len() != groups {
                    return Err(Error::invalid(format!(
                        "{} scale bytes for {groups} groups",
                        bytes.len()
                    )));
                }
                bytes
                    .iter()
                    .map(|&b| *tensor_scale as f64 * e4m3::decode(b))
                    .collect()
            }
            (ScaleFormat::Exact, Some(s)) => s,
            (ScaleFormat::Exact, None) => {
                return Err(Error::invalid("exact scale format requires scales"))
            }
        };
        if scales.len() != groups {
            return Err(Error::invalid(format!(
                "{} scales for {groups} groups",
                scales.len()
            )));
        }
        let params = scales
            .iter()
            .zip(&zero_points)
            .map(|(&s, &z)| GroupQuantParams::new(s, z, bits))
            .collect::<Result<Vec<_>>>()?;
        let code_sums = group_sums(&codes, layout);
        Ok(Self {
            shape,
            layout,
            bits,
            params,
            codes,
            code_sums,
            scale_format,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn layout(&self) -> GroupLayout {
        self.layout
    }
    pub fn bits(&self) -> u8 {
        self.bits
    }
    pub fn params(&self) -> &[GroupQuantParams] {
        &self.params
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
    /// Per-group sum of codes, precomputed for the zero-point correction in
    /// the integer GEMV.
    pub fn code_sums(&self) -> &[u32] {
        &self.code_sums
    }
    pub fn scale_format(&self) -> &ScaleFormat {
        &self.scale_format
    }
    pub fn len(&self) -> usize {
        self.codes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
    pub fn group_count(&self) -> usize {
        self.params.len()
    }
    pub fn zero_points(&self) -> Vec<i32> {
        self.params.iter().map(|p| p.zero_point).collect()
    }
    pub fn scales(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.scale).collect()
    }

    /// Step size of the group containing flat element `i`.
    pub fn scale_at(&self, i: usize) -> f64 {
        self.params[i / self.layout.group_size].scale
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.codes.len());
        for (range, p) in self.layout.ranges(self.codes.len()).zip(&self.params) {
            out.extend(self.codes[range].iter().map(|&q| p.dequantize(q)));
        }
        Tensor::new(self.shape.clone(), out).expect("dequantized values are finite")
    }
}

pub(crate) fn group_sums(codes: &[u8], layout: GroupLayout) -> Vec<u32> {
    layout
        .ranges(codes.len())
        .map(|r| codes[r].iter().map(|&q| q as u32).sum())
        .collect()
}

/// Quantizes with closed-form `f64` step sizes.
pub fn quantize_tensor(t: &Tensor, layout: GroupLayout, bits: u8) -> Result<QuantizedTensor> {
    quantize_tensor_with(t, layout, bits, ScaleMode::Exact)
}

/// Quantizes with the requested step-size storage.
///
/// With [`ScaleMode::E4M3`] each closed-form step is snapped *up* to the
/// nearest value of `tensor_scale * E4M3`, where `tensor_scale` maps the
/// largest step onto 448. Zero-points and codes are then derived from the
/// snapped step, so the reconstruction error stays within half of the stored
/// step.
pub fn quantize_tensor_with(
    t: &Tensor,
    layout: GroupLayout,
    bits: u8,
    mode: ScaleMode,
) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let values = t.values();
    let exact = layout
        .ranges(values.len())
        .map(|r| compute_group_params(&values[r], bits))
        .collect::<Result<Vec<_>>>()?;

    let (params, scale_format) = match mode {
        ScaleMode::Exact => (exact, ScaleFormat::Exact),
        ScaleMode::E4M3 => {
            let max_scale = exact.iter().fold(0.0f64, |m, p| m.max(p.scale));
            let tensor_scale = tensor_scale_for(max_scale);
            let ts = tensor_scale as f64;
            let mut bytes = Vec::with_capacity(exact.len());
            let mut params = Vec::with_capacity(exact.len());
            for (r, p) in layout.ranges(values.len()).zip(&exact) {
                let b = e4m3::encode_ceil(p.scale / ts);
                bytes.push(b);
                params.push(params_with_scale(&values[r], bits, ts * e4m3::decode(b))?);
            }
            (
                params,
                ScaleFormat::E4M3 {
                    tensor_scale,
                    bytes,
                },
            )
        }
    };

    let mut codes = Vec::with_capacity(values.len());
    for (r, p) in layout.ranges(values.len()).zip(&params) {
        codes.extend(values[r].iter().map(|&x| p.quantize(x)));
    }
    let code_sums = group_sums(&codes, layout);
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        layout,
        bits,
        params,
        codes,
        code_sums,
        scale_format,
    })
}

/// Smallest `f32` with `max_scale / ts <= 448`.
fn tensor_scale_for(max_scale: f64) -> f32 {
    if max_scale == 0.0 {
        return 1.0;
    }
    let target = max_scale / e4m3::MAX_FINITE;
    let mut ts = target as f32;
    while (ts as f64) < target {
        ts = f32::from_bits(ts.to_bits() + 1);
    }
    ts
}

/// Quantize-dequantize of a flat slice with closed-form step sizes.
pub fn fake_quant(values: &[f64], layout: GroupLayout, bits: u8) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for r in layout.ranges(values.len()) {
        let group = &values[r];
        let p = compute_group_params(group, bits)?;
        out.extend(group.iter().map(|&x| p.dequantize(p.quantize(x))));
    }
    Ok(out)
}

/// Parameters of the symmetric, zero-point-free SEQ quantizer.
///
/// `alpha` is the per-group clipping range (stored as E4M3 when serialized)
/// and `tensor_scale` the shared per-tensor master scale. Levels sit at
/// half-integer multiples of the step `tensor_scale * alpha * 2 / 2^bits`, so
/// at 2 bits the LUT is `step * {-1.5, -0.5, 0.5, 1.5}`, i.e.
/// `tensor_scale * alpha * {-3/4, -1/4, 1/4, 3/4}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqParams {
    pub alpha: f64,
    pub tensor_scale: f64,
    pub bits: u8,
}

impl SeqParams {
    pub fn new(alpha: f64, tensor_scale: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(alpha > 0.0 && alpha.is_finite() && tensor_scale > 0.0 && tensor_scale.is_finite()) {
            return Err(Error::invalid("SEQ scales must be positive and finite"));
        }
        Ok(Self {
            alpha,
            tensor_scale,
            bits,
        })
    }

    pub fn levels_count(&self) -> i64 {
        1i64 << self.bits
    }

    pub fn step(&self) -> f64 {
        self.tensor_scale * self.alpha * 2.0 / self.levels_count() as f64
    }

    /// All representable values in ascending order.
    pub fn lut(&self) -> Vec<f64> {
        let half = self.levels_count() / 2;
        (-half..half)
            .map(|n| self.step() * (n as f64 + 0.5))
            .collect()
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        let k = self.levels_count();
        let u = (x / (self.tensor_scale * self.alpha)).clamp(-1.0, 1.0);
        let n = ((u * k as f64 / 2.0).floor() as i64).clamp(-k / 2, k / 2 - 1);
        self.step() * (n as f64 + 0.5)
    }
}

pub fn seq_fake_quant(group: &[f64], params: &SeqParams) -> Vec<f64> {
    group.iter().map(|&x| params.fake_quant(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_half_up_ties() {
        assert_eq!(round_half_up(0.5), 1.0);
        assert_eq!(round_half_up(1.5), 2.0);
        assert_eq!(round_half_up(-0.5), 0.0);
        assert_eq!(round_half_up(-1.5), -1.0);
        assert_eq!(round_half_up(0.49999999999999994), 0.0);
        assert_eq!(round_half_up(-2.7), -3.0);
    }

    #[test]
    fn closed_form_params() {
        let p = compute_group_params(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));

        let p = compute_group_params(&[5.0, 5.0, 5.0, 5.0], 2).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, -5));

        let p = compute_group_params(&[-1.5, 1.5], 2).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 2));
    }

    #[test]
    fn params_errors() {
        assert!(compute_group_params(&[], 2).is_err());
        assert!(compute_group_params(&[1.0, f64::NAN], 2).is_err());
        assert!(compute_group_params(&[1.0, 2.0], 1).is_err());
        assert!(compute_group_params(&[1.0, 2.0], 9).is_err());
    }

    #[test]
    fn quantize_and_dequantize_examples() {
        let p = GroupQuantParams::new(1.0, 0, 2).unwrap();
        assert_eq!(quantize_group(&[0.0, 1.0, 2.0, 3.0], &p), vec![0, 1, 2, 3]);
        assert_eq!(
            dequantize_group(&[0, 1, 2, 3], &p).unwrap(),
            vec![0.0, 1.0, 2.0, 3.0]
        );

        let p = GroupQuantParams::new(0.5, 2, 2).unwrap();
        assert_eq!(
            quantize_group(&[-1.0, -0.5, 0.0, 0.5], &p),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            dequantize_group(&[0, 1, 2, 3], &p).unwrap(),
            vec![-1.0, -0.5, 0.0, 0.5]
        );
        assert!(dequantize_group(&[4], &p).is_err());
    }

    #[test]
    fn narrow_range_falls_back_to_unit_step() {
        let g = [1.0, 1.0 + 1e-12];
        let p = compute_group_params(&g, 8).unwrap();
        for &x in &g {
            assert!((p.dequantize(p.quantize(x)) - x).abs() <= p.scale / 2.0);
        }
    }

    #[test]
    fn error_bound_examples() {
        let p = GroupQuantParams::new(0.5, 0, 2).unwrap();
        assert_eq!(group_error_bound(&p, &[1.0, -1.0, 1.0, -1.0]), 1.0);
        assert_eq!(group_error_bound(&p, &[0.0; 4]), 0.0);
    }

    #[test]
    fn tensor_layout_examples() {
        let t = Tensor::new(vec![4, 8], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
        let q = quantize_tensor(&t, GroupLayout::new(32).unwrap(), 2).unwrap();
        assert_eq!(q.group_count(), 1);

        let q = quantize_tensor(&t, GroupLayout::new(8).unwrap(), 2).unwrap();
        assert_eq!(q.group_count(), 4);
        let ranges: Vec<_> = GroupLayout::new(8).unwrap().ranges(32).collect();
        assert_eq!(ranges, vec![0..8, 8..16, 16..24, 24..32]);

        let q = quantize_tensor(&t, GroupLayout::new(5).unwrap(), 2).unwrap();
        assert_eq!(q.group_count(), 7);
        assert_eq!(GroupLayout::new(5).unwrap().ranges(32).last(), Some(30..32));
    }

    #[test]
    fn constant_tensor_reconstructs_within_half() {
        let t = Tensor::new(vec![3, 7], vec![-4.3; 21]).unwrap();
        let q = quantize_tensor(&t, GroupLayout::default(), 2).unwrap();
        for v in q.dequantize().values() {
            assert!((v - -4.3).abs() <= 0.5);
        }
    }

    #[test]
    fn code_sums_match_codes() {
        let t = Tensor::new(vec![70], (0..70).map(|i| (i as f64).sin()).collect()).unwrap();
        let q = quantize_tensor(&t, GroupLayout::default(), 2).unwrap();
        assert_eq!(q.code_sums().len(), 3);
        let manual: u32 = q.codes()[64..].iter().map(|&c| c as u32).sum();
        assert_eq!(q.code_sums()[2], manual);
    }

    #[test]
    fn e4m3_scales_keep_half_step_bound() {
        let t = Tensor::new(
            vec![4, 64],
            (0..256)
                .map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.013)
                .collect(),
        )
        .unwrap();
        let q = quantize_tensor_with(&t, GroupLayout::default(), 2, ScaleMode::E4M3).unwrap();
        let deq = q.dequantize();
        for (i, (a, b)) in t.values().iter().zip(deq.values()).enumerate() {
            assert!((a - b).abs() <= q.scale_at(i) / 2.0 + 1e-12);
        }
        let ScaleFormat::E4M3 {
            tensor_scale,
            bytes,
        } = q.scale_format()
        else {
            panic!("expected e4m3 scales");
        };
        for (b, p) in bytes.iter().zip(q.params()) {
            assert_eq!(p.scale, *tensor_scale as f64 * e4m3::decode(*b));
        }
    }

    #[test]
    fn seq_examples() {
        let p = SeqParams::new(1.0, 1.0, 2).unwrap();
        assert_eq!(
            seq_fake_quant(&[-0.9, -0.2, 0.2, 0.9], &p),
            vec![-0.75, -0.25, 0.25, 0.75]
        );
        assert_eq!(seq_fake_quant(&[0.75, -0.25], &p), vec![0.75, -0.25]);
        assert_eq!(p.fake_quant(10.0), 0.75);
        assert_eq!(p.fake_quant(-10.0), -0.75);
        let step = p.step();
        let lut: Vec<f64> = p.lut().iter().map(|v| v / step).collect();
        assert_eq!(lut, vec![-1.5, -0.5, 0.5, 1.5]);
    }

    proptest! {
        #[test]
        fn seq_outputs_are_lut_members(
            xs in prop::collection::vec(-5.0f64..5.0, 1..64),
            alpha in 0.01f64..3.0,
            st in 0.1f64..2.0,
            bits in 2u8..=4,
        ) {
            let p = SeqParams::new(alpha, st, bits).unwrap();
            let lut = p.lut();
            for y in seq_fake_quant(&xs, &p) {
                prop_assert!(lut.contains(&y));
            }
        }

        #[test]
        fn codes_in_range_and_bound_holds(
            xs in prop::collection::vec(-100.0f64..100.0, 1..80),
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
        ) {
            let p = compute_group_params(&xs, bits).unwrap();
            for &x in &xs {
                let q = p.quantize(x);
                prop_assert!((q as u32) <= max_code(bits));
                prop_assert!((p.dequantize(q) - x).abs() <= p.scale / 2.0 + 1e-12);
            }
        }
    }
}
