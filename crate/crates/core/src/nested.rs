//! Any-precision master codes.
//!
//! A tensor is quantized once at `h` bits. Any `l <= h` view is obtained by
//! dropping the `h - l` least significant bits of every code while keeping
//! the same per-group step `s` and the `h`-bit zero-point `z`:
//!
//! ```text
//! q_l   = q_h >> (h - l)
//! w_hat = s * ((q_l << (h - l)) - z)
//! ```
//!
//! so every lower-precision value is a point of the `h`-bit grid.

use crate::error::{Error, Result};
use crate::quant::{
    self, check_bits, GroupLayout, GroupQuantParams, QuantizedTensor, ScaleFormat, ScaleMode,
};
use crate::tensor::Tensor;

pub const DEFAULT_MASTER_BITS: u8 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MasterCode {
    pub(crate) master_bits: u8,
    /// Bit-width of the codes actually held. Equal to `master_bits` for a
    /// freshly built master; lower after [`MasterCode::shifted`].
    pub(crate) stored_bits: u8,
    pub(crate) shape: Vec<usize>,
    pub(crate) layout: GroupLayout,
    pub(crate) params: Vec<GroupQuantParams>,
    pub(crate) codes: Vec<u8>,
    pub(crate) scale_format: ScaleFormat,
}

/// Quantizes `t` at `h` bits with closed-form step sizes.
pub fn make_master(t: &Tensor, layout: GroupLayout, h: u8) -> Result<MasterCode> {
    make_master_with(t, layout, h, ScaleMode::Exact)
}

pub fn make_master_with(
    t: &Tensor,
    layout: GroupLayout,
    h: u8,
    mode: ScaleMode,
) -> Result<MasterCode> {
    let q = quant::quantize_tensor_with(t, layout, h, mode)?;
    Ok(MasterCode::from_quantized(q))
}

impl MasterCode {
    pub fn from_quantized(q: QuantizedTensor) -> Self {
        Self {
            master_bits: q.bits,
            stored_bits: q.bits,
            shape: q.shape,
            layout: q.layout,
            params: q.params,
            codes: q.codes,
            scale_format: q.scale_format,
        }
    }

    /// Reassembles a master from stored parts. `params` carry the master
    /// bit-width; `codes` are at `stored_bits`.
    pub(crate) fn from_parts(
        master_bits: u8,
        stored_bits: u8,
        shape: Vec<usize>,
        layout: GroupLayout,
        params: Vec<GroupQuantParams>,
        codes: Vec<u8>,
        scale_format: ScaleFormat,
    ) -> Result<Self> {
        check_bits(master_bits)?;
        check_bits(stored_bits)?;
        if stored_bits > master_bits {
            return Err(Error::invalid(format!(
                "stored bits {stored_bits} exceed master bits {master_bits}"
            )));
        }
        let n: usize = shape.iter().product();
        if codes.len() != n || params.len() != layout.group_count(n) {
            return Err(Error::invalid("master code parts disagree with shape"));
        }
        if codes
            .iter()
            .any(|&q| q as u32 > quant::max_code(stored_bits))
        {
            return Err(Error::invalid("master code exceeds stored bit-width"));
        }
        Ok(Self {
            master_bits,
            stored_bits,
            shape,
            layout,
            params,
            codes,
            scale_format,
        })
    }

    pub fn master_bits(&self) -> u8 {
        self.master_bits
    }
    pub fn stored_bits(&self) -> u8 {
        self.stored_bits
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn layout(&self) -> GroupLayout {
        self.layout
    }
    pub fn params(&self) -> &[GroupQuantParams] {
        &self.params
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
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

    fn check_view(&self, l: u8) -> Result<()> {
        check_bits(l)?;
        if l > self.stored_bits {
            return Err(Error::invalid(format!(
                "cannot derive {l}-bit codes from {}-bit codes",
                self.stored_bits
            )));
        }
        Ok(())
    }

    /// `l`-bit codes by right shift.
    pub fn truncate_codes(&self, l: u8) -> Result<Vec<u8>> {
        self.check_view(l)?;
        let shift = self.stored_bits - l;
        Ok(self.codes.iter().map(|&q| q >> shift).collect())
    }

    /// Reconstruction at `l` bits on the shared `h`-bit grid.
    pub fn dequantize_at(&self, l: u8) -> Result<Tensor> {
        self.check_view(l)?;
        let down = self.stored_bits - l;
        let up = self.master_bits - l;
        let mut out = Vec::with_capacity(self.codes.len());
        for (r, p) in self.layout.ranges(self.codes.len()).zip(&self.params) {
            let z = p.zero_point as i64;
            out.extend(
                self.codes[r]
                    .iter()
                    .map(|&q| p.scale * ((((q >> down) as i64) << up) - z) as f64),
            );
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Copy that stores only the `l`-bit codes (what a deployment at `l` bits
    /// ships). Step sizes and zero-points are unchanged.
    pub fn shifted(&self, l: u8) -> Result<MasterCode> {
        let codes = self.truncate_codes(l)?;
        Ok(MasterCode {
            stored_bits: l,
            codes,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn master_from(codes: Vec<u8>, scale: f64, z: i32, h: u8) -> MasterCode {
        let n = codes.len();
        MasterCode::from_parts(
            h,
            h,
            vec![n],
            GroupLayout::new(n.max(2)).unwrap(),
            vec![GroupQuantParams::new(scale, z, h).unwrap()],
            codes,
            ScaleFormat::Exact,
        )
        .unwrap()
    }

    #[test]
    fn truncation_examples() {
        let m = master_from(vec![200, 9], 0.01, 0, 8);
        assert_eq!(m.truncate_codes(2).unwrap(), vec![3, 0]);
        assert_eq!(m.truncate_codes(8).unwrap(), vec![200, 9]);
        assert!(m.truncate_codes(9).is_err());

        let m4 = master_from(vec![9, 15], 1.0, 0, 4);
        assert_eq!(m4.truncate_codes(2).unwrap(), vec![2, 3]);
    }

    #[test]
    fn dequantize_at_example() {
        let m = master_from(vec![200, 200], 0.01, 0, 8);
        let w2 = m.dequantize_at(2).unwrap();
        let w8 = m.dequantize_at(8).unwrap();
        assert!((w2.values()[0] - 1.92).abs() < 1e-12);
        assert!((w8.values()[0] - 2.00).abs() < 1e-12);
        assert!(w8.values()[0] - w2.values()[0] <= 0.01 * 63.0);
    }

    #[test]
    fn master_view_matches_direct_quantization() {
        let t = Tensor::new(
            vec![2, 40],
            (0..80).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        let layout = GroupLayout::default();
        let m = make_master(&t, layout, 8).unwrap();
        let direct = quant::quantize_tensor(&t, layout, 8).unwrap().dequantize();
        assert_eq!(m.dequantize_at(8).unwrap(), direct);
    }

    #[test]
    fn two_bit_grid_tensor_is_exact_at_two_bits() {
        // Range [0, 255] gives s = 1 at 8 bits; multiples of 64 survive a
        // 6-bit shift unchanged.
        let vals: Vec<f64> = vec![0.0, 64.0, 128.0, 192.0, 255.0];
        let t = Tensor::vector(vals).unwrap();
        let m = make_master(&t, GroupLayout::new(8).unwrap(), 8).unwrap();
        assert_eq!(m.params()[0].scale, 1.0);
        let w2 = m.dequantize_at(2).unwrap();
        assert_eq!(&w2.values()[..4], &[0.0, 64.0, 128.0, 192.0]);
    }

    #[test]
    fn shifted_master_keeps_views() {
        let t = Tensor::new(vec![64], (0..64).map(|i| (i as f64).sqrt()).collect()).unwrap();
        let m = make_master(&t, GroupLayout::default(), 8).unwrap();
        let s4 = m.shifted(4).unwrap();
        assert_eq!(s4.dequantize_at(4).unwrap(), m.dequantize_at(4).unwrap());
        assert_eq!(s4.dequantize_at(2).unwrap(), m.dequantize_at(2).unwrap());
        assert!(s4.dequantize_at(8).is_err());
        assert_eq!(m.shifted(8).unwrap(), m);
    }

    #[test]
    fn shift_composition() {
        let t = Tensor::new(
            vec![96],
            (0..96).map(|i| ((i * 7919) % 113) as f64).collect(),
        )
        .unwrap();
        let m = make_master(&t, GroupLayout::default(), 8).unwrap();
        for l1 in 2..=8u8 {
            for l2 in 2..=l1 {
                let via = m.shifted(l1).unwrap().truncate_codes(l2).unwrap();
                assert_eq!(via, m.truncate_codes(l2).unwrap());
            }
        }
    }
}
