//! `BBQT` container format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BBQT"
//! 4       1     version (1)
//! 5       1     kind (0 tensor, 1 quantized, 2 master)
//! 6       2     reserved, zero
//! 8       4     JSON metadata length, u32 LE
//! 12      n     UTF-8 JSON metadata
//! 12+n    ...   raw sections, in the order listed in metadata
//! ```
//!
//! Sections by kind:
//!
//! - tensor: `values` (f32 LE when every value is exactly representable,
//!   otherwise f64 LE; recorded as `dtype`)
//! - quantized: `codes` (packed), `scales`, `zero_points` (i32 LE),
//!   `code_sums` (u32 LE)
//! - master: `codes` (packed at the stored bit-width), `scales`,
//!   `zero_points`
//!
//! `scales` is one E4M3 byte per group (`scale_format = "e4m3"`, decoded as
//! `tensor_scale * e4m3`) or one f64 LE per group (`"f64"`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mx::e4m3;
use crate::mx::pack::{pack_codes, packed_len, unpack_codes, PackedCodes};
use crate::nested::MasterCode;
use crate::quant::{self, GroupLayout, GroupQuantParams, QuantizedTensor, ScaleFormat};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BBQT";
pub const VERSION: u8 = 1;
pub const PREAMBLE_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Tensor = 0,
    Quantized = 1,
    Master = 2,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Kind::Tensor),
            1 => Ok(Kind::Quantized),
            2 => Ok(Kind::Master),
            _ => Err(Error::parse("header", format!("unknown kind {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Tensor => "tensor",
            Kind::Quantized => "quantized",
            Kind::Master => "master",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Tensor(Tensor),
    Quantized(QuantizedTensor),
    Master(MasterCode),
}

impl Container {
    pub fn kind(&self) -> Kind {
        match self {
            Container::Tensor(_) => Kind::Tensor,
            Container::Quantized(_) => Kind::Quantized,
            Container::Master(_) => Kind::Master,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub bytes: usize,
}

/// Byte accounting for a quantized payload. Informational; recomputed on
/// parse rather than trusted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub elements: usize,
    pub code_bytes: usize,
    pub scale_bytes: usize,
    pub zero_point_bytes: usize,
    pub code_sum_bytes: usize,
}

impl Accounting {
    /// Bits per weight spent on codes and scales only.
    pub fn bits_per_weight(&self) -> f64 {
        if self.elements == 0 {
            return 0.0;
        }
        8.0 * (self.code_bytes + self.scale_bytes) as f64 / self.elements as f64
    }

    pub fn scale_bits_per_weight(&self) -> f64 {
        if self.elements == 0 {
            return 0.0;
        }
        8.0 * self.scale_bytes as f64 / self.elements as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    master_bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tensor_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accounting: Option<Accounting>,
    sections: Vec<SectionInfo>,
}

fn scale_section(format: &ScaleFormat, params: &[GroupQuantParams]) -> (Vec<u8>, Option<f32>) {
    match format {
        ScaleFormat::E4M3 {
            tensor_scale,
            bytes,
        } => (bytes.clone(), Some(*tensor_scale)),
        ScaleFormat::Exact => (
            params.iter().flat_map(|p| p.scale.to_le_bytes()).collect(),
            None,
        ),
    }
}

fn i32_section(values: impl Iterator<Item = i32>) -> Vec<u8> {
    values.flat_map(i32::to_le_bytes).collect()
}

fn u32_section(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Byte accounting for a quantized or master payload.
pub fn accounting_for(
    n: usize,
    bits: u8,
    groups: usize,
    format: &ScaleFormat,
    with_sums: bool,
) -> Accounting {
    Accounting {
        elements: n,
        code_bytes: packed_len(n, bits),
        scale_bytes: match format {
            ScaleFormat::E4M3 { .. } => groups,
            ScaleFormat::Exact => 8 * groups,
        },
        zero_point_bytes: 4 * groups,
        code_sum_bytes: if with_sums { 4 * groups } else { 0 },
    }
}

fn tensor_is_f32_exact(t: &Tensor) -> bool {
    t.values().iter().all(|&v| (v as f32) as f64 == v)
}

pub fn serialize_container(c: &Container) -> Vec<u8> {
    let (meta, sections): (Metadata, Vec<(&str, Vec<u8>)>) = match c {
        Container::Tensor(t) => {
            let (dtype, bytes): (&str, Vec<u8>) = if tensor_is_f32_exact(t) {
                (
                    "f32",
                    t.values()
                        .iter()
                        .flat_map(|&v| (v as f32).to_le_bytes())
                        .collect(),
                )
            } else {
                (
                    "f64",
                    t.values().iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            };
            (
                Metadata {
                    shape: t.shape().to_vec(),
                    dtype: Some(dtype.into()),
                    bits: None,
                    master_bits: None,
                    group_size: None,
                    scale_format: None,
                    tensor_scale: None,
                    accounting: None,
                    sections: vec![],
                },
                vec![("values", bytes)],
            )
        }
        Container::Quantized(q) => {
            let codes = pack_codes(q.codes(), q.bits()).expect("codes fit their bit-width");
            let (scales, tensor_scale) = scale_section(q.scale_format(), q.params());
            (
                Metadata {
                    shape: q.shape().to_vec(),
                    dtype: None,
                    bits: Some(q.bits()),
                    master_bits: None,
                    group_size: Some(q.layout().group_size),
                    scale_format: Some(q.scale_format().name().into()),
                    tensor_scale,
                    accounting: Some(accounting_for(
                        q.len(),
                        q.bits(),
                        q.group_count(),
                        q.scale_format(),
                        true,
                    )),
                    sections: vec![],
                },
                vec![
                    ("codes", codes.into_bytes()),
                    ("scales", scales),
                    (
                        "zero_points",
                        i32_section(q.params().iter().map(|p| p.zero_point)),
                    ),
                    ("code_sums", u32_section(q.code_sums())),
                ],
            )
        }
        Container::Master(m) => {
            let codes = pack_codes(m.codes(), m.stored_bits()).expect("codes fit their bit-width");
            let (scales, tensor_scale) = scale_section(m.scale_format(), m.params());
            (
                Metadata {
                    shape: m.shape().to_vec(),
                    dtype: None,
                    bits: Some(m.stored_bits()),
                    master_bits: Some(m.master_bits()),
                    group_size: Some(m.layout().group_size),
                    scale_format: Some(m.scale_format().name().into()),
                    tensor_scale,
                    accounting: Some(accounting_for(
                        m.len(),
                        m.stored_bits(),
                        m.params().len(),
                        m.scale_format(),
                        false,
                    )),
                    sections: vec![],
                },
                vec![
                    ("codes", codes.into_bytes()),
                    ("scales", scales),
                    (
                        "zero_points",
                        i32_section(m.params().iter().map(|p| p.zero_point)),
                    ),
                ],
            )
        }
    };
    let meta = Metadata {
        sections: sections
            .iter()
            .map(|(name, b)| SectionInfo {
                name: (*name).into(),
                bytes: b.len(),
            })
            .collect(),
        ..meta
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(c.kind() as u8);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, b) in sections {
        out.extend_from_slice(&b);
    }
    out
}

struct Reader<'a> {
    sections: Vec<(&'a str, &'a [u8])>,
}

impl<'a> Reader<'a> {
    fn take(&self, name: &str, expected: usize) -> Result<&'a [u8]> {
        let (_, data) = self
            .sections
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::parse(name, "missing section"))?;
        if data.len() != expected {
            return Err(Error::parse(
                name,
                format!("expected {expected} bytes, found {}", data.len()),
            ));
        }
        Ok(data)
    }
}

fn expect_sections(meta: &Metadata, names: &[&str]) -> Result<()> {
    let got: Vec<&str> = meta.sections.iter().map(|s| s.name.as_str()).collect();
    if got != names {
        return Err(Error::parse(
            "metadata",
            format!("expected sections {names:?}, found {got:?}"),
        ));
    }
    Ok(())
}

fn read_scales(
    meta: &Metadata,
    reader: &Reader,
    groups: usize,
) -> Result<(ScaleFormat, Option<Vec<f64>>)> {
    match meta.scale_format.as_deref() {
        Some("e4m3") => {
            let bytes = reader.take("scales", groups)?.to_vec();
            if bytes
                .iter()
                .any(|&b| e4m3::decode(b).is_nan() || e4m3::decode(b) <= 0.0)
            {
                return Err(Error::parse("scales", "scale byte is NaN or non-positive"));
            }
            let tensor_scale = meta
                .tensor_scale
                .filter(|t| t.is_finite() && *t > 0.0)
                .ok_or_else(|| Error::parse("metadata", "missing or invalid tensor_scale"))?;
            Ok((
                ScaleFormat::E4M3 {
                    tensor_scale,
                    bytes,
                },
                None,
            ))
        }
        Some("f64") => {
            let raw = reader.take("scales", 8 * groups)?;
            let scales = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((ScaleFormat::Exact, Some(scales)))
        }
        other => Err(Error::parse(
            "metadata",
            format!("unknown scale_format {other:?}"),
        )),
    }
}

fn read_i32s(raw: &[u8]) -> Vec<i32> {
    raw.chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::parse("header", "truncated preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::parse("header", "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::parse(
            "header",
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let kind = Kind::from_byte(bytes[5])?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::parse("header", "reserved bytes not zero"));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json_end = PREAMBLE_LEN
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse("metadata", "truncated metadata"))?;
    let meta: Metadata = serde_json::from_slice(&bytes[PREAMBLE_LEN..json_end])
        .map_err(|e| Error::parse("metadata", e.to_string()))?;

    let mut offset = json_end;
    let mut sections = Vec::with_capacity(meta.sections.len());
    for s in &meta.sections {
        let end = offset
            .checked_add(s.bytes)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(&s.name, "truncated section"))?;
        sections.push((s.name.as_str(), &bytes[offset..end]));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::parse(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - offset),
        ));
    }
    let reader = Reader { sections };
    let n: usize = meta.shape.iter().product();

    match kind {
        Kind::Tensor => {
            expect_sections(&meta, &["values"])?;
            let values = match meta.dtype.as_deref() {
                Some("f32") => reader
                    .take("values", 4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Some("f64") => reader
                    .take("values", 8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                other => return Err(Error::parse("metadata", format!("unknown dtype {other:?}"))),
            };
            let t = Tensor::new(meta.shape.clone(), values)
                .map_err(|e| Error::parse("values", e.to_string()))?;
            Ok(Container::Tensor(t))
        }
        Kind::Quantized | Kind::Master => {
            let bits = meta
                .bits
                .ok_or_else(|| Error::parse("metadata", "missing bits"))?;
            quant::check_bits(bits).map_err(|e| Error::parse("metadata", e.to_string()))?;
            let layout = meta
                .group_size
                .ok_or_else(|| Error::parse("metadata", "missing group_size"))
                .and_then(|g| {
                    GroupLayout::new(g).map_err(|e| Error::parse("metadata", e.to_string()))
                })?;
            let groups = layout.group_count(n);
            let names: &[&str] = if kind == Kind::Quantized {
                &["codes", "scales", "zero_points", "code_sums"]
            } else {
                &["codes", "scales", "zero_points"]
            };
            expect_sections(&meta, names)?;
            let packed = PackedCodes::from_bytes(
                reader.take("codes", packed_len(n, bits))?.to_vec(),
                bits,
                n,
            )
            .map_err(|e| Error::parse("codes", e.to_string()))?;
            let codes = unpack_codes(&packed);
            let (format, exact) = read_scales(&meta, &reader, groups)?;
            let zero_points = read_i32s(reader.take("zero_points", 4 * groups)?);

            if kind == Kind::Quantized {
                let sums = reader.take("code_sums", 4 * groups)?;
                let q = QuantizedTensor::from_parts(
                    meta.shape.clone(),
                    layout,
                    bits,
                    zero_points,
                    codes,
                    format,
                    exact,
                )
                .map_err(|e| Error::parse("scales", e.to_string()))?;
                if u32_section(q.code_sums()) != sums {
                    return Err(Error::parse("code_sums", "sums disagree with codes"));
                }
                Ok(Container::Quantized(q))
            } else {
                let master_bits = meta
                    .master_bits
                    .ok_or_else(|| Error::parse("metadata", "missing master_bits"))?;
                quant::check_bits(master_bits)
                    .map_err(|e| Error::parse("metadata", e.to_string()))?;
                let scales: Vec<f64> = match (&format, exact) {
                    (
                        ScaleFormat::E4M3 {
                            tensor_scale,
                            bytes,
                        },
                        _,
                    ) => bytes
                        .iter()
                        .map(|&b| *tensor_scale as f64 * e4m3::decode(b))
                        .collect(),
                    (ScaleFormat::Exact, Some(s)) => s,
                    (ScaleFormat::Exact, None) => unreachable!(),
                };
                let params = scales
                    .iter()
                    .zip(&zero_points)
                    .map(|(&s, &z)| GroupQuantParams::new(s, z, master_bits))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::parse("scales", e.to_string()))?;
                let m = MasterCode::from_parts(
                    master_bits,
                    bits,
                    meta.shape.clone(),
                    layout,
                    params,
                    codes,
                    format,
                )
                .map_err(|e| Error::parse("codes", e.to_string()))?;
                Ok(Container::Master(m))
            }
        }
    }
}

pub fn write_file(path: &Path, c: &Container) -> Result<()> {
    std::fs::write(path, serialize_container(c))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    parse_container(&bytes)
}

/// Accounting for any container kind (`None` for plain tensors).
pub fn accounting(c: &Container) -> Option<Accounting> {
    match c {
        Container::Tensor(_) => None,
        Container::Quantized(q) => Some(accounting_for(
            q.len(),
            q.bits(),
            q.group_count(),
            q.scale_format(),
            true,
        )),
        Container::Master(m) => Some(accounting_for(
            m.len(),
            m.stored_bits(),
            m.params().len(),
            m.scale_format(),
            false,
        )),
    }
}
