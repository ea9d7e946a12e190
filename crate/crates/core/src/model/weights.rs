//! Weights file: a text manifest, raw little-endian tensor data, and a
//! CRC-32 trailer over everything before it.
//!
//! ```text
//! odssd-weights 1
//! config view_width=640
//! ...
//! param base.0.weight 64x3x3x3 fp32 1 0
//! ...
//! end
//! <data><crc32 le>
//! ```

use std::fmt;
use std::str::FromStr;

use super::{build_model, Model, ModelConfig, ModelError};
use crate::tensor::{Element, Tensor};

const MAGIC: &str = "odssd-weights 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp32,
    Int8,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Int8 => 1,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "int8" => Ok(Precision::Int8),
            _ => Err(format!("unknown precision {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Precision,
    /// Dequantization step (1 for fp32).
    pub scale: f32,
    /// Byte offset into the data section.
    pub offset: usize,
}

impl WeightsEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsManifest {
    pub config: ModelConfig,
    pub entries: Vec<WeightsEntry>,
    pub checksum: u32,
}

/// Per-tensor symmetric quantization: returns (codes, scale) with
/// `w ≈ q * scale`.
pub fn quantize_int8(values: &[f32]) -> (Vec<i8>, f32) {
    let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return (vec![0; values.len()], 0.0);
    }
    let q = values
        .iter()
        .map(|&w| (w * 127.0 / max).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, max / 127.0)
}

fn dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Serializes every parameter at the requested precision.
pub fn save_weights<T: Element>(model: &Model<T>, precision: Precision) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    for line in model.config().to_kv().lines() {
        header.push_str("config ");
        header.push_str(line);
        header.push('\n');
    }
    let mut data = Vec::new();
    for p in model.params() {
        let values: Vec<f32> = p.tensor.data().iter().map(|v| v.as_f64() as f32).collect();
        let offset = data.len();
        let scale = match precision {
            Precision::Fp32 => {
                for v in &values {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                1.0
            }
            Precision::Int8 => {
                let (q, scale) = quantize_int8(&values);
                data.extend(q.iter().map(|&c| c as u8));
                scale
            }
        };
        header.push_str(&format!(
            "param {} {} {} {:?} {}\n",
            p.name,
            dims(p.tensor.shape()),
            precision,
            scale,
            offset
        ));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&data);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Weights(msg.into())
}

/// Parses and validates the manifest; returns it with the data section.
pub fn read_manifest(bytes: &[u8]) -> Result<(WeightsManifest, &[u8]), ModelError> {
    if bytes.len() < 4 {
        return Err(bad("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let end = body
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("manifest has no end line"))?;
    let header = std::str::from_utf8(&body[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &body[end + 5..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a weights file"));
    }
    let mut config = ModelConfig::od_ssd_640();
    let mut entries = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("config") => {
                let kv = line["config ".len()..].trim();
                config.apply_kv(kv).map_err(bad)?;
            }
            Some("param") => {
                let f: Vec<&str> = parts.collect();
                if f.len() != 5 {
                    return Err(bad(format!("malformed entry {line:?}")));
                }
                let shape = if f[1] == "scalar" {
                    vec![]
                } else {
                    f[1].split('x')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad dims in {line:?}"))))
                        .collect::<Result<_, _>>()?
                };
                entries.push(WeightsEntry {
                    name: f[0].to_string(),
                    shape,
                    dtype: f[2].parse().map_err(bad)?,
                    scale: f[3].parse().map_err(|_| bad(format!("bad scale in {line:?}")))?,
                    offset: f[4].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?,
                });
            }
            _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
        }
    }
    let mut cursor = 0;
    for e in &entries {
        if e.offset != cursor {
            return Err(bad(format!(
                "{}: offset {} overlaps or leaves a gap (expected {cursor})",
                e.name, e.offset
            )));
        }
        cursor += e.byte_len();
    }
    if cursor != data.len() {
        return Err(bad(format!(
            "data section is {} bytes, manifest describes {cursor}",
            data.len()
        )));
    }
    Ok((
        WeightsManifest {
            config,
            entries,
            checksum: stored,
        },
        data,
    ))
}

/// Rebuilds the model described by the file and fills in its parameters.
pub fn load_weights<T: Element>(bytes: &[u8]) -> Result<(Model<T>, WeightsManifest), ModelError> {
    let (manifest, data) = read_manifest(bytes)?;
    let mut model = build_model::<T>(&manifest.config, 0)?;
    if model.params().len() != manifest.entries.len() {
        return Err(bad(format!(
            "file has {} tensors, model has {}",
            manifest.entries.len(),
            model.params().len()
        )));
    }
    for (p, e) in model.params_mut().iter_mut().zip(&manifest.entries) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(bad(format!(
                "entry {} {:?} does not match registry {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        let raw = &data[e.offset..e.offset + e.byte_len()];
        let values: Vec<T> = match e.dtype {
            Precision::Fp32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Precision::Int8 => raw
                .iter()
                .map(|&b| T::from_f64((b as i8 as f32 * e.scale) as f64))
                .collect(),
        };
        p.tensor = Tensor::new(&e.shape, values)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        let mut c = ModelConfig::toy();
        c.width_scale = 0.125;
        build_model(&c, 3).unwrap()
    }

    #[test]
    fn fp32_round_trip_is_exact() {
        let m = small();
        let blob = save_weights(&m, Precision::Fp32);
        let (back, manifest) = load_weights::<f32>(&blob).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(&manifest.config, m.config());
    }

    #[test]
    fn int8_error_within_half_step() {
        let m = small();
        let blob = save_weights(&m, Precision::Int8);
        let (back, manifest) = load_weights::<f32>(&blob).unwrap();
        for ((a, b), e) in m.params().iter().zip(back.params()).zip(&manifest.entries) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() <= e.scale / 2.0 * 1.0001 + 1e-12, "{}", a.name);
            }
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let m = small();
        let mut blob = save_weights(&m, Precision::Fp32);
        let mid = blob.len() / 2;
        blob[mid] ^= 1;
        assert!(matches!(load_weights::<f32>(&blob), Err(ModelError::Weights(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = small();
        let blob = save_weights(&m, Precision::Fp32);
        let end = blob.windows(5).position(|w| w == b"\nend\n").unwrap();
        let header = std::str::from_utf8(&blob[..end]).unwrap();
        // a different width scale makes the registry shapes disagree
        let mut bytes = header.replacen("width_scale=0.125", "width_scale=0.25", 1).into_bytes();
        bytes.extend_from_slice(&blob[end..blob.len() - 4]);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        let err = load_weights::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }

    #[test]
    fn quantize_bounds() {
        let (q, s) = quantize_int8(&[0.5, -1.0, 0.25]);
        assert_eq!(q, vec![64, -127, 32]);
        assert!((s - 1.0 / 127.0).abs() < 1e-9);
        assert_eq!(quantize_int8(&[0.0, 0.0]), (vec![0, 0], 0.0));
    }
}
