//! Checkpoint files: a text magic line, a JSON header with the tensor table,
//! then the little-endian payload.
//!
//! ```text
//! HGF-CKPT v1 <header bytes>\n
//! {"format_version":1,"model":{..},"train":{..},"step":..,"tensors":[..]}
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ArchMode, ModelConfig, TrainConfig};
use crate::error::{HgfError, Result};
use crate::layers::{HgfModel, ParamStore};
use crate::quant::{PackingMode, TernaryWeight};
use crate::tensor::DenseTensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "HGF-CKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dtype {
    Fp32,
    #[serde(rename = "TRIT_PACKED_2BIT")]
    TritPacked2Bit,
    #[serde(rename = "TRIT_PACKED_5PB")]
    TritPacked5pb,
    Int8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub mode: ArchMode,
    pub gates_frozen: bool,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor as it sits in the payload.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Fp32(DenseTensor),
    Ternary(TernaryWeight),
    Int8 {
        shape: Vec<usize>,
        data: Vec<i8>,
        scale: f32,
    },
}

impl StoredTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredTensor::Fp32(_) => Dtype::Fp32,
            StoredTensor::Ternary(t) => match t.packing() {
                PackingMode::TwoBit => Dtype::TritPacked2Bit,
                PackingMode::FivePerByte => Dtype::TritPacked5pb,
            },
            StoredTensor::Int8 { .. } => Dtype::Int8,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            StoredTensor::Fp32(t) => t.shape().to_vec(),
            StoredTensor::Ternary(t) => vec![t.out_features(), t.in_features()],
            StoredTensor::Int8 { shape, .. } => shape.clone(),
        }
    }

    fn scale(&self) -> Option<f32> {
        match self {
            StoredTensor::Fp32(_) => None,
            StoredTensor::Ternary(t) => Some(t.scale()),
            StoredTensor::Int8 { scale, .. } => Some(*scale),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::Fp32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            StoredTensor::Ternary(t) => out.extend_from_slice(t.packed()),
            StoredTensor::Int8 { data, .. } => out.extend(data.iter().map(|&x| x as u8)),
        }
    }

    fn read(entry: &TensorEntry, bytes: &[u8]) -> Result<Self> {
        let n: usize = entry.shape.iter().product();
        let need_scale = || entry.scale.ok_or_else(|| bad(format!("`{}` has no scale", entry.name)));
        let expect_len = |len: usize| {
            if bytes.len() == len {
                Ok(())
            } else {
                Err(bad(format!(
                    "`{}` holds {} bytes, expected {len}",
                    entry.name,
                    bytes.len()
                )))
            }
        };
        match entry.dtype {
            Dtype::Fp32 => {
                expect_len(4 * n)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(StoredTensor::Fp32(DenseTensor::from_parts(entry.shape.clone(), data)))
            }
            Dtype::TritPacked2Bit | Dtype::TritPacked5pb => {
                let packing = if entry.dtype == Dtype::TritPacked2Bit {
                    PackingMode::TwoBit
                } else {
                    PackingMode::FivePerByte
                };
                let [out_f, in_f] = entry.shape[..] else {
                    return Err(bad(format!("ternary `{}` must be 2-D", entry.name)));
                };
                expect_len(packing.packed_len(n))?;
                Ok(StoredTensor::Ternary(TernaryWeight::from_packed(
                    out_f,
                    in_f,
                    bytes.to_vec(),
                    need_scale()?,
                    packing,
                )?))
            }
            Dtype::Int8 => {
                expect_len(n)?;
                Ok(StoredTensor::Int8 {
                    shape: entry.shape.clone(),
                    data: bytes.iter().map(|&b| b as i8).collect(),
                    scale: need_scale()?,
                })
            }
        }
    }
}

fn bad(msg: impl Into<String>) -> HgfError {
    HgfError::Checkpoint(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub gates_frozen: bool,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    /// Latent parameters in store order, then packed weights by name.
    pub fn from_model(model: &HgfModel, train: &TrainConfig, step: usize) -> Self {
        let mut tensors: Vec<(String, StoredTensor)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), StoredTensor::Fp32(p.value.clone())))
            .collect();
        tensors.extend(
            model
                .ternary()
                .iter()
                .map(|(n, t)| (n.clone(), StoredTensor::Ternary(t.clone()))),
        );
        Self {
            model: model.config().clone(),
            train: train.clone(),
            step,
            gates_frozen: model.gates_frozen(),
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<HgfModel> {
        let mut params = ParamStore::new();
        let mut ternary = BTreeMap::new();
        for (name, t) in &self.tensors {
            match t {
                StoredTensor::Fp32(v) => {
                    params.insert(name.clone(), v.clone())?;
                }
                StoredTensor::Ternary(w) => {
                    ternary.insert(name.clone(), w.clone());
                }
                StoredTensor::Int8 { .. } => return Err(bad(format!("model tensor `{name}` cannot be INT8"))),
            }
        }
        HgfModel::from_parts(self.model.clone(), params, ternary, self.gates_frozen)
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut buf = Vec::new();
                t.write_payload(&mut buf);
                let entry = TensorEntry {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape(),
                    offset,
                    len: buf.len() as u64,
                    scale: t.scale(),
                };
                offset += buf.len() as u64;
                entry
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            mode: self.model.mode,
            gates_frozen: self.gates_frozen,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = format!("{MAGIC} v{FORMAT_VERSION} {}\n", header.len()).into_bytes();
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            t.write_payload(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header line is not text"))?;
        let mut parts = line.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(bad("not an HGF checkpoint"));
        }
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok());
        if version != Some(FORMAT_VERSION) {
            return Err(bad(format!(
                "unsupported format version {:?}, expected {FORMAT_VERSION}",
                version
            )));
        }
        let header_len: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        let rest = &bytes[nl + 1..];
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        if header.mode != header.model.mode {
            return Err(bad("header mode disagrees with the model config"));
        }
        header.model.validate()?;
        let payload = &rest[header_len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected {
                return Err(bad(format!("`{}` starts at {}, expected {expected}", e.name, e.offset)));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= payload.len() as u64);
            let end = end.ok_or_else(|| bad(format!("`{}` runs past the payload", e.name)))?;
            tensors.push((
                e.name.clone(),
                StoredTensor::read(e, &payload[e.offset as usize..end as usize])?,
            ));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            gates_frozen: header.gates_frozen,
            tensors,
        })
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Replaces `path` with `bytes` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| bad(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(mode: ArchMode) -> Checkpoint {
        let model = HgfModel::init(ModelConfig::desk(mode), 5).unwrap();
        Checkpoint::from_model(&model, &TrainConfig::default(), 12)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        for mode in ArchMode::ALL {
            let c = ckpt(mode);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn model_round_trip() {
        let model = HgfModel::init(ModelConfig::desk(ArchMode::HgfFull), 5).unwrap();
        let exported = model.export_ternary(PackingMode::FivePerByte).unwrap();
        for m in [model, exported] {
            let c = Checkpoint::from_model(&m, &TrainConfig::default(), 0);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap().to_model().unwrap(), m);
        }
    }

    #[test]
    fn offsets_ascend_without_gaps() {
        let h = ckpt(ArchMode::Bitnet).header();
        let mut at = 0;
        for e in &h.tensors {
            assert_eq!(e.offset, at);
            at += e.len;
        }
    }

    #[test]
    fn exported_has_no_fp32_backbone() {
        let model = HgfModel::init(ModelConfig::desk(ArchMode::HgfFull), 5).unwrap();
        let c = Checkpoint::from_model(
            &model.export_ternary(PackingMode::TwoBit).unwrap(),
            &TrainConfig::default(),
            0,
        );
        for e in c.header().tensors {
            if e.name.ends_with(".weight") && e.name.starts_with("layers.") {
                assert_eq!(e.dtype, Dtype::TritPacked2Bit, "{}", e.name);
                let n: u64 = e.shape.iter().product::<usize>() as u64;
                assert!(e.len <= n.div_ceil(4));
            }
        }
    }

    #[test]
    fn version_mismatch_is_refused() {
        let bytes = ckpt(ArchMode::Bitnet).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..20]).replace("v1", "v2");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[20..]);
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(HgfError::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = ckpt(ArchMode::DiffOnly).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"hello\n{}").is_err());
    }

    #[test]
    fn int8_tensors_round_trip() {
        let mut c = ckpt(ArchMode::Bitnet);
        c.tensors.push((
            "probe".into(),
            StoredTensor::Int8 {
                shape: vec![2, 2],
                data: vec![-127, 0, 5, 127],
                scale: 0.5,
            },
        ));
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        assert!(c.to_model().is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt(ArchMode::HgfQkOnly);
        c.save(&path).unwrap();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
