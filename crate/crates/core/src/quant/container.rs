//! ACDF binary container, little-endian throughout:
//!
//! ```text
//! "ACDF"  u16 version  u8 mode  u32 len + spec text
//! u32 n_tensors, each: u16 len + name, u8 dtype (0 f32, 1 i8, 2 i32),
//!     u8 rank, rank × u32 dims, f32 scale, i32 zero_point, u32 len + blob
//! u32 n_activations, each: u16 len + name, f32 scale, i32 zero_point
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{fold_batchnorm, QData, QTensor, QuantParams, QuantizedModel};
use crate::model::{ModelError, Params};
use crate::net::{parse_spec, NetError, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ACDF";
pub const VERSION: u16 = 1;
/// Encoded size of a container with no spec text, tensors or activations.
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not an ACDF container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated container: need {needed} bytes at offset {at}, {left} left")]
    Truncated { at: usize, needed: usize, left: usize },
    #[error("unknown container mode {0}")]
    BadMode(u8),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("record `{name}`: {reason}")]
    BadRecord { name: String, reason: String },
    #[error("trailing {0} bytes after container")]
    Trailing(usize),
    #[error("invalid utf-8 in container text")]
    Utf8,
    #[error("container holds {found:?} data, expected {expected:?}")]
    WrongMode { expected: ContainerMode, found: ContainerMode },
    #[error(transparent)]
    Spec(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerMode {
    Float,
    Int8,
}

impl ContainerMode {
    fn tag(self) -> u8 {
        match self {
            ContainerMode::Float => 0,
            ContainerMode::Int8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: QTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub mode: ContainerMode,
    pub spec_text: String,
    /// Sorted by name.
    pub records: Vec<Record>,
    /// Sorted by name.
    pub activations: Vec<(String, QuantParams)>,
}

const UNIT: QuantParams = QuantParams {
    scale: 1.0,
    zero_point: 0,
};

impl Container {
    pub fn empty(mode: ContainerMode) -> Self {
        Self {
            mode,
            spec_text: String::new(),
            records: Vec::new(),
            activations: Vec::new(),
        }
    }

    /// Float container of every tensor in `params` (a training checkpoint).
    pub fn from_params(spec: &NetworkSpec, params: &Params) -> Self {
        let records = params
            .iter()
            .map(|(name, t)| Record {
                name: name.to_string(),
                tensor: QTensor {
                    shape: t.shape().to_vec(),
                    params: UNIT,
                    data: QData::F32(t.data().to_vec()),
                },
            })
            .collect();
        Self {
            mode: ContainerMode::Float,
            spec_text: spec.to_text(),
            records,
            activations: Vec::new(),
        }
    }

    /// Float deployable: batch-norm folded, conv and dense tensors only.
    pub fn from_folded(spec: &NetworkSpec, params: &Params) -> Result<Self, ContainerError> {
        Ok(Self::from_params(spec, &fold_batchnorm(spec, params)?))
    }

    pub fn from_quantized(model: &QuantizedModel) -> Self {
        Self {
            mode: ContainerMode::Int8,
            spec_text: model.spec.to_text(),
            records: model
                .tensors
                .iter()
                .map(|(name, t)| Record {
                    name: name.clone(),
                    tensor: t.clone(),
                })
                .collect(),
            activations: model.activations.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }

    pub fn spec(&self) -> Result<NetworkSpec, ContainerError> {
        Ok(parse_spec(&self.spec_text)?)
    }

    fn expect_mode(&self, expected: ContainerMode) -> Result<(), ContainerError> {
        if self.mode == expected {
            Ok(())
        } else {
            Err(ContainerError::WrongMode {
                expected,
                found: self.mode,
            })
        }
    }

    pub fn to_params(&self) -> Result<Params, ContainerError> {
        self.expect_mode(ContainerMode::Float)?;
        let mut out = Params::default();
        for r in &self.records {
            let QData::F32(v) = &r.tensor.data else {
                return Err(bad(&r.name, "float container holds integer data"));
            };
            let t = Tensor::new(&r.tensor.shape, v.clone()).map_err(|e| bad(&r.name, &e.to_string()))?;
            out.insert(r.name.clone(), t);
        }
        Ok(out)
    }

    pub fn to_quantized(&self) -> Result<QuantizedModel, ContainerError> {
        self.expect_mode(ContainerMode::Int8)?;
        Ok(QuantizedModel {
            spec: self.spec()?,
            tensors: self.records.iter().map(|r| (r.name.clone(), r.tensor.clone())).collect::<BTreeMap<_, _>>(),
            activations: self.activations.iter().cloned().collect(),
        })
    }

    /// Bytes of tensor payload.
    pub fn blob_bytes(&self) -> usize {
        self.records.iter().map(|r| r.tensor.data.byte_len()).sum()
    }

    /// Everything that is not tensor payload.
    pub fn metadata_bytes(&self) -> usize {
        self.encoded_len() - self.blob_bytes()
    }

    pub fn encoded_len(&self) -> usize {
        let records: usize = self
            .records
            .iter()
            .map(|r| 2 + r.name.len() + 1 + 1 + 4 * r.tensor.shape.len() + 4 + 4 + 4 + r.tensor.data.byte_len())
            .sum();
        let acts: usize = self.activations.iter().map(|(n, _)| 2 + n.len() + 8).sum();
        HEADER_LEN + self.spec_text.len() + records + acts
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.mode.tag());
        put_u32(&mut b, self.spec_text.len());
        b.extend_from_slice(self.spec_text.as_bytes());
        put_u32(&mut b, self.records.len());
        for r in &self.records {
            put_name(&mut b, &r.name);
            let t = &r.tensor;
            b.push(match t.data {
                QData::F32(_) => 0,
                QData::I8(_) => 1,
                QData::I32(_) => 2,
            });
            b.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut b, d);
            }
            put_params(&mut b, t.params);
            put_u32(&mut b, t.data.byte_len());
            match &t.data {
                QData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                QData::I8(v) => b.extend(v.iter().map(|&x| x as u8)),
                QData::I32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        put_u32(&mut b, self.activations.len());
        for (name, p) in &self.activations {
            put_name(&mut b, name);
            put_params(&mut b, *p);
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4).map_err(|_| ContainerError::BadMagic)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let mode = match r.u8()? {
            0 => ContainerMode::Float,
            1 => ContainerMode::Int8,
            m => return Err(ContainerError::BadMode(m)),
        };
        let len = r.u32()?;
        let spec_text = r.text(len)?;
        let n = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            let dtype = r.u8()?;
            let elem = match dtype {
                0 | 2 => 4,
                1 => 1,
                d => return Err(ContainerError::BadDtype(d)),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let params = r.params()?;
            let byte_len = r.u32()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(elem)) != Some(byte_len) {
                return Err(bad(&name, &format!("blob of {byte_len} bytes does not match shape {shape:?}")));
            }
            // bounds checked before any allocation sized by the file
            let blob = r.take(byte_len)?;
            let data = match dtype {
                0 => QData::F32(blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => QData::I8(blob.iter().map(|&x| x as i8).collect()),
                _ => QData::I32(blob.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            records.push(Record {
                name,
                tensor: QTensor { shape, params, data },
            });
        }
        let n = r.u32()?;
        let mut activations = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            activations.push((name, r.params()?));
        }
        if r.at != bytes.len() {
            return Err(ContainerError::Trailing(bytes.len() - r.at));
        }
        Ok(Self {
            mode,
            spec_text,
            records,
            activations,
        })
    }
}

fn bad(name: &str, reason: &str) -> ContainerError {
    ContainerError::BadRecord {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&u32::try_from(v).expect("container field exceeds u32").to_le_bytes());
}

fn put_name(b: &mut Vec<u8>, name: &str) {
    b.extend_from_slice(&u16::try_from(name.len()).expect("name exceeds u16").to_le_bytes());
    b.extend_from_slice(name.as_bytes());
}

fn put_params(b: &mut Vec<u8>, p: QuantParams) {
    b.extend_from_slice(&p.scale.to_le_bytes());
    b.extend_from_slice(&p.zero_point.to_le_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let left = self.b.len() - self.at;
        if n > left {
            return Err(ContainerError::Truncated {
                at: self.at,
                needed: n,
                left,
            });
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, n: usize) -> Result<String, ContainerError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ContainerError::Utf8)
    }

    fn name(&mut self) -> Result<String, ContainerError> {
        let n = self.u16()? as usize;
        self.text(n)
    }

    fn params(&mut self) -> Result<QuantParams, ContainerError> {
        let scale = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        let zero_point = i32::from_le_bytes(self.take(4)?.try_into().unwrap());
        Ok(QuantParams { scale, zero_point })
    }
}

/// Encoded size in bytes.
pub fn model_size_bytes(c: &Container) -> usize {
    c.encoded_len()
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn save_model(c: &Container, path: &Path) -> Result<(), ContainerError> {
    write_atomic(path, &c.encode())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Container, ContainerError> {
    Container::decode(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_acdnet, propagate_shapes};

    fn sample() -> (NetworkSpec, Params) {
        let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
        let params = Params::<f32>::init(&spec, 3).unwrap();
        (spec, params)
    }

    #[test]
    fn empty_container_is_header_only() {
        let c = Container::empty(ContainerMode::Int8);
        assert_eq!(c.encode().len(), HEADER_LEN);
        assert_eq!(model_size_bytes(&c), 19);
        assert_eq!(Container::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let (spec, params) = sample();
        let c = Container::from_params(&spec, &params);
        let bytes = c.encode();
        assert_eq!(bytes.len(), c.encoded_len());
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let p = back.to_params().unwrap();
        for (name, t) in params.iter() {
            let u = p.get(name).unwrap();
            assert_eq!(u.shape(), t.shape());
            assert!(u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let s = back.spec().unwrap();
        assert_eq!(propagate_shapes(&s).unwrap(), propagate_shapes(&spec).unwrap());
    }

    #[test]
    fn distinct_errors() {
        let (spec, params) = sample();
        let bytes = Container::from_params(&spec, &params).encode();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Container::decode(&m), Err(ContainerError::BadMagic)));
        assert!(matches!(Container::decode(b"AC"), Err(ContainerError::BadMagic)));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Container::decode(&v), Err(ContainerError::UnsupportedVersion(9))));
        for cut in [7, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(ContainerError::Truncated { .. })), "cut {cut}");
        }
    }

    #[test]
    fn huge_declared_blob_is_rejected_without_allocating() {
        let mut c = Container::empty(ContainerMode::Float);
        c.records.push(Record {
            name: "w".into(),
            tensor: QTensor {
                shape: vec![2],
                params: UNIT,
                data: QData::F32(vec![1.0, 2.0]),
            },
        });
        let mut b = c.encode();
        // dims = [u32::MAX], byte_len = u32::MAX
        let dim_at = HEADER_LEN - 4 + 2 + 1 + 1 + 1;
        b[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Container::decode(&b), Err(ContainerError::BadRecord { .. })));
        let len_at = dim_at + 4 + 8;
        // consistent 1 GiB declaration, far past the end of the buffer
        b[dim_at..dim_at + 4].copy_from_slice(&(1u32 << 28).to_le_bytes());
        b[len_at..len_at + 4].copy_from_slice(&(1u32 << 30).to_le_bytes());
        assert!(matches!(Container::decode(&b), Err(ContainerError::Truncated { .. })));
    }

    #[test]
    fn save_load_and_stable_bytes() {
        let (spec, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.acdf");
        let c = Container::from_params(&spec, &params);
        save_model(&c, &path).unwrap();
        let first = fs::read(&path).unwrap();
        save_model(&load_model(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(Container::from_params(&spec, &params.clone()).encode(), first);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn wrong_mode_is_reported() {
        let (spec, params) = sample();
        let c = Container::from_params(&spec, &params);
        assert!(matches!(c.to_quantized(), Err(ContainerError::WrongMode { .. })));
    }
}
