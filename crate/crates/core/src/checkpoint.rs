//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RAE2"            4-byte magic
//! version           u32
//! metadata_len      u32, followed by metadata_len bytes of UTF-8
//! tensor_count      u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   (1 = f32, 2 = f64)
//!   rank     u32, then rank × u32 dims
//!   payload  product(dims) × dtype size bytes
//! ```

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"RAE2";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    NotACheckpoint,
    VersionMismatch { found: u32, expected: u32 },
    Truncated { offset: usize, needed: usize },
    BadUtf8 { offset: usize },
    BadDtype { code: u8, offset: usize },
    TrailingBytes { offset: usize },
    MissingTensor(String),
    WrongDtype(String),
}

impl fmt::Display for CheckpointErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotACheckpoint => write!(f, "not a checkpoint (bad magic)"),
            Self::VersionMismatch { found, expected } => {
                write!(f, "unsupported format version {found} (this build reads version {expected})")
            }
            Self::Truncated { offset, needed } => {
                write!(f, "truncated at byte offset {offset} (needed {needed} more bytes)")
            }
            Self::BadUtf8 { offset } => write!(f, "invalid UTF-8 at byte offset {offset}"),
            Self::BadDtype { code, offset } => write!(f, "unknown dtype code {code} at byte offset {offset}"),
            Self::TrailingBytes { offset } => write!(f, "unexpected trailing bytes from offset {offset}"),
            Self::MissingTensor(name) => write!(f, "missing tensor `{name}`"),
            Self::WrongDtype(name) => write!(f, "tensor `{name}` has the wrong dtype"),
        }
    }
}

impl std::error::Error for CheckpointErrorKind {}

/// A tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

/// Trait glue so callers can fetch typed tensors.
pub trait Storable: Real {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<Self>>;
}

impl Storable for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f32>> {
        match t {
            AnyTensor::F32(t) => Some(t),
            _ => None,
        }
    }
}

impl Storable for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f64>> {
        match t {
            AnyTensor::F64(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Checkpoint { metadata: metadata.into(), tensors: Vec::new() }
    }

    pub fn push<T: Storable>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), T::wrap(t)));
    }

    pub fn get_any(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get<T: Storable>(&self, name: &str) -> std::result::Result<&Tensor<T>, CheckpointErrorKind> {
        let any = self.get_any(name).ok_or_else(|| CheckpointErrorKind::MissingTensor(name.to_string()))?;
        T::unwrap(any).ok_or_else(|| CheckpointErrorKind::WrongDtype(name.to_string()))
    }

    /// Stores parameter values under `prefix`; with `with_state` also the
    /// Adam moments and the step counter.
    pub fn push_params<T: Storable>(&mut self, prefix: &str, ps: &ParamSet<T>, with_state: bool) {
        for p in ps.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
            if with_state {
                self.push(format!("{prefix}{}#m", p.name), p.m.clone());
                self.push(format!("{prefix}{}#v", p.name), p.v.clone());
            }
        }
        if with_state {
            self.push(format!("{prefix}#step"), Tensor::<f64>::scalar(ps.step as f64));
        }
    }

    /// Restores values (and, if present, optimizer state) into `ps`, whose
    /// layout defines which names are read.
    pub fn load_params<T: Storable>(
        &self,
        prefix: &str,
        ps: &mut ParamSet<T>,
    ) -> std::result::Result<(), CheckpointErrorKind> {
        for p in ps.iter_mut() {
            let name = format!("{prefix}{}", p.name);
            let t = self.get::<T>(&name)?;
            if t.dims() != p.value.dims() {
                return Err(CheckpointErrorKind::MissingTensor(format!("{name} with dims {:?}", p.value.dims())));
            }
            p.value = t.clone();
            if let (Ok(m), Ok(v)) = (self.get::<T>(&format!("{name}#m")), self.get::<T>(&format!("{name}#v"))) {
                p.m = m.clone();
                p.v = v.clone();
            }
        }
        if let Ok(step) = self.get::<f64>(&format!("{prefix}#step")) {
            ps.step = step.data()[0] as u64;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => out.extend(f32::to_le_bytes_vec(t.data())),
                AnyTensor::F64(t) => out.extend(f64::to_le_bytes_vec(t.data())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointErrorKind> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointErrorKind::NotACheckpoint);
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointErrorKind::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let metadata = r.string(meta_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let code_at = r.pos;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointErrorKind::BadDtype { code, offset: code_at })?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let payload = r.take(n.saturating_mul(dtype.size()))?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(
                    Tensor::from_vec(&dims, payload.chunks_exact(4).map(f32::from_le_chunk).collect())
                        .expect("length checked"),
                ),
                DType::F64 => AnyTensor::F64(
                    Tensor::from_vec(&dims, payload.chunks_exact(8).map(f64::from_le_chunk).collect())
                        .expect("length checked"),
                ),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointErrorKind::TrailingBytes { offset: r.pos });
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|source| Error::Io { path: parent.display().to_string(), source })?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes).map_err(|kind| Error::Checkpoint { path: path.display().to_string(), kind })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointErrorKind> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(CheckpointErrorKind::Truncated { offset: self.bytes.len(), needed: n - remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointErrorKind> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> std::result::Result<String, CheckpointErrorKind> {
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointErrorKind::BadUtf8 { offset: at })
    }
}
