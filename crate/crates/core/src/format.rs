//! Binary model files.
//!
//! Little-endian. Every file starts with the magic `GLUT`, a `u16` format
//! version and a `u8` kind:
//!
//! * kind 0, single model: `u32` N, then `22N + 12` `f32` raw parameters
//!   in flat layout order, then `f32` epsilon.
//! * kind 1 (full generation) and kind 2 (shared geometry), conditional
//!   model: `u32` L, D, N, H; `f32` embedding table (L×D, row-major);
//!   `f32` generator weights, layer by layer (encoder, then the mean,
//!   Cholesky, opacity, local-color and global heads, omitting the first
//!   two for kind 2), each as a row-major `[out][in]` weight block followed
//!   by the bias; for kind 2 the shared means (3N) and Cholesky values
//!   (6N); then `f32` epsilon.
//!
//! Values are stored as `f32`, so a model round-trips exactly when its
//! parameters are `f32`-representable (see [`GlutModel::quantized_f32`]).

use crate::cglut::{generator_param_count, CglutModel, GenerationMode, GeneratorNet, StyleEmbeddingTable};
use crate::glut::{GlutModel, ParamLayout};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GLUT";
pub const FORMAT_VERSION: u16 = 1;
/// Magic, version and kind.
pub const HEADER_LEN: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Glut = 0,
    CglutFull = 1,
    CglutShared = 2,
}

impl ModelKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ModelKind::Glut),
            1 => Some(ModelKind::CglutFull),
            2 => Some(ModelKind::CglutShared),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unknown model kind {0}")]
    UnknownKind(u8),
    #[error("expected a {expected} model, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("file truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Either kind of model stored in a file.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelFile {
    Glut(GlutModel),
    Cglut(CglutModel),
}

impl ModelFile {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelFile::Glut(_) => "single",
            ModelFile::Cglut(_) => "conditional",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            ModelFile::Glut(m) => serialize_glut(m),
            ModelFile::Cglut(m) => serialize_cglut(m),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let kind = r.header()?;
        let model = match kind {
            ModelKind::Glut => ModelFile::Glut(read_glut_body(&mut r)?),
            ModelKind::CglutFull | ModelKind::CglutShared => ModelFile::Cglut(read_cglut_body(&mut r, kind)?),
        };
        r.finish()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        ModelFile::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: ModelKind) -> Self {
        let mut v = Vec::new();
        v.extend_from_slice(MAGIC);
        v.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        v.push(kind as u8);
        Writer(v)
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self) -> Result<ModelKind, FormatError> {
        if self.bytes.len() < 4 || &self.bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        self.pos = 4;
        let v = u16::from_le_bytes(self.take(2)?.try_into().unwrap());
        if v != FORMAT_VERSION {
            return Err(FormatError::Version(v));
        }
        let k = self.take(1)?[0];
        ModelKind::from_u8(k).ok_or(FormatError::UnknownKind(k))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

pub fn serialize_glut(model: &GlutModel) -> Vec<u8> {
    let mut w = Writer::new(ModelKind::Glut);
    w.u32(model.len());
    w.f32s(model.params());
    w.f32s(&[model.epsilon]);
    w.0
}

/// Size in bytes of a single-model file with `n` primitives.
pub fn glut_file_len(n: usize) -> usize {
    HEADER_LEN + 4 + 4 * (ParamLayout::new(n).len() + 1)
}

fn read_glut_body(r: &mut Reader) -> Result<GlutModel, FormatError> {
    let n = r.u32()?;
    if n == 0 {
        return Err(FormatError::Invalid("zero primitives".into()));
    }
    if n.saturating_mul(88) > r.remaining() {
        return Err(FormatError::Truncated {
            offset: r.pos,
            needed: n.saturating_mul(88),
        });
    }
    let params = r.f32s(ParamLayout::new(n).len())?;
    let eps = r.f32s(1)?[0];
    GlutModel::from_params(n, params, eps).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn deserialize_glut(bytes: &[u8]) -> Result<GlutModel, FormatError> {
    match ModelFile::from_bytes(bytes)? {
        ModelFile::Glut(m) => Ok(m),
        other => Err(FormatError::WrongKind {
            expected: "single",
            found: other.kind_name(),
        }),
    }
}

pub fn serialize_cglut(model: &CglutModel) -> Vec<u8> {
    let kind = match model.mode() {
        GenerationMode::FullGeneration => ModelKind::CglutFull,
        GenerationMode::SharedGeometry => ModelKind::CglutShared,
    };
    let mut w = Writer::new(kind);
    w.u32(model.styles());
    w.u32(model.embeddings.dim);
    w.u32(model.primitives());
    w.u32(model.generator.hidden);
    w.f32s(&model.embeddings.vectors);
    w.f32s(&model.generator.params);
    if let Some(s) = &model.shared_geometry {
        w.f32s(s);
    }
    w.f32s(&[model.epsilon]);
    w.0
}

fn read_cglut_body(r: &mut Reader, kind: ModelKind) -> Result<CglutModel, FormatError> {
    let (l, d, n, h) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if l == 0 || d == 0 || n == 0 || h == 0 {
        return Err(FormatError::Invalid("zero dimension".into()));
    }
    let mode = if kind == ModelKind::CglutShared {
        GenerationMode::SharedGeometry
    } else {
        GenerationMode::FullGeneration
    };
    let overflow = || FormatError::Invalid("dimensions overflow".into());
    let gen_len = generator_param_count(d, h, n, mode).ok_or_else(overflow)?;
    let shared_len = if mode == GenerationMode::SharedGeometry { 9 * n } else { 0 };
    let needed = l
        .checked_mul(d)
        .and_then(|v| v.checked_add(gen_len)?.checked_add(shared_len)?.checked_add(1)?.checked_mul(4))
        .ok_or_else(overflow)?;
    if needed > r.remaining() {
        return Err(FormatError::Truncated {
            offset: r.pos,
            needed,
        });
    }
    let vectors = r.f32s(l * d)?;
    let mut generator = GeneratorNet::zeros(d, h, n, mode);
    generator.params = r.f32s(gen_len)?;
    let shared = match mode {
        GenerationMode::SharedGeometry => Some(r.f32s(9 * n)?),
        GenerationMode::FullGeneration => None,
    };
    let eps = r.f32s(1)?[0];
    let embeddings = StyleEmbeddingTable {
        styles: l,
        dim: d,
        vectors,
    };
    CglutModel::from_parts(embeddings, generator, shared, eps).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn deserialize_cglut(bytes: &[u8]) -> Result<CglutModel, FormatError> {
    match ModelFile::from_bytes(bytes)? {
        ModelFile::Cglut(m) => Ok(m),
        other => Err(FormatError::WrongKind {
            expected: "conditional",
            found: other.kind_name(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glut::tests::random_model;

    #[test]
    fn single_model_round_trip() {
        let m = random_model(7, 1).quantized_f32();
        let bytes = serialize_glut(&m);
        assert_eq!(bytes.len(), glut_file_len(7));
        assert_eq!(deserialize_glut(&bytes).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let bytes = serialize_glut(&GlutModel::identity(2));
        assert_eq!(&bytes[..4], b"GLUT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 2);
        // first mean component of primitive 0
        assert_eq!(f32::from_le_bytes(bytes[11..15].try_into().unwrap()), 0.0);
        let eps = f32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(eps, 1e-6f32);
    }

    #[test]
    fn sizes_match_parameter_counts() {
        for (n, p) in [(16, 364), (32, 716), (64, 1420)] {
            assert_eq!(glut_file_len(n), 11 + 4 * (p + 1));
        }
        assert!(glut_file_len(64) < 12_000);
    }

    #[test]
    fn conditional_round_trip() {
        for mode in [GenerationMode::FullGeneration, GenerationMode::SharedGeometry] {
            let m = CglutModel::new(3, 5, 6, 4, mode, 2).quantized_f32();
            let bytes = serialize_cglut(&m);
            assert_eq!(bytes[6], if mode == GenerationMode::FullGeneration { 1 } else { 2 });
            let back = deserialize_cglut(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(bytes.len(), HEADER_LEN + 16 + 4 * (m.param_count() + 1));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = serialize_glut(&GlutModel::identity(3));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_glut(&bad), Err(FormatError::BadMagic)));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(deserialize_glut(&bad), Err(FormatError::Version(9))));
        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(deserialize_glut(&bad), Err(FormatError::UnknownKind(7))));
        assert!(matches!(deserialize_glut(&good[..good.len() - 1]), Err(FormatError::Truncated { .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(deserialize_glut(&bad), Err(FormatError::Trailing(1))));
        let c = serialize_cglut(&CglutModel::new(2, 2, 2, 2, GenerationMode::FullGeneration, 0));
        assert!(matches!(deserialize_glut(&c), Err(FormatError::WrongKind { .. })));
        let mut nan = good;
        nan[11..15].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(deserialize_glut(&nan), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn huge_declared_sizes_fail_cleanly() {
        let mut b = Vec::from(*MAGIC);
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(1);
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(ModelFile::from_bytes(&b).is_err());
        let mut g = Vec::from(*MAGIC);
        g.extend_from_slice(&1u16.to_le_bytes());
        g.push(0);
        g.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(ModelFile::from_bytes(&g), Err(FormatError::Truncated { .. })));
    }
}
