//! Parameter checkpoints.
//!
//! Binary, little-endian:
//!
//! ```text
//! "CVRP" | u32 version | u16 len, kind name
//! u32 n_meta  × (u16 len, key, f64 value)
//! u32 n_tensors × (u16 len, name, u32 ndim, ndim × u32 dims, prod(dims) × f64)
//! ```
//!
//! Values are stored as f64 so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CastParams, EarlyFusionParams, LateFusionParams, Parameters, PredictInput, Predictor};
use crate::error::{CvrError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVRP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cast,
    EarlyFusionDirect,
    EarlyFusionResidual,
    LateFusion,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cast => "cast",
            ModelKind::EarlyFusionDirect => "early_fusion_direct",
            ModelKind::EarlyFusionResidual => "early_fusion_residual",
            ModelKind::LateFusion => "late_fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Cast, Self::EarlyFusionDirect, Self::EarlyFusionResidual, Self::LateFusion]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Any trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Cast(CastParams),
    EarlyFusion(EarlyFusionParams),
    LateFusion(LateFusionParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Cast(_) => ModelKind::Cast,
            Model::EarlyFusion(p) if p.residual => ModelKind::EarlyFusionResidual,
            Model::EarlyFusion(_) => ModelKind::EarlyFusionDirect,
            Model::LateFusion(_) => ModelKind::LateFusion,
        }
    }

    /// Next-state prediction; `None` for score-level models.
    pub fn predict(&self, input: &PredictInput<'_>) -> Option<Result<Vec<f64>>> {
        match self {
            Model::Cast(p) => Some(p.predict(input)),
            Model::EarlyFusion(p) => Some(p.predict(input)),
            Model::LateFusion(_) => None,
        }
    }

    fn meta(&self) -> Vec<(&'static str, f64)> {
        match self {
            Model::Cast(p) => vec![
                ("d", p.d as f64),
                ("n_heads", p.n_heads as f64),
                ("dropout_rate", p.dropout_rate),
            ],
            Model::EarlyFusion(p) => vec![("d", p.d as f64), ("hidden", p.hidden as f64)],
            Model::LateFusion(p) => vec![("hidden", p.hidden as f64)],
        }
    }

    fn tensors(&self) -> Vec<super::TensorRef<'_>> {
        match self {
            Model::Cast(p) => p.tensors(),
            Model::EarlyFusion(p) => p.tensors(),
            Model::LateFusion(p) => p.tensors(),
        }
    }

    fn tensor_slots(&mut self) -> Vec<(&'static str, Vec<usize>, &mut [f64])> {
        fn collect<P: Parameters>(p: &mut P) -> Vec<(&'static str, Vec<usize>, &mut [f64])> {
            let shapes: Vec<Vec<usize>> = p.tensors().into_iter().map(|t| t.shape).collect();
            p.tensors_mut().into_iter().zip(shapes).map(|((n, d), s)| (n, s, d)).collect()
        }
        match self {
            Model::Cast(p) => collect(p),
            Model::EarlyFusion(p) => collect(p),
            Model::LateFusion(p) => collect(p),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(w, self.kind().name())?;
        let meta = self.meta();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        for (k, v) in meta {
            write_str(w, k)?;
            w.write_all(&v.to_le_bytes())?;
        }
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            write_str(w, t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for s in &t.shape {
                w.write_all(&(*s as u32).to_le_bytes())?;
            }
            for v in t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CvrError::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CvrError::UnsupportedVersion(version));
        }
        let kind_name = read_str(r)?;
        let kind = ModelKind::parse(&kind_name)
            .ok_or_else(|| CvrError::Schema(format!("unknown model kind `{kind_name}`")))?;
        let n_meta = read_u32(r)?;
        let mut meta = std::collections::BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(r)?;
            let v = f64::from_le_bytes(read_array(r)?);
            meta.insert(k, v);
        }
        let get = |k: &str| -> Result<f64> {
            meta.get(k)
                .copied()
                .ok_or_else(|| CvrError::Schema(format!("checkpoint metadata lacks `{k}`")))
        };
        let as_usize = |k: &str| -> Result<usize> {
            let v = get(k)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CvrError::Schema(format!("checkpoint metadata `{k}` = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let mut model = match kind {
            ModelKind::Cast => Model::Cast(CastParams::zeros(as_usize("d")?, as_usize("n_heads")?, get("dropout_rate")?)?),
            ModelKind::EarlyFusionDirect | ModelKind::EarlyFusionResidual => Model::EarlyFusion(EarlyFusionParams::zeros(
                as_usize("d")?,
                as_usize("hidden")?,
                kind == ModelKind::EarlyFusionResidual,
            )?),
            ModelKind::LateFusion => Model::LateFusion(LateFusionParams::zeros(as_usize("hidden")?)?),
        };

        let n_tensors = read_u32(r)? as usize;
        let mut slots = model.tensor_slots();
        if n_tensors != slots.len() {
            return Err(CvrError::Schema(format!(
                "{kind} checkpoint has {n_tensors} tensors, expected {}",
                slots.len()
            )));
        }
        for (name, shape, data) in slots.iter_mut() {
            let got_name = read_str(r)?;
            if got_name != *name {
                return Err(CvrError::Schema(format!("expected tensor `{name}`, found `{got_name}`")));
            }
            let ndim = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(r)? as usize);
            }
            if dims != *shape {
                return Err(CvrError::Schema(format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
            }
            for v in data.iter_mut() {
                *v = f64::from_le_bytes(read_array(r)?);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CvrError::Schema(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| CvrError::Schema(format!("name too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CvrError::TruncatedFile("checkpoint ended early".into())
        } else {
            CvrError::Io(e)
        }
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| CvrError::Schema("checkpoint name is not UTF-8".into()))
}
