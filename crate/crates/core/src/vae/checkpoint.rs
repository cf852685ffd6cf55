//! Checkpoint container.
//!
//! Layout: the 8-byte magic `LFCKPT01`, the manifest length as a little-endian
//! `u64`, the JSON manifest, then a blob of little-endian scalars in the
//! manifest's `dtype`. Every tensor entry in the manifest records its byte
//! offset into the blob. Saving and loading round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerModel, LayerParams, LevelParams, ModelMeta, TrainConfig, VaeArch};
use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::prior::GaussianCodePrior;
use crate::pyramid::PyramidConfig;
use crate::tensor::{Real, Tensor, DTYPE};

const MAGIC: &[u8; 8] = b"LFCKPT01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub step_count: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub config: TrainConfig,
    pub first_moment: Vec<TensorEntry>,
    pub second_moment: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub arch: VaeArch,
    pub seed: u64,
    pub iteration: u64,
    pub meta: ModelMeta,
    pub pyramid: PyramidConfig,
    pub prior: Option<GaussianCodePrior>,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerManifest>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: LayerModel,
    pub optimizer: Option<(Vec<AdamState>, TrainConfig)>,
}

fn scalar_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f64" => Ok(8),
        "f32" => Ok(4),
        other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
    }
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn put(&mut self, name: String, t: &Tensor) -> TensorEntry {
        let offset = self.bytes.len();
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry { name, shape: t.shape().to_vec(), offset, len: t.len() }
    }
}

/// Serializes a model and, optionally, its optimizer state.
pub fn to_bytes(model: &LayerModel, optimizer: Option<(&[AdamState], &TrainConfig)>) -> Result<Vec<u8>> {
    let mut blob = BlobWriter { bytes: Vec::new() };
    let named = model.named_params();
    let params: Vec<TensorEntry> = named.iter().map(|(n, t)| blob.put(n.clone(), t)).collect();
    let optimizer = match optimizer {
        None => None,
        Some((states, config)) => {
            if states.len() != named.len() {
                return Err(Error::shape("optimizer state count differs from parameter count"));
            }
            let first_moment = states
                .iter()
                .zip(&named)
                .map(|(s, (n, _))| blob.put(format!("{n}.m"), &s.first_moment))
                .collect();
            let second_moment = states
                .iter()
                .zip(&named)
                .map(|(s, (n, _))| blob.put(format!("{n}.v"), &s.second_moment))
                .collect();
            let s0 = states.first();
            Some(OptimizerManifest {
                step_count: s0.map_or(0, |s| s.step_count),
                beta1: s0.map_or(0.9, |s| s.beta1),
                beta2: s0.map_or(0.999, |s| s.beta2),
                epsilon: s0.map_or(1e-8, |s| s.epsilon),
                config: *config,
                first_moment,
                second_moment,
            })
        }
    };
    let manifest = Manifest {
        format: "layerforge-checkpoint".into(),
        version: 1,
        dtype: DTYPE.into(),
        arch: model.arch.clone(),
        seed: model.meta.seed,
        iteration: model.meta.iterations,
        meta: model.meta.clone(),
        pyramid: model.pyramid.clone(),
        prior: model.prior.clone(),
        params,
        optimizer,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

/// Reads the manifest without decoding the blob.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a layerforge checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    Ok((manifest, &bytes[end..]))
}

fn read_tensor(blob: &[u8], e: &TensorEntry, size: usize) -> Result<Tensor> {
    if e.shape.iter().product::<usize>() != e.len {
        return Err(Error::Format(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
    }
    let bytes = blob
        .get(e.offset..e.offset + e.len * size)
        .ok_or_else(|| Error::Format(format!("{}: blob range out of bounds", e.name)))?;
    let data: Vec<Real> = bytes
        .chunks_exact(size)
        .map(|c| match size {
            8 => f64::from_le_bytes(c.try_into().unwrap()) as Real,
            _ => f32::from_le_bytes(c.try_into().unwrap()) as Real,
        })
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| Error::Format(format!("{}: {err}", e.name)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (m, blob) = read_manifest(bytes)?;
    let size = scalar_size(&m.dtype)?;
    if m.dtype != DTYPE {
        log::warn!("checkpoint stores {} values; converting to {}", m.dtype, DTYPE);
    }
    let shapes = m.arch.param_shapes()?;
    let mut tensors = m.params.iter().map(|e| read_tensor(blob, e, size));
    let mut levels = Vec::with_capacity(shapes.len());
    let mut take = |want: &super::ParamShape| -> Result<LayerParams> {
        let weight = tensors.next().ok_or_else(|| Error::Format("missing parameters".into()))??;
        let bias = tensors.next().ok_or_else(|| Error::Format("missing parameters".into()))??;
        if weight.shape() != want.weight.as_slice() || bias.shape() != want.bias.as_slice() {
            return Err(Error::Format("parameter shapes do not match the architecture".into()));
        }
        Ok(LayerParams { weight, bias })
    };
    for (enc, dec) in &shapes {
        let encoder = enc.iter().map(&mut take).collect::<Result<_>>()?;
        let decoder = dec.iter().map(&mut take).collect::<Result<_>>()?;
        levels.push(LevelParams { encoder, decoder });
    }
    if tensors.next().is_some() {
        return Err(Error::Format("checkpoint holds more parameters than the architecture".into()));
    }
    let model = LayerModel { arch: m.arch, levels, prior: m.prior, meta: m.meta, pyramid: m.pyramid };
    let optimizer = match m.optimizer {
        None => None,
        Some(o) => {
            if o.first_moment.len() != m.params.len() || o.second_moment.len() != m.params.len() {
                return Err(Error::Format("optimizer state count differs from parameter count".into()));
            }
            let states = o
                .first_moment
                .iter()
                .zip(&o.second_moment)
                .map(|(a, b)| {
                    Ok(AdamState {
                        first_moment: read_tensor(blob, a, size)?,
                        second_moment: read_tensor(blob, b, size)?,
                        step_count: o.step_count,
                        beta1: o.beta1,
                        beta2: o.beta2,
                        epsilon: o.epsilon,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some((states, o.config))
        }
    };
    Ok(Checkpoint { model, optimizer })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, model: &LayerModel, optimizer: Option<(&[AdamState], &TrainConfig)>) -> Result<()> {
    let bytes = to_bytes(model, optimizer)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(Error::io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io_at(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path).map_err(Error::io_at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::Domain;

    fn model() -> LayerModel {
        let meta = ModelMeta { layer: "albedo".into(), dataset: "d".into(), seed: 5, iterations: 3, domain: Domain::default() };
        LayerModel::init(VaeArch::authored_desk(), meta).unwrap()
    }

    #[test]
    fn bit_exact_roundtrip() {
        let mut m = model();
        m.prior = Some(GaussianCodePrior { mean: vec![0.1, -1.0 / 3.0], variance: 0.7, dim: 2, samples: 10 });
        let states: Vec<AdamState> = m
            .params()
            .iter()
            .map(|p| {
                let mut s = AdamState::new(p.shape());
                s.first_moment = p.scale(1.0 / 7.0);
                s.step_count = 3;
                s
            })
            .collect();
        let cfg = TrainConfig::default();
        let bytes = to_bytes(&m, Some((&states, &cfg))).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model, m);
        let (s2, c2) = back.optimizer.unwrap();
        assert_eq!(s2, states);
        assert_eq!(c2, cfg);
        assert_eq!(to_bytes(&back.model, Some((&s2, &c2))).unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"not a checkpoint at all").is_err());
        let mut bytes = to_bytes(&model(), None).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(from_bytes(&bytes).is_err());
    }
}
