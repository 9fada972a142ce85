//! Binary checkpoints.
//!
//! Layout: the magic bytes `LOMNI1`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then raw
//! little-endian `f64` tensor data. The manifest records the model config,
//! the optimizer step, and a name, shape and byte offset (relative to the
//! start of the data section) for every tensor. Optimizer moments are stored
//! as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, ModelState, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{OptimState, TrainConfig};

pub const MAGIC: &[u8; 6] = b"LOMNI1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_config: ModelConfig,
    pub optimizer: OptimizerEntry,
    /// Training configuration the checkpoint was produced with, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optim: OptimState,
    pub train: Option<TrainConfig>,
}

fn named_tensors<'a>(model: &'a ModelState, optim: &'a OptimState) -> Vec<(String, &'a Tensor)> {
    let params = model.parameters();
    let mut out: Vec<(String, &Tensor)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (p, m) in params.iter().zip(&optim.m) {
        out.push((format!("adam.m.{}", p.name), m));
    }
    for (p, v) in params.iter().zip(&optim.v) {
        out.push((format!("adam.v.{}", p.name), v));
    }
    out
}

pub fn to_bytes(model: &ModelState, optim: &OptimState, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let tensors = named_tensors(model, optim);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = Manifest {
        model_config: model.config().clone(),
        optimizer: OptimizerEntry { step: optim.step },
        train_config: train.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(18 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut at = 0;
    if take(bytes, &mut at, MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, len, "manifest")?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let data = &bytes[at..];

    let read = |entry: &TensorEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let mut pos = usize::try_from(entry.offset).map_err(|_| Error::Format("offset overflows".into()))?;
        let raw = take(data, &mut pos, 8 * n, &entry.name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(entry.shape.clone(), values).map_err(|e| Error::Format(e.to_string()))
    };

    let count = manifest.tensors.len();
    if !count.is_multiple_of(3) {
        return Err(Error::Format(format!("{count} tensors cannot split into parameters and moments")));
    }
    let n = count / 3;
    let mut params = Vec::with_capacity(n);
    for e in &manifest.tensors[..n] {
        params.push(Parameter {
            name: e.name.clone(),
            value: read(e)?,
        });
    }
    let moments = |range: std::ops::Range<usize>, prefix: &str| -> Result<Vec<Tensor>> {
        manifest.tensors[range]
            .iter()
            .zip(&params)
            .map(|(e, p)| {
                if e.name != format!("{prefix}{}", p.name) || e.shape != p.value.shape() {
                    return Err(Error::Format(format!("unexpected tensor {} for {}", e.name, p.name)));
                }
                read(e)
            })
            .collect()
    };
    let m = moments(n..2 * n, "adam.m.")?;
    let v = moments(2 * n..3 * n, "adam.v.")?;
    let model = ModelState::from_parameters(manifest.model_config.clone(), params)?;
    Ok(Checkpoint {
        model,
        optim: OptimState {
            m,
            v,
            step: manifest.optimizer.step,
        },
        train: manifest.train_config,
    })
}

/// Writes through a temporary sibling file so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save(model: &ModelState, optim: &OptimState, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, optim, train)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelState {
        ModelState::init(
            ModelConfig {
                layers: 1,
                heads: 2,
                dim: 8,
                ff_dim: 8,
                vocab_size: 10,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn optim(m: &ModelState) -> OptimState {
        let mut o = OptimState::new(m);
        o.step = 17;
        for (i, t) in o.m.iter_mut().chain(o.v.iter_mut()).enumerate() {
            t.fill(i as f64 * 0.125 + 1e-300);
        }
        o
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let o = optim(&m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let train = TrainConfig::default();
        save(&m, &o, Some(&train), &path).unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.optim, o);
        assert_eq!(c.train, Some(train));
        assert!(std::fs::read(&path).unwrap().starts_with(b"LOMNI1"));
    }

    #[test]
    fn corruption_is_rejected() {
        let m = model();
        let bytes = to_bytes(&m, &optim(&m), None).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));

        let mut ver = bytes.clone();
        ver[6] = 9;
        assert!(matches!(from_bytes(&ver), Err(Error::Format(_))));

        for cut in [3, 12, 40, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }
}
