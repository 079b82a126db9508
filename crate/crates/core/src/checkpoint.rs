//! Single-file training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest, then every array's raw little-endian bytes in manifest order.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_le_bytes;
use crate::trainer::{Trainer, TrainerConfig};

pub const MAGIC: &[u8; 8] = b"SCMISCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128 portably.
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub config: TrainerConfig,
    rng: RngState,
    pub adam_steps: (u64, u64),
    /// FNV-1a over the data section.
    pub checksum: u64,
    pub arrays: Vec<ArrayEntry>,
}

/// A parsed checkpoint: manifest plus the decoded arrays in manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<Tensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Contract(format!("cannot checkpoint dtype {other:?}"))),
    }
}

/// Every array that makes up a trainer's state, in a fixed order.
fn state_arrays(t: &Trainer) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut push_store = |prefix: &str, store: &crate::nn::ParamStore| {
        for (name, var) in store.params() {
            out.push((format!("{prefix}/{name}"), var.as_tensor().clone()));
        }
        for (name, buf) in store.buffers() {
            out.push((format!("{prefix}/buffers/{name}"), buf.lock().expect("buffer lock").clone()));
        }
    };
    push_store("generator", t.generator().store());
    push_store("discriminator", t.discriminator().store());
    push_store("ema", t.ema().store());
    let (opt_g, opt_d) = t.optimizers();
    for (prefix, opt, store) in [
        ("adam_g", opt_g, t.generator().store()),
        ("adam_d", opt_d, t.discriminator().store()),
    ] {
        for (kind, moments) in [("m", opt.first_moments()), ("v", opt.second_moments())] {
            for ((name, _), m) in store.params().iter().zip(moments) {
                out.push((format!("{prefix}.{kind}/{name}"), m.clone()));
            }
        }
    }
    out
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut arrays = Vec::new();
    for (name, tensor) in state_arrays(trainer) {
        let raw = tensor_le_bytes(&tensor)?;
        arrays.push(ArrayEntry {
            name,
            dtype: dtype_name(tensor.dtype())?.to_string(),
            shape: tensor.dims().to_vec(),
            offset: data.len() as u64,
            len: raw.len() as u64,
        });
        data.extend_from_slice(&raw);
    }
    let rng = trainer.rng();
    let (opt_g, opt_d) = trainer.optimizers();
    let manifest = Manifest {
        step: trainer.step(),
        config: trainer.config().clone(),
        rng: RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        adam_steps: (opt_g.steps(), opt_d.steps()),
        checksum: fnv1a(&data),
        arrays,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: &str| Error::CheckpointCorrupt(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| Error::CheckpointCorrupt(format!("unreadable manifest: {e}")))?;
    let data = &bytes[data_start..];
    let expected_len: u64 = manifest.arrays.iter().map(|a| a.len).sum();
    if data.len() as u64 != expected_len {
        return Err(corrupt("data section length does not match the manifest"));
    }
    if fnv1a(data) != manifest.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    let device = candle_core::Device::Cpu;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        let raw = data
            .get(a.offset as usize..(a.offset + a.len) as usize)
            .ok_or_else(|| corrupt("array extends past the data section"))?;
        let count: usize = a.shape.iter().product();
        let t = match a.dtype.as_str() {
            "f32" if raw.len() == count * 4 => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, a.shape.as_slice(), &device)?
            }
            "f64" if raw.len() == count * 8 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, a.shape.as_slice(), &device)?
            }
            _ => {
                return Err(Error::CheckpointCorrupt(format!(
                    "array `{}` has inconsistent dtype or length",
                    a.name
                )))
            }
        };
        arrays.push(t);
    }
    Ok(Checkpoint { manifest, arrays })
}

impl Checkpoint {
    /// Copies the checkpoint into an existing trainer. Fails on the first
    /// array whose name, shape or dtype differs from the trainer's layout.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        let current = state_arrays(trainer);
        for (i, (name, t)) in current.iter().enumerate() {
            let Some(entry) = self.manifest.arrays.get(i) else {
                return Err(Error::CheckpointManifest {
                    name: name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if &entry.name != name {
                return Err(Error::CheckpointManifest {
                    name: name.clone(),
                    detail: format!("checkpoint has `{}` in its place", entry.name),
                });
            }
            if entry.shape != t.dims() || entry.dtype != dtype_name(t.dtype())? {
                return Err(Error::CheckpointManifest {
                    name: name.clone(),
                    detail: format!(
                        "checkpoint has {} {:?}, model expects {} {:?}",
                        entry.dtype,
                        entry.shape,
                        dtype_name(t.dtype())?,
                        t.dims()
                    ),
                });
            }
        }
        if let Some(extra) = self.manifest.arrays.get(current.len()) {
            return Err(Error::CheckpointManifest {
                name: extra.name.clone(),
                detail: "not present in the model".into(),
            });
        }

        let device = trainer.device().clone();
        let mut loaded = self.arrays.iter().map(|t| t.to_device(&device));
        let mut next = || loaded.next().expect("length checked").map_err(Error::from);
        for store in [trainer.generator().store(), trainer.discriminator().store(), trainer.ema().store()] {
            for (_, var) in store.params() {
                var.set(&next()?)?;
            }
            for (_, buf) in store.buffers() {
                *buf.lock().expect("buffer lock") = next()?;
            }
        }
        let mut moments = |n: usize| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let m = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
            let v = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
            Ok((m, v))
        };
        let (gm, gv) = moments(trainer.generator().store().params().len())?;
        let (dm, dv) = moments(trainer.discriminator().store().params().len())?;

        let r = &self.manifest.rng;
        let word_pos: u128 = r
            .word_pos
            .parse()
            .map_err(|_| Error::CheckpointCorrupt("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(r.seed);
        rng.set_stream(r.stream);
        rng.set_word_pos(word_pos);
        let (sg, sd) = self.manifest.adam_steps;
        trainer.restore_state(self.manifest.step, rng, (sg, gm, gv), (sd, dm, dv))
    }

    /// Initializes the discriminator backbone of `trainer` from this
    /// checkpoint's discriminator, leaving every other array untouched.
    /// Returns the number of arrays copied.
    pub fn load_backbone(&self, trainer: &Trainer) -> Result<usize> {
        let index: std::collections::HashMap<&str, usize> = self
            .manifest
            .arrays
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.as_str(), i))
            .collect();
        let store = trainer.discriminator().store();
        let (dtype, device) = (trainer.dtype(), trainer.device());
        let fetch = |name: String, expected: &Tensor| -> Result<Tensor> {
            let Some(&i) = index.get(name.as_str()) else {
                return Err(Error::CheckpointManifest {
                    name,
                    detail: "missing from checkpoint".into(),
                });
            };
            let t = &self.arrays[i];
            if t.dims() != expected.dims() {
                return Err(Error::CheckpointManifest {
                    name,
                    detail: format!("checkpoint has {:?}, model expects {:?}", t.dims(), expected.dims()),
                });
            }
            Ok(t.to_dtype(dtype)?.to_device(device)?)
        };
        let mut copied = 0;
        for (name, var) in store.params().iter().filter(|(n, _)| n.starts_with("backbone.")) {
            var.set(&fetch(format!("discriminator/{name}"), var.as_tensor())?)?;
            copied += 1;
        }
        for (name, buf) in store.buffers().iter().filter(|(n, _)| n.starts_with("backbone.")) {
            let mut guard = buf.lock().expect("buffer lock");
            *guard = fetch(format!("discriminator/buffers/{name}"), &guard)?;
            copied += 1;
        }
        Ok(copied)
    }

    /// Rebuilds a trainer from the configuration stored in the checkpoint.
    pub fn into_trainer(&self, device: &candle_core::Device) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.manifest.config.clone(), device)?;
        self.restore_into(&mut trainer)?;
        Ok(trainer)
    }
}

pub fn load_checkpoint(path: &Path, device: &candle_core::Device) -> Result<Trainer> {
    read_checkpoint(path)?.into_trainer(device)
}
