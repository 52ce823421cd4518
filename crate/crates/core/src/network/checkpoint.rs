//! Single-file checkpoint: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as raw little-endian `f32`.
//!
//! The header lists each tensor's name, shape and element offset into the
//! data section, so the file can be reloaded without this crate. Parameter
//! names are dot-separated paths (`unet.down.0.0.res.conv1.w`); optimizer
//! moments are stored under `adam.m.<name>` and `adam.v.<name>`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Model, UNetConfig};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RLCKPT01";

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position, as a decimal string (it is a `u128`).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub rng: RngState,
    /// Caller-defined settings stored verbatim (e.g. the training config).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: UNetConfig,
    schedule: ScheduleParams,
    step: u64,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: data.len() });
        data.extend_from_slice(t.data());
    };
    for (_, name, t) in ck.model.params.iter() {
        push(name.to_string(), t);
    }
    if let Some(opt) = &ck.optimizer {
        for (i, (_, name, _)) in ck.model.params.iter().enumerate() {
            push(format!("adam.m.{name}"), &opt.m[i]);
            push(format!("adam.v.{name}"), &opt.v[i]);
        }
    }
    let header = Header {
        format_version: 1,
        config: ck.model.config.clone(),
        schedule: ck.schedule.params(),
        step: ck.step,
        rng: ck.rng,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config.clone(), step: o.step }),
        extra: ck.extra.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != 1 {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let raw = &bytes[16 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of floats"));
    }
    let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let tensor = |e: &TensorEntry| -> Result<Tensor<f32>> {
        let n: usize = e.shape.iter().product();
        let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| bad(&format!("{} out of range", e.name)))?;
        Tensor::new(&e.shape, slice.to_vec())
    };
    let mut model = Model::new(header.config, 0)?;
    let mut seen = HashSet::new();
    let mut m = vec![None; model.params.len()];
    let mut v = vec![None; model.params.len()];
    for e in &header.tensors {
        let (slot, name) = if let Some(n) = e.name.strip_prefix("adam.m.") {
            (Some(&mut m), n)
        } else if let Some(n) = e.name.strip_prefix("adam.v.") {
            (Some(&mut v), n)
        } else {
            (None, e.name.as_str())
        };
        let id = model.params.id(name).ok_or_else(|| bad(&format!("unexpected tensor {}", e.name)))?;
        let t = tensor(e)?;
        match slot {
            Some(s) => s[id.0] = Some(t),
            None => {
                model.params.set(id, t)?;
                seen.insert(id.0);
            }
        }
    }
    if seen.len() != model.params.len() {
        return Err(bad("checkpoint is missing parameters"));
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            let collect = |xs: Vec<Option<Tensor<f32>>>| xs.into_iter().collect::<Option<Vec<_>>>();
            let (m, v) = match (collect(m), collect(v)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(bad("optimizer state is incomplete")),
            };
            Some(AdamW { config: o.config, step: o.step, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        schedule: NoiseSchedule::try_from(header.schedule)?,
        step: header.step,
        rng: header.rng,
        extra: header.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;
    use rand::Rng;

    #[test]
    fn round_trip_is_exact() {
        let cfg = UNetConfig {
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
            head_channels: 8,
            groups: 4,
            nonspatial_dim: 5,
            time_embed_dim: 8,
            cond_hidden: 16,
            mode: Mode::NoModulatorConcat,
            ..Default::default()
        };
        let model = Model::new(cfg, 9).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
        opt.step = 17;
        opt.m[3].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            model,
            optimizer: Some(opt),
            schedule: crate::diffusion::linear_schedule(1000, 1e-4, 0.02).unwrap(),
            step: 17,
            rng: RngState::capture(5, &rng),
            extra: serde_json::json!({"batch_size": 4}),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        assert!(back.model.params.iter().zip(ck.model.params.iter()).all(|(a, b)| a.1 == b.1 && a.2 == b.2));
        let (o1, o2) = (back.optimizer.unwrap(), ck.optimizer.unwrap());
        assert_eq!((o1.step, &o1.m, &o1.v), (o2.step, &o2.m, &o2.v));
        assert_eq!(back.rng, ck.rng);
        let mut r1 = back.rng.restore();
        assert_eq!(r1.random::<u64>(), rng.random::<u64>());
        assert_eq!(back.extra, ck.extra);
        assert_eq!(back.schedule, ck.schedule);

        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
