//! Checkpoint archive.
//!
//! Layout of a `.lsck` file:
//!
//! ```text
//! magic      8 bytes   "LSPNCKPT"
//! version    u32 LE
//! json_len   u64 LE
//! manifest   json_len bytes of UTF-8 JSON
//! payload    raw little-endian f32 arrays, back to back
//! ```
//!
//! The manifest carries the network and training configuration, the step
//! counter, the sampling RNG position, the optimizer step counts and a table
//! of `{name, shape, offset, len}` entries locating every array in the
//! payload (`offset` in elements). Array names are
//! `params/<generator|age_encoder|discriminator>/<layer name>`,
//! `ema/<layer name>`, and `adam_<g|d>/<m|v>/<layer name>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ModelParams, NetworkConfig, Networks};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"LSPNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the batch-sampling generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn parse(&self) -> Result<([u8; 32], u128)> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos = self.word_pos.parse().map_err(|_| bad())?;
        Ok((seed, pos))
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let (seed, pos) = self.parse().expect("rng state validated on load");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub rng: RngState,
    pub params: ModelParams<f32>,
    pub ema: ParamStore<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    steps_per_epoch: u64,
    network: NetworkConfig,
    train: TrainConfig,
    rng: RngState,
    adam_g_steps: u64,
    adam_d_steps: u64,
    tensors: Vec<TensorEntry>,
}

fn groups(c: &Checkpoint) -> [(&'static str, &ParamStore<f32>); 8] {
    [
        ("params/generator/", &c.params.generator),
        ("params/age_encoder/", &c.params.age_encoder),
        ("params/discriminator/", &c.params.discriminator),
        ("ema/", &c.ema),
        ("adam_g/m/", &c.opt_g.m),
        ("adam_g/v/", &c.opt_g.v),
        ("adam_d/m/", &c.opt_d.m),
        ("adam_d/v/", &c.opt_d.v),
    ]
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (prefix, store) in groups(c) {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: c.step,
        steps_per_epoch: c.steps_per_epoch,
        network: c.network.clone(),
        train: c.train.clone(),
        rng: c.rng.clone(),
        adam_g_steps: c.opt_g.t,
        adam_d_steps: c.opt_d.t,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated archive".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parse and validate an archive. Array shapes must match the layout
/// implied by the embedded network configuration.
pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, json_len)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Checkpoint("manifest and header versions differ".into()));
    }
    manifest.rng.parse()?;
    let payload = bytes;
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            total * 4
        )));
    }

    let nets = Networks::new(manifest.network.clone())
        .map_err(|e| Error::Checkpoint(format!("invalid network config: {e}")))?;
    let layout: ModelParams<f32> = nets.init(&mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let gen_age = || layout.generator.iter().chain(layout.age_encoder.iter());
    let expected: Vec<(String, Vec<usize>)> = [
        ("params/generator/", layout.generator.iter().collect::<Vec<_>>()),
        ("params/age_encoder/", layout.age_encoder.iter().collect()),
        ("params/discriminator/", layout.discriminator.iter().collect()),
        ("ema/", layout.generator.iter().collect()),
        ("adam_g/m/", gen_age().collect()),
        ("adam_g/v/", gen_age().collect()),
        ("adam_d/m/", layout.discriminator.iter().collect()),
        ("adam_d/v/", layout.discriminator.iter().collect()),
    ]
    .into_iter()
    .flat_map(|(prefix, items)| {
        items
            .into_iter()
            .map(move |(n, t)| (format!("{prefix}{n}"), t.shape().to_vec()))
    })
    .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} arrays, the network config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut stores: Vec<ParamStore<f32>> = (0..8).map(|_| ParamStore::new()).collect();
    let prefixes = [
        "params/generator/",
        "params/age_encoder/",
        "params/discriminator/",
        "ema/",
        "adam_g/m/",
        "adam_g/v/",
        "adam_d/m/",
        "adam_d/v/",
    ];
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "array `{}` {:?} does not match expected `{}` {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.len != shape.iter().product::<usize>() || entry.offset + entry.len > total {
            return Err(Error::Checkpoint(format!("bad extent for `{}`", entry.name)));
        }
        let raw = &payload[entry.offset * 4..(entry.offset + entry.len) * 4];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (i, prefix) = prefixes
            .iter()
            .enumerate()
            .find(|(_, p)| name.starts_with(*p))
            .expect("expected names carry a known prefix");
        stores[i].insert(&name[prefix.len()..], Tensor::new(shape.clone(), data)?);
    }
    let mut it = stores.into_iter();
    let mut next = || it.next().unwrap();
    let (generator, age_encoder, discriminator, ema) = (next(), next(), next(), next());
    let (gm, gv, dm, dv) = (next(), next(), next(), next());
    let t = &manifest.train;
    Ok(Checkpoint {
        network: manifest.network,
        step: manifest.step,
        steps_per_epoch: manifest.steps_per_epoch,
        rng: manifest.rng,
        params: ModelParams {
            generator,
            age_encoder,
            discriminator,
        },
        ema,
        opt_g: Adam {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            t: manifest.adam_g_steps,
            m: gm,
            v: gv,
        },
        opt_d: Adam {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            t: manifest.adam_d_steps,
            m: dm,
            v: dv,
        },
        train: manifest.train,
    })
}

/// Write through a temporary sibling and rename, so a crash never leaves a
/// half-written archive under the final name.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("lsck.tmp");
    std::fs::write(&tmp, encode(c)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agecode::AgeClassSchema;
    use crate::trainer::Trainer;

    fn small() -> Trainer {
        let net = NetworkConfig {
            resolution: 16,
            base_channels: 2,
            latent_dim: 4,
            schema: AgeClassSchema::parse_ranges("0-2,3-6", 1).unwrap(),
        };
        Trainer::new(net, TrainConfig::default(), 7).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut t = small();
        let mut rng_use = || {
            use rand::Rng;
            t.state.rng.random::<u64>()
        };
        rng_use();
        let c = t.checkpoint();
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.rng.restore(), t.state.rng);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = encode(&small().checkpoint());
        assert!(matches!(decode(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(decode(&b).unwrap_err().to_string().contains("version"));
        let mut b = bytes.clone();
        b[21] = b'#';
        assert!(decode(&b).unwrap_err().to_string().contains("manifest"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/c.lsck");
        let c = small().checkpoint();
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(load_checkpoint(&dir.path().join("missing.lsck")).is_err());
    }
}
