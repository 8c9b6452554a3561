//! Checkpoint container.
//!
//! A checkpoint is a safetensors file. Tensors are little-endian f32 and are
//! named `params/<name>`, `ema/<name>`, `adam_m/<name>` and `adam_v/<name>`,
//! where `<name>` is the layout name of the parameter (for example
//! `unet.up_level2.block0.conv1.weight`). The string metadata holds:
//!
//! | key | value |
//! |-----|-------|
//! | `format` | `cae-checkpoint` |
//! | `schema_version` | integer, currently 1 |
//! | `config` | the resolved run config as JSON |
//! | `config_hash` | hex SHA-256 of that JSON |
//! | `k` | iteration count |
//! | `opt_step` | optimiser step count |
//! | `rng_seed`, `rng_stream`, `rng_word_pos` | ChaCha8 generator position |

use std::collections::HashMap;
use std::path::Path;

use cae_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::fsutil::write_atomic;
use crate::network::{Network, Params};
use crate::training::{RAdamState, TrainState};
use crate::{Error, Result};

pub const FORMAT: &str = "cae-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;

/// `ckpt_00001234.safetensors`
pub fn file_name(k: u64) -> String {
    format!("ckpt_{k:08}.safetensors")
}

/// Most recent checkpoint in `dir` by iteration number.
pub fn latest_in(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best: Option<(u64, std::path::PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let k = name.strip_prefix("ckpt_").and_then(|r| r.strip_suffix(".safetensors")).and_then(|d| d.parse().ok());
        if let Some(k) = k {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub k: u64,
    pub params: Params<f32>,
    pub ema: Option<Params<f32>>,
    pub opt: Option<RAdamState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_state(cfg: &RunConfig, state: &TrainState) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            k: state.k,
            params: state.params.clone(),
            ema: Some(state.ema.clone()),
            opt: Some(state.opt.clone()),
            rng: Some(RngState::capture(&state.rng)),
        }
    }

    pub fn into_train_state(self) -> Result<TrainState> {
        let missing = |what: &str| Error::Schema(format!("checkpoint has no {what}; cannot resume training from it"));
        Ok(TrainState {
            ema: self.ema.ok_or_else(|| missing("EMA weights"))?,
            opt: self.opt.ok_or_else(|| missing("optimiser state"))?,
            rng: self.rng.ok_or_else(|| missing("generator state"))?.restore(),
            params: self.params,
            k: self.k,
        })
    }

    /// EMA weights when present, otherwise the raw weights.
    pub fn inference_params(&self, prefer_ema: bool) -> &Params<f32> {
        match (&self.ema, prefer_ema) {
            (Some(e), true) => e,
            _ => &self.params,
        }
    }
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut add = |prefix: &str, names: &[String], tensors: Vec<&Tensor<f32>>| {
        for (n, t) in names.iter().zip(tensors) {
            owned.push((format!("{prefix}/{n}"), t.shape().to_vec(), f32_bytes(t)));
        }
    };
    let names = ckpt.params.names().to_vec();
    add("params", &names, ckpt.params.iter().map(|(_, t)| t).collect());
    if let Some(ema) = &ckpt.ema {
        add("ema", &names, ema.iter().map(|(_, t)| t).collect());
    }
    if let Some(opt) = &ckpt.opt {
        add("adam_m", &names, opt.m.iter().collect());
        add("adam_v", &names, opt.v.iter().collect());
    }
    let views = owned
        .iter()
        .map(|(n, shape, bytes)| Ok((n.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Schema(e.to_string()))?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
    meta.insert("config".to_string(), ckpt.config.to_json());
    meta.insert("config_hash".to_string(), ckpt.config_hash.clone());
    meta.insert("k".to_string(), ckpt.k.to_string());
    if let Some(opt) = &ckpt.opt {
        meta.insert("opt_step".to_string(), opt.step.to_string());
    }
    if let Some(rng) = &ckpt.rng {
        meta.insert("rng_seed".to_string(), hex::encode(rng.seed));
        meta.insert("rng_stream".to_string(), rng.stream.to_string());
        meta.insert("rng_word_pos".to_string(), rng.word_pos.to_string());
    }
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Schema(e.to_string()))
}

pub fn save(path: &Path, ckpt: &Checkpoint, force: bool) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt)?, force)
}

fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Schema(format!("checkpoint metadata lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?.parse().map_err(|_| Error::Schema(format!("checkpoint metadata `{key}` is malformed")))
}

fn read_group(st: &SafeTensors, prefix: &str, net: &Network, required: bool) -> Result<Option<Vec<Tensor<f32>>>> {
    let mut out = Vec::with_capacity(net.specs().len());
    for spec in net.specs() {
        let name = format!("{prefix}/{}", spec.name);
        let view = match st.tensor(&name) {
            Ok(v) => v,
            Err(_) if !required && out.is_empty() => return Ok(None),
            Err(_) => return Err(Error::Schema(format!("checkpoint lacks tensor `{name}`"))),
        };
        if view.dtype() != Dtype::F32 {
            return Err(Error::Schema(format!("`{name}` is {:?}, expected F32", view.dtype())));
        }
        if view.shape() != spec.shape.as_slice() {
            return Err(Error::Schema(format!("`{name}` has shape {:?}, expected {:?}", view.shape(), spec.shape)));
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Tensor::new(spec.shape.clone(), data));
    }
    Ok(Some(out))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |e: safetensors::SafeTensorError| Error::Schema(format!("not a readable checkpoint: {e}"));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Schema("file is not a checkpoint (missing format tag)".into()));
    }
    let version: u32 = parse(&meta, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("checkpoint schema version {version}, this build reads {SCHEMA_VERSION}")));
    }
    let config = RunConfig::from_json(meta_get(&meta, "config")?)?;
    let config_hash = meta_get(&meta, "config_hash")?.to_string();
    if config.hash() != config_hash {
        return Err(Error::Schema("stored config does not match its recorded hash".into()));
    }
    let k = parse(&meta, "k")?;
    let net = Network::new(config.model.clone())?;
    let st = SafeTensors::deserialize(bytes).map_err(bad)?;
    let params = Params::from_parts(&net, read_group(&st, "params", &net, true)?.expect("required group"))?;
    let ema = read_group(&st, "ema", &net, false)?.map(|t| Params::from_parts(&net, t)).transpose()?;
    let opt = match (read_group(&st, "adam_m", &net, false)?, read_group(&st, "adam_v", &net, false)?) {
        (Some(m), Some(v)) => Some(RAdamState { m, v, step: parse(&meta, "opt_step")? }),
        (None, None) => None,
        _ => return Err(Error::Schema("checkpoint has only one optimiser moment".into())),
    };
    let rng = if meta.contains_key("rng_seed") {
        let seed_vec = hex::decode(meta_get(&meta, "rng_seed")?).map_err(|_| Error::Schema("bad rng_seed".into()))?;
        let seed: [u8; 32] = seed_vec.try_into().map_err(|_| Error::Schema("rng_seed must be 32 bytes".into()))?;
        Some(RngState { seed, stream: parse(&meta, "rng_stream")?, word_pos: parse(&meta, "rng_word_pos")? })
    } else {
        None
    };
    Ok(Checkpoint { config, config_hash, k, params, ema, opt, rng })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}
