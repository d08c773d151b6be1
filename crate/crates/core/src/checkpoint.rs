//! Training-state persistence on top of [`crate::archive`].
//!
//! Tensor keys:
//!
//! * `<param>` for every parameter, e.g. `embed.face_enc.1-a.kernel`,
//!   `gen.3-Y.bias`, `dp.4-f.kernel`, `cls.v512.fc3.bias`;
//! * `adam.m/<param>` and `adam.v/<param>` for the Adam moments.
//!
//! Metadata: `format`, `step`, the full training config, its hash, the
//! per-group Adam step counts and the noise generator position
//! (`seed` as hex, `stream`, `word_pos` as a decimal string).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{Group, Networks, Parameters};
use crate::nn::ParamSet;
use crate::training::{AdamState, TrainConfig, TrainState};

pub const FORMAT: &str = "degnet-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: String,
    step: u64,
    config_hash: String,
    config: TrainConfig,
    adam_steps: [u64; 5],
    rng: RngState,
}

fn integrity(path: &Path, message: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let meta = Metadata {
        format: FORMAT.into(),
        step: state.step,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        adam_steps: state.optim.each_ref().map(|o| o.t),
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    let mut a = Archive::new(serde_json::to_value(&meta)?);
    for group in Group::ALL {
        let opt = state.optim(group);
        for (name, t) in state.params.get(group).iter() {
            a.insert(name.clone(), t.clone());
        }
        for (name, t) in opt.m.iter() {
            a.insert(format!("adam.m/{name}"), t.clone());
        }
        for (name, t) in opt.v.iter() {
            a.insert(format!("adam.v/{name}"), t.clone());
        }
    }
    a.write(path)
}

/// Loads a checkpoint, rebuilding the networks from its stored config.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let mut a = Archive::read(path)?;
    let meta: Metadata = serde_json::from_value(a.metadata.clone())
        .map_err(|e| integrity(path, format!("bad metadata: {e}")))?;
    if meta.format != FORMAT {
        return Err(integrity(path, format!("unsupported format `{}`", meta.format)));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(integrity(path, "config hash does not match stored config"));
    }
    let nets = Networks::new(meta.config.model_config())?;

    let mut sets: [ParamSet; 5] = Default::default();
    let mut optim = Vec::with_capacity(5);
    for group in Group::ALL {
        let specs = nets.specs(group);
        let mut take_all = |prefix: &str| -> Result<ParamSet> {
            let mut set = ParamSet::default();
            for s in &specs {
                let key = format!("{prefix}{}", s.name);
                let t = a.take(&key, path)?;
                if t.shape() != s.shape.as_slice() {
                    return Err(integrity(
                        path,
                        format!("tensor `{key}` has shape {:?}, expected {:?}", t.shape(), s.shape),
                    ));
                }
                set.insert(s.name.clone(), t);
            }
            Ok(set)
        };
        sets[group as usize] = take_all("")?;
        let m = take_all("adam.m/")?;
        let v = take_all("adam.v/")?;
        optim.push(AdamState {
            t: meta.adam_steps[group as usize],
            m,
            v,
        });
    }
    if let Some(extra) = a.tensors.keys().next() {
        return Err(integrity(path, format!("unexpected tensor `{extra}`")));
    }

    let seed: [u8; 32] = hex::decode(&meta.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| integrity(path, "malformed rng seed"))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| integrity(path, "malformed rng word position"))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    let optim: [AdamState; 5] = optim.try_into().expect("one optimiser per group");
    Ok((
        meta.config,
        TrainState {
            params: Parameters::from_sets(sets),
            optim,
            step: meta.step,
            rng,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            resolution: 16,
            width_divisor: 16,
            latent_dim: 8,
            ..TrainConfig::paper()
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = tiny_cfg();
        let nets = Networks::new(cfg.model_config()).unwrap();
        let mut state = TrainState::new(&nets, 5);
        state.step = 17;
        state.rng.next_u64();
        state.optim[1].t = 3;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.degn");
        save_checkpoint(&state, &cfg, &p).unwrap();
        let (cfg2, mut back) = load_checkpoint(&p).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, state);
        assert_eq!(back.rng.next_u64(), state.clone().rng.next_u64());
    }

    #[test]
    fn missing_key_is_named() {
        let cfg = tiny_cfg();
        let nets = Networks::new(cfg.model_config()).unwrap();
        let state = TrainState::new(&nets, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.degn");
        save_checkpoint(&state, &cfg, &p).unwrap();
        let mut a = Archive::read(&p).unwrap();
        a.tensors.remove("gen.3-b.kernel");
        a.write(&p).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("`gen.3-b.kernel`"), "{err}");
    }
}
