//! Versioned binary checkpoint of a training run.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SYQC"  version:u16
//! json_len:u32  json (model and train config)
//! learning_rate:f64  step:u64  epoch:u64
//! rng_seed:[u8;32]  rng_stream:u64  rng_word_pos:u128
//! layer_count:u32
//! per layer:
//!   weights:f64s  velocity:f64s
//!   has_scales:u8  [alpha:f64s  grad_alpha:f64s  scale_step:u64]  scale_velocity:f64s
//!   has_bn:u8      [gamma beta running_mean running_var:f64s  eps:f64  momentum:f64]  bn_velocity:f64s
//! ```
//!
//! `f64s` is a `u64` count followed by the raw values, so every float
//! round-trips bit-exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::state::{LayerState, TrainState};
use crate::codec::{Reader, Writer};
use crate::error::{Result, SyqError};
use crate::scaling::ScaleState;
use crate::subgroups::ScaleVector;
use crate::tensor::BatchNormParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SYQC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&Configs {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| SyqError::InvalidArgument(format!("cannot encode configuration: {e}")))?;
        w.u32(json.len() as u32);
        w.bytes(&json);

        let s = &self.state;
        w.f64(s.learning_rate);
        w.u64(s.step);
        w.u64(s.epoch);
        w.bytes(&s.rng.get_seed());
        w.u64(s.rng.get_stream());
        w.u128(s.rng.get_word_pos());
        w.u32(s.layers.len() as u32);
        for l in &s.layers {
            w.f64s(&l.weights);
            w.f64s(&l.velocity);
            match &l.scales {
                Some(sc) => {
                    w.u8(1);
                    w.f64s(sc.alpha.as_slice());
                    w.f64s(&sc.grad_alpha);
                    w.u64(sc.step);
                }
                None => w.u8(0),
            }
            w.f64s(&l.scale_velocity);
            match &l.bn {
                Some(bn) => {
                    w.u8(1);
                    w.f64s(&bn.gamma);
                    w.f64s(&bn.beta);
                    w.f64s(&bn.running_mean);
                    w.f64s(&bn.running_var);
                    w.f64(bn.eps);
                    w.f64(bn.momentum);
                }
                None => w.u8(0),
            }
            w.f64s(&l.bn_velocity);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(SyqError::format(0, "not a checkpoint (bad magic)"));
        }
        let at = r.offset();
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(SyqError::format(
                at,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let configs: Configs = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| SyqError::format(at, format!("invalid configuration JSON: {e}")))?;

        let learning_rate = r.f64("learning rate")?;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = r.u128("rng position")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let weights = r.f64s("weights")?;
            let velocity = r.f64s("velocity")?;
            let scales = match flag(&mut r, "scale flag")? {
                true => {
                    let at = r.offset();
                    let alpha = ScaleVector::new(r.f64s("alpha")?).map_err(|e| SyqError::format(at, e.to_string()))?;
                    let grad_alpha = r.f64s("alpha gradient")?;
                    let step = r.u64("scale step")?;
                    Some(ScaleState {
                        alpha,
                        grad_alpha,
                        step,
                    })
                }
                false => None,
            };
            let scale_velocity = r.f64s("scale velocity")?;
            let bn = match flag(&mut r, "batch norm flag")? {
                true => Some(BatchNormParams {
                    gamma: r.f64s("gamma")?,
                    beta: r.f64s("beta")?,
                    running_mean: r.f64s("running mean")?,
                    running_var: r.f64s("running variance")?,
                    eps: r.f64("eps")?,
                    momentum: r.f64("momentum")?,
                }),
                false => None,
            };
            let bn_velocity = r.f64s("batch norm velocity")?;
            layers.push(LayerState {
                weights,
                velocity,
                scales,
                scale_velocity,
                bn,
                bn_velocity,
            });
        }
        r.expect_end()?;
        Ok(Self {
            model: configs.model,
            train: configs.train,
            state: TrainState {
                layers,
                learning_rate,
                step,
                epoch,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| SyqError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SyqError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn flag(r: &mut Reader<'_>, what: &str) -> Result<bool> {
    let at = r.offset();
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(SyqError::format(at, format!("{what} must be 0 or 1, found {v}"))),
    }
}
