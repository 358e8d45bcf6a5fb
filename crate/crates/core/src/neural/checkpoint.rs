use std::path::Path;

use super::AdamState;
use crate::container::{join_u64, split_u64, Array, Container};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: f64 = 1.0;

/// Flat parameters plus optimizer state. `extra` carries arrays owned by
/// the caller (network configuration, anchors); names must not start with
/// `ckpt.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
    pub extra: Vec<Array>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Result<&Array> {
        self.extra
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let [sh, sl] = split_u64(self.step);
        let [hh, hl] = split_u64(self.config_hash);
        c.push("ckpt.meta", &[5], vec![CHECKPOINT_VERSION, sh, sl, hh, hl]);
        c.push("ckpt.params", &[self.params.len()], self.params.clone());
        if let Some(a) = &self.adam {
            let [th, tl] = split_u64(a.t);
            c.push("ckpt.adam", &[6], vec![th, tl, a.lr, a.beta1, a.beta2, a.eps]);
            c.push("ckpt.adam_m", &[a.m.len()], a.m.clone());
            c.push("ckpt.adam_v", &[a.v.len()], a.v.clone());
        }
        c.arrays.extend(self.extra.iter().cloned());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.get_shaped("ckpt.meta", &[5])?.data;
        if meta[0] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", meta[0])));
        }
        let params = c.get("ckpt.params")?.data.clone();
        let adam = if c.has("ckpt.adam") {
            let s = &c.get_shaped("ckpt.adam", &[6])?.data;
            let m = c.get_shaped("ckpt.adam_m", &[params.len()])?.data.clone();
            let v = c.get_shaped("ckpt.adam_v", &[params.len()])?.data.clone();
            Some(AdamState { m, v, t: join_u64(s[0], s[1])?, lr: s[2], beta1: s[3], beta2: s[4], eps: s[5] })
        } else {
            None
        };
        Ok(Checkpoint {
            step: join_u64(meta[1], meta[2])?,
            config_hash: join_u64(meta[3], meta[4])?,
            params,
            adam,
            extra: c.arrays.iter().filter(|a| !a.name.starts_with("ckpt.")).cloned().collect(),
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_container().write(path)
}

/// Loads a checkpoint; with `expected_hash`, a different stored config hash
/// is reported as `ConfigHashMismatch`.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<u64>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_container(&Container::read(path)?)?;
    if let Some(expected) = expected_hash {
        if expected != ckpt.config_hash {
            return Err(Error::ConfigHashMismatch { expected, found: ckpt.config_hash });
        }
    }
    Ok(ckpt)
}
