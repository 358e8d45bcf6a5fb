//! Run configuration: a sectioned TOML file layered over task defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classic::{BaselineWeights, LmOptions};
use crate::datagen::{DataConfig, PoseRanges, Visibility};
use crate::error::{Error, Result};
use crate::fitter::{FitterConfig, TrainLossWeights, TrainSchedule};
use crate::layout::Task;
use crate::model::SynthConfig;
use crate::residuals::ResidualOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vertices: usize,
    pub shape: usize,
    pub expr: usize,
    pub landmarks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub noise: f64,
    pub visibility: Visibility,
    pub dropout: f64,
    pub ranges: PoseRanges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdOptions {
    pub step: f64,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub weights: BaselineWeights,
    /// Components of the pose prior fitted on the training split.
    pub gmm_components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub residuals: ResidualOptions,
    pub fitter: FitterConfig,
    pub loss: TrainLossWeights,
    pub train: TrainSchedule,
    pub lm: LmOptions,
    pub gd: GdOptions,
    pub baseline: BaselineSection,
    pub paths: Paths,
}

/// Keys whose defaults are sized for a desk machine rather than taken from
/// the published setup.
const DESK_SCALE: &[&str] = &[
    "model.vertices",
    "model.landmarks",
    "data.count",
    "fitter.gru_units",
    "fitter.mlp_units",
    "train.batch_size",
    "train.epochs",
    "train.lr",
    "train.anneal_epoch",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Hmd)
    }
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let synth = match task {
            Task::Face => SynthConfig::face(),
            _ => SynthConfig { vertices: 400, ..SynthConfig::body() },
        };
        let mut fitter = FitterConfig { gru_units: 64, mlp_units: 64, ..FitterConfig::default() };
        let mut train = TrainSchedule { epochs: 12, lr: 1e-3, anneal_epoch: 9, ..TrainSchedule::default() };
        let mut baseline = BaselineWeights::default();
        match task {
            // Pixel residuals: gradients are ~1e4 larger than in metric units.
            Task::Body2d => {
                fitter.gamma_init = 1e-6;
                fitter.grad_input_scale = 1e-4;
            }
            Task::Face => {
                fitter.gamma_init = 1e-6;
                fitter.grad_input_scale = 1e-4;
                train.epochs = 30;
                train.anneal_epoch = 24;
            }
            Task::Hmd => baseline.gravity = 0.0,
        }
        let data = DataConfig::default();
        RunConfig {
            task,
            seed: 0,
            model: ModelSection {
                vertices: synth.vertices,
                shape: synth.shape,
                expr: synth.expr,
                landmarks: synth.landmarks,
            },
            data: DataSection {
                count: if task == Task::Face { 5000 } else { data.count },
                split: crate::datagen::default_split(task),
                noise: data.noise,
                visibility: data.visibility,
                dropout: data.dropout,
                ranges: data.ranges,
            },
            residuals: ResidualOptions::default(),
            fitter,
            loss: TrainLossWeights::default(),
            train,
            lm: LmOptions::default(),
            gd: GdOptions { step: if task == Task::Hmd { 1e-2 } else { 1e-7 }, iters: 100 },
            baseline: BaselineSection { weights: baseline, gmm_components: 8 },
            paths: Paths { out_dir: PathBuf::from("out") },
        }
    }

    /// Parses TOML text over the defaults of its `task` (HMD when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::BadConfig(format!("config: {e}")))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let task = match value.get("task") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::BadConfig(format!("task must be a string, got {v}"))),
            None => Task::Hmd,
        };
        let mut base = toml::Value::try_from(Self::for_task(task)).expect("config serializes");
        merge(&mut base, value);
        let cfg: RunConfig = base.try_into().map_err(|e| Error::BadConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::BadConfig(m) => Error::BadConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to strings. Changing `task` resets the task defaults of
    /// keys that were not overridden.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        for (key, raw) in overrides {
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let mut slot = &mut value;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::BadConfig(format!("`{key}` does not name a config key")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::BadConfig(format!("unknown config key `{key}`")));
                    }
                    table.insert((*part).to_owned(), parsed.clone());
                    break;
                }
                slot = table.get_mut(*part).ok_or_else(|| Error::BadConfig(format!("unknown config section in `{key}`")))?;
            }
        }
        if overrides.iter().any(|(k, _)| k == "task") {
            // Re-layer the user keys over the new task's defaults.
            let task: Task = value.get("task").and_then(|v| v.as_str()).unwrap_or("hmd").parse()?;
            let defaults = toml::Value::try_from(Self::for_task(self.task)).expect("config serializes");
            let user = diff(&value, &defaults).unwrap_or(toml::Value::Table(Default::default()));
            let mut base = toml::Value::try_from(Self::for_task(task)).expect("config serializes");
            merge(&mut base, user);
            value = base;
        }
        let cfg: RunConfig = value.try_into().map_err(|e| Error::BadConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fitter.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.lm.validate()?;
        if !(self.gd.step >= 0.0) {
            return Err(Error::BadConfig("gd.step must be non-negative".into()));
        }
        if !(self.data.noise >= 0.0) || !(0.0..1.0).contains(&self.data.dropout) {
            return Err(Error::BadConfig("data.noise must be >= 0 and data.dropout in [0, 1)".into()));
        }
        crate::datagen::split_counts(self.data.count, self.data.split)?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let base = match self.task {
            Task::Face => SynthConfig::face(),
            _ => SynthConfig::body(),
        };
        SynthConfig {
            vertices: self.model.vertices,
            shape: self.model.shape,
            expr: self.model.expr,
            landmarks: self.model.landmarks,
            ..base
        }
    }

    pub fn data_config(&self) -> DataConfig {
        let d = &self.data;
        DataConfig {
            count: d.count,
            split: Some(d.split),
            noise: d.noise,
            visibility: d.visibility,
            dropout: d.dropout,
            seed: self.derived_seed(Stream::Data),
            ranges: d.ranges.clone(),
        }
    }

    pub fn derived_seed(&self, stream: Stream) -> u64 {
        hash_parts(&[&self.seed.to_string(), stream.name()])
    }

    fn section<T: Serialize>(value: &T) -> String {
        toml::to_string(value).expect("config section serializes")
    }

    /// Identifies the model file.
    pub fn model_hash(&self) -> u64 {
        hash_parts(&["model", &self.task.to_string(), &self.seed.to_string(), &Self::section(&self.model)])
    }

    /// Identifies the dataset file.
    pub fn data_hash(&self) -> u64 {
        hash_parts(&["data", &format!("{:016x}", self.model_hash()), &Self::section(&self.data)])
    }

    /// Identifies a trained checkpoint.
    pub fn checkpoint_hash(&self) -> u64 {
        hash_parts(&[
            "checkpoint",
            &format!("{:016x}", self.data_hash()),
            &Self::section(&self.residuals),
            &Self::section(&self.fitter),
            &Self::section(&self.loss),
            &Self::section(&self.train),
        ])
    }

    /// Hash of the whole configuration except output paths.
    pub fn config_hash(&self) -> u64 {
        let mut c = self.clone();
        c.paths = Self::for_task(self.task).paths;
        hash_parts(&["run", &Self::section(&c)])
    }

    pub fn to_toml(&self) -> String {
        Self::section(self)
    }

    /// TOML text with `# desk-scale` on keys whose defaults are not the
    /// published values.
    pub fn annotated_toml(&self) -> String {
        let mut section = String::new();
        let mut out = String::new();
        for line in self.to_toml().lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') {
                section = trimmed.trim_matches(|c| c == '[' || c == ']').to_owned();
            }
            let key = trimmed.split('=').next().unwrap_or("").trim();
            let full = if section.is_empty() { key.to_owned() } else { format!("{section}.{key}") };
            out.push_str(line);
            if trimmed.contains('=') && DESK_SCALE.contains(&full.as_str()) {
                out.push_str("  # desk-scale");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Model,
    Data,
    Init,
    Train,
    Gmm,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Model => "model",
            Stream::Data => "data",
            Stream::Init => "init",
            Stream::Train => "train",
            Stream::Gmm => "gmm",
        }
    }
}

/// First 8 bytes of SHA-256 over the parts, each followed by a NUL.
pub fn hash_parts(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Entries of `a` that differ from `b`.
fn diff(a: &toml::Value, b: &toml::Value) -> Option<toml::Value> {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            let mut out = toml::Table::new();
            for (k, v) in ta {
                match tb.get(k) {
                    Some(w) => {
                        if let Some(d) = diff(v, w) {
                            out.insert(k.clone(), d);
                        }
                    }
                    None => {
                        out.insert(k.clone(), v.clone());
                    }
                }
            }
            (!out.is_empty()).then_some(toml::Value::Table(out))
        }
        _ => (a != b).then(|| a.clone()),
    }
}
