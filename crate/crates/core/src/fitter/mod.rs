//! Learned iterative fitter.
//!
//! `Θ₀ = anchor + Φ_init(e)`, `h₀ = tanh(Φ_h(e))` with `e` the observation
//! encoding, then for `n = 1..N`:
//!
//! ```text
//! (ΔΘ_n, h_n) = f([g_{n-1}; Θ_{n-1}; e], h_{n-1})
//! (λ, γ)      = f_λγ(r(Θ_{n-1}), r(Θ_{n-1} + ΔΘ_n))
//! Θ_n         = Θ_{n-1} + λ ⊙ ΔΘ_n - γ ⊙ g_{n-1}
//! ```
//!
//! `g` is the data-term gradient. It and the residual inputs of `f_λγ` are
//! constants for backpropagation.

mod encode;
mod loss;
mod nets;
mod train;

pub use encode::{describe_encoding, encode_observations, encoding_dim, IMAGE_CENTER, IMAGE_HALF_SIZE};
pub use loss::{loss_target, step_loss, training_loss, LossTarget};
pub use nets::{
    fitter_step, run_fitter, update_rule_variant, FitResult, FitterNetworks, StepDiagnostics, StepInputs, StepNets, UpdateNet,
};
pub use train::{mean_loss, train, write_diagnostics_csv, write_history_csv, HistoryRow, TrainOutput, TrainSchedule};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `λ ⊙ ΔΘ - softplus(γ) ⊙ g`.
    LmLike,
    /// `λ' ΔΘ + (1 - λ')(-γ g)` with `λ' = sigmoid(λ)`.
    Convex,
    /// `γ [λ' ΔΘ/‖ΔΘ‖ + (1 - λ')(-g/‖g‖)]`.
    Normalized,
    /// `ΔΘ` alone.
    NetworkOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsMode {
    Shared,
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetType {
    Gru,
    Resmlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSizeMode {
    Vector,
    Scalar,
}

macro_rules! kebab_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::BadConfig(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($t),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

kebab_enum!(UpdateRule, LmLike => "lm-like", Convex => "convex", Normalized => "normalized", NetworkOnly => "network-only");
kebab_enum!(WeightsMode, Shared => "shared", PerStep => "per-step");
kebab_enum!(NetType, Gru => "gru", Resmlp => "resmlp");
kebab_enum!(StepSizeMode, Vector => "vector", Scalar => "scalar");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitterConfig {
    pub n_iters: usize,
    pub update_rule: UpdateRule,
    pub weights_mode: WeightsMode,
    pub net_type: NetType,
    pub step_size_mode: StepSizeMode,
    /// Units per recurrent layer (or residual block width).
    pub gru_units: usize,
    pub gru_layers: usize,
    /// Hidden layers of `Φ_init`, `Φ_h` and `f_λγ`.
    pub mlp_units: usize,
    pub mlp_layers: usize,
    /// Layer norm in the MLP hidden layers.
    pub layer_norm: bool,
    /// Dropout on recurrent outputs during training.
    pub dropout: f64,
    /// Weight scale of every layer that outputs into parameter space.
    pub head_gain: f64,
    /// Initial raw λ (before sigmoid in the convex rules).
    pub lambda_init: f64,
    /// Initial γ after softplus.
    pub gamma_init: f64,
    /// Multiplies `g` before it enters `f`.
    pub grad_input_scale: f64,
}

impl Default for FitterConfig {
    fn default() -> Self {
        Self {
            n_iters: 5,
            update_rule: UpdateRule::LmLike,
            weights_mode: WeightsMode::Shared,
            net_type: NetType::Gru,
            step_size_mode: StepSizeMode::Vector,
            gru_units: 1024,
            gru_layers: 2,
            mlp_units: 256,
            mlp_layers: 2,
            layer_norm: true,
            dropout: 0.5,
            head_gain: 0.01,
            lambda_init: 1.0,
            gamma_init: 0.01,
            grad_input_scale: 1.0,
        }
    }
}

impl FitterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.gru_units < 2 || self.gru_layers == 0 {
            return bad(format!("gru_units {} / gru_layers {} must be >= 2 / >= 1", self.gru_units, self.gru_layers));
        }
        if self.mlp_units < 2 {
            return bad(format!("mlp_units {} must be >= 2", self.mlp_units));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return bad(format!("gamma_init {} must be positive", self.gamma_init));
        }
        for (name, v) in [("head_gain", self.head_gain), ("lambda_init", self.lambda_init), ("grad_input_scale", self.grad_input_scale)] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        Ok(())
    }

    /// Number of independent update/step-size network copies.
    pub fn num_step_nets(&self) -> usize {
        match self.weights_mode {
            WeightsMode::Shared => 1,
            WeightsMode::PerStep => self.n_iters.max(1),
        }
    }
}

/// Per-step training loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLossWeights {
    pub vertices: f64,
    pub edges: f64,
    pub transforms: f64,
    pub rotations: f64,
    pub translation: f64,
}

impl Default for TrainLossWeights {
    fn default() -> Self {
        Self { vertices: 1000.0, edges: 1000.0, transforms: 100.0, rotations: 1.0, translation: 100.0 }
    }
}

impl TrainLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.vertices, self.edges, self.transforms, self.rotations, self.translation];
        if w.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("loss weights must be non-negative, got {w:?}")))
        }
    }
}
