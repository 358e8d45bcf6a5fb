use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::{encode_observations, encoding_dim};
use super::{FitterConfig, NetType, StepSizeMode, UpdateRule};
use crate::error::{shape_check, Error, Result};
use crate::layout::{ParamLayout, Task};
use crate::neural::{
    dropout, sigmoid, softplus, zeros_like, AdamState, Checkpoint, GruCache, GruCell, Linear, Mlp, MlpCache, Params, ResMlp,
    ResMlpCache,
};
use crate::residuals::{DataTerm, Observation};

/// The update network `f`.
#[derive(Clone, Debug, PartialEq)]
pub enum UpdateNet {
    Gru { cells: Vec<GruCell>, head: Linear },
    ResMlp(ResMlp),
}

impl Params for UpdateNet {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            UpdateNet::Gru { cells, head } => {
                cells.visit(f);
                head.visit(f);
            }
            UpdateNet::ResMlp(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            UpdateNet::Gru { cells, head } => {
                cells.visit_mut(f);
                head.visit_mut(f);
            }
            UpdateNet::ResMlp(m) => m.visit_mut(f),
        }
    }
}

/// Networks used by one fitting iteration. `step_size` is absent for the
/// network-only rule.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNets {
    pub update: UpdateNet,
    pub step_size: Option<Mlp>,
}

impl Params for StepNets {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.update.visit(f);
        if let Some(m) = &self.step_size {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.update.visit_mut(f);
        if let Some(m) = &mut self.step_size {
            m.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitterNetworks {
    pub config: FitterConfig,
    pub task: Task,
    pub theta_dim: usize,
    pub enc_dim: usize,
    pub resid_dim: usize,
    /// Offset added to `Φ_init`'s output.
    pub anchor: Vec<f64>,
    pub init: Mlp,
    /// `Φ_h`; GRU only.
    pub hidden_init: Option<Mlp>,
    /// One entry when weights are shared, otherwise one per iteration.
    pub steps: Vec<StepNets>,
}

impl Params for FitterNetworks {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.init.visit(f);
        if let Some(m) = &self.hidden_init {
            m.visit(f);
        }
        self.steps.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.init.visit_mut(f);
        if let Some(m) = &mut self.hidden_init {
            m.visit_mut(f);
        }
        self.steps.visit_mut(f);
    }
}

/// Per-iterate diagnostics. Row `i` describes `Θ_i`: its data term and
/// gradient norm, and the step that produced it (zeros for `i = 0`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub iter: usize,
    pub data_term: f64,
    pub grad_norm: f64,
    pub lambda_norm: f64,
    pub gamma_norm: f64,
    pub delta_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// `Θ₀..Θ_N`.
    pub thetas: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Inputs of one iteration that are constants for backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub g: Vec<f64>,
    pub data_term: f64,
    /// `[r(Θ_{n-1}); r(Θ_{n-1} + ΔΘ_n)]`, empty for the network-only rule.
    pub r_in: Vec<f64>,
}

pub(crate) struct StepTrace {
    pub(crate) inputs: StepInputs,
    pub(crate) x: Vec<f64>,
    pub(crate) gru: Vec<GruCache>,
    pub(crate) masks: Vec<Vec<f64>>,
    pub(crate) head_in: Vec<f64>,
    pub(crate) res: Option<ResMlpCache>,
    pub(crate) ss: Option<MlpCache>,
    pub(crate) delta: Vec<f64>,
    pub(crate) lam: Vec<f64>,
    pub(crate) gam: Vec<f64>,
}

pub(crate) struct Trace {
    init: MlpCache,
    hidden: Option<(MlpCache, Vec<f64>)>,
    pub thetas: Vec<Vec<f64>>,
    pub(crate) steps: Vec<StepTrace>,
}

#[cfg(test)]
impl Trace {
    pub fn inputs(&self) -> Vec<StepInputs> {
        self.steps.iter().map(|s| s.inputs.clone()).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn not_finite(what: &str) -> Error {
    Error::NonFiniteState(format!("non-finite {what} in learned fitter"))
}

/// Parameter step of one iteration from the network update `delta`, the
/// data-term gradient `g` and raw step sizes (length `|Θ|` or 1).
pub fn update_rule_variant(kind: UpdateRule, delta: &[f64], g: &[f64], lam: &[f64], gam: &[f64]) -> Result<Vec<f64>> {
    let p = delta.len();
    shape_check(g.len() == p, || format!("gradient has {} entries, update has {p}", g.len()))?;
    if kind != UpdateRule::NetworkOnly {
        shape_check([lam.len(), gam.len()].iter().all(|&n| n == p || n == 1), || {
            format!("step sizes have {} / {} entries for {p} parameters", lam.len(), gam.len())
        })?;
    }
    Ok(match kind {
        UpdateRule::NetworkOnly => delta.to_vec(),
        UpdateRule::LmLike => (0..p).map(|i| at(lam, i) * delta[i] - softplus(at(gam, i)) * g[i]).collect(),
        UpdateRule::Convex => (0..p)
            .map(|i| {
                let l = sigmoid(at(lam, i));
                l * delta[i] + (1.0 - l) * (-softplus(at(gam, i)) * g[i])
            })
            .collect(),
        UpdateRule::Normalized => {
            let (nd, ng) = (norm(delta), norm(g));
            if nd < 1e-12 || ng < 1e-12 {
                return Err(Error::DegenerateInput(format!(
                    "normalized update needs nonzero directions, |ΔΘ| = {nd:e}, |g| = {ng:e}"
                )));
            }
            (0..p)
                .map(|i| {
                    let l = sigmoid(at(lam, i));
                    softplus(at(gam, i)) * (l * delta[i] / nd - (1.0 - l) * g[i] / ng)
                })
                .collect()
        }
    })
}

/// Backward of [`update_rule_variant`] with `g` held constant:
/// returns `(d delta, d lam, d gam)`.
fn update_rule_backward(
    kind: UpdateRule,
    delta: &[f64],
    g: &[f64],
    lam: &[f64],
    gam: &[f64],
    ds: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = delta.len();
    let mut dl = vec![0.0; lam.len()];
    let mut dg = vec![0.0; gam.len()];
    let idx = |v: &[f64], i: usize| if v.len() == 1 { 0 } else { i };
    let dd = match kind {
        UpdateRule::NetworkOnly => ds.to_vec(),
        UpdateRule::LmLike => (0..p)
            .map(|i| {
                let (a, b) = (at(lam, i), at(gam, i));
                dl[idx(lam, i)] += delta[i] * ds[i];
                dg[idx(gam, i)] -= g[i] * ds[i] * sigmoid(b);
                a * ds[i]
            })
            .collect(),
        UpdateRule::Convex => (0..p)
            .map(|i| {
                let l = sigmoid(at(lam, i));
                let b = at(gam, i);
                let gm = softplus(b);
                dl[idx(lam, i)] += (delta[i] + gm * g[i]) * ds[i] * l * (1.0 - l);
                dg[idx(gam, i)] -= (1.0 - l) * g[i] * ds[i] * sigmoid(b);
                l * ds[i]
            })
            .collect(),
        UpdateRule::Normalized => {
            let (nd, ng) = (norm(delta), norm(g));
            let u: Vec<f64> = delta.iter().map(|d| d / nd).collect();
            let mut du = vec![0.0; p];
            for i in 0..p {
                let l = sigmoid(at(lam, i));
                let b = at(gam, i);
                let gm = softplus(b);
                du[i] = gm * l * ds[i];
                dl[idx(lam, i)] += gm * (u[i] + g[i] / ng) * ds[i] * l * (1.0 - l);
                dg[idx(gam, i)] += (l * u[i] - (1.0 - l) * g[i] / ng) * ds[i] * sigmoid(b);
            }
            let ud: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
            (0..p).map(|i| (du[i] - u[i] * ud) / nd).collect()
        }
    };
    (dd, dl, dg)
}

impl FitterNetworks {
    pub fn new(config: FitterConfig, data: &DataTerm, anchor: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let task = data.layout.task;
        let p = data.layout.len();
        shape_check(anchor.len() == p, || format!("anchor has {} entries, layout has {p}", anchor.len()))?;
        let e = encoding_dim(task, data.model);
        let r = data.num_residuals();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = vec![config.mlp_units; config.mlp_layers];
        let dims = |i: usize, o: usize| [&[i][..], &hidden, &[o]].concat();
        let init = Mlp::new(&dims(e, p), config.layer_norm, config.head_gain, &mut rng);
        let (h, l) = (config.gru_units, config.gru_layers);
        let hidden_init = (config.net_type == NetType::Gru)
            .then(|| Mlp::new(&dims(e, h * l), config.layer_norm, 1.0, &mut rng));
        let x_dim = 2 * p + e;
        let ss_out = match config.step_size_mode {
            StepSizeMode::Vector => 2 * p,
            StepSizeMode::Scalar => 2,
        };
        let gamma_bias = config.gamma_init.exp_m1().ln();
        let steps = (0..config.num_step_nets())
            .map(|_| {
                let update = match config.net_type {
                    NetType::Gru => UpdateNet::Gru {
                        cells: (0..l).map(|k| GruCell::new(if k == 0 { x_dim } else { h }, h, &mut rng)).collect(),
                        head: Linear::glorot(h, p, config.head_gain, &mut rng),
                    },
                    NetType::Resmlp => {
                        UpdateNet::ResMlp(ResMlp::new(x_dim, h, l, p, config.layer_norm, config.head_gain, &mut rng))
                    }
                };
                let step_size = (config.update_rule != UpdateRule::NetworkOnly).then(|| {
                    let mut m = Mlp::new(&dims(2 * r, ss_out), config.layer_norm, config.head_gain, &mut rng);
                    let half = ss_out / 2;
                    let out = m.output_layer_mut();
                    for i in 0..ss_out {
                        out.b[i] = if i < half { config.lambda_init } else { gamma_bias };
                    }
                    m
                });
                StepNets { update, step_size }
            })
            .collect();
        Ok(FitterNetworks { config, task, theta_dim: p, enc_dim: e, resid_dim: r, anchor, init, hidden_init, steps })
    }

    /// Rest rotations plus the mean of every non-rotation entry.
    pub fn anchor_from<'a>(layout: &ParamLayout, gts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut anchor = layout.rest_params();
        let rot_end = layout.rotations().end;
        let mut sum = vec![0.0; layout.len()];
        let mut n = 0usize;
        for t in gts {
            for (s, v) in sum.iter_mut().zip(t) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            for i in rot_end..layout.len() {
                anchor[i] = sum[i] / n as f64;
            }
        }
        anchor
    }

    pub fn check_compatible(&self, data: &DataTerm) -> Result<()> {
        let ok = self.task == data.layout.task
            && self.theta_dim == data.layout.len()
            && self.enc_dim == encoding_dim(self.task, data.model)
            && self.resid_dim == data.num_residuals();
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "fitter built for {} with |Θ| = {}, got {} with |Θ| = {}",
                self.task,
                self.theta_dim,
                data.layout.task,
                data.layout.len()
            )))
        }
    }

    fn step_index(&self, n: usize) -> usize {
        (n - 1).min(self.steps.len() - 1)
    }

    fn initial_state(&self, enc: &[f64]) -> Result<(Vec<f64>, MlpCache, Option<(MlpCache, Vec<f64>)>)> {
        let (out, init_cache) = self.init.forward(enc)?;
        let theta0: Vec<f64> = out.iter().zip(&self.anchor).map(|(o, a)| o + a).collect();
        let hidden = match &self.hidden_init {
            Some(m) => {
                let (pre, c) = m.forward(enc)?;
                Some((c, pre.iter().map(|v| v.tanh()).collect()))
            }
            None => None,
        };
        Ok((theta0, init_cache, hidden))
    }

    fn split_hidden(&self, h0: Option<&Vec<f64>>) -> Vec<Vec<f64>> {
        match h0 {
            Some(h) => h.chunks(self.config.gru_units).map(|c| c.to_vec()).collect(),
            None => vec![],
        }
    }

    /// One iteration given the constant inputs `g` and `r0 = r(Θ_{n-1})`.
    #[allow(clippy::too_many_arguments)]
    fn step_forward(
        &self,
        n: usize,
        theta: &[f64],
        h: &[Vec<f64>],
        enc: &[f64],
        data: &DataTerm,
        obs: &Observation,
        inputs: StepInputs,
        r0: Option<&[f64]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, StepTrace)> {
        let cfg = &self.config;
        let nets = &self.steps[self.step_index(n)];
        let p = self.theta_dim;
        shape_check(theta.len() == p && inputs.g.len() == p, || {
            format!("iterate / gradient sizes {} / {}, expected {p}", theta.len(), inputs.g.len())
        })?;
        if !inputs.g.iter().all(|v| v.is_finite()) {
            return Err(not_finite("data-term gradient"));
        }
        let mut x = Vec::with_capacity(2 * p + enc.len());
        x.extend(inputs.g.iter().map(|v| v * cfg.grad_input_scale));
        x.extend_from_slice(theta);
        x.extend_from_slice(enc);

        let mut trace = StepTrace {
            inputs,
            x: vec![],
            gru: vec![],
            masks: vec![],
            head_in: vec![],
            res: None,
            ss: None,
            delta: vec![],
            lam: vec![],
            gam: vec![],
        };
        let mut h_next = Vec::with_capacity(h.len());
        let delta = match &nets.update {
            UpdateNet::Gru { cells, head } => {
                let mut rng = rng;
                let mut input = x.clone();
                for (cell, hl) in cells.iter().zip(h) {
                    let (hn, cache) = cell.forward(&input, hl)?;
                    let (out, mask) = match rng.as_deref_mut() {
                        Some(r) => dropout(&hn, cfg.dropout, true, r)?,
                        None => (hn.clone(), vec![]),
                    };
                    trace.gru.push(cache);
                    trace.masks.push(mask);
                    h_next.push(hn);
                    input = out;
                }
                let d = head.forward(&input)?;
                trace.head_in = input;
                d
            }
            UpdateNet::ResMlp(m) => {
                let (d, cache) = m.forward(&x)?;
                trace.res = Some(cache);
                d
            }
        };
        trace.x = x;

        if let Some(ss) = &nets.step_size {
            if trace.inputs.r_in.is_empty() {
                let r0 = r0.ok_or_else(|| Error::ShapeMismatch("missing residuals for step-size network".into()))?;
                let look: Vec<f64> = theta.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let r1 = match data.evaluate(&look, obs, false) {
                    Ok(pk) => pk.r,
                    Err(Error::BehindCamera { .. } | Error::DegenerateInput(_)) => r0.to_vec(),
                    Err(e) => return Err(e),
                };
                trace.inputs.r_in = [r0, &r1[..]].concat();
            }
            let (out, cache) = ss.forward(&trace.inputs.r_in)?;
            let half = out.len() / 2;
            trace.lam = out[..half].to_vec();
            trace.gam = out[half..].to_vec();
            trace.ss = Some(cache);
        }
        let step = update_rule_variant(cfg.update_rule, &delta, &trace.inputs.g, &trace.lam, &trace.gam)?;
        let next: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a + b).collect();
        if !next.iter().all(|v| v.is_finite()) || !h_next.iter().flatten().all(|v| v.is_finite()) {
            return Err(not_finite("iterate"));
        }
        trace.delta = delta;
        Ok((next, h_next, trace))
    }

    fn diagnostics_of(&self, t: &StepTrace) -> (f64, f64) {
        let p = self.theta_dim;
        let eff = |v: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
            (0..p).map(|i| f(at(v, i)).powi(2)).sum::<f64>().sqrt()
        };
        match self.config.update_rule {
            UpdateRule::NetworkOnly => ((p as f64).sqrt(), 0.0),
            UpdateRule::LmLike => (eff(&t.lam, &|v| v), eff(&t.gam, &softplus)),
            UpdateRule::Convex | UpdateRule::Normalized => (eff(&t.lam, &sigmoid), eff(&t.gam, &softplus)),
        }
    }

    /// Unrolled forward. `rng` enables dropout; `frozen` replays recorded
    /// constant inputs instead of recomputing them.
    pub(crate) fn forward(
        &self,
        data: &DataTerm,
        obs: &Observation,
        n_iters: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        frozen: Option<&[StepInputs]>,
    ) -> Result<Trace> {
        let enc = encode_observations(data.model, obs)?;
        let (theta0, init, hidden) = self.initial_state(&enc)?;
        if !theta0.iter().all(|v| v.is_finite()) {
            return Err(not_finite("initial estimate"));
        }
        let mut h = self.split_hidden(hidden.as_ref().map(|(_, h)| h));
        let mut trace = Trace { init, hidden, thetas: vec![theta0], steps: vec![] };
        for n in 1..=n_iters {
            let theta = trace.thetas.last().unwrap().clone();
            let (inputs, r0) = match frozen {
                Some(f) => (f[n - 1].clone(), None),
                None => {
                    let (packet, g) = data.residuals_and_gradient(&theta, obs)?;
                    (StepInputs { g, data_term: packet.data_term(), r_in: vec![] }, Some(packet.r))
                }
            };
            let (next, hn, st) =
                self.step_forward(n, &theta, &h, &enc, data, obs, inputs, r0.as_deref(), rng.as_deref_mut())?;
            h = hn;
            trace.thetas.push(next);
            trace.steps.push(st);
        }
        Ok(trace)
    }

    /// Unrolls `n_iters` steps and backpropagates `dthetas` (the loss
    /// gradients with respect to `Θ₀..Θ_N`). Also returns the iterates and the
    /// step inputs, which `replay` accepts to rerun the fit with them frozen.
    pub fn unrolled_gradient(
        &self,
        data: &DataTerm,
        obs: &Observation,
        n_iters: usize,
        rng: Option<&mut ChaCha8Rng>,
        dthetas: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, FitterNetworks, Vec<StepInputs>)> {
        self.check_compatible(data)?;
        let trace = self.forward(data, obs, n_iters, rng, None)?;
        let mut grad = zeros_like(self);
        self.backward(&trace, dthetas, &mut grad)?;
        let inputs = trace.steps.iter().map(|s| s.inputs.clone()).collect();
        Ok((trace.thetas, grad, inputs))
    }

    /// Iterates `Θ₀..Θ_N` with `g` and the residual inputs taken from `frozen`.
    pub fn replay(
        &self,
        data: &DataTerm,
        obs: &Observation,
        rng: Option<&mut ChaCha8Rng>,
        frozen: &[StepInputs],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_compatible(data)?;
        Ok(self.forward(data, obs, frozen.len(), rng, Some(frozen))?.thetas)
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose
    /// gradients with respect to `Θ₀..Θ_N` are `dthetas`.
    pub(crate) fn backward(&self, trace: &Trace, dthetas: &[Vec<f64>], grad: &mut FitterNetworks) -> Result<()> {
        let n_iters = trace.steps.len();
        shape_check(dthetas.len() == n_iters + 1, || {
            format!("{} iterate gradients for {} iterates", dthetas.len(), n_iters + 1)
        })?;
        let p = self.theta_dim;
        let mut dtheta = dthetas[n_iters].clone();
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; self.config.gru_units]; self.config.gru_layers];
        for n in (1..=n_iters).rev() {
            let st = &trace.steps[n - 1];
            let k = self.step_index(n);
            let nets = &self.steps[k];
            let gnets = &mut grad.steps[k];
            let (dd, dl, dg) =
                update_rule_backward(self.config.update_rule, &st.delta, &st.inputs.g, &st.lam, &st.gam, &dtheta);
            if let (Some(ss), Some(gss), Some(cache)) = (&nets.step_size, gnets.step_size.as_mut(), &st.ss) {
                ss.backward(cache, &[dl, dg].concat(), gss)?;
            }
            let dx = match (&nets.update, &mut gnets.update) {
                (UpdateNet::Gru { cells, head }, UpdateNet::Gru { cells: gcells, head: ghead }) => {
                    let mut dout = head.backward(&st.head_in, &dd, ghead)?;
                    for l in (0..cells.len()).rev() {
                        let mut dhl = dh[l].clone();
                        for (i, d) in dhl.iter_mut().enumerate() {
                            *d += dout[i] * st.masks[l].get(i).copied().unwrap_or(1.0);
                        }
                        let (dxl, dhp) = cells[l].backward(&st.gru[l], &dhl, &mut gcells[l])?;
                        dh[l] = dhp;
                        dout = dxl;
                    }
                    dout
                }
                (UpdateNet::ResMlp(m), UpdateNet::ResMlp(gm)) => {
                    m.backward(st.res.as_ref().expect("resmlp cache"), &dd, gm)?
                }
                _ => return Err(Error::ShapeMismatch("gradient accumulator has a different network type".into())),
            };
            for i in 0..p {
                dtheta[i] += dx[p + i] + dthetas[n - 1][i];
            }
        }
        self.init.backward(&trace.init, &dtheta, &mut grad.init)?;
        if let (Some(m), Some(gm), Some((cache, h0))) = (&self.hidden_init, grad.hidden_init.as_mut(), &trace.hidden) {
            let dflat: Vec<f64> = dh.concat().iter().zip(h0).map(|(d, h)| d * (1.0 - h * h)).collect();
            m.backward(cache, &dflat, gm)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, step: u64, config_hash: u64, adam: Option<AdamState>) -> Checkpoint {
        let mut c = crate::container::Container::new();
        c.push_text("fitter.config", &toml::to_string(&self.config).expect("fitter config serializes"));
        c.push("fitter.dims", &[4], vec![self.task.code(), self.theta_dim as f64, self.enc_dim as f64, self.resid_dim as f64]);
        c.push("fitter.anchor", &[self.anchor.len()], self.anchor.clone());
        Checkpoint { step, config_hash, params: self.flatten(), adam, extra: c.arrays }
    }

    /// Rebuilds the networks for `data` and loads the checkpoint weights.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &DataTerm) -> Result<Self> {
        let text = crate::container::Container { version: 1, arrays: ckpt.extra.clone() }.get_text("fitter.config")?;
        let config: FitterConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("bad fitter config in checkpoint: {e}")))?;
        let dims = &ckpt.extra("fitter.dims")?.data;
        let anchor = ckpt.extra("fitter.anchor")?.data.clone();
        let mut nets = FitterNetworks::new(config, data, anchor, 0)?;
        if dims.len() != 4
            || Task::from_code(dims[0])? != nets.task
            || dims[1..] != [nets.theta_dim as f64, nets.enc_dim as f64, nets.resid_dim as f64]
        {
            return Err(Error::ShapeMismatch(format!("checkpoint dims {dims:?} do not match the model")));
        }
        if ckpt.params.len() != nets.num_params() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, networks need {}",
                ckpt.params.len(),
                nets.num_params()
            )));
        }
        nets.assign(&ckpt.params);
        Ok(nets)
    }
}

/// Applies `Θ₀ = Φ_init(D)` and `N` iterations, in inference mode.
pub fn run_fitter(nets: &FitterNetworks, data: &DataTerm, obs: &Observation, n_iters: usize) -> Result<FitResult> {
    nets.check_compatible(data)?;
    let trace = nets.forward(data, obs, n_iters, None, None)?;
    let mut diagnostics = vec![StepDiagnostics::default(); n_iters + 1];
    for (i, d) in diagnostics.iter_mut().enumerate() {
        d.iter = i;
    }
    for (k, st) in trace.steps.iter().enumerate() {
        diagnostics[k].data_term = st.inputs.data_term;
        diagnostics[k].grad_norm = norm(&st.inputs.g);
        let (ln, gn) = nets.diagnostics_of(st);
        diagnostics[k + 1].lambda_norm = ln;
        diagnostics[k + 1].gamma_norm = gn;
        diagnostics[k + 1].delta_norm = norm(&st.delta);
    }
    let (e, g) = data.value_and_gradient(trace.thetas.last().unwrap(), obs)?;
    diagnostics[n_iters].data_term = e;
    diagnostics[n_iters].grad_norm = norm(&g);
    Ok(FitResult { thetas: trace.thetas, diagnostics })
}

/// Iteration `n` (1-based) from `Θ_{n-1}`, `g_{n-1}` and the recurrent
/// state `h` (one vector per layer; empty for the residual network).
pub fn fitter_step(
    nets: &FitterNetworks,
    n: usize,
    theta: &[f64],
    g: &[f64],
    h: &[Vec<f64>],
    data: &DataTerm,
    obs: &Observation,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, StepDiagnostics)> {
    nets.check_compatible(data)?;
    if n == 0 {
        return Err(Error::BadConfig("iterations are numbered from 1".into()));
    }
    let enc = encode_observations(data.model, obs)?;
    let packet = data.evaluate(theta, obs, false)?;
    let inputs = StepInputs { g: g.to_vec(), data_term: packet.data_term(), r_in: vec![] };
    let (next, hn, st) = nets.step_forward(n, theta, h, &enc, data, obs, inputs, Some(&packet.r), None)?;
    let (ln, gn) = nets.diagnostics_of(&st);
    let diag = StepDiagnostics {
        iter: n,
        data_term: packet.data_term(),
        grad_norm: norm(g),
        lambda_norm: ln,
        gamma_norm: gn,
        delta_norm: norm(&st.delta),
    };
    Ok((next, hn, diag))
}

impl FitterNetworks {
    /// `Θ₀` and the recurrent state `h₀` per layer (empty for the residual
    /// network).
    pub fn initial_hidden(&self, obs: &Observation, data: &DataTerm) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let enc = encode_observations(data.model, obs)?;
        let (theta0, _, hidden) = self.initial_state(&enc)?;
        Ok((theta0, self.split_hidden(hidden.as_ref().map(|(_, h)| h))))
    }
}
