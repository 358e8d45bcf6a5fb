//! Classic fitting baseline: damped Gauss-Newton (Levenberg-Marquardt),
//! plain gradient descent, and the composite baseline energy.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::geometry::{RigidTransform, Rotation6D};
use crate::layout::{ParamLayout, Task};
use crate::residuals::{
    face_regularizer_residual, gmm_residual, gravity_residual, temporal_residual, DataTerm, Gmm, Observation,
    PriorResidual,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Lower clamp on the diagonal of `JᵀJ` used for damping.
    pub min_diag: f64,
    /// Stop when the relative energy decrease of an accepted step is below this.
    pub convergence_tol: f64,
    /// Stop once the energy is below this.
    pub min_energy: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            min_diag: 1e-8,
            convergence_tol: 1e-10,
            min_energy: 1e-24,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_damping >= 0.0
            && self.damping_up >= 1.0
            && self.damping_down >= 1.0
            && self.min_diag > 0.0
            && self.convergence_tol >= 0.0
            && self.min_energy >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid LM options {self:?}")))
        }
    }
}

/// Solves `(JᵀJ + damping·max(diag(JᵀJ), min_diag)) Δ = Jᵀr`. The caller
/// applies `Θ ← Θ - Δ`.
pub fn lm_step(j: &DMatrix<f64>, r: &[f64], damping: f64, min_diag: f64) -> Result<DVector<f64>> {
    shape_check(j.nrows() == r.len(), || format!("jacobian has {} rows, residual {}", j.nrows(), r.len()))?;
    if !(damping >= 0.0) {
        return Err(Error::BadConfig(format!("damping must be >= 0, got {damping}")));
    }
    let jt = j.transpose();
    let mut a = &jt * j;
    let b = &jt * DVector::from_column_slice(r);
    for i in 0..a.nrows() {
        let d = a[(i, i)].max(min_diag);
        a[(i, i)] += damping * d;
    }
    let diag = a.diagonal();
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    // A pivot at roundoff level relative to its own diagonal entry means the
    // matrix is numerically singular.
    if chol.l_dirty().diagonal().iter().zip(diag.iter()).any(|(p, d)| p * p <= 1e-14 * d) {
        return Err(Error::SingularSystem);
    }
    let x = chol.solve(&b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem)
    }
}

/// Named energy contributions; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyTerms {
    pub data: f64,
    pub gravity: f64,
    pub gmm: f64,
    pub temporal: f64,
    pub face_reg: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.gravity + self.gmm + self.temporal + self.face_reg
    }
}

/// Stacked residual vector `r` with energy `Σ r² + constant`.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub r: Vec<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub terms: EnergyTerms,
}

pub trait LeastSquares {
    fn num_params(&self) -> usize;

    fn linearize(&self, theta: &[f64], jacobian: bool) -> Result<Linearization>;

    /// Energy and gradient.
    fn energy_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let l = self.linearize(theta, true)?;
        let j = l.jacobian.expect("requested jacobian");
        let g = j.transpose() * DVector::from_vec(l.r) * 2.0;
        Ok((l.terms.total(), g.data.into()))
    }

    /// Maps `theta` to an equivalent canonical point after a step.
    fn retract(&self, _theta: &mut [f64]) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineWeights {
    pub data: f64,
    pub gravity: f64,
    pub gmm: f64,
    pub temporal: f64,
    /// Rotations, translation, expression, identity.
    pub face_reg: [f64; 4],
}

impl Default for BaselineWeights {
    fn default() -> Self {
        Self { data: 1.0, gravity: 1.0, gmm: 0.1, temporal: 1.0, face_reg: [0.0, 0.0, 1.0, 1.0] }
    }
}

impl BaselineWeights {
    pub fn data_only() -> Self {
        Self { data: 1.0, gravity: 0.0, gmm: 0.0, temporal: 0.0, face_reg: [0.0; 4] }
    }
}

/// `L = w_d·data + w_g·gravity + w_p·gmm + w_t·temporal` for bodies and
/// `w_d·data + Σ_k w_k‖Θ_k‖²` for faces.
pub struct BaselineProblem<'a> {
    pub data: &'a DataTerm<'a>,
    pub obs: &'a Observation,
    pub weights: BaselineWeights,
    pub gmm: Option<&'a Gmm>,
    /// World transforms of the previous frame, for the temporal term.
    pub previous: Option<Vec<RigidTransform>>,
}

impl<'a> BaselineProblem<'a> {
    pub fn new(data: &'a DataTerm<'a>, obs: &'a Observation, weights: BaselineWeights) -> Self {
        Self { data, obs, weights, gmm: None, previous: None }
    }

    fn layout(&self) -> &ParamLayout {
        &self.data.layout
    }

    fn is_face(&self) -> bool {
        self.layout().task == Task::Face
    }

    fn priors(&self, theta: &[f64]) -> Result<Vec<(usize, PriorResidual)>> {
        let w = &self.weights;
        let mut out = Vec::new();
        if self.is_face() {
            if w.face_reg.iter().any(|x| *x != 0.0) {
                out.push((4, face_regularizer_residual(self.layout(), theta, w.face_reg)?));
            }
            return Ok(out);
        }
        if w.gravity != 0.0 {
            out.push((1, gravity_residual(self.layout(), theta)?.scaled(w.gravity)));
        }
        if w.gmm != 0.0 {
            if let Some(g) = self.gmm {
                out.push((2, gmm_residual(self.layout(), theta, g)?.scaled(w.gmm)));
            }
        }
        if w.temporal != 0.0 {
            if let Some(prev) = &self.previous {
                let fixed = self.obs.fixed_shape();
                out.push((3, temporal_residual(self.data.model, self.layout(), theta, fixed, prev)?.scaled(w.temporal)));
            }
        }
        Ok(out)
    }

    /// Value and gradient of the weighted energy.
    pub fn baseline_energy(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (d, mut g) = self.data.value_and_gradient(theta, self.obs)?;
        let mut value = self.weights.data * d;
        g.iter_mut().for_each(|x| *x *= self.weights.data);
        for (_, p) in self.priors(theta)? {
            value += p.value();
            for (gi, pi) in g.iter_mut().zip(p.gradient()) {
                *gi += pi;
            }
        }
        Ok((value, g))
    }
}

impl LeastSquares for BaselineProblem<'_> {
    fn num_params(&self) -> usize {
        self.layout().len()
    }

    fn linearize(&self, theta: &[f64], jacobian: bool) -> Result<Linearization> {
        let packet = self.data.evaluate(theta, self.obs, jacobian)?;
        let sw = self.weights.data.sqrt();
        let mut terms = EnergyTerms { data: self.weights.data * packet.data_term(), ..Default::default() };
        let priors = self.priors(theta)?;
        let rows = packet.r.len() + priors.iter().map(|(_, p)| p.r.len()).sum::<usize>();
        let mut r: Vec<f64> = packet.r.iter().zip(&packet.mask).map(|(r, m)| sw * r * m).collect();
        let mut jac = jacobian.then(|| DMatrix::zeros(rows, self.num_params()));
        if let (Some(j), Some(pj)) = (jac.as_mut(), packet.jacobian.as_ref()) {
            j.rows_mut(0, pj.nrows()).copy_from(&(pj * sw));
        }
        let mut row = packet.r.len();
        for (kind, p) in priors {
            let v = p.value();
            match kind {
                1 => terms.gravity += v,
                2 => terms.gmm += v,
                3 => terms.temporal += v,
                _ => terms.face_reg += v,
            }
            if let Some(j) = jac.as_mut() {
                j.rows_mut(row, p.r.len()).copy_from(&p.jacobian);
            }
            row += p.r.len();
            r.extend(p.r);
        }
        Ok(Linearization { r, jacobian: jac, terms })
    }

    fn energy_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.baseline_energy(theta)
    }

    fn retract(&self, theta: &mut [f64]) {
        normalize_rotations(self.layout(), theta);
    }
}

/// Replaces every 6D block by the canonical encoding of its decoded
/// rotation; the model output is unchanged.
pub fn normalize_rotations(layout: &ParamLayout, theta: &mut [f64]) {
    for j in 0..layout.joints {
        let r = layout.rotation(j);
        if let Ok(m) = Rotation6D::from_slice(&theta[r.clone()]).to_matrix() {
            theta[r].copy_from_slice(&Rotation6D::from_matrix(&m).0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub energy: f64,
    pub terms: EnergyTerms,
    /// Damping in effect after this iterate was produced (NaN for GD).
    pub damping: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<Iterate>,
    /// Steps that increased the energy and were undone.
    pub rejected: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Iterate {
        self.iterates.last().expect("trajectory holds the initial iterate")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,energy,data_term,gravity,gmm,temporal,face_reg,damping")?;
        for it in &self.iterates {
            let t = &it.terms;
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                it.iter, it.energy, t.data, t.gravity, t.gmm, t.temporal, t.face_reg, it.damping
            )?;
        }
        Ok(())
    }
}

/// Accept/reject Levenberg-Marquardt. Accepted steps divide the damping by
/// `damping_down`; rejected ones multiply it by `damping_up` and retry.
pub fn lm_fit<P: LeastSquares + ?Sized>(problem: &P, theta0: &[f64], opts: &LmOptions) -> Result<Trajectory> {
    opts.validate()?;
    shape_check(theta0.len() == problem.num_params(), || format!("theta has {} entries, problem {}", theta0.len(), problem.num_params()))?;
    let mut theta = theta0.to_vec();
    problem.retract(&mut theta);
    let mut lin = problem.linearize(&theta, true)?;
    let mut energy = lin.terms.total();
    if !energy.is_finite() {
        return Err(Error::NonFiniteState(format!("initial energy {energy}")));
    }
    let mut damping = opts.initial_damping;
    let mut traj = Trajectory::default();
    traj.iterates.push(Iterate { iter: 0, theta: theta.clone(), energy, terms: lin.terms, damping });
    const MAX_DAMPING: f64 = 1e16;
    'outer: for iter in 1..=opts.max_iters {
        if energy <= opts.min_energy {
            break;
        }
        loop {
            let j = lin.jacobian.as_ref().expect("linearized with jacobian");
            let step = match lm_step(j, &lin.r, damping, opts.min_diag) {
                Ok(s) => Some(s),
                Err(Error::SingularSystem) => None,
                Err(e) => return Err(e),
            };
            if let Some(step) = step {
                let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, d)| t - d).collect();
                problem.retract(&mut cand);
                match problem.linearize(&cand, false) {
                    Ok(l) if l.terms.total().is_finite() && l.terms.total() <= energy => {
                        let e = l.terms.total();
                        let decrease = (energy - e) / energy.abs().max(f64::MIN_POSITIVE);
                        theta = cand;
                        energy = e;
                        damping /= opts.damping_down;
                        lin = problem.linearize(&theta, true)?;
                        traj.iterates.push(Iterate { iter, theta: theta.clone(), energy, terms: lin.terms, damping });
                        if decrease < opts.convergence_tol {
                            break 'outer;
                        }
                        continue 'outer;
                    }
                    // Evaluation failures (a landmark behind the camera, a degenerate
                    // camera) count as rejections.
                    Ok(_) | Err(Error::BehindCamera { .. }) | Err(Error::DegenerateInput(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            traj.rejected += 1;
            damping = if damping > 0.0 { damping * opts.damping_up } else { opts.min_diag };
            if damping > MAX_DAMPING {
                break 'outer;
            }
        }
    }
    Ok(traj)
}

/// `Θ_{k+1} = Θ_k - step·g_k` for `iters` steps.
pub fn gd_fit<P: LeastSquares + ?Sized>(problem: &P, theta0: &[f64], step: f64, iters: usize) -> Result<Trajectory> {
    shape_check(theta0.len() == problem.num_params(), || format!("theta has {} entries, problem {}", theta0.len(), problem.num_params()))?;
    let mut theta = theta0.to_vec();
    let mut traj = Trajectory::default();
    for iter in 0..=iters {
        let (energy, g) = problem.energy_and_gradient(&theta)?;
        if !energy.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState(format!("gradient descent diverged at iteration {iter}")));
        }
        let terms = problem.linearize(&theta, false)?.terms;
        traj.iterates.push(Iterate { iter, theta: theta.clone(), energy, terms, damping: f64::NAN });
        if iter < iters {
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= step * gi;
            }
        }
    }
    Ok(traj)
}

/// Root-mean-square of the masked data residuals.
pub fn rms_residual(data: &DataTerm, theta: &[f64], obs: &Observation) -> Result<f64> {
    let p = data.evaluate(theta, obs, false)?;
    let n = p.mask.iter().filter(|m| **m != 0.0).count().max(1);
    Ok((p.data_term() / n as f64).sqrt())
}
