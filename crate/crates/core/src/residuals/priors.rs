//! Prior terms of the classic baseline energy: gravity, GMM pose prior,
//! temporal smoothness and the face regularizer. Each term is available as
//! a value with gradient and as a least-squares residual block.

use nalgebra::DMatrix;

use super::gmm::Gmm;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{RigidTransform, Rotation6D, Vec3};
use crate::layout::ParamLayout;
use crate::model::{KinematicModel, PoseEval, PoseInput};

pub const GRAVITY_UP: Vec3 = Vec3::new(0.0, 1.0, 0.0);

/// Least-squares form of a term: value = `Σ r² + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorResidual {
    pub r: Vec<f64>,
    /// `|r| x |Θ|`.
    pub jacobian: DMatrix<f64>,
    pub constant: f64,
}

impl PriorResidual {
    pub fn value(&self) -> f64 {
        self.r.iter().map(|x| x * x).sum::<f64>() + self.constant
    }

    pub fn gradient(&self) -> Vec<f64> {
        (self.jacobian.transpose() * nalgebra::DVector::from_column_slice(&self.r) * 2.0).data.into()
    }

    pub fn scaled(mut self, weight: f64) -> Self {
        let s = weight.sqrt();
        self.r.iter_mut().for_each(|x| *x *= s);
        self.jacobian *= s;
        self.constant *= weight;
        self
    }
}

/// `1 - cos` between row 1 of the root rotation and up, as the residual
/// `(â - up)/√2` with `â` the normalized row.
pub fn gravity_residual(layout: &ParamLayout, theta: &[f64]) -> Result<PriorResidual> {
    layout.check(theta)?;
    let (rot, drot) = Rotation6D::from_slice(&theta[layout.rotation(0)]).to_matrix_with_jacobian()?;
    let a = Vec3::new(rot[(1, 0)], rot[(1, 1)], rot[(1, 2)]);
    let n = a.norm();
    if n < 1e-12 {
        return Err(Error::DegenerateInput(format!("pelvis axis norm {n:e}")));
    }
    let ah = a / n;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let r = ((ah - GRAVITY_UP) * s).iter().copied().collect();
    let proj = (nalgebra::Matrix3::identity() - ah * ah.transpose()) / n;
    let mut jacobian = DMatrix::zeros(3, layout.len());
    for (c, d) in drot.iter().enumerate() {
        let da = Vec3::new(d[(1, 0)], d[(1, 1)], d[(1, 2)]);
        let dr = proj * da * s;
        for i in 0..3 {
            jacobian[(i, c)] = dr[i];
        }
    }
    Ok(PriorResidual { r, jacobian, constant: 0.0 })
}

pub fn gravity_loss(layout: &ParamLayout, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = gravity_residual(layout, theta)?;
    Ok((p.value(), p.gradient()))
}

/// Non-root joint rotations, the vector the pose prior is defined on.
pub fn prior_pose<'a>(layout: &ParamLayout, theta: &'a [f64]) -> &'a [f64] {
    &theta[6..6 * layout.joints]
}

/// `-min_j log(w_j N(θ; μ_j, Σ_j))` and the gradient of the minimizing
/// component.
pub fn gmm_prior(pose: &[f64], gmm: &Gmm) -> Result<(f64, Vec<f64>)> {
    shape_check(pose.len() == gmm.dim(), || format!("pose has {} entries, prior {}", pose.len(), gmm.dim()))?;
    let (value, j) = gmm.nll(pose);
    let w = gmm.whiten(j, pose);
    let winv = gmm.whitening_matrix(j);
    Ok((value, (winv.transpose() * w).data.into()))
}

/// Residual form `L⁻¹(θ - μ)/√2` of the minimizing component.
pub fn gmm_residual(layout: &ParamLayout, theta: &[f64], gmm: &Gmm) -> Result<PriorResidual> {
    layout.check(theta)?;
    let pose = prior_pose(layout, theta);
    shape_check(pose.len() == gmm.dim(), || format!("pose has {} entries, prior {}", pose.len(), gmm.dim()))?;
    let (_, j) = gmm.nll(pose);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let r = (gmm.whiten(j, pose) * s).data.into();
    let winv = gmm.whitening_matrix(j) * s;
    let mut jacobian = DMatrix::zeros(gmm.dim(), layout.len());
    jacobian.columns_mut(6, gmm.dim()).copy_from(&winv);
    Ok(PriorResidual { r, jacobian, constant: gmm.log_norm(j) })
}

/// Residual `flat12(T_j(Θ)) - flat12(T_j^prev)` over all joints: squared
/// Frobenius distance of world transforms to a previous frame.
pub fn temporal_residual(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    fixed_shape: &[f64],
    previous: &[RigidTransform],
) -> Result<PriorResidual> {
    let nj = model.num_joints();
    shape_check(previous.len() == nj, || format!("{} previous transforms for {nj} joints", previous.len()))?;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, fixed_shape)?)?;
    let map = layout.pose_to_theta();
    let mut r = Vec::with_capacity(12 * nj);
    let mut jacobian = DMatrix::zeros(12 * nj, layout.len());
    for j in 0..nj {
        let (a, b) = (eval.world()[j].flatten12(), previous[j].flatten12());
        r.extend(a.iter().zip(&b).map(|(x, y)| x - y));
        let tj = eval.transform_jacobian(j);
        for (pc, tc) in map.iter().enumerate() {
            if let Some(tc) = tc {
                for i in 0..12 {
                    jacobian[(12 * j + i, *tc)] = tj[(i, pc)];
                }
            }
        }
    }
    Ok(PriorResidual { r, jacobian, constant: 0.0 })
}

/// `Σ_t Σ_j d(T_{t+1,j}, T_{t,j})` with `d` the Frobenius distance of the
/// `[R | t]` blocks, and its gradient for every frame. The gradient of a
/// zero-distance pair is taken as zero.
pub fn temporal_loss(
    model: &KinematicModel,
    layout: &ParamLayout,
    frames: &[Vec<f64>],
    fixed_shape: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let nj = model.num_joints();
    let evals = frames
        .iter()
        .map(|t| PoseEval::new(model, PoseInput::from_theta(layout, t, fixed_shape)?))
        .collect::<Result<Vec<_>>>()?;
    let map = layout.pose_to_theta();
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; layout.len()]; frames.len()];
    for t in 1..frames.len() {
        for j in 0..nj {
            let a = evals[t].world()[j].flatten12();
            let b = evals[t - 1].world()[j].flatten12();
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            value += d;
            if d == 0.0 {
                continue;
            }
            for (frame, sign) in [(t, 1.0), (t - 1, -1.0)] {
                let tj = evals[frame].transform_jacobian(j);
                for (pc, tc) in map.iter().enumerate() {
                    if let Some(tc) = tc {
                        let dot: f64 = (0..12).map(|i| diff[i] * tj[(i, pc)]).sum();
                        grads[frame][*tc] += sign * dot / d;
                    }
                }
            }
        }
    }
    Ok((value, grads))
}

/// Per-group squared-norm regularizer for the face layout; weights are
/// `[rotations, translation, expression, identity]`.
pub fn face_regularizer_residual(layout: &ParamLayout, theta: &[f64], weights: [f64; 4]) -> Result<PriorResidual> {
    layout.check(theta)?;
    let groups = [
        Some(layout.rotations()),
        Some(layout.root_translation()),
        layout.expr_range(),
        layout.shape_range(),
    ];
    let mut r = Vec::new();
    let mut rows = Vec::new();
    for (g, w) in groups.into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if let Some(range) = g {
            for i in range {
                r.push(w.sqrt() * theta[i]);
                rows.push((i, w.sqrt()));
            }
        }
    }
    let mut jacobian = DMatrix::zeros(r.len(), layout.len());
    for (k, (i, s)) in rows.into_iter().enumerate() {
        jacobian[(k, i)] = s;
    }
    Ok(PriorResidual { r, jacobian, constant: 0.0 })
}

pub fn face_regularizer(layout: &ParamLayout, theta: &[f64], weights: [f64; 4]) -> Result<(f64, Vec<f64>)> {
    let p = face_regularizer_residual(layout, theta, weights)?;
    Ok((p.value(), p.gradient()))
}
