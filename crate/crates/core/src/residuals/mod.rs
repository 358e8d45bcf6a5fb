//! Task data terms with fixed-layout masked residuals, analytic Jacobians,
//! and the prior terms of the classic baseline.
//!
//! Residuals are `target - model`, the Jacobian is `∂r/∂Θ`, and the data term
//! is `Σ mask·r²` with gradient `g = 2 Jᵀ(mask ⊙ r)`. Masked entries hold
//! `r = 0` and zero Jacobian rows.

mod gmm;
mod priors;

use std::ops::Range;

use nalgebra::{DMatrix, Matrix3xX};
use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm_em, Gmm, GmmFit};
pub use priors::{
    face_regularizer, face_regularizer_residual, gmm_prior, gmm_residual, gravity_loss, gravity_residual, prior_pose,
    temporal_loss, temporal_residual, PriorResidual, GRAVITY_UP,
};

use crate::error::{shape_check, Error, Result};
use crate::geometry::{PinholeIntrinsics, RigidTransform, Vec2, Vec3, WeakPerspective};
use crate::layout::{ParamLayout, Task};
use crate::model::{KinematicModel, PoseEval, PoseInput, PoseUpstream, LEFT, RIGHT};

pub const FINGERTIPS: usize = 5;
const TRANSFORM_LEN: usize = 12;
const HAND_LEN: usize = TRANSFORM_LEN + 3 * FINGERTIPS;
pub const HMD_RESIDUALS: usize = TRANSFORM_LEN + 2 * HAND_LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct Body2dObs {
    /// Pixels, one per joint.
    pub keypoints: Vec<Vec2>,
    /// In `[0, 1]`; zero marks a missing detection.
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmdObs {
    pub headset: RigidTransform,
    /// Wrist transforms, left then right.
    pub wrists: [RigidTransform; 2],
    /// Five fingertip positions per hand, meters.
    pub fingertips: [Vec<Vec3>; 2],
    pub visible: [bool; 2],
    /// Known body shape of the wearer.
    pub shape: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceObs {
    /// Pixels, one per model landmark.
    pub landmarks: Vec<Vec2>,
    pub intrinsics: PinholeIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Body2d(Body2dObs),
    Hmd(HmdObs),
    Face(FaceObs),
}

impl Observation {
    pub fn task(&self) -> Task {
        match self {
            Observation::Body2d(_) => Task::Body2d,
            Observation::Hmd(_) => Task::Hmd,
            Observation::Face(_) => Task::Face,
        }
    }

    /// Shape that is observed rather than fitted (empty when fitted).
    pub fn fixed_shape(&self) -> &[f64] {
        match self {
            Observation::Hmd(h) => &h.shape,
            _ => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(xs: impl IntoIterator<Item = f64>) -> bool {
            xs.into_iter().all(f64::is_finite)
        }
        let ok = match self {
            Observation::Body2d(b) => {
                finite(b.keypoints.iter().flat_map(|p| [p.x, p.y]))
                    && b.confidence.iter().all(|c| (0.0..=1.0).contains(c))
                    && b.keypoints.len() == b.confidence.len()
            }
            Observation::Hmd(h) => {
                finite(h.headset.flatten12())
                    && h.wrists.iter().all(|w| w.flatten12().iter().all(|x| x.is_finite()))
                    && h.fingertips.iter().all(|f| f.len() == FINGERTIPS && f.iter().all(|p| p.iter().all(|x| x.is_finite())))
                    && finite(h.shape.iter().copied())
            }
            Observation::Face(f) => finite(f.landmarks.iter().flat_map(|p| [p.x, p.y])),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("invalid {} observation", self.task())))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualOptions {
    /// Scales translation entries of transform residuals.
    pub translation_weight: f64,
    /// Huber threshold; `None` keeps the plain squared norm.
    pub huber: Option<f64>,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self { translation_weight: 1.0, huber: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPacket {
    pub r: Vec<f64>,
    pub mask: Vec<f64>,
    /// `|r| x |Θ|`, present when requested.
    pub jacobian: Option<DMatrix<f64>>,
    /// `2 Jᵀ(mask ⊙ r)`, present with the Jacobian.
    pub grad: Option<Vec<f64>>,
}

impl ResidualPacket {
    pub fn data_term(&self) -> f64 {
        self.r.iter().zip(&self.mask).map(|(r, m)| m * r * r).sum()
    }

    fn finish(mut self, opts: &ResidualOptions) -> Self {
        for (r, m) in self.r.iter_mut().zip(&self.mask) {
            if *m == 0.0 {
                *r = 0.0;
            }
        }
        if let Some(delta) = opts.huber {
            for i in 0..self.r.len() {
                let (r, d) = huber_residual(self.r[i], delta);
                self.r[i] = r;
                if let Some(j) = self.jacobian.as_mut() {
                    j.row_mut(i).scale_mut(d);
                }
            }
        }
        if let Some(j) = &self.jacobian {
            for (i, m) in self.mask.iter().enumerate() {
                debug_assert!(*m != 0.0 || j.row(i).iter().all(|x| *x == 0.0));
            }
            let mr: Vec<f64> = self.r.iter().zip(&self.mask).map(|(r, m)| 2.0 * r * m).collect();
            self.grad = Some((j.transpose() * nalgebra::DVector::from_vec(mr)).data.into());
        }
        self
    }
}

/// Residual whose square is the Huber loss of `r`, and its derivative.
fn huber_residual(r: f64, delta: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= delta {
        (r, 1.0)
    } else {
        let s = (2.0 * delta * a - delta * delta).sqrt();
        (r.signum() * s, delta / s)
    }
}

/// Everything needed to evaluate a task's data term for one model.
#[derive(Clone, Debug)]
pub struct DataTerm<'m> {
    pub model: &'m KinematicModel,
    pub layout: ParamLayout,
    /// Headset pose relative to the head joint (HMD only).
    pub calib: RigidTransform,
    pub options: ResidualOptions,
}

/// Default headset calibration: 10 cm in front of the head joint (the model
/// faces -z), no rotation.
pub fn default_calibration() -> RigidTransform {
    RigidTransform::from_translation(Vec3::new(0.0, 0.0, -0.10))
}

impl<'m> DataTerm<'m> {
    pub fn new(model: &'m KinematicModel, task: Task) -> Result<Self> {
        Ok(Self {
            model,
            layout: ParamLayout::for_model(task, model)?,
            calib: default_calibration(),
            options: ResidualOptions::default(),
        })
    }

    pub fn num_residuals(&self) -> usize {
        match self.layout.task {
            Task::Body2d => 2 * self.model.num_joints(),
            Task::Hmd => HMD_RESIDUALS,
            Task::Face => 2 * self.model.landmark_indices.len(),
        }
    }

    pub fn evaluate(&self, theta: &[f64], obs: &Observation, jacobian: bool) -> Result<ResidualPacket> {
        shape_check(obs.task() == self.layout.task, || {
            format!("{} observation for a {} layout", obs.task(), self.layout.task)
        })?;
        let packet = match obs {
            Observation::Body2d(o) => body2d_raw(self.model, &self.layout, theta, o, jacobian)?,
            Observation::Hmd(o) => {
                hmd_raw(self.model, &self.layout, theta, o, &self.calib, self.options.translation_weight, jacobian)?
            }
            Observation::Face(o) => face_raw(self.model, &self.layout, theta, o, jacobian)?,
        };
        Ok(packet.finish(&self.options))
    }

    /// Named residual blocks with index ranges.
    pub fn describe(&self) -> Vec<(String, Range<usize>)> {
        describe_residuals(self.layout.task, self.model)
    }
}

impl DataTerm<'_> {
    /// Data term and its gradient by reverse mode, without materializing
    /// the Jacobian. Agrees with `evaluate(.., true).grad`.
    pub fn value_and_gradient(&self, theta: &[f64], obs: &Observation) -> Result<(f64, Vec<f64>)> {
        let (packet, grad) = self.residuals_and_gradient(theta, obs)?;
        Ok((packet.data_term(), grad))
    }

    /// Residual packet (without Jacobian) plus the reverse-mode gradient.
    pub fn residuals_and_gradient(&self, theta: &[f64], obs: &Observation) -> Result<(ResidualPacket, Vec<f64>)> {
        shape_check(obs.task() == self.layout.task, || {
            format!("{} observation for a {} layout", obs.task(), self.layout.task)
        })?;
        let raw = match obs {
            Observation::Body2d(o) => body2d_raw(self.model, &self.layout, theta, o, false)?,
            Observation::Hmd(o) => {
                hmd_raw(self.model, &self.layout, theta, o, &self.calib, self.options.translation_weight, false)?
            }
            Observation::Face(o) => face_raw(self.model, &self.layout, theta, o, false)?,
        };
        let packet = raw.clone().finish(&self.options);
        // dE/dr_raw = 2 mask · r̃ · dr̃/dr.
        let coef: Vec<f64> = (0..raw.r.len())
            .map(|i| {
                let d = self.options.huber.map_or(1.0, |h| huber_residual(raw.r[i], h).1);
                2.0 * packet.mask[i] * packet.r[i] * d
            })
            .collect();
        let eval = PoseEval::new(self.model, PoseInput::from_theta(&self.layout, theta, obs.fixed_shape())?)?;
        let mut up = PoseUpstream::default();
        let mut grad = vec![0.0; self.layout.len()];
        match obs {
            Observation::Body2d(o) => {
                let cam = camera(&self.layout, theta)?;
                let s_idx = self.layout.camera_scale().expect("camera");
                let o_idx = self.layout.camera_offset().expect("camera").start;
                up.joint_pos = vec![Vec3::zeros(); self.model.num_joints()];
                for (j, t) in eval.world().iter().enumerate() {
                    let c = o.confidence[j].max(0.0);
                    for a in 0..2 {
                        let k = coef[2 * j + a];
                        up.joint_pos[j][a] = -k * c * cam.scale;
                        grad[s_idx] -= k * c * t.trans[a];
                        grad[o_idx + a] -= k * c;
                    }
                }
            }
            Observation::Hmd(o) => {
                let nj = self.model.num_joints();
                let tw = self.options.translation_weight;
                up.joint_pos = vec![Vec3::zeros(); nj];
                up.joint_rot = vec![nalgebra::Matrix3::zeros(); nj];
                up.vertices = vec![Vec3::zeros(); self.model.num_vertices()];
                let mut block = |row: usize, joint: usize, calib: Option<&RigidTransform>| {
                    // Upstream on the estimate's R and t, pulled back through the offset.
                    let ge = nalgebra::Matrix3::from_fn(|a, b| -coef[row + 3 * a + b]);
                    let gt = Vec3::new(-tw * coef[row + 9], -tw * coef[row + 10], -tw * coef[row + 11]);
                    let (rc, tc) = calib.map_or((nalgebra::Matrix3::identity(), Vec3::zeros()), |c| (c.rot, c.trans));
                    up.joint_rot[joint] += ge * rc.transpose() + gt * tc.transpose();
                    up.joint_pos[joint] += gt;
                };
                let head = self.model.head_joint.expect("checked by evaluate");
                let wrists = self.model.wrist_joints.expect("checked by evaluate");
                block(0, head, Some(&self.calib));
                for side in [LEFT, RIGHT] {
                    if !o.visible[side] {
                        continue;
                    }
                    block(TRANSFORM_LEN + side * HAND_LEN, wrists[side], None);
                    for (f, &v) in self.model.fingertips[side].iter().enumerate() {
                        let row = TRANSFORM_LEN + side * HAND_LEN + TRANSFORM_LEN + 3 * f;
                        up.vertices[v] -= Vec3::new(coef[row], coef[row + 1], coef[row + 2]);
                    }
                }
            }
            Observation::Face(o) => {
                up.vertices = vec![Vec3::zeros(); self.model.num_vertices()];
                for (i, &v) in self.model.landmark_indices.iter().enumerate() {
                    let [dx, dy] = o.intrinsics.project_jacobian(&eval.vertex(v));
                    up.vertices[v] -= dx * coef[2 * i] + dy * coef[2 * i + 1];
                }
            }
        }
        let pose_grad = eval.vjp(&up);
        for (pc, tc) in self.layout.pose_to_theta().iter().enumerate() {
            if let Some(tc) = tc {
                grad[*tc] += pose_grad[pc];
            }
        }
        Ok((packet, grad))
    }
}

pub fn describe_residuals(task: Task, model: &KinematicModel) -> Vec<(String, Range<usize>)> {
    match task {
        Task::Body2d => (0..model.num_joints()).map(|j| (format!("keypoint[{j}].xy"), 2 * j..2 * j + 2)).collect(),
        Task::Face => {
            (0..model.landmark_indices.len()).map(|p| (format!("landmark[{p}].xy"), 2 * p..2 * p + 2)).collect()
        }
        Task::Hmd => {
            let mut out = vec![("headset.R".to_owned(), 0..9), ("headset.t".to_owned(), 9..12)];
            for (side, name) in [(LEFT, "left"), (RIGHT, "right")] {
                let base = TRANSFORM_LEN + side * HAND_LEN;
                out.push((format!("{name}_wrist.R"), base..base + 9));
                out.push((format!("{name}_wrist.t"), base + 9..base + 12));
                for f in 0..FINGERTIPS {
                    let s = base + TRANSFORM_LEN + 3 * f;
                    out.push((format!("{name}_fingertip[{f}]"), s..s + 3));
                }
            }
            out
        }
    }
}

/// Adds `factor · rows(pose-space jacobian)` into the residual Jacobian
/// starting at `row`, mapping pose columns onto Θ.
fn scatter(jac: &mut DMatrix<f64>, row: usize, pose_jac: &Matrix3xX<f64>, map: &[Option<usize>], factor: &[Vec3]) {
    for (pc, target) in map.iter().enumerate() {
        if let Some(tc) = target {
            let col = pose_jac.column(pc);
            for (i, f) in factor.iter().enumerate() {
                jac[(row + i, *tc)] += f.dot(&col);
            }
        }
    }
}

fn camera(layout: &ParamLayout, theta: &[f64]) -> Result<WeakPerspective> {
    let s = layout.camera_scale().expect("body2d layout has a camera");
    let o = layout.camera_offset().expect("body2d layout has a camera");
    WeakPerspective::new(theta[s], Vec2::new(theta[o.start], theta[o.start + 1]))
        .map_err(|_| Error::DegenerateInput(format!("camera scale {} is not positive", theta[s])))
}

/// `r = c ⊙ (ĵ - (s·xy(J(Θ)) + t))`, flattened x, y per joint.
fn body2d_raw(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &Body2dObs,
    jacobian: bool,
) -> Result<ResidualPacket> {
    let nj = model.num_joints();
    shape_check(obs.keypoints.len() == nj && obs.confidence.len() == nj, || {
        format!("{} keypoints for {} joints", obs.keypoints.len(), nj)
    })?;
    let cam = camera(layout, theta)?;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, &[])?)?;
    let mut r = vec![0.0; 2 * nj];
    let mut mask = vec![0.0; 2 * nj];
    let mut jac = jacobian.then(|| DMatrix::zeros(2 * nj, layout.len()));
    let map = layout.pose_to_theta();
    let s_idx = layout.camera_scale().expect("camera");
    let o_idx = layout.camera_offset().expect("camera").start;
    for j in 0..nj {
        let c = obs.confidence[j];
        if c <= 0.0 {
            continue;
        }
        let p = eval.world()[j].trans;
        let proj = cam.project_point(&p);
        for a in 0..2 {
            r[2 * j + a] = c * (obs.keypoints[j][a] - proj[a]);
            mask[2 * j + a] = 1.0;
        }
        if let Some(jm) = jac.as_mut() {
            let pj = eval.joint_jacobian(j);
            let f = -c * cam.scale;
            scatter(jm, 2 * j, &pj, &map, &[Vec3::new(f, 0.0, 0.0), Vec3::new(0.0, f, 0.0)]);
            for a in 0..2 {
                jm[(2 * j + a, s_idx)] = -c * p[a];
                jm[(2 * j + a, o_idx + a)] = -c;
            }
        }
    }
    Ok(ResidualPacket { r, mask, jacobian: jac, grad: None })
}

pub fn body2d_residuals(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &Body2dObs,
    jacobian: bool,
) -> Result<ResidualPacket> {
    Ok(body2d_raw(model, layout, theta, obs, jacobian)?.finish(&ResidualOptions::default()))
}

/// Point visible iff its z in the headset frame is negative.
pub fn half_space_visibility(headset: &RigidTransform, points: &[Vec3]) -> Vec<bool> {
    let inv = headset.inverse();
    points.iter().map(|p| inv.apply(p).z < 0.0).collect()
}

/// Headset, then per hand: wrist transform and fingertips. Translation rows
/// of transform blocks are scaled by `tw`.
fn hmd_raw(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &HmdObs,
    calib: &RigidTransform,
    tw: f64,
    jacobian: bool,
) -> Result<ResidualPacket> {
    let head = model.head_joint.ok_or_else(|| Error::BadConfig("model has no head joint".into()))?;
    let wrists = model.wrist_joints.ok_or_else(|| Error::BadConfig("model has no wrist joints".into()))?;
    shape_check(obs.fingertips.iter().all(|f| f.len() == FINGERTIPS), || "five fingertips per hand".into())?;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, &obs.shape)?)?;
    let mut r = vec![0.0; HMD_RESIDUALS];
    let mut mask = vec![0.0; HMD_RESIDUALS];
    let mut jac = jacobian.then(|| DMatrix::zeros(HMD_RESIDUALS, layout.len()));
    let map = layout.pose_to_theta();

    let mut transform_block = |row: usize, target: &RigidTransform, joint: usize, offset: Option<&RigidTransform>| {
        let world = &eval.world()[joint];
        let est = match offset {
            Some(c) => world.compose(c),
            None => *world,
        };
        let (t, e) = (target.flatten12(), est.flatten12());
        for i in 0..TRANSFORM_LEN {
            let w = if i >= 9 { tw } else { 1.0 };
            r[row + i] = w * (t[i] - e[i]);
            mask[row + i] = 1.0;
        }
        if let Some(jm) = jac.as_mut() {
            let tj = eval.transform_jacobian(joint);
            let (rc, tc) = offset.map_or((nalgebra::Matrix3::identity(), Vec3::zeros()), |c| (c.rot, c.trans));
            for (pc, target_col) in map.iter().enumerate() {
                let Some(col) = target_col else { continue };
                let d = tj.column(pc);
                let dr = nalgebra::Matrix3::from_row_slice(&d.as_slice()[..9]);
                let dp = Vec3::new(d[9], d[10], d[11]);
                let dr_est = dr * rc;
                let dt_est = dr * tc + dp;
                for a in 0..3 {
                    for b in 0..3 {
                        jm[(row + 3 * a + b, *col)] = -dr_est[(a, b)];
                    }
                    jm[(row + 9 + a, *col)] = -tw * dt_est[a];
                }
            }
        }
    };
    transform_block(0, &obs.headset, head, Some(calib));
    for side in [LEFT, RIGHT] {
        if obs.visible[side] {
            transform_block(TRANSFORM_LEN + side * HAND_LEN, &obs.wrists[side], wrists[side], None);
        }
    }
    for side in [LEFT, RIGHT] {
        if !obs.visible[side] {
            continue;
        }
        let tips = &model.fingertips[side];
        shape_check(tips.len() == FINGERTIPS, || "model needs five fingertips per hand".into())?;
        for (f, &v) in tips.iter().enumerate() {
            let row = TRANSFORM_LEN + side * HAND_LEN + TRANSFORM_LEN + 3 * f;
            let p = eval.vertex(v);
            for a in 0..3 {
                r[row + a] = obs.fingertips[side][f][a] - p[a];
                mask[row + a] = 1.0;
            }
            if let Some(jm) = jac.as_mut() {
                scatter(jm, row, &eval.vertex_jacobian(v), &map, &[-Vec3::x(), -Vec3::y(), -Vec3::z()]);
            }
        }
    }
    Ok(ResidualPacket { r, mask, jacobian: jac, grad: None })
}

pub fn hmd_residuals(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &HmdObs,
    calib: &RigidTransform,
    jacobian: bool,
) -> Result<ResidualPacket> {
    Ok(hmd_raw(model, layout, theta, obs, calib, 1.0, jacobian)?.finish(&ResidualOptions::default()))
}

pub fn face_residuals(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &FaceObs,
    jacobian: bool,
) -> Result<ResidualPacket> {
    Ok(face_raw(model, layout, theta, obs, jacobian)?.finish(&ResidualOptions::default()))
}

/// `r = p̂ - Π_K(P(Θ))`, flattened x, y per landmark.
fn face_raw(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    obs: &FaceObs,
    jacobian: bool,
) -> Result<ResidualPacket> {
    let np = model.landmark_indices.len();
    shape_check(obs.landmarks.len() == np, || format!("{} landmarks for a model with {np}", obs.landmarks.len()))?;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, &[])?)?;
    let k = &obs.intrinsics;
    let mut r = vec![0.0; 2 * np];
    let mut jac = jacobian.then(|| DMatrix::zeros(2 * np, layout.len()));
    let map = layout.pose_to_theta();
    for (i, &v) in model.landmark_indices.iter().enumerate() {
        let p = eval.vertex(v);
        let proj = k.project_point(&p).ok_or(Error::BehindCamera { index: i, z: p.z })?;
        r[2 * i] = obs.landmarks[i].x - proj.x;
        r[2 * i + 1] = obs.landmarks[i].y - proj.y;
        if let Some(jm) = jac.as_mut() {
            let [dx, dy] = k.project_jacobian(&p);
            scatter(jm, 2 * i, &eval.vertex_jacobian(v), &map, &[-dx, -dy]);
        }
    }
    Ok(ResidualPacket { r, mask: vec![1.0; 2 * np], jacobian: jac, grad: None })
}

#[cfg(test)]
mod tests;
