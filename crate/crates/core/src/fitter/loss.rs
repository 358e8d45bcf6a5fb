use super::TrainLossWeights;
use crate::error::{shape_check, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};
use crate::model::{PoseEval, PoseInput, PoseUpstream};
use crate::residuals::{DataTerm, Observation};

/// Ground-truth quantities compared by the per-step loss.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub vertices: Vec<Vec3>,
    pub edges: Vec<Vec3>,
    pub world: Vec<RigidTransform>,
    pub local: Vec<Mat3>,
    pub translation: Vec3,
    /// Camera entries of Θ (body-2D only).
    pub camera: Vec<f64>,
}

fn camera_entries(data: &DataTerm) -> Vec<usize> {
    let mut idx: Vec<usize> = data.layout.camera_scale().into_iter().collect();
    idx.extend(data.layout.camera_offset().into_iter().flatten());
    idx
}

fn edges(model: &crate::model::KinematicModel, v: &[Vec3]) -> Vec<Vec3> {
    model.edges.iter().map(|[a, b]| v[*b] - v[*a]).collect()
}

pub fn loss_target(data: &DataTerm, gt: &[f64], obs: &Observation) -> Result<LossTarget> {
    let eval = PoseEval::new(data.model, PoseInput::from_theta(&data.layout, gt, obs.fixed_shape())?)?;
    let vertices = eval.vertices();
    Ok(LossTarget {
        edges: edges(data.model, &vertices),
        vertices,
        world: eval.world().to_vec(),
        local: eval.local_rotations().to_vec(),
        translation: eval.input().trans,
        camera: camera_entries(data).into_iter().map(|i| gt[i]).collect(),
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds `w |a - b|` per component; returns the upstream `w sign(a - b)`.
fn l1(a: &[f64], b: &[f64], w: f64, total: &mut f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            *total += w * (x - y).abs();
            w * sign(x - y)
        })
        .collect()
}

fn v3(u: &[f64]) -> Vec3 {
    Vec3::new(u[0], u[1], u[2])
}

/// Loss of one iterate against the target and its gradient in Θ.
///
/// Each term is a plain sum of absolute differences: vertices, edge vectors
/// (per the model's edge list), world joint transforms (12 entries each),
/// local rotation matrices, root translation; body-2D camera entries are
/// counted with the rotation weight.
pub fn step_loss(
    data: &DataTerm,
    theta: &[f64],
    obs: &Observation,
    target: &LossTarget,
    w: &TrainLossWeights,
) -> Result<(f64, Vec<f64>)> {
    shape_check(theta.len() == data.layout.len(), || {
        format!("iterate has {} entries, layout has {}", theta.len(), data.layout.len())
    })?;
    let model = data.model;
    let eval = PoseEval::new(model, PoseInput::from_theta(&data.layout, theta, obs.fixed_shape())?)?;
    let mut total = 0.0;
    let mut up = PoseUpstream::default();

    if w.vertices != 0.0 || w.edges != 0.0 {
        let verts = eval.vertices();
        up.vertices = vec![Vec3::zeros(); verts.len()];
        if w.vertices != 0.0 {
            for (i, (a, b)) in verts.iter().zip(&target.vertices).enumerate() {
                up.vertices[i] += v3(&l1(a.as_slice(), b.as_slice(), w.vertices, &mut total));
            }
        }
        if w.edges != 0.0 {
            for (e, [a, b]) in model.edges.iter().enumerate() {
                let d = verts[*b] - verts[*a];
                let s = v3(&l1(d.as_slice(), target.edges[e].as_slice(), w.edges, &mut total));
                up.vertices[*b] += s;
                up.vertices[*a] -= s;
            }
        }
    }
    if w.transforms != 0.0 {
        up.joint_rot = Vec::with_capacity(model.num_joints());
        up.joint_pos = Vec::with_capacity(model.num_joints());
        for (t, g) in eval.world().iter().zip(&target.world) {
            up.joint_rot.push(Mat3::from_column_slice(&l1(t.rot.as_slice(), g.rot.as_slice(), w.transforms, &mut total)));
            up.joint_pos.push(v3(&l1(t.trans.as_slice(), g.trans.as_slice(), w.transforms, &mut total)));
        }
    }
    if w.rotations != 0.0 {
        up.local_rot = eval
            .local_rotations()
            .iter()
            .zip(&target.local)
            .map(|(r, g)| Mat3::from_column_slice(&l1(r.as_slice(), g.as_slice(), w.rotations, &mut total)))
            .collect();
    }

    let pose_grad = eval.vjp(&up);
    let mut grad = vec![0.0; theta.len()];
    for (pc, tc) in data.layout.pose_to_theta().iter().enumerate() {
        if let Some(tc) = tc {
            grad[*tc] += pose_grad[pc];
        }
    }
    if w.translation != 0.0 {
        let tr = data.layout.root_translation();
        let d = l1(&theta[tr.clone()], target.translation.as_slice(), w.translation, &mut total);
        for (i, v) in tr.zip(d) {
            grad[i] += v;
        }
    }
    if w.rotations != 0.0 {
        let idx = camera_entries(data);
        let cur: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
        for (i, v) in idx.into_iter().zip(l1(&cur, &target.camera, w.rotations, &mut total)) {
            grad[i] += v;
        }
    }
    Ok((total, grad))
}

/// Sum of [`step_loss`] over every iterate `Θ₀..Θ_N`, with per-iterate gradients.
pub fn training_loss(
    data: &DataTerm,
    thetas: &[Vec<f64>],
    gt: &[f64],
    obs: &Observation,
    w: &TrainLossWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let target = loss_target(data, gt, obs)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(thetas.len());
    for t in thetas {
        let (l, g) = step_loss(data, t, obs, &target, w)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}
