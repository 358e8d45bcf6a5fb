//! Shared fixtures for unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Rotation6D, Vec3};
use crate::layout::{ParamLayout, Task};
use crate::model::{synth_model, KinematicModel, SynthConfig};

pub fn body_model() -> KinematicModel {
    synth_model(&SynthConfig { vertices: 300, ..SynthConfig::body() }, 1).unwrap()
}

pub fn face_model() -> KinematicModel {
    synth_model(&SynthConfig { vertices: 200, landmarks: 24, ..SynthConfig::face() }, 3).unwrap()
}

pub fn model_for(task: Task) -> KinematicModel {
    match task {
        Task::Face => face_model(),
        _ => body_model(),
    }
}

pub fn rotation_near_identity(rng: &mut ChaCha8Rng, max_angle: f64) -> [f64; 6] {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Rotation6D::from_matrix(&crate::geometry::axis_angle(&axis, rng.gen_range(0.0..max_angle))).0
}

/// Perturbs `theta`: rotations by up to `angle`, everything else by
/// uniform noise of width `spread`; camera scale stays positive.
pub fn perturb(layout: &ParamLayout, theta: &[f64], rng: &mut ChaCha8Rng, angle: f64, spread: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    for j in 0..layout.joints {
        let r = layout.rotation(j);
        let base = Rotation6D::from_slice(&t[r.clone()]).to_matrix().unwrap();
        let delta = Rotation6D(rotation_near_identity(rng, angle)).to_matrix().unwrap();
        t[r].copy_from_slice(&Rotation6D::from_matrix(&(base * delta)).0);
    }
    if spread > 0.0 {
        for x in &mut t[layout.rotations().end..] {
            *x += rng.gen_range(-spread..spread);
        }
    }
    if let Some(s) = layout.camera_scale() {
        t[s] = theta[s] * (1.0 + rng.gen_range(-0.1..0.1));
        if let Some(o) = layout.camera_offset() {
            for i in o {
                t[i] = theta[i] + rng.gen_range(-10.0..10.0);
            }
        }
    }
    t
}

/// Central differences of a vector function, `|f| x |x|`.
pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(x: &[f64], h: f64, f: F) -> DMatrix<f64> {
    let m = f(x).len();
    let mut out = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        xp[c] = x[c] + h;
        let a = f(&xp);
        xp[c] = x[c] - h;
        let b = f(&xp);
        xp[c] = x[c];
        for i in 0..m {
            out[(i, c)] = (a[i] - b[i]) / (2.0 * h);
        }
    }
    out
}

/// Max per-column relative error. Columns are normalized by their own
/// magnitude, floored at 1e-3 of the whole matrix so near-zero columns do
/// not amplify roundoff.
pub fn max_rel_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), reference.shape());
    let floor = 1e-3 * reference.amax().max(1e-12);
    (0..reference.ncols())
        .map(|c| {
            let scale = reference.column(c).amax().max(floor);
            (analytic.column(c) - reference.column(c)).amax() / scale
        })
        .fold(0.0, f64::max)
}
