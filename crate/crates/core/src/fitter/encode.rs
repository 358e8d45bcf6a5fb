use std::ops::Range;

use crate::error::{shape_check, Result};
use crate::layout::Task;
use crate::model::KinematicModel;
use crate::residuals::{Observation, FINGERTIPS};

/// Body-2D keypoints are normalized as `(p - IMAGE_CENTER) / IMAGE_HALF_SIZE`.
pub const IMAGE_CENTER: f64 = 256.0;
pub const IMAGE_HALF_SIZE: f64 = 256.0;

/// Index map of [`encode_observations`]:
///
/// * body2d: `keypoint[j].xy` (normalized pixels) for every joint, then `confidence`
/// * hmd: `headset`, `wrist.left`, `wrist.right` as 12-vectors `[R row-major | t]`,
///   `fingertips.left`, `fingertips.right` (5 x 3), `visible` (2), `shape`;
///   an invisible hand's wrist and fingertip blocks are zero
/// * face: `landmark[i].xy` as `((u - cx)/fx, (v - cy)/fy)`
pub fn describe_encoding(task: Task, model: &KinematicModel) -> Vec<(String, Range<usize>)> {
    let mut out = vec![];
    let mut at = 0;
    let mut push = |name: String, n: usize| {
        out.push((name, at..at + n));
        at += n;
    };
    match task {
        Task::Body2d => {
            for j in 0..model.num_joints() {
                push(format!("keypoint[{j}].xy"), 2);
            }
            push("confidence".into(), model.num_joints());
        }
        Task::Hmd => {
            push("headset".into(), 12);
            push("wrist.left".into(), 12);
            push("wrist.right".into(), 12);
            push("fingertips.left".into(), 3 * FINGERTIPS);
            push("fingertips.right".into(), 3 * FINGERTIPS);
            push("visible".into(), 2);
            push("shape".into(), model.num_shape());
        }
        Task::Face => {
            for i in 0..model.landmark_indices.len() {
                push(format!("landmark[{i}].xy"), 2);
            }
        }
    }
    out
}

pub fn encoding_dim(task: Task, model: &KinematicModel) -> usize {
    describe_encoding(task, model).last().map_or(0, |(_, r)| r.end)
}

/// Fixed-length network input for one observation set.
pub fn encode_observations(model: &KinematicModel, obs: &Observation) -> Result<Vec<f64>> {
    let dim = encoding_dim(obs.task(), model);
    let mut e = Vec::with_capacity(dim);
    match obs {
        Observation::Body2d(o) => {
            shape_check(o.keypoints.len() == model.num_joints() && o.confidence.len() == model.num_joints(), || {
                format!("{} keypoints for {} joints", o.keypoints.len(), model.num_joints())
            })?;
            for p in &o.keypoints {
                e.push((p.x - IMAGE_CENTER) / IMAGE_HALF_SIZE);
                e.push((p.y - IMAGE_CENTER) / IMAGE_HALF_SIZE);
            }
            e.extend_from_slice(&o.confidence);
        }
        Observation::Hmd(o) => {
            shape_check(o.shape.len() == model.num_shape(), || {
                format!("{} shape coefficients, model has {}", o.shape.len(), model.num_shape())
            })?;
            e.extend_from_slice(&o.headset.flatten12());
            for side in 0..2 {
                if o.visible[side] {
                    e.extend_from_slice(&o.wrists[side].flatten12());
                } else {
                    e.extend_from_slice(&[0.0; 12]);
                }
            }
            for side in 0..2 {
                shape_check(o.fingertips[side].len() == FINGERTIPS, || "fingertip count".into())?;
                for p in &o.fingertips[side] {
                    if o.visible[side] {
                        e.extend_from_slice(&[p.x, p.y, p.z]);
                    } else {
                        e.extend_from_slice(&[0.0; 3]);
                    }
                }
            }
            e.extend(o.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }));
            e.extend_from_slice(&o.shape);
        }
        Observation::Face(o) => {
            shape_check(o.landmarks.len() == model.landmark_indices.len(), || {
                format!("{} landmarks, model has {}", o.landmarks.len(), model.landmark_indices.len())
            })?;
            let k = &o.intrinsics;
            for p in &o.landmarks {
                e.push((p.x - k.cx) / k.fx);
                e.push((p.y - k.cy) / k.fy);
            }
        }
    }
    debug_assert_eq!(e.len(), dim);
    Ok(e)
}
