//! Task-specific flat parameter layouts.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KinematicModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Body2d,
    Hmd,
    Face,
}

impl Task {
    pub fn code(self) -> f64 {
        match self {
            Task::Body2d => 0.0,
            Task::Hmd => 1.0,
            Task::Face => 2.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Task::Body2d),
            1 => Ok(Task::Hmd),
            2 => Ok(Task::Face),
            _ => Err(Error::Format(format!("unknown task code {c}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Body2d => "body2d",
            Task::Hmd => "hmd",
            Task::Face => "face",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body2d" => Ok(Task::Body2d),
            "hmd" => Ok(Task::Hmd),
            "face" => Ok(Task::Face),
            _ => Err(Error::BadConfig(format!("unknown task `{s}` (body2d | hmd | face)"))),
        }
    }
}

/// Flat parameter layout.
///
/// * body2d: `[6D rotations (6J) | root translation (3) | shape | camera scale | camera offset (2)]`
/// * hmd:    `[6D rotations (6J) | root translation (3)]`, shape is observed
/// * face:   `[6D rotations (6J) | translation (3) | expression | identity]`
///
/// The model evaluator works in a task-independent *pose space*
/// `[rotations | translation | shape | expression]`; [`ParamLayout::pose_to_theta`]
/// maps pose-space columns onto the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub task: Task,
    pub joints: usize,
    pub shape: usize,
    pub expr: usize,
}

impl ParamLayout {
    pub fn new(task: Task, joints: usize, shape: usize, expr: usize) -> Self {
        Self { task, joints, shape, expr }
    }

    pub fn for_model(task: Task, model: &KinematicModel) -> Result<Self> {
        model.check_task(task)?;
        let expr = if task == Task::Face { model.num_expr() } else { 0 };
        Ok(Self::new(task, model.num_joints(), model.num_shape(), expr))
    }

    pub fn len(&self) -> usize {
        let base = 6 * self.joints + 3;
        match self.task {
            Task::Body2d => base + self.shape + 3,
            Task::Hmd => base,
            Task::Face => base + self.expr + self.shape,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rotations(&self) -> Range<usize> {
        0..6 * self.joints
    }

    pub fn rotation(&self, j: usize) -> Range<usize> {
        6 * j..6 * j + 6
    }

    pub fn root_translation(&self) -> Range<usize> {
        6 * self.joints..6 * self.joints + 3
    }

    pub fn shape_range(&self) -> Option<Range<usize>> {
        let base = 6 * self.joints + 3;
        match self.task {
            Task::Body2d => Some(base..base + self.shape),
            Task::Hmd => None,
            Task::Face => Some(base + self.expr..base + self.expr + self.shape),
        }
    }

    pub fn expr_range(&self) -> Option<Range<usize>> {
        let base = 6 * self.joints + 3;
        (self.task == Task::Face).then(|| base..base + self.expr)
    }

    pub fn camera_scale(&self) -> Option<usize> {
        (self.task == Task::Body2d).then(|| 6 * self.joints + 3 + self.shape)
    }

    pub fn camera_offset(&self) -> Option<Range<usize>> {
        self.camera_scale().map(|s| s + 1..s + 3)
    }

    /// Dimension of the model evaluator's pose space.
    pub fn pose_dim(&self) -> usize {
        6 * self.joints + 3 + self.shape + self.expr
    }

    pub fn pose_to_theta(&self) -> Vec<Option<usize>> {
        let mut map: Vec<Option<usize>> = (0..6 * self.joints + 3).map(Some).collect();
        let shape = self.shape_range();
        map.extend((0..self.shape).map(|b| shape.as_ref().map(|r| r.start + b)));
        let expr = self.expr_range();
        map.extend((0..self.expr).map(|e| expr.as_ref().map(|r| r.start + e)));
        map
    }

    /// Named blocks with their index ranges, in order.
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> =
            (0..self.joints).map(|j| (format!("rot6d[{j}]"), self.rotation(j))).collect();
        out.push(("root_translation".into(), self.root_translation()));
        match self.task {
            Task::Body2d => {
                out.push(("shape".into(), self.shape_range().expect("body2d shape")));
                let s = self.camera_scale().expect("body2d camera");
                out.push(("camera_scale".into(), s..s + 1));
                out.push(("camera_offset".into(), self.camera_offset().expect("body2d camera")));
            }
            Task::Hmd => {}
            Task::Face => {
                out.push(("expression".into(), self.expr_range().expect("face expression")));
                out.push(("identity".into(), self.shape_range().expect("face identity")));
            }
        }
        out.retain(|(_, r)| !r.is_empty());
        out
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter vector has {} entries, layout expects {}",
                self.task,
                theta.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Rest parameters: identity rotations, zero translation, shape and
    /// expression, unit camera at the origin.
    pub fn rest_params(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        for j in 0..self.joints {
            p[6 * j] = 1.0;
            p[6 * j + 4] = 1.0;
        }
        if let Some(s) = self.camera_scale() {
            p[s] = 1.0;
        }
        p
    }
}
