//! Skinned parametric model: shape-dependent rest joints, kinematic chain,
//! linear blend skinning, blendshapes and landmark selection.

mod pose;
mod synth;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use pose::{PoseEval, PoseInput, PoseUpstream};
pub use synth::{synth_model, SynthConfig, TreeShape};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::layout::{ParamLayout, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Body,
    Face,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    pub kind: ModelKind,
    /// V rest vertices, meters.
    pub template: Vec<Vec3>,
    /// `None` marks the root; otherwise `parents[j] < j`.
    pub parents: Vec<Option<usize>>,
    pub joint_mean: Vec<Vec3>,
    /// 3J x |shape|, rows `3j..3j+3` belong to joint `j`.
    pub joint_shape_basis: DMatrix<f64>,
    /// V x J, rows non-negative and summing to one.
    pub skinning: DMatrix<f64>,
    /// 3V x |shape|.
    pub shape_basis: DMatrix<f64>,
    /// 3V x |expression|, empty for bodies.
    pub expression_basis: DMatrix<f64>,
    pub landmark_indices: Vec<usize>,
    pub fingertips: [Vec<usize>; 2],
    pub head_joint: Option<usize>,
    pub wrist_joints: Option<[usize; 2]>,
    pub edges: Vec<[usize; 2]>,
    /// Named disjoint vertex subsets (head, left_hand, right_hand).
    pub parts: Vec<(String, Vec<usize>)>,
    derived: Derived,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Derived {
    /// Ancestors of each joint from the root down, including the joint.
    ancestors: Vec<Vec<usize>>,
    /// Non-zero skinning entries per vertex.
    sparse_skin: Vec<Vec<(usize, f64)>>,
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

impl KinematicModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ModelKind,
        template: Vec<Vec3>,
        parents: Vec<Option<usize>>,
        joint_mean: Vec<Vec3>,
        joint_shape_basis: DMatrix<f64>,
        skinning: DMatrix<f64>,
        shape_basis: DMatrix<f64>,
        expression_basis: DMatrix<f64>,
    ) -> Result<Self> {
        let mut m = Self {
            kind,
            template,
            parents,
            joint_mean,
            joint_shape_basis,
            skinning,
            shape_basis,
            expression_basis,
            landmark_indices: Vec::new(),
            fingertips: [Vec::new(), Vec::new()],
            head_joint: None,
            wrist_joints: None,
            edges: Vec::new(),
            parts: Vec::new(),
            derived: Derived::default(),
        };
        m.finalize()?;
        Ok(m)
    }

    /// Validates invariants and rebuilds derived lookup tables. Call after
    /// editing public fields.
    pub fn finalize(&mut self) -> Result<()> {
        self.validate()?;
        let j = self.num_joints();
        let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(j);
        for k in 0..j {
            let mut chain = match self.parents[k] {
                Some(p) => ancestors[p].clone(),
                None => Vec::new(),
            };
            chain.push(k);
            ancestors.push(chain);
        }
        let sparse_skin = (0..self.num_vertices())
            .map(|v| {
                (0..j)
                    .filter_map(|k| {
                        let w = self.skinning[(v, k)];
                        (w != 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        self.derived = Derived { ancestors, sparse_skin };
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_shape(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn num_expr(&self) -> usize {
        self.expression_basis.ncols()
    }

    pub fn ancestors(&self, j: usize) -> &[usize] {
        &self.derived.ancestors[j]
    }

    pub fn is_ancestor(&self, k: usize, j: usize) -> bool {
        self.derived.ancestors[j].contains(&k)
    }

    pub fn skin(&self, v: usize) -> &[(usize, f64)] {
        &self.derived.sparse_skin[v]
    }

    pub fn part(&self, name: &str) -> Option<&[usize]> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        let (v, j) = (self.num_vertices(), self.num_joints());
        if j == 0 || v == 0 {
            return bad("model needs at least one joint and one vertex".into());
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return bad(format!("joint {k} has parent {p:?}; parents must precede children")),
            }
        }
        if self.joint_mean.len() != j {
            return bad("joint_mean length differs from joint count".into());
        }
        let nb = self.shape_basis.ncols();
        if self.joint_shape_basis.shape() != (3 * j, nb) || self.shape_basis.nrows() != 3 * v {
            return bad("shape basis dimensions inconsistent".into());
        }
        if self.expression_basis.nrows() != 3 * v && self.expression_basis.ncols() != 0 {
            return bad("expression basis dimensions inconsistent".into());
        }
        if self.skinning.shape() != (v, j) {
            return bad("skinning must be V x J".into());
        }
        for r in 0..v {
            let row = self.skinning.row(r);
            if row.iter().any(|&w| !(w >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return bad(format!("skinning row {r} is not a convex combination"));
            }
        }
        let vert_ok = |idx: &[usize]| idx.iter().all(|&i| i < v);
        if !vert_ok(&self.landmark_indices) || !self.fingertips.iter().all(|f| vert_ok(f)) {
            return bad("vertex index out of range".into());
        }
        if self.edges.iter().any(|e| e[0] >= v || e[1] >= v) || !self.parts.iter().all(|(_, p)| vert_ok(p)) {
            return bad("edge or part index out of range".into());
        }
        if self.head_joint.is_some_and(|h| h >= j) || self.wrist_joints.is_some_and(|w| w.iter().any(|&x| x >= j)) {
            return bad("joint index out of range".into());
        }
        Ok(())
    }

    pub fn check_task(&self, task: Task) -> Result<()> {
        match task {
            Task::Hmd => {
                if self.head_joint.is_none() || self.wrist_joints.is_none() || self.fingertips.iter().any(|f| f.len() != 5) {
                    return Err(Error::BadConfig(
                        "hmd task needs a head joint, two wrists and five fingertips per hand".into(),
                    ));
                }
            }
            Task::Face => {
                if self.landmark_indices.is_empty() {
                    return Err(Error::BadConfig("face task needs landmark indices".into()));
                }
            }
            Task::Body2d => {}
        }
        Ok(())
    }

    /// Joint positions for a shape vector: mean plus basis times shape.
    pub fn rest_joints(&self, shape: &[f64]) -> Result<Vec<Vec3>> {
        if shape.len() != self.num_shape() {
            return Err(Error::ShapeMismatch(format!(
                "shape vector has {} entries, model has {}",
                shape.len(),
                self.num_shape()
            )));
        }
        Ok((0..self.num_joints())
            .map(|j| {
                let mut p = self.joint_mean[j];
                for (b, &s) in shape.iter().enumerate() {
                    for c in 0..3 {
                        p[c] += self.joint_shape_basis[(3 * j + c, b)] * s;
                    }
                }
                p
            })
            .collect())
    }

    /// World transforms of all joints. `rot6d` holds 6J values.
    pub fn forward_kinematics(&self, rot6d: &[f64], root_trans: &Vec3, rest_joints: &[Vec3]) -> Result<Vec<RigidTransform>> {
        let j = self.num_joints();
        if rot6d.len() != 6 * j || rest_joints.len() != j {
            return Err(Error::ShapeMismatch(format!("forward kinematics expects {} rotations", j)));
        }
        let mut world: Vec<RigidTransform> = Vec::with_capacity(j);
        for k in 0..j {
            let rot = crate::geometry::Rotation6D::from_slice(&rot6d[6 * k..]).to_matrix()?;
            let t = match self.parents[k] {
                None => RigidTransform::new(rot, rest_joints[k] + root_trans),
                Some(p) => world[p].compose(&RigidTransform::new(rot, rest_joints[k] - rest_joints[p])),
            };
            world.push(t);
        }
        Ok(world)
    }

    /// Posed vertices for a flat parameter vector (`fixed_shape` supplies the
    /// shape when the layout does not carry one).
    pub fn lbs_vertices(&self, layout: &ParamLayout, theta: &[f64], fixed_shape: &[f64]) -> Result<Vec<Vec3>> {
        let eval = PoseEval::new(self, PoseInput::from_theta(layout, theta, fixed_shape)?)?;
        Ok(eval.vertices().to_vec())
    }

    pub fn landmarks(&self, layout: &ParamLayout, theta: &[f64], fixed_shape: &[f64]) -> Result<Vec<Vec3>> {
        let eval = PoseEval::new(self, PoseInput::from_theta(layout, theta, fixed_shape)?)?;
        Ok(self.landmark_indices.iter().map(|&i| eval.vertex(i)).collect())
    }

    pub fn to_container(&self) -> Container {
        let (v, j) = (self.num_vertices(), self.num_joints());
        let mut c = Container::new();
        c.push("kind", &[1], vec![if self.kind == ModelKind::Body { 0.0 } else { 1.0 }]);
        c.push("template", &[v, 3], flatten_points(&self.template));
        c.push("parents", &[j], self.parents.iter().map(|p| p.map_or(-1.0, |p| p as f64)).collect());
        c.push("joint_mean", &[j, 3], flatten_points(&self.joint_mean));
        push_matrix(&mut c, "joint_shape_basis", &self.joint_shape_basis);
        push_matrix(&mut c, "skinning", &self.skinning);
        push_matrix(&mut c, "shape_basis", &self.shape_basis);
        push_matrix(&mut c, "expression_basis", &self.expression_basis);
        c.push_indices("landmarks", &self.landmark_indices);
        c.push_indices("fingertips_left", &self.fingertips[LEFT]);
        c.push_indices("fingertips_right", &self.fingertips[RIGHT]);
        c.push_indices("head_joint", &self.head_joint.into_iter().collect::<Vec<_>>());
        c.push_indices("wrist_joints", &self.wrist_joints.map(|w| w.to_vec()).unwrap_or_default());
        c.push("edges", &[self.edges.len(), 2], self.edges.iter().flat_map(|e| [e[0] as f64, e[1] as f64]).collect());
        for (name, idx) in &self.parts {
            c.push_indices(format!("part:{name}"), idx);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind = match c.get("kind")?.data.first() {
            Some(0.0) => ModelKind::Body,
            Some(1.0) => ModelKind::Face,
            _ => return Err(Error::Format("bad model kind".into())),
        };
        let template = points(c.get("template")?)?;
        let parents = c
            .get("parents")?
            .data
            .iter()
            .map(|&p| if p < 0.0 { None } else { Some(p as usize) })
            .collect();
        let joint_mean = points(c.get("joint_mean")?)?;
        let mut m = Self {
            kind,
            template,
            parents,
            joint_mean,
            joint_shape_basis: matrix(c.get("joint_shape_basis")?)?,
            skinning: matrix(c.get("skinning")?)?,
            shape_basis: matrix(c.get("shape_basis")?)?,
            expression_basis: matrix(c.get("expression_basis")?)?,
            landmark_indices: c.get("landmarks")?.as_indices()?,
            fingertips: [c.get("fingertips_left")?.as_indices()?, c.get("fingertips_right")?.as_indices()?],
            head_joint: c.get("head_joint")?.as_indices()?.first().copied(),
            wrist_joints: match c.get("wrist_joints")?.as_indices()?.as_slice() {
                [l, r] => Some([*l, *r]),
                [] => None,
                _ => return Err(Error::Format("wrist_joints must hold two entries".into())),
            },
            edges: c.get("edges")?.as_indices()?.chunks_exact(2).map(|e| [e[0], e[1]]).collect(),
            parts: c
                .arrays
                .iter()
                .filter_map(|a| a.name.strip_prefix("part:").map(|n| (n.to_owned(), a)))
                .map(|(n, a)| Ok((n, a.as_indices()?)))
                .collect::<Result<_>>()?,
            derived: Derived::default(),
        };
        m.finalize().map_err(|e| Error::Format(format!("invalid model: {e}")))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub fn flatten_points(p: &[Vec3]) -> Vec<f64> {
    p.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn points(a: &crate::container::Array) -> Result<Vec<Vec3>> {
    if a.dims.len() != 2 || a.dims[1] != 3 {
        return Err(Error::Format(format!("`{}` must be N x 3", a.name)));
    }
    Ok(a.data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

pub(crate) fn push_matrix(c: &mut Container, name: &str, m: &DMatrix<f64>) {
    // row-major payload
    c.push(name, &[m.nrows(), m.ncols()], m.transpose().as_slice().to_vec());
}

pub(crate) fn matrix(a: &crate::container::Array) -> Result<DMatrix<f64>> {
    if a.dims.len() != 2 {
        return Err(Error::Format(format!("`{}` must be rank 2", a.name)));
    }
    Ok(DMatrix::from_row_slice(a.dims[0], a.dims[1], &a.data))
}
