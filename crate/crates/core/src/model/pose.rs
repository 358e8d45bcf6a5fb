//! Model evaluation in pose space `[rotations 6J | translation 3 | shape | expression]`
//! with forward-mode point Jacobians and a reverse-mode vector-Jacobian product.
//!
//! A rotation column `(k, c)` moves every point `x` attached to a descendant
//! of joint `k` by `δW (x - p_k)` with `δW = A (∂L/∂θ_{k,c}) Lᵀ Aᵀ`, where `A`
//! is the parent's world rotation and `L` the local rotation of `k`. World
//! rotations below `k` move by `δW R_j`. Shape moves joint positions through
//! `dp_j = dp_parent + A (B_j - B_parent)`.

use nalgebra::{DMatrix, Matrix3xX};

use super::KinematicModel;
use crate::error::{shape_check, Result};
use crate::geometry::{Mat3, RigidTransform, Rotation6D, Vec3};
use crate::layout::ParamLayout;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseInput {
    pub rot6d: Vec<f64>,
    pub trans: Vec3,
    pub shape: Vec<f64>,
    /// Empty means zero expression.
    pub expr: Vec<f64>,
}

impl PoseInput {
    pub fn rest(model: &KinematicModel) -> Self {
        let mut rot6d = vec![0.0; 6 * model.num_joints()];
        for r in rot6d.chunks_exact_mut(6) {
            r.copy_from_slice(&Rotation6D::IDENTITY.0);
        }
        Self { rot6d, trans: Vec3::zeros(), shape: vec![0.0; model.num_shape()], expr: Vec::new() }
    }

    /// Splits a flat parameter vector. `fixed_shape` is used when the layout
    /// does not carry shape (it is observed for the HMD task).
    pub fn from_theta(layout: &ParamLayout, theta: &[f64], fixed_shape: &[f64]) -> Result<Self> {
        layout.check(theta)?;
        let t = layout.root_translation();
        let shape = match layout.shape_range() {
            Some(r) => theta[r].to_vec(),
            None => {
                shape_check(fixed_shape.len() == layout.shape, || {
                    format!("observed shape has {} entries, expected {}", fixed_shape.len(), layout.shape)
                })?;
                fixed_shape.to_vec()
            }
        };
        Ok(Self {
            rot6d: theta[layout.rotations()].to_vec(),
            trans: Vec3::new(theta[t.start], theta[t.start + 1], theta[t.start + 2]),
            shape,
            expr: layout.expr_range().map(|r| theta[r].to_vec()).unwrap_or_default(),
        })
    }
}

/// Upstream gradients for [`PoseEval::vjp`]. Empty vectors mean zero.
#[derive(Clone, Debug, Default)]
pub struct PoseUpstream {
    /// Per vertex.
    pub vertices: Vec<Vec3>,
    /// Per joint world position.
    pub joint_pos: Vec<Vec3>,
    /// Per joint world rotation.
    pub joint_rot: Vec<Mat3>,
    /// Per joint local rotation matrix.
    pub local_rot: Vec<Mat3>,
}

pub struct PoseEval<'m> {
    model: &'m KinematicModel,
    input: PoseInput,
    rest_joints: Vec<Vec3>,
    local: Vec<Mat3>,
    /// ∂L_k/∂θ_{k,c}.
    dlocal: Vec<[Mat3; 6]>,
    world: Vec<RigidTransform>,
    /// δW per rotation column, 6J entries.
    dw: Vec<Mat3>,
    /// ∂p_j/∂β as 3 x |shape|.
    dpos_shape: Vec<Matrix3xX<f64>>,
}

impl<'m> PoseEval<'m> {
    pub fn new(model: &'m KinematicModel, input: PoseInput) -> Result<Self> {
        let nj = model.num_joints();
        shape_check(input.rot6d.len() == 6 * nj, || {
            format!("pose has {} rotation entries, model needs {}", input.rot6d.len(), 6 * nj)
        })?;
        shape_check(input.expr.is_empty() || input.expr.len() == model.num_expr(), || {
            format!("expression has {} entries, model has {}", input.expr.len(), model.num_expr())
        })?;
        let rest_joints = model.rest_joints(&input.shape)?;
        let mut local = Vec::with_capacity(nj);
        let mut dlocal = Vec::with_capacity(nj);
        let mut world: Vec<RigidTransform> = Vec::with_capacity(nj);
        let mut dw = Vec::with_capacity(6 * nj);
        let nb = model.num_shape();
        let mut dpos_shape: Vec<Matrix3xX<f64>> = Vec::with_capacity(nj);
        for k in 0..nj {
            let (l, dl) = Rotation6D::from_slice(&input.rot6d[6 * k..]).to_matrix_with_jacobian()?;
            let basis = model.joint_shape_basis.rows(3 * k, 3);
            let (t, a, dp) = match model.parents[k] {
                None => (
                    RigidTransform::new(l, rest_joints[k] + input.trans),
                    Mat3::identity(),
                    Matrix3xX::from_iterator(nb, basis.iter().copied()),
                ),
                Some(p) => {
                    let a = world[p].rot;
                    let parent_basis = model.joint_shape_basis.rows(3 * p, 3);
                    let rel = Matrix3xX::from_iterator(nb, (basis - parent_basis).iter().copied());
                    (
                        world[p].compose(&RigidTransform::new(l, rest_joints[k] - rest_joints[p])),
                        a,
                        &dpos_shape[p] + a * rel,
                    )
                }
            };
            let at = a.transpose();
            let lt = l.transpose();
            for d in &dl {
                dw.push(a * d * lt * at);
            }
            local.push(l);
            dlocal.push(dl);
            world.push(t);
            dpos_shape.push(dp);
        }
        Ok(Self { model, input, rest_joints, local, dlocal, world, dw, dpos_shape })
    }

    pub fn model(&self) -> &KinematicModel {
        self.model
    }

    pub fn input(&self) -> &PoseInput {
        &self.input
    }

    pub fn pose_dim(&self) -> usize {
        6 * self.model.num_joints() + 3 + self.model.num_shape() + self.input.expr.len()
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    pub fn world(&self) -> &[RigidTransform] {
        &self.world
    }

    pub fn local_rotations(&self) -> &[Mat3] {
        &self.local
    }

    pub fn joint_positions(&self) -> Vec<Vec3> {
        self.world.iter().map(|t| t.trans).collect()
    }

    /// Rest vertex after shape and expression offsets.
    pub fn shaped_vertex(&self, v: usize) -> Vec3 {
        let m = self.model;
        let mut s = m.template[v];
        for c in 0..3 {
            let row = 3 * v + c;
            for (b, &x) in self.input.shape.iter().enumerate() {
                s[c] += m.shape_basis[(row, b)] * x;
            }
            for (e, &x) in self.input.expr.iter().enumerate() {
                s[c] += m.expression_basis[(row, e)] * x;
            }
        }
        s
    }

    pub fn vertex(&self, v: usize) -> Vec3 {
        let s = self.shaped_vertex(v);
        self.model
            .skin(v)
            .iter()
            .map(|&(j, w)| (self.world[j].rot * (s - self.rest_joints[j]) + self.world[j].trans) * w)
            .sum()
    }

    pub fn vertices(&self) -> Vec<Vec3> {
        (0..self.model.num_vertices()).map(|v| self.vertex(v)).collect()
    }

    fn shape_col(&self) -> usize {
        6 * self.model.num_joints() + 3
    }

    fn expr_col(&self) -> usize {
        self.shape_col() + self.model.num_shape()
    }

    /// ∂vertex/∂pose as 3 x pose_dim.
    pub fn vertex_jacobian(&self, v: usize) -> Matrix3xX<f64> {
        let m = self.model;
        let nj = m.num_joints();
        let mut jac = Matrix3xX::zeros(self.pose_dim());
        let s = self.shaped_vertex(v);
        // Per ancestor k: weighted sum of attached points and weight mass.
        let mut y = vec![Vec3::zeros(); nj];
        let mut mass = vec![0.0; nj];
        let mut blend = Mat3::zeros();
        let mut shape_part = Matrix3xX::zeros(m.num_shape());
        for &(j, w) in m.skin(v) {
            let x = self.world[j].rot * (s - self.rest_joints[j]) + self.world[j].trans;
            for &k in m.ancestors(j) {
                y[k] += x * w;
                mass[k] += w;
            }
            blend += self.world[j].rot * w;
            if m.num_shape() > 0 {
                let bj = m.joint_shape_basis.rows(3 * j, 3);
                shape_part += (&self.dpos_shape[j] - self.world[j].rot * bj) * w;
            }
        }
        for k in 0..nj {
            if mass[k] == 0.0 {
                continue;
            }
            let arm = y[k] - self.world[k].trans * mass[k];
            for c in 0..6 {
                jac.set_column(6 * k + c, &(self.dw[6 * k + c] * arm));
            }
        }
        let t0 = 6 * nj;
        for c in 0..3 {
            jac[(c, t0 + c)] = 1.0;
        }
        let sc = self.shape_col();
        for b in 0..m.num_shape() {
            let sb = Vec3::new(m.shape_basis[(3 * v, b)], m.shape_basis[(3 * v + 1, b)], m.shape_basis[(3 * v + 2, b)]);
            jac.set_column(sc + b, &(blend * sb + shape_part.column(b)));
        }
        let ec = self.expr_col();
        for e in 0..self.input.expr.len() {
            let eb = Vec3::new(
                m.expression_basis[(3 * v, e)],
                m.expression_basis[(3 * v + 1, e)],
                m.expression_basis[(3 * v + 2, e)],
            );
            jac.set_column(ec + e, &(blend * eb));
        }
        jac
    }

    /// ∂(world position of joint j)/∂pose as 3 x pose_dim.
    pub fn joint_jacobian(&self, j: usize) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.pose_dim());
        let p = self.world[j].trans;
        for &k in self.model.ancestors(j) {
            let arm = p - self.world[k].trans;
            for c in 0..6 {
                jac.set_column(6 * k + c, &(self.dw[6 * k + c] * arm));
            }
        }
        let t0 = 6 * self.model.num_joints();
        for c in 0..3 {
            jac[(c, t0 + c)] = 1.0;
        }
        let sc = self.shape_col();
        for b in 0..self.model.num_shape() {
            jac.set_column(sc + b, &self.dpos_shape[j].column(b));
        }
        jac
    }

    /// ∂(world transform of joint j)/∂pose as 12 x pose_dim; rows follow
    /// [`RigidTransform::flatten12`].
    pub fn transform_jacobian(&self, j: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(12, self.pose_dim());
        let r = self.world[j].rot;
        for &k in self.model.ancestors(j) {
            for c in 0..6 {
                let d = self.dw[6 * k + c] * r;
                let col = 6 * k + c;
                for a in 0..3 {
                    for b in 0..3 {
                        jac[(3 * a + b, col)] = d[(a, b)];
                    }
                }
            }
        }
        jac.rows_mut(9, 3).copy_from(&self.joint_jacobian(j));
        jac
    }

    /// Gradient in pose space of `Σ ⟨upstream, outputs⟩`.
    pub fn vjp(&self, up: &PoseUpstream) -> Vec<f64> {
        let m = self.model;
        let nj = m.num_joints();
        let nb = m.num_shape();
        let mut grad = vec![0.0; self.pose_dim()];
        // n[j] = Σ u xᵀ over points attached to j; s[j] = Σ u.
        let mut n = vec![Mat3::zeros(); nj];
        let mut s = vec![Vec3::zeros(); nj];
        // Vertex-only part of s, for the shape term through R_j B_j.
        let mut sv = vec![Vec3::zeros(); nj];
        let mut q_shape = vec![0.0; nb];
        let ec = self.expr_col();
        for (v, u) in up.vertices.iter().enumerate() {
            if *u == Vec3::zeros() {
                continue;
            }
            let sh = self.shaped_vertex(v);
            let mut q = Vec3::zeros();
            for &(j, w) in m.skin(v) {
                let x = self.world[j].rot * (sh - self.rest_joints[j]) + self.world[j].trans;
                let wu = u * w;
                n[j] += wu * x.transpose();
                s[j] += wu;
                sv[j] += wu;
                q += self.world[j].rot.transpose() * wu;
            }
            for c in 0..3 {
                let row = 3 * v + c;
                for (b, g) in q_shape.iter_mut().enumerate() {
                    *g += m.shape_basis[(row, b)] * q[c];
                }
                for e in 0..self.input.expr.len() {
                    grad[ec + e] += m.expression_basis[(row, e)] * q[c];
                }
            }
        }
        for (j, u) in up.joint_pos.iter().enumerate() {
            n[j] += u * self.world[j].trans.transpose();
            s[j] += u;
        }
        for (j, g) in up.joint_rot.iter().enumerate() {
            n[j] += g * self.world[j].rot.transpose();
        }
        // Accumulate subtree sums bottom-up (children have larger indices).
        let mut sub_n = n;
        let mut sub_s = s.clone();
        for k in (1..nj).rev() {
            let p = m.parents[k].expect("non-root joint has a parent");
            let (nk, sk) = (sub_n[k], sub_s[k]);
            sub_n[p] += nk;
            sub_s[p] += sk;
        }
        for k in 0..nj {
            let mk = sub_n[k] - sub_s[k] * self.world[k].trans.transpose();
            let a = match m.parents[k] {
                Some(p) => self.world[p].rot,
                None => Mat3::identity(),
            };
            let mut gl = a.transpose() * mk * a * self.local[k];
            if let Some(h) = up.local_rot.get(k) {
                gl += h;
            }
            for c in 0..6 {
                grad[6 * k + c] = self.dlocal[k][c].dot(&gl);
            }
        }
        let t0 = 6 * nj;
        for c in 0..3 {
            grad[t0 + c] = sub_s[0][c];
        }
        if nb > 0 {
            let sc = self.shape_col();
            // Σ_j s_jᵀ dp_j/dβ expanded along the tree.
            let mut g = m.joint_shape_basis.rows(0, 3).transpose() * sub_s[0];
            for k in 1..nj {
                let p = m.parents[k].expect("non-root joint has a parent");
                let rel = m.joint_shape_basis.rows(3 * k, 3) - m.joint_shape_basis.rows(3 * p, 3);
                g += rel.transpose() * (self.world[p].rot.transpose() * sub_s[k]);
            }
            for j in 0..nj {
                g -= m.joint_shape_basis.rows(3 * j, 3).transpose() * (self.world[j].rot.transpose() * sv[j]);
            }
            for b in 0..nb {
                grad[sc + b] = g[b] + q_shape[b];
            }
        }
        grad
    }
}
