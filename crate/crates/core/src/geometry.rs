//! Rotations, rigid transforms, cameras and similarity alignment.

use nalgebra::{Matrix3, Matrix3x4, Matrix3x6, Matrix4, Rotation3, Unit, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const DEGENERATE_NORM: f64 = 1e-12;

/// Two stacked 3-vectors: the first two columns of a rotation matrix before
/// orthonormalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(s: &[f64]) -> Self {
        let mut r = [0.0; 6];
        r.copy_from_slice(&s[..6]);
        Self(r)
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Self([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
    }

    fn columns(&self) -> (Vec3, Vec3) {
        let r = &self.0;
        (Vec3::new(r[0], r[1], r[2]), Vec3::new(r[3], r[4], r[5]))
    }

    /// Gram-Schmidt decode.
    pub fn to_matrix(&self) -> Result<Mat3> {
        let (a1, a2) = self.columns();
        let n1 = a1.norm();
        if !(n1 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateInput(format!("6D rotation first column norm {n1:e}")));
        }
        let b1 = a1 / n1;
        let u = a2 - b1 * b1.dot(&a2);
        let n2 = u.norm();
        if !(n2 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateInput(format!("6D rotation columns parallel ({n2:e})")));
        }
        let b2 = u / n2;
        Ok(Mat3::from_columns(&[b1, b2, b1.cross(&b2)]))
    }

    /// Decoded matrix together with its derivative with respect to each of
    /// the six inputs.
    pub fn to_matrix_with_jacobian(&self) -> Result<(Mat3, [Mat3; 6])> {
        let (a1, a2) = self.columns();
        let n1 = a1.norm();
        if !(n1 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateInput(format!("6D rotation first column norm {n1:e}")));
        }
        let b1 = a1 / n1;
        let dot = b1.dot(&a2);
        let u = a2 - b1 * dot;
        let n2 = u.norm();
        if !(n2 >= DEGENERATE_NORM) {
            return Err(Error::DegenerateInput(format!("6D rotation columns parallel ({n2:e})")));
        }
        let b2 = u / n2;
        let b3 = b1.cross(&b2);
        let eye = Mat3::identity();
        let p1 = (eye - b1 * b1.transpose()) / n1;
        let p2 = (eye - b2 * b2.transpose()) / n2;

        let mut d1 = Matrix3x6::zeros();
        d1.fixed_view_mut::<3, 3>(0, 0).copy_from(&p1);
        let mut du = Matrix3x6::zeros();
        du.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(b1 * (a2.transpose() * p1)) - p1 * dot));
        du.fixed_view_mut::<3, 3>(0, 3).copy_from(&(eye - b1 * b1.transpose()));
        let d2 = p2 * du;
        let d3 = -b2.cross_matrix() * d1 + b1.cross_matrix() * d2;

        let r = Mat3::from_columns(&[b1, b2, b3]);
        let mut jac = [Mat3::zeros(); 6];
        for (c, j) in jac.iter_mut().enumerate() {
            *j = Mat3::from_columns(&[d1.column(c).into_owned(), d2.column(c).into_owned(), d3.column(c).into_owned()]);
        }
        Ok((r, jac))
    }
}

pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3> {
    r.to_matrix()
}

pub fn matrix_to_rot6d(m: &Mat3) -> Rotation6D {
    Rotation6D::from_matrix(m)
}

pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    if angle == 0.0 || axis.norm() == 0.0 {
        return Mat3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Rotation angle of `r` in radians, in `[0, pi]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self { rot: Mat3::identity(), trans: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rot: Mat3::identity(), trans: t }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform { rot: self.rot * other.rot, trans: self.rot * other.trans + self.trans }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rot.transpose();
        RigidTransform { rot: rt, trans: -(rt * self.trans) }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    pub fn to_3x4(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    /// Rotation row-major followed by translation: the canonical 12-entry
    /// flattening used by residual blocks and encodings.
    pub fn flatten12(&self) -> [f64; 12] {
        let r = &self.rot;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            self.trans.x, self.trans.y, self.trans.z,
        ]
    }

    pub fn from_flat12(v: &[f64]) -> Self {
        Self {
            rot: Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            trans: Vec3::new(v[9], v[10], v[11]),
        }
    }

    /// Largest deviation from orthonormality and unit determinant.
    pub fn rotation_defect(&self) -> f64 {
        let e = (self.rot.transpose() * self.rot - Mat3::identity()).abs().max();
        e.max((self.rot.determinant() - 1.0).abs())
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Frobenius norm of the difference of the two `[R | t]` blocks.
pub fn se3_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    se3_distance_weighted(a, b, 1.0)
}

/// As [`se3_distance`] with the translation block scaled by `translation_weight`.
pub fn se3_distance_weighted(a: &RigidTransform, b: &RigidTransform, translation_weight: f64) -> f64 {
    let dr = (a.rot - b.rot).norm_squared();
    let dt = (a.trans - b.trans).norm_squared() * translation_weight * translation_weight;
    (dr + dt).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakPerspective {
    pub scale: f64,
    pub offset: Vec2,
}

impl WeakPerspective {
    pub fn new(scale: f64, offset: Vec2) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::BadConfig(format!("weak-perspective scale must be > 0, got {scale}")));
        }
        Ok(Self { scale, offset })
    }

    pub fn project_point(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.scale * p.x + self.offset.x, self.scale * p.y + self.offset.y)
    }
}

pub fn weak_perspective_project(points: &[Vec3], cam: &WeakPerspective) -> Vec<Vec2> {
    points.iter().map(|p| cam.project_point(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for PinholeIntrinsics {
    fn default() -> Self {
        Self { fx: 512.0, fy: 512.0, cx: 256.0, cy: 256.0 }
    }
}

pub const MIN_DEPTH: f64 = 1e-6;

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::BadConfig(format!("focal lengths must be > 0, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn project_point(&self, p: &Vec3) -> Option<Vec2> {
        (p.z > MIN_DEPTH).then(|| Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// d(pixel)/d(point) as two rows.
    pub fn project_jacobian(&self, p: &Vec3) -> [Vec3; 2] {
        let iz = 1.0 / p.z;
        [
            Vec3::new(self.fx * iz, 0.0, -self.fx * p.x * iz * iz),
            Vec3::new(0.0, self.fy * iz, -self.fy * p.y * iz * iz),
        ]
    }
}

pub fn perspective_project(points: &[Vec3], k: &PinholeIntrinsics) -> Result<Vec<Vec2>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| k.project_point(p).ok_or(Error::BehindCamera { index: i, z: p.z }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * p * self.scale + self.trans
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub transform: Similarity,
    pub aligned: Vec<Vec3>,
    /// Sum of squared distances between aligned source and target.
    pub residual: f64,
}

/// Closed-form similarity alignment of `source` onto `target` (centroids plus
/// SVD of the cross-covariance, reflections removed).
pub fn procrustes_align(source: &[Vec3], target: &[Vec3]) -> Result<Alignment> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::ShapeMismatch(format!("procrustes: {n} vs {} points", target.len())));
    }
    if n < 3 {
        return Err(Error::DegenerateInput(format!("procrustes needs at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = source.iter().sum::<Vec3>() * inv_n;
    let mu_y = target.iter().sum::<Vec3>() * inv_n;
    let mut var_x = 0.0;
    let mut cov = Mat3::zeros();
    for (x, y) in source.iter().zip(target) {
        let xc = x - mu_x;
        var_x += xc.norm_squared();
        cov += (y - mu_y) * xc.transpose();
    }
    var_x *= inv_n;
    cov *= inv_n;
    if !(var_x > 1e-300) {
        return Err(Error::DegenerateInput("procrustes source has zero variance".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s.z = -1.0;
    }
    let rot = u * Mat3::from_diagonal(&s) * v_t;
    let scale = svd.singular_values.dot(&s) / var_x;
    let trans = mu_y - rot * mu_x * scale;
    let transform = Similarity { scale, rot, trans };
    let aligned: Vec<Vec3> = source.iter().map(|p| transform.apply(p)).collect();
    let residual = aligned.iter().zip(target).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(Alignment { transform, aligned, residual })
}
