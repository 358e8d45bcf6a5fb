//! Deterministic synthetic mini-models: capsule-limb bodies and an
//! ellipsoid head with eyes.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{KinematicModel, ModelKind};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeShape {
    /// 16-joint humanoid with head, wrists and fingertips.
    Humanoid,
    /// Straight vertical chain.
    Chain,
    /// Random tree with random bone directions.
    Random,
    /// Neck, head and two eyes.
    Face,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub tree: TreeShape,
    pub joints: usize,
    pub vertices: usize,
    pub shape: usize,
    pub expr: usize,
    pub landmarks: usize,
}

impl SynthConfig {
    pub fn body() -> Self {
        Self { tree: TreeShape::Humanoid, joints: 16, vertices: 800, shape: 8, expr: 0, landmarks: 0 }
    }

    pub fn face() -> Self {
        Self { tree: TreeShape::Face, joints: 4, vertices: 600, shape: 16, expr: 16, landmarks: 64 }
    }
}

/// One joint with the capsule carrying its vertices.
struct Segment {
    parent: Option<usize>,
    pos: Vec3,
    end: Vec3,
    radius: f64,
}

impl Segment {
    fn new(parent: Option<usize>, pos: [f64; 3], end: Option<[f64; 3]>, radius: f64) -> Self {
        let pos = Vec3::from(pos);
        Self { parent, pos, end: end.map(Vec3::from).unwrap_or(pos), radius }
    }
}

fn humanoid() -> Vec<Segment> {
    let s = Segment::new;
    let mut v = vec![
        s(None, [0.0, 0.95, 0.0], Some([0.0, 1.22, 0.0]), 0.13),
        s(Some(0), [0.0, 1.22, 0.0], Some([0.0, 1.48, 0.0]), 0.14),
        s(Some(1), [0.0, 1.50, 0.0], Some([0.0, 1.60, 0.0]), 0.05),
        s(Some(2), [0.0, 1.60, 0.0], Some([0.0, 1.80, -0.01]), 0.09),
    ];
    for side in [-1.0, 1.0] {
        let b = v.len();
        v.push(s(Some(1), [0.19 * side, 1.44, 0.0], Some([0.30 * side, 1.18, 0.0]), 0.045));
        v.push(s(Some(b), [0.30 * side, 1.18, 0.0], Some([0.38 * side, 0.94, 0.0]), 0.04));
        v.push(s(Some(b + 1), [0.38 * side, 0.94, 0.0], Some([0.42 * side, 0.76, -0.01]), 0.035));
    }
    for side in [-1.0, 1.0] {
        let b = v.len();
        v.push(s(Some(0), [0.10 * side, 0.90, 0.0], Some([0.11 * side, 0.50, 0.0]), 0.07));
        v.push(s(Some(b), [0.11 * side, 0.50, 0.0], Some([0.12 * side, 0.09, 0.0]), 0.055));
        v.push(s(Some(b + 1), [0.12 * side, 0.09, 0.0], Some([0.12 * side, 0.02, -0.16]), 0.045));
    }
    v
}

fn chain(joints: usize) -> Vec<Segment> {
    (0..joints)
        .map(|j| {
            let y = 0.25 * j as f64;
            Segment::new(j.checked_sub(1), [0.0, y, 0.0], Some([0.0, y + 0.25, 0.0]), 0.05)
        })
        .collect()
}

fn random_tree(joints: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::with_capacity(joints);
    for j in 0..joints {
        let dir = random_unit(rng);
        let radius = rng.gen_range(0.03..0.06);
        if j == 0 {
            segs.push(Segment::new(None, [0.0, 1.0, 0.0], Some([0.0, 1.0 + 0.15, 0.0]), radius));
            continue;
        }
        let p = rng.gen_range(0..j);
        let pos = segs[p].pos + dir * rng.gen_range(0.1..0.3);
        let end = pos + dir * 0.15;
        segs.push(Segment { parent: Some(p), pos, end, radius });
    }
    segs
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Splits `total` into integer parts proportional to `weights`, each at least 1.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let spare = total - weights.len();
    let exact: Vec<f64> = weights.iter().map(|w| spare as f64 * w / sum).collect();
    let mut n: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - n.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        n[i] += 1;
        left -= 1;
    }
    n
}

/// Two unit vectors orthogonal to `axis` (and each other).
fn frame(axis: &Vec3) -> (Vec3, Vec3) {
    let a = if axis.norm() > 1e-12 { axis.normalize() } else { Vec3::y() };
    let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
    let u = a.cross(&helper).normalize();
    (u, a.cross(&u))
}

fn dist_to_segment(x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 { ((x - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (x - (a + ab * t)).norm()
}

/// Vertex samples of one capsule, with their fraction along the axis and the
/// outward radial direction.
struct Sample {
    joint: usize,
    pos: Vec3,
    t: f64,
    radial: Vec3,
}

fn helix(joint: usize, seg: &Segment, n: usize) -> Vec<Sample> {
    let axis = seg.end - seg.pos;
    let (u, w) = frame(&axis);
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let phi = i as f64 * GOLDEN_ANGLE;
            let radial = u * phi.cos() + w * phi.sin();
            Sample { joint, pos: seg.pos + axis * t + radial * seg.radius, t, radial }
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
}

pub fn synth_model(config: &SynthConfig, seed: u64) -> Result<KinematicModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config;
    if c.joints == 0 {
        return Err(Error::BadConfig("model needs at least one joint".into()));
    }
    if c.vertices < c.joints {
        return Err(Error::BadConfig(format!("need at least one vertex per joint ({} < {})", c.vertices, c.joints)));
    }
    match c.tree {
        TreeShape::Face => synth_face(c, &mut rng),
        TreeShape::Humanoid if c.joints != 16 => {
            Err(Error::BadConfig(format!("humanoid tree has 16 joints, config asks for {}", c.joints)))
        }
        tree => {
            if c.expr != 0 || c.landmarks != 0 {
                return Err(Error::BadConfig("body models carry no expression basis or landmarks".into()));
            }
            let segs = match tree {
                TreeShape::Humanoid => humanoid(),
                TreeShape::Chain => chain(c.joints),
                _ => random_tree(c.joints, &mut rng),
            };
            synth_body(c, &segs, tree == TreeShape::Humanoid, &mut rng)
        }
    }
}

fn synth_body(c: &SynthConfig, segs: &[Segment], humanoid: bool, rng: &mut ChaCha8Rng) -> Result<KinematicModel> {
    let nj = segs.len();
    let weights: Vec<f64> = segs.iter().map(|s| ((s.end - s.pos).norm() + s.radius) * s.radius).collect();
    let counts = allocate(c.vertices, &weights);
    let samples: Vec<Sample> = segs.iter().zip(&counts).enumerate().flat_map(|(j, (s, &n))| helix(j, s, n)).collect();
    let nv = samples.len();

    let mut edges = Vec::new();
    let mut start = 0;
    for &n in &counts {
        for i in 0..n {
            for step in [1, 8] {
                if i + step < n {
                    edges.push([start + i, start + i + step]);
                }
            }
        }
        start += n;
    }

    let mut skinning = DMatrix::zeros(nv, nj);
    for (v, s) in samples.iter().enumerate() {
        let mut w: Vec<(usize, f64)> = segs
            .iter()
            .enumerate()
            .map(|(j, seg)| {
                let d = dist_to_segment(&s.pos, &seg.pos, &seg.end) / (seg.radius + 0.02);
                (j, (-4.0 * d * d).exp())
            })
            .collect();
        // Own segment always participates.
        w[s.joint].1 = w[s.joint].1.max(1e-3);
        w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        w.truncate(3);
        let total: f64 = w.iter().map(|x| x.1).sum();
        for &(j, x) in &w {
            skinning[(v, j)] = x / total;
        }
        let sum: f64 = skinning.row(v).sum();
        let jmax = w[0].0;
        skinning[(v, jmax)] += 1.0 - sum;
    }

    let nb = c.shape;
    let mut joint_shape_basis = DMatrix::zeros(3 * nj, nb);
    let mut shape_basis = DMatrix::zeros(3 * nv, nb);
    let first_child: Vec<Option<usize>> = (0..nj).map(|j| segs.iter().position(|s| s.parent == Some(j))).collect();
    for b in 0..nb {
        let offsets: Vec<Vec3> = (0..nj).map(|_| Vec3::new(normal(rng, 0.012), normal(rng, 0.012), normal(rng, 0.012))).collect();
        let radial: Vec<f64> = (0..nj).map(|_| normal(rng, 0.006)).collect();
        for j in 0..nj {
            for a in 0..3 {
                joint_shape_basis[(3 * j + a, b)] = offsets[j][a];
            }
        }
        for (v, s) in samples.iter().enumerate() {
            let end = first_child[s.joint].map_or(offsets[s.joint], |ch| offsets[ch]);
            let d = offsets[s.joint] * (1.0 - s.t) + end * s.t + s.radial * radial[s.joint];
            for a in 0..3 {
                shape_basis[(3 * v + a, b)] = d[a];
            }
        }
    }

    let mut m = KinematicModel::new(
        ModelKind::Body,
        samples.iter().map(|s| s.pos).collect(),
        segs.iter().map(|s| s.parent).collect(),
        segs.iter().map(|s| s.pos).collect(),
        joint_shape_basis,
        skinning,
        shape_basis,
        DMatrix::zeros(3 * nv, 0),
    )?;
    m.edges = edges;
    if humanoid {
        let (head, wrists) = (3, [6, 9]);
        m.head_joint = Some(head);
        m.wrist_joints = Some(wrists);
        for (side, &wj) in wrists.iter().enumerate() {
            let mut hand: Vec<usize> = (0..nv).filter(|&v| samples[v].joint == wj).collect();
            hand.sort_by(|&a, &b| samples[b].t.total_cmp(&samples[a].t).then(a.cmp(&b)));
            hand.truncate(5);
            hand.sort_unstable();
            m.fingertips[side] = hand;
        }
        let dominant = |v: usize| m.skinning.row(v).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|x| x.0);
        for (name, j) in [("head", head), ("left_hand", wrists[0]), ("right_hand", wrists[1])] {
            let idx = (0..nv).filter(|&v| dominant(v) == Some(j)).collect();
            m.parts.push((name.to_owned(), idx));
        }
    }
    m.finalize()?;
    Ok(m)
}

/// Smooth random displacement field: a few random plane waves.
struct Field {
    waves: Vec<(Vec3, f64, Vec3)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = random_unit(rng) * rng.gen_range(10.0..30.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = Vec3::new(normal(rng, amplitude), normal(rng, amplitude), normal(rng, amplitude));
                (k, phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: &Vec3) -> Vec3 {
        self.waves.iter().map(|(k, ph, a)| a * (k.dot(x) + ph).sin()).sum()
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn synth_face(c: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<KinematicModel> {
    if c.joints != 4 {
        return Err(Error::BadConfig(format!("face tree has 4 joints, config asks for {}", c.joints)));
    }
    let eye_n = (c.vertices / 20).max(4);
    let neck_n = c.vertices / 10;
    if c.vertices < 2 * eye_n + neck_n + 8 {
        return Err(Error::BadConfig(format!("face model needs more vertices than {}", c.vertices)));
    }
    let head_n = c.vertices - 2 * eye_n - neck_n;
    let center = Vec3::new(0.0, 0.13, 0.0);
    let radii = Vec3::new(0.075, 0.1, 0.09);
    let eyes = [Vec3::new(-0.032, 0.13, -0.075), Vec3::new(0.032, 0.13, -0.075)];
    let joints = vec![Vec3::zeros(), Vec3::new(0.0, 0.08, 0.0), eyes[0], eyes[1]];
    let parents = vec![None, Some(0), Some(1), Some(1)];

    // (position, owning part: 0 neck, 1 head, 2/3 eyes)
    let mut verts: Vec<(Vec3, usize)> = Vec::with_capacity(c.vertices);
    let fib = |n: usize, i: usize| {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = i as f64 * GOLDEN_ANGLE;
        Vec3::new(r * phi.cos(), y, r * phi.sin())
    };
    for i in 0..head_n {
        verts.push((center + fib(head_n, i).component_mul(&radii), 1));
    }
    let neck = Segment::new(Some(0), [0.0, 0.0, 0.0], Some([0.0, 0.08, 0.0]), 0.05);
    verts.extend(helix(0, &neck, neck_n).into_iter().map(|s| (s.pos, 0)));
    for (e, eye) in eyes.iter().enumerate() {
        for i in 0..eye_n {
            verts.push((eye + fib(eye_n, i) * 0.012, 2 + e));
        }
    }
    let nv = verts.len();

    let mut skinning = DMatrix::zeros(nv, 4);
    for (v, (p, part)) in verts.iter().enumerate() {
        match part {
            0 | 1 => {
                let h = smoothstep(0.03, 0.10, p.y);
                skinning[(v, 0)] = 1.0 - h;
                skinning[(v, 1)] = h;
            }
            e => skinning[(v, *e)] = 1.0,
        }
    }

    let mut joint_shape_basis = DMatrix::zeros(12, c.shape);
    let mut shape_basis = DMatrix::zeros(3 * nv, c.shape);
    for b in 0..c.shape {
        let field = Field::new(rng, 0.004);
        let head = Vec3::new(0.0, normal(rng, 0.004), 0.0);
        // Eyes move symmetrically.
        let (dx, dy, dz) = (normal(rng, 0.003), normal(rng, 0.002), normal(rng, 0.002));
        let eye_off = [head + Vec3::new(-dx, dy, dz), head + Vec3::new(dx, dy, dz)];
        for (j, off) in [Vec3::zeros(), head, eye_off[0], eye_off[1]].iter().enumerate() {
            for a in 0..3 {
                joint_shape_basis[(3 * j + a, b)] = off[a];
            }
        }
        for (v, (p, part)) in verts.iter().enumerate() {
            let d = match part {
                0 => field.at(p) * smoothstep(0.0, 0.08, p.y),
                1 => field.at(p) + head,
                e => eye_off[e - 2],
            };
            for a in 0..3 {
                shape_basis[(3 * v + a, b)] = d[a];
            }
        }
    }
    let mut expression_basis = DMatrix::zeros(3 * nv, c.expr);
    for e in 0..c.expr {
        let field = Field::new(rng, 0.003);
        for (v, (p, part)) in verts.iter().enumerate() {
            if *part != 1 {
                continue;
            }
            // Expressions act on the front of the face.
            let front = smoothstep(0.0, 0.06, -(p.z - center.z));
            let d = field.at(p) * front;
            for a in 0..3 {
                expression_basis[(3 * v + a, e)] = d[a];
            }
        }
    }

    let mut m = KinematicModel::new(
        ModelKind::Face,
        verts.iter().map(|v| v.0).collect(),
        parents,
        joints,
        joint_shape_basis,
        skinning,
        shape_basis,
        expression_basis,
    )?;

    let eye_landmarks = 4.min(eye_n);
    let want_face = c.landmarks.saturating_sub(2 * eye_landmarks);
    let front: Vec<usize> = (0..head_n).filter(|&v| verts[v].0.z - center.z < -0.3 * radii.z).collect();
    if c.landmarks > 0 && want_face > front.len() {
        return Err(Error::BadConfig(format!(
            "{} landmarks requested, the front of the face has {}",
            c.landmarks,
            front.len() + 2 * eye_landmarks
        )));
    }
    let mut landmarks: Vec<usize> = (0..want_face).map(|i| front[i * front.len() / want_face.max(1)]).collect();
    if c.landmarks > 0 {
        for e in 0..2 {
            let base = head_n + neck_n + e * eye_n;
            let mut eye: Vec<usize> = (base..base + eye_n).collect();
            eye.sort_by(|&a, &b| verts[a].0.z.total_cmp(&verts[b].0.z).then(a.cmp(&b)));
            landmarks.extend(eye.into_iter().take(eye_landmarks.min(c.landmarks - landmarks.len())));
        }
    }
    m.landmark_indices = landmarks;
    m.head_joint = Some(1);
    m.parts.push(("head".into(), (0..head_n).collect()));
    let mut edges = Vec::new();
    for i in 0..nv {
        let part = verts[i].1;
        for step in [1, 8] {
            if i + step < nv && verts[i + step].1 == part {
                edges.push([i, i + step]);
            }
        }
    }
    m.edges = edges;
    m.finalize()?;
    Ok(m)
}
