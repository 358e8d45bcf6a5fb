//! Synthetic datasets for the three tasks.
//!
//! Every record draws from its own ChaCha stream (`master seed`, stream =
//! record index), so generation is reproducible and independent of the
//! worker count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{axis_angle, Mat3, PinholeIntrinsics, RigidTransform, Rotation6D, Vec2, Vec3, WeakPerspective};
use crate::layout::{ParamLayout, Task};
use crate::model::{KinematicModel, ModelKind, PoseEval, PoseInput, LEFT, RIGHT};
use crate::par::Exec;
use crate::residuals::{half_space_visibility, Body2dObs, FaceObs, HmdObs, Observation, FINGERTIPS};

pub const DATASET_FORMAT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    /// Hands always observed.
    Full,
    /// Hands observed only in front of the headset plane.
    Half,
}

impl std::str::FromStr for Visibility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Visibility::Full),
            "half" => Ok(Visibility::Half),
            _ => Err(Error::BadConfig(format!("unknown visibility `{s}` (full | half)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::BadConfig(format!("unknown split `{s}` (train | val | test)"))),
        }
    }
}

impl Split {
    pub fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Val => 1.0,
            Split::Test => 2.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

/// Sampling ranges. Joint rotations are drawn about a uniform axis with an
/// angle uniform in `[0, limit]`; `scale` multiplies every range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRanges {
    pub scale: f64,
    /// Root rotation about the vertical axis (body) or any axis (face), radians.
    pub root_yaw: f64,
    pub root_tilt: f64,
    /// Limit for joints without a specific one, radians.
    pub joint_angle: f64,
    /// Half-width of the horizontal root translation box, meters.
    pub translation: f64,
    /// Standard deviation of shape and expression coefficients.
    pub shape_sigma: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self { scale: 1.0, root_yaw: std::f64::consts::PI, root_tilt: 0.15, joint_angle: 0.5, translation: 0.5, shape_sigma: 1.0 }
    }
}

/// Per-joint angle limits of the humanoid, radians.
const HUMANOID_LIMITS: [f64; 16] = [0.0, 0.3, 0.3, 0.4, 1.5, 1.3, 0.6, 1.5, 1.3, 0.6, 0.8, 1.0, 0.4, 0.8, 1.0, 0.4];
const FACE_LIMITS: [f64; 4] = [0.3, 0.2, 0.2, 0.2];
const FACE_DISTANCE: f64 = 0.6;

impl PoseRanges {
    pub fn joint_limit(&self, model: &KinematicModel, j: usize) -> f64 {
        let base = match (model.kind, model.num_joints()) {
            (ModelKind::Body, 16) if model.wrist_joints.is_some() => HUMANOID_LIMITS[j],
            (ModelKind::Face, 4) => FACE_LIMITS[j],
            _ => self.joint_angle,
        };
        base * self.scale
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Rotation about a uniform axis by an angle uniform in `[0, limit]`.
pub fn sample_rotation(rng: &mut ChaCha8Rng, limit: f64) -> Mat3 {
    let axis = random_axis(rng);
    let angle = if limit > 0.0 { rng.gen_range(0.0..=limit) } else { 0.0 };
    axis_angle(&axis, angle)
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

/// Ground-truth parameters plus the wearer's shape (the HMD layout does not
/// carry shape; elsewhere `shape` duplicates the layout's shape block).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPose {
    pub theta: Vec<f64>,
    pub shape: Vec<f64>,
}

/// Draws joint rotations within limits, shape, and a root placement. Bodies
/// stand with their lowest vertex in `[0, 1 cm]` above the ground plane;
/// faces sit in front of the camera.
pub fn sample_pose(model: &KinematicModel, layout: &ParamLayout, ranges: &PoseRanges, rng: &mut ChaCha8Rng) -> Result<SampledPose> {
    if !(ranges.scale >= 0.0 && ranges.root_yaw >= 0.0 && ranges.root_tilt >= 0.0 && ranges.joint_angle >= 0.0)
        || !(ranges.translation >= 0.0 && ranges.shape_sigma >= 0.0)
    {
        return Err(Error::BadConfig("pose ranges must be non-negative".into()));
    }
    let nj = model.num_joints();
    let mut theta = layout.rest_params();
    let s = ranges.scale;
    for j in 0..nj {
        let rot = if j == 0 {
            match model.kind {
                ModelKind::Face => sample_rotation(rng, ranges.joint_limit(model, 0)),
                ModelKind::Body => {
                    let yaw = if ranges.root_yaw * s > 0.0 { rng.gen_range(-1.0..=1.0) * ranges.root_yaw * s } else { 0.0 };
                    let tilt_axis = Vec3::new(rng.sample(StandardNormal), 0.0, rng.sample(StandardNormal));
                    let tilt = if ranges.root_tilt * s > 0.0 { rng.gen_range(0.0..=ranges.root_tilt * s) } else { 0.0 };
                    axis_angle(&Vec3::y(), yaw) * axis_angle(&tilt_axis, tilt)
                }
            }
        } else {
            sample_rotation(rng, ranges.joint_limit(model, j))
        };
        theta[layout.rotation(j)].copy_from_slice(&Rotation6D::from_matrix(&rot).0);
    }
    let shape: Vec<f64> = (0..model.num_shape()).map(|_| gauss(rng, ranges.shape_sigma * s)).collect();
    if let Some(r) = layout.shape_range() {
        theta[r].copy_from_slice(&shape);
    }
    if let Some(r) = layout.expr_range() {
        for i in r {
            theta[i] = gauss(rng, ranges.shape_sigma * s);
        }
    }
    let t = layout.root_translation();
    match model.kind {
        ModelKind::Face => {
            let jitter = [0.02, 0.02, 0.05].map(|w| rng.gen_range(-1.0..=1.0) * w * s);
            theta[t.start] = jitter[0];
            theta[t.start + 1] = -0.1 + jitter[1];
            theta[t.start + 2] = FACE_DISTANCE + jitter[2];
        }
        ModelKind::Body => {
            let w = ranges.translation * s;
            let (x, z) = if w > 0.0 { (rng.gen_range(-w..=w), rng.gen_range(-w..=w)) } else { (0.0, 0.0) };
            theta[t.start] = x;
            theta[t.start + 2] = z;
            let eval = PoseEval::new(model, PoseInput::from_theta(layout, &theta, &shape)?)?;
            let lowest = eval.vertices().iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
            let lift = if s > 0.0 { rng.gen_range(0.0..0.01) } else { 0.0 };
            theta[t.start + 1] = -lowest + lift;
        }
    }
    Ok(SampledPose { theta, shape })
}

/// Small rotation perturbation with per-axis standard deviation `sigma`.
fn perturb_rotation(rot: &Mat3, sigma: f64, rng: &mut ChaCha8Rng) -> Mat3 {
    let w = Vec3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma));
    rot * axis_angle(&w, w.norm())
}

fn perturb_point(p: &Vec3, sigma: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    p + Vec3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmdNoise {
    /// Meters.
    pub position: f64,
    /// Radians per axis.
    pub rotation: f64,
}

impl Default for HmdNoise {
    fn default() -> Self {
        Self { position: 0.005, rotation: 0.01 }
    }
}

/// Headset, wrist and fingertip signals. Visibility is decided on the
/// noiseless wrist position in the noiseless headset frame.
pub fn make_hmd_record(
    model: &KinematicModel,
    layout: &ParamLayout,
    pose: &SampledPose,
    calib: &RigidTransform,
    visibility: Visibility,
    noise: HmdNoise,
    rng: &mut ChaCha8Rng,
) -> Result<Observation> {
    let head = model.head_joint.ok_or_else(|| Error::BadConfig("model has no head joint".into()))?;
    let wrists = model.wrist_joints.ok_or_else(|| Error::BadConfig("model has no wrist joints".into()))?;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, &pose.theta, &pose.shape)?)?;
    let headset = eval.world()[head].compose(calib);
    let visible = match visibility {
        Visibility::Full => [true, true],
        Visibility::Half => {
            let v = half_space_visibility(&headset, &[eval.world()[wrists[LEFT]].trans, eval.world()[wrists[RIGHT]].trans]);
            [v[0], v[1]]
        }
    };
    let noisy = |t: &RigidTransform, rng: &mut ChaCha8Rng| {
        RigidTransform::new(perturb_rotation(&t.rot, noise.rotation, rng), perturb_point(&t.trans, noise.position, rng))
    };
    let headset = noisy(&headset, rng);
    let mut wrist_obs = [RigidTransform::identity(); 2];
    let mut tips: [Vec<Vec3>; 2] = [Vec::new(), Vec::new()];
    for side in [LEFT, RIGHT] {
        shape_check(model.fingertips[side].len() == FINGERTIPS, || "model needs five fingertips per hand".into())?;
        let w = noisy(&eval.world()[wrists[side]], rng);
        let t: Vec<Vec3> = model.fingertips[side].iter().map(|&v| perturb_point(&eval.vertex(v), noise.position, rng)).collect();
        // Unobserved hands carry no signal.
        if visible[side] {
            wrist_obs[side] = w;
            tips[side] = t;
        } else {
            tips[side] = vec![Vec3::zeros(); FINGERTIPS];
        }
    }
    Ok(Observation::Hmd(HmdObs { headset, wrists: wrist_obs, fingertips: tips, visible, shape: pose.shape.clone() }))
}

/// Samples the weak-perspective camera used for body keypoints.
pub fn sample_camera(rng: &mut ChaCha8Rng) -> WeakPerspective {
    WeakPerspective {
        scale: rng.gen_range(120.0..180.0),
        offset: Vec2::new(256.0 + rng.gen_range(-30.0..30.0), 256.0 + rng.gen_range(-30.0..30.0)),
    }
}

/// Writes `cam` into the camera slots of `theta` and returns projected
/// joints with pixel noise; dropped joints get confidence 0.
pub fn make_body2d_record(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &mut [f64],
    cam: &WeakPerspective,
    sigma: f64,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Observation> {
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::BadConfig(format!("dropout rate {dropout} outside [0, 1]")));
    }
    let s = layout.camera_scale().ok_or_else(|| Error::BadConfig("layout has no camera".into()))?;
    theta[s] = cam.scale;
    theta[s + 1] = cam.offset.x;
    theta[s + 2] = cam.offset.y;
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, &[])?)?;
    let mut keypoints = Vec::with_capacity(model.num_joints());
    let mut confidence = Vec::with_capacity(model.num_joints());
    for t in eval.world() {
        let p = cam.project_point(&t.trans);
        keypoints.push(p + Vec2::new(gauss(rng, sigma), gauss(rng, sigma)));
        let dropped = dropout > 0.0 && rng.gen_bool(dropout);
        confidence.push(if dropped { 0.0 } else { 1.0 });
    }
    Ok(Observation::Body2d(Body2dObs { keypoints, confidence }))
}

/// Perspective-projected landmarks with pixel noise.
pub fn make_face_record(
    model: &KinematicModel,
    layout: &ParamLayout,
    theta: &[f64],
    k: &PinholeIntrinsics,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Observation> {
    let eval = PoseEval::new(model, PoseInput::from_theta(layout, theta, &[])?)?;
    let landmarks = model
        .landmark_indices
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = eval.vertex(v);
            let q = k.project_point(&p).ok_or(Error::BehindCamera { index: i, z: p.z })?;
            Ok(q + Vec2::new(gauss(rng, sigma), gauss(rng, sigma)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Observation::Face(FaceObs { landmarks, intrinsics: *k }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    /// Train / val / test fractions; `None` uses the task default.
    pub split: Option<[f64; 3]>,
    /// Multiplies the task's default noise (1 px for 2D tasks; 5 mm and
    /// 0.01 rad for HMD).
    pub noise: f64,
    pub visibility: Visibility,
    /// Fraction of body keypoints reported as missing.
    pub dropout: f64,
    pub seed: u64,
    pub ranges: PoseRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 24_000,
            split: None,
            noise: 1.0,
            visibility: Visibility::Half,
            dropout: 0.0,
            seed: 0,
            ranges: PoseRanges::default(),
        }
    }
}

pub fn default_split(task: Task) -> [f64; 3] {
    match task {
        Task::Face => [0.8, 0.0, 0.2],
        _ => [10.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0],
    }
}

/// Record counts per split: `⌊f_train n⌋`, `⌊f_val n⌋`, rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadConfig(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let train = ((n as f64 * fractions[0]) + 1e-9).floor() as usize;
    let val = (((n as f64 * fractions[1]) + 1e-9).floor() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub split: Split,
    pub theta: Vec<f64>,
    pub obs: Observation,
}

impl DatasetRecord {
    /// Shape of the subject, wherever the layout keeps it.
    pub fn shape<'a>(&'a self, layout: &ParamLayout) -> &'a [f64] {
        match layout.shape_range() {
            Some(r) => &self.theta[r],
            None => self.obs.fixed_shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub seed: u64,
    pub config_hash: u64,
    pub records: Vec<DatasetRecord>,
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates one record; a pure function of (model, config, index).
pub fn make_record(
    model: &KinematicModel,
    layout: &ParamLayout,
    config: &DataConfig,
    calib: &RigidTransform,
    index: u64,
    split: Split,
) -> Result<DatasetRecord> {
    let mut rng = record_rng(config.seed, index);
    let mut pose = sample_pose(model, layout, &config.ranges, &mut rng)?;
    let obs = match layout.task {
        Task::Hmd => {
            let noise = HmdNoise { position: 0.005 * config.noise, rotation: 0.01 * config.noise };
            make_hmd_record(model, layout, &pose, calib, config.visibility, noise, &mut rng)?
        }
        Task::Body2d => {
            let cam = sample_camera(&mut rng);
            make_body2d_record(model, layout, &mut pose.theta, &cam, config.noise, config.dropout, &mut rng)?
        }
        Task::Face => make_face_record(model, layout, &pose.theta, &PinholeIntrinsics::default(), config.noise, &mut rng)?,
    };
    Ok(DatasetRecord { id: index, split, theta: pose.theta, obs })
}

pub fn generate_dataset(
    model: &KinematicModel,
    task: Task,
    config: &DataConfig,
    calib: &RigidTransform,
    config_hash: u64,
    exec: Exec,
) -> Result<Dataset> {
    if config.noise < 0.0 {
        return Err(Error::BadConfig("noise must be non-negative".into()));
    }
    let layout = ParamLayout::for_model(task, model)?;
    let counts = split_counts(config.count, config.split.unwrap_or_else(|| default_split(task)))?;
    let split_of = |i: usize| {
        if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        }
    };
    let records = exec.try_map_range(config.count, |i| make_record(model, &layout, config, calib, i as u64, split_of(i)))?;
    Ok(Dataset { task, seed: config.seed, config_hash, records })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn by_id(&self, id: u64) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.records.len();
        let mut c = Container::new();
        let [hi, lo] = crate::container::split_u64(self.seed);
        let [hh, hl] = crate::container::split_u64(self.config_hash);
        c.push("meta", &[7], vec![DATASET_FORMAT, self.task.code(), n as f64, hi, lo, hh, hl]);
        c.push("index", &[n], self.records.iter().map(|r| r.id as f64).collect());
        c.push("split", &[n], self.records.iter().map(|r| r.split.code()).collect());
        let p = self.records.first().map_or(0, |r| r.theta.len());
        shape_check(self.records.iter().all(|r| r.theta.len() == p && r.obs.task() == self.task), || {
            "records disagree on task or parameter length".into()
        })?;
        c.push("gt", &[n, p], self.records.iter().flat_map(|r| r.theta.iter().copied()).collect());
        match self.task {
            Task::Body2d => {
                let obs: Vec<&Body2dObs> = self.records.iter().map(|r| match &r.obs {
                    Observation::Body2d(o) => o,
                    _ => unreachable!("task checked above"),
                }).collect();
                let j = obs.first().map_or(0, |o| o.keypoints.len());
                c.push("keypoints", &[n, j, 2], obs.iter().flat_map(|o| o.keypoints.iter().flat_map(|p| [p.x, p.y])).collect());
                c.push("confidence", &[n, j], obs.iter().flat_map(|o| o.confidence.iter().copied()).collect());
            }
            Task::Hmd => {
                let obs: Vec<&HmdObs> = self.records.iter().map(|r| match &r.obs {
                    Observation::Hmd(o) => o,
                    _ => unreachable!("task checked above"),
                }).collect();
                let b = obs.first().map_or(0, |o| o.shape.len());
                c.push("headset", &[n, 12], obs.iter().flat_map(|o| o.headset.flatten12()).collect());
                c.push("wrists", &[n, 2, 12], obs.iter().flat_map(|o| o.wrists.iter().flat_map(|w| w.flatten12())).collect());
                c.push(
                    "fingertips",
                    &[n, 2, FINGERTIPS, 3],
                    obs.iter().flat_map(|o| o.fingertips.iter().flatten().flat_map(|p| [p.x, p.y, p.z])).collect(),
                );
                c.push("visible", &[n, 2], obs.iter().flat_map(|o| o.visible.map(|v| if v { 1.0 } else { 0.0 })).collect());
                c.push("shape", &[n, b], obs.iter().flat_map(|o| o.shape.iter().copied()).collect());
            }
            Task::Face => {
                let obs: Vec<&FaceObs> = self.records.iter().map(|r| match &r.obs {
                    Observation::Face(o) => o,
                    _ => unreachable!("task checked above"),
                }).collect();
                let pn = obs.first().map_or(0, |o| o.landmarks.len());
                c.push("landmarks", &[n, pn, 2], obs.iter().flat_map(|o| o.landmarks.iter().flat_map(|p| [p.x, p.y])).collect());
                c.push(
                    "intrinsics",
                    &[n, 4],
                    obs.iter().flat_map(|o| [o.intrinsics.fx, o.intrinsics.fy, o.intrinsics.cx, o.intrinsics.cy]).collect(),
                );
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.get("meta")?;
        if meta.data.len() != 7 || meta.data[0] != DATASET_FORMAT {
            return Err(Error::Format("not a dataset container".into()));
        }
        let task = Task::from_code(meta.data[1])?;
        let n = meta.data[2] as usize;
        let seed = crate::container::join_u64(meta.data[3], meta.data[4])?;
        let config_hash = crate::container::join_u64(meta.data[5], meta.data[6])?;
        let ids = c.get_shaped("index", &[n])?.as_indices()?;
        let splits = c.get_shaped("split", &[n])?;
        let gt = c.get("gt")?;
        if gt.dims.len() != 2 || gt.dims[0] != n {
            return Err(Error::Format("gt array has the wrong shape".into()));
        }
        let p = gt.dims[1];
        let row = |name: &str, i: usize| -> Result<Vec<f64>> {
            let a = c.get(name)?;
            if a.dims.first() != Some(&n) {
                return Err(Error::Format(format!("`{name}` has the wrong record count")));
            }
            let w = a.len() / n.max(1);
            Ok(a.data[i * w..(i + 1) * w].to_vec())
        };
        let pts2 = |v: &[f64]| v.chunks_exact(2).map(|q| Vec2::new(q[0], q[1])).collect::<Vec<_>>();
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let obs = match task {
                Task::Body2d => Observation::Body2d(Body2dObs {
                    keypoints: pts2(&row("keypoints", i)?),
                    confidence: row("confidence", i)?,
                }),
                Task::Hmd => {
                    let w = row("wrists", i)?;
                    let f = row("fingertips", i)?;
                    let v = row("visible", i)?;
                    if w.len() != 24 || f.len() != 6 * FINGERTIPS || v.len() != 2 {
                        return Err(Error::Format("hmd arrays have the wrong shape".into()));
                    }
                    let tips = |s: usize| f[s * 3 * FINGERTIPS..(s + 1) * 3 * FINGERTIPS].chunks_exact(3).map(|q| Vec3::new(q[0], q[1], q[2])).collect();
                    Observation::Hmd(HmdObs {
                        headset: RigidTransform::from_flat12(&row("headset", i)?),
                        wrists: [RigidTransform::from_flat12(&w[..12]), RigidTransform::from_flat12(&w[12..])],
                        fingertips: [tips(0), tips(1)],
                        visible: [v[0] != 0.0, v[1] != 0.0],
                        shape: row("shape", i)?,
                    })
                }
                Task::Face => {
                    let k = row("intrinsics", i)?;
                    if k.len() != 4 {
                        return Err(Error::Format("intrinsics must hold 4 values".into()));
                    }
                    Observation::Face(FaceObs {
                        landmarks: pts2(&row("landmarks", i)?),
                        intrinsics: PinholeIntrinsics { fx: k[0], fy: k[1], cx: k[2], cy: k[3] },
                    })
                }
            };
            records.push(DatasetRecord {
                id: ids[i] as u64,
                split: Split::from_code(splits.data[i])?,
                theta: gt.data[i * p..(i + 1) * p].to_vec(),
                obs,
            });
        }
        Ok(Self { task, seed, config_hash, records })
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.to_container()?.write(path)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_container(&Container::read(path)?)
}
