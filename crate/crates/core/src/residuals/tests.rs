use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{make_record, DataConfig, DatasetRecord, Split, Visibility};
use crate::geometry::{axis_angle, Mat3, Rotation6D};
use crate::testutil::{body_model, face_model, fd_jacobian, max_rel_error, model_for, perturb};

fn noiseless(task: Task, model: &KinematicModel, seed: u64, visibility: Visibility) -> DatasetRecord {
    let config = DataConfig { noise: 0.0, seed, visibility, ..DataConfig::default() };
    let layout = ParamLayout::for_model(task, model).unwrap();
    make_record(model, &layout, &config, &default_calibration(), seed, Split::Train).unwrap()
}

fn eval(term: &DataTerm, theta: &[f64], obs: &Observation) -> ResidualPacket {
    term.evaluate(theta, obs, true).unwrap()
}

#[test]
fn ground_truth_gives_zero_residuals() {
    for task in [Task::Body2d, Task::Hmd, Task::Face] {
        let m = model_for(task);
        let term = DataTerm::new(&m, task).unwrap();
        for seed in 0..5 {
            let rec = noiseless(task, &m, seed, Visibility::Full);
            let p = eval(&term, &rec.theta, &rec.obs);
            assert_eq!(p.r.len(), term.num_residuals());
            assert!(p.r.iter().all(|x| *x == 0.0), "{task}: {:?}", p.r);
            assert_eq!(p.data_term(), 0.0);
        }
    }
}

#[test]
fn zero_confidence_masks_joint() {
    let m = body_model();
    let term = DataTerm::new(&m, Task::Body2d).unwrap();
    let rec = noiseless(Task::Body2d, &m, 3, Visibility::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.2, 0.05);
    let Observation::Body2d(mut obs) = rec.obs else { unreachable!() };
    obs.confidence[4] = 0.0;
    let p = eval(&term, &theta, &Observation::Body2d(obs));
    assert_eq!(&p.r[8..10], &[0.0, 0.0]);
    assert_eq!(&p.mask[8..10], &[0.0, 0.0]);
    let j = p.jacobian.unwrap();
    assert!(j.rows(8, 2).iter().all(|x| *x == 0.0));
    assert!(p.r.iter().filter(|x| **x != 0.0).count() > 20);
}

/// Scalar recomputation from forward kinematics with explicit loops.
fn body2d_oracle(m: &KinematicModel, layout: &ParamLayout, theta: &[f64], obs: &Body2dObs) -> f64 {
    let nj = m.num_joints();
    let shape = &theta[layout.shape_range().unwrap()];
    let t = layout.root_translation();
    let fk = m
        .forward_kinematics(&theta[layout.rotations()], &Vec3::new(theta[t.start], theta[t.start + 1], theta[t.start + 2]), &m.rest_joints(shape).unwrap())
        .unwrap();
    let s = theta[layout.camera_scale().unwrap()];
    let o = layout.camera_offset().unwrap().start;
    let mut total = 0.0;
    for j in 0..nj {
        let c = obs.confidence[j];
        if c <= 0.0 {
            continue;
        }
        let px = s * fk[j].trans.x + theta[o];
        let py = s * fk[j].trans.y + theta[o + 1];
        total += (c * (obs.keypoints[j].x - px)).powi(2) + (c * (obs.keypoints[j].y - py)).powi(2);
    }
    total
}

#[test]
fn body2d_matches_scalar_oracle() {
    let m = body_model();
    let term = DataTerm::new(&m, Task::Body2d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let rec = noiseless(Task::Body2d, &m, seed, Visibility::Full);
        let Observation::Body2d(mut obs) = rec.obs else { unreachable!() };
        for c in obs.confidence.iter_mut() {
            *c = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.1..1.0) };
        }
        let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.1);
        let oracle = body2d_oracle(&m, &term.layout, &theta, &obs);
        let got = body2d_residuals(&m, &term.layout, &theta, &obs, false).unwrap().data_term();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }
}

#[test]
fn shape_columns_are_projected_joint_basis_on_linear_subpath() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let mut theta = layout.rest_params();
    let s = layout.camera_scale().unwrap();
    theta[s] = 1.0;
    let obs = Body2dObs { keypoints: vec![Vec2::zeros(); m.num_joints()], confidence: vec![1.0; m.num_joints()] };
    let j = body2d_residuals(&m, &layout, &theta, &obs, true).unwrap().jacobian.unwrap();
    for (k, col) in layout.shape_range().unwrap().enumerate() {
        for joint in 0..m.num_joints() {
            for a in 0..2 {
                let expected = -m.joint_shape_basis[(3 * joint + a, k)];
                assert!((j[(2 * joint + a, col)] - expected).abs() < 1e-14);
            }
        }
    }
}

/// Term-by-term evaluation of the HMD energy with plain matrices.
fn hmd_oracle(m: &KinematicModel, layout: &ParamLayout, theta: &[f64], obs: &HmdObs, calib: &RigidTransform) -> f64 {
    let t = layout.root_translation();
    let fk = m
        .forward_kinematics(&theta[layout.rotations()], &Vec3::new(theta[t.start], theta[t.start + 1], theta[t.start + 2]), &m.rest_joints(&obs.shape).unwrap())
        .unwrap();
    let verts = m.lbs_vertices(layout, theta, &obs.shape).unwrap();
    let frob = |a: &RigidTransform, b: &RigidTransform| (a.to_3x4() - b.to_3x4()).norm_squared();
    let head = m.head_joint.unwrap();
    let hmd = RigidTransform::new(fk[head].rot * calib.rot, fk[head].rot * calib.trans + fk[head].trans);
    let mut total = frob(&obs.headset, &hmd);
    for side in [LEFT, RIGHT] {
        if !obs.visible[side] {
            continue;
        }
        total += frob(&obs.wrists[side], &fk[m.wrist_joints.unwrap()[side]]);
        for (f, &v) in m.fingertips[side].iter().enumerate() {
            total += (obs.fingertips[side][f] - verts[v]).norm_squared();
        }
    }
    total
}

#[test]
fn hmd_matches_term_by_term_oracle() {
    let m = body_model();
    let term = DataTerm::new(&m, Task::Hmd).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let rec = noiseless(Task::Hmd, &m, seed, Visibility::Full);
        let Observation::Hmd(mut obs) = rec.obs else { unreachable!() };
        obs.visible = [rng.gen_bool(0.5), rng.gen_bool(0.5)];
        let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.1);
        let got = hmd_residuals(&m, &term.layout, &theta, &obs, &term.calib, false).unwrap().data_term();
        assert_relative_eq!(got, hmd_oracle(&m, &term.layout, &theta, &obs, &term.calib), max_relative = 1e-12);
    }
}

/// Joints that move only the given wrist: ancestors of it that are not
/// ancestors of the head or the other wrist.
fn arm_joints(m: &KinematicModel, side: usize) -> Vec<usize> {
    let [l, r] = m.wrist_joints.unwrap();
    let (own, other) = if side == LEFT { (l, r) } else { (r, l) };
    let head = m.head_joint.unwrap();
    (0..m.num_joints())
        .filter(|&j| m.ancestors(own).contains(&j) && !m.ancestors(other).contains(&j) && !m.ancestors(head).contains(&j))
        .collect()
}

#[test]
fn invisible_hand_is_masked_and_has_zero_gradient() {
    let m = body_model();
    let term = DataTerm::new(&m, Task::Hmd).unwrap();
    let rec = noiseless(Task::Hmd, &m, 9, Visibility::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.1);
    let Observation::Hmd(mut obs) = rec.obs else { unreachable!() };
    obs.visible[LEFT] = false;
    let p = eval(&term, &theta, &Observation::Hmd(obs.clone()));
    let left = 12..12 + 27;
    assert!(p.r[left.clone()].iter().all(|x| *x == 0.0));
    assert!(p.mask[left.clone()].iter().all(|x| *x == 0.0));
    let arm = arm_joints(&m, LEFT);
    assert!(arm.len() >= 3, "{arm:?}");
    let g = p.grad.as_ref().unwrap();
    let j = p.jacobian.as_ref().unwrap();
    for joint in &arm {
        for c in term.layout.rotation(*joint) {
            assert_eq!(g[c], 0.0);
            assert!(j.column(c).iter().all(|x| *x == 0.0));
        }
    }
    // Moving the left arm leaves the data term unchanged.
    let mut moved = theta.clone();
    let r = term.layout.rotation(arm[0]);
    moved[r].copy_from_slice(&Rotation6D::from_matrix(&axis_angle(&Vec3::x(), 1.0)).0);
    let q = eval(&term, &moved, &Observation::Hmd(obs));
    assert_eq!(q.data_term(), p.data_term());
}

#[test]
fn face_one_pixel_offset_and_oracle() {
    let m = face_model();
    let term = DataTerm::new(&m, Task::Face).unwrap();
    let rec = noiseless(Task::Face, &m, 1, Visibility::Full);
    let Observation::Face(obs) = rec.obs.clone() else { unreachable!() };
    let np = obs.landmarks.len();
    let shifted = FaceObs { landmarks: obs.landmarks.iter().map(|p| p + Vec2::new(1.0, 0.0)).collect(), ..obs.clone() };
    let p = face_residuals(&m, &term.layout, &rec.theta, &shifted, false).unwrap();
    assert_relative_eq!(p.data_term(), np as f64, max_relative = 1e-9);
    let both = FaceObs { landmarks: obs.landmarks.iter().map(|p| p + Vec2::new(1.0, 1.0)).collect(), ..obs.clone() };
    assert_relative_eq!(face_residuals(&m, &term.layout, &rec.theta, &both, false).unwrap().data_term(), 2.0 * np as f64, max_relative = 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.2, 0.05);
        let lm = m.landmarks(&term.layout, &theta, &[]).unwrap();
        let k = &obs.intrinsics;
        let oracle: f64 = lm
            .iter()
            .zip(&obs.landmarks)
            .map(|(p, q)| (q.x - (k.fx * p.x / p.z + k.cx)).powi(2) + (q.y - (k.fy * p.y / p.z + k.cy)).powi(2))
            .sum();
        let got = face_residuals(&m, &term.layout, &theta, &obs, false).unwrap().data_term();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }
}

#[test]
fn face_behind_camera_is_an_error() {
    let m = face_model();
    let layout = ParamLayout::for_model(Task::Face, &m).unwrap();
    let rec = noiseless(Task::Face, &m, 2, Visibility::Full);
    let Observation::Face(obs) = rec.obs else { unreachable!() };
    let mut theta = rec.theta.clone();
    theta[layout.root_translation().start + 2] = -1.0;
    assert!(matches!(face_residuals(&m, &layout, &theta, &obs, false), Err(Error::BehindCamera { .. })));
}

#[test]
fn mismatched_observations_are_rejected() {
    let m = body_model();
    let term = DataTerm::new(&m, Task::Body2d).unwrap();
    let rec = noiseless(Task::Hmd, &m, 0, Visibility::Full);
    assert!(matches!(term.evaluate(&rec.theta, &rec.obs, false), Err(Error::ShapeMismatch(_))));
    let bad = Body2dObs { keypoints: vec![Vec2::zeros(); 3], confidence: vec![1.0; 3] };
    assert!(matches!(term.evaluate(&term.layout.rest_params(), &Observation::Body2d(bad), false), Err(Error::ShapeMismatch(_))));
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for task in [Task::Body2d, Task::Hmd, Task::Face] {
        let m = model_for(task);
        let term = DataTerm::new(&m, task).unwrap();
        for seed in 0..4 {
            let rec = noiseless(task, &m, 100 + seed, Visibility::Half);
            let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.05);
            let p = eval(&term, &theta, &rec.obs);
            let fd = fd_jacobian(&theta, 1e-6, |t| term.evaluate(t, &rec.obs, false).unwrap().r);
            let err = max_rel_error(p.jacobian.as_ref().unwrap(), &fd);
            assert!(err < 1e-5, "{task}: {err:e}");
        }
    }
}

#[test]
fn gradient_is_twice_jt_masked_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for task in [Task::Body2d, Task::Hmd, Task::Face] {
        let m = model_for(task);
        let term = DataTerm::new(&m, task).unwrap();
        let rec = noiseless(task, &m, 3, Visibility::Half);
        let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.05);
        let p = eval(&term, &theta, &rec.obs);
        let j = p.jacobian.as_ref().unwrap();
        let mr = DVector::from_iterator(p.r.len(), p.r.iter().zip(&p.mask).map(|(r, m)| r * m));
        let g = j.transpose() * mr * 2.0;
        for (a, b) in g.iter().zip(p.grad.as_ref().unwrap()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}

#[test]
fn huber_option_matches_finite_differences_and_caps_growth() {
    let m = body_model();
    let mut term = DataTerm::new(&m, Task::Body2d).unwrap();
    term.options.huber = Some(2.0);
    let rec = noiseless(Task::Body2d, &m, 4, Visibility::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.05);
    let p = eval(&term, &theta, &rec.obs);
    let fd = fd_jacobian(&theta, 1e-6, |t| term.evaluate(t, &rec.obs, false).unwrap().r);
    assert!(max_rel_error(p.jacobian.as_ref().unwrap(), &fd) < 1e-5);
    let plain = DataTerm::new(&m, Task::Body2d).unwrap().evaluate(&theta, &rec.obs, false).unwrap();
    assert!(p.data_term() < plain.data_term());
}

#[test]
fn visibility_half_space() {
    let h = RigidTransform::new(axis_angle(&Vec3::new(0.3, 1.0, -0.2), 0.7), Vec3::new(0.1, 1.6, 0.4));
    let local = [Vec3::new(0.2, 0.1, -1.0), Vec3::new(0.5, -0.3, 0.0), Vec3::new(0.0, 0.0, 0.3)];
    let world: Vec<Vec3> = local.iter().map(|p| h.apply(p)).collect();
    let v = half_space_visibility(&h, &world);
    assert!(v[0]);
    assert!(!v[2]);
    // z = 0 is behind the headset; checked without roundoff in the identity frame.
    assert_eq!(half_space_visibility(&RigidTransform::identity(), &[Vec3::new(0.5, -0.3, 0.0)]), vec![false]);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let before = half_space_visibility(&h, &pts);
    let g = RigidTransform::new(axis_angle(&Vec3::new(-0.4, 0.2, 0.9), 2.1), Vec3::new(-3.0, 0.5, 2.0));
    let moved: Vec<Vec3> = pts.iter().map(|p| g.apply(p)).collect();
    let after = half_space_visibility(&g.compose(&h), &moved);
    let flipped = before.iter().zip(&after).zip(&pts).filter(|((a, b), p)| a != b && h.inverse().apply(p).z.abs() > 1e-9).count();
    assert_eq!(flipped, 0);
}

#[test]
fn describe_covers_every_residual_once() {
    for task in [Task::Body2d, Task::Hmd, Task::Face] {
        let m = model_for(task);
        let term = DataTerm::new(&m, task).unwrap();
        let mut seen = vec![0; term.num_residuals()];
        for (_, r) in term.describe() {
            for i in r {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|c| *c == 1), "{task}");
    }
}

fn spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn dense_nll(w: f64, mu: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let d = x.len() as f64;
    let inv = cov.clone().try_inverse().unwrap();
    let diff = x - mu;
    -(w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * (diff.transpose() * inv * diff)[(0, 0)])
}

#[test]
fn gmm_single_component_at_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 5;
    let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let cov = spd(&mut rng, d);
    let g = Gmm::new(vec![1.0], vec![mu.clone()], vec![cov.clone()]).unwrap();
    let (v, grad) = gmm_prior(mu.as_slice(), &g).unwrap();
    let expected = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * cov.determinant().ln();
    assert_relative_eq!(v, expected, max_relative = 1e-12);
    assert!(grad.iter().all(|x| x.abs() < 1e-14));
}

#[test]
fn gmm_is_min_over_components_and_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 4;
    let ws = vec![0.3, 0.7];
    let mus: Vec<DVector<f64>> = (0..2).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let covs: Vec<DMatrix<f64>> = (0..2).map(|_| spd(&mut rng, d)).collect();
    let g = Gmm::new(ws.clone(), mus.clone(), covs.clone()).unwrap();
    for _ in 0..50 {
        let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let singles: Vec<f64> = (0..2).map(|j| dense_nll(ws[j], &mus[j], &covs[j], &x)).collect();
        let (v, grad) = gmm_prior(x.as_slice(), &g).unwrap();
        assert_relative_eq!(v, singles[0].min(singles[1]), max_relative = 1e-10);
        let j = if singles[0] < singles[1] { 0 } else { 1 };
        let oracle = covs[j].clone().try_inverse().unwrap() * (&x - &mus[j]);
        for (a, b) in grad.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn gmm_rejects_bad_parameters() {
    let d = 2;
    let mu = DVector::zeros(d);
    let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(Gmm::new(vec![1.0], vec![mu.clone()], vec![not_pd]), Err(Error::BadPrior(_))));
    assert!(matches!(Gmm::new(vec![0.5], vec![mu.clone()], vec![DMatrix::identity(2, 2)]), Err(Error::BadPrior(_))));
    assert!(matches!(Gmm::new(vec![], vec![], vec![]), Err(Error::BadPrior(_))));
}

#[test]
fn gmm_residual_reproduces_prior_value() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 6 * (m.num_joints() - 1);
    let g = Gmm::new(
        vec![0.4, 0.6],
        (0..2).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-0.2..0.2))).collect(),
        (0..2).map(|_| DMatrix::identity(d, d) * rng.gen_range(0.05..0.2)).collect(),
    )
    .unwrap();
    let theta = perturb(&layout, &layout.rest_params(), &mut rng, 0.4, 0.1);
    let res = gmm_residual(&layout, &theta, &g).unwrap();
    let (v, grad) = gmm_prior(prior_pose(&layout, &theta), &g).unwrap();
    assert_relative_eq!(res.value(), v, max_relative = 1e-12);
    let full = res.gradient();
    for (a, b) in full[6..6 * m.num_joints()].iter().zip(&grad) {
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
    }
    assert!(full[..6].iter().chain(&full[6 * m.num_joints()..]).all(|x| *x == 0.0));
}

#[test]
fn gmm_container_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = Gmm::new(vec![0.25, 0.75], (0..2).map(|_| DVector::from_fn(3, |_, _| rng.gen())).collect(), (0..2).map(|_| spd(&mut rng, 3)).collect()).unwrap();
    let mut c = crate::container::Container::new();
    g.to_container(&mut c, "prior.");
    let back = Gmm::from_container(&crate::container::Container::from_bytes(&c.to_bytes()).unwrap(), "prior.").unwrap();
    assert_eq!(back, g);
}

fn with_root(layout: &ParamLayout, rot: &Mat3) -> Vec<f64> {
    let mut t = layout.rest_params();
    t[layout.rotation(0)].copy_from_slice(&Rotation6D::from_matrix(rot).0);
    t
}

#[test]
fn gravity_values_and_gradient() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    assert_eq!(gravity_loss(&layout, &layout.rest_params()).unwrap().0, 0.0);
    let (v, _) = gravity_loss(&layout, &with_root(&layout, &axis_angle(&Vec3::y(), 1.3))).unwrap();
    assert!(v.abs() < 1e-15);
    let flipped = with_root(&layout, &axis_angle(&Vec3::x(), std::f64::consts::PI));
    assert_relative_eq!(gravity_loss(&layout, &flipped).unwrap().0, 2.0, max_relative = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let mut theta = layout.rest_params();
        for x in &mut theta[layout.rotation(0)] {
            *x += rng.gen_range(-0.6..0.6);
        }
        let (v, g) = gravity_loss(&layout, &theta).unwrap();
        assert!((0.0..=2.0 + 1e-12).contains(&v));
        let fd = fd_jacobian(&theta, 1e-6, |t| vec![gravity_loss(&layout, t).unwrap().0]);
        assert!(max_rel_error(&DMatrix::from_row_slice(1, g.len(), &g), &fd) < 1e-5);
        let res = gravity_residual(&layout, &theta).unwrap();
        let fdr = fd_jacobian(&theta, 1e-6, |t| gravity_residual(&layout, t).unwrap().r);
        assert!(max_rel_error(&res.jacobian, &fdr) < 1e-5);
    }
}

#[test]
fn gravity_rejects_degenerate_axis() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let mut theta = layout.rest_params();
    theta[layout.rotation(0)].copy_from_slice(&[0.0; 6]);
    assert!(gravity_loss(&layout, &theta).is_err());
}

#[test]
fn temporal_constant_sequence_is_zero() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let rec = noiseless(Task::Body2d, &m, 5, Visibility::Full);
    let (v, grads) = temporal_loss(&m, &layout, &vec![rec.theta.clone(); 4], &[]).unwrap();
    assert_eq!(v, 0.0);
    assert!(grads.iter().flatten().all(|x| *x == 0.0));
}

#[test]
fn temporal_single_moved_leaf_joint() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let leaf = (0..m.num_joints()).rev().find(|&j| !m.parents.contains(&Some(j))).unwrap();
    let a = layout.rest_params();
    let mut b = a.clone();
    b[layout.rotation(leaf)].copy_from_slice(&Rotation6D::from_matrix(&axis_angle(&Vec3::z(), 0.4)).0);
    let (v, _) = temporal_loss(&m, &layout, &[a.clone(), b.clone()], &[]).unwrap();
    let fk = |t: &[f64]| m.forward_kinematics(&t[layout.rotations()], &Vec3::zeros(), &m.rest_joints(&t[layout.shape_range().unwrap()]).unwrap()).unwrap();
    let (ta, tb) = (fk(&a), fk(&b));
    let expected = (tb[leaf].to_3x4() - ta[leaf].to_3x4()).norm();
    assert!(expected > 0.1);
    assert_relative_eq!(v, expected, max_relative = 1e-12);
}

#[test]
fn temporal_gradients_match_finite_differences() {
    let m = body_model();
    let layout = ParamLayout::for_model(Task::Body2d, &m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let base = noiseless(Task::Body2d, &m, 6, Visibility::Full).theta;
    let frames: Vec<Vec<f64>> = (0..3).map(|_| perturb(&layout, &base, &mut rng, 0.2, 0.05)).collect();
    let (_, grads) = temporal_loss(&m, &layout, &frames, &[]).unwrap();
    for f in 0..3 {
        let fd = fd_jacobian(&frames[f], 1e-6, |t| {
            let mut fr = frames.clone();
            fr[f] = t.to_vec();
            vec![temporal_loss(&m, &layout, &fr, &[]).unwrap().0]
        });
        assert!(max_rel_error(&DMatrix::from_row_slice(1, grads[f].len(), &grads[f]), &fd) < 1e-5);
    }
    let prev: Vec<RigidTransform> = {
        let t = &frames[0];
        let tr = layout.root_translation();
        m.forward_kinematics(&t[layout.rotations()], &Vec3::new(t[tr.start], t[tr.start + 1], t[tr.start + 2]), &m.rest_joints(&t[layout.shape_range().unwrap()]).unwrap()).unwrap()
    };
    let res = temporal_residual(&m, &layout, &frames[1], &[], &prev).unwrap();
    let fd = fd_jacobian(&frames[1], 1e-6, |t| temporal_residual(&m, &layout, t, &[], &prev).unwrap().r);
    assert!(max_rel_error(&res.jacobian, &fd) < 1e-5);
    assert_eq!(temporal_residual(&m, &layout, &frames[0], &[], &prev).unwrap().value(), 0.0);
}

#[test]
fn face_regularizer_weights_groups() {
    let m = face_model();
    let layout = ParamLayout::for_model(Task::Face, &m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let theta: Vec<f64> = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sq = |r: std::ops::Range<usize>| theta[r].iter().map(|x| x * x).sum::<f64>();
    let w = [0.5, 2.0, 3.0, 0.25];
    let expected = w[0] * sq(layout.rotations()) + w[1] * sq(layout.root_translation()) + w[2] * sq(layout.expr_range().unwrap()) + w[3] * sq(layout.shape_range().unwrap());
    let (v, g) = face_regularizer(&layout, &theta, w).unwrap();
    assert_relative_eq!(v, expected, max_relative = 1e-12);
    let e = layout.expr_range().unwrap().start;
    assert_relative_eq!(g[e], 2.0 * w[2] * theta[e], max_relative = 1e-12);
    assert_eq!(face_regularizer(&layout, &theta, [0.0; 4]).unwrap().0, 0.0);
}

fn gaussian_samples(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let nd = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|_| mean.iter().map(|m| m + nd.sample(rng)).collect()).collect()
}

#[test]
fn em_single_component_equals_sample_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let xs = gaussian_samples(&mut rng, 300, &[1.0, -2.0, 0.5], 0.7);
    let fit = fit_gmm_em(&xs, 1, 0, 50).unwrap();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..3).map(|a| xs.iter().map(|x| x[a]).sum::<f64>() / n).collect();
    for a in 0..3 {
        assert_relative_eq!(fit.gmm.means()[0][a], mean[a], epsilon = 1e-12);
        for b in 0..3 {
            let c = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / n + if a == b { 1e-6 } else { 0.0 };
            assert_relative_eq!(fit.gmm.covariances()[0][(a, b)], c, epsilon = 1e-10);
        }
    }
}

#[test]
fn em_recovers_separated_clusters_with_monotone_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (a, b) = ([0.0, 0.0], [10.0, 4.0]);
    let mut xs = gaussian_samples(&mut rng, 2000, &a, 1.0);
    xs.extend(gaussian_samples(&mut rng, 1000, &b, 1.0));
    let fit = fit_gmm_em(&xs, 2, 3, 200).unwrap();
    for target in [a, b] {
        let best = fit.gmm.means().iter().map(|m| ((m[0] - target[0]).powi(2) + (m[1] - target[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "{best}");
    }
    assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(matches!(fit_gmm_em(&xs[..1], 2, 0, 10), Err(Error::BadConfig(_))));
}

#[test]
fn reverse_mode_gradient_matches_jacobian_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for task in [Task::Body2d, Task::Hmd, Task::Face] {
        let m = model_for(task);
        for huber in [None, Some(3.0)] {
            let mut term = DataTerm::new(&m, task).unwrap();
            term.options.huber = huber;
            term.options.translation_weight = 2.0;
            for seed in 0..3 {
                let rec = noiseless(task, &m, 200 + seed, Visibility::Half);
                let theta = perturb(&term.layout, &rec.theta, &mut rng, 0.3, 0.05);
                let p = eval(&term, &theta, &rec.obs);
                let (v, g) = term.value_and_gradient(&theta, &rec.obs).unwrap();
                assert_eq!(v, p.data_term());
                let reference = p.grad.unwrap();
                let scale = reference.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12);
                for (a, b) in g.iter().zip(&reference) {
                    assert!((a - b).abs() <= 1e-9 * scale, "{task} {huber:?}: {a} vs {b}");
                }
            }
        }
    }
}
