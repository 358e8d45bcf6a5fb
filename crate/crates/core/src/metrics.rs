//! Evaluation metrics. Inputs are in meters, outputs in millimeters.

use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::DatasetRecord;
use crate::error::{shape_check, Error, Result};
use crate::geometry::{procrustes_align, Vec3};
use crate::layout::Task;
use crate::model::{PoseEval, PoseInput};
use crate::residuals::DataTerm;

pub const MM: f64 = 1000.0;

fn mean_distance(est: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    shape_check(est.len() == gt.len(), || format!("{} estimated vs {} reference points", est.len(), gt.len()))?;
    if est.is_empty() {
        return Err(Error::DegenerateInput("metric over an empty point set".into()));
    }
    Ok(est.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / est.len() as f64 * MM)
}

/// Mean per-vertex error, optionally over a subset of vertex indices.
pub fn v2v(est: &[Vec3], gt: &[Vec3], subset: Option<&[usize]>) -> Result<f64> {
    shape_check(est.len() == gt.len(), || format!("{} vs {} vertices", est.len(), gt.len()))?;
    match subset {
        None => mean_distance(est, gt),
        Some(idx) => {
            if idx.iter().any(|&i| i >= est.len()) {
                return Err(Error::ShapeMismatch("vertex subset index out of range".into()));
            }
            let pick = |v: &[Vec3]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            mean_distance(&pick(est), &pick(gt))
        }
    }
}

pub fn mpjpe(est: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(est, gt)
}

pub fn mplpe(est: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(est, gt)
}

/// `metric` after similarity-aligning the estimate to the reference.
pub fn pa(metric: impl Fn(&[Vec3], &[Vec3]) -> Result<f64>, est: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let a = procrustes_align(est, gt)?;
    metric(&a.aligned, gt)
}

/// Mean depth below the `y = 0` plane over the vertices below it; 0 when
/// none are.
pub fn ground_penetration(verts: &[Vec3]) -> f64 {
    let (sum, n) = verts.iter().filter(|v| v.y < 0.0).fold((0.0, 0usize), |(s, n), v| (s - v.y, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64 * MM
    }
}

/// Metric column names for a task. `data_term` is unitless; the rest are mm.
pub fn metric_columns(data: &DataTerm) -> Vec<String> {
    let mut cols = vec!["data_term".to_owned()];
    match data.layout.task {
        Task::Face => cols.extend(["mplpe", "v2v", "pa_v2v"].map(String::from)),
        Task::Body2d | Task::Hmd => {
            cols.extend(["mpjpe", "pa_mpjpe", "v2v", "pa_v2v", "ground"].map(String::from));
            cols.extend(data.model.parts.iter().map(|(n, _)| format!("v2v_{n}")));
        }
    }
    cols
}

/// Reference geometry of one record, computed once per instance.
pub struct Reference {
    vertices: Vec<Vec3>,
    joints: Vec<Vec3>,
    landmarks: Vec<Vec3>,
}

fn geometry(data: &DataTerm, theta: &[f64], shape: &[f64]) -> Result<Reference> {
    let eval = PoseEval::new(data.model, PoseInput::from_theta(&data.layout, theta, shape)?)?;
    let vertices = eval.vertices();
    let landmarks = data.model.landmark_indices.iter().map(|&i| vertices[i]).collect();
    Ok(Reference { joints: eval.joint_positions(), vertices, landmarks })
}

pub fn reference(data: &DataTerm, rec: &DatasetRecord) -> Result<Reference> {
    geometry(data, &rec.theta, rec.obs.fixed_shape())
}

/// Values in [`metric_columns`] order for one estimate.
pub fn evaluate_instance(data: &DataTerm, theta: &[f64], rec: &DatasetRecord, gt: &Reference) -> Result<Vec<f64>> {
    let est = geometry(data, theta, rec.obs.fixed_shape())?;
    let packet = data.evaluate(theta, &rec.obs, false)?;
    let mut out = vec![packet.data_term()];
    match data.layout.task {
        Task::Face => {
            out.push(mplpe(&est.landmarks, &gt.landmarks)?);
            out.push(v2v(&est.vertices, &gt.vertices, None)?);
            out.push(pa(|a, b| v2v(a, b, None), &est.vertices, &gt.vertices)?);
        }
        Task::Body2d | Task::Hmd => {
            out.push(mpjpe(&est.joints, &gt.joints)?);
            out.push(pa(mpjpe, &est.joints, &gt.joints)?);
            out.push(v2v(&est.vertices, &gt.vertices, None)?);
            out.push(pa(|a, b| v2v(a, b, None), &est.vertices, &gt.vertices)?);
            out.push(ground_penetration(&est.vertices));
            for (_, idx) in &data.model.parts {
                out.push(v2v(&est.vertices, &gt.vertices, Some(idx))?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: u64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: u64,
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.values[c]).collect())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        (0..self.columns.len()).map(|c| self.rows.iter().map(|r| r.values[c]).sum::<f64>() / n).collect()
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.mean()[c])
    }

    /// One row per instance and a final `mean` row, after a
    /// `# config_hash` comment line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={:016x}\nid,{}\n", self.config_hash, self.columns.join(","));
        let row = |s: &mut String, id: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{id},{}", vals.join(","));
        };
        for r in &self.rows {
            row(&mut s, &r.id.to_string(), &r.values);
        }
        row(&mut s, "mean", &self.mean());
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Mean of each metric at each iteration index. `per_instance[k][n]` holds
/// the metric values of instance `k` at iteration `n`; all instances must
/// have the same number of iterations.
pub fn curve_aggregate(per_instance: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = per_instance.first() else {
        return Ok(vec![]);
    };
    let (iters, cols) = (first.len(), first.first().map_or(0, |r| r.len()));
    shape_check(
        per_instance.iter().all(|t| t.len() == iters && t.iter().all(|r| r.len() == cols)),
        || "trajectories differ in length or metric count".into(),
    )?;
    let n = per_instance.len() as f64;
    Ok((0..iters)
        .map(|i| (0..cols).map(|c| per_instance.iter().map(|t| t[i][c]).sum::<f64>() / n).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveReport {
    pub config_hash: u64,
    pub columns: Vec<String>,
    /// Row `n` is the mean over instances at iteration `n`.
    pub means: Vec<Vec<f64>>,
}

impl CurveReport {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.means.iter().map(|r| r[c]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={:016x}\niter,{}\n", self.config_hash, self.columns.join(","));
        for (i, r) in self.means.iter().enumerate() {
            let vals: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{i},{}", vals.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-iteration metrics of one trajectory `Θ₀..Θ_N`.
pub fn evaluate_trajectory(data: &DataTerm, thetas: &[Vec<f64>], rec: &DatasetRecord) -> Result<Vec<Vec<f64>>> {
    let gt = reference(data, rec)?;
    thetas.iter().map(|t| evaluate_instance(data, t, rec, &gt)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DataConfig};
    use crate::geometry::axis_angle;
    use crate::par::Exec;
    use crate::residuals::default_calibration;
    use crate::testutil::body_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn distances_on_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 10);
        assert_eq!(v2v(&x, &x, None).unwrap(), 0.0);
        let shifted: Vec<Vec3> = x.iter().map(|p| p + Vec3::new(0.003, 0.0, 0.0)).collect();
        assert!((v2v(&shifted, &x, None).unwrap() - 3.0).abs() < 1e-9);
        let mut one = x.clone();
        one[4].z += 0.005;
        assert!((mpjpe(&one, &x).unwrap() - 0.5).abs() < 1e-9);
        let off = Vec3::new(0.001, 0.002, -0.002);
        let moved: Vec<Vec3> = x.iter().map(|p| p + off).collect();
        assert!((mplpe(&moved, &x).unwrap() - 3.0).abs() < 1e-9);
        assert!((v2v(&one, &x, Some(&[4])).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(v2v(&one, &x, Some(&[0, 1])).unwrap(), 0.0);
        assert!(v2v(&x, &x[..3], None).is_err());
        assert!(v2v(&x, &x, Some(&[10])).is_err());
    }

    #[test]
    fn distance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (cloud(&mut rng, 50), cloud(&mut rng, 50));
        let mut sum = 0.0;
        for i in 0..50 {
            let d = [a[i].x - b[i].x, a[i].y - b[i].y, a[i].z - b[i].z];
            sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        assert!((v2v(&a, &b, None).unwrap() - sum / 50.0 * 1000.0).abs() < 1e-9);
    }

    #[test]
    fn pa_is_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let gt = cloud(&mut rng, 20);
            let est: Vec<Vec3> = gt.iter().map(|p| p + cloud(&mut rng, 1)[0] * 0.05).collect();
            let raw = mpjpe(&est, &gt).unwrap();
            let aligned = pa(mpjpe, &est, &gt).unwrap();
            assert!(aligned <= raw + 1e-9);
            let r = axis_angle(&Vec3::new(0.3, -1.0, 0.5), rng.gen_range(-3.0..3.0));
            let (s, t) = (rng.gen_range(0.5..2.0), cloud(&mut rng, 1)[0]);
            let moved: Vec<Vec3> = est.iter().map(|p| r * p * s + t).collect();
            assert!((pa(mpjpe, &moved, &gt).unwrap() - aligned).abs() < 1e-9);
            let sim: Vec<Vec3> = gt.iter().map(|p| r * p * s + t).collect();
            assert!(pa(mpjpe, &sim, &gt).unwrap() < 1e-9);
        }
    }

    #[test]
    fn ground_penetration_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let above: Vec<Vec3> = (0..20).map(|_| Vec3::new(0.0, rng.gen_range(0.0..1.0), 0.0)).collect();
        assert_eq!(ground_penetration(&above), 0.0);
        let mut one = above.clone();
        one.push(Vec3::new(0.3, -0.005, 0.1));
        assert!((ground_penetration(&one) - 5.0).abs() < 1e-12);
        let mixed = cloud(&mut rng, 40);
        let below: Vec<f64> = mixed.iter().filter(|p| p.y < 0.0).map(|p| -p.y).collect();
        let oracle = below.iter().sum::<f64>() / below.len() as f64 * 1000.0;
        assert!((ground_penetration(&mixed) - oracle).abs() < 1e-9);
        let mut more = mixed.clone();
        more.extend(above);
        assert_eq!(ground_penetration(&more), ground_penetration(&mixed));
    }

    #[test]
    fn curves_average_instances() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![3.0, 0.0], vec![5.0, 8.0]];
        assert_eq!(curve_aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(curve_aggregate(&[a.clone(), b]).unwrap(), vec![vec![2.0, 1.0], vec![4.0, 6.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let many: Vec<Vec<Vec<f64>>> =
            (0..30).map(|_| (0..4).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()).collect();
        let agg = curve_aggregate(&many).unwrap();
        let mut running = vec![vec![0.0; 3]; 4];
        for (k, t) in many.iter().enumerate() {
            for i in 0..4 {
                for c in 0..3 {
                    running[i][c] += (t[i][c] - running[i][c]) / (k + 1) as f64;
                }
            }
        }
        for i in 0..4 {
            for c in 0..3 {
                assert!((agg[i][c] - running[i][c]).abs() < 1e-12);
            }
        }
        assert!(curve_aggregate(&[a, vec![vec![1.0, 2.0]]]).is_err());
    }

    #[test]
    fn instance_metrics_at_ground_truth() {
        let m = body_model();
        let data = DataTerm::new(&m, Task::Hmd).unwrap();
        let cfg = DataConfig { count: 3, noise: 0.0, ..DataConfig::default() };
        let ds = generate_dataset(&m, Task::Hmd, &cfg, &default_calibration(), 0, Exec::Sequential).unwrap();
        let cols = metric_columns(&data);
        assert!(cols.contains(&"v2v_left_hand".to_owned()));
        for rec in &ds.records {
            let gt = reference(&data, rec).unwrap();
            let v = evaluate_instance(&data, &rec.theta, rec, &gt).unwrap();
            assert_eq!(v.len(), cols.len());
            for (c, x) in cols.iter().zip(&v) {
                if c != "ground" {
                    assert!(x.abs() < 1e-6, "{c} = {x}");
                }
            }
        }
    }

    #[test]
    fn report_csv_has_mean_row() {
        let r = EvalReport {
            config_hash: 0xab,
            columns: vec!["a".into(), "b".into()],
            rows: vec![EvalRow { id: 3, values: vec![1.0, 2.0] }, EvalRow { id: 4, values: vec![3.0, 6.0] }],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# config_hash=00000000000000ab");
        assert_eq!(lines[1], "id,a,b");
        assert_eq!(lines[4], "mean,2,4");
        assert_eq!(r.mean_of("b"), Some(4.0));
        assert_eq!(r.column("a"), Some(vec![1.0, 3.0]));
    }
}
