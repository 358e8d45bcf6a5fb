//! End-to-end steps shared by the command-line tool and the acceptance suite.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::classic::{gd_fit, lm_fit, BaselineProblem, Trajectory};
use crate::config::{RunConfig, Stream};
use crate::container::Container;
use crate::datagen::{generate_dataset, read_dataset, Dataset, DatasetRecord, Split};
use crate::error::{Error, Result};
use crate::fitter::{describe_encoding, run_fitter, train, FitterNetworks, StepDiagnostics, TrainOutput};
use crate::layout::Task;
use crate::metrics::{curve_aggregate, evaluate_trajectory, metric_columns, CurveReport, EvalReport, EvalRow};
use crate::model::{synth_model, KinematicModel};
use crate::neural::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::par::Exec;
use crate::residuals::{default_calibration, fit_gmm_em, prior_pose, DataTerm, Gmm};

const HASH_KEY: &str = "config_hash";

pub fn build_model(cfg: &RunConfig) -> Result<KinematicModel> {
    synth_model(&cfg.synth_config(), cfg.derived_seed(Stream::Model))
}

pub fn save_model(model: &KinematicModel, path: impl AsRef<Path>, config_hash: u64) -> Result<()> {
    let mut c = model.to_container();
    c.push_u64(HASH_KEY, config_hash);
    c.write(path)
}

/// The model and the hash it was written with.
pub fn load_model(path: impl AsRef<Path>) -> Result<(KinematicModel, u64)> {
    let c = Container::read(path)?;
    Ok((KinematicModel::from_container(&c)?, c.get_u64(HASH_KEY)?))
}

pub fn build_dataset(cfg: &RunConfig, model: &KinematicModel, exec: Exec) -> Result<Dataset> {
    generate_dataset(model, cfg.task, &cfg.data_config(), &default_calibration(), cfg.data_hash(), exec)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(path)
}

pub fn data_term<'m>(cfg: &RunConfig, model: &'m KinematicModel) -> Result<DataTerm<'m>> {
    let mut d = DataTerm::new(model, cfg.task)?;
    d.options = cfg.residuals;
    Ok(d)
}

/// Fails with `ConfigHashMismatch` unless `found == expected` or `force`.
pub fn check_hash(what: &str, expected: u64, found: u64, force: bool) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    if force {
        log::warn!("{what} hash {found:016x} differs from the configuration ({expected:016x}); continuing (--force)");
        return Ok(());
    }
    Err(Error::ConfigHashMismatch { expected, found })
}

pub fn anchor(data: &DataTerm, ds: &Dataset) -> Vec<f64> {
    FitterNetworks::anchor_from(&data.layout, ds.split(Split::Train).iter().map(|r| &r.theta[..]))
}

pub fn new_fitter(cfg: &RunConfig, data: &DataTerm, ds: &Dataset) -> Result<FitterNetworks> {
    FitterNetworks::new(cfg.fitter.clone(), data, anchor(data, ds), cfg.derived_seed(Stream::Init))
}

/// Trains on the train split with the val split for model selection.
pub fn train_fitter(cfg: &RunConfig, data: &DataTerm, ds: &Dataset, exec: Exec) -> Result<(FitterNetworks, TrainOutput)> {
    let mut nets = new_fitter(cfg, data, ds)?;
    let out = train(
        &mut nets,
        data,
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &cfg.loss,
        &cfg.train,
        cfg.derived_seed(Stream::Train),
        exec,
        cfg.checkpoint_hash(),
    )?;
    Ok((nets, out))
}

pub fn save_fitter(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(path, ckpt)
}

/// Loads a checkpoint; with `expected` set, a different hash is an error.
pub fn load_fitter(path: impl AsRef<Path>, data: &DataTerm, expected: Option<u64>) -> Result<FitterNetworks> {
    FitterNetworks::from_checkpoint(&load_checkpoint(path, expected)?, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Lm,
    Gd,
    Learned,
}

impl Solver {
    fn code(self) -> f64 {
        match self {
            Solver::Lm => 0.0,
            Solver::Gd => 1.0,
            Solver::Learned => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Solver::Lm),
            1 => Ok(Solver::Gd),
            2 => Ok(Solver::Learned),
            _ => Err(Error::Format(format!("unknown solver code {c}"))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Lm => "lm",
            Solver::Gd => "gd",
            Solver::Learned => "learned",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(Solver::Lm),
            "gd" => Ok(Solver::Gd),
            "learned" => Ok(Solver::Learned),
            _ => Err(Error::BadConfig(format!("unknown solver `{s}` (lm | gd | learned)"))),
        }
    }
}

/// Pose prior for the classic baseline, fitted on the training split.
pub fn fit_prior(cfg: &RunConfig, data: &DataTerm, ds: &Dataset) -> Result<Option<Gmm>> {
    if cfg.task == Task::Face || cfg.baseline.weights.gmm == 0.0 {
        return Ok(None);
    }
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Ok(None);
    }
    let samples: Vec<Vec<f64>> = train.iter().map(|r| prior_pose(&data.layout, &r.theta).to_vec()).collect();
    let k = cfg.baseline.gmm_components.min(samples.len());
    Ok(Some(fit_gmm_em(&samples, k, cfg.derived_seed(Stream::Gmm), 50)?.gmm))
}

/// Trajectories of one solver over a set of records.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRun {
    pub solver: Solver,
    pub config_hash: u64,
    pub ids: Vec<u64>,
    /// Per record, `Θ₀..Θ_N`.
    pub thetas: Vec<Vec<Vec<f64>>>,
    /// Per record (learned solver only).
    pub diagnostics: Vec<Vec<StepDiagnostics>>,
}

impl FitRun {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push("fit.solver", &[1], vec![self.solver.code()]);
        c.push_u64(HASH_KEY, self.config_hash);
        c.push("fit.ids", &[self.ids.len()], self.ids.iter().map(|&i| i as f64).collect());
        for (k, t) in self.thetas.iter().enumerate() {
            let p = t.first().map_or(0, |x| x.len());
            c.push(format!("fit.thetas.{k}"), &[t.len(), p], t.concat());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let solver = Solver::from_code(*c.get("fit.solver")?.data.first().ok_or_else(|| Error::Format("empty solver".into()))?)?;
        let ids: Vec<u64> = c.get("fit.ids")?.as_indices()?.into_iter().map(|i| i as u64).collect();
        let thetas = (0..ids.len())
            .map(|k| {
                let a = c.get(&format!("fit.thetas.{k}"))?;
                if a.dims.len() != 2 {
                    return Err(Error::Format("trajectory array must be 2-D".into()));
                }
                Ok(a.data.chunks(a.dims[1].max(1)).map(|r| r.to_vec()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(FitRun { solver, config_hash: c.get_u64(HASH_KEY)?, ids, thetas, diagnostics: vec![] })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Initial estimate of the classic solvers: the learned `Θ₀` when networks
/// are given, otherwise the anchor (rest pose at the mean translation).
pub struct FitContext<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a DataTerm<'a>,
    pub nets: Option<&'a FitterNetworks>,
    pub anchor: Vec<f64>,
    pub prior: Option<&'a Gmm>,
}

impl FitContext<'_> {
    fn init(&self, rec: &DatasetRecord) -> Result<Vec<f64>> {
        match self.nets {
            Some(n) => Ok(n.initial_hidden(&rec.obs, self.data)?.0),
            None => Ok(self.anchor.clone()),
        }
    }

    /// Full iterate trace of a classic solver on one record.
    pub fn trajectory(&self, rec: &DatasetRecord, solver: Solver) -> Result<Trajectory> {
        let mut problem = BaselineProblem::new(self.data, &rec.obs, self.cfg.baseline.weights.clone());
        problem.gmm = self.prior;
        let init = self.init(rec)?;
        match solver {
            Solver::Lm => lm_fit(&problem, &init, &self.cfg.lm),
            _ => gd_fit(&problem, &init, self.cfg.gd.step, self.cfg.gd.iters),
        }
    }

    pub fn fit(&self, records: &[&DatasetRecord], solver: Solver, exec: Exec) -> Result<FitRun> {
        let results = exec.map(records, |rec| -> Result<(Vec<Vec<f64>>, Vec<StepDiagnostics>)> {
            match solver {
                Solver::Learned => {
                    let nets = self.nets.ok_or_else(|| Error::BadConfig("the learned solver needs a checkpoint".into()))?;
                    let f = run_fitter(nets, self.data, &rec.obs, self.cfg.fitter.n_iters)?;
                    Ok((f.thetas, f.diagnostics))
                }
                _ => {
                    let t = self.trajectory(rec, solver)?;
                    Ok((t.iterates.into_iter().map(|i| i.theta).collect(), vec![]))
                }
            }
        });
        let mut run = FitRun {
            solver,
            config_hash: self.cfg.config_hash(),
            ids: records.iter().map(|r| r.id).collect(),
            thetas: vec![],
            diagnostics: vec![],
        };
        for r in results {
            let (t, d) = r?;
            run.thetas.push(t);
            if !d.is_empty() {
                run.diagnostics.push(d);
            }
        }
        Ok(run)
    }
}

/// Final-iterate report and per-iteration curve. Shorter trajectories
/// (classic solvers that converged early) are padded with their last iterate.
pub fn evaluate(cfg: &RunConfig, data: &DataTerm, ds: &Dataset, run: &FitRun, exec: Exec) -> Result<(EvalReport, CurveReport)> {
    let len = run.thetas.iter().map(|t| t.len()).max().unwrap_or(0);
    let items: Vec<(u64, &Vec<Vec<f64>>)> = run.ids.iter().copied().zip(&run.thetas).collect();
    let per = exec.map(&items, |(id, thetas)| -> Result<Vec<Vec<f64>>> {
        let rec = ds.by_id(*id).ok_or_else(|| Error::Format(format!("record {id} is not in the dataset")))?;
        let mut t = (*thetas).clone();
        if let Some(last) = t.last().cloned() {
            t.resize(len, last);
        }
        evaluate_trajectory(data, &t, rec)
    });
    let per: Vec<Vec<Vec<f64>>> = per.into_iter().collect::<Result<_>>()?;
    let columns = metric_columns(data);
    let rows = run
        .ids
        .iter()
        .zip(&per)
        .map(|(&id, m)| EvalRow { id, values: m.last().cloned().unwrap_or_default() })
        .collect();
    let hash = cfg.config_hash();
    Ok((
        EvalReport { config_hash: hash, columns: columns.clone(), rows },
        CurveReport { config_hash: hash, columns, means: curve_aggregate(&per)? },
    ))
}

/// Mean per-iteration diagnostics over records.
pub fn mean_diagnostics(run: &FitRun) -> Vec<StepDiagnostics> {
    let Some(first) = run.diagnostics.first() else {
        return vec![];
    };
    let n = run.diagnostics.len() as f64;
    (0..first.len())
        .map(|i| {
            let mut d = StepDiagnostics { iter: i, ..Default::default() };
            for r in &run.diagnostics {
                d.data_term += r[i].data_term / n;
                d.grad_norm += r[i].grad_norm / n;
                d.lambda_norm += r[i].lambda_norm / n;
                d.gamma_norm += r[i].gamma_norm / n;
                d.delta_norm += r[i].delta_norm / n;
            }
            d
        })
        .collect()
}

/// Parameter, residual and encoding index maps.
pub fn describe_layout(data: &DataTerm) -> String {
    let mut s = String::new();
    let mut section = |title: &str, blocks: Vec<(String, std::ops::Range<usize>)>| {
        let total = blocks.last().map_or(0, |(_, r)| r.end);
        s.push_str(&format!("{title} ({total} entries)\n"));
        for (name, r) in blocks {
            s.push_str(&format!("  {:>5}..{:<5} {name}\n", r.start, r.end));
        }
    };
    section("parameters", data.layout.blocks());
    section("residuals", data.describe());
    section("encoding", describe_encoding(data.layout.task, data.model));
    s
}

/// Long-format rows `series,iter,metric,value` from per-iteration CSVs.
pub fn curves_to_long(inputs: &[(String, String)]) -> Result<String> {
    let mut out = String::from("series,iter,metric,value\n");
    for (series, text) in inputs {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format(format!("{series}: empty curve file")))?.split(',').collect();
        if header.first() != Some(&"iter") {
            return Err(Error::Format(format!("{series}: first column must be `iter`")));
        }
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::Format(format!("{series}: row has {} cells, header {}", cells.len(), header.len())));
            }
            for (name, v) in header.iter().zip(&cells).skip(1) {
                v.parse::<f64>().map_err(|_| Error::Format(format!("{series}: `{v}` is not a number")))?;
                out.push_str(&format!("{series},{},{name},{v}\n", cells[0]));
            }
        }
    }
    Ok(out)
}

/// One ablation cell: its overrides and the mean final-iterate metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub overrides: Vec<(String, String)>,
    pub report: EvalReport,
    pub curve: CurveReport,
}

/// Cross product of `axes` (each a key and its values), in axis order with
/// the last axis varying fastest.
pub fn ablation_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![vec![]];
    for (key, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

pub fn ablation_summary(cells: &[AblationCell]) -> String {
    let Some(first) = cells.first() else {
        return String::new();
    };
    let keys: Vec<&str> = first.overrides.iter().map(|(k, _)| k.as_str()).collect();
    let mut s = format!("{},{}\n", keys.join(","), first.report.columns.join(","));
    for c in cells {
        let vals: Vec<String> = c.overrides.iter().map(|(_, v)| v.clone()).collect();
        let means: Vec<String> = c.report.mean().iter().map(|x| x.to_string()).collect();
        s.push_str(&format!("{},{}\n", vals.join(","), means.join(",")));
    }
    s
}

/// Trains and evaluates one configuration on the test split, reusing the
/// model and dataset when their hashes match.
pub fn run_cell(cfg: &RunConfig, model: &KinematicModel, ds: &Dataset, exec: Exec) -> Result<(EvalReport, CurveReport, TrainOutput)> {
    let own_model;
    let model = if cfg.model_hash() == ds_model_hash(cfg, ds, model) {
        model
    } else {
        own_model = build_model(cfg)?;
        &own_model
    };
    let own_ds;
    let ds = if ds.config_hash == cfg.data_hash() {
        ds
    } else {
        own_ds = build_dataset(cfg, model, exec)?;
        &own_ds
    };
    let data = data_term(cfg, model)?;
    let (nets, out) = train_fitter(cfg, &data, ds, exec)?;
    let ctx = FitContext { cfg, data: &data, nets: Some(&nets), anchor: vec![], prior: None };
    let run = ctx.fit(&ds.split(Split::Test), Solver::Learned, exec)?;
    let (report, curve) = evaluate(cfg, &data, ds, &run, exec)?;
    Ok((report, curve, out))
}

fn ds_model_hash(cfg: &RunConfig, ds: &Dataset, model: &KinematicModel) -> u64 {
    // The dataset hash covers the model hash; a matching dataset implies a matching model.
    if ds.config_hash == cfg.data_hash() && model.num_vertices() == cfg.model.vertices {
        cfg.model_hash()
    } else {
        0
    }
}

pub fn ablate(cfg: &RunConfig, axes: &[(String, Vec<String>)], model: &KinematicModel, ds: &Dataset, exec: Exec) -> Result<Vec<AblationCell>> {
    ablation_cells(axes)
        .into_iter()
        .map(|overrides| {
            let c = cfg.with_overrides(&overrides)?;
            log::info!("ablation cell {overrides:?}");
            let (report, curve, _) = run_cell(&c, model, ds, exec)?;
            Ok(AblationCell { overrides, report, curve })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> RunConfig {
        let mut c = RunConfig::for_task(task);
        c.model.vertices = 300;
        if task == Task::Face {
            c.model.landmarks = 16;
            c.model.shape = 4;
            c.model.expr = 4;
        }
        c.data.count = 24;
        c.fitter.gru_units = 8;
        c.fitter.mlp_units = 8;
        c.fitter.n_iters = 2;
        c.train.epochs = 1;
        c.train.batch_size = 8;
        c.lm.max_iters = 5;
        c.gd.iters = 3;
        c
    }

    #[test]
    fn fits_and_reports_for_every_solver() {
        for task in [Task::Body2d, Task::Hmd, Task::Face] {
            let cfg = tiny(task);
            let model = build_model(&cfg).unwrap();
            let ds = build_dataset(&cfg, &model, Exec::Sequential).unwrap();
            let data = data_term(&cfg, &model).unwrap();
            let (nets, out) = train_fitter(&cfg, &data, &ds, Exec::Sequential).unwrap();
            assert_eq!(out.best.config_hash, cfg.checkpoint_hash());
            let prior = fit_prior(&cfg, &data, &ds).unwrap();
            let ctx = FitContext { cfg: &cfg, data: &data, nets: None, anchor: anchor(&data, &ds), prior: prior.as_ref() };
            let test = ds.split(Split::Test);
            for solver in [Solver::Lm, Solver::Gd] {
                let run = ctx.fit(&test, solver, Exec::Sequential).unwrap();
                let (report, curve) = evaluate(&cfg, &data, &ds, &run, Exec::Sequential).unwrap();
                assert_eq!(report.rows.len(), test.len());
                assert!(!curve.means.is_empty());
            }
            let ctx = FitContext { nets: Some(&nets), ..ctx };
            let run = ctx.fit(&test, Solver::Learned, Exec::Sequential).unwrap();
            assert_eq!(run.thetas[0].len(), 3);
            assert_eq!(mean_diagnostics(&run).len(), 3);
            let (_, curve) = evaluate(&cfg, &data, &ds, &run, Exec::Sequential).unwrap();
            assert_eq!(curve.means.len(), 3);
        }
    }

    #[test]
    fn fit_run_round_trips() {
        let run = FitRun {
            solver: Solver::Gd,
            config_hash: 0xdead_beef_0123_4567,
            ids: vec![3, 9],
            thetas: vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0]]],
            diagnostics: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fits.mfit");
        run.write(&p).unwrap();
        assert_eq!(FitRun::read(&p).unwrap(), run);
    }

    #[test]
    fn hash_check_and_force() {
        assert!(check_hash("x", 1, 1, false).is_ok());
        assert!(matches!(check_hash("x", 1, 2, false), Err(Error::ConfigHashMismatch { .. })));
        assert!(check_hash("x", 1, 2, true).is_ok());
    }

    #[test]
    fn long_format_curves() {
        let text = "# config_hash=00\niter,a,b\n0,1,2\n1,3,4\n";
        let long = curves_to_long(&[("s".into(), text.into())]).unwrap();
        assert_eq!(long, "series,iter,metric,value\ns,0,a,1\ns,0,b,2\ns,1,a,3\ns,1,b,4\n");
        assert!(curves_to_long(&[("s".into(), "x,a\n0,1\n".into())]).is_err());
        assert!(curves_to_long(&[("s".into(), "iter,a\n0,z\n".into())]).is_err());
    }

    #[test]
    fn ablation_grid_order() {
        let axes = vec![
            ("fitter.update_rule".to_owned(), vec!["lm-like".to_owned(), "network-only".to_owned()]),
            ("fitter.weights_mode".to_owned(), vec!["shared".to_owned(), "per-step".to_owned()]),
        ];
        let cells = ablation_cells(&axes);
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1], vec![
            ("fitter.update_rule".to_owned(), "lm-like".to_owned()),
            ("fitter.weights_mode".to_owned(), "per-step".to_owned())
        ]);
    }

    #[test]
    fn layout_description_lists_blocks() {
        let cfg = tiny(Task::Hmd);
        let model = build_model(&cfg).unwrap();
        let data = data_term(&cfg, &model).unwrap();
        let text = describe_layout(&data);
        assert!(text.contains("parameters (99 entries)"));
        assert!(text.contains("residuals (66 entries)"));
        assert!(text.contains("headset"));
    }
}
