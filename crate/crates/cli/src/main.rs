use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfit_core::config::RunConfig;
use lfit_core::datagen::{write_dataset, Split};
use lfit_core::error::{Error, Result};
use lfit_core::fitter::{write_diagnostics_csv, write_history_csv};
use lfit_core::layout::Task;
use lfit_core::par::{configure_workers, Exec};
use lfit_core::pipeline::{self as pl, FitContext, FitRun, Solver};

#[derive(Parser, Debug)]
#[command(name = "lfit", version, about = "Synthetic model fitting with classic and learned iterative solvers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing keys take the task defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fitter.n_iters=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    visibility: Option<String>,
    #[arg(long, global = true)]
    update_rule: Option<String>,
    #[arg(long, global = true)]
    weights_mode: Option<String>,
    #[arg(long, global = true)]
    net_type: Option<String>,
    #[arg(long, global = true)]
    n_iters: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print the effective configuration, desk-scale values annotated.
    Config,
    /// Generate a synthetic kinematic model.
    SynthModel {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset of poses and observations.
    SynthData {
        /// Existing model file; built from the configuration when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the learned fitter.
    Train {
        #[command(flatten)]
        io: Inputs,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fit records with a classic or learned solver.
    Fit {
        #[command(flatten)]
        io: Inputs,
        #[arg(long, default_value = "lm")]
        solver: String,
        /// Learned fitter; with `lm`/`gd` its first estimate becomes the initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Fit one record only.
        #[arg(long)]
        id: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Mean per-iteration diagnostics (learned) or the iterate trace of a single record (lm/gd).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Score fits against ground truth.
    Eval {
        #[command(flatten)]
        io: Inputs,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration mean metrics.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train and evaluate the learned fitter over a grid of settings.
    Ablate {
        #[command(flatten)]
        io: Inputs,
        /// `KEY=V1,V2,...`; repeatable, the grid is the cross product.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Convert per-iteration CSVs into one long-format CSV.
    PlotCurves {
        /// `LABEL=PATH`; repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter, residual and encoding index ranges.
    DescribeLayout {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Accept artifacts whose config hash differs from the configuration.
    #[arg(long)]
    force: bool,
}

fn split_pair(s: &str, what: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| Error::BadConfig(format!("{what} `{s}` is not KEY=VALUE")))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    let named = [
        ("task", c.task.clone()),
        ("seed", c.seed.map(|v| v.to_string())),
        ("data.visibility", c.visibility.clone()),
        ("fitter.update_rule", c.update_rule.clone()),
        ("fitter.weights_mode", c.weights_mode.clone()),
        ("fitter.net_type", c.net_type.clone()),
        ("fitter.n_iters", c.n_iters.map(|v| v.to_string())),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            pairs.push((k.to_owned(), v));
        }
    }
    for s in &c.sets {
        pairs.push(split_pair(s, "--set")?);
    }
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_task(Task::Body2d),
    };
    base.with_overrides(&pairs)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

struct Loaded {
    model: lfit_core::model::KinematicModel,
    ds: lfit_core::datagen::Dataset,
}

fn load_inputs(cfg: &RunConfig, io: &Inputs) -> Result<Loaded> {
    let (model, mh) = pl::load_model(&io.model)?;
    pl::check_hash("model", cfg.model_hash(), mh, io.force)?;
    let ds = pl::load_dataset(&io.data)?;
    pl::check_hash("dataset", cfg.data_hash(), ds.config_hash, io.force)?;
    if ds.task != cfg.task {
        return Err(Error::BadConfig(format!("dataset is for task {}, configuration for {}", ds.task, cfg.task)));
    }
    Ok(Loaded { model, ds })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let exec = if cli.common.deterministic { Exec::Sequential } else { Exec::Parallel };
    configure_workers(if cli.common.deterministic { 1 } else { cli.common.workers });
    match cli.cmd {
        Cmd::Config => {
            print!("{}", cfg.annotated_toml());
        }
        Cmd::SynthModel { out } => {
            let model = pl::build_model(&cfg)?;
            pl::save_model(&model, &out, cfg.model_hash())?;
            println!("model: {} joints, {} vertices -> {}", model.num_joints(), model.num_vertices(), out.display());
        }
        Cmd::SynthData { model, count, noise, out, force } => {
            let mut pairs = Vec::new();
            if let Some(c) = count {
                pairs.push(("data.count".to_owned(), c.to_string()));
            }
            if let Some(n) = noise {
                pairs.push(("data.noise".to_owned(), n.to_string()));
            }
            let cfg = cfg.with_overrides(&pairs)?;
            let model = match model {
                Some(p) => {
                    let (m, h) = pl::load_model(&p)?;
                    pl::check_hash("model", cfg.model_hash(), h, force)?;
                    m
                }
                None => pl::build_model(&cfg)?,
            };
            let ds = pl::build_dataset(&cfg, &model, exec)?;
            write_dataset(&ds, &out)?;
            println!("dataset: {} records ({}) -> {}", ds.records.len(), cfg.task, out.display());
        }
        Cmd::Train { io, out, history } => {
            let l = load_inputs(&cfg, &io)?;
            let data = pl::data_term(&cfg, &l.model)?;
            let (_, t) = pl::train_fitter(&cfg, &data, &l.ds, exec)?;
            pl::save_fitter(&t.best, &out)?;
            if let Some(h) = history {
                write_history_csv(h, &t.history, cfg.checkpoint_hash())?;
            }
            let best = &t.history[t.best_epoch];
            println!(
                "trained {} epochs; best epoch {} (train {:.6}, val {}) -> {}",
                cfg.train.epochs,
                t.best_epoch,
                best.train_loss,
                best.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
                out.display()
            );
            if t.skipped > 0 {
                println!("skipped samples: {}", t.skipped);
            }
        }
        Cmd::Fit { io, solver, checkpoint, split, id, out, diagnostics } => {
            let solver: Solver = solver.parse()?;
            let l = load_inputs(&cfg, &io)?;
            let data = pl::data_term(&cfg, &l.model)?;
            let nets = match &checkpoint {
                Some(p) => Some(pl::load_fitter(p, &data, (!io.force).then(|| cfg.checkpoint_hash()))?),
                None => None,
            };
            let records = match id {
                Some(id) => vec![l.ds.by_id(id).ok_or_else(|| Error::BadConfig(format!("no record with id {id}")))?],
                None => l.ds.split(split.parse::<Split>()?),
            };
            let prior = if solver == Solver::Learned { None } else { pl::fit_prior(&cfg, &data, &l.ds)? };
            let ctx = FitContext {
                cfg: &cfg,
                data: &data,
                nets: nets.as_ref(),
                anchor: pl::anchor(&data, &l.ds),
                prior: prior.as_ref(),
            };
            let run = ctx.fit(&records, solver, exec)?;
            run.write(&out)?;
            if let Some(d) = diagnostics {
                match solver {
                    Solver::Learned => write_diagnostics_csv(d, &pl::mean_diagnostics(&run), cfg.config_hash())?,
                    _ => {
                        let [rec] = records[..] else {
                            return Err(Error::BadConfig("--diagnostics with lm/gd needs --id".into()));
                        };
                        let t = ctx.trajectory(rec, solver)?;
                        let mut buf = format!("# config_hash={:016x}\n", cfg.config_hash()).into_bytes();
                        t.write_csv(&mut buf)?;
                        fs::write(d, buf)?;
                    }
                }
            }
            let finals: Vec<f64> = run
                .ids
                .iter()
                .zip(&run.thetas)
                .map(|(id, t)| {
                    let rec = l.ds.by_id(*id).expect("fitted record comes from the dataset");
                    Ok(data.evaluate(t.last().expect("non-empty trajectory"), &rec.obs, false)?.data_term())
                })
                .collect::<Result<_>>()?;
            let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
            log::info!("final data terms: {finals:?}");
            println!("{solver}: {} records, final mean data term {mean:e} -> {}", finals.len(), out.display());
        }
        Cmd::Eval { io, fits, out, curve } => {
            let l = load_inputs(&cfg, &io)?;
            let run = FitRun::read(&fits)?;
            pl::check_hash("fits", cfg.config_hash(), run.config_hash, io.force)?;
            let data = pl::data_term(&cfg, &l.model)?;
            let (report, c) = pl::evaluate(&cfg, &data, &l.ds, &run, exec)?;
            report.write_csv(&out)?;
            if let Some(p) = curve {
                c.write_csv(p)?;
            }
            let means = report.mean();
            for (name, v) in report.columns.iter().zip(means) {
                println!("{name:>14} {v:.6}");
            }
        }
        Cmd::Ablate { io, axes, out_dir } => {
            let l = load_inputs(&cfg, &io)?;
            let axes: Vec<(String, Vec<String>)> = axes
                .iter()
                .map(|a| {
                    let (k, v) = split_pair(a, "--axis")?;
                    Ok((k, v.split(',').map(|s| s.trim().to_owned()).collect()))
                })
                .collect::<Result<_>>()?;
            let cells = pl::ablate(&cfg, &axes, &l.model, &l.ds, exec)?;
            fs::create_dir_all(&out_dir)?;
            for c in &cells {
                let name: Vec<String> =
                    c.overrides.iter().map(|(k, v)| format!("{}={v}", k.rsplit('.').next().unwrap_or(k))).collect();
                let dir = out_dir.join(name.join("_"));
                fs::create_dir_all(&dir)?;
                c.report.write_csv(dir.join("eval.csv"))?;
                c.curve.write_csv(dir.join("curve.csv"))?;
            }
            let summary = format!("# config_hash={:016x}\n{}", cfg.config_hash(), pl::ablation_summary(&cells));
            write_text(&out_dir.join("summary.csv"), &summary)?;
            print!("{}", pl::ablation_summary(&cells));
        }
        Cmd::PlotCurves { inputs, out } => {
            let inputs = inputs
                .iter()
                .map(|s| {
                    let (label, path) = split_pair(s, "--input")?;
                    Ok((label, fs::read_to_string(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            write_text(&out, &pl::curves_to_long(&inputs)?)?;
            println!("{} series -> {}", inputs.len(), out.display());
        }
        Cmd::DescribeLayout { model } => {
            let model = match model {
                Some(p) => pl::load_model(p)?.0,
                None => pl::build_model(&cfg)?,
            };
            print!("{}", pl::describe_layout(&pl::data_term(&cfg, &model)?));
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 2,
        Error::NonFiniteState(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
