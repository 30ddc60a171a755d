use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sinkauction_core::evaluation::{analytic_optimum, evaluate, heatmap_grid, mean_revenue, EvalReport, Vcg};
use sinkauction_core::training::{sample_valuations, EpochMetrics, Trainer};
use sinkauction_core::{Error as CoreError, MechanismParams, SinkhornConfig};

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::InfeasibleSpec(_) => 3,
                CoreError::Numeric { .. }
                | CoreError::Convergence { .. }
                | CoreError::NonFiniteGradient { .. } => 4,
                _ => 1,
            },
            CliError::Checkpoint(_) | CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub const METRICS_HEADER: &str = "epoch,revenue_mean,regret_mean,rho,lambda_mean,seconds";
pub const HEATMAP_HEADER: &str = "v1,v2,g1,g2,payment";

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("checkpoint.ckpt"))
}

fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{}",
        m.epoch, m.revenue_mean, m.regret_mean, m.rho, m.lambda_mean, m.seconds
    )
}

/// Trains from scratch. The checkpoint is rewritten after every epoch and,
/// on failure, holds the last state reached without error.
pub fn train(cfg: &ExperimentConfig, mut log: impl FnMut(&EpochMetrics)) -> Result<Checkpoint, CliError> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let ck_path = checkpoint_path(cfg);
    let mut metrics = create(&metrics_path)?;
    write!(metrics, "{}", cfg.echo("# ")).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{}", METRICS_HEADER).map_err(io_err(&metrics_path))?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    if let Some(dir) = ck_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let snapshot = |trainer: &Trainer| Checkpoint {
        config: cfg.clone(),
        state: trainer.state().clone(),
    };
    while !trainer.finished() {
        let m = match trainer.run_epoch() {
            Ok(m) => m,
            Err(e) => {
                checkpoint::save(&ck_path, &snapshot(&trainer))?;
                return Err(e.into());
            }
        };
        writeln!(metrics, "{}", metrics_row(&m)).map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        checkpoint::save(&ck_path, &snapshot(&trainer))?;
        log(&m);
    }
    Ok(snapshot(&trainer))
}

/// Loads the checkpoint and checks it against the demand in `cfg`.
pub fn load_matching(cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let ck = checkpoint::load(&checkpoint_path(cfg))?;
    let (want, have) = (cfg.demand(), ck.params().demand);
    if want != have {
        return Err(CliError::Mismatch(format!(
            "config has {}x{} {:?}-{}, checkpoint has {}x{} {:?}-{}",
            want.n, want.m, want.kind, want.k, have.n, have.m, have.kind, have.k
        )));
    }
    Ok(ck)
}

pub fn report_text(cfg: &ExperimentConfig, rep: &EvalReport) -> String {
    cfg.echo("# ") + &report_body(rep)
}

/// `key = value` lines of a report.
pub fn report_body(rep: &EvalReport) -> String {
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
    let per = rep
        .regret_per_bidder
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(",");
    for (k, v) in [
        ("samples", rep.samples.to_string()),
        ("seed", rep.seed.to_string()),
        ("revenue_mean", rep.revenue_mean.to_string()),
        ("revenue_std", rep.revenue_std.to_string()),
        ("regret_mean", rep.regret_mean.to_string()),
        ("regret_std", rep.regret_std.to_string()),
        ("regret_per_bidder", per),
        ("vcg_revenue", opt(rep.vcg_revenue)),
        ("optimal_revenue", opt(rep.optimal_revenue)),
    ] {
        s.push_str(&format!("{} = {}\n", k, v));
    }
    s
}

pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let ck = load_matching(cfg)?;
    let rep = evaluate(ck.params(), &cfg.eval)?;
    let path = cfg.out_dir.join("eval_report.txt");
    let mut f = create(&path)?;
    f.write_all(report_text(cfg, &rep).as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub mechanism: &'static str,
    pub revenue: f64,
}

pub fn run_baseline(cfg: &ExperimentConfig) -> Result<Vec<BaselineRow>, CliError> {
    cfg.validate()?;
    let d = cfg.demand();
    d.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let samples = sample_valuations(d.n, d.m, cfg.baseline_samples, &mut rng);
    let mut rows = Vec::new();
    if d.k == 1 {
        if let Ok(vcg) = Vcg::new(d) {
            rows.push(BaselineRow {
                mechanism: "vcg",
                revenue: mean_revenue(&vcg, &samples)?,
            });
        }
    }
    if let Some(opt) = analytic_optimum(&d) {
        rows.push(BaselineRow {
            mechanism: "analytic_optimum",
            revenue: mean_revenue(&opt, &samples)?,
        });
    }
    let path = cfg.out_dir.join("baseline.csv");
    let mut f = create(&path)?;
    let mut text = cfg.echo("# ");
    text.push_str("mechanism,revenue\n");
    for r in &rows {
        text.push_str(&format!("{},{}\n", r.mechanism, r.revenue));
    }
    f.write_all(text.as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    Ok(rows)
}

pub fn heatmap_params(cfg: &ExperimentConfig, params: &MechanismParams) -> MechanismParams {
    let mut p = params.clone();
    if let Some(eps) = cfg.heatmap_final_eps {
        p.sinkhorn = SinkhornConfig {
            tol: p.sinkhorn.tol,
            max_iter: p.sinkhorn.max_iter,
            ..SinkhornConfig::with_final_eps(eps)
        };
    }
    p
}

pub fn run_heatmap(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let ck = load_matching(cfg)?;
    let params = heatmap_params(cfg, ck.params());
    params.sinkhorn.validate()?;
    let grid = heatmap_grid(&params, cfg.heatmap_resolution)?;
    let path = cfg.out_dir.join("heatmap.csv");
    let mut f = create(&path)?;
    let mut text = cfg.echo("# ");
    text.push_str(HEATMAP_HEADER);
    text.push('\n');
    for (v1, v2, g1, g2, p) in grid.rows() {
        text.push_str(&format!("{},{},{},{},{}\n", v1, v2, g1, g2, p));
    }
    f.write_all(text.as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    Ok(path)
}
