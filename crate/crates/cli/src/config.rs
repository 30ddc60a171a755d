//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`train.batch_size`). A `[section]` line prefixes the
//! keys that follow it. `#` starts a comment. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sinkauction_core::evaluation::{EvalConfig, DEFAULT_RESOLUTION};
use sinkauction_core::{AllocationHead, DemandKind, DemandSpec, SinkhornConfig, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub baseline_samples: usize,
    pub heatmap_resolution: usize,
    /// Replaces the Sinkhorn schedule with one ending at this temperature
    /// when rendering heatmaps.
    pub heatmap_final_eps: Option<f64>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::full_scale(DemandSpec::unit_demand(1, 2)),
            eval: EvalConfig::default(),
            baseline_samples: 100_000,
            heatmap_resolution: DEFAULT_RESOLUTION,
            heatmap_final_eps: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn demand_kind_name(kind: DemandKind) -> &'static str {
    match kind {
        DemandKind::KDemand => "k_demand",
        DemandKind::ExactlyK => "exactly_k",
    }
}

fn head_name(head: AllocationHead) -> &'static str {
    match head {
        AllocationHead::Sinkhorn => "sinkhorn",
        AllocationHead::MinSoftmax => "min_softmax",
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:?}", x)).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{}.{}", section, key)
            };
            cfg.set(&key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "mechanism.n" => t.demand.n = parse(key, value)?,
            "mechanism.m" => t.demand.m = parse(key, value)?,
            "mechanism.k" => t.demand.k = parse(key, value)?,
            "mechanism.demand" => {
                t.demand.kind = match value {
                    "k_demand" => DemandKind::KDemand,
                    "exactly_k" => DemandKind::ExactlyK,
                    _ => return Err(invalid(key, value, "expected k_demand or exactly_k")),
                }
            }
            "mechanism.head" => {
                t.head = match value {
                    "sinkhorn" => AllocationHead::Sinkhorn,
                    "min_softmax" => AllocationHead::MinSoftmax,
                    _ => return Err(invalid(key, value, "expected sinkhorn or min_softmax")),
                }
            }
            "sinkhorn.schedule" => {
                t.sinkhorn.schedule = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "sinkhorn.tol" => t.sinkhorn.tol = parse(key, value)?,
            "sinkhorn.max_iter" => t.sinkhorn.max_iter = parse(key, value)?,
            "train.train_size" => t.train_size = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.misreport_steps" => t.misreport_steps = parse(key, value)?,
            "train.misreport_lr" => t.misreport_lr = parse(key, value)?,
            "train.rho_period" => t.rho_period = parse(key, value)?,
            "train.lambda_period" => t.lambda_period = parse(key, value)?,
            "train.rho_increment" => t.rho_increment = parse(key, value)?,
            "train.rho_init" => t.rho_init = parse(key, value)?,
            "train.lambda_init" => t.lambda_init = parse(key, value)?,
            "eval.test_size" => self.eval.test_size = parse(key, value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "eval.iters" => self.eval.regret.iters = parse(key, value)?,
            "eval.restarts" => self.eval.regret.restarts = parse(key, value)?,
            "eval.lr" => self.eval.regret.lr = parse(key, value)?,
            "baseline.samples" => self.baseline_samples = parse(key, value)?,
            "heatmap.resolution" => self.heatmap_resolution = parse(key, value)?,
            "heatmap.final_eps" => self.heatmap_final_eps = Some(parse(key, value)?),
            "output.dir" => self.out_dir = PathBuf::from(value),
            "output.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut out = vec![
            ("seed", t.seed.to_string()),
            ("mechanism.n", t.demand.n.to_string()),
            ("mechanism.m", t.demand.m.to_string()),
            ("mechanism.k", t.demand.k.to_string()),
            ("mechanism.demand", demand_kind_name(t.demand.kind).to_string()),
            ("mechanism.head", head_name(t.head).to_string()),
            ("sinkhorn.schedule", join(&t.sinkhorn.schedule)),
            ("sinkhorn.tol", format!("{:?}", t.sinkhorn.tol)),
            ("sinkhorn.max_iter", t.sinkhorn.max_iter.to_string()),
            ("train.train_size", t.train_size.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.misreport_steps", t.misreport_steps.to_string()),
            ("train.misreport_lr", format!("{:?}", t.misreport_lr)),
            ("train.rho_period", t.rho_period.to_string()),
            ("train.lambda_period", t.lambda_period.to_string()),
            ("train.rho_increment", format!("{:?}", t.rho_increment)),
            ("train.rho_init", format!("{:?}", t.rho_init)),
            ("train.lambda_init", format!("{:?}", t.lambda_init)),
            ("eval.test_size", self.eval.test_size.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.iters", self.eval.regret.iters.to_string()),
            ("eval.restarts", self.eval.regret.restarts.to_string()),
            ("eval.lr", format!("{:?}", self.eval.regret.lr)),
            ("baseline.samples", self.baseline_samples.to_string()),
            ("heatmap.resolution", self.heatmap_resolution.to_string()),
        ];
        if let Some(eps) = self.heatmap_final_eps {
            out.push(("heatmap.final_eps", format!("{:?}", eps)));
        }
        out.push(("output.dir", self.out_dir.display().to_string()));
        if let Some(p) = &self.checkpoint {
            out.push(("output.checkpoint", p.display().to_string()));
        }
        out
    }

    /// Serialises to text that [`ExperimentConfig::parse`] reads back
    /// to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }

    /// The same entries, each line prefixed with `prefix`.
    pub fn echo(&self, prefix: &str) -> String {
        self.to_text().lines().map(|l| format!("{}{}\n", prefix, l)).collect()
    }

    pub fn demand(&self) -> DemandSpec {
        self.train.demand
    }

    pub fn sinkhorn(&self) -> &SinkhornConfig {
        &self.train.sinkhorn
    }

    /// Range checks beyond parsing. Infeasible demand specs are reported by
    /// the core validation with their own error kind.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("eval.test_size", self.eval.test_size),
            ("eval.iters", self.eval.regret.iters),
            ("baseline.samples", self.baseline_samples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "0", "must be positive"));
            }
        }
        if self.heatmap_resolution < 2 {
            return Err(invalid(
                "heatmap.resolution",
                &self.heatmap_resolution.to_string(),
                "must be at least 2",
            ));
        }
        if let Some(eps) = self.heatmap_final_eps {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(invalid("heatmap.final_eps", &format!("{:?}", eps), "must be positive"));
            }
        }
        if !(self.eval.regret.lr > 0.0) {
            return Err(invalid("eval.lr", &format!("{:?}", self.eval.regret.lr), "must be positive"));
        }
        Ok(())
    }
}
