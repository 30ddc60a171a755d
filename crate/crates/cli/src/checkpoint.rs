//! Checkpoint files: a text header followed by a little-endian `f64` block.
//!
//! ```text
//! sinkauction-checkpoint 1
//! n 2
//! ...
//! config train.lr = 0.001
//! end
//! <values * 8 bytes>
//! ```
//!
//! The block holds, in order: the Sinkhorn schedule, tolerance, `rho`, the
//! Adam learning rate, `lambda`, every network parameter (allocation net
//! then payment net, weight before bias per layer), then the Adam first and
//! second moments in the same order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sinkauction_core::nn::{Activation, Mlp};
use sinkauction_core::training::{Multipliers, TrainState};
use sinkauction_core::{
    Adam, AllocationHead, DemandKind, DemandSpec, MechanismParams, SinkhornConfig, Tensor,
};

use crate::config::{ConfigError, ExperimentConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "sinkauction-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint shapes are inconsistent: {0}")]
    Shape(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn params(&self) -> &MechanismParams {
        &self.state.params
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
    }
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let st = &ck.state;
    let p = &st.params;
    let d = p.demand;
    let mut header = format!("{} {}\n", MAGIC, FORMAT_VERSION);
    let mut line = |k: &str, v: String| {
        header.push_str(k);
        header.push(' ');
        header.push_str(&v);
        header.push('\n');
    };
    line("n", d.n.to_string());
    line("m", d.m.to_string());
    line("k", d.k.to_string());
    line(
        "demand",
        match d.kind {
            DemandKind::KDemand => "k_demand",
            DemandKind::ExactlyK => "exactly_k",
        }
        .into(),
    );
    line(
        "head",
        match p.head {
            AllocationHead::Sinkhorn => "sinkhorn",
            AllocationHead::MinSoftmax => "min_softmax",
        }
        .into(),
    );
    line("alloc_widths", widths_text(&p.alloc_net.widths()));
    line("alloc_activation", activation_name(p.alloc_net.activation).into());
    line("pay_widths", widths_text(&p.pay_net.widths()));
    line("pay_activation", activation_name(p.pay_net.activation).into());
    line("schedule_len", p.sinkhorn.schedule.len().to_string());
    line("max_iter", p.sinkhorn.max_iter.to_string());
    line("adam_steps", st.adam.steps().to_string());
    line("epoch", st.epoch.to_string());
    line("batch", st.batch.to_string());
    line("seed", ck.config.train.seed.to_string());
    line("rng_word_pos", st.rng.get_word_pos().to_string());

    let mut values: Vec<f64> = Vec::new();
    values.extend(&p.sinkhorn.schedule);
    values.push(p.sinkhorn.tol);
    values.push(st.multipliers.rho);
    values.push(st.adam.lr);
    values.extend(&st.multipliers.lambda);
    for t in p.parameters() {
        values.extend(t.data());
    }
    for t in st.adam.first_moments().iter().chain(st.adam.second_moments()) {
        values.extend(t.data());
    }
    line("values", values.len().to_string());
    for l in ck.config.to_text().lines() {
        line("config", l.to_string());
    }
    header.push_str("end\n");

    let mut out = header.into_bytes();
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Header<'a> {
    fields: Vec<(&'a str, &'a str)>,
    config: String,
}

impl<'a> Header<'a> {
    fn get(&self, key: &str) -> Result<&'a str, CheckpointError> {
        self.fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| CheckpointError::Format(format!("missing header field `{}`", key)))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| CheckpointError::Format(format!("header field `{}` = `{}` is not a number", key, v)))
    }

    fn widths(&self, key: &str) -> Result<Vec<usize>, CheckpointError> {
        self.get(key)?
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| CheckpointError::Format(format!("bad width `{}` in `{}`", w, key)))
            })
            .collect()
    }

    fn activation(&self, key: &str) -> Result<Activation, CheckpointError> {
        match self.get(key)? {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(CheckpointError::Format(format!("unknown activation `{}`", other))),
        }
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header<'_>, &[u8]), CheckpointError> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(CheckpointError::Truncated("header ends before `end` line".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
        pos += len + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let Some((first, rest)) = lines.split_first() else {
        return Err(CheckpointError::Format("empty header".into()));
    };
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| CheckpointError::Format("not a checkpoint file".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(CheckpointError::Version {
            found: version.to_string(),
        });
    }
    let mut fields = Vec::new();
    let mut config = String::new();
    for l in rest {
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        if k == "config" {
            config.push_str(v);
            config.push('\n');
        } else {
            fields.push((k, v));
        }
    }
    Ok((Header { fields, config }, &bytes[pos..]))
}

struct Reader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        let out = self.values[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }

    fn one(&mut self) -> f64 {
        self.take(1)[0]
    }

    fn tensors_like(&mut self, like: &[Tensor]) -> Vec<Tensor> {
        like.iter()
            .map(|t| Tensor::new(t.shape().to_vec(), self.take(t.len())).expect("sized by template"))
            .collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (h, payload) = split_header(bytes)?;
    let config = ExperimentConfig::parse(&h.config)?;
    let kind = match h.get("demand")? {
        "k_demand" => DemandKind::KDemand,
        "exactly_k" => DemandKind::ExactlyK,
        other => return Err(CheckpointError::Format(format!("unknown demand `{}`", other))),
    };
    let head = match h.get("head")? {
        "sinkhorn" => AllocationHead::Sinkhorn,
        "min_softmax" => AllocationHead::MinSoftmax,
        other => return Err(CheckpointError::Format(format!("unknown head `{}`", other))),
    };
    let demand = DemandSpec {
        kind,
        k: h.num("k")?,
        n: h.num("n")?,
        m: h.num("m")?,
    };
    let alloc_widths = h.widths("alloc_widths")?;
    let pay_widths = h.widths("pay_widths")?;
    if alloc_widths.len() < 2 || pay_widths.len() < 2 {
        return Err(CheckpointError::Shape("networks need at least one layer".into()));
    }
    let schedule_len: usize = h.num("schedule_len")?;
    let count: usize = h.num("values")?;

    let template_alloc = Mlp::zeros(&alloc_widths, h.activation("alloc_activation")?);
    let template_pay = Mlp::zeros(&pay_widths, h.activation("pay_activation")?);
    let param_len: usize = template_alloc
        .parameters()
        .chain(template_pay.parameters())
        .map(Tensor::len)
        .sum();
    let expected = schedule_len + 3 + demand.n + 3 * param_len;
    if expected != count {
        return Err(CheckpointError::Shape(format!(
            "header declares {} values but shapes need {}",
            count, expected
        )));
    }
    if payload.len() < count * 8 {
        return Err(CheckpointError::Truncated(format!(
            "{} of {} payload bytes present",
            payload.len(),
            count * 8
        )));
    }
    if payload.len() > count * 8 {
        return Err(CheckpointError::Shape(format!(
            "{} trailing bytes after payload",
            payload.len() - count * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut r = Reader {
        values: &values,
        pos: 0,
    };
    let schedule = r.take(schedule_len);
    let tol = r.one();
    let rho = r.one();
    let lr = r.one();
    let lambda = r.take(demand.n);
    let mut params = MechanismParams {
        alloc_net: template_alloc,
        pay_net: template_pay,
        demand,
        sinkhorn: SinkhornConfig {
            schedule,
            tol,
            max_iter: h.num("max_iter")?,
        },
        head,
    };
    let template: Vec<Tensor> = params.parameters().cloned().collect();
    for (dst, src) in params.parameters_mut().zip(r.tensors_like(&template)) {
        *dst = src;
    }
    let m = r.tensors_like(&template);
    let v = r.tensors_like(&template);
    params
        .validate()
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let adam = Adam::from_state(lr, m, v, h.num("adam_steps")?)
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let seed: u64 = h.num("seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(h.num("rng_word_pos")?);
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            adam,
            multipliers: Multipliers { lambda, rho },
            epoch: h.num("epoch")?,
            batch: h.num("batch")?,
            rng,
        },
    })
}

/// Writes through a temporary file so an interrupted save leaves the
/// previous checkpoint intact.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(ck)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
