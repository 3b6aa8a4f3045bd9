//! Flat TOML experiment configuration.
//!
//! Every key is optional and defaults to [`ExperimentConfig::default`].
//! Unknown keys are rejected. Parsing collects every problem before
//! failing; each message starts with the offending key.
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `n_blocks`, `d_model`, `n_heads`, `vocab_size`, `seq_len` | int | 2, 32, 2, 16, 16 |
//! | `n_clients`, `total_rounds`, `agg_period`, `batch_size` | int | 3, 300, 10, 4 |
//! | `ranks` | int array | `[1, 2, 4, 8, 16, 32]` |
//! | `kappa_opt`, `beta_act` | float | 3.0, 1.0 |
//! | `client_budget` / `server_budget` | `"fixed"`, `"uniform"`, `"scripted"` | uniform, fixed |
//! | `*_budget_value` (fixed), `*_budget_lo`, `*_budget_hi` (uniform) | float | 3000/8000, 12000 |
//! | `*_budget_script` (scripted; entry `i` is round `i + 1`) | float array | |
//! | `learning_rate`, `grad_clip` | float | 10.0, 0.1 |
//! | `seed` | int | 0 |
//! | `aggregator` | `"naa"`, `"haa"` | naa |
//! | `aggregation_mode` | `"weighted"`, `"sum"` | weighted |
//! | `importance_reduction` | `"sum"`, `"weighted_mean"` | sum |
//! | `samples_per_client`, `copy_period` | int | 64, 2 |
//! | `tau_0`, `epsilon` | float | 0.05, 0.01 |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::aggregation::{AggregationMode, Aggregator};
use crate::importance::ClientReduction;
use crate::orchestrator::{BudgetSpec, ExperimentConfig};
use crate::planner::RankSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed TOML: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    /// Individual validation messages; empty for I/O and syntax errors.
    pub fn messages(&self) -> &[String] {
        match self {
            Self::Invalid(m) => m,
            _ => &[],
        }
    }
}

pub const KEYS: [&str; 32] = [
    "n_blocks",
    "d_model",
    "n_heads",
    "vocab_size",
    "seq_len",
    "n_clients",
    "total_rounds",
    "agg_period",
    "batch_size",
    "ranks",
    "kappa_opt",
    "beta_act",
    "client_budget",
    "client_budget_value",
    "client_budget_lo",
    "client_budget_hi",
    "client_budget_script",
    "server_budget",
    "server_budget_value",
    "server_budget_lo",
    "server_budget_hi",
    "server_budget_script",
    "learning_rate",
    "grad_clip",
    "seed",
    "aggregator",
    "aggregation_mode",
    "importance_reduction",
    "samples_per_client",
    "copy_period",
    "tau_0",
    "epsilon",
];

/// Typed views of raw values; every failure is recorded under the key.
struct Reader<'a> {
    table: &'a Table,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn fail(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{key}: {msg}"));
    }

    fn count(&mut self, key: &str, out: &mut usize) {
        match self.raw(key) {
            None => {}
            Some(Value::Integer(i)) if *i >= 0 => *out = *i as usize,
            Some(v) => self.fail(key, format!("expected a non-negative integer, got {v}")),
        }
    }

    fn float(&mut self, key: &str, out: &mut f64) {
        match self.raw(key) {
            None => {}
            Some(Value::Float(f)) => *out = *f,
            Some(Value::Integer(i)) => *out = *i as f64,
            Some(v) => self.fail(key, format!("expected a number, got {v}")),
        }
    }

    fn opt_float(&mut self, key: &str) -> Option<f64> {
        let mut v = f64::NAN;
        let present = self.raw(key).is_some();
        self.float(key, &mut v);
        (present && !v.is_nan()).then_some(v)
    }

    fn string(&mut self, key: &str) -> Option<&'a str> {
        match self.raw(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(v) => {
                self.fail(key, format!("expected a string, got {v}"));
                None
            }
        }
    }

    fn choice<T>(&mut self, key: &str, parse: fn(&str) -> Option<T>, allowed: &str, out: &mut T) {
        if let Some(s) = self.string(key) {
            match parse(s) {
                Some(v) => *out = v,
                None => self.fail(key, format!("unknown value {s:?}, expected one of {allowed}")),
            }
        }
    }

    fn float_array(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.raw(key)? {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, v) in items.iter().enumerate() {
                    match v {
                        Value::Float(f) => out.push(*f),
                        Value::Integer(n) => out.push(*n as f64),
                        other => {
                            self.fail(key, format!("entry {i}: expected a number, got {other}"));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            v => {
                self.fail(key, format!("expected an array of numbers, got {v}"));
                None
            }
        }
    }

    fn budget(&mut self, side: &str, out: &mut BudgetSpec) {
        let kind_key = format!("{side}_budget");
        let value_key = format!("{side}_budget_value");
        let lo_key = format!("{side}_budget_lo");
        let hi_key = format!("{side}_budget_hi");
        let script_key = format!("{side}_budget_script");
        let kind = match self.string(&kind_key) {
            Some(k) => k.to_string(),
            None => match out {
                BudgetSpec::Fixed(_) => "fixed".into(),
                BudgetSpec::Uniform { .. } => "uniform".into(),
                BudgetSpec::Scripted(_) => "scripted".into(),
            },
        };
        let value = self.opt_float(&value_key);
        let lo = self.opt_float(&lo_key);
        let hi = self.opt_float(&hi_key);
        let script = self.float_array(&script_key);
        let stray = |keys: &[(&str, bool)], this: &mut Self| {
            for (k, present) in keys {
                if *present {
                    this.fail(k, format!("not used when {kind_key} = {kind:?}"));
                }
            }
        };
        match kind.as_str() {
            "fixed" => {
                stray(&[(&lo_key, lo.is_some()), (&hi_key, hi.is_some()), (&script_key, self.raw(&script_key).is_some())], self);
                match (value, &*out) {
                    (Some(v), _) => *out = BudgetSpec::Fixed(v),
                    (None, BudgetSpec::Fixed(_)) => {}
                    (None, _) => self.fail(&value_key, format!("required when {kind_key} = \"fixed\"")),
                }
            }
            "uniform" => {
                stray(&[(&value_key, value.is_some()), (&script_key, self.raw(&script_key).is_some())], self);
                let (dlo, dhi) = match &*out {
                    BudgetSpec::Uniform { lo, hi } => (Some(*lo), Some(*hi)),
                    _ => (None, None),
                };
                match (lo.or(dlo), hi.or(dhi)) {
                    (Some(lo), Some(hi)) => *out = BudgetSpec::Uniform { lo, hi },
                    (l, h) => {
                        if l.is_none() {
                            self.fail(&lo_key, format!("required when {kind_key} = \"uniform\""));
                        }
                        if h.is_none() {
                            self.fail(&hi_key, format!("required when {kind_key} = \"uniform\""));
                        }
                    }
                }
            }
            "scripted" => {
                stray(&[(&value_key, value.is_some()), (&lo_key, lo.is_some()), (&hi_key, hi.is_some())], self);
                match script {
                    Some(values) => {
                        *out = BudgetSpec::Scripted(values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect::<BTreeMap<_, _>>())
                    }
                    None if matches!(out, BudgetSpec::Scripted(_)) => {}
                    None if self.raw(&script_key).is_some() => {}
                    None => self.fail(&script_key, format!("required when {kind_key} = \"scripted\"")),
                }
            }
            other => self.fail(&kind_key, format!("unknown value {other:?}, expected one of fixed, uniform, scripted")),
        }
    }
}

/// Parses TOML text into a validated config.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: Table = text.parse()?;
    let mut cfg = ExperimentConfig::default();
    let mut r = Reader { table: &table, errors: Vec::new() };

    for key in table.keys() {
        if !KEYS.contains(&key.as_str()) {
            r.fail(key, "unknown key");
        }
    }

    r.count("n_blocks", &mut cfg.model.n_blocks);
    r.count("d_model", &mut cfg.model.d_model);
    r.count("n_heads", &mut cfg.model.n_heads);
    r.count("vocab_size", &mut cfg.model.vocab_size);
    r.count("seq_len", &mut cfg.model.seq_len);
    r.count("n_clients", &mut cfg.n_clients);
    r.count("total_rounds", &mut cfg.total_rounds);
    r.count("agg_period", &mut cfg.agg_period);
    r.count("batch_size", &mut cfg.batch_size);
    r.count("samples_per_client", &mut cfg.dataset.samples_per_client);
    r.count("copy_period", &mut cfg.dataset.period);
    r.float("kappa_opt", &mut cfg.kappa_opt);
    r.float("beta_act", &mut cfg.beta_act);
    r.float("learning_rate", &mut cfg.learning_rate);
    r.float("grad_clip", &mut cfg.grad_clip);
    r.float("tau_0", &mut cfg.tau_0);
    r.float("epsilon", &mut cfg.epsilon);

    match r.raw("seed") {
        None => {}
        Some(Value::Integer(i)) if *i >= 0 => cfg.seed = *i as u64,
        Some(v) => r.fail("seed", format!("expected a non-negative integer, got {v}")),
    }

    match r.raw("ranks") {
        None => {}
        Some(Value::Array(items)) => {
            let ranks: Option<Vec<usize>> = items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Some(*i as usize),
                    _ => None,
                })
                .collect();
            match ranks.map(RankSet::new) {
                Some(Ok(q)) => cfg.ranks = q,
                Some(Err(e)) => r.fail("ranks", e),
                None => r.fail("ranks", "expected an array of non-negative integers"),
            }
        }
        Some(v) => r.fail("ranks", format!("expected an array of integers, got {v}")),
    }

    r.budget("client", &mut cfg.client_budget);
    r.budget("server", &mut cfg.server_budget);
    r.choice("aggregator", Aggregator::parse, "naa, haa", &mut cfg.aggregator);
    r.choice("aggregation_mode", AggregationMode::parse, "weighted, sum", &mut cfg.aggregation_mode);
    r.choice("importance_reduction", ClientReduction::parse, "sum, weighted_mean", &mut cfg.importance_reduction);

    let mut errors = r.errors;
    if errors.is_empty() {
        errors = cfg.validation_errors();
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

/// Reads and parses the config file at `path`.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}
