//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! labels = 21
//! kernel = spatial theta_gamma=3 weight=3
//! kernel = bilateral theta_alpha=80 theta_beta=13 weight=5
//! t_train = 5
//! t_infer = 10
//! share_iteration_params = true
//! learning_rate = 0.001
//! momentum = 0.99
//! epochs = 50
//! seed = 0
//! ignore_label = 255
//! clip = 10
//! params = trained.crft
//! ```
//!
//! `labels` is required. Without `kernel` lines the default spatial and
//! bilateral pair is used; a `kernel` line must give every bandwidth and
//! its weight. `params` is resolved against the config file's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::crf_rnn::{ParamSchedule, RnnConfig};
use crate::error::{CrfError, Result};
use crate::io::load_params;
use crate::meanfield::{default_kernels, KernelSpec};
use crate::training::{init_params, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub labels: usize,
    /// Kernels with their initial weights.
    pub kernels: Vec<(KernelSpec, f64)>,
    pub rnn: RnnConfig,
    pub train: TrainConfig,
    pub params_path: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for everything except the label count.
    pub fn with_labels(labels: usize) -> Self {
        Self {
            labels,
            kernels: default_kernels(),
            rnn: RnnConfig::default(),
            train: TrainConfig::default(),
            params_path: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CrfError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            CrfError::InvalidArgument(msg) => {
                CrfError::invalid(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::with_labels(0);
        let mut kernels = Vec::new();
        let mut seen = HashSet::new();
        let mut labels = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CrfError::invalid(format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            if key != "kernel" && !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            match key {
                "labels" => labels = Some(parse_value(value).map_err(&err)?),
                "kernel" => kernels.push(parse_kernel(value).map_err(&err)?),
                "t_train" => cfg.rnn.t_train = parse_value(value).map_err(&err)?,
                "t_infer" => cfg.rnn.t_infer = parse_value(value).map_err(&err)?,
                "share_iteration_params" => {
                    cfg.rnn.share_iteration_params = parse_value(value).map_err(&err)?
                }
                "learning_rate" => cfg.train.learning_rate = parse_value(value).map_err(&err)?,
                "momentum" => cfg.train.momentum = parse_value(value).map_err(&err)?,
                "epochs" => cfg.train.epochs = parse_value(value).map_err(&err)?,
                "seed" => cfg.train.seed = parse_value(value).map_err(&err)?,
                "ignore_label" => cfg.train.ignore_label = parse_value(value).map_err(&err)?,
                "clip" => cfg.train.clip = Some(parse_value(value).map_err(&err)?),
                "params" => cfg.params_path = Some(base.join(value)),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.labels = labels.ok_or_else(|| CrfError::invalid("missing required key \"labels\""))?;
        if !kernels.is_empty() {
            cfg.kernels = kernels;
        }
        cfg.train.t_train = cfg.rnn.t_train;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.labels) {
            return Err(CrfError::invalid("labels must lie in 2..=255"));
        }
        if usize::from(self.train.ignore_label) < self.labels {
            return Err(CrfError::invalid(format!(
                "ignore_label {} collides with a real label",
                self.train.ignore_label
            )));
        }
        if self.kernels.is_empty() {
            return Err(CrfError::invalid("at least one kernel is required"));
        }
        for (spec, w) in &self.kernels {
            spec.validate()?;
            if !w.is_finite() {
                return Err(CrfError::invalid("kernel weights must be finite"));
            }
        }
        self.rnn.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.params_path {
            if !p.is_file() {
                return Err(CrfError::invalid(format!(
                    "parameter file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn kernel_specs(&self) -> Vec<KernelSpec> {
        self.kernels.iter().map(|(k, _)| *k).collect()
    }

    pub fn kernel_weights(&self) -> Vec<f64> {
        self.kernels.iter().map(|(_, w)| *w).collect()
    }

    /// Parameters from `params_path` if set, Potts initialization otherwise.
    pub fn initial_params(&self) -> Result<ParamSchedule> {
        match &self.params_path {
            Some(p) => load_params(p, self.labels, self.kernels.len()),
            None => Ok(ParamSchedule::from_config(
                init_params(self.labels, &self.kernel_weights())?,
                &self.rnn,
            )),
        }
    }

    /// Serializes back to the text format. `params` is written as given.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "labels = {}", self.labels);
        for (spec, w) in &self.kernels {
            let _ = match spec {
                KernelSpec::Spatial { theta_gamma } => {
                    writeln!(s, "kernel = spatial theta_gamma={theta_gamma} weight={w}")
                }
                KernelSpec::Bilateral {
                    theta_alpha,
                    theta_beta,
                } => writeln!(
                    s,
                    "kernel = bilateral theta_alpha={theta_alpha} theta_beta={theta_beta} weight={w}"
                ),
            };
        }
        let _ = writeln!(s, "t_train = {}", self.rnn.t_train);
        let _ = writeln!(s, "t_infer = {}", self.rnn.t_infer);
        let _ = writeln!(
            s,
            "share_iteration_params = {}",
            self.rnn.share_iteration_params
        );
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.train.momentum);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "ignore_label = {}", self.train.ignore_label);
        if let Some(c) = self.train.clip {
            let _ = writeln!(s, "clip = {c}");
        }
        if let Some(p) = &self.params_path {
            let _ = writeln!(s, "params = {}", p.display());
        }
        s
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_kernel(value: &str) -> std::result::Result<(KernelSpec, f64), String> {
    let mut parts = value.split_whitespace();
    let kind = parts.next().ok_or("empty kernel spec")?;
    let mut fields: Vec<(&str, f64)> = Vec::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected name=value in kernel spec, got {part:?}"))?;
        if fields.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("duplicate kernel field {k:?}"));
        }
        fields.push((k, parse_value(v)?));
    }
    let allowed: &[&str] = match kind {
        "spatial" => &["theta_gamma", "weight"],
        "bilateral" => &["theta_alpha", "theta_beta", "weight"],
        _ => return Err(format!("unknown kernel kind {kind:?}")),
    };
    let get = |name: &str| {
        fields
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("{kind} kernel needs {name}"))
    };
    if let Some((k, _)) = fields.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(format!("{kind} kernel has no field {k:?}"));
    }
    let spec = match kind {
        "spatial" => KernelSpec::Spatial {
            theta_gamma: get("theta_gamma")?,
        },
        _ => KernelSpec::Bilateral {
            theta_alpha: get("theta_alpha")?,
            theta_beta: get("theta_beta")?,
        },
    };
    Ok((spec, get("weight")?))
}
