//! Experiment configuration: flat `key = value` files with `#` comments,
//! per-model presets, flag overrides, and validation. The resolved
//! configuration is echoed verbatim into every run header so a run is fully
//! reproducible from its artifacts.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use tsda_core::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    L96,
    Burgers,
    LinearFromFile,
}

impl Model {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "l96" => Ok(Self::L96),
            "burgers" => Ok(Self::Burgers),
            "linear-from-file" => Ok(Self::LinearFromFile),
            other => bail!("unknown model '{other}' (expected l96, burgers, or linear-from-file)"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::L96 => "l96",
            Self::Burgers => "burgers",
            Self::LinearFromFile => "linear-from-file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Les,
    Filter,
    Exkf,
    Detect,
    Reconstruct,
    Ensemble,
}

impl Method {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "les" => Ok(Self::Les),
            "filter" => Ok(Self::Filter),
            "exkf" => Ok(Self::Exkf),
            "detect" => Ok(Self::Detect),
            "reconstruct" => Ok(Self::Reconstruct),
            "ensemble" => Ok(Self::Ensemble),
            other => bail!("unknown method '{other}'"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Les => "les",
            Self::Filter => "filter",
            Self::Exkf => "exkf",
            Self::Detect => "detect",
            Self::Reconstruct => "reconstruct",
            Self::Ensemble => "ensemble",
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: Model,
    pub model_file: Option<PathBuf>,
    pub d: usize,
    pub forcing: f64,
    pub k: usize,
    pub p: f64,
    pub dt: f64,
    pub t_end: f64,
    pub obs_rank: usize,
    pub sigma: f64,
    pub ensemble_size: usize,
    pub perturbation_scale: f64,
    pub seed: u64,
    pub burn_in: f64,
    pub method: Method,
}

/// Flag-level overrides collected by the argument parser; every field beats
/// the config file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub p: Option<f64>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub obs_rank: Option<usize>,
    pub sigma: Option<f64>,
    pub ensemble: Option<usize>,
    pub perturb: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default)]
struct RawConfig {
    model: Option<String>,
    model_file: Option<PathBuf>,
    d: Option<usize>,
    forcing: Option<f64>,
    k: Option<usize>,
    p: Option<f64>,
    dt: Option<f64>,
    t_end: Option<f64>,
    obs_rank: Option<usize>,
    sigma: Option<f64>,
    ensemble_size: Option<usize>,
    perturbation_scale: Option<f64>,
    seed: Option<u64>,
    burn_in: Option<f64>,
    method: Option<String>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("line {line}: key '{key}': cannot parse '{value}': {e}"))
}

fn parse_config_text(text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let stripped = line.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped
            .split_once('=')
            .ok_or_else(|| anyhow!("line {lineno}: expected 'key = value', got '{stripped}'"))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "model" => raw.model = Some(value.to_string()),
            "model_file" => raw.model_file = Some(PathBuf::from(value)),
            "d" => raw.d = Some(parse_value(key, value, lineno)?),
            "forcing" => raw.forcing = Some(parse_value(key, value, lineno)?),
            "k" => raw.k = Some(parse_value(key, value, lineno)?),
            "p" => raw.p = Some(parse_value(key, value, lineno)?),
            "dt" => raw.dt = Some(parse_value(key, value, lineno)?),
            "t_end" => raw.t_end = Some(parse_value(key, value, lineno)?),
            "obs_rank" => raw.obs_rank = Some(parse_value(key, value, lineno)?),
            "sigma" => raw.sigma = Some(parse_value(key, value, lineno)?),
            "ensemble_size" => raw.ensemble_size = Some(parse_value(key, value, lineno)?),
            "perturbation_scale" => {
                raw.perturbation_scale = Some(parse_value(key, value, lineno)?)
            }
            "seed" => raw.seed = Some(parse_value(key, value, lineno)?),
            "burn_in" => raw.burn_in = Some(parse_value(key, value, lineno)?),
            "method" => raw.method = Some(value.to_string()),
            other => bail!("line {lineno}: unknown key '{other}'"),
        }
    }
    Ok(raw)
}

struct Preset {
    d: usize,
    forcing: f64,
    k: usize,
    p: f64,
    dt: f64,
    t_end: f64,
    sigma: f64,
    ensemble_size: usize,
    perturbation_scale: f64,
    burn_in: f64,
}

fn preset(model: Model) -> Preset {
    match model {
        Model::L96 => Preset {
            d: 18,
            forcing: 8.0,
            k: 8,
            p: 10.0,
            dt: 0.01,
            t_end: 200.0,
            sigma: 0.0,
            ensemble_size: 1,
            perturbation_scale: 0.1,
            burn_in: 100.0,
        },
        Model::Burgers => Preset {
            d: 18,
            forcing: 0.0,
            k: 11,
            p: 20.0,
            dt: 0.01,
            t_end: 400.0,
            sigma: 0.0,
            ensemble_size: 1,
            perturbation_scale: 0.01,
            burn_in: 100.0,
        },
        Model::LinearFromFile => Preset {
            d: 2,
            forcing: 0.0,
            k: 1,
            p: 1.0,
            dt: 0.01,
            t_end: 10.0,
            sigma: 0.0,
            ensemble_size: 1,
            perturbation_scale: 0.1,
            burn_in: 0.0,
        },
    }
}

/// Resolve a configuration from an optional file and the flag overrides;
/// the subcommand supplies the method. Flags beat file values, file values
/// beat the model preset.
pub fn load_config(
    path: Option<&Path>,
    overrides: &Overrides,
    method: Method,
) -> Result<ExperimentConfig> {
    let raw = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            parse_config_text(&text)?
        }
        None => RawConfig::default(),
    };

    // the subcommand is authoritative for the method; a method key in the
    // file is still validated so typos surface
    if let Some(m) = &raw.method {
        Method::parse(m)?;
    }

    let model_name = overrides
        .model
        .clone()
        .or_else(|| raw.model.clone())
        .unwrap_or_else(|| "l96".to_string());
    let model = Model::parse(&model_name)?;
    let base = preset(model);

    let k = overrides.k.or(raw.k).unwrap_or(base.k);
    let cfg = ExperimentConfig {
        model,
        model_file: raw.model_file,
        d: overrides.d.or(raw.d).unwrap_or(base.d),
        forcing: raw.forcing.unwrap_or(base.forcing),
        k,
        p: overrides.p.or(raw.p).unwrap_or(base.p),
        dt: overrides.dt.or(raw.dt).unwrap_or(base.dt),
        t_end: overrides.t_end.or(raw.t_end).unwrap_or(base.t_end),
        // the observation rank follows the tangent dimension unless pinned
        obs_rank: overrides.obs_rank.or(raw.obs_rank).unwrap_or(k),
        sigma: overrides.sigma.or(raw.sigma).unwrap_or(base.sigma),
        ensemble_size: overrides
            .ensemble
            .or(raw.ensemble_size)
            .unwrap_or(if method == Method::Ensemble {
                20
            } else {
                base.ensemble_size
            }),
        perturbation_scale: overrides
            .perturb
            .or(raw.perturbation_scale)
            .unwrap_or(base.perturbation_scale),
        seed: overrides.seed.or(raw.seed).unwrap_or(0),
        burn_in: raw.burn_in.unwrap_or(base.burn_in),
        method,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let min_d = match self.model {
            Model::L96 => 4,
            Model::Burgers => 3,
            Model::LinearFromFile => 1,
        };
        if self.d < min_d {
            problems.push(format!(
                "d = {} below the minimum {} for model {}",
                self.d,
                min_d,
                self.model.name()
            ));
        }
        if self.k == 0 || self.k > self.d {
            problems.push(format!("k = {} must satisfy 1 <= k <= d = {}", self.k, self.d));
        }
        if self.obs_rank == 0 || self.obs_rank > self.d {
            problems.push(format!(
                "obs_rank = {} must satisfy 1 <= obs_rank <= d = {}",
                self.obs_rank, self.d
            ));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            problems.push(format!("p = {} must be positive", self.p));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            problems.push(format!("t_end = {} must be positive", self.t_end));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            problems.push(format!("sigma = {} must be nonnegative", self.sigma));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            problems.push(format!("burn_in = {} must be nonnegative", self.burn_in));
        }
        if self.ensemble_size == 0 {
            problems.push("ensemble_size must be at least 1".to_string());
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            problems.push(format!(
                "perturbation_scale = {} must be nonnegative",
                self.perturbation_scale
            ));
        }
        if self.model == Model::LinearFromFile && self.model_file.is_none() {
            problems.push("model 'linear-from-file' requires the model_file key".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", problems.join("\n  "))
        }
    }

    /// Key-value block echoed into `run_header.txt`.
    pub fn header(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("tsda {}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("method = {}\n", self.method.name()));
        out.push_str(&format!("model = {}\n", self.model.name()));
        if let Some(file) = &self.model_file {
            out.push_str(&format!("model_file = {}\n", file.display()));
        }
        out.push_str(&format!("d = {}\n", self.d));
        out.push_str(&format!("forcing = {}\n", self.forcing));
        out.push_str(&format!("k = {}\n", self.k));
        out.push_str(&format!("obs_rank = {}\n", self.obs_rank));
        out.push_str(&format!("p = {}\n", self.p));
        out.push_str(&format!("dt = {}\n", self.dt));
        out.push_str(&format!("t_end = {}\n", self.t_end));
        out.push_str(&format!("sigma = {}\n", self.sigma));
        out.push_str(&format!("ensemble_size = {}\n", self.ensemble_size));
        out.push_str(&format!(
            "perturbation_scale = {}\n",
            self.perturbation_scale
        ));
        out.push_str(&format!("burn_in = {}\n", self.burn_in));
        out.push_str(&format!("seed = {}\n", self.seed));
        out
    }
}

/// Load a dense square matrix from a plain text file: one row per line,
/// whitespace or comma separated entries.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read matrix file {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let stripped = line.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let row: Vec<f64> = stripped
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| anyhow!("line {}: bad entry '{tok}': {e}", idx + 1))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("matrix file {} is empty", path.display());
    }
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        bail!("matrix file {} is not square", path.display());
    }
    let mut m = DenseMatrix::zeros(d, d);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                bail!("matrix file {}: non-finite entry at ({i}, {j})", path.display());
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}
