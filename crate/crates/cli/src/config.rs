//! Run configuration: a single TOML file describing the model, the data, the
//! checkpoint, the sampler, and the optional oracle and LDS sections.
//!
//! Parsing resolves every sampler default into the returned value, so the
//! config echoed into a run directory is fully explicit. Validation messages
//! carry the line of the offending key whenever the key appears in the
//! source text.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bif_core::lds::{retrain, LdsConfig, RetrainSettings};
use bif_core::model::synthetic::{
    linear_teacher, two_gaussians, LinearTeacherConfig, TwoGaussiansConfig,
};
use bif_core::model::{Activation, DatasetSplit, ModelKind, ModelSpec, ParameterVector};
use bif_core::sgld::{Preconditioner, SgldConfig};
use bif_core::{Error, Result};

/// Standard sampler settings applied when a key is absent.
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_N_BETA: f64 = 200.0;
pub const DEFAULT_GAMMA: f64 = 10_000.0;
pub const DEFAULT_BATCH_SIZE: usize = 1024;
pub const DEFAULT_CHAINS: usize = 4;
pub const DEFAULT_DRAWS: usize = 100;
pub const DEFAULT_BURN_IN: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Names the run directory under the output root; must be unique there.
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub checkpoint: CheckpointSection,
    #[serde(default)]
    pub sgld: SgldSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lds: Option<LdsConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    /// Hidden-layer widths, accepted only for `kind = "mlp"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelSpec> {
        let spec = match self.kind {
            ModelKind::LinearRegression => {
                ModelSpec::linear_regression(self.input_dim, self.output_dim, self.bias)
            }
            ModelKind::LogisticRegression => {
                ModelSpec::logistic_regression(self.input_dim, self.output_dim, self.bias)
            }
            ModelKind::Mlp => {
                let mut widths = Vec::with_capacity(self.hidden.len() + 2);
                widths.push(self.input_dim);
                widths.extend_from_slice(&self.hidden);
                widths.push(self.output_dim);
                ModelSpec::mlp(widths, self.activation.unwrap_or(Activation::Tanh), self.bias)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSection {
    LinearTeacher(LinearTeacherConfig),
    TwoGaussians(TwoGaussiansConfig),
    /// JSON file holding `{"train": [...], "query": [...]}` examples.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CheckpointSection {
    /// Minimize the mean train loss by gradient descent and anchor there.
    Train(RetrainSettings),
    /// JSON file holding the flat parameter vector.
    File { path: PathBuf },
}

impl Default for CheckpointSection {
    fn default() -> Self {
        CheckpointSection::Train(RetrainSettings::default())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws_per_chain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preconditioner: Option<Preconditioner>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_mask: Option<Vec<bool>>,
}

impl SgldSection {
    /// Concrete sampler settings with defaults in place of absent keys.
    /// Noise suppression is a command-line test mode, never a config key.
    pub fn to_config(&self) -> SgldConfig {
        SgldConfig {
            step_size: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            n_beta: self.n_beta.unwrap_or(DEFAULT_N_BETA),
            localization: self.gamma.unwrap_or(DEFAULT_GAMMA),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            chains: self.chains.unwrap_or(DEFAULT_CHAINS),
            draws_per_chain: self.draws_per_chain.unwrap_or(DEFAULT_DRAWS),
            burn_in: self.burn_in.unwrap_or(DEFAULT_BURN_IN),
            seed: self.seed.unwrap_or(0),
            preconditioner: self.preconditioner.clone().unwrap_or(Preconditioner::None),
            weight_mask: self.weight_mask.clone(),
            zero_noise: false,
        }
    }

    fn fill_defaults(&mut self) {
        let resolved = self.to_config();
        self.epsilon = Some(resolved.step_size);
        self.n_beta = Some(resolved.n_beta);
        self.gamma = Some(resolved.localization);
        self.batch_size = Some(resolved.batch_size);
        self.chains = Some(resolved.chains);
        self.draws_per_chain = Some(resolved.draws_per_chain);
        self.burn_in = Some(resolved.burn_in);
        self.seed = Some(resolved.seed);
        self.preconditioner = Some(resolved.preconditioner);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Dampening added to the curvature before inversion.
    pub gamma: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<OracleMethod>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    DampenedIf,
    Gradsim,
    /// Exact Gaussian-posterior influence; quadratic losses only.
    Analytic,
}

impl OracleMethod {
    pub fn file_stem(self) -> &'static str {
        match self {
            OracleMethod::DampenedIf => "dampened-if",
            OracleMethod::Gradsim => "gradsim",
            OracleMethod::Analytic => "analytic",
        }
    }
}

fn default_methods() -> Vec<OracleMethod> {
    vec![OracleMethod::DampenedIf]
}

/// Line (1-based) on which `key` is assigned within `section` ("" for the
/// top level, dotted for nested tables). Purely textual; good enough to
/// anchor error messages.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_start_matches('[').trim_end_matches(']').trim().to_string();
        } else if let Some((k, _)) = t.split_once('=') {
            if current == section && k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

struct Anchors<'a> {
    text: &'a str,
}

impl Anchors<'_> {
    fn err(&self, section: &str, key: &str, reason: impl Into<String>) -> Error {
        let name = if section.is_empty() {
            key.to_string()
        } else {
            format!("[{section}].{key}")
        };
        let name = match key_line(self.text, section, key) {
            Some(n) => format!("{name} (line {n})"),
            None => name,
        };
        Error::InvalidParameter { name, reason: reason.into() }
    }

    fn check(&self, ok: bool, section: &str, key: &str, reason: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.err(section, key, reason))
        }
    }
}

/// Parses the TOML text, validates every section, and resolves sampler
/// defaults into the returned config. `base` is the directory that relative
/// file references are interpreted against; referenced files must exist.
pub fn parse_and_validate(text: &str, base: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidParameter {
        name: "config".into(),
        reason: e.to_string(),
    })?;
    let at = Anchors { text };

    at.check(!cfg.run_id.is_empty(), "", "run_id", "must not be empty")?;
    at.check(
        cfg.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
        "",
        "run_id",
        "may only contain ASCII letters, digits, '-', '_' and '.'",
    )?;

    validate_model(&cfg, &at)?;
    let n_train = validate_data(&cfg, &at, base)?;
    validate_checkpoint(&cfg, &at, base)?;
    validate_sgld(&cfg, &at, n_train)?;
    if let Some(oracle) = &cfg.oracle {
        at.check(
            oracle.gamma.is_finite() && oracle.gamma >= 0.0,
            "oracle",
            "gamma",
            "dampening must be finite and non-negative",
        )?;
        at.check(!oracle.methods.is_empty(), "oracle", "methods", "need at least one method")?;
        if oracle.methods.contains(&OracleMethod::Analytic) {
            at.check(
                cfg.model.kind == ModelKind::LinearRegression,
                "oracle",
                "methods",
                "the analytic method needs exactly quadratic losses (linear-regression)",
            )?;
        }
    }
    if let Some(lds) = &cfg.lds {
        lds.validate().map_err(|e| reanchor_lds(e, &at))?;
    }

    cfg.sgld.fill_defaults();
    Ok(cfg)
}

/// Core LDS validation errors name bare fields; point them back at the
/// `[lds]` tables of the source text.
fn reanchor_lds(e: Error, at: &Anchors) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => {
            let (section, key) = match name.strip_prefix("retrain.") {
                Some(key) => ("lds.retrain", key.to_string()),
                None => ("lds", name),
            };
            at.err(section, &key, reason)
        }
        other => other,
    }
}

fn validate_model(cfg: &RunConfig, at: &Anchors) -> Result<()> {
    let m = &cfg.model;
    at.check(m.input_dim >= 1, "model", "input_dim", "must be at least 1")?;
    at.check(m.output_dim >= 1, "model", "output_dim", "must be at least 1")?;
    match m.kind {
        ModelKind::Mlp => {
            at.check(!m.hidden.is_empty(), "model", "hidden", "mlp needs at least one hidden layer")?;
            at.check(m.hidden.iter().all(|&w| w >= 1), "model", "hidden", "widths must be at least 1")?;
        }
        _ => {
            at.check(m.hidden.is_empty(), "model", "hidden", "only mlp takes hidden layers")?;
            at.check(m.activation.is_none(), "model", "activation", "only mlp takes an activation")?;
            if m.kind == ModelKind::LogisticRegression {
                at.check(m.output_dim >= 2, "model", "output_dim", "classification needs at least 2 classes")?;
            }
        }
    }
    m.build()?;
    Ok(())
}

/// Returns the train-set size, loading file-backed data to count it.
fn validate_data(cfg: &RunConfig, at: &Anchors, base: &Path) -> Result<usize> {
    match &cfg.data {
        DataSection::LinearTeacher(d) => {
            at.check(d.n_train >= 1, "data", "n_train", "must be at least 1")?;
            at.check(d.n_query >= 1, "data", "n_query", "must be at least 1")?;
            at.check(d.input_dim == cfg.model.input_dim, "data", "input_dim", "must match [model].input_dim")?;
            at.check(d.output_dim == cfg.model.output_dim, "data", "output_dim", "must match [model].output_dim")?;
            at.check(d.noise.is_finite() && d.noise >= 0.0, "data", "noise", "must be finite and non-negative")?;
            at.check(
                cfg.model.kind != ModelKind::LogisticRegression,
                "data",
                "source",
                "linear-teacher data carries regression targets",
            )?;
            Ok(d.n_train)
        }
        DataSection::TwoGaussians(d) => {
            at.check(d.n_train >= 1, "data", "n_train", "must be at least 1")?;
            at.check(d.n_query >= 1, "data", "n_query", "must be at least 1")?;
            at.check(d.input_dim == cfg.model.input_dim, "data", "input_dim", "must match [model].input_dim")?;
            at.check(d.spread.is_finite() && d.spread > 0.0, "data", "spread", "must be finite and positive")?;
            at.check(d.separation.is_finite(), "data", "separation", "must be finite")?;
            at.check(
                cfg.model.kind == ModelKind::LogisticRegression && cfg.model.output_dim == 2,
                "data",
                "source",
                "two-gaussians data needs a 2-class logistic-regression model",
            )?;
            Ok(d.n_train)
        }
        DataSection::File { path } => {
            let full = base.join(path);
            at.check(
                full.is_file(),
                "data",
                "path",
                &format!("file {} does not exist", full.display()),
            )?;
            let data = load_dataset(&full)?;
            Ok(data.n_train())
        }
    }
}

fn validate_checkpoint(cfg: &RunConfig, at: &Anchors, base: &Path) -> Result<()> {
    match &cfg.checkpoint {
        CheckpointSection::Train(settings) => settings.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                let key = name.strip_prefix("retrain.").unwrap_or(&name).to_string();
                at.err("checkpoint", &key, reason)
            }
            other => other,
        }),
        CheckpointSection::File { path } => {
            let full = base.join(path);
            at.check(
                full.is_file(),
                "checkpoint",
                "path",
                &format!("file {} does not exist", full.display()),
            )
        }
    }
}

fn validate_sgld(cfg: &RunConfig, at: &Anchors, n_train: usize) -> Result<()> {
    let s = &cfg.sgld;
    if let Some(e) = s.epsilon {
        at.check(e.is_finite() && e > 0.0, "sgld", "epsilon", "step size must be finite and positive")?;
    }
    if let Some(nb) = s.n_beta {
        at.check(nb.is_finite() && nb > 0.0, "sgld", "n_beta", "inverse temperature must be finite and positive")?;
    }
    if let Some(g) = s.gamma {
        at.check(g.is_finite() && g >= 0.0, "sgld", "gamma", "localization must be finite and non-negative")?;
    }
    if let Some(c) = s.chains {
        at.check(c >= 1, "sgld", "chains", "need at least one chain")?;
    }
    if let Some(t) = s.draws_per_chain {
        at.check(t >= 2, "sgld", "draws_per_chain", "covariances need at least 2 draws")?;
    }
    if let Some(Preconditioner::RmsProp { decay, damping }) = s.preconditioner {
        at.check(decay > 0.0 && decay < 1.0, "sgld", "preconditioner", "decay must lie in (0, 1)")?;
        at.check(damping.is_finite() && damping > 0.0, "sgld", "preconditioner", "damping must be finite and positive")?;
    }
    if let Some(mask) = &s.weight_mask {
        let d = cfg.model.build()?.param_count();
        at.check(
            mask.len() == d,
            "sgld",
            "weight_mask",
            &format!("mask length {} must equal the parameter count {d}", mask.len()),
        )?;
    }
    let batch = s.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    if let Some(m) = s.batch_size {
        at.check(m >= 1, "sgld", "batch_size", "must be at least 1")?;
    }
    if batch > n_train {
        let reason = if s.batch_size.is_none() {
            format!(
                "standard default ({DEFAULT_BATCH_SIZE}) exceeds the train set size ({n_train}); \
                 set batch_size explicitly"
            )
        } else {
            format!("exceeds the train set size ({n_train})")
        };
        return Err(at.err("sgld", "batch_size", reason));
    }
    Ok(())
}

/// Everything a command needs at run time, built from a validated config.
pub struct ResolvedRun {
    pub spec: ModelSpec,
    pub data: DatasetSplit,
    pub w_star: ParameterVector,
    pub sgld: SgldConfig,
}

pub fn resolve(cfg: &RunConfig, base: &Path) -> Result<ResolvedRun> {
    let spec = cfg.model.build()?;
    let data = match &cfg.data {
        DataSection::LinearTeacher(d) => linear_teacher(d)?.0,
        DataSection::TwoGaussians(d) => two_gaussians(d)?,
        DataSection::File { path } => load_dataset(&base.join(path))?,
    };
    spec.check_dataset(&data)?;
    let sgld = cfg.sgld.to_config();
    sgld.validate(data.n_train(), spec.param_count())?;
    let w_star = match &cfg.checkpoint {
        CheckpointSection::Train(settings) => retrain(&spec, &data.train, settings, 0)?,
        CheckpointSection::File { path } => load_params(&base.join(path), spec.param_count())?,
    };
    Ok(ResolvedRun { spec, data, w_star, sgld })
}

fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path)?;
    let raw: DatasetSplit = serde_json::from_str(&text).map_err(|e| Error::MalformedArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    DatasetSplit::new(raw.train, raw.query)
}

fn load_params(path: &Path, expected_dim: usize) -> Result<ParameterVector> {
    let text = fs::read_to_string(path)?;
    let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::MalformedArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if values.len() != expected_dim {
        return Err(Error::DimensionMismatch {
            context: "checkpoint parameters".into(),
            expected: expected_dim,
            got: values.len(),
        });
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(ParameterVector::new(values))
}
