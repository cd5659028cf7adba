//! Langevin sampling of the localized posterior around a trained checkpoint.
//!
//! One SGLD step moves the parameters by
//!
//! ```text
//! w <- w - (eps/2) * [ (n_beta / m) * sum_{k in batch} grad l_k(w)
//!                      + gamma * (w - w_star) ]
//!       + sqrt(eps) * N(0, 1)   (per coordinate)
//! ```
//!
//! with minibatches of size `m` drawn uniformly with replacement. The drift
//! targets the tempered posterior restricted to a Gaussian well of strength
//! `gamma` around `w_star`; `n_beta` is the effective inverse temperature
//! (the `beta * n` product treated as one knob).
//!
//! [`run_chains`] runs `chains` independent chains, each reset to `w_star`
//! with its own RNG stream and preconditioner state, discards `burn_in`
//! warm-up updates, then records `draws_per_chain` draws. Per-example train
//! losses and query observables are recorded *before* each update, so the
//! first recorded column of an unwarmed chain is the loss vector at `w_star`
//! itself. Chains are merged by column concatenation in chain order, which
//! makes the result independent of scheduling.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{SeriesLabel, Side};
use crate::model::{DatasetSplit, Example, ModelSpec, ParameterVector, Workspace};

/// Any parameter coordinate or recorded loss beyond this magnitude (or any
/// non-finite value) counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Preconditioner {
    None,
    /// Running root-mean-square scaling of both drift terms and the noise,
    /// in the style of RMSprop: per-coordinate scale
    /// `1 / (sqrt(v) + damping)` with `v` an exponential moving average of
    /// the squared mean minibatch gradient.
    RmsProp {
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_damping")]
        damping: f64,
    },
}

fn default_decay() -> f64 {
    0.99
}

fn default_damping() -> f64 {
    1e-8
}

impl Preconditioner {
    pub fn rmsprop() -> Self {
        Preconditioner::RmsProp { decay: default_decay(), damping: default_damping() }
    }
}

impl Default for Preconditioner {
    fn default() -> Self {
        Preconditioner::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    /// Step size (the `epsilon` knob).
    #[serde(rename = "epsilon")]
    pub step_size: f64,
    /// Effective inverse temperature, `beta * n` as a single hyperparameter.
    pub n_beta: f64,
    /// Localization strength (the `gamma` knob).
    #[serde(rename = "gamma")]
    pub localization: f64,
    /// Minibatch size `m`, drawn with replacement; must not exceed the train
    /// set size.
    pub batch_size: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub seed: u64,
    #[serde(default)]
    pub preconditioner: Preconditioner,
    /// Coordinates marked `false` are frozen: no drift, no noise, value stays
    /// bit-identical to `w_star`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_mask: Option<Vec<bool>>,
    /// Suppresses the injected Gaussian noise. Test-only: estimation runs
    /// must never set this.
    #[serde(default)]
    pub zero_noise: bool,
}

impl SgldConfig {
    pub fn validate(&self, n_train: usize, param_dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("epsilon", "step size must be finite and positive"));
        }
        if !(self.n_beta > 0.0) || !self.n_beta.is_finite() {
            return Err(Error::invalid("n_beta", "inverse temperature must be finite and positive"));
        }
        if !(self.localization >= 0.0) || !self.localization.is_finite() {
            return Err(Error::invalid("gamma", "localization must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "minibatch size must be at least 1"));
        }
        if self.batch_size > n_train {
            return Err(Error::invalid(
                "batch_size",
                format!("minibatch size {} exceeds train set size {}", self.batch_size, n_train),
            ));
        }
        if self.chains == 0 {
            return Err(Error::invalid("chains", "need at least one chain"));
        }
        if self.draws_per_chain < 2 {
            return Err(Error::invalid(
                "draws_per_chain",
                "covariance needs at least 2 recorded draws per chain",
            ));
        }
        if let Preconditioner::RmsProp { decay, damping } = self.preconditioner {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::invalid("preconditioner.decay", "must lie in [0, 1)"));
            }
            if !(damping > 0.0) {
                return Err(Error::invalid("preconditioner.damping", "must be positive"));
            }
        }
        if let Some(mask) = &self.weight_mask {
            if mask.len() != param_dim {
                return Err(Error::DimensionMismatch {
                    context: "weight_mask".into(),
                    expected: param_dim,
                    got: mask.len(),
                });
            }
        }
        Ok(())
    }
}

/// Query-side observables: which loss series to record per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSet {
    pub labels: Vec<SeriesLabel>,
}

impl ObservableSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One observable per query example, or one per (query, component) when
/// `per_component` is set. Every query must declare components in
/// per-component mode.
pub fn observable_set_from_queries(
    data: &DatasetSplit,
    per_component: bool,
) -> Result<ObservableSet> {
    Ok(ObservableSet { labels: series_labels(&data.query, Side::Query, per_component)? })
}

/// Train-side counterpart of [`observable_set_from_queries`]; the default
/// trace records one row per train example.
pub fn train_rows(data: &DatasetSplit, per_component: bool) -> Result<Vec<SeriesLabel>> {
    series_labels(&data.train, Side::Train, per_component)
}

fn series_labels(
    examples: &[Example],
    side: Side,
    per_component: bool,
) -> Result<Vec<SeriesLabel>> {
    let mut labels = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let base = SeriesLabel { side, index: i, component: None };
        if per_component {
            let s = ex.components.ok_or_else(|| {
                Error::UnsupportedDecomposition(format!(
                    "per-component recording requested but {base} declares no components"
                ))
            })?;
            labels.extend((0..s).map(|c| base.with_component(c)));
        } else {
            labels.push(base);
        }
    }
    Ok(labels)
}

/// Per-chain mutable state: RNG stream, preconditioner accumulator and
/// scratch buffers.
pub struct SgldState {
    chain: usize,
    steps_taken: usize,
    rng: ChaCha8Rng,
    rms: Option<Vec<f64>>,
    grad: Vec<f64>,
    ws: Workspace,
}

impl SgldState {
    /// Chains derive independent streams from (seed, chain index).
    pub fn new(spec: &ModelSpec, cfg: &SgldConfig, chain: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(chain as u64);
        let rms = match cfg.preconditioner {
            Preconditioner::None => None,
            Preconditioner::RmsProp { .. } => Some(vec![0.0; spec.param_count()]),
        };
        SgldState {
            chain,
            steps_taken: 0,
            rng,
            rms,
            grad: vec![0.0; spec.param_count()],
            ws: Workspace::new(spec),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
}

/// One SGLD update in place. RNG consumption order per step is fixed:
/// `batch_size` index draws, then one normal draw per unmasked coordinate.
pub fn sgld_step(
    spec: &ModelSpec,
    w: &mut ParameterVector,
    w_star: &ParameterVector,
    train: &[Example],
    cfg: &SgldConfig,
    state: &mut SgldState,
) -> Result<()> {
    let d = spec.param_count();
    let n = train.len();
    debug_assert_eq!(w.dim(), d);
    debug_assert_eq!(w_star.dim(), d);

    state.grad.fill(0.0);
    for _ in 0..cfg.batch_size {
        let k = state.rng.gen_range(0..n);
        crate::model::net_grad_accumulate(spec, w.as_slice(), &train[k], 1.0, &mut state.ws, &mut state.grad);
    }

    let drift_scale = cfg.n_beta / cfg.batch_size as f64;
    let gamma = cfg.localization;
    let eps = cfg.step_size;
    let mask = cfg.weight_mask.as_deref();

    if let (Some(v), Preconditioner::RmsProp { decay, damping: _ }) =
        (state.rms.as_mut(), cfg.preconditioner)
    {
        let inv_m = 1.0 / cfg.batch_size as f64;
        for (i, vi) in v.iter_mut().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                let g = state.grad[i] * inv_m;
                *vi = decay * *vi + (1.0 - decay) * g * g;
            }
        }
    }

    let damping = match cfg.preconditioner {
        Preconditioner::RmsProp { damping, .. } => damping,
        Preconditioner::None => 0.0,
    };
    let mut max_abs = 0.0f64;
    let mut diverged = false;
    for i in 0..d {
        if mask.map_or(false, |m| !m[i]) {
            continue;
        }
        let scale = match &state.rms {
            Some(v) => 1.0 / (v[i].sqrt() + damping),
            None => 1.0,
        };
        let drift = drift_scale * state.grad[i] + gamma * (w.values[i] - w_star.values[i]);
        let mut wi = w.values[i] - 0.5 * eps * scale * drift;
        if !cfg.zero_noise {
            let z: f64 = state.rng.sample(StandardNormal);
            wi += (eps * scale).sqrt() * z;
        }
        w.values[i] = wi;
        if !wi.is_finite() || wi.abs() > DIVERGENCE_LIMIT {
            diverged = true;
        }
        max_abs = max_abs.max(wi.abs());
    }
    state.steps_taken += 1;
    if diverged {
        return Err(Error::Divergence {
            chain: state.chain,
            step: state.steps_taken,
            max_abs,
        });
    }
    Ok(())
}

/// Losses recorded over all chains: `train_losses` is rows x (chains * T),
/// `observables` likewise, columns grouped by chain in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub train_labels: Vec<SeriesLabel>,
    pub obs_labels: Vec<SeriesLabel>,
    pub train_losses: DMatrix<f64>,
    pub observables: DMatrix<f64>,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
}

impl ChainTrace {
    pub fn columns(&self) -> usize {
        self.chains * self.draws_per_chain
    }

    /// Column range covered by one chain.
    pub fn chain_bounds(&self, chain: usize) -> std::ops::Range<usize> {
        chain * self.draws_per_chain..(chain + 1) * self.draws_per_chain
    }
}

/// Recording plan entry: rows of the trace produced by one example.
struct Probe {
    example: usize,
    first_row: usize,
    components: Option<usize>,
}

fn build_probes(labels: &[SeriesLabel], examples: &[Example], side: Side) -> Result<Vec<Probe>> {
    let mut probes: Vec<Probe> = Vec::new();
    for (row, label) in labels.iter().enumerate() {
        if label.side != side {
            return Err(Error::ShapeMismatch(format!(
                "label {label} on the wrong side of the trace"
            )));
        }
        if label.index >= examples.len() {
            return Err(Error::DimensionMismatch {
                context: format!("label {label}"),
                expected: examples.len(),
                got: label.index,
            });
        }
        match label.component {
            None => probes.push(Probe { example: label.index, first_row: row, components: None }),
            Some(c) => {
                let declared = examples[label.index].components.ok_or_else(|| {
                    Error::UnsupportedDecomposition(format!(
                        "label {label} but the example declares no components"
                    ))
                })?;
                if c >= declared {
                    return Err(Error::DimensionMismatch {
                        context: format!("label {label}"),
                        expected: declared,
                        got: c,
                    });
                }
                match probes.last_mut() {
                    Some(p) if p.example == label.index && p.components == Some(c) => {
                        p.components = Some(c + 1);
                    }
                    _ if c == 0 => {
                        probes.push(Probe {
                            example: label.index,
                            first_row: row,
                            components: Some(1),
                        });
                    }
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "component labels for {label} are not contiguous from .c0"
                        )));
                    }
                }
            }
        }
    }
    Ok(probes)
}

fn record_column(
    spec: &ModelSpec,
    w: &ParameterVector,
    examples: &[Example],
    probes: &[Probe],
    ws: &mut Workspace,
    scratch: &mut Vec<f64>,
    out: &mut DMatrix<f64>,
    col: usize,
    chain: usize,
    step: usize,
) -> Result<()> {
    for probe in probes {
        let ex = &examples[probe.example];
        match probe.components {
            None => {
                let v = crate::model::net_loss(spec, w.as_slice(), ex, ws);
                check_recorded(v, chain, step)?;
                out[(probe.first_row, col)] = v;
            }
            Some(s) => {
                scratch.resize(spec.output_dim(), 0.0);
                crate::model::net_component_losses(spec, w.as_slice(), ex, ws, scratch)?;
                for c in 0..s {
                    check_recorded(scratch[c], chain, step)?;
                    out[(probe.first_row + c, col)] = scratch[c];
                }
            }
        }
    }
    Ok(())
}

fn check_recorded(v: f64, chain: usize, step: usize) -> Result<()> {
    if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { chain, step, max_abs: v.abs() });
    }
    Ok(())
}

/// Runs all chains and assembles the pooled trace, with one train row per
/// train example. See [`run_chains_with_rows`] for component-level rows.
pub fn run_chains(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    observables: &ObservableSet,
    cfg: &SgldConfig,
) -> Result<ChainTrace> {
    let rows = train_rows(data, false)?;
    run_chains_with_rows(spec, w_star, data, &rows, observables, cfg)
}

/// As [`run_chains`] but with an explicit train-side row layout, so traces
/// can carry per-component train rows for component-resolved attribution.
pub fn run_chains_with_rows(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    train_labels: &[SeriesLabel],
    observables: &ObservableSet,
    cfg: &SgldConfig,
) -> Result<ChainTrace> {
    spec.validate()?;
    cfg.validate(data.n_train(), spec.param_count())?;
    if w_star.dim() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "w_star".into(),
            expected: spec.param_count(),
            got: w_star.dim(),
        });
    }
    if !w_star.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("w_star".into()));
    }
    if observables.is_empty() {
        return Err(Error::invalid("observables", "need at least one observable"));
    }
    let train_probes = build_probes(train_labels, &data.train, Side::Train)?;
    let obs_probes = build_probes(&observables.labels, &data.query, Side::Query)?;
    let t = cfg.draws_per_chain;

    let blocks: Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut state = SgldState::new(spec, cfg, chain);
            let mut w = w_star.clone();
            let mut l_block = DMatrix::zeros(train_labels.len(), t);
            let mut o_block = DMatrix::zeros(observables.len(), t);
            let mut ws = Workspace::new(spec);
            let mut scratch = Vec::new();
            for _ in 0..cfg.burn_in {
                sgld_step(spec, &mut w, w_star, &data.train, cfg, &mut state)?;
            }
            for draw in 0..t {
                let step = state.steps_taken();
                record_column(
                    spec, &w, &data.train, &train_probes, &mut ws, &mut scratch, &mut l_block,
                    draw, chain, step,
                )?;
                record_column(
                    spec, &w, &data.query, &obs_probes, &mut ws, &mut scratch, &mut o_block,
                    draw, chain, step,
                )?;
                sgld_step(spec, &mut w, w_star, &data.train, cfg, &mut state)?;
            }
            Ok((l_block, o_block))
        })
        .collect();
    let blocks = blocks?;

    let mut train_losses = DMatrix::zeros(train_labels.len(), cfg.chains * t);
    let mut obs = DMatrix::zeros(observables.len(), cfg.chains * t);
    for (chain, (l_block, o_block)) in blocks.into_iter().enumerate() {
        train_losses.columns_mut(chain * t, t).copy_from(&l_block);
        obs.columns_mut(chain * t, t).copy_from(&o_block);
    }
    Ok(ChainTrace {
        train_labels: train_labels.to_vec(),
        obs_labels: observables.labels.clone(),
        train_losses,
        observables: obs,
        chains: cfg.chains,
        draws_per_chain: t,
        seed: cfg.seed,
    })
}
