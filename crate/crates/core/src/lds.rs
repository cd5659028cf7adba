//! Linear datamodeling score: retrain-based ground truth for attribution.
//!
//! An influence matrix predicts how the loss of each query would change if a
//! train example were dropped. The LDS protocol checks those predictions
//! against reality: draw random train subsets, actually retrain on each, and
//! rank-correlate the additive prediction `sum_{i in subset} tau_ij` with the
//! retrained query losses. Scores near 1 mean the attribution ranks queries
//! the same way retraining does.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::InfluenceMatrix;
use crate::model::{Example, ModelSpec, ParameterVector};

/// Consecutive all-empty subset draws tolerated before giving up.
const EMPTY_REDRAW_CAP: usize = 10_000;

/// Full-batch gradient descent settings used for subset retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainSettings {
    /// Learning rate for plain gradient descent on the mean subset loss.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Stop early once the mean-loss gradient norm falls below this.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Standard deviation of the Gaussian init; 0 starts from the origin.
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_step_size() -> f64 {
    0.5
}

fn default_max_steps() -> usize {
    10_000
}

fn default_grad_tol() -> f64 {
    1e-8
}

impl Default for RetrainSettings {
    fn default() -> Self {
        RetrainSettings {
            step_size: default_step_size(),
            max_steps: default_max_steps(),
            grad_tol: default_grad_tol(),
            init_scale: 0.0,
            seed: 0,
        }
    }
}

impl RetrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("retrain.step_size", "must be finite and positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("retrain.max_steps", "must be at least 1"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::invalid("retrain.grad_tol", "must be non-negative"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::invalid("retrain.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdsConfig {
    /// Inclusion probability for each attribution example in a subset.
    #[serde(default = "default_alpha_retrain")]
    pub alpha_retrain: f64,
    /// Fraction of the train set that participates in attribution.
    #[serde(default = "default_alpha_attribution")]
    pub alpha_attribution: f64,
    #[serde(default = "default_num_subsets")]
    pub num_subsets: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retrain: RetrainSettings,
}

fn default_alpha_retrain() -> f64 {
    0.5
}

fn default_alpha_attribution() -> f64 {
    1.0
}

fn default_num_subsets() -> usize {
    100
}

impl Default for LdsConfig {
    fn default() -> Self {
        LdsConfig {
            alpha_retrain: default_alpha_retrain(),
            alpha_attribution: default_alpha_attribution(),
            num_subsets: default_num_subsets(),
            seed: 0,
            retrain: RetrainSettings::default(),
        }
    }
}

impl LdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_retrain > 0.0 && self.alpha_retrain < 1.0) {
            return Err(Error::invalid("alpha_retrain", "must lie strictly between 0 and 1"));
        }
        if !(self.alpha_attribution > 0.0 && self.alpha_attribution <= 1.0) {
            return Err(Error::invalid("alpha_attribution", "must lie in (0, 1]"));
        }
        if self.num_subsets < 2 {
            return Err(Error::invalid("num_subsets", "need at least 2 subsets for a mean and spread"));
        }
        self.retrain.validate()
    }
}

/// The subset of train indices that attribution is computed for: a seeded
/// shuffle of `0..n` truncated to `ceil(alpha * n)`, returned in ascending
/// order so downstream row order is stable.
pub fn attribution_set(n: usize, alpha: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("n", "attribution needs a non-empty train set"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha_attribution", "must lie in (0, 1]"));
    }
    let keep = (alpha * n as f64).ceil() as usize;
    let keep = keep.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Draws `num_subsets` random subsets of `0..n_attr` (positions within the
/// attribution set), each element kept with probability `alpha_retrain`.
/// Empty draws are redrawn so every subset supports a retrain.
pub fn subsample_datasets(n_attr: usize, cfg: &LdsConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if n_attr == 0 {
        return Err(Error::invalid("n_attr", "attribution set must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subsets = Vec::with_capacity(cfg.num_subsets);
    for k in 0..cfg.num_subsets {
        let mut redraws = 0usize;
        let subset = loop {
            let draw: Vec<usize> =
                (0..n_attr).filter(|_| rng.gen_bool(cfg.alpha_retrain)).collect();
            if !draw.is_empty() {
                break draw;
            }
            redraws += 1;
            if redraws == 1 {
                log::warn!("subset {k} came up empty; redrawing");
            }
            if redraws >= EMPTY_REDRAW_CAP {
                return Err(Error::invalid(
                    "alpha_retrain",
                    "subset draws keep coming up empty; raise alpha_retrain or the set size",
                ));
            }
        };
        subsets.push(subset);
    }
    Ok(subsets)
}

/// Retrains from scratch on the given train examples with full-batch
/// gradient descent on the mean loss. `stream` picks an independent init
/// noise stream under the shared `settings.seed`.
pub fn retrain(
    spec: &ModelSpec,
    train: &[Example],
    settings: &RetrainSettings,
    stream: u64,
) -> Result<ParameterVector> {
    settings.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "cannot retrain on an empty subset"));
    }
    let d = spec.param_count();
    let mut w = ParameterVector::zeros(d);
    if settings.init_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(stream);
        for v in w.values.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = settings.init_scale * z;
        }
    }
    let scale = 1.0 / train.len() as f64;
    let mut grad = vec![0.0; d];
    for step in 0..settings.max_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for ex in train {
            loss += spec.loss(&w, ex)?;
            let g = spec.grad(&w, ex)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::RetrainDiverged { step, loss });
        }
        let norm = grad.iter().map(|g| (g * scale) * (g * scale)).sum::<f64>().sqrt();
        if norm <= settings.grad_tol {
            return Ok(w);
        }
        for (wi, gi) in w.values.iter_mut().zip(&grad) {
            *wi -= settings.step_size * scale * gi;
            if !wi.is_finite() {
                return Err(Error::RetrainDiverged { step, loss });
            }
        }
    }
    Ok(w)
}

/// Retrains on every subset and evaluates each query loss at the result.
/// Row `k` of the output holds the query losses after retraining on
/// `subsets[k]`; subsets index into `attribution`, which in turn holds
/// positions in `train`.
pub fn retrained_query_losses(
    spec: &ModelSpec,
    train: &[Example],
    query: &[Example],
    attribution: &[usize],
    subsets: &[Vec<usize>],
    settings: &RetrainSettings,
) -> Result<DMatrix<f64>> {
    for &i in attribution {
        if i >= train.len() {
            return Err(Error::DimensionMismatch {
                context: "attribution index".into(),
                expected: train.len(),
                got: i,
            });
        }
    }
    let rows: Vec<Vec<f64>> = subsets
        .par_iter()
        .enumerate()
        .map(|(k, subset)| -> Result<Vec<f64>> {
            let members: Result<Vec<Example>> = subset
                .iter()
                .map(|&local| {
                    attribution.get(local).map(|&g| train[g].clone()).ok_or_else(|| {
                        Error::DimensionMismatch {
                            context: "subset index".into(),
                            expected: attribution.len(),
                            got: local,
                        }
                    })
                })
                .collect();
            let w = retrain(spec, &members?, settings, k as u64)?;
            query.iter().map(|q| spec.loss(&w, q)).collect()
        })
        .collect::<Result<_>>()?;
    let q = query.len();
    Ok(DMatrix::from_fn(subsets.len(), q, |k, j| rows[k][j]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    /// True when either side had no rank variation (all values tied).
    pub degenerate: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Tied block shares the mean of the ranks it spans (1-based).
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean_rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Degenerate inputs
/// (either side constant) report `rho = 0` and set the flag.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<RankCorrelation> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman inputs".into(),
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman", "need at least two observations"));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(RankCorrelation { rho: 0.0, degenerate: true });
    }
    Ok(RankCorrelation { rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdsReport {
    /// Mean Spearman correlation over subsets.
    pub mean: f64,
    /// Standard error of the mean: sample standard deviation over sqrt(K).
    pub std_error: f64,
    pub per_subset: Vec<f64>,
    /// Subsets whose correlation was degenerate and scored as 0.
    pub degenerate_subsets: Vec<usize>,
}

/// Scores an influence matrix against retrained ground truth. Rows of `tau`
/// must correspond to attribution-set positions (the index space `subsets`
/// draw from); `true_losses` is subsets-by-queries.
pub fn lds_score(
    tau: &InfluenceMatrix,
    subsets: &[Vec<usize>],
    true_losses: &DMatrix<f64>,
) -> Result<LdsReport> {
    if subsets.len() < 2 {
        return Err(Error::invalid("num_subsets", "need at least 2 subsets for a mean and spread"));
    }
    if true_losses.nrows() != subsets.len() || true_losses.ncols() != tau.n_cols() {
        return Err(Error::ShapeMismatch(format!(
            "true losses are {}x{}, expected {}x{}",
            true_losses.nrows(),
            true_losses.ncols(),
            subsets.len(),
            tau.n_cols()
        )));
    }
    let q = tau.n_cols();
    let mut per_subset = Vec::with_capacity(subsets.len());
    let mut degenerate_subsets = Vec::new();
    let mut pred = vec![0.0; q];
    let mut truth = vec![0.0; q];
    for (k, subset) in subsets.iter().enumerate() {
        pred.iter_mut().for_each(|p| *p = 0.0);
        for &i in subset {
            if i >= tau.n_rows() {
                return Err(Error::DimensionMismatch {
                    context: "subset index".into(),
                    expected: tau.n_rows(),
                    got: i,
                });
            }
            for j in 0..q {
                pred[j] += tau.values[(i, j)];
            }
        }
        for j in 0..q {
            truth[j] = true_losses[(k, j)];
        }
        let rc = spearman(&pred, &truth)?;
        if rc.degenerate {
            degenerate_subsets.push(k);
        }
        per_subset.push(rc.rho);
    }
    let kf = per_subset.len() as f64;
    let mean = per_subset.iter().sum::<f64>() / kf;
    let var = per_subset.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (kf - 1.0);
    Ok(LdsReport { mean, std_error: (var / kf).sqrt(), per_subset, degenerate_subsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::MatrixKind;
    use crate::labels::SeriesLabel;
    use crate::model::DatasetSplit;

    #[test]
    fn spearman_matches_hand_example() {
        let rc = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rc.rho - 0.8).abs() < 1e-12, "{}", rc.rho);
        assert!(!rc.degenerate);
    }

    #[test]
    fn spearman_reversed_is_minus_one() {
        let rc = spearman(&[1.0, 2.0, 3.0], &[5.0, 0.0, -1.0]).unwrap();
        assert!((rc.rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        // x ranks: (1.5, 1.5, 3); y ranks: (1, 2, 3).
        let rc = spearman(&[1.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        let expected = 0.5 * 3.0f64.sqrt();
        assert!((rc.rho - expected).abs() < 1e-12, "{}", rc.rho);
    }

    #[test]
    fn spearman_constant_side_is_degenerate_zero() {
        let rc = spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rc.rho, 0.0);
        assert!(rc.degenerate);
    }

    #[test]
    fn attribution_set_is_sorted_and_sized() {
        let set = attribution_set(10, 0.45, 7).unwrap();
        assert_eq!(set.len(), 5);
        assert!(set.windows(2).all(|w| w[0] < w[1]));
        assert!(set.iter().all(|&i| i < 10));
        assert_eq!(set, attribution_set(10, 0.45, 7).unwrap());
        assert_ne!(set, attribution_set(10, 0.45, 8).unwrap());
    }

    #[test]
    fn subset_sizes_concentrate_at_alpha_n() {
        let cfg = LdsConfig {
            alpha_retrain: 0.5,
            num_subsets: 1000,
            seed: 11,
            ..LdsConfig::default()
        };
        let subsets = subsample_datasets(1000, &cfg).unwrap();
        assert!(subsets.iter().all(|s| !s.is_empty()));
        let mean_size =
            subsets.iter().map(|s| s.len() as f64).sum::<f64>() / subsets.len() as f64;
        // Binomial(1000, 0.5) has sd ~ 15.8; a mean of 1000 draws sits
        // within 3 * sd / sqrt(1000) ~ 1.5 of 500 essentially always.
        assert!((mean_size - 500.0).abs() < 3.0, "mean size {mean_size}");
    }

    #[test]
    fn retrain_full_set_matches_normal_equations() {
        use nalgebra::{DMatrix, DVector};
        let spec = ModelSpec::linear_regression(3, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train: Vec<Example> = (0..10)
            .map(|_| {
                Example::regression(
                    (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                    vec![rng.gen::<f64>() * 2.0 - 1.0],
                )
            })
            .collect();
        let settings = RetrainSettings { grad_tol: 1e-12, ..RetrainSettings::default() };
        let w = retrain(&spec, &train, &settings, 0).unwrap();

        let x = DMatrix::from_fn(10, 3, |i, j| train[i].features[j]);
        let y = DVector::from_fn(10, |i, _| match &train[i].target {
            crate::model::Target::Values(v) => v[0],
            _ => unreachable!(),
        });
        let exact = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
        for j in 0..3 {
            assert!((w.values[j] - exact[j]).abs() < 1e-6, "coord {j}");
        }
    }

    #[test]
    fn retrain_empty_subset_is_refused() {
        let spec = ModelSpec::linear_regression(1, 1, false);
        let err = retrain(&spec, &[], &RetrainSettings::default(), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { .. }));
    }

    /// One-hot train features make every query loss exactly additive across
    /// subset members, so a matching influence matrix scores a perfect 1.
    #[test]
    fn exactly_linear_problem_scores_one() {
        let spec = ModelSpec::linear_regression(3, 1, false);
        let train: Vec<Example> = (0..3)
            .map(|i| {
                let mut x = vec![0.0; 3];
                x[i] = 1.0;
                Example::regression(x, vec![1.0])
            })
            .collect();
        let scales = [1.5, 0.7, 2.2];
        let query: Vec<Example> = (0..3)
            .map(|j| {
                let mut x = vec![0.0; 3];
                x[j] = scales[j];
                Example::regression(x, vec![0.0])
            })
            .collect();
        let data = DatasetSplit::new(train, query).unwrap();

        // Ground-truth additive contributions: query j reacts only to train
        // example j, by half the squared feature scale.
        let mut tau = DMatrix::zeros(3, 3);
        for j in 0..3 {
            tau[(j, j)] = 0.5 * scales[j] * scales[j];
        }
        let tau = InfluenceMatrix {
            kind: MatrixKind::Bif,
            values: tau,
            row_labels: (0..3).map(SeriesLabel::train).collect(),
            col_labels: (0..3).map(SeriesLabel::query).collect(),
            degenerate_rows: Vec::new(),
            degenerate_cols: Vec::new(),
        };

        let cfg = LdsConfig {
            alpha_retrain: 0.5,
            num_subsets: 40,
            seed: 3,
            retrain: RetrainSettings { grad_tol: 1e-13, ..RetrainSettings::default() },
            ..LdsConfig::default()
        };
        let attribution = attribution_set(3, 1.0, cfg.seed).unwrap();
        assert_eq!(attribution, vec![0, 1, 2]);
        let subsets = subsample_datasets(3, &cfg).unwrap();
        let losses = retrained_query_losses(
            &spec,
            &data.train,
            &data.query,
            &attribution,
            &subsets,
            &cfg.retrain,
        )
        .unwrap();
        let report = lds_score(&tau, &subsets, &losses).unwrap();
        assert!(report.degenerate_subsets.is_empty());
        assert!(report.mean > 1.0 - 1e-9, "mean {}", report.mean);
        assert!(report.std_error < 1e-9);
    }

    #[test]
    fn lds_score_flags_degenerate_subsets() {
        let tau = InfluenceMatrix {
            kind: MatrixKind::Bif,
            values: DMatrix::zeros(2, 3),
            row_labels: (0..2).map(SeriesLabel::train).collect(),
            col_labels: (0..3).map(SeriesLabel::query).collect(),
            degenerate_rows: Vec::new(),
            degenerate_cols: Vec::new(),
        };
        let subsets = vec![vec![0], vec![1]];
        let losses = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let report = lds_score(&tau, &subsets, &losses).unwrap();
        assert_eq!(report.degenerate_subsets, vec![0, 1]);
        assert_eq!(report.mean, 0.0);
    }
}
