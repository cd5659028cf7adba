//! Curvature-route influence: closed-form and optimizer-based oracles that
//! cross-check the sampling estimators.
//!
//! All formulas are evaluated at the supplied checkpoint `w_star`. The
//! dampening knob `gamma` is the same quantity as the sampler's localization
//! strength: the localized posterior concentrates on the Gaussian
//! `N(w_star, (beta H + gamma I)^{-1})` as steps shrink, so the classical
//! influence with a dampened Hessian is the leading-order term of the
//! covariance route, and for exactly quadratic losses the linear plus
//! quadratic (Isserlis) terms reproduce it in full.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::{InfluenceMatrix, MatrixKind};
use crate::labels::SeriesLabel;
use crate::model::{DatasetSplit, Example, ModelKind, ModelSpec, ParameterVector};

/// Gradients shorter than this are treated as zero by `gradsim`.
pub const GRADSIM_ZERO_NORM: f64 = 1e-12;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 100;

/// Dampened curvature matrix `H + gamma I` with a cached Cholesky factor.
pub struct DampenedHessian {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    dampening: f64,
}

impl DampenedHessian {
    /// Builds `hessian + dampening * I` and factorizes it. `dampening = 0` is
    /// allowed only when the Hessian itself is positive definite; failure
    /// reports the smallest eigenvalue estimate of the dampened matrix.
    pub fn new(hessian: DMatrix<f64>, dampening: f64) -> Result<Self> {
        if hessian.nrows() != hessian.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "dampened Hessian needs a square matrix, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        if !(dampening >= 0.0) || !dampening.is_finite() {
            return Err(Error::invalid("gamma", "dampening must be finite and non-negative"));
        }
        if !hessian.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("hessian".into()));
        }
        let mut matrix = hessian;
        for i in 0..matrix.nrows() {
            matrix[(i, i)] += dampening;
        }
        match Cholesky::new(matrix.clone()) {
            Some(chol) => Ok(DampenedHessian { matrix, chol, dampening }),
            None => {
                let min_eigenvalue =
                    matrix.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
                Err(Error::NotPositiveDefinite { min_eigenvalue })
            }
        }
    }

    /// Assembles the train-loss Hessian at `w_star` and dampens it.
    pub fn from_model(
        spec: &ModelSpec,
        w_star: &ParameterVector,
        data: &DatasetSplit,
        dampening: f64,
    ) -> Result<Self> {
        DampenedHessian::new(spec.hessian(w_star, &data.train)?, dampening)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dampening(&self) -> f64 {
        self.dampening
    }

    /// Solves `(H + gamma I) x = rhs` column by column, with one step of
    /// iterative refinement to keep residuals near machine precision.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.chol.solve(rhs);
        let residual = rhs - &self.matrix * &x;
        x += self.chol.solve(&residual);
        x
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(rhs);
        let residual = rhs - &self.matrix * &x;
        x += self.chol.solve(&residual);
        x
    }
}

fn gradient_matrix(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    examples: &[Example],
) -> Result<DMatrix<f64>> {
    let d = spec.param_count();
    let mut g = DMatrix::zeros(d, examples.len());
    for (k, ex) in examples.iter().enumerate() {
        let grad = spec.grad(w_star, ex)?;
        g.column_mut(k).copy_from_slice(&grad);
    }
    Ok(g)
}

fn plain_labels(data: &DatasetSplit) -> (Vec<SeriesLabel>, Vec<SeriesLabel>) {
    (
        (0..data.n_train()).map(SeriesLabel::train).collect(),
        (0..data.n_query()).map(SeriesLabel::query).collect(),
    )
}

/// Classical influence with dampening: entry (i, j) is
/// `-g_j^T (H + gamma I)^{-1} g_i` with all gradients at `w_star`.
pub fn classical_if(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    dampening: f64,
) -> Result<InfluenceMatrix> {
    tempered_if(spec, w_star, data, dampening, data.n_train() as f64)
}

/// Leading-order influence of the tempered localized posterior: the
/// curvature is scaled by `beta = n_beta / n` before dampening. `n_beta = n`
/// recovers [`classical_if`].
pub fn tempered_if(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    dampening: f64,
    n_beta: f64,
) -> Result<InfluenceMatrix> {
    let beta = check_n_beta(n_beta, data)?;
    let h = spec.hessian(w_star, &data.train)? * beta;
    let eff = DampenedHessian::new(h, dampening)?;
    let g_train = gradient_matrix(spec, w_star, &data.train)?;
    let g_query = gradient_matrix(spec, w_star, &data.query)?;
    let values = -(g_train.transpose() * eff.solve(&g_query));
    let (row_labels, col_labels) = plain_labels(data);
    Ok(InfluenceMatrix {
        kind: MatrixKind::DampenedIf,
        values,
        row_labels,
        col_labels,
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

fn check_n_beta(n_beta: f64, data: &DatasetSplit) -> Result<f64> {
    if !(n_beta > 0.0) || !n_beta.is_finite() {
        return Err(Error::invalid("n_beta", "inverse temperature must be finite and positive"));
    }
    Ok(n_beta / data.n_train() as f64)
}

/// Quadratic correction of the posterior covariance for the given train and
/// query pair: `-1/2 tr(H_phi H_eff^{-1} H_i H_eff^{-1})`.
pub fn laplace_second_order_term(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    dampening: f64,
    train_index: usize,
    query_index: usize,
) -> Result<f64> {
    tempered_second_order_term(spec, w_star, data, dampening, data.n_train() as f64, train_index, query_index)
}

pub fn tempered_second_order_term(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    dampening: f64,
    n_beta: f64,
    train_index: usize,
    query_index: usize,
) -> Result<f64> {
    let beta = check_n_beta(n_beta, data)?;
    check_index(train_index, data.n_train(), "train_index")?;
    check_index(query_index, data.n_query(), "query_index")?;
    let h = spec.hessian(w_star, &data.train)? * beta;
    let eff = DampenedHessian::new(h, dampening)?;
    let h_i = spec.hessian(w_star, std::slice::from_ref(&data.train[train_index]))?;
    let h_q = spec.hessian(w_star, std::slice::from_ref(&data.query[query_index]))?;
    Ok(second_order_from_parts(&eff, &h_i, &h_q))
}

fn second_order_from_parts(eff: &DampenedHessian, h_i: &DMatrix<f64>, h_q: &DMatrix<f64>) -> f64 {
    let x = eff.solve(h_i);
    let y = eff.solve(h_q);
    // tr(H_q V H_i V) = tr((V H_i)(V H_q)) by symmetry and cyclicity.
    let mut tr = 0.0;
    for a in 0..x.nrows() {
        for b in 0..x.ncols() {
            tr += x[(a, b)] * y[(b, a)];
        }
    }
    -0.5 * tr
}

/// The quadratic covariance term `-1/2 tr(H_q V H_i V)` with
/// `V = (H_eff)^{-1}`, for explicitly given curvature matrices. Equals the
/// negative covariance of the two quadratic forms under `N(0, V)`, which
/// [`gaussian_quadratic_form_cov`] estimates independently.
pub fn isserlis_term(
    h_i: &DMatrix<f64>,
    h_q: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
) -> Result<f64> {
    let d = h_eff.nrows();
    if h_i.shape() != (d, d) || h_q.shape() != (d, d) {
        return Err(Error::ShapeMismatch("curvature matrices must share the shape".into()));
    }
    let eff = DampenedHessian::new(h_eff.clone(), 0.0)?;
    Ok(second_order_from_parts(&eff, h_i, h_q))
}

fn check_index(index: usize, len: usize, what: &str) -> Result<()> {
    if index >= len {
        return Err(Error::DimensionMismatch {
            context: what.into(),
            expected: len,
            got: index,
        });
    }
    Ok(())
}

/// Exact influence matrix under the Gaussian localized posterior
/// `N(w_star, (beta H + gamma I)^{-1})`.
///
/// Requires every loss to be exactly quadratic in the parameters (the
/// `linear-regression` family), in which case the linear term plus the
/// Isserlis quadratic term is the complete covariance, not an approximation.
pub fn analytic_gaussian_bif(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    dampening: f64,
    n_beta: f64,
) -> Result<InfluenceMatrix> {
    if spec.kind != ModelKind::LinearRegression {
        return Err(Error::UnsupportedModel(
            "analytic Gaussian influence needs exactly quadratic losses (linear-regression)".into(),
        ));
    }
    let beta = check_n_beta(n_beta, data)?;
    let h = spec.hessian(w_star, &data.train)? * beta;
    let eff = DampenedHessian::new(h, dampening)?;

    let g_train = gradient_matrix(spec, w_star, &data.train)?;
    let g_query = gradient_matrix(spec, w_star, &data.query)?;
    let vg_train = eff.solve(&g_train);

    // Per-example curvatures propagated through the posterior covariance.
    let m_of = |examples: &[Example]| -> Result<Vec<DMatrix<f64>>> {
        examples
            .iter()
            .map(|ex| Ok(eff.solve(&spec.hessian(w_star, std::slice::from_ref(ex))?)))
            .collect()
    };
    let m_train = m_of(&data.train)?;
    let m_query = m_of(&data.query)?;

    let mut values = DMatrix::zeros(data.n_train(), data.n_query());
    for i in 0..data.n_train() {
        for j in 0..data.n_query() {
            let linear = g_query.column(j).dot(&vg_train.column(i));
            let mut tr = 0.0;
            let (mi, mj) = (&m_train[i], &m_query[j]);
            for a in 0..mi.nrows() {
                for b in 0..mi.ncols() {
                    tr += mi[(a, b)] * mj[(b, a)];
                }
            }
            values[(i, j)] = -(linear + 0.5 * tr);
        }
    }
    let (row_labels, col_labels) = plain_labels(data);
    Ok(InfluenceMatrix {
        kind: MatrixKind::Bif,
        values,
        row_labels,
        col_labels,
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

/// Finite-difference influence through actual re-optimization: upweights
/// train example `i` by `delta`, re-minimizes the localized objective, and
/// returns the query-loss sensitivity `(phi(w_delta) - phi(w_0)) / delta`.
///
/// Both minimizations run damped Newton from `w_star` on
/// `L_train + weight * l_i + (gamma/2) ||w - w_star||^2` to gradient norm
/// 1e-10 (at most 100 iterations).
pub fn reweighting_oracle(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
    train_index: usize,
    query_index: usize,
    delta: f64,
    dampening: f64,
) -> Result<f64> {
    check_index(train_index, data.n_train(), "train_index")?;
    check_index(query_index, data.n_query(), "query_index")?;
    if delta == 0.0 || !delta.is_finite() || delta.abs() >= 1.0 {
        return Err(Error::invalid("delta", "perturbation must be finite, nonzero and |delta| < 1"));
    }
    let base = minimize_localized(spec, w_star, &data.train, None, dampening)?;
    let bumped =
        minimize_localized(spec, w_star, &data.train, Some((train_index, delta)), dampening)?;
    let query = &data.query[query_index];
    let phi_0 = spec.loss(&base, query)?;
    let phi_d = spec.loss(&bumped, query)?;
    Ok((phi_d - phi_0) / delta)
}

/// Minimizes `sum_k l_k(w) + extra.1 * l_{extra.0}(w) + gamma/2 |w - w_star|^2`
/// by damped Newton iteration, starting from `w_star`. With `gamma > 0` the
/// objective is coercive, so this converges even when the bare loss has no
/// finite minimizer (separable logistic data, say).
pub fn minimize_localized(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    train: &[Example],
    extra: Option<(usize, f64)>,
    gamma: f64,
) -> Result<ParameterVector> {
    let d = spec.param_count();
    let weight_of = |k: usize| -> f64 {
        1.0 + match extra {
            Some((i, delta)) if i == k => delta,
            _ => 0.0,
        }
    };
    let objective = |w: &ParameterVector| -> Result<f64> {
        let mut f = 0.0;
        for (k, ex) in train.iter().enumerate() {
            f += weight_of(k) * spec.loss(w, ex)?;
        }
        let mut sq = 0.0;
        for (a, b) in w.as_slice().iter().zip(w_star.as_slice()) {
            sq += (a - b) * (a - b);
        }
        Ok(f + 0.5 * gamma * sq)
    };

    let mut w = w_star.clone();
    let mut grad_norm = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITERS {
        let mut g = DVector::zeros(d);
        for (k, ex) in train.iter().enumerate() {
            let gk = spec.grad(&w, ex)?;
            let wk = weight_of(k);
            for (gi, gki) in g.iter_mut().zip(&gk) {
                *gi += wk * gki;
            }
        }
        for i in 0..d {
            g[i] += gamma * (w.values[i] - w_star.values[i]);
        }
        grad_norm = g.norm();
        if grad_norm <= NEWTON_TOL {
            return Ok(w);
        }

        let mut h = spec.hessian(&w, train)?;
        if let Some((i, delta)) = extra {
            h += spec.hessian(&w, std::slice::from_ref(&train[i]))? * delta;
        }
        for i in 0..d {
            h[(i, i)] += gamma;
        }
        // Levenberg fallback keeps the step a descent direction when the
        // localized Hessian is indefinite.
        let mut mu = 0.0;
        let chol = loop {
            let mut trial = h.clone();
            if mu > 0.0 {
                for i in 0..d {
                    trial[(i, i)] += mu;
                }
            }
            match Cholesky::new(trial) {
                Some(c) => break c,
                None => {
                    mu = if mu == 0.0 { 1e-10 } else { mu * 10.0 };
                    if mu > 1e12 {
                        return Err(Error::NotPositiveDefinite {
                            min_eigenvalue: f64::NEG_INFINITY,
                        });
                    }
                }
            }
        };
        let step = chol.solve(&g);
        let descent = g.dot(&step);
        let f0 = objective(&w)?;
        // Near the optimum the Armijo decrease drops below the rounding
        // floor of the objective; such steps are still contractions, so
        // accept them as long as they do not measurably increase f.
        let floor = f64::EPSILON * f0.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = w.clone();
            for i in 0..d {
                trial.values[i] -= t * step[i];
            }
            let f_new = objective(&trial)?;
            let wanted = 1e-4 * t * descent;
            if f_new <= f0 - wanted || (wanted <= floor && f_new <= f0 + floor) {
                w = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::DidNotConverge { iters: NEWTON_MAX_ITERS, tol: NEWTON_TOL, grad_norm })
}

/// Negative cosine similarity between train and query gradients at `w_star`.
/// Entries touching a gradient of norm below [`GRADSIM_ZERO_NORM`] are 0.
pub fn gradsim(
    spec: &ModelSpec,
    w_star: &ParameterVector,
    data: &DatasetSplit,
) -> Result<InfluenceMatrix> {
    let g_train = gradient_matrix(spec, w_star, &data.train)?;
    let g_query = gradient_matrix(spec, w_star, &data.query)?;
    let norm = |m: &DMatrix<f64>| -> Vec<f64> { m.column_iter().map(|c| c.norm()).collect() };
    let train_norms = norm(&g_train);
    let query_norms = norm(&g_query);
    let mut values = DMatrix::zeros(data.n_train(), data.n_query());
    for i in 0..data.n_train() {
        for j in 0..data.n_query() {
            values[(i, j)] = if train_norms[i] < GRADSIM_ZERO_NORM
                || query_norms[j] < GRADSIM_ZERO_NORM
            {
                0.0
            } else {
                -g_train.column(i).dot(&g_query.column(j)) / (train_norms[i] * query_norms[j])
            };
        }
    }
    let (row_labels, col_labels) = plain_labels(data);
    Ok(InfluenceMatrix {
        kind: MatrixKind::GradSim,
        values,
        row_labels,
        col_labels,
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

/// Monte-Carlo estimate of `cov(1/2 dw^T H_q dw, 1/2 dw^T H_i dw)` under
/// `dw ~ N(0, H_eff^{-1})`, with its standard error. Used as an independent
/// check of the closed-form quadratic term (which equals the negative of
/// this covariance).
pub fn gaussian_quadratic_form_cov(
    h_i: &DMatrix<f64>,
    h_q: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = h_eff.nrows();
    if h_i.shape() != (d, d) || h_q.shape() != (d, d) {
        return Err(Error::ShapeMismatch("quadratic form matrices must share the shape".into()));
    }
    if samples < 2 {
        return Err(Error::InsufficientDraws { got: samples });
    }
    let chol = Cholesky::new(h_eff.clone())
        .ok_or_else(|| {
            let min_eigenvalue =
                h_eff.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            Error::NotPositiveDefinite { min_eigenvalue }
        })?;
    // If H_eff = L L^T then L^{-T} z has covariance H_eff^{-1}.
    let l_t = chol.l().transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    let mut z = DVector::zeros(d);
    for _ in 0..samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let dw = l_t.clone().solve_upper_triangular(&z).ok_or_else(|| {
            Error::NotPositiveDefinite { min_eigenvalue: 0.0 }
        })?;
        xs.push(0.5 * (h_i * &dw).dot(&dw));
        ys.push(0.5 * (h_q * &dw).dot(&dw));
    }
    let n = samples as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut second = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let p = (x - mx) * (y - my);
        cov += p;
        second += p * p;
    }
    let cov_hat = cov / (n - 1.0);
    // Asymptotic variance of a sample covariance: (E[(X-mx)^2 (Y-my)^2] - cov^2) / n.
    let var_hat = (second / n - cov_hat * cov_hat).max(0.0) / n;
    Ok((cov_hat, var_hat.sqrt()))
}
