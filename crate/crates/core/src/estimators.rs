//! Influence estimators over recorded loss traces.
//!
//! The central quantity is the negative sample covariance between train-loss
//! series and query observables: entry (i, j) is `-cov(L_i, Phi_j)` with the
//! unbiased `1/(N-1)` normalization, means pooled over all chains. Negative
//! entries mark train points whose inclusion lowers the query loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::SeriesLabel;
use crate::sgld::ChainTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    Bif,
    NormalizedBif,
    DampenedIf,
    GradSim,
}

impl std::fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MatrixKind::Bif => "bif",
            MatrixKind::NormalizedBif => "normalized-bif",
            MatrixKind::DampenedIf => "dampened-if",
            MatrixKind::GradSim => "gradsim",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bif" => Ok(MatrixKind::Bif),
            "normalized-bif" => Ok(MatrixKind::NormalizedBif),
            "dampened-if" => Ok(MatrixKind::DampenedIf),
            "gradsim" => Ok(MatrixKind::GradSim),
            _ => Err(Error::invalid("matrix kind", format!("unknown kind {s:?}"))),
        }
    }
}

/// Train-by-query influence scores with labeled axes.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub kind: MatrixKind,
    /// `row_labels.len()` x `col_labels.len()`, train side on rows.
    pub values: DMatrix<f64>,
    pub row_labels: Vec<SeriesLabel>,
    pub col_labels: Vec<SeriesLabel>,
    /// Rows whose source series had zero variance (normalized kinds only).
    pub degenerate_rows: Vec<usize>,
    pub degenerate_cols: Vec<usize>,
}

impl InfluenceMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Errors on the first axis-label disagreement between two matrices.
    pub fn check_same_labels(&self, other: &InfluenceMatrix) -> Result<()> {
        let sides = [
            (&self.row_labels, &other.row_labels),
            (&self.col_labels, &other.col_labels),
        ];
        let mut position = 0;
        for (a, b) in sides {
            for i in 0..a.len().max(b.len()) {
                let left = a.get(i).map(|l| l.to_string()).unwrap_or_else(|| "<absent>".into());
                let right = b.get(i).map(|l| l.to_string()).unwrap_or_else(|| "<absent>".into());
                if left != right {
                    return Err(Error::LabelMismatch { position, left, right });
                }
                position += 1;
            }
        }
        Ok(())
    }
}

fn centered_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.ncols() as f64;
    let means = DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum() / n));
    let mut c = m.clone();
    for (i, mut row) in c.row_iter_mut().enumerate() {
        row.add_scalar_mut(-means[i]);
    }
    (c, means)
}

fn trace_dims(trace: &ChainTrace) -> Result<usize> {
    let n = trace.columns();
    if n < 2 {
        return Err(Error::InsufficientDraws { got: n });
    }
    if trace.train_losses.ncols() != n || trace.observables.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "trace declares {n} columns but holds {} / {}",
            trace.train_losses.ncols(),
            trace.observables.ncols()
        )));
    }
    Ok(n)
}

/// Negative cross-covariance of the pooled trace.
pub fn bif_from_trace(trace: &ChainTrace) -> Result<InfluenceMatrix> {
    let n = trace_dims(trace)?;
    let (lc, _) = centered_rows(&trace.train_losses);
    let (pc, _) = centered_rows(&trace.observables);
    let values = -(&lc * pc.transpose()) / (n as f64 - 1.0);
    Ok(InfluenceMatrix {
        kind: MatrixKind::Bif,
        values,
        row_labels: trace.train_labels.clone(),
        col_labels: trace.obs_labels.clone(),
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

/// Negative Pearson correlation of the pooled trace. Zero-variance series
/// yield entries of exactly 0 and are flagged; all other entries are clamped
/// into [-1, 1].
pub fn normalized_bif_from_trace(trace: &ChainTrace) -> Result<InfluenceMatrix> {
    let n = trace_dims(trace)?;
    let denom = n as f64 - 1.0;
    let (lc, _) = centered_rows(&trace.train_losses);
    let (pc, _) = centered_rows(&trace.observables);
    let row_sd: Vec<f64> =
        lc.row_iter().map(|r| (r.iter().map(|v| v * v).sum::<f64>() / denom).sqrt()).collect();
    let col_sd: Vec<f64> =
        pc.row_iter().map(|r| (r.iter().map(|v| v * v).sum::<f64>() / denom).sqrt()).collect();
    let mut values = -(&lc * pc.transpose()) / denom;
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            let scale = row_sd[i] * col_sd[j];
            values[(i, j)] = if scale == 0.0 {
                0.0
            } else {
                (values[(i, j)] / scale).clamp(-1.0, 1.0)
            };
        }
    }
    let degenerate = |sd: &[f64]| {
        sd.iter().enumerate().filter(|(_, s)| **s == 0.0).map(|(i, _)| i).collect::<Vec<_>>()
    };
    Ok(InfluenceMatrix {
        kind: MatrixKind::NormalizedBif,
        values,
        row_labels: trace.train_labels.clone(),
        col_labels: trace.obs_labels.clone(),
        degenerate_rows: degenerate(&row_sd),
        degenerate_cols: degenerate(&col_sd),
    })
}

/// Single-pass covariance accumulator fed one draw at a time.
///
/// Memory is `O(rows * cols)` regardless of the number of draws, and two
/// accumulators over disjoint draw sets merge associatively, so chains can be
/// folded in any grouping. `finalize` matches [`bif_from_trace`] on the same
/// draws up to rounding.
#[derive(Debug, Clone)]
pub struct StreamingCov {
    row_labels: Vec<SeriesLabel>,
    col_labels: Vec<SeriesLabel>,
    count: u64,
    mean_l: DVector<f64>,
    mean_p: DVector<f64>,
    /// Centered cross-product accumulator.
    cross: DMatrix<f64>,
    dl: DVector<f64>,
    dp: DVector<f64>,
}

impl StreamingCov {
    pub fn new(row_labels: Vec<SeriesLabel>, col_labels: Vec<SeriesLabel>) -> Self {
        let (n, q) = (row_labels.len(), col_labels.len());
        StreamingCov {
            row_labels,
            col_labels,
            count: 0,
            mean_l: DVector::zeros(n),
            mean_p: DVector::zeros(q),
            cross: DMatrix::zeros(n, q),
            dl: DVector::zeros(n),
            dp: DVector::zeros(q),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Folds in one draw: the train-loss vector and the observable vector.
    pub fn update(&mut self, train_losses: &[f64], observables: &[f64]) -> Result<()> {
        if train_losses.len() != self.mean_l.len() {
            return Err(Error::DimensionMismatch {
                context: "streaming update train losses".into(),
                expected: self.mean_l.len(),
                got: train_losses.len(),
            });
        }
        if observables.len() != self.mean_p.len() {
            return Err(Error::DimensionMismatch {
                context: "streaming update observables".into(),
                expected: self.mean_p.len(),
                got: observables.len(),
            });
        }
        self.count += 1;
        let c = self.count as f64;
        let k = (c - 1.0) / c;
        for (i, &v) in train_losses.iter().enumerate() {
            self.dl[i] = v - self.mean_l[i];
            self.mean_l[i] += self.dl[i] / c;
        }
        for (j, &v) in observables.iter().enumerate() {
            self.dp[j] = v - self.mean_p[j];
            self.mean_p[j] += self.dp[j] / c;
        }
        for i in 0..self.dl.len() {
            let s = self.dl[i] * k;
            for j in 0..self.dp.len() {
                self.cross[(i, j)] += s * self.dp[j];
            }
        }
        Ok(())
    }

    /// Combines two accumulators over disjoint draw sets.
    pub fn merge(mut self, other: StreamingCov) -> Result<StreamingCov> {
        if self.row_labels != other.row_labels || self.col_labels != other.col_labels {
            return Err(Error::ShapeMismatch(
                "merging streaming accumulators with different layouts".into(),
            ));
        }
        if other.count == 0 {
            return Ok(self);
        }
        if self.count == 0 {
            return Ok(other);
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        let factor = na * nb / total;
        let delta_l = &other.mean_l - &self.mean_l;
        let delta_p = &other.mean_p - &self.mean_p;
        self.cross += other.cross + &delta_l * delta_p.transpose() * factor;
        self.mean_l = (&self.mean_l * na + &other.mean_l * nb) / total;
        self.mean_p = (&self.mean_p * na + &other.mean_p * nb) / total;
        self.count += other.count;
        Ok(self)
    }

    /// Negative covariance matrix of everything folded in so far.
    pub fn finalize(&self) -> Result<InfluenceMatrix> {
        if self.count < 2 {
            return Err(Error::InsufficientDraws { got: self.count as usize });
        }
        Ok(InfluenceMatrix {
            kind: MatrixKind::Bif,
            values: -&self.cross / (self.count as f64 - 1.0),
            row_labels: self.row_labels.clone(),
            col_labels: self.col_labels.clone(),
            degenerate_rows: Vec::new(),
            degenerate_cols: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    SumOverQueryComponents,
    SumOverTrainComponents,
}

/// Sums component rows or columns into their parent example.
///
/// Covariance is bilinear, so summing a raw influence matrix over components
/// equals the influence of the pre-summed loss series.
pub fn aggregate_components(
    mat: &InfluenceMatrix,
    mode: AggregationMode,
) -> Result<InfluenceMatrix> {
    let labels = match mode {
        AggregationMode::SumOverQueryComponents => &mat.col_labels,
        AggregationMode::SumOverTrainComponents => &mat.row_labels,
    };
    if labels.iter().all(|l| l.component.is_none()) {
        return Err(Error::UnsupportedDecomposition(
            "matrix labels carry no component structure on the aggregated axis".into(),
        ));
    }
    // Group indices by parent label, first-appearance order.
    let mut parents: Vec<(SeriesLabel, Vec<usize>)> = Vec::new();
    for (idx, label) in labels.iter().enumerate() {
        let parent = label.parent();
        match parents.iter_mut().find(|(p, _)| *p == parent) {
            Some((_, members)) => members.push(idx),
            None => parents.push((parent, vec![idx])),
        }
    }
    let (values, row_labels, col_labels) = match mode {
        AggregationMode::SumOverQueryComponents => {
            let mut out = DMatrix::zeros(mat.n_rows(), parents.len());
            for (g, (_, members)) in parents.iter().enumerate() {
                for &j in members {
                    for i in 0..mat.n_rows() {
                        out[(i, g)] += mat.values[(i, j)];
                    }
                }
            }
            let cols = parents.iter().map(|(p, _)| *p).collect();
            (out, mat.row_labels.clone(), cols)
        }
        AggregationMode::SumOverTrainComponents => {
            let mut out = DMatrix::zeros(parents.len(), mat.n_cols());
            for (g, (_, members)) in parents.iter().enumerate() {
                for &i in members {
                    for j in 0..mat.n_cols() {
                        out[(g, j)] += mat.values[(i, j)];
                    }
                }
            }
            let rows = parents.iter().map(|(p, _)| *p).collect();
            (out, rows, mat.col_labels.clone())
        }
    };
    Ok(InfluenceMatrix {
        kind: mat.kind,
        values,
        row_labels,
        col_labels,
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

/// One ranked influence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub train_id: String,
    pub query_id: String,
    pub score: f64,
}

/// The k entries of largest magnitude, ties broken by position for
/// deterministic output.
pub fn top_k(mat: &InfluenceMatrix, k: usize) -> Vec<TopEntry> {
    let mut entries: Vec<(usize, usize)> = (0..mat.n_rows())
        .flat_map(|i| (0..mat.n_cols()).map(move |j| (i, j)))
        .collect();
    entries.sort_by(|&(ri, ci), &(rj, cj)| {
        let a = mat.values[(ri, ci)].abs();
        let b = mat.values[(rj, cj)].abs();
        b.partial_cmp(&a).unwrap_or(std::cmp::Ordering::Equal).then((ri, ci).cmp(&(rj, cj)))
    });
    entries
        .into_iter()
        .take(k)
        .map(|(i, j)| TopEntry {
            train_id: mat.row_labels[i].to_string(),
            query_id: mat.col_labels[j].to_string(),
            score: mat.values[(i, j)],
        })
        .collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "pearson inputs".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientDraws { got: a.len() });
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}
