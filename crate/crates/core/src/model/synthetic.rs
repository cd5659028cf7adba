//! Seeded synthetic dataset generators.
//!
//! Generation order is fixed (teacher, then train examples, then query
//! examples, feature coordinates before targets) so a given seed always
//! produces the same split.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetSplit, Example, ParameterVector};

/// Regression data from a random linear teacher with Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTeacherConfig {
    pub n_train: usize,
    pub n_query: usize,
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    /// Standard deviation of the additive target noise.
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub bias: bool,
    /// Mark every example with per-output loss components.
    #[serde(default)]
    pub declare_components: bool,
}

fn one() -> usize {
    1
}

/// Binary classification: two Gaussian blobs separated along the first
/// feature axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoGaussiansConfig {
    pub n_train: usize,
    pub n_query: usize,
    pub input_dim: usize,
    /// Distance of each class mean from the origin along the first axis.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    pub seed: u64,
}

/// Returns the split together with the teacher parameters flattened in the
/// matching `linear-regression` spec order.
pub fn linear_teacher(cfg: &LinearTeacherConfig) -> Result<(DatasetSplit, ParameterVector)> {
    if cfg.input_dim == 0 || cfg.output_dim == 0 {
        return Err(Error::invalid("input_dim/output_dim", "must be at least 1"));
    }
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::invalid("noise", "must be finite and non-negative"));
    }
    if cfg.declare_components && cfg.output_dim < 2 {
        return Err(Error::invalid(
            "declare_components",
            "component declarations need at least 2 outputs",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let n_weights = cfg.output_dim * cfg.input_dim;
    let n_params = n_weights + if cfg.bias { cfg.output_dim } else { 0 };
    let teacher: Vec<f64> = (0..n_params).map(|_| normal(&mut rng)).collect();

    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..cfg.input_dim).map(|_| normal(rng)).collect();
                let y: Vec<f64> = (0..cfg.output_dim)
                    .map(|o| {
                        let row = &teacher[o * cfg.input_dim..(o + 1) * cfg.input_dim];
                        let mean: f64 = row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>()
                            + if cfg.bias { teacher[n_weights + o] } else { 0.0 };
                        mean + cfg.noise * normal(rng)
                    })
                    .collect();
                let ex = Example::regression(x, y);
                if cfg.declare_components {
                    ex.with_components(cfg.output_dim)
                } else {
                    ex
                }
            })
            .collect()
    };
    let train = draw(cfg.n_train, &mut rng);
    let query = draw(cfg.n_query, &mut rng);
    Ok((DatasetSplit::new(train, query)?, ParameterVector::new(teacher)))
}

pub fn two_gaussians(cfg: &TwoGaussiansConfig) -> Result<DatasetSplit> {
    if cfg.input_dim == 0 {
        return Err(Error::invalid("input_dim", "must be at least 1"));
    }
    if !(cfg.spread > 0.0) || !cfg.spread.is_finite() {
        return Err(Error::invalid("spread", "must be finite and positive"));
    }
    if !cfg.separation.is_finite() {
        return Err(Error::invalid("separation", "must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let class = rng.gen_bool(0.5) as usize;
                let center = if class == 1 { cfg.separation } else { -cfg.separation };
                let x: Vec<f64> = (0..cfg.input_dim)
                    .map(|i| {
                        let noise: f64 = rng.sample(StandardNormal);
                        if i == 0 { center + cfg.spread * noise } else { cfg.spread * noise }
                    })
                    .collect();
                Example::classification(x, class)
            })
            .collect()
    };
    let train = draw(cfg.n_train, &mut rng);
    let query = draw(cfg.n_query, &mut rng);
    DatasetSplit::new(train, query)
}
