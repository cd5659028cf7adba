//! Model zoo: small dense models with analytic losses, gradients and
//! Hessians.
//!
//! Three families share one compute core (a feed-forward stack of dense
//! layers):
//!
//! * `linear-regression`: single dense layer, squared-error loss,
//! * `logistic-regression`: single dense layer, softmax negative
//!   log-likelihood,
//! * `mlp`: at least one hidden layer (tanh, relu or identity), squared-error
//!   loss.
//!
//! Losses are per example: `0.5 * ||f(x) - y||^2` for regression, stabilized
//! `logsumexp(z) - z_y` for classification. Parameters are a flat `f64`
//! vector in a fixed order: layer by layer, weight matrix (row-major,
//! `out x in`) before bias. Gradients come from reverse mode; Hessians are
//! assembled column by column from forward-over-reverse directional passes
//! and symmetrized, never from finite differences.

mod net;
pub mod synthetic;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use net::Workspace;
pub(crate) use net::{
    component_losses as net_component_losses, grad_accumulate as net_grad_accumulate,
    loss as net_loss,
};

/// Dense Hessians above this parameter count are refused.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

/// Loss head implied by the model kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Layer widths from input to output, e.g. `[5, 1]` or `[2, 8, 1]`.
    pub widths: Vec<usize>,
    /// Hidden-layer activation; ignored by the single-layer families.
    pub activation: Activation,
    /// Whether every layer carries a bias vector.
    pub bias: bool,
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, output_dim: usize, bias: bool) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            widths: vec![input_dim, output_dim],
            activation: Activation::Identity,
            bias,
        }
    }

    pub fn logistic_regression(input_dim: usize, classes: usize, bias: bool) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            widths: vec![input_dim, classes],
            activation: Activation::Identity,
            bias,
        }
    }

    pub fn mlp(widths: Vec<usize>, activation: Activation, bias: bool) -> Self {
        ModelSpec { kind: ModelKind::Mlp, widths, activation, bias }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("widths", "need at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("widths", "every layer width must be at least 1"));
        }
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                if self.widths.len() != 2 {
                    return Err(Error::invalid(
                        "widths",
                        "single-layer families take exactly [input, output] widths",
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.widths.len() < 3 {
                    return Err(Error::invalid("widths", "mlp needs at least one hidden layer"));
                }
            }
        }
        if self.kind == ModelKind::LogisticRegression && self.output_dim() < 2 {
            return Err(Error::invalid("widths", "classification needs at least 2 classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    pub(crate) fn head(&self) -> Head {
        match self.kind {
            ModelKind::LogisticRegression => Head::CrossEntropy,
            _ => Head::SquaredError,
        }
    }

    /// Per-example loss at `params`.
    pub fn loss(&self, params: &ParameterVector, ex: &Example) -> Result<f64> {
        self.check_inputs(params, ex)?;
        let mut ws = Workspace::new(self);
        Ok(net::loss(self, params.as_slice(), ex, &mut ws))
    }

    /// Per-component losses; the example must declare a component count.
    ///
    /// Components are the per-output terms of the squared-error loss, so the
    /// declared count must equal the model output width. Classification
    /// losses do not decompose.
    pub fn component_losses(&self, params: &ParameterVector, ex: &Example) -> Result<Vec<f64>> {
        self.check_inputs(params, ex)?;
        let mut out = vec![0.0; self.output_dim()];
        let mut ws = Workspace::new(self);
        net::component_losses(self, params.as_slice(), ex, &mut ws, &mut out)?;
        Ok(out)
    }

    /// Gradient of the per-example loss, flattened in parameter order.
    pub fn grad(&self, params: &ParameterVector, ex: &Example) -> Result<Vec<f64>> {
        self.check_inputs(params, ex)?;
        let mut out = vec![0.0; self.param_count()];
        let mut ws = Workspace::new(self);
        net::grad_accumulate(self, params.as_slice(), ex, 1.0, &mut ws, &mut out);
        Ok(out)
    }

    /// Hessian-vector product of the summed loss over `examples`.
    pub fn hvp(&self, params: &ParameterVector, examples: &[Example], v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if v.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "hvp direction".into(),
                expected: self.param_count(),
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.param_count()];
        let mut ws = Workspace::new(self);
        for ex in examples {
            self.check_example(ex)?;
            net::hvp_accumulate(self, params.as_slice(), ex, v, &mut ws, &mut out);
        }
        Ok(out)
    }

    /// Dense symmetric Hessian of the summed loss over `examples`.
    pub fn hessian(&self, params: &ParameterVector, examples: &[Example]) -> Result<DMatrix<f64>> {
        self.hessian_capped(params, examples, DEFAULT_HESSIAN_CAP)
    }

    pub fn hessian_capped(
        &self,
        params: &ParameterVector,
        examples: &[Example],
        cap: usize,
    ) -> Result<DMatrix<f64>> {
        let d = self.param_count();
        if d > cap {
            return Err(Error::HessianCapExceeded { dim: d, cap });
        }
        self.check_params(params)?;
        let mut h = DMatrix::zeros(d, d);
        let mut ws = Workspace::new(self);
        let mut direction = vec![0.0; d];
        let mut column = vec![0.0; d];
        for ex in examples {
            self.check_example(ex)?;
            net::prepare_example(self, params.as_slice(), ex, &mut ws);
            for k in 0..d {
                direction[k] = 1.0;
                column.fill(0.0);
                net::hvp_prepared(self, params.as_slice(), &direction, &mut ws, &mut column);
                for r in 0..d {
                    h[(r, k)] += column[r];
                }
                direction[k] = 0.0;
            }
        }
        // Forward-over-reverse is exact up to rounding; symmetrization removes
        // the rounding skew.
        for r in 0..d {
            for c in (r + 1)..d {
                let m = 0.5 * (h[(r, c)] + h[(c, r)]);
                h[(r, c)] = m;
                h[(c, r)] = m;
            }
        }
        Ok(h)
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        self.validate()?;
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameters".into(),
                expected: self.param_count(),
                got: params.dim(),
            });
        }
        if !params.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "features".into(),
                expected: self.input_dim(),
                got: ex.features.len(),
            });
        }
        if !ex.features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        match (&ex.target, self.head()) {
            (Target::Values(y), Head::SquaredError) => {
                if y.len() != self.output_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "target".into(),
                        expected: self.output_dim(),
                        got: y.len(),
                    });
                }
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("target".into()));
                }
            }
            (Target::Class(c), Head::CrossEntropy) => {
                if *c >= self.output_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "class index".into(),
                        expected: self.output_dim(),
                        got: *c,
                    });
                }
            }
            (Target::Class(_), Head::SquaredError) => {
                return Err(Error::UnsupportedModel(
                    "regression loss got a class-index target".into(),
                ));
            }
            (Target::Values(_), Head::CrossEntropy) => {
                return Err(Error::UnsupportedModel(
                    "classification loss got a real-vector target".into(),
                ));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, params: &ParameterVector, ex: &Example) -> Result<()> {
        self.check_params(params)?;
        self.check_example(ex)
    }

    /// Checks every example against this model's input width and loss head,
    /// so incompatibilities surface before any sampling or retraining work.
    pub fn check_dataset(&self, data: &DatasetSplit) -> Result<()> {
        self.validate()?;
        for ex in data.train.iter().chain(&data.query) {
            self.check_example(ex)?;
        }
        Ok(())
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        ParameterVector { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    /// Regression target vector.
    Values(Vec<f64>),
    /// Class index for classification.
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: Target,
    /// Declared number of loss sub-terms, when the loss decomposes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
}

impl Example {
    pub fn regression(features: Vec<f64>, target: Vec<f64>) -> Self {
        Example { features, target: Target::Values(target), components: None }
    }

    pub fn classification(features: Vec<f64>, class: usize) -> Self {
        Example { features, target: Target::Class(class), components: None }
    }

    pub fn with_components(mut self, s: usize) -> Self {
        self.components = Some(s);
        self
    }
}

/// Train and query examples of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub query: Vec<Example>,
}

impl DatasetSplit {
    /// Validates sizes, consistent feature dimensions and finite values.
    pub fn new(train: Vec<Example>, query: Vec<Example>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("train", "need at least one train example"));
        }
        if query.is_empty() {
            return Err(Error::invalid("query", "need at least one query example"));
        }
        let dim = train[0].features.len();
        for (what, ex) in train
            .iter()
            .map(|e| ("train", e))
            .chain(query.iter().map(|e| ("query", e)))
        {
            if ex.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{what} example features"),
                    expected: dim,
                    got: ex.features.len(),
                });
            }
            if !ex.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} example features")));
            }
            if let Target::Values(y) = &ex.target {
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("{what} example target")));
                }
            }
            if let Some(s) = ex.components {
                if s < 2 {
                    return Err(Error::invalid(
                        "components",
                        "declared component count must be at least 2",
                    ));
                }
            }
        }
        Ok(DatasetSplit { train, query })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_query(&self) -> usize {
        self.query.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.train[0].features.len()
    }
}
