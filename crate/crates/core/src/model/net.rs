//! Shared compute core for the model families.
//!
//! Plain loops over explicitly indexed layer buffers. Gradients are reverse
//! mode; curvature comes from a tangent (forward) pass pushed through both
//! the forward and the reverse sweep, which yields exact Hessian-vector
//! products without a general autodiff engine.

use crate::error::{Error, Result};
use crate::model::{Activation, Example, Head, ModelSpec, Target};

/// Reusable per-layer buffers. Sized for one spec; reusing a workspace across
/// specs of different shapes is a bug guarded by an assert.
pub struct Workspace {
    widths: Vec<usize>,
    /// acts[0] holds the input, acts[l + 1] the post-activation of layer l.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    /// lin[l] = W_{l+1}^T delta_{l+1}, kept for the curvature sweep.
    lin: Vec<Vec<f64>>,
    /// Softmax probabilities (classification head only).
    probs: Vec<f64>,
    tan_acts: Vec<Vec<f64>>,
    tan_pre: Vec<Vec<f64>>,
    tan_delta: Vec<Vec<f64>>,
    /// (weight offset, bias offset) per layer in the flat parameter vector.
    offsets: Vec<(usize, usize)>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let widths = spec.widths.clone();
        let layers = widths.len() - 1;
        let per_layer = |shift: usize| -> Vec<Vec<f64>> {
            (0..layers).map(|l| vec![0.0; widths[l + 1 - shift]]).collect()
        };
        let mut acts = vec![vec![0.0; widths[0]]];
        acts.extend((0..layers).map(|l| vec![0.0; widths[l + 1]]));
        let tan_acts = acts.clone();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            let w_off = off;
            off += widths[l] * widths[l + 1];
            let b_off = off;
            if spec.bias {
                off += widths[l + 1];
            }
            offsets.push((w_off, b_off));
        }
        Workspace {
            probs: vec![0.0; widths[layers]],
            pre: per_layer(0),
            delta: per_layer(0),
            lin: per_layer(0),
            tan_pre: per_layer(0),
            tan_delta: per_layer(0),
            acts,
            tan_acts,
            widths,
            offsets,
        }
    }

    fn check(&self, spec: &ModelSpec) {
        debug_assert_eq!(self.widths, spec.widths, "workspace built for a different spec");
    }
}

#[inline]
fn activate(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Tanh => z.tanh(),
        // Derivative convention at the kink: relu'(0) = 0.
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Identity => z,
    }
}

/// First derivative, computed from the pre-activation and its output.
#[inline]
fn d_activate(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

#[inline]
fn dd_activate(act: Activation, _z: f64, a: f64) -> f64 {
    match act {
        Activation::Tanh => -2.0 * a * (1.0 - a * a),
        Activation::Relu | Activation::Identity => 0.0,
    }
}

fn forward(spec: &ModelSpec, w: &[f64], features: &[f64], ws: &mut Workspace) {
    ws.check(spec);
    let layers = spec.layer_count();
    ws.acts[0].copy_from_slice(features);
    for l in 0..layers {
        let (w_off, b_off) = ws.offsets[l];
        let (n_in, n_out) = (ws.widths[l], ws.widths[l + 1]);
        // Split borrow: input activations live below the layer being written.
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        let input = &lo[l];
        let out_act = &mut hi[0];
        for o in 0..n_out {
            let row = &w[w_off + o * n_in..w_off + (o + 1) * n_in];
            let mut z: f64 = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum();
            if spec.bias {
                z += w[b_off + o];
            }
            ws.pre[l][o] = z;
            out_act[o] = if l < layers - 1 { activate(spec.activation, z) } else { z };
        }
    }
}

/// Numerically stabilized log-sum-exp.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn loss_from_forward(spec: &ModelSpec, ws: &Workspace, target: &Target) -> f64 {
    let out = ws.acts.last().unwrap();
    match (spec.head(), target) {
        (Head::SquaredError, Target::Values(y)) => {
            0.5 * out.iter().zip(y).map(|(f, t)| (f - t) * (f - t)).sum::<f64>()
        }
        (Head::CrossEntropy, Target::Class(c)) => log_sum_exp(out) - out[*c],
        _ => unreachable!("target kind checked before evaluation"),
    }
}

pub(crate) fn loss(spec: &ModelSpec, w: &[f64], ex: &Example, ws: &mut Workspace) -> f64 {
    forward(spec, w, &ex.features, ws);
    loss_from_forward(spec, ws, &ex.target)
}

/// Per-output loss terms. Requires a declared component count equal to the
/// output width; only the squared-error head decomposes.
pub(crate) fn component_losses(
    spec: &ModelSpec,
    w: &[f64],
    ex: &Example,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Result<()> {
    let declared = ex.components.ok_or_else(|| {
        Error::UnsupportedDecomposition("example declares no loss components".into())
    })?;
    if spec.head() == Head::CrossEntropy {
        return Err(Error::UnsupportedDecomposition(
            "classification loss does not decompose into components".into(),
        ));
    }
    if declared != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "declared components".into(),
            expected: spec.output_dim(),
            got: declared,
        });
    }
    forward(spec, w, &ex.features, ws);
    let f = ws.acts.last().unwrap();
    let y = match &ex.target {
        Target::Values(y) => y,
        Target::Class(_) => unreachable!("target kind checked before evaluation"),
    };
    for s in 0..declared {
        let r = f[s] - y[s];
        out[s] = 0.5 * r * r;
    }
    Ok(())
}

/// Reverse sweep; expects `forward` to have run on the same inputs.
fn backward(spec: &ModelSpec, w: &[f64], target: &Target, ws: &mut Workspace) {
    let layers = spec.layer_count();
    let last = layers - 1;
    match (spec.head(), target) {
        (Head::SquaredError, Target::Values(y)) => {
            let out = &ws.acts[layers];
            for (o, d) in ws.delta[last].iter_mut().enumerate() {
                *d = out[o] - y[o];
            }
        }
        (Head::CrossEntropy, Target::Class(c)) => {
            let z = &ws.pre[last];
            let lse = log_sum_exp(z);
            for (k, p) in ws.probs.iter_mut().enumerate() {
                *p = (z[k] - lse).exp();
            }
            ws.delta[last].copy_from_slice(&ws.probs);
            ws.delta[last][*c] -= 1.0;
        }
        _ => unreachable!("target kind checked before evaluation"),
    }
    for l in (0..last).rev() {
        let (w_off, _) = ws.offsets[l + 1];
        let (n_in, n_out) = (ws.widths[l + 1], ws.widths[l + 2]);
        for j in 0..n_in {
            let mut s = 0.0;
            for o in 0..n_out {
                s += w[w_off + o * n_in + j] * ws.delta[l + 1][o];
            }
            ws.lin[l][j] = s;
            ws.delta[l][j] =
                s * d_activate(spec.activation, ws.pre[l][j], ws.acts[l + 1][j]);
        }
    }
}

/// Adds `scale * grad(loss)` to `out`.
pub(crate) fn grad_accumulate(
    spec: &ModelSpec,
    w: &[f64],
    ex: &Example,
    scale: f64,
    ws: &mut Workspace,
    out: &mut [f64],
) {
    forward(spec, w, &ex.features, ws);
    backward(spec, w, &ex.target, ws);
    for l in 0..spec.layer_count() {
        let (w_off, b_off) = ws.offsets[l];
        let n_in = ws.widths[l];
        for (o, d) in ws.delta[l].iter().enumerate() {
            let sd = scale * d;
            let row = &mut out[w_off + o * n_in..w_off + (o + 1) * n_in];
            for (g, x) in row.iter_mut().zip(&ws.acts[l]) {
                *g += sd * x;
            }
            if spec.bias {
                out[b_off + o] += sd;
            }
        }
    }
}

/// Runs forward and reverse sweeps so repeated `hvp_prepared` calls can reuse
/// the cached state (one preparation per example, d directional passes).
pub(crate) fn prepare_example(spec: &ModelSpec, w: &[f64], ex: &Example, ws: &mut Workspace) {
    forward(spec, w, &ex.features, ws);
    backward(spec, w, &ex.target, ws);
}

/// Adds `H v` of the prepared example to `out`.
pub(crate) fn hvp_prepared(
    spec: &ModelSpec,
    w: &[f64],
    v: &[f64],
    ws: &mut Workspace,
    out: &mut [f64],
) {
    let layers = spec.layer_count();
    let last = layers - 1;
    // Tangent of the forward sweep.
    ws.tan_acts[0].iter_mut().for_each(|t| *t = 0.0);
    for l in 0..layers {
        let (w_off, b_off) = ws.offsets[l];
        let (n_in, n_out) = (ws.widths[l], ws.widths[l + 1]);
        for o in 0..n_out {
            let w_row = &w[w_off + o * n_in..w_off + (o + 1) * n_in];
            let v_row = &v[w_off + o * n_in..w_off + (o + 1) * n_in];
            let mut tz = 0.0;
            for i in 0..n_in {
                tz += v_row[i] * ws.acts[l][i] + w_row[i] * ws.tan_acts[l][i];
            }
            if spec.bias {
                tz += v[b_off + o];
            }
            ws.tan_pre[l][o] = tz;
            ws.tan_acts[l + 1][o] = if l < last {
                tz * d_activate(spec.activation, ws.pre[l][o], ws.acts[l + 1][o])
            } else {
                tz
            };
        }
    }
    // Tangent of the loss head.
    match spec.head() {
        Head::SquaredError => {
            let t = ws.tan_acts[layers].clone();
            ws.tan_delta[last].copy_from_slice(&t);
        }
        Head::CrossEntropy => {
            let tz = &ws.tan_pre[last];
            let s: f64 = ws.probs.iter().zip(tz).map(|(p, t)| p * t).sum();
            for (k, td) in ws.tan_delta[last].iter_mut().enumerate() {
                *td = ws.probs[k] * (tz[k] - s);
            }
        }
    }
    // Tangent of the reverse sweep.
    for l in (0..last).rev() {
        let (w_off, _) = ws.offsets[l + 1];
        let (n_in, n_out) = (ws.widths[l + 1], ws.widths[l + 2]);
        for j in 0..n_in {
            let mut ts = 0.0;
            for o in 0..n_out {
                ts += v[w_off + o * n_in + j] * ws.delta[l + 1][o]
                    + w[w_off + o * n_in + j] * ws.tan_delta[l + 1][o];
            }
            let da = d_activate(spec.activation, ws.pre[l][j], ws.acts[l + 1][j]);
            let dda = dd_activate(spec.activation, ws.pre[l][j], ws.acts[l + 1][j]);
            ws.tan_delta[l][j] = ts * da + ws.lin[l][j] * dda * ws.tan_pre[l][j];
        }
    }
    // Gather the product.
    for l in 0..layers {
        let (w_off, b_off) = ws.offsets[l];
        let n_in = ws.widths[l];
        for o in 0..ws.widths[l + 1] {
            let td = ws.tan_delta[l][o];
            let d = ws.delta[l][o];
            let row = &mut out[w_off + o * n_in..w_off + (o + 1) * n_in];
            for i in 0..n_in {
                row[i] += td * ws.acts[l][i] + d * ws.tan_acts[l][i];
            }
            if spec.bias {
                out[b_off + o] += td;
            }
        }
    }
}

pub(crate) fn hvp_accumulate(
    spec: &ModelSpec,
    w: &[f64],
    ex: &Example,
    v: &[f64],
    ws: &mut Workspace,
    out: &mut [f64],
) {
    prepare_example(spec, w, ex, ws);
    hvp_prepared(spec, w, v, ws, out);
}
