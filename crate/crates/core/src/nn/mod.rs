//! Dense feed-forward classifier: ReLU hidden layers with inverted dropout and
//! a sigmoid output, trained on binary cross-entropy with hand-written backprop.

mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use params::{
    deserialize_params, init_model, serialize_params, DenseLayer, GradientSet, ModelParams,
};
pub(crate) use params::{read_params, write_params};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_HIDDEN: [usize; 4] = [128, 64, 32, 16];
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Inverted dropout after every hidden layer; masks drawn from `seed`.
    Train {
        dropout: f64,
        seed: u64,
    },
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Affine outputs per layer, `batch x out`.
    pub pre: Vec<Matrix>,
    /// Post-activation (and post-dropout) outputs per layer.
    pub act: Vec<Matrix>,
    /// Dropout multipliers (0 or 1/(1-p)) for hidden layers in train mode.
    pub masks: Vec<Option<Matrix>>,
}

impl ForwardTrace {
    /// Sigmoid output per example.
    pub fn probabilities(&self) -> Vec<f64> {
        self.act
            .last()
            .expect("at least one layer")
            .as_slice()
            .to_vec()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(params: &ModelParams, x: &Matrix, mode: Mode) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut rng = match mode {
        Mode::Train { dropout, seed } if dropout > 0.0 => {
            if dropout >= 1.0 {
                return Err(Error::Config(format!(
                    "dropout {dropout} must be in [0, 1)"
                )));
            }
            Some((ChaCha8Rng::seed_from_u64(seed), dropout))
        }
        _ => None,
    };
    let n = x.rows();
    let last = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act: Vec<Matrix> = Vec::with_capacity(params.layers.len());
    let mut masks = Vec::with_capacity(params.layers.len());

    for (l, layer) in params.layers.iter().enumerate() {
        let input = if l == 0 { x } else { &act[l - 1] };
        let out = layer.outputs();
        let mut z = Matrix::zeros(n, out);
        for r in 0..n {
            let a = input.row(r);
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                let w = layer.weights.row(o);
                *zo = layer.bias[o] + w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
            }
        }
        let mut a = z.clone();
        let mut mask = None;
        if l == last {
            a.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        } else {
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            if let Some((rng, p)) = rng.as_mut() {
                let keep = 1.0 - *p;
                let mut m = Matrix::zeros(n, out);
                for v in m.as_mut_slice() {
                    *v = if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                }
                for (av, mv) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *av *= mv;
                }
                mask = Some(m);
            }
        }
        pre.push(z);
        act.push(a);
        masks.push(mask);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        act,
        masks,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy with clamped predictions.
pub fn bce_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            y.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("loss of an empty batch".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// d(loss)/d(logit) of the clamped loss for one example.
fn output_delta(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

fn check_labels(trace: &ForwardTrace, y: &[f64]) -> Result<()> {
    if trace.input.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} examples vs {} labels",
            trace.input.rows(),
            y.len()
        )));
    }
    Ok(())
}

/// Backpropagates one example through an existing trace.
fn backprop_row(
    params: &ModelParams,
    trace: &ForwardTrace,
    r: usize,
    y: f64,
) -> Result<GradientSet> {
    let mut grad = params.zeros_like();
    let last = params.layers.len() - 1;
    let mut delta = vec![output_delta(trace.act[last].get(r, 0), y)];
    for l in (0..=last).rev() {
        let layer = &params.layers[l];
        let a_prev = if l == 0 {
            trace.input.row(r)
        } else {
            trace.act[l - 1].row(r)
        };
        let g = &mut grad.layers[l];
        for (o, &d) in delta.iter().enumerate() {
            g.bias[o] = d;
            for (gw, &a) in g.weights.row_mut(o).iter_mut().zip(a_prev) {
                *gw = d * a;
            }
        }
        if !g
            .weights
            .as_slice()
            .iter()
            .chain(&g.bias)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("gradient of layer {l}")));
        }
        if l > 0 {
            let pre = trace.pre[l - 1].row(r);
            let mask = trace.masks[l - 1].as_ref().map(|m| m.row(r));
            let mut next = vec![0.0; layer.inputs()];
            for (o, &d) in delta.iter().enumerate() {
                for (n, &w) in next.iter_mut().zip(layer.weights.row(o)) {
                    *n += w * d;
                }
            }
            for (i, n) in next.iter_mut().enumerate() {
                let relu = if pre[i] > 0.0 { 1.0 } else { 0.0 };
                let m = mask.map_or(1.0, |m| m[i]);
                *n *= relu * m;
            }
            delta = next;
        }
    }
    Ok(grad)
}

/// Gradient of each example's own loss, using the same dropout masks as the trace.
pub fn per_sample_grads_from_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    y: &[f64],
) -> Result<Vec<GradientSet>> {
    check_labels(trace, y)?;
    (0..y.len())
        .map(|r| backprop_row(params, trace, r, y[r]))
        .collect()
}

pub fn per_sample_grads(
    params: &ModelParams,
    x: &Matrix,
    y: &[f64],
    mode: Mode,
) -> Result<Vec<GradientSet>> {
    let trace = forward(params, x, mode)?;
    per_sample_grads_from_trace(params, &trace, y)
}

/// Gradient of the mean loss computed layer-wise on whole-batch matrices.
pub fn batch_grad(params: &ModelParams, x: &Matrix, y: &[f64], mode: Mode) -> Result<GradientSet> {
    let trace = forward(params, x, mode)?;
    check_labels(&trace, y)?;
    let n = y.len();
    if n == 0 {
        return Err(Error::Shape("gradient of an empty batch".into()));
    }
    let last = params.layers.len() - 1;
    let mut grad = params.zeros_like();
    // batch x out
    let mut delta = Matrix::from_vec(
        n,
        1,
        (0..n)
            .map(|r| output_delta(trace.act[last].get(r, 0), y[r]) / n as f64)
            .collect(),
    );
    for l in (0..=last).rev() {
        let layer = &params.layers[l];
        let a_prev = if l == 0 {
            &trace.input
        } else {
            &trace.act[l - 1]
        };
        let g = &mut grad.layers[l];
        for o in 0..layer.outputs() {
            g.bias[o] = delta.column(o).sum();
            for i in 0..layer.inputs() {
                g.weights.set(
                    o,
                    i,
                    (0..n).map(|r| delta.get(r, o) * a_prev.get(r, i)).sum(),
                );
            }
        }
        if !g
            .weights
            .as_slice()
            .iter()
            .chain(&g.bias)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("gradient of layer {l}")));
        }
        if l > 0 {
            let mut next = Matrix::zeros(n, layer.inputs());
            for r in 0..n {
                for i in 0..layer.inputs() {
                    let mut s = 0.0;
                    for o in 0..layer.outputs() {
                        s += layer.weights.get(o, i) * delta.get(r, o);
                    }
                    let relu = if trace.pre[l - 1].get(r, i) > 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    let m = trace.masks[l - 1].as_ref().map_or(1.0, |m| m.get(r, i));
                    next.set(r, i, s * relu * m);
                }
            }
            delta = next;
        }
    }
    Ok(grad)
}

/// Eval-mode probabilities.
pub fn predict_proba(params: &ModelParams, x: &Matrix) -> Result<Vec<f64>> {
    Ok(forward(params, x, Mode::Eval)?.probabilities())
}

/// Class 1 when p >= 0.5.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Vec<u8>> {
    if x.rows() == 0 {
        return Err(Error::Shape("predict on empty input".into()));
    }
    Ok(predict_proba(params, x)?
        .into_iter()
        .map(|p| u8::from(p >= 0.5))
        .collect())
}

pub fn accuracy(pred: &[u8], y: &[u8]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    if pred.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            y.len()
        )));
    }
    let correct = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Loss and accuracy of the eval-mode model on a labelled set.
pub fn evaluate(params: &ModelParams, x: &Matrix, y: &[u8]) -> Result<(f64, f64)> {
    let p = predict_proba(params, x)?;
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let loss = bce_loss(&p, &yf)?;
    let pred: Vec<u8> = p.iter().map(|&p| u8::from(p >= 0.5)).collect();
    Ok((loss, accuracy(&pred, y)?))
}
