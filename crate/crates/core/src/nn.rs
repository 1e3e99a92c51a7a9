//! Fully-connected ReLU classifier with softmax cross-entropy, evaluated at
//! masked parameters `p ⊙ m`, with hand-written backpropagation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{eval_mask, ste_factor, Mask, Threshold};
use crate::params::{LayerLayout, ParamVector};

#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for GradVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

fn check_shapes(layout: &LayerLayout, mask: &Mask, data: &Dataset) -> Result<()> {
    if mask.len() != layout.d() {
        return Err(Error::LengthMismatch {
            expected: layout.d(),
            actual: mask.len(),
        });
    }
    let layers = layout.layers();
    if layers[0].in_dim != data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "network input width {} but samples have {} features",
            layers[0].in_dim,
            data.dim()
        )));
    }
    if let Some(l) = layers.windows(2).position(|w| w[0].out_dim != w[1].in_dim) {
        return Err(Error::ShapeMismatch(format!(
            "layer {l} outputs {} units but layer {} expects {}",
            layers[l].out_dim,
            l + 1,
            layers[l + 1].in_dim
        )));
    }
    let classes = layers[layers.len() - 1].out_dim;
    if data.num_classes() > classes {
        return Err(Error::ShapeMismatch(format!(
            "network has {classes} outputs but data has {} classes",
            data.num_classes()
        )));
    }
    Ok(())
}

/// Scratch activations for one sample: `acts[0]` is the input, `acts[l + 1]`
/// the output of layer `l` (ReLU for hidden layers, raw logits for the last).
struct Activations {
    acts: Vec<Vec<f64>>,
}

impl Activations {
    fn new(layout: &LayerLayout) -> Self {
        let mut acts = vec![vec![0.0; layout.layers()[0].in_dim]];
        acts.extend(layout.layers().iter().map(|s| vec![0.0; s.out_dim]));
        Self { acts }
    }

    fn forward(&mut self, layout: &LayerLayout, w: &[f64], x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let last = layout.num_layers() - 1;
        for (l, spec) in layout.layers().iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            for (o, z) in out.iter_mut().enumerate() {
                let row = layout.weight_index(l, o, 0);
                let mut acc = if spec.has_bias {
                    w[layout.bias_index(l, o)]
                } else {
                    0.0
                };
                for (wi, xi) in w[row..row + spec.in_dim].iter().zip(input) {
                    acc += wi * xi;
                }
                *z = if l < last { acc.max(0.0) } else { acc };
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn masked_loss(layout: &LayerLayout, w: &[f64], data: &Dataset) -> f64 {
    let mut scratch = Activations::new(layout);
    let mut total = 0.0;
    for i in 0..data.len() {
        scratch.forward(layout, w, data.row(i));
        let z = scratch.logits();
        total += log_sum_exp(z) - z[data.label(i)];
    }
    total / data.len() as f64
}

fn nonempty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyDataset("batch has no samples".into()))
    } else {
        Ok(())
    }
}

/// Mean softmax cross-entropy at parameters `p ⊙ m`.
pub fn forward_loss(p: &ParamVector, m: &Mask, batch: &Dataset) -> Result<f64> {
    check_shapes(p.layout(), m, batch)?;
    nonempty(batch)?;
    Ok(masked_loss(p.layout(), &m.apply(p.values()), batch))
}

/// Loss and exact gradient of [`forward_loss`] with the mask held constant.
/// The gradient is zero wherever the mask is zero.
pub fn loss_and_grad(p: &ParamVector, m: &Mask, batch: &Dataset) -> Result<(f64, GradVector)> {
    let layout = p.layout();
    check_shapes(layout, m, batch)?;
    nonempty(batch)?;
    let w = m.apply(p.values());
    let n = batch.len() as f64;
    let mut grad = vec![0.0; layout.d()];
    let mut scratch = Activations::new(layout);
    let widest = layout
        .layers()
        .iter()
        .map(|s| s.in_dim.max(s.out_dim))
        .max()
        .unwrap_or(0);
    let mut delta = Vec::with_capacity(widest);
    let mut upstream = Vec::with_capacity(widest);
    let mut total = 0.0;

    for i in 0..batch.len() {
        scratch.forward(layout, &w, batch.row(i));
        let y = batch.label(i);
        let z = scratch.logits();
        let lse = log_sum_exp(z);
        total += lse - z[y];

        delta.clear();
        delta.extend(z.iter().map(|v| (v - lse).exp() / n));
        delta[y] -= 1.0 / n;

        for l in (0..layout.num_layers()).rev() {
            let spec = layout.layers()[l];
            let input = &scratch.acts[l];
            for (o, &d_o) in delta.iter().enumerate() {
                if d_o == 0.0 {
                    continue;
                }
                let row = layout.weight_index(l, o, 0);
                for (g, xi) in grad[row..row + spec.in_dim].iter_mut().zip(input) {
                    *g += d_o * xi;
                }
                if spec.has_bias {
                    grad[layout.bias_index(l, o)] += d_o;
                }
            }
            if l == 0 {
                break;
            }
            upstream.clear();
            upstream.resize(spec.in_dim, 0.0);
            for (o, &d_o) in delta.iter().enumerate() {
                if d_o == 0.0 {
                    continue;
                }
                let row = layout.weight_index(l, o, 0);
                for (u, wi) in upstream.iter_mut().zip(&w[row..row + spec.in_dim]) {
                    *u += d_o * wi;
                }
            }
            // ReLU derivative: pass through only where the activation is positive
            for (u, a) in upstream.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *u = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut upstream);
        }
    }

    for (g, &keep) in grad.iter_mut().zip(m.bits()) {
        if !keep {
            *g = 0.0;
        }
    }
    Ok((total / n, GradVector(grad)))
}

/// `∇F(p ⊙ m) ⊙ m`.
pub fn grad_frozen_mask(p: &ParamVector, m: &Mask, batch: &Dataset) -> Result<GradVector> {
    loss_and_grad(p, m, batch).map(|(_, g)| g)
}

/// Threshold-controlled biased gradient: the frozen-mask gradient at the mask
/// `|p| >= θ`, scaled elementwise by the straight-through factor. Also
/// returns the loss and the mask it evaluated.
pub fn tcb_loss_and_grad(
    p: &ParamVector,
    th: &Threshold,
    batch: &Dataset,
) -> Result<(f64, GradVector, Mask)> {
    let mask = eval_mask(p, th)?;
    let (loss, grad) = loss_and_grad(p, &mask, batch)?;
    let factor = ste_factor(p, th)?;
    let scaled = grad
        .0
        .iter()
        .zip(&factor)
        .map(|(g, f)| g * f)
        .collect::<Vec<_>>();
    Ok((loss, GradVector(scaled), mask))
}

pub fn tcb_grad(p: &ParamVector, th: &Threshold, batch: &Dataset) -> Result<GradVector> {
    tcb_loss_and_grad(p, th, batch).map(|(_, g, _)| g)
}

/// Central differences of [`forward_loss`] with the mask frozen. Coordinates
/// outside the mask cannot move the loss and are reported as exactly zero.
pub fn finite_diff_grad(p: &ParamVector, m: &Mask, batch: &Dataset, h: f64) -> Result<GradVector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step {h} must be positive")));
    }
    let layout = p.layout();
    check_shapes(layout, m, batch)?;
    nonempty(batch)?;
    let mut w = m.apply(p.values());
    let mut grad = vec![0.0; layout.d()];
    for j in 0..w.len() {
        if !m.get(j) {
            continue;
        }
        let orig = w[j];
        w[j] = orig + h;
        let up = masked_loss(layout, &w, batch);
        w[j] = orig - h;
        let down = masked_loss(layout, &w, batch);
        w[j] = orig;
        grad[j] = (up - down) / (2.0 * h);
    }
    Ok(GradVector(grad))
}

/// Smallest |pre-activation| over all hidden units and samples; a gradient
/// check is only meaningful when this clears the finite-difference step.
pub fn min_hidden_margin(p: &ParamVector, m: &Mask, batch: &Dataset) -> Result<f64> {
    let layout = p.layout();
    check_shapes(layout, m, batch)?;
    let w = m.apply(p.values());
    let mut min = f64::INFINITY;
    let last = layout.num_layers() - 1;
    let mut scratch = Activations::new(layout);
    for i in 0..batch.len() {
        scratch.forward(layout, &w, batch.row(i));
        // recompute pre-activations of hidden layers from stored inputs
        for (l, spec) in layout.layers().iter().enumerate().take(last) {
            let input = &scratch.acts[l];
            for o in 0..spec.out_dim {
                let row = layout.weight_index(l, o, 0);
                let mut acc = if spec.has_bias {
                    w[layout.bias_index(l, o)]
                } else {
                    0.0
                };
                for (wi, xi) in w[row..row + spec.in_dim].iter().zip(input) {
                    acc += wi * xi;
                }
                min = min.min(acc.abs());
            }
        }
    }
    Ok(min)
}

/// Predicted class per sample; ties go to the smallest class index.
pub fn predict(p: &ParamVector, m: &Mask, data: &Dataset) -> Result<Vec<usize>> {
    let layout = p.layout();
    check_shapes(layout, m, data)?;
    let w = m.apply(p.values());
    let mut scratch = Activations::new(layout);
    Ok((0..data.len())
        .map(|i| {
            scratch.forward(layout, &w, data.row(i));
            argmax(scratch.logits())
        })
        .collect())
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = c;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn evaluate(p: &ParamVector, m: &Mask, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot evaluate on no samples".into()));
    }
    let preds = predict(p, m, data)?;
    let correct = preds
        .iter()
        .enumerate()
        .filter(|(i, c)| **c == data.label(*i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}
