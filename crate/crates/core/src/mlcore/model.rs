use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MlError, ParamVector};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    /// One tanh hidden layer followed by a softmax output layer.
    OneHiddenLayerMlp { hidden: usize },
}

/// Architecture of the classifier shared by every client of a task.
///
/// Parameter layout (row-major blocks, in order):
/// - linear: `W[classes x input]`, `b[classes]`
/// - mlp: `W1[hidden x input]`, `b1[hidden]`, `W2[classes x hidden]`, `b2[classes]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::LinearSoftmax, input_dim, num_classes }
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::OneHiddenLayerMlp { hidden }, input_dim, num_classes }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::LinearSoftmax => c * d + c,
            ModelKind::OneHiddenLayerMlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Named blocks of the flattened parameter vector as `(name, rows, cols)`.
    pub fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::LinearSoftmax => vec![("weight", c, d), ("bias", c, 1)],
            ModelKind::OneHiddenLayerMlp { hidden: h } => vec![
                ("hidden.weight", h, d),
                ("hidden.bias", h, 1),
                ("output.weight", c, h),
                ("output.bias", c, 1),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(MlError::InvalidTraining(
                "model needs input_dim > 0 and at least 2 classes".into(),
            ));
        }
        if let ModelKind::OneHiddenLayerMlp { hidden: 0 } = self.kind {
            return Err(MlError::InvalidTraining("mlp hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<(), MlError> {
        if params.dim() != self.param_count() {
            return Err(MlError::Shape { expected: self.param_count(), actual: params.dim() });
        }
        Ok(())
    }

    /// Initial global model. Linear models start at zero; MLP weights use a
    /// seeded Glorot-uniform draw so hidden units are not symmetric.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        if let ModelKind::OneHiddenLayerMlp { hidden: h } = self.kind {
            let (d, c) = (self.input_dim, self.num_classes);
            let mut rng = derive_rng("mlp-init", &[seed]);
            let a1 = (6.0 / (d + h) as f64).sqrt();
            for v in &mut values[..h * d] {
                *v = rng.random_range(-a1..a1);
            }
            let a2 = (6.0 / (h + c) as f64).sqrt();
            let off = h * d + h;
            for v in &mut values[off..off + c * h] {
                *v = rng.random_range(-a2..a2);
            }
        }
        ParamVector::new(values).expect("init values are finite")
    }
}

/// Scratch space reused across samples during forward/backward passes.
pub(crate) struct Workspace {
    logits: Vec<f64>,
    probs: Vec<f64>,
    hidden: Vec<f64>,
    grad_hidden: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        let h = match spec.kind {
            ModelKind::LinearSoftmax => 0,
            ModelKind::OneHiddenLayerMlp { hidden } => hidden,
        };
        Self {
            logits: vec![0.0; spec.num_classes],
            probs: vec![0.0; spec.num_classes],
            hidden: vec![0.0; h],
            grad_hidden: vec![0.0; h],
        }
    }

    pub(crate) fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weight[r * cols..(r + 1) * cols];
        *o = bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Softmax into `probs`; returns log-sum-exp of the logits.
fn softmax(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// Forward pass. Leaves logits and probabilities in the workspace and
/// returns the cross-entropy loss against `label`.
pub(crate) fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], label: usize, ws: &mut Workspace) -> f64 {
    let (d, c) = (spec.input_dim, spec.num_classes);
    match spec.kind {
        ModelKind::LinearSoftmax => {
            affine(&params[..c * d], &params[c * d..c * d + c], x, &mut ws.logits);
        }
        ModelKind::OneHiddenLayerMlp { hidden: h } => {
            let (w1, rest) = params.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            affine(w1, b1, x, &mut ws.hidden);
            for v in ws.hidden.iter_mut() {
                *v = v.tanh();
            }
            affine(w2, b2, &ws.hidden, &mut ws.logits);
        }
    }
    let lse = softmax(&ws.logits, &mut ws.probs);
    lse - ws.logits[label]
}

pub(crate) fn predict(spec: &ModelSpec, params: &[f64], x: &[f64], ws: &mut Workspace) -> usize {
    forward(spec, params, x, 0, ws);
    argmax(&ws.logits)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adds the gradient of one sample's loss to `grad`; returns that loss.
pub(crate) fn accumulate_grad(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    label: usize,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    let loss = forward(spec, params, x, label, ws);
    let (d, c) = (spec.input_dim, spec.num_classes);
    ws.probs[label] -= 1.0;
    let g_out = &ws.probs;
    match spec.kind {
        ModelKind::LinearSoftmax => {
            let (gw, gb) = grad.split_at_mut(c * d);
            for (k, &g) in g_out.iter().enumerate() {
                if g != 0.0 {
                    for (gwi, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
                gb[k] += g;
            }
        }
        ModelKind::OneHiddenLayerMlp { hidden: h } => {
            let w2 = &params[h * d + h..h * d + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            ws.grad_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (k, &g) in g_out.iter().enumerate() {
                let w2_row = &w2[k * h..(k + 1) * h];
                for j in 0..h {
                    gw2[k * h + j] += g * ws.hidden[j];
                    ws.grad_hidden[j] += g * w2_row[j];
                }
                gb2[k] += g;
            }
            for j in 0..h {
                let gz = ws.grad_hidden[j] * (1.0 - ws.hidden[j] * ws.hidden[j]);
                if gz != 0.0 {
                    for (gwi, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gwi += gz * xi;
                    }
                }
                gb1[j] += gz;
            }
        }
    }
    loss
}
