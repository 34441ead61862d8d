//! Dense ReLU network with softmax cross-entropy and hand-written backprop.
//!
//! Parameters live in one flat [`ParamVector`]. Layout, per dense layer in
//! order: weights (`outputs x inputs`, row-major) then biases. When the spec
//! carries a norm layer, its per-feature scales and shifts sit directly after
//! the first dense layer's biases. The norm block is a pure affine map applied
//! to the first layer's pre-activations, before the ReLU.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    has_norm_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenseSlot {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NormSlot {
    width: usize,
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    dense: Vec<DenseSlot>,
    norm: Option<NormSlot>,
    len: usize,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, has_norm_layer: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidModel(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        if has_norm_layer && layer_sizes.len() < 3 {
            return Err(Error::InvalidModel(
                "a norm layer needs at least one hidden layer".into(),
            ));
        }
        Ok(Self {
            layer_sizes,
            has_norm_layer,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn has_norm_layer(&self) -> bool {
        self.has_norm_layer
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Total parameter count `d`.
    pub fn num_params(&self) -> usize {
        self.layout().len
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut dense = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut norm = None;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let weights = offset;
            let bias = weights + inputs * outputs;
            offset = bias + outputs;
            dense.push(DenseSlot {
                inputs,
                outputs,
                weights,
                bias,
            });
            if l == 0 && self.has_norm_layer {
                norm = Some(NormSlot {
                    width: outputs,
                    scale: offset,
                    shift: offset + outputs,
                });
                offset += 2 * outputs;
            }
        }
        Layout {
            dense,
            norm,
            len: offset,
        }
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn bits_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_len(&self, d: usize, context: &'static str) -> Result<()> {
        if self.len() != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                got: self.len(),
            });
        }
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Which coordinates take part in aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    included: Vec<bool>,
}

impl ParamMask {
    pub fn all(d: usize) -> Self {
        Self {
            included: vec![true; d],
        }
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn excluded_count(&self) -> usize {
        self.included.iter().filter(|&&b| !b).count()
    }
}

/// Structured view of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dense: Vec<DenseParams>,
    pub norm: Option<NormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn unflatten(params: &ParamVector, spec: &ModelSpec) -> Result<ModelParams> {
    let layout = spec.layout();
    params.check_len(layout.len, "unflatten")?;
    let dense = layout
        .dense
        .iter()
        .map(|s| DenseParams {
            inputs: s.inputs,
            outputs: s.outputs,
            weights: params[s.weights..s.bias].to_vec(),
            bias: params[s.bias..s.bias + s.outputs].to_vec(),
        })
        .collect();
    let norm = layout.norm.map(|n| NormParams {
        scale: params[n.scale..n.scale + n.width].to_vec(),
        shift: params[n.shift..n.shift + n.width].to_vec(),
    });
    Ok(ModelParams { dense, norm })
}

pub fn flatten(model: &ModelParams) -> ParamVector {
    let mut out = Vec::new();
    for (l, layer) in model.dense.iter().enumerate() {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.bias);
        if l == 0 {
            if let Some(norm) = &model.norm {
                out.extend_from_slice(&norm.scale);
                out.extend_from_slice(&norm.shift);
            }
        }
    }
    ParamVector(out)
}

/// A non-empty view of samples fed to the loss.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    data: &'a Dataset,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("batch"));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases, identity norm block.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut rng = seed::rng(&[seed::tag::INIT, seed]);
    let mut p = vec![0.0; layout.len];
    for s in &layout.dense {
        let bound = 1.0 / (s.inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut p[s.weights..s.bias] {
            *w = dist.sample(&mut rng);
        }
    }
    if let Some(n) = layout.norm {
        p[n.scale..n.scale + n.width].fill(1.0);
    }
    ParamVector(p)
}

/// Excludes exactly the norm-layer scales and shifts.
pub fn norm_layer_mask(spec: &ModelSpec) -> ParamMask {
    let layout = spec.layout();
    let mut mask = ParamMask::all(layout.len);
    if let Some(n) = layout.norm {
        mask.included[n.scale..n.shift + n.width].fill(false);
    }
    mask
}

/// Per-sample activations kept for the backward pass.
struct Trace {
    /// `inputs[l]` is the input to dense layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Value fed to the ReLU (after the norm block for layer 0), or logits.
    pre: Vec<Vec<f64>>,
    /// First layer output before the norm block.
    raw0: Vec<f64>,
}

impl Trace {
    fn new(spec: &ModelSpec) -> Self {
        let sizes = spec.layer_sizes();
        Self {
            inputs: sizes[..sizes.len() - 1]
                .iter()
                .map(|&n| vec![0.0; n])
                .collect(),
            pre: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            raw0: vec![0.0; sizes[1]],
        }
    }
}

fn forward(p: &[f64], layout: &Layout, x: &[f64], tr: &mut Trace) {
    tr.inputs[0].copy_from_slice(x);
    let last = layout.dense.len() - 1;
    for (l, s) in layout.dense.iter().enumerate() {
        let z = &mut tr.pre[l];
        let input = &tr.inputs[l];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &p[s.weights + o * s.inputs..s.weights + (o + 1) * s.inputs];
            *zo = p[s.bias + o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
        if l == 0 {
            if let Some(n) = layout.norm {
                tr.raw0.copy_from_slice(z);
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = p[n.scale + i] * *zi + p[n.shift + i];
                }
            }
        }
        if l < last {
            let next = &mut tr.inputs[l + 1];
            for (a, &zi) in next.iter_mut().zip(z.iter()) {
                *a = zi.max(0.0);
            }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    batch: &Batch<'_>,
    spec: &ModelSpec,
) -> Result<(f64, ParamVector)> {
    let layout = spec.layout();
    params.check_len(layout.len, "loss_and_grad params")?;
    let data = batch.data();
    if data.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch features",
            expected: spec.input_dim(),
            got: data.dim(),
        });
    }
    if data.num_classes() > spec.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "batch classes",
            expected: spec.num_classes(),
            got: data.num_classes(),
        });
    }

    let n = data.len();
    let inv_n = 1.0 / n as f64;
    let widest = spec.layer_sizes().iter().copied().max().unwrap_or(1);
    let mut grad = vec![0.0; layout.len];
    let mut loss = 0.0;
    let mut tr = Trace::new(spec);
    let mut delta = vec![0.0; widest];
    let mut back = vec![0.0; widest];

    for i in 0..n {
        forward(params, &layout, data.row(i), &mut tr);
        let logits = tr.pre.last().expect("at least one layer");
        let y = data.labels()[i];
        let lse = log_sum_exp(logits);
        loss += lse - logits[y];

        let c = logits.len();
        for (d, &z) in delta[..c].iter_mut().zip(logits) {
            *d = (z - lse).exp() * inv_n;
        }
        delta[y] -= inv_n;

        for (l, s) in layout.dense.iter().enumerate().rev() {
            let input = &tr.inputs[l];
            let dz = &delta[..s.outputs];
            for (o, &d) in dz.iter().enumerate() {
                let row = &mut grad[s.weights + o * s.inputs..s.weights + (o + 1) * s.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[s.bias + o] += d;
            }
            if l == 0 {
                break;
            }
            let da = &mut back[..s.inputs];
            da.fill(0.0);
            for (o, &d) in dz.iter().enumerate() {
                let row = &params[s.weights + o * s.inputs..s.weights + (o + 1) * s.inputs];
                for (acc, &w) in da.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            let pre = &tr.pre[l - 1];
            for (a, &z) in da.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *a = 0.0;
                }
            }
            if l == 1 {
                if let Some(norm) = layout.norm {
                    for (k, a) in da.iter_mut().enumerate() {
                        grad[norm.scale + k] += *a * tr.raw0[k];
                        grad[norm.shift + k] += *a;
                        *a *= params[norm.scale + k];
                    }
                }
            }
            std::mem::swap(&mut delta, &mut back);
        }
    }
    Ok((loss * inv_n, ParamVector(grad)))
}

/// Mean loss only.
pub fn loss(params: &ParamVector, batch: &Batch<'_>, spec: &ModelSpec) -> Result<f64> {
    let layout = spec.layout();
    params.check_len(layout.len, "loss params")?;
    let data = batch.data();
    if data.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch features",
            expected: spec.input_dim(),
            got: data.dim(),
        });
    }
    let mut tr = Trace::new(spec);
    let mut total = 0.0;
    for i in 0..data.len() {
        forward(params, &layout, data.row(i), &mut tr);
        let logits = tr.pre.last().expect("at least one layer");
        total += log_sum_exp(logits) - logits[data.labels()[i]];
    }
    Ok(total / data.len() as f64)
}

/// Central-difference gradient of the mean loss, one coordinate at a time.
pub fn finite_diff_grad(
    params: &ParamVector,
    batch: &Batch<'_>,
    spec: &ModelSpec,
    step: f64,
) -> Result<ParamVector> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(
            "step",
            "finite-difference step must be positive",
        ));
    }
    finite_diff(params, step, |p| loss(p, batch, spec))
}

/// Central differences of an arbitrary scalar function.
pub fn finite_diff(
    params: &ParamVector,
    step: f64,
    mut f: impl FnMut(&ParamVector) -> Result<f64>,
) -> Result<ParamVector> {
    let mut probe = params.clone();
    let mut out = vec![0.0; params.len()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        probe[i] = orig;
        *g = (up - down) / (2.0 * step);
    }
    Ok(ParamVector(out))
}

/// Argmax class per row; ties go to the lowest class index.
pub fn predict(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<Vec<usize>> {
    let layout = spec.layout();
    params.check_len(layout.len, "predict params")?;
    if data.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "evaluation features",
            expected: spec.input_dim(),
            got: data.dim(),
        });
    }
    let mut tr = Trace::new(spec);
    Ok((0..data.len())
        .map(|i| {
            forward(params, &layout, data.row(i), &mut tr);
            let logits = tr.pre.last().expect("at least one layer");
            let mut best = 0;
            for (k, &z) in logits.iter().enumerate().skip(1) {
                if z > logits[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

pub fn evaluate(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let preds = predict(params, data, spec)?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Random model parameters with `|p| <= scale`, for tests and oracles.
pub fn random_params(spec: &ModelSpec, scale: f64, rng: &mut impl Rng) -> ParamVector {
    ParamVector(
        (0..spec.num_params())
            .map(|_| rng.random_range(-scale..=scale))
            .collect(),
    )
}
