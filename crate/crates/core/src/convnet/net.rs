use rand_distr::{Distribution, Normal};

use super::spec::{Layer, NetworkSpec};
use crate::artifact;
use crate::error::{Error, Result};
use crate::numerics::{Param, Tape, Tensor, Var};

/// Weights and biases in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub params: Vec<Param>,
    pub init_seed: u64,
}

impl NetworkParams {
    /// He initialization (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = artifact::rng(seed, 0x1417);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let (wshape, fan_in, out) = match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                Layer::Dense {
                    in_features,
                    out_features,
                } => (vec![out_features, in_features], in_features, out_features),
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n: usize = wshape.iter().product();
            let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("layer{i}.weight"),
                value: Tensor::new(wshape, w)?,
            });
            params.push(Param {
                name: format!("layer{i}.bias"),
                value: Tensor::zeros(&[out]),
            });
        }
        Ok(Self {
            params,
            init_seed: seed,
        })
    }

    /// Check parameter count and shapes against `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Self::init(spec, 0)?;
        if expected.params.len() != self.params.len() {
            return Err(Error::shape(
                "network",
                format!(
                    "spec needs {} parameter tensors, got {}",
                    expected.params.len(),
                    self.params.len()
                ),
            ));
        }
        for (e, p) in expected.params.iter().zip(&self.params) {
            if e.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "network",
                    format!(
                        "parameter `{}` is {:?}, spec needs {:?}",
                        e.name,
                        p.value.shape(),
                        e.value.shape()
                    ),
                ));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", p.name)));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Push the parameters onto `tape`, as trainable leaves or constants.
pub(crate) fn load_params(tape: &mut Tape, params: &NetworkParams, trainable: bool) -> Vec<Var> {
    params
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone(), trainable))
        .collect()
}

/// Run layers `0..=last` on `x` (`[C, H, W]`), returning each layer's output.
pub(crate) fn forward(
    tape: &mut Tape,
    spec: &NetworkSpec,
    vars: &[Var],
    x: Var,
    last: usize,
) -> Result<Vec<Var>> {
    let mut cur = x;
    let mut outs = Vec::with_capacity(last + 1);
    let mut p = vars.iter();
    for layer in &spec.layers[..=last] {
        cur = match *layer {
            Layer::Conv { stride, pad, .. } => {
                let (w, b) = (
                    *p.next().expect("conv weight"),
                    *p.next().expect("conv bias"),
                );
                tape.conv2d(cur, w, Some(b), stride, pad)?
            }
            Layer::Relu => tape.relu(cur)?,
            Layer::MaxPool { window, stride } => tape.maxpool2d(cur, window, stride)?,
            Layer::Dense { in_features, .. } => {
                let (w, b) = (
                    *p.next().expect("dense weight"),
                    *p.next().expect("dense bias"),
                );
                if tape.value(cur).shape().len() != 1 {
                    cur = tape.reshape(cur, &[in_features])?;
                }
                tape.dense(cur, w, b)?
            }
        };
        outs.push(cur);
    }
    Ok(outs)
}

pub(crate) fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    if x.shape() != spec.input {
        return Err(Error::shape(
            "network",
            format!("input is {:?}, network expects {:?}", x.shape(), spec.input),
        ));
    }
    Ok(())
}

/// Output activations of layer `last` without recording gradients.
pub fn activations(
    params: &NetworkParams,
    spec: &NetworkSpec,
    x: &Tensor,
    last: usize,
) -> Result<Tensor> {
    check_input(spec, x)?;
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let outs = forward(&mut tape, spec, &vars, xv, last)?;
    Ok(tape
        .value(*outs.last().expect("at least one layer"))
        .clone())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Argmax with ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class index and softmax probabilities for a preprocessed `[C, H, W]` input.
pub fn classify(
    params: &NetworkParams,
    spec: &NetworkSpec,
    x: &Tensor,
) -> Result<(usize, Vec<f64>)> {
    let logits = activations(params, spec, x, spec.layers.len() - 1)?;
    let probs = softmax(logits.data());
    Ok((argmax(logits.data()), probs))
}

/// Activation tensor at a named tap.
pub fn extract_features(
    params: &NetworkParams,
    spec: &NetworkSpec,
    x: &Tensor,
    tap: &str,
) -> Result<Tensor> {
    let after = spec.tap(tap)?;
    activations(params, spec, x, after)
}
