use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Initial step size; steps decay as `eta0 / (1 + lambda * eta0 * t)`.
    pub eta0: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 40,
            seed: 0,
            eta0: 1.0,
        }
    }
}

/// One hyperplane: `score = w·x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub w: Vec<f64>,
    pub b: f64,
    /// Best regularized hinge objective after each epoch.
    pub objective: Vec<f64>,
}

impl BinarySvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn objective(w: &[f64], b: f64, xs: &[&[f64]], ys: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * lambda * dot(w, w) + hinge / xs.len() as f64
}

/// Visit order for every epoch; shared by all classes trained from one seed.
pub(crate) fn epoch_orders(n: usize, cfg: &SvmConfig) -> Vec<Vec<usize>> {
    let mut rng = artifact::rng(cfg.seed, 0x5E0D);
    (0..cfg.epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Subgradient descent on `λ/2‖w‖² + mean hinge`, bias unregularized.
///
/// Each epoch visits the examples in `orders[e]` and yields its average
/// iterate; the returned hyperplane is the averaged iterate with the lowest
/// objective, and `objective` traces that running best.
pub fn train_binary(
    xs: &[&[f64]],
    positive: &[bool],
    cfg: &SvmConfig,
    orders: &[Vec<usize>],
) -> Result<BinarySvm> {
    if xs.is_empty() || xs.len() != positive.len() {
        return Err(Error::invalid(format!(
            "{} examples with {} labels",
            xs.len(),
            positive.len()
        )));
    }
    if !(cfg.lambda > 0.0 && cfg.eta0 > 0.0) || cfg.epochs == 0 {
        return Err(Error::invalid(
            "SVM needs lambda > 0, eta0 > 0 and at least one epoch",
        ));
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().position(|x| x.len() != dim) {
        return Err(Error::shape(
            "svm_train",
            format!("example {bad} has dim {} (expected {dim})", xs[bad].len()),
        ));
    }
    let ys: Vec<f64> = positive
        .iter()
        .map(|&p| if p { 1.0 } else { -1.0 })
        .collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut best_w = vec![0.0; dim];
    let mut best_b = 0.0;
    let mut t = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for order in orders.iter().take(cfg.epochs) {
        let mut w_avg = vec![0.0; dim];
        let mut b_avg = 0.0;
        for &i in order {
            let eta = cfg.eta0 / (1.0 + cfg.lambda * cfg.eta0 * t as f64);
            let margin = ys[i] * (dot(&w, xs[i]) + b);
            let shrink = 1.0 - eta * cfg.lambda;
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(xs[i]) {
                    *wj = shrink * *wj + eta * ys[i] * xj;
                }
                b += eta * ys[i];
            } else {
                w.iter_mut().for_each(|wj| *wj *= shrink);
            }
            w_avg.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
            b_avg += b;
            t += 1;
        }
        let n = order.len() as f64;
        w_avg.iter_mut().for_each(|v| *v /= n);
        b_avg /= n;
        let f = objective(&w_avg, b_avg, xs, &ys, cfg.lambda);
        if !f.is_finite() {
            return Err(Error::NonFinite("SVM objective".into()));
        }
        if trace.last().is_none_or(|&prev| f < prev) {
            best_w.clone_from(&w_avg);
            best_b = b_avg;
            trace.push(f);
        } else {
            trace.push(*trace.last().unwrap());
        }
    }
    Ok(BinarySvm {
        w: best_w,
        b: best_b,
        objective: trace,
    })
}

/// One-vs-all linear SVM over a fixed class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub classes: Vec<u32>,
    pub dim: usize,
    pub hyperplanes: Vec<BinarySvm>,
    pub config: SvmConfig,
    /// Identifier of the split the model was fit on.
    pub trained_on: Option<String>,
    /// Codebook size and descriptor dim for BoW models.
    pub codebook_k: Option<usize>,
    pub descriptor_dim: Option<usize>,
}

/// Train one hyperplane per distinct label; negatives are all other classes.
pub fn svm_train(features: &[Vec<f64>], labels: &[u32], cfg: &SvmConfig) -> Result<LinearSvmModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid(format!(
            "{} feature vectors with {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid(
            "one-vs-all training needs at least two classes",
        ));
    }
    let xs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let orders = epoch_orders(xs.len(), cfg);
    let hyperplanes = classes
        .par_iter()
        .map(|&c| {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            train_binary(&xs, &pos, cfg, &orders)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearSvmModel {
        classes,
        dim: xs[0].len(),
        hyperplanes,
        config: cfg.clone(),
        trained_on: None,
        codebook_k: None,
        descriptor_dim: None,
    })
}

/// Highest-confidence class and the per-class margins. Ties go to the lowest
/// class id.
pub fn svm_predict(model: &LinearSvmModel, x: &[f64]) -> Result<(u32, Vec<f64>)> {
    if x.len() != model.dim {
        return Err(Error::shape(
            "svm_predict",
            format!(
                "feature dim {} does not match model dim {}",
                x.len(),
                model.dim
            ),
        ));
    }
    let conf: Vec<f64> = model.hyperplanes.iter().map(|h| h.score(x)).collect();
    let mut best = 0;
    for (i, &c) in conf.iter().enumerate() {
        if c > conf[best] || (c == conf[best] && model.classes[i] < model.classes[best]) {
            best = i;
        }
    }
    Ok((model.classes[best], conf))
}

pub const SVM_MAGIC: &[u8; 8] = b"DRAWSVM1";

#[derive(Serialize, Deserialize)]
struct SvmHeader {
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "D")]
    d: Option<usize>,
    dim: usize,
    classes: Vec<u32>,
    lambda: f64,
    epochs: usize,
    eta0: f64,
    seeds: SvmSeeds,
    trained_on: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SvmSeeds {
    svm: u64,
}

impl LinearSvmModel {
    /// Weights and biases are stored as 32-bit floats, class by class.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SvmHeader {
            k: self.codebook_k,
            d: self.descriptor_dim,
            dim: self.dim,
            classes: self.classes.clone(),
            lambda: self.config.lambda,
            epochs: self.config.epochs,
            eta0: self.config.eta0,
            seeds: SvmSeeds {
                svm: self.config.seed,
            },
            trained_on: self.trained_on.clone(),
        };
        let values = self
            .hyperplanes
            .iter()
            .flat_map(|h| h.w.iter().copied().chain([h.b]));
        artifact::write_container(path, SVM_MAGIC, &header, &artifact::f32_bytes(values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (SvmHeader, _) = artifact::read_container(path, SVM_MAGIC)?;
        let mut offset = 0;
        let hyperplanes = h
            .classes
            .iter()
            .map(|_| {
                let mut v = artifact::take_f32(&payload, &mut offset, h.dim + 1)?;
                let b = v.pop().unwrap_or_default();
                Ok(BinarySvm {
                    w: v,
                    b,
                    objective: vec![],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: h.classes,
            dim: h.dim,
            hyperplanes,
            config: SvmConfig {
                lambda: h.lambda,
                epochs: h.epochs,
                seed: h.seeds.svm,
                eta0: h.eta0,
            },
            trained_on: h.trained_on,
            codebook_k: h.k,
            descriptor_dim: h.d,
        })
    }
}
