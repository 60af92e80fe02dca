//! Style transfer by optimizing pixels against content and Gram-matrix style
//! losses read from network taps.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::convnet::{activations, forward, load_params, NetworkParams, NetworkSpec, TrainedModel};
use crate::corpus::MeanImage;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::numerics::{gemm, Tape, Tensor, Var, View};

/// Consecutive loss increases that trigger a step-size halving.
pub const OSCILLATION_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleTap {
    pub tap: String,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferInit {
    Content,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub content_tap: String,
    pub style_taps: Vec<StyleTap>,
    /// Content weight (alpha).
    pub content_weight: f64,
    /// Style weight (beta).
    pub style_weight: f64,
    pub steps: usize,
    /// Pixel-space RMS length of the first step; later steps reuse the same
    /// learning rate.
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    pub init: TransferInit,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let third = 1.0 / 3.0;
        Self {
            content_tap: "deep".into(),
            style_taps: ["shallow", "mid", "deep"]
                .iter()
                .map(|t| StyleTap {
                    tap: (*t).into(),
                    weight: third,
                })
                .collect(),
            content_weight: 1.0,
            style_weight: 1e3,
            steps: 300,
            step_size: 0.01,
            momentum: 0.9,
            seed: 0,
            init: TransferInit::Content,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.content_weight, self.style_weight);
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) || a + b == 0.0 {
            return Err(Error::invalid(format!(
                "content and style weights must be non-negative and not both zero (got {a}, {b})"
            )));
        }
        if self
            .style_taps
            .iter()
            .any(|t| t.weight.is_nan() || t.weight < 0.0)
        {
            return Err(Error::invalid("style tap weights must be non-negative"));
        }
        let sum: f64 = self.style_taps.iter().map(|t| t.weight).sum();
        if b > 0.0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "style tap weights sum to {sum}, expected 1"
            )));
        }
        if self.step_size.is_nan() || self.step_size <= 0.0 || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::invalid(
                "step size must be positive and momentum in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Normalized Gram matrix of a `[C, H, W]` feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub channels: usize,
    /// Row-major `channels × channels`.
    pub data: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.channels + j]
    }
}

fn channels_and_sites(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c, rest @ ..] if *c >= 1 => Ok((*c, rest.iter().product::<usize>().max(1))),
        _ => Err(Error::shape(
            "gram",
            format!("features must have at least one channel, got {shape:?}"),
        )),
    }
}

/// `G_ij = Σ_k F_ik F_jk / (C·N)` over the `N` spatial sites.
pub fn gram(features: &Tensor) -> Result<GramMatrix> {
    let (c, n) = channels_and_sites(features.shape())?;
    let f = features.data();
    let mut data = vec![0.0; c * c];
    gemm(
        View::row_major(f, c, n),
        View::transposed(f, c, n),
        &mut data,
        0.0,
    );
    let norm = 1.0 / (c * n) as f64;
    data.iter_mut().for_each(|v| *v *= norm);
    // exact symmetry regardless of kernel summation order
    for i in 0..c {
        for j in 0..i {
            let m = 0.5 * (data[i * c + j] + data[j * c + i]);
            data[i * c + j] = m;
            data[j * c + i] = m;
        }
    }
    Ok(GramMatrix { channels: c, data })
}

/// `‖F − target‖²`.
pub fn content_loss(features: &Tensor, target: &Tensor) -> Result<f64> {
    if features.shape() != target.shape() {
        return Err(Error::shape(
            "content_loss",
            format!("{:?} vs {:?}", features.shape(), target.shape()),
        ));
    }
    Ok(features
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `Σ_l w_l ‖G(F_l) − G_l‖²_F`.
pub fn style_loss(features: &[Tensor], targets: &[GramMatrix], weights: &[f64]) -> Result<f64> {
    if features.len() != targets.len() || features.len() != weights.len() {
        return Err(Error::shape(
            "style_loss",
            format!(
                "{} feature maps, {} Grams, {} weights",
                features.len(),
                targets.len(),
                weights.len()
            ),
        ));
    }
    let mut total = 0.0;
    for ((f, t), w) in features.iter().zip(targets).zip(weights) {
        let g = gram(f)?;
        if g.channels != t.channels {
            return Err(Error::shape(
                "style_loss",
                format!("{} channels vs a {}-channel Gram", g.channels, t.channels),
            ));
        }
        total += w * g
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// `alpha·content + beta·style`.
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

/// Targets and taps for one (content, style) pair; evaluates the total loss
/// and its pixel gradient.
pub struct TransferObjective<'a> {
    params: &'a NetworkParams,
    spec: &'a NetworkSpec,
    mean: Tensor,
    content_after: usize,
    content_target: Tensor,
    style_after: Vec<usize>,
    style_weights: Vec<f64>,
    style_targets: Vec<GramMatrix>,
    alpha: f64,
    beta: f64,
}

fn to_tensor(img: &ImageBuffer, spec: &NetworkSpec) -> Result<Tensor> {
    let [c, h, w] = spec.input;
    let img = if img.channels() == 1 && c == 3 {
        img.replicate(3)
    } else {
        img.clone()
    };
    let img = img.resize(h, w);
    if img.channels() != c {
        return Err(Error::shape(
            "transfer",
            format!("{}-channel image for a {c}-channel network", img.channels()),
        ));
    }
    Tensor::new(vec![c, h, w], img.to_planar())
}

impl<'a> TransferObjective<'a> {
    pub fn new(
        params: &'a NetworkParams,
        spec: &'a NetworkSpec,
        mean: &MeanImage,
        content: &ImageBuffer,
        style: &ImageBuffer,
        cfg: &TransferConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mean = to_tensor(mean.image(), spec)?;
        let centered = |img: &ImageBuffer| -> Result<Tensor> {
            let mut t = to_tensor(img, spec)?;
            t.data_mut()
                .iter_mut()
                .zip(mean.data())
                .for_each(|(v, m)| *v -= m);
            Ok(t)
        };
        let content_after = spec.tap(&cfg.content_tap)?;
        let content_target = activations(params, spec, &centered(content)?, content_after)?;
        let style_in = centered(style)?;
        let mut style_after = Vec::new();
        let mut style_weights = Vec::new();
        let mut style_targets = Vec::new();
        for t in &cfg.style_taps {
            let after = spec.tap(&t.tap)?;
            style_targets.push(gram(&activations(params, spec, &style_in, after)?)?);
            style_after.push(after);
            style_weights.push(t.weight);
        }
        Ok(Self {
            params,
            spec,
            mean,
            content_after,
            content_target,
            style_after,
            style_weights,
            style_targets,
            alpha: cfg.content_weight,
            beta: cfg.style_weight,
        })
    }

    /// Pixel `[C, H, W]` tensor of an image at network resolution.
    pub fn pixels(&self, img: &ImageBuffer) -> Result<Tensor> {
        to_tensor(img, self.spec)
    }

    /// Loss parts at pixels `x`, with `d total / d x` when requested.
    pub fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(LossPoint, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, self.params, false);
        let xv = tape.leaf(x.clone(), with_grad);
        let mv = tape.constant(self.mean.clone());
        let z = tape.sub(xv, mv)?;
        let last = self
            .style_after
            .iter()
            .copied()
            .chain([self.content_after])
            .max()
            .expect("content tap");
        let outs = forward(&mut tape, self.spec, &vars, z, last)?;

        let ct = tape.constant(self.content_target.clone());
        let cd = tape.sub(outs[self.content_after], ct)?;
        let content = tape.sum_squares(cd)?;

        let mut style: Option<Var> = None;
        for ((&after, &w), target) in self
            .style_after
            .iter()
            .zip(&self.style_weights)
            .zip(&self.style_targets)
        {
            let (c, n) = channels_and_sites(tape.value(outs[after]).shape())?;
            let f = tape.reshape(outs[after], &[c, n])?;
            let g = tape.matmul(f, f, true)?;
            let g = tape.scale(g, 1.0 / (c * n) as f64)?;
            let gt = tape.constant(Tensor::new(vec![c, c], target.data.clone())?);
            let d = tape.sub(g, gt)?;
            let sq = tape.sum_squares(d)?;
            let term = tape.scale(sq, w)?;
            style = Some(match style {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let style = match style {
            Some(s) => s,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let wc = tape.scale(content, self.alpha)?;
        let ws = tape.scale(style, self.beta)?;
        let total = tape.add(wc, ws)?;
        let point = LossPoint {
            step: 0,
            total: tape.value(total).item(),
            content: tape.value(content).item(),
            style: tape.value(style).item(),
        };
        if !with_grad {
            return Ok((point, None));
        }
        let mut g = tape.backward(total)?;
        Ok((
            point,
            Some(g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    /// Lowest-loss iterate, in pixel space `[0, 1]`.
    pub image: ImageBuffer,
    /// Loss before any step and after each step.
    pub trace: Vec<LossPoint>,
    /// Step at which the returned image was reached.
    pub best_step: usize,
    /// Steps at which the oscillation guard halved the step size.
    pub halvings: Vec<usize>,
}

impl TransferResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |p| p.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace[self.best_step].total
    }
}

/// Momentum gradient descent on pixels of `alpha·L_content + beta·L_style`,
/// clamping to `[0, 1]` after every step.
///
/// The learning rate is fixed at the first step so that step's RMS pixel
/// change equals `step_size`. The returned image is the lowest-loss iterate.
pub fn transfer_style(
    params: &NetworkParams,
    spec: &NetworkSpec,
    mean: &MeanImage,
    content: &ImageBuffer,
    style: &ImageBuffer,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    let objective = TransferObjective::new(params, spec, mean, content, style, cfg)?;
    let [c, h, w] = spec.input;
    let mut x = match cfg.init {
        TransferInit::Content => objective.pixels(content)?,
        TransferInit::Noise => {
            let mut rng = artifact::rng(cfg.seed, 0x7F5E);
            Tensor::new(
                vec![c, h, w],
                (0..c * h * w).map(|_| rng.random::<f64>()).collect(),
            )?
        }
    };
    let non_finite = |step: usize| Error::NonFinite(format!("transfer loss at step {step}"));
    let mut velocity = vec![0.0; x.numel()];
    let mut lr: Option<f64> = None;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut halvings = Vec::new();
    let mut best = (0usize, f64::INFINITY, x.clone());
    let mut rising = 0;
    for step in 0..=cfg.steps {
        let (mut point, grad) = objective.evaluate(&x, step < cfg.steps)?;
        if !point.total.is_finite() {
            return Err(non_finite(step));
        }
        point.step = step;
        if point.total < best.1 {
            best = (step, point.total, x.clone());
        }
        if let Some(prev) = trace.last().map(|p: &LossPoint| p.total) {
            rising = if point.total > prev { rising + 1 } else { 0 };
        }
        trace.push(point);
        let Some(grad) = grad else { break };
        if !grad.is_finite() {
            return Err(non_finite(step));
        }
        if rising >= OSCILLATION_WINDOW {
            let current = lr.expect("set on the first step");
            lr = Some(current * 0.5);
            halvings.push(step);
            log::info!("transfer: loss rose for {OSCILLATION_WINDOW} steps, halving the step size at step {step}");
            rising = 0;
        }
        let rate = *lr.get_or_insert_with(|| {
            let rms = (grad.data().iter().map(|g| g * g).sum::<f64>() / grad.numel() as f64).sqrt();
            if rms > 0.0 {
                cfg.step_size / rms
            } else {
                cfg.step_size
            }
        });
        for ((v, p), g) in velocity.iter_mut().zip(x.data_mut()).zip(grad.data()) {
            *v = cfg.momentum * *v - rate * g;
            *p = (*p + *v).clamp(0.0, 1.0);
        }
    }
    let (best_step, _, bx) = best;
    Ok(TransferResult {
        image: ImageBuffer::from_planar(h, w, c, bx.data())?,
        trace,
        best_step,
        halvings,
    })
}

/// [`transfer_style`] with a trained model's network and mean.
pub fn transfer_with_model(
    model: &TrainedModel,
    content: &ImageBuffer,
    style: &ImageBuffer,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    transfer_style(&model.params, &model.spec, &model.mean, content, style, cfg)
}

/// Stylize many (content, style) pairs in parallel, in input order.
pub fn transfer_many(
    model: &TrainedModel,
    pairs: &[(&ImageBuffer, &ImageBuffer)],
    cfg: &TransferConfig,
) -> Result<Vec<TransferResult>> {
    pairs
        .par_iter()
        .map(|(c, s)| transfer_with_model(model, c, s, cfg))
        .collect()
}

/// Loss trace as CSV: `step,total,content,style`.
pub fn write_loss_csv(path: &Path, trace: &[LossPoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,total,content,style").expect("write to memory");
    for p in trace {
        writeln!(out, "{},{},{},{}", p.step, p.total, p.content, p.style).expect("write to memory");
    }
    artifact::write_bytes(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = artifact::rng(seed, 3);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = artifact::rng(seed, 5);
        ImageBuffer::from_vec(
            h,
            w,
            3,
            (0..h * w * 3).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn small_net() -> (NetworkSpec, NetworkParams, MeanImage) {
        let spec = NetworkSpec::s_net_with(3, [16, 16], [4, 6, 8], 8);
        let params = NetworkParams::init(&spec, 11).unwrap();
        (
            spec,
            params,
            MeanImage::from_image(ImageBuffer::filled(16, 16, &[0.5, 0.5, 0.5])),
        )
    }

    #[test]
    fn gram_constant_and_orthogonal() {
        let g = gram(&Tensor::full(&[2, 2, 2], 1.0)).unwrap();
        assert_eq!(g.data, vec![0.5; 4]);
        let f = Tensor::new(vec![2, 1, 4], vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0]).unwrap();
        let g = gram(&f).unwrap();
        assert_eq!((g.get(0, 1), g.get(1, 0)), (0.0, 0.0));
        assert_eq!(g.get(0, 0), 5.0 / 8.0);
    }

    #[test]
    fn gram_matches_direct_summation() {
        for (seed, shape) in [(1, [3, 4, 5]), (2, [7, 2, 2]), (3, [1, 6, 1])] {
            let f = random_tensor(&shape, seed);
            let (c, n) = (shape[0], shape[1] * shape[2]);
            let g = gram(&f).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += f.data()[i * n + k] * f.data()[j * n + k];
                    }
                    assert!((g.get(i, j) - s / (c * n) as f64).abs() < 1e-12);
                }
            }
        }
    }

    /// Smallest eigenvalue by Jacobi rotations.
    fn min_eigenvalue(g: &GramMatrix) -> f64 {
        let n = g.channels;
        let mut a = g.data.clone();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-15 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let (cs, sn) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = cs * akp - sn * akq;
                        a[k * n + q] = sn * akp + cs * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = cs * apk - sn * aqk;
                        a[q * n + k] = sn * apk + cs * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn losses_vanish_on_self_and_scale_quadratically() {
        let f = random_tensor(&[4, 3, 3], 9);
        let g = gram(&f).unwrap();
        assert_eq!(
            style_loss(std::slice::from_ref(&f), std::slice::from_ref(&g), &[1.0]).unwrap(),
            0.0
        );
        assert_eq!(content_loss(&f, &f).unwrap(), 0.0);
        let zero = Tensor::zeros(f.shape());
        let mut f2 = f.clone();
        f2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let (l1, l2) = (
            content_loss(&f, &zero).unwrap(),
            content_loss(&f2, &zero).unwrap(),
        );
        assert!((l2 - 4.0 * l1).abs() < 1e-9 * l2);
        assert!(content_loss(&f, &Tensor::zeros(&[4, 9])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TransferConfig::default().validate().is_ok());
        let mut c = TransferConfig {
            style_weight: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.content_weight = 0.0;
        assert!(c.validate().is_err());
        let mut c = TransferConfig::default();
        c.style_taps[0].weight = 0.5;
        assert!(c.validate().is_err());
        c.style_taps[0].weight = -1.0 / 3.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_pair_starts_at_the_minimum() {
        let (spec, params, mean) = small_net();
        let img = random_image(16, 16, 1);
        let cfg = TransferConfig {
            steps: 5,
            ..Default::default()
        };
        let r = transfer_style(&params, &spec, &mean, &img, &img, &cfg).unwrap();
        assert_eq!(r.initial_loss(), 0.0);
        assert_eq!(r.best_step, 0);
        assert_eq!(r.image, img);
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let (spec, params, mean) = small_net();
        let (content, style) = (random_image(16, 16, 2), random_image(16, 16, 3));
        let cfg = TransferConfig::default();
        let obj = TransferObjective::new(&params, &spec, &mean, &content, &style, &cfg).unwrap();
        let x = obj.pixels(&random_image(16, 16, 4)).unwrap();
        let (_, g) = obj.evaluate(&x, true).unwrap();
        let g = g.unwrap();
        let mut rng = artifact::rng(5, 0);
        let eps = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..x.numel());
            let probe = |d: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += d;
                obj.evaluate(&xp, false).unwrap().0.total
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "pixel {i}: analytic {} vs numeric {fd}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn content_only_from_noise_recovers_content() {
        let (spec, params, mean) = small_net();
        let (content, style) = (random_image(16, 16, 6), random_image(16, 16, 7));
        let cfg = TransferConfig {
            style_weight: 0.0,
            init: TransferInit::Noise,
            steps: 300,
            seed: 2,
            ..Default::default()
        };
        let r = transfer_style(&params, &spec, &mean, &content, &style, &cfg).unwrap();
        let first = r.trace[0].content;
        let last = r.trace[r.best_step].content;
        assert!(last <= 0.05 * first, "content loss {first} -> {last}");
        assert!(r.final_loss() < r.initial_loss());
        assert_eq!(r.trace.len(), 301);
    }

    #[test]
    fn stylization_lowers_loss_and_is_deterministic() {
        let (spec, params, mean) = small_net();
        let (content, style) = (random_image(16, 16, 8), random_image(16, 16, 9));
        let cfg = TransferConfig {
            steps: 60,
            ..Default::default()
        };
        let a = transfer_style(&params, &spec, &mean, &content, &style, &cfg).unwrap();
        let b = transfer_style(&params, &spec, &mean, &content, &style, &cfg).unwrap();
        assert!(a.final_loss() < a.initial_loss());
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_loss_csv(&path, &a.trace).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 62);
        assert!(text.starts_with("step,total,content,style\n0,"));
    }

    #[test]
    fn grams_of_network_features_are_psd() {
        let (spec, params, mean) = small_net();
        for seed in 0..4 {
            let x = to_tensor(&mean.preprocess(&random_image(16, 16, seed)), &spec).unwrap();
            for tap in ["shallow", "mid", "deep"] {
                let g = gram(&activations(&params, &spec, &x, spec.tap(tap).unwrap()).unwrap())
                    .unwrap();
                assert!(min_eigenvalue(&g) >= -1e-8, "{tap}");
                for i in 0..g.channels {
                    for j in 0..g.channels {
                        assert_eq!(g.get(i, j), g.get(j, i));
                    }
                }
            }
        }
    }
}
