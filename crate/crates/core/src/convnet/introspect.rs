use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{activations, check_input, forward, load_params, NetworkParams};
use super::spec::NetworkSpec;
use crate::artifact;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximizeConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Weight of the squared norm of the centered input.
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for MaximizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.05,
            l2_penalty: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Maximized {
    /// Synthesized input in pixel space, `[0, 1]`.
    pub image: ImageBuffer,
    /// Unit activation before any step and after each step.
    pub activation: Vec<f64>,
}

/// Activation of `unit` at layer `after` (spatial mean for feature maps) and
/// the regularized objective, optionally with its input gradient.
#[allow(clippy::too_many_arguments)]
fn unit_objective(
    params: &NetworkParams,
    spec: &NetworkSpec,
    after: usize,
    unit: usize,
    center: &Tensor,
    x: &Tensor,
    l2: f64,
    with_grad: bool,
) -> Result<(f64, f64, Option<Tensor>)> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, false);
    let xv = tape.leaf(x.clone(), with_grad);
    let cv = tape.constant(center.clone());
    let z = tape.sub(xv, cv)?;
    let out = *forward(&mut tape, spec, &vars, z, after)?
        .last()
        .expect("layer");
    let shape = tape.value(out).shape().to_vec();
    let channels = shape[0];
    let sites: usize = shape[1..].iter().product();
    let flat = tape.reshape(out, &[channels, sites])?;
    let mut onehot = vec![0.0; channels];
    onehot[unit] = 1.0;
    let sel = tape.constant(Tensor::new(vec![1, channels], onehot)?);
    let picked = tape.matmul(sel, flat, false)?;
    let act = tape.mean(picked)?;
    let sq = tape.sum_squares(z)?;
    let penalty = tape.scale(sq, -l2)?;
    let obj = tape.add(act, penalty)?;
    let (a, j) = (tape.value(act).item(), tape.value(obj).item());
    if !with_grad {
        return Ok((a, j, None));
    }
    let mut g = tape.backward(obj)?;
    Ok((a, j, g.take(xv)))
}

/// Gradient ascent on a seeded random input to excite one unit.
///
/// The input lives in pixel space and is clamped to `[0, 1]` after every
/// step; `center` (usually the training mean) is subtracted before the
/// network sees it. Steps that lower the regularized objective are retried
/// at half the step size.
pub fn maximize_unit(
    params: &NetworkParams,
    spec: &NetworkSpec,
    center: &ImageBuffer,
    tap: &str,
    unit: usize,
    cfg: &MaximizeConfig,
) -> Result<Maximized> {
    let after = spec.tap(tap)?;
    let shapes = spec.shapes()?;
    let channels = shapes[after][0];
    if unit >= channels {
        return Err(Error::invalid(format!(
            "unit {unit} out of range: tap `{tap}` has {channels} units"
        )));
    }
    let [c, h, w] = spec.input;
    let center = Tensor::new(vec![c, h, w], center.to_planar())?;
    check_input(spec, &center)?;
    let mut rng = artifact::rng(cfg.seed, 0xA11E);
    let mut x = Tensor::new(
        vec![c, h, w],
        (0..c * h * w).map(|_| rng.random_range(0.4..0.6)).collect(),
    )?;
    let (a0, mut j, _) = unit_objective(
        params,
        spec,
        after,
        unit,
        &center,
        &x,
        cfg.l2_penalty,
        false,
    )?;
    let mut trace = vec![a0];
    let mut step = cfg.step_size;
    for s in 0..cfg.steps {
        let (_, _, grad) =
            unit_objective(params, spec, after, unit, &center, &x, cfg.l2_penalty, true).map_err(
                |e| {
                    if e.is_numerical() {
                        Error::NonFinite(format!("input gradient at step {s}"))
                    } else {
                        e
                    }
                },
            )?;
        let grad = grad.unwrap_or_else(|| Tensor::zeros(&[c, h, w]));
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("input gradient at step {s}")));
        }
        let mut accepted = false;
        for _ in 0..8 {
            let mut cand = x.clone();
            cand.data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(v, g)| *v = (*v + step * g).clamp(0.0, 1.0));
            let (a, jc, _) = unit_objective(
                params,
                spec,
                after,
                unit,
                &center,
                &cand,
                cfg.l2_penalty,
                false,
            )?;
            if jc >= j {
                x = cand;
                j = jc;
                trace.push(a);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            trace.push(*trace.last().expect("initial activation"));
        }
    }
    Ok(Maximized {
        image: ImageBuffer::from_planar(h, w, c, x.data())?,
        activation: trace,
    })
}

/// A page region (clipped to the page) with the activation it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationCrop {
    pub page_id: String,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub activation: f64,
}

/// For each page, the strongest site of channel `unit` at `tap`; returns the
/// global top `k` with their receptive fields, strongest first.
///
/// `pages` are `(page_id, preprocessed [C, H, W] input)`.
pub fn top_activating_crops(
    params: &NetworkParams,
    spec: &NetworkSpec,
    tap: &str,
    unit: usize,
    pages: &[(String, Tensor)],
    k: usize,
) -> Result<Vec<ActivationCrop>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let after = spec.tap(tap)?;
    let rf = spec.receptive_field(after)?;
    let shape = &spec.shapes()?[after];
    if unit >= shape[0] {
        return Err(Error::invalid(format!(
            "unit {unit} out of range: tap `{tap}` has {} units",
            shape[0]
        )));
    }
    let (oh, ow) = (shape[1], shape[2]);
    let [_, h, w] = spec.input;
    let mut crops: Vec<ActivationCrop> = pages
        .par_iter()
        .map(|(id, x)| {
            let a = activations(params, spec, x, after)?;
            let plane = &a.data()[unit * oh * ow..(unit + 1) * oh * ow];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let clip = |site: usize, extent: usize| {
                let lo = rf.offset + (site * rf.jump) as isize;
                let hi = lo + rf.size as isize;
                let (lo, hi) = (lo.max(0) as usize, (hi.max(0) as usize).min(extent));
                (lo, hi - lo)
            };
            let (cx, cw) = clip(best % ow, w);
            let (cy, ch) = clip(best / ow, h);
            Ok(ActivationCrop {
                page_id: id.clone(),
                x: cx,
                y: cy,
                width: cw,
                height: ch,
                activation: plane[best],
            })
        })
        .collect::<Result<_>>()?;
    crops.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then_with(|| a.page_id.cmp(&b.page_id))
    });
    crops.truncate(k);
    Ok(crops)
}
