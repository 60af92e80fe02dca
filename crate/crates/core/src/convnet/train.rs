use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{argmax, check_input, forward, load_params, softmax, NetworkParams};
use super::spec::NetworkSpec;
use crate::artifact;
use crate::corpus::MeanImage;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::numerics::{sgd_step, Tape, Tensor, TrainingSchedule, Velocities};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainingSchedule,
    pub seed: u64,
    /// Add horizontally mirrored copies of every training page.
    pub flip: bool,
    /// Iterations between validation passes; 0 means once per epoch.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainingSchedule::desk_scale(),
            seed: 0,
            flip: true,
            eval_interval: 0,
        }
    }
}

/// Images at canonical resolution (not mean-subtracted) with class indices.
#[derive(Clone, Copy)]
pub struct LabeledImages<'a> {
    pub images: &'a [ImageBuffer],
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iter: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunLog {
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    /// Iteration count after which the returned parameters were captured.
    pub best_iter: usize,
    pub best_val_accuracy: f64,
}

fn to_input(img: &ImageBuffer, mean: &MeanImage, flip: bool) -> Result<Tensor> {
    let img = if flip {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    let x = mean.preprocess(&img);
    Tensor::new(vec![x.channels(), x.height(), x.width()], x.to_planar())
}

/// Loss and flattened parameter gradients for one example.
fn example_gradient(
    params: &NetworkParams,
    spec: &NetworkSpec,
    x: Tensor,
    label: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, true);
    let xv = tape.constant(x);
    let outs = forward(&mut tape, spec, &vars, xv, spec.layers.len() - 1)?;
    let loss = tape.softmax_cross_entropy(*outs.last().expect("output layer"), &[label])?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((
        value,
        vars.iter()
            .map(|v| grads.take(*v).expect("parameter gradient"))
            .collect(),
    ))
}

/// Accuracy and mean loss over a labeled set.
pub fn evaluate(
    params: &NetworkParams,
    spec: &NetworkSpec,
    mean: &MeanImage,
    data: LabeledImages<'_>,
) -> Result<(f64, f64)> {
    let results: Vec<(bool, f64)> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| {
            let x = to_input(img, mean, false)?;
            let logits = super::net::activations(params, spec, &x, spec.layers.len() - 1)?;
            let p = softmax(logits.data());
            Ok((argmax(logits.data()) == label, -p[label].max(1e-300).ln()))
        })
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let correct = results.iter().filter(|r| r.0).count() as f64;
    Ok((correct / n, results.iter().map(|r| r.1).sum::<f64>() / n))
}

/// Minibatch SGD with momentum and step decay; returns the parameters with
/// the best validation accuracy (ties broken by lower validation loss).
///
/// Per-example gradients are summed in batch order, so results do not depend
/// on the number of worker threads.
pub fn train_network(
    spec: &NetworkSpec,
    mean: &MeanImage,
    train: LabeledImages<'_>,
    val: LabeledImages<'_>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainRunLog)> {
    cfg.schedule.validate()?;
    spec.validate()?;
    if train.images.is_empty() || val.images.is_empty() {
        return Err(Error::data(
            "training needs nonempty train and validation sets",
        ));
    }
    if train.images.len() != train.labels.len() || val.images.len() != val.labels.len() {
        return Err(Error::invalid("image and label counts differ"));
    }
    let classes = spec.num_classes();
    if let Some(l) = train
        .labels
        .iter()
        .chain(val.labels)
        .find(|&&l| l >= classes)
    {
        return Err(Error::invalid(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    if mean.resolution() != [spec.input[1], spec.input[2]] {
        return Err(Error::shape(
            "train_network",
            format!(
                "mean image is {:?}, network input is {:?}",
                mean.resolution(),
                spec.input
            ),
        ));
    }
    check_input(spec, &to_input(&train.images[0], mean, false)?)?;

    let mut params = NetworkParams::init(spec, cfg.seed)?;
    let mut velocities = Velocities::zeros_like(&params.params);
    let items: Vec<(usize, bool)> = (0..train.images.len())
        .flat_map(|i| {
            if cfg.flip {
                vec![(i, false), (i, true)]
            } else {
                vec![(i, false)]
            }
        })
        .collect();
    let batch = cfg.schedule.train_batch;
    let eval_interval = if cfg.eval_interval > 0 {
        cfg.eval_interval
    } else {
        items.len().div_ceil(batch).max(1)
    };
    let mut rng = artifact::rng(cfg.seed, 0xBA7C);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut log = TrainRunLog::default();
    let mut best: Option<(f64, f64, NetworkParams)> = None;
    for iter in 0..cfg.schedule.max_iters {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order = (0..items.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(items[order[cursor]]);
            cursor += 1;
        }
        let lr = cfg.schedule.lr_at(iter);
        let diverged = |loss: f64| Error::Diverged { iter, lr, loss };
        let per_example: Vec<(f64, Vec<Tensor>)> = picks
            .par_iter()
            .map(|&(i, flip)| {
                let x = to_input(&train.images[i], mean, flip)?;
                example_gradient(&params, spec, x, train.labels[i])
            })
            .collect::<Result<_>>()
            .map_err(|e| {
                if e.is_numerical() {
                    diverged(f64::NAN)
                } else {
                    e
                }
            })?;

        let scale = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = params
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        for (l, g) in &per_example {
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gi.data())
                    .for_each(|(a, v)| *a += v * scale);
            }
        }
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        log.loss.push(loss);
        log.lr.push(lr);
        sgd_step(
            &mut params.params,
            &mut velocities,
            &grads,
            &cfg.schedule,
            iter,
        )
        .map_err(|e| if e.is_numerical() { diverged(loss) } else { e })?;

        if (iter + 1) % eval_interval == 0 || iter + 1 == cfg.schedule.max_iters {
            let (accuracy, vloss) = evaluate(&params, spec, mean, val)?;
            log.validation.push(ValidationPoint {
                iter: iter + 1,
                accuracy,
                loss: vloss,
            });
            let better = match &best {
                None => true,
                Some((a, l, _)) => accuracy > *a || (accuracy == *a && vloss < *l),
            };
            if better {
                best = Some((accuracy, vloss, params.clone()));
                log.best_iter = iter + 1;
                log.best_val_accuracy = accuracy;
            }
        }
    }
    let (_, _, best_params) = best.expect("at least one validation pass");
    Ok((best_params, log))
}
