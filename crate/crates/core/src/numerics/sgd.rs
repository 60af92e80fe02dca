use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step-decay learning-rate schedule plus batch sizing for SGD with momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub base_lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_interval_iters: usize,
    pub train_batch: usize,
    pub val_batch: usize,
    pub max_iters: usize,
}

impl TrainingSchedule {
    /// Full-scale recipe: lr 0.01, momentum 0.9, ÷10 every 40k iterations,
    /// batches of 128 (train) and 40 (validation).
    pub fn full_scale() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            decay_factor: 10.0,
            decay_interval_iters: 40_000,
            train_batch: 128,
            val_batch: 40,
            max_iters: 120_000,
        }
    }

    /// The same recipe scaled down for CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            decay_interval_iters: 1000,
            train_batch: 32,
            max_iters: 3000,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.decay_factor > 1.0
            && self.decay_interval_iters > 0
            && self.train_batch > 0
            && self.val_batch > 0
            && self.max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid training schedule {self:?}"
            )))
        }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = (iter / self.decay_interval_iters) as i32;
        self.base_lr / self.decay_factor.powi(drops)
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Momentum buffers aligned with a parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Velocities(pub Vec<Vec<f64>>);

impl Velocities {
    pub fn zeros_like(params: &[Param]) -> Self {
        Velocities(params.iter().map(|p| vec![0.0; p.value.numel()]).collect())
    }
}

/// One momentum step: `v ← μ·v − lr(iter)·g`, then `w ← w + v`.
///
/// Nothing is modified if any gradient is misaligned or non-finite.
pub fn sgd_step(
    params: &mut [Param],
    velocities: &mut Velocities,
    grads: &[Tensor],
    schedule: &TrainingSchedule,
    iter: usize,
) -> Result<()> {
    if velocities.0.is_empty() {
        *velocities = Velocities::zeros_like(params);
    }
    if grads.len() != params.len() || velocities.0.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocities.0.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&velocities.0) {
        if p.value.shape() != g.shape() || v.len() != p.value.numel() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "parameter `{}` is {:?} but gradient is {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape()
                ),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}`",
                p.name
            )));
        }
    }
    let lr = schedule.lr_at(iter);
    let mu = schedule.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.0.iter_mut()) {
        for ((w, vi), gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(g.data())
        {
            *vi = mu * *vi - lr * gi;
            *w += *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(lr: f64, momentum: f64) -> TrainingSchedule {
        TrainingSchedule {
            base_lr: lr,
            momentum,
            ..TrainingSchedule::desk_scale()
        }
    }

    #[test]
    fn two_momentum_steps() {
        let mut params = vec![Param {
            name: "w".into(),
            value: Tensor::scalar(1.0),
        }];
        let mut vel = Velocities::default();
        let g = [Tensor::scalar(1.0)];
        let s = schedule(0.1, 0.9);
        sgd_step(&mut params, &mut vel, &g, &s, 0).unwrap();
        assert!((vel.0[0][0] + 0.1).abs() < 1e-15);
        assert!((params[0].value.item() - 0.9).abs() < 1e-15);
        sgd_step(&mut params, &mut vel, &g, &s, 1).unwrap();
        assert!((vel.0[0][0] + 0.19).abs() < 1e-15);
        assert!((params[0].value.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut params = vec![Param {
            name: "w".into(),
            value: Tensor::vector(vec![2.0, -1.0]),
        }];
        let mut vel = Velocities::default();
        let s = schedule(0.25, 0.0);
        for _ in 0..3 {
            let before = params[0].value.clone();
            let g = Tensor::vector(vec![0.4, -3.0]);
            sgd_step(&mut params, &mut vel, std::slice::from_ref(&g), &s, 0).unwrap();
            for ((w, w0), gi) in params[0]
                .value
                .data()
                .iter()
                .zip(before.data())
                .zip(g.data())
            {
                assert!((w - (w0 - 0.25 * gi)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_decay_values() {
        let s = TrainingSchedule {
            decay_interval_iters: 40_000,
            ..TrainingSchedule::full_scale()
        };
        assert_eq!(s.lr_at(0), 0.01);
        assert!((s.lr_at(40_000) - 0.001).abs() < 1e-18);
        assert!((s.lr_at(80_000) - 0.0001).abs() < 1e-18);
        assert_eq!(s.lr_at(39_999), 0.01);
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let mut params = vec![Param {
            name: "conv1.weight".into(),
            value: Tensor::scalar(1.0),
        }];
        let mut vel = Velocities::default();
        let err = sgd_step(
            &mut params,
            &mut vel,
            &[Tensor::scalar(f64::NAN)],
            &schedule(0.1, 0.9),
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
        assert_eq!(params[0].value.item(), 1.0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut params = vec![Param {
            name: "w".into(),
            value: Tensor::vector(vec![1.0, 2.0]),
        }];
        let mut vel = Velocities::default();
        assert!(sgd_step(
            &mut params,
            &mut vel,
            &[Tensor::scalar(1.0)],
            &schedule(0.1, 0.9),
            0
        )
        .is_err());
    }
}
