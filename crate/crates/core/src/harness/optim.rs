//! AdamW with decoupled weight decay, gradient clipping and the
//! warmup-then-decay learning-rate schedule.

use std::f64::consts::PI;

use crate::harness::config::{Decay, LrSchedule, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self {
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One AdamW update at 1-based `step`. A missing gradient counts as zero.
/// Weight decay is applied only where `decay[i]` is set.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Vec<T>>],
    decay: &[bool],
    moments: &mut Moments<T>,
    cfg: &OptimizerConfig,
    step: u64,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: vec![params.len()],
            right: vec![grads.len(), decay.len()],
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].numel() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: params[i].shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = T::from_f64(if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 });
        let (m, v) = (&mut moments.first[i], &mut moments.second[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grads[i].as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * factor);
        }
    }
    norm
}

/// Linear warmup to the peak over `warmup_steps`, then linear or cosine
/// decay reaching `min_lr` at the final step.
pub fn lr_at(s: &LrSchedule, step: u64) -> f64 {
    if step <= s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.min_lr;
    }
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    let weight = match s.decay {
        Decay::Linear => 1.0 - progress,
        Decay::Cosine => 0.5 * (1.0 + (PI * progress).cos()),
    };
    s.min_lr + (s.peak_lr - s.min_lr) * weight
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    fn sched(decay: Decay) -> LrSchedule {
        LrSchedule {
            peak_lr: 1e-3,
            warmup_steps: 10,
            decay,
            min_lr: 1e-4,
            total_steps: 110,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut m = Moments::zeros_like(&p);
        adamw_step(&mut p, &[Some(vec![0.0; 3])], &[true], &mut m, &cfg(0.0), 1, 0.1).unwrap();
        adamw_step(&mut p, &[None], &[true], &mut m, &cfg(0.0), 2, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_shrinks_by_lr_times_wd() {
        let mut p = vec![Tensor::new(vec![2], vec![2.0f64, -4.0]).unwrap()];
        let mut m = Moments::zeros_like(&p);
        adamw_step(&mut p, &[None], &[true], &mut m, &cfg(0.5), 1, 0.1).unwrap();
        assert_eq!(p[0].data(), &[2.0 * 0.95, -4.0 * 0.95]);
        // excluded tensors keep their value
        let mut q = vec![Tensor::new(vec![1], vec![2.0f64]).unwrap()];
        let mut m = Moments::zeros_like(&q);
        adamw_step(&mut q, &[None], &[false], &mut m, &cfg(0.5), 1, 0.1).unwrap();
        assert_eq!(q[0].data(), &[2.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        // f(θ) = θ², ∇f = 2θ
        let mut p = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut m = Moments::zeros_like(&p);
        let s = LrSchedule {
            peak_lr: 0.1,
            warmup_steps: 0,
            decay: Decay::Cosine,
            min_lr: 0.0,
            total_steps: 200,
        };
        for step in 1..=200 {
            let g = vec![2.0 * p[0].data()[0]];
            adamw_step(&mut p, &[Some(g)], &[false], &mut m, &cfg(0.0), step, lr_at(&s, step)).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut m = Moments::zeros_like(&p);
        let r = adamw_step(&mut p, &[Some(vec![f64::NAN])], &[false], &mut m, &cfg(0.0), 1, 0.1);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![3.0f64]), None, Some(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(vec![0.1f64])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
    }

    #[test]
    fn schedule_shape() {
        let lin = sched(Decay::Linear);
        assert_eq!(lr_at(&lin, 10), 1e-3);
        assert!((lr_at(&lin, 5) - 5e-4).abs() < 1e-18);
        assert!((lr_at(&lin, 60) - (1e-3 + 1e-4) / 2.0).abs() < 1e-15);
        assert!((lr_at(&lin, 110) - 1e-4).abs() < 1e-18);
        let cos = sched(Decay::Cosine);
        assert_eq!(lr_at(&cos, 10), 1e-3);
        assert!((lr_at(&cos, 110) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&cos, 60) - (1e-3 + 1e-4) / 2.0).abs() < 1e-15);
        assert!(lr_at(&cos, 30) > lr_at(&lin, 30));
    }
}
