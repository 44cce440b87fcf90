//! Training-dynamics probes: Hutchinson Hessian-trace estimates, loss drops
//! at stage transitions, and loss-curve slopes at a matched loss level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::harness::data::Batch;
use crate::harness::log::{LossLog, LossRecord};
use crate::model::ModelParams;
use crate::scheduler::SamplingScheduler;
use crate::{Error, Result};

pub const DEFAULT_FD_EPSILON: f64 = 1e-3;
/// Number of fixed evaluation batches the model trace is measured on.
pub const TRACE_EVAL_BATCHES: usize = 8;
/// Sequences per trace batch, independent of the training batch size.
pub const TRACE_BATCH_SIZE: usize = 8;
/// Trailing-mean width used before locating a loss level.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct HessianTraceEstimate {
    pub value: f64,
    pub n_probes: usize,
    /// Standard error of the mean over probes; 0 for a single probe.
    pub std_error: f64,
    /// Requested relative step.
    pub fd_epsilon: f64,
    /// Actual scalar `h` in `(∇L(θ+hv) − ∇L(θ−hv)) / 2h`.
    pub fd_step: f64,
}

/// Hutchinson estimate of `Tr ∇²L(θ)` from `n_probes` Rademacher probes.
///
/// `grad` must be deterministic. `Hv` comes from central differences of
/// gradients with `h = fd_epsilon·max(1, ‖θ‖)/√n`, which makes the
/// perturbation `h·v` have norm `fd_epsilon·max(1, ‖θ‖)`. Probe `i` draws its
/// signs from its own generator (`seed`, stream `i`), so the result does not
/// depend on how probes are scheduled across threads.
pub fn hessian_trace<F>(
    theta: &[f64],
    grad: F,
    n_probes: usize,
    fd_epsilon: f64,
    seed: u64,
) -> Result<HessianTraceEstimate>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if n_probes == 0 {
        return Err(Error::Analysis("at least one probe is required".into()));
    }
    if !(fd_epsilon > 0.0 && fd_epsilon.is_finite()) {
        return Err(Error::Analysis(format!("fd_epsilon {fd_epsilon} must be positive")));
    }
    if theta.is_empty() {
        return Err(Error::Analysis("empty parameter vector".into()));
    }
    let n = theta.len();
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = fd_epsilon * norm.max(1.0) / (n as f64).sqrt();

    let samples = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let v: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&v).map(|(t, vi)| t + sign * h * vi).collect() };
            let plus = grad(&shifted(1.0))?;
            let minus = grad(&shifted(-1.0))?;
            if plus.len() != n || minus.len() != n {
                return Err(Error::Shape {
                    op: "hessian_trace",
                    left: vec![n],
                    right: vec![plus.len(), minus.len()],
                });
            }
            let vhv = v
                .iter()
                .zip(plus.iter().zip(&minus))
                .map(|(vi, (p, m))| vi * (p - m))
                .sum::<f64>()
                / (2.0 * h);
            if !vhv.is_finite() {
                return Err(Error::NonFinite(format!("Hessian-vector product of probe {i}")));
            }
            Ok(vhv)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean = samples.iter().sum::<f64>() / n_probes as f64;
    let std_error = if n_probes > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_probes - 1) as f64;
        (var / n_probes as f64).sqrt()
    } else {
        0.0
    };
    Ok(HessianTraceEstimate {
        value: mean,
        n_probes,
        std_error,
        fd_epsilon,
        fd_step: h,
    })
}

/// Mean full-model loss and its gradient over fixed batches, at `theta`.
pub fn model_loss_and_grad(
    params: &ModelParams<f64>,
    batches: &[Batch],
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if batches.is_empty() {
        return Err(Error::Analysis("no batches".into()));
    }
    let mut p = params.clone();
    p.assign_flat(theta)?;
    let mut total = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for b in batches {
        let (l, grads) = p.loss_and_grads(&b.inputs, &b.targets, b.batch_size, None)?;
        loss += l;
        let mut offset = 0;
        for (t, g) in p.tensors().iter().zip(grads) {
            if let Some(g) = g {
                for (acc, v) in total[offset..offset + t.numel()].iter_mut().zip(g) {
                    *acc += v;
                }
            }
            offset += t.numel();
        }
    }
    let k = batches.len() as f64;
    if let Some(bad) = total.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {bad}")));
    }
    total.iter_mut().for_each(|g| *g /= k);
    Ok((loss / k, total))
}

/// Trace of the Hessian of the mean full-model loss over `batches`.
pub fn model_hessian_trace(
    params: &ModelParams<f64>,
    batches: &[Batch],
    n_probes: usize,
    fd_epsilon: f64,
    seed: u64,
) -> Result<HessianTraceEstimate> {
    let theta = params.flatten();
    hessian_trace(
        &theta,
        |t| model_loss_and_grad(params, batches, t).map(|(_, g)| g),
        n_probes,
        fd_epsilon,
        seed,
    )
}

/// Whether two estimates taken with different steps agree within 10%.
pub fn fd_stable(a: &HessianTraceEstimate, b: &HessianTraceEstimate) -> bool {
    let scale = a.value.abs().max(b.value.abs());
    scale == 0.0 || (a.value - b.value).abs() <= 0.1 * scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionReport {
    /// Last step of the earlier stage.
    pub step: u64,
    /// 1-based index of the stage that ends at `step`.
    pub stage: usize,
    pub pre_mean: f64,
    pub post_mean: f64,
    /// `pre_mean − post_mean`; positive when the loss fell.
    pub drop: f64,
    pub window: u64,
}

/// Mean loss over `window` steps before and after each internal stage
/// transition. Windows may not reach past a neighbouring transition.
pub fn transition_drop(
    log: &LossLog,
    sched: &SamplingScheduler,
    window: u64,
) -> Result<Vec<TransitionReport>> {
    let ends: Vec<u64> = sched.stages().iter().map(|s| s.end_step).collect();
    transition_drop_at(log, &ends, window)
}

/// [`transition_drop`] for explicit stage end steps (the last entry is the
/// final step of training).
pub fn transition_drop_at(log: &LossLog, ends: &[u64], window: u64) -> Result<Vec<TransitionReport>> {
    if window == 0 {
        return Err(Error::Analysis("window must be at least one step".into()));
    }
    if ends.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Analysis("stage ends must increase".into()));
    }
    let records = log.records();
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f.step, l.step),
        _ => return Err(Error::Analysis("empty loss log".into())),
    };
    let mut reports = Vec::with_capacity(ends.len().saturating_sub(1));
    for t in 0..ends.len().saturating_sub(1) {
        let s = ends[t];
        let prev = if t == 0 { 0 } else { ends[t - 1] };
        let next = ends[t + 1];
        if s - prev < window || next - s < window {
            return Err(Error::Analysis(format!(
                "a {window}-step window around step {s} crosses another transition"
            )));
        }
        if first > s + 1 - window || last < s + window {
            return Err(Error::Analysis(format!(
                "log covers steps {first}..={last}, transition {s} needs {}..={}",
                s + 1 - window,
                s + window
            )));
        }
        let mean = |lo: u64, hi: u64| {
            let (sum, count) = records
                .iter()
                .filter(|r| r.step >= lo && r.step <= hi)
                .fold((0.0, 0usize), |(a, c), r| (a + r.loss, c + 1));
            if count == 0 {
                Err(Error::Analysis(format!("no log records in steps {lo}..={hi}")))
            } else {
                Ok(sum / count as f64)
            }
        };
        let pre_mean = mean(s + 1 - window, s)?;
        let post_mean = mean(s + 1, s + window)?;
        reports.push(TransitionReport {
            step: s,
            stage: t + 1,
            pre_mean,
            post_mean,
            drop: pre_mean - post_mean,
            window,
        });
    }
    Ok(reports)
}

/// Trailing mean of the loss over up to `width` records, paired with steps.
pub fn smoothed(records: &[LossRecord], width: usize) -> Vec<(u64, f64)> {
    let width = width.max(1);
    let mut out = Vec::with_capacity(records.len());
    let mut sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        sum += r.loss;
        if i >= width {
            sum -= records[i - width].loss;
        }
        out.push((r.step, sum / (i + 1).min(width) as f64));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSlope {
    /// First step whose smoothed loss is at or below the level.
    pub crossing: u64,
    /// Least-squares slope of loss per step around the crossing.
    pub slope: f64,
}

/// Slope of the raw loss over a `window`-step span centred on the first
/// step where the trailing-mean loss reaches `level`.
pub fn slope_at_level(log: &LossLog, level: f64, window: u64) -> Result<LevelSlope> {
    let records = log.records();
    let smooth = smoothed(records, SMOOTHING_WINDOW);
    // only full smoothing windows count, so early noise cannot trigger a crossing
    let crossing = smooth
        .iter()
        .skip(SMOOTHING_WINDOW.saturating_sub(1).min(smooth.len().saturating_sub(1)))
        .find(|(_, l)| *l <= level)
        .map(|(s, _)| *s)
        .ok_or_else(|| Error::Analysis(format!("smoothed loss never reaches {level}")))?;
    let lo = crossing.saturating_sub(window / 2);
    let hi = crossing + window / 2;
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.step >= lo && r.step <= hi)
        .map(|r| (r.step as f64, r.loss))
        .collect();
    if points.len() < 2 {
        return Err(Error::Analysis(format!("fewer than two records in steps {lo}..={hi}")));
    }
    Ok(LevelSlope {
        crossing,
        slope: least_squares_slope(&points),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeComparison {
    pub level: f64,
    pub a: LevelSlope,
    pub b: LevelSlope,
}

pub fn slope_compare(log_a: &LossLog, log_b: &LossLog, level: f64, window: u64) -> Result<SlopeComparison> {
    Ok(SlopeComparison {
        level,
        a: slope_at_level(log_a, level, window)?,
        b: slope_at_level(log_b, level, window)?,
    })
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let sxx = points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Stage boundaries as seen in a log: the last step of each stage index.
pub fn stage_ends_from_log(log: &LossLog) -> Vec<u64> {
    let mut ends: Vec<u64> = Vec::new();
    let records = log.records();
    for (i, r) in records.iter().enumerate() {
        if records.get(i + 1).is_none_or(|n| n.stage != r.stage) {
            ends.push(r.step);
        }
    }
    ends
}
