//! Training cost model in FLOPs.
//!
//! Only attention and MLP modules are counted; embeddings, LayerNorm and the
//! output projection are left out of the model even though training computes
//! them. Per layer and per step, with `T` tokens per step:
//!
//! ```text
//! C_H = m·(8·T·d·N_H·d_k + 4·T·N·N_H·d_k)
//! C_M = m·(4·T·d·N_M)
//! ```
//!
//! where `m = 1 + backward_multiplier` (default `1 + 2`). A step with rates
//! `(p_H, p_M, p_L)` costs `N_L·p_L·(p_H·C_H + p_M·C_M)`.

use std::fmt::Write as _;

use crate::model::{ModelConfig, SubnetworkMask};
use crate::scheduler::{Rates, SamplingScheduler};

/// Backward pass cost relative to the forward pass.
pub const DEFAULT_BACKWARD_MULTIPLIER: f64 = 2.0;

/// Per-layer, per-step cost of the attention and MLP modules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModuleCosts {
    pub c_mha: f64,
    pub c_mlp: f64,
    pub n_heads: usize,
    pub mlp_inner: usize,
}

impl ModuleCosts {
    /// Cost of one attention head (`C_H / N_H`).
    pub fn per_head(&self) -> f64 {
        self.c_mha / self.n_heads as f64
    }

    /// Cost of one MLP intermediate column (`C_M / N_M`).
    pub fn per_column(&self) -> f64 {
        self.c_mlp / self.mlp_inner as f64
    }
}

pub fn module_costs(config: &ModelConfig, tokens_per_step: u64) -> ModuleCosts {
    module_costs_with(config, tokens_per_step, DEFAULT_BACKWARD_MULTIPLIER)
}

pub fn module_costs_with(
    config: &ModelConfig,
    tokens_per_step: u64,
    backward_multiplier: f64,
) -> ModuleCosts {
    let m = 1.0 + backward_multiplier;
    let t = tokens_per_step as f64;
    let d = config.hidden as f64;
    let width = config.attention_width() as f64;
    let n = config.seq_len as f64;
    ModuleCosts {
        c_mha: m * (8.0 * t * d * width + 4.0 * t * n * width),
        c_mlp: m * (4.0 * t * d * config.mlp_inner as f64),
        n_heads: config.n_heads,
        mlp_inner: config.mlp_inner,
    }
}

/// `N_L·p_L·(p_H·C_H + p_M·C_M)`.
pub fn stage_step_cost(rates: Rates, costs: &ModuleCosts, n_layers: usize) -> f64 {
    n_layers as f64 * rates.layers * (rates.heads * costs.c_mha + rates.mlp * costs.c_mlp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub steps: u64,
    pub rates: Rates,
    pub step_cost: f64,
    pub stage_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub per_stage: Vec<StageCost>,
    pub est_total: f64,
    pub baseline_total: f64,
    pub savings_fraction: f64,
}

pub fn total_cost(sched: &SamplingScheduler, costs: &ModuleCosts, n_layers: usize) -> CostReport {
    let mut prev = 0;
    let per_stage: Vec<StageCost> = sched
        .stages()
        .iter()
        .map(|s| {
            let steps = s.end_step - prev;
            prev = s.end_step;
            let step_cost = stage_step_cost(s.rates, costs, n_layers);
            StageCost {
                steps,
                rates: s.rates,
                step_cost,
                stage_total: steps as f64 * step_cost,
            }
        })
        .collect();
    let est_total = per_stage.iter().map(|s| s.stage_total).sum::<f64>();
    let baseline_total = sched.total_steps() as f64 * stage_step_cost(Rates::FULL, costs, n_layers);
    CostReport {
        per_stage,
        est_total,
        baseline_total,
        savings_fraction: 1.0 - est_total / baseline_total,
    }
}

/// FLOPs of one step under `mask`: each sampled layer pays for the heads
/// and columns it actually ran.
pub fn measured_flops(mask: &SubnetworkMask, costs: &ModuleCosts) -> f64 {
    mask.layers
        .iter()
        .map(|l| l.heads.len() as f64 * costs.per_head() + l.cols.len() as f64 * costs.per_column())
        .sum()
}

impl CostReport {
    /// Human-readable summary ending in a `savings: xx.x%` line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stage  steps       rates (pH, pM, pL)   step cost      stage total");
        for (i, s) in self.per_stage.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<6} {:<11} {:<20} {:<14.6e} {:.6e}",
                i + 1,
                s.steps,
                s.rates.to_string(),
                s.step_cost,
                s.stage_total
            );
        }
        let _ = writeln!(out, "est total FLOPs:      {:.6e}", self.est_total);
        let _ = writeln!(out, "baseline total FLOPs: {:.6e}", self.baseline_total);
        let _ = writeln!(out, "savings: {:.1}%", 100.0 * self.savings_fraction);
        out
    }

    /// Machine-readable table; the last row holds the totals.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("stage,steps,p_heads,p_mlp,p_layers,step_cost,stage_total\n");
        for (i, s) in self.per_stage.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i + 1,
                s.steps,
                s.rates.heads,
                s.rates.mlp,
                s.rates.layers,
                s.step_cost,
                s.stage_total
            );
        }
        let _ = writeln!(
            out,
            "total,{},,,,{},{}",
            self.per_stage.iter().map(|s| s.steps).sum::<u64>(),
            self.baseline_total,
            self.est_total
        );
        out
    }
}
