//! Staged sampling schedules.
//!
//! A schedule is an ordered list of stages, each with an inclusive end step
//! and the `(p_H, p_M, p_L)` rates used for every step in
//! `(previous_end, end]`.

use std::fmt;

use crate::{Error, Result};

/// Sampling rates for heads, MLP columns and layers, each in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub heads: f64,
    pub mlp: f64,
    pub layers: f64,
}

impl Rates {
    pub const FULL: Rates = Rates {
        heads: 1.0,
        mlp: 1.0,
        layers: 1.0,
    };

    pub const fn new(heads: f64, mlp: f64, layers: f64) -> Self {
        Self { heads, mlp, layers }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, p) in [("heads", self.heads), ("mlp", self.mlp), ("layers", self.layers)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(
                    format!("{path}.{name}"),
                    format!("rate {p} is outside (0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Rates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.heads, self.mlp, self.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub end_step: u64,
    pub rates: Rates,
}

/// Names accepted by [`SamplingScheduler::preset`].
pub const PRESET_NAMES: &[&str] = &[
    "practical-gpt2",
    "practical-tinyllama",
    "one-stage",
    "two-stage-a",
    "two-stage-b",
    "two-stage-c",
    "three-stage-alt",
    "table-1",
];

const HALF: Rates = Rates::new(0.5, 0.5, 0.5);
const HALF_WIDTH: Rates = Rates::new(0.5, 0.5, 1.0);
const HALF_DEPTH: Rates = Rates::new(1.0, 1.0, 0.5);
const FULL: Rates = Rates::FULL;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingScheduler {
    stages: Vec<Stage>,
}

impl SamplingScheduler {
    /// Checks the hard invariants: at least one stage, strictly increasing
    /// positive end steps, and every rate in `(0, 1]`.
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("scheduler.stages", "at least one stage is required"));
        }
        let mut prev = 0;
        for (i, stage) in stages.iter().enumerate() {
            if stage.end_step <= prev {
                return Err(Error::config(
                    format!("scheduler.stages[{i}].end_step"),
                    format!("{} does not increase past {prev}", stage.end_step),
                ));
            }
            prev = stage.end_step;
            stage.rates.validate(&format!("scheduler.stages[{i}].rates"))?;
        }
        Ok(Self { stages })
    }

    /// A single stage of constant rates.
    pub fn constant(total_steps: u64, rates: Rates) -> Result<Self> {
        Self::new(vec![Stage {
            end_step: total_steps,
            rates,
        }])
    }

    /// The schedules used for GPT2 and TinyLlama and the GPT2 ablations, with
    /// their original step counts. `scale` multiplies every end step (rounded
    /// to the nearest integer and kept strictly increasing).
    ///
    /// `table-1` is the three equal stages of the cost-saving illustration.
    pub fn preset(name: &str, scale: Option<f64>) -> Result<Self> {
        let k = 1000;
        let stages: Vec<(u64, Rates)> = match name {
            "practical-gpt2" => vec![(20 * k, HALF), (70 * k, HALF_WIDTH), (150 * k, FULL)],
            "practical-tinyllama" => vec![(10 * k, HALF), (25 * k, HALF_WIDTH), (60 * k, FULL)],
            "one-stage" => vec![(150 * k, HALF_WIDTH)],
            "two-stage-a" => vec![(50 * k, HALF_WIDTH), (150 * k, FULL)],
            "two-stage-b" => vec![(70 * k, HALF_WIDTH), (150 * k, FULL)],
            "two-stage-c" => vec![(90 * k, HALF_WIDTH), (150 * k, FULL)],
            "three-stage-alt" => vec![(20 * k, HALF), (70 * k, HALF_DEPTH), (150 * k, FULL)],
            "table-1" => vec![(50 * k, HALF), (100 * k, HALF_WIDTH), (150 * k, FULL)],
            other => {
                return Err(Error::config(
                    "scheduler.preset",
                    format!("unknown preset `{other}` (known: {})", PRESET_NAMES.join(", ")),
                ))
            }
        };
        let sched = Self::new(
            stages
                .into_iter()
                .map(|(end_step, rates)| Stage { end_step, rates })
                .collect(),
        )?;
        match scale {
            Some(s) => sched.scaled(s),
            None => Ok(sched),
        }
    }

    /// End steps multiplied by `factor` and rounded; a stage that would
    /// collapse onto its predecessor is pushed one step later.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::config("scheduler.scale", format!("{factor} is not positive")));
        }
        let mut prev = 0u64;
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let end = ((s.end_step as f64 * factor).round() as u64).max(prev + 1);
                prev = end;
                Stage {
                    end_step: end,
                    rates: s.rates,
                }
            })
            .collect();
        Self::new(stages)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.last().expect("non-empty").end_step
    }

    /// End steps of every stage but the last.
    pub fn transitions(&self) -> Vec<u64> {
        self.stages[..self.stages.len() - 1]
            .iter()
            .map(|s| s.end_step)
            .collect()
    }

    /// One-based stage index of `step`.
    pub fn stage_at(&self, step: u64) -> Result<usize> {
        let total = self.total_steps();
        if step == 0 || step > total {
            return Err(Error::StepRange { step, total });
        }
        Ok(self.stages.partition_point(|s| s.end_step < step) + 1)
    }

    pub fn rates_at(&self, step: u64) -> Result<Rates> {
        Ok(self.stages[self.stage_at(step)? - 1].rates)
    }

    /// Checks the hard invariants against a configured step budget and
    /// returns soft warnings.
    pub fn validate(&self, total_steps: u64) -> Result<Vec<String>> {
        Self::new(self.stages.clone())?;
        if self.total_steps() != total_steps {
            return Err(Error::config(
                "scheduler.stages",
                format!(
                    "last end step {} differs from the {} training steps",
                    self.total_steps(),
                    total_steps
                ),
            ));
        }
        let mut warnings = Vec::new();
        let last = self.stages.last().expect("non-empty").rates;
        if !last.is_full() {
            warnings.push(format!(
                "final stage rates {last} are not (1, 1, 1): the complete model is never trained"
            ));
        }
        Ok(warnings)
    }

    /// Parses `end:p_H,p_M,p_L; end:p_H,p_M,p_L; ...`.
    pub fn parse_stages(text: &str) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, part) in text.split(';').map(str::trim).filter(|p| !p.is_empty()).enumerate() {
            let path = format!("scheduler.stages[{i}]");
            let (end, rates) = part
                .split_once(':')
                .ok_or_else(|| Error::config(&path, format!("expected `end:pH,pM,pL`, got `{part}`")))?;
            let end_step = end
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::config(&path, format!("bad end step `{end}`: {e}")))?;
            let nums = rates
                .split(',')
                .map(|r| r.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(&path, format!("bad rate in `{rates}`: {e}")))?;
            let [heads, mlp, layers] = nums[..] else {
                return Err(Error::config(&path, format!("expected three rates, got `{rates}`")));
            };
            stages.push(Stage {
                end_step,
                rates: Rates { heads, mlp, layers },
            });
        }
        Self::new(stages)
    }

    /// Inverse of [`SamplingScheduler::parse_stages`].
    pub fn format_stages(&self) -> String {
        self.stages
            .iter()
            .map(|s| format!("{}:{},{},{}", s.end_step, s.rates.heads, s.rates.mlp, s.rates.layers))
            .collect::<Vec<_>>()
            .join("; ")
    }
}
