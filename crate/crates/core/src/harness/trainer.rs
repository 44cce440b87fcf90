//! The training loop.
//!
//! Each step takes the next mask from the sampler's queue, draws a batch,
//! runs forward and backward through the sampled subnetwork, clips the
//! global gradient norm, applies AdamW and appends a loss record carrying
//! the cumulative FLOPs of the modules that actually ran. Dense mode skips
//! the sampler and runs the plain full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{measured_flops, module_costs_with, stage_step_cost, ModuleCosts};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{TrainConfig, TrainMode};
use crate::harness::data::{eval_batches, load_corpus, next_batch, Batch, Corpus};
use crate::harness::log::{LossLog, LossRecord};
use crate::harness::optim::{adamw_step, clip_grad_norm, lr_at, Moments};
use crate::model::ModelParams;
use crate::sampler::{start_mask_stream, MaskStream};
use crate::scheduler::Rates;
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Callbacks invoked by [`Trainer::run_until`]. All methods default to no-ops.
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _record: &LossRecord) {}
    fn on_eval(&mut self, _step: u64, _loss: f64) {}
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    params: ModelParams<T>,
    moments: Moments<T>,
    decays: Vec<bool>,
    train: Corpus,
    val: Corpus,
    data_rng: ChaCha8Rng,
    costs: ModuleCosts,
    step: u64,
    log: LossLog,
    evals: Vec<(u64, f64)>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: parameters initialised from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.model, config.seed)?;
        let moments = Moments::zeros_like(params.tensors());
        let (train, val) = load_corpora(&config)?;
        Ok(Self::assemble(config, params, moments, train, val, 0, LossLog::new(), 0))
    }

    /// Continues from a saved state.
    pub fn from_checkpoint(checkpoint: Checkpoint<T>) -> Result<Self> {
        checkpoint.config.validate()?;
        let (train, val) = load_corpora(&checkpoint.config)?;
        Self::resume(checkpoint, train, val)
    }

    /// Like [`Trainer::new`] with the corpora supplied directly.
    pub fn with_corpora(config: TrainConfig, train: Corpus, val: Corpus) -> Result<Self> {
        config.validate()?;
        check_corpora(&config, &train, &val)?;
        let params = ModelParams::init(config.model, config.seed)?;
        let moments = Moments::zeros_like(params.tensors());
        Ok(Self::assemble(config, params, moments, train, val, 0, LossLog::new(), 0))
    }

    pub fn resume(checkpoint: Checkpoint<T>, train: Corpus, val: Corpus) -> Result<Self> {
        let Checkpoint {
            config,
            step,
            params,
            moments,
            data_word_pos,
            log,
        } = checkpoint;
        check_corpora(&config, &train, &val)?;
        if step > config.steps {
            return Err(Error::StepRange {
                step,
                total: config.steps,
            });
        }
        Ok(Self::assemble(config, params, moments, train, val, step, log, data_word_pos))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        params: ModelParams<T>,
        moments: Moments<T>,
        train: Corpus,
        val: Corpus,
        step: u64,
        log: LossLog,
        data_word_pos: u128,
    ) -> Self {
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(config.data_stream);
        data_rng.set_word_pos(data_word_pos);
        let decays = params.specs().iter().map(|s| s.kind.decays()).collect();
        let costs = module_costs_with(&config.model, config.tokens_per_step(), config.backward_multiplier);
        Self {
            config,
            params,
            moments,
            decays,
            train,
            val,
            data_rng,
            costs,
            step,
            log,
            evals: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    /// `(step, loss)` of the periodic evaluations run so far in this process.
    pub fn evals(&self) -> &[(u64, f64)] {
        &self.evals
    }

    pub fn train_corpus(&self) -> &Corpus {
        &self.train
    }

    pub fn val_corpus(&self) -> &Corpus {
        &self.val
    }

    pub fn module_costs(&self) -> &ModuleCosts {
        &self.costs
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            moments: self.moments.clone(),
            data_word_pos: self.data_rng.get_word_pos(),
            log: self.log.clone(),
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        Checkpoint {
            data_word_pos: self.data_rng.get_word_pos(),
            config: self.config,
            step: self.step,
            params: self.params,
            moments: self.moments,
            log: self.log,
        }
    }

    /// Full-model loss on the held-out corpus.
    pub fn evaluate_val(&self) -> Result<f64> {
        evaluate(&self.params, &self.val, self.config.eval_batches, self.config.batch_size)
    }

    /// Trains to the configured step count.
    pub fn run(&mut self, observer: &mut dyn TrainObserver<T>) -> Result<()> {
        self.run_until(self.config.steps, observer)
    }

    /// Trains until `last` steps are complete.
    pub fn run_until(&mut self, last: u64, observer: &mut dyn TrainObserver<T>) -> Result<()> {
        if last > self.config.steps {
            return Err(Error::StepRange {
                step: last,
                total: self.config.steps,
            });
        }
        if self.step >= last {
            return Ok(());
        }
        let mut stream = match self.config.mode {
            TrainMode::Est => Some(start_mask_stream(
                self.config.scheduler.clone(),
                self.config.model,
                self.config.sampler_seed(),
                self.config.queue_capacity,
                self.step + 1,
            )?),
            TrainMode::Dense => None,
        };
        while self.step < last {
            let record = self.train_step(stream.as_mut())?;
            observer.on_step(&record);
            let every = |n: u64| n > 0 && self.step.is_multiple_of(n);
            if every(self.config.eval_every) {
                let loss = self.evaluate_val()?;
                self.evals.push((self.step, loss));
                observer.on_eval(self.step, loss);
            }
            if every(self.config.checkpoint_every) {
                observer.on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    fn train_step(&mut self, stream: Option<&mut MaskStream>) -> Result<LossRecord> {
        let step = self.step + 1;
        let stage = self.config.scheduler.stage_at(step)?;
        let mask = match stream {
            Some(s) => Some(s.next_mask()?.1),
            None => None,
        };
        let batch = next_batch(&self.train, self.config.batch_size, self.config.model.seq_len, &mut self.data_rng)?;
        let numerical = |e: Error| match e {
            Error::NonFinite(what) => Error::NumericalAbort {
                step,
                reason: format!("non-finite {what}"),
            },
            other => other,
        };
        let (loss, mut grads) = self
            .params
            .loss_and_grads(&batch.inputs, &batch.targets, batch.batch_size, mask.as_ref())
            .map_err(numerical)?;
        if !loss.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                reason: format!("training loss is {loss}"),
            });
        }
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = lr_at(&self.config.lr_schedule(), step);
        adamw_step(
            self.params.tensors_mut(),
            &grads,
            &self.decays,
            &mut self.moments,
            &self.config.optimizer,
            step,
            lr,
        )
        .map_err(numerical)?;
        let flops = match &mask {
            Some(m) => measured_flops(m, &self.costs),
            None => stage_step_cost(Rates::FULL, &self.costs, self.config.model.n_layers),
        };
        let record = LossRecord {
            step,
            stage,
            loss,
            lr,
            cum_flops: self.log.last().map_or(0.0, |r| r.cum_flops) + flops,
        };
        self.log.push(record)?;
        self.step = step;
        Ok(record)
    }
}

/// Runs a fresh training job to completion.
pub fn train<T: Scalar>(config: TrainConfig) -> Result<(LossLog, Checkpoint<T>)> {
    let mut trainer = Trainer::<T>::new(config)?;
    trainer.run(&mut ())?;
    let checkpoint = trainer.into_checkpoint();
    Ok((checkpoint.log.clone(), checkpoint))
}

/// Mean full-model cross-entropy over `n_batches` fixed, evenly spaced
/// batches of `corpus`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &Corpus,
    n_batches: usize,
    batch_size: usize,
) -> Result<f64> {
    let batches = eval_batches(corpus, n_batches, batch_size, params.config().seq_len)?;
    evaluate_batches(params, &batches)
}

pub fn evaluate_batches<T: Scalar>(params: &ModelParams<T>, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Corpus("no evaluation batches".into()));
    }
    let mut total = 0.0;
    for b in batches {
        total += params.loss(&b.inputs, &b.targets, b.batch_size, None)?;
    }
    Ok(total / batches.len() as f64)
}

/// Training corpus and held-out corpus named by the config.
pub fn load_corpora(config: &TrainConfig) -> Result<(Corpus, Corpus)> {
    let full = load_corpus(&config.data.train)?;
    let (train, val) = match &config.data.val {
        Some(path) => (full, load_corpus(path)?),
        None => full.split_tail(config.data.val_fraction),
    };
    check_corpora(config, &train, &val)?;
    Ok((train, val))
}

fn check_corpora(config: &TrainConfig, train: &Corpus, val: &Corpus) -> Result<()> {
    for c in [train, val] {
        c.check_vocab(config.model.vocab)?;
        c.check_len(config.model.seq_len)?;
    }
    Ok(())
}
