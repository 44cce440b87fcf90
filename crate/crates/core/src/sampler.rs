//! Per-step random index sets and the asynchronous mask stream.
//!
//! Sampler randomness is counter based: the generator for step `k` is
//! ChaCha8 keyed by the run seed, on the sampler's stream id, positioned at
//! word `k·2³²`. A step's mask is therefore a pure function of
//! `(seed, stream_id, step, rates, config)`; the producer thread, a
//! synchronous loop and a resumed run all see identical masks.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{LayerMask, ModelConfig, SubnetworkMask};
use crate::scheduler::{Rates, SamplingScheduler};
use crate::{Error, Result};

/// Identifier of the generator algorithm, recorded in configs and manifests.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Default capacity of the mask queue.
pub const DEFAULT_QUEUE_CAPACITY: usize = 4;

/// Words reserved per step in the sampler's counter space.
const WORDS_PER_STEP: u128 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SamplerSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl SamplerSeed {
    /// Generator positioned at the start of `step`'s slice of the stream.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        rng
    }
}

/// `round_half_up(p·n)` clamped to `[1, n]`.
pub fn round_to_count(p: f64, n: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config("rate", format!("{p} is outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::config("count", "population must be at least 1"));
    }
    // the small slack absorbs representation error in products like 0.35·10
    let k = (p * n as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(k.clamp(1, n))
}

/// Uniform `k`-subset of `0..n`, sorted (partial Fisher–Yates).
pub fn sample_subset<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidMask(format!("cannot draw {k} of {n} indices")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}

/// Layer set for the step, then fresh head and column sets for each
/// sampled layer.
pub fn sample_mask<R: Rng + ?Sized>(
    config: &ModelConfig,
    rates: Rates,
    rng: &mut R,
) -> Result<SubnetworkMask> {
    let n_layers = round_to_count(rates.layers, config.n_layers)?;
    let n_heads = round_to_count(rates.heads, config.n_heads)?;
    let n_cols = round_to_count(rates.mlp, config.mlp_inner)?;
    let layer_set = sample_subset(config.n_layers, n_layers, rng)?;
    let mut layers = Vec::with_capacity(layer_set.len());
    for layer in layer_set {
        let heads = sample_subset(config.n_heads, n_heads, rng)?;
        let cols = sample_subset(config.mlp_inner, n_cols, rng)?;
        layers.push(LayerMask { layer, heads, cols });
    }
    Ok(SubnetworkMask { layers, rates })
}

/// The mask of `step` under `scheduler`.
pub fn mask_for_step(
    config: &ModelConfig,
    scheduler: &SamplingScheduler,
    seed: SamplerSeed,
    step: u64,
) -> Result<SubnetworkMask> {
    let rates = scheduler.rates_at(step)?;
    sample_mask(config, rates, &mut seed.step_rng(step))
}

/// Consumer end of a bounded FIFO filled by a producer thread.
pub struct MaskStream {
    rx: Option<Receiver<Result<(u64, SubnetworkMask)>>>,
    producer: Option<JoinHandle<()>>,
    next_step: u64,
    last_step: u64,
}

/// Starts a producer generating masks for `first_step..=total_steps`.
pub fn start_mask_stream(
    scheduler: SamplingScheduler,
    config: ModelConfig,
    seed: SamplerSeed,
    capacity: usize,
    first_step: u64,
) -> Result<MaskStream> {
    config.validate()?;
    let last_step = scheduler.total_steps();
    spawn_stream(capacity, first_step, last_step, move |step| {
        mask_for_step(&config, &scheduler, seed, step)
    })
}

fn spawn_stream<F>(capacity: usize, first_step: u64, last_step: u64, mut produce: F) -> Result<MaskStream>
where
    F: FnMut(u64) -> Result<SubnetworkMask> + Send + 'static,
{
    if capacity == 0 {
        return Err(Error::config("sampler.queue_capacity", "must be at least 1"));
    }
    let (tx, rx) = sync_channel(capacity);
    let producer = std::thread::Builder::new()
        .name("mask-producer".into())
        .spawn(move || {
            for step in first_step..=last_step {
                let item = produce(step).map(|m| (step, m));
                let failed = item.is_err();
                // a closed channel means the consumer is gone
                if tx.send(item).is_err() || failed {
                    return;
                }
            }
        })
        .map_err(|e| Error::StreamTerminated(format!("cannot spawn producer: {e}")))?;
    Ok(MaskStream {
        rx: Some(rx),
        producer: Some(producer),
        next_step: first_step,
        last_step,
    })
}

impl MaskStream {
    /// Blocks until the next step's mask is available.
    pub fn next_mask(&mut self) -> Result<(u64, SubnetworkMask)> {
        if self.next_step > self.last_step {
            return Err(Error::StreamTerminated(format!(
                "schedule ended at step {}",
                self.last_step
            )));
        }
        let rx = self
            .rx
            .as_ref()
            .ok_or_else(|| Error::StreamTerminated("stream closed".into()))?;
        match rx.recv() {
            Ok(Ok((step, mask))) if step == self.next_step => {
                self.next_step += 1;
                Ok((step, mask))
            }
            Ok(Ok((step, _))) => Err(Error::StreamTerminated(format!(
                "expected the mask of step {}, received step {step}",
                self.next_step
            ))),
            Ok(Err(e)) => Err(Error::StreamTerminated(format!("producer failed: {e}"))),
            Err(_) => Err(Error::StreamTerminated("producer exited".into())),
        }
    }
}

impl Iterator for MaskStream {
    type Item = Result<(u64, SubnetworkMask)>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.next_step <= self.last_step).then(|| self.next_mask())
    }
}

impl Drop for MaskStream {
    fn drop(&mut self) {
        // closing the receiver unblocks a producer waiting on a full queue
        drop(self.rx.take());
        if let Some(handle) = self.producer.take() {
            let _ = handle.join();
        }
    }
}
