//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding:
//!
//! * `manifest`: `key = value` text with the config hash, the step, the
//!   precision and both RNG positions,
//! * `params.bin`: little-endian floats of every parameter in declaration order,
//! * `optimizer.bin`: AdamW first then second moments, same layout,
//! * `config`: the run config in canonical form,
//! * `loss.csv`: the loss log up to the checkpointed step.
//!
//! The manifest is written last, so a directory without one is incomplete.

use std::path::Path;

use crate::harness::config::{parse_entries, TrainConfig};
use crate::harness::log::LossLog;
use crate::harness::optim::Moments;
use crate::model::ModelParams;
use crate::sampler::RNG_ALGORITHM;
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const CONFIG_FILE: &str = "config";
pub const LOSS_FILE: &str = "loss.csv";

const FORMAT_VERSION: u32 = 1;

/// Complete training state after `step` finished steps.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ModelParams<T>,
    pub moments: Moments<T>,
    /// Word position of the data generator (seed and stream come from the config).
    pub data_word_pos: u128,
    pub log: LossLog,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        }
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write(PARAMS_FILE, &encode(self.params.tensors().iter().map(|t| t.data())))?;
        write(
            OPTIMIZER_FILE,
            &encode(self.moments.first.iter().chain(&self.moments.second).map(Vec::as_slice)),
        )?;
        write(CONFIG_FILE, self.config.to_text().as_bytes())?;
        write(LOSS_FILE, self.log.to_csv().as_bytes())?;
        write(MANIFEST_FILE, self.manifest().as_bytes())
    }

    fn manifest(&self) -> String {
        let lines = [
            ("format", FORMAT_VERSION.to_string()),
            ("config_hash", self.config.hash()),
            ("step", self.step.to_string()),
            ("precision", T::NAME.to_string()),
            ("num_scalars", self.params.num_scalars().to_string()),
            ("rng", RNG_ALGORITHM.to_string()),
            ("data.seed", self.config.seed.to_string()),
            ("data.stream", self.config.data_stream.to_string()),
            ("data.word_pos", self.data_word_pos.to_string()),
            ("sampler.seed", self.config.seed.to_string()),
            ("sampler.stream", self.config.sampler_stream.to_string()),
            ("sampler.next_step", (self.step + 1).to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let origin = manifest_path.display().to_string();
        let manifest = String::from_utf8(read(MANIFEST_FILE)?)
            .map_err(|_| corrupt(&origin, "manifest is not UTF-8"))?;
        let entries = parse_entries(&manifest, &origin)?;
        let get = |key: &str| {
            entries
                .get(key)
                .map(|(v, _)| v.as_str())
                .ok_or_else(|| corrupt(&origin, &format!("missing `{key}`")))
        };
        let num = |key: &str| -> Result<u128> {
            get(key)?
                .parse()
                .map_err(|e| corrupt(&origin, &format!("`{key}`: {e}")))
        };
        if num("format")? != FORMAT_VERSION as u128 {
            return Err(corrupt(&origin, "unsupported checkpoint format"));
        }
        if get("precision")? != T::NAME {
            return Err(corrupt(
                &origin,
                &format!("checkpoint holds {} parameters, this build uses {}", get("precision")?, T::NAME),
            ));
        }
        if get("rng")? != RNG_ALGORITHM {
            return Err(corrupt(&origin, "unknown generator"));
        }

        let config_path = dir.join(CONFIG_FILE);
        let config_text = String::from_utf8(read(CONFIG_FILE)?)
            .map_err(|_| corrupt(&origin, "config is not UTF-8"))?;
        // stored data paths are already resolved
        let config = TrainConfig::parse(&config_text, &config_path.display().to_string(), Path::new(""))?;
        if config.hash() != get("config_hash")? {
            return Err(corrupt(&origin, "config does not match its recorded hash"));
        }
        let step = num("step")? as u64;
        if num("sampler.next_step")? != step as u128 + 1
            || num("data.seed")? != config.seed as u128
            || num("sampler.seed")? != config.seed as u128
            || num("data.stream")? != config.data_stream as u128
            || num("sampler.stream")? != config.sampler_stream as u128
        {
            return Err(corrupt(&origin, "RNG state disagrees with the config"));
        }

        let mut params = ModelParams::<T>::init(config.model, 0)?;
        let n = params.num_scalars();
        if num("num_scalars")? != n as u128 {
            return Err(corrupt(&origin, "parameter count does not match the model"));
        }
        let flat = decode::<T>(&read(PARAMS_FILE)?, n, &dir.join(PARAMS_FILE))?;
        params.assign_flat(&flat)?;
        let moment_flat = decode::<T>(&read(OPTIMIZER_FILE)?, 2 * n, &dir.join(OPTIMIZER_FILE))?;
        let mut moments = Moments::zeros_like(params.tensors());
        let mut offset = 0;
        for buf in moments.first.iter_mut().chain(moments.second.iter_mut()) {
            let len = buf.len();
            buf.copy_from_slice(&moment_flat[offset..offset + len]);
            offset += len;
        }

        let log_path = dir.join(LOSS_FILE);
        let log = LossLog::read(&log_path)?;
        if log.last().map_or(0, |r| r.step) != step {
            return Err(corrupt(&origin, "loss log does not end at the checkpointed step"));
        }
        Ok(Self {
            config,
            step,
            params,
            moments,
            data_word_pos: num("data.word_pos")?,
            log,
        })
    }
}

fn corrupt(origin: &str, msg: &str) -> Error {
    Error::Config {
        path: origin.to_string(),
        msg: format!("corrupt checkpoint: {msg}"),
    }
}

fn encode<'a, T: Scalar>(chunks: impl Iterator<Item = &'a [T]>) -> Vec<u8> {
    let mut out = Vec::new();
    for chunk in chunks {
        out.reserve(chunk.len() * T::BYTES);
        for &v in chunk {
            v.write_le(&mut out);
        }
    }
    out
}

fn decode<T: Scalar>(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<T>> {
    if bytes.len() != expected * T::BYTES {
        return Err(corrupt(
            &path.display().to_string(),
            &format!("{} bytes, expected {}", bytes.len(), expected * T::BYTES),
        ));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}
