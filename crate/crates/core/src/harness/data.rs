//! Corpus loading and batching.
//!
//! Raw text is tokenised byte by byte (vocabulary 256). Pre-tokenised corpora
//! use a small binary format: the magic bytes `ESTK1`, the vocabulary size as
//! a little-endian `u32`, the token count as a little-endian `u64`, then that
//! many little-endian `u16` token ids.

use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

pub const TOKEN_FILE_MAGIC: &[u8; 5] = b"ESTK1";
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u16>,
    pub vocab: usize,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Self::from_bytes(text.as_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            tokens: bytes.iter().map(|&b| b as u16).collect(),
            vocab: BYTE_VOCAB,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Byte-level corpora decode back to text (lossy for invalid UTF-8).
    pub fn to_text(&self) -> String {
        let bytes: Vec<u8> = self.tokens.iter().map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Splits off the trailing `fraction` as a held-out corpus.
    pub fn split_tail(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = self.len() - ((self.len() as f64 * fraction).round() as usize).min(self.len());
        (
            Corpus {
                tokens: self.tokens[..cut].to_vec(),
                vocab: self.vocab,
            },
            Corpus {
                tokens: self.tokens[cut..].to_vec(),
                vocab: self.vocab,
            },
        )
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        if self.vocab > vocab {
            return Err(Error::Corpus(format!(
                "corpus vocabulary {} exceeds model vocabulary {vocab}",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn check_len(&self, seq_len: usize) -> Result<()> {
        if self.len() < seq_len + 1 {
            return Err(Error::Corpus(format!(
                "corpus has {} tokens, at least {} are needed",
                self.len(),
                seq_len + 1
            )));
        }
        Ok(())
    }
}

/// Reads a token file (by magic) or raw bytes.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corpus = if bytes.starts_with(TOKEN_FILE_MAGIC) {
        decode_token_file(&bytes).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
    } else {
        Corpus::from_bytes(&bytes)
    };
    if corpus.is_empty() {
        return Err(Error::Corpus(format!("{} contains no tokens", path.display())));
    }
    Ok(corpus)
}

fn decode_token_file(bytes: &[u8]) -> std::result::Result<Corpus, String> {
    let header = TOKEN_FILE_MAGIC.len() + 4 + 8;
    if bytes.len() < header {
        return Err("truncated token file header".into());
    }
    let vocab = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = &bytes[header..];
    if body.len() != count * 2 {
        return Err(format!("expected {count} tokens, payload holds {} bytes", body.len()));
    }
    let tokens: Vec<u16> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some((pos, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
        return Err(format!("token {t} at position {pos} is outside vocabulary {vocab}"));
    }
    Ok(Corpus { tokens, vocab })
}

pub fn encode_token_file(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + corpus.len() * 2);
    out.extend_from_slice(TOKEN_FILE_MAGIC);
    out.extend_from_slice(&(corpus.vocab as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for t in &corpus.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// `batch_size` windows of `seq_len` inputs and their next-token targets,
/// both flattened row by row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    fn from_starts(corpus: &Corpus, starts: &[usize], seq_len: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            inputs.extend(corpus.tokens[s..s + seq_len].iter().map(|&t| t as usize));
            targets.extend(corpus.tokens[s + 1..s + seq_len + 1].iter().map(|&t| t as usize));
        }
        Self {
            inputs,
            targets,
            batch_size: starts.len(),
            seq_len,
        }
    }
}

/// Uniformly random windows.
pub fn next_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<Batch> {
    corpus.check_len(seq_len)?;
    let last_start = corpus.len() - seq_len - 1;
    let starts: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..=last_start))
        .collect();
    Ok(Batch::from_starts(corpus, &starts, seq_len))
}

/// Deterministic evaluation batches: windows at evenly spaced offsets
/// covering the corpus.
pub fn eval_batches(
    corpus: &Corpus,
    n_batches: usize,
    batch_size: usize,
    seq_len: usize,
) -> Result<Vec<Batch>> {
    corpus.check_len(seq_len)?;
    let last_start = corpus.len() - seq_len - 1;
    let windows = n_batches * batch_size;
    let starts: Vec<usize> = (0..windows)
        .map(|i| if windows == 1 { 0 } else { i * last_start / (windows - 1) })
        .collect();
    Ok(starts
        .chunks(batch_size)
        .map(|c| Batch::from_starts(corpus, c, seq_len))
        .collect())
}
