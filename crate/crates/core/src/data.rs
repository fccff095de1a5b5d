//! Token streams, budget slicing and counter-based batch sampling.
//!
//! Token files are little-endian: the 6-byte magic `NLTK1\0`, a `u32`
//! vocabulary size, a `u64` token count, then that many `u16` ids.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 6] = b"NLTK1\0";
pub const TOKEN_HEADER_LEN: usize = 6 + 4 + 8;
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    #[serde(rename = "raw-bytes")]
    RawBytes,
    #[serde(rename = "u16")]
    U16Tokens,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-bytes" | "bytes" => Ok(Format::RawBytes),
            "u16" | "u16-token-file" => Ok(Format::U16Tokens),
            other => Err(Error::Config(format!(
                "unknown corpus format {other:?} (expected raw-bytes or u16)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::RawBytes => "raw-bytes",
            Format::U16Tokens => "u16",
        })
    }
}

/// An immutable sequence of token ids, each below `vocab_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    ids: Vec<u16>,
    vocab_size: usize,
    source: String,
}

impl TokenStream {
    pub fn from_ids(ids: Vec<u16>, vocab_size: usize, source: impl Into<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        if vocab_size == 0 || vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Data(format!("vocab size {vocab_size} does not fit u16 ids")));
        }
        if let Some((offset, id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {id} at offset {offset} is out of range for vocab {vocab_size}"
            )));
        }
        Ok(Self {
            ids,
            vocab_size,
            source: source.into(),
        })
    }

    pub fn from_bytes(bytes: &[u8], source: impl Into<String>) -> Result<Self> {
        Self::from_ids(bytes.iter().map(|&b| b as u16).collect(), BYTE_VOCAB, source)
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn total_tokens(&self) -> usize {
        self.ids.len()
    }
}

pub fn ingest(path: &Path, format: Format) -> Result<TokenStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match format {
        Format::RawBytes => TokenStream::from_bytes(&bytes, source),
        Format::U16Tokens => parse_token_file(&bytes, source),
    }
}

fn parse_token_file(bytes: &[u8], source: String) -> Result<TokenStream> {
    if bytes.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if bytes.len() < TOKEN_HEADER_LEN || &bytes[..6] != TOKEN_MAGIC {
        return Err(Error::Data("not a token file (bad magic or short header)".into()));
    }
    let vocab = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let body = &bytes[TOKEN_HEADER_LEN..];
    if body.len() != count * 2 {
        return Err(Error::Data(format!(
            "header declares {count} tokens but the body holds {} bytes",
            body.len()
        )));
    }
    let ids = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    TokenStream::from_ids(ids, vocab, source)
}

pub fn write_token_file(path: &Path, stream: &TokenStream) -> Result<()> {
    let mut out = Vec::with_capacity(TOKEN_HEADER_LEN + 2 * stream.ids.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(stream.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(stream.ids.len() as u64).to_le_bytes());
    for id in &stream.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBudget {
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub seed: u64,
}

/// Contiguous slice of a stream used for training or validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    ids: Vec<u16>,
    vocab_size: usize,
}

impl Split {
    pub fn new(ids: Vec<u16>, vocab_size: usize) -> Self {
        Self { ids, vocab_size }
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Hex SHA-256 of the little-endian ids.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Train is the first `train_tokens` of the stream; validation is the last
/// `val_tokens`, so every budget drawn from one stream shares it.
pub fn subset(stream: &TokenStream, budget: &DataBudget) -> Result<(Split, Split)> {
    let total = stream.total_tokens();
    let need = budget.train_tokens.checked_add(budget.val_tokens);
    if need.is_none_or(|n| n > total) {
        return Err(Error::Data(format!(
            "budget of {} train + {} val tokens exceeds the {total} available",
            budget.train_tokens, budget.val_tokens
        )));
    }
    if budget.train_tokens == 0 || budget.val_tokens == 0 {
        return Err(Error::Data("train and val budgets must be positive".into()));
    }
    let train = Split::new(stream.ids[..budget.train_tokens].to_vec(), stream.vocab_size);
    let val = Split::new(stream.ids[total - budget.val_tokens..].to_vec(), stream.vocab_size);
    Ok((train, val))
}

/// `batch` windows of `seq + 1` tokens, split into inputs and shifted targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub offsets: Vec<usize>,
}

/// Uniform random windows; a pure function of `(seed, step)`.
pub fn batches(split: &Split, batch_size: usize, block_size: usize, seed: u64, step: u64) -> Result<Batch> {
    if batch_size == 0 || block_size == 0 {
        return Err(Error::Data("batch and block sizes must be positive".into()));
    }
    if block_size >= split.len() {
        return Err(Error::Data(format!(
            "block size {block_size} needs a split longer than {} tokens",
            split.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let span = split.len() - block_size;
    let mut b = Batch {
        batch: batch_size,
        seq: block_size,
        inputs: Vec::with_capacity(batch_size * block_size),
        targets: Vec::with_capacity(batch_size * block_size),
        offsets: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let o = rng.random_range(0..span);
        let w = &split.ids[o..o + block_size + 1];
        b.inputs.extend(w[..block_size].iter().map(|&t| t as usize));
        b.targets.extend(w[1..].iter().map(|&t| t as usize));
        b.offsets.push(o);
    }
    Ok(b)
}

/// Deterministic English-like byte corpus: a Zipf-weighted lexicon of
/// pseudo-words chained by a sparse bigram table into sentences. Big enough
/// budgets can be carved from it without downloading anything.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const WORDS: usize = 3000;
    const FOLLOWERS: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onsets = [
        "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "pl", "ch", "sh", "th",
        "gr", "br", "",
    ];
    let vowels = ["a", "e", "i", "o", "u", "ea", "ou", "ai", "io"];
    let codas = ["", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng", "rk"];
    let lexicon: Vec<String> = (0..WORDS)
        .map(|_| {
            let syllables = 1 + (rng.random::<f64>() * rng.random::<f64>() * 4.0) as usize;
            (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        onsets[rng.random_range(0..onsets.len())],
                        vowels[rng.random_range(0..vowels.len())],
                        codas[rng.random_range(0..codas.len())]
                    )
                })
                .collect()
        })
        .collect();
    let zipf: Vec<f64> = (0..WORDS).map(|r| 1.0 / (r as f64 + 2.7)).collect();
    let unigram = WeightedIndex::new(&zipf).expect("positive weights");
    let successors: Vec<Vec<usize>> = (0..WORDS)
        .map(|_| (0..FOLLOWERS).map(|_| unigram.sample(&mut rng)).collect())
        .collect();
    let follow_w: Vec<f64> = (0..FOLLOWERS).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let follow = WeightedIndex::new(&follow_w).expect("positive weights");

    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = unigram.sample(&mut rng);
    let mut sentence_len = 0usize;
    while out.len() < n_bytes {
        let word = if rng.random::<f64>() < 0.75 {
            successors[prev][follow.sample(&mut rng)]
        } else {
            unigram.sample(&mut rng)
        };
        let text = &lexicon[word];
        if sentence_len == 0 {
            let mut chars = text.chars();
            if let Some(c) = chars.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(chars.as_str().bytes());
            }
        } else {
            out.extend(text.bytes());
        }
        sentence_len += 1;
        prev = word;
        if sentence_len > 4 && rng.random::<f64>() < 0.12 {
            out.extend_from_slice(if rng.random::<f64>() < 0.1 { b".\n" } else { b". " });
            sentence_len = 0;
        } else if rng.random::<f64>() < 0.06 {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
    }
    out.truncate(n_bytes);
    out
}
