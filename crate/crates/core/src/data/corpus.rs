use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Turns text into token ids.
pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn id(&self) -> &str {
        "byte"
    }

    fn vocab_size(&self) -> usize {
        256
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

/// A tokenized corpus and the digest that identifies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub tokens: Vec<u32>,
    pub source_digest: String,
    pub tokenizer_id: String,
}

impl TokenCorpus {
    pub fn from_tokens(tokens: Vec<u32>, tokenizer_id: &str) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("corpus".into()));
        }
        let mut h = Sha256::new();
        h.update(tokenizer_id.as_bytes());
        h.update([0u8]);
        for t in &tokens {
            h.update(t.to_le_bytes());
        }
        Ok(TokenCorpus {
            tokens,
            source_digest: hex::encode(h.finalize()),
            tokenizer_id: tokenizer_id.to_string(),
        })
    }

    pub fn from_text(text: &str, tokenizer: &dyn Tokenizer) -> Result<Self> {
        Self::from_tokens(tokenizer.encode(text), tokenizer.id())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

const TOKENS_MAGIC: &[u8; 8] = b"CDLTOKS\n";

/// Pre-tokenized binary: magic, `u32` version (1), `u32` tokenizer id
/// length, tokenizer id bytes, `u64` count, then `u32` LE ids.
pub fn write_pretokenized(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    let mut out = Vec::with_capacity(24 + corpus.tokenizer_id.len() + 4 * corpus.len());
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(corpus.tokenizer_id.len() as u32).to_le_bytes());
    out.extend_from_slice(corpus.tokenizer_id.as_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for t in &corpus.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pretokenized(bytes: &[u8]) -> Result<TokenCorpus> {
    let bad = |m: &str| Error::Format(format!("token file: {m}"));
    let u32_at = |i: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(bytes.get(i..i + 4).ok_or_else(|| bad("truncated"))?.try_into().unwrap()))
    };
    if u32_at(8)? != 1 {
        return Err(bad("unsupported version"));
    }
    let idlen = u32_at(12)? as usize;
    let id = std::str::from_utf8(bytes.get(16..16 + idlen).ok_or_else(|| bad("truncated"))?)
        .map_err(|_| bad("tokenizer id is not UTF-8"))?;
    let c = 16 + idlen;
    let count = u64::from_le_bytes(bytes.get(c..c + 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
    let data = &bytes[c + 8..];
    if data.len() != 4 * count {
        return Err(bad("token count disagrees with file size"));
    }
    let tokens = data
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    TokenCorpus::from_tokens(tokens, id)
}

/// Load UTF-8 text (a file, or every regular file of a directory in name
/// order) or a pre-tokenized binary.
pub fn load_corpus(path: &Path, tokenizer: &dyn Tokenizer) -> Result<TokenCorpus> {
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(path, e))?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    if files.is_empty() {
        return Err(Error::Empty(format!("no files under {}", path.display())));
    }
    let mut text = String::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        if bytes.starts_with(TOKENS_MAGIC) {
            if files.len() > 1 {
                return Err(Error::Format("pre-tokenized files must be loaded on their own".into()));
            }
            return read_pretokenized(&bytes);
        }
        let s = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8", f.display())))?;
        text.push_str(&s);
    }
    TokenCorpus::from_text(&text, tokenizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Fraction of the corpus (taken from the end) held out for validation.
    pub val_fraction: f64,
    /// Number of validation rows in the fixed evaluation subset.
    pub val_rows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            batch_size: 16,
            seq_len: 128,
            val_fraction: 0.1,
            val_rows: 64,
        }
    }
}

/// A corpus cut into fixed training batches and a fixed validation subset.
///
/// Training batch `i` always holds the same tokens: rows
/// `i*batch_size .. (i+1)*batch_size` of `seq_len + 1` consecutive tokens
/// from the training range. Orders only change which index is visited when.
#[derive(Debug, Clone)]
pub struct Dataset {
    corpus: TokenCorpus,
    config: DataConfig,
    train_end: usize,
    val_batches: Vec<Batch>,
}

impl Dataset {
    pub fn new(corpus: TokenCorpus, config: DataConfig) -> Result<Self> {
        if config.batch_size == 0 || config.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        let n = corpus.len();
        let train_end = n - (n as f64 * config.val_fraction).floor() as usize;
        let width = config.seq_len + 1;
        let val = &corpus.tokens[train_end..];
        let avail = val.len() / width;
        let rows = config.val_rows.min(avail);
        let val_batches = (0..rows)
            .step_by(config.batch_size)
            .map(|r0| {
                let r1 = (r0 + config.batch_size).min(rows);
                Batch::new(r1 - r0, config.seq_len, val[r0 * width..r1 * width].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            corpus,
            config,
            train_end,
            val_batches,
        })
    }

    pub fn corpus(&self) -> &TokenCorpus {
        &self.corpus
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    /// Token ranges `(train, validation)`; disjoint by construction.
    pub fn ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (0..self.train_end, self.train_end..self.corpus.len())
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.config.batch_size * (self.config.seq_len + 1)
    }

    pub fn n_batches(&self) -> usize {
        self.train_end / self.tokens_per_batch()
    }

    pub fn batch(&self, index: usize) -> Result<Batch> {
        if index >= self.n_batches() {
            return Err(Error::Domain {
                value: index as f64,
                domain: "batch index < n_batches",
            });
        }
        let tpb = self.tokens_per_batch();
        Batch::new(
            self.config.batch_size,
            self.config.seq_len,
            self.corpus.tokens[index * tpb..(index + 1) * tpb].to_vec(),
        )
    }

    /// The fixed validation subset used by every evaluation.
    pub fn val_batches(&self) -> &[Batch] {
        &self.val_batches
    }

    /// Split batch indices `start..start + parts * len` into `parts`
    /// non-intersecting ranges of `len` batches.
    pub fn portions(&self, start: usize, len: usize, parts: usize) -> Result<Vec<std::ops::Range<usize>>> {
        let end = start + len * parts;
        if end > self.n_batches() {
            return Err(Error::Config(format!(
                "need batches up to {end}, corpus has {}",
                self.n_batches()
            )));
        }
        Ok((0..parts).map(|p| start + p * len..start + (p + 1) * len).collect())
    }
}
