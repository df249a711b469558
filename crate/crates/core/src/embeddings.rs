//! Frozen word vectors: GloVe/fastText-style text tables and precomputed
//! contextual vectors keyed by (utterance id, token position).
//!
//! Embeddings are inputs, never parameters: nothing in this module is
//! touched by training.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// A frozen token → vector table loaded from a text file.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    source_name: String,
    entries: HashMap<String, Vec<f32>>,
    duplicates: usize,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    /// Number of duplicate tokens encountered at load (last occurrence won).
    pub fn duplicate_count(&self) -> usize {
        self.duplicates
    }

    /// Builds a table from in-memory entries; all vectors must share `dim`.
    pub fn from_entries(
        source_name: &str,
        dim: usize,
        entries: HashMap<String, Vec<f32>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dim must be >= 1".into()));
        }
        for (token, v) in &entries {
            if v.len() != dim {
                return Err(Error::Invalid(format!(
                    "vector for {token:?} has {} components, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(EmbeddingTable {
            dim,
            source_name: source_name.to_string(),
            entries,
            duplicates: 0,
        })
    }

    /// Resolves a token: exact match, else lowercased match, else a zero
    /// vector with the OOV flag set. Returned vectors are never modified.
    pub fn lookup(&self, token: &str) -> (Cow<'_, [f32]>, bool) {
        if let Some(v) = self.entries.get(token) {
            return (Cow::Borrowed(v), false);
        }
        let lower = token.to_lowercase();
        if lower != token {
            if let Some(v) = self.entries.get(&lower) {
                return (Cow::Borrowed(v), false);
            }
        }
        (Cow::Owned(vec![0.0; self.dim]), true)
    }

    /// FNV-1a over the table contents in sorted-token order; used to verify
    /// that training leaves embeddings untouched.
    pub fn checksum(&self) -> u64 {
        let mut tokens: Vec<&String> = self.entries.keys().collect();
        tokens.sort();
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for token in tokens {
            eat(token.as_bytes());
            for v in &self.entries[token] {
                eat(&v.to_le_bytes());
            }
        }
        hash
    }
}

/// True when a first line looks like a fastText header: exactly two
/// whitespace-separated fields, both non-negative integers.
fn is_fasttext_header(line: &str) -> bool {
    let fields: Vec<&str> = line.split_whitespace().collect();
    fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok())
}

/// Loads a `<token> <v1> ... <vD>` text table. An optional fastText count/dim
/// header on the first line is auto-detected and skipped. The dimension is
/// inferred from the first data line and enforced thereafter; duplicate
/// tokens keep the last occurrence.
pub fn load_embedding_text<R: BufRead>(
    reader: R,
    expected_dim: Option<usize>,
    source_name: &str,
) -> Result<EmbeddingTable> {
    let mut entries: HashMap<String, Vec<f32>> = HashMap::new();
    let mut dim: Option<usize> = expected_dim;
    let mut duplicates = 0;
    let mut first = true;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if is_fasttext_header(&line) {
                continue;
            }
        }
        let mut fields = line.split_whitespace();
        let token = fields
            .next()
            .ok_or_else(|| Error::parse(line_no, "empty line"))?;
        let mut vector = Vec::with_capacity(dim.unwrap_or(0));
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric component {field:?}")))?;
            vector.push(v);
        }
        match dim {
            None => {
                if vector.is_empty() {
                    return Err(Error::parse(line_no, "line has no vector components"));
                }
                dim = Some(vector.len());
            }
            Some(d) => {
                if vector.len() != d {
                    return Err(Error::parse(
                        line_no,
                        format!("expected {d} components, found {}", vector.len()),
                    ));
                }
            }
        }
        if entries.insert(token.to_string(), vector).is_some() {
            duplicates += 1;
        }
    }
    let dim = dim.ok_or_else(|| Error::Invalid("embedding file has no data lines".into()))?;
    Ok(EmbeddingTable {
        dim,
        source_name: source_name.to_string(),
        entries,
        duplicates,
    })
}

/// Precomputed contextual vectors, keyed by (utterance id, token position).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualStore {
    dim: usize,
    entries: HashMap<(u32, u16), Vec<f32>>,
}

const CTX_MAGIC: &[u8; 4] = b"CTXV";
const CTX_VERSION: u8 = 1;

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, utterance: u32, position: u16, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Invalid(format!(
                "contextual vector has {} components, expected {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.insert((utterance, position), vector);
        Ok(())
    }

    pub fn remove(&mut self, utterance: u32, position: u16) {
        self.entries.remove(&(utterance, position));
    }

    /// Exact lookup; a missing key is an error because contextual vectors
    /// must cover the corpus they are used with.
    pub fn get(&self, utterance: u32, position: u16) -> Result<&[f32]> {
        self.entries
            .get(&(utterance, position))
            .map(|v| v.as_slice())
            .ok_or(Error::MissingContextual {
                utterance,
                position,
            })
    }
}

/// Reads the binary keyed-vector format: magic `CTXV`, version byte, dim as
/// u32 LE, count as u64 LE, then `count` records of
/// `{utterance: u32 LE, position: u16 LE, dim × f32 LE}`.
pub fn load_contextual<R: Read>(mut reader: R) -> Result<ContextualStore> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != CTX_MAGIC {
        return Err(Error::Invalid("not a contextual store (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    reader.read_exact(&mut version)?;
    if version[0] != CTX_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported contextual store version {}",
            version[0]
        )));
    }
    let mut buf4 = [0u8; 4];
    reader.read_exact(&mut buf4)?;
    let dim = u32::from_le_bytes(buf4) as usize;
    if dim == 0 {
        return Err(Error::Invalid("contextual store dim is zero".into()));
    }
    let mut buf8 = [0u8; 8];
    reader.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8);

    let mut store = ContextualStore::new(dim);
    let mut buf2 = [0u8; 2];
    for _ in 0..count {
        reader.read_exact(&mut buf4).map_err(truncated)?;
        let utterance = u32::from_le_bytes(buf4);
        reader.read_exact(&mut buf2).map_err(truncated)?;
        let position = u16::from_le_bytes(buf2);
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            reader.read_exact(&mut buf4).map_err(truncated)?;
            vector.push(f32::from_le_bytes(buf4));
        }
        store.entries.insert((utterance, position), vector);
    }
    Ok(store)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Invalid("truncated contextual store".into())
    } else {
        Error::Io(e)
    }
}

/// Writes the store in the binary keyed-vector format, records sorted by key
/// so identical stores serialize identically.
pub fn write_contextual<W: Write>(store: &ContextualStore, mut writer: W) -> Result<()> {
    writer.write_all(CTX_MAGIC)?;
    writer.write_all(&[CTX_VERSION])?;
    writer.write_all(&(store.dim as u32).to_le_bytes())?;
    writer.write_all(&(store.entries.len() as u64).to_le_bytes())?;
    let mut keys: Vec<&(u32, u16)> = store.entries.keys().collect();
    keys.sort();
    for key in keys {
        writer.write_all(&key.0.to_le_bytes())?;
        writer.write_all(&key.1.to_le_bytes())?;
        for v in &store.entries[key] {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Out-of-vocabulary coverage of a table over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct OovReport {
    /// Fraction of token occurrences that resolve to the zero vector.
    pub oov_rate: f64,
    /// Distinct OOV tokens, sorted.
    pub oov_tokens: Vec<String>,
}

pub fn oov_report(table: &EmbeddingTable, corpus: &Corpus) -> OovReport {
    let mut total = 0usize;
    let mut misses = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    for utt in &corpus.utterances {
        for token in &utt.tokens {
            total += 1;
            let (_, oov) = table.lookup(token);
            if oov {
                misses += 1;
                tokens.push(token.clone());
            }
        }
    }
    tokens.sort();
    tokens.dedup();
    OovReport {
        oov_rate: if total == 0 {
            0.0
        } else {
            misses as f64 / total as f64
        },
        oov_tokens: tokens,
    }
}
