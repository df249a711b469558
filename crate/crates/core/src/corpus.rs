//! ATIS-style corpora: IOB-tagged utterances with one intent label each.
//!
//! Two on-disk formats are understood. The native format is line-oriented
//! UTF-8: records separated by one blank line, first line
//! `#intent<TAB><label>`, then one `<token><TAB><tag>` line per token. The
//! CTF format is the CNTK-style distribution of ATIS, converted on ingest
//! (BOS/EOS sentinels dropped).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding index in token and char maps.
pub const PAD_ID: usize = 0;
/// Reserved unknown index in token and char maps.
pub const UNK_ID: usize = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// One tokenized utterance with aligned IOB tags and an intent label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: u32,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An ordered collection of utterances with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Native,
    Ctf,
}

/// Checks one IOB tag: `O`, or `B-<type>`/`I-<type>` with a non-empty type.
fn check_tag(tag: &str) -> std::result::Result<(), String> {
    if tag == "O" {
        return Ok(());
    }
    if let Some(ty) = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")) {
        if ty.is_empty() {
            return Err(format!("tag {tag:?} has an empty type"));
        }
        return Ok(());
    }
    Err(format!(
        "malformed tag {tag:?} (expected O, B-<type> or I-<type>)"
    ))
}

/// Validates IOB tag syntax without rewriting anything.
///
/// Leading or dangling `I-` tags (at sequence start, after `O`, or after a
/// different type) are accepted; span decoding treats them as span starts,
/// following conlleval.
pub fn validate_iob(tags: &[String]) -> Result<Vec<String>> {
    for tag in tags {
        check_tag(tag).map_err(Error::Invalid)?;
    }
    Ok(tags.to_vec())
}

fn finish_record(
    line: usize,
    tokens: Vec<String>,
    tags: Vec<String>,
    intent: Option<String>,
    out: &mut Vec<Utterance>,
) -> Result<()> {
    let intent = intent.ok_or_else(|| Error::parse(line, "record has no intent line"))?;
    if tokens.is_empty() {
        return Err(Error::parse(line, "empty utterance"));
    }
    debug_assert_eq!(tokens.len(), tags.len());
    out.push(Utterance {
        id: out.len() as u32,
        tokens,
        tags,
        intent,
    });
    Ok(())
}

fn parse_native<R: BufRead>(reader: R, name: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut intent: Option<String> = None;
    let mut in_record = false;
    let mut line_no = 0;

    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        if line.is_empty() {
            if in_record {
                finish_record(
                    line_no,
                    std::mem::take(&mut tokens),
                    std::mem::take(&mut tags),
                    intent.take(),
                    &mut utterances,
                )?;
                in_record = false;
            }
            continue;
        }
        in_record = true;
        let (left, right) = line.split_once('\t').ok_or_else(|| {
            Error::parse(line_no, format!("expected <field>\\t<value>: {line:?}"))
        })?;
        if left == "#intent" {
            if intent.is_some() || !tokens.is_empty() {
                return Err(Error::parse(line_no, "intent line not at start of record"));
            }
            if right.is_empty() {
                return Err(Error::parse(line_no, "empty intent label"));
            }
            intent = Some(right.to_string());
        } else {
            if left.is_empty() {
                return Err(Error::parse(line_no, "empty token"));
            }
            check_tag(right).map_err(|m| Error::parse(line_no, m))?;
            tokens.push(left.to_string());
            tags.push(right.to_string());
        }
    }
    if in_record {
        finish_record(line_no + 1, tokens, tags, intent, &mut utterances)?;
    }
    if utterances.is_empty() {
        return Err(Error::Invalid("no utterances".into()));
    }
    Ok(Corpus {
        name: name.to_string(),
        utterances,
    })
}

/// One CTF line: sequence id plus the `|#` comments of the S0/S1/S2 fields.
struct CtfLine {
    seq: u64,
    word: Option<String>,
    intent: Option<String>,
    tag: Option<String>,
}

fn parse_ctf_line(line_no: usize, line: &str) -> Result<CtfLine> {
    let mut parts = line.split('|');
    let seq_part = parts.next().unwrap_or("").trim();
    let seq: u64 = seq_part
        .parse()
        .map_err(|_| Error::parse(line_no, format!("missing numeric sequence id: {line:?}")))?;

    let mut word = None;
    let mut intent = None;
    let mut tag = None;
    // Field comments arrive as a separate '|#'-delimited segment following
    // the field they annotate.
    let mut pending: Option<u8> = None;
    for part in parts {
        let part = part.trim_end();
        if let Some(comment) = part.strip_prefix('#') {
            let value = comment.trim();
            match pending.take() {
                Some(0) => word = Some(value.to_string()),
                Some(1) => intent = Some(value.to_string()),
                Some(2) => tag = Some(value.to_string()),
                _ => {}
            }
            continue;
        }
        let field = part.split_whitespace().next().unwrap_or("");
        pending = match field {
            "S0" => Some(0),
            "S1" => Some(1),
            "S2" => Some(2),
            _ => None,
        };
    }
    Ok(CtfLine {
        seq,
        word,
        intent,
        tag,
    })
}

fn parse_ctf<R: BufRead>(reader: R, name: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut intent: Option<String> = None;
    let mut current_seq: Option<u64> = None;
    let mut line_no = 0;

    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_ctf_line(line_no, &line)?;
        if current_seq.is_some() && current_seq != Some(parsed.seq) {
            finish_record(
                line_no,
                std::mem::take(&mut tokens),
                std::mem::take(&mut tags),
                intent.take(),
                &mut utterances,
            )?;
        }
        current_seq = Some(parsed.seq);
        if let Some(label) = parsed.intent {
            intent.get_or_insert(label);
        }
        let word = parsed
            .word
            .ok_or_else(|| Error::parse(line_no, "line has no S0 word comment"))?;
        let tag = parsed
            .tag
            .ok_or_else(|| Error::parse(line_no, "line has no S2 slot comment"))?;
        if word == "BOS" || word == "EOS" {
            continue;
        }
        if word.is_empty() {
            return Err(Error::parse(line_no, "empty token"));
        }
        check_tag(&tag).map_err(|m| Error::parse(line_no, m))?;
        tokens.push(word);
        tags.push(tag);
    }
    if current_seq.is_some() {
        finish_record(line_no + 1, tokens, tags, intent, &mut utterances)?;
    }
    if utterances.is_empty() {
        return Err(Error::Invalid("no utterances".into()));
    }
    Ok(Corpus {
        name: name.to_string(),
        utterances,
    })
}

/// Parses a corpus from a UTF-8 stream. Utterance ids are assigned
/// `0..n-1` in file order for both formats.
pub fn parse_corpus<R: BufRead>(reader: R, format: CorpusFormat, name: &str) -> Result<Corpus> {
    match format {
        CorpusFormat::Native => parse_native(reader, name),
        CorpusFormat::Ctf => parse_ctf(reader, name),
    }
}

/// Serializes a corpus in the native format. Round-trips through
/// [`parse_corpus`] up to utterance id renumbering (ids are positional).
pub fn write_native<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    for (i, utt) in corpus.utterances.iter().enumerate() {
        if i > 0 {
            writeln!(writer)?;
        }
        writeln!(writer, "#intent\t{}", utt.intent)?;
        for (token, tag) in utt.tokens.iter().zip(&utt.tags) {
            writeln!(writer, "{token}\t{tag}")?;
        }
    }
    Ok(())
}

/// A bijective label ↔ dense-index map, in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Lexicon {
    items: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Lexicon {
    fn new() -> Self {
        Lexicon {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.items.len();
        self.items.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn get(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

impl From<Vec<String>> for Lexicon {
    fn from(items: Vec<String>) -> Self {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Lexicon { items, index }
    }
}

impl From<Lexicon> for Vec<String> {
    fn from(lex: Lexicon) -> Self {
        lex.items
    }
}

/// Character ↔ dense-index map with reserved pad (0) and unknown (1) slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharLexicon {
    items: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

// Placeholder characters occupying the reserved slots; never produced by
// `id` lookups.
const PAD_CHAR: char = '\u{0}';
const UNK_CHAR: char = '\u{fffd}';

impl CharLexicon {
    fn new() -> Self {
        CharLexicon {
            items: vec![PAD_CHAR, UNK_CHAR],
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, c: char) -> usize {
        if c == PAD_CHAR || c == UNK_CHAR {
            return UNK_ID;
        }
        if let Some(&id) = self.index.get(&c) {
            return id;
        }
        let id = self.items.len();
        self.items.push(c);
        self.index.insert(c, id);
        id
    }

    /// Index of `c`, or [`UNK_ID`] for characters outside the map.
    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<Vec<char>> for CharLexicon {
    fn from(items: Vec<char>) -> Self {
        let index = items
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, &c)| (c, i))
            .collect();
        CharLexicon { items, index }
    }
}

impl From<CharLexicon> for Vec<char> {
    fn from(lex: CharLexicon) -> Self {
        lex.items
    }
}

/// Index maps for tokens, characters, slot labels, and intent labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: Lexicon,
    pub chars: CharLexicon,
    pub slots: Lexicon,
    pub intents: Lexicon,
}

/// Builds all vocabularies from training data only, in first-occurrence
/// order. Token and char maps reserve pad (0) and unknown (1); the slot map
/// always contains `O`.
pub fn build_vocabularies(train: &Corpus) -> Vocabularies {
    let mut tokens = Lexicon::new();
    tokens.insert(PAD_TOKEN);
    tokens.insert(UNK_TOKEN);
    let mut chars = CharLexicon::new();
    let mut slots = Lexicon::new();
    slots.insert("O");
    let mut intents = Lexicon::new();

    for utt in &train.utterances {
        for token in &utt.tokens {
            tokens.insert(token);
            for c in token.chars() {
                chars.insert(c);
            }
        }
        for tag in &utt.tags {
            slots.insert(tag);
        }
        intents.insert(&utt.intent);
    }
    Vocabularies {
        tokens,
        chars,
        slots,
        intents,
    }
}

/// Splits off a validation set of `round(fraction * n)` utterances using a
/// seeded shuffle. Both sides keep their original ids and file order.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "validation fraction must be in (0,1), got {fraction}"
        )));
    }
    let n = corpus.len();
    let val_count = (fraction * n as f64).round() as usize;
    if val_count == 0 {
        return Err(Error::Invalid(format!(
            "validation fraction {fraction} of {n} utterances rounds to zero"
        )));
    }
    if val_count >= n {
        return Err(Error::Invalid(format!(
            "validation fraction {fraction} leaves no training data"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let chosen: HashSet<usize> = order[..val_count].iter().copied().collect();

    let mut train = Vec::with_capacity(n - val_count);
    let mut val = Vec::with_capacity(val_count);
    for (i, utt) in corpus.utterances.iter().enumerate() {
        if chosen.contains(&i) {
            val.push(utt.clone());
        } else {
            train.push(utt.clone());
        }
    }
    Ok((
        Corpus {
            name: format!("{}-train", corpus.name),
            utterances: train,
        },
        Corpus {
            name: format!("{}-val", corpus.name),
            utterances: val,
        },
    ))
}
