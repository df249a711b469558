//! Intent accuracy and entity-level (conlleval-style) precision/recall/F1.
//!
//! The headline slot metric is span-exact micro-averaged F1: a predicted
//! span counts iff an identical (type, start, end) span exists in the gold
//! tags of the same utterance. A token-level F1 over non-`O` tags is also
//! reported, clearly labeled, since some papers score at token granularity.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Model, WordSource};

/// A typed token span, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

fn split_tag(tag: &str) -> (char, &str) {
    if tag == "O" {
        return ('O', "");
    }
    match tag.split_once('-') {
        Some(("B", ty)) => ('B', ty),
        Some(("I", ty)) => ('I', ty),
        _ => ('O', ""),
    }
}

/// Decodes IOB tags into spans with conlleval semantics: a span starts at
/// `B-X`, or at `I-X` when preceded by `O`, the sequence start, or a
/// different type; it ends before `O`, any `B-`, or an `I-` of a different
/// type.
pub fn decode_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = split_tag(tag);
        let continues = matches!(
            (&open, prefix),
            (Some((current, _)), 'I') if current == ty
        );
        if !continues {
            if let Some((label, start)) = open.take() {
                spans.push(Span {
                    label,
                    start,
                    end: i - 1,
                });
            }
            if prefix == 'B' || prefix == 'I' {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((label, start)) = open {
        spans.push(Span {
            label,
            start,
            end: tags.len() - 1,
        });
    }
    spans
}

/// Re-encodes non-overlapping spans as IOB tags over `len` tokens.
pub fn encode_spans(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for span in spans {
        tags[span.start] = format!("B-{}", span.label);
        for tag in tags.iter_mut().take(span.end + 1).skip(span.start + 1) {
            *tag = format!("I-{}", span.label);
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PrfCounts {
    pub gold_spans: usize,
    pub pred_spans: usize,
    pub matched: usize,
}

fn prf(matched: usize, pred: usize, gold: usize) -> (f64, f64, f64) {
    let precision = if pred == 0 {
        0.0
    } else {
        matched as f64 / pred as f64
    };
    let recall = if gold == 0 {
        0.0
    } else {
        matched as f64 / gold as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub pred: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Token-level F1 over non-`O` positions; not the headline number.
    pub token_f1: f64,
    pub per_type: BTreeMap<String, TypeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub intent_accuracy: f64,
    pub slot: SlotMetrics,
    pub counts: ReportCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCounts {
    pub utterances: usize,
    pub gold_spans: usize,
    pub pred_spans: usize,
    pub matched: usize,
    pub intent_correct: usize,
}

/// Span-exact micro-averaged precision/recall/F1 over aligned tag
/// sequences, with a per-type breakdown.
pub fn entity_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<(SlotMetrics, PrfCounts)> {
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "entity_f1: {} predicted sequences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut counts = PrfCounts::default();
    let mut by_type: BTreeMap<String, PrfCounts> = BTreeMap::new();
    let mut token_gold = 0usize;
    let mut token_pred = 0usize;
    let mut token_matched = 0usize;

    for (p_tags, g_tags) in pred.iter().zip(gold) {
        if p_tags.len() != g_tags.len() {
            return Err(Error::Invalid(format!(
                "entity_f1: sequence lengths differ ({} vs {})",
                p_tags.len(),
                g_tags.len()
            )));
        }
        let p_spans = decode_spans(p_tags);
        let g_spans = decode_spans(g_tags);
        counts.pred_spans += p_spans.len();
        counts.gold_spans += g_spans.len();
        for span in &p_spans {
            by_type.entry(span.label.clone()).or_default().pred_spans += 1;
        }
        for span in &g_spans {
            by_type.entry(span.label.clone()).or_default().gold_spans += 1;
        }
        for span in &p_spans {
            if g_spans.contains(span) {
                counts.matched += 1;
                by_type.entry(span.label.clone()).or_default().matched += 1;
            }
        }
        for (p, g) in p_tags.iter().zip(g_tags) {
            if p != "O" {
                token_pred += 1;
            }
            if g != "O" {
                token_gold += 1;
            }
            if p == g && p != "O" {
                token_matched += 1;
            }
        }
    }

    let (precision, recall, f1) = prf(counts.matched, counts.pred_spans, counts.gold_spans);
    let (_, _, token_f1) = prf(token_matched, token_pred, token_gold);
    let per_type = by_type
        .into_iter()
        .map(|(label, c)| {
            let (precision, recall, f1) = prf(c.matched, c.pred_spans, c.gold_spans);
            (
                label,
                TypeMetrics {
                    precision,
                    recall,
                    f1,
                    gold: c.gold_spans,
                    pred: c.pred_spans,
                    matched: c.matched,
                },
            )
        })
        .collect();
    Ok((
        SlotMetrics {
            precision,
            recall,
            f1,
            token_f1,
            per_type,
        },
        counts,
    ))
}

/// Fraction of matching labels.
pub fn intent_accuracy(pred: &[String], gold: &[String]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "intent_accuracy: {} predictions vs {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let matched = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(matched as f64 / pred.len() as f64)
}

/// Runs the model over a corpus in eval mode and aggregates both metrics.
/// Gold labels outside the model's vocabulary are unpredictable and count
/// as automatic misses.
pub fn evaluate<S: crate::autodiff::Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    source: &WordSource,
) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty corpus".into()));
    }
    let mut pred_tags = Vec::with_capacity(corpus.len());
    let mut gold_tags = Vec::with_capacity(corpus.len());
    let mut pred_intents = Vec::with_capacity(corpus.len());
    let mut gold_intents = Vec::with_capacity(corpus.len());
    for utt in &corpus.utterances {
        let (tags, intent) = model.predict_tags(&utt.tokens, utt.id, source)?;
        pred_tags.push(tags);
        gold_tags.push(utt.tags.clone());
        pred_intents.push(intent);
        gold_intents.push(utt.intent.clone());
    }
    let accuracy = intent_accuracy(&pred_intents, &gold_intents)?;
    let (slot, counts) = entity_f1(&pred_tags, &gold_tags)?;
    let intent_correct = pred_intents
        .iter()
        .zip(&gold_intents)
        .filter(|(p, g)| p == g)
        .count();
    Ok(MetricsReport {
        intent_accuracy: accuracy,
        slot,
        counts: ReportCounts {
            utterances: corpus.len(),
            gold_spans: counts.gold_spans,
            pred_spans: counts.pred_spans,
            matched: counts.matched,
            intent_correct,
        },
    })
}
