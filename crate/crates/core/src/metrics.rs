//! Accuracy and entity-level span F1.

use crate::corpus::{Corpus, GoldLabel, LabelVocab, Task};
use crate::error::{Error, Result};
use crate::models::ProbabilisticModel;

pub fn accuracy(pred: &[GoldLabel], gold: &[GoldLabel]) -> Result<f64> {
    if pred.len() != gold.len() || gold.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            gold.len()
        )));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

fn split_tag(tag: &str) -> (char, &str) {
    if tag == "O" {
        return ('O', "");
    }
    match tag.split_once('-') {
        Some((p, kind)) if p.len() == 1 => (p.chars().next().unwrap_or('I'), kind),
        _ => ('I', tag),
    }
}

/// Chunks of a BIO (or IOBES) sequence. An `I-X` that does not continue
/// an `X` chunk opens a new one, as conlleval does.
pub fn spans(tags: &[&str]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, kind) = split_tag(tag);
        let continues = matches!(prefix, 'I' | 'E') && open.is_some_and(|(_, k)| k == kind);
        if !continues {
            if let Some((start, k)) = open.take() {
                out.push(Span { start, end: i, kind: k.to_string() });
            }
            if prefix != 'O' {
                open = Some((i, kind));
            }
        }
        if matches!(prefix, 'E' | 'S') {
            if let Some((start, k)) = open.take() {
                out.push(Span { start, end: i + 1, kind: k.to_string() });
            }
        }
    }
    if let Some((start, k)) = open {
        out.push(Span { start, end: tags.len(), kind: k.to_string() });
    }
    out
}

/// Micro-averaged exact-match span F1. Two sequences sets without any
/// spans agree perfectly and score 1.
pub fn span_f1(pred: &[GoldLabel], gold: &[GoldLabel], vocab: &LabelVocab) -> Result<f64> {
    if pred.len() != gold.len() || gold.is_empty() {
        return Err(Error::invalid("span F1 needs equally many non-empty prediction and label lists"));
    }
    let names = |tags: &[usize]| -> Result<Vec<&str>> {
        tags.iter()
            .map(|&t| {
                vocab.name(t).ok_or(Error::LabelOutOfVocabulary {
                    label: t,
                    size: vocab.len(),
                })
            })
            .collect()
    };
    let (mut correct, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let (Some(p), Some(g)) = (p.as_tags(), g.as_tags()) else {
            return Err(Error::invalid("span F1 needs tag sequences"));
        };
        if p.len() != g.len() {
            return Err(Error::invalid("predicted and gold sequences differ in length"));
        }
        let ps = spans(&names(p)?);
        let gs = spans(&names(g)?);
        n_pred += ps.len();
        n_gold += gs.len();
        correct += ps.iter().filter(|s| gs.contains(s)).count();
    }
    if n_pred == 0 && n_gold == 0 {
        return Ok(1.0);
    }
    if correct == 0 {
        return Ok(0.0);
    }
    let precision = correct as f64 / n_pred as f64;
    let recall = correct as f64 / n_gold as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Accuracy for classification, span F1 for tagging.
pub fn score(task: Task, pred: &[GoldLabel], gold: &[GoldLabel], vocab: &LabelVocab) -> Result<f64> {
    match task {
        Task::Classification => accuracy(pred, gold),
        Task::Tagging => span_f1(pred, gold, vocab),
    }
}

pub fn evaluate(model: &dyn ProbabilisticModel, corpus: &Corpus) -> Result<f64> {
    let xs: Vec<_> = corpus.instances().iter().collect();
    let pred: Vec<GoldLabel> = model
        .predict_probs(&xs)?
        .iter()
        .map(|p| p.argmax_label())
        .collect();
    score(corpus.task(), &pred, corpus.labels(), corpus.vocab())
}
