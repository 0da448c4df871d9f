//! Datasets, label vocabularies, splits and labeled/unlabeled bookkeeping.
//!
//! Two on-disk formats are understood:
//!
//! * JSONL classification: one object per line with string keys `"text"` and
//!   `"label"`. Other keys are ignored.
//! * CoNLL tagging: one token per line, whitespace-separated columns, the
//!   last column is the tag. A blank line ends a sentence and
//!   `-DOCSTART-` lines are dropped.
//!
//! Instance ids are assigned in file order starting from zero. Label
//! vocabularies are the sorted set of observed label strings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Tagging,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Classification => "accuracy",
            Task::Tagging => "span_f1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Text(String),
    Tokens(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: InstanceId,
    pub payload: Payload,
    pub token_count: usize,
}

impl Instance {
    pub fn text(id: u64, text: impl Into<String>) -> Self {
        let text = text.into();
        let token_count = text.split_whitespace().count();
        Instance {
            id: InstanceId(id),
            payload: Payload::Text(text),
            token_count,
        }
    }

    pub fn tokens<S: Into<String>>(id: u64, tokens: impl IntoIterator<Item = S>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        Instance {
            id: InstanceId(id),
            token_count: tokens.len(),
            payload: Payload::Tokens(tokens),
        }
    }

    pub fn modality(&self) -> &'static str {
        match self.payload {
            Payload::Text(_) => "text",
            Payload::Tokens(_) => "tokens",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoldLabel {
    Class(usize),
    Tags(Vec<usize>),
}

impl GoldLabel {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            GoldLabel::Class(c) => Some(*c),
            GoldLabel::Tags(_) => None,
        }
    }

    pub fn as_tags(&self) -> Option<&[usize]> {
        match self {
            GoldLabel::Class(_) => None,
            GoldLabel::Tags(t) => Some(t),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            GoldLabel::Class(c) => Some(*c),
            GoldLabel::Tags(t) => t.iter().copied().max(),
        }
    }
}

/// Ordered label names; the index of a name is its class or tag id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    /// Builds a vocabulary from observed names, sorted lexicographically.
    pub fn from_observed<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(|s| s.as_ref().to_owned()).collect();
        LabelVocab {
            names: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// An immutable set of instances with gold labels.
#[derive(Clone, Debug)]
pub struct Corpus {
    task: Task,
    instances: Vec<Instance>,
    labels: Vec<GoldLabel>,
    vocab: LabelVocab,
    skipped_empty: usize,
    index: HashMap<InstanceId, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task
            && self.instances == other.instances
            && self.labels == other.labels
            && self.vocab == other.vocab
    }
}

impl Corpus {
    pub fn from_parts(
        task: Task,
        instances: Vec<Instance>,
        labels: Vec<GoldLabel>,
        vocab: LabelVocab,
    ) -> Result<Self> {
        if instances.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} instances but {} labels",
                instances.len(),
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(instances.len());
        for (pos, (inst, label)) in instances.iter().zip(&labels).enumerate() {
            if index.insert(inst.id, pos).is_some() {
                return Err(Error::contract(format!("duplicate instance id {}", inst.id)));
            }
            match (task, &inst.payload, label) {
                (Task::Classification, Payload::Text(_), GoldLabel::Class(_)) => {}
                (Task::Tagging, Payload::Tokens(toks), GoldLabel::Tags(tags)) => {
                    if toks.is_empty() {
                        return Err(Error::contract(format!(
                            "tagging instance {} has no tokens",
                            inst.id
                        )));
                    }
                    if tags.len() != toks.len() || inst.token_count != toks.len() {
                        return Err(Error::contract(format!(
                            "instance {}: {} tokens but {} tags",
                            inst.id,
                            toks.len(),
                            tags.len()
                        )));
                    }
                }
                _ => {
                    return Err(Error::contract(format!(
                        "instance {} does not match task {:?}",
                        inst.id, task
                    )))
                }
            }
            if let Some(max) = label.max_index() {
                if max >= vocab.len() {
                    return Err(Error::LabelOutOfVocabulary {
                        label: max,
                        size: vocab.len(),
                    });
                }
            }
        }
        Ok(Corpus {
            task,
            instances,
            labels,
            vocab,
            skipped_empty: 0,
            index,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn labels(&self) -> &[GoldLabel] {
        &self.labels
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    /// Number of empty sequences dropped by the CoNLL loader.
    pub fn skipped_empty(&self) -> usize {
        self.skipped_empty
    }

    pub fn total_tokens(&self) -> usize {
        self.instances.iter().map(|i| i.token_count).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.instances.iter().map(|i| i.id)
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn instance(&self, id: InstanceId) -> Result<&Instance> {
        self.index
            .get(&id)
            .map(|&p| &self.instances[p])
            .ok_or(Error::UnknownId(id))
    }

    pub fn label(&self, id: InstanceId) -> Result<&GoldLabel> {
        self.index
            .get(&id)
            .map(|&p| &self.labels[p])
            .ok_or(Error::UnknownId(id))
    }

    /// A corpus holding only `ids`, in the order given.
    pub fn subset(&self, ids: &[InstanceId]) -> Result<Corpus> {
        let mut instances = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = *self.index.get(&id).ok_or(Error::UnknownId(id))?;
            instances.push(self.instances[p].clone());
            labels.push(self.labels[p].clone());
        }
        Corpus::from_parts(self.task, instances, labels, self.vocab.clone())
    }

    /// Shifts every id by `offset`, used to keep test ids disjoint from
    /// training ids.
    pub fn with_id_offset(&self, offset: u64) -> Corpus {
        let instances: Vec<Instance> = self
            .instances
            .iter()
            .map(|i| Instance {
                id: InstanceId(i.id.0 + offset),
                ..i.clone()
            })
            .collect();
        let index = instances.iter().enumerate().map(|(p, i)| (i.id, p)).collect();
        Corpus {
            instances,
            index,
            ..self.clone()
        }
    }

    /// Re-expresses labels in terms of `vocab`, failing on names it lacks.
    pub fn remap_to(&self, vocab: &LabelVocab) -> Result<Corpus> {
        let map: Vec<usize> = self
            .vocab
            .names()
            .iter()
            .map(|n| {
                vocab.index_of(n).ok_or_else(|| {
                    Error::invalid(format!("label {n:?} is not in the training vocabulary"))
                })
            })
            .collect::<Result<_>>()?;
        let labels = self
            .labels
            .iter()
            .map(|l| match l {
                GoldLabel::Class(c) => GoldLabel::Class(map[*c]),
                GoldLabel::Tags(t) => GoldLabel::Tags(t.iter().map(|&x| map[x]).collect()),
            })
            .collect();
        let mut out = Corpus::from_parts(self.task, self.instances.clone(), labels, vocab.clone())?;
        out.skipped_empty = self.skipped_empty;
        Ok(out)
    }
}

/// Loads a JSONL classification file.
pub fn load_classification_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_classification_jsonl(BufReader::new(file), path)
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: Option<String>,
    label: Option<String>,
}

pub fn parse_classification_jsonl(reader: impl BufRead, path: &Path) -> Result<Corpus> {
    let mut texts = Vec::new();
    let mut names = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let text = rec.text.ok_or_else(|| parse_err("missing \"text\" field".into()))?;
        if text.trim().is_empty() {
            return Err(parse_err("empty \"text\" field".into()));
        }
        let label = rec.label.ok_or_else(|| parse_err("missing \"label\" field".into()))?;
        texts.push(text);
        names.push(label);
    }
    if texts.is_empty() {
        return Err(Error::EmptyCorpus(path.to_owned()));
    }
    let vocab = LabelVocab::from_observed(&names);
    let instances = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| Instance::text(i as u64, t))
        .collect();
    let labels = names
        .iter()
        .map(|n| GoldLabel::Class(vocab.index_of(n).expect("observed label")))
        .collect();
    Corpus::from_parts(Task::Classification, instances, labels, vocab)
}

/// Loads a CoNLL-style tagging file.
pub fn load_tagging_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tagging_conll(BufReader::new(file), path)
}

pub fn parse_tagging_conll(reader: impl BufRead, path: &Path) -> Result<Corpus> {
    let mut sentences: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut skipped = 0usize;
    // true once a non-blank line has been seen since the last boundary
    let mut open = false;

    let mut close = |tokens: &mut Vec<String>, tags: &mut Vec<String>, open: &mut bool| {
        if *open {
            if tokens.is_empty() {
                skipped += 1;
            } else {
                sentences.push((std::mem::take(tokens), std::mem::take(tags)));
            }
        }
        *open = false;
    };

    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            close(&mut tokens, &mut tags, &mut open);
            continue;
        }
        open = true;
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: "tag column missing".into(),
            });
        }
        tokens.push(cols[0].to_owned());
        tags.push(cols[cols.len() - 1].to_owned());
    }
    close(&mut tokens, &mut tags, &mut open);

    if skipped > 0 {
        log::warn!("{}: skipped {skipped} empty sequence(s)", path.display());
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus(path.to_owned()));
    }
    let vocab = LabelVocab::from_observed(sentences.iter().flat_map(|(_, t)| t.iter()));
    let mut instances = Vec::with_capacity(sentences.len());
    let mut labels = Vec::with_capacity(sentences.len());
    for (i, (toks, tg)) in sentences.into_iter().enumerate() {
        labels.push(GoldLabel::Tags(
            tg.iter().map(|t| vocab.index_of(t).expect("observed tag")).collect(),
        ));
        instances.push(Instance::tokens(i as u64, toks));
    }
    let mut corpus = Corpus::from_parts(Task::Tagging, instances, labels, vocab)?;
    corpus.skipped_empty = skipped;
    Ok(corpus)
}

/// Deterministically splits off a held-out part holding `fraction` of the
/// instances (rounded to the nearest integer).
pub fn split_held_out(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "held-out fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n = corpus.len();
    let held = (fraction * n as f64).round() as usize;
    if held == 0 || held >= n {
        return Err(Error::invalid(format!(
            "held-out fraction {fraction} of {n} instances leaves an empty part"
        )));
    }
    let mut ids: Vec<InstanceId> = corpus.ids().collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (held_ids, train_ids) = ids.split_at(held);
    let mut train_ids = train_ids.to_vec();
    let mut held_ids = held_ids.to_vec();
    train_ids.sort_unstable();
    held_ids.sort_unstable();
    Ok((corpus.subset(&train_ids)?, corpus.subset(&held_ids)?))
}

/// Labeled / unlabeled partition of the training ids during emulated
/// annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    labeled: BTreeSet<InstanceId>,
    unlabeled: BTreeSet<InstanceId>,
    iteration: usize,
}

impl PoolState {
    /// All of `all_ids` start unlabeled except `seed`, which is revealed
    /// without advancing the iteration counter.
    pub fn new(
        all_ids: impl IntoIterator<Item = InstanceId>,
        seed: impl IntoIterator<Item = InstanceId>,
    ) -> Result<Self> {
        let mut unlabeled: BTreeSet<InstanceId> = all_ids.into_iter().collect();
        let mut labeled = BTreeSet::new();
        for id in seed {
            if !unlabeled.remove(&id) {
                return Err(if labeled.contains(&id) {
                    Error::contract(format!("seed id {id} given twice"))
                } else {
                    Error::UnknownId(id)
                });
            }
            labeled.insert(id);
        }
        Ok(PoolState {
            labeled,
            unlabeled,
            iteration: 0,
        })
    }

    pub fn labeled(&self) -> &BTreeSet<InstanceId> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<InstanceId> {
        &self.unlabeled
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Moves `ids` from the pool to the labeled set and advances the
    /// iteration. Nothing changes if any id is invalid.
    pub fn reveal_labels(&mut self, ids: &[InstanceId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if self.labeled.contains(&id) {
                return Err(Error::contract(format!("instance {id} is already labeled")));
            }
            if !self.unlabeled.contains(&id) {
                return Err(Error::UnknownId(id));
            }
            if !seen.insert(id) {
                return Err(Error::contract(format!("instance {id} revealed twice")));
            }
        }
        for id in seen {
            self.unlabeled.remove(&id);
            self.labeled.insert(id);
        }
        self.iteration += 1;
        Ok(())
    }

    /// Checks disjointness and that the union equals `universe`.
    pub fn check_invariants(&self, universe: &BTreeSet<InstanceId>) -> Result<()> {
        if let Some(id) = self.labeled.intersection(&self.unlabeled).next() {
            return Err(Error::contract(format!(
                "instance {id} is both labeled and unlabeled"
            )));
        }
        if self.labeled.len() + self.unlabeled.len() != universe.len()
            || !self.labeled.iter().chain(&self.unlabeled).all(|id| universe.contains(id))
        {
            return Err(Error::contract(
                "labeled and unlabeled sets do not cover the training ids",
            ));
        }
        Ok(())
    }
}
