//! Seeded generators for desk-scale corpora.
//!
//! `topic_corpus` draws bag-of-words documents from per-class Zipfian topic
//! vocabularies mixed with shared background words. Each document has its
//! own clarity (share of on-topic words) and may borrow words from a
//! distractor class, usually its sibling (`c ^ 1`), so ambiguity is
//! structured the way news categories are.
//!
//! `entity_corpus` produces BIO-tagged sentences with PER/LOC/ORG/MISC
//! mentions, cue words that precede some mentions, and a pool of names
//! shared between types.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GoldLabel, Instance, LabelVocab, Payload, Task};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopicCorpusConfig {
    pub num_docs: usize,
    pub num_classes: usize,
    pub topic_words: usize,
    pub background_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Range of the per-document on-topic word share.
    pub clarity: (f64, f64),
    /// Distractor share as a fraction of the document's clarity (upper bound).
    pub max_distraction: f64,
    /// Probability that the distractor is the sibling class.
    pub sibling_bias: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        TopicCorpusConfig {
            num_docs: 2000,
            num_classes: 4,
            topic_words: 600,
            background_words: 4000,
            min_len: 10,
            max_len: 36,
            clarity: (0.15, 0.5),
            max_distraction: 0.5,
            sibling_bias: 0.7,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

const CLASS_NAMES: [&str; 8] = [
    "business", "politics", "science", "sports", "culture", "health", "travel", "weather",
];

struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..n)
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(s);
                acc
            })
            .collect();
        Zipf { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// Documents in generation order; ids are positions.
pub fn topic_corpus(cfg: &TopicCorpusConfig) -> Result<Corpus> {
    assert!(cfg.num_classes >= 2 && cfg.num_classes <= CLASS_NAMES.len());
    assert!(cfg.min_len >= 1 && cfg.max_len >= cfg.min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic = Zipf::new(cfg.topic_words, cfg.zipf_exponent);
    let background = Zipf::new(cfg.background_words, cfg.zipf_exponent);
    let names: Vec<&str> = CLASS_NAMES[..cfg.num_classes].to_vec();
    let vocab = LabelVocab::from_observed(&names);

    let mut instances = Vec::with_capacity(cfg.num_docs);
    let mut labels = Vec::with_capacity(cfg.num_docs);
    for id in 0..cfg.num_docs {
        let class = rng.random_range(0..cfg.num_classes);
        let sibling = (class ^ 1).min(cfg.num_classes - 1);
        let distractor = if sibling != class && rng.random::<f64>() < cfg.sibling_bias {
            sibling
        } else {
            let mut d = rng.random_range(0..cfg.num_classes - 1);
            if d >= class {
                d += 1;
            }
            d
        };
        let clarity = rng.random_range(cfg.clarity.0..=cfg.clarity.1);
        let distraction = clarity * rng.random_range(0.0..=cfg.max_distraction);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let u = rng.random::<f64>();
            let word = if u < clarity {
                format!("{}{}", &names[class][..3], topic.sample(&mut rng))
            } else if u < clarity + distraction {
                format!("{}{}", &names[distractor][..3], topic.sample(&mut rng))
            } else {
                format!("w{}", background.sample(&mut rng))
            };
            words.push(word);
        }
        instances.push(Instance::text(id as u64, words.join(" ")));
        labels.push(GoldLabel::Class(
            vocab.index_of(names[class]).expect("known class"),
        ));
    }
    Corpus::from_parts(Task::Classification, instances, labels, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntityCorpusConfig {
    pub num_sentences: usize,
    pub names_per_type: usize,
    pub shared_names: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_mentions: usize,
    pub cue_probability: f64,
    pub seed: u64,
}

impl Default for EntityCorpusConfig {
    fn default() -> Self {
        EntityCorpusConfig {
            num_sentences: 1500,
            names_per_type: 300,
            shared_names: 60,
            filler_words: 1500,
            min_len: 6,
            max_len: 24,
            max_mentions: 3,
            cue_probability: 0.6,
            seed: 0,
        }
    }
}

const ENTITY_TYPES: [&str; 4] = ["LOC", "MISC", "ORG", "PER"];
const CUES: [&[&str]; 4] = [
    &["in", "at", "near", "from"],
    &["the", "a", "annual", "famous"],
    &["company", "firm", "club", "group"],
    &["mr", "ms", "dr", "said"],
];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "re", "ta", "vo", "sen", "dar", "bel", "qui", "nor", "pas", "ul", "eth",
    "gri", "mon",
];

fn pseudo_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// BIO-tagged sentences; ids are positions.
pub fn entity_corpus(cfg: &EntityCorpusConfig) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<Vec<String>> = (0..ENTITY_TYPES.len())
        .map(|t| {
            (0..cfg.names_per_type)
                .map(|i| capitalize(&format!("{}{}", pseudo_word(&mut rng, 2), t * 1000 + i)))
                .collect()
        })
        .collect();
    let shared: Vec<String> = (0..cfg.shared_names)
        .map(|i| capitalize(&format!("{}x{i}", pseudo_word(&mut rng, 2))))
        .collect();
    let filler = Zipf::new(cfg.filler_words, 1.0);
    let name_rank = Zipf::new(cfg.names_per_type, 0.8);

    let mut tag_names: Vec<String> = vec!["O".into()];
    for t in ENTITY_TYPES {
        tag_names.push(format!("B-{t}"));
        tag_names.push(format!("I-{t}"));
    }
    let vocab = LabelVocab::from_observed(&tag_names);
    let tag = |s: &str| vocab.index_of(s).expect("known tag");

    let mut instances = Vec::with_capacity(cfg.num_sentences);
    let mut labels = Vec::with_capacity(cfg.num_sentences);
    for id in 0..cfg.num_sentences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mentions = rng.random_range(0..=cfg.max_mentions);
        let mut tokens: Vec<String> = Vec::with_capacity(len + 8);
        let mut tags: Vec<usize> = Vec::with_capacity(len + 8);
        let mut slots: Vec<usize> = (0..mentions).map(|_| rng.random_range(0..len)).collect();
        slots.sort_unstable();
        let mut next_slot = 0;
        for pos in 0..len {
            while next_slot < slots.len() && slots[next_slot] == pos {
                next_slot += 1;
                let ty = rng.random_range(0..ENTITY_TYPES.len());
                if rng.random::<f64>() < cfg.cue_probability {
                    let cues = CUES[ty];
                    tokens.push(cues[rng.random_range(0..cues.len())].to_owned());
                    tags.push(tag("O"));
                }
                let span = 1 + (rng.random::<f64>() < 0.3) as usize + (rng.random::<f64>() < 0.1) as usize;
                for k in 0..span {
                    let word = if !shared.is_empty() && rng.random::<f64>() < 0.15 {
                        shared[rng.random_range(0..shared.len())].clone()
                    } else {
                        names[ty][name_rank.sample(&mut rng)].clone()
                    };
                    tokens.push(word);
                    let prefix = if k == 0 { "B" } else { "I" };
                    tags.push(tag(&format!("{prefix}-{}", ENTITY_TYPES[ty])));
                }
            }
            tokens.push(format!("f{}", filler.sample(&mut rng)));
            tags.push(tag("O"));
        }
        instances.push(Instance::tokens(id as u64, tokens));
        labels.push(GoldLabel::Tags(tags));
    }
    Corpus::from_parts(Task::Tagging, instances, labels, vocab)
}

/// Writes a classification corpus as JSONL.
pub fn write_jsonl(corpus: &Corpus, mut w: impl Write) -> std::io::Result<()> {
    for (inst, label) in corpus.instances().iter().zip(corpus.labels()) {
        if let (Payload::Text(t), GoldLabel::Class(c)) = (&inst.payload, label) {
            let rec = serde_json::json!({
                "text": t,
                "label": corpus.vocab().name(*c).unwrap_or_default(),
            });
            writeln!(w, "{rec}")?;
        }
    }
    Ok(())
}

/// Writes a tagging corpus as two-column CoNLL.
pub fn write_conll(corpus: &Corpus, mut w: impl Write) -> std::io::Result<()> {
    for (inst, label) in corpus.instances().iter().zip(corpus.labels()) {
        if let (Payload::Tokens(toks), GoldLabel::Tags(tags)) = (&inst.payload, label) {
            for (t, g) in toks.iter().zip(tags) {
                writeln!(w, "{t} {}", corpus.vocab().name(*g).unwrap_or("O"))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_classification_jsonl, parse_tagging_conll};
    use std::io::Cursor;
    use std::path::Path;

    #[test]
    fn topic_corpus_is_seeded() {
        let cfg = TopicCorpusConfig {
            num_docs: 50,
            ..Default::default()
        };
        let a = topic_corpus(&cfg).unwrap();
        assert_eq!(a, topic_corpus(&cfg).unwrap());
        let b = topic_corpus(&TopicCorpusConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.num_labels(), 4);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = topic_corpus(&TopicCorpusConfig {
            num_docs: 30,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&c, &mut buf).unwrap();
        let back = parse_classification_jsonl(Cursor::new(buf), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn conll_round_trip() {
        let c = entity_corpus(&EntityCorpusConfig {
            num_sentences: 40,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_conll(&c, &mut buf).unwrap();
        let back = parse_tagging_conll(Cursor::new(buf), Path::new("x")).unwrap();
        // the loader only sees tags that occur, the generator knows all nine
        assert_eq!(back.len(), c.len());
        assert_eq!(back.total_tokens(), c.total_tokens());
        let back = back.remap_to(c.vocab()).unwrap();
        assert_eq!(back, c);
    }
}
