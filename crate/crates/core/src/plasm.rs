//! Pseudo-labeling for successor training.
//!
//! After acquisition, a large teacher trained on the gold labels annotates
//! the rest of the pool. The most suspicious pseudo labels are dropped and
//! the successor is trained on the remaining pseudo labels plus gold.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GoldLabel, Instance, InstanceId};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{
    train_with, CheckpointPolicy, CheckpointTrace, ModelSpec, Probs, ProbabilisticModel,
    Supervision, Trained,
};
use crate::strategies::{least_confidence, mnlp};

/// Filtered fractions are capped here so a useless teacher still leaves
/// something to train on.
pub const MAX_FILTER_FRACTION: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMethod {
    Tracin,
    Uncertainty,
    None,
}

impl FilterMethod {
    pub fn name(self) -> &'static str {
        match self {
            FilterMethod::Tracin => "tracin",
            FilterMethod::Uncertainty => "uncertainty",
            FilterMethod::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmConfig {
    pub acquisition: ModelSpec,
    pub teacher: ModelSpec,
    pub successor: ModelSpec,
    #[serde(default = "default_filter")]
    pub filter_method: FilterMethod,
    /// Overrides the `1 - held-out score` rule.
    #[serde(default)]
    pub filter_fraction: Option<f64>,
    /// The acquisition model stands in for a distilled teacher, so both
    /// must belong to the same family.
    #[serde(default = "yes")]
    pub same_family: bool,
}

fn default_filter() -> FilterMethod {
    FilterMethod::Tracin
}

fn yes() -> bool {
    true
}

impl PlasmConfig {
    pub fn violations(&self, field: &str) -> Vec<String> {
        let mut out = self.acquisition.violations(&format!("{field}.acquisition"));
        out.extend(self.teacher.violations(&format!("{field}.teacher")));
        out.extend(self.successor.violations(&format!("{field}.successor")));
        if self.same_family && self.acquisition.family != self.teacher.family {
            out.push(format!(
                "{field}.teacher family {} differs from acquisition family {}",
                self.teacher.family, self.acquisition.family
            ));
        }
        let tasks = [&self.acquisition, &self.teacher, &self.successor].map(|s| s.task());
        if tasks.iter().any(|&t| t != tasks[0]) {
            out.push(format!("{field}: acquisition, teacher and successor solve different tasks"));
        }
        if let Some(f) = self.filter_fraction {
            if !(0.0..1.0).contains(&f) {
                out.push(format!("{field}.filter_fraction must be in [0, 1), got {f}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("plasm");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub id: InstanceId,
    pub label: GoldLabel,
    pub teacher_probs: Probs,
    pub filter_score: f64,
    pub retained: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retained(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.iter().filter(|e| e.retained)
    }

    pub fn retained_count(&self) -> usize {
        self.retained().count()
    }
}

/// Argmax teacher labels for every pool instance, all retained.
pub fn pseudo_label(teacher: &dyn ProbabilisticModel, pool: &[&Instance]) -> Result<PseudoLabeledSet> {
    let probs = teacher.predict_probs(pool)?;
    Ok(PseudoLabeledSet {
        entries: pool
            .iter()
            .zip(probs)
            .map(|(x, p)| PseudoLabel {
                id: x.id,
                label: p.argmax_label(),
                teacher_probs: p,
                filter_score: 0.0,
                retained: true,
            })
            .collect(),
    })
}

/// Returns `(score, 1 - score)` of `teacher` on `held_out`.
pub fn filter_fraction_from_held_out(
    teacher: &dyn ProbabilisticModel,
    held_out: &Corpus,
) -> Result<(f64, f64)> {
    if held_out.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let score = metrics::evaluate(teacher, held_out)?;
    Ok((score, fraction_from_score(score)))
}

pub fn fraction_from_score(score: f64) -> f64 {
    (1.0 - score).clamp(0.0, MAX_FILTER_FRACTION)
}

/// `Σ_k η_k ‖g_k‖²` over the checkpoints, with gradients taken at `label`.
pub fn tracin_self_influence(trace: &CheckpointTrace, x: &Instance, label: &GoldLabel) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::invalid("TracIn needs at least one checkpoint"));
    }
    trace.checkpoints.iter().try_fold(0.0, |acc, c| {
        Ok(acc + c.learning_rate * c.model.gradient_sq_norm(x, label)?)
    })
}

/// Fills `filter_score` for every entry (higher = more suspicious).
pub fn score_for_filter(
    set: &mut PseudoLabeledSet,
    method: FilterMethod,
    trace: &CheckpointTrace,
    instances: &BTreeMap<InstanceId, &Instance>,
) -> Result<()> {
    use rayon::prelude::*;
    set.entries.par_iter_mut().try_for_each(|e| -> Result<()> {
        e.filter_score = match method {
            FilterMethod::None => 0.0,
            FilterMethod::Uncertainty => match &e.teacher_probs {
                Probs::Class(p) => least_confidence(p),
                Probs::Tokens(ps) if ps.is_empty() => 0.0,
                Probs::Tokens(ps) => mnlp(ps)?,
            },
            FilterMethod::Tracin => {
                let x = instances.get(&e.id).ok_or(Error::UnknownId(e.id))?;
                tracin_self_influence(trace, x, &e.label)?
            }
        };
        Ok(())
    })
}

/// Drops the `⌊fraction · N⌋` highest-scoring entries (ties by ascending
/// id); `none` drops nothing.
pub fn apply_filter(mut set: PseudoLabeledSet, method: FilterMethod, fraction: f64) -> Result<PseudoLabeledSet> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("filter fraction {fraction} outside [0, 1)")));
    }
    for e in &mut set.entries {
        e.retained = true;
    }
    if method == FilterMethod::None {
        return Ok(set);
    }
    let drop = (fraction * set.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&set.entries[a], &set.entries[b]);
        eb.filter_score.total_cmp(&ea.filter_score).then(ea.id.cmp(&eb.id))
    });
    for &i in &order[..drop] {
        set.entries[i].retained = false;
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Gold,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: InstanceId,
    pub label: GoldLabel,
    pub source: LabelSource,
}

/// Retained pseudo labels plus gold, gold winning on overlap; sorted by id.
pub fn build_successor_training_set(
    pseudo: &PseudoLabeledSet,
    gold: &[(InstanceId, GoldLabel)],
) -> Result<Vec<TrainingExample>> {
    let mut seen = BTreeSet::new();
    if let Some(e) = pseudo.entries.iter().find(|e| !seen.insert(e.id)) {
        return Err(Error::contract(format!("duplicate pseudo label for id {}", e.id)));
    }
    let mut out: BTreeMap<InstanceId, TrainingExample> = pseudo
        .retained()
        .map(|e| {
            (
                e.id,
                TrainingExample {
                    id: e.id,
                    label: e.label.clone(),
                    source: LabelSource::Pseudo,
                },
            )
        })
        .collect();
    for (id, label) in gold {
        out.insert(
            *id,
            TrainingExample {
                id: *id,
                label: label.clone(),
                source: LabelSource::Gold,
            },
        );
    }
    Ok(out.into_values().collect())
}

/// Flips the labels of `⌊rate · N⌋` random entries to a different label.
/// For tagging, one random token per chosen sentence is flipped.
pub fn inject_label_noise(set: &mut PseudoLabeledSet, rate: f64, num_labels: usize, seed: u64) -> Result<Vec<InstanceId>> {
    if !(0.0..=1.0).contains(&rate) || num_labels < 2 {
        return Err(Error::invalid("noise rate must be in [0, 1] with at least two labels"));
    }
    let n = (rate * set.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, set.len(), n).into_vec();
    picked.sort_unstable();
    let flip = |old: usize, rng: &mut ChaCha8Rng| {
        let mut c = rng.random_range(0..num_labels - 1);
        if c >= old {
            c += 1;
        }
        c
    };
    for &i in &picked {
        match &mut set.entries[i].label {
            GoldLabel::Class(c) => *c = flip(*c, &mut rng),
            GoldLabel::Tags(t) if !t.is_empty() => {
                let j = rng.random_range(0..t.len());
                t[j] = flip(t[j], &mut rng);
            }
            GoldLabel::Tags(_) => {}
        }
    }
    Ok(picked.into_iter().map(|i| set.entries[i].id).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileSummary {
    pub decile: usize,
    pub count: usize,
    pub mean_score: f64,
    pub min_score: f64,
    pub max_score: f64,
    /// Share of pseudo labels that disagree with gold, when gold is known.
    pub noise_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlasmAudit {
    pub teacher_held_out_score: f64,
    pub filter_method: FilterMethod,
    pub filter_fraction: f64,
    pub fraction_overridden: bool,
    pub gold_count: usize,
    pub pseudo_count: usize,
    pub retained_count: usize,
    pub dropped_count: usize,
    pub successor_train_size: usize,
    pub pseudo_noise_rate: Option<f64>,
    pub dropped_noise_rate: Option<f64>,
    /// Deciles of the filter ranking, most suspicious first.
    pub deciles: Vec<DecileSummary>,
}

impl PlasmAudit {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

fn noise_rate<'a>(entries: impl Iterator<Item = &'a PseudoLabel>, gold: &dyn Fn(InstanceId) -> Option<&'a GoldLabel>) -> Option<f64> {
    let mut n = 0usize;
    let mut bad = 0usize;
    for e in entries {
        let g = gold(e.id)?;
        n += 1;
        bad += (g != &e.label) as usize;
    }
    (n > 0).then(|| bad as f64 / n as f64)
}

/// Audit numbers for a filtered set. `gold` resolves the true label of a
/// pool instance when it is known (simulation).
pub fn audit<'a>(
    set: &'a PseudoLabeledSet,
    gold: &dyn Fn(InstanceId) -> Option<&'a GoldLabel>,
) -> (Option<f64>, Option<f64>, Vec<DecileSummary>) {
    let mut ranked: Vec<&PseudoLabel> = set.entries.iter().collect();
    ranked.sort_by(|a, b| b.filter_score.total_cmp(&a.filter_score).then(a.id.cmp(&b.id)));
    let n = ranked.len();
    let deciles = (0..10)
        .filter_map(|d| {
            let chunk = &ranked[d * n / 10..(d + 1) * n / 10];
            if chunk.is_empty() {
                return None;
            }
            let scores = chunk.iter().map(|e| e.filter_score);
            Some(DecileSummary {
                decile: d,
                count: chunk.len(),
                mean_score: scores.clone().sum::<f64>() / chunk.len() as f64,
                min_score: scores.clone().fold(f64::INFINITY, f64::min),
                max_score: scores.fold(f64::NEG_INFINITY, f64::max),
                noise_rate: noise_rate(chunk.iter().copied(), gold),
            })
        })
        .collect();
    (
        noise_rate(set.entries.iter(), gold),
        noise_rate(set.entries.iter().filter(|e| !e.retained), gold),
        deciles,
    )
}

#[derive(Debug)]
pub struct PlasmOutcome {
    pub successor: Trained,
    pub teacher: Trained,
    pub pseudo: PseudoLabeledSet,
    pub audit: PlasmAudit,
}

/// Teacher on gold, pseudo labels on the pool, filtering, successor on the
/// union. `corpus` must contain every gold and pool id; if `reveal_gold`
/// is set, pool gold labels feed the audit's noise rates (never training).
pub fn run_plasm(
    cfg: &PlasmConfig,
    corpus: &Corpus,
    gold_ids: &[InstanceId],
    pool_ids: &[InstanceId],
    held_out: &Corpus,
    reveal_gold: bool,
) -> Result<PlasmOutcome> {
    cfg.validate()?;
    if gold_ids.is_empty() {
        return Err(Error::invalid("PLASM needs a non-empty gold set"));
    }
    if cfg.teacher.task() != corpus.task() {
        return Err(Error::invalid("PLASM models do not match the corpus task"));
    }
    let gold_set: BTreeSet<InstanceId> = gold_ids.iter().copied().collect();
    if let Some(id) = pool_ids.iter().find(|id| gold_set.contains(id)) {
        return Err(Error::contract(format!("id {id} is both gold and pool")));
    }
    let gold_x: Vec<&Instance> = gold_ids.iter().map(|&id| corpus.instance(id)).collect::<Result<_>>()?;
    let gold_y: Vec<GoldLabel> = gold_ids
        .iter()
        .map(|&id| corpus.label(id).cloned())
        .collect::<Result<_>>()?;
    let policy = if cfg.filter_method == FilterMethod::Tracin {
        CheckpointPolicy::EveryEpoch
    } else {
        CheckpointPolicy::FinalOnly
    };
    let teacher = train_with(&cfg.teacher, &gold_x, Supervision::Hard(&gold_y), corpus.num_labels(), policy)?;

    let (score, rule_fraction) = filter_fraction_from_held_out(teacher.model.as_ref(), held_out)?;
    let fraction = cfg.filter_fraction.unwrap_or(rule_fraction);

    let pool_x: Vec<&Instance> = pool_ids.iter().map(|&id| corpus.instance(id)).collect::<Result<_>>()?;
    let mut pseudo = pseudo_label(teacher.model.as_ref(), &pool_x)?;
    let lookup: BTreeMap<InstanceId, &Instance> = pool_x.iter().map(|x| (x.id, *x)).collect();
    score_for_filter(&mut pseudo, cfg.filter_method, &teacher.trace, &lookup)?;
    let pseudo = apply_filter(pseudo, cfg.filter_method, fraction)?;

    let gold_pairs: Vec<(InstanceId, GoldLabel)> = gold_ids.iter().copied().zip(gold_y).collect();
    let train_set = build_successor_training_set(&pseudo, &gold_pairs)?;
    let xs: Vec<&Instance> = train_set.iter().map(|e| corpus.instance(e.id)).collect::<Result<_>>()?;
    let ys: Vec<GoldLabel> = train_set.iter().map(|e| e.label.clone()).collect();
    let successor = train_with(&cfg.successor, &xs, Supervision::Hard(&ys), corpus.num_labels(), CheckpointPolicy::FinalOnly)?;

    let reveal = |id: InstanceId| if reveal_gold { corpus.label(id).ok() } else { None };
    let (pseudo_noise_rate, dropped_noise_rate, deciles) = audit(&pseudo, &reveal);
    let retained_count = pseudo.retained_count();
    let audit = PlasmAudit {
        teacher_held_out_score: score,
        filter_method: cfg.filter_method,
        filter_fraction: fraction,
        fraction_overridden: cfg.filter_fraction.is_some(),
        gold_count: gold_ids.len(),
        pseudo_count: pseudo.len(),
        retained_count,
        dropped_count: pseudo.len() - retained_count,
        successor_train_size: train_set.len(),
        pseudo_noise_rate,
        dropped_noise_rate,
        deciles,
    };
    Ok(PlasmOutcome {
        successor,
        teacher,
        pseudo,
        audit,
    })
}

#[cfg(test)]
mod tests;
