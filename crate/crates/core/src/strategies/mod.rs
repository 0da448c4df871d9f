//! Informativeness scores and top-k query selection.
//!
//! Every score is oriented so that higher means "query this first".
//! Ties are always broken by ascending instance id.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InstanceId;
use crate::error::{Error, Result};
use crate::models::Probs;

mod mahalanobis;

pub use mahalanobis::{fit_gaussian_stats, score_md, GaussianClassStats, MAX_MD_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Lc,
    Mnlp,
    Md,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Lc => "lc",
            Strategy::Mnlp => "mnlp",
            Strategy::Md => "md",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub id: InstanceId,
    pub value: f64,
}

fn check_lengths(ids: &[InstanceId], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids but {n} outputs", ids.len())));
    }
    Ok(())
}

/// Random permutation ranks. The result depends only on the id set and
/// the seed, not on the order `ids` are given in.
pub fn score_random(ids: &[InstanceId], seed: u64) -> Result<Vec<Score>> {
    if ids.is_empty() {
        return Err(Error::invalid("no ids to score"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut ranks: Vec<usize> = (0..sorted.len()).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rank_of: std::collections::HashMap<InstanceId, usize> =
        sorted.into_iter().zip(ranks).collect();
    Ok(ids
        .iter()
        .map(|&id| Score {
            id,
            value: rank_of[&id] as f64,
        })
        .collect())
}

/// `1 - max_y P(y|x)`.
pub fn least_confidence(p: &[f64]) -> f64 {
    1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_lc(ids: &[InstanceId], outputs: &[Probs]) -> Result<Vec<Score>> {
    check_lengths(ids, outputs.len())?;
    ids.iter()
        .zip(outputs)
        .map(|(&id, p)| {
            p.check_valid()?;
            match p {
                Probs::Class(p) => Ok(Score {
                    id,
                    value: least_confidence(p),
                }),
                Probs::Tokens(_) => Err(Error::invalid("LC needs classification outputs")),
            }
        })
        .collect()
}

/// `-(1/n) Σ_i log max_tag P_i(tag)`. Exact for a tagger whose tokens are
/// predicted independently, where the best sequence is the per-token argmax.
pub fn mnlp(token_probs: &[Vec<f64>]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::invalid("MNLP of an empty sequence"));
    }
    let total: f64 = token_probs
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln())
        .sum();
    Ok((-total / token_probs.len() as f64).max(0.0))
}

pub fn score_mnlp(ids: &[InstanceId], outputs: &[Probs]) -> Result<Vec<Score>> {
    check_lengths(ids, outputs.len())?;
    ids.iter()
        .zip(outputs)
        .map(|(&id, p)| match p {
            Probs::Tokens(ps) => {
                if ps.is_empty() {
                    return Err(Error::invalid(format!("instance {id} has no tokens")));
                }
                p.check_valid()?;
                Ok(Score { id, value: mnlp(ps)? })
            }
            Probs::Class(_) => Err(Error::invalid("MNLP needs tagging outputs")),
        })
        .collect()
}

/// Descending value, then ascending id.
pub fn rank_order(a: &Score, b: &Score) -> Ordering {
    b.value.total_cmp(&a.value).then(a.id.cmp(&b.id))
}

fn ranked(scores: &[Score]) -> Vec<Score> {
    let mut s = scores.to_vec();
    s.sort_by(rank_order);
    s
}

/// The `k` highest-scoring ids in rank order.
pub fn select_top(scores: &[Score], k: usize) -> Vec<InstanceId> {
    let k = if k > scores.len() {
        log::warn!("query size {k} exceeds pool size {}, clamping", scores.len());
        scores.len()
    } else {
        k
    };
    ranked(scores).into_iter().take(k).map(|s| s.id).collect()
}

/// Walks the ranking and takes every instance that still fits in the token
/// budget, skipping the ones that would overflow it.
pub fn select_top_budget(
    scores: &[Score],
    tokens: impl Fn(InstanceId) -> usize,
    budget: usize,
) -> Vec<InstanceId> {
    let mut used = 0;
    let mut out = Vec::new();
    for s in ranked(scores) {
        let t = tokens(s.id);
        if used + t <= budget {
            used += t;
            out.push(s.id);
        }
    }
    out
}

/// Writes `id,strategy,value,iteration` rows.
pub fn write_scores_csv(
    w: impl Write,
    strategy: Strategy,
    iteration: usize,
    scores: &[Score],
) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "strategy", "value", "iteration"])
        .map_err(ser)?;
    for s in scores {
        out.write_record([
            s.id.0.to_string(),
            strategy.name().to_string(),
            s.value.to_string(),
            iteration.to_string(),
        ])
        .map_err(ser)?;
    }
    out.flush()
        .map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests;
