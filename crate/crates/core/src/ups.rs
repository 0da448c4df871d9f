//! Unlabeled pool subsampling.
//!
//! After a warm-up of full scoring passes, each iteration rescores only a
//! random subset of the pool. Instances are ranked by their last known
//! uncertainty (rank 0 = most uncertain); rank `r` is kept with
//! probability `exp(-max(0, r - γ) / T)`, so the top-γ fraction is always
//! rescored and the tail decays quickly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InstanceId;
use crate::error::{Error, Result};
use crate::strategies::{rank_order, select_top, Score};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpsConfig {
    pub enabled: bool,
    pub gamma: f64,
    pub temperature: f64,
    pub warmup_iterations: usize,
    /// Force a full pass every n-th iteration; 0 disables.
    pub full_refresh_every: usize,
    pub seed: u64,
}

impl Default for UpsConfig {
    fn default() -> Self {
        UpsConfig {
            enabled: false,
            gamma: 0.1,
            temperature: 0.01,
            warmup_iterations: 3,
            full_refresh_every: 0,
            seed: 0,
        }
    }
}

impl UpsConfig {
    pub fn violations(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma) {
            out.push(format!("{field}.gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            out.push(format!(
                "{field}.temperature must be a finite value >= 0, got {}",
                self.temperature
            ));
        }
        if self.warmup_iterations == 0 {
            out.push(format!("{field}.warmup_iterations must be at least 1"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("ups");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Whether `iteration` (1-based) scores the whole pool.
    pub fn is_full_pass(&self, iteration: usize) -> bool {
        iteration <= self.warmup_iterations
            || (self.full_refresh_every > 0 && iteration.is_multiple_of(self.full_refresh_every))
    }
}

pub fn keep_probability(rank: f64, cfg: &UpsConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&rank) {
        return Err(Error::invalid(format!("rank {rank} outside [0, 1]")));
    }
    let excess = (rank - cfg.gamma).max(0.0);
    if excess == 0.0 {
        return Ok(1.0);
    }
    if cfg.temperature == 0.0 {
        return Ok(0.0);
    }
    Ok((-excess / cfg.temperature).exp().clamp(0.0, 1.0))
}

/// Closed-form expected subsample size for a pool of `m`, treating ranks
/// as uniform on [0, 1]: `γM + T·M·(1 - e^{-(1-γ)/T})`.
pub fn expected_subsample_size(m: usize, cfg: &UpsConfig) -> f64 {
    let m = m as f64;
    let tail = if cfg.temperature > 0.0 {
        cfg.temperature * m * (1.0 - (-(1.0 - cfg.gamma) / cfg.temperature).exp())
    } else {
        0.0
    };
    cfg.gamma * m + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub id: InstanceId,
    pub last_score: f64,
    pub computed_at_iteration: usize,
}

/// Last known score of every unlabeled instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UncertaintyStore {
    records: BTreeMap<InstanceId, UncertaintyRecord>,
}

impl UncertaintyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: InstanceId) -> Option<&UncertaintyRecord> {
        self.records.get(&id)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &UncertaintyRecord> {
        self.records.values()
    }

    pub fn scores(&self) -> Vec<Score> {
        self.records
            .values()
            .map(|r| Score {
                id: r.id,
                value: r.last_score,
            })
            .collect()
    }

    /// Overwrites the records of `fresh`; everything else keeps its stale
    /// value.
    pub fn merge_scores(
        &mut self,
        fresh: &[Score],
        iteration: usize,
        pool: &BTreeSet<InstanceId>,
    ) -> Result<()> {
        if let Some(s) = fresh.iter().find(|s| !pool.contains(&s.id)) {
            return Err(Error::invalid(format!("score for id {} outside the pool", s.id)));
        }
        for s in fresh {
            self.records.insert(
                s.id,
                UncertaintyRecord {
                    id: s.id,
                    last_score: s.value,
                    computed_at_iteration: iteration,
                },
            );
        }
        Ok(())
    }

    pub fn remove_labeled(&mut self, ids: &[InstanceId]) {
        for id in ids {
            self.records.remove(id);
        }
    }

    /// Ids to rescore at `iteration`, in ascending order.
    pub fn subsample(
        &self,
        pool: &BTreeSet<InstanceId>,
        cfg: &UpsConfig,
        iteration: usize,
    ) -> Result<Vec<InstanceId>> {
        if cfg.is_full_pass(iteration) {
            return Ok(pool.iter().copied().collect());
        }
        if let Some(id) = pool.iter().find(|id| !self.records.contains_key(id)) {
            return Err(Error::contract(format!("no uncertainty record for pool id {id}")));
        }
        if self.records.len() != pool.len() {
            return Err(Error::contract("uncertainty records cover ids outside the pool"));
        }
        let mut ranked = self.scores();
        ranked.sort_by(rank_order);
        let m = ranked.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, iteration as u64));
        let mut out = Vec::new();
        for (i, s) in ranked.iter().enumerate() {
            let p = keep_probability(i as f64 / m, cfg)?;
            // draw for every instance so the stream does not depend on p
            let u: f64 = rng.random();
            if p >= 1.0 || u < p {
                out.push(s.id);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "u", "computed_at_iteration"])
            .map_err(ser)?;
        for r in self.records.values() {
            out.write_record([
                r.id.0.to_string(),
                r.last_score.to_string(),
                r.computed_at_iteration.to_string(),
            ])
            .map_err(ser)?;
        }
        out.flush()
            .map_err(|e| Error::Serialization(e.to_string()))
    }
}

fn mix(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Share of the `q` top instances by `fresh` that were already in the top
/// `k` fraction by `stale`.
pub fn coverage_statistic(fresh: &[Score], stale: &[Score], k: f64, q: usize) -> Result<f64> {
    if fresh.len() != stale.len()
        || fresh.iter().map(|s| s.id).collect::<BTreeSet<_>>()
            != stale.iter().map(|s| s.id).collect::<BTreeSet<_>>()
    {
        return Err(Error::invalid("fresh and stale scores cover different pools"));
    }
    if q == 0 || q > fresh.len() {
        return Err(Error::invalid(format!(
            "query size {q} must be in 1..={}",
            fresh.len()
        )));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::invalid(format!("k = {k} outside [0, 1]")));
    }
    let top_k = ((k * stale.len() as f64).ceil() as usize).min(stale.len());
    let stale_top: BTreeSet<InstanceId> = select_top(stale, top_k).into_iter().collect();
    let hits = select_top(fresh, q)
        .into_iter()
        .filter(|id| stale_top.contains(id))
        .count();
    Ok(hits as f64 / q as f64)
}
