//! Emulated annotation loop with timing, plus coverage and correlation
//! analyses.
//!
//! Iteration `t` (1-based) trains the acquisition model on the labels
//! collected so far, scores the pool, queries, reveals the gold labels and
//! then trains and evaluates the successor on the enlarged labeled set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_classification_corpus, load_tagging_corpus, split_held_out, Corpus, GoldLabel, Instance,
    InstanceId, PoolState,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{
    train_with, CheckpointPolicy, Hidden, Model, ModelSpec, ProbabilisticModel, Probs, Supervision,
};
use crate::plasm::{run_plasm, PlasmAudit};
use crate::strategies::{
    fit_gaussian_stats, score_lc, score_md, score_mnlp, score_random, select_top,
    select_top_budget, write_scores_csv, Score, Strategy,
};
use crate::synthetic::{entity_corpus, topic_corpus, EntityCorpusConfig, TopicCorpusConfig};
use crate::ups::{coverage_statistic, UncertaintyStore};

mod config;

pub use config::{DatasetConfig, ExperimentConfig, ModelChoice, SuccessorConfig, SuccessorPlan};

/// Training corpus and a test corpus whose ids never collide with it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Corpus,
    pub test: Corpus,
}

impl Dataset {
    pub fn new(train: Corpus, test: Corpus) -> Result<Self> {
        if train.task() != test.task() {
            return Err(Error::invalid("train and test corpora solve different tasks"));
        }
        let test = test.remap_to(train.vocab())?;
        let offset = train.ids().map(|id| id.0 + 1).max().unwrap_or(0);
        Ok(Dataset {
            test: test.with_id_offset(offset),
            train,
        })
    }
}

/// Synthetic test sets come from the same generator run as the training
/// data (the last `test_size` instances), so both share one vocabulary.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::SyntheticTopics { test_size, generator } => split_tail(
            topic_corpus(&TopicCorpusConfig {
                num_docs: generator.num_docs + test_size,
                ..generator.clone()
            })?,
            *test_size,
        ),
        DatasetConfig::SyntheticEntities { test_size, generator } => split_tail(
            entity_corpus(&EntityCorpusConfig {
                num_sentences: generator.num_sentences + test_size,
                ..generator.clone()
            })?,
            *test_size,
        ),
        DatasetConfig::Jsonl { train, test } => Dataset::new(
            load_classification_corpus(train)?,
            load_classification_corpus(test)?,
        ),
        DatasetConfig::Conll { train, test } => {
            Dataset::new(load_tagging_corpus(train)?, load_tagging_corpus(test)?)
        }
    }
}

fn split_tail(all: Corpus, test_size: usize) -> Result<Dataset> {
    if test_size == 0 || test_size >= all.len() {
        return Err(Error::invalid(format!("test_size {test_size} leaves no training data")));
    }
    let ids: Vec<InstanceId> = all.ids().collect();
    let (train, test) = ids.split_at(ids.len() - test_size);
    Ok(Dataset {
        train: all.subset(train)?,
        test: all.subset(test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Labeled instances after this iteration's query.
    pub labeled_count: usize,
    pub labeled_tokens: usize,
    pub labeled_fraction: f64,
    pub query_size: usize,
    /// SHA-256 over the sorted queried ids.
    pub query_digest: String,
    /// Pool instances scored this iteration.
    pub rescored_count: usize,
    pub pool_size: usize,
    pub full_pass: bool,
    pub metric_name: String,
    pub metric: f64,
    /// Acquisition model training.
    pub train_s: f64,
    /// Pool prediction and scoring.
    pub inference_s: f64,
    /// The whole acquisition step: training, scoring and selection.
    pub overall_s: f64,
    /// Successor training and evaluation, outside `overall_s`.
    pub successor_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<IterationReport>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Concurrent seeds; 1 keeps timings comparable.
    pub parallel: usize,
    /// Scores, UPS records and PLASM audits are written here when set.
    pub audit_dir: Option<PathBuf>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(run_seed: u64, salt: u64) -> u64 {
    splitmix(run_seed ^ splitmix(salt))
}

const SALT_HELD_OUT: u64 = 1;
const SALT_SEED_SET: u64 = 2;
const SALT_MODEL: u64 = 3;
const SALT_RANDOM: u64 = 4;
const SALT_UPS: u64 = 5;

fn seeded_spec(spec: &ModelSpec, run_seed: u64) -> ModelSpec {
    spec.clone()
        .with_seed(spec.rng_seed ^ derive_seed(run_seed, SALT_MODEL))
}

pub fn query_digest(ids: &[InstanceId]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.0.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one seed needs, fixed before the first iteration.
struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    train: Corpus,
    held_out: Corpus,
    test: &'a Corpus,
    test_ids: BTreeSet<InstanceId>,
    universe: BTreeSet<InstanceId>,
    acquisition: ModelSpec,
    plan: SuccessorPlan,
    run_seed: u64,
    /// Instances per query, or tokens per query in budget mode.
    query_size: usize,
}

impl<'a> Setup<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a Dataset, run_seed: u64) -> Result<Self> {
        let (train, held_out) = split_held_out(
            &data.train,
            cfg.held_out_fraction,
            derive_seed(run_seed, SALT_HELD_OUT),
        )?;
        let universe: BTreeSet<InstanceId> = train.ids().collect();
        let test_ids: BTreeSet<InstanceId> = data.test.ids().collect();
        if let Some(id) = universe.intersection(&test_ids).next() {
            return Err(Error::contract(format!("test id {id} also in training data")));
        }
        let unit_total = if cfg.token_budget_mode() {
            train.total_tokens()
        } else {
            train.len()
        };
        let query_size = ((cfg.resolved_query_fraction() * unit_total as f64).round() as usize).max(1);
        let plan = match cfg.successor_plan() {
            SuccessorPlan::Plasm(mut p) => {
                p.teacher = seeded_spec(&p.teacher, run_seed);
                p.successor = seeded_spec(&p.successor, run_seed);
                SuccessorPlan::Plasm(p)
            }
            SuccessorPlan::Mismatched(s) => SuccessorPlan::Mismatched(seeded_spec(&s, run_seed)),
            SuccessorPlan::Same => SuccessorPlan::Same,
        };
        Ok(Setup {
            cfg,
            acquisition: seeded_spec(&cfg.acquisition_spec(), run_seed),
            train,
            held_out,
            test: &data.test,
            test_ids,
            universe,
            plan,
            run_seed,
            query_size,
        })
    }

    fn tokens(&self, id: InstanceId) -> usize {
        self.train.instance(id).map(|x| x.token_count).unwrap_or(0)
    }

    /// Random seed set: a fixed count, or as many shuffled instances as fit
    /// the token budget (at least the shortest one).
    fn seed_set(&self) -> Vec<InstanceId> {
        let mut ids: Vec<InstanceId> = self.universe.iter().copied().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.run_seed, SALT_SEED_SET)));
        let fraction = self.cfg.resolved_seed_fraction();
        if !self.cfg.token_budget_mode() {
            let n = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
            ids.truncate(n);
            return ids;
        }
        let budget = (fraction * self.train.total_tokens() as f64).round() as usize;
        let mut used = 0;
        let mut out = Vec::new();
        for id in &ids {
            let t = self.tokens(*id);
            if used + t <= budget {
                used += t;
                out.push(*id);
            }
        }
        if out.is_empty() {
            let shortest = self
                .universe
                .iter()
                .min_by_key(|id| (self.tokens(**id), **id))
                .copied()
                .expect("universe is not empty");
            out.push(shortest);
        }
        out
    }

    fn labeled_data(&self, ids: &BTreeSet<InstanceId>) -> Result<(Vec<&Instance>, Vec<GoldLabel>)> {
        let xs = ids.iter().map(|&id| self.train.instance(id)).collect::<Result<Vec<_>>>()?;
        let ys = ids
            .iter()
            .map(|&id| self.train.label(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok((xs, ys))
    }

    fn fit(&self, spec: &ModelSpec, ids: &BTreeSet<InstanceId>) -> Result<Model> {
        let (xs, ys) = self.labeled_data(ids)?;
        let trained = train_with(
            spec,
            &xs,
            Supervision::Hard(&ys),
            self.train.num_labels(),
            CheckpointPolicy::FinalOnly,
        )?;
        Ok(std::sync::Arc::try_unwrap(trained.model).unwrap_or_else(|m| (*m).clone()))
    }

    fn check_no_leakage(&self, pool: &PoolState) -> Result<()> {
        pool.check_invariants(&self.universe)?;
        let leaked = pool
            .labeled()
            .iter()
            .chain(pool.unlabeled())
            .find(|id| self.test_ids.contains(id));
        match leaked {
            Some(id) => Err(Error::contract(format!("test instance {id} entered training data"))),
            None => Ok(()),
        }
    }

    fn score(
        &self,
        model: &Model,
        candidates: &[InstanceId],
        labeled: &BTreeSet<InstanceId>,
        iteration: usize,
    ) -> Result<Vec<Score>> {
        let xs = candidates
            .iter()
            .map(|&id| self.train.instance(id))
            .collect::<Result<Vec<_>>>()?;
        match self.cfg.strategy {
            Strategy::Random => score_random(
                candidates,
                derive_seed(self.run_seed, SALT_RANDOM ^ ((iteration as u64) << 8)),
            ),
            Strategy::Lc => score_lc(candidates, &model.predict_probs(&xs)?),
            Strategy::Mnlp => score_mnlp(candidates, &model.predict_probs(&xs)?),
            Strategy::Md => {
                let (lx, ly) = self.labeled_data(labeled)?;
                let train_h = dense_hidden(&model.predict(&lx)?)?;
                let labels: Vec<usize> = ly.iter().filter_map(GoldLabel::as_class).collect();
                let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let stats = fit_gaussian_stats(&train_h, &labels, &classes, self.cfg.md_regularization)?;
                score_md(candidates, &dense_hidden(&model.predict(&xs)?)?, &stats)
            }
        }
    }

    fn select(&self, scores: &[Score]) -> Vec<InstanceId> {
        if !self.cfg.token_budget_mode() {
            return select_top(scores, self.query_size);
        }
        let picked = select_top_budget(scores, |id| self.tokens(id), self.query_size);
        if picked.is_empty() && !scores.is_empty() {
            log::warn!("no candidate fits the token budget of {}; querying the top one", self.query_size);
            return select_top(scores, 1);
        }
        picked
    }
}

fn dense_hidden(outputs: &[crate::models::ProbabilityOutput]) -> Result<Vec<Vec<f64>>> {
    outputs
        .iter()
        .map(|o| match &o.hidden {
            Hidden::Instance(h) => Ok(h.to_dense()),
            Hidden::Tokens(_) => Err(Error::invalid("MD needs instance-level hidden vectors")),
        })
        .collect()
}

fn secs(t: Instant) -> f64 {
    (t.elapsed().as_secs_f64() * 1e6).round() / 1e6
}

fn audit_path(dir: &Path, seed: u64, name: String) -> Result<PathBuf> {
    let d = dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d.join(name))
}

fn write_file(path: &Path, f: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f(&mut file)
}

/// Runs one seed. Failures after setup are recorded in the returned run.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    run_seed: u64,
    audit_dir: Option<&Path>,
) -> Result<SeedRun> {
    let setup = Setup::new(cfg, data, run_seed)?;
    let mut reports = Vec::new();
    let failure = run_loop(&setup, audit_dir, &mut reports).err().map(|e| {
        log::error!("seed {run_seed}: {e}");
        e.to_string()
    });
    Ok(SeedRun {
        seed: run_seed,
        reports,
        failure,
    })
}

fn run_loop(s: &Setup<'_>, audit_dir: Option<&Path>, reports: &mut Vec<IterationReport>) -> Result<()> {
    let cfg = s.cfg;
    let mut pool = PoolState::new(s.universe.iter().copied(), s.seed_set())?;
    s.check_no_leakage(&pool)?;
    let mut store = UncertaintyStore::new();
    let mut ups = cfg.ups.clone();
    ups.seed = derive_seed(s.run_seed, SALT_UPS ^ cfg.ups.seed);
    let universe_size = s.universe.len() as f64;

    for t in 1..=cfg.iterations {
        if pool.unlabeled().is_empty() {
            log::warn!("seed {}: pool exhausted after {} iterations", s.run_seed, t - 1);
            break;
        }
        let pool_size = pool.unlabeled().len();

        let start = Instant::now();
        let acq = s.fit(&s.acquisition, pool.labeled())?;
        let train_s = secs(start);

        let infer = Instant::now();
        // the first iteration always scores everything, warm-up or not
        let full_pass = !ups.enabled || store.is_empty() || ups.is_full_pass(t);
        let candidates: Vec<InstanceId> = if !full_pass {
            store.subsample(pool.unlabeled(), &ups, t)?
        } else {
            pool.unlabeled().iter().copied().collect()
        };
        let scores = s.score(&acq, &candidates, pool.labeled(), t)?;
        let inference_s = secs(infer);

        if ups.enabled {
            store.merge_scores(&scores, t, pool.unlabeled())?;
        }
        let query = s.select(&scores);
        let overall_s = train_s + secs(infer);
        drop(acq);

        if let Some(dir) = audit_dir {
            write_file(&audit_path(dir, s.run_seed, format!("iter-{t:03}-scores.csv"))?, |f| {
                write_scores_csv(f, cfg.strategy, t, &scores)
            })?;
            if ups.enabled {
                write_file(&audit_path(dir, s.run_seed, format!("iter-{t:03}-ups.csv"))?, |f| {
                    store.write_csv(f)
                })?;
            }
        }

        pool.reveal_labels(&query)?;
        store.remove_labeled(&query);
        s.check_no_leakage(&pool)?;
        if ups.enabled && store.len() != pool.unlabeled().len() {
            return Err(Error::contract("uncertainty records out of sync with the pool"));
        }

        let succ = Instant::now();
        let (metric, audit) = successor_metric(s, &pool)?;
        let successor_s = secs(succ);
        if let (Some(dir), Some(a)) = (audit_dir, audit) {
            let path = audit_path(dir, s.run_seed, format!("iter-{t:03}-plasm.json"))?;
            let json = a.to_json()?;
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }

        let labeled_tokens = pool.labeled().iter().map(|&id| s.tokens(id)).sum();
        log::info!(
            "seed {} iteration {t}: labeled {} {} {:.4} (train {:.3}s, inference {:.3}s, rescored {})",
            s.run_seed,
            pool.labeled().len(),
            cfg.resolved_task().metric_name(),
            metric,
            train_s,
            inference_s,
            candidates.len()
        );
        reports.push(IterationReport {
            iteration: t,
            labeled_count: pool.labeled().len(),
            labeled_tokens,
            labeled_fraction: pool.labeled().len() as f64 / universe_size,
            query_size: query.len(),
            query_digest: query_digest(&query),
            rescored_count: candidates.len(),
            pool_size,
            full_pass,
            metric_name: cfg.resolved_task().metric_name().to_string(),
            metric,
            train_s,
            inference_s,
            overall_s,
            successor_s,
        });
    }
    Ok(())
}

fn successor_metric(s: &Setup<'_>, pool: &PoolState) -> Result<(f64, Option<PlasmAudit>)> {
    match &s.plan {
        SuccessorPlan::Same => {
            let m = s.fit(&s.acquisition, pool.labeled())?;
            Ok((metrics::evaluate(&m, s.test)?, None))
        }
        SuccessorPlan::Mismatched(spec) => {
            let m = s.fit(spec, pool.labeled())?;
            Ok((metrics::evaluate(&m, s.test)?, None))
        }
        SuccessorPlan::Plasm(p) => {
            let gold: Vec<InstanceId> = pool.labeled().iter().copied().collect();
            let rest: Vec<InstanceId> = pool.unlabeled().iter().copied().collect();
            if rest.iter().any(|id| s.test_ids.contains(id)) {
                return Err(Error::contract("test instance in the pseudo-labeling pool"));
            }
            let out = run_plasm(p, &s.train, &gold, &rest, &s.held_out, true)?;
            Ok((metrics::evaluate(out.successor.model.as_ref(), s.test)?, Some(out.audit)))
        }
    }
}

/// Runs every configured seed. Config errors fail the call; errors inside a
/// seed's loop are recorded in that seed's `failure`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    run_experiment_on(cfg, &data, opts)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset, opts: &RunOptions) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    if data.train.task() != cfg.resolved_task() {
        return Err(Error::invalid("dataset task differs from the configured task"));
    }
    let audit = opts.audit_dir.as_deref();
    let parallel = opts.parallel.max(1);
    if parallel == 1 {
        return cfg.seeds.iter().map(|&seed| run_seed(cfg, data, seed, audit)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {parallel} workers: {e}")))?;
    pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, data, seed, audit))
            .collect()
    })
}

/// Mean coverage (over seeds) per `(k, probed iteration)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub ks: Vec<f64>,
    pub iterations: Vec<usize>,
    /// `values[i][j]` is the coverage for `ks[i]` at `iterations[j]`.
    pub values: Vec<Vec<f64>>,
    pub per_seed: BTreeMap<u64, Vec<Vec<f64>>>,
}

impl CoverageTable {
    /// Rows are k fractions (as percentages), columns probed iterations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("top_k");
        for it in &self.iterations {
            out.push_str(&format!(",iter_{it}"));
        }
        out.push('\n');
        for (k, row) in self.ks.iter().zip(&self.values) {
            out.push_str(&format!("{}", k * 100.0));
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// How many of the instances the model trained after iteration `t` would
/// query were already in the top-k of the ranking from iteration `t`'s
/// acquisition model. Runs full scoring regardless of the UPS setting.
pub fn measure_coverage_table(cfg: &ExperimentConfig, ks: &[f64], iterations: &[usize]) -> Result<CoverageTable> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    measure_coverage_table_on(cfg, &data, ks, iterations)
}

pub fn measure_coverage_table_on(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ks: &[f64],
    iterations: &[usize],
) -> Result<CoverageTable> {
    if cfg.ups.enabled {
        return Err(Error::Config(vec![
            "ups.enabled must be false when measuring coverage".into(),
        ]));
    }
    if ks.is_empty() || iterations.is_empty() {
        return Err(Error::invalid("coverage needs at least one k and one iteration"));
    }
    if let Some(k) = ks.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
        return Err(Error::invalid(format!("k = {k} outside (0, 1]")));
    }
    if let Some(t) = iterations.iter().find(|&&t| t == 0 || t > cfg.iterations) {
        return Err(Error::invalid(format!(
            "probe iteration {t} outside the run length 1..={}",
            cfg.iterations
        )));
    }
    let last = *iterations.iter().max().expect("non-empty");
    let mut per_seed = BTreeMap::new();
    for &seed in &cfg.seeds {
        let s = Setup::new(cfg, data, seed)?;
        let mut pool = PoolState::new(s.universe.iter().copied(), s.seed_set())?;
        let mut stale: Option<Vec<Score>> = None;
        let mut table = vec![vec![0.0; iterations.len()]; ks.len()];
        for t in 1..=last + 1 {
            let acq = s.fit(&s.acquisition, pool.labeled())?;
            let candidates: Vec<InstanceId> = pool.unlabeled().iter().copied().collect();
            if candidates.is_empty() {
                return Err(Error::invalid(format!("pool exhausted before iteration {t}")));
            }
            let fresh = s.score(&acq, &candidates, pool.labeled(), t)?;
            let query = s.select(&fresh);
            if let (Some(old), Some(j)) = (&stale, iterations.iter().position(|&p| p + 1 == t)) {
                let current: BTreeSet<InstanceId> = candidates.iter().copied().collect();
                let old: Vec<Score> = old.iter().filter(|s| current.contains(&s.id)).copied().collect();
                for (i, &k) in ks.iter().enumerate() {
                    table[i][j] = coverage_statistic(&fresh, &old, k, query.len())?;
                }
            }
            pool.reveal_labels(&query)?;
            s.check_no_leakage(&pool)?;
            stale = Some(fresh);
        }
        log::info!("coverage seed {seed} done");
        per_seed.insert(seed, table);
    }
    let n = per_seed.len() as f64;
    let values = (0..ks.len())
        .map(|i| {
            (0..iterations.len())
                .map(|j| per_seed.values().map(|t| t[i][j]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(CoverageTable {
        ks: ks.to_vec(),
        iterations: iterations.to_vec(),
        values,
        per_seed,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("correlation needs two equally long vectors of length >= 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("correlation undefined for a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of the LC scores two models give the same pool.
pub fn uncertainty_correlation(a: &[Probs], b: &[Probs]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("outputs cover different pools"));
    }
    let ids: Vec<InstanceId> = (0..a.len() as u64).map(InstanceId).collect();
    let la: Vec<f64> = score_lc(&ids, a)?.iter().map(|s| s.value).collect();
    let lb: Vec<f64> = score_lc(&ids, b)?.iter().map(|s| s.value).collect();
    pearson(&la, &lb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub models: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub train_size: usize,
    pub pool_size: usize,
}

impl CorrelationMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", self.models.join(","));
        for (name, row) in self.models.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Trains every model on the same random seed-fraction sample and
/// correlates their LC scores over the rest of the training data.
pub fn correlation_matrix(cfg: &ExperimentConfig, data: &Dataset, models: &[ModelSpec], seed: u64) -> Result<CorrelationMatrix> {
    if models.len() < 2 {
        return Err(Error::invalid("correlation needs at least two models"));
    }
    let s = Setup::new(cfg, data, seed)?;
    let labeled: BTreeSet<InstanceId> = s.seed_set().into_iter().collect();
    let rest: Vec<&Instance> = s
        .universe
        .difference(&labeled)
        .map(|&id| s.train.instance(id))
        .collect::<Result<_>>()?;
    let outputs: Vec<Vec<Probs>> = models
        .iter()
        .map(|spec| s.fit(&seeded_spec(spec, seed), &labeled)?.predict_probs(&rest))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![1.0; models.len()]; models.len()];
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let r = uncertainty_correlation(&outputs[i], &outputs[j])?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        models: models
            .iter()
            .map(|m| format!("{}:{}", m.family, capacity_name(m)))
            .collect(),
        values,
        train_size: labeled.len(),
        pool_size: rest.len(),
    })
}

fn capacity_name(m: &ModelSpec) -> &'static str {
    match m.capacity {
        crate::models::Capacity::Small => "small",
        crate::models::Capacity::Large => "large",
    }
}
