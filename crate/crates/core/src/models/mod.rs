//! Pluggable probabilistic models and the built-in desk-scale families.
//!
//! Every model implements [`ProbabilisticModel`]: class (or per-token tag)
//! distributions, a hidden representation, and gradients of the
//! cross-entropy loss w.r.t. the last layer's weights. Three families ship
//! with the crate:
//!
//! * `linear-ngram`: softmax regression over hashed word 1–2-grams. The
//!   hidden representation is the hashed feature vector itself.
//! * `feedforward`: one ReLU hidden layer over the same features. The hidden
//!   representation is the hidden activation vector.
//! * `window-tagger`: independent per-token softmax regression over hashed
//!   features of a ±2 token window.
//!
//! Training is plain mini-batch gradient descent (batch 32, fixed learning
//! rate) on cross-entropy against hard labels or soft target distributions.
//! L2 decay is applied to the rows of the input matrix touched by a batch.

mod layers;
mod snapshot;

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldLabel, Instance, Payload, Task};
use crate::error::{Error, Result};
use crate::features::{Featurizer, SparseVector};

pub use layers::{softmax_in_place, Target};
use layers::{outer_sparse, sq_norm, SparseSoftmax};
pub use snapshot::{load_model, read_model, save_model, write_model, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

pub const BATCH_SIZE: usize = 32;
const HASH_SEED: u64 = 0x51_7e_a1_5e;
const FF_INPUT_INIT: f64 = 0.01;
const FF_HIDDEN_BIAS_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    LinearNgram,
    Feedforward,
    WindowTagger,
}

impl ModelFamily {
    pub fn task(self) -> Task {
        match self {
            ModelFamily::LinearNgram | ModelFamily::Feedforward => Task::Classification,
            ModelFamily::WindowTagger => Task::Tagging,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::LinearNgram => "linear-ngram",
            ModelFamily::Feedforward => "feedforward",
            ModelFamily::WindowTagger => "window-tagger",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capacity {
    Small,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub capacity: Capacity,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub rng_seed: u64,
}

impl ModelSpec {
    /// Built-in capacity presets. Small presets stand in for distilled
    /// acquisition models, large ones for their full-size teachers.
    pub fn preset(family: ModelFamily, capacity: Capacity) -> Self {
        let (feature_dim, epochs) = match capacity {
            Capacity::Small => (1 << 15, 20),
            Capacity::Large => (1 << 18, 40),
        };
        let (hidden_dim, learning_rate, l2) = match (family, capacity) {
            (ModelFamily::LinearNgram, _) => (0, 8.0, 3e-4),
            (ModelFamily::WindowTagger, _) => (0, 4.0, 1e-4),
            (ModelFamily::Feedforward, Capacity::Small) => (32, 0.5, 1e-4),
            (ModelFamily::Feedforward, Capacity::Large) => (64, 0.5, 1e-4),
        };
        ModelSpec {
            family,
            capacity,
            feature_dim,
            hidden_dim,
            epochs,
            learning_rate,
            l2,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn task(&self) -> Task {
        self.family.task()
    }

    /// All constraint violations, prefixed with `field`.
    pub fn violations(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.feature_dim == 0 || self.feature_dim > u32::MAX as usize {
            out.push(format!("{field}.feature_dim must be in 1..=2^32-1"));
        }
        match self.family {
            ModelFamily::Feedforward if self.hidden_dim == 0 => {
                out.push(format!("{field}.hidden_dim must be positive for feedforward"))
            }
            ModelFamily::LinearNgram | ModelFamily::WindowTagger if self.hidden_dim != 0 => {
                out.push(format!("{field}.hidden_dim must be 0 for {}", self.family))
            }
            _ => {}
        }
        if self.epochs == 0 {
            out.push(format!("{field}.epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("{field}.learning_rate must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            out.push(format!("{field}.l2 must be non-negative"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("model");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Output distribution(s) of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Probs {
    Class(Vec<f64>),
    Tokens(Vec<Vec<f64>>),
}

impl Probs {
    pub fn argmax_label(&self) -> GoldLabel {
        match self {
            Probs::Class(p) => GoldLabel::Class(argmax(p)),
            Probs::Tokens(ps) => GoldLabel::Tags(ps.iter().map(|p| argmax(p)).collect()),
        }
    }

    /// Every vector must be non-negative and sum to one within 1e-6.
    pub fn check_valid(&self) -> Result<()> {
        fn one(p: &[f64]) -> Result<()> {
            if p.is_empty() {
                return Err(Error::InvalidDistribution("empty vector".into()));
            }
            if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidDistribution(format!("bad entry in {p:?}")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution(format!("sums to {s}")));
            }
            Ok(())
        }
        match self {
            Probs::Class(p) => one(p),
            Probs::Tokens(ps) => ps.iter().try_for_each(|p| one(p)),
        }
    }

    fn width(&self) -> Option<usize> {
        match self {
            Probs::Class(p) => Some(p.len()),
            Probs::Tokens(ps) => ps.first().map(Vec::len),
        }
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum Hidden {
    Instance(SparseVector),
    Tokens(Vec<SparseVector>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityOutput {
    pub probs: Probs,
    pub hidden: Hidden,
}

/// The contract every model plugged into the engine satisfies.
pub trait ProbabilisticModel: Send + Sync + fmt::Debug {
    fn spec(&self) -> &ModelSpec;
    fn task(&self) -> Task;
    fn num_labels(&self) -> usize;
    /// Width of the hidden representation returned by [`Self::predict`].
    fn hidden_dim(&self) -> usize;
    fn predict_probs(&self, xs: &[&Instance]) -> Result<Vec<Probs>>;
    fn predict(&self, xs: &[&Instance]) -> Result<Vec<ProbabilityOutput>>;
    /// Cross-entropy of `label` (summed over tokens for tagging).
    fn loss(&self, x: &Instance, label: &GoldLabel) -> Result<f64>;
    /// Gradient of [`Self::loss`] w.r.t. the last layer's weights, flattened
    /// class-major (`row c` = weights into output `c`). Biases excluded.
    fn last_layer_gradient(&self, x: &Instance, label: &GoldLabel) -> Result<SparseVector>;
    /// Squared gradient norm used for self-influence. Tagging models sum
    /// the per-token squared norms instead of squaring the summed gradient.
    fn gradient_sq_norm(&self, x: &Instance, label: &GoldLabel) -> Result<f64> {
        Ok(self.last_layer_gradient(x, label)?.norm_sq())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    spec: ModelSpec,
    task: Task,
    featurizer: Featurizer,
    pub(crate) layer: SparseSoftmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardModel {
    spec: ModelSpec,
    featurizer: Featurizer,
    /// feature-major, `feature_dim * hidden`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// class-major, `classes * hidden`
    w2: Vec<f64>,
    b2: Vec<f64>,
    classes: usize,
}

/// A trained built-in model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    /// `linear-ngram` (classification) or `window-tagger` (tagging).
    Linear(LinearModel),
    Feedforward(FeedforwardModel),
}

fn check_label(label: &GoldLabel, x: &Instance, task: Task, classes: usize) -> Result<()> {
    match (task, label) {
        (Task::Classification, GoldLabel::Class(c)) => {
            if *c >= classes {
                return Err(Error::LabelOutOfVocabulary {
                    label: *c,
                    size: classes,
                });
            }
        }
        (Task::Tagging, GoldLabel::Tags(tags)) => {
            if tags.len() != x.token_count {
                return Err(Error::invalid(format!(
                    "instance {}: {} tags for {} tokens",
                    x.id,
                    tags.len(),
                    x.token_count
                )));
            }
            if let Some(&t) = tags.iter().find(|&&t| t >= classes) {
                return Err(Error::LabelOutOfVocabulary {
                    label: t,
                    size: classes,
                });
            }
        }
        _ => return Err(Error::invalid(format!("label kind does not match {task:?}"))),
    }
    Ok(())
}

fn expect_text(x: &Instance) -> Result<&str> {
    match &x.payload {
        Payload::Text(t) => Ok(t),
        Payload::Tokens(_) => Err(Error::ModalityMismatch {
            expected: "text",
            found: "tokens",
        }),
    }
}

fn expect_tokens(x: &Instance) -> Result<&[String]> {
    match &x.payload {
        Payload::Tokens(t) => Ok(t),
        Payload::Text(_) => Err(Error::ModalityMismatch {
            expected: "tokens",
            found: "text",
        }),
    }
}

impl LinearModel {
    fn features(&self, x: &Instance) -> Result<Vec<SparseVector>> {
        match self.task {
            Task::Classification => Ok(vec![self.featurizer.text(expect_text(x)?)]),
            Task::Tagging => {
                let toks = expect_tokens(x)?;
                Ok((0..toks.len()).map(|j| self.featurizer.token(toks, j)).collect())
            }
        }
    }

    fn output(&self, feats: Vec<SparseVector>, keep_hidden: bool) -> ProbabilityOutput {
        let probs: Vec<Vec<f64>> = feats.iter().map(|f| self.layer.probs(f)).collect();
        let hidden = if keep_hidden { feats } else { Vec::new() };
        match self.task {
            Task::Classification => ProbabilityOutput {
                probs: Probs::Class(probs.into_iter().next().expect("one unit")),
                hidden: Hidden::Instance(hidden.into_iter().next().unwrap_or_default()),
            },
            Task::Tagging => ProbabilityOutput {
                probs: Probs::Tokens(probs),
                hidden: Hidden::Tokens(hidden),
            },
        }
    }
}

impl FeedforwardModel {
    fn hidden_of(&self, x: &SparseVector) -> (Vec<f64>, Vec<f64>) {
        let h = self.b1.len();
        let mut pre = self.b1.clone();
        for &(j, v) in &x.entries {
            let row = &self.w1[j as usize * h..(j as usize + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += w * v;
            }
        }
        let act = pre.iter().map(|p| p.max(0.0)).collect();
        (pre, act)
    }

    fn probs_of_hidden(&self, act: &[f64]) -> Vec<f64> {
        let h = act.len();
        let mut z = self.b2.clone();
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += self.w2[c * h..(c + 1) * h].iter().zip(act).map(|(w, a)| w * a).sum::<f64>();
        }
        softmax_in_place(&mut z);
        z
    }
}

impl Model {
    fn spec_ref(&self) -> &ModelSpec {
        match self {
            Model::Linear(m) => &m.spec,
            Model::Feedforward(m) => &m.spec,
        }
    }

    fn forward(&self, x: &Instance, keep_hidden: bool) -> Result<ProbabilityOutput> {
        match self {
            Model::Linear(m) => Ok(m.output(m.features(x)?, keep_hidden)),
            Model::Feedforward(m) => {
                let f = m.featurizer.text(expect_text(x)?);
                let (_, act) = m.hidden_of(&f);
                let probs = m.probs_of_hidden(&act);
                let hidden = if keep_hidden {
                    SparseVector::from_dense(&act)
                } else {
                    SparseVector::default()
                };
                Ok(ProbabilityOutput {
                    probs: Probs::Class(probs),
                    hidden: Hidden::Instance(hidden),
                })
            }
        }
    }

    /// Per-unit (input to last layer, residual) pairs.
    fn residual_units(&self, x: &Instance, label: &GoldLabel) -> Result<Vec<(SparseVector, Vec<f64>)>> {
        check_label(label, x, self.task(), self.num_labels())?;
        let out = self.forward(x, true)?;
        Ok(match (out.probs, out.hidden, label) {
            (Probs::Class(p), Hidden::Instance(h), GoldLabel::Class(c)) => {
                vec![(h, Target::Hard(*c).residual(&p))]
            }
            (Probs::Tokens(ps), Hidden::Tokens(hs), GoldLabel::Tags(tags)) => hs
                .into_iter()
                .zip(ps)
                .zip(tags)
                .map(|((h, p), &t)| (h, Target::Hard(t).residual(&p)))
                .collect(),
            _ => unreachable!("label checked against task"),
        })
    }

    /// Class-major flattened last-layer weights.
    pub fn last_layer_weights(&self) -> Vec<f64> {
        match self {
            Model::Linear(m) => m.layer.flat_weights(),
            Model::Feedforward(m) => m.w2.clone(),
        }
    }

    /// A copy of this model with its last-layer weights replaced.
    pub fn with_last_layer_weights(&self, flat: &[f64]) -> Result<Model> {
        let expected = self.last_layer_weights().len();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} last-layer weights, got {}",
                flat.len()
            )));
        }
        let mut out = self.clone();
        match &mut out {
            Model::Linear(m) => m.layer.set_flat_weights(flat),
            Model::Feedforward(m) => m.w2.copy_from_slice(flat),
        }
        Ok(out)
    }

    /// A model with all-zero weights; it predicts the uniform distribution.
    pub fn zeroed(spec: &ModelSpec, num_labels: usize) -> Result<Model> {
        spec.validate()?;
        if num_labels == 0 {
            return Err(Error::invalid("model needs at least one label"));
        }
        let featurizer = Featurizer::new(spec.feature_dim, HASH_SEED);
        Ok(match spec.family {
            ModelFamily::LinearNgram | ModelFamily::WindowTagger => Model::Linear(LinearModel {
                spec: spec.clone(),
                task: spec.task(),
                featurizer,
                layer: SparseSoftmax::zeros(spec.feature_dim, num_labels),
            }),
            ModelFamily::Feedforward => Model::Feedforward(FeedforwardModel {
                spec: spec.clone(),
                featurizer,
                w1: vec![0.0; spec.feature_dim * spec.hidden_dim],
                b1: vec![0.0; spec.hidden_dim],
                w2: vec![0.0; num_labels * spec.hidden_dim],
                b2: vec![0.0; num_labels],
                classes: num_labels,
            }),
        })
    }

    fn initialize(spec: &ModelSpec, num_labels: usize) -> Result<Model> {
        let mut model = Model::zeroed(spec, num_labels)?;
        if let Model::Feedforward(m) = &mut model {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x1717_1717);
            for w in &mut m.w1 {
                *w = rng.random_range(-FF_INPUT_INIT..FF_INPUT_INIT);
            }
            m.b1.fill(FF_HIDDEN_BIAS_INIT);
            let bound = (6.0 / (spec.hidden_dim + num_labels) as f64).sqrt();
            for w in &mut m.w2 {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    /// One mini-batch gradient step with gradients taken at the current
    /// weights.
    fn step(&mut self, batch: &[&[(SparseVector, Target)]], lr: f64) {
        let n = batch.len() as f64;
        let scale = lr / n;
        match self {
            Model::Linear(m) => {
                let decay = lr * m.spec.l2;
                let units: Vec<(&SparseVector, Vec<f64>)> = batch
                    .iter()
                    .flat_map(|inst| inst.iter())
                    .map(|(x, t)| (x, t.residual(&m.layer.probs(x))))
                    .collect();
                m.layer.apply(&units, scale, decay);
            }
            Model::Feedforward(m) => {
                let decay = lr * m.spec.l2;
                let h = m.b1.len();
                let c = m.classes;
                let mut g_w2 = vec![0.0; c * h];
                let mut g_b2 = vec![0.0; c];
                let mut g_b1 = vec![0.0; h];
                let mut rows: Vec<(&SparseVector, Vec<f64>)> = Vec::new();
                for (x, t) in batch.iter().flat_map(|inst| inst.iter()) {
                    let (pre, act) = m.hidden_of(x);
                    let r = t.residual(&m.probs_of_hidden(&act));
                    let mut delta_h = vec![0.0; h];
                    for (ci, rc) in r.iter().enumerate() {
                        g_b2[ci] += rc;
                        let w_row = &m.w2[ci * h..(ci + 1) * h];
                        for k in 0..h {
                            g_w2[ci * h + k] += rc * act[k];
                            delta_h[k] += rc * w_row[k];
                        }
                    }
                    for k in 0..h {
                        if pre[k] <= 0.0 {
                            delta_h[k] = 0.0;
                        }
                        g_b1[k] += delta_h[k];
                    }
                    rows.push((x, delta_h));
                }
                for (w, g) in m.w2.iter_mut().zip(&g_w2) {
                    *w -= scale * g + decay * *w;
                }
                for (b, g) in m.b2.iter_mut().zip(&g_b2) {
                    *b -= scale * g;
                }
                for (b, g) in m.b1.iter_mut().zip(&g_b1) {
                    *b -= scale * g;
                }
                let mut touched = Vec::new();
                for (x, delta_h) in &rows {
                    for &(j, v) in &x.entries {
                        let row = &mut m.w1[j as usize * h..(j as usize + 1) * h];
                        for (w, d) in row.iter_mut().zip(delta_h) {
                            *w -= scale * v * d;
                        }
                        touched.push(j);
                    }
                }
                if decay > 0.0 {
                    touched.sort_unstable();
                    touched.dedup();
                    for j in touched {
                        for w in &mut m.w1[j as usize * h..(j as usize + 1) * h] {
                            *w -= decay * *w;
                        }
                    }
                }
            }
        }
    }

    fn featurize_all(&self, x: &Instance) -> Result<Vec<SparseVector>> {
        match self {
            Model::Linear(m) => m.features(x),
            Model::Feedforward(m) => Ok(vec![m.featurizer.text(expect_text(x)?)]),
        }
    }
}

impl ProbabilisticModel for Model {
    fn spec(&self) -> &ModelSpec {
        self.spec_ref()
    }

    fn task(&self) -> Task {
        match self {
            Model::Linear(m) => m.task,
            Model::Feedforward(_) => Task::Classification,
        }
    }

    fn num_labels(&self) -> usize {
        match self {
            Model::Linear(m) => m.layer.classes,
            Model::Feedforward(m) => m.classes,
        }
    }

    fn hidden_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.layer.dim,
            Model::Feedforward(m) => m.b1.len(),
        }
    }

    fn predict_probs(&self, xs: &[&Instance]) -> Result<Vec<Probs>> {
        xs.par_iter().map(|x| self.forward(x, false).map(|o| o.probs)).collect()
    }

    fn predict(&self, xs: &[&Instance]) -> Result<Vec<ProbabilityOutput>> {
        xs.par_iter().map(|x| self.forward(x, true)).collect()
    }

    fn loss(&self, x: &Instance, label: &GoldLabel) -> Result<f64> {
        check_label(label, x, self.task(), self.num_labels())?;
        Ok(match (self.forward(x, false)?.probs, label) {
            (Probs::Class(p), GoldLabel::Class(c)) => Target::Hard(*c).cross_entropy(&p),
            (Probs::Tokens(ps), GoldLabel::Tags(tags)) => ps
                .iter()
                .zip(tags)
                .map(|(p, &t)| Target::Hard(t).cross_entropy(p))
                .sum(),
            _ => unreachable!("label checked against task"),
        })
    }

    fn last_layer_gradient(&self, x: &Instance, label: &GoldLabel) -> Result<SparseVector> {
        let units = self.residual_units(x, label)?;
        let dim = self.num_labels() * self.hidden_dim();
        let mut entries = Vec::new();
        for (h, r) in &units {
            entries.extend(outer_sparse(r, h).entries);
        }
        Ok(SparseVector::from_unsorted(dim, entries))
    }

    fn gradient_sq_norm(&self, x: &Instance, label: &GoldLabel) -> Result<f64> {
        // ‖r ⊗ h‖² = ‖r‖² ‖h‖², no need to materialize the outer product
        Ok(self
            .residual_units(x, label)?
            .iter()
            .map(|(h, r)| sq_norm(r) * h.norm_sq())
            .sum())
    }
}

/// Learning-rate-tagged snapshot taken at the end of an epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub learning_rate: f64,
    pub model: Arc<dyn ProbabilisticModel>,
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointTrace {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CheckpointPolicy {
    /// One snapshot per epoch.
    #[default]
    EveryEpoch,
    /// Only the final model; keeps memory flat for models that are never
    /// used for influence estimation.
    FinalOnly,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Arc<Model>,
    pub trace: CheckpointTrace,
}

pub enum Supervision<'a> {
    Hard(&'a [GoldLabel]),
    Soft(&'a [Probs]),
}

/// Linear decay from `learning_rate` in the first epoch to
/// `learning_rate / epochs` in the last.
pub fn epoch_learning_rate(spec: &ModelSpec, epoch: usize) -> f64 {
    spec.learning_rate * (spec.epochs - epoch.min(spec.epochs - 1)) as f64 / spec.epochs as f64
}

/// Trains `spec` from scratch with a snapshot per epoch.
pub fn train(
    spec: &ModelSpec,
    instances: &[&Instance],
    supervision: Supervision<'_>,
    num_labels: usize,
) -> Result<Trained> {
    train_with(spec, instances, supervision, num_labels, CheckpointPolicy::EveryEpoch)
}

/// Trains `spec` from scratch.
///
/// Inputs are ordered by instance id and then shuffled each epoch from
/// `spec.rng_seed`, so results depend only on the spec and the data set.
pub fn train_with(
    spec: &ModelSpec,
    instances: &[&Instance],
    supervision: Supervision<'_>,
    num_labels: usize,
    policy: CheckpointPolicy,
) -> Result<Trained> {
    spec.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("cannot train on an empty set"));
    }
    let n_sup = match &supervision {
        Supervision::Hard(l) => l.len(),
        Supervision::Soft(p) => p.len(),
    };
    if n_sup != instances.len() {
        return Err(Error::invalid(format!(
            "{} instances but {n_sup} targets",
            instances.len()
        )));
    }
    let mut model = Model::initialize(spec, num_labels)?;

    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&i| instances[i].id);

    let units: Vec<Vec<(SparseVector, Target)>> = order
        .par_iter()
        .map(|&i| {
            let x = instances[i];
            let feats = model.featurize_all(x)?;
            let targets: Vec<Target> = match &supervision {
                Supervision::Hard(labels) => {
                    let label = &labels[i];
                    check_label(label, x, spec.task(), num_labels)?;
                    match label {
                        GoldLabel::Class(c) => vec![Target::Hard(*c)],
                        GoldLabel::Tags(t) => t.iter().map(|&t| Target::Hard(t)).collect(),
                    }
                }
                Supervision::Soft(probs) => {
                    let p = &probs[i];
                    p.check_valid()?;
                    if p.width() != Some(num_labels) {
                        return Err(Error::invalid("soft target width differs from label count"));
                    }
                    match (p, spec.task()) {
                        (Probs::Class(v), Task::Classification) => vec![Target::Soft(v.clone())],
                        (Probs::Tokens(vs), Task::Tagging) if vs.len() == feats.len() => {
                            vs.iter().map(|v| Target::Soft(v.clone())).collect()
                        }
                        _ => return Err(Error::invalid("soft target shape does not match instance")),
                    }
                }
            };
            Ok(feats.into_iter().zip(targets).collect())
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut perm: Vec<usize> = (0..units.len()).collect();
    let mut trace = CheckpointTrace::default();
    for epoch in 0..spec.epochs {
        let lr = epoch_learning_rate(spec, epoch);
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(BATCH_SIZE) {
            let batch: Vec<&[(SparseVector, Target)]> =
                chunk.iter().map(|&i| units[i].as_slice()).collect();
            model.step(&batch, lr);
        }
        let last = epoch + 1 == spec.epochs;
        if policy == CheckpointPolicy::EveryEpoch && !last {
            trace.checkpoints.push(Checkpoint {
                epoch,
                learning_rate: lr,
                model: Arc::new(model.clone()),
            });
        }
    }
    let model = Arc::new(model);
    trace.checkpoints.push(Checkpoint {
        epoch: spec.epochs - 1,
        learning_rate: epoch_learning_rate(spec, spec.epochs - 1),
        model: model.clone(),
    });
    Ok(Trained { model, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Sharpens (`t < 1`) or flattens (`t > 1`) a distribution, i.e.
/// `softmax(log p / t)`.
pub fn soften(p: &[f64], temperature: f64) -> Vec<f64> {
    let mut z: Vec<f64> = p.iter().map(|x| x.max(f64::MIN_POSITIVE).ln() / temperature).collect();
    softmax_in_place(&mut z);
    z
}

/// Trains `student` on the teacher's temperature-softened distributions
/// over `unlabeled`.
pub fn distill(
    teacher: &dyn ProbabilisticModel,
    unlabeled: &[&Instance],
    student: &ModelSpec,
    cfg: &DistillationConfig,
) -> Result<Trained> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("distillation temperature must be positive"));
    }
    if unlabeled.is_empty() {
        return Err(Error::invalid("distillation needs unlabeled instances"));
    }
    if student.task() != teacher.task() {
        return Err(Error::invalid("student and teacher solve different tasks"));
    }
    let targets: Vec<Probs> = teacher
        .predict_probs(unlabeled)?
        .into_iter()
        .map(|p| match p {
            Probs::Class(v) => Probs::Class(soften(&v, cfg.temperature)),
            Probs::Tokens(vs) => {
                Probs::Tokens(vs.iter().map(|v| soften(v, cfg.temperature)).collect())
            }
        })
        .collect();
    let spec = ModelSpec {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        ..student.clone()
    };
    train_with(
        &spec,
        unlabeled,
        Supervision::Soft(&targets),
        teacher.num_labels(),
        CheckpointPolicy::FinalOnly,
    )
}

#[cfg(test)]
mod tests;
