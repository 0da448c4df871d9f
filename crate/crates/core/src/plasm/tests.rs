use std::sync::Arc;

use super::*;
use crate::corpus::split_held_out;
use crate::features::SparseVector;
use crate::models::{Capacity, Checkpoint, ModelFamily, ProbabilityOutput};
use crate::synthetic::{topic_corpus, TopicCorpusConfig};

/// Reports a fixed gradient regardless of input.
#[derive(Debug)]
struct FixedGradient {
    spec: ModelSpec,
    gradient: Vec<f64>,
}

impl ProbabilisticModel for FixedGradient {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    fn task(&self) -> crate::corpus::Task {
        crate::corpus::Task::Classification
    }
    fn num_labels(&self) -> usize {
        2
    }
    fn hidden_dim(&self) -> usize {
        self.gradient.len() / 2
    }
    fn predict_probs(&self, xs: &[&Instance]) -> Result<Vec<Probs>> {
        Ok(xs.iter().map(|_| Probs::Class(vec![0.5, 0.5])).collect())
    }
    fn predict(&self, _: &[&Instance]) -> Result<Vec<ProbabilityOutput>> {
        unimplemented!()
    }
    fn loss(&self, _: &Instance, _: &GoldLabel) -> Result<f64> {
        Ok(0.0)
    }
    fn last_layer_gradient(&self, _: &Instance, _: &GoldLabel) -> Result<SparseVector> {
        Ok(SparseVector::from_dense(&self.gradient))
    }
}

fn spec(family: ModelFamily, capacity: Capacity) -> ModelSpec {
    ModelSpec::preset(family, capacity)
}

fn toy(n: usize, seed: u64) -> Corpus {
    topic_corpus(&TopicCorpusConfig {
        num_docs: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn entry(id: u64, label: usize, score: f64) -> PseudoLabel {
    PseudoLabel {
        id: InstanceId(id),
        label: GoldLabel::Class(label),
        teacher_probs: Probs::Class(vec![0.5, 0.5]),
        filter_score: score,
        retained: true,
    }
}

fn set_of(n: u64) -> PseudoLabeledSet {
    PseudoLabeledSet {
        entries: (0..n).map(|i| entry(i, 0, (i % 4) as f64)).collect(),
    }
}

#[test]
fn fraction_rule() {
    assert!((fraction_from_score(0.92) - 0.08).abs() < 1e-12);
    assert_eq!(fraction_from_score(1.0), 0.0);
    assert_eq!(fraction_from_score(0.875), 0.125);
    assert_eq!(fraction_from_score(0.0), MAX_FILTER_FRACTION);
}

#[test]
fn tracin_arithmetic() {
    let stub = FixedGradient {
        spec: spec(ModelFamily::LinearNgram, Capacity::Small),
        gradient: vec![2.0, 0.0],
    };
    let trace = CheckpointTrace {
        checkpoints: vec![Checkpoint {
            epoch: 0,
            learning_rate: 0.1,
            model: Arc::new(stub),
        }],
    };
    let x = Instance::text(0, "x");
    let v = tracin_self_influence(&trace, &x, &GoldLabel::Class(0)).unwrap();
    assert!((v - 0.4).abs() < 1e-12);
    assert!(tracin_self_influence(&CheckpointTrace::default(), &x, &GoldLabel::Class(0)).is_err());
}

#[test]
fn tracin_is_zero_at_perfect_fit() {
    let s = ModelSpec {
        feature_dim: 2,
        ..spec(ModelFamily::LinearNgram, Capacity::Small)
    };
    let mut m = crate::models::Model::zeroed(&s, 2).unwrap();
    if let crate::models::Model::Linear(l) = &mut m {
        l.layer.bias = vec![1000.0, 0.0];
    }
    let trace = CheckpointTrace {
        checkpoints: (0..3)
            .map(|epoch| Checkpoint {
                epoch,
                learning_rate: 1.0,
                model: Arc::new(m.clone()),
            })
            .collect(),
    };
    let x = Instance::text(0, "anything");
    assert_eq!(tracin_self_influence(&trace, &x, &GoldLabel::Class(0)).unwrap(), 0.0);
    assert!(tracin_self_influence(&trace, &x, &GoldLabel::Class(1)).unwrap() > 0.0);
}

#[test]
fn flipped_labels_have_higher_self_influence() {
    let c = toy(1500, 4);
    let xs: Vec<&Instance> = c.instances().iter().collect();
    let teacher = crate::models::train(
        &spec(ModelFamily::LinearNgram, Capacity::Small),
        &xs[..500],
        Supervision::Hard(&c.labels()[..500]),
        4,
    )
    .unwrap();
    let pool = &xs[500..];
    let mut set = pseudo_label(teacher.model.as_ref(), pool).unwrap();
    let flipped: BTreeSet<InstanceId> = inject_label_noise(&mut set, 0.1, 4, 3).unwrap().into_iter().collect();
    assert_eq!(flipped.len(), 100);
    let lookup: BTreeMap<InstanceId, &Instance> = pool.iter().map(|x| (x.id, *x)).collect();
    score_for_filter(&mut set, FilterMethod::Tracin, &teacher.trace, &lookup).unwrap();
    let mean = |want: bool| {
        let v: Vec<f64> = set
            .entries
            .iter()
            .filter(|e| flipped.contains(&e.id) == want)
            .map(|e| e.filter_score)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false), "{} vs {}", mean(true), mean(false));
    assert!(set.entries.iter().all(|e| e.filter_score >= 0.0));
}

#[test]
fn pseudo_labels_from_a_perfect_teacher_are_gold() {
    let c = toy(300, 1);
    let xs: Vec<&Instance> = c.instances().iter().collect();
    let teacher = crate::models::train(
        &spec(ModelFamily::LinearNgram, Capacity::Large),
        &xs,
        Supervision::Hard(c.labels()),
        4,
    )
    .unwrap();
    let set = pseudo_label(teacher.model.as_ref(), &xs).unwrap();
    assert_eq!(set.len(), 300);
    let train_acc = metrics::evaluate(teacher.model.as_ref(), &c).unwrap();
    let agree = set
        .entries
        .iter()
        .filter(|e| &e.label == c.label(e.id).unwrap())
        .count() as f64
        / 300.0;
    assert_eq!(agree, train_acc);
    if train_acc == 1.0 {
        assert!(set.entries.iter().all(|e| &e.label == c.label(e.id).unwrap()));
    }
    assert!(pseudo_label(teacher.model.as_ref(), &[]).unwrap().is_empty());
}

#[test]
fn filter_counts() {
    let all = apply_filter(set_of(10), FilterMethod::Tracin, 0.0).unwrap();
    assert_eq!(all.retained_count(), 10);
    let f = apply_filter(set_of(10), FilterMethod::Tracin, 0.25).unwrap();
    assert_eq!(f.retained_count(), 8);
    // scores are i % 4: ids 3 and 7 score highest
    let dropped: Vec<u64> = f.entries.iter().filter(|e| !e.retained).map(|e| e.id.0).collect();
    assert_eq!(dropped, vec![3, 7]);
    let u = apply_filter(set_of(10), FilterMethod::Uncertainty, 0.25).unwrap();
    assert_eq!(u.retained_count(), 8);
    assert_eq!(apply_filter(set_of(10), FilterMethod::None, 0.5).unwrap().retained_count(), 10);
    assert!(apply_filter(set_of(10), FilterMethod::Tracin, 1.0).is_err());
}

#[test]
fn successor_set_union() {
    let pseudo = PseudoLabeledSet {
        entries: (0..90).map(|i| entry(i, 0, 0.0)).collect(),
    };
    let gold: Vec<(InstanceId, GoldLabel)> = (90..100).map(|i| (InstanceId(i), GoldLabel::Class(1))).collect();
    assert_eq!(build_successor_training_set(&pseudo, &gold).unwrap().len(), 100);

    let overlap: Vec<(InstanceId, GoldLabel)> = (85..95).map(|i| (InstanceId(i), GoldLabel::Class(1))).collect();
    let set = build_successor_training_set(&pseudo, &overlap).unwrap();
    assert_eq!(set.len(), 95);
    for e in &set {
        if e.id.0 >= 85 {
            assert_eq!(e.source, LabelSource::Gold);
            assert_eq!(e.label, GoldLabel::Class(1));
        }
    }

    let mut dup = pseudo.clone();
    dup.entries.push(entry(3, 1, 0.0));
    assert!(build_successor_training_set(&dup, &gold).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = PlasmConfig {
        acquisition: spec(ModelFamily::LinearNgram, Capacity::Small),
        teacher: spec(ModelFamily::Feedforward, Capacity::Large),
        successor: spec(ModelFamily::WindowTagger, Capacity::Large),
        filter_method: FilterMethod::Tracin,
        filter_fraction: Some(1.0),
        same_family: true,
    };
    let v = cfg.violations("plasm");
    assert_eq!(v.len(), 3, "{v:?}");
    cfg.same_family = false;
    cfg.successor = spec(ModelFamily::Feedforward, Capacity::Large);
    cfg.filter_fraction = None;
    assert!(cfg.validate().is_ok());
}

fn pipeline_fixture() -> (Corpus, Corpus, Vec<InstanceId>, Vec<InstanceId>) {
    let c = toy(1600, 2);
    let (train, held) = split_held_out(&c, 0.1, 0).unwrap();
    let ids: Vec<InstanceId> = train.ids().collect();
    let (gold, pool) = ids.split_at(300);
    (train, held, gold.to_vec(), pool.to_vec())
}

#[test]
fn unfiltered_successor_mimics_same_spec_teacher() {
    let (train, held, gold, pool) = pipeline_fixture();
    let s = spec(ModelFamily::LinearNgram, Capacity::Large);
    let cfg = PlasmConfig {
        acquisition: spec(ModelFamily::LinearNgram, Capacity::Small),
        teacher: s.clone(),
        successor: s,
        filter_method: FilterMethod::None,
        filter_fraction: None,
        same_family: true,
    };
    let out = run_plasm(&cfg, &train, &gold, &pool, &held, true).unwrap();
    assert_eq!(out.audit.dropped_count, 0);
    assert_eq!(out.audit.successor_train_size, gold.len() + pool.len());
    let xs: Vec<&Instance> = held.instances().iter().collect();
    let t = out.teacher.model.predict_probs(&xs).unwrap();
    let s = out.successor.model.predict_probs(&xs).unwrap();
    let agree = t.iter().zip(&s).filter(|(a, b)| a.argmax_label() == b.argmax_label()).count();
    assert!(agree as f64 / xs.len() as f64 >= 0.95);
}

#[test]
fn fixed_fraction_overrides_rule_and_runs_are_pure() {
    let (train, held, gold, pool) = pipeline_fixture();
    let cfg = PlasmConfig {
        acquisition: spec(ModelFamily::LinearNgram, Capacity::Small),
        teacher: spec(ModelFamily::LinearNgram, Capacity::Large),
        successor: spec(ModelFamily::Feedforward, Capacity::Small),
        filter_method: FilterMethod::Tracin,
        filter_fraction: Some(0.5),
        same_family: true,
    };
    let a = run_plasm(&cfg, &train, &gold, &pool, &held, true).unwrap();
    assert_eq!(a.audit.filter_fraction, 0.5);
    assert!(a.audit.fraction_overridden);
    assert_eq!(a.audit.retained_count, pool.len() - pool.len() / 2);
    assert_eq!(a.audit.deciles.len(), 10);
    assert!(a.audit.to_json().unwrap().contains("\"filter_method\": \"tracin\""));
    let b = run_plasm(&cfg, &train, &gold, &pool, &held, true).unwrap();
    assert_eq!(a.successor.model, b.successor.model);

    assert!(run_plasm(&cfg, &train, &[], &pool, &held, true).is_err());
    assert!(run_plasm(&cfg, &train, &gold, &gold, &held, true).is_err());
}
