use super::*;
use crate::corpus::Corpus;
use crate::synthetic::{entity_corpus, topic_corpus, EntityCorpusConfig, TopicCorpusConfig};

fn small_spec(family: ModelFamily) -> ModelSpec {
    ModelSpec {
        feature_dim: 1 << 10,
        hidden_dim: if family == ModelFamily::Feedforward { 8 } else { 0 },
        epochs: 3,
        ..ModelSpec::preset(family, Capacity::Small)
    }
}

fn refs(c: &Corpus) -> Vec<&Instance> {
    c.instances().iter().collect()
}

/// Two classes whose documents share no words.
fn separable() -> (Vec<Instance>, Vec<GoldLabel>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..20u64 {
        let c = (i % 2) as usize;
        let words = if c == 0 {
            format!("apple pear{} plum fig{}", i % 5, i % 3)
        } else {
            format!("rock stone{} gravel sand{}", i % 5, i % 3)
        };
        xs.push(Instance::text(i, words));
        ys.push(GoldLabel::Class(c));
    }
    (xs, ys)
}

/// Independent check that a set is linearly separable in the model's
/// feature space: the perceptron converges iff it is.
fn perceptron_separates(feats: &[SparseVector], ys: &[usize], epochs: usize) -> bool {
    let dim = feats[0].dim;
    let mut w = vec![0.0; dim + 1];
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, &y) in feats.iter().zip(ys) {
            let s = if y == 1 { 1.0 } else { -1.0 };
            let score: f64 = w[dim] + x.entries.iter().map(|&(j, v)| w[j as usize] * v).sum::<f64>();
            if s * score <= 0.0 {
                mistakes += 1;
                for &(j, v) in &x.entries {
                    w[j as usize] += s * v;
                }
                w[dim] += s;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn separable_set_is_fit_exactly() {
    let (xs, ys) = separable();
    let spec = ModelSpec::preset(ModelFamily::LinearNgram, Capacity::Small);
    let f = Featurizer::new(spec.feature_dim, HASH_SEED);
    let feats: Vec<SparseVector> = xs.iter().map(|x| f.text(expect_text(x).unwrap())).collect();
    let classes: Vec<usize> = ys.iter().map(|y| y.as_class().unwrap()).collect();
    assert!(perceptron_separates(&feats, &classes, 100));

    let refs: Vec<&Instance> = xs.iter().collect();
    let trained = train(&spec, &refs, Supervision::Hard(&ys), 2).unwrap();
    let preds = trained.model.predict_probs(&refs).unwrap();
    for (p, y) in preds.iter().zip(&ys) {
        assert_eq!(&p.argmax_label(), y);
    }
    assert_eq!(trained.trace.len(), spec.epochs);
}

#[test]
fn training_is_deterministic() {
    let c = topic_corpus(&TopicCorpusConfig {
        num_docs: 200,
        ..Default::default()
    })
    .unwrap();
    for family in [ModelFamily::LinearNgram, ModelFamily::Feedforward] {
        let spec = small_spec(family).with_seed(11);
        let a = train(&spec, &refs(&c), Supervision::Hard(c.labels()), 4).unwrap();
        // reversed input order must not matter
        let mut rev = refs(&c);
        rev.reverse();
        let mut rev_labels = c.labels().to_vec();
        rev_labels.reverse();
        let b = train(&spec, &rev, Supervision::Hard(&rev_labels), 4).unwrap();
        assert_eq!(a.model, b.model);
        let other = train(&spec.clone().with_seed(12), &refs(&c), Supervision::Hard(c.labels()), 4).unwrap();
        assert_ne!(a.model, other.model);
    }
}

#[test]
fn zero_model_is_uniform_and_keeps_order() {
    let m = Model::zeroed(&small_spec(ModelFamily::LinearNgram), 4).unwrap();
    let xs: Vec<Instance> = (0..5).map(|i| Instance::text(i, format!("doc {i} text"))).collect();
    let r: Vec<&Instance> = xs.iter().collect();
    let out = m.predict(&r).unwrap();
    assert_eq!(out.len(), 5);
    for (o, x) in out.iter().zip(&xs) {
        assert_eq!(o.probs, Probs::Class(vec![0.25; 4]));
        let Hidden::Instance(h) = &o.hidden else { panic!() };
        assert_eq!(h, &Featurizer::new(1 << 10, HASH_SEED).text(expect_text(x).unwrap()));
    }
}

#[test]
fn modality_mismatch() {
    let m = Model::zeroed(&small_spec(ModelFamily::LinearNgram), 2).unwrap();
    let x = Instance::tokens(0, ["a", "b"]);
    assert!(matches!(
        m.predict(&[&x]),
        Err(Error::ModalityMismatch { .. })
    ));
    let t = Model::zeroed(&small_spec(ModelFamily::WindowTagger), 2).unwrap();
    let y = Instance::text(0, "a b");
    assert!(matches!(t.predict_probs(&[&y]), Err(Error::ModalityMismatch { .. })));
}

#[test]
fn training_errors() {
    let spec = small_spec(ModelFamily::LinearNgram);
    assert!(train(&spec, &[], Supervision::Hard(&[]), 2).is_err());
    let x = Instance::text(0, "a");
    assert!(matches!(
        train(&spec, &[&x], Supervision::Hard(&[GoldLabel::Class(5)]), 2),
        Err(Error::LabelOutOfVocabulary { label: 5, size: 2 })
    ));
}

/// A 2-class linear model over a 2-bucket space with probabilities fixed
/// at (0.75, 0.25) through the bias.
fn fixed_two_class() -> (Model, Instance) {
    let spec = ModelSpec {
        feature_dim: 2,
        ..small_spec(ModelFamily::LinearNgram)
    };
    let mut m = Model::zeroed(&spec, 2).unwrap();
    if let Model::Linear(l) = &mut m {
        l.layer.bias = vec![3f64.ln(), 0.0];
    }
    let f = Featurizer::new(2, HASH_SEED);
    let word = (0..)
        .map(|i| format!("w{i}"))
        .find(|w| f.text(w).entries == vec![(0, 1.0)])
        .unwrap();
    (m, Instance::text(0, word))
}

#[test]
fn gradient_is_residual_outer_features() {
    let (m, x) = fixed_two_class();
    let Probs::Class(p) = &m.predict_probs(&[&x]).unwrap()[0] else { panic!() };
    assert!((p[0] - 0.75).abs() < 1e-12);
    let g = m.last_layer_gradient(&x, &GoldLabel::Class(1)).unwrap().to_dense();
    let expected = [0.75, 0.0, -0.75, 0.0];
    for (a, b) in g.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{g:?}");
    }
    let n = m.gradient_sq_norm(&x, &GoldLabel::Class(1)).unwrap();
    assert!((n - 2.0 * 0.75f64.powi(2)).abs() < 1e-12);
}

#[test]
fn one_hot_prediction_has_zero_gradient() {
    let (mut m, x) = fixed_two_class();
    if let Model::Linear(l) = &mut m {
        l.layer.bias = vec![1000.0, 0.0];
    }
    let g = m.last_layer_gradient(&x, &GoldLabel::Class(0)).unwrap();
    assert_eq!(g.norm_sq(), 0.0);
}

fn finite_difference_check(m: &Model, x: &Instance, y: &GoldLabel, seed: u64) {
    let w = m.last_layer_weights();
    let g = m.last_layer_gradient(x, y).unwrap().to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // direction concentrated on the gradient's support plus noise
    let dir: Vec<f64> = g
        .iter()
        .map(|gi| gi + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let eps = 1e-5;
    let shifted = |s: f64| {
        let w2: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
        m.with_last_layer_weights(&w2).unwrap().loss(x, y).unwrap()
    };
    let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
    let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
    let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
    assert!(rel < 1e-4, "numeric {numeric} analytic {analytic}");
}

#[test]
fn gradients_match_finite_differences() {
    let c = topic_corpus(&TopicCorpusConfig {
        num_docs: 60,
        ..Default::default()
    })
    .unwrap();
    for family in [ModelFamily::LinearNgram, ModelFamily::Feedforward] {
        let m = train(&small_spec(family), &refs(&c), Supervision::Hard(c.labels()), 4).unwrap();
        for i in 0..5 {
            let y = GoldLabel::Class(i % 4);
            finite_difference_check(&m.model, &c.instances()[i], &y, i as u64);
        }
    }
    let t = entity_corpus(&EntityCorpusConfig {
        num_sentences: 40,
        ..Default::default()
    })
    .unwrap();
    let spec = small_spec(ModelFamily::WindowTagger);
    let m = train(&spec, &refs(&t), Supervision::Hard(t.labels()), t.num_labels()).unwrap();
    for i in 0..3 {
        finite_difference_check(&m.model, &t.instances()[i], &t.labels()[i], 7 + i as u64);
    }
}

#[test]
fn probabilities_are_distributions() {
    let c = topic_corpus(&TopicCorpusConfig {
        num_docs: 1000,
        ..Default::default()
    })
    .unwrap();
    let m = train(&small_spec(ModelFamily::Feedforward), &refs(&c)[..100], Supervision::Hard(&c.labels()[..100]), 4).unwrap();
    for p in m.model.predict_probs(&refs(&c)).unwrap() {
        p.check_valid().unwrap();
    }
}

#[test]
fn snapshot_round_trip() {
    let c = topic_corpus(&TopicCorpusConfig {
        num_docs: 50,
        ..Default::default()
    })
    .unwrap();
    for family in [ModelFamily::LinearNgram, ModelFamily::Feedforward] {
        let m = train(&small_spec(family), &refs(&c), Supervision::Hard(c.labels()), 4).unwrap();
        let mut buf = Vec::new();
        write_model(&m.model, &mut buf).unwrap();
        assert_eq!(&buf[..8], SNAPSHOT_MAGIC);
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(&back, m.model.as_ref());
    }
    let mut bad = Vec::new();
    write_model(&Model::zeroed(&small_spec(ModelFamily::LinearNgram), 2).unwrap(), &mut bad).unwrap();
    bad[0] = b'X';
    assert!(read_model(&mut bad.as_slice()).is_err());
}

#[test]
fn soft_one_hot_targets_train_like_hard_labels() {
    let (xs, ys) = separable();
    let r: Vec<&Instance> = xs.iter().collect();
    let soft: Vec<Probs> = ys
        .iter()
        .map(|y| {
            let mut v = vec![0.0; 2];
            v[y.as_class().unwrap()] = 1.0;
            Probs::Class(v)
        })
        .collect();
    let spec = small_spec(ModelFamily::LinearNgram);
    let a = train(&spec, &r, Supervision::Hard(&ys), 2).unwrap();
    let b = train(&spec, &r, Supervision::Soft(&soft), 2).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn distilled_student_agrees_with_teacher() {
    let c = topic_corpus(&TopicCorpusConfig {
        num_docs: 1200,
        ..Default::default()
    })
    .unwrap();
    let all = refs(&c);
    let spec = ModelSpec::preset(ModelFamily::LinearNgram, Capacity::Small);
    let teacher = train(&spec, &all[..300], Supervision::Hard(&c.labels()[..300]), 4).unwrap();
    let cfg = DistillationConfig {
        temperature: 1.0,
        epochs: 20,
        learning_rate: spec.learning_rate,
    };
    let student = distill(teacher.model.as_ref(), &all[300..], &spec, &cfg).unwrap();
    let tp = teacher.model.predict_probs(&all[300..]).unwrap();
    let sp = student.model.predict_probs(&all[300..]).unwrap();
    let agree = tp.iter().zip(&sp).filter(|(a, b)| a.argmax_label() == b.argmax_label()).count();
    let rate = agree as f64 / tp.len() as f64;
    assert!(rate >= 0.95, "agreement {rate}");

    let hot = DistillationConfig {
        temperature: 1e6,
        ..cfg
    };
    let flat = distill(teacher.model.as_ref(), &all[300..], &spec, &hot).unwrap();
    for p in flat.model.predict_probs(&all[300..400]).unwrap() {
        let Probs::Class(p) = p else { panic!() };
        assert!(p.iter().all(|x| (x - 0.25).abs() < 0.02), "{p:?}");
    }
    assert!(distill(teacher.model.as_ref(), &[], &spec, &cfg).is_err());
}

#[test]
fn soften_limits() {
    let p = [0.7, 0.2, 0.1];
    let same = soften(&p, 1.0);
    for (a, b) in same.iter().zip(p) {
        assert!((a - b).abs() < 1e-12);
    }
    let flat = soften(&p, 1e9);
    assert!(flat.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
}

