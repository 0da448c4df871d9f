use super::{
    fit_gaussian_stats, least_confidence, mnlp, score_lc, score_mnlp, score_random, select_top,
    select_top_budget, write_scores_csv, GaussianClassStats, Score, MAX_MD_DIM,
};
use crate::corpus::InstanceId;
use crate::error::Error;
use crate::models::Probs;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use proptest::prelude::*;

fn ids(n: u64) -> Vec<InstanceId> {
    (0..n).map(InstanceId).collect()
}

fn sc(id: u64, value: f64) -> Score {
    Score {
        id: InstanceId(id),
        value,
    }
}

/// Exhaustive max over tag sequences of the mean log-probability.
pub(crate) fn mnlp_brute_force(ps: &[Vec<f64>]) -> f64 {
    let n = ps.len();
    let k = ps[0].len();
    let mut best = f64::NEG_INFINITY;
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        let mut lp = 0.0;
        for p in ps {
            lp += p[c % k].ln();
            c /= k;
        }
        best = best.max(lp / n as f64);
    }
    -best
}

/// Solves `A x = b` by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| row.iter().copied().chain([bi]).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for v in &mut m[col] {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                for (v, p) in m[r].iter_mut().zip(pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    m.iter().map(|row| row[n]).collect()
}

pub(crate) fn md_oracle(h: &[f64], centroids: &[Vec<f64>], cov: &[Vec<f64>]) -> f64 {
    centroids
        .iter()
        .map(|mu| {
            let diff: Vec<f64> = h.iter().zip(mu).map(|(a, b)| a - b).collect();
            let x = gauss_solve(cov, &diff);
            diff.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn lc_examples() {
    let out = score_lc(
        &ids(3),
        &[
            Probs::Class(vec![0.25; 4]),
            Probs::Class(vec![1.0, 0.0, 0.0, 0.0]),
            Probs::Class(vec![0.6, 0.3, 0.1]),
        ],
    )
    .unwrap();
    assert_eq!(out[0].value, 0.75);
    assert_eq!(out[1].value, 0.0);
    assert!((out[2].value - 0.4).abs() < 1e-15);
    assert!(score_lc(&ids(1), &[Probs::Class(vec![0.7, 0.7])]).is_err());
    assert!(score_lc(&ids(1), &[Probs::Tokens(vec![vec![1.0]])]).is_err());
}

#[test]
fn mnlp_examples() {
    assert_eq!(mnlp(&vec![vec![1.0, 0.0]; 5]).unwrap(), 0.0);
    let e = (-1.0f64).exp();
    assert!((mnlp(&[vec![e, (1.0 - e) / 2.0, (1.0 - e) / 2.0]]).unwrap() - 1.0).abs() < 1e-12);
    let v = mnlp(&[vec![0.5, 0.5], vec![0.25, 0.25, 0.25, 0.25]]).unwrap();
    assert!((v - 1.0397).abs() < 1e-4);
    assert!(score_mnlp(&ids(1), &[Probs::Tokens(vec![])]).is_err());
    assert!(score_mnlp(&ids(1), &[Probs::Class(vec![1.0])]).is_err());
}

#[test]
fn random_scores() {
    let a = score_random(&ids(3), 9).unwrap();
    assert_eq!(a, score_random(&ids(3), 9).unwrap());
    let mut vals: Vec<f64> = a.iter().map(|s| s.value).collect();
    vals.sort_by(f64::total_cmp);
    assert_eq!(vals, vec![0.0, 1.0, 2.0]);
    assert!(score_random(&[], 0).is_err());

    // each of 5 ids should win top-1 about 2000 times in 10,000 trials
    let n = 10_000;
    let mut wins = [0usize; 5];
    for seed in 0..n {
        let top = select_top(&score_random(&ids(5), seed).unwrap(), 1)[0];
        wins[top.0 as usize] += 1;
    }
    let p = 0.2;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for w in wins {
        assert!((w as f64 - n as f64 * p).abs() < 3.0 * sigma, "{wins:?}");
    }
}

#[test]
fn random_ignores_input_order() {
    let mut rev = ids(50);
    rev.reverse();
    let a = score_random(&ids(50), 3).unwrap();
    let b = score_random(&rev, 3).unwrap();
    assert_eq!(select_top(&a, 10), select_top(&b, 10));
}

#[test]
fn selection_examples() {
    let s = [sc(1, 0.9), sc(2, 0.5), sc(3, 0.9)];
    assert_eq!(select_top(&s, 2), vec![InstanceId(1), InstanceId(3)]);
    assert!(select_top(&s, 0).is_empty());
    assert_eq!(select_top(&s, 10).len(), 3);

    let s = [sc(1, 0.9), sc(2, 0.8), sc(3, 0.7)];
    let tokens = |id: InstanceId| [0, 6, 7, 4][id.0 as usize];
    assert_eq!(
        select_top_budget(&s, tokens, 10),
        vec![InstanceId(1), InstanceId(3)]
    );
    assert!(select_top_budget(&s, tokens, 3).is_empty());
}

#[test]
fn md_examples() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let st = GaussianClassStats::from_parts(vec![vec![0.0, 0.0], vec![4.0, 0.0]], eye.clone()).unwrap();
    assert_eq!(st.min_distance(&[4.0, 0.0]).unwrap(), 0.0);
    assert!((st.min_distance(&[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(st.min_distance(&[1.0]).is_err());

    let diag = GaussianClassStats::from_parts(
        vec![vec![0.0, 0.0]],
        vec![vec![4.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap();
    assert!((diag.min_distance(&[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn fit_single_points_gives_scaled_identity() {
    let hidden = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
    let st = fit_gaussian_stats(&hidden, &[0, 1], &[0, 1], 0.5).unwrap();
    assert_eq!(st.centroids[0].as_slice(), &[1.0, 2.0]);
    assert_eq!(st.centroids[1].as_slice(), &[-3.0, 0.5]);
    assert_eq!(st.covariance, nalgebra::DMatrix::identity(2, 2) * 0.5);
}

#[test]
fn fit_matches_direct_covariance() {
    let hidden = vec![
        vec![1.0, 2.0],
        vec![2.0, 3.5],
        vec![0.0, 1.0],
        vec![5.0, -1.0],
        vec![6.0, 0.0],
    ];
    let labels = [0, 0, 0, 1, 1];
    let lambda = 1e-3;
    let st = fit_gaussian_stats(&hidden, &labels, &[0, 1], lambda).unwrap();

    let mean = |c: usize| {
        let pts: Vec<&Vec<f64>> = hidden.iter().zip(&labels).filter(|(_, &y)| y == c).map(|(h, _)| h).collect();
        [0, 1].map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64)
    };
    let mu = [mean(0), mean(1)];
    let mut cov = [[0.0; 2]; 2];
    for (h, &y) in hidden.iter().zip(&labels) {
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += (h[i] - mu[y][i]) * (h[j] - mu[y][j]) / hidden.len() as f64;
            }
        }
    }
    let ridge = lambda * (cov[0][0] + cov[1][1]) / 2.0;
    for i in 0..2 {
        for j in 0..2 {
            let expect = cov[i][j] + if i == j { ridge } else { 0.0 };
            assert!((st.covariance[(i, j)] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn fit_errors() {
    let degenerate = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    assert!(matches!(
        fit_gaussian_stats(&degenerate, &[0, 0], &[0], 0.0),
        Err(Error::Numerical(_))
    ));
    assert!(fit_gaussian_stats(&degenerate, &[0, 0], &[0, 1], 1e-6).is_err());
    assert!(fit_gaussian_stats(&[vec![0.0; MAX_MD_DIM + 1]], &[0], &[0], 1.0).is_err());
}

#[test]
fn scores_csv() {
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, super::Strategy::Lc, 3, &[sc(7, 0.5)]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "id,strategy,value,iteration\n7,lc,0.5,3\n"
    );
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn sequence() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(k, n)| prop::collection::vec(distribution(k), n))
}

/// Random SPD matrix `B Bᵀ + I` together with centroids and a query point.
fn md_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..=8, 1usize..=4).prop_flat_map(|(d, c)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), d),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), c),
            prop::collection::vec(-5.0f64..5.0, d),
        )
            .prop_map(move |(b, mus, h)| {
                let mut cov = vec![vec![0.0; d]; d];
                for i in 0..d {
                    for j in 0..d {
                        cov[i][j] = (0..d).map(|k| b[i][k] * b[j][k]).sum::<f64>();
                    }
                    cov[i][i] += 1.0;
                }
                (cov, mus, h)
            })
    })
}

proptest! {
    #[test]
    fn mnlp_matches_enumeration(ps in sequence()) {
        let fast = mnlp(&ps).unwrap();
        prop_assert!((fast - mnlp_brute_force(&ps)).abs() < 1e-9);
        prop_assert!(fast >= 0.0);
    }

    #[test]
    fn lc_is_bounded_and_monotone(p in distribution(4), bump in 0.001f64..0.5) {
        let v = least_confidence(&p);
        prop_assert!((0.0..=0.75 + 1e-12).contains(&v));
        let top = argmax_index(&p);
        let mut q: Vec<f64> = p.iter().map(|x| x * (1.0 - bump)).collect();
        q[top] += bump;
        prop_assert!(least_confidence(&q) < v);
    }

    #[test]
    fn lc_query_set_survives_monotone_transform(
        maxes in prop::collection::vec(0.25f64..1.0, 1..40),
        k in 0usize..40,
    ) {
        let ids: Vec<InstanceId> = (0..maxes.len() as u64).map(InstanceId).collect();
        let direct: Vec<Score> = ids.iter().zip(&maxes).map(|(&id, m)| Score { id, value: 1.0 - m }).collect();
        let warped: Vec<Score> = ids.iter().zip(&maxes).map(|(&id, m)| Score { id, value: 1.0 - m.powi(3) }).collect();
        prop_assert_eq!(select_top(&direct, k), select_top(&warped, k));
    }

    #[test]
    fn md_matches_dense_solve((cov, mus, h) in md_case()) {
        let st = GaussianClassStats::from_parts(mus.clone(), cov.clone()).unwrap();
        let fast = st.min_distance(&h).unwrap();
        let slow = md_oracle(&h, &mus, &cov);
        prop_assert!((fast - slow).abs() <= 1e-8 * slow.abs().max(1.0), "{} vs {}", fast, slow);
    }

    #[test]
    fn md_is_translation_invariant(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
        shift in prop::collection::vec(-50.0f64..50.0, 3),
        q in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 2).collect();
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let qm: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let a = fit_gaussian_stats(&pts, &labels, &[0, 1], 1e-3).unwrap();
        let b = fit_gaussian_stats(&moved, &labels, &[0, 1], 1e-3).unwrap();
        let (da, db) = (a.min_distance(&q).unwrap(), b.min_distance(&qm).unwrap());
        prop_assert!((da - db).abs() <= 1e-8 * da.max(1.0), "{} vs {}", da, db);
    }

    #[test]
    fn md_with_identity_is_squared_euclidean(
        mus in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..5),
        h in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        let st = GaussianClassStats::from_parts(mus.clone(), eye).unwrap();
        let euclid = mus.iter()
            .map(|m| m.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((st.min_distance(&h).unwrap() - euclid).abs() < 1e-10);
    }

    #[test]
    fn selection_ignores_input_order(
        vals in prop::collection::vec(0u8..5, 1..30),
        k in 0usize..35,
        seed in any::<u64>(),
    ) {
        let scores: Vec<Score> = vals.iter().enumerate().map(|(i, &v)| sc(i as u64, v as f64)).collect();
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(select_top(&scores, k), select_top(&shuffled, k));
        let toks = |id: InstanceId| (id.0 % 7) as usize + 1;
        prop_assert_eq!(select_top_budget(&scores, toks, k * 3), select_top_budget(&shuffled, toks, k * 3));
    }
}

fn argmax_index(p: &[f64]) -> usize {
    (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
}
