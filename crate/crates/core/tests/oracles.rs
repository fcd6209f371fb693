use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use flare_core::data::{make_folds, synth_generate, SynthConfig, TrainingView};
use flare_core::matrix::squared_distance;
use flare_core::metrics::{bhe, macro_f1_labels, subgroup_f1, F1Variant, PredictionRecord};
use flare_core::strata::{fit_umap, UmapParams};
use flare_core::Matrix;

fn neighbor_ranks(m: &Matrix, i: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.rows()).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| {
        squared_distance(m.row(i), m.row(a))
            .total_cmp(&squared_distance(m.row(i), m.row(b)))
            .then(a.cmp(&b))
    });
    idx
}

/// Trustworthiness of an embedding at neighborhood size `k`.
fn trustworthiness(high: &Matrix, low: &Matrix, k: usize) -> f64 {
    let n = high.rows();
    let mut penalty = 0.0;
    for i in 0..n {
        let hr = neighbor_ranks(high, i);
        let mut rank = vec![0usize; n];
        for (r, &j) in hr.iter().enumerate() {
            rank[j] = r + 1;
        }
        for &j in neighbor_ranks(low, i).iter().take(k) {
            if rank[j] > k {
                penalty += (rank[j] - k) as f64;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty
}

#[test]
fn umap_embedding_is_trustworthy() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let centers = [[0.0; 5], [6.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 6.0, 0.0, 0.0]];
    let rows: Vec<Vec<f64>> = (0..150)
        .map(|i| {
            centers[i % 3]
                .iter()
                .map(|c| c + Distribution::<f64>::sample(&StandardNormal, &mut r))
                .collect()
        })
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let model = fit_umap(&x, &UmapParams::default(), 3).unwrap();
    let t = trustworthiness(&x, &model.embedding, 5);
    assert!(t >= 0.85, "trustworthiness {t}");
}

#[test]
fn training_view_carries_no_attributes() {
    let ds = synth_generate(&SynthConfig::default(), 0).unwrap();
    let v = ds.training_view(&[0, 1, 2]);
    // Exhaustive destructuring: a new field fails to compile here.
    let TrainingView {
        features,
        labels,
        person_ids,
        sample_index,
    } = v;
    assert_eq!(features.rows(), 3);
    assert_eq!(labels.len(), 3);
    assert_eq!(person_ids.len(), 3);
    assert_eq!(sample_index, vec![0, 1, 2]);
}

#[test]
fn synthetic_benchmark_shape() {
    let cfg = SynthConfig::default();
    let ds = synth_generate(&cfg, 2).unwrap();
    assert_eq!(ds.len(), 60 * 30);
    assert_eq!(ds.persons().len(), 60);
    let mut per_group: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut agree = 0usize;
    for s in &ds.samples {
        let g = s.attributes["group_proxy"].as_str();
        per_group.entry(g).or_default().insert(&s.person_id);
        agree += usize::from(s.attributes["noisy_proxy"] == s.attributes["group_proxy"]);
    }
    assert!(per_group.values().all(|p| p.len() == 20));
    let rate = agree as f64 / ds.len() as f64;
    assert!((rate - 0.8).abs() < 0.04, "proxy agreement {rate}");
    assert_eq!(synth_generate(&cfg, 2).unwrap(), ds);
}

#[test]
fn folds_partition_persons() {
    let ds = synth_generate(&SynthConfig::default(), 1).unwrap();
    let plan = make_folds(&ds, 4, 0.2, 1).unwrap();
    let everyone = ds.persons();
    let mut tested = BTreeSet::new();
    for f in &plan.folds {
        assert_eq!(f.test.len(), 15);
        assert_eq!(f.holdout_train.len(), 9);
        assert!(f.train.is_disjoint(&f.test) && f.holdout_train.is_disjoint(&f.test));
        assert!(f.train.is_disjoint(&f.holdout_train));
        let all: BTreeSet<_> = f.train.union(&f.holdout_train).chain(&f.test).cloned().collect();
        assert_eq!(all, everyone);
        assert!(tested.is_disjoint(&f.test));
        tested.extend(f.test.iter().cloned());
    }
    assert_eq!(tested, everyone);
}

fn oracle_macro_f1(t: &[usize], p: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = t.iter().chain(p).copied().collect();
    let mut s = 0.0;
    for &c in &classes {
        let tp = t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64;
        let pred = p.iter().filter(|&&b| b == c).count() as f64;
        let actual = t.iter().filter(|&&a| a == c).count() as f64;
        let prec = if pred > 0.0 { tp / pred } else { 0.0 };
        let rec = if actual > 0.0 { tp / actual } else { 0.0 };
        s += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    }
    s / classes.len() as f64
}

fn records(rows: &[(u8, usize, usize)]) -> Vec<PredictionRecord> {
    rows.iter()
        .map(|&(g, t, p)| PredictionRecord {
            person_id: "p".into(),
            fold: 0,
            y_true: t,
            y_pred: p,
            attributes: BTreeMap::from([("a".to_string(), format!("{g}"))]),
        })
        .collect()
}

proptest! {
    #[test]
    fn macro_f1_matches_precision_recall_form(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let got = macro_f1_labels(&t, &p).unwrap();
        prop_assert!((got - oracle_macro_f1(&t, &p)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn harm_delta_never_exceeds_benefit_delta(
        rows in prop::collection::vec((0u8..4, 0usize..2, 0usize..2, 0usize..2), 4..80)
    ) {
        let base = records(&rows.iter().map(|&(g, t, p, _)| (g, t, p)).collect::<Vec<_>>());
        let cand = records(&rows.iter().map(|&(g, t, _, q)| (g, t, q)).collect::<Vec<_>>());
        let sb = subgroup_f1(&base, "a", F1Variant::Macro).unwrap();
        let sc = subgroup_f1(&cand, "a", F1Variant::Macro).unwrap();
        let row = bhe(&sb, &sc).unwrap();
        prop_assert!(row.delta.dh <= row.delta.db + 1e-15);
        let same = bhe(&sb, &sb).unwrap();
        prop_assert_eq!(same.delta.db, 0.0);
        prop_assert_eq!(same.delta.dh, 0.0);
        prop_assert_eq!(same.delta.de, 0.0);
    }
}
