use super::*;
use crate::netkernel::CompositeLoss;
use crate::strata::ReducerVariant;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataSource::Synth(SynthConfig {
        persons: 24,
        samples_per_person: 12,
        ..SynthConfig::default()
    });
    cfg.folds = 3;
    cfg.pretrain.epochs = 8;
    cfg.adapt.epochs = 6;
    cfg.stratifier.variant = ReducerVariant::Pca;
    cfg.seeds = vec![1];
    cfg.landscape.grid_n = 3;
    cfg
}

#[test]
fn mode_names_round_trip() {
    for m in RunMode::ALL {
        assert_eq!(RunMode::parse(m.name()).unwrap(), m);
    }
    assert!(RunMode::parse("FLARE").is_err());
    assert!(RunMode::Flare.adapts() && RunMode::CaaWoFisher.adapts());
    assert!(!RunMode::BptWFisher.adapts());
    assert_eq!(RunMode::CaaWoFisher.pretrain_mode(), PretrainMode::BptWoFisher);
}

#[test]
fn run_modes_always_include_benign_in_order() {
    let mut cfg = RunConfig::default();
    cfg.modes = vec![RunMode::Flare, RunMode::BptWoFisher, RunMode::Flare];
    assert_eq!(
        cfg.run_modes(),
        vec![RunMode::Benign, RunMode::BptWoFisher, RunMode::Flare]
    );
}

#[test]
fn config_json_round_trip_and_validation() {
    let cfg = small_config();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    assert!(RunConfig::from_json(r#"{"folds": 4, "bogus": 1}"#).is_err());

    let partial = RunConfig::from_json(r#"{"seeds": [9]}"#).unwrap();
    assert_eq!(partial.seeds, vec![9]);
    assert_eq!(partial.folds, 4);

    for broken in [
        RunConfig {
            seeds: vec![],
            ..RunConfig::default()
        },
        RunConfig {
            folds: 1,
            ..RunConfig::default()
        },
        RunConfig {
            selection_fraction: 1.0,
            ..RunConfig::default()
        },
    ] {
        assert!(broken.validate().is_err());
    }
}

#[test]
fn fold_views_are_person_disjoint() {
    let cfg = small_config();
    let ds = cfg.data.load(3).unwrap();
    let plan = data::make_folds(&ds, 3, 0.2, 3).unwrap();
    for (f, fold) in plan.folds.iter().enumerate() {
        let v = fold_views(&ds, fold, f, 0.2, SelectionSplit::Val, 3).unwrap();
        let persons = |t: &TrainingView| -> BTreeSet<String> { t.person_ids.iter().cloned().collect() };
        let (fit, sel, hold, test) = (
            persons(&v.train_fit),
            persons(&v.selection),
            persons(&v.holdout),
            persons(&v.test),
        );
        for (a, b) in [(&fit, &sel), (&fit, &hold), (&fit, &test), (&sel, &test), (&hold, &test), (&sel, &hold)] {
            assert!(a.is_disjoint(b));
        }
        let train: BTreeSet<String> = fit.union(&sel).cloned().collect();
        assert_eq!(train, persons(&v.train));
        assert_eq!(v.train.len(), v.train_fit.len() + v.selection.len());
    }
}

#[test]
fn small_run_is_deterministic_and_complete() {
    let mut cfg = small_config();
    cfg.modes = RunMode::ALL.to_vec();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(a.failures.is_empty());

    let ds = cfg.data.load(1).unwrap();
    assert_eq!(a.predictions.len(), ds.len() * RunMode::ALL.len());
    for r in &a.predictions {
        assert_eq!(r.cluster.is_some(), r.mode.adapts());
    }
    assert!(a.fold_cluster.iter().all(|d| d.mode.adapts()));
    assert!(a
        .fold_cluster
        .iter()
        .all(|d| d.delta.val_f1_adapted >= d.delta.val_f1_base));
    let modes: BTreeSet<&str> = a.landscape_summary.iter().map(|l| l.mode.as_str()).collect();
    assert_eq!(modes.len(), RunMode::ALL.len());
    assert_eq!(a.primary_candidate(), Some(RunMode::Flare));
    for m in RunMode::ALL.iter().skip(1) {
        assert!(a.seeds[0].bhe.contains_key(m.name()));
    }
    assert!(!a.seeds[0].bhe.contains_key("benign"));
}

#[test]
fn benign_only_run_has_no_cluster_tables() {
    let mut cfg = small_config();
    cfg.modes = vec![RunMode::Benign];
    cfg.landscape.enabled = false;
    let r = run_experiment(&cfg).unwrap();
    assert!(r.fold_cluster.is_empty());
    assert!(r.adaptation.is_empty());
    assert!(r.seeds[0].bhe.is_empty());
    assert_eq!(r.primary_candidate(), None);
    assert!(r.predictions.iter().all(|p| p.cluster.is_none()));
}

#[test]
fn emitted_files_match_manifest() {
    use sha2::{Digest, Sha256};
    let mut cfg = small_config();
    cfg.landscape.enabled = false;
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_reports(&report, dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    let listed = manifest["files"].as_object().unwrap();
    assert_eq!(listed.len(), files.len() - 1);
    for (name, hash) in listed {
        let bytes = std::fs::read(dir.path().join(name)).unwrap();
        assert_eq!(hash.as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    let preds = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), report.predictions.len() + 1);
    assert!(preds.starts_with("seed,mode,cluster,person_id,fold,y_true,y_pred,attr:"));
    assert!(dir.path().join("bhe.csv").exists());
}

#[test]
fn landscape_center_is_plain_loss() {
    let spec = default_architecture().build(4).unwrap();
    let params = netkernel::init_network(&spec, 2).unwrap();
    let x = crate::Matrix::from_rows(&[
        vec![0.1, 0.2, -0.3, 1.0],
        vec![-1.0, 0.5, 0.0, 0.3],
        vec![0.7, -0.2, 0.4, -0.9],
    ])
    .unwrap();
    let y = [0, 1, 1];
    let loss = PretrainLoss {
        weights: Default::default(),
    };
    let cfg = LandscapeConfig {
        enabled: true,
        grid_n: 5,
        radius: 0.3,
    };
    let g = loss_surface_grid("benign", &params, &loss, &x, &y, &cfg, 1).unwrap();
    let t = forward(&params, &x, Mode::Eval, None).unwrap();
    assert_eq!(g.center_loss, loss.evaluate(&x, &y, &t).unwrap().value);
    assert_eq!(g.coords, vec![-0.3, -0.15, 0.0, 0.15, 0.3]);
    assert_eq!(g.to_csv().lines().count(), 26);
    assert!(LandscapeConfig { grid_n: 4, ..cfg }.validate().is_err());
}
