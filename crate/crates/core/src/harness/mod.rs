//! End-to-end experiment runs: person-disjoint folds, every requested mode,
//! pooled scoring against the benign baseline, and report files.

mod landscape;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    fold_cluster_deltas, run_adaptation, split_cluster_data, AdaptConfig, AdaptLoss,
    ClusterModelSet, FoldClusterDelta,
};
use crate::data::{self, Dataset, Fold, SynthConfig, TrainingView};
use crate::error::{FlareError, Result};
use crate::metrics::{
    self, bhe, eod_aod, relative_disparity, subgroup_f1, user_slices, BheReport, EqualizedOdds,
    F1Variant, PredictionRecord, RelativeDisparity, SubgroupScores,
};
use crate::netkernel::loss::ce_value;
use crate::netkernel::{self, forward, Architecture, Mode, NetworkParams, NetworkSpec};
use crate::pretrain::{run_pretraining, PretrainConfig, PretrainLoss, PretrainMode, SelectionSplit};
use crate::rng::{self, tags};
use crate::strata::{fit_stratifier, StratifierConfig, StratifierModel};

pub use landscape::{
    landscape_directions, loss_surface_grid, LandscapeConfig, LandscapeGrid, LandscapeSummary,
};
pub use report::{
    emit_reports, mean_bhe, predictions_csv, write_manifest, PREDICTIONS_FIXED_COLUMNS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

impl DataSource {
    /// The dataset used under `seed`; synthetic data is regenerated per seed.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Csv(p) => data::load_csv(p),
            DataSource::Synth(cfg) => data::synth_generate(cfg, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Benign,
    BptWoFisher,
    BptWFisher,
    CaaWoFisher,
    Flare,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Benign,
        RunMode::BptWoFisher,
        RunMode::BptWFisher,
        RunMode::CaaWoFisher,
        RunMode::Flare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Benign => "benign",
            RunMode::BptWoFisher => "bpt_wo_fisher",
            RunMode::BptWFisher => "bpt_w_fisher",
            RunMode::CaaWoFisher => "caa_wo_fisher",
            RunMode::Flare => "flare",
        }
    }

    pub fn parse(s: &str) -> Result<RunMode> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FlareError::InvalidInput(format!("unknown mode `{s}`")))
    }

    /// Base pretraining this mode builds on.
    pub fn pretrain_mode(self) -> PretrainMode {
        match self {
            RunMode::Benign => PretrainMode::Benign,
            RunMode::BptWoFisher | RunMode::CaaWoFisher => PretrainMode::BptWoFisher,
            RunMode::BptWFisher | RunMode::Flare => PretrainMode::BptWFisher,
        }
    }

    pub fn adapts(self) -> bool {
        matches!(self, RunMode::CaaWoFisher | RunMode::Flare)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub folds: usize,
    pub holdout_fraction: f64,
    /// Share of train persons held out for pretraining checkpoint selection.
    pub selection_fraction: f64,
    pub architecture: Architecture,
    pub pretrain: PretrainConfig,
    pub stratifier: StratifierConfig,
    pub adapt: AdaptConfig,
    pub modes: Vec<RunMode>,
    pub seeds: Vec<u64>,
    pub f1: F1Variant,
    pub landscape: LandscapeConfig,
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::default(),
            folds: 4,
            holdout_fraction: data::DEFAULT_HOLDOUT_FRACTION,
            selection_fraction: 0.2,
            architecture: default_architecture(),
            pretrain: PretrainConfig {
                epochs: 60,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
            stratifier: StratifierConfig::default(),
            adapt: AdaptConfig {
                lr: 1e-3,
                epochs: 30,
                ..AdaptConfig::default()
            },
            modes: vec![RunMode::Benign, RunMode::Flare],
            seeds: (0..5).collect(),
            f1: F1Variant::Macro,
            landscape: LandscapeConfig::default(),
            output: None,
        }
    }
}

pub fn default_architecture() -> Architecture {
    Architecture {
        encoder: vec![32, 16, 8],
        classifier: vec![8],
        classes: 2,
        activation: netkernel::Activation::Tanh,
        encoder_dropout: vec![],
        classifier_dropout: vec![],
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(FlareError::InvalidInput("no seeds configured".into()));
        }
        if self.modes.is_empty() {
            return Err(FlareError::InvalidInput("no modes configured".into()));
        }
        if self.folds < 2 {
            return Err(FlareError::InvalidInput(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction < 1.0) {
            return Err(FlareError::InvalidInput(format!(
                "selection_fraction {} outside (0, 1)",
                self.selection_fraction
            )));
        }
        self.pretrain.validate()?;
        self.adapt.validate(self.architecture.encoder.len())?;
        self.landscape.validate()?;
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// Modes in canonical order, benign always included.
    pub fn run_modes(&self) -> Vec<RunMode> {
        let mut set: BTreeSet<RunMode> = self.modes.iter().copied().collect();
        set.insert(RunMode::Benign);
        set.into_iter().collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }
}

/// Training-facing views of one fold.
#[derive(Debug, Clone)]
pub struct FoldViews {
    /// Train persons minus the selection carve-out.
    pub train_fit: TrainingView,
    pub selection: TrainingView,
    /// All train persons.
    pub train: TrainingView,
    pub holdout: TrainingView,
    pub test: TrainingView,
}

pub fn fold_views(
    dataset: &Dataset,
    fold: &Fold,
    fold_id: usize,
    selection_fraction: f64,
    selection_split: SelectionSplit,
    seed: u64,
) -> Result<FoldViews> {
    let test = dataset.view_of_persons(&fold.test);
    let train = dataset.view_of_persons(&fold.train);
    let holdout = dataset.view_of_persons(&fold.holdout_train);
    let (train_fit, selection) = match selection_split {
        SelectionSplit::Test => (train.clone(), test.clone()),
        SelectionSplit::Val => {
            let mut persons: Vec<String> = fold.train.iter().cloned().collect();
            if persons.len() < 2 {
                return Err(FlareError::InvalidInput(format!(
                    "fold {fold_id} has {} train persons; a selection carve-out needs 2",
                    persons.len()
                )));
            }
            persons.shuffle(&mut rng::stream(seed, &[tags::SELECTION, fold_id as u64]));
            let n_sel = ((persons.len() as f64 * selection_fraction).round() as usize)
                .clamp(1, persons.len() - 1);
            let sel: BTreeSet<String> = persons[..n_sel].iter().cloned().collect();
            let fit: BTreeSet<String> = persons[n_sel..].iter().cloned().collect();
            (dataset.view_of_persons(&fit), dataset.view_of_persons(&sel))
        }
    };
    if train_fit.is_empty() || holdout.is_empty() || test.is_empty() {
        return Err(FlareError::InvalidInput(format!(
            "fold {fold_id} has an empty split (train {}, holdout {}, test {})",
            train_fit.len(),
            holdout.len(),
            test.len()
        )));
    }
    Ok(FoldViews {
        train_fit,
        selection,
        train,
        holdout,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub seed: u64,
    pub mode: RunMode,
    pub cluster: Option<usize>,
    pub record: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeClusterDelta {
    pub mode: RunMode,
    #[serde(flatten)]
    pub delta: FoldClusterDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub seed: u64,
    pub fold: usize,
    pub mode: RunMode,
    pub clusters: usize,
    pub cluster_sizes: Vec<usize>,
    pub epochs_run: usize,
    pub adoptions: usize,
    pub offers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub seed: u64,
    pub fold: usize,
    pub phase: String,
    pub message: String,
    pub numeric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub seed: u64,
    pub fold: usize,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub folds_ok: Vec<usize>,
    pub overall_f1: BTreeMap<String, f64>,
    pub per_fold_f1: BTreeMap<String, BTreeMap<usize, f64>>,
    pub subgroups: BTreeMap<String, Vec<SubgroupScores>>,
    pub bhe: BTreeMap<String, BheReport>,
    pub equalized_odds: BTreeMap<String, BTreeMap<String, EqualizedOdds>>,
    pub relative_disparity: BTreeMap<String, BTreeMap<String, RelativeDisparity>>,
    pub user_f1_mean: BTreeMap<String, f64>,
    pub user_f1_std: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub overall_f1_mean: BTreeMap<String, f64>,
    pub bhe_mean: BTreeMap<String, BheReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub modes: Vec<RunMode>,
    pub seeds: Vec<SeedReport>,
    pub summary: RunSummary,
    pub fold_cluster: Vec<ModeClusterDelta>,
    pub adaptation: Vec<AdaptSummary>,
    pub landscape_summary: Vec<LandscapeSummary>,
    pub failures: Vec<FoldFailure>,
    #[serde(skip)]
    pub predictions: Vec<PredictionRow>,
    #[serde(skip)]
    pub timing: Vec<PhaseTiming>,
    #[serde(skip)]
    pub landscapes: Vec<LandscapeGrid>,
    #[serde(skip)]
    pub attribute_names: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Name of the mode compared against benign in `bhe.csv`.
    pub fn primary_candidate(&self) -> Option<RunMode> {
        if self.modes.contains(&RunMode::Flare) {
            return Some(RunMode::Flare);
        }
        self.modes.iter().rev().copied().find(|m| *m != RunMode::Benign)
    }
}

struct PhaseError {
    phase: String,
    error: FlareError,
}

fn at<T>(phase: &str, r: Result<T>) -> std::result::Result<T, PhaseError> {
    r.map_err(|error| PhaseError {
        phase: phase.to_string(),
        error,
    })
}

struct FoldOutcome {
    fold: usize,
    predictions: Vec<PredictionRow>,
    deltas: Vec<ModeClusterDelta>,
    adapt: Vec<AdaptSummary>,
    timing: Vec<PhaseTiming>,
    landscapes: Vec<LandscapeGrid>,
}

/// Everything an adapting mode produces for one fold.
pub struct AdaptedFold {
    pub stratifier: StratifierModel,
    pub models: ClusterModelSet,
    pub cluster_data: crate::adapt::ClusterData,
    pub test_clusters: Vec<usize>,
    pub test_predictions: Vec<usize>,
    pub epochs_run: usize,
}

/// Stratifier fit, holdout split, adaptation and test routing for one base.
pub fn adapt_fold(
    base: &NetworkParams,
    views: &FoldViews,
    strat_cfg: &StratifierConfig,
    adapt_cfg: &AdaptConfig,
) -> Result<AdaptedFold> {
    let (stratifier, _) = fit_stratifier(base, &views.train, strat_cfg)?;
    let holdout_ids = stratifier.route(base, &views.holdout.features, None)?;
    let routed = stratifier.route(base, &views.test.features, None)?;
    let cluster_data = split_cluster_data(
        &holdout_ids.ids,
        &views.holdout.labels,
        stratifier.n_clusters(),
        adapt_cfg.val_fraction,
        adapt_cfg.seed,
    )?
    .with_test(&routed.ids)?;
    let (models, history) = run_adaptation(base, &views.holdout, &cluster_data, adapt_cfg)?;
    let routed_pred =
        crate::adapt::route_and_predict(base, &stratifier, &models, &views.test.features)?;
    Ok(AdaptedFold {
        stratifier,
        models,
        cluster_data,
        test_clusters: routed_pred.cluster_ids,
        test_predictions: routed_pred.predictions,
        epochs_run: history.epochs.len(),
    })
}

fn records_for(
    dataset: &Dataset,
    view: &TrainingView,
    preds: &[usize],
    fold: usize,
) -> Vec<PredictionRecord> {
    view.sample_index
        .iter()
        .zip(preds)
        .map(|(&i, &p)| {
            let s = &dataset.samples[i];
            PredictionRecord {
                person_id: s.person_id.clone(),
                fold,
                y_true: s.label,
                y_pred: p,
                attributes: s.attributes.clone(),
            }
        })
        .collect()
}

fn holdout_ce(base: &NetworkParams, view: &TrainingView) -> Result<Vec<f64>> {
    let t = forward(base, &view.features, Mode::Eval, None)?;
    Ok(t.probs
        .iter_rows()
        .zip(&view.labels)
        .map(|(p, &y)| ce_value(p, y))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    dataset: &Dataset,
    fold: &Fold,
    fold_id: usize,
    seed: u64,
    modes: &[RunMode],
    with_landscape: bool,
) -> std::result::Result<FoldOutcome, PhaseError> {
    let fold_seed = rng::derive_seed(seed, &[fold_id as u64]);
    let mut timing = Vec::new();
    let mut timed = |phase: String, start: Instant| {
        timing.push(PhaseTiming {
            seed,
            fold: fold_id,
            phase,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let views = at(
        "split",
        fold_views(
            dataset,
            fold,
            fold_id,
            cfg.selection_fraction,
            cfg.pretrain.selection_split,
            seed,
        ),
    )?;

    let needed: BTreeSet<PretrainMode> = modes.iter().map(|m| m.pretrain_mode()).collect();
    let mut bases: BTreeMap<PretrainMode, NetworkParams> = BTreeMap::new();
    for pm in needed {
        let start = Instant::now();
        let pcfg = PretrainConfig {
            mode: pm,
            seed: fold_seed,
            ..cfg.pretrain.clone()
        };
        let phase = format!("pretrain:{}", pm.name());
        let (ck, _) = at(&phase, run_pretraining(&views.train_fit, &views.selection, spec, &pcfg))?;
        timed(phase, start);
        bases.insert(pm, ck.params);
    }

    let strat_cfg = StratifierConfig {
        seed: rng::derive_seed(fold_seed, &[tags::REDUCER]),
        ..cfg.stratifier.clone()
    };
    let adapt_cfg = AdaptConfig {
        seed: rng::derive_seed(fold_seed, &[tags::ADAPT]),
        ..cfg.adapt.clone()
    };
    let landscape_seed = rng::derive_seed(fold_seed, &[tags::LANDSCAPE]);

    let mut predictions = Vec::new();
    let mut deltas = Vec::new();
    let mut adapt = Vec::new();
    let mut landscapes = Vec::new();
    for &mode in modes {
        let base = &bases[&mode.pretrain_mode()];
        let phase = format!("{}:{}", if mode.adapts() { "adapt" } else { "predict" }, mode.name());
        let start = Instant::now();
        let (preds, clusters, probe) = if mode.adapts() {
            let a = at(&phase, adapt_fold(base, &views, &strat_cfg, &adapt_cfg))?;
            let rows = at(
                &phase,
                fold_cluster_deltas(seed, fold_id, base, &a.models, &a.cluster_data, &views.test),
            )?;
            deltas.extend(rows.into_iter().map(|delta| ModeClusterDelta { mode, delta }));
            adapt.push(AdaptSummary {
                seed,
                fold: fold_id,
                mode,
                clusters: a.models.n_clusters(),
                cluster_sizes: a
                    .cluster_data
                    .clusters
                    .iter()
                    .map(|c| c.train2.len() + c.val.len())
                    .collect(),
                epochs_run: a.epochs_run,
                adoptions: a.models.adoption_log.iter().filter(|e| e.adopted).count(),
                offers: a.models.adoption_log.len(),
            });
            let clusters: Vec<Option<usize>> = a.test_clusters.iter().map(|&c| Some(c)).collect();
            (a.test_predictions.clone(), clusters, Some(a))
        } else {
            let p = at(&phase, netkernel::predict(base, &views.test.features))?;
            (p, vec![None; views.test.len()], None)
        };
        timed(phase.clone(), start);

        if with_landscape {
            let start = Instant::now();
            let lphase = format!("landscape:{}", mode.name());
            let grid = match &probe {
                None => {
                    let loss = PretrainLoss {
                        weights: mode.pretrain_mode().effective_weights(cfg.pretrain.loss_weights),
                    };
                    loss_surface_grid(
                        mode.name(),
                        base,
                        &loss,
                        &views.holdout.features,
                        &views.holdout.labels,
                        &cfg.landscape,
                        landscape_seed,
                    )
                }
                Some(a) => {
                    let sizes: Vec<usize> = a
                        .cluster_data
                        .clusters
                        .iter()
                        .map(|c| c.train2.len() + c.val.len())
                        .collect();
                    let largest = (0..sizes.len())
                        .max_by(|&i, &j| sizes[i].cmp(&sizes[j]).then(j.cmp(&i)))
                        .unwrap_or(0);
                    let split = &a.cluster_data.clusters[largest];
                    let mut rows: Vec<usize> =
                        split.train2.iter().chain(&split.val).copied().collect();
                    rows.sort_unstable();
                    let v = views.holdout.subset(&rows);
                    holdout_ce(base, &v).and_then(|b| {
                        let loss = AdaptLoss::from_config(&adapt_cfg, &b);
                        loss_surface_grid(
                            mode.name(),
                            &a.models.clusters[largest].best,
                            &loss,
                            &v.features,
                            &v.labels,
                            &cfg.landscape,
                            landscape_seed,
                        )
                    })
                }
            };
            landscapes.push(at(&lphase, grid)?);
            timed(lphase, start);
        }

        let records = records_for(dataset, &views.test, &preds, fold_id);
        predictions.extend(records.into_iter().zip(clusters).map(|(record, cluster)| {
            PredictionRow {
                seed,
                mode,
                cluster,
                record,
            }
        }));
    }
    Ok(FoldOutcome {
        fold: fold_id,
        predictions,
        deltas,
        adapt,
        timing,
        landscapes,
    })
}

fn score_seed(
    seed: u64,
    folds_ok: Vec<usize>,
    modes: &[RunMode],
    attributes: &[String],
    rows: &[PredictionRow],
    variant: F1Variant,
) -> Result<SeedReport> {
    let mut report = SeedReport {
        seed,
        folds_ok,
        overall_f1: BTreeMap::new(),
        per_fold_f1: BTreeMap::new(),
        subgroups: BTreeMap::new(),
        bhe: BTreeMap::new(),
        equalized_odds: BTreeMap::new(),
        relative_disparity: BTreeMap::new(),
        user_f1_mean: BTreeMap::new(),
        user_f1_std: BTreeMap::new(),
    };
    if report.folds_ok.is_empty() {
        return Ok(report);
    }
    let records_of = |mode: RunMode| -> Vec<PredictionRecord> {
        rows.iter()
            .filter(|r| r.seed == seed && r.mode == mode)
            .map(|r| r.record.clone())
            .collect()
    };
    let mut scores: BTreeMap<RunMode, Vec<SubgroupScores>> = BTreeMap::new();
    for &mode in modes {
        let recs = records_of(mode);
        let name = mode.name().to_string();
        report.overall_f1.insert(name.clone(), metrics::f1_of(&recs, variant)?);
        let mut per_fold = BTreeMap::new();
        for &f in &report.folds_ok {
            let fr: Vec<PredictionRecord> = recs.iter().filter(|r| r.fold == f).cloned().collect();
            per_fold.insert(f, metrics::f1_of(&fr, variant)?);
        }
        report.per_fold_f1.insert(name.clone(), per_fold);
        let mut subs = Vec::new();
        let mut eo = BTreeMap::new();
        let mut rd = BTreeMap::new();
        for a in attributes {
            let s = subgroup_f1(&recs, a, variant)?;
            rd.insert(a.clone(), relative_disparity(&s));
            match eod_aod(&recs, a) {
                Ok(v) => {
                    eo.insert(a.clone(), v);
                }
                Err(e) => log::warn!("{name} / {a}: {e}"),
            }
            subs.push(s);
        }
        let us = user_slices(&recs, variant)?;
        report.user_f1_mean.insert(name.clone(), us.mean);
        report.user_f1_std.insert(name.clone(), us.std);
        report.equalized_odds.insert(name.clone(), eo);
        report.relative_disparity.insert(name.clone(), rd);
        report.subgroups.insert(name, subs.clone());
        scores.insert(mode, subs);
    }
    let base = &scores[&RunMode::Benign];
    for &mode in modes.iter().filter(|m| **m != RunMode::Benign) {
        let rows = base
            .iter()
            .zip(&scores[&mode])
            .map(|(b, c)| bhe(b, c))
            .collect::<Result<Vec<_>>>()?;
        report.bhe.insert(
            mode.name().to_string(),
            BheReport {
                candidate_name: mode.name().to_string(),
                rows,
            },
        );
    }
    Ok(report)
}

/// Runs every seed, fold and mode of `cfg`. Fold failures are recorded and
/// the remaining folds proceed.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let modes = cfg.run_modes();
    let mut seeds = Vec::new();
    let mut predictions = Vec::new();
    let mut fold_cluster = Vec::new();
    let mut adaptation = Vec::new();
    let mut timing = Vec::new();
    let mut landscapes = Vec::new();
    let mut failures = Vec::new();
    let mut attribute_names = Vec::new();

    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let dataset = cfg.data.load(seed)?;
        let spec = cfg.architecture.build(dataset.feature_dim)?;
        attribute_names.clone_from(&dataset.attribute_names);
        let plan = data::make_folds(&dataset, cfg.folds, cfg.holdout_fraction, seed)?;
        log::info!("seed {seed}: {} samples, {} folds", dataset.len(), plan.k);
        let outcomes: Vec<std::result::Result<FoldOutcome, PhaseError>> = plan
            .folds
            .par_iter()
            .enumerate()
            .map(|(f, fold)| {
                let landscape = cfg.landscape.enabled && si == 0 && f == 0;
                run_fold(cfg, &spec, &dataset, fold, f, seed, &modes, landscape)
            })
            .collect();
        let mut folds_ok = Vec::new();
        let mut seed_rows = Vec::new();
        for (f, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(o) => {
                    folds_ok.push(o.fold);
                    seed_rows.extend(o.predictions);
                    fold_cluster.extend(o.deltas);
                    adaptation.extend(o.adapt);
                    timing.extend(o.timing);
                    landscapes.extend(o.landscapes);
                }
                Err(e) => {
                    log::error!("seed {seed} fold {f} failed in {}: {}", e.phase, e.error);
                    failures.push(FoldFailure {
                        seed,
                        fold: f,
                        phase: e.phase,
                        message: e.error.to_string(),
                        numeric: e.error.is_numeric(),
                    });
                }
            }
        }
        // Canonical order: fold, then mode, then test-view order.
        seed_rows.sort_by_key(|r| (r.record.fold, r.mode));
        let rep = score_seed(
            seed,
            folds_ok,
            &modes,
            &dataset.attribute_names,
            &seed_rows,
            cfg.f1,
        )?;
        seeds.push(rep);
        predictions.extend(seed_rows);
    }

    let mut summary = RunSummary::default();
    for &mode in &modes {
        let name = mode.name().to_string();
        let v: Vec<f64> = seeds.iter().filter_map(|s| s.overall_f1.get(&name).copied()).collect();
        if !v.is_empty() {
            summary
                .overall_f1_mean
                .insert(name.clone(), v.iter().sum::<f64>() / v.len() as f64);
        }
        let reports: Vec<&BheReport> = seeds.iter().filter_map(|s| s.bhe.get(&name)).collect();
        if !reports.is_empty() {
            summary.bhe_mean.insert(name, mean_bhe(&reports)?);
        }
    }
    let landscape_summary = landscapes.iter().map(LandscapeGrid::summary).collect();
    Ok(RunReport {
        config: cfg.clone(),
        modes,
        seeds,
        summary,
        fold_cluster,
        adaptation,
        landscape_summary,
        failures,
        predictions,
        timing,
        landscapes,
        attribute_names,
    })
}

#[cfg(test)]
mod tests;
