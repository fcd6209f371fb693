use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use flare_core::adapt::{
    fold_cluster_csv, fold_cluster_deltas, route_and_predict, run_adaptation, split_cluster_data,
    AdaptLoss, ClusterModelSet,
};
use flare_core::data::{self, Dataset};
use flare_core::harness::{
    self, emit_reports, fold_views, loss_surface_grid, predictions_csv, FoldViews,
    PredictionRow, RunConfig, RunMode,
};
use flare_core::metrics::{self, read_predictions_csv, PredictionRecord};
use flare_core::netkernel::{self, Checkpoint, NetworkParams};
use flare_core::pretrain::{run_pretraining, PretrainConfig, PretrainLoss};
use flare_core::rng::{self, tags};
use flare_core::strata::{fit_stratifier, StratifierConfig, StratifierModel};
use flare_core::FlareError;

#[derive(Parser, Debug)]
#[command(name = "flare", version, about = "Latent-subgroup fairness pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct FoldArgs {
    /// Dataset CSV; defaults to the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate the synthetic dataset and its fold plan.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain a base model on one fold.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Fit the stratifier on one fold's train split.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adapt per-cluster models on one fold's holdout split.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stratifier: Option<PathBuf>,
    },
    /// Predict one fold's test split and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "models")]
        stratifier: Option<PathBuf>,
        #[arg(long, requires = "stratifier")]
        models: Option<PathBuf>,
    },
    /// Compare two prediction files.
    Bhe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        cand: PathBuf,
        /// Keep only base rows whose `mode` column matches.
        #[arg(long)]
        base_mode: Option<String>,
        /// Keep only candidate rows whose `mode` column matches.
        #[arg(long)]
        cand_mode: Option<String>,
    },
    /// Loss surface around a checkpoint.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-cluster models; the largest cluster is probed with the
        /// adaptation loss.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, requires = "models")]
        stratifier: Option<PathBuf>,
    },
    /// Full experiment.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &common.mode {
        let mode = RunMode::parse(m)?;
        cfg.modes = vec![RunMode::Benign, mode];
    }
    Ok(cfg)
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

struct FoldContext {
    dataset: Dataset,
    views: FoldViews,
    seed: u64,
    fold_seed: u64,
}

fn fold_context(cfg: &RunConfig, args: &FoldArgs) -> anyhow::Result<FoldContext> {
    let seed = first_seed(cfg);
    let dataset = match &args.data {
        Some(p) => data::load_csv(p)?,
        None => cfg.data.load(seed)?,
    };
    let plan = data::make_folds(&dataset, cfg.folds, cfg.holdout_fraction, seed)?;
    let fold = plan
        .folds
        .get(args.fold)
        .ok_or_else(|| anyhow!("fold {} out of range (0..{})", args.fold, plan.k))?;
    let views = fold_views(
        &dataset,
        fold,
        args.fold,
        cfg.selection_fraction,
        cfg.pretrain.selection_split,
        seed,
    )?;
    Ok(FoldContext {
        fold_seed: rng::derive_seed(seed, &[args.fold as u64]),
        dataset,
        views,
        seed,
    })
}

fn run_mode(common: &Common, default: RunMode) -> anyhow::Result<RunMode> {
    Ok(match &common.mode {
        Some(m) => RunMode::parse(m)?,
        None => default,
    })
}

fn strat_config(cfg: &RunConfig, fold_seed: u64) -> StratifierConfig {
    StratifierConfig {
        seed: rng::derive_seed(fold_seed, &[tags::REDUCER]),
        ..cfg.stratifier.clone()
    }
}

fn load_models(path: &Path) -> anyhow::Result<ClusterModelSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ClusterModelSet::from_json(&text)?)
}

fn records(ctx: &FoldContext, fold: usize, preds: &[usize]) -> Vec<PredictionRecord> {
    ctx.views
        .test
        .sample_index
        .iter()
        .zip(preds)
        .map(|(&i, &p)| {
            let s = &ctx.dataset.samples[i];
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

fn execute(verb: Verb) -> anyhow::Result<()> {
    match verb {
        Verb::Synth { common } => {
            let cfg = load_config(&common)?;
            let seed = first_seed(&cfg);
            let ds = cfg.data.load(seed)?;
            fs::create_dir_all(&common.out)?;
            ds.save_csv(&common.out.join("dataset.csv"))?;
            let plan = data::make_folds(&ds, cfg.folds, cfg.holdout_fraction, seed)?;
            write(&common.out.join("folds.json"), plan.to_json()?)?;
            let summary = data::dataset_summary(&ds);
            write(
                &common.out.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
        }
        Verb::Pretrain { common, fold } => {
            let cfg = load_config(&common)?;
            let mode = run_mode(&common, RunMode::BptWFisher)?;
            let ctx = fold_context(&cfg, &fold)?;
            let spec = cfg.architecture.build(ctx.dataset.feature_dim)?;
            let pcfg = PretrainConfig {
                mode: mode.pretrain_mode(),
                seed: ctx.fold_seed,
                ..cfg.pretrain.clone()
            };
            let (ck, history) =
                run_pretraining(&ctx.views.train_fit, &ctx.views.selection, &spec, &pcfg)?;
            fs::create_dir_all(&common.out)?;
            ck.save(&common.out.join("checkpoint.json"))?;
            history.write_csv(&common.out.join("history.csv"))?;
            println!(
                "best epoch {} selection f1 {:.4}",
                ck.metadata.epoch, ck.metadata.selection_f1
            );
        }
        Verb::Cluster {
            common,
            fold,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let ctx = fold_context(&cfg, &fold)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, assignment) =
                fit_stratifier(&ck.params, &ctx.views.train, &strat_config(&cfg, ctx.fold_seed))?;
            fs::create_dir_all(&common.out)?;
            model.save(&common.out.join("stratifier.json"))?;
            write(
                &common.out.join("assignments.csv"),
                assignment.to_csv(&ctx.views.train.sample_index),
            )?;
            println!("{} clusters, sizes {:?}", model.n_clusters(), assignment.counts());
        }
        Verb::Adapt {
            common,
            fold,
            checkpoint,
            stratifier,
        } => {
            let cfg = load_config(&common)?;
            let ctx = fold_context(&cfg, &fold)?;
            let base = Checkpoint::load(&checkpoint)?.params;
            let strat = match stratifier {
                Some(p) => StratifierModel::load(&p)?,
                None => fit_stratifier(&base, &ctx.views.train, &strat_config(&cfg, ctx.fold_seed))?.0,
            };
            let acfg = flare_core::adapt::AdaptConfig {
                seed: rng::derive_seed(ctx.fold_seed, &[tags::ADAPT]),
                ..cfg.adapt.clone()
            };
            let v = &ctx.views;
            let hold = strat.route(&base, &v.holdout.features, None)?;
            let test = strat.route(&base, &v.test.features, None)?;
            let cd = split_cluster_data(
                &hold.ids,
                &v.holdout.labels,
                strat.n_clusters(),
                acfg.val_fraction,
                acfg.seed,
            )?
            .with_test(&test.ids)?;
            let (set, _) = run_adaptation(&base, &v.holdout, &cd, &acfg)?;
            fs::create_dir_all(&common.out)?;
            write(&common.out.join("cluster_models.json"), set.to_json()?)?;
            write(&common.out.join("adoption_log.csv"), set.adoption_log_csv())?;
            for (c, ck) in set.checkpoints(ctx.seed).iter().enumerate() {
                ck.save(&common.out.join(format!("cluster_{c}.json")))?;
            }
            let rows = fold_cluster_deltas(ctx.seed, fold.fold, &base, &set, &cd, &v.test)?;
            write(&common.out.join("fold_cluster_delta.csv"), fold_cluster_csv(&rows))?;
            for r in &rows {
                println!(
                    "cluster {}: val f1 {:.4} -> {:.4}",
                    r.cluster, r.val_f1_base, r.val_f1_adapted
                );
            }
        }
        Verb::Eval {
            common,
            fold,
            checkpoint,
            stratifier,
            models,
        } => {
            let cfg = load_config(&common)?;
            let ctx = fold_context(&cfg, &fold)?;
            let base = Checkpoint::load(&checkpoint)?.params;
            let (preds, clusters) = match (stratifier, models) {
                (Some(s), Some(m)) => {
                    let strat = StratifierModel::load(&s)?;
                    let set = load_models(&m)?;
                    let r = route_and_predict(&base, &strat, &set, &ctx.views.test.features)?;
                    let c = r.cluster_ids.iter().map(|&c| Some(c)).collect();
                    (r.predictions, c)
                }
                _ => (
                    netkernel::predict(&base, &ctx.views.test.features)?,
                    vec![None; ctx.views.test.len()],
                ),
            };
            let mode = run_mode(&common, RunMode::Benign)?;
            let recs = records(&ctx, fold.fold, &preds);
            let f1 = metrics::f1_of(&recs, cfg.f1)?;
            let rows: Vec<PredictionRow> = recs
                .into_iter()
                .zip(clusters)
                .map(|(record, cluster)| PredictionRow {
                    seed: ctx.seed,
                    mode,
                    cluster,
                    record,
                })
                .collect();
            fs::create_dir_all(&common.out)?;
            write(
                &common.out.join("predictions.csv"),
                predictions_csv(&rows, &ctx.dataset.attribute_names),
            )?;
            println!("test f1 {f1:.4}");
        }
        Verb::Bhe {
            common,
            base,
            cand,
            base_mode,
            cand_mode,
        } => {
            let cfg = load_config(&common)?;
            let read = |p: &Path, mode: &Option<String>| -> anyhow::Result<Vec<PredictionRecord>> {
                Ok(read_predictions_csv(p)?
                    .into_iter()
                    .filter(|(_, extra)| {
                        mode.as_ref()
                            .is_none_or(|m| extra.get("mode").is_some_and(|v| v == m))
                    })
                    .map(|(r, _)| r)
                    .collect())
            };
            let b = read(&base, &base_mode)?;
            let c = read(&cand, &cand_mode)?;
            if b.is_empty() || c.is_empty() {
                bail!("no prediction rows after filtering");
            }
            let attrs: Vec<String> = b[0].attributes.keys().cloned().collect();
            let mut rows = Vec::new();
            for a in &attrs {
                let sb = metrics::subgroup_f1(&b, a, cfg.f1)?;
                let sc = metrics::subgroup_f1(&c, a, cfg.f1)?;
                rows.push(metrics::bhe(&sb, &sc)?);
            }
            let report = metrics::BheReport {
                candidate_name: cand_mode.unwrap_or_else(|| cand.display().to_string()),
                rows,
            };
            fs::create_dir_all(&common.out)?;
            write(&common.out.join("bhe.csv"), report.to_csv())?;
            write(
                &common.out.join("bhe.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            print!("{}", report.to_csv());
        }
        Verb::Landscape {
            common,
            fold,
            checkpoint,
            models,
            stratifier,
        } => {
            let cfg = load_config(&common)?;
            let ctx = fold_context(&cfg, &fold)?;
            let base = Checkpoint::load(&checkpoint)?.params;
            let seed = rng::derive_seed(ctx.fold_seed, &[tags::LANDSCAPE]);
            let v = &ctx.views;
            let grid = match (models, stratifier) {
                (Some(m), Some(s)) => {
                    let mode = run_mode(&common, RunMode::Flare)?;
                    let set = load_models(&m)?;
                    let strat = StratifierModel::load(&s)?;
                    let hold = strat.route(&base, &v.holdout.features, None)?;
                    let counts = hold.counts();
                    let largest = (0..counts.len())
                        .max_by(|&i, &j| counts[i].cmp(&counts[j]).then(j.cmp(&i)))
                        .unwrap_or(0);
                    let rows: Vec<usize> =
                        (0..hold.ids.len()).filter(|&i| hold.ids[i] == largest).collect();
                    let sub = v.holdout.subset(&rows);
                    let probs = netkernel::forward(&base, &sub.features, netkernel::Mode::Eval, None)?.probs;
                    let base_ce: Vec<f64> = probs
                        .iter_rows()
                        .zip(&sub.labels)
                        .map(|(p, &y)| netkernel::loss::ce_value(p, y))
                        .collect();
                    let loss = AdaptLoss::from_config(&cfg.adapt, &base_ce);
                    let params: &NetworkParams = &set.clusters[largest].best;
                    loss_surface_grid(
                        mode.name(),
                        params,
                        &loss,
                        &sub.features,
                        &sub.labels,
                        &cfg.landscape,
                        seed,
                    )?
                }
                _ => {
                    let mode = run_mode(&common, RunMode::BptWFisher)?;
                    let loss = PretrainLoss {
                        weights: mode.pretrain_mode().effective_weights(cfg.pretrain.loss_weights),
                    };
                    loss_surface_grid(
                        mode.name(),
                        &base,
                        &loss,
                        &v.holdout.features,
                        &v.holdout.labels,
                        &cfg.landscape,
                        seed,
                    )?
                }
            };
            fs::create_dir_all(&common.out)?;
            write(
                &common.out.join(format!("landscape_{}.csv", grid.mode)),
                grid.to_csv(),
            )?;
            let s = grid.summary();
            println!(
                "center loss {:.6}, grid min {:.6}, center is min: {}",
                s.center_loss, s.min_loss, s.center_is_min
            );
        }
        Verb::Run { common } => {
            let mut cfg = load_config(&common)?;
            cfg.output = Some(common.out.clone());
            let report = harness::run_experiment(&cfg)?;
            let files = emit_reports(&report, &common.out)?;
            for (mode, f1) in &report.summary.overall_f1_mean {
                println!("{mode}: mean macro-F1 {f1:.4}");
            }
            if let Some(p) = report.primary_candidate() {
                if let Some(b) = report.summary.bhe_mean.get(p.name()) {
                    print!("{}", b.to_csv());
                }
            }
            println!("{} files under {}", files.len(), common.out.display());
            if let Some(f) = report.failures.first() {
                let err = if f.numeric {
                    FlareError::NonFinite(f.message.clone())
                } else {
                    FlareError::InvalidInput(f.message.clone())
                };
                return Err(anyhow::Error::new(err).context(format!(
                    "{} fold(s) failed; first: seed {} fold {} in {}",
                    report.failures.len(),
                    f.seed,
                    f.fold,
                    f.phase
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<FlareError>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
