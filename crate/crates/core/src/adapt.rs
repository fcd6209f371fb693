//! Per-cluster fine-tuning from the pretrained base with a one-sided
//! do-no-harm hinge, periodic parameter averaging with conditional adoption,
//! early stopping and best-checkpoint reload.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrainingView;
use crate::error::{FlareError, Result};
use crate::matrix::Matrix;
use crate::metrics::macro_f1_labels;
use crate::netkernel::loss::{add_ce_grad, add_fisher_grad, ce_value};
use crate::netkernel::{
    self, adam_step, argmax, fisher_proxy, forward, AdamState, Checkpoint, CheckpointMeta,
    CompositeLoss, FisherVariant, ForwardTrace, LossEvaluation, LossTerms, Mode, NetworkParams,
    OutputGrads,
};
use crate::pretrain::IMPROVEMENT_THRESHOLD;
use crate::rng::{self, tags};
use crate::strata::{ClusterAssignment, StratifierModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Number of leading encoder layers kept fixed; `None` means half the
    /// encoder, rounded down.
    pub freeze_depth: Option<usize>,
    pub alpha: f64,
    pub lambda_dnh: f64,
    pub fisher_variant: FisherVariant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub agg_interval: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            freeze_depth: None,
            alpha: 0.5,
            lambda_dnh: 1.0,
            fisher_variant: FisherVariant::LastLayer,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            agg_interval: 5,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FlareError::InvalidInput(format!("adapt alpha {}", self.alpha)));
        }
        if !(self.lambda_dnh >= 0.0 && self.lambda_dnh.is_finite()) {
            return Err(FlareError::InvalidInput(format!("lambda {}", self.lambda_dnh)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlareError::InvalidInput(format!("adapt learning rate {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.agg_interval == 0 {
            return Err(FlareError::InvalidInput(
                "epochs, batch_size and agg_interval must be at least 1".into(),
            ));
        }
        if self.agg_interval > self.epochs {
            return Err(FlareError::InvalidInput(format!(
                "aggregation interval {} exceeds {} epochs",
                self.agg_interval, self.epochs
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(FlareError::InvalidInput(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.freeze_depth(encoder_layers) > encoder_layers {
            return Err(FlareError::InvalidInput(format!(
                "freeze depth {} exceeds {encoder_layers} encoder layers",
                self.freeze_depth(encoder_layers)
            )));
        }
        Ok(())
    }

    pub fn freeze_depth(&self, encoder_layers: usize) -> usize {
        self.freeze_depth.unwrap_or(encoder_layers / 2)
    }
}

/// Sample positions of one cluster. `train2` and `val` index the holdout
/// view, `test` the test view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClusterSplit {
    pub train2: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClusterData {
    pub clusters: Vec<ClusterSplit>,
}

impl ClusterData {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn with_test(mut self, test_ids: &[usize]) -> Result<Self> {
        for c in &mut self.clusters {
            c.test.clear();
        }
        for (i, &id) in test_ids.iter().enumerate() {
            let slot = self.clusters.get_mut(id).ok_or_else(|| {
                FlareError::InvalidInput(format!("test sample routed to unknown cluster {id}"))
            })?;
            slot.test.push(i);
        }
        Ok(self)
    }
}

/// Largest-remainder allocation of `total` across `sizes`.
fn proportional_quota(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..sizes.len()).collect();
    rest.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total - quota.iter().sum::<usize>();
    for i in rest {
        if missing == 0 {
            break;
        }
        if quota[i] < sizes[i] {
            quota[i] += 1;
            missing -= 1;
        }
    }
    quota
}

/// Seeded per-cluster train2/val split of the holdout samples, stratified by
/// label. Clusters with at least two samples get at least one sample on each
/// side.
pub fn split_cluster_data(
    ids: &[usize],
    labels: &[usize],
    n_clusters: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<ClusterData> {
    if ids.len() != labels.len() {
        return Err(FlareError::ShapeMismatch(format!(
            "{} cluster ids for {} labels",
            ids.len(),
            labels.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(FlareError::InvalidInput(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &c) in ids.iter().enumerate() {
        members
            .get_mut(c)
            .ok_or_else(|| FlareError::InvalidInput(format!("cluster id {c} ≥ {n_clusters}")))?
            .push(i);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let clusters = members
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let n = m.len();
            let mut n_val = (n as f64 * val_fraction).round() as usize;
            if n >= 2 {
                n_val = n_val.clamp(1, n - 1);
            } else {
                n_val = 0;
            }
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for &i in m {
                by_label[labels[i]].push(i);
            }
            let sizes: Vec<usize> = by_label.iter().map(Vec::len).collect();
            let quota = proportional_quota(&sizes, n_val);
            let mut split = ClusterSplit::default();
            for (label, group) in by_label.iter_mut().enumerate() {
                let mut r = rng::stream(seed, &[tags::SPLIT, c as u64, label as u64]);
                group.shuffle(&mut r);
                split.val.extend_from_slice(&group[..quota[label]]);
                split.train2.extend_from_slice(&group[quota[label]..]);
            }
            split.val.sort_unstable();
            split.train2.sort_unstable();
            split
        })
        .collect();
    Ok(ClusterData { clusters })
}

/// `α·CE + (1−α)·F·𝟙{ŷ=y} + λ·max(CE − CE*, 0)` per sample, averaged. The
/// baseline cross-entropies `CE*` are constants aligned with the batch rows.
#[derive(Debug, Clone, Copy)]
pub struct AdaptLoss<'a> {
    pub alpha: f64,
    pub lambda_dnh: f64,
    pub fisher_variant: FisherVariant,
    pub baseline_ce: &'a [f64],
}

impl AdaptLoss<'_> {
    pub fn from_config<'a>(cfg: &AdaptConfig, baseline_ce: &'a [f64]) -> AdaptLoss<'a> {
        AdaptLoss {
            alpha: cfg.alpha,
            lambda_dnh: cfg.lambda_dnh,
            fisher_variant: cfg.fisher_variant,
            baseline_ce,
        }
    }
}

impl CompositeLoss for AdaptLoss<'_> {
    fn evaluate(
        &self,
        batch: &Matrix,
        labels: &[usize],
        trace: &ForwardTrace,
    ) -> Result<LossEvaluation> {
        let n = batch.rows();
        if self.baseline_ce.len() != n {
            return Err(FlareError::ShapeMismatch(format!(
                "{} baseline values for {n} rows",
                self.baseline_ce.len()
            )));
        }
        let inv_n = 1.0 / n.max(1) as f64;
        let classes = trace.probs.cols();
        let h_dim = trace.h_penult.cols();
        let w_fisher = 1.0 - self.alpha;
        let mut d_logits = Matrix::zeros(n, classes);
        let mut d_penult = Matrix::zeros(n, h_dim);
        let mut terms = LossTerms::default();

        for i in 0..n {
            let p = trace.probs.row(i);
            let h = trace.h_penult.row(i);
            let y = labels[i];
            let ce = ce_value(p, y);
            let fisher = fisher_proxy(p, h, y, self.fisher_variant);
            let correct = argmax(p) == y;
            let excess = ce - self.baseline_ce[i];
            let hinge = excess.max(0.0);
            let gate = if correct { 1.0 } else { 0.0 };
            let total = self.alpha * ce + w_fisher * fisher * gate + self.lambda_dnh * hinge;

            let mut ce_scale = self.alpha;
            if excess > 0.0 {
                ce_scale += self.lambda_dnh;
            }
            if ce_scale != 0.0 {
                add_ce_grad(p, y, ce_scale * inv_n, d_logits.row_mut(i));
            }
            if w_fisher != 0.0 && correct {
                let mut dl = d_logits.row(i).to_vec();
                let mut dh = vec![0.0; h_dim];
                add_fisher_grad(p, h, y, self.fisher_variant, w_fisher * inv_n, &mut dl, &mut dh);
                d_logits.row_mut(i).copy_from_slice(&dl);
                d_penult.row_mut(i).copy_from_slice(&dh);
            }

            terms.recon.push(0.0);
            terms.ce.push(ce);
            terms.fisher.push(fisher);
            terms.correct.push(correct);
            terms.hinge.push(hinge);
            terms.total.push(total);
        }
        let value = terms.total.iter().sum::<f64>() * inv_n;
        Ok(LossEvaluation {
            value,
            terms,
            output_grads: OutputGrads {
                d_logits,
                d_recon: None,
                d_penult: (w_fisher != 0.0).then_some(d_penult),
            },
        })
    }
}

/// Adaptation loss of a batch given traces under the cluster model and the
/// base model.
pub fn adapt_loss(
    trace: &ForwardTrace,
    baseline: &ForwardTrace,
    batch: &Matrix,
    labels: &[usize],
    cfg: &AdaptConfig,
) -> Result<LossEvaluation> {
    if baseline.probs.rows() != batch.rows() {
        return Err(FlareError::ShapeMismatch(
            "baseline trace covers a different batch".into(),
        ));
    }
    let base_ce: Vec<f64> = baseline
        .probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| ce_value(p, y))
        .collect();
    AdaptLoss::from_config(cfg, &base_ce).evaluate(batch, labels, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionEvent {
    pub epoch: usize,
    pub cluster: usize,
    pub adopted: bool,
    /// Val F1 of the live cluster model before the offer.
    pub f1_before: f64,
    /// Val F1 of the cluster model after the decision.
    pub f1_after: f64,
    /// Val F1 of the averaged model.
    pub f1_offered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub cluster: usize,
    /// Live parameters at the end of training.
    pub params: NetworkParams,
    pub best: NetworkParams,
    pub best_f1: f64,
    pub best_epoch: usize,
    /// Val F1 of the base model on this cluster.
    pub base_f1: f64,
    pub train2_size: usize,
    pub val_size: usize,
    /// Best val F1 after each epoch, starting with epoch 0 (the base).
    pub best_f1_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModelSet {
    pub clusters: Vec<ClusterModel>,
    /// Canonical-layer mask of parameters held at the base values.
    pub frozen: Vec<bool>,
    pub adoption_log: Vec<AdoptionEvent>,
}

pub const ADOPTION_LOG_HEADER: &str = "epoch,cluster,adopted,f1_before,f1_after";

impl ClusterModelSet {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// A set in which every cluster uses the base model unchanged.
    pub fn identity(base: &NetworkParams, n_clusters: usize) -> Self {
        ClusterModelSet {
            clusters: (0..n_clusters)
                .map(|c| ClusterModel {
                    cluster: c,
                    params: base.clone(),
                    best: base.clone(),
                    best_f1: 0.0,
                    best_epoch: 0,
                    base_f1: 0.0,
                    train2_size: 0,
                    val_size: 0,
                    best_f1_trace: vec![0.0],
                })
                .collect(),
            frozen: vec![false; base.spec.num_layers()],
            adoption_log: Vec::new(),
        }
    }

    pub fn adoption_log_csv(&self) -> String {
        let mut out = String::from(ADOPTION_LOG_HEADER);
        out.push('\n');
        for e in &self.adoption_log {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.cluster, e.adopted, e.f1_before, e.f1_after
            );
        }
        out
    }

    pub fn checkpoints(&self, seed: u64) -> Vec<Checkpoint> {
        self.clusters
            .iter()
            .map(|c| {
                Checkpoint::new(
                    c.best.clone(),
                    CheckpointMeta {
                        seed,
                        epoch: c.best_epoch,
                        selection_f1: c.best_f1,
                        label: Some(format!("cluster_{}", c.cluster)),
                    },
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochRecord {
    pub epoch: usize,
    pub cluster_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdaptHistory {
    pub epochs: Vec<AdaptEpochRecord>,
    pub stopped_early: bool,
}

/// Macro-F1 of `params` on the given holdout rows; an empty set scores 0.
fn score(params: &NetworkParams, view: &TrainingView, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let x = view.features.select_rows(rows);
    let y: Vec<usize> = rows.iter().map(|&i| view.labels[i]).collect();
    let preds = netkernel::predict(params, &x)?;
    macro_f1_labels(&y, &preds)
}

struct ClusterState<'a> {
    id: usize,
    train2: &'a [usize],
    /// Rows used for model selection: val, or train2 when val is empty.
    select: &'a [usize],
    params: NetworkParams,
    adam: AdamState,
    f1: f64,
    best: NetworkParams,
    best_f1: f64,
    best_epoch: usize,
    base_f1: f64,
    trace: Vec<f64>,
}

fn train_epoch(
    st: &mut ClusterState<'_>,
    holdout: &TrainingView,
    base_ce: &[f64],
    frozen: &[bool],
    cfg: &AdaptConfig,
    epoch: usize,
) -> Result<()> {
    let mut order = st.train2.to_vec();
    let mut shuffle = rng::stream(cfg.seed, &[tags::ADAPT, st.id as u64, epoch as u64, 0]);
    let mut dropout = rng::stream(cfg.seed, &[tags::ADAPT, st.id as u64, epoch as u64, 1]);
    order.shuffle(&mut shuffle);
    for chunk in order.chunks(cfg.batch_size) {
        let x = holdout.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| holdout.labels[i]).collect();
        let b: Vec<f64> = chunk.iter().map(|&i| base_ce[i]).collect();
        let loss = AdaptLoss::from_config(cfg, &b);
        let (grads, _) =
            netkernel::compute_gradients(&st.params, &x, &y, &loss, Mode::Train, Some(&mut dropout))
                .map_err(|e| match e {
                    FlareError::NonFinite(m) => FlareError::NonFinite(format!(
                        "adaptation cluster {} epoch {epoch}: {m}",
                        st.id
                    )),
                    other => other,
                })?;
        adam_step(&mut st.params, &grads, &mut st.adam, cfg.lr, frozen)?;
    }
    if !st.params.is_finite() {
        return Err(FlareError::NonFinite(format!(
            "parameters diverged in adaptation cluster {} epoch {epoch}",
            st.id
        )));
    }
    Ok(())
}

/// Fine-tunes one model per cluster from `base` on the holdout samples.
pub fn run_adaptation(
    base: &NetworkParams,
    holdout: &TrainingView,
    data: &ClusterData,
    cfg: &AdaptConfig,
) -> Result<(ClusterModelSet, AdaptHistory)> {
    let enc_layers = base.spec.encoder.len();
    cfg.validate(enc_layers)?;
    base.validate()?;
    if data.clusters.is_empty() {
        return Err(FlareError::InvalidInput("no clusters to adapt".into()));
    }
    let depth = cfg.freeze_depth(enc_layers);
    let mut frozen = vec![false; base.spec.num_layers()];
    frozen[..depth].fill(true);

    let base_ce: Vec<f64> = if holdout.is_empty() {
        Vec::new()
    } else {
        let t = forward(base, &holdout.features, Mode::Eval, None)?;
        t.probs
            .iter_rows()
            .zip(&holdout.labels)
            .map(|(p, &y)| ce_value(p, y))
            .collect()
    };

    let mut states: Vec<ClusterState<'_>> = data
        .clusters
        .iter()
        .enumerate()
        .map(|(id, split)| {
            let select: &[usize] = if split.val.is_empty() {
                &split.train2
            } else {
                &split.val
            };
            let f1 = score(base, holdout, select)?;
            Ok(ClusterState {
                id,
                train2: &split.train2,
                select,
                params: base.clone(),
                adam: AdamState::new(base),
                f1,
                best: base.clone(),
                best_f1: f1,
                best_epoch: 0,
                base_f1: f1,
                trace: vec![f1],
            })
        })
        .collect::<Result<_>>()?;

    let mut history = AdaptHistory::default();
    let mut adoption_log = Vec::new();
    let mut patience_ref = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        states
            .par_iter_mut()
            .filter(|st| !st.train2.is_empty())
            .try_for_each(|st| -> Result<()> {
                train_epoch(st, holdout, &base_ce, &frozen, cfg, epoch)?;
                st.f1 = score(&st.params, holdout, st.select)?;
                if st.f1 > st.best_f1 {
                    st.best_f1 = st.f1;
                    st.best = st.params.clone();
                    st.best_epoch = epoch;
                }
                Ok(())
            })?;

        if epoch % cfg.agg_interval == 0 {
            let live: Vec<&NetworkParams> = states.iter().map(|s| &s.params).collect();
            let mut avg = netkernel::average_params(&live)?;
            for (dst, src) in avg.encoder.iter_mut().zip(&base.encoder).take(depth) {
                dst.clone_from(src);
            }
            let offered: Vec<Option<f64>> = states
                .par_iter()
                .map(|st| {
                    if st.train2.is_empty() {
                        Ok(None)
                    } else {
                        score(&avg, holdout, st.select).map(Some)
                    }
                })
                .collect::<Result<_>>()?;
            for (st, off) in states.iter_mut().zip(offered) {
                let Some(f1_bar) = off else { continue };
                let before = st.f1;
                let adopted = f1_bar > before;
                if adopted {
                    st.params.clone_from(&avg);
                    st.f1 = f1_bar;
                    if f1_bar > st.best_f1 {
                        st.best_f1 = f1_bar;
                        st.best = avg.clone();
                        st.best_epoch = epoch;
                    }
                }
                adoption_log.push(AdoptionEvent {
                    epoch,
                    cluster: st.id,
                    adopted,
                    f1_before: before,
                    f1_after: st.f1,
                    f1_offered: f1_bar,
                });
            }
        }

        let cluster_f1: Vec<f64> = states.iter().map(|s| s.f1).collect();
        let mean_f1 = cluster_f1.iter().sum::<f64>() / cluster_f1.len() as f64;
        for st in &mut states {
            st.trace.push(st.best_f1);
        }
        log::debug!("adapt epoch {epoch}: mean val f1 {mean_f1:.4}");
        history.epochs.push(AdaptEpochRecord {
            epoch,
            cluster_f1,
            mean_f1,
        });
        if mean_f1 > patience_ref + IMPROVEMENT_THRESHOLD {
            patience_ref = mean_f1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }

    let clusters = states
        .into_iter()
        .map(|st| ClusterModel {
            cluster: st.id,
            params: st.params,
            best: st.best,
            best_f1: st.best_f1,
            best_epoch: st.best_epoch,
            base_f1: st.base_f1,
            train2_size: st.train2.len(),
            val_size: data.clusters[st.id].val.len(),
            best_f1_trace: st.trace,
        })
        .collect();
    Ok((
        ClusterModelSet {
            clusters,
            frozen,
            adoption_log,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedPredictions {
    pub cluster_ids: Vec<usize>,
    pub predictions: Vec<usize>,
    pub assignment: ClusterAssignment,
}

/// Routes each row with pseudo-label descriptors under `base` and predicts
/// with its cluster's best model.
pub fn route_and_predict(
    base: &NetworkParams,
    stratifier: &StratifierModel,
    models: &ClusterModelSet,
    features: &Matrix,
) -> Result<RoutedPredictions> {
    if stratifier.n_clusters() != models.n_clusters() {
        return Err(FlareError::InvalidInput(format!(
            "stratifier has {} clusters, model set {}",
            stratifier.n_clusters(),
            models.n_clusters()
        )));
    }
    let assignment = stratifier.route(base, features, None)?;
    let mut predictions = vec![0; features.rows()];
    for (c, model) in models.clusters.iter().enumerate() {
        let rows: Vec<usize> = (0..features.rows())
            .filter(|&i| assignment.ids[i] == c)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let preds = netkernel::predict(&model.best, &features.select_rows(&rows))?;
        for (&i, p) in rows.iter().zip(preds) {
            predictions[i] = p;
        }
    }
    Ok(RoutedPredictions {
        cluster_ids: assignment.ids.clone(),
        predictions,
        assignment,
    })
}

/// One row of the per fold and cluster comparison between the base model and
/// the adapted cluster model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldClusterDelta {
    pub seed: u64,
    pub fold: usize,
    pub cluster: usize,
    pub val_size: usize,
    pub val_f1_base: f64,
    pub val_f1_adapted: f64,
    pub val_delta: f64,
    pub test_size: usize,
    pub test_f1_base: Option<f64>,
    pub test_f1_adapted: Option<f64>,
}

pub const FOLD_CLUSTER_HEADER: &str =
    "seed,fold,cluster,val_size,val_f1_base,val_f1_adapted,val_delta,test_size,test_f1_base,test_f1_adapted";

pub fn fold_cluster_deltas(
    seed: u64,
    fold: usize,
    base: &NetworkParams,
    models: &ClusterModelSet,
    data: &ClusterData,
    test: &TrainingView,
) -> Result<Vec<FoldClusterDelta>> {
    models
        .clusters
        .iter()
        .zip(&data.clusters)
        .map(|(m, split)| {
            let (tb, ta) = if split.test.is_empty() {
                (None, None)
            } else {
                (
                    Some(score(base, test, &split.test)?),
                    Some(score(&m.best, test, &split.test)?),
                )
            };
            Ok(FoldClusterDelta {
                seed,
                fold,
                cluster: m.cluster,
                val_size: m.val_size,
                val_f1_base: m.base_f1,
                val_f1_adapted: m.best_f1,
                val_delta: m.best_f1 - m.base_f1,
                test_size: split.test.len(),
                test_f1_base: tb,
                test_f1_adapted: ta,
            })
        })
        .collect()
}

pub fn fold_cluster_csv(rows: &[FoldClusterDelta]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from(FOLD_CLUSTER_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.fold,
            r.cluster,
            r.val_size,
            r.val_f1_base,
            r.val_f1_adapted,
            r.val_delta,
            r.test_size,
            opt(r.test_f1_base),
            opt(r.test_f1_adapted)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkernel::{init_network, Activation, Architecture};
    use rand::{Rng, SeedableRng};

    fn spec() -> crate::netkernel::NetworkSpec {
        Architecture {
            encoder: vec![6, 3],
            classifier: vec![4],
            classes: 2,
            activation: Activation::Tanh,
            encoder_dropout: vec![],
            classifier_dropout: vec![],
        }
        .build(2)
        .unwrap()
    }

    fn view(n: usize, seed: u64) -> TrainingView {
        let mut r = rng::FlareRng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
            .collect();
        let labels = rows.iter().map(|x| usize::from(x[0] + 0.3 * x[1] > 0.0)).collect();
        TrainingView {
            features: Matrix::from_rows(&rows).unwrap(),
            labels,
            person_ids: (0..n).map(|i| format!("p{}", i % 7)).collect(),
            sample_index: (0..n).collect(),
        }
    }

    fn single_trace(p_true: f64, y: usize) -> ForwardTrace {
        // Identity net: logits = (x, 0), so p_1 = σ(−x).
        let spec = crate::netkernel::NetworkSpec {
            encoder: vec![crate::netkernel::LayerSpec::new(1, 1, Activation::Identity)],
            decoder: vec![crate::netkernel::LayerSpec::new(1, 1, Activation::Identity)],
            classifier: vec![crate::netkernel::LayerSpec::new(1, 2, Activation::Identity)],
        };
        let mut params = NetworkParams::zeros(&spec);
        params.encoder[0].weights.set(0, 0, 1.0);
        params.classifier[0].weights.set(0, 0, 1.0);
        let p0 = if y == 0 { p_true } else { 1.0 - p_true };
        let x = (p0 / (1.0 - p0)).ln();
        forward(&params, &Matrix::from_rows(&[vec![x]]).unwrap(), Mode::Eval, None).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let cfg = AdaptConfig {
            alpha: 1.0,
            lambda_dnh: 1.0,
            ..AdaptConfig::default()
        };
        let x = Matrix::zeros(1, 1);
        // CE(θ_c) = 0.4 against CE(θ*) = 0.5: no hinge.
        let t = single_trace((-0.4f64).exp(), 0);
        let b = single_trace((-0.5f64).exp(), 0);
        let e = adapt_loss(&t, &b, &x, &[0], &cfg).unwrap();
        assert_eq!(e.terms.hinge[0], 0.0);
        let t = single_trace((-0.7f64).exp(), 0);
        let e = adapt_loss(&t, &b, &x, &[0], &cfg).unwrap();
        assert!((e.terms.hinge[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_lambda_zero_is_ce() {
        let cfg = AdaptConfig {
            alpha: 1.0,
            lambda_dnh: 0.0,
            ..AdaptConfig::default()
        };
        let params = init_network(&spec(), 1).unwrap();
        let v = view(10, 2);
        let t = forward(&params, &v.features, Mode::Eval, None).unwrap();
        let base = init_network(&spec(), 9).unwrap();
        let b = forward(&base, &v.features, Mode::Eval, None).unwrap();
        let e = adapt_loss(&t, &b, &v.features, &v.labels, &cfg).unwrap();
        let ce = netkernel::ce_loss(&t.probs, &v.labels);
        assert!((e.value - ce.iter().sum::<f64>() / 10.0).abs() < 1e-15);
    }

    #[test]
    fn split_examples() {
        let ids = vec![0; 10];
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let a = split_cluster_data(&ids, &labels, 1, 0.2, 3).unwrap();
        let b = split_cluster_data(&ids, &labels, 1, 0.2, 3).unwrap();
        assert_eq!(a, b);
        let s = &a.clusters[0];
        assert_eq!((s.train2.len(), s.val.len()), (8, 2));
        assert!(s.val.iter().all(|i| !s.train2.contains(i)));
        // Stratified: one of each label in val.
        let ones = s.val.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(ones, 1);
    }

    #[test]
    fn split_partitions_all_samples() {
        let ids: Vec<usize> = (0..37).map(|i| (i * 7) % 3).collect();
        let labels: Vec<usize> = (0..37).map(|i| (i / 2) % 2).collect();
        let d = split_cluster_data(&ids, &labels, 4, 0.25, 1).unwrap();
        let mut all: Vec<usize> = d
            .clusters
            .iter()
            .flat_map(|c| c.train2.iter().chain(&c.val).copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert!(d.clusters[3].train2.is_empty() && d.clusters[3].val.is_empty());
        assert!(split_cluster_data(&[5], &[0], 2, 0.2, 0).is_err());
    }

    #[test]
    fn quota_sums_to_total() {
        assert_eq!(proportional_quota(&[3, 7], 2), vec![1, 1]);
        assert_eq!(proportional_quota(&[10, 0], 2), vec![2, 0]);
        assert_eq!(proportional_quota(&[], 0), Vec::<usize>::new());
    }

    #[test]
    fn adaptation_never_regresses_and_keeps_frozen_layers() {
        let v = view(120, 5);
        let base = init_network(&spec(), 4).unwrap();
        let ids: Vec<usize> = (0..120).map(|i| usize::from(v.features.get(i, 1) > 0.0)).collect();
        let data = split_cluster_data(&ids, &v.labels, 2, 0.2, 7).unwrap();
        let cfg = AdaptConfig {
            epochs: 12,
            lr: 1e-2,
            ..AdaptConfig::default()
        };
        let (set, hist) = run_adaptation(&base, &v, &data, &cfg).unwrap();
        assert!(!hist.epochs.is_empty());
        for m in &set.clusters {
            assert!(m.best_f1 >= m.base_f1);
            assert!(m.best_f1_trace.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(m.best.encoder[0], base.encoder[0]);
            assert_eq!(m.params.encoder[0], base.encoder[0]);
            assert_eq!(score(&m.best, &v, &data.clusters[m.cluster].val).unwrap(), m.best_f1);
        }
        for e in &set.adoption_log {
            assert!(e.f1_after >= e.f1_before);
            assert_eq!(e.adopted, e.f1_offered > e.f1_before);
        }
        assert_eq!(set.frozen, vec![true, false, false, false, false, false]);
        let again = run_adaptation(&base, &v, &data, &cfg).unwrap().0;
        assert_eq!(again, set);
    }

    #[test]
    fn single_cluster_average_is_identity() {
        let v = view(60, 6);
        let base = init_network(&spec(), 2).unwrap();
        let data = split_cluster_data(&[0; 60], &v.labels, 1, 0.2, 0).unwrap();
        let cfg = AdaptConfig {
            epochs: 6,
            agg_interval: 1,
            patience: 100,
            ..AdaptConfig::default()
        };
        let (set, _) = run_adaptation(&base, &v, &data, &cfg).unwrap();
        assert!(set.adoption_log.iter().all(|e| !e.adopted));
        assert_eq!(set.adoption_log.len(), 6);
    }

    #[test]
    fn empty_cluster_keeps_base() {
        let v = view(40, 8);
        let base = init_network(&spec(), 3).unwrap();
        let data = split_cluster_data(&[0; 40], &v.labels, 2, 0.2, 0).unwrap();
        let cfg = AdaptConfig {
            epochs: 5,
            ..AdaptConfig::default()
        };
        let (set, _) = run_adaptation(&base, &v, &data, &cfg).unwrap();
        assert_eq!(set.clusters[1].best, base);
        assert_eq!(set.clusters[1].params, base);
        assert!(set.adoption_log.iter().all(|e| e.cluster == 0));
    }

    #[test]
    fn config_validation() {
        let bad = AdaptConfig {
            freeze_depth: Some(3),
            ..AdaptConfig::default()
        };
        assert!(bad.validate(2).is_err());
        let bad = AdaptConfig {
            agg_interval: 60,
            ..AdaptConfig::default()
        };
        assert!(bad.validate(2).is_err());
        assert_eq!(AdaptConfig::default().freeze_depth(3), 1);
    }

    #[test]
    fn adoption_log_csv_header() {
        let base = init_network(&spec(), 0).unwrap();
        let set = ClusterModelSet::identity(&base, 2);
        assert_eq!(set.adoption_log_csv(), format!("{ADOPTION_LOG_HEADER}\n"));
    }
}
