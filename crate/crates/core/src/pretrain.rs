//! Base pretraining: the composite reconstruction / cross-entropy / gated
//! Fisher objective, trained with mini-batch Adam and checkpointed on the
//! selection macro-F1.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TrainingView;
use crate::error::{FlareError, Result};
use crate::matrix::Matrix;
use crate::netkernel::loss::{add_ce_grad, add_fisher_grad, add_recon_grad, ce_value};
use crate::netkernel::{
    self, adam_step, argmax, fisher_proxy, AdamState, Checkpoint, CheckpointMeta, CompositeLoss,
    ForwardTrace, LossEvaluation, LossTerms, LossWeights, Mode, NetworkSpec, OutputGrads,
};
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Plain supervised cross-entropy.
    Benign,
    /// Reconstruction plus cross-entropy, no Fisher term.
    BptWoFisher,
    /// Full composite objective with the configured weights.
    BptWFisher,
}

impl PretrainMode {
    /// Weights actually used by this mode.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            PretrainMode::Benign => LossWeights {
                alpha: 1.0,
                beta: 1.0,
                ..w
            },
            PretrainMode::BptWoFisher => LossWeights { beta: 1.0, ..w },
            PretrainMode::BptWFisher => w,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::Benign => "benign",
            PretrainMode::BptWoFisher => "bpt_wo_fisher",
            PretrainMode::BptWFisher => "bpt_w_fisher",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSplit {
    /// Carve-out of training persons.
    #[default]
    Val,
    /// The fold's test persons.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub loss_weights: LossWeights,
    pub mode: PretrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection_split: SelectionSplit,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            loss_weights: LossWeights::default(),
            mode: PretrainMode::BptWFisher,
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            selection_split: SelectionSplit::Val,
            patience: 20,
        }
    }
}

/// Minimum selection-F1 gain that resets early-stopping patience.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-4;

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FlareError::InvalidInput(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlareError::InvalidInput(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// `(1−α)·recon + α(β·CE + (1−β)·F·𝟙{ŷ=y})`, averaged over the batch. The
/// correctness gate is a constant for differentiation.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    pub weights: LossWeights,
}

impl CompositeLoss for PretrainLoss {
    fn evaluate(
        &self,
        batch: &Matrix,
        labels: &[usize],
        trace: &ForwardTrace,
    ) -> Result<LossEvaluation> {
        let w = self.weights;
        let n = batch.rows();
        let inv_n = 1.0 / n.max(1) as f64;
        let (classes, d_in, h_dim) = (
            trace.probs.cols(),
            batch.cols(),
            trace.h_penult.cols(),
        );
        let mut d_logits = Matrix::zeros(n, classes);
        let mut d_recon = Matrix::zeros(n, d_in);
        let mut d_penult = Matrix::zeros(n, h_dim);
        let mut terms = LossTerms::default();

        let w_recon = 1.0 - w.alpha;
        let w_ce = w.alpha * w.beta;
        let w_fisher = w.alpha * (1.0 - w.beta);

        for i in 0..n {
            let x = batch.row(i);
            let xr = trace.x_recon.row(i);
            let p = trace.probs.row(i);
            let h = trace.h_penult.row(i);
            let y = labels[i];

            let recon = x.iter().zip(xr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / d_in.max(1) as f64;
            let ce = ce_value(p, y);
            let fisher = fisher_proxy(p, h, y, w.fisher_variant);
            let correct = argmax(p) == y;
            let gate = if correct { 1.0 } else { 0.0 };
            let total = w_recon * recon + w_ce * ce + w_fisher * fisher * gate;

            if w_recon != 0.0 {
                add_recon_grad(x, xr, w_recon * inv_n, d_recon.row_mut(i));
            }
            if w_ce != 0.0 {
                add_ce_grad(p, y, w_ce * inv_n, d_logits.row_mut(i));
            }
            if w_fisher != 0.0 && correct {
                let mut dl = vec![0.0; classes];
                let mut dh = vec![0.0; h_dim];
                add_fisher_grad(p, h, y, w.fisher_variant, w_fisher * inv_n, &mut dl, &mut dh);
                for (a, b) in d_logits.row_mut(i).iter_mut().zip(&dl) {
                    *a += b;
                }
                d_penult.row_mut(i).copy_from_slice(&dh);
            }

            terms.recon.push(recon);
            terms.ce.push(ce);
            terms.fisher.push(fisher);
            terms.correct.push(correct);
            terms.hinge.push(0.0);
            terms.total.push(total);
        }
        let value = terms.total.iter().sum::<f64>() * inv_n;
        Ok(LossEvaluation {
            value,
            terms,
            output_grads: OutputGrads {
                d_logits,
                d_recon: (w_recon != 0.0).then_some(d_recon),
                d_penult: (w_fisher != 0.0).then_some(d_penult),
            },
        })
    }
}

/// Convenience wrapper: batch loss for an explicit forward trace.
pub fn pretrain_loss(
    trace: &ForwardTrace,
    batch: &Matrix,
    labels: &[usize],
    weights: LossWeights,
) -> Result<LossEvaluation> {
    PretrainLoss { weights }.evaluate(batch, labels, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub ce: f64,
    pub fisher: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best_f1(&self) -> f64 {
        self.epochs.iter().map(|e| e.f1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,recon,ce,fisher,f1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.recon, e.ce, e.fisher, e.f1
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| FlareError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| FlareError::io(path, e))
    }
}

/// Mini-batch Adam over `train`, selecting the epoch with the best macro-F1
/// on `selection` (ties keep the earlier epoch).
pub fn run_pretraining(
    train: &TrainingView,
    selection: &TrainingView,
    spec: &NetworkSpec,
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, TrainingHistory)> {
    cfg.validate()?;
    if train.is_empty() || selection.is_empty() {
        return Err(FlareError::InvalidInput(
            "pretraining needs non-empty train and selection sets".into(),
        ));
    }
    let loss = PretrainLoss {
        weights: cfg.mode.effective_weights(cfg.loss_weights),
    };
    let mut params = netkernel::init_network(spec, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let frozen = vec![false; spec.num_layers()];

    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, netkernel::NetworkParams)> = None;
    let mut patience_ref = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = rng::stream(cfg.seed, &[tags::SHUFFLE, epoch as u64]);
        let mut dropout_rng = rng::stream(cfg.seed, &[tags::DROPOUT, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let (mut recon_sum, mut ce_sum) = (0.0, 0.0);
        let (mut fisher_sum, mut fisher_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (grads, eval) = netkernel::compute_gradients(
                &params,
                &x,
                &y,
                &loss,
                Mode::Train,
                Some(&mut dropout_rng),
            )
            .map_err(|e| match e {
                FlareError::NonFinite(m) => {
                    FlareError::NonFinite(format!("pretraining epoch {epoch}: {m}"))
                }
                other => other,
            })?;
            adam_step(&mut params, &grads, &mut adam, cfg.lr, &frozen)?;
            if !params.is_finite() {
                return Err(FlareError::NonFinite(format!(
                    "parameters diverged in pretraining epoch {epoch}"
                )));
            }
            recon_sum += eval.terms.recon.iter().sum::<f64>();
            ce_sum += eval.terms.ce.iter().sum::<f64>();
            for (f, &c) in eval.terms.fisher.iter().zip(&eval.terms.correct) {
                if c {
                    fisher_sum += f;
                    fisher_n += 1;
                }
            }
        }

        let f1 = netkernel::macro_f1_forward(&params, &selection.features, &selection.labels)?;
        let n = train.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            recon: recon_sum / n,
            ce: ce_sum / n,
            fisher: if fisher_n == 0 { 0.0 } else { fisher_sum / fisher_n as f64 },
            f1,
        });
        log::debug!("pretrain {} epoch {epoch}: f1 {f1:.4}", cfg.mode.name());

        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, params.clone()));
        }
        if f1 > patience_ref + IMPROVEMENT_THRESHOLD {
            patience_ref = f1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (f1, epoch, params) = best.expect("at least one epoch ran");
    history.best_epoch = epoch;
    let ck = Checkpoint::new(
        params,
        CheckpointMeta {
            seed: cfg.seed,
            epoch,
            selection_f1: f1,
            label: Some(cfg.mode.name().to_string()),
        },
    );
    Ok((ck, history))
}
