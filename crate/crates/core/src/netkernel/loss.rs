//! Per-sample loss terms and their gradients at the network outputs.

use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::Matrix;

use super::ForwardTrace;

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FisherVariant {
    /// Squared norm of the last-layer log-likelihood gradient (weights and
    /// bias): `‖p − e_y‖² (‖h‖² + 1)`.
    #[default]
    LastLayer,
    /// Logit-space part only: `‖p − e_y‖²`.
    LogitOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda_dnh: f64,
    #[serde(default)]
    pub fisher_variant: FisherVariant,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            lambda_dnh: 1.0,
            fisher_variant: FisherVariant::LastLayer,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(FlareError::InvalidInput(format!(
                "alpha {} and beta {} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        if !(self.lambda_dnh >= 0.0) || !self.lambda_dnh.is_finite() {
            return Err(FlareError::InvalidInput(format!(
                "lambda {} must be finite and non-negative",
                self.lambda_dnh
            )));
        }
        Ok(())
    }
}

/// Gradients of the batch loss with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_logits: Matrix,
    pub d_recon: Option<Matrix>,
    pub d_penult: Option<Matrix>,
}

/// Per-sample loss components of one batch.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: Vec<f64>,
    pub ce: Vec<f64>,
    /// Fisher proxy before gating.
    pub fisher: Vec<f64>,
    pub correct: Vec<bool>,
    pub hinge: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossTerms {
    pub fn mean_fisher_on_correct(&self) -> f64 {
        let (sum, n) = self
            .fisher
            .iter()
            .zip(&self.correct)
            .filter(|(_, &c)| c)
            .fold((0.0, 0usize), |(s, n), (f, _)| (s + f, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossEvaluation {
    /// Batch mean of the per-sample totals.
    pub value: f64,
    pub terms: LossTerms,
    pub output_grads: OutputGrads,
}

/// A scalar training objective defined on a forward trace.
pub trait CompositeLoss: Sync {
    fn evaluate(&self, batch: &Matrix, labels: &[usize], trace: &ForwardTrace)
        -> Result<LossEvaluation>;
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn ce_value(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

pub fn ce_loss(probs: &Matrix, labels: &[usize]) -> Vec<f64> {
    probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| ce_value(p, y))
        .collect()
}

pub fn recon_loss(x: &Matrix, x_recon: &Matrix) -> Vec<f64> {
    x.iter_rows()
        .zip(x_recon.iter_rows())
        .map(|(a, b)| {
            let d = a.len().max(1) as f64;
            a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / d
        })
        .collect()
}

pub fn fisher_proxy(p: &[f64], h: &[f64], label: usize, variant: FisherVariant) -> f64 {
    let logit_part: f64 = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let u = pk - if k == label { 1.0 } else { 0.0 };
            u * u
        })
        .sum();
    match variant {
        FisherVariant::LogitOnly => logit_part,
        FisherVariant::LastLayer => logit_part * (h.iter().map(|v| v * v).sum::<f64>() + 1.0),
    }
}

/// Adds `scale · ∂ℓCE/∂logits` into `d_logits`.
pub(crate) fn add_ce_grad(p: &[f64], label: usize, scale: f64, d_logits: &mut [f64]) {
    if p[label] < PROB_FLOOR {
        // The clamped branch is flat.
        return;
    }
    for (k, (d, &pk)) in d_logits.iter_mut().zip(p).enumerate() {
        let e = if k == label { 1.0 } else { 0.0 };
        *d += scale * (pk - e);
    }
}

/// Adds `scale · ∂F/∂logits` and `scale · ∂F/∂h`.
pub(crate) fn add_fisher_grad(
    p: &[f64],
    h: &[f64],
    label: usize,
    variant: FisherVariant,
    scale: f64,
    d_logits: &mut [f64],
    d_h: &mut [f64],
) {
    let u: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk - if k == label { 1.0 } else { 0.0 })
        .collect();
    let (h_factor, s) = match variant {
        FisherVariant::LastLayer => (
            h.iter().map(|v| v * v).sum::<f64>() + 1.0,
            u.iter().map(|v| v * v).sum::<f64>(),
        ),
        FisherVariant::LogitOnly => (1.0, 0.0),
    };
    // dF/dp = 2u·(‖h‖²+1); pushed through the softmax Jacobian.
    let g: Vec<f64> = u.iter().map(|&v| 2.0 * v * h_factor).collect();
    let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    for (k, d) in d_logits.iter_mut().enumerate() {
        *d += scale * p[k] * (g[k] - pg);
    }
    if variant == FisherVariant::LastLayer {
        for (d, &hv) in d_h.iter_mut().zip(h) {
            *d += scale * 2.0 * s * hv;
        }
    }
}

/// Adds `scale · ∂recon/∂x̃` for the per-sample mean squared error.
pub(crate) fn add_recon_grad(x: &[f64], xr: &[f64], scale: f64, d_recon: &mut [f64]) {
    let d = x.len().max(1) as f64;
    for ((g, a), b) in d_recon.iter_mut().zip(x).zip(xr) {
        *g += scale * 2.0 * (b - a) / d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ce_matches_direct_formula() {
        assert!(ce_value(&[1.0, 0.0], 0).abs() < 1e-15);
        assert_relative_eq!(ce_value(&[0.5, 0.5], 1), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(ce_value(&[0.9, 0.1], 1), std::f64::consts::LN_10, epsilon = 1e-15);
        assert_relative_eq!(ce_value(&[1.0, 0.0], 1), -(PROB_FLOOR.ln()));
    }

    #[test]
    fn recon_is_feature_mean() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 3.0]]).unwrap();
        let xr = Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(recon_loss(&x, &xr), vec![1.0, 0.0]);
        let a = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        assert_eq!(recon_loss(&a, &b), vec![9.0]);
    }

    #[test]
    fn fisher_closed_form() {
        assert_eq!(fisher_proxy(&[0.0, 1.0], &[3.0, 4.0], 1, FisherVariant::LastLayer), 0.0);
        assert_eq!(fisher_proxy(&[1.0, 0.0], &[3.0], 0, FisherVariant::LogitOnly), 0.0);
        assert_relative_eq!(
            fisher_proxy(&[0.5, 0.5], &[1.0, 1.0], 0, FisherVariant::LastLayer),
            1.5
        );
        assert_relative_eq!(
            fisher_proxy(&[0.5, 0.5], &[1.0, 1.0], 0, FisherVariant::LogitOnly),
            0.5
        );
    }

    #[test]
    fn softmax_rows_normalized_and_argmax_ties_low() {
        let l = Matrix::from_rows(&[vec![0.0, 0.0], vec![800.0, -800.0], vec![1.0, 3.0]]).unwrap();
        let p = softmax_rows(&l);
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(argmax(p.row(0)), 0);
        assert_eq!(argmax(p.row(2)), 1);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: 1.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
