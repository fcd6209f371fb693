//! Two-dimensional loss surface around a parameter set, along random
//! filter-normalized orthogonal directions.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::{dot, Matrix};
use crate::netkernel::{forward, CompositeLoss, Mode, NetworkParams};
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub enabled: bool,
    pub grid_n: usize,
    pub radius: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            enabled: true,
            grid_n: 41,
            radius: 1.0,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n == 0 || self.grid_n % 2 == 0 {
            return Err(FlareError::InvalidInput(format!(
                "grid_n {} must be odd",
                self.grid_n
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(FlareError::InvalidInput(format!("radius {}", self.radius)));
        }
        Ok(())
    }
}

fn gaussian_direction(params: &NetworkParams, seed: u64, which: u64) -> NetworkParams {
    let mut r = rng::stream(seed, &[tags::LANDSCAPE, which]);
    let mut d = params.zeros_like();
    for dl in d.layers_mut() {
        for v in dl.weights.as_mut_slice() {
            *v = StandardNormal.sample(&mut r);
        }
    }
    d
}

fn rescale_to(w: &mut Matrix, target: f64) {
    let norm = w.frobenius_sq().sqrt();
    if target > 0.0 && norm > 0.0 {
        let s = target / norm;
        w.map_inplace(|v| v * s);
    }
}

/// The two probe directions. Each layer's weight block of `d2` is made
/// orthogonal to that of `d1`, then both are rescaled to the Frobenius norm
/// of the layer's weights, so the directions are orthogonal overall and
/// filter-normalized per layer. Bias entries are zero; a layer whose weights
/// are all zero keeps its raw draw.
pub fn landscape_directions(
    params: &NetworkParams,
    seed: u64,
) -> Result<(NetworkParams, NetworkParams)> {
    let mut d1 = gaussian_direction(params, seed, 1);
    let mut d2 = gaussian_direction(params, seed, 2);
    for ((l1, l2), pl) in d1.layers_mut().zip(d2.layers_mut()).zip(params.layers()) {
        let target = pl.weights.frobenius_sq().sqrt();
        rescale_to(&mut l1.weights, target);
        let n11 = l1.weights.frobenius_sq();
        if n11 == 0.0 {
            return Err(FlareError::InvalidInput("degenerate probe direction".into()));
        }
        let proj = dot(l1.weights.as_slice(), l2.weights.as_slice()) / n11;
        for (b, a) in l2.weights.as_mut_slice().iter_mut().zip(l1.weights.as_slice()) {
            *b -= proj * a;
        }
        rescale_to(&mut l2.weights, target);
    }
    Ok((d1, d2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub mode: String,
    pub grid_n: usize,
    pub radius: f64,
    /// Offsets along each direction, shared by both axes.
    pub coords: Vec<f64>,
    /// `losses[i][j]` at `θ + coords[i]·d1 + coords[j]·d2`.
    pub losses: Matrix,
    pub center_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub mode: String,
    pub center_loss: f64,
    pub min_loss: f64,
    pub center_is_min: bool,
}

impl LandscapeGrid {
    pub fn summary(&self) -> LandscapeSummary {
        let min = self
            .losses
            .as_slice()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        LandscapeSummary {
            mode: self.mode.clone(),
            center_loss: self.center_loss,
            min_loss: min,
            center_is_min: self.center_loss <= min,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,loss\n");
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                let _ = writeln!(out, "{a},{b},{}", self.losses.get(i, j));
            }
        }
        out
    }
}

fn loss_at(
    params: &NetworkParams,
    loss: &dyn CompositeLoss,
    batch: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let trace = forward(params, batch, Mode::Eval, None)?;
    Ok(loss.evaluate(batch, labels, &trace)?.value)
}

/// Eval-mode loss on `grid_n × grid_n` points of `[−radius, radius]²`.
pub fn loss_surface_grid(
    mode: &str,
    params: &NetworkParams,
    loss: &dyn CompositeLoss,
    batch: &Matrix,
    labels: &[usize],
    cfg: &LandscapeConfig,
    seed: u64,
) -> Result<LandscapeGrid> {
    cfg.validate()?;
    let (d1, d2) = landscape_directions(params, seed)?;
    let c = (cfg.grid_n / 2) as f64;
    let coords: Vec<f64> = (0..cfg.grid_n)
        .map(|i| if c == 0.0 { 0.0 } else { cfg.radius * (i as f64 - c) / c })
        .collect();
    let rows: Vec<Vec<f64>> = coords
        .par_iter()
        .map(|&a| {
            coords
                .iter()
                .map(|&b| {
                    let mut p = params.clone();
                    p.add_scaled(&d1, a);
                    p.add_scaled(&d2, b);
                    loss_at(&p, loss, batch, labels)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let losses = Matrix::from_rows(&rows)?;
    let mid = cfg.grid_n / 2;
    Ok(LandscapeGrid {
        mode: mode.to_string(),
        grid_n: cfg.grid_n,
        radius: cfg.radius,
        center_loss: losses.get(mid, mid),
        coords,
        losses,
    })
}
