//! The essential UMAP pipeline at desk scale: exact kNN, smooth-kNN
//! bandwidths, fuzzy-union symmetrization and the seeded SGD layout.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::rng::{self, tags};

use super::pca::fit_pca;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub target_dim: usize,
    pub epochs: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            n_neighbors: 15,
            target_dim: 2,
            epochs: 200,
            min_dist: 0.1,
            spread: 1.0,
            negative_sample_rate: 5,
            learning_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapModel {
    /// Training rows (already standardized).
    pub train: Matrix,
    pub embedding: Matrix,
    pub n_neighbors: usize,
    pub rhos: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
const GRAD_CLIP: f64 = 4.0;

/// Indices and distances of the `k` nearest rows of `data` to `query`
/// (ties broken by index), skipping `exclude`.
fn nearest(data: &Matrix, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = data
        .iter_rows()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, r)| (j, squared_distance(query, r)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(j, d)| (j, d.sqrt())).collect()
}

/// Bandwidth σ with `Σ exp(−max(0, d − ρ)/σ) = log2(k)`, by bisection.
pub fn smooth_knn_sigma(dists: &[f64], rho: f64, target: f64) -> f64 {
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..64 {
        let psum: f64 = dists
            .iter()
            .map(|&d| (-(d - rho).max(0.0) / mid).exp())
            .sum();
        if (psum - target).abs() < SMOOTH_K_TOLERANCE {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            if hi.is_infinite() {
                mid *= 2.0;
            } else {
                mid = (lo + hi) / 2.0;
            }
        }
    }
    mid
}

/// Least-squares fit of `1/(1 + a x^{2b})` to the offset-exponential target
/// curve defined by `min_dist` and `spread` (Levenberg–Marquardt).
pub fn fit_ab(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut mu = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        // Normal equations of the Gauss–Newton step.
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let r = 1.0 / den - y;
            let da = -p / (den * den);
            let db = -a * p * 2.0 * x.ln() / (den * den);
            jtj[0][0] += da * da;
            jtj[0][1] += da * db;
            jtj[1][1] += db * db;
            jtr[0] += da * r;
            jtr[1] += db * r;
        }
        jtj[1][0] = jtj[0][1];
        let m00 = jtj[0][0] * (1.0 + mu);
        let m11 = jtj[1][1] * (1.0 + mu);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let step_b = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let new_cost = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if new_cost < cost {
            let done = (cost - new_cost) < 1e-15 * cost.max(1e-300)
                || (step_a.abs() < 1e-12 && step_b.abs() < 1e-12);
            a = na;
            b = nb;
            cost = new_cost;
            mu = (mu * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

struct Graph {
    heads: Vec<usize>,
    tails: Vec<usize>,
    weights: Vec<f64>,
}

fn initial_layout(data: &Matrix, dim: usize, rng: &mut impl Rng) -> Matrix {
    let n = data.rows();
    let pca = if dim <= data.cols() { fit_pca(data, dim).ok() } else { None };
    let mut emb = match pca.and_then(|p| p.transform(data).ok()) {
        Some(e) => e,
        None => Matrix::zeros(n, dim),
    };
    let max_abs = emb.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 1e-12 {
        let s = 10.0 / max_abs;
        emb.map_inplace(|v| v * s);
        let jitter = Normal::new(0.0, 1e-4).expect("valid normal");
        for v in emb.as_mut_slice() {
            *v += jitter.sample(rng);
        }
    } else {
        for v in emb.as_mut_slice() {
            *v = rng.random_range(-10.0..10.0);
        }
    }
    emb
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

fn optimize_layout(emb: &mut Matrix, graph: &Graph, params: &UmapParams, a: f64, b: f64, rng: &mut impl Rng) {
    let n = emb.rows();
    let dim = emb.cols();
    let epochs = params.epochs;
    let max_w = graph.weights.iter().copied().fold(0.0f64, f64::max);
    if max_w <= 0.0 || epochs == 0 {
        return;
    }
    let eps: Vec<f64> = graph
        .weights
        .iter()
        .map(|&w| {
            if w * epochs as f64 >= max_w {
                max_w / w
            } else {
                -1.0
            }
        })
        .collect();
    let neg_rate = params.negative_sample_rate.max(1) as f64;
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / neg_rate).collect();
    let mut next = eps.clone();
    let mut next_neg = eps_neg.clone();
    let mut cur = vec![0.0; dim];
    let mut oth = vec![0.0; dim];

    for epoch in 0..epochs {
        let n_f = epoch as f64;
        let alpha = params.learning_rate * (1.0 - n_f / epochs as f64);
        for e in 0..eps.len() {
            if eps[e] <= 0.0 || next[e] > n_f {
                continue;
            }
            let (j, k) = (graph.heads[e], graph.tails[e]);
            cur.copy_from_slice(emb.row(j));
            oth.copy_from_slice(emb.row(k));
            let d2 = squared_distance(&cur, &oth);
            let coef = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for d in 0..dim {
                let g = clip(coef * (cur[d] - oth[d]));
                cur[d] += g * alpha;
                oth[d] -= g * alpha;
            }
            emb.row_mut(j).copy_from_slice(&cur);
            emb.row_mut(k).copy_from_slice(&oth);
            next[e] += eps[e];

            let n_neg = ((n_f - next_neg[e]) / eps_neg[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let t = rng.random_range(0..n);
                if t == j {
                    continue;
                }
                let other = emb.row(t);
                let d2 = squared_distance(&cur, other);
                let coef = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else {
                    0.0
                };
                for d in 0..dim {
                    let g = if coef > 0.0 {
                        clip(coef * (cur[d] - other[d]))
                    } else {
                        GRAD_CLIP
                    };
                    cur[d] += g * alpha;
                }
            }
            emb.row_mut(j).copy_from_slice(&cur);
            next_neg[e] += n_neg as f64 * eps_neg[e];
        }
    }
}

pub fn fit_umap(data: &Matrix, params: &UmapParams, seed: u64) -> Result<UmapModel> {
    let n = data.rows();
    let k = params.n_neighbors;
    if k == 0 || n <= k {
        return Err(FlareError::InvalidInput(format!(
            "UMAP needs more than n_neighbors = {k} rows, got {n}"
        )));
    }
    if params.target_dim == 0 {
        return Err(FlareError::InvalidInput("target_dim must be positive".into()));
    }
    if !data.is_finite() {
        return Err(FlareError::NonFinite("UMAP input".into()));
    }
    let knn: Vec<Vec<(usize, f64)>> = (0..n).map(|i| nearest(data, data.row(i), k, Some(i))).collect();
    let mean_dist = knn.iter().flatten().map(|(_, d)| d).sum::<f64>() / (n * k) as f64;
    let target = (k as f64).log2();

    let mut rhos = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for nb in &knn {
        let dists: Vec<f64> = nb.iter().map(|(_, d)| *d).collect();
        let rho = dists[0];
        let mut sigma = smooth_knn_sigma(&dists, rho, target);
        let floor = if rho > 0.0 {
            MIN_K_DIST_SCALE * dists.iter().sum::<f64>() / dists.len() as f64
        } else {
            MIN_K_DIST_SCALE * mean_dist
        };
        if sigma < floor {
            sigma = floor;
        }
        if sigma <= 0.0 {
            sigma = f64::MIN_POSITIVE;
        }
        rhos.push(rho);
        sigmas.push(sigma);
    }

    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, nb) in knn.iter().enumerate() {
        for &(j, d) in nb {
            let w = (-(d - rhos[i]).max(0.0) / sigmas[i]).exp();
            directed.insert((i, j), w);
        }
    }
    let mut graph = Graph {
        heads: Vec::new(),
        tails: Vec::new(),
        weights: Vec::new(),
    };
    let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let u = w + back - w * back;
        sym.insert((i, j), u);
        sym.insert((j, i), u);
    }
    for ((i, j), w) in sym {
        if w > 0.0 {
            graph.heads.push(i);
            graph.tails.push(j);
            graph.weights.push(w);
        }
    }

    let (a, b) = fit_ab(params.min_dist, params.spread);
    let mut rng = rng::stream(seed, &[tags::REDUCER]);
    let mut embedding = initial_layout(data, params.target_dim, &mut rng);
    optimize_layout(&mut embedding, &graph, params, a, b, &mut rng);
    if !embedding.is_finite() {
        return Err(FlareError::NonFinite("UMAP layout".into()));
    }
    Ok(UmapModel {
        train: data.clone(),
        embedding,
        n_neighbors: k,
        rhos,
        sigmas,
        a,
        b,
    })
}

impl UmapModel {
    /// Membership-weighted mean of the embeddings of the nearest training
    /// rows, using each neighbor's fitted bandwidth.
    pub fn transform(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.train.cols() {
            return Err(FlareError::ShapeMismatch(format!(
                "rows have {} columns, UMAP was fit on {}",
                rows.cols(),
                self.train.cols()
            )));
        }
        let dim = self.embedding.cols();
        let mut out = Matrix::zeros(rows.rows(), dim);
        for (i, q) in rows.iter_rows().enumerate() {
            let nb = nearest(&self.train, q, self.n_neighbors, None);
            let mut w: Vec<f64> = nb
                .iter()
                .map(|&(j, d)| (-(d - self.rhos[j]).max(0.0) / self.sigmas[j]).exp())
                .collect();
            let mut total: f64 = w.iter().sum();
            if !(total > 0.0) {
                w.iter_mut().for_each(|v| *v = 1.0);
                total = w.len() as f64;
            }
            let dst = out.row_mut(i);
            for (&(j, _), wj) in nb.iter().zip(&w) {
                for (o, e) in dst.iter_mut().zip(self.embedding.row(j)) {
                    *o += wj / total * e;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_constants_for_default_min_dist() {
        let (a, b) = fit_ab(0.1, 1.0);
        // Reference least-squares solution for min_dist 0.1, spread 1.0.
        assert!((a - 1.5769).abs() < 2e-3, "a = {a}");
        assert!((b - 0.8951).abs() < 2e-3, "b = {b}");
    }

    #[test]
    fn sigma_hits_target() {
        let d = [0.5, 0.7, 0.9, 1.3, 2.0];
        let target = (5f64).log2();
        let s = smooth_knn_sigma(&d, 0.5, target);
        let sum: f64 = d.iter().map(|&x| (-(x - 0.5f64).max(0.0) / s).exp()).sum();
        assert!((sum - target).abs() < 1e-4);
    }

    #[test]
    fn knn_excludes_self_and_breaks_ties_by_index() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![5.0]]).unwrap();
        let nb = nearest(&x, x.row(0), 2, Some(0));
        assert_eq!(nb.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2]);
    }
}
