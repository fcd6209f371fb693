//! Diagonal-covariance Gaussian mixture fitted by EM, initialized from
//! restarted k-means.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::rng::{self, tags};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-7;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `C × dim`.
    pub means: Matrix,
    /// `C × dim`, each entry at least [`VARIANCE_FLOOR`].
    pub variances: Matrix,
    /// Mean per-sample log-likelihood after each E-step.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

/// Per-sample cluster ids and posterior rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<usize>,
    pub posteriors: Matrix,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.posteriors.cols()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_clusters()];
        for &id in &self.ids {
            c[id] += 1;
        }
        c
    }

    pub fn to_csv(&self, sample_index: &[usize]) -> String {
        let mut out = String::from("sample_index,cluster_id");
        for k in 0..self.n_clusters() {
            out.push_str(&format!(",posterior_{k}"));
        }
        out.push('\n');
        for (i, (&s, &id)) in sample_index.iter().zip(&self.ids).enumerate() {
            out.push_str(&format!("{s},{id}"));
            for v in self.posteriors.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// `log w_k + log N(x | μ_k, diag σ²_k)` for every component.
    pub fn weighted_log_densities(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_components())
            .map(|k| {
                let mu = self.means.row(k);
                let var = self.variances.row(k);
                let mut ll = 0.0;
                for ((&xi, &m), &v) in x.iter().zip(mu).zip(var) {
                    ll += -0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v);
                }
                self.weights[k].ln() + ll
            })
            .collect()
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.weighted_log_densities(x);
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    pub fn mean_log_likelihood(&self, data: &Matrix) -> f64 {
        let total: f64 = data
            .iter_rows()
            .map(|r| log_sum_exp(&self.weighted_log_densities(r)))
            .sum();
        total / data.rows().max(1) as f64
    }
}

/// Posterior responsibilities and argmax ids (ties to the lowest id).
pub fn assign(gmm: &GmmModel, rows: &Matrix) -> Result<ClusterAssignment> {
    if rows.cols() != gmm.dim() {
        return Err(FlareError::ShapeMismatch(format!(
            "rows have {} columns, mixture has {}",
            rows.cols(),
            gmm.dim()
        )));
    }
    let c = gmm.n_components();
    let mut posteriors = Matrix::zeros(rows.rows(), c);
    let mut ids = Vec::with_capacity(rows.rows());
    for (i, r) in rows.iter_rows().enumerate() {
        let p = gmm.posterior(r);
        ids.push(crate::netkernel::argmax(&p));
        posteriors.row_mut(i).copy_from_slice(&p);
    }
    Ok(ClusterAssignment { ids, posteriors })
}

fn kmeans_pp(data: &Matrix, c: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = data.rows();
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data
        .iter_rows()
        .map(|r| squared_distance(r, data.row(centers[0])))
        .collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, r) in data.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, data.row(next)));
        }
    }
    centers
}

pub const KMEANS_RESTARTS: usize = 5;
const KMEANS_MAX_ITER: usize = 100;

fn nearest(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter_rows().enumerate() {
        let d = squared_distance(row, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Lloyd's k-means from [`KMEANS_RESTARTS`] k-means++ seedings; returns the
/// hard labels and centers of the lowest-inertia run.
fn kmeans_init(data: &Matrix, c: usize, rng: &mut impl Rng) -> (Vec<usize>, Matrix) {
    let (n, dim) = data.shape();
    let mut best: Option<(f64, Vec<usize>, Matrix)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let seeds = kmeans_pp(data, c, rng);
        let mut centers = data.select_rows(&seeds);
        let mut labels = vec![usize::MAX; n];
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            for (i, r) in data.iter_rows().enumerate() {
                let (k, _) = nearest(r, &centers);
                if labels[i] != k {
                    labels[i] = k;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Matrix::zeros(c, dim);
            let mut counts = vec![0usize; c];
            for (i, r) in data.iter_rows().enumerate() {
                counts[labels[i]] += 1;
                for (s, &x) in sums.row_mut(labels[i]).iter_mut().zip(r) {
                    *s += x;
                }
            }
            for k in 0..c {
                if counts[k] > 0 {
                    let inv = 1.0 / counts[k] as f64;
                    for (m, s) in centers.row_mut(k).iter_mut().zip(sums.row(k)) {
                        *m = s * inv;
                    }
                }
            }
        }
        let inertia: f64 = data.iter_rows().map(|r| nearest(r, &centers).1).sum();
        if best.as_ref().is_none_or(|(b, _, _)| inertia < *b) {
            best = Some((inertia, labels, centers));
        }
    }
    let (_, labels, centers) = best.expect("at least one restart");
    (labels, centers)
}

/// M-step from a responsibility matrix. Components with no mass keep
/// `fallback` means/variances and zero weight.
fn m_step(data: &Matrix, resp: &Matrix, fallback: &GmmModel) -> GmmModel {
    let (n, dim) = data.shape();
    let c = resp.cols();
    let mut weights = vec![0.0; c];
    let mut means = Matrix::zeros(c, dim);
    let mut variances = Matrix::zeros(c, dim);
    for k in 0..c {
        let nk: f64 = (0..n).map(|i| resp.get(i, k)).sum();
        weights[k] = nk / n as f64;
        if nk <= 1e-300 {
            means.row_mut(k).copy_from_slice(fallback.means.row(k));
            variances.row_mut(k).copy_from_slice(fallback.variances.row(k));
            continue;
        }
        for i in 0..n {
            let r = resp.get(i, k);
            if r == 0.0 {
                continue;
            }
            for (m, &x) in means.row_mut(k).iter_mut().zip(data.row(i)) {
                *m += r * x;
            }
        }
        means.row_mut(k).iter_mut().for_each(|m| *m /= nk);
        for i in 0..n {
            let r = resp.get(i, k);
            if r == 0.0 {
                continue;
            }
            let mu = means.row(k).to_vec();
            for ((v, &x), m) in variances.row_mut(k).iter_mut().zip(data.row(i)).zip(mu) {
                *v += r * (x - m) * (x - m);
            }
        }
        variances
            .row_mut(k)
            .iter_mut()
            .for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel {
        weights,
        means,
        variances,
        log_likelihood_trace: Vec::new(),
        converged: false,
    }
}

pub fn fit_gmm(data: &Matrix, c: usize, seed: u64, max_iter: usize, tol: f64) -> Result<GmmModel> {
    let (n, dim) = data.shape();
    if c == 0 {
        return Err(FlareError::InvalidInput("mixture needs at least one component".into()));
    }
    if n < c {
        return Err(FlareError::InvalidInput(format!(
            "{n} rows cannot support {c} components"
        )));
    }
    if !data.is_finite() {
        return Err(FlareError::NonFinite("mixture input".into()));
    }
    let mut rng = rng::stream(seed, &[tags::GMM, c as u64]);
    let (labels, centers) = kmeans_init(data, c, &mut rng);

    let mut resp = Matrix::zeros(n, c);
    for (i, &k) in labels.iter().enumerate() {
        resp.set(i, k, 1.0);
    }
    let global_var: Vec<f64> = {
        let mean = data.column_means();
        (0..dim)
            .map(|j| {
                let v = data.iter_rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                v.max(VARIANCE_FLOOR)
            })
            .collect()
    };
    let mut seed_means = Matrix::zeros(c, dim);
    let mut seed_vars = Matrix::zeros(c, dim);
    for k in 0..c {
        seed_means.row_mut(k).copy_from_slice(centers.row(k));
        seed_vars.row_mut(k).copy_from_slice(&global_var);
    }
    let seed_model = GmmModel {
        weights: vec![1.0 / c as f64; c],
        means: seed_means,
        variances: seed_vars,
        log_likelihood_trace: Vec::new(),
        converged: false,
    };
    let mut model = m_step(data, &resp, &seed_model);

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut total = 0.0;
        for (i, r) in data.iter_rows().enumerate() {
            let logs = model.weighted_log_densities(r);
            let norm = log_sum_exp(&logs);
            total += norm;
            for (k, l) in logs.iter().enumerate() {
                resp.set(i, k, (l - norm).exp());
            }
        }
        let ll = total / n as f64;
        if !ll.is_finite() {
            return Err(FlareError::NonFinite("mixture log-likelihood".into()));
        }
        let gain = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if gain.is_some_and(|g| g < tol) {
            converged = true;
            break;
        }
        model = m_step(data, &resp, &model);
    }
    model.log_likelihood_trace = trace;
    model.converged = converged;
    Ok(model)
}

/// Starting from `c_init`, refits with one fewer component while any
/// hard-assigned cluster is smaller than `min_cluster_size`.
pub fn choose_c(
    data: &Matrix,
    c_init: usize,
    min_cluster_size: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GmmModel> {
    let mut c = c_init.max(1).min(data.rows().max(1));
    loop {
        let model = fit_gmm(data, c, seed, max_iter, tol)?;
        if c == 1 {
            return Ok(model);
        }
        let counts = assign(&model, data)?.counts();
        if counts.iter().all(|&n| n >= min_cluster_size) {
            return Ok(model);
        }
        log::debug!("mixture with {c} components has clusters {counts:?}; shrinking");
        c -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(centers: &[(f64, f64)], per: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rng::stream(seed, &[99]);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (g, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![cx + dx, cy + dy]);
                truth.push(g);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn single_component_is_data_mean() {
        let (x, _) = blobs(&[(1.0, -2.0)], 200, 1);
        let g = fit_gmm(&x, 1, 0, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(g.weights, vec![1.0]);
        let m = x.column_means();
        assert!((g.means.get(0, 0) - m[0]).abs() < 1e-12);
        assert!((g.means.get(0, 1) - m[1]).abs() < 1e-12);
        let a = assign(&g, &x).unwrap();
        assert!(a.posteriors.as_slice().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn two_blobs_recovered() {
        let (x, truth) = blobs(&[(-5.0, 0.0), (5.0, 0.0)], 300, 2);
        let g = fit_gmm(&x, 2, 11, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let mut centers: Vec<(f64, f64)> = (0..2).map(|k| (g.means.get(k, 0), g.means.get(k, 1))).collect();
        centers.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((centers[0].0 + 5.0).abs() < 0.2 && centers[0].1.abs() < 0.2);
        assert!((centers[1].0 - 5.0).abs() < 0.2 && centers[1].1.abs() < 0.2);

        let a = assign(&g, &x).unwrap();
        let agree = a.ids.iter().zip(&truth).filter(|(p, t)| p == t).count();
        let acc = agree.max(truth.len() - agree) as f64 / truth.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
        for w in g.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn component_mean_gets_its_own_posterior() {
        let (x, _) = blobs(&[(-5.0, 0.0), (5.0, 0.0)], 300, 3);
        let g = fit_gmm(&x, 2, 5, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for k in 0..2 {
            let p = g.posterior(g.means.row(k));
            assert!(p[k] > 0.99);
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(fit_gmm(&x, 3, 0, 10, 1e-7).is_err());
    }

    #[test]
    fn choose_c_cases() {
        let (homog, _) = blobs(&[(0.0, 0.0)], 300, 4);
        let g = choose_c(&homog, 5, 90, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(g.n_components() < 5);

        let g = choose_c(&homog, 1, 10, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(g.n_components(), 1);

        let (three, _) = blobs(&[(-10.0, 0.0), (10.0, 0.0), (0.0, 15.0)], 100, 5);
        let g = choose_c(&three, 3, 10, 1, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(g.n_components(), 3);
    }

    #[test]
    fn identical_rows_collapse_to_one() {
        let x = Matrix::from_rows(&vec![vec![1.0, 1.0]; 50]).unwrap();
        let g = choose_c(&x, 4, 10, 3, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert_eq!(g.n_components(), 1);
    }
}
