use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × dim`, orthonormal rows, sorted by decreasing variance.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn fit_pca(data: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, dim) = data.shape();
    if n < 2 {
        return Err(FlareError::InvalidInput(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > dim {
        return Err(FlareError::InvalidInput(format!(
            "cannot keep {k} components of {dim}-dimensional data"
        )));
    }
    let mean = data.column_means();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for row in data.iter_rows() {
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in a..dim {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let total_var: f64 = (0..dim).map(|a| cov[(a, a)]).sum();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });

    let mut components = Matrix::zeros(k, dim);
    let mut explained_variance = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // Sign convention: largest-magnitude entry positive.
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(r).copy_from_slice(&v);
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total_var > 0.0 { v / total_var } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
    })
}

impl PcaModel {
    pub fn transform(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.mean.len() {
            return Err(FlareError::ShapeMismatch(format!(
                "rows have {} columns, PCA was fit on {}",
                rows.cols(),
                self.mean.len()
            )));
        }
        let k = self.components.rows();
        let mut out = Matrix::zeros(rows.rows(), k);
        let mut centered = vec![0.0; self.mean.len()];
        for (i, r) in rows.iter_rows().enumerate() {
            for ((c, x), m) in centered.iter_mut().zip(r).zip(&self.mean) {
                *c = x - m;
            }
            for j in 0..k {
                out.set(i, j, dot(&centered, self.components.row(j)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_data_has_one_component() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let p = fit_pca(&x, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        for a in 0..2 {
            for b in 0..2 {
                let d = dot(p.components.row(a), p.components.row(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bad_component_count() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(fit_pca(&x, 3).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }
}
