//! Latent subgroup discovery. Each sample is described by its latent code,
//! cross-entropy and Fisher value under the base checkpoint; descriptors of
//! correctly classified training samples are standardized, embedded and
//! clustered by a Gaussian mixture, which then routes every sample.

pub mod gmm;
pub mod pca;
pub mod umap;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TrainingView;
use crate::error::{FlareError, Result};
use crate::matrix::Matrix;
use crate::netkernel::loss::ce_value;
use crate::netkernel::{argmax, fisher_proxy, forward, FisherVariant, Mode, NetworkParams};

pub use gmm::{assign, choose_c, fit_gmm, ClusterAssignment, GmmModel};
pub use pca::{fit_pca, PcaModel};
pub use umap::{fit_umap, UmapModel, UmapParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    TrueLabel,
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub z: Vec<f64>,
    pub ce: f64,
    pub fisher: f64,
    pub label_source: LabelSource,
    /// Whether the prediction matched the label used (always true for
    /// pseudo labels).
    pub correct: bool,
}

impl Descriptor {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.z.clone();
        v.push(self.ce);
        v.push(self.fisher);
        v
    }
}

/// Eval-mode descriptors. With `labels = None` the predicted class stands in
/// for the label.
pub fn extract_descriptors(
    params: &NetworkParams,
    features: &Matrix,
    labels: Option<&[usize]>,
    variant: FisherVariant,
) -> Result<Vec<Descriptor>> {
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(FlareError::ShapeMismatch(format!(
                "{} labels for {} rows",
                l.len(),
                features.rows()
            )));
        }
    }
    let trace = forward(params, features, Mode::Eval, None)?;
    Ok((0..features.rows())
        .map(|i| {
            let p = trace.probs.row(i);
            let pred = argmax(p);
            let (y, source) = match labels {
                Some(l) => (l[i], LabelSource::TrueLabel),
                None => (pred, LabelSource::PseudoLabel),
            };
            Descriptor {
                z: trace.z.row(i).to_vec(),
                ce: ce_value(p, y),
                fisher: fisher_proxy(p, trace.h_penult.row(i), y, variant),
                label_source: source,
                correct: pred == y,
            }
        })
        .collect())
}

pub fn descriptor_matrix(descriptors: &[Descriptor]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = descriptors.iter().map(Descriptor::to_vector).collect();
    Matrix::from_rows(&rows)
}

pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(FlareError::ShapeMismatch(format!(
                "{} columns, stats cover {}",
                m.cols(),
                self.mean.len()
            )));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }
}

/// Column z-scores with population std, floored at [`STD_FLOOR`].
pub fn standardize(m: &Matrix) -> Result<(Matrix, StandardizationStats)> {
    let (n, d) = m.shape();
    if n < 2 {
        return Err(FlareError::InvalidInput(format!(
            "standardization needs at least 2 rows, got {n}"
        )));
    }
    // Running mean: exact on constant columns.
    let mut mean = vec![0.0; d];
    for (k, row) in m.iter_rows().enumerate() {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += (v - *mu) / (k + 1) as f64;
        }
    }
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = m.iter_rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    let stats = StandardizationStats { mean, std };
    let out = stats.apply(m)?;
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReducerVariant {
    #[default]
    UmapCore,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ReducerModel {
    UmapCore(UmapModel),
    Pca(PcaModel),
}

impl ReducerModel {
    pub fn transform(&self, rows: &Matrix) -> Result<Matrix> {
        match self {
            ReducerModel::UmapCore(m) => m.transform(rows),
            ReducerModel::Pca(m) => m.transform(rows),
        }
    }

    pub fn variant(&self) -> ReducerVariant {
        match self {
            ReducerModel::UmapCore(_) => ReducerVariant::UmapCore,
            ReducerModel::Pca(_) => ReducerVariant::Pca,
        }
    }
}

/// Fits the reducer and returns it with the embedding of the fit rows.
pub fn fit_reducer(
    data: &Matrix,
    variant: ReducerVariant,
    params: &UmapParams,
    seed: u64,
) -> Result<(ReducerModel, Matrix)> {
    match variant {
        ReducerVariant::UmapCore => {
            let m = fit_umap(data, params, seed)?;
            let emb = m.embedding.clone();
            Ok((ReducerModel::UmapCore(m), emb))
        }
        ReducerVariant::Pca => {
            if data.rows() <= params.n_neighbors.min(1) {
                return Err(FlareError::InvalidInput("too few rows for PCA".into()));
            }
            let k = params.target_dim.min(data.cols());
            let m = fit_pca(data, k)?;
            let emb = m.transform(data)?;
            Ok((ReducerModel::Pca(m), emb))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratifierConfig {
    pub variant: ReducerVariant,
    pub c_init: usize,
    pub umap: UmapParams,
    /// Defaults to `max(10, 1% of fit rows)`.
    pub min_cluster_size: Option<usize>,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub fisher_variant: FisherVariant,
    pub seed: u64,
}

impl Default for StratifierConfig {
    fn default() -> Self {
        StratifierConfig {
            variant: ReducerVariant::UmapCore,
            c_init: 3,
            umap: UmapParams::default(),
            min_cluster_size: None,
            gmm_max_iter: gmm::DEFAULT_MAX_ITER,
            gmm_tol: gmm::DEFAULT_TOL,
            fisher_variant: FisherVariant::LastLayer,
            seed: 0,
        }
    }
}

impl StratifierConfig {
    pub fn min_cluster_size_for(&self, rows: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| 10usize.max(rows.div_ceil(100)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifierModel {
    pub stats: StandardizationStats,
    pub reducer: ReducerModel,
    pub gmm: GmmModel,
    pub fisher_variant: FisherVariant,
}

impl StratifierModel {
    pub fn n_clusters(&self) -> usize {
        self.gmm.n_components()
    }

    pub fn assign_descriptors(&self, descriptors: &[Descriptor]) -> Result<ClusterAssignment> {
        if descriptors.is_empty() {
            return Ok(ClusterAssignment {
                ids: Vec::new(),
                posteriors: Matrix::zeros(0, self.n_clusters()),
            });
        }
        let m = descriptor_matrix(descriptors)?;
        let emb = self.reducer.transform(&self.stats.apply(&m)?)?;
        assign(&self.gmm, &emb)
    }

    /// Routes rows under the base model. `labels = None` uses pseudo labels,
    /// the only option at inference time.
    pub fn route(
        &self,
        base: &NetworkParams,
        features: &Matrix,
        labels: Option<&[usize]>,
    ) -> Result<ClusterAssignment> {
        let d = extract_descriptors(base, features, labels, self.fisher_variant)?;
        self.assign_descriptors(&d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| FlareError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlareError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Fits the stratifier on the correctly classified training samples and
/// assigns every training sample (true-label descriptors).
pub fn fit_stratifier(
    base: &NetworkParams,
    train: &TrainingView,
    cfg: &StratifierConfig,
) -> Result<(StratifierModel, ClusterAssignment)> {
    let descriptors =
        extract_descriptors(base, &train.features, Some(&train.labels), cfg.fisher_variant)?;
    let correct: Vec<Descriptor> = descriptors.iter().filter(|d| d.correct).cloned().collect();
    if correct.is_empty() {
        return Err(FlareError::InvalidInput(
            "the base model classifies no training sample correctly".into(),
        ));
    }
    if correct.len() < 3 {
        return Err(FlareError::InvalidInput(format!(
            "only {} correctly classified samples to cluster",
            correct.len()
        )));
    }
    let (fit_rows, stats) = standardize(&descriptor_matrix(&correct)?)?;

    let mut umap_params = cfg.umap;
    if umap_params.n_neighbors >= fit_rows.rows() {
        umap_params.n_neighbors = fit_rows.rows() - 1;
        log::warn!(
            "only {} rows to embed; using {} neighbors",
            fit_rows.rows(),
            umap_params.n_neighbors
        );
    }
    let (reducer, embedding) = fit_reducer(&fit_rows, cfg.variant, &umap_params, cfg.seed)?;
    let min_size = cfg.min_cluster_size_for(fit_rows.rows());
    let gmm = choose_c(
        &embedding,
        cfg.c_init,
        min_size,
        cfg.seed,
        cfg.gmm_max_iter,
        cfg.gmm_tol,
    )?;
    let model = StratifierModel {
        stats,
        reducer,
        gmm,
        fisher_variant: cfg.fisher_variant,
    };
    let assignment = model.assign_descriptors(&descriptors)?;
    Ok((model, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkernel::{init_network, Activation, Architecture};

    fn spec() -> crate::netkernel::NetworkSpec {
        Architecture {
            encoder: vec![6, 3],
            classifier: vec![4],
            classes: 2,
            activation: Activation::Tanh,
            encoder_dropout: vec![],
            classifier_dropout: vec![],
        }
        .build(4)
        .unwrap()
    }

    #[test]
    fn standardize_examples() {
        let m = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.1, 2.0]]).unwrap();
        let (s, stats) = standardize(&m).unwrap();
        assert_eq!(s.to_rows(), vec![vec![0.0, -1.0], vec![0.0, 1.0]]);
        assert_eq!(stats.apply(&m).unwrap(), s);
        assert!(standardize(&Matrix::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn pseudo_label_ce_is_neg_log_max() {
        let params = init_network(&spec(), 2).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 1.0, 0.5], vec![0.3, -0.2, 1.0, 0.5]]).unwrap();
        let d = extract_descriptors(&params, &x, None, FisherVariant::LastLayer).unwrap();
        let trace = forward(&params, &x, Mode::Eval, None).unwrap();
        let pmax = trace.probs.row(0).iter().copied().fold(0.0, f64::max);
        assert!((d[0].ce + pmax.ln()).abs() < 1e-15);
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn pca_transform_of_training_row_is_exact() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1, (i as f64).sin()])
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let (model, emb) = fit_reducer(&x, ReducerVariant::Pca, &UmapParams::default(), 0).unwrap();
        let again = model.transform(&x.select_rows(&[3])).unwrap();
        assert_eq!(again.row(0), emb.row(3));
    }

    #[test]
    fn stratifier_json_round_trip() {
        let params = init_network(&spec(), 5).unwrap();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64 / 10.0;
                vec![t.sin(), t.cos(), t, -t]
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let preds = crate::netkernel::predict(&params, &x).unwrap();
        let view = TrainingView {
            features: x.clone(),
            labels: preds,
            person_ids: vec!["p".into(); 60],
            sample_index: (0..60).collect(),
        };
        let cfg = StratifierConfig {
            variant: ReducerVariant::Pca,
            c_init: 2,
            ..StratifierConfig::default()
        };
        let (model, a) = fit_stratifier(&params, &view, &cfg).unwrap();
        let back = StratifierModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let routed = back.route(&params, &x, None).unwrap();
        assert_eq!(routed.ids, a.ids);
    }
}
