//! Datasets, CSV ingestion, person-disjoint folds and the synthetic
//! generator with planted latent subgroups.
//!
//! Attributes are evaluation-only. Training code receives a
//! [`TrainingView`], which carries features, labels and person ids and has no
//! way to reach attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::Matrix;
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub person_id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub feature_dim: usize,
    pub attribute_names: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Training-facing slice of a dataset. Holds no attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub person_ids: Vec<String>,
    /// Positions of the rows in the source dataset.
    pub sample_index: Vec<usize>,
}

impl TrainingView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-view with the given row positions (relative to this view).
    pub fn subset(&self, rows: &[usize]) -> TrainingView {
        TrainingView {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            person_ids: rows.iter().map(|&i| self.person_ids[i].clone()).collect(),
            sample_index: rows.iter().map(|&i| self.sample_index[i]).collect(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn persons(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.person_id.clone()).collect()
    }

    pub fn indices_of_persons(&self, persons: &BTreeSet<String>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| persons.contains(&s.person_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn training_view(&self, indices: &[usize]) -> TrainingView {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        TrainingView {
            features: Matrix::from_vec(indices.len(), self.feature_dim, data)
                .expect("dataset rows share feature_dim"),
            labels: indices.iter().map(|&i| self.samples[i].label).collect(),
            person_ids: indices
                .iter()
                .map(|&i| self.samples[i].person_id.clone())
                .collect(),
            sample_index: indices.to_vec(),
        }
    }

    pub fn view_of_persons(&self, persons: &BTreeSet<String>) -> TrainingView {
        self.training_view(&self.indices_of_persons(persons))
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.feature_dim {
                return Err(FlareError::ShapeMismatch(format!(
                    "sample {i} has {} features, expected {}",
                    s.features.len(),
                    self.feature_dim
                )));
            }
            if s.label > 1 {
                return Err(FlareError::InvalidInput(format!(
                    "sample {i} label {} is not binary",
                    s.label
                )));
            }
        }
        Ok(())
    }

    /// Writes `person_id,label,attr:<name>...,x0..x{d-1}` with shortest
    /// round-trip float formatting.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["person_id".to_string(), "label".to_string()];
        header.extend(self.attribute_names.iter().map(|a| format!("attr:{a}")));
        header.extend((0..self.feature_dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.person_id.clone(), s.label.to_string()];
            for a in &self.attribute_names {
                rec.push(s.attributes.get(a).cloned().unwrap_or_default());
            }
            rec.extend(s.features.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| FlareError::io(path, e))?;
        Ok(())
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| FlareError::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FlareError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let person_col = find("person_id")?;
    let label_col = find("label")?;
    let attrs: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("attr:").map(|a| (i, a.to_string())))
        .collect();
    let feature_dim = header
        .iter()
        .filter(|h| {
            h.strip_prefix('x')
                .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
        })
        .count();
    if feature_dim == 0 {
        return Err(FlareError::MissingColumn {
            path: path.to_path_buf(),
            column: "x0".into(),
        });
    }
    let feature_cols = (0..feature_dim)
        .map(|j| find(&format!("x{j}")))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(FlareError::RaggedRow {
                path: path.to_path_buf(),
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let label = match &rec[label_col] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(FlareError::BadLabel {
                    path: path.to_path_buf(),
                    row,
                    value: other.to_string(),
                })
            }
        };
        let mut features = Vec::with_capacity(feature_dim);
        for (j, &c) in feature_cols.iter().enumerate() {
            let raw = &rec[c];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => {
                    return Err(FlareError::BadNumber {
                        path: path.to_path_buf(),
                        row,
                        column: format!("x{j}"),
                        value: raw.to_string(),
                    })
                }
            }
        }
        let attributes = attrs
            .iter()
            .map(|(c, name)| (name.clone(), rec[*c].to_string()))
            .collect();
        samples.push(Sample {
            person_id: rec[person_col].to_string(),
            features,
            label,
            attributes,
        });
    }
    Ok(Dataset {
        feature_dim,
        attribute_names: attrs.into_iter().map(|(_, n)| n).collect(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: BTreeSet<String>,
    pub train: BTreeSet<String>,
    pub holdout_train: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Seeded shuffle of persons, dealt round-robin into `k` test sets; the
/// remaining persons of each fold are split into train / holdout-train.
pub fn make_folds(dataset: &Dataset, k: usize, holdout_fraction: f64, seed: u64) -> Result<FoldPlan> {
    let mut persons: Vec<String> = dataset.persons().into_iter().collect();
    if k == 0 || k > persons.len() {
        return Err(FlareError::InvalidInput(format!(
            "cannot make {k} folds from {} persons",
            persons.len()
        )));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(FlareError::InvalidInput(format!(
            "holdout fraction {holdout_fraction} outside [0, 1)"
        )));
    }
    persons.shuffle(&mut rng::stream(seed, &[tags::FOLDS]));
    let mut tests = vec![BTreeSet::new(); k];
    for (i, p) in persons.iter().enumerate() {
        tests[i % k].insert(p.clone());
    }
    let folds = tests
        .into_iter()
        .enumerate()
        .map(|(f, test)| {
            let mut rest: Vec<String> = persons
                .iter()
                .filter(|p| !test.contains(*p))
                .cloned()
                .collect();
            rest.sort();
            rest.shuffle(&mut rng::stream(seed, &[tags::FOLDS, f as u64 + 1]));
            let n_hold = (rest.len() as f64 * holdout_fraction).round() as usize;
            let holdout_train = rest[..n_hold].iter().cloned().collect();
            let train = rest[n_hold..].iter().cloned().collect();
            Fold {
                test,
                train,
                holdout_train,
            }
        })
        .collect();
    Ok(FoldPlan { k, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub persons: usize,
    pub samples_per_person: usize,
    pub feature_dim: usize,
    pub groups: usize,
    /// Distance between any two group centroids.
    pub separation: f64,
    /// Per-group probability of flipping a label.
    pub noise_rates: Vec<f64>,
    /// Per-group rotation (degrees) of the labeling rule.
    pub rotation_deg: Vec<f64>,
    /// Probability that `noisy_proxy` reports the true group.
    pub proxy_agreement: f64,
    /// Standard deviation of the per-person offset around the group centroid.
    pub person_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            persons: 60,
            samples_per_person: 30,
            feature_dim: 8,
            groups: 3,
            separation: 4.0,
            noise_rates: vec![0.0, 0.0, 0.25],
            rotation_deg: vec![0.0, 0.0, 25.0],
            proxy_agreement: 0.8,
            person_spread: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlareError::InvalidInput(m));
        if self.groups < 2 {
            return bad(format!("need at least 2 groups, got {}", self.groups));
        }
        if self.feature_dim < self.groups + 2 {
            return bad(format!(
                "feature_dim {} must be at least groups + 2 = {}",
                self.feature_dim,
                self.groups + 2
            ));
        }
        if self.noise_rates.len() != self.groups || self.rotation_deg.len() != self.groups {
            return bad("noise_rates and rotation_deg need one entry per group".into());
        }
        if self.noise_rates.iter().any(|r| !(0.0..0.5).contains(r)) {
            return bad("noise rates must lie in [0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.proxy_agreement) {
            return bad("proxy_agreement must lie in [0, 1]".into());
        }
        if self.persons == 0 || self.samples_per_person == 0 {
            return bad("persons and samples_per_person must be positive".into());
        }
        Ok(())
    }

    /// Group centroids: scaled basis vectors, pairwise at `separation`.
    pub fn centroid(&self, group: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.feature_dim];
        c[group] = self.separation / std::f64::consts::SQRT_2;
        c
    }

    /// Unit normal of the group's labeling hyperplane, rotated within the
    /// last two feature dimensions.
    pub fn rule_direction(&self, group: usize) -> Vec<f64> {
        let t = self.rotation_deg[group].to_radians();
        let mut w = vec![0.0; self.feature_dim];
        w[self.feature_dim - 1] = t.cos();
        w[self.feature_dim - 2] = t.sin();
        w
    }
}

pub const GROUP_ATTRIBUTE: &str = "group_proxy";
pub const NOISY_ATTRIBUTE: &str = "noisy_proxy";

/// Persons are dealt to groups round-robin after a seeded shuffle; features
/// are Gaussian around the group centroid plus a per-person offset; the label
/// is the side of the group's rotated hyperplane through the centroid,
/// flipped at the group's noise rate.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[tags::SYNTH]);
    let width = cfg.persons.to_string().len();
    let mut order: Vec<usize> = (0..cfg.persons).collect();
    order.shuffle(&mut rng);
    let mut group_of = vec![0usize; cfg.persons];
    for (slot, &p) in order.iter().enumerate() {
        group_of[p] = slot % cfg.groups;
    }

    let mut samples = Vec::with_capacity(cfg.persons * cfg.samples_per_person);
    for (p, &g) in group_of.iter().enumerate() {
        let person_id = format!("p{p:0width$}");
        let centroid = cfg.centroid(g);
        let rule = cfg.rule_direction(g);
        let offset: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| cfg.person_spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        for _ in 0..cfg.samples_per_person {
            let noise: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let features: Vec<f64> = centroid
                .iter()
                .zip(&offset)
                .zip(&noise)
                .map(|((c, o), e)| c + o + e)
                .collect();
            let side: f64 = features
                .iter()
                .zip(&centroid)
                .zip(&rule)
                .map(|((x, c), w)| (x - c) * w)
                .sum();
            let mut label = usize::from(side > 0.0);
            if rng.random::<f64>() < cfg.noise_rates[g] {
                label = 1 - label;
            }
            let noisy = if rng.random::<f64>() < cfg.proxy_agreement {
                g
            } else {
                let other = rng.random_range(0..cfg.groups - 1);
                if other >= g {
                    other + 1
                } else {
                    other
                }
            };
            let attributes = BTreeMap::from([
                (GROUP_ATTRIBUTE.to_string(), format!("g{g}")),
                (NOISY_ATTRIBUTE.to_string(), format!("g{noisy}")),
            ]);
            samples.push(Sample {
                person_id: person_id.clone(),
                features,
                label,
                attributes,
            });
        }
    }
    Ok(Dataset {
        feature_dim: cfg.feature_dim,
        attribute_names: vec![GROUP_ATTRIBUTE.to_string(), NOISY_ATTRIBUTE.to_string()],
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetSummary {
    pub persons: usize,
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub attribute_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn dataset_summary(dataset: &Dataset) -> DatasetSummary {
    let mut attribute_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for s in &dataset.samples {
        for (a, c) in &s.attributes {
            *attribute_counts
                .entry(a.clone())
                .or_default()
                .entry(c.clone())
                .or_default() += 1;
        }
    }
    let positives = dataset.samples.iter().filter(|s| s.label == 1).count();
    DatasetSummary {
        persons: dataset.persons().len(),
        samples: dataset.len(),
        positives,
        negatives: dataset.len() - positives,
        attribute_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn minimal_csv_parses() {
        let text = "person_id,label,attr:sex,x0,x1\na,0,f,1.0,2.5\nb,1,m,-3,0.125\n";
        let ds = parse_csv(text, p("mem.csv")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.samples[1].features, vec![-3.0, 0.125]);
        assert_eq!(ds.samples[0].attributes["sex"], "f");
    }

    #[test]
    fn non_binary_label_names_row() {
        let text = "person_id,label,x0\na,0,1.0\nb,2,1.0\n";
        match parse_csv(text, p("mem.csv")) {
            Err(FlareError::BadLabel { row, value, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "2");
            }
            other => panic!("expected BadLabel, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_ragged_are_distinct() {
        let missing = parse_csv("person_id,x0\na,1\n", p("m.csv"));
        assert!(matches!(missing, Err(FlareError::MissingColumn { ref column, .. }) if column == "label"));
        let ragged = parse_csv("person_id,label,x0\na,1\n", p("m.csv"));
        assert!(matches!(ragged, Err(FlareError::RaggedRow { row: 1, .. })));
        let bad = parse_csv("person_id,label,x0\na,1,zz\n", p("m.csv"));
        assert!(matches!(bad, Err(FlareError::BadNumber { .. })));
    }

    #[test]
    fn fold_sizes_for_85_persons() {
        let ds = Dataset {
            feature_dim: 1,
            attribute_names: vec![],
            samples: (0..85)
                .map(|i| Sample {
                    person_id: format!("u{i}"),
                    features: vec![0.0],
                    label: i % 2,
                    attributes: BTreeMap::new(),
                })
                .collect(),
        };
        let plan = make_folds(&ds, 5, 0.2, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 17));
        let mut all = BTreeSet::new();
        for f in &plan.folds {
            for t in &f.test {
                assert!(all.insert(t.clone()), "test sets overlap");
            }
            assert!(f.test.is_disjoint(&f.train));
            assert!(f.test.is_disjoint(&f.holdout_train));
            assert!(f.train.is_disjoint(&f.holdout_train));
            assert_eq!(f.test.len() + f.train.len() + f.holdout_train.len(), 85);
            assert_eq!(f.holdout_train.len(), 14);
        }
        assert_eq!(all.len(), 85);
        assert_eq!(plan, make_folds(&ds, 5, 0.2, 1).unwrap());
        assert!(make_folds(&ds, 86, 0.2, 1).is_err());
    }

    #[test]
    fn eleven_persons_four_folds() {
        let ds = Dataset {
            feature_dim: 1,
            attribute_names: vec![],
            samples: (0..11)
                .map(|i| Sample {
                    person_id: format!("u{i}"),
                    features: vec![0.0],
                    label: 0,
                    attributes: BTreeMap::new(),
                })
                .collect(),
        };
        let plan = make_folds(&ds, 4, 0.2, 9).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 3, 3, 3]);
    }

    #[test]
    fn summary_counts() {
        let cfg = SynthConfig {
            persons: 50,
            samples_per_person: 20,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 4).unwrap();
        let s = dataset_summary(&ds);
        assert_eq!(s.samples, 1000);
        assert_eq!(s.persons, 50);
        assert_eq!(s.positives + s.negatives, 1000);
        for counts in s.attribute_counts.values() {
            assert_eq!(counts.values().sum::<usize>(), 1000);
        }
        assert_eq!(dataset_summary(&Dataset::default()), DatasetSummary::default());
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_generate(&cfg, 5).unwrap(), synth_generate(&cfg, 5).unwrap());
        assert_ne!(synth_generate(&cfg, 5).unwrap(), synth_generate(&cfg, 6).unwrap());
    }

    #[test]
    fn centroids_are_equidistant() {
        let cfg = SynthConfig::default();
        for a in 0..cfg.groups {
            for b in (a + 1)..cfg.groups {
                let d = crate::matrix::squared_distance(&cfg.centroid(a), &cfg.centroid(b)).sqrt();
                assert!((d - cfg.separation).abs() < 1e-12);
            }
        }
    }
}
