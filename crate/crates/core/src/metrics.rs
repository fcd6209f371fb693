//! Utility and fairness measurement over pooled prediction records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub person_id: String,
    pub fold: usize,
    pub y_true: usize,
    pub y_pred: usize,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Variant {
    #[default]
    Macro,
    Positive,
}

#[derive(Debug, Clone, Copy, Default)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

impl Confusion {
    fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

fn confusion_for(y_true: &[usize], y_pred: &[usize], class: usize) -> Confusion {
    let mut c = Confusion::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == class, p == class) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Unweighted mean of per-class F1 over the classes that occur in the truth
/// or in the predictions.
pub fn macro_f1_labels(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(FlareError::InvalidInput("macro-F1 of an empty set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(FlareError::ShapeMismatch(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let sum: f64 = classes
        .iter()
        .map(|&c| confusion_for(y_true, y_pred, c).f1())
        .sum();
    Ok(sum / classes.len() as f64)
}

pub fn f1_labels(y_true: &[usize], y_pred: &[usize], variant: F1Variant) -> Result<f64> {
    match variant {
        F1Variant::Macro => macro_f1_labels(y_true, y_pred),
        F1Variant::Positive => {
            if y_true.is_empty() {
                return Err(FlareError::InvalidInput("F1 of an empty set".into()));
            }
            Ok(confusion_for(y_true, y_pred, 1).f1())
        }
    }
}

fn labels_of<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> (Vec<usize>, Vec<usize>) {
    records.into_iter().map(|r| (r.y_true, r.y_pred)).unzip()
}

pub fn macro_f1(records: &[PredictionRecord]) -> Result<f64> {
    let (t, p) = labels_of(records);
    macro_f1_labels(&t, &p)
}

pub fn f1_of(records: &[PredictionRecord], variant: F1Variant) -> Result<f64> {
    let (t, p) = labels_of(records);
    f1_labels(&t, &p, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupScores {
    pub attribute: String,
    pub scores: BTreeMap<String, f64>,
}

fn group_by<'a>(
    records: &'a [PredictionRecord],
    attribute: &str,
) -> Result<BTreeMap<String, Vec<&'a PredictionRecord>>> {
    let mut groups: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let cat = r.attributes.get(attribute).ok_or_else(|| {
            FlareError::InvalidInput(format!("record {i} lacks attribute `{attribute}`"))
        })?;
        groups.entry(cat.clone()).or_default().push(r);
    }
    Ok(groups)
}

/// F1 per category of `attribute`, over the pooled records.
pub fn subgroup_f1(
    records: &[PredictionRecord],
    attribute: &str,
    variant: F1Variant,
) -> Result<SubgroupScores> {
    let groups = group_by(records, attribute)?;
    if groups.is_empty() {
        return Err(FlareError::InvalidInput(format!(
            "no records for attribute `{attribute}`"
        )));
    }
    let mut scores = BTreeMap::new();
    for (cat, rs) in groups {
        let (t, p) = labels_of(rs);
        scores.insert(cat, f1_labels(&t, &p, variant)?);
    }
    Ok(SubgroupScores {
        attribute: attribute.to_string(),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bhe {
    /// Mean subgroup score.
    pub b: f64,
    /// Worst subgroup score.
    pub h: f64,
    /// Population standard deviation of subgroup scores.
    pub e: f64,
}

impl Bhe {
    pub fn of(scores: &SubgroupScores) -> Bhe {
        let v: Vec<f64> = scores.scores.values().copied().collect();
        let (mean, std) = mean_std(&v);
        Bhe {
            b: mean,
            h: v.iter().copied().fold(f64::INFINITY, f64::min),
            e: std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BheDelta {
    pub db: f64,
    pub dh: f64,
    pub de: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BheRow {
    pub attribute: String,
    pub base: Bhe,
    pub candidate: Bhe,
    pub delta: BheDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BheReport {
    #[serde(default)]
    pub candidate_name: String,
    pub rows: Vec<BheRow>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Benefit, harm-avoidance and equity deltas of `cand` over `base`.
/// `dh` is the minimum of per-category differences.
pub fn bhe(base: &SubgroupScores, cand: &SubgroupScores) -> Result<BheRow> {
    let kb: Vec<&String> = base.scores.keys().collect();
    let kc: Vec<&String> = cand.scores.keys().collect();
    if kb != kc || kb.is_empty() {
        return Err(FlareError::InvalidInput(format!(
            "category sets differ for `{}`: {kb:?} vs {kc:?}",
            base.attribute
        )));
    }
    let b = Bhe::of(base);
    let c = Bhe::of(cand);
    let dh = base
        .scores
        .iter()
        .map(|(k, vb)| cand.scores[k] - vb)
        .fold(f64::INFINITY, f64::min);
    Ok(BheRow {
        attribute: base.attribute.clone(),
        base: b,
        candidate: c,
        delta: BheDelta {
            db: c.b - b.b,
            dh,
            de: b.e - c.e,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualizedOdds {
    /// Largest pairwise TPR gap.
    pub eod: f64,
    /// Largest pairwise mean of TPR and FPR gaps.
    pub aod: f64,
}

#[derive(Debug, Clone, Copy)]
struct Rates {
    tpr: Option<f64>,
    fpr: Option<f64>,
}

fn rates(records: &[&PredictionRecord]) -> Rates {
    let (mut tp, mut p, mut fp, mut n) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        if r.y_true == 1 {
            p += 1;
            tp += usize::from(r.y_pred == 1);
        } else {
            n += 1;
            fp += usize::from(r.y_pred == 1);
        }
    }
    Rates {
        tpr: (p > 0).then(|| tp as f64 / p as f64),
        fpr: (n > 0).then(|| fp as f64 / n as f64),
    }
}

/// Multi-group equalized-odds gaps. Categories without positives are left out
/// of the TPR comparison; AOD pairs need both rates on both sides.
pub fn eod_aod(records: &[PredictionRecord], attribute: &str) -> Result<EqualizedOdds> {
    let groups = group_by(records, attribute)?;
    let r: Vec<Rates> = groups.values().map(|g| rates(g)).collect();
    let mut eod: Option<f64> = None;
    let mut aod: Option<f64> = None;
    for i in 0..r.len() {
        for j in (i + 1)..r.len() {
            if let (Some(a), Some(b)) = (r[i].tpr, r[j].tpr) {
                let gap = (a - b).abs();
                eod = Some(eod.map_or(gap, |m| m.max(gap)));
                if let (Some(fa), Some(fb)) = (r[i].fpr, r[j].fpr) {
                    let avg = 0.5 * (gap + (fa - fb).abs());
                    aod = Some(aod.map_or(avg, |m| m.max(avg)));
                }
            }
        }
    }
    match (eod, aod) {
        (Some(eod), Some(aod)) => Ok(EqualizedOdds { eod, aod }),
        _ => Err(FlareError::InvalidInput(format!(
            "attribute `{attribute}` has fewer than 2 categories with usable rates"
        ))),
    }
}

/// Relative disparity threshold below which a best/worst ratio is acceptable.
pub const RD_ACCEPTABLE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDisparity {
    /// `max/min` of subgroup scores; `None` stands for +∞ (worst score 0).
    pub ratio: Option<f64>,
    pub acceptable: bool,
}

pub fn relative_disparity(scores: &SubgroupScores) -> RelativeDisparity {
    let max = scores.scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.scores.values().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return RelativeDisparity {
            ratio: None,
            acceptable: false,
        };
    }
    let ratio = max / min;
    RelativeDisparity {
        ratio: Some(ratio),
        acceptable: ratio < RD_ACCEPTABLE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSlices {
    pub per_person: BTreeMap<String, f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-person F1 with its mean and population standard deviation.
pub fn user_slices(records: &[PredictionRecord], variant: F1Variant) -> Result<UserSlices> {
    if records.is_empty() {
        return Err(FlareError::InvalidInput("no records".into()));
    }
    let mut by_person: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_person.entry(r.person_id.clone()).or_default().push(r);
    }
    let mut per_person = BTreeMap::new();
    for (p, rs) in by_person {
        let (t, pr) = labels_of(rs);
        per_person.insert(p, f1_labels(&t, &pr, variant)?);
    }
    let v: Vec<f64> = per_person.values().copied().collect();
    let (mean, std) = mean_std(&v);
    Ok(UserSlices {
        per_person,
        mean,
        std,
    })
}

/// Columns of the BHE table, values in percentage points.
pub const BHE_CSV_HEADER: &str = "Subgroup,B_base,H_base,E_base,B_cand,H_cand,E_cand,dB,dH,dE";

impl BheReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BHE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let vals = [
                r.base.b,
                r.base.h,
                r.base.e,
                r.candidate.b,
                r.candidate.h,
                r.candidate.e,
                r.delta.db,
                r.delta.dh,
                r.delta.de,
            ];
            out.push_str(&r.attribute);
            for v in vals {
                out.push_str(&format!(",{:.2}", 100.0 * v));
            }
            out.push('\n');
        }
        out
    }
}

/// Reads `person_id,fold,y_true,y_pred,attr:<name>...`; other columns are
/// returned per record in `extra` so callers can filter on them.
pub fn read_predictions_csv(
    path: &Path,
) -> Result<Vec<(PredictionRecord, BTreeMap<String, String>)>> {
    let text = fs::read_to_string(path).map_err(|e| FlareError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FlareError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (pc, fc, tc, yc) = (col("person_id")?, col("fold")?, col("y_true")?, col("y_pred")?);
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let label = |c: usize| -> Result<usize> {
            match &rec[c] {
                "0" => Ok(0),
                "1" => Ok(1),
                v => Err(FlareError::BadLabel {
                    path: path.to_path_buf(),
                    row,
                    value: v.to_string(),
                }),
            }
        };
        let fold = rec[fc].parse::<usize>().map_err(|_| FlareError::BadNumber {
            path: path.to_path_buf(),
            row,
            column: "fold".into(),
            value: rec[fc].to_string(),
        })?;
        let mut attributes = BTreeMap::new();
        let mut extra = BTreeMap::new();
        for (i, h) in header.iter().enumerate() {
            if let Some(a) = h.strip_prefix("attr:") {
                attributes.insert(a.to_string(), rec[i].to_string());
            } else if ![pc, fc, tc, yc].contains(&i) {
                extra.insert(h.clone(), rec[i].to_string());
            }
        }
        out.push((
            PredictionRecord {
                person_id: rec[pc].to_string(),
                fold,
                y_true: label(tc)?,
                y_pred: label(yc)?,
                attributes,
            },
            extra,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(person: &str, t: usize, p: usize, attr: &str) -> PredictionRecord {
        PredictionRecord {
            person_id: person.into(),
            fold: 0,
            y_true: t,
            y_pred: p,
            attributes: BTreeMap::from([("a".to_string(), attr.to_string())]),
        }
    }

    fn scores(pairs: &[(&str, f64)]) -> SubgroupScores {
        SubgroupScores {
            attribute: "a".into(),
            scores: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1_labels(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_relative_eq!(
            macro_f1_labels(&[0, 0, 1, 1], &[1, 1, 1, 1]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(macro_f1_labels(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
        assert!(macro_f1_labels(&[], &[]).is_err());
        assert_eq!(f1_labels(&[0, 1], &[1, 1], F1Variant::Positive).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn subgroup_scores_single_and_duplicate_categories() {
        let rs = vec![rec("p", 0, 0, "x"), rec("q", 1, 0, "x"), rec("r", 1, 1, "x")];
        let s = subgroup_f1(&rs, "a", F1Variant::Macro).unwrap();
        assert_eq!(s.scores.len(), 1);
        assert_eq!(s.scores["x"], macro_f1(&rs).unwrap());

        let mut twin = rs.clone();
        twin.extend(rs.iter().map(|r| rec(&r.person_id, r.y_true, r.y_pred, "y")));
        let s = subgroup_f1(&twin, "a", F1Variant::Macro).unwrap();
        assert_eq!(s.scores["x"], s.scores["y"]);
    }

    #[test]
    fn bhe_examples() {
        let r = bhe(&scores(&[("a", 0.60), ("b", 0.40)]), &scores(&[("a", 0.65), ("b", 0.55)]))
            .unwrap();
        assert_relative_eq!(r.delta.db, 0.10, epsilon = 1e-12);
        assert_relative_eq!(r.delta.dh, 0.05, epsilon = 1e-12);
        assert_relative_eq!(r.delta.de, 0.05, epsilon = 1e-12);

        let same = scores(&[("a", 0.7), ("b", 0.3), ("c", 0.5)]);
        let r = bhe(&same, &same).unwrap();
        assert_eq!((r.delta.db, r.delta.dh, r.delta.de), (0.0, 0.0, 0.0));

        let r = bhe(&scores(&[("a", 0.5), ("b", 0.5)]), &scores(&[("a", 0.9), ("b", 0.1)]))
            .unwrap();
        assert!(r.delta.db.abs() < 1e-12);
        assert_relative_eq!(r.delta.dh, -0.4, epsilon = 1e-12);
        assert_relative_eq!(r.delta.de, -0.4, epsilon = 1e-12);

        assert!(bhe(&scores(&[("a", 0.5)]), &scores(&[("b", 0.5)])).is_err());
    }

    #[test]
    fn eod_aod_examples() {
        // Category x: TPR 1.0 (5/5), FPR 0.2 (1/5); y: TPR 0.6, FPR 0.2.
        let mut rs = Vec::new();
        for i in 0..5 {
            rs.push(rec("p", 1, 1, "x"));
            rs.push(rec("p", 1, usize::from(i < 3), "y"));
            rs.push(rec("p", 0, usize::from(i == 0), "x"));
            rs.push(rec("p", 0, usize::from(i == 0), "y"));
        }
        let e = eod_aod(&rs, "a").unwrap();
        assert_relative_eq!(e.eod, 0.4, epsilon = 1e-12);
        assert_relative_eq!(e.aod, 0.2, epsilon = 1e-12);

        let same: Vec<_> = rs.iter().filter(|r| r.attributes["a"] == "x").cloned().collect();
        let mut doubled = same.clone();
        doubled.extend(same.iter().map(|r| rec("q", r.y_true, r.y_pred, "z")));
        let e = eod_aod(&doubled, "a").unwrap();
        assert_eq!((e.eod, e.aod), (0.0, 0.0));

        assert!(eod_aod(&same, "a").is_err());
    }

    #[test]
    fn relative_disparity_examples() {
        let r = relative_disparity(&scores(&[("a", 0.7), ("b", 0.7)]));
        assert_eq!(r.ratio, Some(1.0));
        assert!(r.acceptable);
        let r = relative_disparity(&scores(&[("a", 0.8), ("b", 0.5)]));
        assert_relative_eq!(r.ratio.unwrap(), 1.6, epsilon = 1e-12);
        assert!(!r.acceptable);
        let r = relative_disparity(&scores(&[("a", 0.6), ("b", 0.5)]));
        assert_relative_eq!(r.ratio.unwrap(), 1.2, epsilon = 1e-12);
        assert!(r.acceptable);
        let r = relative_disparity(&scores(&[("a", 0.6), ("b", 0.0)]));
        assert_eq!(r.ratio, None);
        assert!(!r.acceptable);
    }

    #[test]
    fn user_slice_examples() {
        let one = vec![rec("p", 1, 1, "x"), rec("p", 0, 1, "x")];
        let s = user_slices(&one, F1Variant::Macro).unwrap();
        assert_eq!(s.std, 0.0);

        let two = vec![
            rec("p", 1, 1, "x"),
            rec("p", 0, 0, "x"),
            rec("q", 1, 0, "x"),
            rec("q", 0, 1, "x"),
        ];
        let s = user_slices(&two, F1Variant::Macro).unwrap();
        assert_relative_eq!(s.mean, 0.5);
        assert_relative_eq!(s.std, 0.5);

        let as_attr: Vec<PredictionRecord> = two
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.attributes.insert("person".into(), r.person_id.clone());
                r
            })
            .collect();
        let sg = subgroup_f1(&as_attr, "person", F1Variant::Macro).unwrap();
        assert_eq!(sg.scores, s.per_person);
    }

    #[test]
    fn bhe_csv_layout() {
        let r = bhe(&scores(&[("a", 0.60), ("b", 0.40)]), &scores(&[("a", 0.65), ("b", 0.55)]))
            .unwrap();
        let csv = BheReport {
            candidate_name: "flare".into(),
            rows: vec![r],
        }
        .to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), BHE_CSV_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "a,50.00,40.00,10.00,60.00,55.00,5.00,10.00,5.00,5.00"
        );
    }
}
