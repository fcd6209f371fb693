use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{PredictionRow, RunReport};
use crate::adapt::{fold_cluster_csv, FoldClusterDelta};
use crate::error::{FlareError, Result};
use crate::metrics::{Bhe, BheDelta, BheReport, BheRow};

pub const PREDICTIONS_FIXED_COLUMNS: [&str; 7] =
    ["seed", "mode", "cluster", "person_id", "fold", "y_true", "y_pred"];

/// Field-wise mean of per-seed BHE reports with identical attribute rows.
pub fn mean_bhe(reports: &[&BheReport]) -> Result<BheReport> {
    let first = reports
        .first()
        .ok_or_else(|| FlareError::InvalidInput("no BHE reports to average".into()))?;
    let n = reports.len() as f64;
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut acc = [0.0; 9];
            for r in reports {
                let other = r.rows.get(i).filter(|o| o.attribute == row.attribute).ok_or_else(|| {
                    FlareError::InvalidInput(format!("BHE rows differ at `{}`", row.attribute))
                })?;
                let v = [
                    other.base.b,
                    other.base.h,
                    other.base.e,
                    other.candidate.b,
                    other.candidate.h,
                    other.candidate.e,
                    other.delta.db,
                    other.delta.dh,
                    other.delta.de,
                ];
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            let m: Vec<f64> = acc.iter().map(|a| a / n).collect();
            Ok(BheRow {
                attribute: row.attribute.clone(),
                base: Bhe {
                    b: m[0],
                    h: m[1],
                    e: m[2],
                },
                candidate: Bhe {
                    b: m[3],
                    h: m[4],
                    e: m[5],
                },
                delta: BheDelta {
                    db: m[6],
                    dh: m[7],
                    de: m[8],
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BheReport {
        candidate_name: first.candidate_name.clone(),
        rows,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn predictions_csv(rows: &[PredictionRow], attributes: &[String]) -> String {
    let mut out = PREDICTIONS_FIXED_COLUMNS.join(",");
    for a in attributes {
        out.push_str(",attr:");
        out.push_str(&csv_field(a));
    }
    out.push('\n');
    for r in rows {
        let cluster = r.cluster.map_or(String::new(), |c| c.to_string());
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.mode.name(),
            cluster,
            csv_field(&r.record.person_id),
            r.record.fold,
            r.record.y_true,
            r.record.y_pred
        );
        for a in attributes {
            let v = r.record.attributes.get(a).map_or("", String::as_str);
            out.push(',');
            out.push_str(&csv_field(v));
        }
        out.push('\n');
    }
    out
}

/// Writes `manifest.json` mapping each listed file name to its SHA-256.
pub fn write_manifest(outdir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut hashes = BTreeMap::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| FlareError::io(f, e))?;
        let name = f
            .strip_prefix(outdir)
            .unwrap_or(f)
            .to_string_lossy()
            .into_owned();
        hashes.insert(name, hex::encode(Sha256::digest(&bytes)));
    }
    let path = outdir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "files": hashes }))?;
    fs::write(&path, text).map_err(|e| FlareError::io(&path, e))?;
    Ok(path)
}

/// Writes all report files under `outdir` and returns their paths, manifest
/// last.
pub fn emit_reports(report: &RunReport, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| FlareError::io(outdir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = outdir.join(name);
        fs::write(&p, text).map_err(|e| FlareError::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("report.json", report.to_json()?)?;
    if let Some(primary) = report.primary_candidate() {
        if let Some(b) = report.summary.bhe_mean.get(primary.name()) {
            put("bhe.csv", b.to_csv())?;
        }
    }
    for (mode, b) in &report.summary.bhe_mean {
        put(&format!("bhe_{mode}.csv"), b.to_csv())?;
    }
    let deltas: Vec<FoldClusterDelta> = report.fold_cluster.iter().map(|d| d.delta.clone()).collect();
    let mut fc = String::new();
    for (i, line) in fold_cluster_csv(&deltas).lines().enumerate() {
        let mode = if i == 0 {
            "mode"
        } else {
            report.fold_cluster[i - 1].mode.name()
        };
        let _ = writeln!(fc, "{mode},{line}");
    }
    put("fold_cluster_delta.csv", fc)?;
    for g in &report.landscapes {
        put(&format!("landscape_{}.csv", g.mode), g.to_csv())?;
    }
    put(
        "predictions.csv",
        predictions_csv(&report.predictions, &report.attribute_names),
    )?;
    put("timing.json", serde_json::to_string_pretty(&report.timing)?)?;
    let manifest = write_manifest(outdir, &written)?;
    written.push(manifest);
    Ok(written)
}
