//! Per-batch CSV and JSON summary output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::AdaptReport;
use crate::error::{Error, Result};
use crate::eval::stream::Batch;
use crate::eval::{summarize, RunSummary};

pub const CSV_COLUMNS: [&str; 9] = [
    "batch",
    "running_acc",
    "running_auroc",
    "mask_count",
    "loss_entropy",
    "loss_ood",
    "loss_sim",
    "loss_first",
    "loss_second",
];

/// One CSV row: metrics over batches `0..=batch` and that batch's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub batch: usize,
    pub running_acc: Option<f64>,
    pub running_auroc: Option<f64>,
    pub mask_count: usize,
    pub loss_entropy: f64,
    pub loss_ood: f64,
    pub loss_sim: f64,
    pub loss_first: f64,
    pub loss_second: Option<f64>,
}

pub fn curve(reports: &[AdaptReport], stream: &[Batch]) -> Result<Vec<CurveRow>> {
    let preds: Vec<_> = reports.iter().map(|r| r.predictions.clone()).collect();
    reports
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let m = summarize(&preds[..=t], &stream[..=t])?;
            Ok(CurveRow {
                batch: r.batch,
                running_acc: m.acc,
                running_auroc: m.auroc,
                mask_count: r.mask_count,
                loss_entropy: r.losses.entropy,
                loss_ood: r.losses.ood,
                loss_sim: r.losses.sim,
                loss_first: r.losses.first,
                loss_second: r.losses.second,
            })
        })
        .collect()
}

/// CSV text: a `#` comment describing the columns, a header row, one row per batch.
pub fn curve_csv(rows: &[CurveRow]) -> Result<String> {
    let mut out = String::from(
        "# running_acc/running_auroc: metrics over all batches up to this one; \
         mask_count: samples above the entropy threshold; loss_*: adaptation losses (loss_second empty in single-pass mode)\n",
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.batch.to_string(),
            opt(r.running_acc),
            opt(r.running_auroc),
            r.mask_count.to_string(),
            r.loss_entropy.to_string(),
            r.loss_ood.to_string(),
            r.loss_sim.to_string(),
            r.loss_first.to_string(),
            opt(r.loss_second),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("csv: {e}"))
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    let mut s = serde_json::to_string_pretty(summary).map_err(|e| Error::config(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_summary(text: &str) -> Result<RunSummary> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: PathBuf::from("<summary>"),
        message: e.to_string(),
    })
}

/// Paths written by [`emit_reports`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `curve.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit_reports(reports: &[AdaptReport], stream: &[Batch], summary: &RunSummary, dir: &Path) -> Result<ReportPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        csv: dir.join("curve.csv"),
        json: dir.join("summary.json"),
    };
    let csv = curve_csv(&curve(reports, stream)?)?;
    fs::write(&paths.csv, csv).map_err(|e| Error::io(&paths.csv, e))?;
    fs::write(&paths.json, summary_json(summary)?).map_err(|e| Error::io(&paths.json, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{LossRecord, Predictions};
    use crate::eval::metrics::MetricsSummary;

    fn report(t: usize) -> AdaptReport {
        AdaptReport {
            batch: t,
            predictions: Predictions {
                probs: vec![vec![0.9, 0.1], vec![0.5, 0.5]],
                scores: vec![0.3, 0.69],
                preds: vec![0, 0],
            },
            mask_count: 1,
            losses: LossRecord {
                entropy: 0.5,
                ood: -0.6,
                sim: -1.0 / 3.0,
                first: 0.1,
                second: Some(0.2),
            },
            updates: Vec::new(),
            eps_norm: 0.05,
            sam_degenerate: false,
            skipped: false,
        }
    }

    fn batch() -> Batch {
        Batch {
            grids: Vec::new(),
            labels: vec![0, 5],
            ood: vec![false, true],
        }
    }

    fn summary() -> RunSummary {
        RunSummary {
            spec_version: crate::eval::SUMMARY_VERSION.into(),
            seed: 3,
            config: Default::default(),
            source_accuracy: 0.1 + 0.2,
            frozen: MetricsSummary {
                acc: Some(1.0 / 3.0),
                auroc: None,
                h_score: None,
            },
            adapted: MetricsSummary::default(),
            first_quarter_auroc: Some(0.7),
            last_quarter_auroc: None,
            skipped_steps: 0,
            degenerate_steps: 1,
            backbone_checksum: u64::MAX,
            classifier_checksum: 12,
        }
    }

    #[test]
    fn csv_has_comment_header_and_rows() {
        let reports: Vec<_> = (0..3).map(report).collect();
        let stream = vec![batch(); 3];
        let text = curve_csv(&curve(&reports, &stream).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 2 + 3);
        assert!(lines[2].starts_with("0,1,1,1,"));
    }

    #[test]
    fn summary_round_trips() {
        let s = summary();
        assert_eq!(parse_summary(&summary_json(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn emit_writes_files_and_reports_bad_paths() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<_> = (0..2).map(report).collect();
        let paths = emit_reports(&reports, &[batch(), batch()], &summary(), dir.path()).unwrap();
        assert!(paths.csv.exists() && paths.json.exists());
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_reports(&reports, &[batch(), batch()], &summary(), &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }
}
