//! Aggregates `report.json` files under a directory into one table.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use unibct::RunReport;

/// One summarized run. Metric cells are `None` when the report did not
/// include that operating point, and render as empty CSV cells.
#[derive(Debug, Serialize)]
struct SummaryRow {
    scenario: String,
    loss: String,
    variant: String,
    seed: u64,
    reference_far: f64,
    cross_tar: Option<f64>,
    self_old_tar: Option<f64>,
    self_new_tar: Option<f64>,
    cross_top1: Option<f64>,
    cross_top5: Option<f64>,
    self_old_top1: Option<f64>,
    self_new_top1: Option<f64>,
    verification_compatible: bool,
    identification_compatible: bool,
    /// Path of the source report, relative to the summarized directory.
    report: String,
}

fn row_from_report(report: &RunReport, rel_path: &Path) -> SummaryRow {
    let far = report.metrics.reference_far;
    SummaryRow {
        scenario: report.scenario.to_string(),
        loss: crate::loss_name(report.loss_kind).to_string(),
        variant: report.config.refinement.variant.name().to_string(),
        seed: report.config.seed,
        reference_far: far,
        cross_tar: report.metrics.cross.tar_at(far),
        self_old_tar: report.metrics.self_old.tar_at(far),
        self_new_tar: report.metrics.self_new.tar_at(far),
        cross_top1: report.metrics.cross.topk_at(1),
        cross_top5: report.metrics.cross.topk_at(5),
        self_old_top1: report.metrics.self_old.topk_at(1),
        self_new_top1: report.metrics.self_new.topk_at(1),
        verification_compatible: report.metrics.verification_compatible,
        identification_compatible: report.metrics.identification_compatible,
        report: rel_path.to_string_lossy().replace('\\', "/"),
    }
}

/// Collects every `report.json` under `dir`, depth first, sorted by name at
/// each level so the walk order is stable across filesystems.
fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading directory {}", dir.display()))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            found.extend(find_reports(&path)?);
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            found.push(path);
        }
    }
    Ok(found)
}

const CSV_HEADER: &str = "scenario,loss,variant,seed,reference_far,cross_tar,self_old_tar,\
     self_new_tar,cross_top1,cross_top5,self_old_top1,self_new_top1,\
     verification_compatible,identification_compatible,report";

fn opt_cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_line(row: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.scenario,
        row.loss,
        row.variant,
        row.seed,
        row.reference_far,
        opt_cell(row.cross_tar),
        opt_cell(row.self_old_tar),
        opt_cell(row.self_new_tar),
        opt_cell(row.cross_top1),
        opt_cell(row.cross_top5),
        opt_cell(row.self_old_top1),
        opt_cell(row.self_new_top1),
        row.verification_compatible,
        row.identification_compatible,
        row.report,
    )
}

/// Summarizes all reports under `reports_dir` into `summary.csv` and
/// `summary.json`, written to `out` (default: `reports_dir` itself).
///
/// Unreadable or unparsable reports are skipped with a warning on stderr;
/// the summary covers whatever parsed. No parsable report at all is an
/// error, as is a missing directory.
pub fn cmd_summarize(reports_dir: &Path, out: Option<&Path>) -> Result<()> {
    if !reports_dir.is_dir() {
        bail!("reports directory {} not found", reports_dir.display());
    }
    let mut rows = Vec::new();
    for path in find_reports(reports_dir)? {
        let rel = path.strip_prefix(reports_dir).unwrap_or(&path);
        let parsed = fs::read(&path)
            .map_err(anyhow::Error::from)
            .and_then(|bytes| Ok(serde_json::from_slice::<RunReport>(&bytes)?));
        match parsed {
            Ok(report) => rows.push(row_from_report(&report, rel)),
            Err(err) => eprintln!("warning: skipping {}: {err}", path.display()),
        }
    }
    if rows.is_empty() {
        bail!(
            "no parsable report.json under {}",
            reports_dir.display()
        );
    }
    rows.sort_by(|a, b| {
        (&a.scenario, &a.loss, &a.variant, a.seed, &a.report)
            .cmp(&(&b.scenario, &b.loss, &b.variant, b.seed, &b.report))
    });

    let out_dir = out.unwrap_or(reports_dir);
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let csv_path = out_dir.join("summary.csv");
    let mut csv = Vec::new();
    writeln!(csv, "{CSV_HEADER}")?;
    for row in &rows {
        writeln!(csv, "{}", csv_line(row))?;
    }
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    let json_path = out_dir.join("summary.json");
    let mut json = serde_json::to_vec_pretty(&rows)?;
    json.push(b'\n');
    fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;

    println!("wrote {} ({} rows)", csv_path.display(), rows.len());
    println!("wrote {}", json_path.display());
    Ok(())
}
