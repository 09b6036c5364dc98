//! Cross-run reports: efficiency and performance tables, a per-frame CSV and
//! trajectory overlays. Output depends only on the run directories read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cotdrive_core::client::estimate_cost;
use cotdrive_core::domain::FrameResult;
use cotdrive_core::metrics::{common_frame_filter, displacement_errors, summarize, FilterReport, RunSummary};
use cotdrive_core::pipeline::DecisionRecord;
use serde::Serialize;

use crate::runner::{read_results_tolerant, RunManifest, RESULTS_FILE};
use crate::svg::{render_overlay, Series};

pub const EFFICIENCY_FILE: &str = "efficiency.md";
pub const PERFORMANCE_FILE: &str = "performance.md";
pub const SUMMARY_FILE: &str = "report.json";
pub const FRAMES_FILE: &str = "frames.csv";
pub const OVERLAY_DIR: &str = "overlays";

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub results: Vec<FrameResult>,
    /// Unique name used in tables and filter culprit lists.
    pub label: String,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    if manifest.finished_at.is_none() {
        tracing::warn!(run = %manifest.run_id, "run is unfinished; reporting the frames it has");
    }
    let (results, _) = read_results_tolerant(&dir.join(RESULTS_FILE))?;
    let mut seen = BTreeSet::new();
    for r in &results {
        if !seen.insert(r.frame_id.as_str()) {
            bail!("{}: frame {:?} appears twice", dir.display(), r.frame_id);
        }
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        label: manifest.model_name.clone(),
        manifest,
        results,
    })
}

/// Loads several runs, disambiguating labels shared by more than one run.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &runs {
        *counts.entry(r.label.clone()).or_default() += 1;
    }
    for r in &mut runs {
        if counts[&r.label] > 1 {
            r.label = format!("{} [{}]", r.label, r.manifest.run_id);
        }
    }
    let mut labels = BTreeSet::new();
    for r in &runs {
        if !labels.insert(r.label.clone()) {
            bail!("two runs share the label {:?}", r.label);
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub label: String,
    pub run_id: String,
    pub decision_record: DecisionRecord,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<RunEntry>,
    pub filter: FilterReport,
}

/// Applies the comparability guard and the common-frame filter, then
/// summarizes every run.
pub fn build_report(runs: &[LoadedRun], allow_mixed_decisions: bool) -> Result<Report> {
    if runs.is_empty() {
        bail!("no runs given");
    }
    let reference = &runs[0].manifest.decision_record;
    if let Some(other) = runs.iter().find(|r| &r.manifest.decision_record != reference) {
        if !allow_mixed_decisions {
            bail!(
                "runs {} and {} were made under different decisions ({:?} vs {:?}); pass --allow-mixed-decisions to compare them anyway",
                runs[0].manifest.run_id,
                other.manifest.run_id,
                reference,
                other.manifest.decision_record
            );
        }
        tracing::warn!("comparing runs made under different decision records");
    }

    let universe: BTreeSet<String> = runs.iter().flat_map(|r| r.results.iter().map(|x| x.frame_id.clone())).collect();
    let valid: BTreeMap<String, BTreeSet<String>> = runs
        .iter()
        .map(|r| {
            let ids = r.results.iter().filter(|x| x.has_prediction()).map(|x| x.frame_id.clone()).collect();
            (r.label.clone(), ids)
        })
        .collect();
    let filter = common_frame_filter(&valid, &universe)?;
    if filter.retained_frame_ids.is_empty() {
        let mut why = String::new();
        for r in runs {
            let n = valid[&r.label].len();
            let _ = write!(why, "\n  {}: {} of {} frames have a valid prediction", r.label, n, r.results.len());
        }
        bail!(
            "no frame has a valid prediction from every run ({} frames in the union, 0 retained):{why}",
            filter.universe_size
        );
    }

    let mut entries = Vec::with_capacity(runs.len());
    for r in runs {
        let summary = summarize(&r.label, &r.results, &r.manifest.pricing, &filter)
            .with_context(|| format!("summarizing {}", r.label))?;
        entries.push(RunEntry {
            label: r.label.clone(),
            run_id: r.manifest.run_id.clone(),
            decision_record: r.manifest.decision_record.clone(),
            summary,
        });
    }
    Ok(Report { runs: entries, filter })
}

pub fn render_efficiency(summaries: &[RunSummary]) -> String {
    let mut out = String::from("# Efficiency\n\n");
    out.push_str("Per-frame means over every attempted frame, before the common-frame filter. ");
    out.push_str("Time and tokens cover all three stages.\n\n");
    out.push_str("| Model | Frames | Infer Time (s) | Infer Cost (¢) | Input Tokens | Output Tokens |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.0} | {:.0} |",
            s.model_name, s.frames_total, s.mean_latency, s.mean_cost, s.mean_input_tokens, s.mean_output_tokens
        );
    }
    out
}

pub fn render_performance(summaries: &[RunSummary], filter: &FilterReport) -> String {
    let mut out = String::from("# Performance\n\n");
    let _ = writeln!(
        out,
        "FE and FE Corr cover every attempted frame. ADE and FDE (meters) cover the {} of {} frames ({:.1}%) where every run produced a valid prediction.\n",
        filter.retained_frame_ids.len(),
        filter.universe_size,
        filter.retention_rate
    );
    out.push_str("| Model | FE (%) | FE Corr (%) | ADE 1s | ADE 2s | ADE 3s | ADE avg | FDE |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for s in summaries {
        let d = &s.displacement;
        let _ = writeln!(
            out,
            "| {} | {:.1} | {:.1} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            s.model_name, s.fe_rate, s.fe_corr_rate, d.ade_1s, d.ade_2s, d.ade_3s, d.ade_avg, d.fde
        );
    }
    out.push_str("\n## Common-frame filter\n\n");
    let _ = writeln!(
        out,
        "Retained {} of {} frames ({:.1}%).",
        filter.retained_frame_ids.len(),
        filter.universe_size,
        filter.retention_rate
    );
    if !filter.excluded.is_empty() {
        out.push_str("\n| Excluded frame | Runs without a valid prediction |\n|---|---|\n");
        for (frame, culprits) in &filter.excluded {
            let _ = writeln!(out, "| {} | {} |", frame, culprits.join(", "));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct FrameRow<'a> {
    model: &'a str,
    run_id: &'a str,
    frame_id: &'a str,
    parse_status: &'a str,
    error_class: &'a str,
    retained: bool,
    ade_1s: Option<f64>,
    ade_2s: Option<f64>,
    ade_3s: Option<f64>,
    ade_avg: Option<f64>,
    fde: Option<f64>,
    latency_s: f64,
    input_tokens: u64,
    output_tokens: u64,
    cost_cents: f64,
}

fn write_frames_csv(path: &Path, runs: &[LoadedRun], filter: &FilterReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for run in runs {
        let mut results: Vec<&FrameResult> = run.results.iter().collect();
        results.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        for r in results {
            let metrics = match (&r.predicted, r.has_prediction()) {
                (Some(p), true) => displacement_errors(p, &r.ground_truth).ok(),
                _ => None,
            };
            let usage = r.total_usage();
            let status = serde_json::to_value(r.parse_status)?;
            writer.serialize(FrameRow {
                model: &run.label,
                run_id: &run.manifest.run_id,
                frame_id: &r.frame_id,
                parse_status: status.as_str().unwrap_or_default(),
                error_class: r.error_class.map_or("", |c| c.as_str()),
                retained: filter.retained_frame_ids.contains(&r.frame_id),
                ade_1s: metrics.map(|m| m.ade_1s),
                ade_2s: metrics.map(|m| m.ade_2s),
                ade_3s: metrics.map(|m| m.ade_3s),
                ade_avg: metrics.map(|m| m.ade_avg),
                fde: metrics.map(|m| m.fde),
                latency_s: r.latency.total,
                input_tokens: usage.input_tokens,
                output_tokens: usage.output_tokens,
                cost_cents: estimate_cost(usage.input_tokens, usage.output_tokens, &run.manifest.pricing),
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// File-name-safe form of a frame id.
fn overlay_name(frame_id: &str) -> String {
    let safe: String = frame_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.svg")
}

fn write_overlays(dir: &Path, runs: &[LoadedRun], filter: &FilterReport) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let indexed: Vec<BTreeMap<&str, &FrameResult>> = runs
        .iter()
        .map(|r| r.results.iter().map(|x| (x.frame_id.as_str(), x)).collect())
        .collect();
    let universe: BTreeSet<&str> = indexed.iter().flat_map(|m| m.keys().copied()).collect();
    let mut names = BTreeSet::new();
    for frame_id in &universe {
        let name = overlay_name(frame_id);
        if !names.insert(name.clone()) {
            bail!("frame ids collide on overlay file name {name}");
        }
        let ground_truth = indexed
            .iter()
            .find_map(|m| m.get(frame_id))
            .map(|r| r.ground_truth.points.as_slice())
            .unwrap_or_default();
        let series: Vec<Series<'_>> = runs
            .iter()
            .zip(&indexed)
            .filter_map(|(run, m)| {
                let r = m.get(frame_id)?;
                let p = r.predicted.as_ref().filter(|_| r.has_prediction())?;
                Some(Series {
                    label: &run.label,
                    points: &p.points,
                })
            })
            .collect();
        let mark = if filter.retained_frame_ids.contains(*frame_id) { "" } else { " (excluded)" };
        let svg = render_overlay(&format!("{frame_id}{mark}"), ground_truth, &series);
        std::fs::write(dir.join(&name), svg)?;
    }
    Ok(universe.len())
}

/// Writes the full report bundle into `out`.
pub fn write_report(runs: &[LoadedRun], report: &Report, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let summaries: Vec<RunSummary> = report.runs.iter().map(|r| r.summary.clone()).collect();
    std::fs::write(out.join(EFFICIENCY_FILE), render_efficiency(&summaries))?;
    std::fs::write(out.join(PERFORMANCE_FILE), render_performance(&summaries, &report.filter))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(out.join(SUMMARY_FILE), json)?;
    write_frames_csv(&out.join(FRAMES_FILE), runs, &report.filter)?;
    write_overlays(&out.join(OVERLAY_DIR), runs, &report.filter)?;
    Ok(())
}

/// Loads, filters, summarizes and writes. Returns the report for callers
/// that want the numbers.
pub fn run_report(dirs: &[PathBuf], out: &Path, allow_mixed_decisions: bool) -> Result<Report> {
    let runs = load_runs(dirs)?;
    let report = build_report(&runs, allow_mixed_decisions)?;
    write_report(&runs, &report, out)?;
    Ok(report)
}
