//! Batch execution: a bounded pool of frame workers feeding a single writer
//! that owns the results file. Results already on disk are skipped on resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use cotdrive_core::client::{Pricing, Provider, ProviderKind};
use cotdrive_core::domain::{encode, read_jsonl, validate_frame, Frame, FrameResult};
use cotdrive_core::pipeline::{run_frame, DecisionRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    /// Absent while the run is incomplete.
    #[serde(default)]
    pub finished_at: Option<u64>,
    /// Frame ids with a recorded result, sorted.
    pub ledger: Vec<String>,
    pub decision_record: DecisionRecord,
    pub model_name: String,
    pub provider_kind: ProviderKind,
    pub pricing: Pricing,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn store(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        replace_file(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Overrides the config's frame_limit.
    pub limit: Option<usize>,
    /// Stop claiming frames after this many new ones, leaving the run
    /// unfinished as if the process had been killed.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    /// Frames inferred by this invocation.
    pub executed: usize,
    /// Frames skipped because a result already existed.
    pub skipped: usize,
    /// Results now on disk.
    pub total: usize,
    /// Results whose error class is a transport or image fault.
    pub faults: usize,
    pub finished: bool,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn replace_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

/// Reads and checks a scenario file.
pub fn load_scenarios(path: &Path) -> Result<Vec<Frame>> {
    let file = File::open(path).with_context(|| format!("opening scenarios {}", path.display()))?;
    let frames: Vec<Frame> = read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let mut seen = BTreeSet::new();
    for f in &frames {
        let violations = validate_frame(f);
        if !violations.is_empty() {
            let names: Vec<&str> = violations.iter().map(|v| v.name()).collect();
            bail!("frame {:?} is invalid: {}", f.frame_id, names.join(", "));
        }
        if !seen.insert(f.frame_id.as_str()) {
            bail!("duplicate frame id {:?}", f.frame_id);
        }
    }
    Ok(frames)
}

/// Reads a results file written by a possibly interrupted run. A final line
/// cut short by a crash is dropped; corruption anywhere else is an error.
/// Returns the records and whether a partial tail was dropped.
pub fn read_results_tolerant(path: &Path) -> Result<(Vec<FrameResult>, bool)> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), false)),
        Err(e) => return Err(e).with_context(|| format!("opening {}", path.display())),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::with_capacity(lines.len());
    let mut dropped = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<FrameResult>(line) {
            Ok(r) => out.push(r),
            Err(_) if Some(i) == last => {
                tracing::warn!(path = %path.display(), line = i + 1, "dropping truncated final result");
                dropped = true;
            }
            Err(e) => return Err(e).with_context(|| format!("{} line {}", path.display(), i + 1)),
        }
    }
    Ok((out, dropped))
}

fn write_results(path: &Path, results: &[FrameResult]) -> Result<()> {
    let mut buf = Vec::new();
    for r in results {
        buf.extend_from_slice(encode(r)?.as_bytes());
        buf.push(b'\n');
    }
    replace_file(path, &buf)
}

/// Runs a config with the provider it describes.
pub fn execute(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome> {
    let provider = Provider::from_config(config.provider.clone()).context("building provider")?;
    execute_with(config, &provider, options)
}

/// Runs a config against an explicit provider.
pub fn execute_with(config: &RunConfig, provider: &Provider, options: &RunOptions) -> Result<RunOutcome> {
    let mut frames = load_scenarios(&config.scenario_path)?;
    if let Some(limit) = options.limit.or(config.frame_limit) {
        frames.truncate(limit);
    }
    let templates = config.load_templates()?;
    let image_root = config.image_root();
    let run_dir = config.run_dir();
    let results_path = run_dir.join(RESULTS_FILE);
    let hash = config.hash();

    let existing_manifest = run_dir.join(MANIFEST_FILE).exists();
    let (mut done, started_at) = if existing_manifest {
        if !options.resume {
            bail!("run directory {} already exists; pass --resume to continue it", run_dir.display());
        }
        let manifest = RunManifest::load(&run_dir)?;
        if manifest.config_hash != hash {
            bail!(
                "config hash {} differs from the one recorded in {} ({}); use a new run_id",
                hash,
                run_dir.display(),
                manifest.config_hash
            );
        }
        let (results, dropped) = read_results_tolerant(&results_path)?;
        if dropped {
            write_results(&results_path, &results)?;
        }
        (results, manifest.started_at)
    } else {
        std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        (Vec::new(), now())
    };

    let mut manifest = RunManifest {
        run_id: config.run_id.clone(),
        config_hash: hash,
        started_at,
        finished_at: None,
        ledger: done.iter().map(|r| r.frame_id.clone()).collect(),
        decision_record: config.current_decisions(),
        model_name: config.provider.model_name.clone(),
        provider_kind: config.provider.kind,
        pricing: config.provider.pricing(),
    };
    manifest.ledger.sort();
    manifest.store(&run_dir)?;

    let done_ids: BTreeSet<&str> = done.iter().map(|r| r.frame_id.as_str()).collect();
    let pending: Vec<&Frame> = frames.iter().filter(|f| !done_ids.contains(f.frame_id.as_str())).collect();
    let skipped = frames.len() - pending.len();
    let budget = options.stop_after.map_or(pending.len(), |n| n.min(pending.len()));
    let interrupted = budget < pending.len();
    tracing::info!(run = %config.run_id, pending = pending.len(), skipped, "starting");

    let mut results_file = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results_path)
            .with_context(|| format!("opening {}", results_path.display()))?,
    );
    let next = AtomicUsize::new(0);
    let workers = config.max_workers.min(budget).max(1);
    let mut fresh = Vec::with_capacity(budget);
    let written: Result<()> = std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<FrameResult>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, templates, image_root) = (&next, &pending, &templates, &image_root);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= budget {
                    break;
                }
                let result = run_frame(pending[i], provider, templates, image_root);
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for mut result in rx {
            if config.normalize_latency {
                result.normalize_latency();
            }
            if let Some(class) = result.error_class.filter(|c| c.is_fault()) {
                tracing::warn!(frame = %result.frame_id, class = class.as_str(), detail = ?result.error_detail, "frame fault");
            }
            let line = encode(&result)?;
            writeln!(results_file, "{line}")?;
            results_file.flush()?;
            fresh.push(result);
        }
        Ok(())
    });
    written.with_context(|| format!("writing {}", results_path.display()))?;
    drop(results_file);

    let executed = fresh.len();
    done.extend(fresh);
    let faults = done.iter().filter(|r| r.is_fault()).count();
    let total = done.len();
    if !interrupted {
        // Keyed by id so a frame can never appear twice in the final file.
        let sorted: BTreeMap<String, FrameResult> = done.into_iter().map(|r| (r.frame_id.clone(), r)).collect();
        let sorted: Vec<FrameResult> = sorted.into_values().collect();
        write_results(&results_path, &sorted)?;
        manifest.ledger = sorted.iter().map(|r| r.frame_id.clone()).collect();
        manifest.finished_at = Some(now());
        manifest.store(&run_dir)?;
    }
    Ok(RunOutcome {
        run_dir,
        executed,
        skipped,
        total,
        faults,
        finished: !interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotdrive_core::domain::{ParseStatus, Point, StageTexts, Trajectory};

    fn result(id: &str) -> FrameResult {
        FrameResult {
            frame_id: id.into(),
            stage_texts: StageTexts::default(),
            parse_status: ParseStatus::Failed,
            actions: None,
            predicted: None,
            ground_truth: Trajectory::new(vec![Point::new(1.0, 0.0); 6]),
            usage: Default::default(),
            latency: Default::default(),
            error_class: None,
            error_detail: None,
        }
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        let mut text = format!("{}\n{}\n", encode(&result("a")).unwrap(), encode(&result("b")).unwrap());
        let partial = encode(&result("c")).unwrap();
        text.push_str(&partial[..partial.len() / 2]);
        std::fs::write(&path, text).unwrap();
        let (records, dropped) = read_results_tolerant(&path).unwrap();
        assert!(dropped);
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn corruption_before_the_tail_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        std::fs::write(&path, format!("{{oops\n{}\n", encode(&result("a")).unwrap())).unwrap();
        assert!(read_results_tolerant(&path).is_err());
    }

    #[test]
    fn missing_results_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (records, dropped) = read_results_tolerant(&dir.path().join("nope.jsonl")).unwrap();
        assert!(records.is_empty() && !dropped);
    }
}
