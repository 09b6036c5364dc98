//! Shared fixture: a synthetic dataroot, its scenario file, a scripted
//! provider whose commands reproduce the ground truth, and run configs.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cotdrive_cli::cmd_ingest;
use cotdrive_cli::config::RunConfig;
use cotdrive_core::client::{FailKind, Provider, ScriptEntry, ScriptedBackend, WILDCARD};
use cotdrive_core::ingest::{write_synthetic_dataroot, SyntheticScene};

/// Integrates exactly to the synthetic scenes' 1 m-per-tick ground truth.
pub const PERFECT: &str = "[(2.0, 0.0), (2.0, 0.0), (2.0, 0.0), (2.0, 0.0), (2.0, 0.0), (2.0, 0.0)]";

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub frame_ids: Vec<String>,
}

impl Fixture {
    /// One straight scene with `frames` eligible keyframes.
    pub fn new(frames: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        write_synthetic_dataroot(&root, &[SyntheticScene::straight("scene-0001", frames + 12)]).unwrap();
        let scenes = dir.path().join("scenes.txt");
        std::fs::write(&scenes, "scene-0001\n").unwrap();
        let summary = cmd_ingest(&root, &scenes, &dir.path().join("scenarios.jsonl")).unwrap();
        assert_eq!(summary.frames, frames);
        let frame_ids = (6..6 + frames).map(|k| format!("s000k{k:03}")).collect();
        Self { dir, frame_ids }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn scenario_path(&self) -> PathBuf {
        self.path().join("scenarios.jsonl")
    }

    /// Writes a config file and returns the loaded config.
    pub fn config(&self, run_id: &str, model: &str, script: &[ScriptEntry], workers: usize) -> RunConfig {
        let script_path = self.path().join(format!("{run_id}.script.jsonl"));
        let lines: Vec<String> = script.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        std::fs::write(&script_path, lines.join("\n") + "\n").unwrap();
        let body = serde_json::json!({
            "run_id": run_id,
            "scenario_path": "scenarios.jsonl",
            "image_root": "data",
            "provider": {
                "kind": "scripted",
                "model_name": model,
                "script_path": script_path.file_name().unwrap().to_str().unwrap(),
                "price_in": 2.5,
                "price_out": 10.0
            },
            "output_dir": "runs",
            "max_workers": workers,
            "normalize_latency": true
        });
        let path = self.path().join(format!("{run_id}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        RunConfig::load(&path).unwrap()
    }

    pub fn config_path(&self, run_id: &str) -> PathBuf {
        self.path().join(format!("{run_id}.json"))
    }
}

pub fn entry(frame: &str, stage: u8, text: &str) -> ScriptEntry {
    ScriptEntry {
        frame_id: frame.into(),
        stage,
        text: text.into(),
        input_tokens: [0, 1500, 1600, 1700][stage as usize],
        output_tokens: [0, 120, 60, 40][stage as usize],
        latency: 0.0,
        fail_times: 0,
        fail_kind: FailKind::Transient,
    }
}

/// Same three answers for every frame.
pub fn perfect_script() -> Vec<ScriptEntry> {
    vec![
        entry(WILDCARD, 1, "A straight, empty road in daylight."),
        entry(WILDCARD, 2, "Keep a steady 2 m/s in the current lane."),
        entry(WILDCARD, 3, PERFECT),
    ]
}

/// Provider over the config's own script, keeping a handle on the call log.
pub fn scripted_provider(config: &RunConfig) -> (Provider, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::from_file(config.provider.script_path.as_ref().unwrap()).unwrap());
    let provider = Provider::new(config.provider.clone(), backend.clone());
    (provider, backend)
}
