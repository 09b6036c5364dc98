//! Command-line harness: scenario ingestion, batch runs with resume, and
//! report rendering.

pub mod config;
pub mod report;
pub mod runner;
pub mod svg;

use std::path::Path;

use anyhow::{Context, Result};
use cotdrive_core::ingest::{build_frames, load_tables, read_scene_list, write_scenarios};

/// Scene and frame counts from an ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub scenes: usize,
    pub frames: usize,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let plural = |n: usize| if n == 1 { "" } else { "s" };
        write!(
            f,
            "{} scene{}, {} frame{}",
            self.scenes,
            plural(self.scenes),
            self.frames,
            plural(self.frames)
        )
    }
}

/// Builds a scenario file from the scenes listed in `scene_list`.
pub fn cmd_ingest(dataroot: &Path, scene_list: &Path, out: &Path) -> Result<IngestSummary> {
    let tables = load_tables(dataroot).with_context(|| format!("loading tables from {}", dataroot.display()))?;
    let scenes = read_scene_list(scene_list).with_context(|| format!("reading {}", scene_list.display()))?;
    let mut frames = Vec::new();
    for scene in &scenes {
        frames.extend(build_frames(&tables, scene).with_context(|| format!("scene {scene}"))?);
    }
    let written = write_scenarios(&frames, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(IngestSummary {
        scenes: scenes.len(),
        frames: written,
    })
}
