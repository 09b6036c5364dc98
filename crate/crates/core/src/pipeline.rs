//! Three-stage prompting for one frame: scene description, then high-level
//! intent, then low-level commands. Each stage's output is threaded verbatim
//! into the next prompt, and the front-camera image is attached to every
//! stage since each call is stateless.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatRequest, ImageAttachment, Provider, RequestKey};
use crate::domain::{
    ActionState, ErrorClass, Frame, FrameResult, Latency, ParseStatus, StageTexts, StageUsage,
};
use crate::kinematics::{integrate, IntegratorConfig};
use crate::parser::parse_actions;

pub const DEFAULT_STAGE1: &str = include_str!("../templates/stage1.txt");
pub const DEFAULT_STAGE2: &str = include_str!("../templates/stage2.txt");
pub const DEFAULT_STAGE3: &str = include_str!("../templates/stage3.txt");

const STAGE1_FIELDS: &[&str] = &[];
const STAGE2_FIELDS: &[&str] = &["scene_description", "history"];
const STAGE3_FIELDS: &[&str] = &["scene_description", "intent"];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("stage {stage} template placeholders {found:?} do not match the expected {expected:?}")]
    Placeholders {
        stage: u8,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `{name}` placeholders in a template, where name is `[A-Za-z_][A-Za-z0-9_]*`.
pub fn placeholders(template: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        rest = &rest[open + 1..];
        if let Some(close) = rest.find('}') {
            let name = &rest[..close];
            if is_identifier(name) {
                out.insert(name.to_string());
                rest = &rest[close + 1..];
            }
        }
    }
    out
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Substitutes placeholders in one pass; inserted values are not rescanned.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    stage1: String,
    stage2: String,
    stage3: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::new(DEFAULT_STAGE1, DEFAULT_STAGE2, DEFAULT_STAGE3).expect("shipped templates are valid")
    }
}

impl PromptTemplates {
    /// Checks that each template holds exactly its stage's placeholders.
    pub fn new(
        stage1: impl Into<String>,
        stage2: impl Into<String>,
        stage3: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let t = Self {
            stage1: stage1.into(),
            stage2: stage2.into(),
            stage3: stage3.into(),
        };
        for (stage, text, fields) in [
            (1, &t.stage1, STAGE1_FIELDS),
            (2, &t.stage2, STAGE2_FIELDS),
            (3, &t.stage3, STAGE3_FIELDS),
        ] {
            let found = placeholders(text);
            let expected: BTreeSet<String> = fields.iter().map(|s| s.to_string()).collect();
            if found != expected {
                return Err(TemplateError::Placeholders {
                    stage,
                    expected: expected.into_iter().collect(),
                    found: found.into_iter().collect(),
                });
            }
        }
        Ok(t)
    }

    pub fn load(paths: [&Path; 3]) -> Result<Self, TemplateError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TemplateError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Self::new(read(paths[0])?, read(paths[1])?, read(paths[2])?)
    }

    pub fn stage1(&self) -> String {
        self.stage1.clone()
    }

    pub fn stage2(&self, scene_description: &str, history: &str) -> String {
        render(
            &self.stage2,
            &[("scene_description", scene_description), ("history", history)],
        )
    }

    pub fn stage3(&self, scene_description: &str, intent: &str) -> String {
        render(
            &self.stage3,
            &[("scene_description", scene_description), ("intent", intent)],
        )
    }
}

/// Renders actions oldest first as `[(v, k), ...]`, speeds to 2 decimals and
/// curvatures to 4.
pub fn format_history(history: &[ActionState]) -> String {
    let pairs: Vec<String> = history
        .iter()
        .map(|a| format!("({:.2}, {:.4})", a.speed, a.curvature))
        .collect();
    format!("[{}]", pairs.join(", "))
}

/// Settings that change what the pipeline measures. Stored with every run
/// so that runs made under different choices are not silently compared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub history_order: String,
    pub correction_attribution: String,
    pub image_per_stage: String,
    pub ade_horizon: String,
    pub temperature: String,
}

impl DecisionRecord {
    pub fn current(temperature: Option<f64>) -> Self {
        Self {
            history_order: "oldest-first".into(),
            correction_attribution: "interleaved".into(),
            image_per_stage: "all-stages".into(),
            ade_horizon: "first-2k-points".into(),
            temperature: temperature.map_or_else(|| "provider-default".into(), |t| t.to_string()),
        }
    }
}

fn failed_result(
    frame: &Frame,
    texts: StageTexts,
    usage: [StageUsage; 3],
    latency: [f64; 3],
    class: ErrorClass,
    detail: String,
) -> FrameResult {
    FrameResult {
        frame_id: frame.frame_id.clone(),
        stage_texts: texts,
        parse_status: ParseStatus::Failed,
        actions: None,
        predicted: None,
        ground_truth: frame.ground_truth.clone(),
        usage,
        latency: Latency::from_stages(latency),
        error_class: Some(class),
        error_detail: Some(detail),
    }
}

/// Runs the three stages for one frame. Never fails: image and transport
/// problems are recorded on the returned result.
pub fn run_frame(
    frame: &Frame,
    provider: &Provider,
    templates: &PromptTemplates,
    image_root: &Path,
) -> FrameResult {
    let mut texts = StageTexts::default();
    let mut usage = [StageUsage::default(); 3];
    let mut latency = [0.0; 3];

    let image_path = image_root.join(&frame.image_path);
    let image = match std::fs::read(&image_path) {
        Ok(bytes) if !bytes.is_empty() => Arc::new(ImageAttachment::from_path_bytes(&image_path, bytes)),
        Ok(_) => {
            let detail = format!("{} is empty", image_path.display());
            return failed_result(frame, texts, usage, latency, ErrorClass::ImageUnreadable, detail);
        }
        Err(e) => {
            let detail = format!("{}: {e}", image_path.display());
            return failed_result(frame, texts, usage, latency, ErrorClass::ImageUnreadable, detail);
        }
    };

    let history = format_history(&frame.history);
    let config = provider.config();
    for stage in 1..=3u8 {
        let prompt = match stage {
            1 => templates.stage1(),
            2 => templates.stage2(&texts.scene_description, &history),
            _ => templates.stage3(&texts.scene_description, &texts.intent),
        };
        let request = ChatRequest {
            system_text: None,
            user_text: prompt,
            image: Some(image.clone()),
            max_output_tokens: config.max_output_tokens,
            temperature: config.temperature,
            key: Some(RequestKey {
                frame_id: frame.frame_id.clone(),
                stage,
            }),
        };
        let idx = usize::from(stage - 1);
        match provider.send(&request) {
            Ok(resp) => {
                usage[idx] = StageUsage {
                    input_tokens: resp.input_tokens,
                    output_tokens: resp.output_tokens,
                };
                latency[idx] = resp.latency;
                match stage {
                    1 => texts.scene_description = resp.text,
                    2 => texts.intent = resp.text,
                    _ => texts.commands = resp.text,
                }
            }
            Err(e) => {
                let detail = format!("stage {stage}: {e}");
                tracing::warn!(frame = %frame.frame_id, "{detail}");
                return failed_result(frame, texts, usage, latency, ErrorClass::Transport, detail);
            }
        }
    }

    let outcome = parse_actions(&texts.commands);
    let predicted = outcome
        .actions
        .as_ref()
        .map(|a| integrate(a, &IntegratorConfig::default()).expect("parsed actions are valid"));
    FrameResult {
        frame_id: frame.frame_id.clone(),
        stage_texts: texts,
        parse_status: outcome.status,
        actions: outcome.actions,
        predicted,
        ground_truth: frame.ground_truth.clone(),
        usage,
        latency: Latency::from_stages(latency),
        error_class: outcome.error_class,
        error_detail: None,
    }
}
