//! Shared record types: control samples, trajectories, evaluation frames and
//! per-frame results, plus their JSONL encoding.
//!
//! Records are encoded as one JSON object per line. Field order in the
//! encoded text follows struct declaration order, so two encodes of the same
//! record are byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds between consecutive actions and trajectory points.
pub const TICK_SECONDS: f64 = 0.5;

/// Number of actions in a history or prediction, and points in a trajectory.
pub const HORIZON: usize = 6;

/// Largest accepted curvature magnitude, in 1/m.
pub const MAX_ABS_CURVATURE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("speed {0} is not finite")]
    NonFiniteSpeed(f64),
    #[error("curvature {0} is not finite")]
    NonFiniteCurvature(f64),
    #[error("speed {0} is negative")]
    NegativeSpeed(f64),
    #[error("curvature {0} exceeds the sanity bound of {MAX_ABS_CURVATURE} 1/m")]
    CurvatureOutOfRange(f64),
}

/// One (speed, curvature) control sample.
///
/// Encoded as a two-element array `[speed, curvature]`. Construction through
/// [`ActionState::new`] enforces the sanity bounds; deserialization does not,
/// so that invalid records can still be loaded and reported on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ActionState {
    /// m/s
    pub speed: f64,
    /// 1/m, positive bends left
    pub curvature: f64,
}

impl ActionState {
    pub fn new(speed: f64, curvature: f64) -> Result<Self, ActionError> {
        let action = Self { speed, curvature };
        action.check()?;
        Ok(action)
    }

    /// Builds an action without bound checks.
    pub const fn new_unchecked(speed: f64, curvature: f64) -> Self {
        Self { speed, curvature }
    }

    pub fn check(&self) -> Result<(), ActionError> {
        if !self.speed.is_finite() {
            return Err(ActionError::NonFiniteSpeed(self.speed));
        }
        if !self.curvature.is_finite() {
            return Err(ActionError::NonFiniteCurvature(self.curvature));
        }
        if self.speed < 0.0 {
            return Err(ActionError::NegativeSpeed(self.speed));
        }
        if self.curvature.abs() > MAX_ABS_CURVATURE {
            return Err(ActionError::CurvatureOutOfRange(self.curvature));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.speed.is_finite() && self.curvature.is_finite()
    }
}

impl From<[f64; 2]> for ActionState {
    fn from([speed, curvature]: [f64; 2]) -> Self {
        Self { speed, curvature }
    }
}

impl From<ActionState> for [f64; 2] {
    fn from(a: ActionState) -> Self {
        [a.speed, a.curvature]
    }
}

/// A planar point in meters, encoded as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Future positions in the ego frame at a fixed [`TICK_SECONDS`] spacing.
/// The origin (current pose) is not included.
///
/// Encoded as a bare array of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn tick(&self) -> f64 {
        TICK_SECONDS
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(Point::is_finite)
    }
}

/// A single evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub scene_id: String,
    pub timestamp_us: i64,
    /// Relative path to the front-camera image.
    pub image_path: String,
    /// Oldest first.
    pub history: Vec<ActionState>,
    pub ground_truth: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseStatus {
    Strict,
    Corrected,
    Failed,
}

/// Why a stage-3 output was not accepted strictly, or why a frame failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorClass {
    MissingDelimiters,
    ExtraText,
    WrongCount,
    NonNumeric,
    OutOfRange,
    /// A provider call failed after retries.
    Transport,
    /// The frame image could not be read.
    ImageUnreadable,
}

impl ErrorClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorClass::MissingDelimiters => "missing-delimiters",
            ErrorClass::ExtraText => "extra-text",
            ErrorClass::WrongCount => "wrong-count",
            ErrorClass::NonNumeric => "non-numeric",
            ErrorClass::OutOfRange => "out-of-range",
            ErrorClass::Transport => "transport",
            ErrorClass::ImageUnreadable => "image-unreadable",
        }
    }

    /// Frame-level faults, as opposed to format errors in the model output.
    pub fn is_fault(&self) -> bool {
        matches!(self, ErrorClass::Transport | ErrorClass::ImageUnreadable)
    }
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTexts {
    pub scene_description: String,
    pub intent: String,
    pub commands: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl StageUsage {
    pub fn total(stages: &[StageUsage]) -> StageUsage {
        stages.iter().fold(StageUsage::default(), |acc, s| StageUsage {
            input_tokens: acc.input_tokens + s.input_tokens,
            output_tokens: acc.output_tokens + s.output_tokens,
        })
    }
}

/// Per-stage wall-clock seconds and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub stages: [f64; 3],
    pub total: f64,
}

impl Latency {
    pub fn from_stages(stages: [f64; 3]) -> Self {
        Self {
            stages,
            total: stages.iter().sum(),
        }
    }
}

/// Everything recorded for one frame of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    pub stage_texts: StageTexts,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<ActionState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Trajectory>,
    /// Copied from the frame so reports can be computed from results alone.
    pub ground_truth: Trajectory,
    pub usage: [StageUsage; 3],
    pub latency: Latency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl FrameResult {
    pub fn total_usage(&self) -> StageUsage {
        StageUsage::total(&self.usage)
    }

    pub fn has_prediction(&self) -> bool {
        self.parse_status != ParseStatus::Failed && self.predicted.is_some()
    }

    pub fn is_fault(&self) -> bool {
        self.error_class.is_some_and(|c| c.is_fault())
    }

    /// Checks the record-level invariants.
    pub fn check(&self) -> Result<(), String> {
        match self.parse_status {
            ParseStatus::Strict | ParseStatus::Corrected => {
                if self.actions.is_none() || self.predicted.is_none() {
                    return Err(format!(
                        "{}: accepted result without actions or prediction",
                        self.frame_id
                    ));
                }
            }
            ParseStatus::Failed => {
                if self.actions.is_some() {
                    return Err(format!("{}: failed result carries actions", self.frame_id));
                }
            }
        }
        if self.parse_status == ParseStatus::Strict && self.error_class.is_some() {
            return Err(format!("{}: strict result carries an error class", self.frame_id));
        }
        let sum: f64 = self.latency.stages.iter().sum();
        if (sum - self.latency.total).abs() > 1e-3 {
            return Err(format!(
                "{}: latency total {} differs from stage sum {}",
                self.frame_id, self.latency.total, sum
            ));
        }
        Ok(())
    }

    /// Zeroes all wall-clock fields, for byte-level comparison of runs.
    pub fn normalize_latency(&mut self) {
        self.latency = Latency::default();
    }
}

/// A named violation of a [`Frame`] invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Violation {
    EmptyFrameId,
    HistoryLength,
    GroundTruthLength,
    NonFiniteCoordinate,
    NonFiniteAction,
    EmptyImagePath,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::EmptyFrameId => "empty-frame-id",
            Violation::HistoryLength => "history-length",
            Violation::GroundTruthLength => "ground-truth-length",
            Violation::NonFiniteCoordinate => "non-finite-coordinate",
            Violation::NonFiniteAction => "non-finite-action",
            Violation::EmptyImagePath => "empty-image-path",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Lists every invariant the frame violates; empty means the frame is valid.
pub fn validate_frame(frame: &Frame) -> Vec<Violation> {
    let mut out = Vec::new();
    if frame.frame_id.is_empty() {
        out.push(Violation::EmptyFrameId);
    }
    if frame.history.len() != HORIZON {
        out.push(Violation::HistoryLength);
    }
    if frame.ground_truth.len() != HORIZON {
        out.push(Violation::GroundTruthLength);
    }
    if !frame.ground_truth.is_finite() {
        out.push(Violation::NonFiniteCoordinate);
    }
    if !frame.history.iter().all(ActionState::is_finite) {
        out.push(Violation::NonFiniteAction);
    }
    if frame.image_path.is_empty() {
        out.push(Violation::EmptyImagePath);
    }
    out
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("encode failed: {0}")]
    Encode(#[source] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encodes a record as a single JSON line, without the trailing newline.
pub fn encode<T: Serialize>(record: &T) -> Result<String, CodecError> {
    serde_json::to_string(record).map_err(CodecError::Encode)
}

/// Decodes one JSON line. Errors name the first offending field.
pub fn decode<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(text)
}

/// Reads a JSONL stream, skipping blank lines.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>, CodecError>
where
    T: for<'de> Deserialize<'de>,
    R: std::io::BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = decode(&line).map_err(|source| CodecError::Decode {
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T, W>(mut writer: W, records: &[T]) -> Result<(), CodecError>
where
    T: Serialize,
    W: std::io::Write,
{
    for record in records {
        writer.write_all(encode(record)?.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight_frame() -> Frame {
        Frame {
            frame_id: "f1".into(),
            scene_id: "scene-0001".into(),
            timestamp_us: 1_533_151_603_547_590,
            image_path: "samples/CAM_FRONT/f1.jpg".into(),
            history: vec![ActionState::new_unchecked(2.0, 0.0); 6],
            ground_truth: Trajectory::new((1..=6).map(|i| Point::new(i as f64, 0.0)).collect()),
        }
    }

    #[test]
    fn valid_frame_has_no_violations() {
        assert!(validate_frame(&straight_frame()).is_empty());
    }

    #[test]
    fn short_history_is_reported() {
        let mut f = straight_frame();
        f.history.pop();
        assert_eq!(validate_frame(&f), vec![Violation::HistoryLength]);
        assert_eq!(Violation::HistoryLength.name(), "history-length");
    }

    #[test]
    fn non_finite_ground_truth_is_reported() {
        let mut f = straight_frame();
        f.ground_truth.points[3].y = f64::NAN;
        assert_eq!(validate_frame(&f), vec![Violation::NonFiniteCoordinate]);
    }

    #[test]
    fn multiple_violations_are_all_listed() {
        let mut f = straight_frame();
        f.image_path.clear();
        f.ground_truth.points.truncate(2);
        let v = validate_frame(&f);
        assert!(v.contains(&Violation::EmptyImagePath));
        assert!(v.contains(&Violation::GroundTruthLength));
    }

    #[test]
    fn action_bounds() {
        assert!(ActionState::new(3.0, 0.5).is_ok());
        assert_eq!(
            ActionState::new(-0.1, 0.0),
            Err(ActionError::NegativeSpeed(-0.1))
        );
        assert!(matches!(
            ActionState::new(1.0, 1.5),
            Err(ActionError::CurvatureOutOfRange(_))
        ));
        assert!(ActionState::new(f64::INFINITY, 0.0).is_err());
        assert!(ActionState::new(1.0, -1.0).is_ok());
    }

    #[test]
    fn frame_encoding_uses_documented_keys_in_order() {
        let text = encode(&straight_frame()).unwrap();
        let keys = [
            "\"frame_id\"",
            "\"scene_id\"",
            "\"timestamp_us\"",
            "\"image_path\"",
            "\"history\"",
            "\"ground_truth\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(text.contains("\"history\":[[2.0,0.0],"));
        assert!(text.contains("\"ground_truth\":[[1.0,0.0],[2.0,0.0]"));
    }

    #[test]
    fn missing_history_names_the_field() {
        let mut value: serde_json::Value = serde_json::from_str(&encode(&straight_frame()).unwrap()).unwrap();
        value.as_object_mut().unwrap().remove("history");
        let err = decode::<Frame>(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("history"), "{err}");
    }

    #[test]
    fn failed_result_keeps_absent_fields_absent() {
        let r = FrameResult {
            frame_id: "f9".into(),
            stage_texts: StageTexts {
                scene_description: "road".into(),
                intent: "stop".into(),
                commands: "I cannot help with that.".into(),
            },
            parse_status: ParseStatus::Failed,
            actions: None,
            predicted: None,
            ground_truth: straight_frame().ground_truth,
            usage: [StageUsage { input_tokens: 10, output_tokens: 2 }; 3],
            latency: Latency::from_stages([0.1, 0.2, 0.3]),
            error_class: Some(ErrorClass::NonNumeric),
            error_detail: None,
        };
        let text = encode(&r).unwrap();
        assert!(!text.contains("\"actions\""));
        assert!(!text.contains("\"predicted\""));
        assert!(text.contains("\"error_class\":\"non-numeric\""));
        let back: FrameResult = decode(&text).unwrap();
        assert_eq!(back, r);
        assert!(back.check().is_ok());
    }

    #[test]
    fn jsonl_reports_offending_line() {
        let input = format!("{}\n\n{{\"frame_id\":1}}\n", encode(&straight_frame()).unwrap());
        let err = read_jsonl::<Frame, _>(input.as_bytes()).unwrap_err();
        assert!(matches!(err, CodecError::Decode { line: 3, .. }), "{err}");
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), Just(-0.0)]
    }

    fn arb_action() -> impl Strategy<Value = ActionState> {
        (0.0..40.0f64, -1.0..1.0f64).prop_map(|(v, k)| ActionState::new_unchecked(v, k))
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((finite(), finite()).prop_map(|(x, y)| Point::new(x, y)), 6)
            .prop_map(Trajectory::new)
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (
            "[a-f0-9]{8,32}",
            "scene-[0-9]{4}",
            any::<i64>(),
            "[a-zA-Z0-9_/]{1,40}\\.jpg",
            prop::collection::vec(arb_action(), 6),
            arb_trajectory(),
        )
            .prop_map(|(frame_id, scene_id, timestamp_us, image_path, history, ground_truth)| Frame {
                frame_id,
                scene_id,
                timestamp_us,
                image_path,
                history,
                ground_truth,
            })
    }

    fn arb_result() -> impl Strategy<Value = FrameResult> {
        (
            "[a-f0-9]{8}",
            ".{0,40}",
            ".{0,40}",
            ".{0,60}",
            prop::option::of((prop::collection::vec(arb_action(), 6), arb_trajectory(), any::<bool>())),
            arb_trajectory(),
            prop::array::uniform3((0u64..100_000, 0u64..10_000)),
            prop::array::uniform3(0.0..100.0f64),
        )
            .prop_map(|(id, s1, s2, s3, accepted, gt, usage, lat)| {
                let (status, actions, predicted, class) = match accepted {
                    Some((a, p, true)) => (ParseStatus::Strict, Some(a), Some(p), None),
                    Some((a, p, false)) => {
                        (ParseStatus::Corrected, Some(a), Some(p), Some(ErrorClass::ExtraText))
                    }
                    None => (ParseStatus::Failed, None, None, Some(ErrorClass::WrongCount)),
                };
                FrameResult {
                    frame_id: id,
                    stage_texts: StageTexts {
                        scene_description: s1,
                        intent: s2,
                        commands: s3,
                    },
                    parse_status: status,
                    actions,
                    predicted,
                    ground_truth: gt,
                    usage: usage.map(|(i, o)| StageUsage {
                        input_tokens: i,
                        output_tokens: o,
                    }),
                    latency: Latency::from_stages(lat),
                    error_class: class,
                    error_detail: None,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn frame_roundtrip(frame in arb_frame()) {
            let text = encode(&frame).unwrap();
            prop_assert_eq!(&text, &encode(&frame).unwrap());
            let back: Frame = decode(&text).unwrap();
            prop_assert_eq!(back, frame);
        }

        #[test]
        fn result_roundtrip(result in arb_result()) {
            prop_assert!(result.check().is_ok());
            let text = encode(&result).unwrap();
            prop_assert_eq!(&text, &encode(&result).unwrap());
            let back: FrameResult = decode(&text).unwrap();
            prop_assert_eq!(back, result);
        }
    }
}
