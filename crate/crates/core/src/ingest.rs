//! Builds scenario frames from nuScenes-style metadata tables.
//!
//! Only 2 Hz keyframes are used. A keyframe becomes a frame when it has six
//! keyframes before it and six after it in the same scene, so a scene of `n`
//! keyframes yields `max(0, n - 12)` frames.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{write_jsonl, CodecError, Frame, Point, Trajectory, HORIZON, TICK_SECONDS};
use crate::kinematics::{global_to_ego, history_from_poses, yaw_from_quaternion, EgoPose, KinematicsError};

const FRONT_CAMERA: &str = "CAM_FRONT";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing table {}", .0.display())]
    MissingTable(PathBuf),
    #[error("malformed table {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{table}.{field} references unknown token {token}")]
    DanglingToken {
        table: &'static str,
        field: &'static str,
        token: String,
    },
    #[error("unknown scene {0}")]
    UnknownScene(String),
    #[error("no front-camera ego pose for keyframe {0}")]
    MissingEgoPose(String),
    #[error("bad ego pose {token}: {source}")]
    BadPose {
        token: String,
        #[source]
        source: KinematicsError,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub token: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub token: String,
    pub timestamp: i64,
    pub scene_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDataRecord {
    pub token: String,
    pub sample_token: String,
    pub ego_pose_token: String,
    #[serde(default)]
    pub calibrated_sensor_token: String,
    pub timestamp: i64,
    pub is_key_frame: bool,
    pub filename: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPoseRecord {
    pub token: String,
    pub timestamp: i64,
    /// (w, x, y, z)
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSensorRecord {
    pub token: String,
    pub sensor_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub token: String,
    pub channel: String,
}

/// The loaded, cross-checked metadata tables.
#[derive(Debug, Clone, Default)]
pub struct TableSet {
    /// Directory image filenames are relative to.
    pub dataroot: PathBuf,
    pub scenes: HashMap<String, SceneRecord>,
    pub samples: HashMap<String, SampleRecord>,
    pub sample_data: HashMap<String, SampleDataRecord>,
    pub ego_poses: HashMap<String, EgoPoseRecord>,
    /// Sample token → its front-camera keyframe sample_data token.
    pub front_camera: HashMap<String, String>,
}

impl TableSet {
    pub fn scene(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes
            .get(id)
            .or_else(|| self.scenes.values().find(|s| s.name == id))
    }

    /// Keyframes of a scene in time order.
    pub fn keyframes(&self, scene_token: &str) -> Vec<&SampleRecord> {
        let mut samples: Vec<&SampleRecord> = self
            .samples
            .values()
            .filter(|s| s.scene_token == scene_token)
            .collect();
        samples.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.token.cmp(&b.token)));
        samples
    }
}

fn read_table<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>, IngestError> {
    let path = dir.join(format!("{name}.json"));
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(IngestError::MissingTable(path)),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_str(&text).map_err(|source| IngestError::Json { path, source })
}

fn index<T>(records: Vec<T>, token: impl Fn(&T) -> &str) -> HashMap<String, T> {
    records.into_iter().map(|r| (token(&r).to_string(), r)).collect()
}

/// Locates the table directory: `dataroot` itself, or its single
/// `v1.0-*` version subdirectory.
fn table_dir(dataroot: &Path) -> PathBuf {
    if dataroot.join("scene.json").exists() {
        return dataroot.to_path_buf();
    }
    let mut versions: Vec<PathBuf> = std::fs::read_dir(dataroot)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("v1.0-"))
                && p.join("scene.json").exists()
        })
        .collect();
    versions.sort();
    versions.into_iter().next().unwrap_or_else(|| dataroot.to_path_buf())
}

/// Loads and cross-links the metadata tables under `dataroot`.
///
/// The front camera is identified through `calibrated_sensor` and `sensor`
/// when both tables exist, otherwise by a `CAM_FRONT` path component in the
/// sample_data filename.
pub fn load_tables(dataroot: &Path) -> Result<TableSet, IngestError> {
    let dir = table_dir(dataroot);
    let scenes = index(read_table::<SceneRecord>(&dir, "scene")?, |r| &r.token);
    let samples = index(read_table::<SampleRecord>(&dir, "sample")?, |r| &r.token);
    let sample_data = index(read_table::<SampleDataRecord>(&dir, "sample_data")?, |r| &r.token);
    let ego_poses = index(read_table::<EgoPoseRecord>(&dir, "ego_pose")?, |r| &r.token);

    let channels: Option<HashMap<String, String>> =
        if dir.join("calibrated_sensor.json").exists() && dir.join("sensor.json").exists() {
            let sensors = index(read_table::<SensorRecord>(&dir, "sensor")?, |r| &r.token);
            let calibrated = read_table::<CalibratedSensorRecord>(&dir, "calibrated_sensor")?;
            let mut map = HashMap::new();
            for c in calibrated {
                let sensor = sensors.get(&c.sensor_token).ok_or_else(|| IngestError::DanglingToken {
                    table: "calibrated_sensor",
                    field: "sensor_token",
                    token: c.sensor_token.clone(),
                })?;
                map.insert(c.token, sensor.channel.clone());
            }
            Some(map)
        } else {
            None
        };

    let mut sample_tokens: Vec<&String> = samples.keys().collect();
    sample_tokens.sort();
    for token in sample_tokens {
        let s = &samples[token];
        if !scenes.contains_key(&s.scene_token) {
            return Err(IngestError::DanglingToken {
                table: "sample",
                field: "scene_token",
                token: s.scene_token.clone(),
            });
        }
    }

    let mut front_camera = HashMap::new();
    let mut data_tokens: Vec<&String> = sample_data.keys().collect();
    data_tokens.sort();
    for token in data_tokens {
        let sd = &sample_data[token];
        if !sd.is_key_frame {
            continue;
        }
        let is_front = match &channels {
            Some(map) => map.get(&sd.calibrated_sensor_token).map(String::as_str) == Some(FRONT_CAMERA),
            None => sd.filename.split('/').any(|part| part == FRONT_CAMERA),
        };
        if !is_front {
            continue;
        }
        if !samples.contains_key(&sd.sample_token) {
            return Err(IngestError::DanglingToken {
                table: "sample_data",
                field: "sample_token",
                token: sd.sample_token.clone(),
            });
        }
        if !ego_poses.contains_key(&sd.ego_pose_token) {
            return Err(IngestError::DanglingToken {
                table: "sample_data",
                field: "ego_pose_token",
                token: sd.ego_pose_token.clone(),
            });
        }
        front_camera.insert(sd.sample_token.clone(), sd.token.clone());
    }

    Ok(TableSet {
        dataroot: dataroot.to_path_buf(),
        scenes,
        samples,
        sample_data,
        ego_poses,
        front_camera,
    })
}

fn ego_pose(record: &EgoPoseRecord) -> Result<EgoPose, IngestError> {
    let yaw = yaw_from_quaternion(record.rotation).map_err(|source| IngestError::BadPose {
        token: record.token.clone(),
        source,
    })?;
    Ok(EgoPose::new(
        record.translation[0],
        record.translation[1],
        yaw,
        record.timestamp,
    ))
}

/// Frames for every eligible keyframe of one scene, identified by token or
/// name. Keyframes whose pose spacing is irregular are skipped with a warning.
pub fn build_frames(tables: &TableSet, scene_id: &str) -> Result<Vec<Frame>, IngestError> {
    let scene = tables
        .scene(scene_id)
        .ok_or_else(|| IngestError::UnknownScene(scene_id.to_string()))?;
    let keyframes = tables.keyframes(&scene.token);

    let mut poses = Vec::with_capacity(keyframes.len());
    let mut images = Vec::with_capacity(keyframes.len());
    for sample in &keyframes {
        let sd = tables
            .front_camera
            .get(&sample.token)
            .and_then(|t| tables.sample_data.get(t))
            .ok_or_else(|| IngestError::MissingEgoPose(sample.token.clone()))?;
        let record = tables
            .ego_poses
            .get(&sd.ego_pose_token)
            .ok_or_else(|| IngestError::MissingEgoPose(sample.token.clone()))?;
        poses.push(ego_pose(record)?);
        images.push(sd.filename.clone());
    }

    let n = keyframes.len();
    let mut frames = Vec::with_capacity(n.saturating_sub(2 * HORIZON));
    for t in HORIZON..n.saturating_sub(HORIZON) {
        let history = match history_from_poses(&poses[t - HORIZON..=t], TICK_SECONDS) {
            Ok(h) => h,
            Err(e) => {
                tracing::warn!(scene = %scene.name, sample = %keyframes[t].token, "skipping keyframe: {e}");
                continue;
            }
        };
        let future: Vec<Point> = poses[t + 1..=t + HORIZON].iter().map(|p| p.position).collect();
        let ground_truth = global_to_ego(&poses[t], &future).map_err(|source| IngestError::BadPose {
            token: keyframes[t].token.clone(),
            source,
        })?;
        frames.push(Frame {
            frame_id: keyframes[t].token.clone(),
            scene_id: scene.name.clone(),
            timestamp_us: keyframes[t].timestamp,
            image_path: images[t].clone(),
            history,
            ground_truth: Trajectory::new(ground_truth),
        });
    }
    Ok(frames)
}

/// Sorts frames by (scene, timestamp, id) and writes them as JSONL.
pub fn write_scenarios(frames: &[Frame], out: &Path) -> Result<usize, IngestError> {
    let mut sorted: Vec<&Frame> = frames.iter().collect();
    sorted.sort_by(|a, b| {
        a.scene_id
            .cmp(&b.scene_id)
            .then(a.timestamp_us.cmp(&b.timestamp_us))
            .then_with(|| a.frame_id.cmp(&b.frame_id))
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let writer = BufWriter::new(File::create(out)?);
    write_jsonl(writer, &sorted)?;
    Ok(sorted.len())
}

/// Reads a scene list: one scene name or token per line, `#` starts a comment.
pub fn read_scene_list(path: &Path) -> Result<Vec<String>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Parameters of a generated scene for fixtures and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub name: String,
    pub keyframes: usize,
    /// m/s
    pub speed: f64,
    /// rad/s
    pub yaw_rate: f64,
    pub start_yaw: f64,
}

impl SyntheticScene {
    pub fn straight(name: &str, keyframes: usize) -> Self {
        Self {
            name: name.to_string(),
            keyframes,
            speed: 2.0,
            yaw_rate: 0.0,
            start_yaw: 0.0,
        }
    }
}

fn quaternion_from_yaw(yaw: f64) -> [f64; 4] {
    [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()]
}

/// Writes a minimal nuScenes-style dataroot: the six metadata tables plus a
/// small placeholder JPEG per keyframe. Poses follow exact unicycle motion.
pub fn write_synthetic_dataroot(root: &Path, scenes: &[SyntheticScene]) -> Result<(), IngestError> {
    let tables = root.join("v1.0-synthetic");
    let images = root.join("samples").join(FRONT_CAMERA);
    std::fs::create_dir_all(&tables)?;
    std::fs::create_dir_all(&images)?;

    let sensors = vec![
        SensorRecord { token: "sensor-cam-front".into(), channel: FRONT_CAMERA.into() },
        SensorRecord { token: "sensor-cam-back".into(), channel: "CAM_BACK".into() },
    ];
    let calibrated = vec![
        CalibratedSensorRecord { token: "calib-front".into(), sensor_token: "sensor-cam-front".into() },
        CalibratedSensorRecord { token: "calib-back".into(), sensor_token: "sensor-cam-back".into() },
    ];
    let mut scene_rows = Vec::new();
    let mut sample_rows = Vec::new();
    let mut data_rows = Vec::new();
    let mut pose_rows = Vec::new();
    let tick_us = (TICK_SECONDS * 1e6) as i64;

    for (si, scene) in scenes.iter().enumerate() {
        let scene_token = format!("scene{si:03}");
        scene_rows.push(SceneRecord {
            token: scene_token.clone(),
            name: scene.name.clone(),
            description: "synthetic".into(),
        });
        let (mut x, mut y, mut yaw) = (100.0 * si as f64, -50.0, scene.start_yaw);
        for k in 0..scene.keyframes {
            let ts = 1_500_000_000_000_000 + 1_000_000_000 * si as i64 + tick_us * k as i64;
            let sample = format!("s{si:03}k{k:03}");
            sample_rows.push(SampleRecord {
                token: sample.clone(),
                timestamp: ts,
                scene_token: scene_token.clone(),
            });
            let filename = format!("samples/{FRONT_CAMERA}/{sample}.jpg");
            std::fs::write(root.join(&filename), SYNTHETIC_JPEG)?;
            for (cam, calib) in [("front", "calib-front"), ("back", "calib-back")] {
                let pose = format!("ep-{sample}-{cam}");
                data_rows.push(SampleDataRecord {
                    token: format!("sd-{sample}-{cam}"),
                    sample_token: sample.clone(),
                    ego_pose_token: pose.clone(),
                    calibrated_sensor_token: calib.into(),
                    timestamp: ts,
                    is_key_frame: true,
                    filename: if cam == "front" {
                        filename.clone()
                    } else {
                        format!("samples/CAM_BACK/{sample}.jpg")
                    },
                });
                pose_rows.push(EgoPoseRecord {
                    token: pose,
                    timestamp: ts,
                    rotation: quaternion_from_yaw(yaw),
                    translation: [x, y, 0.0],
                });
            }
            // Same recurrence as the integrator, with curvature = yaw_rate / speed.
            x += scene.speed * yaw.cos() * TICK_SECONDS;
            y += scene.speed * yaw.sin() * TICK_SECONDS;
            yaw += scene.yaw_rate * TICK_SECONDS;
        }
    }

    let write = |name: &str, value: serde_json::Value| -> Result<(), IngestError> {
        std::fs::write(tables.join(format!("{name}.json")), serde_json::to_vec_pretty(&value).expect("json"))?;
        Ok(())
    };
    write("scene", serde_json::to_value(&scene_rows).expect("json"))?;
    write("sample", serde_json::to_value(&sample_rows).expect("json"))?;
    write("sample_data", serde_json::to_value(&data_rows).expect("json"))?;
    write("ego_pose", serde_json::to_value(&pose_rows).expect("json"))?;
    write("sensor", serde_json::to_value(&sensors).expect("json"))?;
    write("calibrated_sensor", serde_json::to_value(&calibrated).expect("json"))?;
    Ok(())
}

/// Stand-in image payload, framed by JPEG start and end markers.
const SYNTHETIC_JPEG: &[u8] = &[
    0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x10, 0x4A, 0x46, 0x49, 0x46, 0x00, 0x01, 0x01, 0x00, 0x00, 0x01,
    0x00, 0x01, 0x00, 0x00, 0xFF, 0xDB, 0x00, 0x43, 0x00, 0x08, 0x06, 0x06, 0x07, 0x06, 0x05, 0x08,
    0x07, 0x07, 0x07, 0x09, 0x09, 0x08, 0x0A, 0x0C, 0x14, 0x0D, 0x0C, 0x0B, 0x0B, 0x0C, 0x19, 0x12,
    0x13, 0x0F, 0x14, 0x1D, 0x1A, 0x1F, 0x1E, 0x1D, 0x1A, 0x1C, 0x1C, 0x20, 0x24, 0x2E, 0x27, 0x20,
    0x22, 0x2C, 0x23, 0x1C, 0x1C, 0x28, 0x37, 0x29, 0x2C, 0x30, 0x31, 0x34, 0x34, 0x34, 0x1F, 0x27,
    0x39, 0x3D, 0x38, 0x32, 0x3C, 0x2E, 0x33, 0x34, 0x32, 0xFF, 0xC0, 0x00, 0x0B, 0x08, 0x00, 0x01,
    0x00, 0x01, 0x01, 0x01, 0x11, 0x00, 0xFF, 0xC4, 0x00, 0x14, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x09, 0xFF, 0xC4,
    0x00, 0x14, 0x10, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x00, 0xFF, 0xDA, 0x00, 0x08, 0x01, 0x01, 0x00, 0x00, 0x3F, 0x00, 0x2A, 0x9F,
    0xFF, 0xD9,
];
