//! Unicycle integration of (speed, curvature) commands, action recovery from
//! ego poses, and global/ego frame transforms.

use std::f64::consts::PI;

use thiserror::Error;

use crate::domain::{ActionState, Point, Trajectory, HORIZON, TICK_SECONDS};

/// Speeds below this are treated as stationary when recovering curvature.
pub const STATIONARY_SPEED: f64 = 0.1;

/// Allowed relative deviation of pose spacing from the nominal tick.
pub const SPACING_TOLERANCE: f64 = 0.2;

const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} actions, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("action {index} is not finite: ({speed}, {curvature})")]
    NonFiniteAction {
        index: usize,
        speed: f64,
        curvature: f64,
    },
    #[error("quaternion norm {0} is not within {QUATERNION_NORM_TOLERANCE} of 1")]
    NonUnitQuaternion(f64),
    #[error("invalid integrator config: {0}")]
    InvalidConfig(&'static str),
    #[error("pose timestamps are not strictly increasing at index {0}")]
    UnorderedTimestamps(usize),
    #[error("pose spacing {actual_s:.3}s at index {index} deviates more than 20% from {dt_s}s")]
    SpacingViolation {
        index: usize,
        actual_s: f64,
        dt_s: f64,
    },
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    /// Seconds per step.
    pub dt: f64,
    pub horizon_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: TICK_SECONDS,
            horizon_steps: HORIZON,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KinematicsError::InvalidConfig("dt must be positive"));
        }
        if self.horizon_steps == 0 {
            return Err(KinematicsError::InvalidConfig("horizon_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Planar vehicle state used by the integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl UnicycleState {
    pub const ORIGIN: Self = Self {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
    };

    /// One explicit Euler step. Position advances along the current heading
    /// before the heading is updated.
    pub fn step(&self, action: &ActionState, dt: f64) -> Self {
        let v = action.speed;
        Self {
            x: self.x + v * self.heading.cos() * dt,
            y: self.y + v * self.heading.sin() * dt,
            heading: self.heading + action.curvature * v * dt,
        }
    }
}

/// Integrates commands from the ego origin and returns every state after the
/// origin, one per command.
pub fn integrate_states(
    actions: &[ActionState],
    config: &IntegratorConfig,
) -> Result<Vec<UnicycleState>, KinematicsError> {
    config.validate()?;
    if actions.len() != config.horizon_steps {
        return Err(KinematicsError::LengthMismatch {
            expected: config.horizon_steps,
            actual: actions.len(),
        });
    }
    if let Some((index, a)) = actions.iter().enumerate().find(|(_, a)| !a.is_finite()) {
        return Err(KinematicsError::NonFiniteAction {
            index,
            speed: a.speed,
            curvature: a.curvature,
        });
    }
    let mut state = UnicycleState::ORIGIN;
    Ok(actions
        .iter()
        .map(|a| {
            state = state.step(a, config.dt);
            state
        })
        .collect())
}

/// Integrates commands into an ego-frame trajectory, origin excluded.
pub fn integrate(
    actions: &[ActionState],
    config: &IntegratorConfig,
) -> Result<Trajectory, KinematicsError> {
    let states = integrate_states(actions, config)?;
    Ok(Trajectory::new(
        states.iter().map(|s| Point::new(s.x, s.y)).collect(),
    ))
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Heading about +z of a unit quaternion given as (w, x, y, z).
pub fn yaw_from_quaternion(q: [f64; 4]) -> Result<f64, KinematicsError> {
    let [w, x, y, z] = q;
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(KinematicsError::NonUnitQuaternion(norm));
    }
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Ok(normalize_angle(yaw))
}

/// A vehicle pose in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub position: Point,
    /// Radians from global +x, in (-π, π].
    pub yaw: f64,
    pub timestamp_us: i64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64, timestamp_us: i64) -> Self {
        Self {
            position: Point::new(x, y),
            yaw: normalize_angle(yaw),
            timestamp_us,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.yaw.is_finite()
    }
}

/// Expresses global points in the reference pose's frame (+x forward).
pub fn global_to_ego(
    reference: &EgoPose,
    global_points: &[Point],
) -> Result<Vec<Point>, KinematicsError> {
    if !reference.is_finite() {
        return Err(KinematicsError::NonFinite);
    }
    let (sin, cos) = reference.yaw.sin_cos();
    global_points
        .iter()
        .map(|p| {
            let dx = p.x - reference.position.x;
            let dy = p.y - reference.position.y;
            let q = Point::new(cos * dx + sin * dy, -sin * dx + cos * dy);
            if q.is_finite() {
                Ok(q)
            } else {
                Err(KinematicsError::NonFinite)
            }
        })
        .collect()
}

/// Inverse of [`global_to_ego`].
pub fn ego_to_global(reference: &EgoPose, ego_points: &[Point]) -> Vec<Point> {
    let (sin, cos) = reference.yaw.sin_cos();
    ego_points
        .iter()
        .map(|p| {
            Point::new(
                reference.position.x + cos * p.x - sin * p.y,
                reference.position.y + sin * p.x + cos * p.y,
            )
        })
        .collect()
}

/// Recovers the (speed, curvature) that moved the vehicle between each pair
/// of consecutive poses. `poses` must be time-ordered; the output is ordered
/// oldest first and has one fewer entry than `poses`.
pub fn history_from_poses(poses: &[EgoPose], dt: f64) -> Result<Vec<ActionState>, KinematicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(KinematicsError::InvalidConfig("dt must be positive"));
    }
    if poses.len() != HORIZON + 1 {
        return Err(KinematicsError::LengthMismatch {
            expected: HORIZON + 1,
            actual: poses.len(),
        });
    }
    if poses.iter().any(|p| !p.is_finite()) {
        return Err(KinematicsError::NonFinite);
    }
    poses
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (a, b) = (&pair[0], &pair[1]);
            if b.timestamp_us <= a.timestamp_us {
                return Err(KinematicsError::UnorderedTimestamps(i + 1));
            }
            let spacing = (b.timestamp_us - a.timestamp_us) as f64 * 1e-6;
            if (spacing - dt).abs() > SPACING_TOLERANCE * dt {
                return Err(KinematicsError::SpacingViolation {
                    index: i + 1,
                    actual_s: spacing,
                    dt_s: dt,
                });
            }
            let speed = a.position.distance(&b.position) / dt;
            let curvature = if speed < STATIONARY_SPEED {
                0.0
            } else {
                normalize_angle(b.yaw - a.yaw) / (speed * dt)
            };
            Ok(ActionState::new_unchecked(speed, curvature))
        })
        .collect()
}
