//! Scenario configuration.
//!
//! A scenario is one JSON document. Every field is required and carries its
//! unit in the name; malformed documents are rejected with the path of the
//! offending field.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haptics::{HandleDynamics, HapticConfig};
use crate::model::{ModelOptions, MAX_ORDER};
use crate::phantom::{AxisMap, BreathingProfile, DriftConfig, RespiratoryTimeline};
use crate::steering::RobotConfig;
use crate::surrogate::{SensorConfig, SyncConfig};

use super::operator::{OperatorParams, OperatorProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub regular_s: f64,
    pub hold_s: f64,
    /// Regular breathing between holds.
    pub gap_s: f64,
    pub ground_truth_rate_hz: f64,
    /// Offset of the sensor clock relative to the imaging clock.
    pub em_clock_offset_s: f64,
    /// Samples this close to a phase change are left out of fitting.
    pub transition_guard_s: f64,
    pub sync: SyncConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            regular_s: 12.0,
            hold_s: 5.0,
            gap_s: 1.0,
            ground_truth_rate_hz: 15.0,
            em_clock_offset_s: 0.35,
            transition_guard_s: 0.15,
            sync: SyncConfig::default(),
        }
    }
}

/// One teleoperated insertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionPlan {
    pub target_rest_position_mm: Vector3<f64>,
    /// Breath-hold (1 to 3) during which the needle is inserted.
    pub hold: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub breathing: BreathingProfile,
    pub hold_fractions: [f64; 3],
    pub training: TrainingConfig,
    pub sensor: SensorConfig,
    pub model: ModelOptions,
    pub robot: RobotConfig,
    pub haptics: HapticConfig,
    pub handle: HandleDynamics,
    pub axes: AxisMap,
    /// World direction in which the needle advances.
    pub needle_axis: Vector3<f64>,
    pub target_diameter_mm: f64,
    /// Skin insertion point to target center, along the needle.
    pub target_depth_mm: f64,
    /// Residual of the manual registration, in the needle frame (x along the
    /// needle).
    pub registration_error_mm: Vector3<f64>,
    pub retraction_distance_mm: f64,
    pub drift: DriftConfig,
    pub compensation_s: f64,
    /// Regular breathing ignored at the start of compensation while the
    /// robot converges.
    pub steering_settle_s: f64,
    /// A scripted insertion still running after this is validated where it
    /// stands; a live one aborts the session.
    pub insertion_timeout_s: f64,
    pub haptic_rate_hz: f64,
    pub insertions: Vec<InsertionPlan>,
    pub operator: OperatorProfile,
    pub operator_params: OperatorParams,
}

impl Default for Scenario {
    fn default() -> Self {
        let first = Vector3::new(0.0, 0.0, 0.0);
        let moved = Vector3::new(6.0, 0.0, -4.0);
        let insertions = [(first, 1), (first, 2), (first, 3), (moved, 1), (moved, 2)]
            .into_iter()
            .map(|(p, hold)| InsertionPlan {
                target_rest_position_mm: p,
                hold,
            })
            .collect();
        Scenario {
            seed: 1,
            breathing: BreathingProfile::default(),
            hold_fractions: [0.0, 0.5, 0.9],
            training: TrainingConfig::default(),
            sensor: SensorConfig::default(),
            model: ModelOptions::default(),
            robot: RobotConfig::default(),
            haptics: HapticConfig::default(),
            handle: HandleDynamics::default(),
            axes: AxisMap::default(),
            needle_axis: Vector3::new(0.0, 1.0, 0.0),
            target_diameter_mm: 3.0,
            target_depth_mm: 30.0,
            registration_error_mm: Vector3::new(0.5, 0.5, 0.5),
            retraction_distance_mm: 40.0,
            drift: DriftConfig::default(),
            compensation_s: 20.0,
            steering_settle_s: 2.0,
            insertion_timeout_s: 30.0,
            haptic_rate_hz: 1000.0,
            insertions,
            operator: OperatorProfile::Ideal,
            operator_params: OperatorParams::default(),
        }
    }
}

impl Scenario {
    /// Every error source switched off: noiseless unit sensor, exact
    /// registration and no drift.
    pub fn noiseless() -> Self {
        Scenario {
            sensor: SensorConfig::ideal(),
            registration_error_mm: Vector3::zeros(),
            drift: DriftConfig {
                enabled: false,
                ..DriftConfig::default()
            },
            ..Scenario::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::scenario(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Control ticks per haptic tick count; the control period must be a whole
    /// number of haptic ticks.
    pub fn ticks_per_control(&self) -> usize {
        (self.robot.control_period_s * self.haptic_rate_hz).round() as usize
    }

    pub fn training_timeline(&self) -> Result<RespiratoryTimeline> {
        RespiratoryTimeline::training(
            self.training.regular_s,
            self.training.hold_s,
            self.training.gap_s,
            self.hold_fractions,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.breathing.validate()?;
        self.sensor.validate()?;
        self.robot.validate()?;
        self.haptics.validate()?;
        self.axes.validate()?;
        self.training_timeline()
            .map_err(|e| Error::scenario("training", e.to_string()))?;

        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::scenario(path, "must be > 0"))
            }
        };
        let non_negative = |path: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::scenario(path, "must be >= 0"))
            }
        };
        positive("training.ground_truth_rate_hz", self.training.ground_truth_rate_hz)?;
        non_negative("training.transition_guard_s", self.training.transition_guard_s)?;
        if !self.training.em_clock_offset_s.is_finite()
            || self.training.em_clock_offset_s.abs() > self.training.sync.search_window_s
        {
            return Err(Error::scenario(
                "training.em_clock_offset_s",
                "must lie inside the synchronization search window",
            ));
        }
        positive("training.sync.resolution_s", self.training.sync.resolution_s)?;
        positive("training.sync.search_window_s", self.training.sync.search_window_s)?;
        if self.model.order > MAX_ORDER {
            return Err(Error::scenario("model.order", format!("must be <= {MAX_ORDER}")));
        }
        non_negative("model.hold_variance_floor_mm2", self.model.hold_variance_floor_mm2)?;
        positive("handle.mass_kg", self.handle.mass_kg)?;
        non_negative("handle.damping_n_s_per_mm", self.handle.damping_n_s_per_mm)?;
        // the peak proximity damping is rendered one tick late; explicit
        // integration of it only converges below one
        let c = self.haptics.damping_b_n_s_per_mm2 * self.haptics.offset_o_mm * self.haptics.motion_scale;
        if 1000.0 * c / (self.handle.mass_kg * self.haptic_rate_hz) >= 1.0 {
            return Err(Error::scenario(
                "handle.mass_kg",
                "too light for the proximity damping at this haptic rate",
            ));
        }
        if !(self.needle_axis.norm() > 0.0) || !self.needle_axis.iter().all(|v| v.is_finite()) {
            return Err(Error::scenario("needle_axis", "must be a non-zero finite vector"));
        }
        positive("target_diameter_mm", self.target_diameter_mm)?;
        positive("target_depth_mm", self.target_depth_mm)?;
        if !self.registration_error_mm.iter().all(|v| v.is_finite()) {
            return Err(Error::scenario("registration_error_mm", "must be finite"));
        }
        positive("retraction_distance_mm", self.retraction_distance_mm)?;
        non_negative("drift.rate_mm_per_s", self.drift.rate_mm_per_s)?;
        positive("compensation_s", self.compensation_s)?;
        non_negative("steering_settle_s", self.steering_settle_s)?;
        if self.steering_settle_s >= self.compensation_s {
            return Err(Error::scenario("steering_settle_s", "must be shorter than compensation_s"));
        }
        positive("insertion_timeout_s", self.insertion_timeout_s)?;
        positive("haptic_rate_hz", self.haptic_rate_hz)?;
        let ratio = self.robot.control_period_s * self.haptic_rate_hz;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::scenario(
                "robot.control_period_s",
                "must be a whole number of haptic ticks",
            ));
        }
        if self.insertions.is_empty() {
            return Err(Error::scenario("insertions", "at least one insertion is required"));
        }
        for (i, ins) in self.insertions.iter().enumerate() {
            if !(1..=3).contains(&ins.hold) {
                return Err(Error::scenario(format!("insertions[{i}].hold"), "must be 1, 2 or 3"));
            }
            if !ins.target_rest_position_mm.iter().all(|v| v.is_finite()) {
                return Err(Error::scenario(
                    format!("insertions[{i}].target_rest_position_mm"),
                    "must be finite",
                ));
            }
        }
        self.operator_params.validate()?;
        Ok(())
    }
}
