//! End-effector pose commands and the simulated manipulator.
//!
//! Desired poses are built by adding a rotated displacement to the
//! translation of an initial pose; the rotation block is never changed. The
//! same rule serves motion compensation (displacement from the correspondence
//! models, rotated from the sensor frame into the base frame) and insertion
//! (axial displacement, rotated by the end-effector orientation).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Estimate, ModelBank};
use crate::phantom::{AxisMap, Phase};
use crate::surrogate::SurrogateSample;

const ORTHO_TOL: f64 = 1e-9;

/// Coordinate frames of the setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Robot base.
    Base,
    EndEffector,
    Target,
    /// Electromagnetic tracker field generator.
    Em,
    /// Haptic handle origin.
    Origin,
}

/// Rigid transform taking coordinates in `from_frame` to `to_frame`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub from_frame: Frame,
    pub to_frame: Frame,
}

pub fn is_rotation(r: &Matrix3<f64>) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Matrix3::identity()).abs().max() <= ORTHO_TOL
        && (r.determinant() - 1.0).abs() <= ORTHO_TOL
}

impl Pose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        from_frame: Frame,
        to_frame: Frame,
    ) -> Result<Self> {
        if from_frame == to_frame {
            return Err(Error::arg("a pose must relate two different frames"));
        }
        if !is_rotation(&rotation) {
            return Err(Error::arg("pose rotation is not a proper rotation matrix"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("pose translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
            from_frame,
            to_frame,
        })
    }

    /// End-effector pose in the base frame.
    pub fn end_effector(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, translation, Frame::EndEffector, Frame::Base)
    }

    /// Needle axis (end-effector x) in the parent frame.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }
}

/// A rotation whose first column is `x_axis` (normalized).
pub fn rotation_with_x_axis(x_axis: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n = x_axis.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::arg("needle axis must be a non-zero finite vector"));
    }
    let x = x_axis / n;
    let helper = if x.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let y = helper.cross(&x).normalize();
    let z = x.cross(&y);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Rotation from the sensor frame (y carries AP, z carries SI) to the base
/// frame, given where the anatomical axes point in the world.
pub fn em_to_base_rotation(axes: &AxisMap) -> Matrix3<f64> {
    let y = axes.ap.unit();
    let z = axes.si.unit();
    Matrix3::from_columns(&[y.cross(&z), y, z])
}

/// Add `r · d` to the translation of `initial`; the rotation block is kept.
pub fn compose_desired_pose(initial: &Pose, r: &Matrix3<f64>, d: &Vector3<f64>) -> Result<Pose> {
    if !is_rotation(r) {
        return Err(Error::arg("displacement rotation is not orthonormal"));
    }
    Ok(Pose {
        translation: initial.translation + r * d,
        ..*initial
    })
}

/// Desired pose from the current surrogate sample, plus the estimate that
/// produced it.
pub fn compensation_step(
    bank: Option<&ModelBank>,
    sample: &SurrogateSample,
    phase: Phase,
    r_em_to_b: &Matrix3<f64>,
    initial: &Pose,
) -> Result<(Pose, Estimate)> {
    let bank = bank.ok_or_else(|| Error::InvalidState("compensation requested before training".into()))?;
    let est = bank.estimate(phase, sample);
    let d = Vector3::new(0.0, est.ap, est.si);
    Ok((compose_desired_pose(initial, r_em_to_b, &d)?, est))
}

/// Advance the needle by `d_x` along its own axis.
pub fn insertion_step(initial: &Pose, d_x: f64) -> Pose {
    Pose {
        translation: initial.translation + initial.rotation * Vector3::new(d_x, 0.0, 0.0),
        ..*initial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub max_speed_mm_per_s: f64,
    pub tracking_bandwidth_per_s: f64,
    pub control_period_s: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        RobotConfig {
            max_speed_mm_per_s: 100.0,
            tracking_bandwidth_per_s: 8.0,
            control_period_s: 0.01,
        }
    }
}

impl RobotConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_speed_mm_per_s", self.max_speed_mm_per_s),
            ("tracking_bandwidth_per_s", self.tracking_bandwidth_per_s),
            ("control_period_s", self.control_period_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::scenario(format!("robot.{name}"), "must be > 0"));
            }
        }
        Ok(())
    }
}

/// One control period of the manipulator: first-order lag toward `desired`,
/// speed-limited, rotation held.
pub fn track_pose(current: &Pose, desired: &Pose, cfg: &RobotConfig, dt: f64) -> Pose {
    let error = desired.translation - current.translation;
    let mut step = error * (1.0 - (-cfg.tracking_bandwidth_per_s * dt).exp());
    let max_step = cfg.max_speed_mm_per_s * dt;
    let len = step.norm();
    if len > max_step {
        step *= max_step / len;
    }
    Pose {
        translation: current.translation + step,
        ..*current
    }
}

/// Per-axis absolute distance between needle tip and target center.
pub fn steering_error(needle_tip: &Vector3<f64>, target_center: &Vector3<f64>) -> Vector3<f64> {
    (needle_tip - target_center).abs()
}
