//! Haptic feedback laws and a one-degree-of-freedom handle model.
//!
//! Forces act along the handle's axial direction. All force values returned
//! here are resistances: positive means the handle is pushed back, away from
//! the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HapticConfig {
    /// Viscous proximity gain `b`.
    pub damping_b_n_s_per_mm2: f64,
    /// Distance `o` at which proximity feedback starts.
    pub offset_o_mm: f64,
    pub wall_kp_n_per_mm: f64,
    pub wall_kd_n_s_per_mm: f64,
    pub force_cap_n: f64,
    pub idle_hold_kp_n_per_mm: f64,
    /// Needle millimetres per handle millimetre.
    pub motion_scale: f64,
}

impl Default for HapticConfig {
    fn default() -> Self {
        HapticConfig {
            damping_b_n_s_per_mm2: 0.01,
            offset_o_mm: 40.0,
            wall_kp_n_per_mm: 2.0,
            wall_kd_n_s_per_mm: 0.05,
            force_cap_n: 5.0,
            idle_hold_kp_n_per_mm: 3.0,
            motion_scale: 1.0,
        }
    }
}

impl HapticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("damping_b_n_s_per_mm2", self.damping_b_n_s_per_mm2),
            ("wall_kp_n_per_mm", self.wall_kp_n_per_mm),
            ("wall_kd_n_s_per_mm", self.wall_kd_n_s_per_mm),
            ("idle_hold_kp_n_per_mm", self.idle_hold_kp_n_per_mm),
            ("motion_scale", self.motion_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::scenario(format!("haptics.{name}"), "must be finite and >= 0"));
            }
        }
        if !(self.force_cap_n > 0.0 && self.force_cap_n.is_finite()) {
            return Err(Error::scenario("haptics.force_cap_n", "must be > 0"));
        }
        if !(self.offset_o_mm > 0.0 && self.offset_o_mm.is_finite()) {
            return Err(Error::scenario("haptics.offset_o_mm", "must be > 0"));
        }
        Ok(())
    }

    fn cap(&self, f: f64) -> f64 {
        f.clamp(-self.force_cap_n, self.force_cap_n)
    }
}

/// Mechanical properties of the handle together with the hand holding it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandleDynamics {
    pub mass_kg: f64,
    pub damping_n_s_per_mm: f64,
}

impl Default for HandleDynamics {
    fn default() -> Self {
        HandleDynamics {
            mass_kg: 1.0,
            damping_n_s_per_mm: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleState {
    /// Displacement along the handle axis from its origin.
    pub axial_position_mm: f64,
    pub axial_velocity_mm_per_s: f64,
    pub engaged: bool,
    /// Where the idle controller keeps the handle.
    pub held_position_mm: f64,
}

impl HandleState {
    pub fn at_rest(position: f64) -> Self {
        HandleState {
            axial_position_mm: position,
            axial_velocity_mm_per_s: 0.0,
            engaged: false,
            held_position_mm: position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Proximity,
    Wall,
    Idle,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Proximity => "proximity",
            Regime::Wall => "wall",
            Regime::Idle => "idle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub regime: Regime,
    pub force_n: f64,
}

/// `b · v · (o − d)`, capped.
pub fn proximity_force(cfg: &HapticConfig, v: f64, d: f64) -> f64 {
    cfg.cap(cfg.damping_b_n_s_per_mm2 * v * (cfg.offset_o_mm - d))
}

/// `kp · x − kd · v`, limited to `[0, cap]` so the wall never pulls.
///
/// `x` is the penetration and `v` the velocity along the push-back direction,
/// so the derivative term damps motion both into and out of the wall.
pub fn wall_force(cfg: &HapticConfig, x: f64, v: f64) -> f64 {
    (cfg.wall_kp_n_per_mm * x - cfg.wall_kd_n_s_per_mm * v).clamp(0.0, cfg.force_cap_n)
}

/// Force rendered on the handle for the current state.
///
/// Proximity feedback only resists motion toward the target and only inside
/// the offset distance; retraction is force-free.
pub fn feedback_force(cfg: &HapticConfig, handle: &HandleState, distance_to_target: f64) -> Feedback {
    if !handle.engaged {
        let f = cfg.idle_hold_kp_n_per_mm * (handle.axial_position_mm - handle.held_position_mm);
        return Feedback {
            regime: Regime::Idle,
            force_n: cfg.cap(f),
        };
    }
    // needle speed, in the same units as the distance
    let v = map_handle_to_needle(handle.axial_velocity_mm_per_s, cfg.motion_scale);
    if distance_to_target > 0.0 {
        Feedback {
            regime: Regime::Proximity,
            force_n: proximity_force(cfg, v.max(0.0), distance_to_target.min(cfg.offset_o_mm)),
        }
    } else {
        Feedback {
            regime: Regime::Wall,
            force_n: wall_force(cfg, -distance_to_target, -v),
        }
    }
}

/// Axial needle displacement for a handle displacement.
pub fn map_handle_to_needle(handle_delta: f64, motion_scale: f64) -> f64 {
    motion_scale * handle_delta
}

/// What the operator's hand does to the handle during one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandInput {
    /// Apply a force along the insertion direction.
    Push(f64),
    /// Keep the handle exactly still.
    Grip,
    /// Move the handle to a position (kinematic input from a pointer device).
    Position(f64),
    /// Let go; the idle controller takes over.
    Release,
}

/// Integrate the handle over one tick under the hand input and the rendered
/// resistance (semi-implicit Euler).
pub fn step_handle(
    state: &HandleState,
    input: HandInput,
    resistance_n: f64,
    dynamics: &HandleDynamics,
    dt: f64,
) -> HandleState {
    let mut next = *state;
    match input {
        HandInput::Grip => {
            next.engaged = true;
            next.axial_velocity_mm_per_s = 0.0;
            next.held_position_mm = next.axial_position_mm;
        }
        HandInput::Position(x) => {
            next.engaged = true;
            next.axial_velocity_mm_per_s = (x - state.axial_position_mm) / dt;
            next.axial_position_mm = x;
            next.held_position_mm = x;
        }
        HandInput::Push(_) | HandInput::Release => {
            let user = match input {
                HandInput::Push(f) => f,
                _ => 0.0,
            };
            let engaged = matches!(input, HandInput::Push(_));
            let net = user - resistance_n - dynamics.damping_n_s_per_mm * state.axial_velocity_mm_per_s;
            // N / kg = m/s², times 1000 for mm/s²
            let accel = 1000.0 * net / dynamics.mass_kg;
            next.axial_velocity_mm_per_s += accel * dt;
            next.axial_position_mm += next.axial_velocity_mm_per_s * dt;
            next.engaged = engaged;
            if engaged {
                next.held_position_mm = next.axial_position_mm;
            }
        }
    }
    next
}
