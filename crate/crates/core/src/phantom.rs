//! Ground-truth motion of the liver phantom.
//!
//! The phantom translates in two degrees of freedom (superior-inferior and
//! anterior-posterior) following a shaped sinusoid, can freeze at one of three
//! breath-hold positions, and may drift laterally while the needle is in the
//! tissue.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Tolerance when deciding whether a time lies inside the timeline.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreathingProfile {
    pub amplitude_si_mm: f64,
    pub amplitude_ap_mm: f64,
    pub period_s: f64,
    /// Exponent `k` of the `|sin|^k` waveform, `k >= 1`.
    pub waveform_exponent: f64,
    pub baseline_offset_si_mm: f64,
    pub baseline_offset_ap_mm: f64,
}

impl Default for BreathingProfile {
    fn default() -> Self {
        BreathingProfile {
            amplitude_si_mm: 12.0,
            amplitude_ap_mm: 5.0,
            period_s: 4.0,
            waveform_exponent: 2.0,
            baseline_offset_si_mm: 0.0,
            baseline_offset_ap_mm: 0.0,
        }
    }
}

impl BreathingProfile {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.amplitude_si_mm,
            self.amplitude_ap_mm,
            self.period_s,
            self.waveform_exponent,
            self.baseline_offset_si_mm,
            self.baseline_offset_ap_mm,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::scenario("breathing", "all values must be finite"));
        }
        if self.amplitude_si_mm < 0.0 {
            return Err(Error::scenario("breathing.amplitude_si_mm", "must be >= 0"));
        }
        if self.amplitude_ap_mm < 0.0 {
            return Err(Error::scenario("breathing.amplitude_ap_mm", "must be >= 0"));
        }
        if self.period_s <= 0.0 {
            return Err(Error::scenario("breathing.period_s", "must be > 0"));
        }
        if self.waveform_exponent < 1.0 {
            return Err(Error::scenario("breathing.waveform_exponent", "must be >= 1"));
        }
        Ok(())
    }

    /// Normalized waveform value in `[0, 1]` at a phase fraction of the cycle.
    pub fn shape(&self, phase_fraction: f64) -> f64 {
        (std::f64::consts::PI * phase_fraction)
            .sin()
            .abs()
            .powf(self.waveform_exponent)
    }

    fn displacement(&self, phase_fraction: f64) -> (f64, f64) {
        let s = self.shape(phase_fraction);
        (
            self.baseline_offset_si_mm + self.amplitude_si_mm * s,
            self.baseline_offset_ap_mm + self.amplitude_ap_mm * s,
        )
    }
}

/// Breathing phase of the phantom. Breath-holds are numbered 1 to 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Regular,
    BreathHold(u8),
}

impl Phase {
    pub fn is_hold(self) -> bool {
        matches!(self, Phase::BreathHold(_))
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Regular => write!(f, "regular"),
            Phase::BreathHold(i) => write!(f, "hold{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub phase: Phase,
    pub duration_s: f64,
}

/// Contiguous sequence of breathing segments starting at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespiratoryTimeline {
    pub segments: Vec<Segment>,
    /// Phase fraction of the cycle at which each of the three holds freezes.
    pub hold_fractions: [f64; 3],
}

impl RespiratoryTimeline {
    pub fn new(segments: Vec<Segment>, hold_fractions: [f64; 3]) -> Result<Self> {
        let tl = RespiratoryTimeline {
            segments,
            hold_fractions,
        };
        tl.validate()?;
        Ok(tl)
    }

    /// Training acquisition: `regular_s` of regular breathing followed by the
    /// three holds of `hold_s` each, separated by `gap_s` of regular breathing
    /// so that every hold is entered from (and left into) a moving phase.
    pub fn training(
        regular_s: f64,
        hold_s: f64,
        gap_s: f64,
        hold_fractions: [f64; 3],
    ) -> Result<Self> {
        let mut segments = vec![Segment {
            phase: Phase::Regular,
            duration_s: regular_s,
        }];
        for i in 1..=3u8 {
            segments.push(Segment {
                phase: Phase::BreathHold(i),
                duration_s: hold_s,
            });
            segments.push(Segment {
                phase: Phase::Regular,
                duration_s: gap_s,
            });
        }
        Self::new(segments, hold_fractions)
    }

    /// Regular breathing for `regular_s`, then breath-hold `hold` for `hold_s`.
    pub fn compensation_then_hold(
        regular_s: f64,
        hold: u8,
        hold_s: f64,
        hold_fractions: [f64; 3],
    ) -> Result<Self> {
        Self::new(
            vec![
                Segment {
                    phase: Phase::Regular,
                    duration_s: regular_s,
                },
                Segment {
                    phase: Phase::BreathHold(hold),
                    duration_s: hold_s,
                },
            ],
            hold_fractions,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::arg("timeline has no segments"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
                return Err(Error::arg(format!("segment {i} duration must be > 0")));
            }
            if let Phase::BreathHold(h) = s.phase {
                if !(1..=3).contains(&h) {
                    return Err(Error::arg(format!("segment {i}: breath-hold index {h} not in 1..=3")));
                }
            }
        }
        for (i, f) in self.hold_fractions.iter().enumerate() {
            if !(0.0..1.0).contains(f) {
                return Err(Error::arg(format!("hold fraction {i} must lie in [0, 1)")));
            }
        }
        let [a, b, c] = self.hold_fractions;
        if a == b || b == c || a == c {
            return Err(Error::arg("hold fractions must be distinct"));
        }
        Ok(())
    }

    pub fn extent(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Start times of every segment after the first.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.segments.len());
        for s in &self.segments[..self.segments.len() - 1] {
            t += s.duration_s;
            out.push(t);
        }
        out
    }

    /// Segment index and start time containing `t`. A time exactly on a
    /// boundary belongs to the later segment.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let end = self.extent();
        if !(t >= -TIME_EPS && t <= end + TIME_EPS) || t.is_nan() {
            return Err(Error::OutOfRange { t, end });
        }
        let mut start = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            let stop = start + s.duration_s;
            if t < stop || i + 1 == self.segments.len() {
                return Ok((i, start));
            }
            start = stop;
        }
        unreachable!("timeline has at least one segment")
    }

    pub fn phase_at(&self, t: f64) -> Result<Phase> {
        self.locate(t).map(|(i, _)| self.segments[i].phase)
    }

    pub fn hold_fraction(&self, hold: u8) -> f64 {
        self.hold_fractions[(hold as usize).clamp(1, 3) - 1]
    }
}

/// Ground-truth phantom displacement at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomState {
    pub t: f64,
    pub d_si: f64,
    pub d_ap: f64,
    /// Lateral displacement from tool-tissue interaction.
    pub d_lat: f64,
    pub phase: Phase,
}

/// Spherical target embedded in the phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Center position in world coordinates with the phantom at rest.
    pub rest_position_mm: Vector3<f64>,
    pub diameter_mm: f64,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_mm > 0.0) {
            return Err(Error::scenario("target.diameter_mm", "must be > 0"));
        }
        if !self.rest_position_mm.iter().all(|v| v.is_finite()) {
            return Err(Error::scenario("target.rest_position_mm", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }
}

/// Which world axis each anatomical direction moves along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisMap {
    pub si: Axis,
    pub ap: Axis,
    pub lateral: Axis,
}

impl Default for AxisMap {
    /// SI along x, lateral along y, AP along z: the order in which the
    /// per-axis insertion errors are reported.
    fn default() -> Self {
        AxisMap {
            si: Axis::X,
            ap: Axis::Z,
            lateral: Axis::Y,
        }
    }
}

impl AxisMap {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for a in [self.si, self.ap, self.lateral] {
            if seen[a.index()] {
                return Err(Error::scenario("axes", "si, ap and lateral must map to distinct world axes"));
            }
            seen[a.index()] = true;
        }
        Ok(())
    }

    pub fn to_world(&self, d_lat: f64, d_si: f64, d_ap: f64) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.lateral.index()] += d_lat;
        v[self.si.index()] += d_si;
        v[self.ap.index()] += d_ap;
        v
    }
}

/// Lateral drift of the phantom caused by the needle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub enabled: bool,
    pub rate_mm_per_s: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            enabled: true,
            rate_mm_per_s: 10.0,
        }
    }
}

/// Ground-truth phantom displacement at time `t`.
pub fn sample_phantom(
    profile: &BreathingProfile,
    timeline: &RespiratoryTimeline,
    t: f64,
) -> Result<PhantomState> {
    let (idx, _) = timeline.locate(t)?;
    let phase = timeline.segments[idx].phase;
    let fraction = match phase {
        Phase::Regular => t / profile.period_s,
        Phase::BreathHold(h) => timeline.hold_fraction(h),
    };
    let (d_si, d_ap) = profile.displacement(fraction);
    Ok(PhantomState {
        t,
        d_si,
        d_ap,
        d_lat: 0.0,
        phase,
    })
}

/// World position of the target center for a phantom state.
pub fn target_world_position(state: &PhantomState, target: &TargetSpec, axes: &AxisMap) -> Vector3<f64> {
    target.rest_position_mm + axes.to_world(state.d_lat, state.d_si, state.d_ap)
}

/// Advance the lateral drift by one step of length `dt`.
pub fn apply_interaction_drift(
    state: PhantomState,
    drift: &DriftConfig,
    needle_engaged: bool,
    dt: f64,
    rng: &mut RngStream,
) -> PhantomState {
    if !drift.enabled || !needle_engaged || drift.rate_mm_per_s == 0.0 {
        return state;
    }
    PhantomState {
        d_lat: state.d_lat + rng.gaussian(drift.rate_mm_per_s * dt),
        ..state
    }
}
