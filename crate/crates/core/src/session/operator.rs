//! Who moves the haptic handle: scripted stand-ins for a human, or a live
//! operator whose commands arrive through a queue.

use std::str::FromStr;
use std::sync::mpsc::{Receiver, TryRecvError};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haptics::{Feedback, HandInput, HandleState, Regime};
use crate::rng::{RngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorProfile {
    /// Steady insertion that slows as the feedback force rises and rests
    /// lightly against the wall.
    Ideal,
    /// Fast insertion that drives hard into the wall before backing off.
    Overshooter,
    /// Stop-and-go insertion.
    Hesitant,
    /// Commands come from outside the process.
    Live,
}

impl OperatorProfile {
    pub fn is_scripted(self) -> bool {
        self != OperatorProfile::Live
    }
}

impl FromStr for OperatorProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(OperatorProfile::Ideal),
            "overshooter" => Ok(OperatorProfile::Overshooter),
            "hesitant" => Ok(OperatorProfile::Hesitant),
            "live" => Ok(OperatorProfile::Live),
            other => Err(Error::arg(format!("unknown operator profile `{other}`"))),
        }
    }
}

impl std::fmt::Display for OperatorProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OperatorProfile::Ideal => "ideal",
            OperatorProfile::Overshooter => "overshooter",
            OperatorProfile::Hesitant => "hesitant",
            OperatorProfile::Live => "live",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorParams {
    pub approach_speed_mm_per_s: f64,
    /// Relative spread of the approach speed between insertions.
    pub speed_jitter: f64,
    pub velocity_gain_n_s_per_mm: f64,
    pub max_push_n: f64,
    /// Steady push held against the wall.
    pub contact_force_n: f64,
    pub overshoot_force_n: f64,
    pub overshoot_s: f64,
    pub hesitant_go_s: f64,
    pub hesitant_pause_s: f64,
    /// Time resting against the wall before the operator is done.
    pub settle_s: f64,
    /// Live operator: released time after touching the wall that ends the
    /// insertion.
    pub live_release_done_s: f64,
    /// Live commands older than this (session time) are dropped.
    pub command_stale_s: f64,
    pub live_timeout_s: f64,
}

impl Default for OperatorParams {
    fn default() -> Self {
        OperatorParams {
            approach_speed_mm_per_s: 10.0,
            speed_jitter: 0.1,
            velocity_gain_n_s_per_mm: 0.05,
            max_push_n: 4.0,
            contact_force_n: 0.2,
            overshoot_force_n: 4.0,
            overshoot_s: 0.3,
            hesitant_go_s: 1.0,
            hesitant_pause_s: 0.5,
            settle_s: 1.5,
            live_release_done_s: 1.0,
            command_stale_s: 0.25,
            live_timeout_s: 120.0,
        }
    }
}

impl OperatorParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("approach_speed_mm_per_s", self.approach_speed_mm_per_s),
            ("speed_jitter", self.speed_jitter),
            ("velocity_gain_n_s_per_mm", self.velocity_gain_n_s_per_mm),
            ("max_push_n", self.max_push_n),
            ("contact_force_n", self.contact_force_n),
            ("overshoot_force_n", self.overshoot_force_n),
            ("overshoot_s", self.overshoot_s),
            ("hesitant_go_s", self.hesitant_go_s),
            ("hesitant_pause_s", self.hesitant_pause_s),
            ("settle_s", self.settle_s),
            ("live_release_done_s", self.live_release_done_s),
            ("command_stale_s", self.command_stale_s),
            ("live_timeout_s", self.live_timeout_s),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::scenario(format!("operator_params.{name}"), "must be finite and >= 0"));
            }
        }
        if self.speed_jitter >= 1.0 {
            return Err(Error::scenario("operator_params.speed_jitter", "must be < 1"));
        }
        if self.approach_speed_mm_per_s == 0.0 {
            return Err(Error::scenario("operator_params.approach_speed_mm_per_s", "must be > 0"));
        }
        Ok(())
    }
}

/// What the operator sees at a haptic tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorObservation {
    /// Time since the insertion step started.
    pub t: f64,
    /// Session clock.
    pub session_t: f64,
    pub handle: HandleState,
    pub feedback: Feedback,
    pub distance_to_target_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorStatus {
    Working,
    Finished,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorAction {
    pub input: HandInput,
    pub status: OperatorStatus,
}

impl OperatorAction {
    fn working(input: HandInput) -> Self {
        OperatorAction {
            input,
            status: OperatorStatus::Working,
        }
    }
}

pub trait Operator: Send {
    fn begin_insertion(&mut self, index: usize);
    fn act(&mut self, obs: &OperatorObservation) -> OperatorAction;
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Approach,
    Overshoot { until: f64 },
    Contact { since: f64 },
}

/// Deterministic stand-in for the human operator.
#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    profile: OperatorProfile,
    params: OperatorParams,
    seed: u64,
    speed: f64,
    stage: Stage,
}

impl ScriptedOperator {
    pub fn new(profile: OperatorProfile, params: OperatorParams, seed: u64) -> Result<Self> {
        if !profile.is_scripted() {
            return Err(Error::arg("the live profile has no script"));
        }
        Ok(ScriptedOperator {
            profile,
            params,
            seed,
            speed: params.approach_speed_mm_per_s,
            stage: Stage::Approach,
        })
    }

    fn approach_force(&self, obs: &OperatorObservation, slow_down: bool) -> f64 {
        let p = &self.params;
        let target_speed = if slow_down {
            self.speed * (1.0 - obs.feedback.force_n / p.max_push_n.max(1e-9)).max(0.15)
        } else {
            self.speed
        };
        let v = obs.handle.axial_velocity_mm_per_s;
        (obs.feedback.force_n + p.velocity_gain_n_s_per_mm * (target_speed - v)).clamp(0.0, p.max_push_n)
    }
}

impl Operator for ScriptedOperator {
    fn begin_insertion(&mut self, index: usize) {
        let mut rng = RngStream::with_substream(self.seed, StreamId::Operator, index as u64);
        let j = self.params.speed_jitter;
        let factor = if j > 0.0 { 1.0 + rng.uniform(-j, j) } else { 1.0 };
        self.speed = self.params.approach_speed_mm_per_s * factor;
        if self.profile == OperatorProfile::Overshooter {
            self.speed *= 2.0;
        }
        self.stage = Stage::Approach;
    }

    fn act(&mut self, obs: &OperatorObservation) -> OperatorAction {
        let p = self.params;
        if self.stage == Stage::Approach && obs.feedback.regime == Regime::Wall {
            self.stage = match self.profile {
                OperatorProfile::Overshooter => Stage::Overshoot {
                    until: obs.t + p.overshoot_s,
                },
                _ => Stage::Contact { since: obs.t },
            };
        }
        if let Stage::Overshoot { until } = self.stage {
            if obs.t >= until {
                self.stage = Stage::Contact { since: obs.t };
            }
        }
        match self.stage {
            Stage::Approach => match self.profile {
                OperatorProfile::Overshooter => {
                    OperatorAction::working(HandInput::Push(self.approach_force(obs, false)))
                }
                OperatorProfile::Hesitant => {
                    let cycle = p.hesitant_go_s + p.hesitant_pause_s;
                    let in_cycle = if cycle > 0.0 { obs.t % cycle } else { 0.0 };
                    if in_cycle >= p.hesitant_go_s {
                        OperatorAction::working(HandInput::Grip)
                    } else {
                        OperatorAction::working(HandInput::Push(self.approach_force(obs, true)))
                    }
                }
                _ => OperatorAction::working(HandInput::Push(self.approach_force(obs, true))),
            },
            Stage::Overshoot { .. } => OperatorAction::working(HandInput::Push(p.overshoot_force_n)),
            Stage::Contact { since } => {
                let input = HandInput::Push(p.contact_force_n);
                let settled = obs.t - since >= p.settle_s && obs.handle.axial_velocity_mm_per_s.abs() < 0.05;
                OperatorAction {
                    input,
                    status: if settled {
                        OperatorStatus::Finished
                    } else {
                        OperatorStatus::Working
                    },
                }
            }
        }
    }
}

/// Handle command from a remote console.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleCommand {
    /// Session time the client last saw when it issued the command.
    pub t: f64,
    pub axial_position_mm: f64,
    pub engaged: bool,
}

/// Operator driven by queued [`HandleCommand`]s, drained once per tick.
#[derive(Debug)]
pub struct LiveOperator {
    commands: Receiver<HandleCommand>,
    params: OperatorParams,
    current: HandInput,
    wall_seen: bool,
    released_since: Option<f64>,
    dropped: u64,
}

impl LiveOperator {
    pub fn new(commands: Receiver<HandleCommand>, params: OperatorParams) -> Self {
        LiveOperator {
            commands,
            params,
            current: HandInput::Release,
            wall_seen: false,
            released_since: None,
            dropped: 0,
        }
    }

    /// Commands discarded as stale or malformed so far.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

impl Operator for LiveOperator {
    fn begin_insertion(&mut self, _index: usize) {
        // leftovers belong to the previous insertion
        while self.commands.try_recv().is_ok() {}
        self.current = HandInput::Release;
        self.wall_seen = false;
        self.released_since = None;
    }

    fn act(&mut self, obs: &OperatorObservation) -> OperatorAction {
        loop {
            match self.commands.try_recv() {
                Ok(cmd) => {
                    let stale = obs.session_t - cmd.t > self.params.command_stale_s;
                    if stale || !cmd.axial_position_mm.is_finite() || !cmd.t.is_finite() {
                        self.dropped += 1;
                        continue;
                    }
                    self.current = if cmd.engaged {
                        HandInput::Position(cmd.axial_position_mm)
                    } else {
                        HandInput::Release
                    };
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    return OperatorAction {
                        input: HandInput::Release,
                        status: OperatorStatus::Aborted("operator command queue closed".into()),
                    }
                }
            }
        }
        if obs.feedback.regime == Regime::Wall {
            self.wall_seen = true;
        }
        if obs.t > self.params.live_timeout_s {
            return OperatorAction {
                input: HandInput::Release,
                status: OperatorStatus::Aborted(format!(
                    "no completed insertion within {} s",
                    self.params.live_timeout_s
                )),
            };
        }
        let released = self.current == HandInput::Release;
        self.released_since = match (released, self.released_since) {
            (true, None) => Some(obs.t),
            (true, since) => since,
            (false, _) => None,
        };
        let done = self.wall_seen
            && self
                .released_since
                .is_some_and(|s| obs.t - s >= self.params.live_release_done_s);
        OperatorAction {
            input: self.current,
            status: if done {
                OperatorStatus::Finished
            } else {
                OperatorStatus::Working
            },
        }
    }
}
