//! End-to-end protocol: registration, retraction, model training, motion
//! compensation, teleoperated insertion during a breath-hold, and validation.
//!
//! A [`Session`] advances on a fixed haptic tick. The manipulator is updated
//! every control period (a whole number of haptic ticks), the surrogate sensor
//! at its own sample rate. Nothing depends on wall-clock time, so a scripted
//! session replays bit for bit.

mod metrics;
mod operator;
mod report;
mod scenario;

pub use metrics::{summarize, validate_insertion, InsertionError, InsertionValidation, MeanSd, SummaryRow};
pub use operator::{
    HandleCommand, LiveOperator, Operator, OperatorAction, OperatorObservation, OperatorParams, OperatorProfile,
    OperatorStatus, ScriptedOperator,
};
pub use report::{
    ForceRow, InsertionRecord, MotionRow, PoseRow, SessionReport, SteeringSummary, Traces, TrainingRecord,
    TrainingTrace,
};
pub use scenario::{InsertionPlan, Scenario, TrainingConfig};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haptics::{feedback_force, map_handle_to_needle, step_handle, Feedback, HandleState, Regime};
use crate::model::{evaluate_model_bank, train_model_bank, ModelBank, ModelClass};
use crate::phantom::{
    apply_interaction_drift, sample_phantom, target_world_position, Phase, PhantomState, RespiratoryTimeline,
    TargetSpec,
};
use crate::rng::{RngStream, StreamId};
use crate::steering::{
    compensation_step, em_to_base_rotation, insertion_step, rotation_with_x_axis, track_pose, Pose,
};
use crate::surrogate::{acquire_ground_truth, acquire_surrogate, read_sensor, synchronize, SurrogateSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStep {
    Training,
    Compensating,
    Inserting,
    Done,
}

/// Everything an observer needs to draw the current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub t: f64,
    pub insertion: usize,
    pub step: SessionStep,
    pub phase: Phase,
    pub d_si_mm: f64,
    pub d_ap_mm: f64,
    pub d_lat_mm: f64,
    pub needle_tip_mm: Vector3<f64>,
    pub desired_tip_mm: Vector3<f64>,
    pub target_mm: Vector3<f64>,
    pub distance_to_target_mm: f64,
    pub handle_position_mm: f64,
    pub force_n: f64,
    pub regime: Regime,
}

/// State of the insertion currently being executed.
#[derive(Debug, Clone)]
struct InsertionRun {
    index: usize,
    plan: InsertionPlan,
    timeline: RespiratoryTimeline,
    initial: Pose,
    robot: Pose,
    desired: Pose,
    ticks: u64,
    phantom: PhantomState,
    sensor_rng: RngStream,
    drift_rng: RngStream,
    next_sensor_sample: u64,
    latest_sample: Option<SurrogateSample>,
    estimate: (f64, f64, Option<ModelClass>),
    handle: HandleState,
    feedback: Feedback,
    insert_start: Option<f64>,
    settle_left: Option<u64>,
    wall_reached: bool,
    max_force: f64,
}

pub struct Session {
    scenario: Scenario,
    operator: Box<dyn Operator>,
    dt: f64,
    ticks_per_control: u64,
    r_em: Matrix3<f64>,
    r_ee: Matrix3<f64>,
    axis: Vector3<f64>,
    step: SessionStep,
    insertion: usize,
    /// Session time at which the current insertion run started.
    t_offset: f64,
    bank: Option<ModelBank>,
    trained_for: Option<Vector3<f64>>,
    run: Option<InsertionRun>,
    trainings: Vec<TrainingRecord>,
    records: Vec<InsertionRecord>,
    steering: Vec<(f64, f64)>,
    traces: Traces,
    aborted: Option<String>,
}

impl Session {
    /// Session driven by the scenario's scripted operator.
    pub fn scripted(scenario: Scenario) -> Result<Self> {
        let op = ScriptedOperator::new(scenario.operator, scenario.operator_params, scenario.seed)?;
        Self::with_operator(scenario, Box::new(op))
    }

    pub fn with_operator(scenario: Scenario, operator: Box<dyn Operator>) -> Result<Self> {
        scenario.validate()?;
        let axis = scenario.needle_axis.normalize();
        Ok(Session {
            dt: 1.0 / scenario.haptic_rate_hz,
            ticks_per_control: scenario.ticks_per_control() as u64,
            r_em: em_to_base_rotation(&scenario.axes),
            r_ee: rotation_with_x_axis(&axis)?,
            axis,
            step: SessionStep::Training,
            insertion: 0,
            t_offset: 0.0,
            bank: None,
            trained_for: None,
            run: None,
            trainings: Vec::new(),
            records: Vec::new(),
            steering: Vec::new(),
            traces: Traces::default(),
            aborted: None,
            operator,
            scenario,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn step(&self) -> SessionStep {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step == SessionStep::Done
    }

    pub fn haptic_period(&self) -> f64 {
        self.dt
    }

    /// Session time.
    pub fn time(&self) -> f64 {
        self.t_offset + self.run.as_ref().map_or(0.0, |r| r.ticks as f64 * self.dt)
    }

    pub fn bank(&self) -> Option<&ModelBank> {
        self.bank.as_ref()
    }

    /// Advance by one haptic tick. A tick in the training step performs the
    /// (offline) training and does not advance time.
    pub fn tick(&mut self) -> Result<()> {
        match self.step {
            SessionStep::Done => Ok(()),
            SessionStep::Training => self.start_insertion(),
            SessionStep::Compensating | SessionStep::Inserting => self.advance(),
        }
    }

    pub fn run_to_end(mut self) -> Result<SessionReport> {
        while !self.is_done() {
            self.tick()?;
        }
        Ok(self.into_report())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let t = self.time();
        match &self.run {
            Some(run) => {
                let target = self.target_center(run);
                StateSnapshot {
                    t,
                    insertion: run.index,
                    step: self.step,
                    phase: run.phantom.phase,
                    d_si_mm: run.phantom.d_si,
                    d_ap_mm: run.phantom.d_ap,
                    d_lat_mm: run.phantom.d_lat,
                    needle_tip_mm: run.robot.translation,
                    desired_tip_mm: run.desired.translation,
                    target_mm: target,
                    distance_to_target_mm: self.distance_to_target(&run.handle),
                    handle_position_mm: run.handle.axial_position_mm,
                    force_n: run.feedback.force_n,
                    regime: run.feedback.regime,
                }
            }
            None => {
                let rest = self
                    .scenario
                    .insertions
                    .get(self.insertion)
                    .or(self.scenario.insertions.last())
                    .map(|p| p.target_rest_position_mm)
                    .unwrap_or_else(Vector3::zeros);
                StateSnapshot {
                    t,
                    insertion: self.insertion,
                    step: self.step,
                    phase: Phase::Regular,
                    d_si_mm: 0.0,
                    d_ap_mm: 0.0,
                    d_lat_mm: 0.0,
                    needle_tip_mm: Vector3::zeros(),
                    desired_tip_mm: Vector3::zeros(),
                    target_mm: rest,
                    distance_to_target_mm: self.planned_depth(),
                    handle_position_mm: 0.0,
                    force_n: 0.0,
                    regime: Regime::Idle,
                }
            }
        }
    }

    pub fn into_report(self) -> SessionReport {
        let si: Vec<f64> = self.steering.iter().map(|s| s.0).collect();
        let ap: Vec<f64> = self.steering.iter().map(|s| s.1).collect();
        let steering = match (MeanSd::of(&si), MeanSd::of(&ap)) {
            (Some(si), Some(ap)) => Some(SteeringSummary {
                si,
                ap,
                samples: self.steering.len(),
            }),
            _ => None,
        };
        let errors: Vec<InsertionError> = self.records.iter().map(|r| r.error).collect();
        SessionReport {
            scenario: self.scenario,
            trainings: self.trainings,
            steering,
            overall: summarize(&errors).ok(),
            insertions: self.records,
            aborted: self.aborted,
            traces: self.traces,
        }
    }

    fn planned_depth(&self) -> f64 {
        self.scenario.retraction_distance_mm + self.scenario.target_depth_mm
    }

    /// Remaining axial distance to the planned target position, as known to
    /// the system (from the plan and the handle, not from the phantom).
    fn distance_to_target(&self, handle: &HandleState) -> f64 {
        self.planned_depth() - map_handle_to_needle(handle.axial_position_mm, self.scenario.haptics.motion_scale)
    }

    fn target_spec(&self, plan: &InsertionPlan) -> TargetSpec {
        TargetSpec {
            rest_position_mm: plan.target_rest_position_mm,
            diameter_mm: self.scenario.target_diameter_mm,
        }
    }

    fn target_center(&self, run: &InsertionRun) -> Vector3<f64> {
        target_world_position(&run.phantom, &self.target_spec(&run.plan), &self.scenario.axes)
    }

    fn train(&mut self, index: usize) -> Result<()> {
        let (record, trace) = train_models(&self.scenario, index)?;
        self.bank = Some(record.bank.clone());
        self.trainings.push(record);
        self.traces.training.push(trace);
        Ok(())
    }

    fn start_insertion(&mut self) -> Result<()> {
        let index = self.insertion;
        let plan = self.scenario.insertions[index].clone();
        if self.trained_for != Some(plan.target_rest_position_mm) {
            self.train(index)?;
            self.trained_for = Some(plan.target_rest_position_mm);
        }
        let sc = &self.scenario;

        // registration aligns the needle with the skin entry point in front of
        // the target (phantom at rest), then the arm retracts along the axis
        let entry = plan.target_rest_position_mm - self.axis * sc.target_depth_mm;
        let registered = entry + self.r_ee * sc.registration_error_mm;
        let retracted = registered - self.axis * sc.retraction_distance_mm;
        let initial = Pose::end_effector(self.r_ee, retracted)?;

        let settle_margin = 10.0;
        let timeline = RespiratoryTimeline::compensation_then_hold(
            sc.compensation_s,
            plan.hold,
            sc.insertion_timeout_s + settle_margin,
            sc.hold_fractions,
        )?;
        let phantom = sample_phantom(&sc.breathing, &timeline, 0.0)?;
        self.run = Some(InsertionRun {
            index,
            plan,
            timeline,
            initial,
            robot: initial,
            desired: initial,
            ticks: 0,
            phantom,
            sensor_rng: RngStream::with_substream(sc.seed, StreamId::LiveSensor, index as u64),
            drift_rng: RngStream::with_substream(sc.seed, StreamId::Drift, index as u64),
            next_sensor_sample: 0,
            latest_sample: None,
            estimate: (0.0, 0.0, None),
            handle: HandleState::at_rest(0.0),
            feedback: Feedback {
                regime: Regime::Idle,
                force_n: 0.0,
            },
            insert_start: None,
            settle_left: None,
            wall_reached: false,
            max_force: 0.0,
        });
        self.step = SessionStep::Compensating;
        Ok(())
    }

    fn advance(&mut self) -> Result<()> {
        let mut run = self.run.take().ok_or_else(|| Error::InvalidState("no insertion in progress".into()))?;
        let result = self.advance_run(&mut run);
        match result {
            Ok(true) => self.finish_insertion(run),
            Ok(false) => {
                self.run = Some(run);
                Ok(())
            }
            Err(e) => {
                self.run = Some(run);
                Err(e)
            }
        }
    }

    /// One haptic tick. Returns true when the insertion is complete.
    fn advance_run(&mut self, run: &mut InsertionRun) -> Result<bool> {
        let dt = self.dt;
        run.ticks += 1;
        let t = run.ticks as f64 * dt;
        let session_t = self.t_offset + t;
        if t > run.timeline.extent() {
            return Err(Error::InvalidState("insertion ran past its timeline".into()));
        }

        let d_lat = run.phantom.d_lat;
        run.phantom = sample_phantom(&self.scenario.breathing, &run.timeline, t)?;
        run.phantom.d_lat = d_lat;

        if self.step == SessionStep::Compensating && run.phantom.phase.is_hold() {
            // insertion only ever starts inside a breath-hold
            self.step = SessionStep::Inserting;
            run.insert_start = Some(t);
            self.operator.begin_insertion(run.index);
        }

        let mut done = false;
        if self.step == SessionStep::Inserting {
            if !run.phantom.phase.is_hold() {
                return Err(Error::InvalidState("insertion outside a breath-hold".into()));
            }
            let insert_t = t - run.insert_start.unwrap_or(t);
            let obs = OperatorObservation {
                t: insert_t,
                session_t,
                handle: run.handle,
                feedback: run.feedback,
                distance_to_target_mm: self.distance_to_target(&run.handle),
            };
            let action = self.operator.act(&obs);
            run.handle = step_handle(
                &run.handle,
                action.input,
                run.feedback.force_n,
                &self.scenario.handle,
                dt,
            );
            let distance = self.distance_to_target(&run.handle);
            run.feedback = feedback_force(&self.scenario.haptics, &run.handle, distance);
            run.max_force = run.max_force.max(run.feedback.force_n.abs());
            run.wall_reached |= run.feedback.regime == Regime::Wall;
            self.traces.force.push(ForceRow {
                insertion: run.index,
                t: session_t,
                distance_to_target: distance,
                regime: run.feedback.regime,
                force_n: run.feedback.force_n,
            });

            match action.status {
                OperatorStatus::Working => {}
                OperatorStatus::Finished => {
                    if run.settle_left.is_none() {
                        let settle_s = (5.0 / self.scenario.robot.tracking_bandwidth_per_s).max(0.5);
                        run.settle_left = Some((settle_s / dt).ceil() as u64);
                    }
                }
                OperatorStatus::Aborted(reason) => {
                    self.aborted = Some(reason);
                    return Ok(true);
                }
            }
            if let Some(left) = run.settle_left.as_mut() {
                *left = left.saturating_sub(1);
                done = *left == 0;
            }
            if insert_t >= self.scenario.insertion_timeout_s {
                if !self.scenario.operator.is_scripted() {
                    self.aborted = Some(format!(
                        "operator timed out after {} s",
                        self.scenario.insertion_timeout_s
                    ));
                }
                done = true;
            }
        }

        if run.ticks.is_multiple_of(self.ticks_per_control) {
            self.control_update(run, t, session_t)?;
        }
        Ok(done)
    }

    fn control_update(&mut self, run: &mut InsertionRun, t: f64, session_t: f64) -> Result<()> {
        let sc = &self.scenario;
        let period = sc.robot.control_period_s;

        // sensor samples due by now, each reading the phantom `latency` earlier
        loop {
            let ts = run.next_sensor_sample as f64 / sc.sensor.sample_rate_hz;
            if ts > t + 1e-12 {
                break;
            }
            let mut state = sample_phantom(&sc.breathing, &run.timeline, (ts - sc.sensor.latency_s).max(0.0))?;
            state.d_lat = run.phantom.d_lat;
            let mut s = read_sensor(&state, &sc.sensor, &mut run.sensor_rng);
            s.t = ts;
            run.latest_sample = Some(s);
            run.next_sensor_sample += 1;
        }
        let sample = run
            .latest_sample
            .ok_or_else(|| Error::InvalidState("no surrogate sample yet".into()))?;

        let phase = run.phantom.phase;
        let (comp, est) = compensation_step(self.bank.as_ref(), &sample, phase, &self.r_em, &run.initial)?;
        run.estimate = (est.si, est.ap, Some(est.class));
        let axial = map_handle_to_needle(run.handle.axial_position_mm, sc.haptics.motion_scale);
        run.desired = if self.step == SessionStep::Inserting {
            insertion_step(&comp, axial)
        } else {
            comp
        };
        run.robot = track_pose(&run.robot, &run.desired, &sc.robot, period);

        let in_tissue = axial > sc.retraction_distance_mm;
        run.phantom = apply_interaction_drift(run.phantom, &sc.drift, in_tissue, period, &mut run.drift_rng);

        let target = self.target_center(run);
        let tip = run.robot.translation;
        if phase == Phase::Regular && t >= sc.steering_settle_s {
            let e = crate::steering::steering_error(&tip, &target);
            self.steering.push((e[sc.axes.si.index()], e[sc.axes.ap.index()]));
        }

        self.traces.pose.push(PoseRow {
            insertion: run.index,
            t: session_t,
            desired_x: run.desired.translation.x,
            desired_y: run.desired.translation.y,
            desired_z: run.desired.translation.z,
            actual_x: tip.x,
            actual_y: tip.y,
            actual_z: tip.z,
            target_x: target.x,
            target_y: target.y,
            target_z: target.z,
        });
        self.traces.motion.push(MotionRow {
            insertion: run.index,
            t: session_t,
            step: self.step,
            phase: phase.to_string(),
            d_si: run.phantom.d_si,
            d_ap: run.phantom.d_ap,
            d_lat: run.phantom.d_lat,
            s_y: sample.s_y,
            s_z: sample.s_z,
            est_si: est.si,
            est_ap: est.ap,
            model: est.class,
        });
        Ok(())
    }

    fn finish_insertion(&mut self, run: InsertionRun) -> Result<()> {
        let t = run.ticks as f64 * self.dt;
        if self.aborted.is_none() {
            let target = self.target_center(&run);
            let tip = run.robot.translation;
            let v = validate_insertion(&tip, &target, self.scenario.target_diameter_mm);
            let axial = map_handle_to_needle(run.handle.axial_position_mm, self.scenario.haptics.motion_scale);
            self.records.push(InsertionRecord {
                index: run.index,
                hold: run.plan.hold,
                target_rest_position_mm: run.plan.target_rest_position_mm,
                needle_tip_mm: tip,
                target_center_mm: target,
                error: v.error,
                surface_distance_mm: v.surface_distance_mm,
                penetration_mm: axial - self.planned_depth(),
                max_force_n: run.max_force,
                wall_reached: run.wall_reached,
                timed_out: run.settle_left != Some(0),
                insertion_duration_s: run.insert_start.map_or(0.0, |s| t - s),
            });
        }
        self.t_offset += t;
        self.insertion += 1;
        self.step = if self.aborted.is_some() || self.insertion >= self.scenario.insertions.len() {
            SessionStep::Done
        } else {
            SessionStep::Training
        };
        Ok(())
    }
}

/// Acquire the training and test recordings used before insertion `index`,
/// synchronize and label them, fit the model bank and evaluate it.
///
/// Each insertion index draws its own sensor noise, so retraining after a
/// target move sees fresh recordings.
pub fn train_models(scenario: &Scenario, index: usize) -> Result<(TrainingRecord, TrainingTrace)> {
    let sc = scenario;
    let timeline = sc.training_timeline()?;
    let gt = acquire_ground_truth(&sc.breathing, &timeline, sc.training.ground_truth_rate_hz)?;

    let acquire = |stream: StreamId| -> Result<_> {
        let mut rng = RngStream::with_substream(sc.seed, stream, index as u64);
        let raw = acquire_surrogate(
            &sc.breathing,
            &timeline,
            &sc.sensor,
            sc.training.em_clock_offset_s,
            &mut rng,
        )?;
        let mut pair = synchronize(&raw, &gt, &sc.training.sync)?;
        pair.label_phases(&timeline, sc.training.transition_guard_s)?;
        Ok((raw, pair))
    };
    let (raw, train_pair) = acquire(StreamId::TrainingSensor)?;
    let (_, test_pair) = acquire(StreamId::TestSensor)?;
    let bank = train_model_bank(&train_pair, &sc.model)?;
    let bank = evaluate_model_bank(&bank, &test_pair)?;
    Ok((
        TrainingRecord {
            insertion: index,
            alignment_offset_s: train_pair.alignment_offset_s,
            test_alignment_offset_s: test_pair.alignment_offset_s,
            bank,
        },
        TrainingTrace {
            insertion: index,
            surrogate: raw,
            ground_truth: gt,
        },
    ))
}

/// Run a scripted scenario from registration to validation.
pub fn run_protocol(scenario: &Scenario) -> Result<SessionReport> {
    if !scenario.operator.is_scripted() {
        return Err(Error::arg("a live operator needs the bridge; use a scripted profile"));
    }
    Session::scripted(scenario.clone())?.run_to_end()
}
