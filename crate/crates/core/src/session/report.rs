//! Session results and the on-disk bundle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::haptics::Regime;
use crate::model::{ErrorStats, ModelBank, ModelClass};
use crate::surrogate::{write_ground_truth_csv, write_surrogate_csv, GroundTruthSample, SurrogateSample};

use super::metrics::{InsertionError, MeanSd, SummaryRow};
use super::scenario::Scenario;
use super::SessionStep;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub insertion: usize,
    pub alignment_offset_s: f64,
    pub test_alignment_offset_s: f64,
    pub bank: ModelBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub index: usize,
    pub hold: u8,
    pub target_rest_position_mm: Vector3<f64>,
    pub needle_tip_mm: Vector3<f64>,
    pub target_center_mm: Vector3<f64>,
    pub error: InsertionError,
    pub surface_distance_mm: f64,
    /// Commanded depth beyond the planned target position.
    pub penetration_mm: f64,
    pub max_force_n: f64,
    pub wall_reached: bool,
    pub timed_out: bool,
    pub insertion_duration_s: f64,
}

/// Tip-to-target distance along SI and AP during regular breathing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub si: MeanSd,
    pub ap: MeanSd,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub insertion: usize,
    pub t: f64,
    pub desired_x: f64,
    pub desired_y: f64,
    pub desired_z: f64,
    pub actual_x: f64,
    pub actual_y: f64,
    pub actual_z: f64,
    pub target_x: f64,
    pub target_y: f64,
    pub target_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRow {
    pub insertion: usize,
    pub t: f64,
    pub step: SessionStep,
    pub phase: String,
    pub d_si: f64,
    pub d_ap: f64,
    pub d_lat: f64,
    pub s_y: f64,
    pub s_z: f64,
    pub est_si: f64,
    pub est_ap: f64,
    pub model: ModelClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub insertion: usize,
    pub t: f64,
    pub distance_to_target: f64,
    pub regime: Regime,
    pub force_n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub insertion: usize,
    pub surrogate: Vec<SurrogateSample>,
    pub ground_truth: Vec<GroundTruthSample>,
}

/// Time series recorded during a session. Kept out of `report.json`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub pose: Vec<PoseRow>,
    pub motion: Vec<MotionRow>,
    pub force: Vec<ForceRow>,
    pub training: Vec<TrainingTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub scenario: Scenario,
    pub trainings: Vec<TrainingRecord>,
    pub steering: Option<SteeringSummary>,
    pub insertions: Vec<InsertionRecord>,
    pub overall: Option<SummaryRow>,
    pub aborted: Option<String>,
    #[serde(skip)]
    pub traces: Traces,
}

impl SessionReport {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.insertions.len() == self.scenario.insertions.len()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Mean test MAE over every evaluated model of every training.
    pub fn mean_test_mae_mm(&self) -> Option<f64> {
        let maes: Vec<f64> = self
            .trainings
            .iter()
            .flat_map(|t| t.bank.entries().map(|(_, _, e)| e.test.map(|s| s.mae_mm)))
            .flatten()
            .collect();
        (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64)
    }

    pub fn max_force_n(&self) -> f64 {
        self.insertions.iter().map(|r| r.max_force_n).fold(0.0, f64::max)
    }

    /// Model and insertion tables as plain text.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}  operator {}", self.scenario.seed, self.scenario.operator);
        if let Some(reason) = &self.aborted {
            let _ = writeln!(out, "ABORTED: {reason}");
        }
        for tr in &self.trainings {
            let _ = writeln!(
                out,
                "\nMotion model MAE (mm), trained before insertion {} (order {}, sync offset {:+.3} s)",
                tr.insertion + 1,
                tr.bank.order,
                tr.alignment_offset_s
            );
            let _ = writeln!(
                out,
                "{:<12}{:>16}{:>16}{:>16}{:>16}",
                "model", "SI train", "SI test", "AP train", "AP test"
            );
            let stat = |s: Option<ErrorStats>| {
                s.map_or_else(|| "-".to_string(), |s| format!("{:.2} ± {:.2}", s.mae_mm, s.sd_mm))
            };
            for (name, m) in [("regular", &tr.bank.regular), ("breath-hold", &tr.bank.breath_hold)] {
                let _ = writeln!(
                    out,
                    "{name:<12}{:>16}{:>16}{:>16}{:>16}",
                    stat(m.si.train),
                    stat(m.si.test),
                    stat(m.ap.train),
                    stat(m.ap.test)
                );
            }
        }
        if let Some(s) = &self.steering {
            let _ = writeln!(out, "\nSteering error during regular breathing ({} samples)", s.samples);
            let _ = writeln!(out, "  SI {} mm", s.si);
            let _ = writeln!(out, "  AP {} mm", s.ap);
        }
        let _ = writeln!(out, "\nInsertion errors (mm)");
        let _ = writeln!(
            out,
            "{:<8}{:>6}{:>16}{:>16}{:>16}{:>16}",
            "#", "hold", "eps_x", "eps_y", "eps_z", "euclidean"
        );
        for r in &self.insertions {
            let _ = writeln!(
                out,
                "{:<8}{:>6}{:>16.2}{:>16.2}{:>16.2}{:>16.2}",
                r.index + 1,
                r.hold,
                r.error.eps_x,
                r.error.eps_y,
                r.error.eps_z,
                r.error.euclidean
            );
        }
        if let Some(o) = &self.overall {
            let _ = writeln!(
                out,
                "{:<14}{:>16}{:>16}{:>16}{:>16}",
                "overall",
                o.eps_x.to_string(),
                o.eps_y.to_string(),
                o.eps_z.to_string(),
                o.euclidean.to_string()
            );
        }
        out
    }

    /// Write `report.json`, `summary.txt` and `traces/*.csv` under `dir`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("summary.txt"), self.summary_text())?;
        write_rows(&traces.join("pose.csv"), &self.traces.pose)?;
        write_rows(&traces.join("motion.csv"), &self.traces.motion)?;
        write_rows(&traces.join("forces.csv"), &self.traces.force)?;
        for tr in &self.traces.training {
            let n = tr.insertion + 1;
            write_surrogate_csv(fs::File::create(traces.join(format!("surrogate_{n}.csv")))?, &tr.surrogate)?;
            write_ground_truth_csv(
                fs::File::create(traces.join(format!("ground_truth_{n}.csv")))?,
                &tr.ground_truth,
            )?;
        }
        Ok(())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
