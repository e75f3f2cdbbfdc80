//! Insertion error metrics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis absolute tip-to-target distances and their Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionError {
    pub eps_x: f64,
    pub eps_y: f64,
    pub eps_z: f64,
    pub euclidean: f64,
}

impl InsertionError {
    pub fn from_eps(eps_x: f64, eps_y: f64, eps_z: f64) -> Self {
        InsertionError {
            eps_x,
            eps_y,
            eps_z,
            euclidean: (eps_x * eps_x + eps_y * eps_y + eps_z * eps_z).sqrt(),
        }
    }
}

/// Insertion error plus the distance from the tip to the target surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionValidation {
    pub error: InsertionError,
    /// `max(0, |tip - center| - diameter / 2)`.
    pub surface_distance_mm: f64,
}

pub fn validate_insertion(needle_tip: &Vector3<f64>, target_center: &Vector3<f64>, diameter_mm: f64) -> InsertionValidation {
    let d = (needle_tip - target_center).abs();
    let error = InsertionError::from_eps(d.x, d.y, d.z);
    InsertionValidation {
        error,
        surface_distance_mm: (error.euclidean - diameter_mm / 2.0).max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanSd { mean, sd: var.sqrt() })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

/// Column-wise mean ± sd over insertions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub eps_x: MeanSd,
    pub eps_y: MeanSd,
    pub eps_z: MeanSd,
    pub euclidean: MeanSd,
}

pub fn summarize(errors: &[InsertionError]) -> Result<SummaryRow> {
    if errors.is_empty() {
        return Err(Error::arg("cannot summarize zero insertions"));
    }
    let col = |f: fn(&InsertionError) -> f64| {
        MeanSd::of(&errors.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    Ok(SummaryRow {
        eps_x: col(|e| e.eps_x),
        eps_y: col(|e| e.eps_y),
        eps_z: col(|e| e.eps_z),
        euclidean: col(|e| e.euclidean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn coincident_tip() {
        let c = Vector3::new(1.0, 2.0, 3.0);
        let v = validate_insertion(&c, &c, 3.0);
        assert_eq!(v.error, InsertionError::from_eps(0.0, 0.0, 0.0));
        assert_eq!(v.surface_distance_mm, 0.0);
    }

    #[test]
    fn surface_distance() {
        let v = validate_insertion(&Vector3::new(0.0, 4.0, 0.0), &Vector3::zeros(), 3.0);
        assert_abs_diff_eq!(v.surface_distance_mm, 2.5, epsilon = 1e-12);
        assert_eq!(v.error.eps_y, 4.0);
        let inside = validate_insertion(&Vector3::new(0.0, 1.0, 0.0), &Vector3::zeros(), 3.0);
        assert_eq!(inside.surface_distance_mm, 0.0);
    }

    #[test]
    fn single_and_identical_rows() {
        let e = InsertionError::from_eps(1.0, 2.0, 2.0);
        let s = summarize(&[e]).unwrap();
        assert_eq!(s.euclidean, MeanSd { mean: 3.0, sd: 0.0 });
        let s = summarize(&[e; 5]).unwrap();
        assert_eq!(s.eps_x.sd, 0.0);
        assert_eq!(s.eps_y.sd, 0.0);
        assert_abs_diff_eq!(s.eps_z.mean, 2.0, epsilon = 1e-15);
        assert!(summarize(&[]).is_err());
    }
}
