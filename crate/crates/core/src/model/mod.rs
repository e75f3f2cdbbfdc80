//! Correspondence models mapping surrogate readings to target displacement.
//!
//! Each anatomical axis gets a polynomial in one surrogate channel, fitted by
//! ordinary least squares. Separate models cover regular breathing and the
//! pooled breath-hold positions, and every model carries its training and
//! held-out mean absolute error.

mod lstsq;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Phase;
use crate::surrogate::{SurrogateSample, TrainingPair};

/// Largest polynomial order accepted in a scenario.
pub const MAX_ORDER: usize = 5;

/// Polynomial `β₀ + β₁x + … + βₙxⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::arg("a polynomial needs at least one coefficient"));
        }
        if !coefficients.iter().all(|c| c.is_finite()) {
            return Err(Error::arg("polynomial coefficients must be finite"));
        }
        Ok(Polynomial { coefficients })
    }

    pub fn constant(value: f64) -> Self {
        Polynomial {
            coefficients: vec![value],
        }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Horner evaluation.
    pub fn estimate(&self, s: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }
}

/// Least-squares polynomial of the given order through `(x, y)`.
///
/// Samples are put in a canonical order before solving, which makes the
/// result independent of how the caller ordered them.
pub fn fit_polynomial(x: &[f64], y: &[f64], order: usize) -> Result<Polynomial> {
    if x.len() != y.len() {
        return Err(Error::arg(format!(
            "x and y lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < order + 1 {
        return Err(Error::DegenerateFit(format!(
            "{} samples cannot determine an order-{order} polynomial",
            x.len()
        )));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::arg("samples must be finite"));
    }

    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let distinct = 1 + pts.windows(2).filter(|w| w[1].0 != w[0].0).count();
    if distinct < order + 1 {
        return Err(Error::DegenerateFit(format!(
            "{distinct} distinct x values cannot determine an order-{order} polynomial"
        )));
    }

    let columns: Vec<Vec<f64>> = (0..=order)
        .map(|k| pts.iter().map(|(xi, _)| xi.powi(k as i32)).collect())
        .collect();
    let ys: Vec<f64> = pts.iter().map(|(_, yi)| *yi).collect();
    let beta = lstsq::solve(&columns, &ys)
        .ok_or_else(|| Error::DegenerateFit("Vandermonde matrix is numerically rank deficient".into()))?;
    Polynomial::new(beta).map_err(|e| Error::DegenerateFit(e.to_string()))
}

/// Mean absolute error.
pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    error_stats(y_true, y_pred).map(|s| s.mae_mm)
}

/// Mean and population standard deviation of absolute errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae_mm: f64,
    pub sd_mm: f64,
    pub samples: usize,
}

pub fn error_stats(y_true: &[f64], y_pred: &[f64]) -> Result<ErrorStats> {
    if y_true.len() != y_pred.len() {
        return Err(Error::arg(format!(
            "length mismatch ({} vs {})",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::arg("cannot compute an error over zero samples"));
    }
    let n = y_true.len() as f64;
    let abs: Vec<f64> = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).collect();
    let mean = abs.iter().sum::<f64>() / n;
    let var = abs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(ErrorStats {
        mae_mm: mean,
        sd_mm: var.sqrt(),
        samples: abs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    SY,
    SZ,
}

impl Channel {
    pub fn read(self, s: &SurrogateSample) -> f64 {
        match self {
            Channel::SY => s.s_y,
            Channel::SZ => s.s_z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionAxis {
    Si,
    Ap,
}

/// Which surrogate channel drives each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMap {
    pub si: Channel,
    pub ap: Channel,
}

impl Default for ChannelMap {
    fn default() -> Self {
        ChannelMap {
            si: Channel::SZ,
            ap: Channel::SY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    pub order: usize,
    pub channels: ChannelMap,
    /// Pooled hold surrogate variance below which the hold model becomes a
    /// constant predictor.
    pub hold_variance_floor_mm2: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            order: 2,
            channels: ChannelMap::default(),
            hold_variance_floor_mm2: 1e-6,
        }
    }
}

/// One fitted model with its error record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub polynomial: Polynomial,
    pub input_channel: Channel,
    pub output_axis: MotionAxis,
    /// True when the pooled input was too flat to fit and the mean target
    /// position is used instead.
    pub constant_fallback: bool,
    pub train: Option<ErrorStats>,
    pub test: Option<ErrorStats>,
}

impl ModelEntry {
    pub fn estimate(&self, s: &SurrogateSample) -> f64 {
        self.polynomial.estimate(self.input_channel.read(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisModels {
    pub si: ModelEntry,
    pub ap: ModelEntry,
}

/// Which half of the bank served an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Regular,
    BreathHold,
}

impl ModelClass {
    pub fn of(phase: Phase) -> Self {
        if phase.is_hold() {
            ModelClass::BreathHold
        } else {
            ModelClass::Regular
        }
    }
}

/// Displacement estimate for both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub si: f64,
    pub ap: f64,
    pub class: ModelClass,
}

/// Regular-breathing and breath-hold models for both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBank {
    pub order: usize,
    pub regular: AxisModels,
    pub breath_hold: AxisModels,
}

impl ModelBank {
    pub fn models(&self, class: ModelClass) -> &AxisModels {
        match class {
            ModelClass::Regular => &self.regular,
            ModelClass::BreathHold => &self.breath_hold,
        }
    }

    pub fn estimate(&self, phase: Phase, s: &SurrogateSample) -> Estimate {
        let class = ModelClass::of(phase);
        let m = self.models(class);
        Estimate {
            si: m.si.estimate(s),
            ap: m.ap.estimate(s),
            class,
        }
    }

    /// Entries as (class, axis, entry) in table order.
    pub fn entries(&self) -> [(ModelClass, MotionAxis, &ModelEntry); 4] {
        [
            (ModelClass::Regular, MotionAxis::Ap, &self.regular.ap),
            (ModelClass::BreathHold, MotionAxis::Ap, &self.breath_hold.ap),
            (ModelClass::Regular, MotionAxis::Si, &self.regular.si),
            (ModelClass::BreathHold, MotionAxis::Si, &self.breath_hold.si),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::arg(format!("invalid model bank JSON: {e}")))
    }
}

/// Sample indices of one class.
fn class_indices(pair: &TrainingPair, class: ModelClass) -> Vec<usize> {
    pair.phases
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p {
            Some(p) if ModelClass::of(*p) == class => Some(i),
            _ => None,
        })
        .collect()
}

fn axis_values(pair: &TrainingPair, idx: &[usize], channel: Channel, axis: MotionAxis) -> (Vec<f64>, Vec<f64>) {
    idx.iter()
        .map(|&i| {
            let x = channel.read(&pair.surrogate[i]);
            let g = &pair.ground_truth[i];
            let y = match axis {
                MotionAxis::Si => g.d_si,
                MotionAxis::Ap => g.d_ap,
            };
            (x, y)
        })
        .unzip()
}

fn check_labels(pair: &TrainingPair) -> Result<()> {
    if pair.surrogate.len() != pair.ground_truth.len() {
        return Err(Error::arg("training pair traces differ in length"));
    }
    if pair.phases.len() != pair.ground_truth.len() {
        return Err(Error::IncompleteTraining("training pair has no phase labels".into()));
    }
    Ok(())
}

fn fit_entry(
    pair: &TrainingPair,
    idx: &[usize],
    channel: Channel,
    axis: MotionAxis,
    order: usize,
    variance_floor: Option<f64>,
) -> Result<ModelEntry> {
    let (x, y) = axis_values(pair, idx, channel, axis);
    let n = x.len() as f64;
    let flat = variance_floor.is_some_and(|floor| {
        let mean = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n < floor
    });
    let polynomial = if flat {
        Polynomial::constant(y.iter().sum::<f64>() / n)
    } else {
        fit_polynomial(&x, &y, order)?
    };
    let pred: Vec<f64> = x.iter().map(|v| polynomial.estimate(*v)).collect();
    Ok(ModelEntry {
        polynomial,
        input_channel: channel,
        output_axis: axis,
        constant_fallback: flat,
        train: Some(error_stats(&y, &pred)?),
        test: None,
    })
}

/// Fit the regular-breathing and pooled breath-hold models.
///
/// Breath-hold models are capped at order 2: the three hold positions are the
/// only distinct levels in the pooled data, and a quadratic already passes
/// through all of them.
pub fn train_model_bank(pair: &TrainingPair, opts: &ModelOptions) -> Result<ModelBank> {
    check_labels(pair)?;
    if opts.order > MAX_ORDER {
        return Err(Error::arg(format!("model order {} exceeds {MAX_ORDER}", opts.order)));
    }
    let regular = class_indices(pair, ModelClass::Regular);
    if regular.is_empty() {
        return Err(Error::IncompleteTraining("no regular-breathing samples".into()));
    }
    for h in 1..=3u8 {
        if !pair.phases.contains(&Some(Phase::BreathHold(h))) {
            return Err(Error::IncompleteTraining(format!("no samples of breath-hold {h}")));
        }
    }
    let holds = class_indices(pair, ModelClass::BreathHold);
    let hold_order = opts.order.min(2);
    let ch = opts.channels;
    Ok(ModelBank {
        order: opts.order,
        regular: AxisModels {
            si: fit_entry(pair, &regular, ch.si, MotionAxis::Si, opts.order, None)?,
            ap: fit_entry(pair, &regular, ch.ap, MotionAxis::Ap, opts.order, None)?,
        },
        breath_hold: AxisModels {
            si: fit_entry(
                pair,
                &holds,
                ch.si,
                MotionAxis::Si,
                hold_order,
                Some(opts.hold_variance_floor_mm2),
            )?,
            ap: fit_entry(
                pair,
                &holds,
                ch.ap,
                MotionAxis::Ap,
                hold_order,
                Some(opts.hold_variance_floor_mm2),
            )?,
        },
    })
}

/// Fill in held-out errors. Classes absent from `test_pair` keep `test: None`.
pub fn evaluate_model_bank(bank: &ModelBank, test_pair: &TrainingPair) -> Result<ModelBank> {
    check_labels(test_pair)?;
    let mut out = bank.clone();
    for class in [ModelClass::Regular, ModelClass::BreathHold] {
        let idx = class_indices(test_pair, class);
        if idx.is_empty() {
            continue;
        }
        let models = match class {
            ModelClass::Regular => &mut out.regular,
            ModelClass::BreathHold => &mut out.breath_hold,
        };
        for entry in [&mut models.si, &mut models.ap] {
            let (x, y) = axis_values(test_pair, &idx, entry.input_channel, entry.output_axis);
            let pred: Vec<f64> = x.iter().map(|v| entry.polynomial.estimate(*v)).collect();
            entry.test = Some(error_stats(&y, &pred)?);
        }
    }
    Ok(out)
}
