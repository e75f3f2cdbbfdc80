//! Simulated electromagnetic surrogate sensor and trace synchronization.
//!
//! The sensor sits on the outside of the phantom and reports two displacement
//! channels. Its clock is not shared with the imaging system, so before a
//! correspondence model can be trained the two traces are aligned on the
//! abrupt phase changes at hold boundaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{sample_phantom, BreathingProfile, Phase, PhantomState, RespiratoryTimeline};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSample {
    pub t: f64,
    pub s_y: f64,
    pub s_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    pub t: f64,
    pub d_si: f64,
    pub d_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub gain_y: f64,
    pub gain_z: f64,
    pub crosstalk: f64,
    pub noise_sigma_mm: f64,
    pub latency_s: f64,
    pub sample_rate_hz: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            gain_y: 0.9,
            gain_z: 0.8,
            crosstalk: 0.1,
            noise_sigma_mm: 0.2,
            latency_s: 0.02,
            sample_rate_hz: 40.0,
        }
    }
}

impl SensorConfig {
    /// Unit gain, no crosstalk, noise or latency.
    pub fn ideal() -> Self {
        SensorConfig {
            gain_y: 1.0,
            gain_z: 1.0,
            crosstalk: 0.0,
            noise_sigma_mm: 0.0,
            latency_s: 0.0,
            sample_rate_hz: 40.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |f: &str| format!("sensor.{f}");
        for (name, v) in [
            ("gain_y", self.gain_y),
            ("gain_z", self.gain_z),
            ("crosstalk", self.crosstalk),
            ("noise_sigma_mm", self.noise_sigma_mm),
            ("latency_s", self.latency_s),
            ("sample_rate_hz", self.sample_rate_hz),
        ] {
            if !v.is_finite() {
                return Err(Error::scenario(p(name), "must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.crosstalk) {
            return Err(Error::scenario(p("crosstalk"), "must lie in [0, 1)"));
        }
        if self.noise_sigma_mm < 0.0 {
            return Err(Error::scenario(p("noise_sigma_mm"), "must be >= 0"));
        }
        if self.latency_s < 0.0 {
            return Err(Error::scenario(p("latency_s"), "must be >= 0"));
        }
        if self.sample_rate_hz <= 0.0 {
            return Err(Error::scenario(p("sample_rate_hz"), "must be > 0"));
        }
        Ok(())
    }
}

/// One sensor reading of `state`. The caller passes the state at
/// `t - latency`; the sample is stamped `state.t + latency`.
pub fn read_sensor(state: &PhantomState, cfg: &SensorConfig, rng: &mut RngStream) -> SurrogateSample {
    let ny = rng.gaussian(cfg.noise_sigma_mm);
    let nz = rng.gaussian(cfg.noise_sigma_mm);
    SurrogateSample {
        t: state.t + cfg.latency_s,
        s_y: cfg.gain_y * state.d_ap + cfg.crosstalk * state.d_si + ny,
        s_z: cfg.gain_z * state.d_si + cfg.crosstalk * state.d_ap + nz,
    }
}

/// Number of samples taken over `duration` at `rate`: both ends included.
pub fn sample_count(duration: f64, rate: f64) -> usize {
    // Tolerate representation error so 30 s at 15 Hz gives 451, not 450.
    (duration * rate + 1e-9).floor() as usize + 1
}

/// Record the sensor over the whole timeline. Timestamps are on the sensor's
/// own clock, which runs `clock_offset_s` ahead of the phantom clock.
pub fn acquire_surrogate(
    profile: &BreathingProfile,
    timeline: &RespiratoryTimeline,
    cfg: &SensorConfig,
    clock_offset_s: f64,
    rng: &mut RngStream,
) -> Result<Vec<SurrogateSample>> {
    let n = sample_count(timeline.extent(), cfg.sample_rate_hz);
    (0..n)
        .map(|k| {
            let t = k as f64 / cfg.sample_rate_hz;
            let state = sample_phantom(profile, timeline, (t - cfg.latency_s).max(0.0))?;
            let mut s = read_sensor(&state, cfg, rng);
            s.t = t + clock_offset_s;
            Ok(s)
        })
        .collect()
}

/// Exact target displacement sampled at the imaging frame rate.
pub fn acquire_ground_truth(
    profile: &BreathingProfile,
    timeline: &RespiratoryTimeline,
    rate_hz: f64,
) -> Result<Vec<GroundTruthSample>> {
    let n = sample_count(timeline.extent(), rate_hz);
    (0..n)
        .map(|k| {
            let t = k as f64 / rate_hz;
            let s = sample_phantom(profile, timeline, t)?;
            Ok(GroundTruthSample {
                t,
                d_si: s.d_si,
                d_ap: s.d_ap,
            })
        })
        .collect()
}

/// Surrogate and ground truth on a common clock, ready for model fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub surrogate: Vec<SurrogateSample>,
    pub ground_truth: Vec<GroundTruthSample>,
    /// Ground-truth time minus surrogate time for the same physical instant.
    pub alignment_offset_s: f64,
    /// Phase class of each sample; `None` marks samples too close to a phase
    /// change to be trusted.
    pub phases: Vec<Option<Phase>>,
}

impl TrainingPair {
    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }

    /// Label every sample with the timeline phase, leaving out samples within
    /// `guard_s` of a segment boundary.
    pub fn label_phases(&mut self, timeline: &RespiratoryTimeline, guard_s: f64) -> Result<()> {
        let bounds = timeline.boundaries();
        self.phases = self
            .ground_truth
            .iter()
            .map(|g| {
                if bounds.iter().any(|b| (g.t - b).abs() < guard_s) {
                    Ok(None)
                } else {
                    timeline.phase_at(g.t).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    pub search_window_s: f64,
    pub resolution_s: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            search_window_s: 1.0,
            resolution_s: 0.001,
        }
    }
}

/// Signal on the integer grid `k * h`, `k = first..first + values.len()`.
struct GridSignal {
    first: i64,
    values: Vec<f64>,
}

fn lerp(t0: f64, v0: f64, t1: f64, v1: f64, t: f64) -> f64 {
    if t1 == t0 {
        v0
    } else {
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

/// Linear interpolation of a sampled 2-channel trace at `t` (clamped to the
/// ends). `cursor` is advanced monotonically for sorted queries.
fn interp2(times: &[f64], a: &[f64], b: &[f64], t: f64, cursor: &mut usize) -> (f64, f64) {
    let n = times.len();
    if t <= times[0] {
        return (a[0], b[0]);
    }
    if t >= times[n - 1] {
        return (a[n - 1], b[n - 1]);
    }
    while *cursor + 1 < n - 1 && times[*cursor + 1] <= t {
        *cursor += 1;
    }
    let i = *cursor;
    (
        lerp(times[i], a[i], times[i + 1], a[i + 1], t),
        lerp(times[i], b[i], times[i + 1], b[i + 1], t),
    )
}

/// First-difference magnitude, over `span` grid steps, of a 2-channel trace
/// resampled to the grid.
fn diff_magnitude(times: &[f64], a: &[f64], b: &[f64], h: f64, span: usize) -> GridSignal {
    let first = (times[0] / h).ceil() as i64;
    let last = (times[times.len() - 1] / h).floor() as i64;
    let mut cursor = 0;
    let grid: Vec<(f64, f64)> = (first..=last)
        .map(|k| interp2(times, a, b, k as f64 * h, &mut cursor))
        .collect();
    let values = grid
        .iter()
        .zip(grid.iter().skip(span))
        .map(|(p, q)| ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt())
        .collect();
    // values[i] is the change from grid point first+i to first+i+span
    GridSignal { first, values }
}

/// Correlation of the surrogate, shifted by `offset` and interpolated at the
/// ground-truth sample times, with the ground truth: `s_y` against AP plus
/// `s_z` against SI.
fn sampled_correlation(st: &[f64], sy: &[f64], sz: &[f64], gt: &[GroundTruthSample], offset: f64) -> Option<f64> {
    let (first, last) = (st[0], st[st.len() - 1]);
    let mut cursor = 0;
    let mut acc = [[0.0; 5]; 2];
    let mut n = 0usize;
    let (mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY);
    for g in gt {
        let ts = g.t - offset;
        if ts < first || ts > last {
            continue;
        }
        let (vy, vz) = interp2(st, sy, sz, ts, &mut cursor);
        for (k, (x, y)) in [(vy, g.d_ap), (vz, g.d_si)].into_iter().enumerate() {
            acc[k][0] += x;
            acc[k][1] += y;
            acc[k][2] += x * x;
            acc[k][3] += y * y;
            acc[k][4] += x * y;
        }
        n += 1;
        t0 = t0.min(g.t);
        t1 = t1.max(g.t);
    }
    if n < 3 || t1 - t0 < 1.0 {
        return None;
    }
    let nf = n as f64;
    let mut score = 0.0;
    for [sx, sy, sxx, syy, sxy] in acc {
        let vx = sxx - sx * sx / nf;
        let vy = syy - sy * sy / nf;
        if vx > 0.0 && vy > 0.0 {
            score += (sxy - sx * sy / nf) / (vx * vy).sqrt();
        }
    }
    Some(score)
}

fn median_interval(times: &[f64]) -> f64 {
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Normalized cross-correlation of `a[k]` with `b[k + lag]` over the overlap.
fn ncc_at(a: &GridSignal, b: &GridSignal, lag: i64, min_overlap: usize) -> Option<f64> {
    let a_end = a.first + a.values.len() as i64;
    let b_end = b.first + b.values.len() as i64;
    let lo = a.first.max(b.first - lag);
    let hi = a_end.min(b_end - lag);
    if hi - lo < min_overlap as i64 {
        return None;
    }
    let av = &a.values[(lo - a.first) as usize..(hi - a.first) as usize];
    let bv = &b.values[(lo + lag - b.first) as usize..(hi + lag - b.first) as usize];
    let n = av.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in av.iter().zip(bv) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Align a surrogate trace with a ground-truth trace and resample both onto
/// the ground-truth clock.
///
/// The offset maximizes the normalized cross-correlation of the two traces'
/// first-difference magnitudes; hold boundaries show up as sharp spikes in
/// both. That estimate is then refined within one sample interval by
/// correlating `s_y` with AP and `s_z` with SI at the ground-truth sample
/// times. The returned pair has empty phase labels.
pub fn synchronize(
    surrogate: &[SurrogateSample],
    ground_truth: &[GroundTruthSample],
    cfg: &SyncConfig,
) -> Result<TrainingPair> {
    if surrogate.len() < 2 || ground_truth.len() < 2 {
        return Err(Error::SynchronizationFailed("traces need at least two samples".into()));
    }
    let sorted = |t: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = t.collect();
        v.windows(2).all(|w| w[1] > w[0])
    };
    if !sorted(&mut surrogate.iter().map(|s| s.t)) || !sorted(&mut ground_truth.iter().map(|g| g.t)) {
        return Err(Error::arg("trace timestamps must be strictly increasing"));
    }
    if !(cfg.resolution_s > 0.0 && cfg.search_window_s >= 0.0) {
        return Err(Error::arg("invalid synchronization window"));
    }
    let h = cfg.resolution_s;

    let st: Vec<f64> = surrogate.iter().map(|s| s.t).collect();
    let sy: Vec<f64> = surrogate.iter().map(|s| s.s_y).collect();
    let sz: Vec<f64> = surrogate.iter().map(|s| s.s_z).collect();
    let gt: Vec<f64> = ground_truth.iter().map(|g| g.t).collect();
    let gsi: Vec<f64> = ground_truth.iter().map(|g| g.d_si).collect();
    let gap: Vec<f64> = ground_truth.iter().map(|g| g.d_ap).collect();

    // both differences span the coarser sampling interval so a phase jump
    // leaves a kernel of the same shape, centered on the jump, in each
    let span = ((median_interval(&st).max(median_interval(&gt)) / h).round() as usize).max(1);
    let a = diff_magnitude(&st, &sy, &sz, h, span);
    let b = diff_magnitude(&gt, &gsi, &gap, h, span);
    if variance(&a.values) < 1e-18 || variance(&b.values) < 1e-18 {
        return Err(Error::SynchronizationFailed(
            "no phase transition detected: trace is flat".into(),
        ));
    }

    let max_lag = (cfg.search_window_s / h).round() as i64;
    let min_overlap = (1.0 / h).ceil() as usize;
    let mut best: Option<(i64, f64)> = None;
    for lag in -max_lag..=max_lag {
        let Some(c) = ncc_at(&a, &b, lag, min_overlap) else {
            continue;
        };
        best = match best {
            None => Some((lag, c)),
            Some((bl, bc)) if c > bc || (c == bc && lag.abs() < bl.abs()) => Some((lag, c)),
            keep => keep,
        };
    }
    let (coarse, _) = best.ok_or_else(|| {
        Error::SynchronizationFailed("traces do not overlap within the search window".into())
    })?;

    // The markers fix the offset only to within one sample interval of the
    // coarser trace. Refine there on the displacements, evaluated only where
    // the ground truth was actually sampled.
    let mut lag = coarse;
    let mut best_score = f64::NEG_INFINITY;
    for l in (coarse - span as i64)..=(coarse + span as i64) {
        let Some(score) = sampled_correlation(&st, &sy, &sz, ground_truth, l as f64 * h) else {
            continue;
        };
        if score > best_score || (score == best_score && l.abs() < lag.abs()) {
            best_score = score;
            lag = l;
        }
    }
    let offset = lag as f64 * h;

    let (s_first, s_last) = (st[0], st[st.len() - 1]);
    let mut cursor = 0;
    let mut pair = TrainingPair {
        surrogate: Vec::new(),
        ground_truth: Vec::new(),
        alignment_offset_s: offset,
        phases: Vec::new(),
    };
    for g in ground_truth {
        let ts = g.t - offset;
        if ts < s_first - 1e-12 || ts > s_last + 1e-12 {
            continue;
        }
        let (vy, vz) = interp2(&st, &sy, &sz, ts, &mut cursor);
        pair.surrogate.push(SurrogateSample { t: g.t, s_y: vy, s_z: vz });
        pair.ground_truth.push(*g);
    }
    let span = match (pair.ground_truth.first(), pair.ground_truth.last()) {
        (Some(f), Some(l)) => l.t - f.t,
        _ => 0.0,
    };
    if span < 1.0 {
        return Err(Error::SynchronizationFailed(format!(
            "common window of {span:.3} s is shorter than 1 s"
        )));
    }
    Ok(pair)
}

pub fn write_surrogate_csv<W: Write>(w: W, trace: &[SurrogateSample]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in trace {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_surrogate_csv<R: Read>(r: R) -> Result<Vec<SurrogateSample>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_ground_truth_csv<W: Write>(w: W, trace: &[GroundTruthSample]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in trace {
        wr.serialize(s)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ground_truth_csv<R: Read>(r: R) -> Result<Vec<GroundTruthSample>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Phase;
    use crate::rng::StreamId;
    use approx::assert_abs_diff_eq;

    fn state(d_si: f64, d_ap: f64) -> PhantomState {
        PhantomState {
            t: 1.0,
            d_si,
            d_ap,
            d_lat: 0.0,
            phase: Phase::Regular,
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let cfg = SensorConfig {
            noise_sigma_mm: 0.0,
            ..Default::default()
        };
        let mut rng = RngStream::new(0, StreamId::TrainingSensor);
        let s = read_sensor(&state(0.0, 0.0), &cfg, &mut rng);
        assert_eq!((s.s_y, s.s_z), (0.0, 0.0));
    }

    #[test]
    fn unit_gain_pass_through() {
        let cfg = SensorConfig::ideal();
        let mut rng = RngStream::new(0, StreamId::TrainingSensor);
        let s = read_sensor(&state(7.0, 3.0), &cfg, &mut rng);
        assert_eq!(s.s_z, 7.0);
        assert_eq!(s.s_y, 3.0);
    }

    #[test]
    fn gain_and_crosstalk() {
        let cfg = SensorConfig {
            gain_z: 0.8,
            crosstalk: 0.1,
            noise_sigma_mm: 0.0,
            ..Default::default()
        };
        let mut rng = RngStream::new(0, StreamId::TrainingSensor);
        let s = read_sensor(&state(10.0, 4.0), &cfg, &mut rng);
        assert_abs_diff_eq!(s.s_z, 8.4, epsilon = 1e-12);
    }

    #[test]
    fn sample_counts() {
        assert_eq!(sample_count(30.0, 15.0), 451);
        assert_eq!(sample_count(30.0, 40.0), 1201);
        assert_eq!(sample_count(1.05, 10.0), 11);
    }

    #[test]
    fn flat_traces_fail_to_synchronize() {
        let s: Vec<_> = (0..100)
            .map(|k| SurrogateSample {
                t: k as f64 * 0.025,
                s_y: 1.0,
                s_z: 2.0,
            })
            .collect();
        let g: Vec<_> = (0..40)
            .map(|k| GroundTruthSample {
                t: k as f64 / 15.0,
                d_si: 3.0,
                d_ap: 1.0,
            })
            .collect();
        let err = synchronize(&s, &g, &SyncConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SynchronizationFailed(_)));
    }

    #[test]
    fn csv_columns() {
        let trace = vec![SurrogateSample {
            t: 0.5,
            s_y: 1.25,
            s_z: -2.0,
        }];
        let mut buf = Vec::new();
        write_surrogate_csv(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,s_y,s_z\n"));
        assert_eq!(read_surrogate_csv(buf.as_slice()).unwrap(), trace);

        let gt = vec![GroundTruthSample {
            t: 0.0,
            d_si: 4.0,
            d_ap: 2.0,
        }];
        let mut buf = Vec::new();
        write_ground_truth_csv(&mut buf, &gt).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t,d_si,d_ap\n"));
        assert_eq!(read_ground_truth_csv(buf.as_slice()).unwrap(), gt);
    }
}
