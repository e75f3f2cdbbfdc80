//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use breathsteer::haptics::{feedback_force, step_handle, HandInput, HandleState, Regime};
use breathsteer::model::fit_polynomial;
use breathsteer::session::{
    run_protocol, summarize, train_models, validate_insertion, InsertionError, Operator, OperatorAction,
    OperatorObservation, OperatorProfile, OperatorStatus, Scenario, Session, SessionReport,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::Range<u64> = 1..21;

/// Published insertion errors (eps_x, eps_y, eps_z, euclidean) in mm.
const TABLE_ROWS: [[f64; 4]; 5] = [
    [4.13, 8.35, 3.45, 9.93],
    [1.65, 11.58, 1.75, 11.83],
    [6.32, 14.51, 5.14, 16.64],
    [0.28, 3.11, 3.58, 4.75],
    [0.62, 1.19, 0.37, 1.39],
];

/// Published overall row: (mean, sd) per column.
const TABLE_OVERALL: [(f64, f64); 4] = [(2.60, 2.30), (7.75, 5.01), (2.86, 1.64), (8.91, 5.35)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn euclidean_anchor() -> Outcome {
    let center = Vector3::new(10.0, -20.0, 5.0);
    let mut worst: f64 = 0.0;
    for (i, row) in TABLE_ROWS.iter().enumerate() {
        // the sign of each component must not matter
        let signs = [1.0, -1.0];
        for sx in signs {
            for sz in signs {
                let tip = center + Vector3::new(sx * row[0], -row[1], sz * row[2]);
                let v = validate_insertion(&tip, &center, 3.0);
                let dev = (v.error.euclidean - row[3]).abs();
                if dev > 0.01 {
                    return outcome(false, format!("row {}: {:.4} vs {}", i + 1, v.error.euclidean, row[3]));
                }
                worst = worst.max(dev);
            }
        }
    }
    outcome(true, format!("max deviation {worst:.4} mm"))
}

fn overall_anchor() -> Outcome {
    let errors: Vec<InsertionError> = TABLE_ROWS
        .iter()
        .map(|r| InsertionError::from_eps(r[0], r[1], r[2]))
        .collect();
    let s = match summarize(&errors) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let got = [s.eps_x, s.eps_y, s.eps_z, s.euclidean];
    let mut worst: f64 = 0.0;
    for (g, (mean, sd)) in got.iter().zip(TABLE_OVERALL) {
        worst = worst.max((g.mean - mean).abs()).max((g.sd - sd).abs());
    }
    outcome(
        worst <= 0.01,
        format!(
            "{} / {} / {} / {} (max deviation {worst:.4} mm)",
            s.eps_x, s.eps_y, s.eps_z, s.euclidean
        ),
    )
}

fn ols_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let order = rng.random_range(0..=5usize);
        let coefficients: Vec<f64> = (0..=order).map(|_| rng.random_range(-10.0..=10.0)).collect();
        // one sample per cell of an even partition of [-2, 2]
        let x: Vec<f64> = (0..100)
            .map(|i| -2.0 + 0.04 * (i as f64 + rng.random_range(0.1..0.9)))
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| coefficients.iter().rev().fold(0.0, |acc, c| acc * xi + c))
            .collect();
        let fit = match fit_polynomial(&x, &y, order) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("case {case}: {e}")),
        };
        for (a, b) in fit.coefficients.iter().zip(&coefficients) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max coefficient error {worst:.2e}"))
}

fn default_noisy() -> Scenario {
    let mut s = Scenario::default();
    s.sensor.noise_sigma_mm = 0.2;
    s.model.order = 2;
    s
}

fn model_mae_below_3mm() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let mut sc = default_noisy();
        sc.seed = seed;
        // a training precedes the first insertion and every target move
        let indices = (0..sc.insertions.len()).filter(|&i| {
            i == 0 || sc.insertions[i].target_rest_position_mm != sc.insertions[i - 1].target_rest_position_mm
        });
        for index in indices {
            let (record, _) = match train_models(&sc, index) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("seed {seed}: {e}")),
            };
            for (class, axis, entry) in record.bank.entries() {
                let Some(test) = entry.test else {
                    return outcome(false, format!("seed {seed}: {class:?}/{axis:?} not evaluated"));
                };
                if !(test.mae_mm < 3.0) {
                    return outcome(false, format!("seed {seed}: {class:?}/{axis:?} test MAE {:.3}", test.mae_mm));
                }
                worst = worst.max(test.mae_mm);
            }
        }
    }
    outcome(true, format!("largest test MAE {worst:.3} mm"))
}

fn steering_asymmetry(reports: &[SessionReport]) -> Outcome {
    let mut si = 0.0;
    let mut ap = 0.0;
    let mut seeds_si_larger = 0;
    for r in reports {
        let Some(s) = r.steering else {
            return outcome(false, format!("seed {}: no steering samples", r.scenario.seed));
        };
        si += s.si.mean;
        ap += s.ap.mean;
        seeds_si_larger += usize::from(s.si.mean > s.ap.mean);
    }
    let n = reports.len() as f64;
    let (si, ap) = (si / n, ap / n);
    outcome(
        si > ap,
        format!(
            "mean SI {si:.3} mm vs AP {ap:.3} mm; SI larger in {seeds_si_larger}/{} seeds",
            reports.len()
        ),
    )
}

/// Pushes with a constant force from the first tick and finishes once it has
/// rested against the wall for `hold_s`.
struct ConstantPush {
    force_n: f64,
    hold_s: f64,
    wall_since: Option<f64>,
}

impl Operator for ConstantPush {
    fn begin_insertion(&mut self, _index: usize) {
        self.wall_since = None;
    }

    fn act(&mut self, obs: &OperatorObservation) -> OperatorAction {
        if obs.feedback.regime == Regime::Wall && self.wall_since.is_none() {
            self.wall_since = Some(obs.t);
        }
        let done = self.wall_since.is_some_and(|t0| obs.t - t0 >= self.hold_s);
        OperatorAction {
            input: HandInput::Push(self.force_n),
            status: if done {
                OperatorStatus::Finished
            } else {
                OperatorStatus::Working
            },
        }
    }
}

fn wall_equilibrium() -> Outcome {
    let mut sc = Scenario::noiseless();
    sc.haptics.wall_kp_n_per_mm = 2.0;
    sc.insertions.truncate(1);
    let expected = 1.0 / sc.haptics.wall_kp_n_per_mm;

    // closed loop on the handle alone
    let dt = 1.0 / sc.haptic_rate_hz;
    let depth = 5.0;
    let mut handle = HandleState::at_rest(0.0);
    let mut fb = feedback_force(&sc.haptics, &handle, depth);
    for _ in 0..(10.0 / dt) as usize {
        handle = step_handle(&handle, HandInput::Push(1.0), fb.force_n, &sc.handle, dt);
        fb = feedback_force(&sc.haptics, &handle, depth - handle.axial_position_mm);
    }
    let handle_pen = handle.axial_position_mm - depth;

    // full session
    let op = ConstantPush {
        force_n: 1.0,
        hold_s: 3.0,
        wall_since: None,
    };
    let report = match Session::with_operator(sc, Box::new(op)).and_then(Session::run_to_end) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let Some(rec) = report.insertions.first() else {
        return outcome(false, "no insertion recorded");
    };
    let session_pen = rec.penetration_mm;
    let pass = (handle_pen - expected).abs() <= 1e-3 && (session_pen - expected).abs() <= 1e-3 && !rec.timed_out;
    outcome(
        pass,
        format!("penetration {handle_pen:.5} mm (handle), {session_pen:.5} mm (session), expected {expected}"),
    )
}

fn force_cap(reports: &[SessionReport]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ticks = 0usize;
    for r in reports {
        for row in &r.traces.force {
            worst = worst.max(row.force_n.abs());
            ticks += 1;
        }
        worst = worst.max(r.max_force_n());
    }
    outcome(
        worst <= 5.0,
        format!("max |force| {worst:.4} N over {} runs, {ticks} haptic ticks", reports.len()),
    )
}

fn noiseless_end_to_end() -> Outcome {
    let sc = Scenario::noiseless();
    match run_protocol(&sc) {
        Ok(r) if r.is_complete() => {
            let worst = r.insertions.iter().map(|i| i.error.euclidean).fold(0.0, f64::max);
            outcome(worst < 0.5, format!("worst Euclidean error {worst:.4} mm over {} insertions", r.insertions.len()))
        }
        Ok(r) => outcome(false, format!("incomplete: {:?}", r.aborted)),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn replay_determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("breathsteer-acceptance-{}", std::process::id()));
    let mut checked = 0;
    for profile in [OperatorProfile::Ideal, OperatorProfile::Overshooter, OperatorProfile::Hesitant] {
        let mut sc = default_noisy();
        sc.operator = profile;
        let run = match run_protocol(&sc) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{profile}: {e}")),
        };
        if let Err(e) = run.write_bundle(&dir) {
            return outcome(false, e.to_string());
        }
        let stored = std::fs::read_to_string(dir.join("report.json")).expect("bundle written");
        let parsed: SessionReport = serde_json::from_str(&stored).expect("report parses");
        let replay = match run_protocol(&parsed.scenario) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{profile} replay: {e}")),
        };
        if replay.to_json() != stored {
            let _ = std::fs::remove_dir_all(&dir);
            return outcome(false, format!("{profile}: replayed report.json differs"));
        }
        checked += 1;
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(true, format!("{checked} scenarios byte-identical"))
}

fn main() -> ExitCode {
    let mut all_pass = true;
    let mut report = |name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(b) = budget {
            if took > b {
                o.pass = false;
                o.detail.push_str(&format!("; took {took:.2?}, budget {b:?}"));
            }
        }
        all_pass &= o.pass;
        println!(
            "{} {name}: {} [{took:.2?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    let secs = |s| Some(Duration::from_secs(s));

    report("euclidean anchor", secs(1), &mut euclidean_anchor);
    report("overall-row anchor", secs(1), &mut overall_anchor);
    report("OLS recovery", secs(5), &mut ols_recovery);
    report("model test MAE below 3 mm", secs(30), &mut model_mae_below_3mm);

    let mut runs: Vec<SessionReport> = Vec::new();
    report("steering SI exceeds AP", secs(60), &mut || {
        runs.clear();
        for seed in SEEDS {
            let mut sc = default_noisy();
            sc.seed = seed;
            match run_protocol(&sc) {
                Ok(r) => runs.push(r),
                Err(e) => return outcome(false, format!("seed {seed}: {e}")),
            }
        }
        steering_asymmetry(&runs)
    });

    report("wall equilibrium", secs(5), &mut wall_equilibrium);

    report("force cap", None, &mut || {
        for profile in [OperatorProfile::Overshooter, OperatorProfile::Hesitant] {
            for seed in SEEDS {
                let mut sc = default_noisy();
                sc.seed = seed;
                sc.operator = profile;
                match run_protocol(&sc) {
                    Ok(r) => runs.push(r),
                    Err(e) => return outcome(false, format!("{profile} seed {seed}: {e}")),
                }
            }
        }
        for profile in [OperatorProfile::Ideal, OperatorProfile::Overshooter, OperatorProfile::Hesitant] {
            let mut sc = Scenario::noiseless();
            sc.operator = profile;
            match run_protocol(&sc) {
                Ok(r) => runs.push(r),
                Err(e) => return outcome(false, format!("{profile} noiseless: {e}")),
            }
        }
        force_cap(&runs)
    });

    report("noiseless end-to-end", None, &mut noiseless_end_to_end);
    report("replay determinism", secs(30), &mut replay_determinism);

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
