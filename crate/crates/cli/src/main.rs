use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use breathsteer::session::{run_protocol, OperatorProfile, Scenario, SessionReport};
use breathsteer_bridge::{serve, ServeConfig, DEFAULT_PORT};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "breathsteer", version, about = "Breath-hold needle steering simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one session and write its report bundle.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded repeats, optionally over several sensor noise levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        repeat: u64,
        /// Sensor noise levels in mm; the scenario's own level when omitted.
        #[arg(long, value_delimiter = ',')]
        noise: Vec<f64>,
    },
    /// Re-run the scenario stored in a report and compare byte for byte.
    Replay {
        #[arg(long)]
        report: PathBuf,
        /// Where to write the replayed bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a live session to the browser console.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Session seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Write the report bundle here when the session ends.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    operator: Option<OperatorProfile>,
}

impl Common {
    fn load(&self) -> Result<Scenario> {
        let text = fs::read_to_string(&self.scenario)
            .with_context(|| format!("cannot read scenario {}", self.scenario.display()))?;
        let mut scenario =
            Scenario::from_json(&text).with_context(|| format!("invalid scenario {}", self.scenario.display()))?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        if let Some(op) = self.operator {
            scenario.operator = op;
        }
        Ok(scenario)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, out } => {
            let scenario = common.load()?;
            if scenario.operator == OperatorProfile::Live {
                bail!("the live operator needs `serve`");
            }
            let report = run_protocol(&scenario)?;
            write_report(&report, &out)?;
            print!("{}", report.summary_text());
            if !report.is_complete() {
                bail!("session incomplete");
            }
            Ok(())
        }
        Command::Sweep {
            common,
            out,
            repeat,
            noise,
        } => sweep(common.load()?, &out, repeat, &noise),
        Command::Replay { report, out } => replay(&report, out.as_deref()),
        Command::Serve {
            common,
            port,
            speed,
            out,
        } => {
            let mut scenario = common.load()?;
            scenario.operator = OperatorProfile::Live;
            let runtime = tokio::runtime::Runtime::new()?;
            let report = runtime.block_on(async {
                let mut handle = serve(
                    scenario,
                    ServeConfig {
                        port,
                        speed,
                        ..ServeConfig::default()
                    },
                )
                .await?;
                println!("serving on ws://{}", handle.local_addr());
                handle.finished().await
            })?;
            if let Some(out) = out {
                write_report(&report, &out)?;
            }
            print!("{}", report.summary_text());
            if !report.is_complete() {
                bail!("session incomplete");
            }
            Ok(())
        }
    }
}

fn write_report(report: &SessionReport, dir: &Path) -> Result<()> {
    report
        .write_bundle(dir)
        .with_context(|| format!("cannot write report to {}", dir.display()))
}

fn replay(path: &Path, out: Option<&Path>) -> Result<()> {
    let stored = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let original: SessionReport =
        serde_json::from_str(&stored).with_context(|| format!("{} is not a session report", path.display()))?;
    let report = run_protocol(&original.scenario)?;
    if let Some(out) = out {
        write_report(&report, out)?;
    }
    if report.to_json() == stored {
        println!("identical");
        Ok(())
    } else {
        println!("differs");
        bail!("replay of {} is not byte-identical", path.display())
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    seed: u64,
    mean_test_mae_mm: Option<f64>,
    euclidean_mm: Option<f64>,
    eps_x_mm: Option<f64>,
    eps_y_mm: Option<f64>,
    eps_z_mm: Option<f64>,
    steering_si_mm: Option<f64>,
    steering_ap_mm: Option<f64>,
    max_force_n: f64,
    complete: bool,
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    noise_sigma_mm: f64,
    runs: usize,
    mean_test_mae_mm: f64,
    mean_euclidean_mm: f64,
    mean_eps_x_mm: f64,
    mean_eps_y_mm: f64,
    mean_eps_z_mm: f64,
    mean_steering_si_mm: f64,
    mean_steering_ap_mm: f64,
    max_force_n: f64,
    per_run: Vec<RunSummary>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sweep(base: Scenario, out: &Path, repeat: u64, noise: &[f64]) -> Result<()> {
    if base.operator == OperatorProfile::Live {
        bail!("sweeps need a scripted operator");
    }
    let levels = if noise.is_empty() {
        vec![base.sensor.noise_sigma_mm]
    } else {
        noise.to_vec()
    };
    let jobs: Vec<(f64, u64)> = levels
        .iter()
        .flat_map(|&n| (0..repeat).map(move |i| (n, base.seed + i)))
        .collect();
    fs::create_dir_all(out)?;
    let results: Vec<Result<(f64, RunSummary)>> = jobs
        .par_iter()
        .map(|&(noise_sigma, seed)| {
            let mut sc = base.clone();
            sc.seed = seed;
            sc.sensor.noise_sigma_mm = noise_sigma;
            let report = run_protocol(&sc).with_context(|| format!("noise {noise_sigma}, seed {seed}"))?;
            let dir = out.join("runs").join(format!("noise_{noise_sigma}_seed_{seed}"));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("report.json"), report.to_json())?;
            fs::write(dir.join("summary.txt"), report.summary_text())?;
            let overall = report.overall;
            Ok((
                noise_sigma,
                RunSummary {
                    seed,
                    mean_test_mae_mm: report.mean_test_mae_mm(),
                    euclidean_mm: overall.map(|o| o.euclidean.mean),
                    eps_x_mm: overall.map(|o| o.eps_x.mean),
                    eps_y_mm: overall.map(|o| o.eps_y.mean),
                    eps_z_mm: overall.map(|o| o.eps_z.mean),
                    steering_si_mm: report.steering.map(|s| s.si.mean),
                    steering_ap_mm: report.steering.map(|s| s.ap.mean),
                    max_force_n: report.max_force_n(),
                    complete: report.is_complete(),
                },
            ))
        })
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        runs.push(r?);
    }

    let mut summaries = Vec::new();
    for &level in &levels {
        let per_run: Vec<RunSummary> = runs
            .iter()
            .filter(|(n, _)| *n == level)
            .map(|(_, r)| r.clone())
            .collect();
        summaries.push(LevelSummary {
            noise_sigma_mm: level,
            runs: per_run.len(),
            mean_test_mae_mm: mean(per_run.iter().map(|r| r.mean_test_mae_mm)),
            mean_euclidean_mm: mean(per_run.iter().map(|r| r.euclidean_mm)),
            mean_eps_x_mm: mean(per_run.iter().map(|r| r.eps_x_mm)),
            mean_eps_y_mm: mean(per_run.iter().map(|r| r.eps_y_mm)),
            mean_eps_z_mm: mean(per_run.iter().map(|r| r.eps_z_mm)),
            mean_steering_si_mm: mean(per_run.iter().map(|r| r.steering_si_mm)),
            mean_steering_ap_mm: mean(per_run.iter().map(|r| r.steering_ap_mm)),
            max_force_n: per_run.iter().map(|r| r.max_force_n).fold(0.0, f64::max),
            per_run,
        });
    }

    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    let mut csv = String::from("noise_sigma_mm,mean_test_mae_mm,mean_euclidean_mm,runs\n");
    for s in &summaries {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.noise_sigma_mm, s.mean_test_mae_mm, s.mean_euclidean_mm, s.runs
        ));
    }
    fs::write(out.join("noise_vs_mae.csv"), &csv)?;
    print!("{csv}");
    if runs.iter().any(|(_, r)| !r.complete) {
        bail!("some sweep runs did not complete");
    }
    Ok(())
}
