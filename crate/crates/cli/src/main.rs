use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use coallab::campaign::analyze::{analyze, ATTACK_KIND};
use coallab::campaign::attack::run_attack;
use coallab::campaign::calibrate::run_calibration;
use coallab::campaign::defense::run_defense_sweep;
use coallab::campaign::microbench::{run_microbench, MicrobenchRecord};
use coallab::campaign::output::{create_dir, write_csv, write_json, CsvSink, Envelope, JsonLines, Sink, Stopwatch};
use coallab::campaign::{CampaignConfig, RunOptions};
use coallab::memsim::TimingSample;

/// Exit status when a run completed but an expectation or check failed.
const CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "coallab", version, about = "GPU coalescing timing side-channel laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the coalescing microbenchmark and fit time against unique addresses.
    Microbench {
        #[command(flatten)]
        common: Common,
        /// Exit nonzero if the slope or SNR orderings are violated.
        #[arg(long)]
        check: bool,
    },
    /// Collect timing samples and attack the last-round key.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack only this byte position.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..16))]
        byte: Option<u8>,
        /// Exit nonzero unless every targeted byte ends at rank 1.
        #[arg(long)]
        expect_success: bool,
    },
    /// Attack every row of the defense sweep.
    Defend {
        #[command(flatten)]
        common: Common,
    },
    /// Check stored attack results against the statistical models.
    Analyze {
        /// Attack result files (attack.json).
        inputs: Vec<PathBuf>,
        /// Directory for analysis.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Target success rate of the sample-count model.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Fit the microbenchmark and recommend the kernel noise level.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Campaign configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the configuration's.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample budget (microbench: repetitions per cell).
    #[arg(long)]
    samples: Option<u64>,
    /// Output directory; overrides the configuration's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

impl Common {
    fn load(&self) -> Result<CampaignConfig> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => CampaignConfig::load(path)?,
            (None, Some(seed)) => CampaignConfig::with_seed(seed),
            (None, None) => bail!("a seed is required: pass --seed or a --config that sets one"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions { parallel: self.parallel.max(1) }
    }
}

#[derive(Serialize)]
struct CorrelationRow {
    byte_pos: usize,
    guess: u8,
    correlation: f64,
}

#[derive(Serialize)]
struct FixedRow {
    width_bytes: u32,
    n_unique: u32,
    rep: u32,
    time: f64,
}

#[derive(Serialize)]
struct RandomizedRow<'a> {
    policy: &'a str,
    n_unique: u32,
    rep: u32,
    time: f64,
}

fn finish<T: Serialize>(
    dir: &Path,
    kind: &str,
    cfg: &CampaignConfig,
    result: T,
    clock: &Stopwatch,
    parallel: usize,
) -> Result<()> {
    write_json(&dir.join(format!("{kind}.json")), &Envelope::new(kind, cfg, result))?;
    write_json(&dir.join(format!("{kind}.metadata.json")), &clock.finish(kind, parallel))?;
    Ok(())
}

fn microbench(common: &Common, check: bool) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(reps) = common.samples {
        cfg.microbench.reps = u32::try_from(reps).context("--samples too large for microbench repetitions")?;
    }
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let clock = Stopwatch::start();
    let mut fixed = CsvSink::create(&dir.join("microbench.csv"))?;
    let mut randomized = CsvSink::create(&dir.join("microbench_randomized.csv"))?;
    let mut sink = |r: &MicrobenchRecord| match r.width_bytes {
        Some(width_bytes) => fixed.push(&FixedRow { width_bytes, n_unique: r.n_unique, rep: r.rep, time: r.time }),
        None => randomized.push(&RandomizedRow { policy: &r.policy, n_unique: r.n_unique, rep: r.rep, time: r.time }),
    };
    let result = run_microbench(&cfg, common.options(), Some(&mut sink))?;
    fixed.finish()?;
    randomized.finish()?;
    write_csv(&dir.join("table2.csv"), &result.rows)?;
    for row in &result.rows {
        println!(
            "{:<14} beta1 {:>9.4}  beta0 {:>9.3}  snr {:>10.4}  r2 {:.3}",
            row.policy, row.beta1, row.beta0, row.snr, row.r_squared
        );
    }
    let violations = result.ordering_violations();
    finish(&dir, "microbench", &cfg, result, &clock, common.parallel)?;
    for v in &violations {
        eprintln!("ordering violated: {v}");
    }
    Ok(if check && !violations.is_empty() { CHECK_FAILED } else { 0 })
}

fn attack(common: &Common, byte: Option<u8>, expect_success: bool) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(n) = common.samples {
        cfg.attack.num_samples = n as usize;
    }
    if let Some(b) = byte {
        cfg.attack.target_bytes = vec![b];
    }
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let clock = Stopwatch::start();
    let mut store = if cfg.output.store_samples { Some(JsonLines::create(&dir.join("samples.jsonl"))?) } else { None };
    let mut push = |s: &TimingSample| store.as_mut().expect("store enabled").push(s);
    let sink: Sink<'_, TimingSample> = if cfg.output.store_samples { Some(&mut push) } else { None };
    let summary = run_attack(&cfg, cfg.attack.num_samples as u64, common.options(), sink)?;
    if let Some(s) = store {
        s.finish()?;
    }

    write_csv(
        &dir.join("correlations.csv"),
        summary.report.bytes.iter().flat_map(|r| {
            r.correlations.iter().enumerate().map(|(g, &c)| CorrelationRow {
                byte_pos: r.byte_pos,
                guess: g as u8,
                correlation: c,
            })
        }),
    )?;
    write_csv(&dir.join("trajectory.csv"), &summary.trajectory)?;

    let mut all_rank1 = true;
    for (r, m) in summary.report.bytes.iter().zip(&summary.min_samples) {
        let rank = r.rank_of_true_key.unwrap_or(0);
        all_rank1 &= rank == 1;
        let effort = match m.min_samples.value() {
            Some(n) => format!("recovered after {n} samples"),
            None => format!("not recovered within {} samples (saturated)", summary.samples),
        };
        println!(
            "byte {:>2}: guess {:02x} true {:02x} rank {:>3} rho {:+.4}  {effort}",
            r.byte_pos,
            r.best_guess,
            summary.round10_key[r.byte_pos],
            rank,
            r.rho(summary.round10_key[r.byte_pos])
        );
    }
    if summary.report.success {
        println!("master key {}", hex(&summary.report.recovered_master));
    }
    info!("{} samples, mean kernel time {:.1}", summary.samples, summary.mean_time);
    finish(&dir, ATTACK_KIND, &cfg, summary, &clock, common.parallel)?;
    if expect_success && !all_rank1 {
        eprintln!("expected every targeted byte at rank 1");
        return Ok(CHECK_FAILED);
    }
    Ok(0)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn defend(common: &Common) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(n) = common.samples {
        cfg.attack.num_samples = n as usize;
        for d in &mut cfg.defenses {
            d.samples = None;
        }
    }
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let clock = Stopwatch::start();
    let result = run_defense_sweep(&cfg, common.options(), |s, d| {
        info!("{}: {} samples, rho_peak {:+.4}", d.name, s.samples, s.mean_rho_peak());
    })?;
    write_csv(&dir.join("defense.csv"), &result.rows)?;
    for r in &result.rows {
        let mult = r.effort_multiplier.map_or("n/a".to_string(), |m| format!("{m:.1}x"));
        let sat = if r.saturated { " (saturated, extrapolated)" } else { "" };
        println!("{:<34} rho {:+.4}  effort {mult}{sat}  perf {:.3}", r.name, r.rho_peak, r.relative_performance);
    }
    finish(&dir, "defense", &cfg, result, &clock, common.parallel)?;
    Ok(0)
}

fn run_analyze(inputs: &[PathBuf], out: Option<&Path>, alpha: Option<f64>) -> Result<u8> {
    let report = analyze(inputs, alpha)?;
    for c in &report.campaigns {
        println!("{}: {} samples", c.path.display(), c.samples);
        if let Some(r) = c.prediction_ratio {
            println!("  predicted / measured samples: {r:.2}");
        }
        if let Some(h) = &c.hardware {
            println!(
                "  noise attenuation: formula {:.5} measured {:.5} (error {:.1}%)",
                h.formula,
                h.measured,
                100.0 * h.relative_error
            );
        }
        if let Some(s) = &c.rotation {
            println!(
                "  rotation attenuation: formula {:.5} measured {:.5} (error {:.1}%)",
                s.formula,
                s.measured,
                100.0 * s.relative_error
            );
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("analysis.json"), &report)?;
    }
    Ok(0)
}

fn calibrate(common: &Common) -> Result<u8> {
    let cfg = common.load()?;
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let clock = Stopwatch::start();
    let result = run_calibration(&cfg, common.samples.unwrap_or(20_000), common.options())?;
    write_csv(&dir.join("table2.csv"), &result.microbench.rows)?;
    println!(
        "beta1 {:.4}  sigma_n^2 {:.4}  noise-free residual {:.2}",
        result.beta1, result.sigma_n_sq, result.sigma_0_sq
    );
    println!("noise-free rho {:.4}, target rho {:.4}", result.rho_noise_free, result.target_rho);
    println!("recommended timing.sigma_eps = {:.1}", result.recommended_sigma_eps);
    finish(&dir, "calibration", &cfg, result, &clock, common.parallel)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let status = match &cli.command {
        Command::Microbench { common, check } => microbench(common, *check),
        Command::Attack { common, byte, expect_success } => attack(common, *byte, *expect_success),
        Command::Defend { common } => defend(common),
        Command::Analyze { inputs, out, alpha } => {
            if inputs.is_empty() {
                eprintln!("error: analyze needs at least one result file");
                return ExitCode::from(2);
            }
            run_analyze(inputs, out.as_deref(), *alpha)
        }
        Command::Calibrate { common } => calibrate(common),
    };
    match status {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
