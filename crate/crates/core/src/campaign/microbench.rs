//! Coalescing microbenchmark: one warp loading `n` distinct consecutive
//! floats, timed for every width policy, and the per-policy regression of
//! time on `n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::output::Sink;
use super::{par_map, CampaignConfig, RunOptions};
use crate::coalescer::CoalescingPolicy;
use crate::error::Result;
use crate::memsim::{Simulator, TimingParams};
use crate::stats::{snr, Comoments};

pub const WIDTHS: [u32; 4] = [8, 16, 32, 64];
pub const MAX_UNIQUE: u32 = 32;

const MICROBENCH_STREAM_SALT: u64 = 0x6d69_6372_6f62_656e;

/// One timed kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchRecord {
    pub policy: String,
    /// Set for fixed-width policies.
    pub width_bytes: Option<u32>,
    pub n_unique: u32,
    pub rep: u32,
    pub time: f64,
}

/// Regression of kernel time on the number of unique addresses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub policy: String,
    pub beta1: f64,
    pub beta0: f64,
    pub sigma_eps_sq: f64,
    pub sigma_n_sq: f64,
    pub snr: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchResult {
    pub reps: u32,
    pub sigma_eps: f64,
    pub rows: Vec<Table2Row>,
}

impl MicrobenchResult {
    pub fn row(&self, policy: &str) -> Option<&Table2Row> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// Orderings the fits are expected to show; returns the violated ones.
    pub fn ordering_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let fixed: Vec<&Table2Row> = WIDTHS.iter().filter_map(|w| self.row(&fixed_name(*w))).collect();
        for pair in fixed.windows(2) {
            if pair[1].beta1 >= pair[0].beta1 {
                out.push(format!(
                    "slope of {} ({:.4}) is not below {} ({:.4})",
                    pair[1].policy, pair[1].beta1, pair[0].policy, pair[0].beta1
                ));
            }
            if pair[1].snr >= pair[0].snr {
                out.push(format!(
                    "SNR of {} ({:.4}) is not below {} ({:.4})",
                    pair[1].policy, pair[1].snr, pair[0].policy, pair[0].snr
                ));
            }
        }
        let chain = [fixed_name(64), FIXED_RANDOM.to_string(), DYNAMIC.to_string()];
        for pair in chain.windows(2) {
            if let (Some(a), Some(b)) = (self.row(&pair[0]), self.row(&pair[1])) {
                if b.snr >= a.snr {
                    out.push(format!("SNR of {} ({:.4}) is not below {} ({:.4})", b.policy, b.snr, a.policy, a.snr));
                }
            }
        }
        out
    }
}

pub const FIXED_RANDOM: &str = "fixed_random";
pub const DYNAMIC: &str = "dynamic";

pub fn fixed_name(width: u32) -> String {
    format!("fixed{width}")
}

/// The policies of the sweep, in output order.
pub fn policies(cfg: &CampaignConfig) -> Vec<(String, CoalescingPolicy)> {
    let mut v: Vec<_> = WIDTHS.iter().map(|&w| (fixed_name(w), CoalescingPolicy::Fixed { width_bytes: w })).collect();
    v.push((FIXED_RANDOM.into(), CoalescingPolicy::FixedRandomPerKernel { distribution: cfg.microbench.fixed_random }));
    v.push((DYNAMIC.into(), CoalescingPolicy::DynamicPerLine { distribution: cfg.microbench.dynamic }));
    v
}

/// Runs every (policy, n) cell `reps` times. `sink` receives each kernel in
/// a fixed order: policy, then `n`, then repetition.
pub fn run_microbench(
    cfg: &CampaignConfig,
    opts: RunOptions,
    mut sink: Sink<'_, MicrobenchRecord>,
) -> Result<MicrobenchResult> {
    cfg.validate()?;
    let params = TimingParams { sigma_eps: cfg.microbench.sigma_eps, ..cfg.timing };
    let sim = Simulator::new(cfg.machine.clone(), params, cfg.mshr)?;
    let reps = cfg.microbench.reps;
    let policies = policies(cfg);
    let cells: Vec<(usize, u32)> = (0..policies.len()).flat_map(|p| (1..=MAX_UNIQUE).map(move |n| (p, n))).collect();
    let keep = sink.is_some();

    let results = par_map(cells, opts.parallel, |(p, n)| -> Result<(Comoments<2>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MICROBENCH_STREAM_SALT);
        rng.set_stream(((p as u64) << 8) | n as u64);
        let mut m = Comoments::default();
        let mut times = Vec::with_capacity(if keep { reps as usize } else { 0 });
        for _ in 0..reps {
            let (t, _) = sim.microbench_kernel(n, &policies[p].1, &mut rng)?;
            m.update(&[n as f64, t]);
            if keep {
                times.push(t);
            }
        }
        Ok((m, times))
    });

    let mut per_policy = vec![Comoments::<2>::default(); policies.len()];
    let cells = (0..policies.len()).flat_map(|p| (1..=MAX_UNIQUE).map(move |n| (p, n)));
    for ((p, n), cell) in cells.zip(results) {
        let (m, times) = cell?;
        per_policy[p].merge(&m);
        if let Some(sink) = sink.as_mut() {
            let (name, policy) = &policies[p];
            let width_bytes = match policy {
                CoalescingPolicy::Fixed { width_bytes } => Some(*width_bytes),
                _ => None,
            };
            for (rep, time) in times.into_iter().enumerate() {
                sink(&MicrobenchRecord { policy: name.clone(), width_bytes, n_unique: n, rep: rep as u32, time })?;
            }
        }
    }

    let rows = policies
        .iter()
        .zip(&per_policy)
        .map(|((name, _), m)| {
            let fit = m.fit(0, 1)?;
            let sigma_n_sq = m.var(0);
            let snr = snr(&fit, sigma_n_sq).map(|s| s.snr).unwrap_or(f64::INFINITY);
            Ok(Table2Row {
                policy: name.clone(),
                beta1: fit.beta1,
                beta0: fit.beta0,
                sigma_eps_sq: fit.sigma_eps_sq,
                sigma_n_sq,
                snr,
                r_squared: fit.r_squared,
                n_points: fit.n_points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MicrobenchResult { reps, sigma_eps: cfg.microbench.sigma_eps, rows })
}
