//! Defense sweep: the attack campaign repeated under each countermeasure
//! setting, with effort and performance relative to the unprotected row.

use serde::{Deserialize, Serialize};

use super::attack::{run_attack, AttackSummary};
use super::{CampaignConfig, DefenseConfig, RunOptions};
use crate::coalescer::{CoalescingPolicy, WidthDistribution};
use crate::error::{Error, Result};
use crate::memsim::MshrMode;
use crate::rotation::RotationSchedule;
use crate::stats::samples_required;

pub const BASELINE: &str = "baseline";

/// Rows used when the configuration lists none.
pub fn default_sweep() -> Vec<DefenseConfig> {
    let dynamic = CoalescingPolicy::DynamicPerLine { distribution: WidthDistribution::mean32() };
    let row = |name: &str, policy: CoalescingPolicy, mshr, rotate_every, threads| DefenseConfig {
        name: name.into(),
        policy,
        mshr,
        rotate_every,
        threads,
        samples: None,
    };
    let fixed = CoalescingPolicy::default();
    let off = RotationSchedule::Off;
    vec![
        row(BASELINE, fixed, MshrMode::PerSmOnly, off, None),
        row(
            "fixed_random",
            CoalescingPolicy::FixedRandomPerKernel { distribution: WidthDistribution::mean32() },
            MshrMode::PerSmOnly,
            off,
            None,
        ),
        row("dynamic", dynamic, MshrMode::PerSmOnly, off, None),
        row("dynamic_hierarchical", dynamic, MshrMode::Hierarchical, off, Some(960)),
        row("rotate_1000", fixed, MshrMode::PerSmOnly, RotationSchedule::Every(1000), None),
        row("rotate_1", fixed, MshrMode::PerSmOnly, RotationSchedule::Every(1), None),
        row(
            "dynamic_hierarchical_rotate_1000",
            dynamic,
            MshrMode::Hierarchical,
            RotationSchedule::Every(1000),
            Some(960),
        ),
    ]
}

/// One line of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub name: String,
    pub threads: usize,
    pub samples: u64,
    /// Mean signed true-key correlation over the targeted bytes.
    pub rho_peak: f64,
    pub rho_ave: f64,
    pub recovered_bytes: usize,
    /// Samples needed to recover every targeted byte: measured when all
    /// were recovered, otherwise extrapolated from `rho_peak`.
    pub effort: Option<f64>,
    /// The row did not recover every byte within its budget.
    pub saturated: bool,
    pub effort_multiplier: Option<f64>,
    pub mean_time: f64,
    pub time_per_block: f64,
    /// Baseline time per block over this row's time per block.
    pub relative_performance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseResult {
    pub rows: Vec<DefenseRow>,
    /// Measured over predicted all-bytes effort of the baseline row, used to
    /// scale extrapolations.
    pub model_scale: Option<f64>,
    pub campaigns: Vec<AttackSummary>,
}

fn predicted(rho_peak: f64, alpha: f64) -> Option<f64> {
    samples_required(rho_peak, 0.0, alpha).ok().map(|s| s as f64)
}

/// Runs every row of the sweep. `progress` is told when each row finishes.
pub fn run_defense_sweep(
    cfg: &CampaignConfig,
    opts: RunOptions,
    mut progress: impl FnMut(&AttackSummary, &DefenseConfig),
) -> Result<DefenseResult> {
    cfg.validate()?;
    let rows = if cfg.defenses.is_empty() { default_sweep() } else { cfg.defenses.clone() };
    let Some(base_idx) = rows.iter().position(|r| r.name == BASELINE) else {
        return Err(Error::Config(format!("the defense sweep needs a row named {BASELINE:?}")));
    };
    let mut campaigns = Vec::with_capacity(rows.len());
    for d in &rows {
        let row_cfg = cfg.with_defense(d);
        row_cfg.validate()?;
        let summary = run_attack(&row_cfg, row_cfg.attack.num_samples as u64, opts, None)?;
        progress(&summary, d);
        campaigns.push(summary);
    }

    let alpha = cfg.calibration.alpha;
    let base = &campaigns[base_idx];
    let model_scale = base
        .all_bytes_min_samples()
        .zip(predicted(base.mean_rho_peak(), alpha))
        .map(|(measured, pred)| measured as f64 / pred);
    let effort = |s: &AttackSummary| match s.all_bytes_min_samples() {
        Some(n) => Some(n as f64),
        None => model_scale.zip(predicted(s.mean_rho_peak(), alpha)).map(|(k, p)| k * p),
    };
    let base_effort = effort(base);
    let threads = |d: &DefenseConfig| d.threads.unwrap_or(cfg.batch.threads);
    let base_per_block = base.mean_time / threads(&rows[base_idx]) as f64;

    let table = rows
        .iter()
        .zip(&campaigns)
        .map(|(d, s)| {
            let e = effort(s);
            let per_block = s.mean_time / threads(d) as f64;
            DefenseRow {
                name: d.name.clone(),
                threads: threads(d),
                samples: s.samples,
                rho_peak: s.mean_rho_peak(),
                rho_ave: s.mean_rho_ave(),
                recovered_bytes: s.min_samples.iter().filter(|b| b.min_samples.value().is_some()).count(),
                effort: e,
                saturated: s.all_bytes_min_samples().is_none(),
                effort_multiplier: e.zip(base_effort).map(|(a, b)| a / b),
                mean_time: s.mean_time,
                time_per_block: per_block,
                relative_performance: base_per_block / per_block,
            }
        })
        .collect();
    Ok(DefenseResult { rows: table, model_scale, campaigns })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CampaignConfig {
        let mut cfg = CampaignConfig::with_seed(21);
        cfg.attack.num_samples = 300;
        cfg.attack.target_bytes = vec![0, 1];
        cfg.budget.probe_step = 100;
        cfg
    }

    #[test]
    fn baseline_row_required() {
        let mut cfg = small();
        cfg.defenses = vec![DefenseConfig {
            name: "other".into(),
            policy: CoalescingPolicy::default(),
            mshr: MshrMode::PerSmOnly,
            rotate_every: RotationSchedule::Off,
            threads: None,
            samples: None,
        }];
        assert!(matches!(run_defense_sweep(&cfg, RunOptions::default(), |_, _| ()), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_multiplier_is_one() {
        let mut cfg = small();
        let mut rows = default_sweep();
        rows.retain(|r| r.threads.is_none());
        rows.truncate(2);
        cfg.defenses = rows;
        cfg.timing.sigma_eps = 0.0;
        let res = run_defense_sweep(&cfg, RunOptions::default(), |_, _| ()).unwrap();
        let base = &res.rows[0];
        assert_eq!(base.name, BASELINE);
        assert_eq!(base.relative_performance, 1.0);
        if let Some(m) = base.effort_multiplier {
            assert_eq!(m, 1.0);
        }
        assert_eq!(res.campaigns.len(), 2);
    }

    #[test]
    fn default_sweep_is_valid() {
        let mut cfg = small();
        cfg.defenses = default_sweep();
        cfg.validate().unwrap();
        assert_eq!(cfg.defenses[0].name, BASELINE);
    }
}
