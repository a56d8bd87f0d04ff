//! Calibration: the simulator's own Table-2 fits, and the kernel noise that
//! puts the unprotected attack at a chosen sample count.

use serde::{Deserialize, Serialize};

use super::attack::run_attack;
use super::microbench::{run_microbench, MicrobenchResult};
use super::{CampaignConfig, RunOptions};
use crate::error::{Error, Result};
use crate::stats::samples_required;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub microbench: MicrobenchResult,
    /// Noise-free samples used for the leakage fit.
    pub samples: u64,
    /// Time regressed on the predicted last-round count at the true key,
    /// averaged over the targeted bytes.
    pub beta1: f64,
    pub beta0: f64,
    pub sigma_n_sq: f64,
    /// Residual variance without kernel noise (other bytes, other rounds, misses).
    pub sigma_0_sq: f64,
    pub rho_noise_free: f64,
    /// Correlation at which `target_samples` reach the configured success rate.
    pub target_rho: f64,
    pub target_snr: f64,
    /// Kernel noise standard deviation reaching `target_rho`; zero when the
    /// noise-free correlation is already below it.
    pub recommended_sigma_eps: f64,
}

/// Correlation whose required sample count at success rate `alpha` is `samples`.
pub fn rho_for_samples(samples: u64, alpha: f64) -> Result<f64> {
    let needs = |rho: f64| samples_required(rho, 0.0, alpha);
    let (mut lo, mut hi) = (0.0f64, 0.999_999f64);
    if needs(hi)? > samples {
        return Err(Error::Domain(format!("{samples} samples are too few for any correlation")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if needs(mid)? <= samples {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn run_calibration(cfg: &CampaignConfig, samples: u64, opts: RunOptions) -> Result<CalibrationResult> {
    cfg.validate()?;
    let microbench = run_microbench(cfg, opts, None)?;

    let mut quiet = cfg.clone();
    quiet.timing.sigma_eps = 0.0;
    quiet.budget.stop_when_recovered = false;
    let summary = run_attack(&quiet, samples, opts, None)?;
    let fits: Vec<_> = summary
        .truth
        .iter()
        .map(|t| t.fit_o.map(|f| (f, t.sigma_o * t.sigma_o, t.rho_to)))
        .collect::<Option<Vec<_>>>()
        .ok_or(Error::ZeroVariance("predicted transaction count"))?;
    let k = fits.len() as f64;
    let avg = |f: &dyn Fn(&(crate::stats::RegressionFit, f64, f64)) -> f64| fits.iter().map(f).sum::<f64>() / k;
    let beta1 = avg(&|x| x.0.beta1);
    let beta0 = avg(&|x| x.0.beta0);
    let sigma_0_sq = avg(&|x| x.0.sigma_eps_sq);
    let sigma_n_sq = avg(&|x| x.1);
    let rho_noise_free = avg(&|x| x.2);

    let target_rho = rho_for_samples(cfg.calibration.target_samples, cfg.calibration.alpha)?;
    let target_snr = target_rho * target_rho / (1.0 - target_rho * target_rho);
    let sigma_eps_sq = beta1 * beta1 * sigma_n_sq / target_snr - sigma_0_sq;
    Ok(CalibrationResult {
        microbench,
        samples: summary.samples,
        beta1,
        beta0,
        sigma_n_sq,
        sigma_0_sq,
        rho_noise_free,
        target_rho,
        target_snr,
        recommended_sigma_eps: sigma_eps_sq.max(0.0).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_inverts_sample_requirement() {
        for s in [50u64, 330, 2000, 100_000] {
            let rho = rho_for_samples(s, 0.9).unwrap();
            assert!(samples_required(rho, 0.0, 0.9).unwrap() <= s);
            assert!(samples_required(rho * 0.999, 0.0, 0.9).unwrap() >= s);
        }
        assert!((rho_for_samples(330, 0.9).unwrap() - 0.1).abs() < 2e-3);
    }

    #[test]
    fn calibration_reports_a_finite_noise_level() {
        let mut cfg = CampaignConfig::with_seed(5);
        cfg.microbench.reps = 5;
        cfg.attack.target_bytes = vec![0, 1];
        cfg.budget.probe_step = 200;
        let res = run_calibration(&cfg, 600, RunOptions::default()).unwrap();
        assert!(res.beta1 > 0.0);
        assert!(res.sigma_n_sq > 0.0);
        assert!(res.recommended_sigma_eps.is_finite());
        assert!(res.target_rho > 0.0 && res.target_rho < res.rho_noise_free);
    }
}
