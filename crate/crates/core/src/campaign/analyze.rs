//! Cross-checks of stored attack campaigns against the statistical models:
//! predicted versus measured sample counts, and both correlation
//! attenuation formulas.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attack::AttackSummary;
use super::output::{read_json, Envelope};
use super::CampaignConfig;
use crate::error::{Error, Result};
use crate::stats::{attenuate_hw, attenuate_sw, samples_required, AttenuationInputs};

pub const ATTACK_KIND: &str = "attack";

/// Tolerance of the attenuation cross-checks, relative to the measured value.
pub const ATTENUATION_TOLERANCE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BytePrediction {
    pub byte_pos: usize,
    pub rho_peak: f64,
    pub rho_ave: f64,
    pub measured: Option<u64>,
    /// Samples the model needs against the measured wrong-guess level.
    pub predicted: Option<u64>,
    /// Samples the model needs against a zero wrong-guess level.
    pub predicted_vs_zero: Option<u64>,
}

/// Formula value against a measured correlation, both averaged over bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationCheck {
    pub formula: f64,
    pub measured: f64,
    pub relative_error: f64,
    pub within_tolerance: bool,
}

impl AttenuationCheck {
    fn new(formula: f64, measured: f64) -> Self {
        let relative_error = ((formula - measured) / measured).abs();
        AttenuationCheck {
            formula,
            measured,
            relative_error,
            within_tolerance: relative_error <= ATTENUATION_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignAnalysis {
    pub path: PathBuf,
    pub samples: u64,
    pub bytes: Vec<BytePrediction>,
    /// Predicted over measured all-bytes sample count.
    pub prediction_ratio: Option<f64>,
    /// Noise attenuation with the SNR of this campaign and the correlation
    /// of `partner`, an independent campaign of the same configuration.
    pub hardware: Option<AttenuationCheck>,
    pub partner: Option<PathBuf>,
    /// Rotation attenuation with this campaign's match rate and deviations.
    pub rotation: Option<AttenuationCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub alpha: f64,
    pub campaigns: Vec<CampaignAnalysis>,
}

/// Loads an attack result, rejecting foreign schemas, other result kinds
/// and configurations that do not match their digest.
pub fn load_attack(path: &Path) -> Result<Envelope<AttackSummary>> {
    let raw: serde_json::Value = read_json(path)?;
    let kind = raw.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if kind != ATTACK_KIND {
        return Err(Error::Schema(format!("{}: expected an {ATTACK_KIND} result, found {kind:?}", path.display())));
    }
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(super::SCHEMA_VERSION as u64) {
        return Err(Error::Schema(format!(
            "{}: result schema {version:?} (expected {})",
            path.display(),
            super::SCHEMA_VERSION
        )));
    }
    let env: Envelope<AttackSummary> =
        serde_json::from_value(raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    env.check().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    Ok(env)
}

fn same_setting(a: &CampaignConfig, b: &CampaignConfig) -> bool {
    let strip = |c: &CampaignConfig| CampaignConfig { seed: 0, key: None, output: Default::default(), ..c.clone() };
    strip(a) == strip(b)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn hardware_check(snr_from: &AttackSummary, rho_from: &AttackSummary) -> Option<AttenuationCheck> {
    let formula = mean(
        snr_from
            .truth
            .iter()
            .map(|t| t.snr_o.filter(|s| *s > 0.0).map(|s| attenuate_hw(1.0, s)))
            .collect::<Option<Vec<_>>>()?
            .into_iter(),
    )?;
    let measured = mean(rho_from.truth.iter().map(|t| t.rho_to))?;
    Some(AttenuationCheck::new(formula, measured))
}

fn rotation_check(s: &AttackSummary) -> Option<AttenuationCheck> {
    let formula = mean(
        s.truth
            .iter()
            .map(|t| AttenuationInputs::new(t.rho_tn, t.p_match, t.sigma_n, t.sigma_o).ok().map(|i| attenuate_sw(&i)))
            .collect::<Option<Vec<_>>>()?
            .into_iter(),
    )?;
    let measured = mean(s.truth.iter().map(|t| t.rho_to))?;
    Some(AttenuationCheck::new(formula, measured))
}

/// Analyzes stored attack results. Every result must carry an intact
/// configuration snapshot; the success rate `alpha` defaults to the first
/// result's calibration setting.
pub fn analyze(paths: &[PathBuf], alpha: Option<f64>) -> Result<AnalysisReport> {
    if paths.is_empty() {
        return Err(Error::Config("analyze needs at least one result file".into()));
    }
    let results = paths.iter().map(|p| load_attack(p)).collect::<Result<Vec<_>>>()?;
    let alpha = alpha.unwrap_or(results[0].config.calibration.alpha);

    let campaigns = results
        .iter()
        .enumerate()
        .map(|(i, env)| {
            let s = &env.result;
            let bytes: Vec<BytePrediction> = s
                .min_samples
                .iter()
                .zip(s.rho_peak.iter().zip(&s.rho_ave))
                .map(|(m, (&peak, &ave))| BytePrediction {
                    byte_pos: m.byte_pos,
                    rho_peak: peak,
                    rho_ave: ave,
                    measured: m.min_samples.value(),
                    predicted: samples_required(peak, ave, alpha).ok(),
                    predicted_vs_zero: samples_required(peak, 0.0, alpha).ok(),
                })
                .collect();
            let worst = bytes.iter().map(|b| b.predicted).collect::<Option<Vec<_>>>().and_then(|v| v.into_iter().max());
            let prediction_ratio = worst.zip(s.all_bytes_min_samples()).map(|(p, m)| p as f64 / m as f64);
            let partner = (1..results.len())
                .map(|k| (i + k) % results.len())
                .find(|&j| same_setting(&env.config, &results[j].config) && env.config.seed != results[j].config.seed);
            let rotated = env.config.rotate_every != crate::rotation::RotationSchedule::Off;
            CampaignAnalysis {
                path: paths[i].clone(),
                samples: s.samples,
                bytes,
                prediction_ratio,
                hardware: partner.and_then(|j| hardware_check(s, &results[j].result)),
                partner: partner.map(|j| paths[j].clone()),
                rotation: if rotated { rotation_check(s) } else { None },
            }
        })
        .collect();
    Ok(AnalysisReport { alpha, campaigns })
}
