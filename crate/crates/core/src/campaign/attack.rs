//! Attack campaigns: generate samples, run the correlation attack on every
//! targeted byte and track how many samples each byte needed.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use super::output::Sink;
use super::{CampaignConfig, RunOptions, Scenario};
use crate::attack::{AttackReport, MinSamples, MultiByteCpa, Predictor, RankProbe};
use crate::error::{Error, Result};
use crate::memsim::TimingSample;
use crate::stats::{snr, Comoments, RegressionFit};

const T: usize = 0;
const O: usize = 1;
const N: usize = 2;

/// Simulator-side statistics of one byte position, which a real attacker
/// cannot observe: time `t`, the attacker's predicted count `o` at the true
/// key and the actual last-round transaction count `n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ByteTruth {
    pub byte_pos: usize,
    moments: Comoments<3>,
    matches: u64,
}

impl ByteTruth {
    fn new(byte_pos: usize) -> Self {
        ByteTruth { byte_pos, ..Default::default() }
    }

    fn update(&mut self, t: f64, o: f64, n: f64) {
        self.moments.update(&[t, o, n]);
        self.matches += (o == n) as u64;
    }

    fn merge(&mut self, other: &ByteTruth) {
        self.moments.merge(&other.moments);
        self.matches += other.matches;
    }

    pub fn summary(&self) -> TruthSummary {
        let m = &self.moments;
        let fit = |x| m.fit(x, T).ok();
        let snr_of = |f: Option<RegressionFit>, x| f.and_then(|f| snr(&f, m.var(x)).ok()).map(|s| s.snr);
        let (fit_o, fit_n) = (fit(O), fit(N));
        TruthSummary {
            byte_pos: self.byte_pos,
            rho_to: m.corr(T, O).unwrap_or(0.0),
            rho_tn: m.corr(T, N).unwrap_or(0.0),
            sigma_o: m.var(O).sqrt(),
            sigma_n: m.var(N).sqrt(),
            p_match: if m.count() == 0 { 0.0 } else { self.matches as f64 / m.count() as f64 },
            snr_o: snr_of(fit_o, O),
            snr_n: snr_of(fit_n, N),
            fit_o,
            fit_n,
        }
    }
}

/// Correlations, match rate and regressions derived from [`ByteTruth`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub byte_pos: usize,
    /// Correlation of time with the attacker's predicted count.
    pub rho_to: f64,
    /// Correlation of time with the actual transaction count.
    pub rho_tn: f64,
    pub sigma_o: f64,
    pub sigma_n: f64,
    /// Fraction of samples whose predicted and actual counts agree.
    pub p_match: f64,
    /// Time regressed on the predicted count, and its SNR.
    pub fit_o: Option<RegressionFit>,
    pub snr_o: Option<f64>,
    /// Time regressed on the actual count, and its SNR.
    pub fit_n: Option<RegressionFit>,
    pub snr_n: Option<f64>,
}

/// Samples needed at one byte position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteEffort {
    pub byte_pos: usize,
    pub min_samples: MinSamples,
}

/// True-key rank and correlations at one probe point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub samples: u64,
    pub byte_pos: usize,
    pub rank: usize,
    pub rho_true: f64,
    pub max_wrong: f64,
}

/// Everything an attack campaign measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub samples: u64,
    pub report: AttackReport,
    #[serde(with = "hex::serde")]
    pub master_key: [u8; 16],
    #[serde(with = "hex::serde")]
    pub round10_key: [u8; 16],
    pub min_samples: Vec<ByteEffort>,
    /// Signed correlation at the true key, per targeted byte.
    pub rho_peak: Vec<f64>,
    /// Mean |r| over the 255 wrong guesses, per targeted byte.
    pub rho_ave: Vec<f64>,
    pub truth: Vec<TruthSummary>,
    pub mean_time: f64,
    pub mean_clean_time: f64,
    pub rotations: u64,
    #[serde(skip)]
    pub trajectory: Vec<ProbePoint>,
}

impl AttackSummary {
    pub fn mean_rho_peak(&self) -> f64 {
        self.rho_peak.iter().sum::<f64>() / self.rho_peak.len() as f64
    }

    pub fn mean_rho_ave(&self) -> f64 {
        self.rho_ave.iter().sum::<f64>() / self.rho_ave.len() as f64
    }

    /// Samples after which every targeted byte was confirmed, if all were.
    pub fn all_bytes_min_samples(&self) -> Option<u64> {
        self.min_samples
            .iter()
            .map(|b| b.min_samples.value())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().max().unwrap_or(0))
    }
}

struct Chunk {
    cpa: MultiByteCpa,
    truth: Vec<ByteTruth>,
    /// (time, clean time)
    time: Comoments<2>,
    rotations: u64,
    stored: Vec<TimingSample>,
}

/// Runs an attack campaign of `samples` samples (fewer if the budget says to
/// stop once every byte is recovered). `store` receives every sample in order.
pub fn run_attack(
    cfg: &CampaignConfig,
    samples: u64,
    opts: RunOptions,
    mut store: Sink<'_, TimingSample>,
) -> Result<AttackSummary> {
    if samples < 10 {
        return Err(Error::Config(format!("an attack campaign needs at least 10 samples, got {samples}")));
    }
    if samples > cfg.budget.cap {
        return Err(Error::Config(format!("{samples} samples exceed the budget cap {}", cfg.budget.cap)));
    }
    let scenario = Scenario::new(cfg)?;
    let predictor = Predictor::new(&scenario.tables, &cfg.attack);
    let round10 = *scenario.key.last_round_key();
    let targets = cfg.attack.target_bytes.clone();
    let t_ref = {
        let layout = scenario.initial_layout();
        scenario.generate(0, &layout, false)?.0.time
    };
    let keep = store.is_some();

    let init = || Chunk {
        cpa: MultiByteCpa::new(&targets, t_ref),
        truth: targets.iter().map(|&b| ByteTruth::new(b as usize)).collect(),
        time: Comoments::default(),
        rotations: 0,
        stored: Vec::new(),
    };
    let visit = |c: &mut Chunk, s: super::SampleRef<'_>| {
        let truth = &mut c.truth;
        c.cpa.update_with(&predictor, s.sample, |i, predicted| {
            let j = truth[i].byte_pos;
            let actual: u64 = s.stats.last_round_transactions.iter().map(|w| w[j] as u64).sum();
            truth[i].update(s.sample.time, predicted[round10[j] as usize], actual as f64);
        });
        c.time.update(&[s.sample.time, s.stats.clean_time]);
        c.rotations += s.rotated as u64;
        if keep {
            c.stored.push(s.sample.clone());
        }
    };

    let mut total = init();
    let mut probes: Vec<RankProbe> = targets.iter().map(|_| RankProbe::new(cfg.budget.probe_step)).collect();
    let mut trajectory = Vec::new();
    let stop_early = cfg.budget.stop_when_recovered;
    let used = scenario.run(samples, cfg.budget.probe_step, opts.parallel, init, visit, |seen, part| {
        total.cpa.merge(&part.cpa);
        for (a, b) in total.truth.iter_mut().zip(&part.truth) {
            a.merge(b);
        }
        total.time.merge(&part.time);
        total.rotations += part.rotations;
        if let Some(sink) = store.as_mut() {
            for s in &part.stored {
                sink(s)?;
            }
        }
        for (acc, probe) in total.cpa.accumulators.iter().zip(probes.iter_mut()) {
            let key = round10[acc.byte_pos];
            let report = acc.report(Some(key));
            let rank = report.rank_of_true_key.expect("truth supplied");
            probe.observe(seen, rank);
            let max_wrong = report
                .correlations
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != key as usize)
                .map(|(_, r)| r.abs())
                .fold(0.0, f64::max);
            trajectory.push(ProbePoint {
                samples: seen,
                byte_pos: acc.byte_pos,
                rank,
                rho_true: report.rho(key),
                max_wrong,
            });
        }
        let done = stop_early && probes.iter().all(|p| p.is_done());
        Ok(if done { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })?;

    let reports = total.cpa.reports(Some(&round10));
    let rho_peak = reports.iter().map(|r| r.rho(round10[r.byte_pos])).collect();
    let rho_ave = reports.iter().map(|r| r.rho_ave(round10[r.byte_pos])).collect();
    let min_samples = targets
        .iter()
        .zip(&probes)
        .map(|(&b, p)| ByteEffort { byte_pos: b as usize, min_samples: p.result(used) })
        .collect();
    Ok(AttackSummary {
        samples: used,
        report: AttackReport::from_reports(reports),
        master_key: *scenario.key.master(),
        round10_key: round10,
        min_samples,
        rho_peak,
        rho_ave,
        truth: total.truth.iter().map(ByteTruth::summary).collect(),
        mean_time: total.time.mean(0),
        mean_clean_time: total.time.mean(1),
        rotations: total.rotations,
        trajectory,
    })
}

/// Correlation of time with the attacker's prediction at the true key, per
/// targeted byte: the true-key column of a full attack without the other
/// 255 guesses.
pub fn true_key_correlations(cfg: &CampaignConfig, samples: u64, opts: RunOptions) -> Result<Vec<f64>> {
    let scenario = Scenario::new(cfg)?;
    let predictor = Predictor::new(&scenario.tables, &cfg.attack);
    let round10 = *scenario.key.last_round_key();
    let targets: Vec<usize> = cfg.attack.target_bytes.iter().map(|&b| b as usize).collect();
    let mut total = vec![Comoments::<2>::default(); targets.len()];
    scenario.run(
        samples,
        cfg.budget.probe_step,
        opts.parallel,
        || vec![Comoments::<2>::default(); targets.len()],
        |acc, s| {
            for (m, &b) in acc.iter_mut().zip(&targets) {
                m.update(&[s.sample.time, predictor.predict_one(s.sample, b, round10[b])]);
            }
        },
        |_, part| {
            for (a, b) in total.iter_mut().zip(&part) {
                a.merge(b);
            }
            Ok(ControlFlow::Continue(()))
        },
    )?;
    Ok(total.iter().map(|m| m.corr(0, 1).unwrap_or(0.0)).collect())
}
