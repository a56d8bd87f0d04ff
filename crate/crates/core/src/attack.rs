//! Correlation timing attack on the last AES round.
//!
//! For every key-byte guess the attacker inverts the last round on each
//! ciphertext, counts how many transactions the warp's t4 lookups at that byte
//! position would coalesce into, and correlates that count with the measured
//! kernel time across samples. The guess with the largest |r| wins.

use serde::{Deserialize, Serialize};

use crate::aes::{invert_schedule, last_round_index, Block, TTables};
use crate::coalescer::{count_lines, WidthDistribution, ELEMENT_BYTES, WIDTHS};
use crate::error::{Error, Result};
use crate::memsim::TimingSample;

/// Attacker assumptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Table entries per transaction in the attacker's model (16 for 64B).
    pub assumed_elements_per_txn: u32,
    pub num_samples: usize,
    pub target_bytes: Vec<u8>,
    /// When set, the attacker knows the per-kernel width distribution and
    /// predicts the expected count under it instead of a fixed width.
    pub informed: Option<WidthDistribution>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            assumed_elements_per_txn: 16,
            num_samples: 500_000,
            target_bytes: (0..16).collect(),
            informed: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let e = self.assumed_elements_per_txn;
        if !(e.is_power_of_two() && e <= 256) {
            return Err(Error::Config(format!("elements per transaction {e} must be a power of two <= 256")));
        }
        if self.num_samples < 10 {
            return Err(Error::Config("an attack needs at least 10 samples".into()));
        }
        if self.target_bytes.is_empty() || self.target_bytes.iter().any(|&b| b >= 16) {
            return Err(Error::Config(format!(
                "target bytes {:?} must be a non-empty subset of 0..16",
                self.target_bytes
            )));
        }
        Ok(())
    }

    /// `(elements per transaction, weight)` terms of the predictor.
    fn terms(&self) -> Vec<(u32, f64)> {
        match &self.informed {
            None => vec![(self.assumed_elements_per_txn, 1.0)],
            Some(d) => {
                WIDTHS.iter().map(|&w| (w / ELEMENT_BYTES, d.probability(w))).filter(|&(_, p)| p > 0.0).collect()
            }
        }
    }
}

/// Predicted transaction count of the t4 loads at `byte_pos`, summed over the
/// sample's warps, for one key-byte guess.
pub fn predict_count(
    sample: &TimingSample,
    byte_pos: usize,
    key_guess: u8,
    inv_t4: &[u8; 256],
    elements_per_txn: u32,
) -> usize {
    let mut idx = [0u8; 32];
    sample
        .warps
        .iter()
        .map(|w| {
            let n = w.ciphertexts.len();
            for (slot, ct) in idx.iter_mut().zip(&w.ciphertexts) {
                *slot = last_round_index(ct[byte_pos], key_guess, inv_t4);
            }
            count_lines(&idx[..n], elements_per_txn)
        })
        .sum()
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain(format!(
            "pearson needs two equal-length series of >= 2 points ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-ciphertext-byte-value rows of line bitmasks, one lane per guess.
enum MaskTable {
    Narrow(Box<[[u16; 256]; 256]>),
    Wide(Box<[[u64; 256]; 256]>),
}

impl MaskTable {
    fn new(inv_t4: &[u8; 256], elements_per_txn: u32) -> Option<Self> {
        let shift = elements_per_txn.trailing_zeros();
        let lines = 256 >> shift;
        if lines <= 16 {
            let mut t = Box::new([[0u16; 256]; 256]);
            for c in 0..256 {
                for g in 0..256 {
                    t[c][g] = 1 << (last_round_index(c as u8, g as u8, inv_t4) >> shift);
                }
            }
            Some(MaskTable::Narrow(t))
        } else if lines <= 64 {
            let mut t = Box::new([[0u64; 256]; 256]);
            for c in 0..256 {
                for g in 0..256 {
                    t[c][g] = 1 << (last_round_index(c as u8, g as u8, inv_t4) >> shift);
                }
            }
            Some(MaskTable::Wide(t))
        } else {
            None
        }
    }

    /// Adds each guess's distinct-line count for one warp to `out`.
    fn add_counts(&self, bytes: &[u8], out: &mut [f64; 256], weight: f64) {
        match self {
            MaskTable::Narrow(t) => {
                let mut acc = [0u16; 256];
                for &c in bytes {
                    let row = &t[c as usize];
                    for (a, r) in acc.iter_mut().zip(row.iter()) {
                        *a |= *r;
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o += weight * a.count_ones() as f64;
                }
            }
            MaskTable::Wide(t) => {
                let mut acc = [0u64; 256];
                for &c in bytes {
                    let row = &t[c as usize];
                    for (a, r) in acc.iter_mut().zip(row.iter()) {
                        *a |= *r;
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o += weight * a.count_ones() as f64;
                }
            }
        }
    }
}

/// Computes the 256 predicted counts of one sample at one byte position.
pub struct Predictor {
    inv_t4: [u8; 256],
    terms: Vec<(u32, f64, Option<MaskTable>)>,
}

impl Predictor {
    pub fn new(tables: &TTables, config: &AttackConfig) -> Self {
        let terms = config.terms().into_iter().map(|(ept, w)| (ept, w, MaskTable::new(&tables.inv_t4, ept))).collect();
        Predictor { inv_t4: tables.inv_t4, terms }
    }

    /// The prediction of a single guess; equals entry `guess` of [`Predictor::predict_all`].
    pub fn predict_one(&self, sample: &TimingSample, byte_pos: usize, guess: u8) -> f64 {
        self.terms.iter().map(|(ept, w, _)| w * predict_count(sample, byte_pos, guess, &self.inv_t4, *ept) as f64).sum()
    }

    pub fn predict_all(&self, sample: &TimingSample, byte_pos: usize, out: &mut [f64; 256]) {
        out.fill(0.0);
        let mut bytes = [0u8; 32];
        let mut idx = [0u8; 32];
        for warp in &sample.warps {
            let n = warp.ciphertexts.len();
            for (b, ct) in bytes.iter_mut().zip(&warp.ciphertexts) {
                *b = ct[byte_pos];
            }
            for (ept, weight, table) in &self.terms {
                match table {
                    Some(t) => t.add_counts(&bytes[..n], out, *weight),
                    None => {
                        for (g, o) in out.iter_mut().enumerate() {
                            for (i, b) in idx[..n].iter_mut().zip(&bytes[..n]) {
                                *i = last_round_index(*b, g as u8, &self.inv_t4);
                            }
                            *o += weight * count_lines(&idx[..n], *ept) as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Streaming correlation sums for all 256 guesses at one byte position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpaAccumulator {
    pub byte_pos: usize,
    /// Subtracted from every time before accumulating, to keep the sums
    /// well conditioned.
    t_ref: f64,
    n: u64,
    sum_t: f64,
    sum_tt: f64,
    sum_x: Vec<f64>,
    sum_xx: Vec<f64>,
    sum_xt: Vec<f64>,
}

impl CpaAccumulator {
    pub fn new(byte_pos: usize) -> Self {
        Self::with_reference(byte_pos, 0.0)
    }

    /// Accumulator for times near `t_ref`; correlations do not depend on it.
    pub fn with_reference(byte_pos: usize, t_ref: f64) -> Self {
        CpaAccumulator {
            byte_pos,
            t_ref,
            n: 0,
            sum_t: 0.0,
            sum_tt: 0.0,
            sum_x: vec![0.0; 256],
            sum_xx: vec![0.0; 256],
            sum_xt: vec![0.0; 256],
        }
    }

    pub fn samples(&self) -> u64 {
        self.n
    }

    pub fn update(&mut self, predicted: &[f64; 256], time: f64) {
        let time = time - self.t_ref;
        self.n += 1;
        self.sum_t += time;
        self.sum_tt += time * time;
        for (g, &x) in predicted.iter().enumerate() {
            self.sum_x[g] += x;
            self.sum_xx[g] += x * x;
            self.sum_xt[g] += x * time;
        }
    }

    /// Adds another accumulator's sums. Merge order is part of the result's
    /// bit pattern, so callers merge in a fixed order.
    pub fn merge(&mut self, other: &CpaAccumulator) {
        assert_eq!(self.byte_pos, other.byte_pos);
        assert_eq!(self.t_ref, other.t_ref, "merging accumulators with different references");
        self.n += other.n;
        self.sum_t += other.sum_t;
        self.sum_tt += other.sum_tt;
        for g in 0..256 {
            self.sum_x[g] += other.sum_x[g];
            self.sum_xx[g] += other.sum_xx[g];
            self.sum_xt[g] += other.sum_xt[g];
        }
    }

    /// Correlation for one guess; `None` when the predictor or the times are constant.
    pub fn correlation(&self, guess: u8) -> Option<f64> {
        let n = self.n as f64;
        let g = guess as usize;
        let vt = n * self.sum_tt - self.sum_t * self.sum_t;
        let vx = n * self.sum_xx[g] - self.sum_x[g] * self.sum_x[g];
        if self.n < 2 || vt <= 0.0 || vx <= 1e-9 * n * n {
            return None;
        }
        let cov = n * self.sum_xt[g] - self.sum_x[g] * self.sum_t;
        Some((cov / (vx * vt).sqrt()).clamp(-1.0, 1.0))
    }

    pub fn report(&self, true_key: Option<u8>) -> CorrelationReport {
        let mut degenerate = false;
        let correlations: Vec<f64> = (0..=255u8)
            .map(|g| {
                self.correlation(g).unwrap_or_else(|| {
                    degenerate = true;
                    0.0
                })
            })
            .collect();
        CorrelationReport::from_correlations(self.byte_pos, correlations, true_key, self.n as usize, degenerate)
    }
}

/// Outcome of the distinguisher at one byte position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub byte_pos: usize,
    pub correlations: Vec<f64>,
    pub best_guess: u8,
    pub rank_of_true_key: Option<usize>,
    pub samples_used: usize,
    /// Some guess had a constant predictor (or the times were constant); its
    /// correlation is reported as 0.
    pub degenerate: bool,
}

impl CorrelationReport {
    fn from_correlations(
        byte_pos: usize,
        correlations: Vec<f64>,
        true_key: Option<u8>,
        samples_used: usize,
        degenerate: bool,
    ) -> Self {
        let best_guess = argmax_abs(&correlations);
        let rank_of_true_key = true_key.map(|k| rank_of(&correlations, k));
        CorrelationReport { byte_pos, correlations, best_guess, rank_of_true_key, samples_used, degenerate }
    }

    /// Correlation at the given guess.
    pub fn rho(&self, guess: u8) -> f64 {
        self.correlations[guess as usize]
    }

    /// Mean |r| over every guess except `key`.
    pub fn rho_ave(&self, key: u8) -> f64 {
        let total: f64 =
            self.correlations.iter().enumerate().filter(|(g, _)| *g != key as usize).map(|(_, r)| r.abs()).sum();
        total / 255.0
    }
}

/// Largest |r|, ties to the lowest guess.
pub fn argmax_abs(correlations: &[f64]) -> u8 {
    let mut best = 0usize;
    for (g, r) in correlations.iter().enumerate() {
        if r.abs() > correlations[best].abs() {
            best = g;
        }
    }
    best as u8
}

/// 1-based rank of `key` under the argmax ordering (|r| descending, lower guess first on ties).
pub fn rank_of(correlations: &[f64], key: u8) -> usize {
    let k = key as usize;
    let rk = correlations[k].abs();
    1 + correlations.iter().enumerate().filter(|&(g, r)| r.abs() > rk || (r.abs() == rk && g < k)).count()
}

/// Correlation sums for every targeted byte position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiByteCpa {
    pub accumulators: Vec<CpaAccumulator>,
}

impl MultiByteCpa {
    pub fn new(target_bytes: &[u8], t_ref: f64) -> Self {
        MultiByteCpa {
            accumulators: target_bytes.iter().map(|&b| CpaAccumulator::with_reference(b as usize, t_ref)).collect(),
        }
    }

    pub fn update(&mut self, predictor: &Predictor, sample: &TimingSample) {
        self.update_with(predictor, sample, |_, _| {});
    }

    /// Like [`MultiByteCpa::update`], also handing each byte's 256 predicted
    /// counts to `inspect` (with the accumulator's position in the list).
    pub fn update_with(
        &mut self,
        predictor: &Predictor,
        sample: &TimingSample,
        mut inspect: impl FnMut(usize, &[f64; 256]),
    ) {
        let mut scratch = [0.0; 256];
        for (i, acc) in self.accumulators.iter_mut().enumerate() {
            predictor.predict_all(sample, acc.byte_pos, &mut scratch);
            acc.update(&scratch, sample.time);
            inspect(i, &scratch);
        }
    }

    pub fn merge(&mut self, other: &MultiByteCpa) {
        assert_eq!(self.accumulators.len(), other.accumulators.len());
        for (a, b) in self.accumulators.iter_mut().zip(&other.accumulators) {
            a.merge(b);
        }
    }

    pub fn samples(&self) -> u64 {
        self.accumulators.first().map_or(0, |a| a.samples())
    }

    /// Rank of the true key byte at every targeted position.
    pub fn ranks(&self, round10: &Block) -> Vec<usize> {
        self.accumulators
            .iter()
            .map(|a| {
                let corr: Vec<f64> = (0..=255u8).map(|g| a.correlation(g).unwrap_or(0.0)).collect();
                rank_of(&corr, round10[a.byte_pos])
            })
            .collect()
    }

    pub fn reports(&self, truth: Option<&Block>) -> Vec<CorrelationReport> {
        self.accumulators.iter().map(|a| a.report(truth.map(|k| k[a.byte_pos]))).collect()
    }
}

/// Runs the distinguisher at one byte position.
pub fn attack_byte(
    samples: &[TimingSample],
    byte_pos: usize,
    tables: &TTables,
    config: &AttackConfig,
    true_key: Option<u8>,
) -> Result<CorrelationReport> {
    if samples.len() < 2 {
        return Err(Error::Domain("an attack needs at least two samples".into()));
    }
    if byte_pos >= 16 {
        return Err(Error::IndexOutOfRange { index: byte_pos, len: 16 });
    }
    let predictor = Predictor::new(tables, config);
    let mut acc = CpaAccumulator::new(byte_pos);
    let mut pred = [0.0; 256];
    for s in samples {
        predictor.predict_all(s, byte_pos, &mut pred);
        acc.update(&pred, s.time);
    }
    Ok(acc.report(true_key))
}

/// Result of attacking every targeted byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub bytes: Vec<CorrelationReport>,
    /// Best guesses; untargeted positions are zero.
    #[serde(with = "hex::serde")]
    pub recovered_round10: Block,
    #[serde(with = "hex::serde")]
    pub recovered_master: Block,
    /// All 16 bytes ranked first against the supplied truth.
    pub success: bool,
}

impl AttackReport {
    pub fn from_reports(bytes: Vec<CorrelationReport>) -> Self {
        let mut round10 = [0u8; 16];
        for r in &bytes {
            round10[r.byte_pos] = r.best_guess;
        }
        let success = bytes.len() == 16 && bytes.iter().all(|r| r.rank_of_true_key == Some(1) && !r.degenerate);
        AttackReport { recovered_master: invert_schedule(&round10), recovered_round10: round10, bytes, success }
    }
}

/// Runs [`attack_byte`] at every targeted position and inverts the schedule.
pub fn attack_full(
    samples: &[TimingSample],
    tables: &TTables,
    config: &AttackConfig,
    truth: Option<&Block>,
) -> Result<AttackReport> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::Domain("an attack needs at least two samples".into()));
    }
    let predictor = Predictor::new(tables, config);
    let mut cpa = MultiByteCpa::new(&config.target_bytes, samples[0].time);
    for s in samples {
        cpa.update(&predictor, s);
    }
    Ok(AttackReport::from_reports(cpa.reports(truth)))
}

/// Effort needed before a key byte is reliably ranked first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinSamples {
    Recovered(u64),
    NotRecovered { budget: u64 },
}

impl MinSamples {
    pub fn value(&self) -> Option<u64> {
        match self {
            MinSamples::Recovered(n) => Some(*n),
            MinSamples::NotRecovered { .. } => None,
        }
    }
}

/// Tracks rank-1 streaks at probe points spaced `step` samples apart.
#[derive(Clone, Debug)]
pub struct RankProbe {
    step: u64,
    streak: u32,
    first: Option<u64>,
    done: Option<u64>,
}

/// Consecutive rank-1 probes required before the byte counts as recovered.
pub const CONFIRMING_PROBES: u32 = 3;

impl RankProbe {
    pub fn new(step: u64) -> Self {
        RankProbe { step: step.max(1), streak: 0, first: None, done: None }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Records the rank observed after `samples` samples.
    pub fn observe(&mut self, samples: u64, rank: usize) {
        if self.done.is_some() {
            return;
        }
        if rank == 1 {
            if self.streak == 0 {
                self.first = Some(samples);
            }
            self.streak += 1;
            if self.streak >= CONFIRMING_PROBES {
                self.done = self.first;
            }
        } else {
            self.streak = 0;
            self.first = None;
        }
    }

    pub fn result(&self, budget: u64) -> MinSamples {
        match self.done {
            Some(n) => MinSamples::Recovered(n),
            None => MinSamples::NotRecovered { budget },
        }
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }
}

/// Smallest prefix (probed every `step` samples) after which the true key
/// byte is ranked first at three consecutive probes.
pub fn min_samples_to_rank1<I>(
    samples: I,
    byte_pos: usize,
    tables: &TTables,
    config: &AttackConfig,
    true_key: u8,
    step: u64,
) -> MinSamples
where
    I: IntoIterator<Item = TimingSample>,
{
    let predictor = Predictor::new(tables, config);
    let mut acc = CpaAccumulator::new(byte_pos);
    let mut probe = RankProbe::new(step);
    let mut pred = [0.0; 256];
    for s in samples {
        predictor.predict_all(&s, byte_pos, &mut pred);
        acc.update(&pred, s.time);
        if acc.samples().is_multiple_of(probe.step()) {
            let corr: Vec<f64> = (0..=255u8).map(|g| acc.correlation(g).unwrap_or(0.0)).collect();
            probe.observe(acc.samples(), rank_of(&corr, true_key));
            if probe.is_done() {
                break;
            }
        }
    }
    probe.result(acc.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aes::{encrypt_block, expand_key, Layout};
    use crate::memsim::WarpBatch;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_from(cts: Vec<Block>, time: f64) -> TimingSample {
        TimingSample { warps: vec![WarpBatch { plaintexts: cts.clone(), ciphertexts: cts }], time }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_relative_eq!(pearson(&x, &x).unwrap(), 1.0);
        assert_relative_eq!(pearson(&x, &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        // hand-computed: cov = 1.5, var_x = 1, var_y = 7/3  =>  r = 1.5 / sqrt(7/3)
        let oracle = 1.5 / (7.0f64 / 3.0).sqrt();
        assert_relative_eq!(pearson(&x, &[1.0, 2.0, 4.0]).unwrap(), oracle, max_relative = 1e-12);
        assert_relative_eq!(oracle, 0.981_980_506_061_965_7, max_relative = 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance("x"))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn identical_ciphertexts_predict_one() {
        let t = TTables::new();
        let s = sample_from(vec![[0xab; 16]; 32], 100.0);
        for g in [0u8, 17, 255] {
            assert_eq!(predict_count(&s, 3, g, &t.inv_t4, 16), 1);
        }
    }

    #[test]
    fn true_guess_matches_constructed_lines() {
        // choose last-round inputs 0, 16, 32 and build ciphertexts through the oracle identity
        let t = TTables::new();
        let key = [0x3cu8; 16];
        let cts: Vec<Block> = [0u8, 16, 32, 0, 16]
            .iter()
            .map(|&state| {
                let mut b = [0u8; 16];
                b[7] = t.t4_byte(state) ^ key[7];
                b
            })
            .collect();
        let s = sample_from(cts, 1.0);
        assert_eq!(predict_count(&s, 7, key[7], &t.inv_t4, 16), 3);
    }

    #[test]
    fn true_guess_equals_simulated_line_count() {
        let t = TTables::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ks = expand_key(&rng.gen());
        let pts: Vec<Block> = (0..32).map(|_| rng.gen()).collect();
        let mut traces = vec![];
        let cts: Vec<Block> = pts
            .iter()
            .map(|p| {
                let (c, tr) = encrypt_block(p, &ks, &t, Layout::Identity);
                traces.push(tr);
                c
            })
            .collect();
        let s = sample_from(cts, 1.0);
        for j in 0..16 {
            let idx: Vec<u8> = traces.iter().map(|tr| tr.last_round()[j].index).collect();
            assert_eq!(predict_count(&s, j, ks.last_round_key()[j], &t.inv_t4, 16), count_lines(&idx, 16));
        }
    }

    #[test]
    fn fast_predictor_agrees_with_reference() {
        let t = TTables::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for ept in [1u32, 2, 4, 8, 16, 64] {
            let cfg = AttackConfig { assumed_elements_per_txn: ept, ..AttackConfig::default() };
            let p = Predictor::new(&t, &cfg);
            let s = TimingSample {
                warps: (0..3)
                    .map(|_| {
                        let c: Vec<Block> = (0..rng.gen_range(1..=32)).map(|_| rng.gen()).collect();
                        WarpBatch { plaintexts: c.clone(), ciphertexts: c }
                    })
                    .collect(),
                time: 1.0,
            };
            let mut out = [0.0; 256];
            p.predict_all(&s, 5, &mut out);
            for g in 0..=255u8 {
                assert_eq!(out[g as usize], predict_count(&s, 5, g, &t.inv_t4, ept) as f64);
            }
        }
    }

    #[test]
    fn accumulator_matches_pearson() {
        let t = TTables::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<TimingSample> =
            (0..300).map(|_| sample_from((0..32).map(|_| rng.gen()).collect(), rng.gen_range(100.0..200.0))).collect();
        let report = attack_byte(&samples, 2, &t, &AttackConfig::default(), Some(9)).unwrap();
        let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
        for g in [0u8, 9, 200] {
            let x: Vec<f64> = samples.iter().map(|s| predict_count(s, 2, g, &t.inv_t4, 16) as f64).collect();
            assert_relative_eq!(report.rho(g), pearson(&x, &times).unwrap(), max_relative = 1e-9);
        }
        assert_eq!(report.correlations.len(), 256);
        assert_eq!(report.best_guess, argmax_abs(&report.correlations));
    }

    #[test]
    fn ranking_and_ties() {
        let mut c = vec![0.0; 256];
        c[4] = -0.5;
        c[9] = 0.5;
        assert_eq!(argmax_abs(&c), 4);
        assert_eq!(rank_of(&c, 4), 1);
        assert_eq!(rank_of(&c, 9), 2);
        assert_eq!(rank_of(&c, 0), 3);
    }

    #[test]
    fn constant_times_are_degenerate() {
        let t = TTables::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<TimingSample> =
            (0..20).map(|_| sample_from((0..32).map(|_| rng.gen()).collect(), 5.0)).collect();
        let r = attack_byte(&samples, 0, &t, &AttackConfig::default(), None).unwrap();
        assert!(r.degenerate);
        assert!(r.correlations.iter().all(|&c| c == 0.0));
        assert!(attack_byte(&samples[..1], 0, &t, &AttackConfig::default(), None).is_err());
    }

    #[test]
    fn probe_needs_three_consecutive_rank1() {
        let mut p = RankProbe::new(10);
        for (n, r) in [(10, 1), (20, 1), (30, 2), (40, 1), (50, 1), (60, 1), (70, 5)] {
            p.observe(n, r);
        }
        assert_eq!(p.result(70), MinSamples::Recovered(40));
        assert_eq!(RankProbe::new(10).result(99), MinSamples::NotRecovered { budget: 99 });
    }

    proptest! {
        #[test]
        fn xor_equivariance(seed in any::<u64>(), guess in any::<u8>(), delta in any::<u8>(), pos in 0usize..16) {
            let t = TTables::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cts: Vec<Block> = (0..32).map(|_| rng.gen()).collect();
            let shifted: Vec<Block> = cts.iter().map(|c| { let mut d = *c; d[pos] ^= delta; d }).collect();
            let a = predict_count(&sample_from(cts, 1.0), pos, guess, &t.inv_t4, 16);
            let b = predict_count(&sample_from(shifted, 1.0), pos, guess ^ delta, &t.inv_t4, 16);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn affine_time_transform_keeps_ranking(scale in 0.01f64..100.0, shift in -1e4f64..1e4, seed in any::<u64>()) {
            let t = TTables::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<TimingSample> = (0..60)
                .map(|_| sample_from((0..32).map(|_| rng.gen()).collect(), rng.gen_range(0.0..50.0)))
                .collect();
            let moved: Vec<TimingSample> = samples.iter().map(|s| TimingSample { time: s.time * scale + shift, ..s.clone() }).collect();
            let a = attack_byte(&samples, 1, &t, &AttackConfig::default(), None).unwrap();
            let b = attack_byte(&moved, 1, &t, &AttackConfig::default(), None).unwrap();
            prop_assert_eq!(a.best_guess, b.best_guess);
            for (x, y) in a.correlations.iter().zip(&b.correlations) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
