//! Warp coalescing unit with fixed, per-kernel random and per-line dynamic
//! transaction widths.
//!
//! Every policy is reduced at kernel start to a [`LineSplit`]: for each line
//! (mod 16) the number of equal subtransactions it is divided into. Two
//! addresses of a warp access share a transaction iff they fall in the same
//! line and the same subtransaction of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINE_BYTES: u32 = 64;
pub const ELEMENT_BYTES: u32 = 4;
/// Length of the repeating per-line split pattern.
pub const PATTERN_LINES: usize = 16;
/// Supported transaction widths, narrowest first.
pub const WIDTHS: [u32; 4] = [8, 16, 32, 64];

fn width_slot(width_bytes: u32) -> Result<usize> {
    WIDTHS
        .iter()
        .position(|&w| w == width_bytes)
        .ok_or_else(|| Error::Config(format!("width {width_bytes}B is not one of 8/16/32/64")))
}

/// Probability vector over the transaction widths 8, 16, 32 and 64 bytes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRepr", into = "DistributionRepr")]
pub struct WidthDistribution {
    probs: [f64; 4],
    cumulative: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionRepr {
    /// P(8B), P(16B), P(32B), P(64B)
    probabilities: [f64; 4],
}

impl TryFrom<DistributionRepr> for WidthDistribution {
    type Error = Error;
    fn try_from(r: DistributionRepr) -> Result<Self> {
        WidthDistribution::new(r.probabilities)
    }
}

impl From<WidthDistribution> for DistributionRepr {
    fn from(d: WidthDistribution) -> Self {
        DistributionRepr { probabilities: d.probs }
    }
}

impl WidthDistribution {
    pub fn new(probs: [f64; 4]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("width probabilities must be non-negative: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("width probabilities sum to {total}, not 1")));
        }
        let mut cumulative = [0.0; 4];
        let mut acc = 0.0;
        for (c, p) in cumulative.iter_mut().zip(probs) {
            acc += p;
            *c = acc;
        }
        cumulative[3] = 1.0;
        Ok(WidthDistribution { probs, cumulative })
    }

    /// All mass on one width.
    pub fn point(width_bytes: u32) -> Result<Self> {
        let mut probs = [0.0; 4];
        probs[width_slot(width_bytes)?] = 1.0;
        Self::new(probs)
    }

    /// Skewed toward wide transactions with mean exponent 5 (32B) and 8B
    /// transactions in 5% of kernels.
    pub fn mean32() -> Self {
        Self::new([0.05, 0.20, 0.45, 0.30]).expect("valid preset")
    }

    pub fn probabilities(&self) -> [f64; 4] {
        self.probs
    }

    pub fn probability(&self, width_bytes: u32) -> f64 {
        width_slot(width_bytes).map(|s| self.probs[s]).unwrap_or(0.0)
    }

    /// Expected width in bytes.
    pub fn mean_width(&self) -> f64 {
        self.probs.iter().zip(WIDTHS).map(|(p, w)| p * w as f64).sum()
    }

    /// Expected log2 of the width.
    pub fn mean_exponent(&self) -> f64 {
        self.probs.iter().zip([3.0, 4.0, 5.0, 6.0]).map(|(p, k)| p * k).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.gen();
        let slot = self.cumulative.iter().position(|&c| u < c).unwrap_or(3);
        WIDTHS[slot]
    }
}

/// Draws one coalescing width.
pub fn sample_width<R: Rng + ?Sized>(dist: &WidthDistribution, rng: &mut R) -> u32 {
    dist.sample(rng)
}

/// Draws the 16 per-line subtransaction counts `r[i]`, each in {1, 2, 4, 8},
/// i.i.d. with `r = 64 / width` for a width drawn from `dist`.
pub fn generate_r<R: Rng + ?Sized>(dist: &WidthDistribution, rng: &mut R) -> [u8; PATTERN_LINES] {
    core::array::from_fn(|_| (LINE_BYTES / dist.sample(rng)) as u8)
}

/// Width regime of the coalescing unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoalescingPolicy {
    Fixed { width_bytes: u32 },
    FixedRandomPerKernel { distribution: WidthDistribution },
    DynamicPerLine { distribution: WidthDistribution },
}

impl Default for CoalescingPolicy {
    fn default() -> Self {
        CoalescingPolicy::Fixed { width_bytes: LINE_BYTES }
    }
}

impl CoalescingPolicy {
    pub fn validate(&self) -> Result<()> {
        if let CoalescingPolicy::Fixed { width_bytes } = self {
            width_slot(*width_bytes)?;
        }
        Ok(())
    }

    /// Whether this policy consumes randomness at kernel start.
    pub fn is_randomized(&self) -> bool {
        !matches!(self, CoalescingPolicy::Fixed { .. })
    }

    /// Resolves the policy for one kernel run.
    pub fn begin_kernel<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LineSplit> {
        match self {
            CoalescingPolicy::Fixed { width_bytes } => LineSplit::fixed(*width_bytes),
            CoalescingPolicy::FixedRandomPerKernel { distribution } => LineSplit::fixed(distribution.sample(rng)),
            CoalescingPolicy::DynamicPerLine { distribution } => LineSplit::from_r(generate_r(distribution, rng)),
        }
    }
}

/// Number of subtransactions each line is split into, indexed by
/// `line_number % 16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineSplit {
    r: [u8; PATTERN_LINES],
}

impl LineSplit {
    pub fn fixed(width_bytes: u32) -> Result<Self> {
        width_slot(width_bytes)?;
        Ok(LineSplit { r: [(LINE_BYTES / width_bytes) as u8; PATTERN_LINES] })
    }

    pub fn from_r(r: [u8; PATTERN_LINES]) -> Result<Self> {
        if let Some(bad) = r.iter().find(|v| !matches!(v, 1 | 2 | 4 | 8)) {
            return Err(Error::Config(format!("subtransaction count {bad} not in {{1,2,4,8}}")));
        }
        Ok(LineSplit { r })
    }

    pub fn r(&self) -> &[u8; PATTERN_LINES] {
        &self.r
    }

    #[inline]
    pub fn parts(&self, line: u32) -> u32 {
        self.r[line as usize % PATTERN_LINES] as u32
    }

    #[inline]
    pub fn sub_width(&self, line: u32) -> u32 {
        LINE_BYTES / self.parts(line)
    }
}

/// One memory transaction leaving the coalescer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Transaction {
    pub line_number: u32,
    pub sub_index: u8,
    pub width_bytes: u8,
}

/// Coalesces one warp's addresses into the minimal transaction set under
/// `split`. Transactions are returned in first-touch order.
pub fn coalesce(addresses: &[u32], split: &LineSplit, memory_bytes: u32) -> Result<Vec<Transaction>> {
    let mut out = Vec::with_capacity(addresses.len());
    coalesce_into(addresses, split, memory_bytes, &mut out)?;
    Ok(out)
}

/// Buffer-reusing form of [`coalesce`]; `out` is cleared first.
pub fn coalesce_into(
    addresses: &[u32],
    split: &LineSplit,
    memory_bytes: u32,
    out: &mut Vec<Transaction>,
) -> Result<()> {
    out.clear();
    let lines = memory_bytes.div_ceil(LINE_BYTES) as usize;
    let keys = lines * 8;
    let mut small = [0u64; 16];
    let mut large;
    let seen: &mut [u64] = if keys <= 16 * 64 {
        &mut small
    } else {
        large = vec![0u64; keys.div_ceil(64)];
        &mut large
    };
    for &addr in addresses {
        if addr >= memory_bytes {
            return Err(Error::AddressOutOfRange { address: addr as u64, limit: memory_bytes as u64 });
        }
        if addr % ELEMENT_BYTES != 0 {
            return Err(Error::Config(format!("address {addr:#x} not aligned to {ELEMENT_BYTES} bytes")));
        }
        let line = addr / LINE_BYTES;
        let parts = split.parts(line);
        // offset / (64 / parts) without the division
        let sub = (addr % LINE_BYTES) * parts / LINE_BYTES;
        let key = line as usize * 8 + sub as usize;
        let (word, bit) = (key / 64, key % 64);
        if seen[word] >> bit & 1 == 0 {
            seen[word] |= 1 << bit;
            out.push(Transaction { line_number: line, sub_index: sub as u8, width_bytes: (LINE_BYTES / parts) as u8 });
        }
    }
    Ok(())
}

/// Transaction key (`line * 8 + subtransaction`) of every element of a memory
/// region under one split, so a warp's accesses coalesce with one table
/// lookup per address.
#[derive(Clone, Debug)]
pub struct TransactionMap {
    split: LineSplit,
    keys: Vec<u16>,
    words: usize,
}

impl TransactionMap {
    pub fn new(split: &LineSplit, memory_bytes: u32) -> Self {
        let keys = (0..memory_bytes / ELEMENT_BYTES)
            .map(|e| {
                let addr = e * ELEMENT_BYTES;
                let line = addr / LINE_BYTES;
                (line * 8 + (addr % LINE_BYTES) * split.parts(line) / LINE_BYTES) as u16
            })
            .collect::<Vec<_>>();
        let words = memory_bytes.div_ceil(LINE_BYTES) as usize * 8 / 64 + 1;
        TransactionMap { split: *split, keys, words }
    }

    /// Writes the distinct transaction keys of `addresses` in first-touch
    /// order and returns how many there are (the [`coalesce`] count).
    pub fn keys(&self, addresses: &[u32], out: &mut [u16; 32]) -> Result<usize> {
        let mut elements = [0u32; 32];
        for (e, &addr) in elements.iter_mut().zip(addresses) {
            if addr % ELEMENT_BYTES != 0 {
                return Err(Error::Config(format!("address {addr:#x} not aligned to {ELEMENT_BYTES} bytes")));
            }
            *e = addr / ELEMENT_BYTES;
        }
        self.element_keys(&elements[..addresses.len()], out)
    }

    /// Same as [`TransactionMap::keys`] for element indices (address / 4).
    pub fn element_keys(&self, elements: &[u32], out: &mut [u16; 32]) -> Result<usize> {
        assert!(elements.len() <= 32, "a warp has at most 32 threads");
        if self.words > 16 {
            return self.keys_in(elements, out, &mut vec![0u64; self.words]);
        }
        self.keys_in(elements, out, &mut [0u64; 16])
    }

    fn keys_in(&self, elements: &[u32], out: &mut [u16; 32], seen: &mut [u64]) -> Result<usize> {
        let mut n = 0;
        for &e in elements {
            let Some(&key) = self.keys.get(e as usize) else {
                let limit = self.keys.len() as u64 * ELEMENT_BYTES as u64;
                return Err(Error::AddressOutOfRange { address: e as u64 * ELEMENT_BYTES as u64, limit });
            };
            let (word, bit) = (key as usize / 64, key % 64);
            let fresh = (seen[word] >> bit & 1) ^ 1;
            seen[word] |= 1 << bit;
            out[n] = key;
            n += fresh as usize;
        }
        Ok(n)
    }

    /// Expands keys from [`TransactionMap::keys`] into transactions.
    pub fn transactions(&self, keys: &[u16], out: &mut Vec<Transaction>) {
        out.clear();
        out.extend(keys.iter().map(|&k| {
            let line = k as u32 / 8;
            Transaction { line_number: line, sub_index: (k % 8) as u8, width_bytes: self.split.sub_width(line) as u8 }
        }));
    }
}

/// Number of distinct transactions a warp's table indices fall into when each
/// transaction covers `elements_per_txn` consecutive entries.
pub fn count_lines(indices: &[u8], elements_per_txn: u32) -> usize {
    debug_assert!(elements_per_txn.is_power_of_two());
    let shift = elements_per_txn.trailing_zeros();
    let mut seen = [0u64; 4];
    let mut n = 0;
    for &i in indices {
        let t = (i as u32 >> shift) as usize;
        let (w, b) = (t / 64, t % 64);
        if seen[w] >> b & 1 == 0 {
            seen[w] |= 1 << b;
            n += 1;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MEM: u32 = 5 * 1024;

    fn n_txn(addrs: &[u32], split: &LineSplit) -> usize {
        coalesce(addrs, split, MEM).unwrap().len()
    }

    #[test]
    fn identical_addresses_collapse() {
        assert_eq!(n_txn(&[128; 32], &LineSplit::fixed(64).unwrap()), 1);
    }

    #[test]
    fn stride4_over_two_lines() {
        let addrs: Vec<u32> = (0..32).map(|i| 4 * i).collect();
        assert_eq!(n_txn(&addrs, &LineSplit::fixed(64).unwrap()), 2);
        // 32-byte transactions hold 8 consecutive elements
        assert_eq!(n_txn(&addrs, &LineSplit::fixed(32).unwrap()), 4);
        assert_eq!(n_txn(&addrs, &LineSplit::fixed(8).unwrap()), 16);
    }

    #[test]
    fn dynamic_rule_on_line_zero() {
        let mut r = [1u8; 16];
        r[0] = 2;
        let split = LineSplit::from_r(r).unwrap();
        let t = coalesce(&[0, 32], &split, MEM).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[1].sub_index, t[1].width_bytes), (1, 32));
        assert_eq!(n_txn(&[0, 32], &LineSplit::from_r([1; 16]).unwrap()), 1);
        // line 16 shares the pattern slot of line 0
        assert_eq!(n_txn(&[1024, 1024 + 32], &split), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let s = LineSplit::fixed(64).unwrap();
        assert!(matches!(coalesce(&[MEM], &s, MEM), Err(Error::AddressOutOfRange { .. })));
        assert!(coalesce(&[2], &s, MEM).is_err());
        assert!(LineSplit::from_r([3; 16]).is_err());
        assert!(LineSplit::fixed(24).is_err());
        assert!(WidthDistribution::new([0.5, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn count_lines_examples() {
        let all: Vec<u8> = (0..32).collect();
        assert_eq!(count_lines(&[9; 32], 16), 1);
        assert_eq!(count_lines(&all, 16), 2);
        assert_eq!(count_lines(&all, 8), 4);
        assert_eq!(count_lines(&[0, 255], 1), 2);
    }

    #[test]
    fn point_mass_always_64() {
        let d = WidthDistribution::point(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..10_000).all(|_| sample_width(&d, &mut rng) == 64));
    }

    #[test]
    fn mean32_frequencies() {
        let d = WidthDistribution::mean32();
        assert!((d.mean_exponent() - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let mut count8 = 0usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let w = sample_width(&d, &mut rng);
            count8 += (w == 8) as usize;
            sum += w as f64;
        }
        let p8 = count8 as f64 / n as f64;
        assert!((p8 - 0.05).abs() <= 0.01, "P(8) = {p8}");
        let mean = sum / n as f64;
        assert!((mean - d.mean_width()).abs() / d.mean_width() < 0.05, "mean {mean}");
    }

    #[test]
    fn generate_r_frequencies_and_determinism() {
        let d = WidthDistribution::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = generate_r(&d, &mut ChaCha8Rng::seed_from_u64(77));
        let b = generate_r(&d, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut freq = [0usize; 9];
        let draws = 100_000 / 16 * 16;
        for _ in 0..draws / 16 {
            for v in generate_r(&d, &mut rng) {
                freq[v as usize] += 1;
            }
        }
        // r = 8 <-> 8B, r = 1 <-> 64B
        for (r, p) in [(8, 0.1), (4, 0.2), (2, 0.3), (1, 0.4)] {
            let f = freq[r] as f64 / draws as f64;
            assert!((f - p).abs() < 0.02, "r={r}: {f}");
        }
    }

    #[test]
    fn policy_serde() {
        let p: CoalescingPolicy =
            toml::from_str("mode = \"dynamic_per_line\"\ndistribution = { probabilities = [0.25, 0.25, 0.25, 0.25] }")
                .unwrap();
        assert!(matches!(p, CoalescingPolicy::DynamicPerLine { .. }));
        let back: CoalescingPolicy = toml::from_str(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(toml::from_str::<CoalescingPolicy>(
            "mode = \"fixed_random_per_kernel\"\ndistribution = { probabilities = [1, 1, 0, 0] }"
        )
        .is_err());
    }

    fn addr_vec() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec((0u32..MEM / 4).prop_map(|e| e * 4), 32)
    }

    proptest! {
        #[test]
        fn map_matches_coalesce(addrs in addr_vec(), r in proptest::array::uniform16(prop_oneof![Just(1u8), Just(2), Just(4), Just(8)])) {
            let split = LineSplit::from_r(r).unwrap();
            let map = TransactionMap::new(&split, MEM);
            let mut keys = [0u16; 32];
            let chunk = &addrs[..addrs.len().min(32)];
            let n = map.keys(chunk, &mut keys).unwrap();
            let mut txns = vec![];
            map.transactions(&keys[..n], &mut txns);
            prop_assert_eq!(txns, coalesce(chunk, &split, MEM).unwrap());
        }

        #[test]
        fn halving_width_never_reduces_count(addrs in addr_vec()) {
            let counts: Vec<usize> = WIDTHS.iter().map(|&w| n_txn(&addrs, &LineSplit::fixed(w).unwrap())).collect();
            for pair in counts.windows(2) {
                prop_assert!(pair[0] >= pair[1]);
            }
        }

        #[test]
        fn uniform_r_matches_fixed_width(addrs in addr_vec(), slot in 0usize..4) {
            let w = WIDTHS[slot];
            let fixed = coalesce(&addrs, &LineSplit::fixed(w).unwrap(), MEM).unwrap();
            let dynamic = coalesce(&addrs, &LineSplit::from_r([(64 / w) as u8; 16]).unwrap(), MEM).unwrap();
            prop_assert_eq!(fixed, dynamic);
        }

        #[test]
        fn transactions_partition_accesses(addrs in addr_vec(), r in proptest::array::uniform16(prop_oneof![Just(1u8), Just(2), Just(4), Just(8)])) {
            let split = LineSplit::from_r(r).unwrap();
            let txns = coalesce(&addrs, &split, MEM).unwrap();
            let mut uniq = txns.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), txns.len());
            for a in &addrs {
                let covering = txns.iter().filter(|t| {
                    let start = t.line_number * LINE_BYTES + t.sub_index as u32 * t.width_bytes as u32;
                    (start..start + t.width_bytes as u32).contains(a)
                }).count();
                prop_assert_eq!(covering, 1);
            }
            for t in &txns {
                prop_assert!((t.sub_index as u32) < split.parts(t.line_number));
                prop_assert_eq!(t.width_bytes as u32, 64 / split.parts(t.line_number));
            }
        }

        #[test]
        fn order_insensitive(mut addrs in addr_vec(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let split = LineSplit::from_r(generate_r(&WidthDistribution::mean32(), &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
            let mut a = coalesce(&addrs, &split, MEM).unwrap();
            addrs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let mut b = coalesce(&addrs, &split, MEM).unwrap();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
