//! Abstract-cycle timing model of the GPU memory path seen by a kernel:
//! warps issue coalesced transactions, L1 misses occupy per-SM MSHRs and,
//! optionally, a unified second-level MSHR file that merges misses from
//! different SMs to the same L2 line.
//!
//! Cost of one load instruction issued at `t0` with transactions `1..=T`:
//! transaction `k` issues at `t0 + k * c_issue` and completes `h` later on a
//! hit or `m0 * h` later on a miss (less when it merges with an in-flight
//! miss). The instruction retires when its last transaction completes, so an
//! all-hit instruction costs `c_issue * T + h`. Warps run their instruction
//! streams back to back; kernel time is the latest warp finish plus Gaussian
//! measurement noise.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::aes::{encrypt_block_into, AccessTrace, Block, KeySchedule, Layout, TTables, LOOKUPS_PER_ROUND};
use crate::coalescer::{CoalescingPolicy, LineSplit, Transaction, TransactionMap, ELEMENT_BYTES, LINE_BYTES};
use crate::error::{Error, Result};

/// Bytes per T-table (256 four-byte words).
pub const TABLE_BYTES: u32 = 1024;
/// t0..t4 laid out back to back from address 0.
pub const TABLE_MEMORY_BYTES: u32 = 5 * TABLE_BYTES;
/// Load instructions per AES block: 16 lookups in each of 10 rounds.
pub const AES_LOADS: usize = 160;

/// Machine shape. Defaults follow a Fermi GTX480.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_sms: usize,
    pub threads_per_warp: usize,
    pub warps_per_sm: usize,
    pub l1_line_bytes: u32,
    pub l2_line_bytes: u32,
    pub mshr_entries_per_sm: usize,
    pub unified_mshr_entries: usize,
    pub l1_size_bytes: u32,
    pub l2_size_bytes: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_sms: 15,
            threads_per_warp: 32,
            warps_per_sm: 2,
            l1_line_bytes: 64,
            l2_line_bytes: 128,
            mshr_entries_per_sm: 32,
            unified_mshr_entries: 32,
            l1_size_bytes: 48 * 1024,
            l2_size_bytes: 768 * 1024,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_sms,
            self.threads_per_warp,
            self.warps_per_sm,
            self.mshr_entries_per_sm,
            self.unified_mshr_entries,
            self.l1_line_bytes as usize,
            self.l2_line_bytes as usize,
            self.l1_size_bytes as usize,
            self.l2_size_bytes as usize,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("all machine parameters must be positive".into()));
        }
        if self.l1_line_bytes != LINE_BYTES {
            return Err(Error::Config(format!("the coalescer models {LINE_BYTES}B L1 lines")));
        }
        if !self.l2_line_bytes.is_multiple_of(self.l1_line_bytes) {
            return Err(Error::Config("L2 line must be a multiple of the L1 line".into()));
        }
        if self.threads_per_warp > 32 {
            return Err(Error::Config("at most 32 threads per warp".into()));
        }
        Ok(())
    }

    pub fn max_warps(&self) -> usize {
        self.num_sms * self.warps_per_sm
    }

    pub fn max_threads(&self) -> usize {
        self.max_warps() * self.threads_per_warp
    }
}

/// Cycle costs and noise of the timing model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    /// L1 hit service time.
    pub h: f64,
    /// Miss time as a multiple of `h`.
    pub m0: f64,
    /// Issue cost of one transaction.
    pub c_issue: f64,
    /// Standard deviation of the additive Gaussian kernel-time noise.
    pub sigma_eps: f64,
    /// Probability that a transaction misses in L1.
    pub miss_rate: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams { h: 1.0, m0: 5.0, c_issue: 4.0, sigma_eps: 0.0, miss_rate: 0.02 }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.h > 0.0
            && self.m0 > 1.0
            && self.c_issue > 0.0
            && self.sigma_eps >= 0.0
            && (0.0..=1.0).contains(&self.miss_rate)
            && [self.h, self.m0, self.c_issue, self.sigma_eps, self.miss_rate].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid timing parameters {self:?}")))
        }
    }

    pub fn miss_latency(&self) -> f64 {
        self.m0 * self.h
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MshrMode {
    #[default]
    PerSmOnly,
    Hierarchical,
}

mod hex_blocks {
    use super::Block;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(blocks: &[Block], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(blocks.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Block>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|h| {
                let bytes = hex::decode(h).map_err(D::Error::custom)?;
                Block::try_from(bytes.as_slice()).map_err(|_| D::Error::custom(format!("block {h} is not 16 bytes")))
            })
            .collect()
    }
}

/// Blocks encrypted by one warp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpBatch {
    #[serde(with = "hex_blocks")]
    pub plaintexts: Vec<Block>,
    #[serde(with = "hex_blocks")]
    pub ciphertexts: Vec<Block>,
}

/// What the attacker observes for one kernel run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub warps: Vec<WarpBatch>,
    pub time: f64,
}

impl TimingSample {
    pub fn validate(&self) -> Result<()> {
        if self.warps.iter().any(|w| w.plaintexts.len() != w.ciphertexts.len()) {
            return Err(Error::Parse("plaintext and ciphertext counts differ".into()));
        }
        if !(self.time > 0.0 && self.time.is_finite()) {
            return Err(Error::Parse(format!("time {} is not positive", self.time)));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.warps.iter().map(|w| w.plaintexts.len()).sum()
    }
}

/// Simulator-side bookkeeping for one kernel, invisible to the attacker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelStats {
    /// Noise-free kernel time.
    pub clean_time: f64,
    pub transactions: u64,
    pub l1_misses: u64,
    /// Misses absorbed by an in-flight entry of the same SM.
    pub sm_merges: u64,
    /// Misses absorbed by a unified entry owned by another SM.
    pub unified_merges: u64,
    pub stall_cycles: f64,
    pub max_sm_occupancy: usize,
    /// Per warp, per ciphertext byte: transactions of the last-round load.
    pub last_round_transactions: Vec<[u16; LOOKUPS_PER_ROUND]>,
    pub split: Option<LineSplit>,
}

#[derive(Clone, Copy, Debug)]
struct MshrEntry {
    line: u32,
    sm: usize,
    alloc: f64,
    done: f64,
}

#[derive(Clone, Debug)]
struct MshrFile {
    capacity: usize,
    entries: Vec<MshrEntry>,
}

impl MshrFile {
    fn new(capacity: usize) -> Self {
        MshrFile { capacity, entries: Vec::with_capacity(capacity * 2) }
    }

    fn prune(&mut self, now: f64) {
        self.entries.retain(|e| e.done > now);
    }

    fn in_flight(&self, line: u32, at: f64, pred: impl Fn(&MshrEntry) -> bool) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.line == line && e.alloc <= at && at < e.done && pred(e))
            .map(|e| e.done)
            .reduce(f64::max)
    }

    fn occupancy_at(&self, at: f64) -> usize {
        self.entries.iter().filter(|e| e.alloc <= at && at < e.done).count()
    }

    /// Largest number of entries live at any instant of `[start, end)`.
    fn max_occupancy(&self, start: f64, end: f64) -> usize {
        let mut best = self.occupancy_at(start);
        for e in &self.entries {
            if e.alloc > start && e.alloc < end {
                best = best.max(self.occupancy_at(e.alloc));
            }
        }
        best
    }

    fn next_release_after(&self, at: f64) -> Option<f64> {
        self.entries.iter().map(|e| e.done).filter(|&d| d > at).reduce(f64::min)
    }
}

/// Hits remaining before the next miss, drawn geometrically.
struct MissSampler {
    dist: Option<Geometric>,
    always: bool,
    countdown: u64,
}

impl MissSampler {
    fn new<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Self {
        let always = p >= 1.0;
        let dist = (p > 0.0 && !always).then(|| Geometric::new(p).expect("probability in (0,1)"));
        let mut s = MissSampler { dist, always, countdown: 0 };
        s.countdown = s.draw(rng);
        s
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match (&self.dist, self.always) {
            (_, true) => 0,
            (Some(g), _) => g.sample(rng),
            (None, _) => u64::MAX,
        }
    }

    /// Consumes `n` transactions if none of them misses.
    fn skip_hits(&mut self, n: u64) -> bool {
        if self.countdown >= n {
            self.countdown -= n;
            true
        } else {
            false
        }
    }

    fn next_is_miss<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        if self.countdown == 0 {
            self.countdown = self.draw(rng);
            true
        } else {
            self.countdown -= 1;
            false
        }
    }
}

/// A warp's stream of load instructions.
trait WarpProgram {
    fn len(&self) -> usize;
    /// Writes the 4-byte element indices (address / 4) of instruction `i`,
    /// returning how many threads take part.
    fn elements(&self, i: usize, out: &mut [u32; 32]) -> usize;
}

/// A warp's AES loads, read straight from its threads' traces.
struct AesWarp<'a> {
    traces: &'a [AccessTrace],
}

impl WarpProgram for AesWarp<'_> {
    fn len(&self) -> usize {
        AES_LOADS
    }

    fn elements(&self, i: usize, out: &mut [u32; 32]) -> usize {
        let (round, pos) = (i / LOOKUPS_PER_ROUND, i % LOOKUPS_PER_ROUND);
        for (o, tr) in out.iter_mut().zip(self.traces) {
            let l = tr.rounds[round][pos];
            *o = l.table as u32 * (TABLE_BYTES / ELEMENT_BYTES) + l.index as u32;
        }
        self.traces.len()
    }
}

struct SingleLoad {
    addresses: [u32; 32],
    threads: usize,
}

impl WarpProgram for SingleLoad {
    fn len(&self) -> usize {
        1
    }

    fn elements(&self, _: usize, out: &mut [u32; 32]) -> usize {
        for (o, a) in out.iter_mut().zip(&self.addresses[..self.threads]) {
            debug_assert_eq!(a % ELEMENT_BYTES, 0);
            *o = a / ELEMENT_BYTES;
        }
        self.threads
    }
}

struct Engine<'a> {
    params: &'a TimingParams,
    mode: MshrMode,
    l2_ratio: u32,
    per_sm: Vec<MshrFile>,
    unified: MshrFile,
    miss: MissSampler,
    stats: KernelStats,
}

impl<'a> Engine<'a> {
    fn new<R: Rng + ?Sized>(cfg: &SimConfig, params: &'a TimingParams, mode: MshrMode, rng: &mut R) -> Self {
        Engine {
            params,
            mode,
            l2_ratio: cfg.l2_line_bytes / cfg.l1_line_bytes,
            per_sm: (0..cfg.num_sms).map(|_| MshrFile::new(cfg.mshr_entries_per_sm)).collect(),
            unified: MshrFile::new(cfg.unified_mshr_entries),
            miss: MissSampler::new(params.miss_rate, rng),
            stats: KernelStats::default(),
        }
    }

    /// Consumes `count` transactions from the miss stream if all of them hit.
    fn all_hits(&mut self, count: usize) -> bool {
        let hit = self.miss.skip_hits(count as u64);
        if hit {
            self.stats.transactions += count as u64;
        }
        hit
    }

    /// Issues one instruction known to contain at least one miss.
    fn instruction<R: Rng + ?Sized>(&mut self, sm: usize, start: f64, txns: &[Transaction], rng: &mut R) -> f64 {
        let c = self.params.c_issue;
        let h = self.params.h;
        self.stats.transactions += txns.len() as u64;
        let miss_latency = self.params.miss_latency();
        let mut t = start;
        let mut end = start;
        for tx in txns {
            t += c;
            if !self.miss.next_is_miss(rng) {
                end = end.max(t + h);
                continue;
            }
            self.stats.l1_misses += 1;
            if let Some(done) = self.per_sm[sm].in_flight(tx.line_number, t, |_| true) {
                self.stats.sm_merges += 1;
                end = end.max(done);
                continue;
            }
            let l2_line = tx.line_number / self.l2_ratio;
            let (done, merged) = loop {
                let shared = match self.mode {
                    MshrMode::PerSmOnly => None,
                    MshrMode::Hierarchical => self.unified.in_flight(l2_line, t, |e| e.sm != sm),
                };
                let done = shared.unwrap_or(t + miss_latency);
                let file = &self.per_sm[sm];
                if file.max_occupancy(t, done) < file.capacity {
                    break (done, shared.is_some());
                }
                let resume = file.next_release_after(t).expect("a full file has a pending release");
                self.stats.stall_cycles += resume - t;
                t = resume;
            };
            self.per_sm[sm].entries.push(MshrEntry { line: tx.line_number, sm, alloc: t, done });
            let occ = self.per_sm[sm].max_occupancy(t, done);
            assert!(occ <= self.per_sm[sm].capacity, "per-SM MSHR over capacity: {occ}");
            self.stats.max_sm_occupancy = self.stats.max_sm_occupancy.max(occ);
            if self.mode == MshrMode::Hierarchical {
                if merged {
                    self.stats.unified_merges += 1;
                } else if self.unified.occupancy_at(t) < self.unified.capacity {
                    self.unified.entries.push(MshrEntry { line: l2_line, sm, alloc: t, done });
                }
            }
            end = end.max(done);
        }
        end.max(t)
    }

    /// Runs every warp to completion; warps advance in order of their clocks.
    fn run<R: Rng + ?Sized>(
        &mut self,
        warps: &[&dyn WarpProgram],
        sm_of: &[usize],
        split: &LineSplit,
        memory_bytes: u32,
        mut on_instruction: impl FnMut(usize, usize, usize),
        rng: &mut R,
    ) -> Result<f64> {
        let map = TransactionMap::new(split, memory_bytes);
        let mut clock = vec![0.0f64; warps.len()];
        let mut next = vec![0usize; warps.len()];
        let mut elems = [0u32; 32];
        let mut keys = [0u16; 32];
        let mut txns = Vec::with_capacity(32);
        // earliest clock first, lowest warp index on ties; clocks are
        // non-negative so their bit patterns order like the values
        let mut ready: BinaryHeap<Reverse<(u64, usize)>> =
            (0..warps.len()).filter(|&w| warps[w].len() > 0).map(|w| Reverse((0f64.to_bits(), w))).collect();
        while let Some(Reverse((_, w))) = ready.pop() {
            let now = clock[w];
            self.per_sm[sm_of[w]].prune(now);
            self.unified.prune(now);
            let n = warps[w].elements(next[w], &mut elems);
            let count = map.element_keys(&elems[..n], &mut keys)?;
            on_instruction(w, next[w], count);
            clock[w] = if self.all_hits(count) {
                now + self.params.c_issue * count as f64 + self.params.h
            } else {
                map.transactions(&keys[..count], &mut txns);
                self.instruction(sm_of[w], now, &txns, rng)
            };
            next[w] += 1;
            if next[w] < warps[w].len() {
                ready.push(Reverse((clock[w].to_bits(), w)));
            }
        }
        Ok(clock.into_iter().fold(0.0, f64::max))
    }
}

fn add_noise<R: Rng + ?Sized>(clean: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        let noisy = clean + Normal::new(0.0, sigma).expect("finite sigma").sample(rng);
        noisy.max(f64::MIN_POSITIVE)
    } else {
        clean
    }
}

/// Warp and thread slot of each block under round-robin assignment: block `b`
/// goes to warp `b % warps` where `warps = ceil(n / 32)`.
pub fn assign_warps(n_blocks: usize, threads_per_warp: usize) -> Vec<Vec<usize>> {
    let warps = n_blocks.div_ceil(threads_per_warp).max(1);
    let mut out = vec![Vec::with_capacity(threads_per_warp); warps];
    for b in 0..n_blocks {
        out[b % warps].push(b);
    }
    out
}

/// Memory-path simulator holding the machine shape, timing model and MSHR mode.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub config: SimConfig,
    pub params: TimingParams,
    pub mshr: MshrMode,
}

/// Result of one microbenchmark kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchPoint {
    pub n_unique: u32,
    pub width_bytes: u32,
    pub time: f64,
}

impl Simulator {
    pub fn new(config: SimConfig, params: TimingParams, mshr: MshrMode) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Simulator { config, params, mshr })
    }

    /// Encrypts `pts` on the modeled GPU and returns the observed sample with
    /// the simulator's internal statistics.
    pub fn simulate_kernel<R: Rng + ?Sized>(
        &self,
        pts: &[Block],
        ks: &KeySchedule,
        tables: &TTables,
        layout: Layout<'_>,
        policy: &CoalescingPolicy,
        rng: &mut R,
    ) -> Result<(TimingSample, KernelStats)> {
        if pts.len() > self.config.max_threads() {
            return Err(Error::BatchTooLarge { size: pts.len(), max: self.config.max_threads() });
        }
        if pts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let split = policy.begin_kernel(rng)?;
        let groups = assign_warps(pts.len(), self.config.threads_per_warp);
        let mut batches = Vec::with_capacity(groups.len());
        let mut traces: Vec<Vec<AccessTrace>> = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut warp_traces = vec![AccessTrace::default(); g.len()];
            let plaintexts: Vec<Block> = g.iter().map(|&b| pts[b]).collect();
            let ciphertexts = plaintexts
                .iter()
                .zip(warp_traces.iter_mut())
                .map(|(pt, tr)| encrypt_block_into(pt, ks, tables, layout, tr))
                .collect();
            batches.push(WarpBatch { plaintexts, ciphertexts });
            traces.push(warp_traces);
        }
        let programs: Vec<AesWarp> = traces.iter().map(|t| AesWarp { traces: t }).collect();
        let refs: Vec<&dyn WarpProgram> = programs.iter().map(|p| p as &dyn WarpProgram).collect();
        let sm_of: Vec<usize> = (0..refs.len()).map(|w| w % self.config.num_sms).collect();

        let mut engine = Engine::new(&self.config, &self.params, self.mshr, rng);
        let mut last = vec![[0u16; LOOKUPS_PER_ROUND]; refs.len()];
        let first_last_round = AES_LOADS - LOOKUPS_PER_ROUND;
        let clean = engine.run(
            &refs,
            &sm_of,
            &split,
            TABLE_MEMORY_BYTES,
            |w, i, n| {
                if i >= first_last_round {
                    last[w][i - first_last_round] = n as u16;
                }
            },
            rng,
        )?;
        let time = add_noise(clean, self.params.sigma_eps, rng);
        let mut stats = engine.stats;
        stats.clean_time = clean;
        stats.last_round_transactions = last;
        stats.split = Some(split);
        Ok((TimingSample { warps: batches, time }, stats))
    }

    /// One microbenchmark kernel: a single warp whose 32 threads load `n_unique`
    /// distinct consecutive floats (thread `t` reads element `t % n_unique`).
    pub fn microbench_kernel<R: Rng + ?Sized>(
        &self,
        n_unique: u32,
        policy: &CoalescingPolicy,
        rng: &mut R,
    ) -> Result<(f64, LineSplit)> {
        if !(1..=32).contains(&n_unique) {
            return Err(Error::Config(format!("n_unique must be in 1..=32, got {n_unique}")));
        }
        let split = policy.begin_kernel(rng)?;
        let prog =
            SingleLoad { addresses: core::array::from_fn(|t| (t as u32 % n_unique) * ELEMENT_BYTES), threads: 32 };
        let mut engine = Engine::new(&self.config, &self.params, self.mshr, rng);
        let clean = engine.run(&[&prog], &[0], &split, 32 * ELEMENT_BYTES, |_, _, _| {}, rng)?;
        Ok((add_noise(clean, self.params.sigma_eps, rng), split))
    }

    /// Noise-free time of the rotation kernel: 16 threads, one per column,
    /// each copying its 16 elements (16 loads and 16 stores, every access
    /// touching a single line).
    pub fn rotation_kernel_time(&self) -> f64 {
        let params = TimingParams { miss_rate: 0.0, sigma_eps: 0.0, ..self.params };
        let row = |r: u32| SingleLoad {
            addresses: core::array::from_fn(|t| r * LINE_BYTES + (t as u32 % 16) * ELEMENT_BYTES),
            threads: 16,
        };
        let rows: Vec<SingleLoad> = (0..16).map(row).collect();
        struct Copy<'a>(&'a [SingleLoad]);
        impl WarpProgram for Copy<'_> {
            fn len(&self) -> usize {
                2 * self.0.len()
            }
            fn elements(&self, i: usize, out: &mut [u32; 32]) -> usize {
                self.0[i % self.0.len()].elements(0, out)
            }
        }
        let prog = Copy(&rows);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut engine = Engine::new(&self.config, &params, MshrMode::PerSmOnly, &mut rng);
        engine
            .run(&[&prog], &[0], &LineSplit::fixed(LINE_BYTES).expect("64B"), TABLE_BYTES, |_, _, _| {}, &mut rng)
            .expect("in-range addresses")
    }
}

/// Convenience wrapper around [`Simulator::simulate_kernel`].
#[allow(clippy::too_many_arguments)]
pub fn simulate_kernel<R: Rng + ?Sized>(
    pts: &[Block],
    ks: &KeySchedule,
    tables: &TTables,
    layout: Layout<'_>,
    policy: &CoalescingPolicy,
    mshr: MshrMode,
    config: &SimConfig,
    params: &TimingParams,
    rng: &mut R,
) -> Result<(TimingSample, KernelStats)> {
    Simulator::new(config.clone(), *params, mshr)?.simulate_kernel(pts, ks, tables, layout, policy, rng)
}

/// Batch shape used by [`estimate_p_merge`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workload {
    pub blocks: usize,
    /// Every thread encrypts the same plaintext.
    pub identical: bool,
}

/// Fraction of L1 misses absorbed by another SM's in-flight unified entry.
pub fn estimate_p_merge<R: Rng + ?Sized>(sim: &Simulator, workload: Workload, reps: usize, rng: &mut R) -> Result<f64> {
    if sim.mshr == MshrMode::PerSmOnly {
        return Ok(0.0);
    }
    let tables = TTables::new();
    let ks = crate::aes::expand_key(&rng.gen());
    let (mut merges, mut misses) = (0u64, 0u64);
    for _ in 0..reps {
        let pts: Vec<Block> = if workload.identical {
            vec![rng.gen(); workload.blocks]
        } else {
            (0..workload.blocks).map(|_| rng.gen()).collect()
        };
        let (_, stats) =
            sim.simulate_kernel(&pts, &ks, &tables, Layout::Identity, &CoalescingPolicy::default(), rng)?;
        merges += stats.unified_merges;
        misses += stats.l1_misses;
    }
    Ok(if misses == 0 { 0.0 } else { merges as f64 / misses as f64 })
}
