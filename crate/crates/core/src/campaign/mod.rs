//! Seeded experiment campaigns: configuration, deterministic sample
//! generation and chunked parallel execution.
//!
//! Sample `i` of a campaign draws its plaintexts and all simulator randomness
//! from its own ChaCha stream, and rotation `k` from another, so every result
//! is a function of the configuration alone. Samples are processed in
//! fixed-size chunks whose partial results are merged in chunk order, which
//! keeps floating-point sums identical at any degree of parallelism.

pub mod analyze;
pub mod attack;
pub mod calibrate;
pub mod defense;
pub mod microbench;
pub mod output;

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aes::{expand_key, Block, KeySchedule, Layout, TTables};
use crate::attack::AttackConfig;
use crate::coalescer::{CoalescingPolicy, WidthDistribution};
use crate::error::{Error, Result};
use crate::memsim::{KernelStats, MshrMode, SimConfig, Simulator, TimingParams, TimingSample};
use crate::rotation::{RotatedTable, RotationSchedule};

/// Version of every JSON and CSV artifact written by campaigns.
pub const SCHEMA_VERSION: u32 = 1;

/// Kernel-noise standard deviation of the default campaign, in cycles.
pub const DEFAULT_SIGMA_EPS: f64 = 90.0;

const KEY_STREAM_SALT: u64 = 0x6b65_795f_7365_6564;
const ROTATION_STREAM_SALT: u64 = 0x726f_7461_7469_6f6e;

/// Everything that determines a campaign's simulated output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default = "current_schema")]
    pub schema_version: u32,
    pub seed: u64,
    /// Master key; derived from the seed when absent.
    #[serde(default, with = "opt_hex_block", skip_serializing_if = "Option::is_none")]
    pub key: Option<Block>,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub policy: CoalescingPolicy,
    #[serde(default)]
    pub mshr: MshrMode,
    #[serde(default)]
    pub rotate_every: RotationSchedule,
    /// Draw the column shifts of one rotation without replacement.
    #[serde(default = "yes")]
    pub rotation_unique: bool,
    #[serde(default)]
    pub machine: SimConfig,
    #[serde(default = "default_timing")]
    pub timing: TimingParams,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub microbench: MicrobenchConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    /// Rows of the defense sweep; a built-in sweep is used when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn current_schema() -> u32 {
    SCHEMA_VERSION
}

fn yes() -> bool {
    true
}

pub fn default_timing() -> TimingParams {
    TimingParams { sigma_eps: DEFAULT_SIGMA_EPS, ..TimingParams::default() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Blocks encrypted per kernel, one per thread.
    pub threads: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { threads: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Samples between rank probes; also the chunk size of parallel runs.
    pub probe_step: u64,
    /// Hard ceiling on the samples of any single campaign.
    pub cap: u64,
    /// End an attack campaign once every targeted byte is confirmed at rank 1.
    pub stop_when_recovered: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { probe_step: 1000, cap: 10_000_000, stop_when_recovered: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicrobenchConfig {
    pub reps: u32,
    /// Kernel noise of the microbenchmark, which runs a single load.
    pub sigma_eps: f64,
    pub fixed_random: WidthDistribution,
    pub dynamic: WidthDistribution,
}

impl Default for MicrobenchConfig {
    fn default() -> Self {
        MicrobenchConfig {
            reps: 10_000,
            sigma_eps: 1.0,
            fixed_random: WidthDistribution::mean32(),
            dynamic: WidthDistribution::mean32(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Samples at which the recommended noise should give the success rate below.
    pub target_samples: u64,
    pub alpha: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { target_samples: 2_000, alpha: 0.9 }
    }
}

/// One row of the defense sweep: overrides of the campaign's countermeasure settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub name: String,
    #[serde(default)]
    pub policy: CoalescingPolicy,
    #[serde(default)]
    pub mshr: MshrMode,
    #[serde(default)]
    pub rotate_every: RotationSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Sample budget of this row; the attack budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write every sample to a JSON-lines store.
    pub store_samples: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), store_samples: false }
    }
}

mod opt_hex_block {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::aes::Block;

    pub fn serialize<S: Serializer>(key: &Option<Block>, s: S) -> Result<S::Ok, S::Error> {
        match key {
            Some(k) => s.serialize_str(&hex::encode(k)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Block>, D::Error> {
        let text = String::deserialize(d)?;
        let mut key = [0u8; 16];
        hex::decode_to_slice(&text, &mut key).map_err(|e| serde::de::Error::custom(format!("key {text:?}: {e}")))?;
        Ok(Some(key))
    }
}

impl CampaignConfig {
    /// Defaults everywhere except the mandatory seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("config schema {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.machine.validate()?;
        self.timing.validate()?;
        self.policy.validate()?;
        self.attack.validate()?;
        let max = self.machine.max_threads();
        if self.batch.threads == 0 || self.batch.threads > max {
            return Err(Error::BatchTooLarge { size: self.batch.threads, max });
        }
        if self.budget.probe_step == 0 {
            return Err(Error::Config("budget.probe_step must be positive".into()));
        }
        if self.attack.num_samples as u64 > self.budget.cap {
            return Err(Error::Config(format!(
                "attack.num_samples {} exceeds budget.cap {}",
                self.attack.num_samples, self.budget.cap
            )));
        }
        if self.microbench.reps == 0 || !(self.microbench.sigma_eps >= 0.0 && self.microbench.sigma_eps.is_finite()) {
            return Err(Error::Config("microbench needs reps >= 1 and a finite sigma_eps >= 0".into()));
        }
        let c = &self.calibration;
        if c.target_samples < 4 || !(c.alpha > 0.5 && c.alpha < 1.0) {
            return Err(Error::Config("calibration needs target_samples >= 4 and 0.5 < alpha < 1".into()));
        }
        for d in &self.defenses {
            d.policy.validate()?;
            if let Some(t) = d.threads {
                if t == 0 || t > max {
                    return Err(Error::BatchTooLarge { size: t, max });
                }
            }
            if d.samples.is_some_and(|s| s < 10 || s > self.budget.cap) {
                return Err(Error::Config(format!("defense {:?}: samples must lie in 10..=budget.cap", d.name)));
            }
        }
        Ok(())
    }

    /// The campaign's master key.
    pub fn master_key(&self) -> Block {
        self.key.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ KEY_STREAM_SALT);
            rng.gen()
        })
    }

    /// This configuration with one defense row's settings applied.
    pub fn with_defense(&self, d: &DefenseConfig) -> CampaignConfig {
        let mut cfg = self.clone();
        cfg.policy = d.policy;
        cfg.mshr = d.mshr;
        cfg.rotate_every = d.rotate_every;
        if let Some(t) = d.threads {
            cfg.batch.threads = t;
        }
        if let Some(s) = d.samples {
            cfg.attack.num_samples = s as usize;
        }
        cfg.defenses.clear();
        cfg
    }
}

/// A fully resolved campaign: machine, key, tables and countermeasures.
pub struct Scenario {
    pub sim: Simulator,
    pub policy: CoalescingPolicy,
    pub rotate_every: RotationSchedule,
    pub rotation_unique: bool,
    pub threads: usize,
    pub key: KeySchedule,
    pub tables: TTables,
    seed: u64,
    rotation_cost: f64,
}

/// One generated sample and the simulator's view of it.
pub struct SampleRef<'a> {
    pub index: u64,
    pub sample: &'a TimingSample,
    pub stats: &'a KernelStats,
    /// A rotation ran (and was charged) right before this sample.
    pub rotated: bool,
}

impl Scenario {
    pub fn new(cfg: &CampaignConfig) -> Result<Self> {
        cfg.validate()?;
        let sim = Simulator::new(cfg.machine.clone(), cfg.timing, cfg.mshr)?;
        let rotation_cost = sim.rotation_kernel_time();
        Ok(Scenario {
            sim,
            policy: cfg.policy,
            rotate_every: cfg.rotate_every,
            rotation_unique: cfg.rotation_unique,
            threads: cfg.batch.threads,
            key: expand_key(&cfg.master_key()),
            tables: TTables::new(),
            seed: cfg.seed,
            rotation_cost,
        })
    }

    /// Noise-free cost charged for one rotation kernel.
    pub fn rotation_cost(&self) -> f64 {
        self.rotation_cost
    }

    pub fn initial_layout(&self) -> RotatedTable {
        RotatedTable::new(&self.tables.t4)
    }

    /// Applies the rotation scheduled right before sample `index`, if any.
    pub fn step_rotation(&self, layout: &mut RotatedTable, index: u64) -> bool {
        if !self.rotate_every.should_rotate(index) {
            return false;
        }
        let k = match self.rotate_every {
            RotationSchedule::Every(f) => index / f,
            RotationSchedule::Off => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ROTATION_STREAM_SALT);
        rng.set_stream(k);
        layout.rotate(&mut rng, self.rotation_unique);
        true
    }

    /// Simulates sample `index` on the given layout.
    pub fn generate(&self, index: u64, layout: &RotatedTable, rotated: bool) -> Result<(TimingSample, KernelStats)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let pts: Vec<Block> = (0..self.threads).map(|_| rng.gen()).collect();
        let layout = match self.rotate_every {
            RotationSchedule::Off => Layout::Identity,
            RotationSchedule::Every(_) => Layout::Rotated(layout),
        };
        let (mut sample, mut stats) =
            self.sim.simulate_kernel(&pts, &self.key, &self.tables, layout, &self.policy, &mut rng)?;
        if rotated {
            sample.time += self.rotation_cost;
            stats.clean_time += self.rotation_cost;
        }
        Ok((sample, stats))
    }

    /// Generates samples `0..total` in chunks of `chunk`, folding each chunk
    /// into a fresh accumulator from `init` with `visit`, then handing the
    /// accumulators to `fold` in chunk order together with the number of
    /// samples seen so far. `fold` may stop the run early. Returns the
    /// number of samples generated.
    pub fn run<A, I, V, F>(
        &self,
        total: u64,
        chunk: u64,
        parallel: usize,
        init: I,
        visit: V,
        mut fold: F,
    ) -> Result<u64>
    where
        A: Send,
        I: Fn() -> A + Sync,
        V: Fn(&mut A, SampleRef<'_>) + Sync,
        F: FnMut(u64, A) -> Result<ControlFlow<()>>,
    {
        let chunk = chunk.max(1);
        let parallel = parallel.max(1);
        let mut layout = self.initial_layout();
        let mut next = 0u64;
        while next < total {
            let mut jobs = Vec::with_capacity(parallel);
            while jobs.len() < parallel && next < total {
                let end = (next + chunk).min(total);
                jobs.push((next, end, layout.clone()));
                if self.rotate_every != RotationSchedule::Off {
                    for i in next..end {
                        self.step_rotation(&mut layout, i);
                    }
                }
                next = end;
            }
            let work = |(start, end, mut layout): (u64, u64, RotatedTable)| -> Result<A> {
                let mut acc = init();
                for index in start..end {
                    let rotated = self.step_rotation(&mut layout, index);
                    let (sample, stats) = self.generate(index, &layout, rotated)?;
                    visit(&mut acc, SampleRef { index, sample: &sample, stats: &stats, rotated });
                }
                Ok(acc)
            };
            let ends: Vec<u64> = jobs.iter().map(|j| j.1).collect();
            let results: Vec<Result<A>> = if jobs.len() == 1 {
                jobs.into_iter().map(work).collect()
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(|| work(j))).collect();
                    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
                })
            };
            for (end, acc) in ends.into_iter().zip(results) {
                if fold(end, acc?)?.is_break() {
                    return Ok(end);
                }
            }
        }
        Ok(total)
    }
}

/// Options that affect how, but never what, a campaign computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub parallel: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { parallel: 1 }
    }
}

/// Maps `f` over `items` on up to `parallel` threads, keeping input order.
pub(crate) fn par_map<T, U, F>(items: Vec<T>, parallel: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let parallel = parallel.max(1).min(items.len().max(1));
    if parallel == 1 {
        return items.into_iter().map(f).collect();
    }
    let per = items.len().div_ceil(parallel);
    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        groups.push(it.by_ref().take(per).collect());
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            groups.into_iter().map(|g| s.spawn(move || g.into_iter().map(f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Hex digest identifying a configuration snapshot.
pub fn config_digest(cfg: &CampaignConfig) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
