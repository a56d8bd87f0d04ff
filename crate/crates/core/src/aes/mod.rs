//! T-table AES-128 with per-round lookup tracing, plus the attacker's
//! last-round inversion and key-schedule inversion.

pub mod reference;
mod ttable;

pub use ttable::{TTables, SBOX};

use crate::rotation::RotatedTable;

/// One 16-byte AES block.
pub type Block = [u8; 16];

/// Table id of the last-round table.
pub const T4: u8 = 4;
/// Number of lookups per round.
pub const LOOKUPS_PER_ROUND: usize = 16;
/// Rounds that perform table lookups (1..=10).
pub const TRACED_ROUNDS: usize = 10;

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

/// Expanded AES-128 key: 11 round keys, round 0 being the master key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeySchedule {
    round_keys: [Block; 11],
    words: [u32; 44],
}

impl KeySchedule {
    pub fn master(&self) -> &Block {
        &self.round_keys[0]
    }

    pub fn round_key(&self, round: usize) -> &Block {
        &self.round_keys[round]
    }

    pub fn round_keys(&self) -> &[Block; 11] {
        &self.round_keys
    }

    pub fn last_round_key(&self) -> &Block {
        &self.round_keys[10]
    }
}

fn sub_word(w: u32) -> u32 {
    let b = w.to_be_bytes();
    u32::from_be_bytes([SBOX[b[0] as usize], SBOX[b[1] as usize], SBOX[b[2] as usize], SBOX[b[3] as usize]])
}

/// Standard AES-128 key expansion (176 bytes).
pub fn expand_key(master: &Block) -> KeySchedule {
    let mut words = [0u32; 44];
    for i in 0..4 {
        words[i] = u32::from_be_bytes(master[4 * i..4 * i + 4].try_into().unwrap());
    }
    for i in 4..44 {
        let mut t = words[i - 1];
        if i % 4 == 0 {
            t = sub_word(t.rotate_left(8)) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        words[i] = words[i - 4] ^ t;
    }
    let mut round_keys = [[0u8; 16]; 11];
    for (r, rk) in round_keys.iter_mut().enumerate() {
        for c in 0..4 {
            rk[4 * c..4 * c + 4].copy_from_slice(&words[4 * r + c].to_be_bytes());
        }
    }
    KeySchedule { round_keys, words }
}

/// Recovers the master key from the round-10 key by running the schedule
/// backwards.
pub fn invert_schedule(round10: &Block) -> Block {
    let mut w = [0u32; 44];
    for i in 0..4 {
        w[40 + i] = u32::from_be_bytes(round10[4 * i..4 * i + 4].try_into().unwrap());
    }
    for i in (4..44).rev() {
        // w[i] = w[i-4] ^ f(w[i-1])  =>  w[i-4] = w[i] ^ f(w[i-1])
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = sub_word(t.rotate_left(8)) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i - 4] = w[i] ^ t;
    }
    let mut master = [0u8; 16];
    for c in 0..4 {
        master[4 * c..4 * c + 4].copy_from_slice(&w[c].to_be_bytes());
    }
    master
}

/// One table access: which table and which (physical) entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Lookup {
    pub table: u8,
    pub index: u8,
}

/// Every table lookup of one block encryption, grouped by round.
///
/// `rounds[0..9]` are rounds 1..=9 (tables 0..=3); `rounds[9]` is round 10,
/// where entry `j` is the t4 access that produced ciphertext byte `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessTrace {
    pub rounds: [[Lookup; LOOKUPS_PER_ROUND]; TRACED_ROUNDS],
}

impl AccessTrace {
    pub fn last_round(&self) -> &[Lookup; LOOKUPS_PER_ROUND] {
        &self.rounds[TRACED_ROUNDS - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Lookup> {
        self.rounds.iter().flatten()
    }
}

impl Default for AccessTrace {
    fn default() -> Self {
        AccessTrace { rounds: [[Lookup::default(); LOOKUPS_PER_ROUND]; TRACED_ROUNDS] }
    }
}

/// Placement of the last-round table in memory.
#[derive(Clone, Copy, Debug)]
pub enum Layout<'a> {
    Identity,
    Rotated(&'a RotatedTable),
}

impl Layout<'_> {
    #[inline]
    fn t4(&self, tables: &TTables, logical: u8) -> (u8, u32) {
        match self {
            Layout::Identity => (logical, tables.t4[logical as usize]),
            Layout::Rotated(rt) => {
                let phys = rt.physical_index(logical);
                (phys, rt.physical()[phys as usize])
            }
        }
    }
}

#[inline(always)]
fn b0(w: u32) -> u8 {
    (w >> 24) as u8
}
#[inline(always)]
fn b1(w: u32) -> u8 {
    (w >> 16) as u8
}
#[inline(always)]
fn b2(w: u32) -> u8 {
    (w >> 8) as u8
}
#[inline(always)]
fn b3(w: u32) -> u8 {
    w as u8
}

/// Encrypts one block through the T-tables and records every lookup.
///
/// The trace holds physical t4 indices (after any rotation); the ciphertext
/// does not depend on the layout.
pub fn encrypt_block(pt: &Block, ks: &KeySchedule, tables: &TTables, layout: Layout<'_>) -> (Block, AccessTrace) {
    let mut trace = AccessTrace::default();
    let ct = encrypt_block_into(pt, ks, tables, layout, &mut trace);
    (ct, trace)
}

/// Same as [`encrypt_block`] but writes the trace into a caller buffer.
pub fn encrypt_block_into(
    pt: &Block,
    ks: &KeySchedule,
    tables: &TTables,
    layout: Layout<'_>,
    trace: &mut AccessTrace,
) -> Block {
    let rk = &ks.words;
    let mut s = [0u32; 4];
    for c in 0..4 {
        s[c] = u32::from_be_bytes(pt[4 * c..4 * c + 4].try_into().unwrap()) ^ rk[c];
    }
    for round in 1..10 {
        let rec = &mut trace.rounds[round - 1];
        let mut t = [0u32; 4];
        for c in 0..4 {
            let idx = [b0(s[c]), b1(s[(c + 1) % 4]), b2(s[(c + 2) % 4]), b3(s[(c + 3) % 4])];
            let mut acc = rk[4 * round + c];
            for (k, &i) in idx.iter().enumerate() {
                rec[4 * c + k] = Lookup { table: k as u8, index: i };
                acc ^= tables.te[k][i as usize];
            }
            t[c] = acc;
        }
        s = t;
    }
    let rec = &mut trace.rounds[9];
    let mut out = [0u8; 16];
    for c in 0..4 {
        let key = rk[40 + c].to_be_bytes();
        for r in 0..4 {
            let logical = (s[(c + r) % 4] >> (24 - 8 * r)) as u8;
            let (phys, word) = layout.t4(tables, logical);
            rec[4 * c + r] = Lookup { table: T4, index: phys };
            // t4 words replicate the S-box byte, any lane works
            out[4 * c + r] = (word >> (24 - 8 * r)) as u8 ^ key[r];
        }
    }
    out
}

/// Attacker-side inversion of the last round: the t4 index that would have
/// produced `ct_byte` under the key-byte guess.
#[inline]
pub fn last_round_index(ct_byte: u8, key_guess: u8, inv_t4: &[u8; 256]) -> u8 {
    inv_t4[(ct_byte ^ key_guess) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fips_key() -> Block {
        core::array::from_fn(|i| i as u8)
    }

    #[test]
    fn zero_key_round1_word() {
        let ks = expand_key(&[0u8; 16]);
        let oracle = reference::expand_key(&[0u8; 16]);
        assert_eq!(&ks.round_key(1)[..4], &oracle[1][..4]);
        assert_eq!(u32::from_be_bytes(ks.round_key(1)[..4].try_into().unwrap()), 0x6263_6363);
    }

    #[test]
    fn schedule_matches_oracle() {
        let ks = expand_key(&fips_key());
        assert_eq!(ks.round_keys(), &reference::expand_key(&fips_key()));
        assert_eq!(ks.master(), &fips_key());
    }

    #[test]
    fn fips_vector_matches_oracle() {
        let tables = TTables::new();
        let key = fips_key();
        let pt: Block = core::array::from_fn(|i| (i as u8) * 0x11);
        let (ct, trace) = encrypt_block(&pt, &expand_key(&key), &tables, Layout::Identity);
        assert_eq!(ct, reference::encrypt(&key, &pt));
        assert_eq!(hex::encode(ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
        assert!(trace.last_round().iter().all(|l| l.table == T4));
    }

    #[test]
    fn trace_round_structure() {
        let tables = TTables::new();
        let (_, trace) = encrypt_block(&[7u8; 16], &expand_key(&[3u8; 16]), &tables, Layout::Identity);
        for round in &trace.rounds[..9] {
            for (p, l) in round.iter().enumerate() {
                assert_eq!(l.table as usize, p % 4);
            }
        }
        assert_eq!(trace.last_round().len(), 16);
        assert_eq!(trace.iter().count(), 160);
    }

    #[test]
    fn invert_schedule_known() {
        let ks = expand_key(&fips_key());
        assert_eq!(invert_schedule(ks.last_round_key()), fips_key());
        let zero = reference::expand_key(&[0u8; 16]);
        assert_eq!(invert_schedule(&zero[10]), [0u8; 16]);
    }

    #[test]
    fn invert_schedule_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k: Block = rng.gen();
            let ks = expand_key(&k);
            assert_eq!(invert_schedule(ks.last_round_key()), k);
        }
    }

    #[test]
    fn last_round_index_identities() {
        let tables = TTables::new();
        assert_eq!(last_round_index(0x5a, 0x5a, &tables.inv_t4), tables.inv_t4[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let key: Block = rng.gen();
            let pt: Block = rng.gen();
            let ks = expand_key(&key);
            let (ct, trace) = encrypt_block(&pt, &ks, &tables, Layout::Identity);
            let expected = reference::last_round_inputs(&key, &pt);
            for j in 0..16 {
                let idx = last_round_index(ct[j], ks.last_round_key()[j], &tables.inv_t4);
                assert_eq!(idx, trace.last_round()[j].index);
                assert_eq!(idx, expected[j]);
            }
        }
    }

    #[test]
    fn wrong_guess_indices_are_uniform() {
        // chi-square over 256 bins, 1e6 draws; 99.9% quantile for 255 dof is ~330.5
        let tables = TTables::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut bins = [0u64; 256];
        let draws = 1_000_000u64;
        for _ in 0..draws {
            let ct: u8 = rng.gen();
            let guess: u8 = rng.gen();
            bins[last_round_index(ct, guess, &tables.inv_t4) as usize] += 1;
        }
        let e = draws as f64 / 256.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 330.5, "chi2 = {chi2}");
    }
}
