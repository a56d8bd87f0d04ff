//! Column-wise random rotation of a lookup table laid out as `l` cache lines
//! of `m` elements, with logical-to-physical address translation.
//!
//! Element `x` sits at row `x / m`, column `x % m`. A rotation shifts every
//! column `i` down by its own offset `r_i` (mod `l`), so the set of rows touched
//! by a group of accesses changes while each column keeps its elements.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current layout of a rotated table relative to its logical order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationState {
    m: usize,
    l: usize,
    offsets: Vec<usize>,
    generation: u64,
}

impl RotationState {
    /// Identity layout for a table of `l` lines holding `m` elements each.
    pub fn identity(m: usize, l: usize) -> Result<Self> {
        if m == 0 || l == 0 {
            return Err(Error::Config(format!("rotation geometry must be positive (m={m}, l={l})")));
        }
        Ok(RotationState { m, l, offsets: vec![0; m], generation: 0 })
    }

    pub fn elements_per_line(&self) -> usize {
        self.m
    }

    pub fn lines(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.m * self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Physical slot holding logical element `logical`.
    pub fn translate(&self, logical: usize) -> Result<usize> {
        if logical >= self.len() {
            return Err(Error::IndexOutOfRange { index: logical, len: self.len() });
        }
        let (row, col) = (logical / self.m, logical % self.m);
        Ok(((row + self.offsets[col]) % self.l) * self.m + col)
    }

    /// Applies the given per-column shifts to `table` and composes them into
    /// the state. `table` must currently be laid out according to `self`.
    pub fn rotate_with<T: Copy>(&mut self, table: &mut [T], shifts: &[usize]) -> Result<()> {
        if table.len() != self.len() {
            return Err(Error::Config(format!("table has {} elements, layout expects {}", table.len(), self.len())));
        }
        if shifts.len() != self.m {
            return Err(Error::Config(format!("expected {} column shifts, got {}", self.m, shifts.len())));
        }
        // double buffer: rotating in place would overwrite rows not yet moved
        let old = table.to_vec();
        for (col, &shift) in shifts.iter().enumerate() {
            let shift = shift % self.l;
            for row in 0..self.l {
                table[((row + shift) % self.l) * self.m + col] = old[row * self.m + col];
            }
            self.offsets[col] = (self.offsets[col] + shift) % self.l;
        }
        self.generation += 1;
        Ok(())
    }

    /// Draws fresh column shifts and rotates `table`.
    ///
    /// With `unique` set and `m <= l`, shifts are drawn without replacement so
    /// no two columns move by the same amount.
    pub fn rotate<T: Copy, R: Rng + ?Sized>(
        &mut self,
        table: &mut [T],
        rng: &mut R,
        unique: bool,
    ) -> Result<Vec<usize>> {
        let shifts = draw_shifts(self.m, self.l, rng, unique);
        self.rotate_with(table, &shifts)?;
        Ok(shifts)
    }
}

fn draw_shifts<R: Rng + ?Sized>(m: usize, l: usize, rng: &mut R, unique: bool) -> Vec<usize> {
    if unique && m <= l {
        index::sample(rng, l, m).into_vec()
    } else {
        (0..m).map(|_| rng.gen_range(0..l)).collect()
    }
}

/// The 256-entry last-round table in its current physical arrangement.
#[derive(Clone, Debug)]
pub struct RotatedTable {
    state: RotationState,
    physical: Vec<u32>,
    map: [u8; 256],
}

impl RotatedTable {
    /// 16 columns of 4-byte words in 16 lines of 64 bytes.
    pub fn new(logical: &[u32; 256]) -> Self {
        let state = RotationState::identity(16, 16).expect("fixed geometry");
        RotatedTable { state, physical: logical.to_vec(), map: core::array::from_fn(|i| i as u8) }
    }

    pub fn state(&self) -> &RotationState {
        &self.state
    }

    pub fn physical(&self) -> &[u32] {
        &self.physical
    }

    #[inline]
    pub fn physical_index(&self, logical: u8) -> u8 {
        self.map[logical as usize]
    }

    pub fn rotate<R: Rng + ?Sized>(&mut self, rng: &mut R, unique: bool) -> Vec<usize> {
        let shifts = self.state.rotate(&mut self.physical, rng, unique).expect("fixed geometry");
        self.refresh_map();
        shifts
    }

    pub fn rotate_with(&mut self, shifts: &[usize]) -> Result<()> {
        self.state.rotate_with(&mut self.physical, shifts)?;
        self.refresh_map();
        Ok(())
    }

    fn refresh_map(&mut self) {
        for x in 0..256 {
            self.map[x] = self.state.translate(x).expect("in range") as u8;
        }
    }
}

/// How often the table is rotated, in encrypted samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RotationSchedule {
    #[default]
    Off,
    Every(u64),
}

impl RotationSchedule {
    pub fn every(frequency: u64) -> Result<Self> {
        if frequency == 0 {
            return Err(Error::Config("rotation frequency must be at least 1".into()));
        }
        Ok(RotationSchedule::Every(frequency))
    }

    pub fn should_rotate(&self, sample_counter: u64) -> bool {
        match *self {
            RotationSchedule::Off => false,
            RotationSchedule::Every(f) => sample_counter.is_multiple_of(f),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleRepr {
    Every(u64),
    Word(String),
}

impl Serialize for RotationSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            RotationSchedule::Off => ScheduleRepr::Word("off".into()),
            RotationSchedule::Every(f) => ScheduleRepr::Every(f),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RotationSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match ScheduleRepr::deserialize(d)? {
            ScheduleRepr::Word(w) if w == "off" => Ok(RotationSchedule::Off),
            ScheduleRepr::Word(w) => Err(serde::de::Error::custom(format!("expected integer or \"off\", got {w:?}"))),
            ScheduleRepr::Every(0) => Err(serde::de::Error::custom("rotate_every must be >= 1")),
            ScheduleRepr::Every(f) => Ok(RotationSchedule::Every(f)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows_touched(state: &RotationState, accesses: &[usize]) -> usize {
        let mut rows: Vec<usize> = accesses.iter().map(|&x| state.translate(x).unwrap() / state.m).collect();
        rows.sort_unstable();
        rows.dedup();
        rows.len()
    }

    #[test]
    fn zero_shift_keeps_table() {
        let mut st = RotationState::identity(16, 16).unwrap();
        let mut table: Vec<u32> = (0..256).collect();
        st.rotate_with(&mut table, &[0; 16]).unwrap();
        assert_eq!(table, (0..256).collect::<Vec<_>>());
        assert_eq!(st.generation(), 1);
    }

    #[test]
    fn translate_examples() {
        let mut st = RotationState::identity(16, 16).unwrap();
        for x in 0..256 {
            assert_eq!(st.translate(x).unwrap(), x);
        }
        let mut table = vec![0u8; 256];
        let mut shifts = [0usize; 16];
        shifts[0] = 1;
        st.rotate_with(&mut table, &shifts).unwrap();
        assert_eq!(st.translate(0).unwrap(), 16);
        assert!(matches!(st.translate(256), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn l_unit_rotations_restore_layout() {
        let mut st = RotationState::identity(16, 16).unwrap();
        let orig: Vec<u32> = (0..256).map(|x| x * 7 + 1).collect();
        let mut table = orig.clone();
        for _ in 0..16 {
            st.rotate_with(&mut table, &[1; 16]).unwrap();
        }
        assert_eq!(table, orig);
        assert!(st.offsets().iter().all(|&o| o == 0));
    }

    #[test]
    fn figure_example_rows_four_to_three() {
        // 16-element table, 4 per line; columns shifted by 2, 3, 0, 1
        let mut st = RotationState::identity(4, 4).unwrap();
        let accesses = [0, 1, 3, 4, 9, 12, 14];
        assert_eq!(rows_touched(&st, &accesses), 4);
        let mut table: Vec<usize> = (0..16).collect();
        st.rotate_with(&mut table, &[2, 3, 0, 1]).unwrap();
        assert_eq!(rows_touched(&st, &accesses), 3);
        for x in 0..16 {
            assert_eq!(table[st.translate(x).unwrap()], x);
        }
    }

    #[test]
    fn unique_shifts_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut s = draw_shifts(16, 16, &mut rng, true);
            assert!(s.iter().all(|&x| x < 16));
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 16);
        }
    }

    #[test]
    fn schedule() {
        let f1 = RotationSchedule::every(1).unwrap();
        assert!((0..50).all(|c| f1.should_rotate(c)));
        let f = RotationSchedule::every(1000).unwrap();
        assert_eq!((f.should_rotate(999), f.should_rotate(1000), f.should_rotate(1001)), (false, true, false));
        assert!((0..5000).all(|c| !RotationSchedule::Off.should_rotate(c)));
        assert!(RotationSchedule::every(0).is_err());
    }

    #[test]
    fn schedule_serde() {
        #[derive(Serialize, Deserialize)]
        struct W {
            rotate_every: RotationSchedule,
        }
        let w: W = toml::from_str("rotate_every = \"off\"").unwrap();
        assert_eq!(w.rotate_every, RotationSchedule::Off);
        let w: W = toml::from_str("rotate_every = 1000").unwrap();
        assert_eq!(w.rotate_every, RotationSchedule::Every(1000));
        assert!(toml::from_str::<W>("rotate_every = 0").is_err());
        assert_eq!(
            toml::to_string(&W { rotate_every: RotationSchedule::Every(5) }).unwrap().trim(),
            "rotate_every = 5"
        );
    }

    proptest! {
        #[test]
        fn rotation_is_a_permutation(seed in any::<u64>(), rounds in 1usize..40, unique in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logical: [u32; 256] = core::array::from_fn(|i| (i as u32).wrapping_mul(2654435761));
            let mut rt = RotatedTable::new(&logical);
            for _ in 0..rounds {
                rt.rotate(&mut rng, unique);
            }
            let mut a = rt.physical().to_vec();
            let mut b = logical.to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            let mut seen = [false; 256];
            for x in 0..=255u8 {
                let p = rt.physical_index(x);
                prop_assert!(!seen[p as usize]);
                seen[p as usize] = true;
                prop_assert_eq!(rt.physical()[p as usize], logical[x as usize]);
            }
        }
    }
}
