//! The abacus world: bead columns, the operating finger, the signpost, and
//! the two-column sliding window the agent observes.
//!
//! Everything here is deterministic. Column 0 is the least significant
//! column and sits at the left edge; carries travel rightwards.

use std::fmt;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bead positions per column, which is also the number base.
pub const BASE: u8 = 5;
pub const ROWS: usize = BASE as usize;
/// Bead rows plus the positional-encoding row.
pub const OBS_ROWS: usize = ROWS + 1;
pub const OBS_COLS: usize = 2;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_LEN: usize = OBS_ROWS * OBS_COLS * OBS_CHANNELS;
pub const STACK_DEPTH: usize = 3;
pub const NUM_ACTIONS: usize = 8;

const SIGNPOST_MARK: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    FingerLeft = 0,
    FingerRight = 1,
    FingerUp = 2,
    FingerDown = 3,
    SignpostLeft = 4,
    SignpostRight = 5,
    MoveSlide = 6,
    Submit = 7,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::FingerLeft,
        Action::FingerRight,
        Action::FingerUp,
        Action::FingerDown,
        Action::SignpostLeft,
        Action::SignpostRight,
        Action::MoveSlide,
        Action::Submit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn is_finger_move(self) -> bool {
        matches!(
            self,
            Action::FingerLeft | Action::FingerRight | Action::FingerUp | Action::FingerDown
        )
    }

    pub fn is_signpost_move(self) -> bool {
        matches!(self, Action::SignpostLeft | Action::SignpostRight)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::FingerLeft => "finger_left",
            Action::FingerRight => "finger_right",
            Action::FingerUp => "finger_up",
            Action::FingerDown => "finger_down",
            Action::SignpostLeft => "signpost_left",
            Action::SignpostRight => "signpost_right",
            Action::MoveSlide => "move_slide",
            Action::Submit => "submit",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Legality of each action, indexed by [`Action::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionMask(pub [bool; NUM_ACTIONS]);

impl ActionMask {
    pub fn allows(&self, a: Action) -> bool {
        self.0[a.index()]
    }

    pub fn legal(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(|a| self.allows(*a))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AbacusState {
    columns: Vec<u8>,
    finger_col: usize,
    finger_row: u8,
    signpost_col: usize,
}

/// JSON snapshot `{columns:[...], finger:[col,row], signpost:col}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub columns: Vec<u8>,
    pub finger: [usize; 2],
    pub signpost: usize,
}

impl AbacusState {
    /// A zeroed abacus with the finger at (0, 0) and the signpost on column 0.
    pub fn new(num_columns: usize) -> Result<Self> {
        if num_columns == 0 {
            return Err(Error::NoColumns);
        }
        Ok(AbacusState {
            columns: vec![0; num_columns],
            finger_col: 0,
            finger_row: 0,
            signpost_col: 0,
        })
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[u8] {
        &self.columns
    }

    pub fn column(&self, col: usize) -> u8 {
        self.columns[col]
    }

    pub fn finger(&self) -> (usize, u8) {
        (self.finger_col, self.finger_row)
    }

    pub fn finger_col(&self) -> usize {
        self.finger_col
    }

    pub fn finger_row(&self) -> u8 {
        self.finger_row
    }

    pub fn signpost_col(&self) -> usize {
        self.signpost_col
    }

    /// Σ columns[i]·5^i.
    pub fn value(&self) -> BigUint {
        digits_to_value(&self.columns)
    }

    /// `value()` when it fits in 128 bits.
    pub fn value_u128(&self) -> Option<u128> {
        self.value().to_u128()
    }

    /// Overwrites the bead columns so that `value()` equals `v`.
    pub fn set_value(&mut self, v: &BigUint) -> Result<()> {
        let digits = value_to_digits(v);
        if digits.len() > self.columns.len() {
            return Err(Error::Overflow {
                value: v.to_string(),
                columns: self.columns.len(),
            });
        }
        self.columns.iter_mut().for_each(|c| *c = 0);
        self.columns[..digits.len()].copy_from_slice(&digits);
        Ok(())
    }

    /// Builder-style variant of [`AbacusState::set_value`].
    pub fn with_value(mut self, v: &BigUint) -> Result<Self> {
        self.set_value(v)?;
        Ok(self)
    }

    /// Places the finger and signpost directly. Intended for fixtures.
    pub fn with_pointers(mut self, finger: (usize, u8), signpost: usize) -> Result<Self> {
        let c = self.columns.len();
        if finger.0 >= c || finger.1 as usize >= ROWS || signpost >= c {
            return Err(Error::Config(format!(
                "pointer out of range: finger {finger:?}, signpost {signpost}, {c} columns"
            )));
        }
        self.finger_col = finger.0;
        self.finger_row = finger.1;
        self.signpost_col = signpost;
        Ok(self)
    }

    pub fn with_columns(mut self, cols: &[u8]) -> Result<Self> {
        if cols.len() != self.columns.len() {
            return Err(Error::Shape(format!("expected {} columns, got {}", self.columns.len(), cols.len())));
        }
        if let Some(&d) = cols.iter().find(|d| **d >= BASE) {
            return Err(Error::InvalidDigit(char::from_digit(d as u32, 10).unwrap_or('?')));
        }
        self.columns.copy_from_slice(cols);
        Ok(self)
    }

    pub fn legal_mask(&self) -> ActionMask {
        let last = self.columns.len() - 1;
        let top = (ROWS - 1) as u8;
        let mut m = [true; NUM_ACTIONS];
        m[Action::FingerLeft.index()] = self.finger_col > 0;
        m[Action::FingerRight.index()] = self.finger_col < last;
        m[Action::FingerUp.index()] = self.finger_row < top;
        m[Action::FingerDown.index()] = self.finger_row > 0;
        m[Action::SignpostLeft.index()] = self.signpost_col > 0;
        m[Action::SignpostRight.index()] = self.signpost_col < last;
        m[Action::MoveSlide.index()] = self.columns[self.finger_col] != self.finger_row;
        ActionMask(m)
    }

    /// Applies a legal action in place. `Submit` has no effect on the board.
    pub fn apply(&mut self, a: Action) -> Result<()> {
        if !self.legal_mask().allows(a) {
            return Err(Error::IllegalAction(a));
        }
        match a {
            Action::FingerLeft => self.finger_col -= 1,
            Action::FingerRight => self.finger_col += 1,
            Action::FingerUp => self.finger_row += 1,
            Action::FingerDown => self.finger_row -= 1,
            Action::SignpostLeft => self.signpost_col -= 1,
            Action::SignpostRight => self.signpost_col += 1,
            Action::MoveSlide => self.columns[self.finger_col] = self.finger_row,
            Action::Submit => {}
        }
        Ok(())
    }

    pub fn observe(&self) -> Observation {
        let mut obs = Observation::zeros();
        let visible = [self.finger_col.checked_sub(1), Some(self.finger_col)];
        for (k, col) in visible.into_iter().enumerate() {
            match col {
                Some(c) => {
                    obs.set(self.columns[c] as usize, k, 0, 1.0);
                    let mut pos = positional_code(c);
                    if self.signpost_col == c {
                        pos += SIGNPOST_MARK;
                    }
                    obs.set(ROWS, k, 0, pos);
                }
                None => {
                    for r in 0..OBS_ROWS {
                        obs.set(r, k, 2, 1.0);
                    }
                }
            }
        }
        obs.set(self.finger_row as usize, 1, 1, 1.0);
        obs
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            columns: self.columns.clone(),
            finger: [self.finger_col, self.finger_row as usize],
            signpost: self.signpost_col,
        }
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        let finger_row = u8::try_from(s.finger[1]).map_err(|_| Error::Config("finger row".into()))?;
        AbacusState::new(s.columns.len())?
            .with_columns(&s.columns)?
            .with_pointers((s.finger[0], finger_row), s.signpost)
    }
}

impl fmt::Display for AbacusState {
    /// ASCII dump: one line per bead row (top row first), `o` marks the
    /// bead, `F` the finger, `^` the signpost column underneath.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in (0..ROWS as u8).rev() {
            write!(f, "{r} ")?;
            for (c, &d) in self.columns.iter().enumerate() {
                let ch = match (c == self.finger_col && r == self.finger_row, d == r) {
                    (true, true) => '@',
                    (true, false) => 'F',
                    (false, true) => 'o',
                    (false, false) => '.',
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        write!(f, "  ")?;
        for c in 0..self.columns.len() {
            write!(f, "{}", if c == self.signpost_col { '^' } else { ' ' })?;
        }
        Ok(())
    }
}

/// Positional encoding of a column: 0.25, 0.5, 0.75, repeating.
pub fn positional_code(col: usize) -> f32 {
    [0.25, 0.5, 0.75][col % 3]
}

/// Least-significant-first base-5 digits of `v`; empty for zero.
pub fn value_to_digits(v: &BigUint) -> Vec<u8> {
    if v.is_zero() {
        return Vec::new();
    }
    v.to_radix_le(BASE as u32)
}

pub fn digits_to_value(digits: &[u8]) -> BigUint {
    let mut acc = BigUint::zero();
    for &d in digits.iter().rev() {
        acc = acc * BASE as u32 + d as u32;
    }
    acc
}

/// One 6×2×3 window frame stored row-major as (row, col, channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f32; OBS_LEN]);

impl Observation {
    pub fn zeros() -> Self {
        Observation([0.0; OBS_LEN])
    }

    #[inline]
    fn idx(row: usize, col: usize, ch: usize) -> usize {
        (row * OBS_COLS + col) * OBS_CHANNELS + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.0[Self::idx(row, col, ch)]
    }

    fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.0[Self::idx(row, col, ch)] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// The three most recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack {
    frames: [Observation; STACK_DEPTH],
}

impl ObservationStack {
    pub fn new(initial: Observation) -> Self {
        ObservationStack {
            frames: [initial; STACK_DEPTH],
        }
    }

    pub fn push(&mut self, obs: Observation) {
        self.frames.rotate_left(1);
        self.frames[STACK_DEPTH - 1] = obs;
    }

    pub fn frames(&self) -> &[Observation; STACK_DEPTH] {
        &self.frames
    }

    pub fn latest(&self) -> &Observation {
        &self.frames[STACK_DEPTH - 1]
    }

    /// Flattened (depth, row, col, channel) tensor.
    pub fn write_flat(&self, out: &mut [f32]) {
        for (d, f) in self.frames.iter().enumerate() {
            out[d * OBS_LEN..(d + 1) * OBS_LEN].copy_from_slice(&f.0);
        }
    }

    pub fn to_flat(&self) -> Vec<f32> {
        let mut v = vec![0.0; STACK_DEPTH * OBS_LEN];
        self.write_flat(&mut v);
        v
    }
}
