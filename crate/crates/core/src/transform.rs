//! Cursor-driven schedule actions.
//!
//! The cursor marks one loop. `Up`/`Down` move it, `SwapUp`/`SwapDown`
//! interchange the marked loop with a neighbour, and the `Split*` family tiles
//! the marked loop. Actions that do not apply to the current schedule are
//! no-ops reported through [`ActionOutcome::applied`].

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ir::{LoopDesc, LoopIR, Nest, MAX_LOOPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    SwapUp = 2,
    SwapDown = 3,
    Split2 = 4,
    Split4 = 5,
    Split8 = 6,
    Split16 = 7,
    Split32 = 8,
    Split64 = 9,
}

pub const NUM_ACTIONS: usize = 10;

impl Action {
    /// All actions in id order.
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::SwapUp,
        Action::SwapDown,
        Action::Split2,
        Action::Split4,
        Action::Split8,
        Action::Split16,
        Action::Split32,
        Action::Split64,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Action::ALL.get(id).copied()
    }

    pub fn split_factor(self) -> Option<usize> {
        match self {
            Action::Split2 => Some(2),
            Action::Split4 => Some(4),
            Action::Split8 => Some(8),
            Action::Split16 => Some(16),
            Action::Split32 => Some(32),
            Action::Split64 => Some(64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::SwapUp => "swap_up",
            Action::SwapDown => "swap_down",
            Action::Split2 => "split_2",
            Action::Split4 => "split_4",
            Action::Split8 => "split_8",
            Action::Split16 => "split_16",
            Action::Split32 => "split_32",
            Action::Split64 => "split_64",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownAction(pub String);

impl fmt::Display for UnknownAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown action `{}`", self.0)
    }
}

impl std::error::Error for UnknownAction {}

impl FromStr for Action {
    type Err = UnknownAction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownAction(s.to_string()))
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of actions, stored as a bitmask over action ids.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSet(u16);

impl ActionSet {
    pub const FULL: ActionSet = ActionSet((1 << NUM_ACTIONS) - 1);

    pub fn empty() -> Self {
        ActionSet(0)
    }

    pub fn from_bits(bits: u16) -> Self {
        ActionSet(bits & Self::FULL.0)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= 1 << a.id();
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.id()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut s = ActionSet::empty();
        for a in iter {
            s.insert(a);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionOutcome {
    pub next: LoopIR,
    /// The loop structure changed (false for cursor moves and no-ops).
    pub changed: bool,
    /// The action was legal here; false means the schedule is returned untouched.
    pub applied: bool,
}

/// Whether `a` would change anything when applied to `ir`.
pub fn is_legal(ir: &LoopIR, a: Action) -> bool {
    let loops = ir.loops();
    let c = ir.cursor();
    let cur = loops[c];
    match a {
        Action::Up => c > 0,
        Action::Down => c + 1 < loops.len(),
        Action::SwapUp => c > 0 && swappable(&cur, &loops[c - 1]),
        Action::SwapDown => c + 1 < loops.len() && swappable(&cur, &loops[c + 1]),
        _ => {
            let k = a.split_factor().expect("split action");
            cur.nest == Nest::Compute && cur.size > k && loops.len() < MAX_LOOPS
        }
    }
}

// Interchanging two loops over the same variable would reorder the tiling
// chain and leave tails referring to the wrong step, so it is refused.
fn swappable(a: &LoopDesc, b: &LoopDesc) -> bool {
    a.nest == b.nest && a.var != b.var
}

/// Apply one action, returning a new schedule. `ir` is never modified.
pub fn apply(ir: &LoopIR, a: Action) -> ActionOutcome {
    if !is_legal(ir, a) {
        return ActionOutcome {
            next: ir.clone(),
            changed: false,
            applied: false,
        };
    }
    let mut next = ir.clone();
    let c = next.cursor;
    let changed = match a {
        Action::Up => {
            next.cursor -= 1;
            false
        }
        Action::Down => {
            next.cursor += 1;
            false
        }
        Action::SwapUp => {
            next.loops.swap(c, c - 1);
            next.cursor -= 1;
            true
        }
        Action::SwapDown => {
            next.loops.swap(c, c + 1);
            next.cursor += 1;
            true
        }
        _ => {
            let k = a.split_factor().expect("split action");
            let step = ir.steps()[c];
            let cur = next.loops[c];
            next.loops[c] = LoopDesc {
                size: cur.size / k,
                tail: (cur.size % k) * step + cur.tail,
                ..cur
            };
            next.loops.insert(
                c + 1,
                LoopDesc {
                    size: k,
                    tail: 0,
                    ..cur
                },
            );
            true
        }
    };
    ActionOutcome {
        next,
        changed,
        applied: true,
    }
}

/// Every action for which [`apply`] reports `applied`.
pub fn legal_actions(ir: &LoopIR) -> ActionSet {
    Action::ALL.into_iter().filter(|&a| is_legal(ir, a)).collect()
}

/// One visited state: structural key plus cursor.
pub type HistoryEntry = (String, usize);

/// True when the last four entries bounce between two states that share a
/// structure and differ only in cursor position.
pub fn oscillation_detected(history: &[HistoryEntry]) -> bool {
    let n = history.len();
    if n < 4 {
        return false;
    }
    let w = &history[n - 4..];
    w[0] == w[2] && w[1] == w[3] && w[0] != w[1] && w[0].0 == w[1].0
}

/// Sliding window of the most recent states for oscillation detection.
#[derive(Debug, Clone, Default)]
pub struct OscillationWindow {
    entries: VecDeque<HistoryEntry>,
}

impl OscillationWindow {
    pub const LEN: usize = 4;

    pub fn push(&mut self, ir: &LoopIR) {
        if self.entries.len() == Self::LEN {
            self.entries.pop_front();
        }
        self.entries.push_back((ir.canonical_key(), ir.cursor()));
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn detected(&self) -> bool {
        let v: Vec<HistoryEntry> = self.entries.iter().cloned().collect();
        oscillation_detected(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_spec;
    use crate::ir::{lower, ContractionSpec};

    fn mm64() -> LoopIR {
        lower(&ContractionSpec::matmul(64, 64, 64).unwrap())
    }

    fn shape(ir: &LoopIR) -> Vec<(String, usize, usize)> {
        ir.loops()
            .iter()
            .map(|l| (ir.var_name(l.var).to_string(), l.size, l.tail))
            .collect()
    }

    #[test]
    fn ids_and_names_are_stable() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.id(), i);
            assert_eq!(Action::from_id(i), Some(*a));
            assert_eq!(a.name().parse::<Action>().unwrap(), *a);
        }
        assert_eq!(Action::Split16.name(), "split_16");
        assert_eq!(serde_json::to_string(&Action::SwapDown).unwrap(), "\"swap_down\"");
        assert!("split_3".parse::<Action>().is_err());
    }

    #[test]
    fn split16_tiles_m() {
        let out = apply(&mm64(), Action::Split16);
        assert!(out.applied && out.changed);
        let s = shape(&out.next);
        assert_eq!(s[0], ("m".into(), 4, 0));
        assert_eq!(s[1], ("m".into(), 16, 0));
        assert_eq!(s[2].0, "n");
        assert_eq!(out.next.cursor(), 0);
        // The outer loop advances m by a whole tile.
        assert_eq!(out.next.steps()[0], 16);
        out.next.validate().unwrap();
    }

    #[test]
    fn split_with_tail() {
        let ir = lower(&parse_spec("O[i] += X[i] * Y[] | i=100").unwrap());
        let out = apply(&ir, Action::Split16);
        assert_eq!(out.next.loops()[0].size, 6);
        assert_eq!(out.next.loops()[0].tail, 4);
        assert_eq!(out.next.loops()[1].size, 16);
        assert_eq!(out.next.loops()[1].tail, 0);
        out.next.validate().unwrap();
    }

    #[test]
    fn resplit_carries_tail_in_element_units() {
        let ir = lower(&parse_spec("O[i] += X[i] * Y[] | i=100").unwrap());
        let ir = apply(&ir, Action::Split8).next; // 12 x 8, tail 4
        let ir = apply(&ir, Action::Split4).next; // 3 x (4 x 8), tail 4
        assert_eq!(shape(&ir)[0], ("i".into(), 3, 4));
        assert_eq!(shape(&ir)[1], ("i".into(), 4, 0));
        ir.validate().unwrap();
        // Splitting the 12 into 5s leaves 2 blocks of 8 plus the old tail.
        let ir = lower(&parse_spec("O[i] += X[i] * Y[] | i=100").unwrap());
        let ir = apply(&ir, Action::Split8).next;
        let ir = apply(&ir, Action::Split2).next;
        assert_eq!(shape(&ir)[0], ("i".into(), 6, 4));
        ir.validate().unwrap();
    }

    #[test]
    fn boundary_noops() {
        let ir = mm64();
        let out = apply(&ir, Action::Up);
        assert!(!out.applied && !out.changed);
        assert_eq!(out.next, ir);

        let last_compute = ir.with_cursor(2).unwrap();
        let out = apply(&last_compute, Action::SwapDown);
        assert!(!out.applied);
        assert_eq!(out.next, last_compute);

        let wb = ir.with_cursor(3).unwrap();
        assert!(!apply(&wb, Action::Split2).applied);
        assert!(apply(&wb, Action::SwapDown).applied);
        assert!(!apply(&wb, Action::SwapUp).applied);
    }

    #[test]
    fn legal_set_fresh_matmul() {
        let expected: ActionSet = [
            Action::Down,
            Action::SwapDown,
            Action::Split2,
            Action::Split4,
            Action::Split8,
            Action::Split16,
            Action::Split32,
        ]
        .into_iter()
        .collect();
        let ir = mm64();
        assert_eq!(legal_actions(&ir), expected);
        // Same set, derived by applying each action.
        let by_apply: ActionSet = Action::ALL
            .into_iter()
            .filter(|&a| apply(&ir, a).applied)
            .collect();
        assert_eq!(by_apply, expected);
    }

    #[test]
    fn single_loop_nest() {
        let ir = lower(&parse_spec("O[] += X[i] * Y[i] | i=8").unwrap());
        assert_eq!(ir.loops().len(), 1);
        let legal = legal_actions(&ir);
        assert!(!legal.contains(Action::SwapDown) && !legal.contains(Action::SwapUp));
        assert!(!legal.contains(Action::Down));
        assert!(!legal.is_empty());

        let ir = lower(&parse_spec("O[i] += X[i] * Y[] | i=8").unwrap());
        assert!(legal_actions(&ir).contains(Action::Down));
    }

    #[test]
    fn same_var_swap_refused() {
        let ir = apply(&mm64(), Action::Split16).next;
        assert!(!is_legal(&ir, Action::SwapDown));
        let ir = ir.with_cursor(1).unwrap();
        assert!(!is_legal(&ir, Action::SwapUp));
        assert!(is_legal(&ir, Action::SwapDown));
    }

    #[test]
    fn capacity_blocks_splits() {
        let mut ir = lower(&parse_spec("O[i] += X[i] * Y[] | i=65536").unwrap());
        while ir.loops().len() < MAX_LOOPS {
            ir = apply(&ir, Action::Split2).next;
        }
        assert!(!is_legal(&ir, Action::Split2));
        ir.validate().unwrap();
    }

    #[test]
    fn inverse_pairs() {
        let ir = mm64().with_cursor(1).unwrap();
        let there = apply(&ir, Action::Up).next;
        assert_eq!(apply(&there, Action::Down).next, ir);
        let swapped = apply(&ir, Action::SwapDown).next;
        assert_eq!(swapped.cursor(), 2);
        assert_eq!(apply(&swapped, Action::SwapUp).next, ir);
    }

    #[test]
    fn oscillation() {
        let e = |k: &str, c: usize| (k.to_string(), c);
        assert!(oscillation_detected(&[e("k1", 0), e("k1", 1), e("k1", 0), e("k1", 1)]));
        assert!(!oscillation_detected(&[e("k1", 0), e("k2", 0), e("k1", 0), e("k2", 0)]));
        assert!(!oscillation_detected(&[e("k1", 0), e("k1", 1), e("k1", 0)]));
        assert!(!oscillation_detected(&[e("k1", 0), e("k1", 0), e("k1", 0), e("k1", 0)]));
        assert!(oscillation_detected(&[
            e("k9", 3),
            e("k1", 0),
            e("k1", 1),
            e("k1", 0),
            e("k1", 1)
        ]));

        let mut w = OscillationWindow::default();
        let ir = mm64();
        let down = apply(&ir, Action::Down).next;
        for s in [&ir, &down, &ir, &down] {
            w.push(s);
        }
        assert!(w.detected());
    }
}
