//! Flattened loop levels shared by the reference and timed executors.

use crate::ir::{LoopIR, Nest, TensorRole};

/// Tensor slots per nest: compute uses (A, B, T), write-back uses (T, Out, -).
pub(crate) const COMPUTE_SLOTS: [Option<TensorRole>; 3] =
    [Some(TensorRole::A), Some(TensorRole::B), Some(TensorRole::T)];
pub(crate) const WRITEBACK_SLOTS: [Option<TensorRole>; 3] =
    [Some(TensorRole::T), Some(TensorRole::Out), None];

#[derive(Debug, Clone, Copy)]
pub(crate) struct Level {
    pub var: usize,
    pub size: usize,
    pub step: usize,
    /// Element offset added per iteration, per slot.
    pub strides: [usize; 3],
}

/// Innermost body used when a nest has no loops at all (scalar output).
pub(crate) const UNIT_LEVEL: Level = Level {
    var: 0,
    size: 1,
    step: 1,
    strides: [0; 3],
};

pub(crate) fn levels(ir: &LoopIR, nest: Nest) -> Vec<Level> {
    let slots = match nest {
        Nest::Compute => COMPUTE_SLOTS,
        Nest::Writeback => WRITEBACK_SLOTS,
    };
    let steps = ir.steps();
    let p = ir.problem();
    ir.loops()
        .iter()
        .zip(steps)
        .filter(|(l, _)| l.nest == nest)
        .map(|(l, step)| {
            let mut strides = [0; 3];
            for (s, role) in strides.iter_mut().zip(slots) {
                if let Some(role) = role {
                    *s = p.layout(role).stride_of(l.var) * step;
                }
            }
            Level {
                var: l.var,
                size: l.size,
                step,
                strides,
            }
        })
        .collect()
}

#[inline]
fn advance(offs: [usize; 3], strides: [usize; 3], i: usize) -> [usize; 3] {
    [
        offs[0] + i * strides[0],
        offs[1] + i * strides[1],
        offs[2] + i * strides[2],
    ]
}

/// Run a nest, calling `kernel(level, n, offsets)` for each execution of the
/// innermost loop with its trip count `n`.
///
/// `limits[v]` is how many values of variable `v` the current level may still
/// cover. A loop runs as many whole steps as fit, then a shortened remainder
/// pass: that remainder is the loop's tail at full range, and a partial
/// iteration when the loop sits inside an outer tail.
pub(crate) fn walk<K>(levels: &[Level], limits: &mut [usize], offs: [usize; 3], kernel: &mut K)
where
    K: FnMut(&Level, usize, [usize; 3]),
{
    let Some((l, rest)) = levels.split_first() else {
        kernel(&UNIT_LEVEL, 1, offs);
        return;
    };
    let limit = limits[l.var];
    let full = l.size.min(limit / l.step);
    let rem = limit - full * l.step;
    if rest.is_empty() {
        debug_assert_eq!(rem, 0, "innermost loop has step 1");
        kernel(l, full, offs);
        return;
    }
    limits[l.var] = l.step;
    for i in 0..full {
        walk(rest, limits, advance(offs, l.strides, i), kernel);
    }
    if rem > 0 {
        limits[l.var] = rem;
        walk(rest, limits, advance(offs, l.strides, full), kernel);
    }
    limits[l.var] = limit;
}
