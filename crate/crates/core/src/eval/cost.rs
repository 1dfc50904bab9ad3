//! Deterministic analytic cost model.
//!
//! Every loop iteration costs one cycle plus, for each tensor it moves, the
//! fraction of a cache line it advances times the expected penalty of finding
//! that line. Enclosing loops that move the tensor by less than a line revisit
//! data: an enclosing loop with byte stride `s` finds the line again with
//! probability `1 - s/64`, in the cache level that holds everything touched by
//! the loops below it. The remaining `s/64` carries on to the next such loop
//! outwards, and whatever is left after the outermost one comes from memory.

use super::{BackendKind, EvalResult, PeakEstimate};
use crate::features::nest_roles;
use crate::ir::{LoopIR, Nest, TensorRole};

pub const ELEM_BYTES: usize = 4;
pub const LINE_BYTES: usize = 64;
pub const L1_BYTES: usize = 32 << 10;
pub const L2_BYTES: usize = 1 << 20;
pub const L3_BYTES: usize = 32 << 20;
/// Cycles to reach a line in L1, L2, L3 and memory.
pub const PENALTIES: [f64; 4] = [1.0, 10.0, 40.0, 100.0];
pub const CLOCK_GHZ: f64 = 1.0;
/// Cycles charged per loop iteration regardless of memory traffic.
pub const ITERATION_CYCLES: f64 = 1.0;

/// Upper bound on model throughput: two flops per iteration point, one
/// point per cycle, no memory penalty at all.
pub const PEAK_GFLOPS: f64 = 2.0 * CLOCK_GHZ / ITERATION_CYCLES;

/// Penalty of the smallest cache level holding `reuse_bytes`, or memory when
/// there is no reuse.
pub fn level_penalty(reuse_bytes: Option<usize>) -> f64 {
    match reuse_bytes {
        Some(b) if b <= L1_BYTES => PENALTIES[0],
        Some(b) if b <= L2_BYTES => PENALTIES[1],
        Some(b) if b <= L3_BYTES => PENALTIES[2],
        _ => PENALTIES[3],
    }
}

fn line_fraction(stride_bytes: usize) -> f64 {
    stride_bytes.min(LINE_BYTES) as f64 / LINE_BYTES as f64
}

/// Cycles for one access advancing `stride_bytes` with the given reuse distance.
pub fn access_cost(stride_bytes: usize, reuse_bytes: Option<usize>) -> f64 {
    line_fraction(stride_bytes) * level_penalty(reuse_bytes)
}

struct NestView<'a> {
    ir: &'a LoopIR,
    /// Positions of this nest's loops in the full list.
    pos: Vec<usize>,
    steps: Vec<usize>,
    roles: &'static [TensorRole],
}

impl NestView<'_> {
    fn span(&self, j: usize) -> usize {
        let l = self.ir.loops()[self.pos[j]];
        l.size * self.steps[j] + l.tail
    }

    fn stride(&self, j: usize, role: TensorRole) -> usize {
        let l = self.ir.loops()[self.pos[j]];
        self.ir.problem().layout(role).stride_of(l.var) * self.steps[j]
    }

    /// Bytes of cache lines all nest tensors touch in one run of loops `from..`.
    fn footprint(&self, from: usize) -> usize {
        let p = self.ir.problem();
        let mut range = vec![1usize; p.vars.len()];
        let mut seen = vec![false; p.vars.len()];
        for j in from..self.pos.len() {
            let v = self.ir.loops()[self.pos[j]].var;
            if !seen[v] {
                seen[v] = true;
                range[v] = self.span(j);
            }
        }
        let mut bytes = 0usize;
        for &role in self.roles {
            let dims = &p.layout(role).dims;
            let lines = match dims.split_last() {
                None => 1,
                Some((&last, rest)) => {
                    let row = (range[last] * ELEM_BYTES).div_ceil(LINE_BYTES);
                    rest.iter().fold(row, |acc, &d| acc.saturating_mul(range[d]))
                }
            };
            bytes = bytes.saturating_add(lines.saturating_mul(LINE_BYTES));
        }
        bytes
    }

    /// Expected cycles to fetch a new line of `role` from inside loop `j`.
    fn line_penalty(&self, j: usize, role: TensorRole) -> f64 {
        let mut miss = 1.0;
        let mut cost = 0.0;
        for q in (0..j).rev() {
            let s = self.stride(q, role) * ELEM_BYTES;
            if s < LINE_BYTES {
                let carry = line_fraction(s);
                cost += miss * (1.0 - carry) * level_penalty(Some(self.footprint(q + 1)));
                miss *= carry;
                if miss == 0.0 {
                    break;
                }
            }
        }
        cost + miss * PENALTIES[3]
    }

    fn cycles(&self) -> f64 {
        let mut total = 0.0;
        let mut trips = 1.0;
        for j in 0..self.pos.len() {
            let l = self.ir.loops()[self.pos[j]];
            trips *= l.size as f64 + l.tail as f64 / self.steps[j] as f64;
            let mut per_iter = ITERATION_CYCLES;
            for &role in self.roles {
                let s = self.stride(j, role) * ELEM_BYTES;
                if s > 0 {
                    per_iter += line_fraction(s) * self.line_penalty(j, role);
                }
            }
            total += trips * per_iter;
        }
        total
    }
}

/// Simulated cycle count of a schedule. Ignores the cursor.
pub fn simulated_cycles(ir: &LoopIR) -> f64 {
    let steps = ir.steps();
    [Nest::Compute, Nest::Writeback]
        .into_iter()
        .map(|nest| {
            let pos: Vec<usize> = (0..ir.loops().len())
                .filter(|&i| ir.loops()[i].nest == nest)
                .collect();
            let view = NestView {
                ir,
                steps: pos.iter().map(|&i| steps[i]).collect(),
                pos,
                roles: nest_roles(nest),
            };
            view.cycles()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CostModel;

impl CostModel {
    pub fn execute(&self, ir: &LoopIR) -> EvalResult {
        let cycles = simulated_cycles(ir);
        let runtime_ns = ((cycles / CLOCK_GHZ).round() as u64).max(1);
        EvalResult::new(ir.spec().flop_count(), runtime_ns, BackendKind::CostModel)
    }

    pub fn peak(&self) -> PeakEstimate {
        PeakEstimate {
            gflops_peak: PEAK_GFLOPS,
            method: "analytic: one iteration point per cycle with zero miss penalty".into(),
        }
    }
}
