//! Fixed-length observation vectors.
//!
//! Each loop becomes 20 integers: cursor flag, size, tail, compute flag and a
//! 16-bin histogram of the memory strides the loop produces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{LoopIR, Nest, TensorRole, MAX_LOOPS};

pub const HIST_BINS: usize = 16;
pub const FEATURES_PER_LOOP: usize = 4 + HIST_BINS;
pub const OBS_LEN: usize = MAX_LOOPS * FEATURES_PER_LOOP;

/// Offsets of the scalar features inside one loop slot.
pub const CURSOR_FEATURE: usize = 0;
pub const SIZE_FEATURE: usize = 1;
pub const TAIL_FEATURE: usize = 2;
pub const COMPUTE_FEATURE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("{loops} loops exceed observation capacity {MAX_LOOPS}")]
    OverCapacity { loops: usize },
}

/// Tensors touched by each nest. `T` is counted once in the compute nest.
pub fn nest_roles(nest: Nest) -> &'static [TensorRole] {
    match nest {
        Nest::Compute => &[TensorRole::A, TensorRole::B, TensorRole::T],
        Nest::Writeback => &[TensorRole::T, TensorRole::Out],
    }
}

/// Per-loop element strides, indexed by [`TensorRole::index`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrideProfile {
    pub loops: Vec<[usize; 4]>,
}

impl StrideProfile {
    pub fn stride(&self, pos: usize, role: TensorRole) -> usize {
        self.loops[pos][role.index()]
    }
}

/// Memory distance, in elements, between consecutive iterations of each loop.
///
/// A loop over `v` moves tensor `X` by `base_stride(X, v)` times the loop's
/// step, the span covered by the loops over `v` nested below it. Tensors the
/// nest does not touch, or that `v` does not index, get 0.
pub fn loop_strides(ir: &LoopIR) -> StrideProfile {
    let steps = ir.steps();
    let p = ir.problem();
    let loops = ir
        .loops()
        .iter()
        .zip(&steps)
        .map(|(l, &step)| {
            let mut s = [0; 4];
            for &role in nest_roles(l.nest) {
                s[role.index()] = p.layout(role).stride_of(l.var) * step;
            }
            s
        })
        .collect();
    StrideProfile { loops }
}

/// Histogram bin for a positive stride: `floor(log2(s))`, saturating at 15.
pub fn stride_bin(stride: usize) -> Option<usize> {
    (stride > 0).then(|| (stride.ilog2() as usize).min(HIST_BINS - 1))
}

/// One count per nonzero stride. Zero strides move no memory and are skipped.
pub fn stride_histogram(strides: &[usize]) -> [u32; HIST_BINS] {
    let mut h = [0; HIST_BINS];
    for b in strides.iter().filter_map(|&s| stride_bin(s)) {
        h[b] += 1;
    }
    h
}

/// How histogram entries are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramWeighting {
    /// One unit per tensor reference.
    #[default]
    References,
    /// Each reference weighted by the loop's own iteration count (size plus
    /// tail iterations).
    TripCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<i32>);

impl Observation {
    pub fn as_slice(&self) -> &[i32] {
        &self.0
    }

    pub fn slot(&self, i: usize) -> &[i32] {
        &self.0[i * FEATURES_PER_LOOP..(i + 1) * FEATURES_PER_LOOP]
    }
}

pub fn encode(ir: &LoopIR) -> Result<Observation, FeatureError> {
    encode_with(ir, HistogramWeighting::References)
}

pub fn encode_with(ir: &LoopIR, weighting: HistogramWeighting) -> Result<Observation, FeatureError> {
    let loops = ir.loops();
    if loops.len() > MAX_LOOPS {
        return Err(FeatureError::OverCapacity { loops: loops.len() });
    }
    let strides = loop_strides(ir);
    let mut v = vec![0i32; OBS_LEN];
    for (i, l) in loops.iter().enumerate() {
        let slot = &mut v[i * FEATURES_PER_LOOP..(i + 1) * FEATURES_PER_LOOP];
        slot[CURSOR_FEATURE] = (i == ir.cursor()) as i32;
        slot[SIZE_FEATURE] = clamp_i32(l.size);
        slot[TAIL_FEATURE] = clamp_i32(l.tail);
        slot[COMPUTE_FEATURE] = (l.nest == Nest::Compute) as i32;
        let weight = match weighting {
            HistogramWeighting::References => 1,
            HistogramWeighting::TripCounts => l.size + usize::from(l.tail > 0),
        };
        for (b, count) in stride_histogram(&strides.loops[i]).iter().enumerate() {
            slot[4 + b] = clamp_i32(*count as usize * weight);
        }
    }
    Ok(Observation(v))
}

fn clamp_i32(x: usize) -> i32 {
    x.min(i32::MAX as usize) as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{lower, ContractionSpec};
    use crate::transform::{apply, Action};

    fn mm64() -> LoopIR {
        lower(&ContractionSpec::matmul(64, 64, 64).unwrap())
    }

    #[test]
    fn untiled_matmul_strides() {
        let s = loop_strides(&mm64());
        use TensorRole::*;
        // m
        assert_eq!((s.stride(0, A), s.stride(0, B), s.stride(0, T)), (64, 0, 64));
        // n
        assert_eq!((s.stride(1, A), s.stride(1, B), s.stride(1, T)), (0, 1, 1));
        // k
        assert_eq!((s.stride(2, A), s.stride(2, B), s.stride(2, T)), (1, 64, 0));
        // write-back m, n: T read and output written
        assert_eq!((s.stride(3, T), s.stride(3, Out)), (64, 64));
        assert_eq!((s.stride(4, T), s.stride(4, Out)), (1, 1));
        assert_eq!(s.stride(0, Out), 0);
    }

    #[test]
    fn split_k_strides() {
        let ir = mm64().with_cursor(2).unwrap();
        let ir = apply(&ir, Action::Split16).next;
        let s = loop_strides(&ir);
        use TensorRole::*;
        assert_eq!((s.stride(2, A), s.stride(2, B)), (16, 16 * 64));
        assert_eq!((s.stride(3, A), s.stride(3, B)), (1, 64));
    }

    #[test]
    fn histogram_bins() {
        let h = stride_histogram(&[1, 64, 0, 0]);
        let mut want = [0; HIST_BINS];
        want[0] = 1;
        want[6] = 1;
        assert_eq!(h, want);
        assert_eq!(stride_histogram(&[0, 0, 0, 0]), [0; HIST_BINS]);
        assert_eq!(stride_bin(100_000), Some(15));
        assert_eq!(stride_bin(32_767), Some(14));
        assert_eq!(stride_bin(3), Some(1));
        assert_eq!(stride_bin(0), None);
    }

    #[test]
    fn encode_untiled_matmul() {
        let obs = encode(&mm64()).unwrap();
        assert_eq!(obs.0.len(), OBS_LEN);
        assert_eq!(OBS_LEN, 320);
        let mut hist_m = [0; 16];
        hist_m[6] = 2;
        let mut slot0 = vec![1, 64, 0, 1];
        slot0.extend(hist_m);
        assert_eq!(obs.slot(0), &slot0[..]);
        assert_eq!(obs.slot(3)[..4], [0, 64, 0, 0]);
        assert!(obs.0[5 * FEATURES_PER_LOOP..].iter().all(|&x| x == 0));
    }

    #[test]
    fn cursor_only_difference() {
        let a = encode(&mm64()).unwrap();
        let b = encode(&mm64().with_cursor(3).unwrap()).unwrap();
        for (i, (x, y)) in a.0.iter().zip(&b.0).enumerate() {
            if i % FEATURES_PER_LOOP != CURSOR_FEATURE {
                assert_eq!(x, y, "feature {i}");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn boundary_noop_keeps_observation() {
        let ir = mm64();
        let out = apply(&ir, Action::Up);
        assert_eq!(encode(&ir).unwrap(), encode(&out.next).unwrap());
    }

    #[test]
    fn trip_count_weighting() {
        let obs = encode_with(&mm64(), HistogramWeighting::TripCounts).unwrap();
        assert_eq!(obs.slot(0)[4 + 6], 128);
    }

    #[test]
    fn serializes_as_flat_array() {
        let obs = encode(&mm64()).unwrap();
        let json = serde_json::to_string(&obs).unwrap();
        let back: Vec<i32> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), 320);
    }
}
