//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nestune::eval::CostModel;
use nestune::ir::{PostOp, TensorRef};
use nestune::transform::{apply, legal_actions, Action};
use nestune::{lower, ContractionSpec, LoopIR};
use rand::seq::SliceRandom;
use rand::Rng;

const NAMES: [&str; 5] = ["i", "j", "k", "l", "p"];

/// A random two-operand contraction over up to four indices with extents
/// in `1..=max_extent`.
pub fn random_spec<R: Rng>(rng: &mut R, max_extent: usize) -> ContractionSpec {
    loop {
        let n = rng.gen_range(1..=4);
        let vars: Vec<&str> = NAMES.choose_multiple(rng, n).copied().collect();
        let pick = |rng: &mut R| -> Vec<&str> {
            let mut v: Vec<&str> = vars.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
            v.shuffle(rng);
            v
        };
        let a = pick(rng);
        let b = pick(rng);
        let used: Vec<&str> = vars.iter().copied().filter(|v| a.contains(v) || b.contains(v)).collect();
        if used.is_empty() {
            continue;
        }
        let mut out: Vec<&str> = used.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        out.shuffle(rng);
        let extents: BTreeMap<String, usize> = used
            .iter()
            .map(|v| (v.to_string(), rng.gen_range(1..=max_extent)))
            .collect();
        let post = if rng.gen_bool(0.3) { PostOp::Relu } else { PostOp::Identity };
        return ContractionSpec::new(
            "rand",
            TensorRef::new("O", &out),
            [TensorRef::new("X", &a), TensorRef::new("Y", &b)],
            extents,
            post,
        )
        .expect("generated spec is valid");
    }
}

/// Apply `n` uniformly chosen actions, legal or not.
pub fn random_schedule<R: Rng>(rng: &mut R, spec: &ContractionSpec, n: usize) -> LoopIR {
    let mut ir = lower(spec);
    for _ in 0..n {
        let a = Action::ALL[rng.gen_range(0..Action::ALL.len())];
        ir = apply(&ir, a).next;
    }
    ir
}

/// Best cost-model GFLOPS over every legal sequence of at most `depth`
/// actions, by exhaustive enumeration without any caching.
pub fn brute_force_best(ir: &LoopIR, depth: usize) -> (f64, usize) {
    fn go(ir: &LoopIR, left: usize, best: &mut f64, count: &mut usize) {
        *best = best.max(CostModel.execute(ir).gflops);
        *count += 1;
        if left == 0 {
            return;
        }
        for a in legal_actions(ir).iter() {
            go(&apply(ir, a).next, left - 1, best, count);
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut count = 0;
    go(ir, depth, &mut best, &mut count);
    (best, count)
}

/// Direct einsum evaluation from the spec alone, independent of any schedule.
pub fn naive_einsum(spec: &ContractionSpec, a: &[f32], b: &[f32]) -> Vec<f32> {
    let vars = spec.index_order();
    let ext: Vec<usize> = vars.iter().map(|v| spec.extents()[v]).collect();
    let flat = |t: &TensorRef, point: &[usize]| -> usize {
        t.indices.iter().fold(0, |acc, idx| {
            let v = vars.iter().position(|x| x == idx).unwrap();
            acc * ext[v] + point[v]
        })
    };
    let out = spec.output();
    let out_len: usize = out
        .indices
        .iter()
        .map(|i| spec.extents()[i])
        .product();
    let mut acc = vec![0f64; out_len];
    let total: usize = ext.iter().product();
    let mut point = vec![0usize; vars.len()];
    let [ta, tb] = spec.operands();
    for _ in 0..total {
        acc[flat(out, &point)] += a[flat(ta, &point)] as f64 * b[flat(tb, &point)] as f64;
        for d in (0..point.len()).rev() {
            point[d] += 1;
            if point[d] < ext[d] {
                break;
            }
            point[d] = 0;
        }
    }
    acc.into_iter().map(|x| spec.post_op().apply_f32(x as f32)).collect()
}

/// Absolute slack for results that cancel to (nearly) zero.
pub const ABS_FLOOR: f32 = 1e-9;

pub fn close(x: f32, y: f32, rel: f32) -> bool {
    let d = (x - y).abs();
    d <= rel * x.abs().max(y.abs()) || d <= ABS_FLOOR
}
