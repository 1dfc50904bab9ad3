//! Wall-clock executor: runs the schedule natively and reports the fastest run.

use std::hint::black_box;
use std::sync::Mutex;
use std::time::Instant;

use super::plan::{levels, walk, Level};
use super::reference::random_operands;
use super::{BackendKind, EvalError, EvalResult, PeakEstimate};
use crate::ir::{LoopIR, Nest, TensorRole};

/// At most one timed measurement runs in the process at a time.
static TIMED_LOCK: Mutex<()> = Mutex::new(());

/// Largest tensor, in elements, the timed executor will allocate.
const MAX_TENSOR_ELEMS: usize = 1 << 28;

const INPUT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub struct TimedBackend {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Each timed sample repeats the nest until it lasts at least this long.
    pub min_sample_ns: u64,
}

impl Default for TimedBackend {
    fn default() -> Self {
        TimedBackend {
            warmup_iters: 20,
            timed_iters: 10,
            min_sample_ns: 1_000_000,
        }
    }
}

struct Buffers {
    a: Vec<f32>,
    b: Vec<f32>,
    t: Vec<f32>,
    out: Vec<f32>,
}

struct Compiled {
    compute: Vec<Level>,
    writeback: Vec<Level>,
    extents: Vec<usize>,
    post: crate::ir::PostOp,
}

impl Compiled {
    fn run(&self, buf: &mut Buffers, limits: &mut [usize]) {
        limits.copy_from_slice(&self.extents);
        buf.t.fill(0.0);
        let Buffers { a, b, t, out } = buf;
        walk(&self.compute, limits, [0; 3], &mut |l, n, offs| {
            mac_kernel(a, b, t, l.strides, n, offs)
        });
        let post = self.post;
        walk(&self.writeback, limits, [0; 3], &mut |l, n, [ot, oo, _]| {
            let [st, so, _] = l.strides;
            if st == 1 && so == 1 {
                for (o, x) in out[oo..oo + n].iter_mut().zip(&t[ot..ot + n]) {
                    *o = post.apply_f32(*x);
                }
            } else {
                for i in 0..n {
                    out[oo + i * so] = post.apply_f32(t[ot + i * st]);
                }
            }
        });
    }
}

/// Innermost multiply-accumulate, specialized on the access pattern.
#[inline]
fn mac_kernel(a: &[f32], b: &[f32], t: &mut [f32], strides: [usize; 3], n: usize, offs: [usize; 3]) {
    let [sa, sb, st] = strides;
    let [oa, ob, ot] = offs;
    match (sa, sb, st) {
        (1, 1, 0) => t[ot] += dot(&a[oa..oa + n], &b[ob..ob + n]),
        (1, 0, 0) => t[ot] += a[oa..oa + n].iter().sum::<f32>() * b[ob],
        (0, 1, 0) => t[ot] += b[ob..ob + n].iter().sum::<f32>() * a[oa],
        (1, 0, 1) => {
            let bv = b[ob];
            for (y, x) in t[ot..ot + n].iter_mut().zip(&a[oa..oa + n]) {
                *y += x * bv;
            }
        }
        (0, 1, 1) => {
            let av = a[oa];
            for (y, x) in t[ot..ot + n].iter_mut().zip(&b[ob..ob + n]) {
                *y += av * x;
            }
        }
        (1, 1, 1) => {
            for ((y, x), z) in t[ot..ot + n].iter_mut().zip(&a[oa..oa + n]).zip(&b[ob..ob + n]) {
                *y += x * z;
            }
        }
        (_, _, 0) => {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a[oa + i * sa] * b[ob + i * sb];
            }
            t[ot] += acc;
        }
        _ => {
            for i in 0..n {
                t[ot + i * st] += a[oa + i * sa] * b[ob + i * sb];
            }
        }
    }
}

fn dot(x: &[f32], y: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let tail: f32 = xs
        .remainder()
        .iter()
        .zip(ys.remainder())
        .map(|(a, b)| a * b)
        .sum();
    for (cx, cy) in xs.zip(ys) {
        for j in 0..8 {
            acc[j] += cx[j] * cy[j];
        }
    }
    acc.iter().sum::<f32>() + tail
}

impl TimedBackend {
    fn compile(&self, ir: &LoopIR) -> Result<(Compiled, Buffers), EvalError> {
        ir.validate()?;
        let p = ir.problem();
        let lens = TensorRole::ALL.map(|r| p.tensor_len(r));
        if lens.iter().any(|&n| n > MAX_TENSOR_ELEMS) {
            return Err(EvalError::TooLarge);
        }
        let (a, b) = random_operands(p, INPUT_SEED);
        let buf = Buffers {
            a,
            b,
            t: vec![0.0; lens[TensorRole::T.index()]],
            out: vec![0.0; lens[TensorRole::Out.index()]],
        };
        let compiled = Compiled {
            compute: levels(ir, Nest::Compute),
            writeback: levels(ir, Nest::Writeback),
            extents: p.extents.clone(),
            post: p.spec.post_op(),
        };
        Ok((compiled, buf))
    }

    /// Warm up, then time `timed_iters` samples and keep the fastest.
    pub fn execute(&self, ir: &LoopIR) -> Result<EvalResult, EvalError> {
        let (nest, mut buf) = self.compile(ir)?;
        let mut limits = nest.extents.clone();
        let _guard = TIMED_LOCK.lock().unwrap_or_else(|e| e.into_inner());

        let start = Instant::now();
        nest.run(&mut buf, &mut limits);
        let once = start.elapsed().as_nanos().max(1) as u64;
        for _ in 0..self.warmup_iters {
            nest.run(&mut buf, &mut limits);
        }
        // Repeat short nests so a sample is well above clock resolution.
        let reps = self.min_sample_ns.div_ceil(once).max(1);
        let mut best = f64::INFINITY;
        for _ in 0..self.timed_iters.max(1) {
            let start = Instant::now();
            for _ in 0..reps {
                nest.run(&mut buf, &mut limits);
            }
            let per_run = start.elapsed().as_nanos() as f64 / reps as f64;
            best = best.min(per_run);
        }
        black_box(&buf.out);
        let runtime_ns = (best.round() as u64).max(1);
        Ok(EvalResult::new(ir.spec().flop_count(), runtime_ns, BackendKind::Timed))
    }

    /// Best of ten runs of a register-resident multiply-add loop.
    pub fn measure_peak(&self) -> PeakEstimate {
        let _guard = TIMED_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut iters = 1024usize;
        // Grow the trip count until one trial takes a few milliseconds.
        loop {
            let start = Instant::now();
            black_box(saturate(iters));
            if start.elapsed().as_nanos() as u64 >= self.min_sample_ns.max(2_000_000) || iters > 1 << 30 {
                break;
            }
            iters *= 2;
        }
        let mut best = 0f64;
        for _ in 0..10 {
            let start = Instant::now();
            black_box(saturate(iters));
            let ns = start.elapsed().as_nanos().max(1) as f64;
            best = best.max(SATURATE_FLOPS_PER_ITER as f64 * iters as f64 / ns);
        }
        PeakEstimate {
            gflops_peak: best,
            method: format!("best of 10 trials, {SATURATE_LANES} independent multiply-add chains x {iters} iterations"),
        }
    }
}

const SATURATE_LANES: usize = 64;
const SATURATE_FLOPS_PER_ITER: usize = 2 * SATURATE_LANES;

#[inline(never)]
fn saturate(iters: usize) -> f32 {
    let x = black_box(0.999_999f32);
    let y = black_box(1e-7f32);
    let mut acc = [[0f32; 8]; SATURATE_LANES / 8];
    for _ in 0..iters {
        for row in acc.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * x + y;
            }
        }
    }
    acc.iter().flatten().sum()
}
