use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::plan::{levels, walk};
use super::EvalError;
use crate::ir::{LoopIR, Nest, Problem, TensorRole};

/// Uniform `[-1, 1)` operand data for a problem, reproducible from `seed`.
pub fn random_operands(problem: &Problem, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let a = fill(problem.tensor_len(TensorRole::A));
    let b = fill(problem.tensor_len(TensorRole::B));
    (a, b)
}

/// Execute the schedule loop by loop, tails included.
///
/// This is the correctness oracle. Accumulation into `T` happens in the
/// scheduled order but in `f64`, so reassociation between schedules stays
/// far below `f32` resolution; the result is rounded to `f32` on write-back.
pub fn reference_execute(ir: &LoopIR, a: &[f32], b: &[f32]) -> Result<Vec<f32>, EvalError> {
    let p = ir.problem();
    for (role, got) in [(TensorRole::A, a.len()), (TensorRole::B, b.len())] {
        let want = p.tensor_len(role);
        if got != want {
            return Err(EvalError::ShapeMismatch {
                tensor: format!("{role:?}"),
                expected: want,
                got,
            });
        }
    }
    let mut t = vec![0f64; p.tensor_len(TensorRole::T)];
    let mut out = vec![0f32; p.tensor_len(TensorRole::Out)];
    let mut limits = p.extents.clone();

    walk(
        &levels(ir, Nest::Compute),
        &mut limits,
        [0; 3],
        &mut |l, n, [oa, ob, ot]| {
            let [sa, sb, st] = l.strides;
            for i in 0..n {
                t[ot + i * st] += a[oa + i * sa] as f64 * b[ob + i * sb] as f64;
            }
        },
    );
    let post = p.spec.post_op();
    walk(
        &levels(ir, Nest::Writeback),
        &mut limits,
        [0; 3],
        &mut |l, n, [ot, oo, _]| {
            let [st, so, _] = l.strides;
            for i in 0..n {
                out[oo + i * so] = post.apply_f32(t[ot + i * st] as f32);
            }
        },
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_spec;
    use crate::ir::{lower, ContractionSpec};
    use crate::transform::{apply, Action};

    #[test]
    fn hand_matmul() {
        let ir = lower(&ContractionSpec::matmul(2, 2, 2).unwrap());
        let c = reference_execute(&ir, &[1., 2., 3., 4.], &[5., 6., 7., 8.]).unwrap();
        assert_eq!(c, [19., 22., 43., 50.]);
    }

    #[test]
    fn relu_clamps() {
        let ir = lower(&parse_spec("C[m] += A[m,k] * B[k] | m=2 k=1 post=relu").unwrap());
        let c = reference_execute(&ir, &[-1., 2.], &[1.]).unwrap();
        assert_eq!(c, [0., 2.]);
    }

    #[test]
    fn shape_mismatch() {
        let ir = lower(&ContractionSpec::matmul(2, 2, 2).unwrap());
        assert!(matches!(
            reference_execute(&ir, &[1.; 3], &[1.; 4]),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tails_cover_every_point_once() {
        // Counting with all-ones data: each output gets exactly k contributions.
        let spec = parse_spec("C[m,n] += A[m,k] * B[k,n] | m=13 n=7 k=11").unwrap();
        let mut ir = lower(&spec).with_cursor(2).unwrap();
        for a in [Action::Split4, Action::Split2, Action::Up, Action::Split4, Action::SwapDown] {
            ir = apply(&ir, a).next;
        }
        ir.validate().unwrap();
        let (la, lb) = (13 * 11, 11 * 7);
        let c = reference_execute(&ir, &vec![1.0; la], &vec![1.0; lb]).unwrap();
        assert!(c.iter().all(|&x| x == 11.0), "{c:?}");
    }

    #[test]
    fn scalar_output() {
        let ir = lower(&parse_spec("O[] += X[i] * Y[i] | i=5").unwrap());
        let o = reference_execute(&ir, &[1., 2., 3., 4., 5.], &[1.; 5]).unwrap();
        assert_eq!(o, [15.]);
    }

    #[test]
    fn deterministic_inputs() {
        let ir = lower(&ContractionSpec::matmul(4, 4, 4).unwrap());
        let (a1, b1) = random_operands(ir.problem(), 7);
        let (a2, b2) = random_operands(ir.problem(), 7);
        assert_eq!((a1.clone(), b1), (a2, b2));
        assert!(a1.iter().all(|x| (-1.0..1.0).contains(x)));
    }
}
