mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::{close, naive_einsum, random_schedule, random_spec};
use nestune::dqn::{checkpoint, masked_argmax, Mlp, PrioritizedReplay};
use nestune::env::{Env, EPISODE_LEN};
use nestune::eval::{random_operands, reference_execute, CostModel, Evaluator, PEAK_GFLOPS};
use nestune::features::{encode, loop_strides, FEATURES_PER_LOOP, HIST_BINS};
use nestune::ir::{LoopDesc, MAX_LOOPS};
use nestune::search::{search, EvalCache, SearchConfig};
use nestune::transform::{apply, is_legal, Action, ActionSet};
use nestune::{lower, parse_spec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn action() -> impl Strategy<Value = Action> {
    (0..Action::ALL.len()).prop_map(|i| Action::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_preserve_semantics(seed in any::<u64>(), actions in prop::collection::vec(action(), 0..24)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 12);
        let mut ir = lower(&spec);
        for a in actions {
            ir = apply(&ir, a).next;
        }
        ir.validate().unwrap();
        let (a, b) = random_operands(ir.problem(), seed);
        let got = reference_execute(&ir, &a, &b).unwrap();
        let want = naive_einsum(&spec, &a, &b);
        prop_assert_eq!(got.len(), want.len());
        for (x, y) in got.iter().zip(&want) {
            prop_assert!(close(*x, *y, 1e-5), "{} vs {}", x, y);
        }
    }

    #[test]
    fn apply_is_pure_and_legality_agrees(seed in any::<u64>(), steps in 0usize..20, a in action()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 32);
        let ir = random_schedule(&mut rng, &spec, steps);
        let before = ir.clone();
        let out = apply(&ir, a);
        prop_assert_eq!(&ir, &before);
        prop_assert_eq!(&apply(&ir, a), &out);
        prop_assert_eq!(out.applied, is_legal(&ir, a));
        if !out.applied {
            prop_assert_eq!(&out.next, &ir);
        }
        prop_assert_eq!(out.changed, out.next.canonical_key() != ir.canonical_key());
        prop_assert!(out.next.loops().len() <= MAX_LOOPS);
        out.next.validate().unwrap();
    }

    #[test]
    fn histogram_mass_counts_moving_references(seed in any::<u64>(), steps in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 64);
        let ir = random_schedule(&mut rng, &spec, steps);
        let obs = encode(&ir).unwrap();
        let strides = loop_strides(&ir);
        for i in 0..MAX_LOOPS {
            let slot = &obs.as_slice()[i * FEATURES_PER_LOOP..(i + 1) * FEATURES_PER_LOOP];
            let mass: i32 = slot[4..4 + HIST_BINS].iter().sum();
            let want = if i < ir.loops().len() {
                strides.loops[i].iter().filter(|&&s| s > 0).count() as i32
            } else {
                0
            };
            prop_assert_eq!(mass, want);
        }
    }

    #[test]
    fn telescoping_rewards(seed in any::<u64>(), actions in prop::collection::vec(action(), 1..=EPISODE_LEN)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 64);
        let mut env = Env::new(Arc::new(CostModel));
        env.reset(&spec).unwrap();
        let g0 = env.state().unwrap().last_gflops;
        let mut sum = 0.0;
        for a in actions {
            if env.state().unwrap().done {
                break;
            }
            let t = env.step(a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t.reward));
            sum += t.reward;
        }
        let g = env.state().unwrap().last_gflops;
        prop_assert!((sum - (g - g0) / PEAK_GFLOPS).abs() <= 1e-12);
    }

    #[test]
    fn dsl_round_trip(seed in any::<u64>()) {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed), 256);
        prop_assert_eq!(parse_spec(&spec.to_string()).unwrap(), spec);
    }

    #[test]
    fn masked_argmax_is_legal(q in prop::collection::vec(-10f32..10.0, 10), bits in 1u16..1024) {
        let legal = ActionSet::from_bits(bits);
        let a = masked_argmax(&q, legal).unwrap();
        prop_assert!(legal.contains(a));
        prop_assert!(legal.iter().all(|b| q[b.id()] <= q[a.id()]));
    }

    #[test]
    fn replay_stays_bounded(pushes in 1usize..200, cap in 1usize..50, prios in prop::collection::vec(1e-3f64..10.0, 200)) {
        let mut r = PrioritizedReplay::new(cap, 0.6);
        for i in 0..pushes {
            r.push(i);
            r.set_priority(i % cap, prios[i]);
        }
        prop_assert!(r.len() <= cap);
        prop_assert!((0..r.len()).all(|i| r.probability(i) > 0.0));
        let total: f64 = (0..r.len()).map(|i| r.probability(i)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..12, 0..3)) {
        let mut dims = vec![5];
        dims.extend(hidden);
        dims.push(3);
        let net = Mlp::<f32>::random(&dims, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(checkpoint::decode(&checkpoint::encode(&net)).unwrap(), net);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn search_results_replay_exactly(seed in any::<u64>(), method in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 64);
        let ir = lower(&spec);
        let cfg = match method {
            0 => SearchConfig::greedy(2).with_depth(4),
            1 => SearchConfig::beam_dfs(2).with_depth(4),
            2 => SearchConfig::beam_bfs(3).with_depth(3),
            _ => SearchConfig::random(seed).with_depth(6).with_max_samples(25),
        };
        let r = search(&ir, &cfg, &CostModel, &EvalCache::new()).unwrap();
        prop_assert!(r.evals <= r.nodes_expanded);
        prop_assert_eq!(r.evals + r.cache_hits, r.nodes_expanded);
        let mut replay = ir.clone();
        for &a in &r.best_actions {
            replay = apply(&replay, a).next;
        }
        prop_assert_eq!(CostModel.evaluate(&replay).unwrap().gflops, r.best_gflops);
        prop_assert_eq!(replay.canonical_key(), r.best_key);
        for w in r.per_step_trace.windows(2) {
            prop_assert!(w[1].best_gflops >= w[0].best_gflops);
        }
    }
}

#[test]
fn canonical_keys_identify_structures() {
    // 1000 random schedules across a handful of problems: equal keys must
    // mean equal loop structure, and different structures different keys.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let specs: Vec<_> = (0..5).map(|_| random_spec(&mut rng, 48)).collect();
    let mut seen: HashMap<String, (String, Vec<LoopDesc>)> = HashMap::new();
    for i in 0..1000 {
        let spec = &specs[i % specs.len()];
        let steps = rand::Rng::gen_range(&mut rng, 0..16);
        let ir = random_schedule(&mut rng, spec, steps);
        let structure = (ir.spec().signature(), ir.loops().to_vec());
        match seen.get(&ir.canonical_key()) {
            Some(prev) => assert_eq!(prev, &structure, "key collision"),
            None => {
                seen.insert(ir.canonical_key(), structure);
            }
        }
    }
    let distinct: std::collections::HashSet<_> = seen.values().collect();
    assert_eq!(distinct.len(), seen.len());
}

#[test]
fn cost_model_respects_peak_on_random_schedules() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let spec = random_spec(&mut rng, 256);
        let ir = random_schedule(&mut rng, &spec, 12);
        let g = CostModel.execute(&ir).gflops;
        assert!(g > 0.0 && g <= PEAK_GFLOPS, "{g}");
    }
}
