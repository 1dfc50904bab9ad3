//! Baseline schedule searches: greedy with lookahead, beam (DFS and BFS) and
//! random sampling, all over a shared evaluation cache and a wall-clock budget.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, EvalResult, Evaluator};
use crate::ir::LoopIR;
use crate::transform::{apply, legal_actions, Action};

/// Memoized evaluations keyed by canonical key, shareable across threads.
///
/// Each key gets its own slot lock, so concurrent requests for the same
/// schedule result in one backend call while different keys proceed in
/// parallel.
#[derive(Default)]
pub struct EvalCache {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<EvalResult>>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

/// A cache lookup: the result and whether it was already known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub result: EvalResult,
    pub hit: bool,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn eval(&self, ir: &LoopIR, backend: &dyn Evaluator) -> Result<Lookup, EvalError> {
        let key = ir.canonical_key();
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            Arc::clone(slots.entry(key).or_default())
        };
        let mut slot = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(result) = *slot {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Lookup { result, hit: true });
        }
        let result = backend.evaluate(ir)?;
        *slot = Some(result);
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(Lookup { result, hit: false })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Number of distinct schedules evaluated.
    pub fn len(&self) -> usize {
        let slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        slots.values().filter(|s| s.lock().map(|v| v.is_some()).unwrap_or(false)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Evaluate through `cache`: one backend call per distinct canonical key.
pub fn memoized_eval(ir: &LoopIR, backend: &dyn Evaluator, cache: &EvalCache) -> Result<EvalResult, EvalError> {
    cache.eval(ir, backend).map(|l| l.result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Greedy,
    BeamDfs,
    BeamBfs,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub method: SearchMethod,
    pub lookahead: usize,
    pub width: usize,
    pub depth: usize,
    pub budget_s: f64,
    pub seed: u64,
    /// Random search stops after this many sampled sequences even with budget left.
    pub max_samples: Option<usize>,
}

impl SearchConfig {
    fn base(method: SearchMethod) -> Self {
        SearchConfig {
            method,
            lookahead: 1,
            width: 1,
            depth: 10,
            budget_s: 60.0,
            seed: 0,
            max_samples: None,
        }
    }

    pub fn greedy(lookahead: usize) -> Self {
        SearchConfig {
            lookahead,
            ..Self::base(SearchMethod::Greedy)
        }
    }

    pub fn beam_dfs(width: usize) -> Self {
        SearchConfig {
            width,
            ..Self::base(SearchMethod::BeamDfs)
        }
    }

    pub fn beam_bfs(width: usize) -> Self {
        SearchConfig {
            width,
            ..Self::base(SearchMethod::BeamBfs)
        }
    }

    pub fn random(seed: u64) -> Self {
        SearchConfig {
            seed,
            ..Self::base(SearchMethod::Random)
        }
    }

    /// The named configurations: greedy1, greedy2, beam{2,4}{dfs,bfs}, random.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "greedy1" => Self::greedy(1),
            "greedy2" => Self::greedy(2),
            "beam2dfs" => Self::beam_dfs(2),
            "beam2bfs" => Self::beam_bfs(2),
            "beam4dfs" => Self::beam_dfs(4),
            "beam4bfs" => Self::beam_bfs(4),
            "random" => Self::random(0),
            _ => return None,
        })
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_budget(mut self, budget_s: f64) -> Self {
        self.budget_s = budget_s;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_samples(mut self, n: usize) -> Self {
        self.max_samples = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.into()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(self.budget_s >= 0.0) {
            return bad("budget must be a nonnegative number of seconds");
        }
        match self.method {
            SearchMethod::Greedy if self.lookahead == 0 => bad("lookahead must be at least 1"),
            SearchMethod::BeamDfs | SearchMethod::BeamBfs if self.width == 0 => {
                bad("beam width must be at least 1")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Best value seen up to one search step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub best_gflops: f64,
    pub elapsed_s: f64,
    /// Nodes this step contributed: lookahead leaves for greedy, states kept
    /// at this depth for beam, prefixes at this depth for random.
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_actions: Vec<Action>,
    pub best_gflops: f64,
    pub best_key: String,
    /// Evaluation requests, cache hits included.
    pub nodes_expanded: usize,
    /// Backend calls (cache misses).
    pub evals: usize,
    pub cache_hits: usize,
    pub wall_time_s: f64,
    pub per_step_trace: Vec<TraceEntry>,
}

impl SearchResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,best_gflops,elapsed_s,nodes\n");
        for t in &self.per_step_trace {
            let _ = writeln!(s, "{},{},{},{}", t.step, t.best_gflops, t.elapsed_s, t.nodes);
        }
        s
    }
}

/// Shared bookkeeping: budget, counters, best-so-far and per-step trace.
pub(crate) struct Tracker<'a> {
    backend: &'a dyn Evaluator,
    cache: &'a EvalCache,
    start: Instant,
    budget: Duration,
    out_of_time: bool,
    nodes: usize,
    evals: usize,
    hits: usize,
    best: (f64, Vec<Action>, String),
    steps: Vec<(f64, f64, usize)>,
}

impl<'a> Tracker<'a> {
    pub(crate) fn new(root: &LoopIR, backend: &'a dyn Evaluator, cache: &'a EvalCache, budget_s: f64) -> Result<Self, EvalError> {
        let start = Instant::now();
        let mut t = Tracker {
            backend,
            cache,
            start,
            budget: Duration::try_from_secs_f64(budget_s).unwrap_or(Duration::MAX),
            out_of_time: false,
            nodes: 0,
            evals: 0,
            hits: 0,
            best: (f64::NEG_INFINITY, Vec::new(), root.canonical_key()),
            steps: Vec::new(),
        };
        // The starting point is always measured, whatever the budget.
        let g = t.request(root)?;
        t.record(0, g, &[], root);
        t.count_nodes(0, 1);
        Ok(t)
    }

    fn request(&mut self, ir: &LoopIR) -> Result<f64, EvalError> {
        let l = self.cache.eval(ir, self.backend)?;
        self.nodes += 1;
        if l.hit {
            self.hits += 1;
        } else {
            self.evals += 1;
        }
        Ok(l.result.gflops)
    }

    /// Evaluate `ir`, reached by `path`, counting it at trace step `step`.
    /// Returns `None` once the budget is spent.
    pub(crate) fn eval(&mut self, step: usize, ir: &LoopIR, path: &[Action]) -> Result<Option<f64>, EvalError> {
        if self.out_of_time || self.start.elapsed() >= self.budget {
            self.out_of_time = true;
            return Ok(None);
        }
        let g = self.request(ir)?;
        self.record(step, g, path, ir);
        Ok(Some(g))
    }

    fn record(&mut self, step: usize, g: f64, path: &[Action], ir: &LoopIR) {
        if g > self.best.0 {
            self.best = (g, path.to_vec(), ir.canonical_key());
        }
        if self.steps.len() <= step {
            self.steps.resize(step + 1, (f64::NEG_INFINITY, 0.0, 0));
        }
        let e = &mut self.steps[step];
        e.0 = e.0.max(g);
        e.1 = self.start.elapsed().as_secs_f64();
    }

    pub(crate) fn count_nodes(&mut self, step: usize, n: usize) {
        if self.steps.len() <= step {
            self.steps.resize(step + 1, (f64::NEG_INFINITY, 0.0, 0));
        }
        self.steps[step].2 += n;
    }

    pub(crate) fn best_gflops(&self) -> f64 {
        self.best.0
    }

    pub(crate) fn finish(self) -> SearchResult {
        let mut trace = Vec::with_capacity(self.steps.len());
        let (mut best, mut time) = (f64::NEG_INFINITY, 0.0f64);
        for (step, &(g, t, nodes)) in self.steps.iter().enumerate() {
            best = best.max(g);
            time = time.max(t);
            trace.push(TraceEntry {
                step,
                best_gflops: best,
                elapsed_s: time,
                nodes,
            });
        }
        SearchResult {
            best_actions: self.best.1,
            best_gflops: self.best.0,
            best_key: self.best.2,
            nodes_expanded: self.nodes,
            evals: self.evals,
            cache_hits: self.hits,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            per_step_trace: trace,
        }
    }
}

/// Run the search `cfg` describes from `ir`.
pub fn search(ir: &LoopIR, cfg: &SearchConfig, backend: &dyn Evaluator, cache: &EvalCache) -> Result<SearchResult, SearchError> {
    match cfg.method {
        SearchMethod::Greedy => greedy_search(ir, cfg, backend, cache),
        SearchMethod::BeamDfs | SearchMethod::BeamBfs => beam_search(ir, cfg, backend, cache),
        SearchMethod::Random => random_search(ir, cfg, backend, cache),
    }
}

/// Outcome of one greedy lookahead: best leaf value and the sequence to it.
struct Lookahead {
    value: f64,
    seq: Vec<Action>,
}

/// Greedy search: at each step score every legal sequence of `lookahead`
/// actions by its final state and commit to the first action of the best.
///
/// Lookahead is cut to the steps remaining. With lookahead 1 the search stops
/// when no action strictly improves on the current state; with more it stops
/// when the best sequence ends below the current state.
pub fn greedy_search(ir: &LoopIR, cfg: &SearchConfig, backend: &dyn Evaluator, cache: &EvalCache) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut t = Tracker::new(ir, backend, cache, cfg.budget_s)?;
    let mut cur = ir.clone();
    let mut cur_value = t.best_gflops();
    let mut path = Vec::new();
    for step in 1..=cfg.depth {
        let horizon = cfg.lookahead.min(cfg.depth - step + 1);
        let mut best: Option<Lookahead> = None;
        let mut seq = Vec::with_capacity(horizon);
        let complete = expand(&mut t, step, &cur, &mut path, &mut seq, horizon, &mut best)?;
        let Some(best) = best else { break };
        if !complete {
            break;
        }
        let stop = if horizon == 1 {
            best.value <= cur_value
        } else {
            best.value < cur_value
        };
        if stop || best.seq.is_empty() {
            break;
        }
        let a = best.seq[0];
        cur = apply(&cur, a).next;
        path.push(a);
        if horizon == 1 {
            cur_value = best.value;
        } else {
            match t.eval(step, &cur, &path)? {
                Some(g) => cur_value = g,
                None => break,
            }
        }
    }
    Ok(t.finish())
}

/// Enumerate legal sequences below `ir` up to `left` more actions, evaluating
/// each leaf. Returns false if the budget ran out part way.
fn expand(
    t: &mut Tracker,
    step: usize,
    ir: &LoopIR,
    path: &mut Vec<Action>,
    seq: &mut Vec<Action>,
    left: usize,
    best: &mut Option<Lookahead>,
) -> Result<bool, EvalError> {
    let legal = legal_actions(ir);
    if left == 0 || legal.is_empty() {
        let Some(g) = t.eval(step, ir, path)? else {
            return Ok(false);
        };
        t.count_nodes(step, 1);
        if best.as_ref().is_none_or(|b| g > b.value) {
            *best = Some(Lookahead {
                value: g,
                seq: seq.clone(),
            });
        }
        return Ok(true);
    }
    for a in legal.iter() {
        let next = apply(ir, a).next;
        path.push(a);
        seq.push(a);
        let done = expand(t, step, &next, path, seq, left - 1, best)?;
        path.pop();
        seq.pop();
        if !done {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Beam search keeping the `width` best children of every node, ranked by
/// value with ties broken by action id, down to `depth`.
pub fn beam_search(ir: &LoopIR, cfg: &SearchConfig, backend: &dyn Evaluator, cache: &EvalCache) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut t = Tracker::new(ir, backend, cache, cfg.budget_s)?;
    match cfg.method {
        SearchMethod::BeamBfs => {
            let mut layer = vec![(ir.clone(), Vec::new())];
            'layers: for depth in 1..=cfg.depth {
                let mut next_layer = Vec::new();
                for (node, path) in &layer {
                    match children(&mut t, depth, node, path, cfg.width)? {
                        Some(kids) => next_layer.extend(kids),
                        None => break 'layers,
                    }
                }
                if next_layer.is_empty() {
                    break;
                }
                layer = next_layer;
            }
        }
        _ => {
            dfs(&mut t, ir, &mut Vec::new(), cfg.width, cfg.depth)?;
        }
    }
    Ok(t.finish())
}

type Node = (LoopIR, Vec<Action>);

/// Evaluate every legal child of `node` and return the `width` best, or
/// `None` if the budget ran out.
fn children(t: &mut Tracker, depth: usize, node: &LoopIR, path: &[Action], width: usize) -> Result<Option<Vec<Node>>, EvalError> {
    let mut scored = Vec::new();
    let mut child_path = path.to_vec();
    for a in legal_actions(node).iter() {
        let next = apply(node, a).next;
        child_path.push(a);
        let Some(g) = t.eval(depth, &next, &child_path)? else {
            return Ok(None);
        };
        scored.push((g, a, next, child_path.clone()));
        child_path.pop();
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.id().cmp(&y.1.id())));
    scored.truncate(width);
    t.count_nodes(depth, scored.len());
    Ok(Some(scored.into_iter().map(|(_, _, ir, p)| (ir, p)).collect()))
}

fn dfs(t: &mut Tracker, node: &LoopIR, path: &mut Vec<Action>, width: usize, left: usize) -> Result<bool, EvalError> {
    if left == 0 {
        return Ok(true);
    }
    let Some(kids) = children(t, path.len() + 1, node, path, width)? else {
        return Ok(false);
    };
    for (ir, p) in kids {
        let a = *p.last().expect("child path");
        path.push(a);
        let done = dfs(t, &ir, path, width, left - 1)?;
        path.pop();
        if !done {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Random search: sample uniform legal sequences of `depth` actions and
/// evaluate every prefix, until the budget or `max_samples` is reached.
pub fn random_search(ir: &LoopIR, cfg: &SearchConfig, backend: &dyn Evaluator, cache: &EvalCache) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut t = Tracker::new(ir, backend, cache, cfg.budget_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = 0;
    'outer: while cfg.max_samples.is_none_or(|n| samples < n) {
        let mut cur = ir.clone();
        let mut path = Vec::with_capacity(cfg.depth);
        for depth in 1..=cfg.depth {
            let legal: Vec<Action> = legal_actions(&cur).iter().collect();
            if legal.is_empty() {
                break;
            }
            let a = legal[rng.gen_range(0..legal.len())];
            cur = apply(&cur, a).next;
            path.push(a);
            if t.eval(depth, &cur, &path)?.is_none() {
                break 'outer;
            }
            t.count_nodes(depth, 1);
        }
        samples += 1;
        if path.is_empty() {
            // Nothing is legal from the start; every sample would be empty.
            break;
        }
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{CostModel, CountingEvaluator};
    use crate::ir::{lower, ContractionSpec};

    fn mm(m: usize, n: usize, k: usize) -> LoopIR {
        lower(&ContractionSpec::matmul(m, n, k).unwrap())
    }

    #[test]
    fn cursor_moves_hit_the_cache() {
        let ir = mm(16, 16, 16);
        let counting = CountingEvaluator::new(Arc::new(CostModel));
        let cache = EvalCache::new();
        memoized_eval(&ir, &counting, &cache).unwrap();
        memoized_eval(&apply(&ir, Action::Down).next, &counting, &cache).unwrap();
        assert_eq!((counting.calls(), cache.misses(), cache.hits()), (1, 1, 1));
    }

    #[test]
    fn distinct_schedules_each_evaluated_once() {
        let ir = mm(32, 32, 32);
        let counting = CountingEvaluator::new(Arc::new(CostModel));
        let cache = EvalCache::new();
        let states = [
            ir.clone(),
            apply(&ir, Action::Split2).next,
            apply(&ir, Action::Split4).next,
            apply(&ir, Action::SwapDown).next,
        ];
        for s in states.iter().chain(&states) {
            memoized_eval(s, &counting, &cache).unwrap();
        }
        assert_eq!(counting.calls(), 4);
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn greedy1_stops_at_local_optimum() {
        let ir = mm(16, 16, 16);
        let cfg = SearchConfig::greedy(1);
        let r = greedy_search(&ir, &cfg, &CostModel, &EvalCache::new()).unwrap();
        assert!(r.per_step_trace.len() <= cfg.depth + 1);
        let mut replay = ir.clone();
        for &a in &r.best_actions {
            replay = apply(&replay, a).next;
        }
        assert_eq!(CostModel.execute(&replay).gflops, r.best_gflops);
        assert_eq!(replay.canonical_key(), r.best_key);
    }

    #[test]
    fn beam_width1_dfs_follows_greedy_without_stop() {
        let ir = mm(24, 16, 40);
        let beam = beam_search(&ir, &SearchConfig::beam_dfs(1).with_depth(6), &CostModel, &EvalCache::new()).unwrap();
        // Re-derive the chain by hand: best child each step, ties by id.
        let mut cur = ir.clone();
        let mut best = CostModel.execute(&ir).gflops;
        for _ in 0..6 {
            let (g, next) = legal_actions(&cur)
                .iter()
                .map(|a| {
                    let n = apply(&cur, a).next;
                    (CostModel.execute(&n).gflops, n)
                })
                .fold(None::<(f64, LoopIR)>, |acc, (g, n)| match acc {
                    Some((bg, _)) if bg >= g => acc,
                    _ => Some((g, n)),
                })
                .unwrap();
            best = best.max(g);
            cur = next;
        }
        assert_eq!(beam.best_gflops, best);
    }

    #[test]
    fn random_is_seeded() {
        let ir = mm(32, 16, 48);
        let cfg = SearchConfig::random(7).with_max_samples(20);
        let a = random_search(&ir, &cfg, &CostModel, &EvalCache::new()).unwrap();
        let b = random_search(&ir, &cfg, &CostModel, &EvalCache::new()).unwrap();
        assert_eq!(a.best_actions, b.best_actions);
        assert_eq!(a.best_gflops, b.best_gflops);
        assert_eq!((a.evals, a.nodes_expanded), (b.evals, b.nodes_expanded));
        assert_eq!(a.nodes_expanded, 1 + 20 * cfg.depth);
    }

    #[test]
    fn zero_budget_returns_initial() {
        let ir = mm(32, 32, 32);
        let r = beam_search(&ir, &SearchConfig::beam_bfs(4).with_budget(0.0), &CostModel, &EvalCache::new()).unwrap();
        assert!(r.best_actions.is_empty());
        assert_eq!(r.evals, 1);
        assert_eq!(r.best_gflops, CostModel.execute(&ir).gflops);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::greedy(0).validate().is_err());
        assert!(SearchConfig::beam_bfs(0).validate().is_err());
        assert!(SearchConfig::greedy(1).with_depth(0).validate().is_err());
        assert!(SearchConfig::random(0).with_budget(f64::NAN).validate().is_err());
        assert!(SearchConfig::preset("beam4dfs").is_some());
        assert!(SearchConfig::preset("annealing").is_none());
    }

    #[test]
    fn trace_is_monotone() {
        let ir = mm(64, 48, 32);
        let r = beam_search(&ir, &SearchConfig::beam_dfs(2).with_depth(5), &CostModel, &EvalCache::new()).unwrap();
        assert_eq!(r.per_step_trace.len(), 6);
        for w in r.per_step_trace.windows(2) {
            assert!(w[1].best_gflops >= w[0].best_gflops);
            assert!(w[1].elapsed_s >= w[0].elapsed_s);
        }
        assert_eq!(r.per_step_trace.last().unwrap().best_gflops, r.best_gflops);
        assert!(r.trace_csv().starts_with("step,best_gflops,elapsed_s,nodes\n"));
    }
}
