//! Episodic tuning environment: reset to a benchmark, step through actions,
//! receive observations and peak-normalized GFLOPS rewards.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{BackendKind, EvalError, Evaluator, PeakEstimate};
use crate::features::{encode, FeatureError, Observation};
use crate::ir::{lower, ContractionSpec, LoopIR};
use crate::search::{EvalCache, SearchResult, TraceEntry};
use crate::transform::{apply, legal_actions, Action, ActionSet, OscillationWindow};

/// Actions per episode.
pub const EPISODE_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called before reset")]
    NotReset,
    #[error("episode is done; call reset")]
    EpisodeDone,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionInfo {
    /// The action was legal in the state it was taken from.
    pub applied: bool,
    /// The loop structure changed, so the new state was evaluated.
    pub evaluated: bool,
    /// GFLOPS of the state after the step.
    pub gflops: f64,
    pub key: String,
    /// Legal actions in the state after the step.
    pub next_legal: ActionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub info: TransitionInfo,
}

/// Write transitions as JSON lines.
pub fn write_jsonl<W: Write>(mut w: W, transitions: &[Transition]) -> std::io::Result<()> {
    for t in transitions {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read transitions written by [`write_jsonl`].
pub fn read_jsonl(text: &str) -> Result<Vec<Transition>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub ir: LoopIR,
    pub step_index: usize,
    pub last_gflops: f64,
    pub history: OscillationWindow,
    pub done: bool,
}

/// Picks an action for an observation among the legal ones.
pub trait Policy {
    fn choose(&mut self, obs: &Observation, legal: ActionSet) -> Action;
}

pub struct Env {
    backend: Arc<dyn Evaluator>,
    cache: EvalCache,
    peak: PeakEstimate,
    state: Option<EnvState>,
}

impl Env {
    /// Create an environment, measuring the backend's peak.
    pub fn new(backend: Arc<dyn Evaluator>) -> Self {
        let peak = backend.measure_peak();
        Self::with_peak(backend, peak)
    }

    pub fn with_peak(backend: Arc<dyn Evaluator>, peak: PeakEstimate) -> Self {
        Env {
            backend,
            cache: EvalCache::new(),
            peak,
            state: None,
        }
    }

    pub fn peak(&self) -> &PeakEstimate {
        &self.peak
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn cache(&self) -> &EvalCache {
        &self.cache
    }

    pub fn reset(&mut self, benchmark: &ContractionSpec) -> Result<Observation, EnvError> {
        let ir = lower(benchmark);
        let obs = encode(&ir)?;
        let g = self.measure(&ir)?;
        let mut history = OscillationWindow::default();
        history.push(&ir);
        self.state = Some(EnvState {
            ir,
            step_index: 0,
            last_gflops: g,
            history,
            done: false,
        });
        Ok(obs)
    }

    /// Legal actions in the current state; empty before reset or once done.
    pub fn legal(&self) -> ActionSet {
        match &self.state {
            Some(s) if !s.done => legal_actions(&s.ir),
            _ => ActionSet::empty(),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<Transition, EnvError> {
        let st = self.state.as_ref().ok_or(EnvError::NotReset)?;
        if st.done {
            return Err(EnvError::EpisodeDone);
        }
        let obs = encode(&st.ir)?;
        let out = apply(&st.ir, action);
        let prev = st.last_gflops;
        let (reward, gflops) = if out.changed {
            let g = self.measure(&out.next)?;
            ((g - prev) / self.peak.gflops_peak, g)
        } else {
            (0.0, prev)
        };
        let st = self.state.as_mut().expect("checked above");
        st.ir = out.next;
        st.step_index += 1;
        st.last_gflops = gflops;
        st.history.push(&st.ir);
        st.done = st.step_index >= EPISODE_LEN || st.history.detected();
        let next_obs = encode(&st.ir)?;
        Ok(Transition {
            obs,
            action,
            reward,
            next_obs,
            done: st.done,
            info: TransitionInfo {
                applied: out.applied,
                evaluated: out.changed,
                gflops,
                key: st.ir.canonical_key(),
                next_legal: if st.done { ActionSet::empty() } else { legal_actions(&st.ir) },
            },
        })
    }

    fn measure(&mut self, ir: &LoopIR) -> Result<f64, EvalError> {
        let g = self.cache.eval(ir, self.backend.as_ref())?.result.gflops;
        if g > self.peak.gflops_peak && self.backend.kind() == BackendKind::Timed {
            log::warn!(
                "measured {g:.3} GFLOPS above peak estimate {:.3}; re-measuring peak",
                self.peak.gflops_peak
            );
            let mut peak = self.backend.measure_peak();
            if peak.gflops_peak < g {
                peak.gflops_peak = g;
                peak.method = format!("{} (raised to observed {g:.3})", peak.method);
            }
            self.peak = peak;
        }
        Ok(g)
    }

    /// Run `policy` for one episode on `benchmark` and report the best state
    /// visited along the way.
    pub fn rollout(&mut self, policy: &mut dyn Policy, benchmark: &ContractionSpec) -> Result<SearchResult, EnvError> {
        let start = Instant::now();
        let (hits0, misses0) = (self.cache.hits(), self.cache.misses());
        let mut obs = self.reset(benchmark)?;
        let root_key = self.state.as_ref().expect("reset").ir.canonical_key();
        let mut best = (self.state.as_ref().expect("reset").last_gflops, 0usize, root_key);
        let mut actions = Vec::new();
        let mut trace = vec![TraceEntry {
            step: 0,
            best_gflops: best.0,
            elapsed_s: start.elapsed().as_secs_f64(),
            nodes: 1,
        }];
        while !self.state.as_ref().expect("reset").done {
            let legal = self.legal();
            if legal.is_empty() {
                break;
            }
            let a = policy.choose(&obs, legal);
            let t = self.step(a)?;
            actions.push(a);
            if t.info.gflops > best.0 {
                best = (t.info.gflops, actions.len(), t.info.key.clone());
            }
            trace.push(TraceEntry {
                step: actions.len(),
                best_gflops: best.0,
                elapsed_s: start.elapsed().as_secs_f64(),
                nodes: t.info.evaluated as usize,
            });
            obs = t.next_obs;
        }
        let (hits, evals) = (self.cache.hits() - hits0, self.cache.misses() - misses0);
        actions.truncate(best.1);
        Ok(SearchResult {
            best_actions: actions,
            best_gflops: best.0,
            best_key: best.2,
            nodes_expanded: hits + evals,
            evals,
            cache_hits: hits,
            wall_time_s: start.elapsed().as_secs_f64(),
            per_step_trace: trace,
        })
    }
}

/// Greedy policy rollout on a fresh environment over `backend`.
pub fn rollout_policy(
    policy: &mut dyn Policy,
    benchmark: &ContractionSpec,
    backend: Arc<dyn Evaluator>,
) -> Result<SearchResult, EnvError> {
    Env::new(backend).rollout(policy, benchmark)
}

/// Uniformly random choice among legal actions.
pub struct RandomPolicy {
    rng: rand_chacha::ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        RandomPolicy {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn choose(&mut self, _obs: &Observation, legal: ActionSet) -> Action {
        use rand::Rng;
        let n = legal.len();
        legal.iter().nth(self.rng.gen_range(0..n)).expect("nonempty legal set")
    }
}

/// Replays a fixed action list, then repeats the last action.
pub struct ScriptedPolicy(pub Vec<Action>, usize);

impl ScriptedPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        ScriptedPolicy(actions, 0)
    }
}

impl Policy for ScriptedPolicy {
    fn choose(&mut self, _obs: &Observation, _legal: ActionSet) -> Action {
        let a = self.0[self.1.min(self.0.len() - 1)];
        self.1 += 1;
        a
    }
}
