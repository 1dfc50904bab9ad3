//! Deep Q-learning with prioritized replay: a single learner fed by several
//! logical actors, each running one epsilon-greedy episode per iteration.

pub mod checkpoint;
pub mod mlp;
pub mod replay;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Split;
use crate::env::{Env, EnvError, Policy, RandomPolicy, Transition};
use crate::eval::{BackendKind, Evaluator, PeakEstimate};
use crate::features::{Observation, FEATURES_PER_LOOP, OBS_LEN, SIZE_FEATURE, TAIL_FEATURE};
use crate::ir::ContractionSpec;
use crate::transform::{Action, ActionSet, NUM_ACTIONS};

pub use checkpoint::CheckpointError;
pub use mlp::{Adam, DimError, Mlp};
pub use replay::{PrioritizedReplay, Sample, SumTree};

/// Scale applied to size and tail features before they reach the network.
pub const SIZE_SCALE: f32 = 1.0 / 256.0;
/// Added to |TD error| to keep every priority positive.
pub const PRIORITY_EPS: f64 = 1e-3;

/// Network input for an observation: sizes and tails scaled by
/// [`SIZE_SCALE`], flags and histogram counts as they are.
pub fn normalize(obs: &Observation) -> Vec<f32> {
    obs.as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| match i % FEATURES_PER_LOOP {
            SIZE_FEATURE | TAIL_FEATURE => v as f32 * SIZE_SCALE,
            _ => v as f32,
        })
        .collect()
}

/// Highest-valued legal action, lowest id on ties. NaN never wins.
pub fn masked_argmax(q: &[f32], legal: ActionSet) -> Option<Action> {
    let mut best: Option<(f32, Action)> = None;
    for a in legal.iter() {
        let v = q[a.id()];
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, a));
        }
    }
    best.map(|(_, a)| a).or_else(|| legal.iter().next())
}

/// Q-network acting greedily.
#[derive(Debug, Clone, PartialEq)]
pub struct QPolicy {
    pub net: Mlp<f32>,
}

impl QPolicy {
    pub fn new(net: Mlp<f32>) -> Result<Self, CheckpointError> {
        if net.input_len() != OBS_LEN || net.output_len() != NUM_ACTIONS {
            return Err(CheckpointError::Shape {
                found: net.dims(),
                input: OBS_LEN,
                output: NUM_ACTIONS,
            });
        }
        Ok(QPolicy { net })
    }

    pub fn random(hidden: &[usize], seed: u64) -> Self {
        let mut dims = vec![OBS_LEN];
        dims.extend_from_slice(hidden);
        dims.push(NUM_ACTIONS);
        QPolicy {
            net: Mlp::random(&dims, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn q_values(&self, obs: &Observation) -> Vec<f32> {
        self.net.forward(&normalize(obs)).expect("policy input width checked at construction")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::new(checkpoint::load(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::save(&self.net, path)
    }
}

impl Policy for QPolicy {
    fn choose(&mut self, obs: &Observation, legal: ActionSet) -> Action {
        masked_argmax(&self.q_values(obs), legal).expect("nonempty legal set")
    }
}

struct EpsilonGreedy<'a> {
    q: &'a QPolicy,
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl Policy for EpsilonGreedy<'_> {
    fn choose(&mut self, obs: &Observation, legal: ActionSet) -> Action {
        if self.rng.gen_bool(self.epsilon.clamp(0.0, 1.0)) {
            let i = self.rng.gen_range(0..legal.len());
            legal.iter().nth(i).expect("nonempty legal set")
        } else {
            masked_argmax(&self.q.q_values(obs), legal).expect("nonempty legal set")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    /// Episodes collected per iteration.
    pub actors: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the iterations over which epsilon is annealed.
    pub epsilon_decay: f64,
    /// Gradient steps between target-network copies.
    pub target_sync: usize,
    pub updates_per_iteration: usize,
    pub replay_capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub split: Split,
    /// Train on at most this many benchmarks of the split.
    pub max_benchmarks: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            gamma: 0.9,
            hidden: vec![256, 256],
            batch_size: 64,
            iterations: 300,
            actors: 4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.5,
            target_sync: 50,
            updates_per_iteration: 8,
            replay_capacity: 20_000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            seed: 0,
            split: Split::Train,
            max_benchmarks: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let problem = if !unit(self.gamma) {
            "gamma must lie in [0, 1]"
        } else if !unit(self.epsilon_start) || !unit(self.epsilon_end) {
            "epsilon must lie in [0, 1]"
        } else if !unit(self.epsilon_decay) {
            "epsilon_decay must lie in [0, 1]"
        } else if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            "learning_rate must be positive"
        } else if self.batch_size == 0 || self.actors == 0 || self.target_sync == 0 {
            "batch_size, actors and target_sync must be at least 1"
        } else if self.replay_capacity < self.batch_size {
            "replay_capacity must hold at least one batch"
        } else if self.hidden.contains(&0) {
            "hidden layer widths must be positive"
        } else if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            "alpha must be positive"
        } else if !unit(self.beta_start) || !unit(self.beta_end) {
            "beta must lie in [0, 1]"
        } else {
            return Ok(());
        };
        Err(TrainError::Config(problem.into()))
    }

    pub fn epsilon(&self, iteration: usize) -> f64 {
        let span = self.epsilon_decay * self.iterations as f64;
        let frac = if span <= 0.0 { 1.0 } else { iteration as f64 / span };
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    fn beta(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations.max(1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * frac.min(1.0)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no benchmarks to train on")]
    NoBenchmarks,
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub episode_reward_mean: f64,
    /// Mean loss over this iteration's updates; `None` before learning starts.
    pub loss: Option<f64>,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "iteration,episode_reward_mean,loss,epsilon";

pub fn metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let loss = m.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", m.iteration, m.episode_reward_mean, loss, m.epsilon);
    }
    s
}

/// Seed for one actor's episode in one iteration.
fn actor_seed(seed: u64, iteration: usize, actor: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) ^ actor as u64);
    rng.gen()
}

/// Run one episode of `policy` and return its transitions and total reward.
fn run_episode(env: &mut Env, policy: &mut dyn Policy, spec: &ContractionSpec) -> Result<(Vec<Transition>, f64), EnvError> {
    let mut obs = env.reset(spec)?;
    let mut out = Vec::new();
    let mut total = 0.0;
    loop {
        let legal = env.legal();
        if legal.is_empty() {
            break;
        }
        let t = env.step(policy.choose(&obs, legal))?;
        total += t.reward;
        obs = t.next_obs.clone();
        let done = t.done;
        out.push(t);
        if done {
            break;
        }
    }
    Ok((out, total))
}

/// Mean total episode reward of `policy` over one episode per benchmark.
pub fn mean_episode_reward(
    policy: &mut dyn Policy,
    benchmarks: &[ContractionSpec],
    backend: Arc<dyn Evaluator>,
    peak: PeakEstimate,
) -> Result<f64, EnvError> {
    let mut env = Env::with_peak(backend, peak);
    let mut sum = 0.0;
    for b in benchmarks {
        sum += run_episode(&mut env, policy, b)?.1;
    }
    Ok(sum / benchmarks.len().max(1) as f64)
}

/// Mean total reward of `episodes` uniformly random episodes, cycling
/// through `benchmarks`.
pub fn random_policy_baseline(
    benchmarks: &[ContractionSpec],
    episodes: usize,
    seed: u64,
    backend: Arc<dyn Evaluator>,
    peak: PeakEstimate,
) -> Result<f64, EnvError> {
    let mut env = Env::with_peak(backend, peak);
    let mut policy = RandomPolicy::new(seed);
    let mut sum = 0.0;
    for i in 0..episodes {
        sum += run_episode(&mut env, &mut policy, &benchmarks[i % benchmarks.len()])?.1;
    }
    Ok(sum / episodes.max(1) as f64)
}

/// Learner state across iterations.
pub struct Trainer {
    cfg: TrainConfig,
    benchmarks: Vec<ContractionSpec>,
    online: QPolicy,
    target: QPolicy,
    opt: Adam<f32>,
    replay: PrioritizedReplay<Transition>,
    envs: Vec<Env>,
    parallel: bool,
    rng: ChaCha8Rng,
    iteration: usize,
    updates: usize,
    best: Option<(f64, QPolicy)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, benchmarks: Vec<ContractionSpec>, backend: Arc<dyn Evaluator>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if benchmarks.is_empty() {
            return Err(TrainError::NoBenchmarks);
        }
        let peak = backend.measure_peak();
        let online = QPolicy::random(&cfg.hidden, cfg.seed);
        // Timed measurements must not overlap, so actors take turns.
        let parallel = backend.kind() == BackendKind::CostModel;
        let envs = (0..cfg.actors)
            .map(|_| Env::with_peak(Arc::clone(&backend), peak.clone()))
            .collect();
        Ok(Trainer {
            opt: Adam::new(&online.net, cfg.learning_rate as f32),
            target: online.clone(),
            replay: PrioritizedReplay::new(cfg.replay_capacity, cfg.alpha),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            online,
            envs,
            parallel,
            benchmarks,
            iteration: 0,
            updates: 0,
            best: None,
            cfg,
        })
    }

    pub fn policy(&self) -> &QPolicy {
        &self.online
    }

    pub fn target(&self) -> &QPolicy {
        &self.target
    }

    /// Policy from the iteration with the highest episode reward so far.
    pub fn best_policy(&self) -> &QPolicy {
        self.best.as_ref().map(|(_, p)| p).unwrap_or(&self.online)
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    fn collect(&mut self, epsilon: f64) -> Result<Vec<(Vec<Transition>, f64)>, EnvError> {
        let it = self.iteration;
        let seed = self.cfg.seed;
        let online = &self.online;
        let benchmarks = &self.benchmarks;
        let actor = |i: usize, env: &mut Env| {
            let mut rng = ChaCha8Rng::seed_from_u64(actor_seed(seed, it, i));
            let spec = &benchmarks[rng.gen_range(0..benchmarks.len())];
            let mut policy = EpsilonGreedy {
                q: online,
                epsilon,
                rng,
            };
            run_episode(env, &mut policy, spec)
        };
        if self.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .envs
                    .iter_mut()
                    .enumerate()
                    .map(|(i, env)| s.spawn(move || actor(i, env)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("actor thread")).collect()
            })
        } else {
            self.envs.iter_mut().enumerate().map(|(i, env)| actor(i, env)).collect()
        }
    }

    /// One gradient step on a prioritized batch; returns the loss.
    fn update(&mut self, beta: f64) -> f64 {
        let batch = self.replay.sample(self.cfg.batch_size, beta, &mut self.rng);
        let gamma = self.cfg.gamma as f32;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut actions = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        for s in &batch {
            let t = self.replay.get(s.index);
            inputs.push(normalize(&t.obs));
            actions.push(t.action.id());
            let future = if t.done || t.info.next_legal.is_empty() {
                0.0
            } else {
                let q = self.target.q_values(&t.next_obs);
                t.info.next_legal.iter().map(|a| q[a.id()]).fold(f32::NEG_INFINITY, f32::max)
            };
            targets.push(t.reward as f32 + gamma * future);
            weights.push(s.weight as f32);
        }
        let refs: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
        let (loss, grads, errors) = self
            .online
            .net
            .td_loss(&refs, &actions, &targets, &weights)
            .expect("observation width matches network");
        if loss.is_finite() {
            self.opt.step(&mut self.online.net, &grads);
            for (s, e) in batch.iter().zip(errors) {
                let p = e.abs() as f64 + PRIORITY_EPS;
                if p.is_finite() {
                    self.replay.set_priority(s.index, p);
                }
            }
            self.updates += 1;
            if self.updates % self.cfg.target_sync == 0 {
                self.target = self.online.clone();
            }
        }
        loss as f64
    }

    /// Collect one episode per actor, then train on the replay buffer.
    pub fn step(&mut self) -> Result<IterationMetrics, TrainError> {
        let iteration = self.iteration;
        let epsilon = self.cfg.epsilon(iteration);
        let episodes = self.collect(epsilon)?;
        let reward_mean = episodes.iter().map(|(_, r)| r).sum::<f64>() / episodes.len() as f64;
        for (ts, _) in episodes {
            for t in ts {
                self.replay.push(t);
            }
        }
        let mut losses = Vec::new();
        if self.replay.len() >= self.cfg.batch_size {
            let beta = self.cfg.beta(iteration);
            for _ in 0..self.cfg.updates_per_iteration {
                let l = self.update(beta);
                if !l.is_finite() {
                    return Err(TrainError::Diverged { iteration });
                }
                losses.push(l);
            }
        }
        if self.best.as_ref().is_none_or(|(r, _)| reward_mean > *r) {
            self.best = Some((reward_mean, self.online.clone()));
        }
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration,
            episode_reward_mean: reward_mean,
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            epsilon,
        })
    }
}

pub struct TrainOutcome {
    pub policy: QPolicy,
    pub best: QPolicy,
    pub metrics: Vec<IterationMetrics>,
}

/// Train for `cfg.iterations`, calling `on_iteration` after each.
pub fn train(
    benchmarks: Vec<ContractionSpec>,
    cfg: TrainConfig,
    backend: Arc<dyn Evaluator>,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainOutcome, TrainError> {
    let iterations = cfg.iterations;
    let mut trainer = Trainer::new(cfg, benchmarks, backend)?;
    let mut metrics = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let m = trainer.step()?;
        on_iteration(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        best: trainer.best_policy().clone(),
        policy: trainer.online,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CostModel;
    use crate::features::encode;
    use crate::ir::lower;

    #[test]
    fn normalization_scales_sizes_only() {
        let obs = encode(&lower(&ContractionSpec::matmul(64, 64, 64).unwrap())).unwrap();
        let x = normalize(&obs);
        assert_eq!(x[SIZE_FEATURE], 0.25);
        assert_eq!(x[0], 1.0);
        assert_eq!(x.len(), OBS_LEN);
    }

    #[test]
    fn argmax_respects_mask_and_ties() {
        let q = [5.0, 1.0, 1.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let legal: ActionSet = [Action::Down, Action::SwapUp, Action::Split2].into_iter().collect();
        assert_eq!(masked_argmax(&q, legal), Some(Action::Down));
        let mut nan = q;
        nan[1] = f32::NAN;
        assert_eq!(masked_argmax(&nan, legal), Some(Action::SwapUp));
        assert_eq!(masked_argmax(&q, ActionSet::empty()), None);
    }

    #[test]
    fn gamma_zero_target_is_reward() {
        // With gamma 0 and a single sample, the TD error is Q(s,a) - r.
        let p = QPolicy::random(&[8], 1);
        let obs = encode(&lower(&ContractionSpec::matmul(16, 16, 16).unwrap())).unwrap();
        let x = normalize(&obs);
        let q = p.net.forward(&x).unwrap();
        let (_, _, e) = p.net.td_loss(&[&x], &[2], &[0.25], &[1.0]).unwrap();
        assert_eq!(e[0], q[2] - 0.25);
    }

    #[test]
    fn config_from_toml() {
        let cfg = TrainConfig::from_toml("iterations = 5\nhidden = [32]\ngamma = 0.5\nsplit = \"test\"").unwrap();
        assert_eq!((cfg.iterations, cfg.hidden.clone(), cfg.gamma), (5, vec![32], 0.5));
        assert_eq!(cfg.split, Split::Test);
        assert!(TrainConfig::from_toml("gamma = 1.5").is_err());
        assert!(TrainConfig::from_toml("epsilon_start = -0.1").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(25) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon(50), 0.05);
        assert_eq!(cfg.epsilon(99), 0.05);
    }

    #[test]
    fn target_changes_only_at_sync() {
        let cfg = TrainConfig {
            hidden: vec![16],
            batch_size: 8,
            actors: 2,
            target_sync: 3,
            updates_per_iteration: 2,
            iterations: 6,
            ..TrainConfig::default()
        };
        let benches = vec![ContractionSpec::matmul(16, 32, 16).unwrap()];
        let mut t = Trainer::new(cfg, benches, Arc::new(CostModel)).unwrap();
        let mut last_target = t.target().clone();
        let mut last_updates = 0;
        for _ in 0..6 {
            t.step().unwrap();
            let crossed = (last_updates + 1..=t.updates()).any(|u| u % 3 == 0);
            assert_eq!(t.target() != &last_target, crossed);
            last_target = t.target().clone();
            last_updates = t.updates();
        }
        assert!(t.updates() > 0);
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let cfg = TrainConfig {
            hidden: vec![16],
            batch_size: 8,
            iterations: 4,
            ..TrainConfig::default()
        };
        let benches = vec![
            ContractionSpec::matmul(16, 32, 16).unwrap(),
            ContractionSpec::matmul(32, 16, 48).unwrap(),
        ];
        let a = train(benches.clone(), cfg.clone(), Arc::new(CostModel), |_| {}).unwrap();
        let b = train(benches, cfg, Arc::new(CostModel), |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy, b.policy);
        assert_eq!(metrics_csv(&a.metrics).lines().count(), 5);
    }
}
