//! Schedule evaluation backends.
//!
//! [`reference_execute`] is the correctness oracle. Performance comes from
//! one of two interchangeable [`Evaluator`]s: [`TimedBackend`] measures the
//! schedule on this machine, [`CostModel`] scores it analytically and is
//! fully deterministic.

mod cost;
mod plan;
mod reference;
mod timed;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{
    access_cost, level_penalty, simulated_cycles, CostModel, CLOCK_GHZ, L1_BYTES, L2_BYTES,
    L3_BYTES, LINE_BYTES, PEAK_GFLOPS, PENALTIES,
};
pub use reference::{random_operands, reference_execute};
pub use timed::TimedBackend;

use crate::ir::{IrError, LoopIR};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("tensor {tensor}: expected {expected} elements, got {got}")]
    ShapeMismatch {
        tensor: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(#[from] IrError),
    #[error("problem too large for the timed executor")]
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Timed,
    #[serde(rename = "costmodel")]
    CostModel,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Timed => "timed",
            BackendKind::CostModel => "costmodel",
        })
    }
}

impl FromStr for BackendKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "timed" => Ok(BackendKind::Timed),
            "costmodel" | "cost_model" | "cost-model" => Ok(BackendKind::CostModel),
            other => Err(ConfigError(format!("unknown backend `{other}`"))),
        }
    }
}

/// One performance measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub gflops: f64,
    pub runtime_ns: u64,
    pub flops: u64,
    pub backend: BackendKind,
}

impl EvalResult {
    /// `runtime_ns` is clamped to at least 1 so `gflops` stays finite and positive.
    pub fn new(flops: u64, runtime_ns: u64, backend: BackendKind) -> Self {
        let runtime_ns = runtime_ns.max(1);
        EvalResult {
            gflops: flops as f64 / runtime_ns as f64,
            runtime_ns,
            flops,
            backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakEstimate {
    pub gflops_peak: f64,
    pub method: String,
}

/// A source of GFLOPS for schedules.
pub trait Evaluator: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn evaluate(&self, ir: &LoopIR) -> Result<EvalResult, EvalError>;
    fn measure_peak(&self) -> PeakEstimate;
}

impl Evaluator for CostModel {
    fn kind(&self) -> BackendKind {
        BackendKind::CostModel
    }

    fn evaluate(&self, ir: &LoopIR) -> Result<EvalResult, EvalError> {
        Ok(self.execute(ir))
    }

    fn measure_peak(&self) -> PeakEstimate {
        self.peak()
    }
}

impl Evaluator for TimedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Timed
    }

    fn evaluate(&self, ir: &LoopIR) -> Result<EvalResult, EvalError> {
        self.execute(ir)
    }

    fn measure_peak(&self) -> PeakEstimate {
        TimedBackend::measure_peak(self)
    }
}

/// Wraps an evaluator and counts backend calls.
pub struct CountingEvaluator {
    inner: Arc<dyn Evaluator>,
    calls: AtomicUsize,
}

impl CountingEvaluator {
    pub fn new(inner: Arc<dyn Evaluator>) -> Self {
        CountingEvaluator {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl Evaluator for CountingEvaluator {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn evaluate(&self, ir: &LoopIR) -> Result<EvalResult, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(ir)
    }

    fn measure_peak(&self) -> PeakEstimate {
        self.inner.measure_peak()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("backend config: {0}")]
pub struct ConfigError(pub String);

/// Backend selection and timing parameters.
///
/// Keys: `backend` (`timed` | `costmodel`), `warmup_iters`, `timed_iters`,
/// `min_sample_ms`. Read from `key=value` pairs or from `NESTUNE_<KEY>`
/// environment variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub backend: BackendKind,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub min_sample_ms: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            backend: BackendKind::CostModel,
            warmup_iters: 20,
            timed_iters: 10,
            min_sample_ms: 1.0,
        }
    }
}

impl BackendConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |_| ConfigError(format!("invalid value `{value}` for `{key}`"));
        match key {
            "backend" => self.backend = value.parse()?,
            "warmup_iters" => self.warmup_iters = value.parse().map_err(bad)?,
            "timed_iters" => {
                self.timed_iters = value.parse().map_err(bad)?;
                if self.timed_iters == 0 {
                    return Err(ConfigError("timed_iters must be at least 1".into()));
                }
            }
            "min_sample_ms" => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| ConfigError(format!("invalid value `{value}` for `{key}`")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(ConfigError("min_sample_ms must be a nonnegative number".into()));
                }
                self.min_sample_ms = v;
            }
            other => return Err(ConfigError(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse whitespace-separated `key=value` pairs over the defaults.
    pub fn from_pairs(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = BackendConfig::default();
        for pair in text.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("expected key=value, got `{pair}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Defaults overridden by any `NESTUNE_BACKEND`, `NESTUNE_WARMUP_ITERS`,
    /// `NESTUNE_TIMED_ITERS` or `NESTUNE_MIN_SAMPLE_MS` variables.
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut cfg = BackendConfig::default();
        for key in ["backend", "warmup_iters", "timed_iters", "min_sample_ms"] {
            if let Ok(v) = std::env::var(format!("NESTUNE_{}", key.to_uppercase())) {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }

    pub fn build(&self) -> Arc<dyn Evaluator> {
        match self.backend {
            BackendKind::CostModel => Arc::new(CostModel),
            BackendKind::Timed => Arc::new(TimedBackend {
                warmup_iters: self.warmup_iters,
                timed_iters: self.timed_iters,
                min_sample_ns: (self.min_sample_ms * 1e6) as u64,
            }),
        }
    }
}
