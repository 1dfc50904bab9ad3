//! Result records and aggregate reports: performance profiles and speedups.
//!
//! Every (benchmark, method) run is stored as `<benchmark>__<method>.json`.
//! The report normalizes each benchmark by its best method: the ratio of a
//! method is `best / gflops`, and its profile `rho(tau)` is the fraction of
//! benchmarks with ratio at most `tau`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, Evaluator};
use crate::ir::{lower, ContractionSpec};
use crate::search::{SearchResult, TraceEntry};

/// Method name of the untiled schedule.
pub const ORIGINAL: &str = "original";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub benchmark: String,
    pub method: String,
    /// The benchmark in DSL form.
    pub spec: String,
    pub result: SearchResult,
}

impl RunRecord {
    pub fn new(spec: &ContractionSpec, method: &str, result: SearchResult) -> Self {
        RunRecord {
            benchmark: spec.name().to_string(),
            method: method.to_string(),
            spec: spec.to_string(),
            result,
        }
    }

    /// Record of the untiled schedule, measured once.
    pub fn original(spec: &ContractionSpec, backend: &dyn Evaluator) -> Result<Self, EvalError> {
        let ir = lower(spec);
        let start = std::time::Instant::now();
        let r = backend.evaluate(&ir)?;
        let wall = start.elapsed().as_secs_f64();
        let result = SearchResult {
            best_actions: Vec::new(),
            best_gflops: r.gflops,
            best_key: ir.canonical_key(),
            nodes_expanded: 1,
            evals: 1,
            cache_hits: 0,
            wall_time_s: wall,
            per_step_trace: vec![TraceEntry {
                step: 0,
                best_gflops: r.gflops,
                elapsed_s: wall,
                nodes: 1,
            }],
        };
        Ok(Self::new(spec, ORIGINAL, result))
    }

    pub fn file_name(&self) -> String {
        record_file_name(&self.benchmark, &self.method)
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, ReportError> {
        let path = dir.join(self.file_name());
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(&path, json + "\n").map_err(|e| ReportError::Io(path.clone(), e))?;
        Ok(path)
    }
}

pub fn record_file_name(benchmark: &str, method: &str) -> String {
    format!("{benchmark}__{method}.json")
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Json(PathBuf, serde_json::Error),
    #[error("need results from at least two methods, found {0}")]
    TooFewMethods(usize),
    #[error("method `{method}` covers a different benchmark set than `{reference}`")]
    MismatchedBenchmarks { method: String, reference: String },
    #[error("duplicate record for benchmark `{benchmark}`, method `{method}`")]
    Duplicate { benchmark: String, method: String },
    #[error("baseline method `{0}` has no results")]
    MissingBaseline(String),
}

/// Read every `*.json` record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, ReportError> {
    let io = |e| ReportError::Io(dir.to_path_buf(), e);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| ReportError::Io(p.clone(), e))?;
            serde_json::from_str(&text).map_err(|e| ReportError::Json(p, e))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub tau: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub methods: Vec<String>,
    pub benchmarks: Vec<String>,
    /// `gflops[method][benchmark]`.
    pub gflops: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Report {
    pub fn from_records(records: &[RunRecord]) -> Result<Self, ReportError> {
        let mut gflops: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in records {
            let per = gflops.entry(r.method.clone()).or_default();
            if per.insert(r.benchmark.clone(), r.result.best_gflops).is_some() {
                return Err(ReportError::Duplicate {
                    benchmark: r.benchmark.clone(),
                    method: r.method.clone(),
                });
            }
        }
        if gflops.len() < 2 {
            return Err(ReportError::TooFewMethods(gflops.len()));
        }
        let mut iter = gflops.iter();
        let (reference, first) = iter.next().expect("two methods");
        let set: BTreeSet<&String> = first.keys().collect();
        for (method, per) in iter {
            if per.keys().collect::<BTreeSet<_>>() != set {
                return Err(ReportError::MismatchedBenchmarks {
                    method: method.clone(),
                    reference: reference.clone(),
                });
            }
        }
        Ok(Report {
            methods: gflops.keys().cloned().collect(),
            benchmarks: set.into_iter().cloned().collect(),
            gflops,
        })
    }

    pub fn best(&self, benchmark: &str) -> f64 {
        self.methods
            .iter()
            .map(|m| self.gflops[m][benchmark])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `best / gflops`, infinite when the method produced nothing.
    pub fn ratio(&self, method: &str, benchmark: &str) -> f64 {
        let g = self.gflops[method][benchmark];
        if g > 0.0 {
            self.best(benchmark) / g
        } else {
            f64::INFINITY
        }
    }

    /// `gflops / best`, in `[0, 1]`.
    pub fn normalized(&self, method: &str, benchmark: &str) -> f64 {
        let best = self.best(benchmark);
        if best > 0.0 {
            self.gflops[method][benchmark] / best
        } else {
            1.0
        }
    }

    /// Profile of `method` at every finite ratio of any method, and at 1.
    pub fn profile(&self, method: &str) -> Vec<ProfilePoint> {
        let mut taus = vec![1.0];
        for m in &self.methods {
            for b in &self.benchmarks {
                let r = self.ratio(m, b);
                if r.is_finite() {
                    taus.push(r);
                }
            }
        }
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let ratios: Vec<f64> = self.benchmarks.iter().map(|b| self.ratio(method, b)).collect();
        let n = ratios.len() as f64;
        taus.into_iter()
            .map(|tau| ProfilePoint {
                tau,
                rho: ratios.iter().filter(|&&r| r <= tau).count() as f64 / n,
            })
            .collect()
    }

    pub fn profile_csv(&self) -> String {
        let mut s = String::from("method,tau,rho\n");
        for m in &self.methods {
            for p in self.profile(m) {
                let _ = writeln!(s, "{m},{},{}", p.tau, p.rho);
            }
        }
        s
    }

    /// Per-benchmark speedup of every method over `baseline`.
    pub fn speedup_csv(&self, baseline: &str) -> Result<String, ReportError> {
        let base = self
            .gflops
            .get(baseline)
            .ok_or_else(|| ReportError::MissingBaseline(baseline.into()))?;
        let mut s = String::from("benchmark,method,gflops,normalized,speedup\n");
        for b in &self.benchmarks {
            for m in &self.methods {
                let g = self.gflops[m][b];
                let _ = writeln!(s, "{b},{m},{g},{},{}", self.normalized(m, b), g / base[b]);
            }
        }
        Ok(s)
    }
}
