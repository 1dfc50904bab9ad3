//! Matmul benchmark dataset and its text format.
//!
//! The file is one benchmark per line in the spec DSL. `#! split=train` and
//! `#! split=test` lines assign the benchmarks that follow to a split; other
//! `#` comments are ignored. A file without split lines puts every benchmark
//! in both splits.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse_spec, ParseError};
use crate::ir::ContractionSpec;

/// Matmul extents along each axis: 64 to 256 in steps of 16.
pub const DIM_MIN: usize = 64;
pub const DIM_MAX: usize = 256;
pub const DIM_STEP: usize = 16;
pub const DATASET_LEN: usize = 2197;
pub const TRAIN_LEN: usize = 1757;
pub const TEST_LEN: usize = DATASET_LEN - TRAIN_LEN;
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
    All,
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(DatasetError::UnknownSplit(other.into())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown split `{0}` (expected train, test or all)")]
    UnknownSplit(String),
    #[error("line {line}: bad directive `{text}`")]
    Directive { line: usize, text: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub benchmarks: Vec<ContractionSpec>,
    /// Indices into `benchmarks`. Both splits list every benchmark when the
    /// source file had no split directives.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: Option<u64>,
}

/// Every `m, n, k` in `{64, 80, ..., 256}`, shuffled under `seed`; the first
/// 1757 form the training split and the remaining 440 the test split.
pub fn generate_matmul_dataset(seed: u64) -> Dataset {
    let dims: Vec<usize> = (DIM_MIN..=DIM_MAX).step_by(DIM_STEP).collect();
    let mut benchmarks = Vec::with_capacity(dims.len().pow(3));
    for &m in &dims {
        for &n in &dims {
            for &k in &dims {
                benchmarks.push(ContractionSpec::matmul(m, n, k).expect("valid extents"));
            }
        }
    }
    benchmarks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_len = benchmarks.len() * 4 / 5;
    Dataset {
        train: (0..train_len).collect(),
        test: (train_len..benchmarks.len()).collect(),
        benchmarks,
        seed: Some(seed),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.benchmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.benchmarks.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<ContractionSpec> {
        let idx: Vec<usize> = match split {
            Split::Train => self.train.clone(),
            Split::Test => self.test.clone(),
            Split::All => (0..self.benchmarks.len()).collect(),
        };
        idx.into_iter().map(|i| self.benchmarks[i].clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} benchmarks", self.len());
        if let Some(seed) = self.seed {
            let _ = write!(s, ", split seed {seed}");
        }
        s.push('\n');
        let all: Vec<usize> = (0..self.len()).collect();
        if self.train == all && self.test == all {
            for b in &self.benchmarks {
                let _ = writeln!(s, "{b}");
            }
            return s;
        }
        // Benchmarks ahead of the first directive belong to neither split.
        for (i, b) in self.benchmarks.iter().enumerate() {
            if !self.train.contains(&i) && !self.test.contains(&i) {
                let _ = writeln!(s, "{b}");
            }
        }
        for (name, idx) in [("train", &self.train), ("test", &self.test)] {
            let _ = writeln!(s, "#! split={name}");
            for &i in idx {
                let _ = writeln!(s, "{}", self.benchmarks[i]);
            }
        }
        s
    }
}

/// Parse the dataset text format.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut benchmarks = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut current: Option<Split> = None;
    let mut seen_directive = false;
    let mut seed = None;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(d) = trimmed.strip_prefix("#!") {
            let bad = || DatasetError::Directive {
                line: i + 1,
                text: trimmed.into(),
            };
            let value = d.trim().strip_prefix("split=").ok_or_else(bad)?;
            current = match value.trim() {
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                _ => return Err(bad()),
            };
            seen_directive = true;
            continue;
        }
        if i == 0 {
            seed = trimmed
                .rsplit_once("split seed ")
                .and_then(|(_, s)| s.trim().parse().ok());
        }
        if trimmed.split('#').next().unwrap_or("").trim().is_empty() {
            continue;
        }
        let spec = parse_spec(line).map_err(|mut e| {
            e.line = Some(i + 1);
            e
        })?;
        let idx = benchmarks.len();
        benchmarks.push(spec);
        match current {
            Some(Split::Train) => train.push(idx),
            Some(Split::Test) => test.push(idx),
            _ => {}
        }
    }
    if !seen_directive {
        train = (0..benchmarks.len()).collect();
        test = train.clone();
    }
    Ok(Dataset {
        benchmarks,
        train,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let d = generate_matmul_dataset(0);
        assert_eq!((d.len(), d.train.len(), d.test.len()), (DATASET_LEN, TRAIN_LEN, TEST_LEN));
        assert_eq!(TEST_LEN, 440);
    }

    #[test]
    fn text_round_trip() {
        let d = generate_matmul_dataset(5);
        let text = d.to_text();
        let back = parse_dataset(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.split(Split::Test), d.split(Split::Test));
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(generate_matmul_dataset(0).benchmarks, generate_matmul_dataset(1).benchmarks);
    }

    #[test]
    fn undirected_file_is_in_both_splits() {
        let d = parse_dataset("# hand list\nC[m] += A[m,k] * B[k] | m=4 k=4\n\nC[i,j] += X[i,k] * Y[k,j] | i=2 j=2 k=2\n").unwrap();
        assert_eq!(d.split(Split::Train).len(), 2);
        assert_eq!(d.split(Split::Test).len(), 2);
        assert_eq!(d.seed, None);
        assert_eq!(parse_dataset(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn unassigned_benchmarks_survive_round_trip() {
        let text = "C[m] += A[m,k] * B[k] | m=4 k=4\n#! split=test\nC[m] += A[m,k] * B[k] | m=8 k=4\n";
        let d = parse_dataset(text).unwrap();
        assert_eq!((d.len(), d.train.len(), d.test.len()), (2, 0, 1));
        assert_eq!(parse_dataset(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn errors_carry_lines() {
        match parse_dataset("#! split=train\nC[m] += A[m] * B[m] | m=0\n") {
            Err(DatasetError::Parse(e)) => assert_eq!(e.line, Some(2)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_dataset("#! split=validation\n"),
            Err(DatasetError::Directive { line: 1, .. })
        ));
        assert!("dev".parse::<Split>().is_err());
    }
}
