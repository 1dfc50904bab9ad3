//! Tensor contraction problems and their loop-nest intermediate representation.
//!
//! A [`ContractionSpec`] describes `OUT[..] += post(A[..] * B[..])` over named
//! index variables. [`lower`] turns it into an untiled [`LoopIR`]: a compute
//! nest that accumulates into a temporary `T`, followed by a write-back nest
//! that copies `T` into the output.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of loops a schedule may hold.
///
/// Three compute loops, two write-back loops and ten splits fit; the
/// observation vector is sized from this.
pub const MAX_LOOPS: usize = 16;

/// Iteration spaces beyond this many points are rejected at validation.
const MAX_POINTS: u128 = 1 << 62;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("index `{index}` repeated in tensor `{tensor}`")]
    DuplicateIndex { tensor: String, index: String },
    #[error("output index `{0}` does not appear in any operand")]
    UnboundOutputIndex(String),
    #[error("index `{0}` has no declared extent")]
    UndeclaredIndex(String),
    #[error("extent declared for unused index `{0}`")]
    UnusedExtent(String),
    #[error("extent of `{0}` must be at least 1")]
    NonPositiveExtent(String),
    #[error("iteration space too large")]
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorRef {
    pub name: String,
    pub indices: Vec<String>,
}

impl TensorRef {
    pub fn new(name: impl Into<String>, indices: &[&str]) -> Self {
        TensorRef {
            name: name.into(),
            indices: indices.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn contains(&self, var: &str) -> bool {
        self.indices.iter().any(|i| i == var)
    }
}

impl fmt::Display for TensorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.indices.join(","))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostOp {
    #[default]
    Identity,
    Relu,
}

impl PostOp {
    #[inline]
    pub fn apply_f32(self, x: f32) -> f32 {
        match self {
            PostOp::Identity => x,
            PostOp::Relu => x.max(0.0),
        }
    }
}

/// A validated two-operand contraction over `f32` data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContractionSpec {
    name: String,
    output: TensorRef,
    operands: [TensorRef; 2],
    extents: BTreeMap<String, usize>,
    post_op: PostOp,
}

impl ContractionSpec {
    pub fn new(
        name: impl Into<String>,
        output: TensorRef,
        operands: [TensorRef; 2],
        extents: BTreeMap<String, usize>,
        post_op: PostOp,
    ) -> Result<Self, SpecError> {
        for t in std::iter::once(&output).chain(operands.iter()) {
            for (i, idx) in t.indices.iter().enumerate() {
                if t.indices[..i].contains(idx) {
                    return Err(SpecError::DuplicateIndex {
                        tensor: t.name.clone(),
                        index: idx.clone(),
                    });
                }
            }
        }
        for idx in &output.indices {
            if !operands.iter().any(|op| op.contains(idx)) {
                return Err(SpecError::UnboundOutputIndex(idx.clone()));
            }
        }
        let spec = ContractionSpec {
            name: name.into(),
            output,
            operands,
            extents,
            post_op,
        };
        let used = spec.index_order();
        for v in &used {
            match spec.extents.get(v) {
                None => return Err(SpecError::UndeclaredIndex(v.clone())),
                Some(0) => return Err(SpecError::NonPositiveExtent(v.clone())),
                Some(_) => {}
            }
        }
        if let Some(extra) = spec.extents.keys().find(|k| !used.contains(k)) {
            return Err(SpecError::UnusedExtent(extra.clone()));
        }
        let mut points: u128 = 1;
        for e in spec.extents.values() {
            points = points.saturating_mul(*e as u128);
            if points > MAX_POINTS {
                return Err(SpecError::TooLarge);
            }
        }
        Ok(spec)
    }

    /// `C[m,n] += A[m,k] * B[k,n]` with the given extents.
    pub fn matmul(m: usize, n: usize, k: usize) -> Result<Self, SpecError> {
        let extents = [("m", m), ("n", n), ("k", k)]
            .into_iter()
            .map(|(v, e)| (v.to_string(), e))
            .collect();
        ContractionSpec::new(
            format!("mm_{m}_{n}_{k}"),
            TensorRef::new("C", &["m", "n"]),
            [TensorRef::new("A", &["m", "k"]), TensorRef::new("B", &["k", "n"])],
            extents,
            PostOp::Identity,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn output(&self) -> &TensorRef {
        &self.output
    }

    pub fn operands(&self) -> &[TensorRef; 2] {
        &self.operands
    }

    pub fn extents(&self) -> &BTreeMap<String, usize> {
        &self.extents
    }

    pub fn extent(&self, var: &str) -> Option<usize> {
        self.extents.get(var).copied()
    }

    pub fn post_op(&self) -> PostOp {
        self.post_op
    }

    /// Indices summed over: present in an operand, absent from the output.
    /// Ordered by first appearance, scanning `A` then `B`.
    pub fn contraction_indices(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for op in &self.operands {
            for idx in &op.indices {
                if !self.output.contains(idx) && !out.contains(idx) {
                    out.push(idx.clone());
                }
            }
        }
        out
    }

    /// Output indices in declaration order followed by contraction indices.
    /// This is the loop order of the lowered nest.
    pub fn index_order(&self) -> Vec<String> {
        let mut v = self.output.indices.clone();
        v.extend(self.contraction_indices());
        v
    }

    /// Multiply-add pairs count as two flops; a non-identity post-op adds
    /// one flop per output element.
    pub fn flop_count(&self) -> u64 {
        let all: u64 = self.extents.values().map(|&e| e as u64).product();
        let mut flops = 2 * all;
        if self.post_op != PostOp::Identity {
            flops += self
                .output
                .indices
                .iter()
                .map(|v| self.extents[v] as u64)
                .product::<u64>();
        }
        flops
    }

    /// The contraction without its name or extents, e.g. `C[m,n]+=A[m,k]*B[k,n]`.
    pub fn signature(&self) -> String {
        let mut s = format!(
            "{}+={}*{}",
            self.output, self.operands[0], self.operands[1]
        );
        if self.post_op == PostOp::Relu {
            s.push_str("|relu");
        }
        s
    }
}

impl fmt::Display for ContractionSpec {
    /// Renders the benchmark DSL form, which [`crate::dsl::parse_spec`] reads back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} += {} * {} |",
            self.output, self.operands[0], self.operands[1]
        )?;
        for v in self.index_order() {
            write!(f, " {}={}", v, self.extents[&v])?;
        }
        if self.post_op == PostOp::Relu {
            write!(f, " post=relu")?;
        }
        write!(f, " name={}", self.name)
    }
}

/// The four tensors a nest touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorRole {
    A,
    B,
    /// Accumulation temporary between the compute and write-back nests.
    T,
    Out,
}

impl TensorRole {
    pub const ALL: [TensorRole; 4] = [TensorRole::A, TensorRole::B, TensorRole::T, TensorRole::Out];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Row-major layout of one tensor, expressed over problem variable ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    pub dims: Vec<usize>,
    pub base_strides: Vec<usize>,
}

impl TensorLayout {
    fn row_major(dims: Vec<usize>, extents: &[usize]) -> Self {
        let mut base_strides = vec![0; dims.len()];
        let mut acc = 1;
        for (i, &d) in dims.iter().enumerate().rev() {
            base_strides[i] = acc;
            acc *= extents[d];
        }
        TensorLayout { dims, base_strides }
    }

    /// Element stride of `var` in this tensor, 0 if the tensor is not indexed by it.
    pub fn stride_of(&self, var: usize) -> usize {
        self.dims
            .iter()
            .position(|&d| d == var)
            .map_or(0, |p| self.base_strides[p])
    }

    pub fn len(&self, extents: &[usize]) -> usize {
        self.dims.iter().map(|&d| extents[d]).product()
    }
}

/// Everything about a lowered problem that schedules do not change.
#[derive(Debug, PartialEq, Eq)]
pub struct Problem {
    pub spec: ContractionSpec,
    pub vars: Vec<String>,
    pub extents: Vec<usize>,
    pub output_vars: Vec<usize>,
    layouts: [TensorLayout; 4],
    signature: String,
}

impl Problem {
    pub fn layout(&self, role: TensorRole) -> &TensorLayout {
        &self.layouts[role.index()]
    }

    pub fn tensor_len(&self, role: TensorRole) -> usize {
        self.layout(role).len(&self.extents)
    }

    pub fn var_id(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nest {
    Compute,
    Writeback,
}

/// One loop of a schedule.
///
/// `tail` counts leftover iterations of the variable, executed after the
/// `size` full iterations with the inner loops over the same variable cut
/// short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoopDesc {
    pub var: usize,
    pub size: usize,
    pub tail: usize,
    pub nest: Nest,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("cursor {cursor} out of range for {len} loops")]
    CursorOutOfRange { cursor: usize, len: usize },
    #[error("write-back loop precedes compute loop at position {0}")]
    NestOrder(usize),
    #[error("loop {0} has size 0")]
    ZeroSize(usize),
    #[error("loop {pos} tail {tail} not below its step {step}")]
    TailTooLarge { pos: usize, tail: usize, step: usize },
    #[error("variable `{var}` covers {covered} iterations, extent is {extent}")]
    Coverage { var: String, covered: usize, extent: usize },
    #[error("write-back nest must hold each output index once, untiled")]
    Writeback,
}

/// A schedule: the ordered loop list plus the cursor the actions act on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopIR {
    pub(crate) loops: Vec<LoopDesc>,
    pub(crate) cursor: usize,
    problem: Arc<Problem>,
}

/// Lower a contraction to its untiled loop nest with the cursor on the first loop.
pub fn lower(spec: &ContractionSpec) -> LoopIR {
    let vars = spec.index_order();
    let extents: Vec<usize> = vars.iter().map(|v| spec.extents()[v]).collect();
    let ids = |t: &TensorRef| -> Vec<usize> {
        t.indices
            .iter()
            .map(|i| vars.iter().position(|v| v == i).expect("validated index"))
            .collect()
    };
    let output_vars = ids(spec.output());
    let layouts = [
        TensorLayout::row_major(ids(&spec.operands()[0]), &extents),
        TensorLayout::row_major(ids(&spec.operands()[1]), &extents),
        TensorLayout::row_major(output_vars.clone(), &extents),
        TensorLayout::row_major(output_vars.clone(), &extents),
    ];
    let mut loops: Vec<LoopDesc> = (0..vars.len())
        .map(|v| LoopDesc {
            var: v,
            size: extents[v],
            tail: 0,
            nest: Nest::Compute,
        })
        .collect();
    loops.extend(output_vars.iter().map(|&v| LoopDesc {
        var: v,
        size: extents[v],
        tail: 0,
        nest: Nest::Writeback,
    }));
    let problem = Problem {
        signature: spec.signature(),
        spec: spec.clone(),
        vars,
        extents,
        output_vars,
        layouts,
    };
    LoopIR {
        loops,
        cursor: 0,
        problem: Arc::new(problem),
    }
}

impl LoopIR {
    pub fn loops(&self) -> &[LoopDesc] {
        &self.loops
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn spec(&self) -> &ContractionSpec {
        &self.problem.spec
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn var_name(&self, var: usize) -> &str {
        &self.problem.vars[var]
    }

    /// Number of loops in the compute nest (the loop-list prefix).
    pub fn compute_len(&self) -> usize {
        self.loops
            .iter()
            .take_while(|l| l.nest == Nest::Compute)
            .count()
    }

    /// Same structure with the cursor elsewhere.
    pub fn with_cursor(&self, cursor: usize) -> Result<LoopIR, IrError> {
        if cursor >= self.loops.len() {
            return Err(IrError::CursorOutOfRange {
                cursor,
                len: self.loops.len(),
            });
        }
        let mut ir = self.clone();
        ir.cursor = cursor;
        Ok(ir)
    }

    /// Per-loop step: how far the loop's variable advances per iteration.
    ///
    /// That is the span of the next loop below over the same variable in the
    /// same nest, or 1 for the innermost one.
    pub fn steps(&self) -> Vec<usize> {
        let mut steps = vec![1; self.loops.len()];
        let mut below: Vec<Option<usize>> = vec![None; self.problem.vars.len()];
        let mut nest = None;
        for (i, l) in self.loops.iter().enumerate().rev() {
            if nest != Some(l.nest) {
                below.iter_mut().for_each(|b| *b = None);
                nest = Some(l.nest);
            }
            let step = below[l.var].unwrap_or(1);
            steps[i] = step;
            below[l.var] = Some(l.size * step + l.tail);
        }
        steps
    }

    /// Check the structural invariants: nest ordering, tail bounds, full
    /// coverage of every extent and an untiled write-back nest.
    pub fn validate(&self) -> Result<(), IrError> {
        let len = self.loops.len();
        if self.cursor >= len {
            return Err(IrError::CursorOutOfRange {
                cursor: self.cursor,
                len,
            });
        }
        let nc = self.compute_len();
        if let Some(p) = self.loops[nc..]
            .iter()
            .position(|l| l.nest == Nest::Compute)
        {
            return Err(IrError::NestOrder(nc + p));
        }
        let steps = self.steps();
        let mut covered: Vec<Option<usize>> = vec![None; self.problem.vars.len()];
        for (i, l) in self.loops[..nc].iter().enumerate() {
            if l.size == 0 {
                return Err(IrError::ZeroSize(i));
            }
            if l.tail >= steps[i] {
                return Err(IrError::TailTooLarge {
                    pos: i,
                    tail: l.tail,
                    step: steps[i],
                });
            }
            covered[l.var].get_or_insert(l.size * steps[i] + l.tail);
        }
        for (v, &extent) in self.problem.extents.iter().enumerate() {
            let got = covered[v].unwrap_or(0);
            if got != extent {
                return Err(IrError::Coverage {
                    var: self.problem.vars[v].clone(),
                    covered: got,
                    extent,
                });
            }
        }
        let wb = &self.loops[nc..];
        let ok = wb.len() == self.problem.output_vars.len()
            && self
                .problem
                .output_vars
                .iter()
                .all(|&v| wb.iter().filter(|l| l.var == v).count() == 1)
            && wb
                .iter()
                .all(|l| l.tail == 0 && l.size == self.problem.extents[l.var]);
        if !ok {
            return Err(IrError::Writeback);
        }
        Ok(())
    }

    /// Deterministic structural key. The cursor is deliberately not part of it:
    /// schedules that differ only by cursor perform identically.
    pub fn canonical_key(&self) -> String {
        use std::fmt::Write;
        let mut key = String::with_capacity(self.problem.signature.len() + 12 * self.loops.len());
        key.push_str(&self.problem.signature);
        let mut nest = None;
        for l in &self.loops {
            if nest != Some(l.nest) {
                key.push_str(match l.nest {
                    Nest::Compute => "#c:",
                    Nest::Writeback => "#w:",
                });
                nest = Some(l.nest);
            } else {
                key.push(',');
            }
            let _ = write!(key, "{}{}t{}", self.problem.vars[l.var], l.size, l.tail);
        }
        key
    }
}

impl fmt::Display for LoopIR {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut depth = 0;
        let mut nest = None;
        for (i, l) in self.loops.iter().enumerate() {
            if nest != Some(l.nest) {
                depth = 0;
                nest = Some(l.nest);
            }
            let mark = if i == self.cursor { "  <- cursor" } else { "" };
            let tail = if l.tail > 0 {
                format!(" tail {}", l.tail)
            } else {
                String::new()
            };
            writeln!(
                f,
                "{:indent$}for {} in {}{}{}",
                "",
                self.problem.vars[l.var],
                l.size,
                tail,
                mark,
                indent = depth * 2
            )?;
            depth += 1;
            if i + 1 == self.loops.len() || self.loops[i + 1].nest != l.nest {
                let body = match l.nest {
                    Nest::Compute => "T += A * B",
                    Nest::Writeback => "OUT = post(T)",
                };
                writeln!(f, "{:indent$}{}", "", body, indent = depth * 2)?;
            }
        }
        Ok(())
    }
}
