//! High-level dataflow IR.
//!
//! Every op produces exactly one value, named by the op id. `Input` and
//! `Const` ops are sources; everything else is a compute op and appears in
//! the execution schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::model_format::TensorSpec;

pub type ValueId = String;

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input { shape: Vec<usize> },
    Const { shape: Vec<usize>, data: Arc<[f32]> },
    Dense { units: usize },
    Conv1dDwShared { kernel_len: usize, stride: usize },
    Gru { hidden: usize },
    Softmax,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Reshape { new_shape: Vec<usize> },
    LastTimestep,
}

/// Attribute-free discriminant of [`OpKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum KindTag {
    Input,
    Const,
    Dense,
    Conv1dDwShared,
    Gru,
    Softmax,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Reshape,
    LastTimestep,
}

impl KindTag {
    pub const COMPUTE: [KindTag; 12] = [
        KindTag::Dense,
        KindTag::Conv1dDwShared,
        KindTag::Gru,
        KindTag::Softmax,
        KindTag::Relu,
        KindTag::Sigmoid,
        KindTag::Tanh,
        KindTag::Add,
        KindTag::Sub,
        KindTag::Mul,
        KindTag::Reshape,
        KindTag::LastTimestep,
    ];

    pub fn snake_name(self) -> &'static str {
        match self {
            KindTag::Input => "input",
            KindTag::Const => "const",
            KindTag::Dense => "dense",
            KindTag::Conv1dDwShared => "conv1d_dw_shared",
            KindTag::Gru => "gru",
            KindTag::Softmax => "softmax",
            KindTag::Relu => "relu",
            KindTag::Sigmoid => "sigmoid",
            KindTag::Tanh => "tanh",
            KindTag::Add => "add",
            KindTag::Sub => "sub",
            KindTag::Mul => "mul",
            KindTag::Reshape => "reshape",
            KindTag::LastTimestep => "last_timestep",
        }
    }

    /// Number of inputs the kind takes; the trailing `param_arity` of them
    /// must be constants.
    pub fn arity(self) -> usize {
        match self {
            KindTag::Input | KindTag::Const => 0,
            KindTag::Dense | KindTag::Conv1dDwShared => 3,
            KindTag::Gru => 5,
            KindTag::Add | KindTag::Sub | KindTag::Mul => 2,
            _ => 1,
        }
    }

    pub fn param_arity(self) -> usize {
        match self {
            KindTag::Dense | KindTag::Conv1dDwShared => 2,
            KindTag::Gru => 4,
            _ => 0,
        }
    }

    pub fn is_source(self) -> bool {
        matches!(self, KindTag::Input | KindTag::Const)
    }
}

impl OpKind {
    pub fn tag(&self) -> KindTag {
        match self {
            OpKind::Input { .. } => KindTag::Input,
            OpKind::Const { .. } => KindTag::Const,
            OpKind::Dense { .. } => KindTag::Dense,
            OpKind::Conv1dDwShared { .. } => KindTag::Conv1dDwShared,
            OpKind::Gru { .. } => KindTag::Gru,
            OpKind::Softmax => KindTag::Softmax,
            OpKind::Relu => KindTag::Relu,
            OpKind::Sigmoid => KindTag::Sigmoid,
            OpKind::Tanh => KindTag::Tanh,
            OpKind::Add => KindTag::Add,
            OpKind::Sub => KindTag::Sub,
            OpKind::Mul => KindTag::Mul,
            OpKind::Reshape { .. } => KindTag::Reshape,
            OpKind::LastTimestep => KindTag::LastTimestep,
        }
    }

    pub fn constant(shape: Vec<usize>, data: Vec<f32>) -> Self {
        OpKind::Const {
            shape,
            data: data.into(),
        }
    }

    fn attr_text(&self) -> String {
        match self {
            OpKind::Dense { units } => format!("units={units}"),
            OpKind::Conv1dDwShared { kernel_len, stride } => {
                format!("kernel_len={kernel_len}, stride={stride}")
            }
            OpKind::Gru { hidden } => format!("hidden={hidden}"),
            OpKind::Reshape { new_shape } => format!("new_shape={}", fmt_shape(new_shape)),
            OpKind::Const { shape, .. } => format!("shape={}", fmt_shape(shape)),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize)]
pub enum Target {
    #[default]
    Cpu,
    Accel(String),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Cpu => f.write_str("cpu"),
            Target::Accel(name) => write!(f, "accel({name})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HirOp {
    pub id: ValueId,
    pub kind: OpKind,
    pub inputs: Vec<ValueId>,
    pub out_type: Option<TensorSpec>,
    pub target: Target,
}

impl HirOp {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: Vec<ValueId>) -> Self {
        HirOp {
            id: id.into(),
            kind,
            inputs,
            out_type: None,
            target: Target::Cpu,
        }
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.out_type.as_ref().map(|t| t.shape.as_slice())
    }

    pub fn is_compute(&self) -> bool {
        !self.kind.tag().is_source()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HirModule {
    pub name: String,
    pub ops: Vec<HirOp>,
    pub inputs: Vec<ValueId>,
    pub outputs: Vec<ValueId>,
}

impl HirModule {
    pub fn op(&self, id: &str) -> Option<&HirOp> {
        self.ops.iter().find(|o| o.id == id)
    }

    pub fn op_mut(&mut self, id: &str) -> Option<&mut HirOp> {
        self.ops.iter_mut().find(|o| o.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ops
            .iter()
            .enumerate()
            .map(|(i, o)| (o.id.as_str(), i))
            .collect()
    }

    pub fn compute_ops(&self) -> impl Iterator<Item = &HirOp> {
        self.ops.iter().filter(|o| o.is_compute())
    }

    /// Ids of the ops reading `id`, in op-list order, one entry per use.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for op in &self.ops {
            for input in &op.inputs {
                if input == id {
                    out.push(op.id.as_str());
                }
            }
        }
        out
    }

    pub fn shape_of(&self, id: &str) -> Option<&[usize]> {
        self.op(id).and_then(HirOp::shape)
    }

    /// Set of op kinds present, sources included.
    pub fn kind_set(&self) -> BTreeSet<KindTag> {
        self.ops.iter().map(|o| o.kind.tag()).collect()
    }

    /// Total scalar count over all constants.
    pub fn const_elems(&self) -> usize {
        self.ops
            .iter()
            .map(|o| match &o.kind {
                OpKind::Const { data, .. } => data.len(),
                _ => 0,
            })
            .sum()
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

impl fmt::Display for HirModule {
    /// One op per line: `id: kind(attrs) (inputs) -> shape @target`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            let shape = op.shape().map(fmt_shape).unwrap_or_else(|| "?".into());
            writeln!(
                f,
                "{}: {}({}) ({}) -> {} @{}",
                op.id,
                op.kind.tag().snake_name(),
                op.kind.attr_text(),
                op.inputs.join(", "),
                shape,
                op.target
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HirError {
    #[error("op `{op}`: {kind} expects {expected} inputs, found {found}")]
    Arity {
        op: String,
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("op `{op}`: {what}: expected {expected} elements, found {found}")]
    Size {
        op: String,
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("op `{op}`: input `{input}` must be a constant")]
    NotConst { op: String, input: String },
    #[error("op `{op}`: unresolved value `{value}`")]
    Unresolved { op: String, value: String },
    #[error("duplicate producer for value `{0}`")]
    DuplicateId(String),
    #[error("cycle through op `{0}`")]
    Cycle(String),
    #[error("op `{op}`: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("op `{op}`: non-positive output extent ({detail})")]
    NonPositiveExtent { op: String, detail: String },
    #[error("op `{op}`: {message}")]
    Invalid { op: String, message: String },
    #[error("module output `{0}` does not resolve")]
    UnknownOutput(String),
}

/// Incremental module construction, used by converters.
#[derive(Debug, Default)]
pub struct HirBuilder {
    ops: Vec<HirOp>,
    index: HashMap<String, usize>,
}

impl HirBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn add(&mut self, id: impl Into<String>, kind: OpKind, inputs: Vec<ValueId>) -> Result<ValueId, HirError> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(HirError::DuplicateId(id));
        }
        for input in &inputs {
            if !self.index.contains_key(input) {
                return Err(HirError::Unresolved {
                    op: id,
                    value: input.clone(),
                });
            }
        }
        self.index.insert(id.clone(), self.ops.len());
        self.ops.push(HirOp::new(id.clone(), kind, inputs));
        Ok(id)
    }

    pub fn add_const(&mut self, id: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<ValueId, HirError> {
        self.add(id, OpKind::constant(shape, data), Vec::new())
    }

    /// Returns an id derived from `base` that is not yet in use.
    pub fn fresh_id(&self, base: &str) -> String {
        if !self.contains(base) {
            return base.to_owned();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|c| !self.contains(c))
            .unwrap()
    }

    /// Shape of an existing value, inferred on demand.
    pub fn shape_of(&self, id: &str) -> Result<Vec<usize>, HirError> {
        let mut memo = HashMap::new();
        self.shape_rec(id, &mut memo)
    }

    fn shape_rec(&self, id: &str, memo: &mut HashMap<String, Vec<usize>>) -> Result<Vec<usize>, HirError> {
        if let Some(s) = memo.get(id) {
            return Ok(s.clone());
        }
        let op = self
            .index
            .get(id)
            .map(|&i| &self.ops[i])
            .ok_or_else(|| HirError::Unresolved {
                op: id.to_owned(),
                value: id.to_owned(),
            })?;
        let mut input_shapes = Vec::with_capacity(op.inputs.len());
        for input in &op.inputs {
            input_shapes.push(self.shape_rec(input, memo)?);
        }
        let refs: Vec<&[usize]> = input_shapes.iter().map(Vec::as_slice).collect();
        let shape = infer_op_shape(&op.id, &op.kind, &refs)?;
        memo.insert(id.to_owned(), shape.clone());
        Ok(shape)
    }

    pub fn finish(self, name: impl Into<String>, inputs: Vec<ValueId>, outputs: Vec<ValueId>) -> HirModule {
        HirModule {
            name: name.into(),
            ops: self.ops,
            inputs,
            outputs,
        }
    }
}

/// Output shape of a single op given its input shapes.
pub fn infer_op_shape(id: &str, kind: &OpKind, inputs: &[&[usize]]) -> Result<Vec<usize>, HirError> {
    let tag = kind.tag();
    if inputs.len() != tag.arity() {
        return Err(HirError::Arity {
            op: id.to_owned(),
            kind: tag.snake_name(),
            expected: tag.arity(),
            found: inputs.len(),
        });
    }
    let invalid = |message: String| HirError::Invalid {
        op: id.to_owned(),
        message,
    };
    let mismatch = |lhs: &[usize], rhs: &[usize]| HirError::ShapeMismatch {
        op: id.to_owned(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    let elems = |s: &[usize]| s.iter().product::<usize>();

    let shape = match kind {
        OpKind::Input { shape } | OpKind::Const { shape, .. } => shape.clone(),
        OpKind::Dense { units } => {
            let x = inputs[0];
            let (w, b) = (inputs[1], inputs[2]);
            let c = *x.last().ok_or_else(|| invalid("dense input is a scalar".into()))?;
            if w != [*units, c] {
                return Err(mismatch(w, &[*units, c]));
            }
            if elems(b) != *units {
                return Err(mismatch(b, &[*units]));
            }
            let mut out = x.to_vec();
            *out.last_mut().unwrap() = *units;
            out
        }
        OpKind::Conv1dDwShared { kernel_len, stride } => {
            let x = inputs[0];
            if x.len() != 3 {
                return Err(invalid(format!("conv1d_dw_shared expects [N, C, L], got {x:?}")));
            }
            if *stride == 0 || *kernel_len == 0 {
                return Err(invalid("kernel_len and stride must be positive".into()));
            }
            if elems(inputs[1]) != *kernel_len {
                return Err(mismatch(inputs[1], &[*kernel_len]));
            }
            if elems(inputs[2]) != 1 {
                return Err(mismatch(inputs[2], &[1]));
            }
            let len = x[2];
            if len < *kernel_len {
                return Err(HirError::NonPositiveExtent {
                    op: id.to_owned(),
                    detail: format!("input length {len} shorter than kernel {kernel_len}"),
                });
            }
            vec![x[0], x[1], (len - kernel_len) / stride + 1]
        }
        OpKind::Gru { hidden } => {
            let x = inputs[0];
            if x.len() != 3 || x[0] != 1 {
                return Err(invalid(format!("gru expects [1, C, T], got {x:?}")));
            }
            let h3 = 3 * hidden;
            let c = x[1];
            if inputs[1] != [h3, c] {
                return Err(mismatch(inputs[1], &[h3, c]));
            }
            if inputs[2] != [h3, *hidden] {
                return Err(mismatch(inputs[2], &[h3, *hidden]));
            }
            for b in &inputs[3..] {
                if elems(b) != h3 {
                    return Err(mismatch(b, &[h3]));
                }
            }
            vec![1, *hidden, x[2]]
        }
        OpKind::LastTimestep => {
            let x = inputs[0];
            if x.len() != 3 {
                return Err(invalid(format!("last_timestep expects [N, H, T], got {x:?}")));
            }
            vec![x[0], x[1]]
        }
        OpKind::Softmax | OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh => inputs[0].to_vec(),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            if inputs[0] != inputs[1] {
                return Err(mismatch(inputs[0], inputs[1]));
            }
            inputs[0].to_vec()
        }
        OpKind::Reshape { new_shape } => {
            if new_shape.is_empty() || new_shape.contains(&0) {
                return Err(HirError::NonPositiveExtent {
                    op: id.to_owned(),
                    detail: format!("reshape target {new_shape:?}"),
                });
            }
            if elems(new_shape) != elems(inputs[0]) {
                return Err(mismatch(inputs[0], new_shape));
            }
            new_shape.clone()
        }
    };
    if shape.is_empty() || shape.contains(&0) {
        return Err(HirError::NonPositiveExtent {
            op: id.to_owned(),
            detail: format!("shape {shape:?}"),
        });
    }
    Ok(shape)
}

/// Structural validation. Collects every problem instead of stopping at the first.
pub fn validate(m: &HirModule) -> Result<(), Vec<HirError>> {
    let mut errors = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, op) in m.ops.iter().enumerate() {
        if index.insert(op.id.as_str(), i).is_some() {
            errors.push(HirError::DuplicateId(op.id.clone()));
        }
    }
    for op in &m.ops {
        let tag = op.kind.tag();
        if op.inputs.len() != tag.arity() {
            errors.push(HirError::Arity {
                op: op.id.clone(),
                kind: tag.snake_name(),
                expected: tag.arity(),
                found: op.inputs.len(),
            });
        }
        let mut resolved = true;
        for input in &op.inputs {
            if !index.contains_key(input.as_str()) {
                resolved = false;
                errors.push(HirError::Unresolved {
                    op: op.id.clone(),
                    value: input.clone(),
                });
            }
        }
        if let OpKind::Const { shape, data } = &op.kind {
            let want: usize = shape.iter().product();
            if data.len() != want {
                errors.push(HirError::Size {
                    op: op.id.clone(),
                    what: format!("constant of shape {}", fmt_shape(shape)),
                    expected: want,
                    found: data.len(),
                });
            }
        }
        if !resolved || op.inputs.len() != tag.arity() {
            continue;
        }
        let first_param = tag.arity() - tag.param_arity();
        let param_shape = |pos: usize| -> Option<&[usize]> {
            let src = &m.ops[index[op.inputs[pos].as_str()]];
            match &src.kind {
                OpKind::Const { shape, .. } => Some(shape.as_slice()),
                _ => None,
            }
        };
        for pos in first_param..tag.arity() {
            if param_shape(pos).is_none() {
                errors.push(HirError::NotConst {
                    op: op.id.clone(),
                    input: op.inputs[pos].clone(),
                });
            }
        }
        let expect = |pos: usize, what: &str, want: usize| {
            let found: usize = param_shape(pos)?.iter().product();
            (found != want).then(|| HirError::Size {
                op: op.id.clone(),
                what: what.to_owned(),
                expected: want,
                found,
            })
        };
        match &op.kind {
            OpKind::Dense { units } => {
                if let Some(w) = param_shape(1) {
                    if w.len() != 2 || w[0] != *units {
                        errors.push(HirError::Invalid {
                            op: op.id.clone(),
                            message: format!("dense weight must be [{units}, in], got {w:?}"),
                        });
                    }
                }
                errors.extend(expect(2, "dense bias", *units));
            }
            OpKind::Conv1dDwShared { kernel_len, .. } => {
                errors.extend(expect(1, "conv kernel", *kernel_len));
                errors.extend(expect(2, "conv bias", 1));
            }
            OpKind::Gru { hidden } => {
                errors.extend(expect(2, "gru W_h", 3 * hidden * hidden));
                errors.extend(expect(3, "gru b_x", 3 * hidden));
                errors.extend(expect(4, "gru b_h", 3 * hidden));
                if let Some(w) = param_shape(1) {
                    if w.len() != 2 || w[0] != 3 * hidden {
                        errors.push(HirError::Invalid {
                            op: op.id.clone(),
                            message: format!("gru W_x must be [{}, C], got {w:?}", 3 * hidden),
                        });
                    }
                }
            }
            _ => {}
        }
    }
    for v in m.inputs.iter() {
        match index.get(v.as_str()) {
            Some(&i) if m.ops[i].kind.tag() == KindTag::Input => {}
            _ => errors.push(HirError::Invalid {
                op: v.clone(),
                message: "module input must name an Input op".into(),
            }),
        }
    }
    for v in &m.outputs {
        if !index.contains_key(v.as_str()) {
            errors.push(HirError::UnknownOutput(v.clone()));
        }
    }
    if errors.is_empty() {
        if let Err(e) = topo_order_all(m) {
            errors.push(e);
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Topological order over all ops, sources included. Ties broken by id.
fn topo_order_all(m: &HirModule) -> Result<Vec<usize>, HirError> {
    let index = m.index();
    let mut indegree = vec![0usize; m.ops.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); m.ops.len()];
    for (i, op) in m.ops.iter().enumerate() {
        for input in &op.inputs {
            let &p = index.get(input.as_str()).ok_or_else(|| HirError::Unresolved {
                op: op.id.clone(),
                value: input.clone(),
            })?;
            indegree[i] += 1;
            users[p].push(i);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = m
        .ops
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, o)| (o.id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(m.ops.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert((m.ops[u].id.as_str(), u));
            }
        }
    }
    if order.len() != m.ops.len() {
        let stuck = (0..m.ops.len()).find(|i| indegree[*i] > 0).unwrap();
        return Err(HirError::Cycle(m.ops[stuck].id.clone()));
    }
    Ok(order)
}

/// Execution order of the compute ops: producers first, ties broken by id.
pub fn topo_schedule(m: &HirModule) -> Result<Vec<ValueId>, HirError> {
    Ok(topo_order_all(m)?
        .into_iter()
        .filter(|&i| m.ops[i].is_compute())
        .map(|i| m.ops[i].id.clone())
        .collect())
}

/// Annotates every op with its output type.
pub fn infer_shapes(m: &HirModule) -> Result<HirModule, HirError> {
    let order = topo_order_all(m)?;
    let index = m.index();
    let mut shapes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        let op = &m.ops[i];
        let inputs: Vec<&[usize]> = op
            .inputs
            .iter()
            .map(|v| shapes[&index[v.as_str()]].as_slice())
            .collect();
        let shape = infer_op_shape(&op.id, &op.kind, &inputs)?;
        shapes.insert(i, shape);
    }
    let mut out = m.clone();
    for (i, op) in out.ops.iter_mut().enumerate() {
        op.out_type = Some(TensorSpec::new(op.id.clone(), shapes.remove(&i).unwrap()));
    }
    for v in &out.outputs {
        if !index.contains_key(v.as_str()) {
            return Err(HirError::UnknownOutput(v.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn konst(b: &mut HirBuilder, id: &str, shape: Vec<usize>) -> ValueId {
        let n = shape.iter().product();
        b.add_const(id, shape, vec![0.5; n]).unwrap()
    }

    #[test]
    fn conv_shape_rule() {
        let kind = OpKind::Conv1dDwShared { kernel_len: 7, stride: 2 };
        let s = infer_op_shape("c", &kind, &[&[1, 6, 128], &[7], &[1]]).unwrap();
        assert_eq!(s, vec![1, 6, 61]);
        let err = infer_op_shape("c", &kind, &[&[1, 6, 6], &[7], &[1]]).unwrap_err();
        assert!(matches!(err, HirError::NonPositiveExtent { .. }));
    }

    #[test]
    fn two_stages_quarter_the_rate() {
        let kind = OpKind::Conv1dDwShared { kernel_len: 7, stride: 2 };
        // valid padding loses 3 frames per stage: L/2 - 3, then L/4 - 4
        for len in [512usize, 1000, 4096] {
            let a = infer_op_shape("a", &kind, &[&[1, 6, len], &[7], &[1]]).unwrap();
            let b = infer_op_shape("b", &kind, &[&a, &[7], &[1]]).unwrap();
            assert_eq!(a[2], len / 2 - 3);
            assert_eq!(b[2], len / 4 - 4, "{len}");
        }
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![1, 6] }, vec![]).unwrap();
        let y = b.add("y", OpKind::Input { shape: vec![1, 7] }, vec![]).unwrap();
        b.add("s", OpKind::Add, vec![x.clone(), y.clone()]).unwrap();
        let m = b.finish("m", vec![x, y], vec!["s".into()]);
        match infer_shapes(&m).unwrap_err() {
            HirError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "s");
                assert_eq!(lhs, vec![1, 6]);
                assert_eq!(rhs, vec![1, 7]);
            }
            e => panic!("{e:?}"),
        }
    }

    fn diamond() -> HirModule {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![4] }, vec![]).unwrap();
        b.add("a", OpKind::Relu, vec![x.clone()]).unwrap();
        b.add("c", OpKind::Tanh, vec!["a".into()]).unwrap();
        b.add("b", OpKind::Sigmoid, vec!["a".into()]).unwrap();
        b.add("d", OpKind::Add, vec!["b".into(), "c".into()]).unwrap();
        b.finish("diamond", vec![x], vec!["d".into()])
    }

    #[test]
    fn diamond_schedule_breaks_ties_by_id() {
        assert_eq!(topo_schedule(&diamond()).unwrap(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn single_node_schedule() {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![4] }, vec![]).unwrap();
        b.add("only", OpKind::Relu, vec![x.clone()]).unwrap();
        let m = b.finish("m", vec![x], vec!["only".into()]);
        assert_eq!(topo_schedule(&m).unwrap(), vec!["only"]);
    }

    #[test]
    fn gru_with_three_params_is_an_arity_error() {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![1, 2, 5] }, vec![]).unwrap();
        let wx = konst(&mut b, "wx", vec![6, 2]);
        let wh = konst(&mut b, "wh", vec![6, 2]);
        let bx = konst(&mut b, "bx", vec![6]);
        b.add("g", OpKind::Gru { hidden: 2 }, vec![x.clone(), wx, wh, bx]).unwrap();
        let m = b.finish("m", vec![x], vec!["g".into()]);
        let errs = validate(&m).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, HirError::Arity { op, .. } if op == "g")));
    }

    #[test]
    fn dense_weight_wrong_count_is_a_size_error() {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![1, 3] }, vec![]).unwrap();
        let w = b
            .add("w", OpKind::Const { shape: vec![2, 3], data: vec![0.0; 5].into() }, vec![])
            .unwrap();
        let bias = konst(&mut b, "bias", vec![2]);
        b.add("fc", OpKind::Dense { units: 2 }, vec![x.clone(), w, bias]).unwrap();
        let m = b.finish("m", vec![x], vec!["fc".into()]);
        let errs = validate(&m).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, HirError::Size { op, expected: 6, found: 5, .. } if op == "w")));
    }

    #[test]
    fn validate_reports_every_problem() {
        let m = HirModule {
            name: "bad".into(),
            ops: vec![
                HirOp::new("x", OpKind::Input { shape: vec![2] }, vec![]),
                HirOp::new("a", OpKind::Relu, vec!["nope".into()]),
                HirOp::new("b", OpKind::Add, vec!["x".into()]),
            ],
            inputs: vec!["x".into()],
            outputs: vec!["zzz".into()],
        };
        let errs = validate(&m).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn validate_detects_cycles() {
        let m = HirModule {
            name: "cyc".into(),
            ops: vec![
                HirOp::new("x", OpKind::Input { shape: vec![2] }, vec![]),
                HirOp::new("a", OpKind::Add, vec!["x".into(), "b".into()]),
                HirOp::new("b", OpKind::Relu, vec!["a".into()]),
            ],
            inputs: vec!["x".into()],
            outputs: vec!["b".into()],
        };
        let errs = validate(&m).unwrap_err();
        assert!(matches!(errs[0], HirError::Cycle(_)));
        assert!(topo_schedule(&m).is_err());
    }

    #[test]
    fn shape_inference_is_idempotent_and_dump_is_readable() {
        let m = infer_shapes(&diamond()).unwrap();
        let again = infer_shapes(&m).unwrap();
        assert_eq!(m, again);
        let dump = m.to_string();
        assert!(dump.contains("d: add() (b, c) -> [4] @cpu"), "{dump}");
    }

    #[test]
    fn builder_shape_of_is_lazy() {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![1, 3, 20] }, vec![]).unwrap();
        let k = konst(&mut b, "k", vec![7]);
        let bias = konst(&mut b, "kb", vec![1]);
        b.add("c", OpKind::Conv1dDwShared { kernel_len: 7, stride: 2 }, vec![x, k, bias])
            .unwrap();
        assert_eq!(b.shape_of("c").unwrap(), vec![1, 3, 7]);
        assert_eq!(b.fresh_id("c"), "c_1");
    }
}
