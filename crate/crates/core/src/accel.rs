//! Accelerator registration and pattern-based partitioning.
//!
//! An accelerator declares patterns (chains of op kinds), graph passes run on
//! its matched regions, TIR passes run on the region's loop nests, and a
//! naming scheme for the C entry points it provides.
//!
//! Every matched region becomes one call with the signature
//!
//! ```text
//! int32_t <accel>_<pattern>(const float* operand..., float* out, const int32_t* dims)
//! ```
//!
//! Operands are the head op's inputs followed by the remaining inputs of each
//! later op in the chain. `dims` concatenates, per op in chain order:
//!
//! | kind               | dims                                           |
//! |--------------------|------------------------------------------------|
//! | dense              | `in, units, rows`                              |
//! | conv1d_dw_shared   | `channels, in_len, kernel_len, stride, out_len`|
//! | gru                | `in_channels, steps, hidden`                   |
//! | softmax            | `rows, cols`                                   |
//! | last_timestep      | `rows, steps`                                  |
//! | all other kinds    | `elems`                                        |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::hir::{self, HirError, HirModule, HirOp, KindTag, OpKind, Target, ValueId};
use crate::tir::TirPass;

pub type Guard = Arc<dyn Fn(&HirOp, &HirModule) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct Pattern {
    pub name: String,
    pub kinds: Vec<KindTag>,
    pub priority: i32,
    /// Extra condition on the head op.
    pub guard: Option<Guard>,
}

impl Pattern {
    pub fn new(name: &str, kinds: &[KindTag]) -> Self {
        Pattern {
            name: name.to_owned(),
            kinds: kinds.to_vec(),
            priority: 0,
            guard: None,
        }
    }

    pub fn with_priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_guard<F>(mut self, guard: F) -> Self
    where
        F: Fn(&HirOp, &HirModule) -> bool + Send + Sync + 'static,
    {
        self.guard = Some(Arc::new(guard));
        self
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pattern")
            .field("name", &self.name)
            .field("kinds", &self.kinds)
            .field("priority", &self.priority)
            .field("guard", &self.guard.is_some())
            .finish()
    }
}

pub type GraphPassFn = Arc<dyn Fn(HirModule, &Region) -> HirModule + Send + Sync>;

#[derive(Clone)]
pub struct GraphPass {
    pub name: String,
    pub apply: GraphPassFn,
}

impl GraphPass {
    pub fn new<F>(name: &str, apply: F) -> Self
    where
        F: Fn(HirModule, &Region) -> HirModule + Send + Sync + 'static,
    {
        GraphPass {
            name: name.to_owned(),
            apply: Arc::new(apply),
        }
    }

    pub fn identity() -> Self {
        GraphPass::new("identity", |m, _| m)
    }
}

impl fmt::Debug for GraphPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GraphPass({})", self.name)
    }
}

pub type SymbolScheme = Arc<dyn Fn(&str, &str) -> String + Send + Sync>;

#[derive(Clone)]
pub struct AcceleratorDesc {
    pub name: String,
    pub patterns: Vec<Pattern>,
    pub graph_passes: Vec<GraphPass>,
    pub tir_passes: Vec<TirPass>,
    pub symbol_scheme: SymbolScheme,
}

impl AcceleratorDesc {
    pub fn new(name: &str) -> Self {
        AcceleratorDesc {
            name: name.to_owned(),
            patterns: Vec::new(),
            graph_passes: Vec::new(),
            tir_passes: Vec::new(),
            symbol_scheme: Arc::new(|accel, pattern| format!("{accel}_{pattern}")),
        }
    }

    pub fn with_pattern(mut self, pattern: Pattern) -> Self {
        self.patterns.push(pattern);
        self
    }

    pub fn with_graph_pass(mut self, pass: GraphPass) -> Self {
        self.graph_passes.push(pass);
        self
    }

    pub fn with_tir_pass(mut self, pass: TirPass) -> Self {
        self.tir_passes.push(pass);
        self
    }

    pub fn pattern(&self, name: &str) -> Option<&Pattern> {
        self.patterns.iter().find(|p| p.name == name)
    }

    /// C symbol for a pattern of this accelerator.
    pub fn symbol(&self, pattern: &str) -> String {
        (self.symbol_scheme)(&self.name, pattern)
    }
}

impl fmt::Debug for AcceleratorDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AcceleratorDesc")
            .field("name", &self.name)
            .field("patterns", &self.patterns)
            .field("graph_passes", &self.graph_passes)
            .field("tir_passes", &self.tir_passes)
            .finish()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccelError {
    #[error("accelerator `{0}` is already registered")]
    Duplicate(String),
    #[error("`{0}` is not a valid C identifier")]
    BadName(String),
    #[error("accelerator `{accel}`: duplicate pattern `{pattern}`")]
    DuplicatePattern { accel: String, pattern: String },
    #[error("accelerator `{accel}`, pattern `{pattern}`: {message}")]
    BadPattern {
        accel: String,
        pattern: String,
        message: String,
    },
}

pub fn is_c_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Registered accelerators, in registration order.
#[derive(Clone, Debug, Default)]
pub struct AccelRegistry {
    accels: Vec<AcceleratorDesc>,
}

impl AccelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&AcceleratorDesc> {
        self.accels.iter().find(|a| a.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AcceleratorDesc> {
        self.accels.iter()
    }

    pub fn len(&self) -> usize {
        self.accels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accels.is_empty()
    }

    pub fn register(mut self, desc: AcceleratorDesc) -> Result<Self, AccelError> {
        register_accelerator_in(&mut self, desc)?;
        Ok(self)
    }
}

pub fn register_accelerator(registry: &AccelRegistry, desc: AcceleratorDesc) -> Result<AccelRegistry, AccelError> {
    registry.clone().register(desc)
}

fn register_accelerator_in(registry: &mut AccelRegistry, desc: AcceleratorDesc) -> Result<(), AccelError> {
    if !is_c_identifier(&desc.name) {
        return Err(AccelError::BadName(desc.name));
    }
    if registry.get(&desc.name).is_some() {
        return Err(AccelError::Duplicate(desc.name));
    }
    let mut seen = BTreeSet::new();
    for p in &desc.patterns {
        if !seen.insert(p.name.as_str()) {
            return Err(AccelError::DuplicatePattern {
                accel: desc.name.clone(),
                pattern: p.name.clone(),
            });
        }
        let bad = |message: &str| AccelError::BadPattern {
            accel: desc.name.clone(),
            pattern: p.name.clone(),
            message: message.to_owned(),
        };
        if !is_c_identifier(&desc.symbol(&p.name)) {
            return Err(AccelError::BadName(desc.symbol(&p.name)));
        }
        if p.kinds.is_empty() {
            return Err(bad("empty kind chain"));
        }
        if p.kinds.iter().any(|k| k.is_source()) {
            return Err(bad("patterns may only match compute ops"));
        }
    }
    registry.accels.push(desc);
    Ok(())
}

/// Built-in example accelerator: offloads dense layers and the shared
/// depthwise convolution.
pub fn mac_engine() -> AcceleratorDesc {
    AcceleratorDesc::new("mac_engine")
        .with_pattern(Pattern::new("dense", &[KindTag::Dense]))
        .with_pattern(Pattern::new("conv1d", &[KindTag::Conv1dDwShared]))
        .with_graph_pass(GraphPass::identity())
        .with_tir_pass(TirPass::identity())
}

pub fn builtin_accelerator(name: &str) -> Option<AcceleratorDesc> {
    match name {
        "mac_engine" => Some(mac_engine()),
        _ => None,
    }
}

pub const BUILTIN_ACCELERATORS: &[&str] = &["mac_engine"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Region {
    pub accel: String,
    pub pattern: String,
    pub ops: Vec<ValueId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PartitionReport {
    pub assignments: BTreeMap<ValueId, Target>,
    /// Op count per target: `cpu` plus one entry per accelerator with matches.
    pub counts: BTreeMap<String, usize>,
    pub regions: Vec<Region>,
}

impl PartitionReport {
    pub fn cpu_count(&self) -> usize {
        self.counts.get("cpu").copied().unwrap_or(0)
    }

    pub fn accel_count(&self) -> usize {
        self.assignments.values().filter(|t| matches!(t, Target::Accel(_))).count()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let assignments: BTreeMap<&str, String> = self
            .assignments
            .iter()
            .map(|(k, v)| (k.as_str(), v.to_string()))
            .collect();
        serde_json::json!({
            "cpu": self.cpu_count(),
            "accel": self.accel_count(),
            "counts": self.counts,
            "assignments": assignments,
            "regions": self.regions,
        })
    }
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cpu: {}, accel: {}", self.cpu_count(), self.accel_count())?;
        for r in &self.regions {
            writeln!(f, "  region {}/{}: {}", r.accel, r.pattern, r.ops.join(" -> "))?;
        }
        Ok(())
    }
}

/// Tries to match `pattern` as a chain starting at `head`.
fn match_chain(m: &HirModule, head: &HirOp, pattern: &Pattern, taken: &BTreeSet<&str>) -> Option<Vec<ValueId>> {
    if head.kind.tag() != pattern.kinds[0] {
        return None;
    }
    if let Some(guard) = &pattern.guard {
        if !guard(head, m) {
            return None;
        }
    }
    let mut chain = vec![head.id.clone()];
    for &kind in &pattern.kinds[1..] {
        let prev = chain.last().unwrap();
        if m.outputs.contains(prev) {
            return None;
        }
        let users = m.consumers(prev);
        if users.len() != 1 {
            return None;
        }
        let next = m.op(users[0])?;
        if next.kind.tag() != kind || taken.contains(next.id.as_str()) || chain.contains(&next.id) {
            return None;
        }
        chain.push(next.id.clone());
    }
    Some(chain)
}

/// Greedily assigns compute ops to accelerator regions.
///
/// Ops are visited in schedule order; at each unassigned op the candidate
/// patterns are tried by descending priority, then accelerator registration
/// order, then pattern declaration order. Matched ops are annotated only; the
/// accelerator's graph passes then run over its own regions.
pub fn partition(m: &HirModule, registry: &AccelRegistry) -> Result<(HirModule, PartitionReport), HirError> {
    let schedule = hir::topo_schedule(m)?;
    let mut candidates: Vec<(i32, usize, usize)> = Vec::new();
    for (ai, a) in registry.accels.iter().enumerate() {
        for (pi, p) in a.patterns.iter().enumerate() {
            candidates.push((p.priority, ai, pi));
        }
    }
    candidates.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut taken: BTreeSet<&str> = BTreeSet::new();
    let mut regions: Vec<Region> = Vec::new();
    for id in &schedule {
        if taken.contains(id.as_str()) {
            continue;
        }
        let op = m.op(id).expect("scheduled op exists");
        for &(_, ai, pi) in &candidates {
            let accel = &registry.accels[ai];
            let pattern = &accel.patterns[pi];
            if let Some(chain) = match_chain(m, op, pattern, &taken) {
                for c in &chain {
                    taken.insert(m.op(c).unwrap().id.as_str());
                }
                regions.push(Region {
                    accel: accel.name.clone(),
                    pattern: pattern.name.clone(),
                    ops: chain,
                });
                break;
            }
        }
    }

    let mut out = m.clone();
    for r in &regions {
        for id in &r.ops {
            out.op_mut(id).unwrap().target = Target::Accel(r.accel.clone());
        }
    }
    for accel in &registry.accels {
        for r in regions.iter().filter(|r| r.accel == accel.name) {
            for pass in &accel.graph_passes {
                out = (pass.apply)(out, r);
            }
        }
    }

    let mut report = PartitionReport {
        regions,
        ..Default::default()
    };
    report.counts.insert("cpu".into(), 0);
    for op in out.compute_ops() {
        report.assignments.insert(op.id.clone(), op.target.clone());
        let key = match &op.target {
            Target::Cpu => "cpu".to_owned(),
            Target::Accel(name) => name.clone(),
        };
        *report.counts.entry(key).or_default() += 1;
    }
    Ok((out, report))
}

/// Pointer operands of a region call, in signature order.
pub fn region_operands(m: &HirModule, region: &Region) -> Vec<ValueId> {
    let mut operands = Vec::new();
    for (i, id) in region.ops.iter().enumerate() {
        let op = m.op(id).expect("region op exists");
        if i == 0 {
            operands.extend(op.inputs.iter().cloned());
        } else {
            let prev = &region.ops[i - 1];
            let mut skipped = false;
            for input in &op.inputs {
                if !skipped && input == prev {
                    skipped = true;
                } else {
                    operands.push(input.clone());
                }
            }
        }
    }
    operands
}

fn operand_count(kinds: &[KindTag]) -> usize {
    kinds
        .iter()
        .enumerate()
        .map(|(i, k)| if i == 0 { k.arity() } else { k.arity() - 1 })
        .sum()
}

/// Dims words for one op; see the module docs for the layout.
pub fn op_dims(m: &HirModule, op: &HirOp) -> Vec<i32> {
    let shape = |v: &str| m.shape_of(v).expect("shape-inferred module").to_vec();
    let out = shape(&op.id);
    let elems = |s: &[usize]| s.iter().product::<usize>();
    let dims: Vec<usize> = match &op.kind {
        OpKind::Dense { units } => {
            let x = shape(&op.inputs[0]);
            let cols = *x.last().unwrap();
            vec![cols, *units, elems(&x) / cols]
        }
        OpKind::Conv1dDwShared { kernel_len, stride } => {
            let x = shape(&op.inputs[0]);
            vec![x[0] * x[1], x[2], *kernel_len, *stride, out[2]]
        }
        OpKind::Gru { hidden } => {
            let x = shape(&op.inputs[0]);
            vec![x[1], x[2], *hidden]
        }
        OpKind::Softmax => {
            let cols = *out.last().unwrap();
            vec![elems(&out) / cols, cols]
        }
        OpKind::LastTimestep => {
            let x = shape(&op.inputs[0]);
            vec![x[0] * x[1], x[2]]
        }
        _ => vec![elems(&out)],
    };
    dims.into_iter().map(|d| d as i32).collect()
}

pub fn region_dims(m: &HirModule, region: &Region) -> Vec<i32> {
    region
        .ops
        .iter()
        .flat_map(|id| op_dims(m, m.op(id).expect("region op exists")))
        .collect()
}

/// C prototype for a pattern's entry point (parameter names omitted).
pub fn extern_signature(desc: &AcceleratorDesc, pattern: &Pattern) -> String {
    let mut args = vec!["const float*"; operand_count(&pattern.kinds)];
    args.push("float*");
    args.push("const int32_t*");
    format!("int32_t {}({})", desc.symbol(&pattern.name), args.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hir::{infer_shapes, HirBuilder};

    fn mlp() -> HirModule {
        let mut b = HirBuilder::new();
        let x = b.add("x", OpKind::Input { shape: vec![1, 4] }, vec![]).unwrap();
        let w1 = b.add_const("w1", vec![3, 4], vec![0.1; 12]).unwrap();
        let b1 = b.add_const("b1", vec![3], vec![0.0; 3]).unwrap();
        let w2 = b.add_const("w2", vec![2, 3], vec![0.1; 6]).unwrap();
        let b2 = b.add_const("b2", vec![2], vec![0.0; 2]).unwrap();
        b.add("fc1", OpKind::Dense { units: 3 }, vec![x.clone(), w1, b1]).unwrap();
        b.add("act", OpKind::Relu, vec!["fc1".into()]).unwrap();
        b.add("fc2", OpKind::Dense { units: 2 }, vec!["act".into(), w2, b2]).unwrap();
        b.add("sm", OpKind::Softmax, vec!["fc2".into()]).unwrap();
        infer_shapes(&b.finish("mlp", vec![x], vec!["sm".into()])).unwrap()
    }

    #[test]
    fn registration_rules() {
        let r = AccelRegistry::new().register(mac_engine()).unwrap();
        assert_eq!(r.register(mac_engine()).unwrap_err(), AccelError::Duplicate("mac_engine".into()));
        let r = AccelRegistry::new().register(AcceleratorDesc::new("empty")).unwrap();
        let (out, report) = partition(&mlp(), &r).unwrap();
        assert_eq!(out, mlp());
        assert_eq!(report.accel_count(), 0);
        let dup = AcceleratorDesc::new("a")
            .with_pattern(Pattern::new("p", &[KindTag::Relu]))
            .with_pattern(Pattern::new("p", &[KindTag::Tanh]));
        assert!(matches!(
            AccelRegistry::new().register(dup),
            Err(AccelError::DuplicatePattern { .. })
        ));
        assert!(matches!(
            AccelRegistry::new().register(AcceleratorDesc::new("9bad")),
            Err(AccelError::BadName(_))
        ));
    }

    #[test]
    fn chain_requires_single_consumer() {
        let acc = AcceleratorDesc::new("npu").with_pattern(Pattern::new("dr", &[KindTag::Dense, KindTag::Relu]));
        let r = AccelRegistry::new().register(acc).unwrap();
        let (out, report) = partition(&mlp(), &r).unwrap();
        assert_eq!(report.regions.len(), 1);
        assert_eq!(report.regions[0].ops, vec!["fc1", "act"]);
        assert_eq!(out.op("act").unwrap().target, Target::Accel("npu".into()));
        assert_eq!(out.op("fc2").unwrap().target, Target::Cpu);
        assert_eq!(report.to_string().lines().next().unwrap(), "cpu: 2, accel: 2");
    }

    #[test]
    fn priority_then_registration_order() {
        let low = AcceleratorDesc::new("low").with_pattern(Pattern::new("d", &[KindTag::Dense]));
        let high = AcceleratorDesc::new("high").with_pattern(Pattern::new("d", &[KindTag::Dense]).with_priority(5));
        let r = AccelRegistry::new().register(low.clone()).unwrap().register(high).unwrap();
        let (_, report) = partition(&mlp(), &r).unwrap();
        assert!(report.regions.iter().all(|g| g.accel == "high"));

        let other = AcceleratorDesc::new("other").with_pattern(Pattern::new("d", &[KindTag::Dense]));
        let r = AccelRegistry::new().register(low).unwrap().register(other).unwrap();
        let (_, report) = partition(&mlp(), &r).unwrap();
        assert!(report.regions.iter().all(|g| g.accel == "low"));
    }

    #[test]
    fn guard_filters_matches() {
        let acc = AcceleratorDesc::new("g").with_pattern(
            Pattern::new("wide", &[KindTag::Dense]).with_guard(|op, _| matches!(op.kind, OpKind::Dense { units } if units > 2)),
        );
        let r = AccelRegistry::new().register(acc).unwrap();
        let (_, report) = partition(&mlp(), &r).unwrap();
        assert_eq!(report.regions.len(), 1);
        assert_eq!(report.regions[0].ops, vec!["fc1"]);
    }

    #[test]
    fn signatures_follow_the_naming_scheme() {
        let mac = mac_engine();
        assert_eq!(
            extern_signature(&mac, mac.pattern("dense").unwrap()),
            "int32_t mac_engine_dense(const float*, const float*, const float*, float*, const int32_t*)"
        );
        assert_eq!(mac.symbol("conv1d"), "mac_engine_conv1d");
        let chain = Pattern::new("dense_softmax", &[KindTag::Dense, KindTag::Softmax]);
        assert_eq!(
            extern_signature(&mac, &chain),
            "int32_t mac_engine_dense_softmax(const float*, const float*, const float*, float*, const int32_t*)"
        );
    }

    #[test]
    fn same_symbol_different_dims_per_instance() {
        let r = AccelRegistry::new().register(mac_engine()).unwrap();
        let (out, report) = partition(&mlp(), &r).unwrap();
        assert_eq!(report.regions.len(), 2);
        let dims: Vec<Vec<i32>> = report.regions.iter().map(|g| region_dims(&out, g)).collect();
        assert_eq!(dims, vec![vec![4, 3, 1], vec![3, 2, 1]]);
        assert_eq!(region_operands(&out, &report.regions[1]), vec!["act", "w2", "b2"]);
    }

    #[test]
    fn graph_passes_see_only_their_regions() {
        use std::sync::Mutex;
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let acc = mac_engine().with_graph_pass(GraphPass::new("log", move |m, r| {
            log.lock().unwrap().push(r.ops.clone());
            m
        }));
        let r = AccelRegistry::new().register(acc).unwrap();
        partition(&mlp(), &r).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![vec!["fc1".to_string()], vec!["fc2".to_string()]]);
    }
}
