//! The convert map: frontend operator name -> conversion function.
//!
//! A converter receives the frontend node and its resolved operands and
//! appends HIR ops through a [`HirBuilder`]. New operators are registered
//! either as compositions of existing HIR ops (through this API) or, for new
//! primitives, by adding an [`OpKind`] together with its interpreter, lowering
//! and shape rules.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::hir::{HirBuilder, HirError, HirModule, OpKind, ValueId};
use crate::model_format::{AttrValue, ModelGraph, OperatorNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvertError {
    #[error("unknown operator `{op_name}` at node `{node}`")]
    UnknownOperator { op_name: String, node: String },
    #[error("operator `{0}` is already registered")]
    DuplicateKey(String),
    #[error("operator name must not be empty")]
    EmptyName,
    #[error("node `{node}`: {message}")]
    BadNode { node: String, message: String },
    #[error("node `{node}`: {source}")]
    Hir { node: String, source: HirError },
}

/// Operands handed to a converter.
pub struct ConvertArgs<'a> {
    pub node: &'a OperatorNode,
    /// Resolved `inputs` followed by resolved `param_refs`.
    pub operands: &'a [ValueId],
}

impl ConvertArgs<'_> {
    pub fn id(&self) -> &str {
        &self.node.id
    }

    pub fn bad(&self, message: impl Into<String>) -> ConvertError {
        ConvertError::BadNode {
            node: self.node.id.clone(),
            message: message.into(),
        }
    }

    pub fn hir(&self, source: HirError) -> ConvertError {
        ConvertError::Hir {
            node: self.node.id.clone(),
            source,
        }
    }

    pub fn expect_operands(&self, n: usize) -> Result<&[ValueId], ConvertError> {
        if self.operands.len() != n {
            return Err(self.bad(format!(
                "`{}` takes {n} operands, got {}",
                self.node.op_name,
                self.operands.len()
            )));
        }
        Ok(self.operands)
    }

    pub fn attr(&self, key: &str) -> Option<&AttrValue> {
        self.node.attrs.get(key)
    }

    pub fn usize_attr(&self, key: &str) -> Result<Option<usize>, ConvertError> {
        match self.attr(key) {
            None => Ok(None),
            Some(v) => match v.as_int() {
                Some(i) if i > 0 => Ok(Some(i as usize)),
                _ => Err(self.bad(format!("attribute `{key}` must be a positive integer"))),
            },
        }
    }
}

pub type ConverterFn =
    Arc<dyn Fn(&mut HirBuilder, &ConvertArgs<'_>) -> Result<ValueId, ConvertError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ConvertMap {
    entries: BTreeMap<String, ConverterFn>,
}

impl fmt::Debug for ConvertMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.entries.keys()).finish()
    }
}

impl ConvertMap {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn lookup(&self, name: &str) -> Option<&ConverterFn> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Returns a new map with `name -> converter` added.
    pub fn register<F>(&self, name: &str, converter: F, override_existing: bool) -> Result<ConvertMap, ConvertError>
    where
        F: Fn(&mut HirBuilder, &ConvertArgs<'_>) -> Result<ValueId, ConvertError> + Send + Sync + 'static,
    {
        register_operator(self, name, Arc::new(converter), override_existing)
    }
}

pub fn register_operator(
    map: &ConvertMap,
    name: &str,
    converter: ConverterFn,
    override_existing: bool,
) -> Result<ConvertMap, ConvertError> {
    if name.is_empty() {
        return Err(ConvertError::EmptyName);
    }
    if map.contains(name) && !override_existing {
        return Err(ConvertError::DuplicateKey(name.to_owned()));
    }
    let mut next = map.clone();
    next.entries.insert(name.to_owned(), converter);
    Ok(next)
}

fn unary(kind: OpKind) -> ConverterFn {
    Arc::new(move |b: &mut HirBuilder, a: &ConvertArgs<'_>| {
        let ops = a.expect_operands(1)?;
        b.add(a.id(), kind.clone(), ops.to_vec()).map_err(|e| a.hir(e))
    })
}

fn binary(kind: OpKind) -> ConverterFn {
    Arc::new(move |b: &mut HirBuilder, a: &ConvertArgs<'_>| {
        let ops = a.expect_operands(2)?;
        b.add(a.id(), kind.clone(), ops.to_vec()).map_err(|e| a.hir(e))
    })
}

fn convert_identity(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(1)?;
    let shape = b.shape_of(&ops[0]).map_err(|e| a.hir(e))?;
    b.add(a.id(), OpKind::Reshape { new_shape: shape }, ops.to_vec())
        .map_err(|e| a.hir(e))
}

fn convert_dense(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(3)?;
    let w = b.shape_of(&ops[1]).map_err(|e| a.hir(e))?;
    let units = match a.usize_attr("units")? {
        Some(u) => u,
        None => w[0],
    };
    b.add(a.id(), OpKind::Dense { units }, ops.to_vec())
        .map_err(|e| a.hir(e))
}

fn convert_conv(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(3)?;
    let k = b.shape_of(&ops[1]).map_err(|e| a.hir(e))?;
    let kernel_len = a.usize_attr("kernel_len")?.unwrap_or_else(|| k.iter().product());
    let stride = a.usize_attr("stride")?.unwrap_or(1);
    b.add(a.id(), OpKind::Conv1dDwShared { kernel_len, stride }, ops.to_vec())
        .map_err(|e| a.hir(e))
}

fn convert_gru(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(5)?;
    let wh = b.shape_of(&ops[2]).map_err(|e| a.hir(e))?;
    let hidden = match a.usize_attr("hidden")? {
        Some(h) => h,
        None => *wh.last().unwrap(),
    };
    b.add(a.id(), OpKind::Gru { hidden }, ops.to_vec())
        .map_err(|e| a.hir(e))
}

fn convert_reshape(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(1)?;
    let raw = a
        .attr("shape")
        .and_then(AttrValue::as_ints)
        .ok_or_else(|| a.bad("reshape needs an integer-list attribute `shape`"))?;
    if raw.iter().any(|&d| d <= 0) {
        return Err(a.bad(format!("reshape target {raw:?} has non-positive extents")));
    }
    let new_shape = raw.iter().map(|&d| d as usize).collect();
    b.add(a.id(), OpKind::Reshape { new_shape }, ops.to_vec())
        .map_err(|e| a.hir(e))
}

/// The built-in converter set.
pub fn default_convert_map() -> ConvertMap {
    let mut entries: BTreeMap<String, ConverterFn> = BTreeMap::new();
    let mut put = |name: &str, f: ConverterFn| {
        entries.insert(name.to_owned(), f);
    };
    put("identity", Arc::new(convert_identity));
    put("dense", Arc::new(convert_dense));
    put("conv1d_dw_shared", Arc::new(convert_conv));
    put("gru", Arc::new(convert_gru));
    put("reshape", Arc::new(convert_reshape));
    put("softmax", unary(OpKind::Softmax));
    put("relu", unary(OpKind::Relu));
    put("sigmoid", unary(OpKind::Sigmoid));
    put("tanh", unary(OpKind::Tanh));
    put("last_timestep", unary(OpKind::LastTimestep));
    put("add", binary(OpKind::Add));
    put("sub", binary(OpKind::Sub));
    put("mul", binary(OpKind::Mul));
    ConvertMap { entries }
}

/// `clip(0.2 x + 0.5, 0, 1)` built from existing ops only:
/// `relu(y) - relu(y - 1)` with `y = 0.2 x + 0.5`.
pub fn hard_sigmoid_converter(b: &mut HirBuilder, a: &ConvertArgs<'_>) -> Result<ValueId, ConvertError> {
    let ops = a.expect_operands(1)?;
    let x = ops[0].clone();
    let shape = b.shape_of(&x).map_err(|e| a.hir(e))?;
    let n: usize = shape.iter().product();
    let id = a.id();
    let konst = |b: &mut HirBuilder, suffix: &str, v: f32| {
        let cid = b.fresh_id(&format!("{id}.{suffix}"));
        b.add_const(cid, shape.clone(), vec![v; n]).map_err(|e| a.hir(e))
    };
    let slope = konst(b, "slope", 0.2)?;
    let offset = konst(b, "offset", 0.5)?;
    let one = konst(b, "one", 1.0)?;
    let op = |b: &mut HirBuilder, suffix: &str, kind: OpKind, inputs: Vec<ValueId>| {
        let oid = b.fresh_id(&format!("{id}.{suffix}"));
        b.add(oid, kind, inputs).map_err(|e| a.hir(e))
    };
    let scaled = op(b, "scaled", OpKind::Mul, vec![x, slope])?;
    let y = op(b, "shifted", OpKind::Add, vec![scaled, offset])?;
    let lower = op(b, "lower", OpKind::Relu, vec![y.clone()])?;
    let over = op(b, "over", OpKind::Sub, vec![y, one])?;
    let upper = op(b, "upper", OpKind::Relu, vec![over])?;
    b.add(id, OpKind::Sub, vec![lower, upper]).map_err(|e| a.hir(e))
}

/// Node indices in dependency order, ties broken by node id.
fn node_order(graph: &ModelGraph) -> Vec<usize> {
    let index: HashMap<&str, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; graph.nodes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for (i, n) in graph.nodes.iter().enumerate() {
        for input in &n.inputs {
            if let Some(&p) = index.get(input.as_str()) {
                indegree[i] += 1;
                users[p].push(i);
            }
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some((_, i)) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert((graph.nodes[u].id.as_str(), u));
            }
        }
    }
    order
}

/// Converts a validated frontend graph into an HIR module (shapes not yet annotated).
pub fn convert(graph: &ModelGraph, map: &ConvertMap) -> Result<HirModule, ConvertError> {
    let mut b = HirBuilder::new();
    let mut alias: HashMap<String, ValueId> = HashMap::new();
    let top = |e: HirError| ConvertError::Hir {
        node: graph.name.clone(),
        source: e,
    };
    for spec in &graph.inputs {
        let id = b
            .add(spec.name.clone(), OpKind::Input { shape: spec.shape.clone() }, vec![])
            .map_err(top)?;
        alias.insert(spec.name.clone(), id);
    }
    for (name, p) in &graph.params {
        let id = b.add_const(name.clone(), p.shape.clone(), p.data.clone()).map_err(top)?;
        alias.insert(name.clone(), id);
    }
    // reserve node ids so composite converters do not claim them
    let reserved: BTreeSet<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();

    for i in node_order(graph) {
        let node = &graph.nodes[i];
        let converter = map.lookup(&node.op_name).ok_or_else(|| ConvertError::UnknownOperator {
            op_name: node.op_name.clone(),
            node: node.id.clone(),
        })?;
        let operands: Vec<ValueId> = node
            .inputs
            .iter()
            .chain(&node.param_refs)
            .map(|r| {
                alias.get(r).cloned().ok_or_else(|| ConvertError::BadNode {
                    node: node.id.clone(),
                    message: format!("unresolved reference `{r}`"),
                })
            })
            .collect::<Result<_, _>>()?;
        let before: BTreeSet<String> = reserved
            .iter()
            .filter(|r| **r != node.id && b.contains(r))
            .map(|r| r.to_string())
            .collect();
        let out = converter(&mut b, &ConvertArgs { node, operands: &operands })?;
        if let Some(clash) = reserved
            .iter()
            .find(|r| **r != node.id && b.contains(r) && !before.contains(**r))
        {
            return Err(ConvertError::BadNode {
                node: node.id.clone(),
                message: format!("converter created op `{clash}`, which belongs to another node"),
            });
        }
        alias.insert(node.id.clone(), out);
    }

    let inputs = graph.inputs.iter().map(|s| alias[&s.name].clone()).collect();
    let outputs = graph.outputs.iter().map(|o| alias[o].clone()).collect();
    Ok(b.finish(graph.name.clone(), inputs, outputs))
}
