//! Model interchange format and the I/O sample manifest.
//!
//! A model is a single JSON document. Parameter tensors are carried inline as
//! base64 encoded little-endian binary32. Nodes may appear in any order; the
//! parser checks that the graph is acyclic and that every reference resolves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", semantic_message(.node, .field, .message))]
    Semantic {
        node: Option<String>,
        field: String,
        message: String,
    },
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
}

fn semantic_message(node: &Option<String>, field: &str, message: &str) -> String {
    match node {
        Some(n) => format!("node `{n}`, field `{field}`: {message}"),
        None => format!("field `{field}`: {message}"),
    }
}

impl FormatError {
    fn semantic(node: Option<&str>, field: &str, message: impl Into<String>) -> Self {
        FormatError::Semantic {
            node: node.map(str::to_owned),
            field: field.to_owned(),
            message: message.into(),
        }
    }

    fn syntax(err: serde_json::Error) -> Self {
        FormatError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    #[serde(default)]
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorSpec {
            name: name.into(),
            dtype: DType::F32,
            shape,
        }
    }

    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Attribute value on a frontend operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    Ints(Vec<i64>),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            AttrValue::Ints(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub op_name: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, AttrValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub param_refs: Vec<String>,
}

impl OperatorNode {
    pub fn new(id: impl Into<String>, op_name: impl Into<String>, inputs: &[&str]) -> Self {
        OperatorNode {
            id: id.into(),
            op_name: op_name.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            attrs: BTreeMap::new(),
            param_refs: Vec::new(),
        }
    }

    pub fn with_params(mut self, params: &[&str]) -> Self {
        self.param_refs = params.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_attr(mut self, key: &str, value: AttrValue) -> Self {
        self.attrs.insert(key.to_owned(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<String>,
    pub nodes: Vec<OperatorNode>,
    pub params: BTreeMap<String, Param>,
}

impl ModelGraph {
    /// Total number of parameter scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Param::elems).sum()
    }

    pub fn node(&self, id: &str) -> Option<&OperatorNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.name.is_empty() {
            return Err(FormatError::semantic(None, "name", "model name is empty"));
        }
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for spec in &self.inputs {
            check_shape(None, "inputs", &spec.name, &spec.shape)?;
            if !names.insert(&spec.name) {
                return Err(FormatError::semantic(
                    None,
                    "inputs",
                    format!("duplicate name `{}`", spec.name),
                ));
            }
        }
        for (name, param) in &self.params {
            check_shape(None, "params", name, &param.shape)?;
            if param.data.len() != param.elems() {
                return Err(FormatError::semantic(
                    None,
                    "params",
                    format!(
                        "`{name}` has {} values but shape {:?} needs {}",
                        param.data.len(),
                        param.shape,
                        param.elems()
                    ),
                ));
            }
            if !names.insert(name) {
                return Err(FormatError::semantic(
                    None,
                    "params",
                    format!("duplicate name `{name}`"),
                ));
            }
        }
        for node in &self.nodes {
            if node.id.is_empty() {
                return Err(FormatError::semantic(None, "id", "empty node id"));
            }
            if node.op_name.is_empty() {
                return Err(FormatError::semantic(Some(&node.id), "op_name", "empty"));
            }
            if !names.insert(&node.id) {
                return Err(FormatError::semantic(
                    Some(&node.id),
                    "id",
                    format!("duplicate id `{}`", node.id),
                ));
            }
        }

        let node_ids: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut used_params: BTreeSet<&str> = BTreeSet::new();
        for node in &self.nodes {
            for input in &node.inputs {
                if self.params.contains_key(input) {
                    used_params.insert(input);
                } else if !names.contains(input.as_str()) {
                    return Err(FormatError::semantic(
                        Some(&node.id),
                        "inputs",
                        format!("unresolved reference `{input}`"),
                    ));
                }
            }
            for p in &node.param_refs {
                if !self.params.contains_key(p) {
                    return Err(FormatError::semantic(
                        Some(&node.id),
                        "param_refs",
                        format!("unresolved parameter `{p}`"),
                    ));
                }
                used_params.insert(p);
            }
        }
        if let Some(unused) = self.params.keys().find(|k| !used_params.contains(k.as_str())) {
            return Err(FormatError::semantic(
                None,
                "params",
                format!("parameter `{unused}` is not referenced by any node"),
            ));
        }
        for out in &self.outputs {
            if !names.contains(out.as_str()) {
                return Err(FormatError::semantic(
                    None,
                    "outputs",
                    format!("unresolved reference `{out}`"),
                ));
            }
        }
        if let Some(id) = find_cycle(&self.nodes, &node_ids) {
            return Err(FormatError::semantic(
                Some(id),
                "inputs",
                "graph contains a cycle through this node",
            ));
        }
        Ok(())
    }
}

fn check_shape(node: Option<&str>, field: &str, name: &str, shape: &[usize]) -> Result<(), FormatError> {
    if name.is_empty() {
        return Err(FormatError::semantic(node, field, "empty tensor name"));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(FormatError::semantic(
            node,
            field,
            format!("`{name}` has invalid shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Returns the id of a node on a cycle, if any.
fn find_cycle<'a>(nodes: &'a [OperatorNode], index: &HashMap<&str, usize>) -> Option<&'a str> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut marks = vec![Mark::White; nodes.len()];
    for start in 0..nodes.len() {
        if marks[start] != Mark::White {
            continue;
        }
        // iterative DFS: (node, next input position)
        let mut stack = vec![(start, 0usize)];
        marks[start] = Mark::Grey;
        while let Some(&mut (n, ref mut pos)) = stack.last_mut() {
            let inputs = &nodes[n].inputs;
            if *pos < inputs.len() {
                let next = index.get(inputs[*pos].as_str()).copied();
                *pos += 1;
                if let Some(m) = next {
                    match marks[m] {
                        Mark::Grey => return Some(&nodes[m].id),
                        Mark::White => {
                            marks[m] = Mark::Grey;
                            stack.push((m, 0));
                        }
                        Mark::Black => {}
                    }
                }
            } else {
                marks[n] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    #[serde(default)]
    dtype: DType,
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    inputs: Vec<TensorSpec>,
    outputs: Vec<String>,
    nodes: Vec<OperatorNode>,
    #[serde(default)]
    params: BTreeMap<String, RawParam>,
}

/// Parses and validates a model document.
pub fn parse_model(bytes: &[u8]) -> Result<ModelGraph, FormatError> {
    let raw: RawModel = serde_json::from_slice(bytes).map_err(FormatError::syntax)?;
    let mut params = BTreeMap::new();
    for (name, rp) in raw.params {
        let blob = B64.decode(rp.data_b64.as_bytes()).map_err(|e| {
            FormatError::semantic(None, "params", format!("`{name}`: bad base64: {e}"))
        })?;
        if blob.len() % 4 != 0 {
            return Err(FormatError::semantic(
                None,
                "params",
                format!("`{name}`: {} bytes is not a whole number of f32", blob.len()),
            ));
        }
        let data = decode_f32_le(&blob);
        params.insert(name, Param { shape: rp.shape, data });
    }
    let graph = ModelGraph {
        name: raw.name,
        inputs: raw.inputs,
        outputs: raw.outputs,
        nodes: raw.nodes,
        params,
    };
    graph.validate()?;
    Ok(graph)
}

/// Serializes a graph to the interchange format (pretty-printed JSON).
pub fn serialize_model(graph: &ModelGraph) -> String {
    let raw = RawModel {
        name: graph.name.clone(),
        inputs: graph.inputs.clone(),
        outputs: graph.outputs.clone(),
        nodes: graph.nodes.clone(),
        params: graph
            .params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    RawParam {
                        dtype: DType::F32,
                        shape: p.shape.clone(),
                        data_b64: B64.encode(encode_f32_le(&p.data)),
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("model serialization is infallible")
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// One tensor of sample data referenced from an I/O manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct IoEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: PathBuf,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IoManifest {
    pub inputs: Vec<IoEntry>,
    pub expected_outputs: Vec<IoEntry>,
}

impl IoManifest {
    pub fn has_expected(&self) -> bool {
        !self.expected_outputs.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIoEntry {
    name: String,
    shape: Vec<usize>,
    file: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    inputs: Vec<RawIoEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected_outputs: Option<Vec<RawIoEntry>>,
}

/// Parses a manifest and loads every referenced binary relative to `base_dir`.
pub fn parse_io_manifest(bytes: &[u8], base_dir: &Path) -> Result<IoManifest, FormatError> {
    let raw: RawManifest = serde_json::from_slice(bytes).map_err(FormatError::syntax)?;
    let load = |entries: Vec<RawIoEntry>, field: &str| -> Result<Vec<IoEntry>, FormatError> {
        let mut seen = BTreeSet::new();
        entries
            .into_iter()
            .map(|e| {
                check_shape(None, field, &e.name, &e.shape)?;
                if !seen.insert(e.name.clone()) {
                    return Err(FormatError::semantic(
                        None,
                        field,
                        format!("duplicate name `{}`", e.name),
                    ));
                }
                let path = base_dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|_| FormatError::MissingFile { path: path.clone() })?;
                let expected = 4 * e.shape.iter().product::<usize>();
                if bytes.len() != expected {
                    return Err(FormatError::LengthMismatch {
                        path,
                        expected,
                        actual: bytes.len(),
                    });
                }
                Ok(IoEntry {
                    name: e.name,
                    shape: e.shape,
                    file: e.file,
                    data: decode_f32_le(&bytes),
                })
            })
            .collect()
    };
    Ok(IoManifest {
        inputs: load(raw.inputs, "inputs")?,
        expected_outputs: load(raw.expected_outputs.unwrap_or_default(), "expected_outputs")?,
    })
}

/// Writes the manifest document plus every binary it references under `base_dir`.
pub fn write_io_manifest(manifest: &IoManifest, manifest_path: &Path) -> std::io::Result<()> {
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let to_raw = |entries: &[IoEntry]| -> std::io::Result<Vec<RawIoEntry>> {
        entries
            .iter()
            .map(|e| {
                let path = base_dir.join(&e.file);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(&path, encode_f32_le(&e.data))?;
                Ok(RawIoEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    file: e.file.clone(),
                })
            })
            .collect()
    };
    let raw = RawManifest {
        inputs: to_raw(&manifest.inputs)?,
        expected_outputs: if manifest.expected_outputs.is_empty() {
            None
        } else {
            Some(to_raw(&manifest.expected_outputs)?)
        },
    };
    let text = serde_json::to_string_pretty(&raw).map_err(std::io::Error::other)?;
    fs::write(manifest_path, text + "\n")
}
