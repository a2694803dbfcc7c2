//! Runs the whole pipeline and names the stage that failed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde_json::json;
use thiserror::Error;

use crate::accel::{builtin_accelerator, partition, AccelRegistry, PartitionReport, BUILTIN_ACCELERATORS};
use crate::emit::{self, EmitPlan, EmitRequest, TemplateDir};
use crate::exec::Exec;
use crate::frontend::{convert, default_convert_map, ConvertMap};
use crate::hir::{infer_shapes, topo_schedule, validate, HirModule, ValueId};
use crate::interp::{interp, Env, TensorValue};
use crate::model_format::{IoManifest, ModelGraph};
use crate::planner::{arena_sizes, liveness, plan, Liveness, MemoryPlan};
use crate::tir::{lower_module, LoweredModule};

pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Parse,
    Io,
    Target,
    Accel,
    Convert,
    Shape,
    Partition,
    Lower,
    Plan,
    Emit,
    Interp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Parse => "parse",
            Stage::Io => "io",
            Stage::Target => "target",
            Stage::Accel => "accel",
            Stage::Convert => "convert",
            Stage::Shape => "shape",
            Stage::Partition => "partition",
            Stage::Lower => "lower",
            Stage::Plan => "plan",
            Stage::Emit => "emit",
            Stage::Interp => "interp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            message: message.to_string(),
        }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

pub struct CompileOptions {
    /// Built-in accelerators to register, in order.
    pub accels: Vec<String>,
    pub target: String,
    pub templates: TemplateDir,
    pub convert_map: ConvertMap,
    pub exec: Exec,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            accels: Vec::new(),
            target: "host".into(),
            templates: TemplateDir::builtin(),
            convert_map: default_convert_map(),
            exec: Exec::default(),
        }
    }
}

/// Registry of the named built-in accelerators.
pub fn builtin_registry(names: &[String]) -> Result<AccelRegistry, PipelineError> {
    let mut registry = AccelRegistry::new();
    for name in names {
        let desc = builtin_accelerator(name).ok_or_else(|| {
            PipelineError::new(
                Stage::Accel,
                format!("unknown accelerator `{name}`; available: {}", BUILTIN_ACCELERATORS.join(", ")),
            )
        })?;
        registry = registry.register(desc).map_err(at(Stage::Accel))?;
    }
    Ok(registry)
}

/// Frontend conversion plus shape inference and validation.
pub fn to_hir(graph: &ModelGraph, map: &ConvertMap) -> Result<HirModule, PipelineError> {
    graph.validate().map_err(at(Stage::Parse))?;
    let m = convert(graph, map).map_err(at(Stage::Convert))?;
    let m = infer_shapes(&m).map_err(at(Stage::Shape))?;
    validate(&m).map_err(|errs| {
        let msgs: Vec<String> = errs.iter().map(ToString::to_string).collect();
        PipelineError::new(Stage::Shape, msgs.join("; "))
    })?;
    Ok(m)
}

/// Runs the reference interpreter on a model.
pub fn reference(graph: &ModelGraph, inputs: &Env, map: &ConvertMap) -> Result<Env, PipelineError> {
    let m = to_hir(graph, map)?;
    interp(&m, inputs).map_err(at(Stage::Interp))
}

/// Interpreter inputs from a manifest.
pub fn manifest_env(io: &IoManifest) -> Env {
    io.inputs
        .iter()
        .map(|e| (e.name.clone(), TensorValue::new(e.shape.clone(), e.data.clone())))
        .collect()
}

pub struct Compiled {
    /// Partitioned, shape-annotated module.
    pub module: HirModule,
    pub registry: AccelRegistry,
    pub schedule: Vec<ValueId>,
    pub report: PartitionReport,
    pub lowered: LoweredModule,
    pub liveness: Liveness,
    pub plan: MemoryPlan,
    pub emitted: EmitPlan,
    /// The complete output tree, `report.json` included.
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Compiled {
    /// One line per target count, then the arena size.
    pub fn summary(&self) -> String {
        format!(
            "cpu: {}, accel: {}\narena: {} bytes",
            self.report.cpu_count(),
            self.report.accel_count(),
            self.plan.arena_bytes
        )
    }

    /// Every loop nest, CPU functions and accelerator reference nests alike.
    pub fn tir_dump(&self) -> String {
        let mut out = String::new();
        for f in &self.lowered.funcs {
            out.push_str(&f.to_string());
            out.push('\n');
        }
        for e in self.lowered.extern_calls() {
            out.push_str(&format!("// {} (dims {:?})\n", e.symbol, e.dims));
            for f in &e.prim_funcs {
                out.push_str(&f.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn plan_text(&self) -> String {
        let mut out = format!("arena: {} bytes, alignment {}\n", self.plan.arena_bytes, self.plan.alignment);
        for (name, off) in &self.plan.offsets {
            let live = self.liveness.get(name);
            out.push_str(&format!("  {name}: offset {off}"));
            if let Some(iv) = live {
                out.push_str(&format!(", live {}..={}", iv.first, iv.last));
            }
            out.push('\n');
        }
        out
    }
}

fn report_json(c: &Compiled, target: &str, accels: &[String]) -> String {
    let sizes = arena_sizes(&c.module);
    let buffers: Vec<serde_json::Value> = c
        .plan
        .offsets
        .iter()
        .map(|(name, off)| {
            let live = c.liveness.get(name);
            json!({
                "name": name,
                "offset": off,
                "bytes": sizes.get(name),
                "first": live.map(|l| l.first),
                "last": live.map(|l| l.last),
            })
        })
        .collect();
    let report = json!({
        "model": c.module.name,
        "target": target,
        "accelerators": accels,
        "schedule": c.schedule,
        "calls": c.emitted.calls,
        "partition": c.report.to_json(),
        "memory_plan": {
            "arena_bytes": c.plan.arena_bytes,
            "alignment": c.plan.alignment,
            "buffers": buffers,
        },
    });
    let mut text = serde_json::to_string_pretty(&report).expect("json value");
    text.push('\n');
    text
}

pub fn compile(graph: &ModelGraph, io: Option<&IoManifest>, opts: &CompileOptions) -> Result<Compiled, PipelineError> {
    let target = emit::profile(&opts.target).ok_or_else(|| {
        PipelineError::new(
            Stage::Target,
            format!(
                "unknown target `{}`; available profiles: {}",
                opts.target,
                emit::profile_names().join(", ")
            ),
        )
    })?;
    let registry = builtin_registry(&opts.accels)?;
    let m = to_hir(graph, &opts.convert_map)?;
    if let Some(io) = io {
        emit::align_manifest(&m, io).map_err(at(Stage::Io))?;
    }
    let (module, report) = partition(&m, &registry).map_err(at(Stage::Partition))?;
    let module = infer_shapes(&module).map_err(at(Stage::Partition))?;
    let schedule = topo_schedule(&module).map_err(at(Stage::Partition))?;
    let lowered = lower_module(&module, &schedule, &registry, &report, opts.exec).map_err(at(Stage::Lower))?;
    let live = liveness(&schedule, &module);
    let sizes = arena_sizes(&module);
    let memory = plan(&live, &sizes);
    memory.check(&live, &sizes).map_err(at(Stage::Plan))?;
    let emitted = emit::emit_tree(&EmitRequest {
        module: &module,
        lowered: &lowered,
        plan: &memory,
        registry: &registry,
        io,
        target,
        templates: &opts.templates,
    })
    .map_err(at(Stage::Emit))?;
    let mut compiled = Compiled {
        module,
        registry,
        schedule,
        report,
        lowered,
        liveness: live,
        plan: memory,
        files: BTreeMap::new(),
        emitted,
    };
    let mut files: BTreeMap<String, Vec<u8>> = compiled
        .emitted
        .files
        .iter()
        .map(|(k, v)| (k.clone(), v.clone().into_bytes()))
        .collect();
    files.insert(REPORT_JSON.into(), report_json(&compiled, target.name, &opts.accels).into_bytes());
    compiled.files = files;
    Ok(compiled)
}

/// Writes a file tree under `root`, creating directories as needed.
/// `make.sh` is marked executable.
pub fn write_tree(root: &Path, files: &BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    for (rel, body) in files {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, body)?;
        #[cfg(unix)]
        if rel == emit::MAKE_SH {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&path, fs::Permissions::from_mode(0o755))?;
        }
    }
    Ok(())
}
