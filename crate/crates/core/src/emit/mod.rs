//! C99 emission: the model library, parameter data, sample vectors, the
//! test harness and the build scripts.
//!
//! Output layout, relative to the output directory:
//!
//! ```text
//! tvm_model/include/{model.h, params.h, io.h}
//! tvm_model/source/{model.c, params.c}
//! tvm_model/makefile
//! main.c
//! make.sh
//! crt/*            only when accelerator regions exist
//! ```

mod c;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use thiserror::Error;

use crate::accel::{extern_signature, AccelRegistry};
use crate::hir::{HirModule, OpKind};
use crate::model_format::{IoEntry, IoManifest};
use crate::planner::MemoryPlan;
use crate::tir::{Call, LoweredModule};

pub use c::{emit_c_func, emit_c_func_named, float_literal, func_name, sanitize, NameTable};
pub use template::{
    profile, profile_names, Substitutions, Template, TemplateDir, TemplateDirError, TemplateError, TargetProfile,
    MAIN_TEMPLATE, MAKE_SH_TEMPLATE, PROFILES,
};

pub const MODEL_C: &str = "tvm_model/source/model.c";
pub const PARAMS_C: &str = "tvm_model/source/params.c";
pub const MODEL_H: &str = "tvm_model/include/model.h";
pub const PARAMS_H: &str = "tvm_model/include/params.h";
pub const IO_H: &str = "tvm_model/include/io.h";
pub const MAKEFILE: &str = "tvm_model/makefile";
pub const MAIN_C: &str = "main.c";
pub const MAKE_SH: &str = "make.sh";
pub const CRT_DIR: &str = "crt";

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    TemplateDir(#[from] TemplateDirError),
    #[error("io manifest: {0}")]
    Io(String),
    #[error("inconsistent pipeline state: {0}")]
    Inconsistent(String),
}

/// Everything emission produced for one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitPlan {
    /// Relative path to file content.
    pub files: BTreeMap<String, String>,
    pub substitutions: Substitutions,
    pub model_name: String,
    pub memory_plan: MemoryPlan,
    /// C functions called by the entry point, in order.
    pub calls: Vec<String>,
}

fn float_rows(data: &[f32]) -> String {
    let mut out = String::new();
    for row in data.chunks(8) {
        let items: Vec<String> = row.iter().map(|&v| float_literal(v)).collect();
        let _ = writeln!(out, "    {},", items.join(", "));
    }
    out
}

fn needs_math(data: &[f32]) -> bool {
    data.iter().any(|v| !v.is_finite())
}

/// Stems used for I/O macros and array names, one per name, deduplicated.
fn io_stems<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut table = NameTable::default();
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let base = sanitize(n);
            let base = base.strip_prefix("v_").map(str::to_owned).unwrap_or(base);
            table.name(&i.to_string(), &base)
        })
        .collect()
}

/// Names of the model's entry point and its I/O arguments.
struct EntryNames {
    model: String,
    upper: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    input_stems: Vec<String>,
    output_stems: Vec<String>,
}

impl EntryNames {
    fn new(m: &HirModule) -> Self {
        let model = sanitize(&m.name);
        let input_stems = io_stems(m.inputs.iter().map(String::as_str));
        let output_stems = io_stems(m.outputs.iter().map(String::as_str));
        let args = |base: &str, stems: &[String]| -> Vec<String> {
            if stems.len() == 1 {
                vec![base.to_owned()]
            } else {
                stems.iter().map(|s| format!("{base}_{s}")).collect()
            }
        };
        EntryNames {
            upper: model.to_uppercase(),
            inputs: args("input", &input_stems),
            outputs: args("output", &output_stems),
            model,
            input_stems,
            output_stems,
        }
    }

    fn entry(&self) -> String {
        format!("{}_run", self.model)
    }

    fn prototype(&self) -> String {
        let mut args: Vec<String> = self.inputs.iter().map(|n| format!("const float* {n}")).collect();
        args.extend(self.outputs.iter().map(|n| format!("float* {n}")));
        args.push("uint8_t* arena".into());
        format!("int32_t {}({})", self.entry(), args.join(", "))
    }

    fn input_macro(&self, i: usize) -> String {
        format!("{}_INPUT_{}_ELEMS", self.upper, self.input_stems[i].to_uppercase())
    }

    fn output_macro(&self, i: usize) -> String {
        format!("{}_OUTPUT_{}_ELEMS", self.upper, self.output_stems[i].to_uppercase())
    }
}

fn elems(m: &HirModule, v: &str) -> Result<usize, EmitError> {
    m.shape_of(v)
        .map(|s| s.iter().product())
        .ok_or_else(|| EmitError::Inconsistent(format!("no shape for `{v}`")))
}

/// Emits `model.c`, `model.h`, `params.c` and `params.h`.
pub fn emit_model(
    m: &HirModule,
    lowered: &LoweredModule,
    plan: &MemoryPlan,
    registry: &AccelRegistry,
) -> Result<EmitPlan, EmitError> {
    let names = EntryNames::new(m);
    let entry = names.entry();
    let mut table = NameTable::with_reserved(&[entry.as_str(), "arena", "dims"]);
    for n in names.inputs.iter().chain(&names.outputs) {
        table.name(&format!("arg:{n}"), n);
    }

    // C expression for every value the entry point can see
    let mut value_ref: BTreeMap<&str, String> = BTreeMap::new();
    for (v, n) in m.inputs.iter().zip(&names.inputs) {
        value_ref.entry(v.as_str()).or_insert_with(|| n.clone());
    }
    let mut params_c = String::new();
    let mut params_h = String::new();
    let mut param_math = false;
    for op in &m.ops {
        if let OpKind::Const { shape, data } = &op.kind {
            let global = table.name(&format!("param:{}", op.id), &format!("{}_{}", names.model, sanitize(&op.id)));
            let _ = writeln!(params_h, "extern const float {global}[{}]; /* {shape:?} */", data.len());
            let _ = write!(params_c, "\nconst float {global}[{}] = {{\n{}}};\n", data.len(), float_rows(data));
            param_math |= needs_math(data);
            value_ref.insert(op.id.as_str(), global);
        }
    }
    let mut direct_outputs = BTreeSet::new();
    for (v, n) in m.outputs.iter().zip(&names.outputs) {
        let computed = m.op(v).is_some_and(|op| op.is_compute());
        if computed && !value_ref.contains_key(v.as_str()) {
            value_ref.insert(v.as_str(), n.clone());
            direct_outputs.insert(n.as_str());
        }
    }
    let mut decls = Vec::new();
    for op in m.compute_ops() {
        if value_ref.contains_key(op.id.as_str()) {
            continue;
        }
        let off = *plan
            .offsets
            .get(&op.id)
            .ok_or_else(|| EmitError::Inconsistent(format!("`{}` has no arena offset", op.id)))?;
        let local = table.name(&format!("val:{}", op.id), &format!("t_{}", sanitize(&op.id)));
        decls.push((local.clone(), format!("    float* {local} = (float*)(arena + {off});\n")));
        value_ref.insert(op.id.as_str(), local);
    }
    let lookup = |v: &str| -> Result<String, EmitError> {
        value_ref
            .get(v)
            .cloned()
            .ok_or_else(|| EmitError::Inconsistent(format!("value `{v}` is not addressable")))
    };

    let mut funcs = String::new();
    let mut externs = BTreeSet::new();
    let mut calls = Vec::new();
    let mut body = String::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    for call in &lowered.calls {
        match call {
            Call::Func(i) => {
                let f = lowered
                    .funcs
                    .get(*i)
                    .ok_or_else(|| EmitError::Inconsistent(format!("call to missing function {i}")))?;
                let cname = table.name(&format!("fn:{}", f.name), &func_name(f));
                let _ = write!(funcs, "\n{}", emit_c_func_named(f, &cname));
                let args = f.params.iter().map(|b| lookup(&b.name)).collect::<Result<Vec<_>, _>>()?;
                let _ = writeln!(body, "    {cname}({});", args.join(", "));
                used.extend(args);
                calls.push(cname);
            }
            Call::Extern(e) => {
                let desc = registry
                    .get(&e.accel)
                    .ok_or_else(|| EmitError::Inconsistent(format!("accelerator `{}` is not registered", e.accel)))?;
                let pattern = desc.pattern(&e.pattern).ok_or_else(|| {
                    EmitError::Inconsistent(format!("accelerator `{}` has no pattern `{}`", e.accel, e.pattern))
                })?;
                externs.insert(format!("extern {};", extern_signature(desc, pattern)));
                let mut args = e.operands.iter().map(|v| lookup(v)).collect::<Result<Vec<_>, _>>()?;
                args.push(lookup(&e.output)?);
                args.push("dims".into());
                let dims: Vec<String> = e.dims.iter().map(i32::to_string).collect();
                let _ = writeln!(
                    body,
                    "    {{\n        static const int32_t dims[{}] = {{{}}};\n        if ({}({}) != 0) {{\n            return 1;\n        }}\n    }}",
                    dims.len().max(1),
                    dims.join(", "),
                    e.symbol,
                    args.join(", ")
                );
                calls.push(e.symbol.clone());
                used.extend(args);
            }
        }
    }
    // outputs that are not written by any call: sources and repeats
    for (v, n) in m.outputs.iter().zip(&names.outputs) {
        if direct_outputs.contains(n.as_str()) && value_ref.get(v.as_str()) == Some(n) {
            continue;
        }
        let len = elems(m, v)?;
        let src = lookup(v)?;
        used.insert(src.clone());
        used.insert(n.clone());
        let _ = writeln!(
            body,
            "    for (int32_t i = 0; i < {len}; ++i) {{\n        {n}[i] = {src}[i];\n    }}"
        );
    }

    // region intermediates are never materialised
    let decls: String = decls
        .into_iter()
        .filter(|(local, _)| used.contains(local))
        .map(|(_, line)| line)
        .collect();
    let arena_used = !decls.is_empty();
    let mut unused: Vec<&str> = names
        .inputs
        .iter()
        .chain(&names.outputs)
        .map(String::as_str)
        .filter(|n| !used.contains(*n))
        .collect();
    if !arena_used {
        unused.push("arena");
    }
    let voids: String = unused.iter().map(|n| format!("    (void){n};\n")).collect();

    let guard = |file: &str| format!("{}_{file}_H", names.upper);
    let mut model_h = String::new();
    let _ = writeln!(model_h, "#ifndef {0}\n#define {0}\n\n#include <stdint.h>\n", guard("MODEL"));
    let _ = writeln!(model_h, "#define {}_ARENA_BYTES {}", names.upper, plan.arena_bytes);
    for (i, v) in m.inputs.iter().enumerate() {
        let _ = writeln!(model_h, "#define {} {}", names.input_macro(i), elems(m, v)?);
    }
    for (i, v) in m.outputs.iter().enumerate() {
        let _ = writeln!(model_h, "#define {} {}", names.output_macro(i), elems(m, v)?);
    }
    let _ = writeln!(model_h, "\n{};\n\n#endif", names.prototype());

    let mut model_c = String::from("#include <math.h>\n#include <stdint.h>\n\n#include \"model.h\"\n#include \"params.h\"\n");
    if !externs.is_empty() {
        model_c.push('\n');
        for e in &externs {
            let _ = writeln!(model_c, "{e}");
        }
    }
    model_c.push_str(&funcs);
    let _ = write!(model_c, "\n{} {{\n{voids}{decls}{body}    return 0;\n}}\n", names.prototype());

    let params_h = format!("#ifndef {0}\n#define {0}\n\n{params_h}\n#endif\n", guard("PARAMS"));
    let math = if param_math { "#include <math.h>\n" } else { "" };
    let params_c = format!("{math}#include \"params.h\"\n{params_c}");

    let files = [
        (MODEL_C, model_c),
        (MODEL_H, model_h),
        (PARAMS_C, params_c),
        (PARAMS_H, params_h),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect();
    let substitutions = [
        ("MODEL_NAME".to_owned(), names.model.clone()),
        ("ARENA_BYTES".to_owned(), plan.arena_bytes.to_string()),
    ]
    .into();
    Ok(EmitPlan {
        files,
        substitutions,
        model_name: names.model,
        memory_plan: plan.clone(),
        calls,
    })
}

fn io_array(out: &mut String, kind: &str, stem: &str, data: &[f32]) {
    let mac = format!("IO_{}_{}_LEN", kind.to_uppercase(), stem.to_uppercase());
    let _ = write!(
        out,
        "\n#define {mac} {}\nstatic const float {kind}_{stem}[] = {{\n{}}};\n",
        data.len(),
        float_rows(data)
    );
}

/// `io.h`: the sample inputs and expected outputs as C arrays.
pub fn prepare_io(manifest: &IoManifest) -> String {
    let all: Vec<&f32> = manifest
        .inputs
        .iter()
        .chain(&manifest.expected_outputs)
        .flat_map(|e| &e.data)
        .collect();
    let mut out = String::from("#ifndef IO_H\n#define IO_H\n");
    if all.iter().any(|v| !v.is_finite()) {
        out.push_str("\n#include <math.h>\n");
    }
    let _ = writeln!(out, "\n#define IO_HAS_EXPECTED {}", u8::from(manifest.has_expected()));
    let stems = io_stems(manifest.inputs.iter().map(|e| e.name.as_str()));
    for (e, stem) in manifest.inputs.iter().zip(&stems) {
        io_array(&mut out, "input", stem, &e.data);
    }
    let stems = io_stems(manifest.expected_outputs.iter().map(|e| e.name.as_str()));
    for (e, stem) in manifest.expected_outputs.iter().zip(&stems) {
        io_array(&mut out, "expected", stem, &e.data);
    }
    out.push_str("\n#endif\n");
    out
}

/// Orders a manifest like the model's inputs and outputs and checks it
/// against the model's extents.
pub fn align_manifest(m: &HirModule, manifest: &IoManifest) -> Result<IoManifest, EmitError> {
    let pick = |entries: &[IoEntry], wanted: &[String], what: &str, required: bool| {
        let mut out = Vec::new();
        for e in entries {
            if !wanted.contains(&e.name) {
                return Err(EmitError::Io(format!("{what} `{}` is not a model {what}", e.name)));
            }
        }
        for w in wanted {
            match entries.iter().find(|e| &e.name == w) {
                Some(e) => {
                    let n = elems(m, w)?;
                    if e.data.len() != n {
                        return Err(EmitError::Io(format!(
                            "{what} `{w}` has {} values, the model expects {n}",
                            e.data.len()
                        )));
                    }
                    out.push(e.clone());
                }
                None if required => return Err(EmitError::Io(format!("no data for model input `{w}`"))),
                None => {}
            }
        }
        Ok(out)
    };
    Ok(IoManifest {
        inputs: pick(&manifest.inputs, &m.inputs, "input", true)?,
        expected_outputs: pick(&manifest.expected_outputs, &m.outputs, "output", false)?,
    })
}

/// Substitutions for `main.c`. `io` must already be aligned with the model.
pub fn main_substitutions(m: &HirModule, io: Option<&IoManifest>) -> Substitutions {
    let names = EntryNames::new(m);
    let mut io_include = String::new();
    match io {
        Some(_) => io_include.push_str("#include \"io.h\""),
        None => {
            io_include.push_str("/* built without sample data: inputs are zero */\n#define IO_HAS_EXPECTED 0");
            for (i, stem) in names.input_stems.iter().enumerate() {
                let _ = write!(
                    io_include,
                    "\n#define IO_INPUT_{}_LEN {}\nstatic const float input_{stem}[IO_INPUT_{0}_LEN] = {{0.0f}};",
                    stem.to_uppercase(),
                    names.input_macro(i)
                );
            }
        }
    }
    let mut buffers = String::new();
    let mut checks = String::new();
    let mut compare = String::new();
    let mut print = String::new();
    let mut args = Vec::new();
    for (i, stem) in names.input_stems.iter().enumerate() {
        let (len, want) = (format!("IO_INPUT_{}_LEN", stem.to_uppercase()), names.input_macro(i));
        let _ = writeln!(
            checks,
            "    if ({len} != {want}) {{\n        fprintf(stderr, \"input {stem}: io.h has %d values, the model takes %d\\n\", (int){len}, (int){want});\n        return 2;\n    }}"
        );
        args.push(format!("input_{stem}"));
    }
    let expected: BTreeSet<&str> = io
        .map(|io| io.expected_outputs.iter().map(|e| e.name.as_str()).collect())
        .unwrap_or_default();
    for (i, (v, stem)) in m.outputs.iter().zip(&names.output_stems).enumerate() {
        let want = names.output_macro(i);
        let _ = writeln!(buffers, "static float output_{stem}[{want}];");
        args.push(format!("output_{stem}"));
        let _ = writeln!(
            print,
            "    for (int32_t i = 0; i < {want}; ++i) {{\n        printf(\"{stem}[%d] = %.9g\\n\", (int)i, (double)output_{stem}[i]);\n    }}"
        );
        if expected.contains(v.as_str()) {
            let len = format!("IO_EXPECTED_{}_LEN", stem.to_uppercase());
            let _ = writeln!(
                checks,
                "    if ({len} != {want}) {{\n        fprintf(stderr, \"output {stem}: io.h has %d expected values, the model produces %d\\n\", (int){len}, (int){want});\n        return 2;\n    }}"
            );
            let _ = writeln!(
                compare,
                "        e = max_abs_error(output_{stem}, expected_{stem}, {want});\n        if (err == err && !(e <= err)) {{\n            err = e;\n        }}"
            );
        }
    }
    args.push("(uint8_t*)arena_words".into());
    let trim = |s: String| s.trim_end_matches('\n').to_owned();
    [
        ("MODEL_NAME", names.model.clone()),
        ("ARENA_BYTES", format!("{}_ARENA_BYTES", names.upper)),
        ("IO_INCLUDE", io_include),
        ("OUTPUT_BUFFERS", trim(buffers)),
        ("IO_CHECKS", trim(checks)),
        ("RUN_CALL", format!("{}({})", names.entry(), args.join(", "))),
        ("COMPARE", trim(compare)),
        ("PRINT_OUTPUTS", trim(print)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

pub fn gen_main(subs: &Substitutions, templates: &TemplateDir) -> Result<String, EmitError> {
    Ok(templates.load(MAIN_TEMPLATE)?.render(subs)?)
}

/// `makefile` for a target; the profile supplies the toolchain keys unless
/// `subs` overrides them.
pub fn gen_make(subs: &Substitutions, target: &TargetProfile, templates: &TemplateDir) -> Result<String, EmitError> {
    let mut all = target.substitutions();
    all.extend(subs.iter().map(|(k, v)| (k.clone(), v.clone())));
    Ok(templates.load(&target.makefile_template())?.render(&all)?)
}

/// `make.sh`: installs any runtime support files from `crt/` into the
/// library tree, then runs make.
pub fn gen_make_sh<'a>(
    files: impl IntoIterator<Item = &'a String>,
    model_name: &str,
    templates: &TemplateDir,
) -> Result<String, EmitError> {
    let mut steps = Vec::new();
    for f in files {
        let Some(name) = f.strip_prefix(CRT_DIR).and_then(|r| r.strip_prefix('/')) else {
            continue;
        };
        let dest = if name.ends_with(".h") { "include" } else { "source" };
        steps.push(format!("cp \"{f}\" \"tvm_model/{dest}/{name}\""));
    }
    if steps.is_empty() {
        steps.push(": no runtime support files".into());
    }
    let subs = [
        ("MODEL_NAME".to_owned(), model_name.to_owned()),
        ("INSTALL_STEPS".to_owned(), steps.join("\n")),
    ]
    .into();
    Ok(templates.load(MAKE_SH_TEMPLATE)?.render(&subs)?)
}

/// Inputs for a complete output tree.
pub struct EmitRequest<'a> {
    pub module: &'a HirModule,
    pub lowered: &'a LoweredModule,
    pub plan: &'a MemoryPlan,
    pub registry: &'a AccelRegistry,
    pub io: Option<&'a IoManifest>,
    pub target: &'a TargetProfile,
    pub templates: &'a TemplateDir,
}

/// The whole output tree except the report.
pub fn emit_tree(req: &EmitRequest) -> Result<EmitPlan, EmitError> {
    let mut plan = emit_model(req.module, req.lowered, req.plan, req.registry)?;
    let io = req.io.map(|io| align_manifest(req.module, io)).transpose()?;
    if let Some(io) = &io {
        plan.files.insert(IO_H.into(), prepare_io(io));
    }
    if req.lowered.extern_calls().next().is_some() {
        for (name, body) in req.templates.crt_files()? {
            plan.files.insert(format!("{CRT_DIR}/{name}"), body);
        }
    }
    let main_subs = main_substitutions(req.module, io.as_ref());
    plan.files.insert(MAIN_C.into(), gen_main(&main_subs, req.templates)?);
    let make_subs = [("MODEL_NAME".to_owned(), plan.model_name.clone())].into();
    plan.files.insert(MAKEFILE.into(), gen_make(&make_subs, req.target, req.templates)?);
    let make_sh = gen_make_sh(plan.files.keys(), &plan.model_name, req.templates)?;
    plan.files.insert(MAKE_SH.into(), make_sh);
    plan.substitutions.extend(main_subs.into_iter().filter(|(k, _)| k != "ARENA_BYTES"));
    Ok(plan)
}
