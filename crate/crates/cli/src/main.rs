use std::env;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use microforge::driver::{self, CompileOptions, PipelineError, Stage};
use microforge::emit::TemplateDir;
use microforge::model_format::{self, IoEntry, IoManifest, ModelGraph};
use microforge::zoo::{self, GestureModelConfig};

const TEMPLATES_ENV: &str = "MICROFORGE_TEMPLATES";

#[derive(Parser)]
#[command(name = "microforge", version, about = "Compile small neural networks to dependency-free C99")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a model into a C source tree.
    Compile(CompileArgs),
    /// Run the reference interpreter on a sample manifest.
    RunRef(RunRefArgs),
    /// Build a generated tree with the host compiler and run its test binary.
    Verify(VerifyArgs),
    /// Built-in models.
    #[command(subcommand)]
    Zoo(ZooCmd),
}

#[derive(Args, Clone)]
struct CompileArgs {
    /// Model JSON file.
    #[arg(long)]
    model: PathBuf,
    /// I/O manifest whose vectors are embedded as io.h.
    #[arg(long)]
    io: Option<PathBuf>,
    /// Built-in accelerator to offload to; may be repeated.
    #[arg(long = "accel")]
    accels: Vec<String>,
    /// Build profile for the generated makefile.
    #[arg(long, default_value = "host")]
    target: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Print the partition report and memory plan.
    #[arg(long)]
    report: bool,
    /// Print the lowered loop nests.
    #[arg(long)]
    dump_tir: bool,
}

#[derive(Args)]
struct RunRefArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    io: PathBuf,
    /// Maximum absolute error against the expected outputs.
    #[arg(long, default_value_t = 1e-5)]
    tol: f32,
    /// Directory for `<output>.out.bin` files (default: next to the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a manifest with the same inputs and the computed outputs
    /// as expected values.
    #[arg(long)]
    emit_io: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Generated tree; compiled first when --model is given.
    #[arg(long)]
    out: PathBuf,
    /// Host C compiler.
    #[arg(long, default_value = "cc")]
    cc: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    io: Option<PathBuf>,
    #[arg(long = "accel")]
    accels: Vec<String>,
}

#[derive(Subcommand)]
enum ZooCmd {
    /// Write the gesture network and, optionally, a "none" class sample.
    ExportGesture(ExportArgs),
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path for one generated sample with interpreter outputs as
    /// expected values.
    #[arg(long)]
    io: Option<PathBuf>,
    /// Frames per recording window.
    #[arg(long, default_value_t = 128)]
    window: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read `{}`", path.display()))
}

fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = read(path)?;
    model_format::parse_model(&bytes).map_err(|e| anyhow!(PipelineError::new(Stage::Parse, e)))
}

fn load_manifest(path: &Path) -> Result<IoManifest> {
    let bytes = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    model_format::parse_io_manifest(&bytes, base).map_err(|e| anyhow!(PipelineError::new(Stage::Io, e)))
}

fn templates() -> TemplateDir {
    match env::var_os(TEMPLATES_ENV) {
        Some(dir) if !dir.is_empty() => TemplateDir::at(dir),
        _ => TemplateDir::builtin(),
    }
}

fn compile(args: &CompileArgs) -> Result<()> {
    let graph = load_model(&args.model)?;
    let io = args.io.as_deref().map(load_manifest).transpose()?;
    let opts = CompileOptions {
        accels: args.accels.clone(),
        target: args.target.clone(),
        templates: templates(),
        ..Default::default()
    };
    let compiled = driver::compile(&graph, io.as_ref(), &opts)?;
    driver::write_tree(&args.out, &compiled.files)
        .with_context(|| format!("cannot write output tree to `{}`", args.out.display()))?;
    if args.dump_tir {
        print!("{}", compiled.tir_dump());
    }
    if args.report {
        print!("{}", compiled.report);
        print!("{}", compiled.plan_text());
    }
    println!("{}", compiled.summary());
    println!("wrote {} files to {}", compiled.files.len(), args.out.display());
    Ok(())
}

fn max_abs_error(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |worst, d| if worst.is_nan() || d <= worst { worst } else { d })
}

fn run_ref(args: &RunRefArgs) -> Result<ExitCode> {
    let graph = load_model(&args.model)?;
    let io = load_manifest(&args.io)?;
    let outputs = driver::reference(&graph, &driver::manifest_env(&io), &CompileOptions::default().convert_map)?;

    let out_dir = match &args.out {
        Some(d) => d.clone(),
        None => args.io.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&out_dir)?;
    for (name, value) in &outputs {
        let path = out_dir.join(format!("{name}.out.bin"));
        fs::write(&path, model_format::encode_f32_le(&value.data))
            .with_context(|| format!("cannot write `{}`", path.display()))?;
    }
    if let Some(path) = &args.emit_io {
        let manifest = IoManifest {
            inputs: io.inputs.clone(),
            expected_outputs: graph
                .outputs
                .iter()
                .map(|name| IoEntry {
                    name: name.clone(),
                    shape: outputs[name].shape.clone(),
                    file: format!("{name}.expected.bin").into(),
                    data: outputs[name].data.clone(),
                })
                .collect(),
        };
        model_format::write_io_manifest(&manifest, path)
            .with_context(|| format!("cannot write `{}`", path.display()))?;
    }
    println!("wrote {} outputs to {}", outputs.len(), out_dir.display());

    if !io.has_expected() {
        println!("no expected outputs to compare");
        return Ok(ExitCode::SUCCESS);
    }
    let mut worst = 0.0f32;
    for e in &io.expected_outputs {
        let got = outputs
            .get(&e.name)
            .ok_or_else(|| anyhow!(PipelineError::new(Stage::Io, format!("`{}` is not a model output", e.name))))?;
        if got.data.len() != e.data.len() {
            bail!(PipelineError::new(
                Stage::Io,
                format!("`{}`: expected {} values, the model produced {}", e.name, e.data.len(), got.data.len())
            ));
        }
        let err = max_abs_error(&got.data, &e.data);
        println!("{}: max abs error {err:e}", e.name);
        if worst.is_nan() || err <= worst {
            continue;
        }
        worst = err;
    }
    if worst <= args.tol {
        println!("PASS (max abs error {worst:e}, tolerance {:e})", args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (max abs error {worst:e} exceeds tolerance {:e})", args.tol);
        Ok(ExitCode::from(1))
    }
}

/// Resolves a program name against PATH, or checks an explicit path.
fn find_program(name: &str) -> Option<PathBuf> {
    let p = Path::new(name);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    env::split_paths(&env::var_os("PATH")?)
        .map(|dir| dir.join(name))
        .find(|candidate| candidate.is_file())
}

fn verify(args: &VerifyArgs) -> Result<ExitCode> {
    if let Some(model) = &args.model {
        compile(&CompileArgs {
            model: model.clone(),
            io: args.io.clone(),
            accels: args.accels.clone(),
            target: "host".into(),
            out: args.out.clone(),
            report: false,
            dump_tir: false,
        })?;
    }
    for tool in [args.cc.as_str(), "make", "sh"] {
        if find_program(tool).is_none() {
            bail!("toolchain missing: `{tool}` not found");
        }
    }
    let script = args.out.join("make.sh");
    if !script.is_file() {
        bail!("`{}` not found; run compile first", script.display());
    }
    let build = Command::new("sh")
        .arg("make.sh")
        .current_dir(&args.out)
        .env("CC", &args.cc)
        .output()
        .context("cannot run make.sh")?;
    if !build.status.success() {
        bail!(
            "build failed:\n{}{}",
            String::from_utf8_lossy(&build.stdout),
            String::from_utf8_lossy(&build.stderr)
        );
    }
    let binary = args.out.join("tvm_model/build/main");
    let run = Command::new(&binary)
        .current_dir(&args.out)
        .status()
        .with_context(|| format!("cannot run `{}`", binary.display()))?;
    let code = run.code().unwrap_or(1);
    println!("{} exited with {code}", binary.file_name().and_then(OsStr::to_str).unwrap_or("main"));
    Ok(ExitCode::from(u8::try_from(code).unwrap_or(1)))
}

fn export_gesture(args: &ExportArgs) -> Result<()> {
    let cfg = GestureModelConfig::default().with_window(args.window);
    let graph = zoo::build_gesture_model(&cfg, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, model_format::serialize_model(&graph))
        .with_context(|| format!("cannot write `{}`", args.out.display()))?;
    println!(
        "wrote {} ({} parameters, {} GRU steps)",
        args.out.display(),
        graph.param_count(),
        cfg.gru_steps().unwrap_or(0)
    );
    if let Some(io_path) = &args.io {
        let sample = zoo::gen_none_class(&cfg, args.seed, 1).remove(0);
        let outputs = driver::reference(&graph, &zoo::sample_env(&sample), &CompileOptions::default().convert_map)?;
        let manifest = zoo::sample_manifest(&sample, outputs.get(zoo::OUTPUT_NAME));
        if let Some(dir) = io_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        model_format::write_io_manifest(&manifest, io_path)
            .with_context(|| format!("cannot write `{}`", io_path.display()))?;
        println!("wrote {}", io_path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Compile(a) => compile(a).map(|()| ExitCode::SUCCESS),
        Cmd::RunRef(a) => run_ref(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Zoo(ZooCmd::ExportGesture(a)) => export_gesture(a).map(|()| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_fold_propagates_nan() {
        assert_eq!(max_abs_error(&[1.0, 2.0], &[1.0, 2.5]), 0.5);
        assert!(max_abs_error(&[f32::NAN, 1.0], &[0.0, 5.0]).is_nan());
    }

    #[test]
    fn program_lookup() {
        assert!(find_program("definitely-not-a-compiler-xyz").is_none());
        assert!(find_program("./no/such/cc").is_none());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
