use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_microforge"));
    c.env_remove("MICROFORGE_TEMPLATES");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn microforge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture_templates() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/templates")
}

/// Exports the gesture model plus a sample manifest into a fresh directory.
fn exported() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("gesture.json");
    let io = dir.path().join("io.json");
    let o = run(bin().args(["zoo", "export-gesture", "--seed", "3", "--out"]).arg(&model).arg("--io").arg(&io));
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, model, io)
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    out
}

fn perturb_first(path: &Path, delta: f32) {
    let mut bytes = fs::read(path).unwrap();
    let v = f32::from_le_bytes(bytes[..4].try_into().unwrap()) + delta;
    bytes[..4].copy_from_slice(&v.to_le_bytes());
    fs::write(path, bytes).unwrap();
}

fn have(program: &str) -> bool {
    Command::new(program).arg("--version").output().is_ok()
}

fn toolchain() -> bool {
    let ok = have("cc") && have("make");
    if !ok {
        eprintln!("skipping: cc or make not available");
    }
    ok
}

#[test]
fn compile_writes_the_tree() {
    let (dir, model, _) = exported();
    let out = dir.path().join("out");
    let o = run(bin().args(["compile", "--report", "--model"]).arg(&model).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cpu: 6, accel: 0"));
    assert_eq!(
        files_under(&out),
        [
            "main.c",
            "make.sh",
            "report.json",
            "tvm_model/include/model.h",
            "tvm_model/include/params.h",
            "tvm_model/makefile",
            "tvm_model/source/model.c",
            "tvm_model/source/params.c",
        ]
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["model"], "gesture");
    assert!(report["memory_plan"]["arena_bytes"].as_u64().unwrap() > 0);
}

#[test]
fn compile_with_io_and_accelerator() {
    let (dir, model, io) = exported();
    let out = dir.path().join("out");
    let o = run(bin()
        .args(["compile", "--accel", "mac_engine", "--dump-tir", "--model"])
        .arg(&model)
        .arg("--io")
        .arg(&io)
        .arg("--out")
        .arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cpu: 3, accel: 3"));
    assert!(out.join("tvm_model/include/io.h").exists());
    let model_c = fs::read_to_string(out.join("tvm_model/source/model.c")).unwrap();
    assert!(model_c.contains("extern int32_t mac_engine_dense("));
    // no template dir with crt sources, so nothing to copy
    assert!(!out.join("crt").exists());
}

#[test]
fn compile_is_idempotent() {
    let (dir, model, io) = exported();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b, &a] {
        let o = run(bin().arg("compile").arg("--model").arg(&model).arg("--io").arg(&io).arg("--out").arg(out));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let names = files_under(&a);
    assert_eq!(names, files_under(&b));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn unknown_target_lists_profiles() {
    let (dir, model, _) = exported();
    let o = run(bin()
        .args(["compile", "--target", "z80", "--model"])
        .arg(&model)
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("z80") && err.contains("host") && err.contains("cortex-m4f"), "{err}");
}

#[test]
fn bad_model_reports_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("broken.json");
    fs::write(&model, "{\"name\": 3}").unwrap();
    let o = run(bin().arg("compile").arg("--model").arg(&model).arg("--out").arg(dir.path().join("out")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn run_ref_checks_expected_outputs() {
    let (dir, model, io) = exported();
    let o = run(bin().arg("run-ref").arg("--model").arg(&model).arg("--io").arg(&io));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("probs.out.bin").exists());

    perturb_first(&dir.path().join("probs.expected.bin"), 1e-3);
    let o = run(bin().arg("run-ref").arg("--model").arg(&model).arg("--io").arg(&io));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_ref_without_expected_outputs() {
    let (dir, model, io) = exported();
    let bare = dir.path().join("bare.json");
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&io).unwrap()).unwrap();
    manifest.as_object_mut().unwrap().remove("expected_outputs");
    fs::write(&bare, manifest.to_string()).unwrap();
    let outs = dir.path().join("outs");
    let emitted = dir.path().join("emitted.json");
    let o = run(bin()
        .arg("run-ref")
        .arg("--model")
        .arg(&model)
        .arg("--io")
        .arg(&bare)
        .arg("--out")
        .arg(&outs)
        .arg("--emit-io")
        .arg(&emitted));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let written = fs::read(outs.join("probs.out.bin")).unwrap();
    assert_eq!(written.len(), 21 * 4);
    // the emitted manifest reproduces itself
    let o = run(bin().arg("run-ref").arg("--model").arg(&model).arg("--io").arg(&emitted));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_missing_compiler() {
    let (dir, model, io) = exported();
    let o = run(bin()
        .args(["verify", "--cc", "no-such-cc-here", "--model"])
        .arg(&model)
        .arg("--io")
        .arg(&io)
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("toolchain missing"), "{}", stderr(&o));
}

#[test]
fn verify_cpu_build() {
    if !toolchain() {
        return;
    }
    let (dir, model, io) = exported();
    let out = dir.path().join("out");
    let o = run(bin().arg("verify").arg("--model").arg(&model).arg("--io").arg(&io).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    assert!(out.join("tvm_model/build/libtvm_model.a").exists());

    // a wrong expected vector must fail the on-device comparison
    perturb_first(&dir.path().join("probs.expected.bin"), 1e-3);
    let o = run(bin().arg("verify").arg("--model").arg(&model).arg("--io").arg(&io).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn verify_without_io_runs_zero_input() {
    if !toolchain() {
        return;
    }
    let (dir, model, _) = exported();
    let out = dir.path().join("out");
    let o = run(bin().arg("verify").arg("--model").arg(&model).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn verify_accelerated_build() {
    if !toolchain() {
        return;
    }
    let (dir, model, io) = exported();
    let out = dir.path().join("out");
    let o = run(bin()
        .env("MICROFORGE_TEMPLATES", fixture_templates())
        .args(["verify", "--accel", "mac_engine", "--model"])
        .arg(&model)
        .arg("--io")
        .arg(&io)
        .arg("--out")
        .arg(&out));
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(out.join("crt/mock_accel.c").exists());
    assert!(out.join("tvm_model/include/tvm_crt.h").exists());
    assert!(out.join("tvm_model/source/mock_accel.c").exists());
    let script = fs::read_to_string(out.join("make.sh")).unwrap();
    assert!(script.contains("cp \"crt/mock_accel.c\" \"tvm_model/source/mock_accel.c\""));
}
