//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed. Needs no C toolchain.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use microforge::accel::partition;
use microforge::driver::{compile, to_hir, CompileOptions};
use microforge::exec::Exec;
use microforge::frontend::default_convert_map;
use microforge::hir::{HirModule, KindTag};
use microforge::interp::{interp, interp_op, Env};
use microforge::planner::{align_up, plan};
use microforge::zoo::{build_gesture_model, GestureModelConfig};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn parameter_count() -> Outcome {
    let cfg = GestureModelConfig::default();
    let g = build_gesture_model(&cfg, 0).map_err(|e| e.to_string())?;
    // 2 filters x (7 taps + bias), GRU 3*16*(6+16) weights + 2*48 biases, 21x16 + 21 classifier
    let by_hand = 2 * (7 + 1) + (3 * 16 * (6 + 16) + 2 * 3 * 16) + (21 * 16 + 21);
    let counted: usize = g.params.values().map(|p| p.data.len()).sum();
    if counted == 1525 && by_hand == 1525 && g.param_count() == 1525 {
        Ok("1525 parameters".into())
    } else {
        Err(format!("counted {counted}, param_count {}, expected 1525", g.param_count()))
    }
}

fn data_rate() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for len in [512usize, 1024, 4096] {
        let cfg = GestureModelConfig::default().with_window(len);
        let g = build_gesture_model(&cfg, 1).map_err(|e| e.to_string())?;
        let m = to_hir(&g, &default_convert_map()).map_err(|e| e.to_string())?;
        let steps = m.shape_of("gru").ok_or("gru has no shape")?[2];
        let within = steps + 3 >= len / 4 && steps <= len / 4;
        ok &= within;
        details.push(format!("L={len}: {steps} steps, band [{}, {}]", len / 4 - 3, len / 4));
    }
    let text = details.join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = rng(2024);
    let mut worst = 0.0f32;
    for tag in KindTag::COMPUTE {
        for i in 0..100 {
            let (kind, operands) = random_instance(tag, &mut rng);
            let refs: Vec<_> = operands.iter().collect();
            let got = interp_op(&kind, &refs).map_err(|e| format!("{tag:?} #{i}: {e}"))?;
            let want = oracle(&kind, &refs);
            if got.shape != want.shape {
                return Err(format!("{tag:?} #{i}: shape {:?} vs {:?}", got.shape, want.shape));
            }
            let d = max_abs_diff(&got.data, &want.data);
            if d.is_nan() || d > 1e-6 {
                return Err(format!("{tag:?} #{i}: max abs diff {d:e}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("12 kinds x 100 instances, worst diff {worst:e}"))
}

fn partition_neutrality() -> Outcome {
    let mut offloaded = 0;
    for seed in 0..50u64 {
        let (m, env) = random_module(seed);
        let registry = random_registry(seed);
        let (pm, report) = partition(&m, &registry).map_err(|e| format!("seed {seed}: {e}"))?;
        offloaded += report.accel_count();
        let run = |m: &HirModule, env: &Env| interp(m, env).map_err(|e| format!("seed {seed}: {e}"));
        let (a, b) = (run(&m, &env)?, run(&pm, &env)?);
        if a.keys().ne(b.keys()) {
            return Err(format!("seed {seed}: different output sets"));
        }
        for (k, v) in &a {
            if v.shape != b[k].shape || !same_bits(&v.data, &b[k].data) {
                return Err(format!("seed {seed}: output `{k}` differs"));
            }
        }
    }
    Ok(format!("50 modules, {offloaded} ops offloaded in total"))
}

fn planner_soundness() -> Outcome {
    for seed in 0..1000u64 {
        let (live, sizes) = random_plan_instance(seed);
        let p = plan(&live, &sizes);
        let total: usize = sizes.values().map(|&s| align_up(s)).sum();
        if p.arena_bytes > total {
            return Err(format!("seed {seed}: arena {} > {total}", p.arena_bytes));
        }
        let placed: Vec<(&String, usize, usize)> = sizes.iter().map(|(k, &s)| (k, p.offsets[k], s)).collect();
        for (i, a) in placed.iter().enumerate() {
            if a.1 % 8 != 0 || a.1 + a.2 > p.arena_bytes {
                return Err(format!("seed {seed}: `{}` misplaced", a.0));
            }
            for b in &placed[i + 1..] {
                let (la, lb) = (live[a.0], live[b.0]);
                let concurrent = la.first <= lb.last && lb.first <= la.last;
                let bytes_overlap = a.1 < b.1 + b.2 && b.1 < a.1 + a.2;
                if concurrent && bytes_overlap {
                    return Err(format!("seed {seed}: `{}` and `{}` overlap", a.0, b.0));
                }
            }
        }
    }
    Ok("1000 instances".into())
}

fn determinism() -> Outcome {
    let g = build_gesture_model(&GestureModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let tree = |exec: Exec| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let opts = CompileOptions {
            exec,
            ..Default::default()
        };
        Ok(compile(&g, None, &opts).map_err(|e| e.to_string())?.files)
    };
    let first = tree(Exec::Parallel)?;
    let second = tree(Exec::Parallel)?;
    let sequential = tree(Exec::Sequential)?;
    if first == second && first == sequential {
        let bytes: usize = first.values().map(Vec::len).sum();
        Ok(format!("{} files, {bytes} bytes", first.len()))
    } else {
        Err("output trees differ".into())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        ("parameter count", parameter_count),
        ("data-rate reduction", data_rate),
        ("oracle equivalence", oracle_equivalence),
        ("partition neutrality", partition_neutrality),
        ("planner soundness", planner_soundness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  {name:<22} {detail} ({ms} ms)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<22} {detail} ({ms} ms)");
            }
        }
    }
    println!("{} of 6 criteria passed", 6 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
