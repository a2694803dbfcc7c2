//! Shared test support: a brute-force oracle written against plain
//! multi-dimensional indexing, and seeded generators for random op
//! instances, modules and accelerator registries.

#![allow(dead_code)]

use microforge::accel::{AccelRegistry, AcceleratorDesc, GraphPass, Pattern};
use microforge::hir::{infer_shapes, HirBuilder, HirModule, KindTag, OpKind, ValueId};
use microforge::interp::{Env, TensorValue};
use microforge::planner::{Interval, Liveness};
use microforge::tir::TirPass;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn values(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorValue {
    let n = shape.iter().product();
    TensorValue::new(shape, values(rng, n, 2.0))
}

// ---------------------------------------------------------------- oracle

fn at3(t: &TensorValue, n: usize, c: usize, l: usize) -> f32 {
    t.data[(n * t.shape[1] + c) * t.shape[2] + l]
}

fn at2(t: &TensorValue, r: usize, c: usize) -> f32 {
    t.data[r * t.shape[1] + c]
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct transcription of each op's definition.
// plain index loops on purpose, this mirrors the math rather than the implementation
#[allow(clippy::needless_range_loop)]
pub fn oracle(kind: &OpKind, ins: &[&TensorValue]) -> TensorValue {
    match kind {
        OpKind::Dense { units } => {
            let x = ins[0];
            let cols = *x.shape.last().unwrap();
            let rows = x.data.len() / cols;
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = *units;
            let mut data = Vec::new();
            for r in 0..rows {
                for u in 0..*units {
                    let mut s = ins[2].data[u];
                    for j in 0..cols {
                        s += at2(ins[1], u, j) * x.data[r * cols + j];
                    }
                    data.push(s);
                }
            }
            TensorValue::new(shape, data)
        }
        OpKind::Conv1dDwShared { kernel_len, stride } => {
            let x = ins[0];
            let (n, c, l) = (x.shape[0], x.shape[1], x.shape[2]);
            let out_len = (l - kernel_len) / stride + 1;
            let mut data = Vec::new();
            for b in 0..n {
                for ch in 0..c {
                    for t in 0..out_len {
                        let mut s = ins[2].data[0];
                        for k in 0..*kernel_len {
                            s += ins[1].data[k] * at3(x, b, ch, t * stride + k);
                        }
                        data.push(s);
                    }
                }
            }
            TensorValue::new(vec![n, c, out_len], data)
        }
        OpKind::Gru { hidden } => {
            let h = *hidden;
            let x = ins[0];
            let (c, steps) = (x.shape[1], x.shape[2]);
            let (wx, wh, bx, bh) = (ins[1], ins[2], &ins[3].data, &ins[4].data);
            let mut state = vec![0.0f32; h];
            let mut seq = vec![vec![0.0f32; steps]; h];
            for t in 0..steps {
                let gate = |g: usize, state: &[f32]| {
                    let mut a = bx[g];
                    for ch in 0..c {
                        a += at2(wx, g, ch) * at3(x, 0, ch, t);
                    }
                    let mut b = bh[g];
                    for j in 0..h {
                        b += at2(wh, g, j) * state[j];
                    }
                    (a, b)
                };
                let mut next = vec![0.0f32; h];
                for i in 0..h {
                    let (xr, hr) = gate(i, &state);
                    let (xz, hz) = gate(h + i, &state);
                    let (xn, hn) = gate(2 * h + i, &state);
                    let r = logistic(xr + hr);
                    let z = logistic(xz + hz);
                    let cand = (xn + r * hn).tanh();
                    next[i] = (1.0 - z) * cand + z * state[i];
                }
                state = next;
                for i in 0..h {
                    seq[i][t] = state[i];
                }
            }
            TensorValue::new(vec![1, h, steps], seq.concat())
        }
        OpKind::Softmax => {
            let x = ins[0];
            let cols = *x.shape.last().unwrap();
            let mut data = Vec::new();
            for row in x.data.chunks(cols) {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
                let total: f32 = e.iter().sum();
                data.extend(e.iter().map(|v| v / total));
            }
            TensorValue::new(x.shape.clone(), data)
        }
        OpKind::Relu => unary(ins[0], |v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Sigmoid => unary(ins[0], logistic),
        OpKind::Tanh => unary(ins[0], f32::tanh),
        OpKind::Add => binary(ins, |a, b| a + b),
        OpKind::Sub => binary(ins, |a, b| a - b),
        OpKind::Mul => binary(ins, |a, b| a * b),
        OpKind::Reshape { new_shape } => TensorValue::new(new_shape.clone(), ins[0].data.clone()),
        OpKind::LastTimestep => {
            let x = ins[0];
            let (n, c, l) = (x.shape[0], x.shape[1], x.shape[2]);
            let mut data = Vec::new();
            for b in 0..n {
                for ch in 0..c {
                    data.push(at3(x, b, ch, l - 1));
                }
            }
            TensorValue::new(vec![n, c], data)
        }
        OpKind::Input { .. } | OpKind::Const { .. } => panic!("sources have no semantics"),
    }
}

fn unary(x: &TensorValue, f: impl Fn(f32) -> f32) -> TensorValue {
    TensorValue::new(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
}

fn binary(ins: &[&TensorValue], f: impl Fn(f32, f32) -> f32) -> TensorValue {
    let data = ins[0].data.iter().zip(&ins[1].data).map(|(&a, &b)| f(a, b)).collect();
    TensorValue::new(ins[0].shape.clone(), data)
}

// ---------------------------------------------------------------- instances

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// A random, well-formed instance of `tag`: the op plus all its operands.
pub fn random_instance(tag: KindTag, rng: &mut ChaCha8Rng) -> (OpKind, Vec<TensorValue>) {
    match tag {
        KindTag::Dense => {
            let (rows, cols, units) = (rng.random_range(1..=3), rng.random_range(1..=8), rng.random_range(1..=8));
            (
                OpKind::Dense { units },
                vec![
                    tensor(rng, vec![rows, cols]),
                    tensor(rng, vec![units, cols]),
                    tensor(rng, vec![units]),
                ],
            )
        }
        KindTag::Conv1dDwShared => {
            let k = rng.random_range(1..=5);
            let s = rng.random_range(1..=3);
            let l = k + rng.random_range(0..=12);
            let c = rng.random_range(1..=4);
            (
                OpKind::Conv1dDwShared { kernel_len: k, stride: s },
                vec![tensor(rng, vec![1, c, l]), tensor(rng, vec![k]), tensor(rng, vec![1])],
            )
        }
        KindTag::Gru => {
            let (c, t, h) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
            (
                OpKind::Gru { hidden: h },
                vec![
                    tensor(rng, vec![1, c, t]),
                    tensor(rng, vec![3 * h, c]),
                    tensor(rng, vec![3 * h, h]),
                    tensor(rng, vec![3 * h]),
                    tensor(rng, vec![3 * h]),
                ],
            )
        }
        KindTag::Softmax => {
            let shape = vec![rng.random_range(1..=3), rng.random_range(1..=8)];
            (OpKind::Softmax, vec![tensor(rng, shape)])
        }
        KindTag::Relu | KindTag::Sigmoid | KindTag::Tanh => {
            let kind = match tag {
                KindTag::Relu => OpKind::Relu,
                KindTag::Sigmoid => OpKind::Sigmoid,
                _ => OpKind::Tanh,
            };
            let shape = small_shape(rng);
            (kind, vec![tensor(rng, shape)])
        }
        KindTag::Add | KindTag::Sub | KindTag::Mul => {
            let kind = match tag {
                KindTag::Add => OpKind::Add,
                KindTag::Sub => OpKind::Sub,
                _ => OpKind::Mul,
            };
            let shape = small_shape(rng);
            (kind, vec![tensor(rng, shape.clone()), tensor(rng, shape)])
        }
        KindTag::Reshape => {
            let shape = small_shape(rng);
            let n: usize = shape.iter().product();
            let new_shape = if rng.random_bool(0.5) { vec![n] } else { vec![1, n, 1] };
            (OpKind::Reshape { new_shape }, vec![tensor(rng, shape)])
        }
        KindTag::LastTimestep => {
            let shape = vec![1, rng.random_range(1..=4), rng.random_range(1..=6)];
            (OpKind::LastTimestep, vec![tensor(rng, shape)])
        }
        KindTag::Input | KindTag::Const => panic!("no instances of source kinds"),
    }
}

// ---------------------------------------------------------------- modules

/// A random shape-inferred module over every compute kind, plus input
/// values for it. Ops only consume values whose shapes fit.
pub fn random_module(seed: u64) -> (HirModule, Env) {
    let mut rng = rng(seed);
    let mut b = HirBuilder::new();
    let mut pool: Vec<(ValueId, Vec<usize>)> = Vec::new();
    let mut env = Env::new();
    let mut inputs = Vec::new();
    let n_inputs = rng.random_range(1..=2);
    for i in 0..n_inputs {
        let shape = if i == 0 {
            vec![1, rng.random_range(1..=3), rng.random_range(4..=12)]
        } else {
            vec![1, rng.random_range(1..=6)]
        };
        let id = b.add(format!("in{i}"), OpKind::Input { shape: shape.clone() }, vec![]).unwrap();
        env.insert(id.clone(), tensor(&mut rng, shape.clone()));
        inputs.push(id.clone());
        pool.push((id, shape));
    }
    let n_ops = rng.random_range(1..=8);
    let mut produced = Vec::new();
    let mut attempts = 0;
    while produced.len() < n_ops && attempts < 200 {
        attempts += 1;
        let tag = *KindTag::COMPUTE.choose(&mut rng).unwrap();
        let (src, shape) = pool.choose(&mut rng).unwrap().clone();
        let id = format!("v{}", produced.len());
        let konst = |b: &mut HirBuilder, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>| {
            let n = shape.iter().product();
            b.add_const(format!("{id}.{name}"), shape, values(rng, n, 1.0)).unwrap()
        };
        let (kind, operands) = match tag {
            KindTag::Dense if shape.len() == 2 => {
                let units = rng.random_range(1..=6);
                let w = konst(&mut b, &mut rng, "w", vec![units, shape[1]]);
                let bias = konst(&mut b, &mut rng, "b", vec![units]);
                (OpKind::Dense { units }, vec![src, w, bias])
            }
            KindTag::Conv1dDwShared if shape.len() == 3 && shape[2] >= 2 => {
                let k = rng.random_range(1..=shape[2].min(4));
                let stride = rng.random_range(1..=2);
                let kern = konst(&mut b, &mut rng, "k", vec![k]);
                let bias = konst(&mut b, &mut rng, "b", vec![1]);
                (OpKind::Conv1dDwShared { kernel_len: k, stride }, vec![src, kern, bias])
            }
            KindTag::Gru if shape.len() == 3 && shape[0] == 1 => {
                let h = rng.random_range(1..=4);
                let c = shape[1];
                let wx = konst(&mut b, &mut rng, "wx", vec![3 * h, c]);
                let wh = konst(&mut b, &mut rng, "wh", vec![3 * h, h]);
                let bx = konst(&mut b, &mut rng, "bx", vec![3 * h]);
                let bh = konst(&mut b, &mut rng, "bh", vec![3 * h]);
                (OpKind::Gru { hidden: h }, vec![src, wx, wh, bx, bh])
            }
            KindTag::LastTimestep if shape.len() == 3 => (OpKind::LastTimestep, vec![src]),
            KindTag::Softmax => (OpKind::Softmax, vec![src]),
            KindTag::Relu => (OpKind::Relu, vec![src]),
            KindTag::Sigmoid => (OpKind::Sigmoid, vec![src]),
            KindTag::Tanh => (OpKind::Tanh, vec![src]),
            KindTag::Reshape if shape.len() != 2 || shape[0] == 1 => {
                let n: usize = shape.iter().product();
                let new_shape = if shape.len() == 2 { vec![1, 1, n] } else { vec![1, n] };
                (OpKind::Reshape { new_shape }, vec![src])
            }
            KindTag::Add | KindTag::Sub | KindTag::Mul => {
                let same: Vec<&ValueId> = pool.iter().filter(|(_, s)| *s == shape).map(|(v, _)| v).collect();
                let other = (*same.choose(&mut rng).unwrap()).clone();
                let kind = match tag {
                    KindTag::Add => OpKind::Add,
                    KindTag::Sub => OpKind::Sub,
                    _ => OpKind::Mul,
                };
                (kind, vec![src, other])
            }
            _ => continue,
        };
        let id = b.add(id, kind, operands).unwrap();
        let shape = b.shape_of(&id).unwrap().to_vec();
        pool.push((id.clone(), shape));
        produced.push(id);
    }
    let mut outputs = vec![produced.last().cloned().unwrap_or_else(|| inputs[0].clone())];
    for v in &produced {
        if !outputs.contains(v) && rng.random_bool(0.2) {
            outputs.push(v.clone());
        }
    }
    let m = infer_shapes(&b.finish(format!("rand{seed}"), inputs, outputs)).unwrap();
    (m, env)
}

/// A random registry: one to three accelerators, each with a few patterns
/// of one or two kinds, random priorities and occasionally a guard or a
/// constant-folding TIR pass.
pub fn random_registry(seed: u64) -> AccelRegistry {
    let mut rng = rng(seed ^ 0x5eed);
    let mut reg = AccelRegistry::new();
    for a in 0..rng.random_range(1..=3) {
        let mut desc = AcceleratorDesc::new(&format!("acc{a}"));
        for p in 0..rng.random_range(1..=3) {
            let len = rng.random_range(1..=2);
            let kinds: Vec<KindTag> = (0..len).map(|_| *KindTag::COMPUTE.choose(&mut rng).unwrap()).collect();
            let mut pattern = Pattern::new(&format!("p{p}"), &kinds).with_priority(rng.random_range(0..=3));
            if rng.random_bool(0.25) {
                let limit = rng.random_range(1..=64usize);
                pattern = pattern.with_guard(move |op, _| op.shape().is_some_and(|s| s.iter().product::<usize>() <= limit));
            }
            desc = desc.with_pattern(pattern);
        }
        desc = desc.with_graph_pass(GraphPass::identity());
        if rng.random_bool(0.5) {
            desc = desc.with_tir_pass(TirPass::fold_constants());
        }
        reg = reg.register(desc).unwrap();
    }
    reg
}

/// Random liveness intervals and byte sizes for the planner.
pub fn random_plan_instance(seed: u64) -> (Liveness, std::collections::BTreeMap<String, usize>) {
    let mut rng = rng(seed);
    let n = rng.random_range(0..=24);
    let steps = rng.random_range(1..=30);
    let mut live = Liveness::new();
    let mut sizes = std::collections::BTreeMap::new();
    for i in 0..n {
        let first = rng.random_range(0..steps);
        let last = rng.random_range(first..steps);
        let name = format!("b{i}");
        live.insert(name.clone(), Interval { first, last });
        sizes.insert(name, rng.random_range(1..=600));
    }
    (live, sizes)
}

pub fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m, d| if m.is_nan() || d <= m { m } else { d })
}
