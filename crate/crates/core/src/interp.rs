//! Reference interpreter over the HIR.
//!
//! All arithmetic is single precision, accumulated in the same order the
//! lowered loop nests use, so interpreter output and the generated C agree
//! closely. Op targets are ignored: accelerator-assigned ops run the same math.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::exec::{self, Exec};
use crate::hir::{self, HirError, HirModule, OpKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        TensorValue { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorValue { shape, data: vec![0.0; n] }
    }

    pub fn elems(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("missing value for input `{0}`")]
    MissingInput(String),
    #[error("input `{name}`: expected shape {expected:?}, got {actual:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{kind}: bad operands: {message}")]
    Operands { kind: &'static str, message: String },
    #[error(transparent)]
    Hir(#[from] HirError),
}

pub type Env = BTreeMap<String, TensorValue>;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Evaluates one op. `inputs` holds every operand, parameters included.
pub fn interp_op(kind: &OpKind, inputs: &[&TensorValue]) -> Result<TensorValue, InterpError> {
    let tag = kind.tag();
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape.as_slice()).collect();
    let out_shape = hir::infer_op_shape(tag.snake_name(), kind, &shapes).map_err(|e| InterpError::Operands {
        kind: tag.snake_name(),
        message: e.to_string(),
    })?;
    let mut out = TensorValue::zeros(out_shape);

    match kind {
        OpKind::Input { .. } => {
            return Err(InterpError::Operands {
                kind: "input",
                message: "inputs are bound by the caller".into(),
            })
        }
        OpKind::Const { shape, data } => {
            return Ok(TensorValue::new(shape.clone(), data.to_vec()));
        }
        OpKind::Dense { units } => {
            let (x, w, b) = (&inputs[0].data, &inputs[1].data, &inputs[2].data);
            let cols = *inputs[0].shape.last().unwrap();
            for (row, xr) in x.chunks_exact(cols).enumerate() {
                for u in 0..*units {
                    let mut acc = b[u];
                    for j in 0..cols {
                        acc += w[u * cols + j] * xr[j];
                    }
                    out.data[row * units + u] = acc;
                }
            }
        }
        OpKind::Conv1dDwShared { kernel_len, stride } => {
            let (x, k, b) = (&inputs[0].data, &inputs[1].data, inputs[2].data[0]);
            let len = inputs[0].shape[2];
            let out_len = out.shape[2];
            for (ch, xs) in x.chunks_exact(len).enumerate() {
                for t in 0..out_len {
                    let mut acc = b;
                    for i in 0..*kernel_len {
                        acc += k[i] * xs[t * stride + i];
                    }
                    out.data[ch * out_len + t] = acc;
                }
            }
        }
        OpKind::Gru { hidden } => {
            let h = *hidden;
            let (x, wx, wh, bx, bh) = (
                &inputs[0].data,
                &inputs[1].data,
                &inputs[2].data,
                &inputs[3].data,
                &inputs[4].data,
            );
            let (c, steps) = (inputs[0].shape[1], inputs[0].shape[2]);
            let mut state = vec![0.0f32; h];
            let mut gx = vec![0.0f32; 3 * h];
            let mut gh = vec![0.0f32; 3 * h];
            for t in 0..steps {
                for g in 0..3 * h {
                    let mut acc = bx[g];
                    for ch in 0..c {
                        acc += wx[g * c + ch] * x[ch * steps + t];
                    }
                    gx[g] = acc;
                    let mut acc = bh[g];
                    for j in 0..h {
                        acc += wh[g * h + j] * state[j];
                    }
                    gh[g] = acc;
                }
                let next: Vec<f32> = (0..h)
                    .map(|i| {
                        let r = sigmoid(gx[i] + gh[i]);
                        let z = sigmoid(gx[h + i] + gh[h + i]);
                        let n = (gx[2 * h + i] + r * gh[2 * h + i]).tanh();
                        (1.0 - z) * n + z * state[i]
                    })
                    .collect();
                for (i, v) in next.into_iter().enumerate() {
                    state[i] = v;
                    out.data[i * steps + t] = v;
                }
            }
        }
        OpKind::Softmax => {
            let cols = *inputs[0].shape.last().unwrap();
            for (xr, or) in inputs[0].data.chunks_exact(cols).zip(out.data.chunks_exact_mut(cols)) {
                let mut max = xr[0];
                for &v in xr {
                    max = max.max(v);
                }
                let mut sum = 0.0f32;
                for (o, &v) in or.iter_mut().zip(xr) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in or.iter_mut() {
                    *o /= sum;
                }
            }
        }
        OpKind::Relu => map_unary(&mut out, inputs[0], |v| v.max(0.0)),
        OpKind::Sigmoid => map_unary(&mut out, inputs[0], sigmoid),
        OpKind::Tanh => map_unary(&mut out, inputs[0], f32::tanh),
        OpKind::Add => map_binary(&mut out, inputs, |a, b| a + b),
        OpKind::Sub => map_binary(&mut out, inputs, |a, b| a - b),
        OpKind::Mul => map_binary(&mut out, inputs, |a, b| a * b),
        OpKind::Reshape { .. } => out.data.copy_from_slice(&inputs[0].data),
        OpKind::LastTimestep => {
            let steps = inputs[0].shape[2];
            for (o, row) in out.data.iter_mut().zip(inputs[0].data.chunks_exact(steps)) {
                *o = row[steps - 1];
            }
        }
    }
    Ok(out)
}

fn map_unary(out: &mut TensorValue, x: &TensorValue, f: impl Fn(f32) -> f32) {
    for (o, &v) in out.data.iter_mut().zip(&x.data) {
        *o = f(v);
    }
}

fn map_binary(out: &mut TensorValue, inputs: &[&TensorValue], f: impl Fn(f32, f32) -> f32) {
    for ((o, &a), &b) in out.data.iter_mut().zip(&inputs[0].data).zip(&inputs[1].data) {
        *o = f(a, b);
    }
}

/// Runs the module on named inputs and returns every module output.
pub fn interp(m: &HirModule, inputs: &Env) -> Result<Env, InterpError> {
    let values = interp_all(m, inputs)?;
    Ok(m.outputs
        .iter()
        .map(|o| (o.clone(), values[o.as_str()].clone()))
        .collect())
}

/// Like [`interp`], but returns the value of every op.
pub fn interp_all(m: &HirModule, inputs: &Env) -> Result<HashMap<String, TensorValue>, InterpError> {
    let mut values: HashMap<String, TensorValue> = HashMap::new();
    for op in &m.ops {
        match &op.kind {
            OpKind::Input { shape } => {
                let v = inputs
                    .get(&op.id)
                    .ok_or_else(|| InterpError::MissingInput(op.id.clone()))?;
                if &v.shape != shape {
                    return Err(InterpError::InputShape {
                        name: op.id.clone(),
                        expected: shape.clone(),
                        actual: v.shape.clone(),
                    });
                }
                values.insert(op.id.clone(), v.clone());
            }
            OpKind::Const { shape, data } => {
                values.insert(op.id.clone(), TensorValue::new(shape.clone(), data.to_vec()));
            }
            _ => {}
        }
    }
    for id in hir::topo_schedule(m)? {
        let op = m.op(&id).expect("scheduled op exists");
        let args: Vec<&TensorValue> = op.inputs.iter().map(|v| &values[v.as_str()]).collect();
        let out = interp_op(&op.kind, &args)?;
        values.insert(id, out);
    }
    Ok(values)
}

/// Interprets many input sets, in parallel when `exec` allows it.
pub fn interp_batch(m: &HirModule, batch: &[Env], exec: Exec) -> Vec<Result<Env, InterpError>> {
    exec::map(exec, batch, |inputs| interp(m, inputs))
}
