//! The gesture-recognition network and its synthetic "none" class data.
//!
//! Network: two shared depthwise filter stages (kernel 7, stride 2), a
//! 16-unit GRU, the last hidden state, and a dense + softmax classifier with
//! 21 outputs. Weights are random; only structure and numerics are checked.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::exec::{self, Exec};
use crate::interp::{Env, TensorValue};
use crate::model_format::{AttrValue, IoEntry, IoManifest, ModelGraph, OperatorNode, Param, TensorSpec};

pub const INPUT_NAME: &str = "imu";
pub const OUTPUT_NAME: &str = "probs";
pub const DEFAULT_NOISE_SIGMA: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GestureModelConfig {
    pub channels: usize,
    pub window_len: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub gru_hidden: usize,
    pub classes: usize,
}

impl Default for GestureModelConfig {
    fn default() -> Self {
        GestureModelConfig {
            channels: 6,
            window_len: 128,
            kernel_len: 7,
            stride: 2,
            gru_hidden: 16,
            classes: 21,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("invalid config: {0}")]
    Config(String),
}

impl GestureModelConfig {
    pub fn with_window(mut self, window_len: usize) -> Self {
        self.window_len = window_len;
        self
    }

    fn stage_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel_len).then(|| (len - self.kernel_len) / self.stride + 1)
    }

    /// Sequence length seen by the GRU.
    pub fn gru_steps(&self) -> Option<usize> {
        self.stage_len(self.window_len).and_then(|l| self.stage_len(l))
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let positive = [
            self.channels,
            self.window_len,
            self.kernel_len,
            self.stride,
            self.gru_hidden,
            self.classes,
        ];
        if positive.contains(&0) {
            return Err(ZooError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.gru_steps().is_none() {
            return Err(ZooError::Config(format!(
                "window of {} frames is too short for two stages of kernel {} / stride {}",
                self.window_len, self.kernel_len, self.stride
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, h, k, o) = (self.channels, self.gru_hidden, self.kernel_len, self.classes);
        2 * (k + 1) + (3 * h * c + 3 * h * h + 2 * 3 * h) + (h * o + o)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-0.5f32..=0.5)).collect()
}

/// conv1 -> conv2 -> gru -> last -> fc -> softmax, weights uniform in [-0.5, 0.5].
pub fn build_gesture_model(cfg: &GestureModelConfig, seed: u64) -> Result<ModelGraph, ZooError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, k, o) = (cfg.channels, cfg.gru_hidden, cfg.kernel_len, cfg.classes);
    let mut params = BTreeMap::new();
    let mut param = |name: &str, shape: Vec<usize>| {
        let n = shape.iter().product();
        params.insert(
            name.to_owned(),
            Param {
                shape,
                data: uniform(&mut rng, n),
            },
        );
        name.to_owned()
    };
    // fixed draw order keeps the weights stable for a seed
    param("conv1.kernel", vec![k]);
    param("conv1.bias", vec![1]);
    param("conv2.kernel", vec![k]);
    param("conv2.bias", vec![1]);
    param("gru.w_x", vec![3 * h, c]);
    param("gru.w_h", vec![3 * h, h]);
    param("gru.b_x", vec![3 * h]);
    param("gru.b_h", vec![3 * h]);
    param("fc.weight", vec![o, h]);
    param("fc.bias", vec![o]);

    let conv = |id: &str, input: &str| {
        OperatorNode::new(id, "conv1d_dw_shared", &[input])
            .with_params(&[&format!("{id}.kernel"), &format!("{id}.bias")])
            .with_attr("kernel_len", AttrValue::Int(k as i64))
            .with_attr("stride", AttrValue::Int(cfg.stride as i64))
    };
    let nodes = vec![
        conv("conv1", INPUT_NAME),
        conv("conv2", "conv1"),
        OperatorNode::new("gru", "gru", &["conv2"])
            .with_params(&["gru.w_x", "gru.w_h", "gru.b_x", "gru.b_h"])
            .with_attr("hidden", AttrValue::Int(h as i64)),
        OperatorNode::new("last", "last_timestep", &["gru"]),
        OperatorNode::new("fc", "dense", &["last"])
            .with_params(&["fc.weight", "fc.bias"])
            .with_attr("units", AttrValue::Int(o as i64)),
        OperatorNode::new(OUTPUT_NAME, "softmax", &["fc"]),
    ];
    Ok(ModelGraph {
        name: "gesture".into(),
        inputs: vec![TensorSpec::new(INPUT_NAME, vec![1, c, cfg.window_len])],
        outputs: vec![OUTPUT_NAME.into()],
        nodes,
        params,
    })
}

pub fn gen_none_class(cfg: &GestureModelConfig, seed: u64, n: usize) -> Vec<TensorValue> {
    gen_none_class_with(cfg, seed, n, DEFAULT_NOISE_SIGMA, Exec::default())
}

/// "None" gesture recordings: a random static offset per channel and
/// recording, uniform in [-1, 1], plus i.i.d. gaussian noise per frame.
/// Sample `i` only depends on `(seed, i)`.
pub fn gen_none_class_with(cfg: &GestureModelConfig, seed: u64, n: usize, sigma: f32, exec: Exec) -> Vec<TensorValue> {
    exec::map_range(exec, n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let noise = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
        let offsets: Vec<f32> = (0..cfg.channels).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let mut data = Vec::with_capacity(cfg.channels * cfg.window_len);
        for offset in offsets {
            for _ in 0..cfg.window_len {
                let jitter = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(offset + jitter);
            }
        }
        TensorValue::new(vec![1, cfg.channels, cfg.window_len], data)
    })
}

/// Input environment for one sample.
pub fn sample_env(sample: &TensorValue) -> Env {
    [(INPUT_NAME.to_owned(), sample.clone())].into()
}

/// Manifest with one generated input and, when given, the expected output.
pub fn sample_manifest(sample: &TensorValue, expected: Option<&TensorValue>) -> IoManifest {
    IoManifest {
        inputs: vec![IoEntry {
            name: INPUT_NAME.into(),
            shape: sample.shape.clone(),
            file: format!("{INPUT_NAME}.bin").into(),
            data: sample.data.clone(),
        }],
        expected_outputs: expected
            .map(|e| IoEntry {
                name: OUTPUT_NAME.into(),
                shape: e.shape.clone(),
                file: format!("{OUTPUT_NAME}.expected.bin").into(),
                data: e.data.clone(),
            })
            .into_iter()
            .collect(),
    }
}
