//! Network weights, optimizer state and the SMWT weight file.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use synreg_core::RngStream;

use crate::error::{NetError, Result};
use crate::unet::UNetConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-4;
/// Learning rate adopted after a diverging update.
pub const FALLBACK_LR: f64 = 1e-5;

const MAGIC: &[u8; 4] = b"SMWT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub lambda_reg: f64,
    pub int_steps: usize,
    pub iteration: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: DEFAULT_LR,
            lambda_reg: 1.0,
            int_steps: 5,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub config: UNetConfig,
    pub weights: Vec<Tensor>,
    pub adam: AdamState,
    pub train: TrainSettings,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: UNetConfig,
    train: TrainSettings,
    tensors: Vec<TensorEntry>,
}

impl NetState {
    fn with_weights(config: UNetConfig, train: TrainSettings, weights: Vec<Tensor>) -> Self {
        let zeros: Vec<Vec<f32>> = weights.iter().map(|t| vec![0.0; t.data.len()]).collect();
        NetState {
            config,
            weights,
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            train,
        }
    }

    /// All weights and biases zero.
    pub fn zeros(config: UNetConfig, train: TrainSettings) -> Result<Self> {
        config.validate()?;
        let weights = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(NetState::with_weights(config, train, weights))
    }

    /// Kernels uniform in `+-sqrt(6 / ((1 + slope^2) * fan_in))`, biases zero.
    pub fn init(config: UNetConfig, train: TrainSettings, rng: &mut RngStream) -> Result<Self> {
        let mut state = NetState::zeros(config, train)?;
        let slope = state.config.leaky_slope;
        for t in state.weights.iter_mut() {
            if !t.name.ends_with(".weight") {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
            for w in t.data.iter_mut() {
                *w = rng.uniform(-bound, bound)? as f32;
            }
        }
        Ok(state)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|t| t.data.len()).sum()
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.iter().find(|t| t.name == name)
    }

    /// One Adam update from `grads` (one slice per weight tensor). The
    /// update is staged and committed only if every new value is finite;
    /// otherwise the learning rate falls back to [`FALLBACK_LR`] and the
    /// update is recomputed. Returns whether that happened.
    pub fn adam_update(&mut self, grads: &[Vec<f32>]) -> Result<bool> {
        if grads.len() != self.weights.len() {
            return Err(NetError::Shape(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.weights.len()
            )));
        }
        let step = self.adam.step + 1;
        match self.staged_update(grads, step, self.train.lr) {
            Some(next) => {
                self.commit(next, step);
                Ok(false)
            }
            None if self.train.lr > FALLBACK_LR => {
                self.train.lr = FALLBACK_LR;
                let next = self
                    .staged_update(grads, step, FALLBACK_LR)
                    .ok_or_else(|| NetError::Divergence {
                        iteration: self.train.iteration,
                        reason: "non-finite update after learning-rate drop".into(),
                    })?;
                self.commit(next, step);
                Ok(true)
            }
            None => Err(NetError::Divergence {
                iteration: self.train.iteration,
                reason: "non-finite update".into(),
            }),
        }
    }

    #[allow(clippy::type_complexity)]
    fn staged_update(
        &self,
        grads: &[Vec<f32>],
        step: u64,
        lr: f64,
    ) -> Option<Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>> {
        let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let mut out = Vec::with_capacity(grads.len());
        for (k, g) in grads.iter().enumerate() {
            let w = &self.weights[k].data;
            let (m0, v0) = (&self.adam.m[k], &self.adam.v[k]);
            let mut w1 = Vec::with_capacity(w.len());
            let mut m1 = Vec::with_capacity(w.len());
            let mut v1 = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let m = ADAM_BETA1 * m0[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let v = ADAM_BETA2 * v0[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                let next = (w[i] as f64 - lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS)) as f32;
                let (m, v) = (m as f32, v as f32);
                if !(next.is_finite() && m.is_finite() && v.is_finite()) {
                    return None;
                }
                w1.push(next);
                m1.push(m);
                v1.push(v);
            }
            out.push((w1, m1, v1));
        }
        Some(out)
    }

    fn commit(&mut self, next: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>, step: u64) {
        for (k, (w, m, v)) in next.into_iter().enumerate() {
            self.weights[k].data = w;
            self.adam.m[k] = m;
            self.adam.v[k] = v;
        }
        self.adam.step = step;
    }

    /// Writes the SMWT container: magic, u32 LE manifest length, JSON
    /// manifest, then every tensor as little-endian f32 in manifest order.
    pub fn write_weights<W: Write>(&self, mut out: W) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            train: self.train.clone(),
            tensors: self
                .weights
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| NetError::Format(e.to_string()))?;
        let len =
            u32::try_from(json.len()).map_err(|_| NetError::Format("manifest too large".into()))?;
        out.write_all(MAGIC)?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&json)?;
        for t in &self.weights {
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            out.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Reads an SMWT container; optimizer moments start from zero.
    pub fn read_weights<R: Read>(mut input: R) -> Result<Self> {
        let fmt = |m: String| NetError::Format(m);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| fmt(e.to_string()))?;
        manifest.config.validate()?;
        let expected = manifest.config.param_shapes();
        if expected.len() != manifest.tensors.len() {
            return Err(fmt(format!(
                "{} tensors, configuration needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut weights = Vec::with_capacity(expected.len());
        for (entry, (name, shape)) in manifest.tensors.into_iter().zip(expected) {
            if entry.name != name || entry.shape != shape || entry.dtype != "f32" {
                return Err(fmt(format!(
                    "tensor {} {:?} {} where {name} {shape:?} f32 expected",
                    entry.name, entry.shape, entry.dtype
                )));
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            input.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fmt(format!("non-finite values in {name}")));
            }
            weights.push(Tensor { name, shape, data });
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(fmt(format!("{} trailing bytes", rest.len())));
        }
        Ok(NetState::with_weights(
            manifest.config,
            manifest.train,
            weights,
        ))
    }
}
