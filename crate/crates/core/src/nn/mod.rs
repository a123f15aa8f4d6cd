//! Feed-forward noise predictor with a sinusoidal embedding of the noise level.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major as `[n_in][n_out]` followed by its bias, so the layer input is the
//! row vector on the left. The first layer's input is the data coordinates
//! followed by the embedding.

mod adam;
pub mod checkpoint;
mod ema;
pub mod kernel;

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{Denoiser, Trainable};
use crate::math::{LogSnr, NoiseSchedule, ScheduleSpec};
use crate::rng;

pub use adam::{default_lr, Adam, AdamConfig};
pub use ema::Ema;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("EMA decay must lie in [0, 1), got {0}")]
    EmaDecay(f64),
    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
}

impl Activation {
    /// Overwrites `z` with the activation; fills `deriv` with its derivative
    /// when given.
    fn apply_slice(self, z: &mut [f64], deriv: Option<&mut [f64]>) {
        match self {
            Activation::Relu => {
                if let Some(d) = deriv {
                    for (d, &v) in d.iter_mut().zip(z.iter()) {
                        *d = if v > 0.0 { 1.0 } else { 0.0 };
                    }
                }
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Activation::Silu => {
                let mut s = vec![0.0; z.len()];
                kernel::sigmoid_slice(z, &mut s);
                if let Some(d) = deriv {
                    for ((d, &v), &sv) in d.iter_mut().zip(z.iter()).zip(&s) {
                        *d = sv * (1.0 + v * (1.0 - sv));
                    }
                }
                z.iter_mut().zip(&s).for_each(|(v, sv)| *v *= sv);
            }
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        let mut v = [z];
        self.apply_slice(&mut v, None);
        v[0]
    }
}

/// `[sin(w_i v)..., cos(w_i v)...]` with `w_i = freq_base^(-i / (embed_dim / 2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub embed_dim: usize,
    pub freq_base: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            freq_base: 10_000.0,
        }
    }
}

impl TimeEmbedding {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(NnError::Architecture(format!(
                "embed_dim must be positive and even, got {}",
                self.embed_dim
            )));
        }
        if !(self.freq_base > 0.0 && self.freq_base.is_finite()) {
            return Err(NnError::Architecture(format!("freq_base must be positive, got {}", self.freq_base)));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.embed_dim / 2;
        (0..half)
            .map(|i| self.freq_base.powf(-(i as f64) / half as f64))
            .collect()
    }

    pub fn embed_into(&self, v: f64, freqs: &[f64], out: &mut [f64]) {
        let half = freqs.len();
        for (i, w) in freqs.iter().enumerate() {
            let (s, c) = (w * v).sin_cos();
            out[i] = s;
            out[half + i] = c;
        }
    }

    pub fn embed(&self, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        self.embed_into(v, &self.frequencies(), &mut out);
        out
    }
}

/// Sinusoidal features of each input coordinate, appended to the raw
/// coordinates: `sin(scale w_i x_j), cos(scale w_i x_j)` with
/// `w_i = 10000^(-i / (frequencies - 1))`. Lets a small MLP resolve structure
/// much finer than the data range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputEncoding {
    pub frequencies: usize,
    pub scale: f64,
}

impl InputEncoding {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.frequencies < 2 {
            return Err(NnError::Architecture(format!(
                "input encoding needs at least 2 frequencies, got {}",
                self.frequencies
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(NnError::Architecture(format!("input encoding scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    fn angular(&self) -> Vec<f64> {
        let k = self.frequencies;
        (0..k)
            .map(|i| self.scale * (-(10_000f64.ln()) * i as f64 / (k - 1) as f64).exp())
            .collect()
    }

    /// Width of the encoded input for `data_dim` coordinates.
    pub fn width(&self, data_dim: usize) -> usize {
        data_dim * (1 + 2 * self.frequencies)
    }
}

/// What the embedding sees: the log-SNR itself, or the (continuous) timestep
/// of a schedule that maps to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Conditioning {
    LogSnr,
    Timestep { schedule: ScheduleSpec },
}

impl Default for Conditioning {
    fn default() -> Self {
        Conditioning::Timestep {
            schedule: ScheduleSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
    pub conditioning: Conditioning,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_encoding: Option<InputEncoding>,
}

impl MlpArch {
    /// The default 2-D network: embed 64, hidden `[128, 128, 128]`, SiLU.
    pub fn default_for(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embedding: TimeEmbedding::default(),
            conditioning: Conditioning::default(),
            input_encoding: None,
        }
    }

    /// Width of the data part of the first layer's input.
    pub fn input_width(&self) -> usize {
        self.input_encoding.map_or(self.data_dim, |e| e.width(self.data_dim))
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_width() + self.embedding.embed_dim];
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.data_dim == 0 {
            return Err(NnError::Architecture("data_dim must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(NnError::Architecture("hidden widths must be positive".into()));
        }
        if let Some(e) = &self.input_encoding {
            e.validate()?;
        }
        self.embedding.validate()
    }
}

/// `sum_l (d_l d_{l+1} + d_{l+1})`.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    arch: MlpArch,
    params: Vec<f64>,
    layers: Vec<LayerSlot>,
    freqs: Vec<f64>,
    input_freqs: Vec<f64>,
    schedule: Option<NoiseSchedule>,
}

/// Rows per work unit. Fixed so that gradient reductions do not depend on the
/// number of threads.
const CHUNK_ROWS: usize = 64;

impl MlpDenoiser {
    pub fn zeros(arch: MlpArch) -> Result<Self, NnError> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let n = param_count(&dims);
        Self::from_params(arch, vec![0.0; n])
    }

    /// Kaiming-uniform weights (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`), zero biases.
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self, NnError> {
        let mut model = Self::zeros(arch)?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        for l in 0..model.layers.len() {
            let slot = model.layers[l];
            let bound = (6.0 / slot.n_in as f64).sqrt();
            for w in &mut model.params[slot.w..slot.b] {
                *w = r.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self, NnError> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let expected = param_count(&dims);
        if params.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFinite(i));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            layers.push(LayerSlot {
                n_in: w[0],
                n_out: w[1],
                w: off,
                b: off + w[0] * w[1],
            });
            off += w[0] * w[1] + w[1];
        }
        let schedule = match &arch.conditioning {
            Conditioning::LogSnr => None,
            Conditioning::Timestep { schedule } => Some(
                schedule
                    .build()
                    .map_err(|e| NnError::Architecture(format!("schedule: {e}")))?,
            ),
        };
        let freqs = arch.embedding.frequencies();
        let input_freqs = arch.input_encoding.map_or(Vec::new(), |e| e.angular());
        Ok(Self {
            arch,
            params,
            layers,
            freqs,
            input_freqs,
            schedule,
        })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.arch.layer_dims()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.w..s.b]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        &mut self.params[s.w..s.b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.b..s.b + s.n_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.layers[l];
        &mut self.params[s.b..s.b + s.n_out]
    }

    /// Copies parameters from `src` (e.g. an EMA shadow).
    pub fn set_params(&mut self, src: &[f64]) -> Result<(), NnError> {
        if src.len() != self.params.len() {
            return Err(NnError::ParamCount {
                expected: self.params.len(),
                got: src.len(),
            });
        }
        if let Some(i) = src.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFinite(i));
        }
        self.params.copy_from_slice(src);
        Ok(())
    }

    pub fn with_params(&self, src: &[f64]) -> Result<Self, NnError> {
        let mut m = self.clone();
        m.set_params(src)?;
        Ok(m)
    }

    /// The scalar fed to the embedding for a given noise level.
    pub fn conditioning_value(&self, alpha: LogSnr) -> f64 {
        match &self.schedule {
            None => alpha.value(),
            Some(s) => s.timestep_for(alpha),
        }
    }

    pub fn forward(&self, x: &[f64], alpha: LogSnr) -> Vec<f64> {
        self.predict(x, alpha)
    }

    /// First-layer pre-activations: bias, then embedding rows, then data rows.
    /// The embedding part is shared between rows with equal conditioning.
    /// Raw coordinates followed by their sinusoidal features, per row.
    fn encode_inputs(&self, xs: &[f64]) -> Vec<f64> {
        let d = self.arch.data_dim;
        let k = self.input_freqs.len();
        let width = d * (1 + 2 * k);
        let mut out = vec![0.0; xs.len() / d * width];
        for (x, row) in xs.chunks_exact(d).zip(out.chunks_exact_mut(width)) {
            row[..d].copy_from_slice(x);
            for (j, &v) in x.iter().enumerate() {
                let base = d + j * 2 * k;
                for (i, w) in self.input_freqs.iter().enumerate() {
                    let (s, c) = (w * v).sin_cos();
                    row[base + i] = s;
                    row[base + k + i] = c;
                }
            }
        }
        out
    }

    fn first_layer(&self, xs: &[f64], conds: &[f64], input: Option<&mut [f64]>) -> Vec<f64> {
        let encoded;
        let (xs, d) = if self.arch.input_encoding.is_some() {
            encoded = self.encode_inputs(xs);
            (encoded.as_slice(), self.arch.input_width())
        } else {
            (xs, self.arch.data_dim)
        };
        let e = self.arch.embedding.embed_dim;
        let slot = self.layers[0];
        let rows = conds.len();
        let w = &self.params[slot.w..slot.b];
        let b = &self.params[slot.b..slot.b + slot.n_out];
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut projected: Vec<f64> = Vec::new();
        let mut emb = vec![0.0; e];
        let mut which = Vec::with_capacity(rows);
        for &c in conds {
            let next = index.len();
            let k = *index.entry(c.to_bits()).or_insert_with(|| {
                self.arch.embedding.embed_into(c, &self.freqs, &mut emb);
                let start = projected.len();
                projected.extend_from_slice(b);
                kernel::gemm_acc(&emb, 1, e, &w[d * slot.n_out..], slot.n_out, &mut projected[start..]);
                next
            });
            which.push(k);
        }
        let mut z = Vec::with_capacity(rows * slot.n_out);
        for &k in &which {
            z.extend_from_slice(&projected[k * slot.n_out..(k + 1) * slot.n_out]);
        }
        kernel::gemm_acc(xs, rows, d, w, slot.n_out, &mut z);
        if let Some(input) = input {
            for (r, &c) in conds.iter().enumerate() {
                let row = &mut input[r * slot.n_in..(r + 1) * slot.n_in];
                row[..d].copy_from_slice(&xs[r * d..(r + 1) * d]);
                self.arch.embedding.embed_into(c, &self.freqs, &mut row[d..]);
            }
        }
        z
    }

    fn forward_chunk(&self, xs: &[f64], conds: &[f64]) -> Vec<f64> {
        let rows = conds.len();
        let act = self.arch.activation;
        let mut z = self.first_layer(xs, conds, None);
        for slot in &self.layers[1..] {
            let mut h = z;
            act.apply_slice(&mut h, None);
            let mut next = Vec::with_capacity(rows * slot.n_out);
            for _ in 0..rows {
                next.extend_from_slice(&self.params[slot.b..slot.b + slot.n_out]);
            }
            kernel::gemm_acc(&h, rows, slot.n_in, &self.params[slot.w..slot.b], slot.n_out, &mut next);
            z = next;
        }
        z
    }

    fn forward_train_chunk(&self, xs: &[f64], conds: &[f64]) -> (Vec<f64>, ChunkCache) {
        let rows = conds.len();
        let act = self.arch.activation;
        let mut input0 = vec![0.0; rows * self.layers[0].n_in];
        let mut z = self.first_layer(xs, conds, Some(&mut input0));
        let mut inputs = vec![input0];
        let mut deriv = Vec::new();
        for slot in &self.layers[1..] {
            let mut h = z;
            let mut d = vec![0.0; h.len()];
            act.apply_slice(&mut h, Some(&mut d));
            let mut next = Vec::with_capacity(rows * slot.n_out);
            for _ in 0..rows {
                next.extend_from_slice(&self.params[slot.b..slot.b + slot.n_out]);
            }
            kernel::gemm_acc(&h, rows, slot.n_in, &self.params[slot.w..slot.b], slot.n_out, &mut next);
            z = next;
            deriv.push(d);
            inputs.push(h);
        }
        (z, ChunkCache { rows, inputs, deriv })
    }

    fn backward_chunk(&self, cache: &ChunkCache, upstream: &[f64], grad: &mut [f64]) {
        let rows = cache.rows;
        let mut wt = Vec::new();
        let mut dz = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let slot = self.layers[l];
            kernel::gemm_tn_acc(&cache.inputs[l], rows, slot.n_in, &dz, slot.n_out, &mut grad[slot.w..slot.b]);
            let gb = &mut grad[slot.b..slot.b + slot.n_out];
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&dz[r * slot.n_out..(r + 1) * slot.n_out]) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            let mut dh = vec![0.0; rows * slot.n_in];
            kernel::gemm_nt(&dz, rows, slot.n_out, &self.params[slot.w..slot.b], slot.n_in, &mut wt, &mut dh);
            for (g, &dv) in dh.iter_mut().zip(&cache.deriv[l - 1]) {
                *g *= dv;
            }
            dz = dh;
        }
    }

    fn conditions(&self, alphas: &[LogSnr]) -> Vec<f64> {
        alphas.iter().map(|&a| self.conditioning_value(a)).collect()
    }
}

struct ChunkCache {
    rows: usize,
    /// Input to each layer (the first one is `[x, embedding]`).
    inputs: Vec<Vec<f64>>,
    /// Activation derivatives at the hidden pre-activations.
    deriv: Vec<Vec<f64>>,
}

/// Saved activations for a training batch, split into fixed-size chunks.
pub struct MlpCache {
    chunks: Vec<ChunkCache>,
}

impl Denoiser for MlpDenoiser {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64> {
        let d = self.arch.data_dim;
        assert_eq!(xs.len(), alphas.len() * d, "batch shape");
        let conds = self.conditions(alphas);
        let parts: Vec<Vec<f64>> = xs
            .par_chunks(CHUNK_ROWS * d)
            .zip(conds.par_chunks(CHUNK_ROWS))
            .map(|(x, c)| self.forward_chunk(x, c))
            .collect();
        parts.concat()
    }
}

impl Trainable for MlpDenoiser {
    type Cache = MlpCache;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_train(&self, xs: &[f64], alphas: &[LogSnr]) -> (Vec<f64>, MlpCache) {
        let d = self.arch.data_dim;
        assert_eq!(xs.len(), alphas.len() * d, "batch shape");
        let conds = self.conditions(alphas);
        let parts: Vec<(Vec<f64>, ChunkCache)> = xs
            .par_chunks(CHUNK_ROWS * d)
            .zip(conds.par_chunks(CHUNK_ROWS))
            .map(|(x, c)| self.forward_train_chunk(x, c))
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        let mut chunks = Vec::with_capacity(parts.len());
        for (o, c) in parts {
            out.extend(o);
            chunks.push(c);
        }
        (out, MlpCache { chunks })
    }

    fn backward(&self, cache: &MlpCache, upstream: &[f64], grad: &mut [f64]) {
        let d = self.arch.data_dim;
        assert_eq!(grad.len(), self.params.len(), "gradient length");
        let total: usize = cache.chunks.iter().map(|c| c.rows).sum();
        assert_eq!(upstream.len(), total * d, "upstream shape");
        // Partial gradients per chunk, folded into `grad` in chunk order.
        const WAVE: usize = 16;
        let offsets: Vec<usize> = cache
            .chunks
            .iter()
            .scan(0, |acc, c| {
                let o = *acc;
                *acc += c.rows * d;
                Some(o)
            })
            .collect();
        for wave in (0..cache.chunks.len()).collect::<Vec<_>>().chunks(WAVE) {
            let partials: Vec<Vec<f64>> = wave
                .par_iter()
                .map(|&k| {
                    let c = &cache.chunks[k];
                    let mut g = vec![0.0; self.params.len()];
                    self.backward_chunk(c, &upstream[offsets[k]..offsets[k] + c.rows * d], &mut g);
                    g
                })
                .collect();
            for p in partials {
                for (g, v) in grad.iter_mut().zip(&p) {
                    *g += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(data_dim: usize, hidden: Vec<usize>, activation: Activation, embed_dim: usize) -> MlpArch {
        MlpArch {
            data_dim,
            hidden,
            activation,
            embedding: TimeEmbedding {
                embed_dim,
                freq_base: 100.0,
            },
            conditioning: Conditioning::LogSnr,
            input_encoding: None,
        }
    }

    /// Independent re-implementation on explicit nested loops.
    fn naive_forward(m: &MlpDenoiser, x: &[f64], alpha: LogSnr) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        h.extend(m.arch.embedding.embed(m.conditioning_value(alpha)));
        let dims = m.layer_dims();
        for l in 0..dims.len() - 1 {
            let (w, b) = (m.weight(l), m.bias(l));
            let mut z = vec![0.0; dims[l + 1]];
            for o in 0..dims[l + 1] {
                z[o] = b[o];
                for i in 0..dims[l] {
                    z[o] += h[i] * w[i * dims[l + 1] + o];
                }
            }
            h = if l + 2 < dims.len() {
                z.iter().map(|&v| m.arch.activation.apply(v)).collect()
            } else {
                z
            };
        }
        h
    }

    #[test]
    fn embedding_examples() {
        let e = TimeEmbedding::default();
        let v = e.embed(0.0);
        assert!(v[..32].iter().all(|&s| s == 0.0) && v[32..].iter().all(|&c| c == 1.0));
        let e2 = TimeEmbedding {
            embed_dim: 2,
            freq_base: 1.0,
        };
        let v = e2.embed(std::f64::consts::FRAC_PI_2);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(TimeEmbedding { embed_dim: 3, freq_base: 1.0 }.validate().is_err());

        let mut r = rng::stream(3, &[9]);
        for _ in 0..1000 {
            let a: f64 = r.random_range(0.0..1000.0);
            let b: f64 = r.random_range(0.0..1000.0);
            if a == b {
                continue;
            }
            let d: f64 = e.embed(a).iter().zip(e.embed(b)).map(|(p, q)| (p - q).powi(2)).sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn zero_model_and_identity_layer() {
        let m = MlpDenoiser::zeros(arch(2, vec![8], Activation::Silu, 4)).unwrap();
        assert_eq!(m.forward(&[0.3, -1.0], LogSnr::ZERO), vec![0.0, 0.0]);

        let mut lin = MlpDenoiser::zeros(arch(3, vec![], Activation::Relu, 4)).unwrap();
        for i in 0..3 {
            lin.weight_mut(0)[i * 3 + i] = 1.0;
        }
        assert_eq!(lin.forward(&[0.5, -2.0, 7.25], LogSnr::clamped(3.0)), vec![0.5, -2.0, 7.25]);
    }

    #[test]
    fn forward_matches_naive() {
        for act in [Activation::Relu, Activation::Silu] {
            let m = MlpDenoiser::new(arch(2, vec![16, 9, 16], act, 6), 5).unwrap();
            let mut r = rng::stream(1, &[2]);
            let xs = rng::normal_vec(&mut r, 2 * 37);
            let alphas: Vec<LogSnr> = (0..37).map(|i| LogSnr::clamped(i as f64 - 18.0)).collect();
            let batch = m.predict_batch(&xs, &alphas);
            for (i, &a) in alphas.iter().enumerate() {
                let naive = naive_forward(&m, &xs[2 * i..2 * i + 2], a);
                for k in 0..2 {
                    assert!((naive[k] - batch[2 * i + k]).abs() < 1e-12);
                }
                assert_eq!(m.forward(&xs[2 * i..2 * i + 2], a), batch[2 * i..2 * i + 2].to_vec());
            }
            let (train_out, _) = m.forward_train(&xs, &alphas);
            assert_eq!(train_out, batch);
        }
    }

    #[test]
    fn timestep_conditioning_uses_schedule() {
        let mut a = arch(1, vec![4], Activation::Silu, 4);
        a.conditioning = Conditioning::default();
        let m = MlpDenoiser::new(a, 1).unwrap();
        let s = crate::math::default_ddpm_schedule();
        assert!((m.conditioning_value(s.alpha(250)) - 250.0).abs() < 1e-9);
    }

    fn scalar_loss(m: &MlpDenoiser, xs: &[f64], alphas: &[LogSnr], wts: &[f64]) -> f64 {
        m.predict_batch(xs, alphas).iter().zip(wts).map(|(o, w)| o * w).sum()
    }

    #[test]
    fn input_encoding_layout() {
        let a = MlpArch {
            input_encoding: Some(InputEncoding { frequencies: 2, scale: 2.0 }),
            ..arch(1, vec![4], Activation::Silu, 2)
        };
        assert_eq!(a.input_width(), 5);
        assert_eq!(a.layer_dims(), vec![7, 4, 1]);
        let m = MlpDenoiser::zeros(a).unwrap();
        let e = m.encode_inputs(&[0.5]);
        let lo: f64 = 2.0 * 1e-4 * 0.5;
        let want = [0.5, 1.0f64.sin(), lo.sin(), 1.0f64.cos(), lo.cos()];
        for (g, w) in e.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{e:?}");
        }
        assert!(InputEncoding { frequencies: 1, scale: 1.0 }.validate().is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let encoded = |act| MlpArch {
            input_encoding: Some(InputEncoding { frequencies: 4, scale: 3.0 }),
            ..arch(2, vec![16, 16], act, 4)
        };
        for a in [arch(2, vec![16, 16], Activation::Relu, 4), arch(2, vec![16, 16], Activation::Silu, 4), encoded(Activation::Silu)] {
            let act = a.activation;
            let mut m = MlpDenoiser::new(a, 11).unwrap();
            // nonzero biases so every parameter is exercised
            let mut r = rng::stream(2, &[3]);
            for l in 0..m.num_layers() {
                for b in m.bias_mut(l) {
                    *b = 0.1 * rng::normal(&mut r);
                }
            }
            let xs = rng::normal_vec(&mut r, 2 * 5);
            let alphas: Vec<LogSnr> = (0..5).map(|i| LogSnr::clamped(2.0 * i as f64 - 4.0)).collect();
            let wts = rng::normal_vec(&mut r, 10);
            let (_, cache) = m.forward_train(&xs, &alphas);
            let mut grad = vec![0.0; m.num_params()];
            m.backward(&cache, &wts, &mut grad);
            let pattern = |m: &MlpDenoiser| -> Vec<f64> {
                let (_, c) = m.forward_train(&xs, &alphas);
                c.chunks.into_iter().flat_map(|ch| ch.deriv.into_iter().flatten()).collect()
            };
            let base = pattern(&m);
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let mut kinked = 0;
            for p in 0..m.num_params() {
                let orig = m.params[p];
                m.params[p] = orig + h;
                let up = scalar_loss(&m, &xs, &alphas, &wts);
                let crosses_up = act == Activation::Relu && pattern(&m) != base;
                m.params[p] = orig - h;
                let dn = scalar_loss(&m, &xs, &alphas, &wts);
                let crosses_dn = act == Activation::Relu && pattern(&m) != base;
                m.params[p] = orig;
                // a ReLU switching inside [p - h, p + h] makes the difference quotient meaningless
                if crosses_up || crosses_dn {
                    kinked += 1;
                    continue;
                }
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-6);
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{act:?}: {worst}");
            assert!(kinked * 20 < m.num_params(), "{act:?}: {kinked} parameters straddle a kink");
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_example_gradients() {
        let m = MlpDenoiser::new(arch(2, vec![16, 16], Activation::Silu, 4), 2).unwrap();
        let mut r = rng::stream(4, &[4]);
        let n = 150;
        let xs = rng::normal_vec(&mut r, 2 * n);
        let alphas: Vec<LogSnr> = (0..n).map(|i| LogSnr::clamped((i % 13) as f64 - 6.0)).collect();
        let up = rng::normal_vec(&mut r, 2 * n);
        let (_, cache) = m.forward_train(&xs, &alphas);
        let mut g = vec![0.0; m.num_params()];
        m.backward(&cache, &up, &mut g);
        let mut sum = vec![0.0; m.num_params()];
        for i in 0..n {
            let (_, c) = m.forward_train(&xs[2 * i..2 * i + 2], &alphas[i..i + 1]);
            m.backward(&c, &up[2 * i..2 * i + 2], &mut sum);
        }
        for (a, b) in g.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut z = vec![0.0; m.num_params()];
        m.backward(&cache, &vec![0.0; 2 * n], &mut z);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_formula() {
        let a = MlpArch::default_for(2);
        let m = MlpDenoiser::new(a.clone(), 0).unwrap();
        assert_eq!(m.num_params(), 66 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 2 + 2);
        assert_eq!(param_count(&a.layer_dims()), m.num_params());
        assert!(MlpDenoiser::from_params(a, vec![0.0; 3]).is_err());
    }

    #[test]
    fn forward_is_thread_count_independent() {
        let m = MlpDenoiser::new(MlpArch::default_for(2), 8).unwrap();
        let mut r = rng::stream(5, &[5]);
        let n = 300;
        let xs = rng::normal_vec(&mut r, 2 * n);
        let alphas: Vec<LogSnr> = (0..n).map(|i| LogSnr::clamped(i as f64 / 10.0 - 12.0)).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| m.predict_batch(&xs, &alphas));
        let b = four.install(|| m.predict_batch(&xs, &alphas));
        assert_eq!(a, b);
        let up = rng::normal_vec(&mut r, 2 * n);
        let ga = one.install(|| {
            let (_, c) = m.forward_train(&xs, &alphas);
            let mut g = vec![0.0; m.num_params()];
            m.backward(&c, &up, &mut g);
            g
        });
        let gb = four.install(|| {
            let (_, c) = m.forward_train(&xs, &alphas);
            let mut g = vec![0.0; m.num_params()];
            m.backward(&c, &up, &mut g);
            g
        });
        assert_eq!(ga, gb);
    }
}
