//! The noise-prediction interface shared by learned models and oracles.

use crate::math::LogSnr;

/// Predicts the injected noise `eps` from a noisy point and its log-SNR.
pub trait Denoiser: Sync {
    fn data_dim(&self) -> usize;

    /// Row-major batch: `xs.len() == alphas.len() * data_dim()`.
    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64>;

    fn predict(&self, x: &[f64], alpha: LogSnr) -> Vec<f64> {
        self.predict_batch(x, &[alpha])
    }
}

/// Gradient-capable denoiser with a flat parameter vector.
pub trait Trainable: Denoiser {
    type Cache: Send;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Forward pass that keeps what [`Trainable::backward`] needs.
    fn forward_train(&self, xs: &[f64], alphas: &[LogSnr]) -> (Vec<f64>, Self::Cache);

    /// Adds `J^T upstream` to `grad`, where `J` is the Jacobian of the outputs
    /// of the cached batch with respect to the parameters.
    fn backward(&self, cache: &Self::Cache, upstream: &[f64], grad: &mut [f64]);
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDenoiser {
    pub dim: usize,
}

impl Denoiser for ZeroDenoiser {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &[f64], _alphas: &[LogSnr]) -> Vec<f64> {
        vec![0.0; xs.len()]
    }
}

/// Adapts a per-point closure into a [`Denoiser`].
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], LogSnr) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], LogSnr) -> Vec<f64> + Sync,
{
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(xs.len());
        for (x, &a) in xs.chunks_exact(d).zip(alphas) {
            out.extend((self.f)(x, a));
        }
        out
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64> {
        (**self).predict_batch(xs, alphas)
    }
}
