//! Tiny hand-differentiated models for gradient checks and tests.

use crate::denoiser::{Denoiser, Trainable};
use crate::math::LogSnr;
use crate::rng;

/// Ten parameters, applied to each coordinate independently:
/// `sum_j a_j tanh(u_j x + v_j α/10 + c_j) + s x + e`, `j in {0, 1}`.
#[derive(Debug, Clone)]
pub struct TanhDenoiser {
    pub dim: usize,
    pub params: Vec<f64>,
}

impl TanhDenoiser {
    pub const NUM_PARAMS: usize = 10;

    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::INIT, 10]);
        Self {
            dim,
            params: rng::normal_vec(&mut r, Self::NUM_PARAMS).iter().map(|v| 0.5 * v).collect(),
        }
    }

    fn unit(&self, j: usize, x: f64, a: f64) -> f64 {
        let p = &self.params[4 * j..4 * j + 4];
        (p[1] * x + p[2] * a / 10.0 + p[3]).tanh()
    }

    fn eval(&self, x: f64, a: f64) -> f64 {
        let p = &self.params;
        p[0] * self.unit(0, x, a) + p[4] * self.unit(1, x, a) + p[8] * x + p[9]
    }
}

impl Denoiser for TanhDenoiser {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64> {
        xs.chunks_exact(self.dim)
            .zip(alphas)
            .flat_map(|(x, a)| x.iter().map(move |&v| self.eval(v, a.value())))
            .collect()
    }
}

impl Trainable for TanhDenoiser {
    type Cache = (Vec<f64>, Vec<LogSnr>);

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_train(&self, xs: &[f64], alphas: &[LogSnr]) -> (Vec<f64>, Self::Cache) {
        (self.predict_batch(xs, alphas), (xs.to_vec(), alphas.to_vec()))
    }

    fn backward(&self, cache: &Self::Cache, upstream: &[f64], grad: &mut [f64]) {
        let (xs, alphas) = cache;
        for (r, (x, a)) in xs.chunks_exact(self.dim).zip(alphas).enumerate() {
            for (k, &xv) in x.iter().enumerate() {
                let g = upstream[r * self.dim + k];
                let av = a.value();
                for j in 0..2 {
                    let t = self.unit(j, xv, av);
                    let amp = self.params[4 * j];
                    let dt = amp * (1.0 - t * t) * g;
                    grad[4 * j] += t * g;
                    grad[4 * j + 1] += dt * xv;
                    grad[4 * j + 2] += dt * av / 10.0;
                    grad[4 * j + 3] += dt;
                }
                grad[8] += xv * g;
                grad[9] += g;
            }
        }
    }
}

/// Predicts zero and has no parameters.
#[derive(Debug, Clone, Copy)]
pub struct ZeroTrainable {
    pub dim: usize,
}

impl Denoiser for ZeroTrainable {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &[f64], _alphas: &[LogSnr]) -> Vec<f64> {
        vec![0.0; xs.len()]
    }
}

impl Trainable for ZeroTrainable {
    type Cache = ();

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn forward_train(&self, xs: &[f64], alphas: &[LogSnr]) -> (Vec<f64>, ()) {
        (self.predict_batch(xs, alphas), ())
    }

    fn backward(&self, _cache: &(), _upstream: &[f64], _grad: &mut [f64]) {}
}
