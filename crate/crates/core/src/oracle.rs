//! Closed-form ground truth for isotropic Gaussian mixtures.
//!
//! Pushing a mixture through the noise channel keeps it a mixture: component
//! `k` moves to mean `sqrt(sigmoid(a)) mu_k` and variance
//! `sigmoid(a) s_k^2 + sigmoid(-a)`. Densities, scores and the MMSE noise
//! predictor all follow in closed form, which makes these the reference every
//! learned estimator is checked against.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::Denoiser;
use crate::math::{compose_noise_levels, LogSnr, NoiseSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("mixture has no components")]
    Empty,
    #[error("component weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("component {index}: {reason}")]
    BadComponent { index: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("denoiser composition identity violated by {deviation:e} (tolerance {tol:e})")]
    CompositionViolated { deviation: f64, tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma_data: f64,
}

/// Mixture of isotropic Gaussians, the analytic data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct GaussianMixtureSpec {
    dim: usize,
    components: Vec<Component>,
}

#[derive(Deserialize)]
struct RawSpec {
    dim: usize,
    components: Vec<Component>,
}

impl TryFrom<RawSpec> for GaussianMixtureSpec {
    type Error = OracleError;
    fn try_from(r: RawSpec) -> Result<Self, OracleError> {
        GaussianMixtureSpec::new(r.dim, r.components)
    }
}

impl GaussianMixtureSpec {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self, OracleError> {
        if components.is_empty() {
            return Err(OracleError::Empty);
        }
        for (index, c) in components.iter().enumerate() {
            let reason = if c.mean.len() != dim {
                Some(format!("mean has dimension {}, expected {dim}", c.mean.len()))
            } else if !(c.weight > 0.0 && c.weight <= 1.0) {
                Some(format!("weight {} outside (0, 1]", c.weight))
            } else if !(c.sigma_data > 0.0 && c.sigma_data.is_finite()) {
                Some(format!("sigma_data {} must be positive", c.sigma_data))
            } else if c.mean.iter().any(|m| !m.is_finite()) {
                Some("non-finite mean".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(OracleError::BadComponent { index, reason });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OracleError::WeightSum(total));
        }
        Ok(Self { dim, components })
    }

    /// Single standard normal component in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        Self::new(
            dim,
            vec![Component {
                weight: 1.0,
                mean: vec![0.0; dim],
                sigma_data: 1.0,
            }],
        )
        .expect("valid")
    }

    /// Equal mixture of `N(-5, 1)` and `N(5, 1)` in one dimension.
    pub fn two_mode_1d() -> Self {
        Self::symmetric_two_mode(5.0, 1.0)
    }

    pub fn symmetric_two_mode(offset: f64, sigma_data: f64) -> Self {
        Self::new(
            1,
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![-offset],
                    sigma_data,
                },
                Component {
                    weight: 0.5,
                    mean: vec![offset],
                    sigma_data,
                },
            ],
        )
        .expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// The mixture seen after the channel at `alpha`.
    pub fn noised(&self, alpha: LogSnr) -> GaussianMixtureSpec {
        let (s, n) = (alpha.signal_var(), alpha.noise_var());
        let scale = s.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| scale * m).collect(),
                sigma_data: (s * c.sigma_data * c.sigma_data + n).sqrt(),
            })
            .collect();
        GaussianMixtureSpec {
            dim: self.dim,
            components,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), OracleError> {
        if x.len() != self.dim {
            return Err(OracleError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component `(log w_k + log N(x; m_k, v_k I), m_k, v_k)` at `alpha`.
    fn component_terms<'a>(&'a self, x: &'a [f64], alpha: LogSnr) -> impl Iterator<Item = (f64, f64, f64, &'a [f64])> + 'a {
        let (s, n) = (alpha.signal_var(), alpha.noise_var());
        let scale = s.sqrt();
        let d = self.dim as f64;
        self.components.iter().map(move |c| {
            let var = s * c.sigma_data * c.sigma_data + n;
            let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - scale * mi).powi(2)).sum();
            let log_term = c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var;
            (log_term, scale, var, c.mean.as_slice())
        })
    }

    /// `log p_alpha(x)`, via log-sum-exp over components.
    pub fn noisy_log_density(&self, x: &[f64], alpha: LogSnr) -> Result<f64, OracleError> {
        self.check_dim(x)?;
        let logs: Vec<f64> = self.component_terms(x, alpha).map(|t| t.0).collect();
        Ok(log_sum_exp(&logs))
    }

    /// `grad_x log p_alpha(x) = sum_k r_k(x) (m_k - x) / v_k`.
    pub fn analytic_score(&self, x: &[f64], alpha: LogSnr) -> Result<Vec<f64>, OracleError> {
        self.check_dim(x)?;
        Ok(self.score_unchecked(x, alpha))
    }

    fn score_unchecked(&self, x: &[f64], alpha: LogSnr) -> Vec<f64> {
        let terms: Vec<(f64, f64, f64, &[f64])> = self.component_terms(x, alpha).collect();
        let logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let lse = log_sum_exp(&logs);
        let mut score = vec![0.0; self.dim];
        for (log_term, scale, var, mean) in terms {
            let r = (log_term - lse).exp();
            for ((s, xi), mi) in score.iter_mut().zip(x).zip(mean) {
                *s += r * (scale * mi - xi) / var;
            }
        }
        score
    }

    /// MMSE noise prediction `-sqrt(sigmoid(-alpha)) * score`.
    pub fn analytic_denoiser(&self, x: &[f64], alpha: LogSnr) -> Result<Vec<f64>, OracleError> {
        self.check_dim(x)?;
        Ok(self.denoise_unchecked(x, alpha))
    }

    fn denoise_unchecked(&self, x: &[f64], alpha: LogSnr) -> Vec<f64> {
        let k = -alpha.noise_scale();
        self.score_unchecked(x, alpha).into_iter().map(|s| k * s).collect()
    }

    /// Optimal denoiser for the noisy data `p_alpha` at level `alpha_bar`,
    /// evaluated directly on the noised mixture and cross-checked against
    /// `b * eps_hat(x, beta)` with `(beta, b) = compose(alpha_bar, alpha)`.
    pub fn denoiser_composition(&self, x: &[f64], alpha_bar: LogSnr, alpha: LogSnr) -> Result<Vec<f64>, OracleError> {
        self.check_dim(x)?;
        let direct = self.noised(alpha).denoise_unchecked(x, alpha_bar);
        let coeffs = compose_noise_levels(alpha_bar, alpha);
        let composed: Vec<f64> = self
            .denoise_unchecked(x, coeffs.beta)
            .into_iter()
            .map(|v| coeffs.b * v)
            .collect();
        let deviation = direct
            .iter()
            .zip(&composed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        const TOL: f64 = 1e-8;
        if deviation > TOL {
            return Err(OracleError::CompositionViolated { deviation, tol: TOL });
        }
        Ok(direct)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The mixture's exact noise predictor behind the [`Denoiser`] interface.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub spec: GaussianMixtureSpec,
}

impl AnalyticDenoiser {
    pub fn new(spec: GaussianMixtureSpec) -> Self {
        Self { spec }
    }
}

impl Denoiser for AnalyticDenoiser {
    fn data_dim(&self) -> usize {
        self.spec.dim
    }

    fn predict_batch(&self, xs: &[f64], alphas: &[LogSnr]) -> Vec<f64> {
        let d = self.spec.dim;
        assert_eq!(xs.len(), alphas.len() * d, "batch shape");
        let mut out = Vec::with_capacity(xs.len());
        for (x, &a) in xs.chunks_exact(d).zip(alphas) {
            out.extend(self.spec.denoise_unchecked(x, a));
        }
        out
    }
}

/// Pointwise denoiser error over a (timestep, position) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorField {
    pub t_grid: Vec<usize>,
    pub alphas: Vec<LogSnr>,
    pub x_grid: Vec<Vec<f64>>,
    /// `values[i][j]` is the error at `t_grid[i]`, `x_grid[j]`.
    pub values: Vec<Vec<f64>>,
}

/// 241 evenly spaced points on `[-9, 9]`.
pub fn default_x_grid_1d() -> Vec<Vec<f64>> {
    linspace(-9.0, 9.0, 241).into_iter().map(|x| vec![x]).collect()
}

/// Up to `columns` timesteps evenly spread over `1..=T`.
pub fn default_t_grid(schedule: &NoiseSchedule, columns: usize) -> Vec<usize> {
    let t = schedule.steps();
    let columns = columns.clamp(1, t);
    let mut grid: Vec<usize> = (0..columns)
        .map(|i| {
            if columns == 1 {
                t
            } else {
                1 + ((t - 1) as f64 * i as f64 / (columns - 1) as f64).round() as usize
            }
        })
        .collect();
    grid.dedup();
    grid
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `values[i][j] = || model(x_j, alpha(t_i)) - eps_hat_true(x_j, alpha(t_i)) ||_2`.
pub fn error_field(
    model: &dyn Denoiser,
    spec: &GaussianMixtureSpec,
    x_grid: &[Vec<f64>],
    t_grid: &[usize],
    schedule: &NoiseSchedule,
) -> Result<ErrorField, OracleError> {
    if model.data_dim() != spec.dim {
        return Err(OracleError::DimensionMismatch {
            expected: spec.dim,
            got: model.data_dim(),
        });
    }
    for x in x_grid {
        spec.check_dim(x)?;
    }
    let flat: Vec<f64> = x_grid.iter().flatten().copied().collect();
    let alphas: Vec<LogSnr> = t_grid.iter().map(|&t| schedule.alpha(t)).collect();
    let values = alphas
        .par_iter()
        .map(|&a| {
            let pred = model.predict_batch(&flat, &vec![a; x_grid.len()]);
            x_grid
                .iter()
                .zip(pred.chunks_exact(spec.dim))
                .map(|(x, p)| {
                    let truth = spec.denoise_unchecked(x, a);
                    p.iter().zip(&truth).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect();
    Ok(ErrorField {
        t_grid: t_grid.to_vec(),
        alphas,
        x_grid: x_grid.to_vec(),
        values,
    })
}

impl ErrorField {
    pub fn mean(&self) -> f64 {
        let n: usize = self.values.iter().map(Vec::len).sum();
        self.values.iter().flatten().sum::<f64>() / n.max(1) as f64
    }

    /// CSV with columns `t,alpha,x0[,x1...],value`.
    pub fn to_csv(&self) -> String {
        let d = self.x_grid.first().map_or(1, Vec::len);
        let mut out = String::from("t,alpha");
        for k in 0..d {
            if d == 1 {
                out.push_str(",x");
            } else {
                let _ = write!(out, ",x{k}");
            }
        }
        out.push_str(",value\n");
        for ((t, a), row) in self.t_grid.iter().zip(&self.alphas).zip(&self.values) {
            for (x, v) in self.x_grid.iter().zip(row) {
                let _ = write!(out, "{t},{}", a.value());
                for c in x {
                    let _ = write!(out, ",{c}");
                }
                let _ = writeln!(out, ",{v}");
            }
        }
        out
    }

    /// Grayscale heatmap, time on the horizontal axis (noise end on the
    /// right), position on the vertical axis. Intensity is `log10(value)`
    /// mapped linearly between the field's smallest positive value and its
    /// maximum; darker means larger error. An all-zero field renders blank.
    pub fn to_svg(&self) -> String {
        let cell = 3usize;
        let (cols, rows) = (self.t_grid.len(), self.x_grid.len());
        let (w, h) = (cols * cell, rows * cell);
        let positive = self.values.iter().flatten().copied().filter(|v| *v > 0.0);
        let vmax = positive.clone().fold(0.0f64, f64::max);
        let vmin = positive.fold(f64::INFINITY, f64::min);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#
        );
        let _ = writeln!(
            svg,
            "<metadata>intensity=log10; vmin={}; vmax={}; rows=x; cols=t</metadata>",
            if vmax > 0.0 { vmin } else { 0.0 },
            vmax
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="rgb(255,255,255)"/>"#);
        if vmax > 0.0 {
            let (lo, hi) = (vmin.log10(), vmax.log10());
            let span = (hi - lo).max(1e-12);
            for (i, row) in self.values.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v <= 0.0 {
                        continue;
                    }
                    let level = ((v.log10() - lo) / span).clamp(0.0, 1.0);
                    let g = (255.0 * (1.0 - level)).round() as u8;
                    // first x at the top
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                        i * cell,
                        (rows - 1 - j) * cell
                    );
                }
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}
