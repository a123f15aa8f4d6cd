//! Point-cloud datasets: the 2D dino and Gaussian-mixture draws.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::GaussianMixtureSpec;
use crate::rng::{self, tag};

/// The 142-point datasaurus dino, `x,y` per line.
pub const DINO_CSV: &str = include_str!("../data/dino.csv");

/// Jitter (in normalized units) added when resampling the dino.
pub const DINO_JITTER: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Maps data space to model space by `(p - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Zero mean, largest absolute coordinate 1.
    pub fn fit(points: &[f64], dim: usize) -> Self {
        let n = (points.len() / dim).max(1) as f64;
        let mut center = vec![0.0; dim];
        for p in points.chunks_exact(dim) {
            for (c, v) in center.iter_mut().zip(p) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        let max_abs = points
            .chunks_exact(dim)
            .flat_map(|p| p.iter().zip(&center).map(|(v, c)| (v - c).abs()))
            .fold(0.0, f64::max);
        Self {
            center,
            scale: if max_abs > 0.0 { max_abs } else { 1.0 },
        }
    }

    pub fn normalize(&self, points: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        points
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.center[i % d]) / self.scale)
            .collect()
    }

    pub fn denormalize(&self, points: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        points
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.scale + self.center[i % d])
            .collect()
    }
}

/// Points in model (normalized) space, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub points: Vec<f64>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Points mapped back to data space.
    pub fn data_space(&self) -> Vec<f64> {
        self.normalization.denormalize(&self.points)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            points: idx.iter().flat_map(|&i| self.point(i).iter().copied()).collect(),
            normalization: self.normalization.clone(),
        }
    }
}

/// Parses comma-separated rows of numbers. Blank lines and lines starting
/// with `#` are skipped; a first line that is not numeric is taken as a
/// header. Every row must have the same number of fields.
pub fn parse_points_csv(text: &str) -> Result<(Vec<f64>, usize), DatasetError> {
    let mut points = Vec::new();
    let mut dim = None;
    let mut seen_row = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match fields {
            Ok(r) => r,
            Err(_) if !seen_row && dim.is_none() => {
                seen_row = true;
                continue;
            }
            Err(e) => {
                return Err(DatasetError::Parse {
                    line: i + 1,
                    msg: format!("{e} in {line:?}"),
                })
            }
        };
        seen_row = true;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::Parse {
                line: i + 1,
                msg: format!("non-finite value {v}"),
            });
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(DatasetError::Parse {
                    line: i + 1,
                    msg: format!("expected {d} fields, found {}", row.len()),
                })
            }
            _ => {}
        }
        points.extend(row);
    }
    match dim {
        Some(d) => Ok((points, d)),
        None => Err(DatasetError::Empty),
    }
}

pub fn read_points_csv(path: &Path) -> Result<(Vec<f64>, usize), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_points_csv(&text)
}

/// Normalizes the base points, then resamples `n` of them with Gaussian
/// jitter of standard deviation `jitter` in normalized units. When `n`
/// equals the base count the base points are used in order.
pub fn dino_from_base(base: &[f64], dim: usize, n: usize, jitter: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Invalid("n must be at least 1".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(DatasetError::Invalid(format!("jitter must be >= 0, got {jitter}")));
    }
    let normalization = Normalization::fit(base, dim);
    let unit = normalization.normalize(base);
    let count = base.len() / dim;
    let mut r = rng::stream(seed, &[tag::DATA, 0]);
    let idx: Vec<usize> = if n == count {
        (0..count).collect()
    } else {
        (0..n).map(|_| r.random_range(0..count)).collect()
    };
    let mut points: Vec<f64> = idx.iter().flat_map(|&i| unit[i * dim..(i + 1) * dim].iter().copied()).collect();
    if jitter > 0.0 {
        for p in &mut points {
            *p += jitter * rng::normal(&mut r);
        }
    }
    Ok(Dataset {
        dim,
        points,
        normalization,
    })
}

pub fn load_dino(path: &Path, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    let (base, dim) = read_points_csv(path)?;
    dino_from_base(&base, dim, n, DINO_JITTER, seed)
}

/// The bundled dino, resampled to `n` points.
pub fn builtin_dino(n: usize, seed: u64) -> Dataset {
    let (base, dim) = parse_points_csv(DINO_CSV).expect("bundled dino parses");
    dino_from_base(&base, dim, n, DINO_JITTER, seed).expect("n >= 1")
}

/// `n` draws from the mixture, unnormalized.
pub fn sample_mixture(spec: &GaussianMixtureSpec, n: usize, seed: u64) -> Dataset {
    let d = spec.dim();
    let mut r = rng::stream(seed, &[tag::DATA, 1]);
    let comps = spec.components();
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let mut points = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = r.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = &comps[comps.len() - 1];
        for c in comps {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        for m in &chosen.mean {
            points.push(m + chosen.sigma_data * rng::normal(&mut r));
        }
    }
    Dataset {
        dim: d,
        points,
        normalization: Normalization::identity(d),
    }
}

/// Shuffled split with `round(train_frac * n)` training points.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DatasetError::Invalid(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let k = (train_frac * ds.len() as f64).round() as usize;
    Ok((ds.subset(&idx[..k]), ds.subset(&idx[k..])))
}

/// `x,y,...` rows, one per point, preceded by optional `# ` comment lines.
pub fn points_to_csv(points: &[f64], dim: usize, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for p in points.chunks_exact(dim) {
        let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
