use serde::{Deserialize, Serialize};

use super::NnError;

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    decay: f64,
    shadow: Vec<f64>,
}

impl Ema {
    pub fn new(decay: f64, params: &[f64]) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(NnError::EmaDecay(decay));
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.shadow.len(), "parameter length");
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_zero_copies() {
        let mut e = Ema::new(0.0, &[5.0, 5.0]).unwrap();
        e.update(&[1.0, -2.0]);
        assert_eq!(e.shadow(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_one_rejected() {
        assert_eq!(Ema::new(1.0, &[0.0]), Err(NnError::EmaDecay(1.0)));
        assert!(Ema::new(-0.1, &[0.0]).is_err());
    }

    #[test]
    fn converges_geometrically() {
        // shadow_n - p = 0.999^n (shadow_0 - p); 0.999^10000 = 4.5e-5
        let mut e = Ema::new(0.999, &[0.0, 0.0]).unwrap();
        let p = [1.0, -3.0];
        for _ in 0..10_000 {
            e.update(&p);
        }
        for (s, q) in e.shadow().iter().zip(p) {
            assert!(((s - q) / q).abs() < 1e-4);
            let predicted = q * (1.0 - 0.999f64.powi(10_000));
            assert!((s - predicted).abs() < 1e-10);
        }
    }
}
