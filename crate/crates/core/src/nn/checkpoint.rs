//! JSON checkpoints with bit-exact float encoding.

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Ema, MlpArch, MlpDenoiser, NnError};
use crate::denoiser::Trainable;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FloatEncoding {
    #[default]
    Hex,
    Decimal,
}

/// C99 hexadecimal float, e.g. `0x1.8p+1` for 3.0.
pub fn format_hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let mut digits = format!("{frac:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let dot = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    let esign = if e >= 0 { "+" } else { "-" };
    format!("{sign}0x{lead}{dot}p{esign}{}", e.abs())
}

/// Parses the output of [`format_hex`], plus any other exactly representable
/// hex float with at most 13 fractional digits.
pub fn parse_hex(s: &str) -> Option<f64> {
    let s = s.trim();
    match s {
        "nan" => return Some(f64::NAN),
        "inf" | "+inf" => return Some(f64::INFINITY),
        "-inf" => return Some(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))?;
    let (mant, exp) = rest.split_once(['p', 'P'])?;
    let exp: i64 = exp.parse().ok()?;
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    if int_part.len() != 1 || frac_part.len() > 13 {
        return None;
    }
    let lead = u64::from_str_radix(int_part, 16).ok()?;
    let frac = if frac_part.is_empty() {
        0
    } else {
        u64::from_str_radix(frac_part, 16).ok()? << (4 * (13 - frac_part.len()))
    };
    let bits = match (lead, exp) {
        (0, _) if frac == 0 => 0,
        (0, -1022) => frac,
        (1, e) if (-1022..=1023).contains(&e) => (((e + 1023) as u64) << 52) | frac,
        _ => return None,
    };
    let v = f64::from_bits(bits);
    Some(if neg { -v } else { v })
}

pub fn encode(values: &[f64], enc: FloatEncoding) -> Vec<String> {
    values
        .iter()
        .map(|&v| match enc {
            FloatEncoding::Hex => format_hex(v),
            // shortest representation that round-trips
            FloatEncoding::Decimal => format!("{v:?}"),
        })
        .collect()
}

pub fn decode(values: &[String]) -> Result<Vec<f64>, NnError> {
    values
        .iter()
        .map(|s| {
            let parsed = if s.contains(['x', 'X']) { parse_hex(s) } else { s.parse().ok() };
            parsed.ok_or_else(|| NnError::Checkpoint(format!("bad float {s:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<String>>,
    pub v: Vec<Vec<String>>,
}

/// On-disk form. Each parameter group is one tensor: layer weights then layer
/// bias, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: MlpArch,
    pub seed: u64,
    pub step: u64,
    pub encoding: FloatEncoding,
    pub params: Vec<Vec<String>>,
    pub ema_decay: Option<f64>,
    pub ema_params: Option<Vec<Vec<String>>>,
    pub optimizer_state: Option<OptimizerState>,
}

fn split_tensors(model: &MlpDenoiser, flat: &[f64], enc: FloatEncoding) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for slot in &model.layers {
        out.push(encode(&flat[slot.w..slot.b], enc));
        out.push(encode(&flat[slot.b..slot.b + slot.n_out], enc));
    }
    out
}

fn join_tensors(groups: &[Vec<String>]) -> Result<Vec<f64>, NnError> {
    let mut flat = Vec::new();
    for g in groups {
        flat.extend(decode(g)?);
    }
    Ok(flat)
}

impl Checkpoint {
    pub fn capture(
        model: &MlpDenoiser,
        seed: u64,
        step: u64,
        ema: Option<&Ema>,
        optimizer: Option<&Adam>,
        encoding: FloatEncoding,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture: model.arch().clone(),
            seed,
            step,
            encoding,
            params: split_tensors(model, model.params(), encoding),
            ema_decay: ema.map(Ema::decay),
            ema_params: ema.map(|e| split_tensors(model, e.shadow(), encoding)),
            optimizer_state: optimizer.map(|o| OptimizerState {
                config: o.config,
                step_count: o.step_count,
                m: split_tensors(model, &o.m, encoding),
                v: split_tensors(model, &o.v, encoding),
            }),
        }
    }

    fn check_version(&self) -> Result<(), NnError> {
        if self.format_version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        Ok(())
    }

    /// The raw (non-averaged) model.
    pub fn model(&self) -> Result<MlpDenoiser, NnError> {
        self.check_version()?;
        MlpDenoiser::from_params(self.architecture.clone(), join_tensors(&self.params)?)
    }

    /// The EMA model when present, else the raw one.
    pub fn ema_model(&self) -> Result<MlpDenoiser, NnError> {
        match &self.ema_params {
            Some(p) => {
                self.check_version()?;
                MlpDenoiser::from_params(self.architecture.clone(), join_tensors(p)?)
            }
            None => self.model(),
        }
    }

    pub fn ema(&self) -> Result<Option<Ema>, NnError> {
        match (&self.ema_params, self.ema_decay) {
            (Some(p), Some(d)) => Ok(Some(Ema::new(d, &join_tensors(p)?)?)),
            _ => Ok(None),
        }
    }

    pub fn optimizer(&self) -> Result<Option<Adam>, NnError> {
        let Some(o) = &self.optimizer_state else {
            return Ok(None);
        };
        let mut adam = Adam::new(o.config, 0)?;
        adam.step_count = o.step_count;
        adam.m = join_tensors(&o.m)?;
        adam.v = join_tensors(&o.v)?;
        Ok(Some(adam))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Conditioning, TimeEmbedding};
    use proptest::prelude::*;

    #[test]
    fn hex_examples() {
        assert_eq!(format_hex(3.0), "0x1.8p+1");
        assert_eq!(format_hex(1.0), "0x1p+0");
        assert_eq!(format_hex(-0.0), "-0x0p+0");
        assert_eq!(format_hex(0.1), "0x1.999999999999ap-4");
        assert_eq!(format_hex(f64::MIN_POSITIVE / 4.0), "0x0.4p-1022");
        assert_eq!(parse_hex("0x1.8p+1"), Some(3.0));
        assert_eq!(parse_hex("0x2p+1"), None);
        assert_eq!(parse_hex("1.5"), None);
    }

    proptest! {
        #[test]
        fn hex_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(parse_hex(&format_hex(x)).unwrap().to_bits(), bits);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = MlpArch {
            data_dim: 2,
            hidden: vec![8, 8],
            activation: Activation::Silu,
            embedding: TimeEmbedding {
                embed_dim: 4,
                freq_base: 10.0,
            },
            conditioning: Conditioning::default(),
            input_encoding: Some(crate::nn::InputEncoding { frequencies: 3, scale: 20.0 }),
        };
        let model = MlpDenoiser::new(arch, 3).unwrap();
        let mut ema = Ema::new(0.9, model.params()).unwrap();
        let mut shifted = model.params().to_vec();
        shifted.iter_mut().for_each(|p| *p = *p * 1.1 + 1e-3);
        ema.update(&shifted);
        let mut opt = Adam::new(AdamConfig::default(), model.num_params()).unwrap();
        let mut p = model.params().to_vec();
        opt.step(&mut p, &shifted);
        for enc in [FloatEncoding::Hex, FloatEncoding::Decimal] {
            let ck = Checkpoint::capture(&model, 3, 17, Some(&ema), Some(&opt), enc);
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.model().unwrap().params(), model.params());
            assert_eq!(back.ema_model().unwrap().params(), ema.shadow());
            assert_eq!(back.optimizer().unwrap().unwrap(), opt);
            assert_eq!(back.ema().unwrap().unwrap(), ema);
        }
        let mut bad = Checkpoint::capture(&model, 3, 17, None, None, FloatEncoding::Hex);
        bad.format_version = 99;
        assert!(bad.model().is_err());
    }
}
