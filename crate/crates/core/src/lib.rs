//! Diffusion denoisers trained with a contrastive log-likelihood-ratio loss,
//! plus the samplers, closed-form oracles and evaluation tools around them.

pub mod datasets;
pub mod denoiser;
pub mod eval;
pub mod losses;
pub mod math;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod samplers;
pub mod toy;
