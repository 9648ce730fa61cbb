//! Synthetic stand-in for real encoder features.
//!
//! Every token of every channel is standard normal noise plus a channel
//! direction `u_*` (a fixed random unit vector) scaled as follows, with
//! `s = ±1` the class sign (fake = +1) and `r = ±1` a per-record latent sign:
//!
//! ```text
//! text    : + s · sep · (1 − w) · u_t
//! image   : + r · sep · w · u_i
//! imgtext : + s · r · sep · w · u_m
//! ```
//!
//! where `sep` is `class_separation` and `w` is `cross_modal_weight`. The
//! image and image-text channels are each label-independent on their own;
//! their agreement in sign carries the cross-modal share of the signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureDims, FeatureRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub dims: FeatureDims,
    pub class_separation: f64,
    pub cross_modal_weight: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn default_dims() -> FeatureDims {
        FeatureDims {
            len_text: 4,
            d_text: 24,
            len_image: 3,
            d_image: 16,
            len_imgtext: 2,
            d_imgtext: 12,
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn block(rng: &mut ChaCha8Rng, len: usize, dir: &[f64], shift: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(len * dir.len());
    for _ in 0..len {
        for &u in dir {
            let noise: f64 = rng.sample(StandardNormal);
            out.push((noise + shift * u) as f32);
        }
    }
    out
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    if cfg.n < 4 {
        return Err(DataError::Param(format!("n = {} is below the minimum of 4", cfg.n)));
    }
    cfg.dims.validate()?;
    if !cfg.class_separation.is_finite() || cfg.class_separation < 0.0 {
        return Err(DataError::Param(format!(
            "class_separation {} must be finite and non-negative",
            cfg.class_separation
        )));
    }
    if !(0.0..=1.0).contains(&cfg.cross_modal_weight) {
        return Err(DataError::Param(format!(
            "cross_modal_weight {} outside [0, 1]",
            cfg.cross_modal_weight
        )));
    }
    let d = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u_t = unit_direction(&mut rng, d.d_text);
    let u_i = unit_direction(&mut rng, d.d_image);
    let u_m = unit_direction(&mut rng, d.d_imgtext);

    let mut labels: Vec<u8> = (0..cfg.n).map(|i| (i < cfg.n / 2) as u8).collect();
    labels.shuffle(&mut rng);

    let text_shift = cfg.class_separation * (1.0 - cfg.cross_modal_weight);
    let cross_shift = cfg.class_separation * cfg.cross_modal_weight;
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let s = if label == 1 { 1.0 } else { -1.0 };
            let r = if rng.random::<bool>() { 1.0 } else { -1.0 };
            FeatureRecord {
                id: i as u64,
                label,
                text: block(&mut rng, d.len_text, &u_t, s * text_shift),
                image: block(&mut rng, d.len_image, &u_i, r * cross_shift),
                imgtext: block(&mut rng, d.len_imgtext, &u_m, s * r * cross_shift),
            }
        })
        .collect();
    Ok(Dataset::new(d, records))
}
