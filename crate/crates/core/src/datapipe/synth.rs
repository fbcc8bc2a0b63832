//! Synthetic multi-annotator phantoms: smooth blobs whose boundary each
//! simulated rater draws slightly differently, so disagreement concentrates
//! at the boundary and grows with the ambiguity parameter.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaseRecord, Modality};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub n_raters: usize,
    pub seed: u64,
    /// Scales the per-rater boundary displacement; 0 makes all raters agree.
    pub ambiguity: f64,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 8,
            n_raters: 3,
            seed: 0,
            ambiguity: 0.3,
            height: 32,
            width: 32,
            noise_sigma: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 || self.n_raters == 0 {
            return Err(Error::InvalidConfig(
                "n_cases and n_raters must be positive".into(),
            ));
        }
        if self.n_raters > 255 {
            return Err(Error::InvalidConfig("at most 255 raters".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::InvalidConfig(format!(
                "ambiguity {} outside [0, 1]",
                self.ambiguity
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(
                "phantom size must be at least 8x8".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// A low-order Fourier series in the polar angle; smooth and 2pi-periodic.
struct RadialWobble {
    terms: Vec<(f64, f64, f64)>, // (amplitude, frequency, phase)
}

impl RadialWobble {
    fn sample<R: Rng>(rng: &mut R, max_amplitude: f64) -> Self {
        let terms = (1..=3)
            .map(|m| {
                let amp = rng.gen_range(0.0..max_amplitude) / m as f64;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (amp, m as f64, phase)
            })
            .collect();
        RadialWobble { terms }
    }

    fn eval(&self, theta: f64) -> f64 {
        self.terms
            .iter()
            .map(|(a, m, p)| a * (m * theta + p).cos())
            .sum()
    }
}

/// Deterministic given the seed: case `i` draws from an independent ChaCha
/// stream, so every case is reproducible in isolation.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    (0..cfg.n_cases).map(|i| synth_case(cfg, i)).collect()
}

fn synth_case(cfg: &SynthConfig, index: usize) -> Result<CaseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let (h, w) = (cfg.height, cfg.width);
    let min_dim = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.08..0.08) * min_dim;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.08..0.08) * min_dim;
    let base_radius = rng.gen_range(0.22..0.32) * min_dim;
    let shape = RadialWobble::sample(&mut rng, 0.12);

    // true boundary radius as a function of the polar angle
    let true_radius = |theta: f64| base_radius * (1.0 + shape.eval(theta));

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx);
            let signed = dist - true_radius(theta);
            // bright blob on a dark background with a soft edge
            let intensity = 0.2 + 0.6 / (1.0 + (signed / 1.5).exp());
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image[[0, y, x]] = (intensity + n) as f32;
        }
    }

    let raters = (0..cfg.n_raters)
        .map(|_| {
            // each rater displaces the boundary by its own smooth field
            let wobble = RadialWobble::sample(&mut rng, 0.4);
            let mut mask = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let dist = (dy * dy + dx * dx).sqrt();
                    let theta = dy.atan2(dx);
                    let r = true_radius(theta) * (1.0 + cfg.ambiguity * wobble.eval(theta));
                    mask[[y, x]] = u8::from(dist < r);
                }
            }
            mask
        })
        .collect();

    let case = CaseRecord {
        case_id: format!("case_{index:03}"),
        modality: Modality::Mr,
        image,
        raters,
        crop: None,
    };
    case.validate()?;
    Ok(case)
}
