use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Synthetic stand-in for ground-glass regions: a dark background with
/// brighter filled ellipses, plus clipped Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    /// Inclusive range of ellipses per image.
    pub blob_count: [usize; 2],
    /// Semi-axis range as fractions of `size`.
    pub semi_axis: [f64; 2],
    pub background: f64,
    pub foreground: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            blob_count: [1, 3],
            semi_axis: [0.08, 0.2],
            background: 0.25,
            foreground: 0.65,
            noise_sigma: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.semi_axis;
        if self.size < 4 {
            return Err(Error::Config(format!("synthetic size {} is too small", self.size)));
        }
        if self.blob_count[0] > self.blob_count[1] {
            return Err(Error::Config(format!("blob_count range {:?} is empty", self.blob_count)));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 < 0.5) {
            return Err(Error::Config(format!(
                "semi_axis range {:?} must satisfy 0 < min <= max < 0.5",
                self.semi_axis
            )));
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.foreground) {
            return Err(Error::Config("background/foreground intensities must be in [0, 1]".into()));
        }
        if self.foreground <= self.background {
            return Err(Error::Config("foreground must be brighter than background".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Continuous-area bounds on one image's foreground fraction: at least
    /// one smallest ellipse (when `blob_count[0] >= 1`), at most
    /// `blob_count[1]` largest ones.
    pub fn area_fraction_bounds(&self) -> (f64, f64) {
        let [a0, a1] = self.semi_axis;
        let lower = if self.blob_count[0] == 0 { 0.0 } else { PI * a0 * a0 };
        let upper = (self.blob_count[1] as f64 * PI * a1 * a1).min(1.0);
        (lower, upper)
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// `n_samples` synthetic images, each its own group. Ellipses lie fully
/// inside the frame. Deterministic for a given seed.
pub fn synth_blobs(n_samples: usize, config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let size = config.size;
    let s = size as f64;
    let mut rng = rng::stream(seed, rng::SYNTH_STREAM);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Internal(format!("noise distribution: {e}")))?;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let count = rng.random_range(config.blob_count[0]..=config.blob_count[1]);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let a = rng.random_range(config.semi_axis[0]..=config.semi_axis[1]) * s;
                let b = rng.random_range(config.semi_axis[0]..=config.semi_axis[1]) * s;
                let r = a.max(b);
                let theta = rng.random_range(0.0..PI);
                Ellipse {
                    cy: rng.random_range(r..=s - r),
                    cx: rng.random_range(r..=s - r),
                    a,
                    b,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let mut mask = Vec::with_capacity(size * size);
        let mut image = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = ellipses.iter().any(|e| e.contains(py, px));
                mask.push(u8::from(inside));
                let base = if inside { config.foreground } else { config.background };
                let v = if config.noise_sigma > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                };
                image.push(v.clamp(0.0, 1.0));
            }
        }
        let name = format!("synth_{i:05}");
        samples.push(Sample::new(name.clone(), name, size, size, image, mask)?);
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_mask_matches_bright_pixels() {
        let cfg = SynthConfig {
            blob_count: [1, 1],
            noise_sigma: 0.0,
            size: 32,
            ..Default::default()
        };
        let ds = synth_blobs(5, &cfg, 4).unwrap();
        for s in &ds.samples {
            for (&v, &m) in s.image.iter().zip(&s.mask) {
                assert_eq!(m == 1, v > cfg.background);
            }
            assert!(s.mask.contains(&1));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_blobs(3, &cfg, 8).unwrap(), synth_blobs(3, &cfg, 8).unwrap());
        assert_ne!(synth_blobs(3, &cfg, 8).unwrap(), synth_blobs(3, &cfg, 9).unwrap());
    }

    #[test]
    fn intensities_clipped() {
        let cfg = SynthConfig {
            noise_sigma: 0.8,
            size: 16,
            ..Default::default()
        };
        let ds = synth_blobs(4, &cfg, 1).unwrap();
        assert!(ds.samples.iter().flat_map(|s| &s.image).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invalid_configs() {
        let bad = SynthConfig {
            semi_axis: [0.3, 0.2],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            foreground: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
