//! Stochastic single-epoch augmentation for contrastive views.
//!
//! Six transforms run in a fixed order, each firing independently with its
//! own probability and drawing its parameter uniformly from `[min, max]`.

pub mod filter;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use filter::band_stop;

use crate::error::{Error, Result};
use crate::signal::{SleepStage, EPOCH_SAMPLES, TARGET_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRange {
    pub min: f64,
    pub max: f64,
    pub probability: f64,
}

impl TransformRange {
    pub const fn new(min: f64, max: f64, probability: f64) -> Self {
        TransformRange { min, max, probability }
    }

    fn validate(&self, key: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config {
                key: format!("augmentation.{key}.probability"),
                detail: format!("{} is outside [0, 1]", self.probability),
            });
        }
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config {
                key: format!("augmentation.{key}"),
                detail: format!("min {} must not exceed max {}", self.min, self.max),
            });
        }
        Ok(())
    }

    fn fires<R: Rng>(&self, rng: &mut R) -> bool {
        self.probability > 0.0 && rng.gen::<f64>() < self.probability
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }

    /// Integer draw over the whole numbers inside `[min, max]`.
    fn draw_int<R: Rng>(&self, rng: &mut R) -> i64 {
        let lo = self.min.ceil() as i64;
        let hi = self.max.floor() as i64;
        if lo >= hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub amplitude_scale: TransformRange,
    /// Samples; positive values delay the signal.
    pub time_shift: TransformRange,
    /// Microvolts.
    pub amplitude_shift: TransformRange,
    /// Samples.
    pub zero_mask: TransformRange,
    /// Standard deviation in microvolts.
    pub gaussian_noise: TransformRange,
    /// Lower band edge in Hz.
    pub band_stop: TransformRange,
    pub band_stop_width_hz: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            amplitude_scale: TransformRange::new(0.5, 2.0, 0.5),
            time_shift: TransformRange::new(-300.0, 300.0, 0.5),
            amplitude_shift: TransformRange::new(-10.0, 10.0, 0.5),
            zero_mask: TransformRange::new(0.0, 300.0, 0.5),
            gaussian_noise: TransformRange::new(0.0, 0.2, 0.5),
            band_stop: TransformRange::new(0.5, 30.0, 0.5),
            band_stop_width_hz: 2.0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        let mut c = Self::default();
        for r in c.ranges_mut() {
            r.probability = 0.0;
        }
        c
    }

    fn ranges_mut(&mut self) -> [&mut TransformRange; 6] {
        [
            &mut self.amplitude_scale,
            &mut self.time_shift,
            &mut self.amplitude_shift,
            &mut self.zero_mask,
            &mut self.gaussian_noise,
            &mut self.band_stop,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.amplitude_scale.validate("amplitude_scale")?;
        self.time_shift.validate("time_shift")?;
        self.amplitude_shift.validate("amplitude_shift")?;
        self.zero_mask.validate("zero_mask")?;
        self.gaussian_noise.validate("gaussian_noise")?;
        self.band_stop.validate("band_stop")?;
        if self.zero_mask.min < 0.0 || self.zero_mask.max > EPOCH_SAMPLES as f64 {
            return Err(Error::Config {
                key: "augmentation.zero_mask".into(),
                detail: format!("lengths must lie in [0, {EPOCH_SAMPLES}]"),
            });
        }
        if self.time_shift.min.abs() > EPOCH_SAMPLES as f64 || self.time_shift.max.abs() > EPOCH_SAMPLES as f64 {
            return Err(Error::Config {
                key: "augmentation.time_shift".into(),
                detail: format!("shifts must lie in [-{EPOCH_SAMPLES}, {EPOCH_SAMPLES}]"),
            });
        }
        if self.gaussian_noise.min < 0.0 {
            return Err(Error::Config {
                key: "augmentation.gaussian_noise".into(),
                detail: "sigma must be non-negative".into(),
            });
        }
        let nyquist = TARGET_RATE / 2.0;
        if !(self.band_stop_width_hz > 0.0)
            || !(self.band_stop.min > 0.0)
            || self.band_stop.max + self.band_stop_width_hz >= nyquist
        {
            return Err(Error::Config {
                key: "augmentation.band_stop".into(),
                detail: format!("every band must lie inside (0, {nyquist}) Hz"),
            });
        }
        Ok(())
    }
}

/// Multiplies every sample by `factor`.
pub fn amplitude_scale(x: &mut [f64], factor: f64) {
    x.iter_mut().for_each(|v| *v *= factor);
}

/// Moves the signal by `shift` samples; vacated samples become zero and
/// samples pushed past either end are discarded.
pub fn time_shift(x: &mut [f64], shift: i64) {
    let n = x.len();
    let s = shift.unsigned_abs() as usize;
    if s >= n {
        x.fill(0.0);
    } else if shift > 0 {
        x.copy_within(0..n - s, s);
        x[..s].fill(0.0);
    } else if shift < 0 {
        x.copy_within(s..n, 0);
        x[n - s..].fill(0.0);
    }
}

pub fn amplitude_shift(x: &mut [f64], offset: f64) {
    x.iter_mut().for_each(|v| *v += offset);
}

/// Zeroes `len` consecutive samples starting at `start`.
pub fn zero_mask(x: &mut [f64], start: usize, len: usize) {
    x[start..start + len].fill(0.0);
}

pub fn gaussian_noise<R: Rng>(x: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    x.iter_mut().for_each(|v| *v += normal.sample(rng));
}

/// Runs the six transforms in order on one 3000-sample epoch.
pub fn apply_pipeline<R: Rng>(x: &[f64], cfg: &AugmentationConfig, rng: &mut R) -> Result<Vec<f64>> {
    if x.len() != EPOCH_SAMPLES {
        return Err(Error::shape(
            "augmentation",
            format!("expected a single {EPOCH_SAMPLES}-sample epoch, got {} samples", x.len()),
        ));
    }
    let mut y = x.to_vec();
    if cfg.amplitude_scale.fires(rng) {
        amplitude_scale(&mut y, cfg.amplitude_scale.draw(rng));
    }
    if cfg.time_shift.fires(rng) {
        time_shift(&mut y, cfg.time_shift.draw_int(rng));
    }
    if cfg.amplitude_shift.fires(rng) {
        amplitude_shift(&mut y, cfg.amplitude_shift.draw(rng));
    }
    if cfg.zero_mask.fires(rng) {
        let len = cfg.zero_mask.draw_int(rng).clamp(0, EPOCH_SAMPLES as i64) as usize;
        let start = rng.gen_range(0..=EPOCH_SAMPLES - len);
        zero_mask(&mut y, start, len);
    }
    if cfg.gaussian_noise.fires(rng) {
        let sigma = cfg.gaussian_noise.draw(rng);
        gaussian_noise(&mut y, sigma, rng);
    }
    if cfg.band_stop.fires(rng) {
        y = band_stop(&y, cfg.band_stop.draw(rng), cfg.band_stop_width_hz, TARGET_RATE)?;
    }
    Ok(y)
}

/// RNG stream for view `view` of the sample identified by `key`; keyed so
/// that views are reproducible regardless of generation order.
pub fn view_rng(seed: u64, key: u64, view: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key.wrapping_mul(2).wrapping_add(view));
    rng
}

/// Two independently augmented views of one epoch sharing its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub label: SleepStage,
}

pub fn make_view_pair(x: &[f64], label: SleepStage, cfg: &AugmentationConfig, seed: u64, key: u64) -> Result<ViewPair> {
    Ok(ViewPair {
        view_a: apply_pipeline(x, cfg, &mut view_rng(seed, key, 0))?,
        view_b: apply_pipeline(x, cfg, &mut view_rng(seed, key, 1))?,
        label,
    })
}
