//! Integer-ratio decimation to 100 Hz behind a windowed-sinc low-pass.

use super::{Recording, TARGET_RATE};
use crate::error::{Error, Result};

/// Pass-band edge of the anti-alias filter in Hz.
const CUTOFF_HZ: f64 = 40.0;
/// Filter half-length per unit of decimation ratio.
const HALF_TAPS_PER_RATIO: usize = 64;

/// Symmetric Blackman-windowed sinc with unit DC gain, cutoff as a fraction
/// of the input sample rate.
pub fn lowpass_taps(cutoff: f64, half: usize) -> Vec<f64> {
    let n = 2 * half + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * m).sin() / (std::f64::consts::PI * m)
            };
            let x = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            sinc * (0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos())
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Returns `rec` at exactly 100 Hz. Inputs already at 100 Hz pass through
/// untouched; other rates must be integer multiples of 100 Hz.
pub fn resample_100hz(rec: &Recording) -> Result<Recording> {
    let ratio = rec.sample_rate / TARGET_RATE;
    let m = ratio.round();
    if !(rec.sample_rate > 0.0) || m < 1.0 || (ratio - m).abs() > 1e-9 {
        return Err(Error::UnsupportedRate { from: rec.sample_rate });
    }
    let m = m as usize;
    if m == 1 {
        return Ok(rec.clone());
    }
    let half = HALF_TAPS_PER_RATIO * m;
    let h = lowpass_taps(CUTOFF_HZ / rec.sample_rate, half);
    let x = &rec.samples;
    let n_out = x.len() / m;
    // Zero-phase: the filter is centred on each kept sample; the signal is
    // zero beyond its ends.
    let samples = (0..n_out)
        .map(|j| {
            let centre = (j * m) as isize;
            let lo = (centre - half as isize).max(0) as usize;
            let hi = ((centre + half as isize) as usize).min(x.len() - 1);
            (lo..=hi)
                .map(|i| x[i] * h[(i as isize - centre + half as isize) as usize])
                .sum()
        })
        .collect();
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        samples,
        sample_rate: TARGET_RATE,
        channel: rec.channel.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: f64, n: usize) -> Recording {
        Recording {
            subject_id: "s".into(),
            samples: (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin()).collect(),
            sample_rate: rate,
            channel: "c".into(),
        }
    }

    /// DFT magnitude at one frequency.
    fn magnitude(x: &[f64], freq: f64, rate: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * freq * i as f64 / rate;
            re += v * w.cos();
            im -= v * w.sin();
        }
        (re * re + im * im).sqrt() / x.len() as f64
    }

    fn peak_bin(x: &[f64], rate: f64) -> f64 {
        let n = x.len();
        (1..n / 2)
            .map(|k| k as f64 * rate / n as f64)
            .max_by(|a, b| magnitude(x, *a, rate).total_cmp(&magnitude(x, *b, rate)))
            .unwrap()
    }

    #[test]
    fn identity_at_100hz() {
        let rec = tone(10.0, 100.0, 500);
        assert_eq!(resample_100hz(&rec).unwrap(), rec);
    }

    #[test]
    fn in_band_tone_keeps_its_frequency() {
        let out = resample_100hz(&tone(10.0, 200.0, 4000)).unwrap();
        assert_eq!(out.sample_rate, 100.0);
        assert_eq!(out.samples.len(), 2000);
        assert!((peak_bin(&out.samples, 100.0) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn aliasing_tone_attenuated() {
        let input = tone(70.0, 200.0, 4000);
        let before = magnitude(&input.samples, 70.0, 200.0);
        let out = resample_100hz(&input).unwrap();
        // 70 Hz folds back to 30 Hz at the new rate; skip the edge transients.
        let after = magnitude(&out.samples[200..1800], 30.0, 100.0);
        assert!(20.0 * (before / after).log10() >= 20.0, "{before} {after}");
    }

    #[test]
    fn rejects_non_integer_ratio() {
        assert!(matches!(resample_100hz(&tone(1.0, 256.0, 10)), Err(Error::UnsupportedRate { .. })));
        assert!(resample_100hz(&tone(1.0, 50.0, 10)).is_err());
    }
}
