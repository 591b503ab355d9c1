//! Zero-phase Butterworth band-stop: a second-order low-pass prototype
//! mapped to a band-reject response (fourth order overall), discretized by
//! the bilinear transform and run forward then backward.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Denominator with `a[0] == 1`.
    pub a: [f64; 3],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Magnitude response at `freq` for sample rate `fs`.
    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let z = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let num = self.b[0] + self.b[1] * z + self.b[2] * z * z;
        let den = self.a[0] + self.a[1] * z + self.a[2] * z * z;
        (num / den).norm()
    }

    /// Direct form II transposed, starting from state `s`.
    fn run(&self, x: &mut [f64], mut s: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let y = b0 * *v + s[0];
            s[0] = b1 * *v - a1 * y + s[1];
            s[1] = b2 * *v - a2 * y;
            *v = y;
        }
    }

    /// State that makes a constant input `x0` produce its steady output.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y0 = self.dc_gain() * x0;
        let s2 = self.b[2] * x0 - self.a[2] * y0;
        let s1 = self.b[1] * x0 - self.a[1] * y0 + s2;
        [s1, s2]
    }
}

/// Band-reject sections for `[lo_hz, hi_hz]` at sample rate `fs`, each with
/// unit gain at DC.
pub fn bandstop_sections(lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    let nyquist = fs / 2.0;
    if !(lo_hz > 0.0 && hi_hz > lo_hz && hi_hz < nyquist) {
        return Err(Error::invalid(
            "band_stop",
            format!("band [{lo_hz}, {hi_hz}] Hz must lie inside (0, {nyquist}) Hz"),
        ));
    }
    let k = 2.0 * fs;
    let w1 = k * (PI * lo_hz / fs).tan();
    let w2 = k * (PI * hi_hz / fs).tan();
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;
    let zero = Complex64::new(k, w0) / Complex64::new(k, -w0);
    // Upper-half-plane prototype pole; its conjugate yields the conjugate
    // poles, so each root below pairs with its own conjugate.
    let p = Complex64::from_polar(1.0, 3.0 * PI / 4.0);
    let q = bw / p;
    let disc = (q * q - 4.0 * w0 * w0).sqrt();
    let mut sections = Vec::with_capacity(2);
    for s in [(q + disc) / 2.0, (q - disc) / 2.0] {
        let zp = (k + s) / (k - s);
        let mut bq = Biquad {
            b: [1.0, -2.0 * zero.re, 1.0],
            a: [1.0, -2.0 * zp.re, zp.norm_sqr()],
        };
        let g = bq.dc_gain();
        bq.b.iter_mut().for_each(|v| *v /= g);
        sections.push(bq);
    }
    Ok(sections)
}

/// Odd-extension length on each side; long enough for the narrowest band's
/// transient to decay.
const PAD: usize = 300;

fn lfilter_cascade(sections: &[Biquad], x: &mut [f64]) {
    let x0 = x[0];
    for s in sections {
        let zi = s.steady_state(x0);
        s.run(x, zi);
    }
}

/// Applies `sections` forward and backward with odd-extension padding; the
/// output has zero phase and the same length as `x`.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = PAD.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    lfilter_cascade(sections, &mut ext);
    ext.reverse();
    lfilter_cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Removes `[lower_hz, lower_hz + width_hz]` from `x` sampled at `fs`.
pub fn band_stop(x: &[f64], lower_hz: f64, width_hz: f64, fs: f64) -> Result<Vec<f64>> {
    let sections = bandstop_sections(lower_hz, lower_hz + width_hz, fs)?;
    Ok(filtfilt(&sections, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shape() {
        let s = bandstop_sections(9.0, 11.0, 100.0).unwrap();
        let mag = |f: f64| s.iter().map(|b| b.magnitude(f, 100.0)).product::<f64>();
        assert!((mag(0.0) - 1.0).abs() < 1e-12);
        // the null sits at the geometric centre of the prewarped edges
        let k = 200.0;
        let w0 = (k * (PI * 0.09).tan() * k * (PI * 0.11).tan()).sqrt();
        let f0 = 100.0 / PI * (w0 / k).atan();
        assert!(mag(f0) < 1e-9);
        assert!(mag(10.0) < 0.01);
        // half-power at the prewarped band edges
        assert!((mag(9.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((mag(11.0) - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_in_zero_out() {
        assert_eq!(band_stop(&[0.0; 3000], 9.0, 2.0, 100.0).unwrap(), vec![0.0; 3000]);
    }

    #[test]
    fn rejects_band_outside_nyquist() {
        assert!(band_stop(&[0.0; 10], 49.0, 2.0, 100.0).is_err());
        assert!(band_stop(&[0.0; 10], 0.0, 2.0, 100.0).is_err());
    }
}
