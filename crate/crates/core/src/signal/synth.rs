//! Band-coded synthetic EEG. Each stage is a sum of sinusoids drawn from
//! its characteristic AASM bands plus white Gaussian noise, and stages
//! follow a cyclic hypnogram with random dwell times.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{SleepStage, EPOCH_SAMPLES, TARGET_RATE};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSubject {
    pub id: String,
    /// 100 Hz samples in microvolts, one epoch per stage.
    pub samples: Vec<f64>,
    pub stages: Vec<SleepStage>,
}

const CYCLE: [SleepStage; 6] = [
    SleepStage::W,
    SleepStage::N1,
    SleepStage::N2,
    SleepStage::N3,
    SleepStage::N2,
    SleepStage::Rem,
];
const DWELL: std::ops::RangeInclusive<usize> = 4..=14;
const NOISE_UV: f64 = 5.0;

/// Generator keyed by `(seed, subject_id)`, so a subject's data does not
/// depend on which other subjects are generated or in what order.
pub fn subject_rng(seed: u64, subject_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(subject_id.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    rng
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

pub fn hypnogram<R: Rng>(rng: &mut R, n_epochs: usize) -> Vec<SleepStage> {
    let mut out = Vec::with_capacity(n_epochs);
    let mut pos = 0;
    while out.len() < n_epochs {
        let dwell = rng.gen_range(DWELL);
        for _ in 0..dwell.min(n_epochs - out.len()) {
            out.push(CYCLE[pos]);
        }
        pos = (pos + 1) % CYCLE.len();
    }
    out
}

fn tone<R: Rng>(rng: &mut R, out: &mut [f64], lo: f64, hi: f64, amp: f64) {
    let f = rng.gen_range(lo..hi);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let a = amp * rng.gen_range(0.8..1.2);
    for (i, v) in out.iter_mut().enumerate() {
        *v += a * (2.0 * PI * f * i as f64 / TARGET_RATE + phase).sin();
    }
}

/// Spindle-like bursts: Hann-windowed tones of 1 to 2 s.
fn bursts<R: Rng>(rng: &mut R, out: &mut [f64], lo: f64, hi: f64, amp: f64, count: usize) {
    for _ in 0..count {
        let len = rng.gen_range(100..=200usize);
        let start = rng.gen_range(0..out.len() - len);
        let f = rng.gen_range(lo..hi);
        let a = amp * rng.gen_range(0.8..1.2);
        for j in 0..len {
            let env = 0.5 - 0.5 * (2.0 * PI * j as f64 / (len - 1) as f64).cos();
            out[start + j] += a * env * (2.0 * PI * f * j as f64 / TARGET_RATE).sin();
        }
    }
}

/// Band-limited sawtooth from its first four harmonics.
fn sawtooth<R: Rng>(rng: &mut R, out: &mut [f64], lo: f64, hi: f64, amp: f64) {
    let f = rng.gen_range(lo..hi);
    let phase = rng.gen_range(0.0..2.0 * PI);
    for (i, v) in out.iter_mut().enumerate() {
        let w = 2.0 * PI * f * i as f64 / TARGET_RATE + phase;
        let s: f64 = (1..=4).map(|h| (h as f64 * w).sin() / h as f64).sum();
        *v += amp * 2.0 / PI * s;
    }
}

pub fn synth_epoch<R: Rng>(rng: &mut R, stage: SleepStage) -> Vec<f64> {
    let mut x = vec![0.0; EPOCH_SAMPLES];
    match stage {
        SleepStage::W => {
            tone(rng, &mut x, 8.0, 13.0, 30.0);
            tone(rng, &mut x, 13.0, 30.0, 8.0);
            tone(rng, &mut x, 4.0, 7.0, 4.0);
        }
        SleepStage::N1 => {
            tone(rng, &mut x, 4.0, 7.0, 25.0);
            tone(rng, &mut x, 8.0, 13.0, 6.0);
        }
        SleepStage::N2 => {
            tone(rng, &mut x, 4.0, 7.0, 25.0);
            let n = rng.gen_range(2..=3);
            bursts(rng, &mut x, 12.0, 14.0, 35.0, n);
        }
        SleepStage::N3 => {
            tone(rng, &mut x, 0.5, 2.0, 80.0);
            tone(rng, &mut x, 0.5, 2.0, 40.0);
            tone(rng, &mut x, 4.0, 7.0, 6.0);
        }
        SleepStage::Rem => {
            sawtooth(rng, &mut x, 2.0, 6.0, 30.0);
            tone(rng, &mut x, 4.0, 7.0, 15.0);
        }
    }
    let noise = Normal::new(0.0, NOISE_UV).expect("positive sigma");
    for v in &mut x {
        *v += noise.sample(rng);
    }
    x
}

impl SynthSubject {
    /// The subject as loaded from disk: labels mapped and wake trimmed.
    pub fn to_subject(&self) -> crate::error::Result<super::Subject> {
        let names: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
        super::Subject::from_raw_labels(&self.id, &self.samples, &names)
    }
}

pub fn synth_subject(seed: u64, id: &str, n_epochs: usize) -> SynthSubject {
    let mut rng = subject_rng(seed, id);
    let stages = hypnogram(&mut rng, n_epochs);
    let mut samples = Vec::with_capacity(n_epochs * EPOCH_SAMPLES);
    for &s in &stages {
        samples.extend(synth_epoch(&mut rng, s));
    }
    SynthSubject {
        id: id.to_string(),
        samples,
        stages,
    }
}

pub fn synth_dataset(seed: u64, n_subjects: usize, epochs_per_subject: usize) -> Vec<SynthSubject> {
    (0..n_subjects)
        .map(|i| synth_subject(seed, &subject_id(i), epochs_per_subject))
        .collect()
}
