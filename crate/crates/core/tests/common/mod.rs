//! Oracles and fixtures shared by the integration tests. Every oracle here
//! is written independently of the library code it checks.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepyco::model::ModelConfig;
use sleepyco::signal::synth::synth_dataset;
use sleepyco::signal::Subject;
use sleepyco::train::TrainConfig;

pub struct Published {
    pub name: &'static str,
    pub counts: [[u64; 5]; 5],
    pub acc_pct: f64,
    pub kappa: f64,
    pub f1_pct: [f64; 5],
}

/// Published confusion matrices (rows actual, columns predicted, order
/// W, N1, N2, N3, REM) with the headline scores reported for each.
pub fn published() -> Vec<Published> {
    vec![
        Published {
            name: "Sleep-EDF",
            counts: [
                [63640, 3739, 547, 29, 492],
                [3281, 9881, 6603, 50, 1707],
                [402, 2824, 62247, 1689, 1970],
                [38, 22, 2982, 9984, 13],
                [271, 1247, 2477, 10, 21830],
            ],
            acc_pct: 84.6,
            kappa: 0.787,
            f1_pct: [93.5, 50.4, 86.5, 80.5, 84.2],
        },
        Published {
            name: "MASS",
            counts: [
                [26022, 1960, 640, 37, 531],
                [1865, 10532, 3925, 12, 2875],
                [697, 2136, 98472, 4399, 2145],
                [69, 10, 5176, 25121, 7],
                [475, 1186, 1740, 4, 36779],
            ],
            acc_pct: 86.8,
            kappa: 0.811,
            f1_pct: [89.2, 60.1, 90.4, 83.8, 89.1],
        },
        Published {
            name: "Physio2018",
            counts: [
                [132475, 14656, 3866, 156, 650],
                [22437, 73624, 30750, 139, 7797],
                [5461, 19007, 329927, 16186, 6760],
                [336, 110, 23617, 78430, 94],
                [2138, 6084, 8307, 101, 100208],
            ],
            acc_pct: 80.9,
            kappa: 0.737,
            f1_pct: [84.2, 59.3, 85.3, 79.4, 86.3],
        },
        Published {
            name: "SHHS",
            counts: [
                [461447, 6500, 18513, 1586, 5367],
                [15077, 28570, 14861, 18, 6486],
                [19273, 12433, 636895, 29457, 19587],
                [899, 5, 36061, 186981, 240],
                [6534, 3521, 14650, 110, 218917],
            ],
            acc_pct: 87.9,
            kappa: 0.830,
            f1_pct: [92.6, 49.2, 88.5, 84.5, 88.6],
        },
    ]
}

/// Double-loop contrastive loss, summed over anchors, from the textbook
/// definition: positives share the anchor's label, the denominator runs
/// over every other sample, anchors without positives are skipped.
pub fn brute_supcon(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut acc = 0.0;
        let mut positives = 0;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                acc += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
                positives += 1;
            }
        }
        if positives > 0 {
            total -= acc / positives as f64;
        }
    }
    total
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Amplitude of the component at `freq` Hz by direct correlation, exact
/// for tones with a whole number of cycles in `x`.
pub fn tone_amplitude(x: &[f64], freq: f64, fs: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let w = 2.0 * PI * freq * i as f64 / fs;
        re += v * w.cos();
        im -= v * w.sin();
    }
    2.0 * (re * re + im * im).sqrt() / x.len() as f64
}

pub fn pure_tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

/// Smallest model that still has every component.
pub fn tiny_model(seq_len: usize) -> ModelConfig {
    ModelConfig {
        block_channels: vec![4, 4, 6, 8, 8],
        d_f: 8,
        d_m: 8,
        d_ff: 8,
        n_heads: 2,
        n_layers: 1,
        d_z: 8,
        projector_hidden: 8,
        seq_len,
        ..Default::default()
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch_crl: 8,
        batch_mtcl: 2,
        psi1: 2,
        psi2: 2,
        phi: 2,
        max_iters_crl: 6,
        max_iters_mtcl: 8,
        max_val_items: 6,
        eta: 1e-3,
        ..Default::default()
    }
}

pub fn synth_subjects(seed: u64, n: usize, epochs: usize) -> Vec<Subject> {
    synth_dataset(seed, n, epochs)
        .iter()
        .map(|s| s.to_subject().expect("synthetic subject loads"))
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
