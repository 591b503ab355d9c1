use serde::{Deserialize, Serialize};

use super::{SleepStage, EPOCH_SAMPLES};
use crate::error::{Error, Result};

/// How targets with fewer than `L-1` preceding epochs are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadHead {
    /// Left-pad the window by repeating the recording's first epoch.
    #[default]
    Repeat,
    /// Emit no sequence for those targets.
    Skip,
}

/// `L` consecutive epochs ending at the target epoch, whose stage is the
/// label.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSequence {
    pub signal: Vec<f64>,
    pub label: SleepStage,
    pub l: usize,
    pub subject_id: String,
}

/// Zero-based target indices that receive a sequence.
pub fn targets(n_epochs: usize, l: usize, pad: PadHead) -> std::ops::Range<usize> {
    match pad {
        PadHead::Repeat => 0..n_epochs,
        PadHead::Skip => (l - 1).min(n_epochs)..n_epochs,
    }
}

/// Epoch indices of the window for zero-based `target`, oldest first.
pub fn window(target: usize, l: usize) -> impl Iterator<Item = usize> {
    (0..l).map(move |j| (target + 1 + j).saturating_sub(l))
}

/// Builds every sequence of one recording. `epochs` holds the recording's
/// epochs back to back, [`EPOCH_SAMPLES`] each.
pub fn make_sequences(
    epochs: &[f64],
    labels: &[SleepStage],
    l: usize,
    pad: PadHead,
    subject_id: &str,
) -> Result<Vec<EpochSequence>> {
    if l < 1 {
        return Err(Error::invalid("make_sequences", "L must be at least 1"));
    }
    if epochs.len() != labels.len() * EPOCH_SAMPLES {
        return Err(Error::shape(
            "make_sequences",
            format!("{} samples for {} labelled epochs", epochs.len(), labels.len()),
        ));
    }
    Ok(targets(labels.len(), l, pad)
        .map(|t| {
            let mut signal = Vec::with_capacity(l * EPOCH_SAMPLES);
            for e in window(t, l) {
                signal.extend_from_slice(&epochs[e * EPOCH_SAMPLES..(e + 1) * EPOCH_SAMPLES]);
            }
            EpochSequence {
                signal,
                label: labels[t],
                l,
                subject_id: subject_id.to_string(),
            }
        })
        .collect())
}
