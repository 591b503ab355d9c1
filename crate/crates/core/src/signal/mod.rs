//! EEG ingestion and preprocessing: EDF and raw readers, resampling to
//! 100 Hz, label mapping, wake trimming, sequence windows, cross-validation
//! splits and a synthetic recording generator.

pub mod dataset;
pub mod edf;
pub mod kfold;
pub mod labels;
pub mod raw;
pub mod resample;
pub mod sequences;
pub mod synth;

pub use dataset::{DataFormat, Subject};
pub use kfold::{kfold_split, FoldSplit};
pub use labels::{map_labels, trim_wake, SleepStage};
pub use sequences::{make_sequences, EpochSequence, PadHead};

/// Sample rate every downstream stage assumes.
pub const TARGET_RATE: f64 = 100.0;
/// Samples in one 30-s epoch at [`TARGET_RATE`].
pub const EPOCH_SAMPLES: usize = 3000;

/// One single-channel recording in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub channel: String,
}
