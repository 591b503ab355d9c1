//! On-disk dataset layout: `<root>/<subject>/signal.{edf|raw}` plus
//! `<root>/<subject>/labels.csv` with columns `epoch_index,stage`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::edf::{read_edf, write_edf, EdfSignal};
use super::labels::{map_labels, trim_wake_range, SleepStage};
use super::raw::{read_raw, write_raw};
use super::resample::resample_100hz;
use super::EPOCH_SAMPLES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Edf,
    Raw,
}

impl DataFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            DataFormat::Edf => "signal.edf",
            DataFormat::Raw => "signal.raw",
        }
    }
}

/// A preprocessed recording: 100 Hz epochs back to back with one stage per
/// epoch, after label mapping and wake trimming.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub epochs: Vec<f64>,
    pub stages: Vec<SleepStage>,
}

impl Subject {
    pub fn n_epochs(&self) -> usize {
        self.stages.len()
    }

    pub fn epoch(&self, i: usize) -> &[f64] {
        &self.epochs[i * EPOCH_SAMPLES..(i + 1) * EPOCH_SAMPLES]
    }

    /// Applies label mapping and wake trimming to one raw recording at
    /// 100 Hz. Signal beyond the last labelled epoch is ignored.
    pub fn from_raw_labels<S: AsRef<str>>(id: &str, samples: &[f64], raw_labels: &[S]) -> Result<Subject> {
        let available = samples.len() / EPOCH_SAMPLES;
        if raw_labels.len() > available {
            return Err(Error::invalid(
                "dataset",
                format!("subject {id}: {} labels but only {available} full epochs of signal", raw_labels.len()),
            ));
        }
        let (stages, keep) = map_labels(raw_labels)?;
        let mut epochs = Vec::with_capacity(stages.len() * EPOCH_SAMPLES);
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            epochs.extend_from_slice(&samples[i * EPOCH_SAMPLES..(i + 1) * EPOCH_SAMPLES]);
        }
        let r = trim_wake_range(&stages)?;
        Ok(Subject {
            id: id.to_string(),
            epochs: epochs[r.start * EPOCH_SAMPLES..r.end * EPOCH_SAMPLES].to_vec(),
            stages: stages[r].to_vec(),
        })
    }
}

pub fn write_labels_csv(path: &Path, labels: &[&str]) -> Result<()> {
    let mut text = String::from("epoch_index,stage\n");
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "epoch_index,stage" => {}
        other => {
            return Err(Error::Csv(format!(
                "{}: expected header `epoch_index,stage`, found {other:?}",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let (idx, stage) = line
            .split_once(',')
            .ok_or_else(|| Error::Csv(format!("{}: row {row} is not `index,stage`", path.display())))?;
        if idx.trim().parse::<usize>().ok() != Some(row) {
            return Err(Error::Csv(format!(
                "{}: row {row} has epoch_index {:?}; indices must count up from 0",
                path.display(),
                idx.trim()
            )));
        }
        out.push(stage.trim().to_string());
    }
    Ok(out)
}

/// Writes one 100 Hz recording and its labels in the dataset layout.
pub fn write_subject(root: &Path, id: &str, samples: &[f64], labels: &[&str], format: DataFormat, channel: &str) -> Result<()> {
    let dir = root.join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let bytes = match format {
        DataFormat::Raw => write_raw(samples, 100),
        DataFormat::Edf => {
            let records = samples.len() / EPOCH_SAMPLES;
            write_edf(
                &[EdfSignal {
                    label: channel.to_string(),
                    physical_min: -500.0,
                    physical_max: 500.0,
                    digital_min: -32768,
                    digital_max: 32767,
                    samples_per_record: EPOCH_SAMPLES,
                    samples: samples[..records * EPOCH_SAMPLES].to_vec(),
                }],
                30.0,
                id,
            )?
        }
    };
    let path = dir.join(format.file_name());
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    write_labels_csv(&dir.join("labels.csv"), labels)
}

pub fn load_subject(root: &Path, id: &str, format: DataFormat, channel: &str) -> Result<Subject> {
    let dir = root.join(id);
    let path = dir.join(format.file_name());
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let rec = match format {
        DataFormat::Edf => read_edf(&bytes, channel, id)?,
        DataFormat::Raw => read_raw(&bytes, id)?,
    };
    let rec = resample_100hz(&rec)?;
    let labels = read_labels_csv(&dir.join("labels.csv"))?;
    Subject::from_raw_labels(id, &rec.samples, &labels)
}

/// Subject directories under `root` that contain a `labels.csv`, sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(root, err))?;
        if e.path().join("labels.csv").is_file() {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyData(format!("no subject directories under {}", root.display())));
    }
    Ok(ids)
}

pub fn load_dataset(root: &Path, format: DataFormat, channel: &str) -> Result<Vec<Subject>> {
    list_subjects(root)?
        .iter()
        .map(|id| load_subject(root, id, format, channel))
        .collect()
}
