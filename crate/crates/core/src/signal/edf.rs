//! Reader and writer for the plain EDF subset: fixed-width ASCII header,
//! 16-bit little-endian samples, data records of equal duration.

use super::Recording;
use crate::error::{Error, Result};

const GLOBAL_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    /// Physical units per digital step.
    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        (f64::from(digital) - f64::from(self.digital_min)) * self.gain() + self.physical_min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    /// `-1` in the file means unknown; resolved from the payload length.
    pub num_records: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    fn record_samples(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record).sum()
    }
}

fn ascii(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn number<T: std::str::FromStr>(field: &str, bytes: &[u8]) -> Result<T> {
    let text = ascii(bytes);
    text.parse().map_err(|_| Error::EdfField {
        field: field.to_string(),
        value: text,
    })
}

fn need(bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::EdfTruncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(())
}

pub fn parse_header(bytes: &[u8]) -> Result<EdfHeader> {
    need(bytes, GLOBAL_HEADER)?;
    let ns: usize = number("number of signals", &bytes[252..256])?;
    let header_bytes = GLOBAL_HEADER + ns * SIGNAL_HEADER;
    need(bytes, header_bytes)?;
    let declared_bytes: usize = number("header bytes", &bytes[184..192])?;
    if declared_bytes != header_bytes {
        return Err(Error::EdfField {
            field: "header bytes".into(),
            value: declared_bytes.to_string(),
        });
    }
    let num_records: i64 = number("number of data records", &bytes[236..244])?;
    let record_duration: f64 = number("duration of a data record", &bytes[244..252])?;
    if !(record_duration > 0.0) {
        return Err(Error::EdfField {
            field: "duration of a data record".into(),
            value: record_duration.to_string(),
        });
    }

    // Per-signal fields are stored column-wise: all labels, then all
    // transducers, and so on.
    let mut offset = GLOBAL_HEADER;
    let mut column = |width: usize| {
        let start = offset;
        offset += width * ns;
        (0..ns).map(move |i| start + i * width..start + (i + 1) * width)
    };
    let labels: Vec<_> = column(16).map(|r| ascii(&bytes[r])).collect();
    let transducers: Vec<_> = column(80).map(|r| ascii(&bytes[r])).collect();
    let dims: Vec<_> = column(8).map(|r| ascii(&bytes[r])).collect();
    let pmin: Vec<_> = column(8).collect();
    let pmax: Vec<_> = column(8).collect();
    let dmin: Vec<_> = column(8).collect();
    let dmax: Vec<_> = column(8).collect();
    let prefilters: Vec<_> = column(80).map(|r| ascii(&bytes[r])).collect();
    let nsamp: Vec<_> = column(8).collect();

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: number("physical minimum", &bytes[pmin[i].clone()])?,
            physical_max: number("physical maximum", &bytes[pmax[i].clone()])?,
            digital_min: number("digital minimum", &bytes[dmin[i].clone()])?,
            digital_max: number("digital maximum", &bytes[dmax[i].clone()])?,
            prefilter: prefilters[i].clone(),
            samples_per_record: number("number of samples in each data record", &bytes[nsamp[i].clone()])?,
        };
        if s.digital_max <= s.digital_min {
            return Err(Error::EdfField {
                field: format!("digital range of `{}`", s.label),
                value: format!("{}..{}", s.digital_min, s.digital_max),
            });
        }
        signals.push(s);
    }

    let mut header = EdfHeader {
        version: ascii(&bytes[0..8]),
        patient: ascii(&bytes[8..88]),
        recording: ascii(&bytes[88..168]),
        start_date: ascii(&bytes[168..176]),
        start_time: ascii(&bytes[176..184]),
        header_bytes,
        num_records: 0,
        record_duration,
        signals,
    };
    let record_bytes = 2 * header.record_samples();
    header.num_records = if num_records < 0 {
        if record_bytes == 0 {
            0
        } else {
            (bytes.len() - header_bytes) / record_bytes
        }
    } else {
        num_records as usize
    };
    Ok(header)
}

/// Decodes one channel, matched by trimmed label (exact first, then
/// case-insensitive), into physical units.
pub fn read_edf(bytes: &[u8], channel: &str, subject_id: &str) -> Result<Recording> {
    let header = parse_header(bytes)?;
    let want = channel.trim();
    let idx = header
        .signals
        .iter()
        .position(|s| s.label == want)
        .or_else(|| header.signals.iter().position(|s| s.label.eq_ignore_ascii_case(want)))
        .ok_or_else(|| Error::ChannelNotFound {
            requested: want.to_string(),
            available: header.signals.iter().map(|s| s.label.clone()).collect(),
        })?;
    let sig = &header.signals[idx];
    let record_samples = header.record_samples();
    need(bytes, header.header_bytes + 2 * record_samples * header.num_records)?;
    let before: usize = header.signals[..idx].iter().map(|s| s.samples_per_record).sum();
    let mut samples = Vec::with_capacity(sig.samples_per_record * header.num_records);
    for r in 0..header.num_records {
        let start = header.header_bytes + 2 * (r * record_samples + before);
        let chunk = &bytes[start..start + 2 * sig.samples_per_record];
        samples.extend(
            chunk
                .chunks_exact(2)
                .map(|b| sig.to_physical(i16::from_le_bytes([b[0], b[1]]))),
        );
    }
    Ok(Recording {
        subject_id: subject_id.to_string(),
        samples,
        sample_rate: sig.samples_per_record as f64 / header.record_duration,
        channel: sig.label.clone(),
    })
}

/// A channel to encode with [`write_edf`].
#[derive(Clone, Debug)]
pub struct EdfSignal {
    pub label: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i16,
    pub digital_max: i16,
    pub samples_per_record: usize,
    pub samples: Vec<f64>,
}

fn put(buf: &mut Vec<u8>, text: &str, width: usize) {
    let mut field: Vec<u8> = text.bytes().take(width).collect();
    field.resize(width, b' ');
    buf.extend_from_slice(&field);
}

/// Compact decimal that fits the 8-character numeric fields.
fn num8(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 8 {
        return s;
    }
    for prec in (0..8).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

/// Encodes signals into EDF bytes. Samples are clamped to the physical
/// range and rounded to the nearest digital step; every signal must fill
/// the same whole number of records.
pub fn write_edf(signals: &[EdfSignal], record_duration: f64, patient: &str) -> Result<Vec<u8>> {
    if signals.is_empty() {
        return Err(Error::invalid("write_edf", "no signals"));
    }
    let records = signals[0].samples.len() / signals[0].samples_per_record.max(1);
    for s in signals {
        if s.samples_per_record == 0 || s.samples.len() != records * s.samples_per_record {
            return Err(Error::invalid(
                "write_edf",
                format!("signal `{}` does not fill {records} whole records", s.label),
            ));
        }
        if s.digital_max <= s.digital_min || !(s.physical_max > s.physical_min) {
            return Err(Error::invalid("write_edf", format!("signal `{}` has an empty range", s.label)));
        }
    }
    let ns = signals.len();
    let mut buf = Vec::with_capacity(GLOBAL_HEADER + ns * SIGNAL_HEADER);
    put(&mut buf, "0", 8);
    put(&mut buf, patient, 80);
    put(&mut buf, "Startdate X X X X", 80);
    put(&mut buf, "01.01.00", 8);
    put(&mut buf, "00.00.00", 8);
    put(&mut buf, &(GLOBAL_HEADER + ns * SIGNAL_HEADER).to_string(), 8);
    put(&mut buf, "", 44);
    put(&mut buf, &records.to_string(), 8);
    put(&mut buf, &num8(record_duration), 8);
    put(&mut buf, &ns.to_string(), 4);
    for s in signals {
        put(&mut buf, &s.label, 16);
    }
    for _ in signals {
        put(&mut buf, "", 80);
    }
    for _ in signals {
        put(&mut buf, "uV", 8);
    }
    for s in signals {
        put(&mut buf, &num8(s.physical_min), 8);
    }
    for s in signals {
        put(&mut buf, &num8(s.physical_max), 8);
    }
    for s in signals {
        put(&mut buf, &s.digital_min.to_string(), 8);
    }
    for s in signals {
        put(&mut buf, &s.digital_max.to_string(), 8);
    }
    for _ in signals {
        put(&mut buf, "", 80);
    }
    for s in signals {
        put(&mut buf, &s.samples_per_record.to_string(), 8);
    }
    for _ in signals {
        put(&mut buf, "", 32);
    }
    // Round-trip the printed ranges so encoding uses what readers will see.
    let headers = parse_header(&buf)?;
    for r in 0..records {
        for (s, h) in signals.iter().zip(&headers.signals) {
            let chunk = &s.samples[r * s.samples_per_record..(r + 1) * s.samples_per_record];
            for &v in chunk {
                let v = v.clamp(h.physical_min, h.physical_max);
                let d = ((v - h.physical_min) / h.gain() + f64::from(h.digital_min)).round();
                let d = d.clamp(f64::from(s.digital_min), f64::from(s.digital_max)) as i16;
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(label: &str, samples: Vec<f64>, spr: usize) -> EdfSignal {
        EdfSignal {
            label: label.into(),
            physical_min: -100.0,
            physical_max: 100.0,
            digital_min: -10,
            digital_max: 10,
            samples_per_record: spr,
            samples,
        }
    }

    #[test]
    fn linear_scaling() {
        let bytes = write_edf(&[signal("EEG Fpz-Cz", vec![-100.0, -10.0, 30.0, 100.0], 4)], 1.0, "X").unwrap();
        let rec = read_edf(&bytes, "EEG Fpz-Cz", "s1").unwrap();
        assert_eq!(rec.samples, vec![-100.0, -10.0, 30.0, 100.0]);
        assert_eq!(rec.sample_rate, 4.0);
        // raw digital values are exactly a tenth of the physical ones
        let data = &bytes[512..];
        let digital: Vec<i16> = data.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
        assert_eq!(digital, vec![-10, -1, 3, 10]);
    }

    #[test]
    fn two_signals_interleaved_by_record() {
        let a = signal("A", vec![10.0, 20.0, 30.0, 40.0], 2);
        let b = signal("B", vec![-10.0, -20.0], 1);
        let bytes = write_edf(&[a, b], 1.0, "X").unwrap();
        assert_eq!(&bytes[252..256], b"2   ");
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.signals.len(), 2);
        assert_eq!(h.num_records, 2);
        assert_eq!(read_edf(&bytes, "B", "s").unwrap().samples, vec![-10.0, -20.0]);
        assert_eq!(read_edf(&bytes, "a", "s").unwrap().samples, vec![10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn missing_channel_lists_available() {
        let bytes = write_edf(&[signal("C4-A1", vec![0.0; 2], 2)], 1.0, "X").unwrap();
        match read_edf(&bytes, "Fpz-Cz", "s") {
            Err(Error::ChannelNotFound { available, .. }) => assert_eq!(available, vec!["C4-A1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_malformed() {
        let bytes = write_edf(&[signal("A", vec![0.0; 2], 2)], 1.0, "X").unwrap();
        assert!(matches!(read_edf(&bytes[..100], "A", "s"), Err(Error::EdfTruncated { .. })));
        assert!(matches!(read_edf(&bytes[..300], "A", "s"), Err(Error::EdfTruncated { .. })));
        let mut bad = bytes.clone();
        bad[236..244].copy_from_slice(b"abc     ");
        assert!(matches!(read_edf(&bad, "A", "s"), Err(Error::EdfField { .. })));
        assert!(matches!(read_edf(&bytes[..514], "A", "s"), Err(Error::EdfTruncated { .. })));
    }

    #[test]
    fn unknown_record_count_inferred() {
        let mut bytes = write_edf(&[signal("A", vec![1.0, 2.0, 3.0, 4.0], 2)], 1.0, "X").unwrap();
        bytes[236..244].copy_from_slice(b"-1      ");
        assert_eq!(parse_header(&bytes).unwrap().num_records, 2);
    }
}
