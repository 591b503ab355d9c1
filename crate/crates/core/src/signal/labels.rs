use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five AASM stages, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [SleepStage::W, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SleepStage> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SleepStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match RawStage::from_str(s)? {
            RawStage::Stage(st) => Ok(st),
            _ => Err(Error::UnknownStage(s.to_string())),
        }
    }
}

/// A label as it may appear in a hypnogram file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawStage {
    Stage(SleepStage),
    N4,
    Movement,
    Unknown,
}

impl FromStr for RawStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "W" => RawStage::Stage(SleepStage::W),
            "N1" => RawStage::Stage(SleepStage::N1),
            "N2" => RawStage::Stage(SleepStage::N2),
            "N3" => RawStage::Stage(SleepStage::N3),
            "REM" => RawStage::Stage(SleepStage::Rem),
            "N4" => RawStage::N4,
            "MOVEMENT" => RawStage::Movement,
            "UNKNOWN" => RawStage::Unknown,
            _ => return Err(Error::UnknownStage(s.to_string())),
        })
    }
}

/// Maps raw labels to stages. N4 becomes N3; MOVEMENT and UNKNOWN epochs
/// are dropped. Returns the kept stages and a per-input keep mask.
pub fn map_labels<S: AsRef<str>>(raw: &[S]) -> Result<(Vec<SleepStage>, Vec<bool>)> {
    let mut stages = Vec::with_capacity(raw.len());
    let mut keep = Vec::with_capacity(raw.len());
    for r in raw {
        match RawStage::from_str(r.as_ref())? {
            RawStage::Stage(s) => {
                stages.push(s);
                keep.push(true);
            }
            RawStage::N4 => {
                stages.push(SleepStage::N3);
                keep.push(true);
            }
            RawStage::Movement | RawStage::Unknown => keep.push(false),
        }
    }
    Ok((stages, keep))
}

/// Longest wake run kept on either side of the sleep period (30 min).
pub const MAX_BOUNDARY_WAKE: usize = 60;

/// Index range that survives wake trimming.
pub fn trim_wake_range(stages: &[SleepStage]) -> Result<Range<usize>> {
    let first = stages.iter().position(|&s| s != SleepStage::W).ok_or(Error::AllWake)?;
    let last = stages.iter().rposition(|&s| s != SleepStage::W).expect("non-wake exists");
    let start = first.saturating_sub(MAX_BOUNDARY_WAKE);
    let end = (last + 1 + MAX_BOUNDARY_WAKE).min(stages.len());
    Ok(start..end)
}

/// Drops leading and trailing wake beyond [`MAX_BOUNDARY_WAKE`] epochs from
/// both the stages and their epochs.
pub fn trim_wake<T: Clone>(stages: &[SleepStage], epochs: &[T]) -> Result<(Vec<SleepStage>, Vec<T>)> {
    if stages.len() != epochs.len() {
        return Err(Error::invalid(
            "trim_wake",
            format!("{} stages for {} epochs", stages.len(), epochs.len()),
        ));
    }
    let r = trim_wake_range(stages)?;
    Ok((stages[r.clone()].to_vec(), epochs[r].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use SleepStage::*;

    #[test]
    fn mapping() {
        let (s, keep) = map_labels(&["W", "N4", "MOVEMENT", "rem", "UNKNOWN", "N1"]).unwrap();
        assert_eq!(s, vec![W, N3, Rem, N1]);
        assert_eq!(keep, vec![true, true, false, true, false, true]);
        assert!(matches!(map_labels(&["N5"]), Err(Error::UnknownStage(_))));
    }

    fn with_wake(lead: usize, sleep: usize, trail: usize) -> Vec<SleepStage> {
        let mut v = vec![W; lead];
        v.extend(vec![N2; sleep]);
        v.extend(vec![W; trail]);
        v
    }

    #[test]
    fn leading_cap() {
        assert_eq!(trim_wake_range(&with_wake(100, 5, 0)).unwrap(), 40..105);
        assert_eq!(trim_wake_range(&with_wake(10, 5, 0)).unwrap(), 0..15);
    }

    #[test]
    fn trailing_cap() {
        let s = with_wake(0, 5, 200);
        let r = trim_wake_range(&s).unwrap();
        assert_eq!(s.len() - r.end, 140);
    }

    #[test]
    fn interior_wake_untouched() {
        let mut s = with_wake(0, 3, 0);
        s.extend(vec![W; 100]);
        s.push(N1);
        let idx: Vec<usize> = (0..s.len()).collect();
        let (t, e) = trim_wake(&s, &idx).unwrap();
        assert_eq!(t, s);
        assert_eq!(e, idx);
    }

    #[test]
    fn all_wake_rejected() {
        assert!(matches!(trim_wake_range(&[W, W]), Err(Error::AllWake)));
    }

    #[test]
    fn stage_round_trip() {
        for s in SleepStage::ALL {
            assert_eq!(s.name().parse::<SleepStage>().unwrap(), s);
            assert_eq!(SleepStage::from_index(s.index()), Some(s));
        }
    }
}
