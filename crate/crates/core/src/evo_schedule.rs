//! EvoRNN cell schedules.
//!
//! A schedule is a list of `(length, hidden)` segments ordered from the start
//! of the sequence to its end. Positions are resolved by their distance to
//! the end, `t' = L − 1 − t`: the last segment covers the smallest `t'`, and
//! anything before the earliest segment's span falls into the earliest
//! segment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule has no segments")]
    Empty,
    #[error("segment {index} has length {length} and hidden size {hidden}; both must be positive")]
    ZeroSegment {
        index: usize,
        length: usize,
        hidden: usize,
    },
    #[error("position {t} is outside the sequence of length {len}")]
    PositionOutOfRange { t: usize, len: usize },
    #[error("multiply-add count overflows 64 bits")]
    Overflow,
    #[error("segment lengths sum to {total} but the sequence length is {expected}")]
    LengthMismatch { total: usize, expected: usize },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("cannot build a {family} schedule for length {length}, max hidden {max_hidden} with {segments} segments: {reason}")]
    Builder {
        family: &'static str,
        length: usize,
        max_hidden: usize,
        segments: usize,
        reason: &'static str,
    },
    #[error("invalid schedule JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Segment {
    pub length: usize,
    pub hidden: usize,
}

impl From<(usize, usize)> for Segment {
    fn from((length, hidden): (usize, usize)) -> Self {
        Segment { length, hidden }
    }
}

impl From<Segment> for (usize, usize) {
    fn from(s: Segment) -> Self {
        (s.length, s.hidden)
    }
}

/// Segments listed earliest-first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct CellSchedule {
    segments: Vec<Segment>,
}

impl CellSchedule {
    pub fn new(segments: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, ScheduleError> {
        let segments: Vec<Segment> = segments.into_iter().map(Segment::from).collect();
        if segments.is_empty() {
            return Err(ScheduleError::Empty);
        }
        if let Some((index, s)) = segments
            .iter()
            .enumerate()
            .find(|(_, s)| s.length == 0 || s.hidden == 0)
        {
            return Err(ScheduleError::ZeroSegment {
                index,
                length: s.length,
                hidden: s.hidden,
            });
        }
        Ok(CellSchedule { segments })
    }

    pub fn constant(length: usize, hidden: usize) -> Result<Self, ScheduleError> {
        Self::new([(length, hidden)])
    }

    /// Parses a JSON array of `[length, hidden]` pairs.
    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        let pairs: Vec<(usize, usize)> =
            serde_json::from_str(text).map_err(|e| ScheduleError::Json(e.to_string()))?;
        Self::new(pairs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain integers serialize")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn max_hidden(&self) -> usize {
        self.segments.iter().map(|s| s.hidden).max().unwrap_or(0)
    }

    pub fn first_hidden(&self) -> usize {
        self.segments[0].hidden
    }

    pub fn last_hidden(&self) -> usize {
        self.segments[self.segments.len() - 1].hidden
    }

    /// Segment index covering distance-to-end `t_prime`.
    pub fn segment_at_offset(&self, t_prime: usize) -> usize {
        let mut upper = 0;
        for (idx, seg) in self.segments.iter().enumerate().rev() {
            upper += seg.length;
            if t_prime < upper {
                return idx;
            }
        }
        0
    }

    /// Same segment boundaries, different hidden sizes.
    pub fn same_boundaries(&self, other: &CellSchedule) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.length == b.length)
    }
}

impl<'de> Deserialize<'de> for CellSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let pairs = Vec::<(usize, usize)>::deserialize(de)?;
        CellSchedule::new(pairs).map_err(serde::de::Error::custom)
    }
}

/// The architectures of the published comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    LmBaseline,
    LmPowerLaw,
    LmExp,
    SeqRecBaseline,
    SeqRecPowerLaw,
    SeqRecExp,
    SeqRecExtrExp,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::LmBaseline,
        Preset::LmPowerLaw,
        Preset::LmExp,
        Preset::SeqRecBaseline,
        Preset::SeqRecPowerLaw,
        Preset::SeqRecExp,
        Preset::SeqRecExtrExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LmBaseline => "lm-baseline",
            Preset::LmPowerLaw => "lm-powerlaw",
            Preset::LmExp => "lm-exp",
            Preset::SeqRecBaseline => "seqrec-baseline",
            Preset::SeqRecPowerLaw => "seqrec-powerlaw",
            Preset::SeqRecExp => "seqrec-exp",
            Preset::SeqRecExtrExp => "seqrec-extrexp",
        }
    }

    fn pairs(self) -> &'static [(usize, usize)] {
        match self {
            Preset::LmBaseline => &[(128, 2048)],
            Preset::LmPowerLaw => &[
                (64, 64),
                (32, 128),
                (16, 256),
                (8, 512),
                (4, 1024),
                (4, 2048),
            ],
            Preset::LmExp => &[
                (108, 64),
                (4, 128),
                (4, 256),
                (4, 512),
                (4, 1024),
                (4, 2048),
            ],
            Preset::SeqRecBaseline => &[(512, 256)],
            Preset::SeqRecPowerLaw => &[(256, 32), (128, 64), (64, 128), (32, 256), (32, 256)],
            Preset::SeqRecExp => &[(384, 34), (32, 69), (32, 138), (32, 276), (32, 276)],
            Preset::SeqRecExtrExp => &[(480, 2), (8, 8), (8, 64), (8, 256), (8, 1024)],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ScheduleError::UnknownPreset(s.to_owned()))
    }
}

pub fn build_preset(preset: Preset) -> CellSchedule {
    CellSchedule::new(preset.pairs().iter().copied()).expect("preset rows are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLookup {
    pub segment: usize,
    pub hidden: usize,
    /// Distance to the end of the sequence.
    pub t_prime: usize,
}

pub fn lookup_cell(
    t: usize,
    len: usize,
    schedule: &CellSchedule,
) -> Result<CellLookup, ScheduleError> {
    if t >= len {
        return Err(ScheduleError::PositionOutOfRange { t, len });
    }
    let t_prime = len - 1 - t;
    let segment = schedule.segment_at_offset(t_prime);
    Ok(CellLookup {
        segment,
        hidden: schedule.segments[segment].hidden,
        t_prime,
    })
}

/// `Σ_s ℓ_s · n_s²`: hidden-to-hidden multiply-adds of one pass.
pub fn cost_multiply_adds(schedule: &CellSchedule) -> Result<u64, ScheduleError> {
    schedule.segments.iter().try_fold(0u64, |acc, s| {
        acc.checked_add(segment_cost(s)?)
            .ok_or(ScheduleError::Overflow)
    })
}

fn segment_cost(s: &Segment) -> Result<u64, ScheduleError> {
    let n = s.hidden as u64;
    n.checked_mul(n)
        .and_then(|sq| sq.checked_mul(s.length as u64))
        .ok_or(ScheduleError::Overflow)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentCost {
    pub length: usize,
    pub hidden: usize,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub segments: Vec<SegmentCost>,
    pub total: u64,
}

pub fn cost_breakdown(schedule: &CellSchedule) -> Result<CostBreakdown, ScheduleError> {
    let segments = schedule
        .segments
        .iter()
        .map(|s| {
            Ok(SegmentCost {
                length: s.length,
                hidden: s.hidden,
                cost: segment_cost(s)?,
            })
        })
        .collect::<Result<Vec<_>, ScheduleError>>()?;
    Ok(CostBreakdown {
        segments,
        total: cost_multiply_adds(schedule)?,
    })
}

/// Checks that the segments cover exactly `len` positions.
pub fn validate_schedule(
    schedule: &CellSchedule,
    len: usize,
) -> Result<CostBreakdown, ScheduleError> {
    let total = schedule.total_length();
    if total != len {
        return Err(ScheduleError::LengthMismatch {
            total,
            expected: len,
        });
    }
    cost_breakdown(schedule)
}

fn builder_error(
    family: &'static str,
    length: usize,
    max_hidden: usize,
    segments: usize,
    reason: &'static str,
) -> ScheduleError {
    ScheduleError::Builder {
        family,
        length,
        max_hidden,
        segments,
        reason,
    }
}

/// Halving lengths toward the end (`L/2, L/4, …`, last two equal) with
/// doubling hidden sizes up to `max_hidden`. `(128, 2048, 6)` gives the
/// `lm-powerlaw` row.
pub fn power_law_schedule(
    length: usize,
    max_hidden: usize,
    segments: usize,
) -> Result<CellSchedule, ScheduleError> {
    let err = |reason| builder_error("power-law", length, max_hidden, segments, reason);
    if segments < 2 {
        return Err(err("needs at least 2 segments"));
    }
    let div = 1usize << (segments - 1);
    if !length.is_multiple_of(div) || length < div {
        return Err(err("length must be a positive multiple of 2^(segments-1)"));
    }
    if !max_hidden.is_multiple_of(div) || max_hidden < div {
        return Err(err(
            "max hidden must be a positive multiple of 2^(segments-1)",
        ));
    }
    let mut pairs: Vec<(usize, usize)> = (0..segments - 1)
        .map(|s| (length >> (s + 1), max_hidden >> (segments - 1 - s)))
        .collect();
    pairs.push((length / div, max_hidden));
    CellSchedule::new(pairs)
}

/// Equal short tail segments of length `L/32` with doubling hidden sizes;
/// the earliest segment absorbs the rest. `(128, 2048, 6)` gives `lm-exp`.
pub fn exp_schedule(
    length: usize,
    max_hidden: usize,
    segments: usize,
) -> Result<CellSchedule, ScheduleError> {
    let err = |reason| builder_error("exp", length, max_hidden, segments, reason);
    if segments < 2 {
        return Err(err("needs at least 2 segments"));
    }
    let tail = length / 32;
    if tail == 0 || !length.is_multiple_of(32) || length <= tail * (segments - 1) {
        return Err(err(
            "length must be a multiple of 32 leaving room for the first segment",
        ));
    }
    let div = 1usize << (segments - 1);
    if !max_hidden.is_multiple_of(div) || max_hidden < div {
        return Err(err(
            "max hidden must be a positive multiple of 2^(segments-1)",
        ));
    }
    let mut pairs = vec![(length - tail * (segments - 1), max_hidden / div)];
    pairs.extend((1..segments).map(|s| (tail, max_hidden >> (segments - 1 - s))));
    CellSchedule::new(pairs)
}

/// Four short tail segments of length `L/64` with hidden sizes
/// `max · (1/128, 1/16, 1/4, 1)` after a long earliest segment of size
/// `max/512`, each rounded up to at least 1. `(512, 1024)` gives
/// `seqrec-extrexp`.
pub fn extr_exp_schedule(length: usize, max_hidden: usize) -> Result<CellSchedule, ScheduleError> {
    let err = |reason| builder_error("extr-exp", length, max_hidden, 5, reason);
    let tail = length / 64;
    if tail == 0 || !length.is_multiple_of(64) {
        return Err(err("length must be a positive multiple of 64"));
    }
    if max_hidden == 0 {
        return Err(err("max hidden must be positive"));
    }
    CellSchedule::new([
        (length - 4 * tail, max_hidden.div_ceil(512)),
        (tail, max_hidden.div_ceil(128)),
        (tail, max_hidden.div_ceil(16)),
        (tail, max_hidden.div_ceil(4)),
        (tail, max_hidden),
    ])
}
