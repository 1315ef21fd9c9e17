//! Ordinal label types and the segment vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEGMENT_COUNT: usize = 11;

/// The coronary segments scored per patient, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentId {
    RcaP,
    RcaM,
    RcaD,
    Lm,
    LadP,
    LadM,
    LadD,
    LadD1,
    CxM,
    CxD,
    Ramus,
}

impl SegmentId {
    pub const ALL: [SegmentId; SEGMENT_COUNT] = [
        SegmentId::RcaP,
        SegmentId::RcaM,
        SegmentId::RcaD,
        SegmentId::Lm,
        SegmentId::LadP,
        SegmentId::LadM,
        SegmentId::LadD,
        SegmentId::LadD1,
        SegmentId::CxM,
        SegmentId::CxD,
        SegmentId::Ramus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("segment index {index} outside 0..{SEGMENT_COUNT}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentId::RcaP => "RCA_p",
            SegmentId::RcaM => "RCA_m",
            SegmentId::RcaD => "RCA_d",
            SegmentId::Lm => "LM",
            SegmentId::LadP => "LAD_p",
            SegmentId::LadM => "LAD_m",
            SegmentId::LadD => "LAD_d",
            SegmentId::LadD1 => "LAD_D1",
            SegmentId::CxM => "CX_m",
            SegmentId::CxD => "CX_d",
            SegmentId::Ramus => "RAMUS",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Nominal lumen radius in voxels of the synthetic phantom.
    pub(crate) fn nominal_radius(self) -> f64 {
        match self {
            SegmentId::Lm => 6.5,
            SegmentId::RcaP | SegmentId::LadP => 5.5,
            SegmentId::RcaM => 5.0,
            SegmentId::LadM | SegmentId::CxM => 4.8,
            SegmentId::RcaD => 4.5,
            SegmentId::CxD => 4.2,
            SegmentId::LadD | SegmentId::LadD1 | SegmentId::Ramus => 4.0,
        }
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stenosis grade: 0 none, 1 minimal (1–24 %), 2 mild (25–49 %),
/// 3 moderate (50–69 %), 4 severe (70–99 %), 5 occluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct StenosisClass(u8);

/// Lower degree bound of classes 2, 3, 4 (class 1 starts just above 0).
pub const STENOSIS_CUTS: [f64; 3] = [0.25, 0.50, 0.70];

impl StenosisClass {
    pub const COUNT: usize = 6;

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < Self::COUNT {
            Ok(StenosisClass(value))
        } else {
            Err(Error::contract(format!("stenosis class {value} outside 0..=5")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Moderate or worse (≥ 50 % narrowing).
    pub fn is_significant(self) -> bool {
        self.0 >= 3
    }
}

/// Maps a fractional lumen narrowing to its grade. Lower bounds are
/// inclusive; exactly 0 is class 0 and exactly 1 is class 5.
pub fn stenosis_class_of(degree: f64) -> Result<StenosisClass> {
    if !(0.0..=1.0).contains(&degree) {
        return Err(Error::contract(format!("stenosis degree {degree} outside [0, 1]")));
    }
    let class = if degree == 0.0 {
        0
    } else if degree == 1.0 {
        5
    } else {
        1 + STENOSIS_CUTS.iter().filter(|&&c| degree >= c).count() as u8
    };
    Ok(StenosisClass(class))
}

/// Patient-level CAD-RADS category, 0..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct CadRadsClass(u8);

impl CadRadsClass {
    pub const COUNT: usize = 6;

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < Self::COUNT {
            Ok(CadRadsClass(value))
        } else {
            Err(Error::contract(format!("CAD-RADS class {value} outside 0..=5")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Calcification grade: no, minimal, mild, moderate, severe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct CalcGrade(u8);

impl CalcGrade {
    pub const COUNT: usize = 5;

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < Self::COUNT {
            Ok(CalcGrade(value))
        } else {
            Err(Error::contract(format!("calcification grade {value} outside 0..=4")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Agatston-style cut points 0 / 10 / 100 / 400.
pub const DEFAULT_CALC_THRESHOLDS: [f64; 4] = [0.0, 10.0, 100.0, 400.0];

/// Bin index of a calcium burden: the number of thresholds strictly below
/// it, so every bin except the first is closed on the right.
pub fn calc_grade_of(burden: f64, thresholds: &[f64; 4]) -> Result<CalcGrade> {
    if burden.is_nan() || burden < 0.0 {
        return Err(Error::contract(format!("calcium burden {burden} is negative")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "calcium thresholds {thresholds:?} not ascending"
        )));
    }
    Ok(CalcGrade(thresholds.iter().filter(|&&t| t < burden).count() as u8))
}
