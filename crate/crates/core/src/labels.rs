//! Label scheme and modality naming.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labels that may appear in a segmentation mask. 0 is background.
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

pub fn is_valid_label(v: u8) -> bool {
    VALID_LABELS.contains(&v)
}

/// Tumor sub-region with its annotation label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubRegion {
    /// Necrotic / non-enhancing core, label 1.
    Ncr,
    /// Peritumoral edema, label 2.
    Ed,
    /// GD-enhancing tumor, label 4.
    Et,
}

impl SubRegion {
    /// Processing order; also the row order of attention matrices.
    pub const ALL: [SubRegion; 3] = [SubRegion::Ncr, SubRegion::Ed, SubRegion::Et];

    pub fn label(self) -> u8 {
        match self {
            SubRegion::Ncr => 1,
            SubRegion::Ed => 2,
            SubRegion::Et => 4,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            1 => Ok(SubRegion::Ncr),
            2 => Ok(SubRegion::Ed),
            4 => Ok(SubRegion::Et),
            other => Err(Error::input(format!("{other} is not a tumor sub-region label"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            SubRegion::Ncr => 0,
            SubRegion::Ed => 1,
            SubRegion::Et => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubRegion::Ncr => "NCR",
            SubRegion::Ed => "ED",
            SubRegion::Et => "ET",
        }
    }
}

impl fmt::Display for SubRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// MRI acquisition sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
}

impl Modality {
    /// Canonical channel order of a multi-modal volume.
    pub const ORDER: [Modality; 4] = [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::T1 => 0,
            Modality::T1c => 1,
            Modality::T2 => 2,
            Modality::Flair => 3,
        }
    }

    /// Lower-case key used for raw per-modality arrays.
    pub fn key(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t1c" | "t1ce" | "t1gd" => Ok(Modality::T1c),
            "t2" => Ok(Modality::T2),
            "flair" => Ok(Modality::Flair),
            _ => Err(Error::input(format!("unknown modality `{s}`"))),
        }
    }
}
