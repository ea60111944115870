//! The five modalities and their canonical order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// RGB, infrared, color pencil, sketch and text. The derived ordering
/// `R < I < C < S < T` is the canonical order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "R")]
    Rgb,
    #[serde(rename = "I")]
    Infrared,
    #[serde(rename = "C")]
    ColorPencil,
    #[serde(rename = "S")]
    Sketch,
    #[serde(rename = "T")]
    Text,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Rgb,
        Modality::Infrared,
        Modality::ColorPencil,
        Modality::Sketch,
        Modality::Text,
    ];
    pub const VISUAL: [Modality; 4] = [
        Modality::Rgb,
        Modality::Infrared,
        Modality::ColorPencil,
        Modality::Sketch,
    ];
    /// Modalities that can appear in a query. RGB is the gallery modality.
    pub const QUERY: [Modality; 4] = [
        Modality::Infrared,
        Modality::ColorPencil,
        Modality::Sketch,
        Modality::Text,
    ];

    pub fn code(self) -> char {
        match self {
            Modality::Rgb => 'R',
            Modality::Infrared => 'I',
            Modality::ColorPencil => 'C',
            Modality::Sketch => 'S',
            Modality::Text => 'T',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == c.to_ascii_uppercase())
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_visual(self) -> bool {
        self != Modality::Text
    }

    /// Native channel count of the raw input (0 for text).
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb | Modality::ColorPencil => 3,
            Modality::Infrared | Modality::Sketch => 1,
            Modality::Text => 0,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_code(c),
            _ => None,
        }
        .ok_or_else(|| Error::Invalid(format!("unknown modality `{s}`")))
    }
}
