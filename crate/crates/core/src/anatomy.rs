//! Class table: FDI (ISO 3950) tooth codes and the jaw structures.
//!
//! Class 0 is background, 1..=32 are the permanent teeth in quadrant order
//! (11..18, 21..28, 31..38, 41..48), followed by the seven non-tooth
//! structures. Quadrants 1 and 4 are the patient's right side.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub const BACKGROUND: u16 = 0;
pub const MAXILLA: u16 = 33;
pub const MANDIBLE: u16 = 34;
pub const PHARYNX: u16 = 35;
pub const SINUS_LEFT: u16 = 36;
pub const SINUS_RIGHT: u16 = 37;
pub const IAC_LEFT: u16 = 38;
pub const IAC_RIGHT: u16 = 39;
/// Foreground classes plus background.
pub const NUM_CLASSES: u16 = 40;

/// Class id of an FDI tooth code such as 36.
pub fn fdi_to_class(fdi: u8) -> Option<u16> {
    let (q, p) = (fdi / 10, fdi % 10);
    ((1..=4).contains(&q) && (1..=8).contains(&p)).then(|| ((q - 1) * 8 + p) as u16)
}

pub fn class_to_fdi(class: u16) -> Option<u8> {
    (1..=32).contains(&class).then(|| {
        let k = (class - 1) as u8;
        (k / 8 + 1) * 10 + k % 8 + 1
    })
}

pub fn is_upper_tooth(class: u16) -> bool {
    matches!(class_to_fdi(class), Some(f) if f / 10 <= 2)
}

pub fn class_name(class: u16) -> String {
    match class {
        BACKGROUND => "background".into(),
        MAXILLA => "maxilla".into(),
        MANDIBLE => "mandible".into(),
        PHARYNX => "pharynx".into(),
        SINUS_LEFT => "sinus_left".into(),
        SINUS_RIGHT => "sinus_right".into(),
        IAC_LEFT => "iac_left".into(),
        IAC_RIGHT => "iac_right".into(),
        c => match class_to_fdi(c) {
            Some(f) => format!("tooth_{f}"),
            None => format!("class_{c}"),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Sinus,
    Iac,
}

impl std::str::FromStr for Structure {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinus" => Ok(Self::Sinus),
            "iac" => Ok(Self::Iac),
            _ => arg_err(format!("unknown structure {s:?}, expected sinus or iac")),
        }
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sinus => "sinus",
            Self::Iac => "iac",
        })
    }
}

/// The structure class on the same side as a tooth.
pub fn structure_class(fdi: u8, s: Structure) -> Result<u16> {
    let q = fdi / 10;
    let right = matches!(q, 1 | 4);
    match (s, q) {
        (Structure::Sinus, 1 | 2) => Ok(if right { SINUS_RIGHT } else { SINUS_LEFT }),
        (Structure::Iac, 3 | 4) => Ok(if right { IAC_RIGHT } else { IAC_LEFT }),
        _ => arg_err(format!("tooth {fdi} is not adjacent to the {s}")),
    }
}

/// Parses a list like `14-18,24-28` into FDI codes.
pub fn parse_tooth_set(spec: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = part.split_once('-').unwrap_or((part, part));
        let parse = |s: &str| -> Result<u8> {
            let v: u8 = s.trim().parse().map_err(|_| crate::Error::InvalidArgument(format!("bad tooth code {s:?}")))?;
            fdi_to_class(v).map(|_| v).ok_or_else(|| crate::Error::InvalidArgument(format!("{v} is not an FDI code")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a / 10 != b / 10 || a > b {
            return arg_err(format!("range {part} must stay within one quadrant"));
        }
        out.extend(a..=b);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fdi_roundtrip() {
        for c in 1..=32 {
            assert_eq!(fdi_to_class(class_to_fdi(c).unwrap()), Some(c));
        }
        assert_eq!(fdi_to_class(11), Some(1));
        assert_eq!(fdi_to_class(48), Some(32));
        assert_eq!(fdi_to_class(19), None);
        assert_eq!(class_to_fdi(33), None);
        assert!(is_upper_tooth(fdi_to_class(27).unwrap()));
        assert!(!is_upper_tooth(fdi_to_class(31).unwrap()));
    }

    #[test]
    fn tooth_sets() {
        assert_eq!(parse_tooth_set("14-18,24-28").unwrap().len(), 10);
        assert_eq!(parse_tooth_set("36").unwrap(), vec![36]);
        assert!(parse_tooth_set("18-21").is_err());
        assert!(parse_tooth_set("59").is_err());
    }

    #[test]
    fn sides() {
        assert_eq!(structure_class(16, Structure::Sinus).unwrap(), SINUS_RIGHT);
        assert_eq!(structure_class(26, Structure::Sinus).unwrap(), SINUS_LEFT);
        assert_eq!(structure_class(46, Structure::Iac).unwrap(), IAC_RIGHT);
        assert!(structure_class(36, Structure::Sinus).is_err());
    }
}
