//! Canonical anatomical structure identifiers.
//!
//! Labels are stable integers shared by every label map, sidecar and
//! wire message: vertebrae `C1 = 1 … L5 = 24`, sacrum `26`, intervertebral
//! discs `100 + level` of the vertebra above the disc, and the soft-tissue
//! structures in the 200 range.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StructureId(u16);

/// Coarse anatomical class, used for merge precedence and carving policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureClass {
    Vertebra,
    Sacrum,
    Disc,
    SpinalCord,
    Csf,
    NerveRoots,
    LigamentumFlavum,
}

const REGIONS: [(char, u16, u16); 3] = [('C', 1, 7), ('T', 8, 19), ('L', 20, 24)];

impl StructureId {
    pub const SACRUM: StructureId = StructureId(26);
    pub const SPINAL_CORD: StructureId = StructureId(200);
    pub const CSF: StructureId = StructureId(201);
    pub const NERVE_ROOTS: StructureId = StructureId(202);
    pub const LIGAMENTUM_FLAVUM: StructureId = StructureId(203);

    pub const C1: StructureId = StructureId(1);
    pub const T1: StructureId = StructureId(8);
    pub const L1: StructureId = StructureId(20);
    pub const L2: StructureId = StructureId(21);
    pub const L3: StructureId = StructureId(22);
    pub const L4: StructureId = StructureId(23);
    pub const L5: StructureId = StructureId(24);

    /// Validates `label` against the canonical table.
    pub fn from_label(label: u16) -> Result<Self, Error> {
        let id = StructureId(label);
        if id.class().is_some() {
            Ok(id)
        } else {
            Err(Error::UnknownLabel(label))
        }
    }

    /// Vertebra at 1-based `level` (1 = C1, 24 = L5).
    pub fn vertebra(level: u16) -> Option<Self> {
        (1..=24).contains(&level).then_some(StructureId(level))
    }

    /// Disc directly below the vertebra at `upper_level` (2 = C2/C3 … 24 = L5/S1).
    pub fn disc_below(upper_level: u16) -> Option<Self> {
        (2..=24).contains(&upper_level).then_some(StructureId(100 + upper_level))
    }

    pub fn label(self) -> u16 {
        self.0
    }

    pub fn class(self) -> Option<StructureClass> {
        match self.0 {
            1..=24 => Some(StructureClass::Vertebra),
            26 => Some(StructureClass::Sacrum),
            102..=124 => Some(StructureClass::Disc),
            200 => Some(StructureClass::SpinalCord),
            201 => Some(StructureClass::Csf),
            202 => Some(StructureClass::NerveRoots),
            203 => Some(StructureClass::LigamentumFlavum),
            _ => None,
        }
    }

    pub fn is_vertebra(self) -> bool {
        self.class() == Some(StructureClass::Vertebra)
    }

    /// True for the bony levels used as registration landmarks.
    pub fn is_level(self) -> bool {
        matches!(
            self.class(),
            Some(StructureClass::Vertebra | StructureClass::Sacrum)
        )
    }

    pub fn is_neural(self) -> bool {
        matches!(
            self.class(),
            Some(StructureClass::SpinalCord | StructureClass::Csf | StructureClass::NerveRoots)
        )
    }

    /// Position along the spine, cranial to caudal. Sacrum sorts after L5.
    pub fn level_index(self) -> Option<u16> {
        match self.class()? {
            StructureClass::Vertebra => Some(self.0),
            StructureClass::Sacrum => Some(25),
            StructureClass::Disc => Some(self.0 - 100),
            _ => None,
        }
    }

    /// All canonical structures in label order.
    pub fn all() -> impl Iterator<Item = StructureId> {
        (1..=24u16)
            .chain(std::iter::once(26))
            .chain(102..=124)
            .chain(200..=203)
            .map(StructureId)
    }
}

fn vertebra_name(level: u16) -> String {
    for (prefix, lo, hi) in REGIONS {
        if (lo..=hi).contains(&level) {
            return format!("{prefix}{}", level - lo + 1);
        }
    }
    "S1".to_string()
}

fn parse_vertebra(name: &str) -> Option<u16> {
    let mut chars = name.chars();
    let prefix = chars.next()?;
    let n: u16 = chars.as_str().parse().ok()?;
    REGIONS
        .iter()
        .find(|(p, _, _)| *p == prefix)
        .and_then(|(_, lo, hi)| {
            let level = lo + n.checked_sub(1)?;
            (level <= *hi).then_some(level)
        })
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class() {
            Some(StructureClass::Vertebra) => f.write_str(&vertebra_name(self.0)),
            Some(StructureClass::Sacrum) => f.write_str("sacrum"),
            Some(StructureClass::Disc) => {
                let upper = self.0 - 100;
                write!(f, "disc_{}_{}", vertebra_name(upper), vertebra_name(upper + 1))
            }
            Some(StructureClass::SpinalCord) => f.write_str("spinal_cord"),
            Some(StructureClass::Csf) => f.write_str("csf"),
            Some(StructureClass::NerveRoots) => f.write_str("nerve_roots"),
            Some(StructureClass::LigamentumFlavum) => f.write_str("ligamentum_flavum"),
            None => write!(f, "label_{}", self.0),
        }
    }
}

impl FromStr for StructureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || Error::UnknownStructure(s.to_string());
        match s {
            "sacrum" | "S1" => return Ok(Self::SACRUM),
            "spinal_cord" => return Ok(Self::SPINAL_CORD),
            "csf" => return Ok(Self::CSF),
            "nerve_roots" => return Ok(Self::NERVE_ROOTS),
            "ligamentum_flavum" => return Ok(Self::LIGAMENTUM_FLAVUM),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("disc_") {
            let (upper, lower) = rest.split_once('_').ok_or_else(unknown)?;
            let upper = parse_vertebra(upper).ok_or_else(unknown)?;
            let expected_lower = vertebra_name(upper + 1);
            return match Self::disc_below(upper) {
                Some(id) if lower == expected_lower => Ok(id),
                _ => Err(unknown()),
            };
        }
        parse_vertebra(s).map(StructureId).ok_or_else(unknown)
    }
}

impl Serialize for StructureId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StructureId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}
