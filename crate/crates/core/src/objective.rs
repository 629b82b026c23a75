//! Probing objectives: a tree-like structure paired with a depth or distance target.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Structure {
    /// Dependency syntax.
    Dep,
    /// Lexical hypernymy.
    Lex,
    /// Position in the sentence.
    Pos,
    /// Randomly generated trees (control task).
    Rand,
}

impl Structure {
    pub const ALL: [Structure; 4] = [Structure::Dep, Structure::Lex, Structure::Pos, Structure::Rand];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Dep => "DEP",
            Structure::Lex => "LEX",
            Structure::Pos => "POS",
            Structure::Rand => "RAND",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Depth,
    Distance,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Depth => "DEPTH",
            Target::Distance => "DISTANCE",
        }
    }
}

/// One of the eight probing objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectiveId {
    pub structure: Structure,
    pub target: Target,
}

impl ObjectiveId {
    pub const fn new(structure: Structure, target: Target) -> Self {
        ObjectiveId { structure, target }
    }

    /// All eight objectives, depth before distance within each structure.
    pub fn all() -> Vec<ObjectiveId> {
        Structure::ALL
            .iter()
            .flat_map(|&s| [ObjectiveId::new(s, Target::Depth), ObjectiveId::new(s, Target::Distance)])
            .collect()
    }

    /// Compact tag used in checkpoint files.
    pub fn tag(self) -> u8 {
        let s = match self.structure {
            Structure::Dep => 0,
            Structure::Lex => 1,
            Structure::Pos => 2,
            Structure::Rand => 3,
        };
        let t = match self.target {
            Target::Depth => 0,
            Target::Distance => 1,
        };
        s * 2 + t
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        if tag >= 8 {
            return None;
        }
        let structure = Structure::ALL[(tag / 2) as usize];
        let target = if tag % 2 == 0 { Target::Depth } else { Target::Distance };
        Some(ObjectiveId::new(structure, target))
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.structure.name(), self.target.name())
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    /// Parses `DEP-DEPTH`, `lex-distance`, `POS-DIST`, ...
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Config(format!("unknown objective '{}'", s));
        let (structure, target) = s.split_once(['-', '_', ':']).ok_or_else(bad)?;
        let structure = match structure.to_ascii_uppercase().as_str() {
            "DEP" => Structure::Dep,
            "LEX" => Structure::Lex,
            "POS" => Structure::Pos,
            "RAND" => Structure::Rand,
            _ => return Err(bad()),
        };
        let target = match target.to_ascii_uppercase().as_str() {
            "DEPTH" => Target::Depth,
            "DIST" | "DISTANCE" => Target::Distance,
            _ => return Err(bad()),
        };
        Ok(ObjectiveId::new(structure, target))
    }
}

impl Serialize for ObjectiveId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectiveId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
