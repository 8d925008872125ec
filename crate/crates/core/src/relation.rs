//! The four axis-aligned pairwise relations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Spatial relation between object A and object B, read as "A <relation> B".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

/// Which image axis a relation is judged along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Relation {
    /// Build order used throughout: left_of, right_of, above, below.
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            Relation::LeftOf | Relation::RightOf => Axis::Horizontal,
            Relation::Above | Relation::Below => Axis::Vertical,
        }
    }

    pub fn is_horizontal(self) -> bool {
        self.axis() == Axis::Horizontal
    }

    /// Sign the normalized center delta must have for the relation to hold.
    /// Image y grows downward, so "above" expects a negative delta.
    pub fn expected_sign(self) -> f64 {
        match self {
            Relation::LeftOf | Relation::Above => -1.0,
            Relation::RightOf | Relation::Below => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown relation `{s}`"))
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Horizontal => "horizontal",
            Axis::Vertical => "vertical",
        })
    }
}
