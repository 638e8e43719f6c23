//! Column-ordering strategies: which key drives the quantization order, and
//! in which direction. Ties always break toward the smaller index so every
//! ordering is a deterministic total order.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortKey {
    /// Aggregated quantization sensitivity.
    Sensitivity,
    /// Magnitude of the grid rounding error.
    QuantError,
    /// Weight magnitude (column L2 norm when aggregated).
    WeightNorm,
    /// Natural index order; the direction is ignored.
    Unsorted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descending,
    Ascending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderingStrategy {
    pub key: SortKey,
    pub direction: Direction,
}

impl OrderingStrategy {
    pub const SENSI_DES: Self = OrderingStrategy {
        key: SortKey::Sensitivity,
        direction: Direction::Descending,
    };
    pub const SENSI_ASC: Self = OrderingStrategy {
        key: SortKey::Sensitivity,
        direction: Direction::Ascending,
    };
    pub const NONE: Self = OrderingStrategy {
        key: SortKey::Unsorted,
        direction: Direction::Descending,
    };

    /// Parses `<key>_<dir>` with keys `sensi`, `err`, `w` and directions
    /// `des`, `asc`. The unsorted strategy is plain `"none"`.
    pub fn parse(s: &str) -> Option<Self> {
        if s == "none" {
            return Some(Self::NONE);
        }
        let (key, dir) = s.rsplit_once('_')?;
        let key = match key {
            "sensi" => SortKey::Sensitivity,
            "err" => SortKey::QuantError,
            "w" => SortKey::WeightNorm,
            _ => return None,
        };
        let direction = match dir {
            "des" => Direction::Descending,
            "asc" => Direction::Ascending,
            _ => return None,
        };
        Some(OrderingStrategy { key, direction })
    }

    pub fn as_str(&self) -> &'static str {
        match (self.key, self.direction) {
            (SortKey::Unsorted, _) => "none",
            (SortKey::Sensitivity, Direction::Descending) => "sensi_des",
            (SortKey::Sensitivity, Direction::Ascending) => "sensi_asc",
            (SortKey::QuantError, Direction::Descending) => "err_des",
            (SortKey::QuantError, Direction::Ascending) => "err_asc",
            (SortKey::WeightNorm, Direction::Descending) => "w_des",
            (SortKey::WeightNorm, Direction::Ascending) => "w_asc",
        }
    }
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::parse(s).ok_or_else(|| {
            alloc::format!(
                "unknown strategy '{s}' (expected none or one of sensi/err/w + _des/_asc)"
            )
        })
    }
}

/// Indices `0..keys.len()` sorted by key under `direction`, ties by index.
pub fn sorted_indices(keys: &[f64], direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    match direction {
        Direction::Descending => idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b))),
        Direction::Ascending => idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b))),
    }
    idx
}
