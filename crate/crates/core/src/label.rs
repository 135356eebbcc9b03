use std::fmt;
use std::str::FromStr;

use crate::error::OfclError;

/// Class identifier. Real classes are non-negative; pseudo classes minted
/// for clusters of unknowns are negative and render as `open-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(i64);

impl Label {
    pub fn class(id: u32) -> Self {
        Self(i64::from(id))
    }

    /// Pseudo label number `n >= 1`.
    pub fn pseudo(n: u32) -> Self {
        assert!(n >= 1, "pseudo ids start at 1");
        Self(-i64::from(n))
    }

    pub fn is_pseudo(self) -> bool {
        self.0 < 0
    }

    pub fn raw(self) -> i64 {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 0 {
            write!(f, "open-{}", -self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Label {
    type Err = OfclError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || OfclError::usage(format!("invalid label {s:?}"));
        if let Some(n) = s.strip_prefix("open-") {
            let n: u32 = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            Ok(Self::pseudo(n))
        } else {
            s.parse::<u32>().map(Self::class).map_err(|_| bad())
        }
    }
}
