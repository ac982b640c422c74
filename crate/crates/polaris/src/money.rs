//! Exact money arithmetic in minor units.
//!
//! Invoice totals and line-item amounts are stored as integer cents so that
//! cross-field arithmetic checks are exact. Parsing comes in two flavours:
//! a strict grammar used by the first extraction pass and a relaxed
//! normalizer used by targeted repair (tolerates thousands separators and
//! European decimal commas).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A non-negative monetary amount in minor units (cents).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Amount(i64);

impl Amount {
    pub fn from_cents(cents: i64) -> Self {
        Amount(cents)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn checked_add(self, other: Amount) -> Option<Amount> {
        self.0.checked_add(other.0).map(Amount)
    }

    pub fn abs_diff(self, other: Amount) -> i64 {
        (self.0 - other.0).abs()
    }

    /// Strict parse: plain decimal (`1234.56`, `1234`) or US-grouped
    /// (`1,234.56`). Anything else is rejected so that malformed values
    /// surface as missing fields rather than silently wrong numbers.
    pub fn parse_strict(s: &str) -> Option<Amount> {
        let s = s.trim();
        if s.is_empty() || s.starts_with('-') {
            return None;
        }
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        if let Some(f) = frac_part {
            if f.len() != 2 || !f.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
        }
        let digits = if int_part.contains(',') {
            let groups: Vec<&str> = int_part.split(',').collect();
            if groups.len() < 2 || groups[0].is_empty() || groups[0].len() > 3 {
                return None;
            }
            if !groups[1..].iter().all(|g| g.len() == 3) {
                return None;
            }
            groups.concat()
        } else {
            int_part.to_string()
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let whole: i64 = digits.parse().ok()?;
        let frac: i64 = frac_part.map_or(Some(0), |f| f.parse().ok())?;
        whole.checked_mul(100)?.checked_add(frac).map(Amount)
    }

    /// Relaxed parse: additionally accepts European formats (`1.234,56`,
    /// `1234,56`) and stray whitespace. When both separators appear, the
    /// later one is taken as the decimal point.
    pub fn parse_relaxed(s: &str) -> Option<Amount> {
        if let Some(a) = Amount::parse_strict(s) {
            return Some(a);
        }
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() || s.starts_with('-') {
            return None;
        }
        let last_dot = s.rfind('.');
        let last_comma = s.rfind(',');
        let decimal_pos = match (last_dot, last_comma) {
            (Some(d), Some(c)) => Some(d.max(c)),
            (None, Some(c)) => {
                // A lone comma is decimal only when followed by 1-2 digits;
                // `1,234` stays a thousands group.
                if s.len() - c - 1 <= 2 {
                    Some(c)
                } else {
                    None
                }
            }
            (Some(d), None) => {
                if s.len() - d - 1 <= 2 {
                    Some(d)
                } else {
                    None
                }
            }
            (None, None) => None,
        };
        let (int_raw, frac_raw) = match decimal_pos {
            Some(p) => (&s[..p], &s[p + 1..]),
            None => (s.as_str(), ""),
        };
        let int_digits: String = int_raw.chars().filter(|c| c.is_ascii_digit()).collect();
        if int_digits.is_empty() && frac_raw.is_empty() {
            return None;
        }
        if !frac_raw.bytes().all(|b| b.is_ascii_digit()) || frac_raw.len() > 2 {
            return None;
        }
        if int_raw.chars().any(|c| !c.is_ascii_digit() && c != '.' && c != ',') {
            return None;
        }
        let whole: i64 = if int_digits.is_empty() {
            0
        } else {
            int_digits.parse().ok()?
        };
        let frac: i64 = if frac_raw.is_empty() {
            0
        } else {
            let padded = format!("{:0<2}", frac_raw);
            padded.parse().ok()?
        };
        whole.checked_mul(100)?.checked_add(frac).map(Amount)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl FromStr for Amount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Amount::parse_strict(s).ok_or_else(|| format!("not a strict amount: {s:?}"))
    }
}
