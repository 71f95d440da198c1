use std::fmt;

use serde::{Deserialize, Serialize};

use super::glyphs::{char_index, ALPHABET};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const FIRST_YEAR: u32 = 2019;
pub const LAST_YEAR: u32 = 2027;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DateKind {
    Realistic,
    Unrealistic,
}

impl fmt::Display for DateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DateKind::Realistic => "realistic",
            DateKind::Unrealistic => "unrealistic",
        })
    }
}

impl std::str::FromStr for DateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "realistic" => Ok(DateKind::Realistic),
            "unrealistic" => Ok(DateKind::Unrealistic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown date kind {s:?} (expected realistic or unrealistic)"
            ))),
        }
    }
}

/// A `dddd/dd/dd` string over the Arabic-Indic alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DateText {
    text: String,
    kind: DateKind,
}

pub fn is_leap(year: u32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(year) => 29,
        2 => 28,
        _ => 0,
    }
}

fn digits_to_text(d: &[u32; 8]) -> String {
    let mut s = String::with_capacity(20);
    for (i, &v) in d.iter().enumerate() {
        if i == 4 || i == 6 {
            s.push('/');
        }
        s.push(ALPHABET[v as usize]);
    }
    s
}

impl DateText {
    /// Checks the `dddd/dd/dd` pattern; realistic dates must also be valid
    /// calendar dates within the supported year range.
    pub fn new(text: &str, kind: DateKind) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidLabel {
            label: text.to_string(),
            reason: reason.to_string(),
        };
        let chars: Vec<char> = text.chars().collect();
        if chars.len() != 10 {
            return Err(bad("expected 10 characters"));
        }
        for (i, &c) in chars.iter().enumerate() {
            let idx = char_index(c).ok_or_else(|| bad("character outside the alphabet"))?;
            let want_slash = i == 4 || i == 7;
            if want_slash != (idx == 10) {
                return Err(bad("expected dddd/dd/dd"));
            }
        }
        let date = DateText {
            text: text.to_string(),
            kind,
        };
        if kind == DateKind::Realistic && date.calendar().is_none() {
            return Err(bad("not a calendar date in 2019-2027"));
        }
        Ok(date)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> DateKind {
        self.kind
    }

    /// The eight digit values in reading order.
    pub fn digits(&self) -> [u32; 8] {
        let mut out = [0; 8];
        for (o, c) in out
            .iter_mut()
            .zip(self.text.chars().filter(|&c| c != '/'))
        {
            *o = char_index(c).expect("validated") as u32;
        }
        out
    }

    /// `(year, month, day)` when this is a valid date in 2019–2027.
    pub fn calendar(&self) -> Option<(u32, u32, u32)> {
        let d = self.digits();
        let year = d[0] * 1000 + d[1] * 100 + d[2] * 10 + d[3];
        let month = d[4] * 10 + d[5];
        let day = d[6] * 10 + d[7];
        ((FIRST_YEAR..=LAST_YEAR).contains(&year)
            && (1..=12).contains(&month)
            && day >= 1
            && day <= days_in_month(year, month))
        .then_some((year, month, day))
    }
}

impl fmt::Display for DateText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Eight independent uniform digits; no calendar constraint.
pub fn sample_unrealistic_date(rng: &mut Rng) -> DateText {
    let mut d = [0u32; 8];
    for v in d.iter_mut() {
        *v = rng.below(10) as u32;
    }
    DateText {
        text: digits_to_text(&d),
        kind: DateKind::Unrealistic,
    }
}

fn total_days() -> u64 {
    (FIRST_YEAR..=LAST_YEAR)
        .map(|y| if is_leap(y) { 366 } else { 365 })
        .sum()
}

/// Uniform over every calendar day from 2019-01-01 to 2027-12-31.
pub fn sample_realistic_date(rng: &mut Rng) -> DateText {
    let mut k = rng.below(total_days()) as u32;
    let mut year = FIRST_YEAR;
    loop {
        let len = if is_leap(year) { 366 } else { 365 };
        if k < len {
            break;
        }
        k -= len;
        year += 1;
    }
    let mut month = 1;
    while k >= days_in_month(year, month) {
        k -= days_in_month(year, month);
        month += 1;
    }
    let day = k + 1;
    let d = [
        year / 1000,
        year / 100 % 10,
        year / 10 % 10,
        year % 10,
        month / 10,
        month % 10,
        day / 10,
        day % 10,
    ];
    DateText {
        text: digits_to_text(&d),
        kind: DateKind::Realistic,
    }
}

pub fn sample_date(kind: DateKind, rng: &mut Rng) -> DateText {
    match kind {
        DateKind::Realistic => sample_realistic_date(rng),
        DateKind::Unrealistic => sample_unrealistic_date(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::glyphs::from_ascii;

    #[test]
    fn unrealistic_all_nines_is_a_valid_pattern() {
        let d = DateText::new(&from_ascii("9999/99/99"), DateKind::Unrealistic).unwrap();
        assert_eq!(d.digits(), [9; 8]);
        assert!(d.calendar().is_none());
        assert!(DateText::new(&from_ascii("9999/99/99"), DateKind::Realistic).is_err());
        assert!(DateText::new(&from_ascii("9999/99/9"), DateKind::Unrealistic).is_err());
        assert!(DateText::new("2020/01/01", DateKind::Unrealistic).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_unrealistic_date(&mut Rng::new(5));
        let b = sample_unrealistic_date(&mut Rng::new(5));
        assert_eq!(a, b);
        let a = sample_realistic_date(&mut Rng::new(5));
        let b = sample_realistic_date(&mut Rng::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn unrealistic_digits_are_uniform_per_position() {
        let mut rng = Rng::new(17);
        let mut counts = [[0u32; 10]; 8];
        let n = 100_000;
        for _ in 0..n {
            let d = sample_unrealistic_date(&mut rng);
            assert_eq!(d.as_str().chars().count(), 10);
            for (pos, v) in d.digits().iter().enumerate() {
                counts[pos][*v as usize] += 1;
            }
        }
        for row in counts {
            for c in row {
                let f = c as f64 / n as f64;
                assert!((f - 0.1).abs() <= 0.01, "{f}");
            }
        }
    }

    #[test]
    fn realistic_dates_are_valid_and_cover_the_range() {
        let mut rng = Rng::new(3);
        let (mut lo, mut hi) = (false, false);
        for _ in 0..20_000 {
            let d = sample_realistic_date(&mut rng);
            let chars: Vec<char> = d.as_str().chars().collect();
            assert_eq!(chars.len(), 10);
            assert_eq!((chars[4], chars[7]), ('/', '/'));
            let (y, _, _) = d.calendar().expect("valid");
            lo |= y == FIRST_YEAR;
            hi |= y == LAST_YEAR;
        }
        assert!(lo && hi);
    }

    #[test]
    fn leap_day_rule() {
        assert!(DateText::new(&from_ascii("2020/02/29"), DateKind::Realistic).is_ok());
        assert!(DateText::new(&from_ascii("2019/02/29"), DateKind::Realistic).is_err());
        let target = from_ascii("2020/02/29");
        let mut seen = false;
        let mut rng = Rng::new(1);
        for _ in 0..200_000 {
            let d = sample_realistic_date(&mut rng);
            assert_ne!(d.as_str(), from_ascii("2019/02/29"));
            assert_ne!(d.as_str(), from_ascii("2021/02/29"));
            seen |= d.as_str() == target;
        }
        assert!(seen);
        assert_eq!(total_days(), 9 * 365 + 2);
    }
}
