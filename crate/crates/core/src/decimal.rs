//! Exact decimal arithmetic for reward and price math.
//!
//! Multipliers and accuracies travel as decimal strings ("0.3", "1e7",
//! "0.8123456789012345"). Parsing them into binary floats would make
//! `floor(5e6 * 2 * 0.3)` land on either side of the integer, so every
//! money computation goes through this rational type instead.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid decimal literal {0:?}")]
pub struct ParseDecimalError(pub String);

/// A terminating decimal number held as an exact rational.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Decimal(BigRational);

impl Decimal {
    pub fn zero() -> Self {
        Decimal(BigRational::zero())
    }

    pub fn one() -> Self {
        Decimal(BigRational::one())
    }

    pub fn from_u64(v: u64) -> Self {
        Decimal(BigRational::from_integer(BigInt::from(v)))
    }

    /// Exact value of the shortest decimal representation of `v`, i.e. the
    /// same number a reader of `v.to_string()` would see.
    pub fn from_f64_display(v: f64) -> Result<Self, ParseDecimalError> {
        if !v.is_finite() {
            return Err(ParseDecimalError(v.to_string()));
        }
        format!("{v}").parse()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn floor_u64(&self) -> Option<u64> {
        if self.is_negative() {
            return None;
        }
        self.0.floor().to_integer().to_u64()
    }

    pub fn ceil_u64(&self) -> Option<u64> {
        if self.is_negative() {
            return None;
        }
        self.0.ceil().to_integer().to_u64()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn mul(&self, other: &Decimal) -> Decimal {
        Decimal(&self.0 * &other.0)
    }

    pub fn add(&self, other: &Decimal) -> Decimal {
        Decimal(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &Decimal) -> Decimal {
        Decimal(&self.0 - &other.0)
    }
}

impl Default for Decimal {
    fn default() -> Self {
        Decimal::zero()
    }
}

impl From<u64> for Decimal {
    fn from(v: u64) -> Self {
        Decimal::from_u64(v)
    }
}

impl FromStr for Decimal {
    type Err = ParseDecimalError;

    /// Accepts `[+-]digits[.digits][e[+-]digits]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseDecimalError(s.to_string());
        let t = s.trim();
        let (neg, body) = match t.as_bytes().first() {
            Some(b'-') => (true, &t[1..]),
            Some(b'+') => (false, &t[1..]),
            _ => (false, t),
        };
        let (mantissa, exp) = match body.find(['e', 'E']) {
            Some(i) => {
                let e: i32 = body[i + 1..].parse().map_err(|_| err())?;
                (&body[..i], e)
            }
            None => (body, 0),
        };
        let (int_part, frac_part) = match mantissa.split_once('.') {
            Some((a, b)) => (a, b),
            None => (mantissa, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        if exp.unsigned_abs() > 400 {
            return Err(err());
        }
        let digits = format!("{int_part}{frac_part}");
        let mut numer: BigInt = if digits.is_empty() {
            BigInt::zero()
        } else {
            digits.parse().map_err(|_| err())?
        };
        if neg {
            numer = -numer;
        }
        let scale = exp - frac_part.len() as i32;
        let ten = BigInt::from(10u8);
        let value = if scale >= 0 {
            BigRational::from_integer(numer * num::pow(ten, scale as usize))
        } else {
            BigRational::new(numer, num::pow(ten, (-scale) as usize))
        };
        Ok(Decimal(value))
    }
}

impl fmt::Display for Decimal {
    /// Plain decimal notation. Values built from decimal literals always
    /// terminate; anything else is cut at 30 fractional digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.0;
        let neg = r.is_negative();
        let abs = r.abs();
        let int = abs.trunc().to_integer();
        let mut rem = abs.fract();
        let mut frac = String::new();
        let ten = BigRational::from_integer(BigInt::from(10u8));
        while !rem.is_zero() && frac.len() < 30 {
            rem *= &ten;
            let d = rem.trunc().to_integer();
            frac.push(char::from(b'0' + d.to_u8().unwrap_or(0)));
            rem = rem.fract();
        }
        if neg && !(int.is_zero() && frac.is_empty()) {
            f.write_str("-")?;
        }
        write!(f, "{int}")?;
        if !frac.is_empty() {
            write!(f, ".{frac}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Decimal({self})")
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl PartialOrd<u64> for Decimal {
    fn partial_cmp(&self, other: &u64) -> Option<Ordering> {
        Some(self.cmp(&Decimal::from_u64(*other)))
    }
}

impl PartialEq<u64> for Decimal {
    fn eq(&self, other: &u64) -> bool {
        *self == Decimal::from_u64(*other)
    }
}
