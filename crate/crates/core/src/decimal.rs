//! Exact decimal string conversion for weights, inputs and epsilons.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use crate::interval::Rational;

/// Parses `[+-]digits[.digits][(e|E)[+-]digits]` into an exact rational.
pub fn parse_decimal(text: &str) -> Result<Rational, String> {
    let s = text.trim();
    let bad = || format!("invalid decimal {text:?}");
    let (neg, rest) = match s.as_bytes().first() {
        Some(b'-') => (true, &s[1..]),
        Some(b'+') => (false, &s[1..]),
        _ => (false, s),
    };
    let (mantissa, exp) = match rest.find(['e', 'E']) {
        Some(i) => {
            let e: i64 = rest[i + 1..].parse().map_err(|_| bad())?;
            (&rest[..i], e)
        }
        None => (rest, 0),
    };
    let (int_part, frac_part) = match mantissa.find('.') {
        Some(i) => (&mantissa[..i], &mantissa[i + 1..]),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    if exp.abs() > 100_000 {
        return Err(bad());
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: BigInt = digits.parse().map_err(|_| bad())?;
    if neg {
        numer = -numer;
    }
    let scale = exp - frac_part.len() as i64;
    let ten = BigInt::from(10u8);
    let r = if scale >= 0 {
        Rational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        Rational::new(numer, num_traits::pow(ten, (-scale) as usize))
    };
    Ok(r)
}

/// Plain decimal rendering (no exponent). `None` if the expansion does not
/// terminate.
pub fn format_decimal(r: &Rational) -> Option<String> {
    let mut den = r.denom().clone();
    let two = BigInt::from(2u8);
    let five = BigInt::from(5u8);
    let (mut twos, mut fives) = (0usize, 0usize);
    while den.is_even() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return None;
    }
    let places = twos.max(fives);
    let scaled = r * Rational::from_integer(num_traits::pow(BigInt::from(10u8), places));
    debug_assert!(scaled.is_integer());
    let n = scaled.to_integer();
    let sign = if n.is_negative() { "-" } else { "" };
    let digits = n.abs().to_string();
    if places == 0 {
        return Some(format!("{sign}{digits}"));
    }
    let padded = format!("{:0>width$}", digits, width = places + 1);
    let (ip, fp) = padded.split_at(padded.len() - places);
    let fp = fp.trim_end_matches('0');
    if fp.is_empty() {
        Some(format!("{sign}{ip}"))
    } else {
        Some(format!("{sign}{ip}.{fp}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_common_forms() {
        assert_eq!(parse_decimal("0.1").unwrap(), Rational::new(1.into(), 10.into()));
        assert_eq!(parse_decimal("-2.50").unwrap(), Rational::new((-5).into(), 2.into()));
        assert_eq!(parse_decimal("1e-3").unwrap(), Rational::new(1.into(), 1000.into()));
        assert_eq!(parse_decimal("+.5E1").unwrap(), Rational::from_integer(5.into()));
        assert_eq!(parse_decimal("7.").unwrap(), Rational::from_integer(7.into()));
        for bad in ["", "-", ".", "1.2.3", "abc", "1e", "0x10", "nan", "inf"] {
            assert!(parse_decimal(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn formats_canonically() {
        let f = |s: &str| format_decimal(&parse_decimal(s).unwrap()).unwrap();
        assert_eq!(f("0.50"), "0.5");
        assert_eq!(f("-0.0009765625"), "-0.0009765625");
        assert_eq!(f("12e2"), "1200");
        assert_eq!(f("-0"), "0");
        assert_eq!(format_decimal(&Rational::new(1.into(), 3.into())), None);
    }

    proptest! {
        #[test]
        fn round_trip(n in -1_000_000i64..1_000_000, places in 0u32..12) {
            let r = Rational::new(n.into(), BigInt::from(10u8).pow(places));
            let s = format_decimal(&r).unwrap();
            prop_assert_eq!(parse_decimal(&s).unwrap(), r);
        }
    }
}
