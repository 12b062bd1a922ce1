//! Input regions and the CSV input format (`label,p1,p2,...` per line).

use std::path::Path;

use num_traits::{One, Signed, Zero};

use crate::decimal::parse_decimal;
use crate::error::{Error, Result};
use crate::interval::{Endpoint, Interval, Rational};

/// L∞ ball around `center`, optionally intersected with `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBox {
    pub center: Vec<Rational>,
    pub epsilon: Rational,
    pub clamp: bool,
}

impl InputBox {
    pub fn new(center: Vec<Rational>, epsilon: Rational) -> Result<Self> {
        if epsilon.is_negative() {
            return Err(Error::InvalidInput("epsilon must be non-negative".into()));
        }
        Ok(InputBox {
            center,
            epsilon,
            clamp: true,
        })
    }

    pub fn unclamped(mut self) -> Self {
        self.clamp = false;
        self
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    /// Exact per-pixel bounds.
    pub fn exact_bounds(&self) -> Vec<(Rational, Rational)> {
        let zero = <Rational as Zero>::zero();
        let one = <Rational as One>::one();
        self.center
            .iter()
            .map(|c| {
                let mut lo = c - &self.epsilon;
                let mut hi = c + &self.epsilon;
                if self.clamp {
                    lo = lo.max(zero.clone());
                    hi = hi.min(one.clone());
                    if lo > hi {
                        // center outside [0,1] by more than epsilon
                        hi = lo.clone();
                    }
                }
                (lo, hi)
            })
            .collect()
    }

    /// Outward-rounded bounds in the endpoint type `T`.
    pub fn bounds<T: Endpoint>(&self) -> Vec<Interval<T>> {
        self.exact_bounds()
            .iter()
            .map(|(lo, hi)| Interval::new(T::enclose(lo).0, T::enclose(hi).1))
            .collect()
    }

    /// Inward-rounded `f64` bounds: every `f64` inside lies in the exact box.
    pub fn inner_f64_bounds(&self) -> Vec<(f64, f64)> {
        self.exact_bounds()
            .iter()
            .map(|(lo, hi)| {
                let l = f64::enclose(lo).1;
                let h = f64::enclose(hi).0;
                if l <= h {
                    (l, h)
                } else {
                    // degenerate non-representable point; nothing fits
                    (f64::NAN, f64::NAN)
                }
            })
            .collect()
    }
}

/// One labelled input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct InputRecord {
    pub label: usize,
    pub pixels: Vec<Rational>,
}

impl InputRecord {
    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| f64::enclose(p).0).collect()
    }
}

pub fn parse_inputs(text: &str) -> Result<Vec<InputRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::InvalidInput(format!("line {}: {m}", lineno + 1));
        let mut fields = line.split(',');
        let label = fields
            .next()
            .unwrap()
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let pixels = fields
            .map(|f| parse_decimal(f).map_err(&bad))
            .collect::<Result<Vec<_>>>()?;
        out.push(InputRecord { label, pixels });
    }
    Ok(out)
}

pub fn load_inputs(path: impl AsRef<Path>) -> Result<Vec<InputRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_inputs(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> Rational {
        parse_decimal(s).unwrap()
    }

    #[test]
    fn clamped_box() {
        let b = InputBox::new(vec![q("0.8"), q("0.2")], q("0.4")).unwrap();
        assert_eq!(
            b.exact_bounds(),
            vec![(q("0.4"), q("1")), (q("0"), q("0.6"))]
        );
        let u = b.clone().unclamped();
        assert_eq!(u.exact_bounds()[1], (q("-0.2"), q("0.6")));
        let f = b.bounds::<f64>();
        assert!(f[0].lo <= 0.4 && f[0].hi == 1.0);
        assert!(InputBox::new(vec![], q("-1")).is_err());
    }

    #[test]
    fn inner_bounds_lie_inside() {
        let b = InputBox::new(vec![q("0.3")], q("0.1")).unwrap();
        let (l, h) = b.inner_f64_bounds()[0];
        assert!(Rational::from_float(l).unwrap() >= q("0.2"));
        assert!(Rational::from_float(h).unwrap() <= q("0.4"));
    }

    #[test]
    fn csv_parsing() {
        let recs = parse_inputs("# header\n0,0.8,0.2\n\n1, 0.1 ,0.9\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].label, 1);
        assert_eq!(recs[1].pixels, vec![q("0.1"), q("0.9")]);
        assert!(parse_inputs("x,0.1").is_err());
        assert!(parse_inputs("0,abc").is_err());
        assert!(parse_inputs("").unwrap().is_empty());
    }
}
