//! Bound matrices, candidate bounds, concretization and row compaction.

use rayon::prelude::*;

use crate::interval::{Endpoint, Interval};
use crate::network::{LayerId, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Lower,
    Upper,
}

/// One in-flight linear expression over a window of the current layer.
///
/// Coefficients cover the spatial window `origin .. origin + width` (shared
/// width, per-row origin) at full depth, laid out `(dw·width.1 + dh)·C + d`.
/// Cells outside the layer grid always hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Row<T> {
    pub coeffs: Vec<Interval<T>>,
    pub constant: Interval<T>,
    pub origin: (i64, i64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundMatrix<T> {
    pub query_layer: LayerId,
    pub current_layer: LayerId,
    pub polarity: Polarity,
    /// Spatial window size shared by all rows. A full frame has origin
    /// `(0, 0)` and the grid size as width.
    pub width: (usize, usize),
    pub rows: Vec<Row<T>>,
    /// Row position to candidate slot.
    pub row_index: Vec<usize>,
}

impl<T: Endpoint> BoundMatrix<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self, shape: Shape) -> bool {
        self.width == (shape.width, shape.height) && self.rows.iter().all(|r| r.origin == (0, 0))
    }

    /// Re-frames every row over the whole grid of `shape`. Lossless because
    /// out-of-grid cells are zero.
    pub fn to_full(&mut self, shape: Shape) {
        if self.is_full(shape) {
            return;
        }
        let width = self.width;
        self.rows.par_iter_mut().for_each(|row| {
            let mut out = vec![Interval::zero(); shape.len()];
            for_each_cell(row.origin, width, shape, |cell, n| {
                out[n] = row.coeffs[cell].clone();
            });
            row.coeffs = out;
            row.origin = (0, 0);
        });
        self.width = (shape.width, shape.height);
    }

    /// Switches to a full frame once the window is at least as large as the
    /// grid.
    pub fn normalize(&mut self, shape: Shape) {
        if self.width.0 * self.width.1 >= shape.width * shape.height {
            self.to_full(shape);
        }
    }

    /// Flat neuron indices with a nonzero coefficient in row `r`.
    pub fn support(&self, r: usize, shape: Shape) -> Vec<usize> {
        let row = &self.rows[r];
        let mut out = Vec::new();
        for_each_cell(row.origin, self.width, shape, |cell, n| {
            if !row.coeffs[cell].is_zero() {
                out.push(n);
            }
        });
        out
    }

    /// Dense coefficient vector of row `r` over the whole layer.
    pub fn dense_row(&self, r: usize, shape: Shape) -> Vec<Interval<T>> {
        let row = &self.rows[r];
        let mut out = vec![Interval::zero(); shape.len()];
        for_each_cell(row.origin, self.width, shape, |cell, n| {
            out[n] = row.coeffs[cell].clone();
        });
        out
    }
}

/// Calls `f(cell, neuron)` for every in-grid cell of a window, with `cell` the
/// coefficient offset and `neuron` the flat index in the layer. Ascending in
/// both.
#[inline]
pub fn for_each_cell(
    origin: (i64, i64),
    width: (usize, usize),
    shape: Shape,
    mut f: impl FnMut(usize, usize),
) {
    let c = shape.channels;
    for dw in 0..width.0 {
        let w = origin.0 + dw as i64;
        if w < 0 || w >= shape.width as i64 {
            continue;
        }
        for dh in 0..width.1 {
            let h = origin.1 + dh as i64;
            if h < 0 || h >= shape.height as i64 {
                continue;
            }
            let cell = (dw * width.1 + dh) * c;
            let n = shape.index(w as usize, h as usize, 0);
            for d in 0..c {
                f(cell + d, n + d);
            }
        }
    }
}

/// Best bound found so far for each query slot.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBound<T> {
    pub polarity: Polarity,
    /// Best endpoint in the pass direction; `None` means unbounded.
    pub best: Vec<Option<T>>,
    /// Opposite endpoint, fixed for the pass; used by the stability test.
    pub other: Vec<Option<T>>,
    pub frozen: Vec<bool>,
    /// Whether rows stop improving once their interval excludes a strict
    /// sign change (rows of ReLU-input layers).
    pub freeze: bool,
}

impl<T: Endpoint> CandidateBound<T> {
    /// Candidates seeded from the current bounds of the query neurons.
    pub fn from_bounds(polarity: Polarity, current: &[Interval<T>], freeze: bool) -> Self {
        let (best, other) = current
            .iter()
            .map(|iv| match polarity {
                Polarity::Upper => (Some(iv.hi.clone()), Some(iv.lo.clone())),
                Polarity::Lower => (Some(iv.lo.clone()), Some(iv.hi.clone())),
            })
            .unzip();
        let mut cb = CandidateBound {
            polarity,
            best,
            other,
            frozen: vec![false; current.len()],
            freeze,
        };
        for i in 0..current.len() {
            cb.check_freeze(i);
        }
        cb
    }

    /// Unbounded candidates that never freeze.
    pub fn unbounded(polarity: Polarity, n: usize) -> Self {
        CandidateBound {
            polarity,
            best: vec![None; n],
            other: vec![None; n],
            frozen: vec![false; n],
            freeze: false,
        }
    }

    pub fn len(&self) -> usize {
        self.best.len()
    }

    pub fn is_empty(&self) -> bool {
        self.best.is_empty()
    }

    fn bounds_of(&self, i: usize) -> (Option<&T>, Option<&T>) {
        match self.polarity {
            Polarity::Upper => (self.other[i].as_ref(), self.best[i].as_ref()),
            Polarity::Lower => (self.best[i].as_ref(), self.other[i].as_ref()),
        }
    }

    fn check_freeze(&mut self, i: usize) {
        if !self.freeze || self.frozen[i] {
            return;
        }
        let z = T::zero();
        let (lo, hi) = self.bounds_of(i);
        if lo.is_some_and(|l| *l >= z) || hi.is_some_and(|h| *h <= z) {
            self.frozen[i] = true;
        }
    }

    /// Offers a candidate for slot `i`; keeps it if strictly better and the
    /// slot is not frozen.
    pub fn offer(&mut self, i: usize, cand: T) {
        if self.frozen[i] {
            return;
        }
        let better = match (&self.best[i], self.polarity) {
            (None, _) => true,
            (Some(b), Polarity::Upper) => cand < *b,
            (Some(b), Polarity::Lower) => cand > *b,
        };
        if better {
            self.best[i] = Some(cand);
        }
        self.check_freeze(i);
    }
}

/// Concrete value of each row's expression over `bounds` (the bounds of the
/// current layer): its maximum for upper, minimum for lower polarity.
pub fn concretize_values<T: Endpoint>(m: &BoundMatrix<T>, shape: Shape, bounds: &[Interval<T>]) -> Vec<T> {
    let width = m.width;
    let upper = m.polarity == Polarity::Upper;
    m.rows
        .par_iter()
        .map(|row| {
            let mut acc = if upper {
                row.constant.hi.clone()
            } else {
                row.constant.lo.clone()
            };
            for_each_cell(row.origin, width, shape, |cell, n| {
                let c = &row.coeffs[cell];
                if c.is_zero() {
                    return;
                }
                let p = crate::interval::iv_mul(c, &bounds[n]);
                acc = if upper { acc.add_up(&p.hi) } else { acc.add_down(&p.lo) };
            });
            acc
        })
        .collect()
}

/// Concretizes every row and feeds the results into the candidates.
pub fn concretize<T: Endpoint>(
    m: &BoundMatrix<T>,
    shape: Shape,
    bounds: &[Interval<T>],
    cand: &mut CandidateBound<T>,
) {
    let vals = concretize_values(m, shape, bounds);
    for (slot, v) in m.row_index.iter().zip(vals) {
        cand.offer(*slot, v);
    }
}

/// Keeps the rows whose flag is unset, in their original relative order.
/// Returns the kept positions (the prefix-sum scatter map).
pub fn compact_rows<T: Endpoint>(m: &mut BoundMatrix<T>, terminated: &[bool]) -> Vec<usize> {
    assert_eq!(terminated.len(), m.rows.len());
    // exclusive prefix sum of survivors gives each kept row its new position
    let mut dest = Vec::with_capacity(terminated.len());
    let mut next = 0usize;
    for t in terminated {
        dest.push(next);
        if !t {
            next += 1;
        }
    }
    let mut kept_pos = vec![0usize; next];
    let rows = std::mem::take(&mut m.rows);
    let index = std::mem::take(&mut m.row_index);
    let mut new_rows: Vec<Option<Row<T>>> = (0..next).map(|_| None).collect();
    let mut new_index = vec![0usize; next];
    for (i, (row, slot)) in rows.into_iter().zip(index).enumerate() {
        if !terminated[i] {
            new_rows[dest[i]] = Some(row);
            new_index[dest[i]] = slot;
            kept_pos[dest[i]] = i;
        }
    }
    m.rows = new_rows.into_iter().map(|r| r.expect("scatter covers all survivors")).collect();
    m.row_index = new_index;
    kept_pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::Rational;
    use proptest::prelude::*;

    fn q(v: i64) -> Interval<Rational> {
        Interval::point(Rational::from_integer(v.into()))
    }

    fn matrix(rows: Vec<Vec<Interval<Rational>>>, polarity: Polarity) -> BoundMatrix<Rational> {
        let count = rows.len();
        BoundMatrix {
            query_layer: 1,
            current_layer: 0,
            polarity,
            width: (1, 1),
            rows: rows
                .into_iter()
                .map(|c| Row {
                    coeffs: c,
                    constant: q(0),
                    origin: (0, 0),
                })
                .collect(),
            row_index: (0..count).collect(),
        }
    }

    #[test]
    fn concretize_examples() {
        let shape = Shape::flat(2);
        let unit = vec![
            Interval::new(Rational::from_integer(0.into()), Rational::from_integer(1.into()));
            2
        ];
        let m = matrix(vec![vec![q(1), q(-1)]], Polarity::Upper);
        assert_eq!(concretize_values(&m, shape, &unit), vec![Rational::from_integer(1.into())]);
        let mut m = matrix(vec![vec![q(0), q(0)]], Polarity::Upper);
        m.rows[0].constant = Interval::point(Rational::new(1.into(), 2.into()));
        assert_eq!(concretize_values(&m, shape, &unit), vec![Rational::new(1.into(), 2.into())]);
        let m = matrix(vec![vec![q(1), q(-1)]], Polarity::Lower);
        assert_eq!(concretize_values(&m, shape, &unit), vec![Rational::from_integer((-1).into())]);
    }

    #[test]
    fn concretize_matches_corner_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.gen_range(1..=10);
            let shape = Shape::flat(n);
            let coeffs: Vec<_> = (0..n).map(|_| q(rng.gen_range(-5..=5))).collect();
            let bounds: Vec<_> = (0..n)
                .map(|_| {
                    let a = rng.gen_range(-9..=9);
                    let b = rng.gen_range(-9..=9);
                    Interval::new(Rational::from_integer(a.min(b).into()), Rational::from_integer(a.max(b).into()))
                })
                .collect();
            let mut best_hi: Option<Rational> = None;
            let mut best_lo: Option<Rational> = None;
            for corner in 0u32..(1 << n) {
                let v: Rational = (0..n)
                    .map(|i| {
                        let x = if corner >> i & 1 == 1 { &bounds[i].hi } else { &bounds[i].lo };
                        &coeffs[i].lo * x
                    })
                    .sum();
                best_hi = Some(best_hi.map_or(v.clone(), |b| b.max(v.clone())));
                best_lo = Some(best_lo.map_or(v.clone(), |b| b.min(v)));
            }
            let up = matrix(vec![coeffs.clone()], Polarity::Upper);
            let lo = matrix(vec![coeffs], Polarity::Lower);
            assert_eq!(concretize_values(&up, shape, &bounds)[0], best_hi.unwrap());
            assert_eq!(concretize_values(&lo, shape, &bounds)[0], best_lo.unwrap());
        }
    }

    #[test]
    fn candidates_are_monotone_and_freeze() {
        let cur = vec![Interval::new(-2.0, 3.0), Interval::new(-1.0, 1.0)];
        let mut cb = CandidateBound::from_bounds(Polarity::Upper, &cur, true);
        cb.offer(0, 5.0);
        assert_eq!(cb.best[0], Some(3.0));
        cb.offer(0, 1.0);
        assert_eq!(cb.best[0], Some(1.0));
        cb.offer(1, -0.5);
        assert!(cb.frozen[1]);
        cb.offer(1, -0.9);
        assert_eq!(cb.best[1], Some(-0.5));
        let stable = vec![Interval::new(0.0, 1.0)];
        assert!(CandidateBound::from_bounds(Polarity::Lower, &stable, true).frozen[0]);
        assert!(!CandidateBound::from_bounds(Polarity::Lower, &stable, false).frozen[0]);
    }

    #[test]
    fn compaction_edge_cases() {
        let mut m = matrix(vec![vec![q(1)], vec![q(2)]], Polarity::Upper);
        let kept = compact_rows(&mut m, &[false, false]);
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(m.row_index, vec![0, 1]);
        let kept = compact_rows(&mut m, &[true, true]);
        assert!(kept.is_empty() && m.is_empty());
    }

    proptest! {
        #[test]
        fn compaction_matches_sequential_filter(flags in proptest::collection::vec(any::<bool>(), 64)) {
            let rows: Vec<_> = (0..64).map(|i| vec![q(i)]).collect();
            let mut m = matrix(rows, Polarity::Lower);
            m.row_index = (0..64).map(|i| 100 + i).collect();
            let kept = compact_rows(&mut m, &flags);
            let expect: Vec<usize> = (0..64).filter(|i| !flags[*i]).collect();
            prop_assert_eq!(&kept, &expect);
            let idx: Vec<usize> = expect.iter().map(|i| 100 + i).collect();
            prop_assert_eq!(&m.row_index, &idx);
            for (r, i) in m.rows.iter().zip(&expect) {
                prop_assert_eq!(&r.coeffs[0], &q(*i as i64));
            }
        }
    }
}
