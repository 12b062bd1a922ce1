//! Reference analyzer: exact rationals, explicit affine maps, one
//! expression per query neuron, no early termination and no chunking.
//!
//! An expression is a sum of coefficient vectors over any number of layers
//! plus a constant. The step always substitutes the layer with the largest
//! id, so a residual join splits into both branches and they merge back at
//! the block head automatically. A candidate is taken whenever the
//! expression lives on a single layer.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use super::{all_maps, AffineMap};
use crate::error::{Error, Result};
use crate::interval::{Interval, Rational};
use crate::network::{InputBox, LayerId, LayerKind, Network};

pub const REFERENCE_NEURON_LIMIT: usize = 2000;

/// Grid of the unstable relaxation constants (must agree with the engine).
const GRID_BITS: usize = 32;

type Bounds = Vec<Vec<(Rational, Rational)>>;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Dir {
    Lower,
    Upper,
}

struct Relax {
    alpha: Rational,
    beta: Rational,
    gamma: Rational,
    delta: Rational,
}

fn grid_floor(x: &Rational) -> Rational {
    let scale = BigInt::one() << GRID_BITS;
    let n = (x.numer() * &scale).div_floor(x.denom());
    Rational::new(n, scale)
}

fn grid_ceil(x: &Rational) -> Rational {
    let scale = BigInt::one() << GRID_BITS;
    let n = (x.numer() * &scale).div_ceil(x.denom());
    Rational::new(n, scale)
}

fn relax(l: &Rational, u: &Rational) -> Relax {
    let zero = Rational::zero();
    let one = Rational::one();
    if *l >= zero {
        return Relax {
            alpha: one.clone(),
            beta: zero.clone(),
            gamma: one,
            delta: zero,
        };
    }
    if *u <= zero {
        return Relax {
            alpha: zero.clone(),
            beta: zero.clone(),
            gamma: zero.clone(),
            delta: zero,
        };
    }
    let gamma = grid_floor(&(u / (u - l)));
    let at_l = -l * &gamma;
    let at_u = u * (&one - &gamma);
    let delta = grid_ceil(&at_l.max(at_u));
    Relax {
        alpha: if *u > -l { one } else { zero.clone() },
        beta: zero,
        gamma,
        delta,
    }
}

fn forward_layer(net: &Network, maps: &[Option<AffineMap>], k: LayerId, b: &Bounds) -> Vec<(Rational, Rational)> {
    let layer = net.layer(k);
    match &layer.kind {
        LayerKind::Dense(_) | LayerKind::Conv(_) => {
            let m = maps[k].as_ref().unwrap();
            let inp = &b[layer.preds[0]];
            m.rows
                .iter()
                .zip(&m.bias)
                .map(|(row, bias)| {
                    let mut lo = bias.clone();
                    let mut hi = bias.clone();
                    for (j, w) in row {
                        if w.is_positive() {
                            lo += w * &inp[*j].0;
                            hi += w * &inp[*j].1;
                        } else {
                            lo += w * &inp[*j].1;
                            hi += w * &inp[*j].0;
                        }
                    }
                    (lo, hi)
                })
                .collect()
        }
        LayerKind::Relu => b[layer.preds[0]]
            .iter()
            .map(|(l, u)| (l.clone().max(Rational::zero()), u.clone().max(Rational::zero())))
            .collect(),
        LayerKind::Add(_) => b[layer.preds[0]]
            .iter()
            .zip(&b[layer.preds[1]])
            .map(|(x, y)| (&x.0 + &y.0, &x.1 + &y.1))
            .collect(),
        LayerKind::Input => b[0].clone(),
    }
}

struct Expr {
    terms: BTreeMap<LayerId, Vec<Rational>>,
    constant: Rational,
}

impl Expr {
    fn value(&self, b: &Bounds, dir: Dir) -> Rational {
        let mut v = self.constant.clone();
        for (k, coeffs) in &self.terms {
            for (c, (lo, hi)) in coeffs.iter().zip(&b[*k]) {
                if c.is_zero() {
                    continue;
                }
                let pick = if c.is_positive() == (dir == Dir::Upper) { hi } else { lo };
                v += c * pick;
            }
        }
        v
    }

    fn slot(&mut self, net: &Network, k: LayerId) -> &mut Vec<Rational> {
        let n = net.layer(k).shape.len();
        self.terms.entry(k).or_insert_with(|| vec![Rational::zero(); n])
    }
}

struct Candidate {
    best: Option<Rational>,
    other: Option<Rational>,
    frozen: bool,
    freeze: bool,
    dir: Dir,
}

impl Candidate {
    fn stable(&self) -> bool {
        let z = Rational::zero();
        let (lo, hi) = match self.dir {
            Dir::Lower => (&self.best, &self.other),
            Dir::Upper => (&self.other, &self.best),
        };
        lo.as_ref().is_some_and(|l| *l >= z) || hi.as_ref().is_some_and(|h| *h <= z)
    }

    fn new(dir: Dir, best: Option<Rational>, other: Option<Rational>, freeze: bool) -> Self {
        let mut c = Candidate {
            best,
            other,
            frozen: false,
            freeze,
            dir,
        };
        c.frozen = c.freeze && c.stable();
        c
    }

    fn offer(&mut self, v: Rational) {
        if self.frozen {
            return;
        }
        let better = match (&self.best, self.dir) {
            (None, _) => true,
            (Some(b), Dir::Upper) => v < *b,
            (Some(b), Dir::Lower) => v > *b,
        };
        if better {
            self.best = Some(v);
        }
        self.frozen = self.freeze && self.stable();
    }
}

struct Reference<'a> {
    net: &'a Network,
    maps: Vec<Option<AffineMap>>,
    bounds: Bounds,
    relax: BTreeMap<LayerId, Vec<Relax>>,
}

impl<'a> Reference<'a> {
    fn new(net: &'a Network, input: &InputBox) -> Result<Self> {
        let neurons = net.neuron_count();
        if neurons > REFERENCE_NEURON_LIMIT {
            return Err(Error::TooLarge {
                neurons,
                limit: REFERENCE_NEURON_LIMIT,
            });
        }
        if input.len() != net.input_shape().len() {
            return Err(Error::InvalidInput("input size does not match the network".into()));
        }
        let maps = all_maps(net);
        let mut bounds: Bounds = vec![input.exact_bounds()];
        for k in 1..net.len() {
            let b = forward_layer(net, &maps, k, &bounds);
            bounds.push(b);
        }
        Ok(Reference {
            net,
            maps,
            bounds,
            relax: BTreeMap::new(),
        })
    }

    fn feeds_relu(&self, k: LayerId) -> bool {
        self.net
            .succs(k)
            .iter()
            .any(|s| matches!(self.net.layer(*s).kind, LayerKind::Relu))
    }

    fn relax_upto(&mut self, q: LayerId) {
        self.relax.clear();
        for k in 1..q {
            if matches!(self.net.layer(k).kind, LayerKind::Relu) {
                let p = self.net.layer(k).preds[0];
                let r = self.bounds[p].iter().map(|(l, u)| relax(l, u)).collect();
                self.relax.insert(k, r);
            }
        }
    }

    fn substitute(&self, e: &mut Expr, k: LayerId, dir: Dir) {
        let coeffs = e.terms.remove(&k).expect("layer in expression");
        let layer = self.net.layer(k);
        match &layer.kind {
            LayerKind::Dense(_) | LayerKind::Conv(_) => {
                let m = self.maps[k].as_ref().unwrap();
                let mut acc = std::mem::replace(e.slot(self.net, layer.preds[0]), Vec::new());
                for (i, c) in coeffs.iter().enumerate() {
                    if c.is_zero() {
                        continue;
                    }
                    e.constant += c * &m.bias[i];
                    for (j, w) in &m.rows[i] {
                        acc[*j] += c * w;
                    }
                }
                *e.slot(self.net, layer.preds[0]) = acc;
            }
            LayerKind::Relu => {
                let r = &self.relax[&k];
                let mut acc = std::mem::replace(e.slot(self.net, layer.preds[0]), Vec::new());
                for (i, c) in coeffs.iter().enumerate() {
                    if c.is_zero() {
                        continue;
                    }
                    // upper relaxation when the coefficient pushes in the pass direction
                    let (slope, off) = if c.is_positive() == (dir == Dir::Upper) {
                        (&r[i].gamma, &r[i].delta)
                    } else {
                        (&r[i].alpha, &r[i].beta)
                    };
                    acc[i] += c * slope;
                    e.constant += c * off;
                }
                *e.slot(self.net, layer.preds[0]) = acc;
            }
            LayerKind::Add(_) => {
                for p in &layer.preds {
                    let slot = e.slot(self.net, *p);
                    for (a, c) in slot.iter_mut().zip(&coeffs) {
                        *a += c;
                    }
                }
            }
            LayerKind::Input => unreachable!("the walk stops at the input"),
        }
    }

    fn walk(&self, mut e: Expr, dir: Dir, cand: &mut Candidate) {
        cand.offer(e.value(&self.bounds, dir));
        loop {
            let k = *e.terms.keys().next_back().expect("non-empty expression");
            if k == 0 {
                break;
            }
            self.substitute(&mut e, k, dir);
            if e.terms.len() == 1 {
                cand.offer(e.value(&self.bounds, dir));
            }
        }
    }

    fn unit(&self, q: LayerId, i: usize) -> Expr {
        let mut v = vec![Rational::zero(); self.net.layer(q).shape.len()];
        v[i] = Rational::one();
        Expr {
            terms: BTreeMap::from([(q, v)]),
            constant: Rational::zero(),
        }
    }

    fn refine(&mut self, q: LayerId) {
        self.relax_upto(q);
        let freeze = self.feeds_relu(q);
        let n = self.net.layer(q).shape.len();
        for i in 0..n {
            let (lo, hi) = self.bounds[q][i].clone();
            let mut c = Candidate::new(Dir::Lower, Some(lo), Some(hi), freeze);
            self.walk(self.unit(q, i), Dir::Lower, &mut c);
            self.bounds[q][i].0 = c.best.unwrap();
        }
        for i in 0..n {
            let (lo, hi) = self.bounds[q][i].clone();
            let mut c = Candidate::new(Dir::Upper, Some(hi), Some(lo), freeze);
            self.walk(self.unit(q, i), Dir::Upper, &mut c);
            self.bounds[q][i].1 = c.best.unwrap();
        }
        for k in q + 1..self.net.len() {
            let fresh = forward_layer(self.net, &self.maps, k, &self.bounds);
            for (old, new) in self.bounds[k].iter_mut().zip(fresh) {
                old.0 = old.0.clone().max(new.0);
                old.1 = old.1.clone().min(new.1);
            }
        }
    }

    fn run(&mut self) {
        let out = self.net.len() - 1;
        for q in 1..self.net.len() {
            let affine = matches!(
                self.net.layer(q).kind,
                LayerKind::Dense(_) | LayerKind::Conv(_) | LayerKind::Add(_)
            );
            if affine && (self.feeds_relu(q) || q == out) {
                self.refine(q);
            }
        }
    }

    fn margins(&mut self, label: usize) -> Vec<Option<Rational>> {
        let out = self.net.len() - 1;
        self.relax_upto(out + 1);
        let n = self.net.layer(out).shape.len();
        (0..n)
            .map(|j| {
                if j == label {
                    return None;
                }
                let mut v = vec![Rational::zero(); n];
                v[label] = Rational::one();
                v[j] = -Rational::one();
                let e = Expr {
                    terms: BTreeMap::from([(out, v)]),
                    constant: Rational::zero(),
                };
                let mut c = Candidate::new(Dir::Lower, None, None, false);
                self.walk(e, Dir::Lower, &mut c);
                c.best
            })
            .collect()
    }
}

fn to_intervals(b: Bounds) -> Vec<Vec<Interval<Rational>>> {
    b.into_iter()
        .map(|l| l.into_iter().map(|(lo, hi)| Interval::new(lo, hi)).collect())
        .collect()
}

/// Bounds of every neuron over `input`.
pub fn reference_analyze(net: &Network, input: &InputBox) -> Result<Vec<Vec<Interval<Rational>>>> {
    let mut r = Reference::new(net, input)?;
    r.run();
    Ok(to_intervals(r.bounds))
}

/// Lower bounds of `o_label - o_j` per class (`None` at the label).
pub fn reference_margins(net: &Network, input: &InputBox, label: usize) -> Result<Vec<Option<Rational>>> {
    let classes = net.output_size();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut r = Reference::new(net, input)?;
    r.run();
    Ok(r.margins(label))
}

/// Whether the reference proves robustness for `label` over `input`.
pub fn reference_verify(net: &Network, input: &InputBox, label: usize) -> Result<bool> {
    let m = reference_margins(net, input, label)?;
    Ok(m
        .iter()
        .enumerate()
        .all(|(j, v)| j == label || v.as_ref().is_some_and(|v| v.is_positive())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testnets::*;
    use crate::network::Shape;

    #[test]
    fn affine_only_net_gives_exact_image() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "1"], &["1", "-1"]], &["0", "0"]),
                dense(2, 1, &[&["1", "1"]], &["0.5"]),
            ],
        )
        .unwrap();
        let b = InputBox::new(qs(&["0.5", "0.5"]), q("0.5")).unwrap();
        let r = reference_analyze(&net, &b).unwrap();
        assert_eq!(r[2][0], Interval::new(q("0.5"), q("2.5")));
    }

    #[test]
    fn single_relu_hand_expansion() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "-1"], &["1", "1"]], &["0", "0"]),
                relu(2, 1),
                dense(3, 2, &[&["1", "-0.5"]], &["1"]),
            ],
        )
        .unwrap();
        let b = InputBox::new(qs(&["0.5", "0.5"]), q("0.5")).unwrap();
        let r = reference_analyze(&net, &b).unwrap();
        assert_eq!(r[3][0], Interval::new(q("0"), q("1.5")));
    }

    #[test]
    fn identity_net_margins() {
        let net = identity_margin_net();
        let b = InputBox::new(qs(&["0.8", "0.2"]), q("0.1")).unwrap();
        assert_eq!(reference_margins(&net, &b, 0).unwrap(), vec![None, Some(q("0.4"))]);
        assert!(reference_verify(&net, &b, 0).unwrap());
        let b = InputBox::new(qs(&["0.8", "0.2"]), q("0.4")).unwrap();
        assert!(!reference_verify(&net, &b, 0).unwrap());
    }

    #[test]
    fn refuses_large_nets() {
        let w: Vec<Vec<&str>> = vec![vec!["1"; 3]; 2100];
        let rows: Vec<&[&str]> = w.iter().map(|r| r.as_slice()).collect();
        let net = Network::from_layers(Shape::flat(3), vec![dense(1, 0, &rows, &vec!["0"; 2100])]).unwrap();
        let b = InputBox::new(qs(&["0", "0", "0"]), q("0")).unwrap();
        assert!(matches!(reference_analyze(&net, &b), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn grid_relaxation_is_sound() {
        for (l, u) in [("-1", "1"), ("-0.3", "7"), ("-5", "0.001"), ("-1", "3")] {
            let (l, u) = (q(l), q(u));
            let r = relax(&l, &u);
            for x in [l.clone(), u.clone(), Rational::zero()] {
                let y = x.clone().max(Rational::zero());
                assert!(&r.alpha * &x + &r.beta <= y);
                assert!(y <= &r.gamma * &x + &r.delta);
            }
        }
    }
}
