//! Concrete `f64` evaluation with a random summation order per neuron and a
//! selectable rounding mode, emulated with error-free transformations.

use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{all_maps, AffineMap};
use crate::network::{LayerKind, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingMode {
    Nearest,
    Up,
    Down,
    TowardZero,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 4] = [
        RoundingMode::Nearest,
        RoundingMode::Up,
        RoundingMode::Down,
        RoundingMode::TowardZero,
    ];

    /// `r` is the nearest result and `err` the sign of `exact - r`.
    fn adjust(self, r: f64, err: f64) -> f64 {
        if !r.is_finite() || err == 0.0 {
            return r;
        }
        match self {
            RoundingMode::Nearest => r,
            RoundingMode::Up if err > 0.0 => r.next_up(),
            RoundingMode::Down if err < 0.0 => r.next_down(),
            RoundingMode::TowardZero if r > 0.0 && err < 0.0 => r.next_down(),
            RoundingMode::TowardZero if r < 0.0 && err > 0.0 => r.next_up(),
            _ => r,
        }
    }

    fn add(self, a: f64, b: f64) -> f64 {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        self.adjust(s, err)
    }

    fn mul(self, a: f64, b: f64) -> f64 {
        let p = a * b;
        let err = a.mul_add(b, -p);
        self.adjust(p, err)
    }
}

/// Activations of every layer for input `x`. The seed fixes the rounding
/// mode and a summation order (bias included) for every affine neuron.
pub fn permuted_eval(net: &Network, x: &[f64], seed: u64) -> Vec<Vec<f64>> {
    PermutedEvaluator::new(net).eval(x, seed)
}

/// [`permuted_eval`] with the layer maps built once.
pub struct PermutedEvaluator<'a> {
    net: &'a Network,
    maps: Vec<Option<AffineMap>>,
}

impl<'a> PermutedEvaluator<'a> {
    pub fn new(net: &'a Network) -> Self {
        PermutedEvaluator {
            net,
            maps: all_maps(net),
        }
    }

    pub fn eval(&self, x: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = RoundingMode::ALL[rng.gen_range(0..4)];
        eval_with(self.net, &self.maps, x, mode, &mut |terms: &mut Vec<f64>| terms.shuffle(&mut rng))
    }

    /// Plain left-to-right evaluation with round-to-nearest.
    pub fn nearest(&self, x: &[f64]) -> Vec<Vec<f64>> {
        eval_with(self.net, &self.maps, x, RoundingMode::Nearest, &mut |_: &mut Vec<f64>| {})
    }
}

fn eval_with(
    net: &Network,
    maps: &[Option<AffineMap>],
    x: &[f64],
    mode: RoundingMode,
    order: &mut dyn FnMut(&mut Vec<f64>),
) -> Vec<Vec<f64>> {
    let mut vals: Vec<Vec<f64>> = vec![x.to_vec()];
    for k in 1..net.len() {
        let layer = net.layer(k);
        let v = match &layer.kind {
            LayerKind::Dense(_) | LayerKind::Conv(_) => {
                let m = maps[k].as_ref().expect("affine map");
                let inp = &vals[layer.preds[0]];
                m.rows
                    .iter()
                    .zip(&m.bias)
                    .map(|(row, b)| {
                        let mut terms: Vec<f64> = row
                            .iter()
                            .map(|(j, w)| mode.mul(w.to_f64().unwrap(), inp[*j]))
                            .collect();
                        terms.push(b.to_f64().unwrap());
                        order(&mut terms);
                        terms.iter().fold(0.0, |acc, t| mode.add(acc, *t))
                    })
                    .collect()
            }
            LayerKind::Relu => vals[layer.preds[0]].iter().map(|v| v.max(0.0)).collect(),
            LayerKind::Add(_) => vals[layer.preds[0]]
                .iter()
                .zip(&vals[layer.preds[1]])
                .map(|(a, b)| mode.add(*a, *b))
                .collect(),
            LayerKind::Input => unreachable!("input is layer 0"),
        };
        vals.push(v);
    }
    vals
}
