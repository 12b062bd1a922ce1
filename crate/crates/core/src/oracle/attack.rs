//! Falsification by sampling: the center, coordinate-sign corners, random
//! corners and uniform random points of the input box.
//!
//! Points are `f64` values inside the exact box. Candidates are screened
//! with a plain float evaluation and confirmed exactly.

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::permuted::PermutedEvaluator;
use super::{all_maps, exact_eval, AffineMap};
use crate::error::{Error, Result};
use crate::interval::Rational;
use crate::network::{InputBox, Network};

/// An input in the region whose exact output does not strictly favour the
/// label.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub point: Vec<f64>,
    pub outputs: Vec<Rational>,
    /// Samples evaluated before the hit.
    pub samples: usize,
}

/// Relative slack for float screening before exact confirmation.
const SCREEN_SLACK: f64 = 1e-6;

struct Attacker<'a> {
    net: &'a Network,
    float: PermutedEvaluator<'a>,
    maps: Vec<Option<AffineMap>>,
    label: usize,
    used: usize,
    budget: usize,
}

impl Attacker<'_> {
    fn float_outputs(&mut self, x: &[f64]) -> Vec<f64> {
        self.used += 1;
        self.float.nearest(x).pop().unwrap()
    }

    fn try_point(&mut self, x: &[f64]) -> Option<AttackResult> {
        let out = self.float_outputs(x);
        let ol = out[self.label];
        let suspicious = out.iter().enumerate().any(|(j, o)| {
            j != self.label && (ol - o) <= SCREEN_SLACK * (1.0 + ol.abs().max(o.abs()))
        });
        if !suspicious {
            return None;
        }
        let xq: Vec<Rational> = x.iter().map(|v| Rational::from_float(*v).unwrap()).collect();
        let exact = exact_eval(self.net, &self.maps, &xq).pop().unwrap();
        let l = &exact[self.label];
        let hit = exact.iter().enumerate().any(|(j, o)| j != self.label && o >= l);
        hit.then(|| AttackResult {
            point: x.to_vec(),
            outputs: exact,
            samples: self.used,
        })
    }

    fn left(&self) -> bool {
        self.used < self.budget
    }
}

/// Searches the region around `image` (clamped to `[0,1]`) for an input not
/// classified as `label`, evaluating at most `budget` samples.
pub fn attack(
    net: &Network,
    image: &[Rational],
    epsilon: &Rational,
    label: usize,
    budget: usize,
    seed: u64,
) -> Result<Option<AttackResult>> {
    if budget == 0 {
        return Err(Error::Config("attack budget must be at least 1".into()));
    }
    let classes = net.output_size();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let region = InputBox::new(image.to_vec(), epsilon.clone())?;
    if region.len() != net.input_shape().len() {
        return Err(Error::InvalidInput("image size does not match the network".into()));
    }
    let bounds = region.inner_f64_bounds();
    if bounds.iter().any(|(l, _)| l.is_nan()) {
        // no f64 point lies in the region
        return Ok(None);
    }
    let n = bounds.len();
    let mut a = Attacker {
        net,
        float: PermutedEvaluator::new(net),
        maps: all_maps(net),
        label,
        used: 0,
        budget,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let center: Vec<f64> = bounds
        .iter()
        .zip(&region.center)
        .map(|((l, h), c)| c.to_f64().unwrap_or(*l).clamp(*l, *h))
        .collect();
    if let Some(hit) = a.try_point(&center) {
        return Ok(Some(hit));
    }

    // coordinate-sign corners: one finite-difference sweep, then for every
    // rival class the corner that pushes each pixel against the label
    if a.budget >= a.used + 2 * n + classes {
        let mut slopes = vec![vec![0.0; classes]; n];
        for i in 0..n {
            let (l, h) = bounds[i];
            let mut x = center.clone();
            x[i] = h;
            let up = a.float_outputs(&x);
            x[i] = l;
            let down = a.float_outputs(&x);
            for (s, (u, d)) in slopes[i].iter_mut().zip(up.iter().zip(&down)) {
                *s = u - d;
            }
        }
        for j in (0..classes).filter(|j| *j != label) {
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let push = slopes[i][j] - slopes[i][label];
                    if push > 0.0 {
                        bounds[i].1
                    } else {
                        bounds[i].0
                    }
                })
                .collect();
            if let Some(hit) = a.try_point(&x) {
                return Ok(Some(hit));
            }
        }
    }

    // random corners for a tenth of what is left, then uniform samples
    let corners = (a.budget.saturating_sub(a.used)) / 11;
    for _ in 0..corners {
        if !a.left() {
            break;
        }
        let x: Vec<f64> = bounds
            .iter()
            .map(|(l, h)| if rng.gen_bool(0.5) { *h } else { *l })
            .collect();
        if let Some(hit) = a.try_point(&x) {
            return Ok(Some(hit));
        }
    }
    while a.left() {
        let x: Vec<f64> = bounds
            .iter()
            .map(|(l, h)| if l < h { rng.gen_range(*l..=*h) } else { *l })
            .collect();
        if let Some(hit) = a.try_point(&x) {
            return Ok(Some(hit));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testnets::*;

    #[test]
    fn zero_radius_finds_nothing() {
        let net = identity_margin_net();
        let r = attack(&net, &qs(&["0.8", "0.2"]), &q("0"), 0, 100, 1).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn finds_corner_counterexample() {
        let net = identity_margin_net();
        let r = attack(&net, &qs(&["0.8", "0.2"]), &q("0.4"), 0, 100, 1).unwrap().unwrap();
        assert_eq!(r.point, vec![0.4, 0.6]);
    }

    #[test]
    fn robust_region_survives_budget() {
        let net = identity_margin_net();
        assert!(attack(&net, &qs(&["0.8", "0.2"]), &q("0.1"), 0, 2000, 7).unwrap().is_none());
    }

    #[test]
    fn rejects_empty_budget() {
        let net = identity_margin_net();
        assert!(attack(&net, &qs(&["0.8", "0.2"]), &q("0.1"), 0, 0, 7).is_err());
    }
}
