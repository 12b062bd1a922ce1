//! Analysis driver and robustness certification.
//!
//! `analyze` starts from plain interval propagation, then visits every
//! affine layer that feeds a ReLU (and the output layer) in topological
//! order. Each visit runs a lower and an upper backsubstitution pass, keeps
//! the best candidates, and refreshes the interval bounds of all later layers.

use std::time::{Duration, Instant};

use num_traits::ToPrimitive;

use crate::backsub::{
    materialize_conv, run_backsubstitution, run_margin_pass, BacksubOptions, CandidateBound, ConvStrategy,
    PassStats, Polarity, Relaxation, StepContext,
};
use crate::error::{Error, Result};
use crate::interval::{Endpoint, Interval, Rational, SoundnessMode};
use crate::network::eval::{effective_bias, forward_interval_lowered, propagate_layer};
use crate::network::{InputBox, LayerId, LayerKind, LoweredNet, Network};

/// Slopes and offsets of unstable ReLU relaxations are rounded to multiples
/// of `2^-RELAX_GRID_BITS`. This keeps exact rational denominators from
/// compounding across layers and makes the two soundness modes pick
/// identical relaxations for nearly identical bounds.
pub const RELAX_GRID_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluStatus {
    StablePos,
    StableNeg,
    Unstable,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnalysisOptions {
    pub backsub: BacksubOptions,
    pub strategy: ConvStrategy,
    /// Size of the worker pool for row parallelism; the global pool if unset.
    pub workers: Option<usize>,
}

/// Bounds of one layer, with relaxations when the layer feeds a ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronBounds<T> {
    pub bounds: Vec<Interval<T>>,
    pub relax: Option<Vec<Relaxation<T>>>,
}

impl<T: Endpoint> NeuronBounds<T> {
    pub fn status(&self, i: usize) -> ReluStatus {
        status_of(&self.bounds[i])
    }
}

pub fn status_of<T: Endpoint>(b: &Interval<T>) -> ReluStatus {
    let z = T::zero();
    if b.lo >= z {
        ReluStatus::StablePos
    } else if b.hi <= z {
        ReluStatus::StableNeg
    } else {
        ReluStatus::Unstable
    }
}

#[derive(Clone, Debug)]
pub struct Analysis<T> {
    pub layers: Vec<NeuronBounds<T>>,
    pub stats: PassStats,
}

impl<T> Analysis<T> {
    pub fn bounds(&self, k: LayerId) -> &[Interval<T>] {
        &self.layers[k].bounds
    }
}

fn point<T: Endpoint>(v: T) -> Interval<T> {
    Interval::point(v)
}

/// Relaxation of `relu` on `[l, u]`.
///
/// Stable neurons get the exact identity or zero. Unstable ones get the
/// chord `γ = u/(u-l)`, `δ = -l·γ` above (with γ rounded down and δ rounded
/// up to the relaxation grid) and `α·x` below, where `α = 1` if `u > -l`
/// and 0 otherwise.
pub fn relu_relaxation<T: Endpoint>(l: &T, u: &T) -> Result<Relaxation<T>> {
    if l > u {
        return Err(Error::Config(format!("relaxation of empty range [{l:?}, {u:?}]")));
    }
    let zero = T::zero();
    let one = T::one();
    if *l >= zero {
        return Ok(Relaxation {
            alpha: point(one.clone()),
            beta: point(zero.clone()),
            gamma: point(one),
            delta: point(zero),
        });
    }
    if *u <= zero {
        return Ok(Relaxation {
            alpha: point(zero.clone()),
            beta: point(zero.clone()),
            gamma: point(zero.clone()),
            delta: point(zero),
        });
    }
    let alpha = if *u > l.neg() { one.clone() } else { zero.clone() };
    let (gamma, delta) = if !l.is_finite() {
        (zero.clone(), u.clone())
    } else if !u.is_finite() {
        (one.clone(), l.neg())
    } else {
        let g = u.div_down(&u.sub_up(l)).floor_dyadic(RELAX_GRID_BITS);
        let g = if g > one { one.clone() } else if g < zero { zero.clone() } else { g };
        let at_l = l.neg().mul_up(&g);
        let at_u = u.mul_up(&one.sub_up(&g));
        let d = if at_l > at_u { at_l } else { at_u };
        (g, d.ceil_dyadic(RELAX_GRID_BITS))
    };
    Ok(Relaxation {
        alpha: point(alpha),
        beta: point(zero),
        gamma: point(gamma),
        delta: point(delta),
    })
}

/// Mutable analysis state for one input region.
struct State<'a, T> {
    net: &'a Network,
    lowered: LoweredNet<T>,
    bounds: Vec<Vec<Interval<T>>>,
    relax: Vec<Option<Vec<Relaxation<T>>>>,
    biases: Vec<Option<Vec<Interval<T>>>>,
    materialized: Option<Vec<Option<Vec<Interval<T>>>>>,
    options: &'a AnalysisOptions,
    stats: PassStats,
}

impl<'a, T: Endpoint> State<'a, T> {
    fn new(net: &'a Network, input: &InputBox, options: &'a AnalysisOptions) -> Result<Self> {
        let lowered = LoweredNet::<T>::new(net);
        let bounds = forward_interval_lowered(net, &lowered, input)?;
        let materialized = (options.strategy == ConvStrategy::DenseMaterialized).then(|| {
            (0..net.len())
                .map(|k| {
                    matches!(net.layer(k).kind, LayerKind::Conv(_)).then(|| materialize_conv(net, &lowered, k))
                })
                .collect()
        });
        let n = net.len();
        Ok(State {
            net,
            lowered,
            bounds,
            relax: vec![None; n],
            biases: vec![None; n],
            materialized,
            options,
            stats: PassStats::default(),
        })
    }

    /// Relaxations of ReLU layers and effective biases of affine layers up
    /// to `upto`, from the current bounds.
    fn prepare(&mut self, upto: LayerId) -> Result<()> {
        let exact = T::MODE == SoundnessMode::ExactRational;
        for k in 1..=upto {
            let layer = self.net.layer(k);
            match layer.kind {
                LayerKind::Relu => {
                    let relax = self.bounds[layer.preds[0]]
                        .iter()
                        .map(|b| relu_relaxation(&b.lo, &b.hi))
                        .collect::<Result<Vec<_>>>()?;
                    self.relax[k] = Some(relax);
                }
                LayerKind::Input => {}
                _ => {
                    if !exact || self.biases[k].is_none() {
                        self.biases[k] = Some(effective_bias(self.net, &self.lowered, k, &self.bounds));
                    }
                }
            }
        }
        Ok(())
    }

    fn ctx(&self) -> StepContext<'_, T> {
        StepContext {
            net: self.net,
            lowered: &self.lowered,
            bounds: &self.bounds,
            relax: &self.relax,
            biases: &self.biases,
            strategy: self.options.strategy,
            materialized: self.materialized.as_deref(),
        }
    }

    fn refine(&mut self, q: LayerId) -> Result<()> {
        self.prepare(q)?;
        let freeze = self.net.feeds_relu(q);
        let opts = &self.options.backsub;

        let mut lower = CandidateBound::from_bounds(Polarity::Lower, &self.bounds[q], freeze);
        let s = run_backsubstitution(&self.ctx(), q, Polarity::Lower, &mut lower, opts)?;
        self.stats.absorb(&s);
        for (b, v) in self.bounds[q].iter_mut().zip(&lower.best) {
            if let Some(v) = v {
                b.lo = v.clone();
            }
        }

        let mut upper = CandidateBound::from_bounds(Polarity::Upper, &self.bounds[q], freeze);
        let s = run_backsubstitution(&self.ctx(), q, Polarity::Upper, &mut upper, opts)?;
        self.stats.absorb(&s);
        for (b, v) in self.bounds[q].iter_mut().zip(&upper.best) {
            if let Some(v) = v {
                b.hi = v.clone();
            }
        }

        for k in q + 1..self.net.len() {
            let fresh = propagate_layer(self.net, &self.lowered, k, &self.bounds);
            for (old, new) in self.bounds[k].iter_mut().zip(fresh) {
                *old = old.intersect(&new);
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        for q in self.net.query_layers() {
            self.refine(q)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Analysis<T>> {
        self.prepare(self.net.len() - 1)?;
        let net = self.net;
        let mut relax = std::mem::take(&mut self.relax);
        let layers = self
            .bounds
            .into_iter()
            .enumerate()
            .map(|(k, bounds)| {
                let r = net
                    .succs(k)
                    .iter()
                    .find(|s| matches!(net.layer(**s).kind, LayerKind::Relu))
                    .and_then(|s| relax[*s].take());
                NeuronBounds { bounds, relax: r }
            })
            .collect();
        Ok(Analysis {
            layers,
            stats: self.stats,
        })
    }
}

fn with_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Sound bounds for every neuron of `net` over `input`.
pub fn analyze<T: Endpoint>(net: &Network, input: &InputBox, options: &AnalysisOptions) -> Result<Analysis<T>> {
    with_pool(options.workers, || {
        let mut st = State::<T>::new(net, input, options)?;
        st.run()?;
        st.finish()
    })?
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictKind {
    Verified,
    Unknown,
}

#[derive(Clone, Debug)]
pub struct Verdict<T> {
    pub result: VerdictKind,
    /// Lower bound on `o_label - o_j` per class; `None` at the label and
    /// where no finite bound was found.
    pub margins: Vec<Option<T>>,
    pub stats: PassStats,
    pub elapsed: Duration,
}

impl<T: Endpoint> Verdict<T> {
    pub fn verified(&self) -> bool {
        self.result == VerdictKind::Verified
    }

    pub fn margins_f64(&self) -> Vec<Option<f64>> {
        self.margins
            .iter()
            .map(|m| m.as_ref().map(|v| v.to_f64_down()).filter(|v| v.is_finite()))
            .collect()
    }
}

/// Attempts to prove that every input within `epsilon` of `image` (clamped
/// to `[0,1]`) is classified as `label`.
pub fn verify_robustness<T: Endpoint>(
    net: &Network,
    image: &[Rational],
    epsilon: &Rational,
    label: usize,
    options: &AnalysisOptions,
) -> Result<Verdict<T>> {
    let input = InputBox::new(image.to_vec(), epsilon.clone())?;
    verify_box(net, &input, label, options)
}

pub fn verify_box<T: Endpoint>(
    net: &Network,
    input: &InputBox,
    label: usize,
    options: &AnalysisOptions,
) -> Result<Verdict<T>> {
    let classes = net.output_size();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let start = Instant::now();
    with_pool(options.workers, || {
        let mut st = State::<T>::new(net, input, options)?;
        st.run()?;
        st.prepare(net.len() - 1)?;
        let (margins, s) = run_margin_pass(&st.ctx(), label, &options.backsub)?;
        st.stats.absorb(&s);
        let zero = T::zero();
        let ok = margins
            .iter()
            .enumerate()
            .all(|(j, m)| j == label || m.as_ref().is_some_and(|v| *v > zero));
        Ok(Verdict {
            result: if ok { VerdictKind::Verified } else { VerdictKind::Unknown },
            margins,
            stats: st.stats,
            elapsed: start.elapsed(),
        })
    })?
}

/// Exact decimal epsilon or pixel as `f64` (nearest), for reporting.
pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testnets::*;
    use crate::network::Shape;
    use proptest::prelude::*;

    #[test]
    fn relaxation_examples() {
        let r = relu_relaxation(&q("1"), &q("3")).unwrap();
        assert_eq!(
            (r.alpha.lo, r.beta.lo, r.gamma.lo, r.delta.lo),
            (q("1"), q("0"), q("1"), q("0"))
        );
        let r = relu_relaxation(&q("-3"), &q("-1")).unwrap();
        assert!(r.alpha.is_zero() && r.beta.is_zero() && r.gamma.is_zero() && r.delta.is_zero());
        let r = relu_relaxation(&q("-1"), &q("1")).unwrap();
        assert_eq!((r.gamma.lo.clone(), r.delta.lo.clone()), (q("0.5"), q("0.5")));
        assert!(r.alpha.is_zero() && r.beta.is_zero());
        for i in 0..=100 {
            let x = Rational::new((i - 50).into(), 50.into());
            let relu = x.clone().max(q("0"));
            assert!(&r.alpha.lo * &x + &r.beta.lo <= relu);
            assert!(relu <= &r.gamma.lo * &x + &r.delta.lo);
        }
        let f = relu_relaxation(&-1.0f64, &1.0).unwrap();
        assert_eq!((f.gamma.lo, f.delta.lo), (0.5, 0.5));
        assert!(relu_relaxation(&q("1"), &q("0")).is_err());
        let r = relu_relaxation(&q("-1"), &q("2")).unwrap();
        assert_eq!(r.alpha.lo, q("1"));
    }

    #[test]
    fn relaxation_with_infinite_bounds() {
        let r = relu_relaxation(&f64::NEG_INFINITY, &2.0).unwrap();
        assert_eq!((r.gamma.lo, r.delta.lo), (0.0, 2.0));
        let r = relu_relaxation(&-3.0, &f64::INFINITY).unwrap();
        assert_eq!((r.gamma.lo, r.delta.lo, r.alpha.lo), (1.0, 3.0, 1.0));
    }

    fn check_relaxation(l: &Rational, u: &Rational) {
        let r = relu_relaxation(l, u).unwrap();
        for i in 0..=40 {
            let x = l + (u - l) * Rational::new(i.into(), 40.into());
            let relu = x.clone().max(q("0"));
            assert!(&r.alpha.lo * &x + &r.beta.lo <= relu, "lower at {x}");
            assert!(relu <= &r.gamma.lo * &x + &r.delta.lo, "upper at {x}");
        }
    }

    proptest! {
        #[test]
        fn relaxation_is_sound(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, den in 1i64..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            check_relaxation(&Rational::new(lo.into(), den.into()), &Rational::new(hi.into(), den.into()));
        }

        #[test]
        fn float_relaxation_is_sound(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let (lo, hi) = (a.min(b), a.max(b));
            let r = relu_relaxation(&lo, &hi).unwrap();
            let (ql, qh) = (Rational::from_float(lo).unwrap(), Rational::from_float(hi).unwrap());
            let g = Rational::from_float(r.gamma.lo).unwrap();
            let d = Rational::from_float(r.delta.lo).unwrap();
            let al = Rational::from_float(r.alpha.lo).unwrap();
            for x in [ql.clone(), qh.clone(), (&ql + &qh) / Rational::from_integer(2.into())] {
                let relu = x.clone().max(q("0"));
                prop_assert!(&al * &x <= relu);
                prop_assert!(relu <= &g * &x + &d);
            }
        }
    }

    #[test]
    fn identity_net_verdicts() {
        let net = identity_margin_net();
        let opts = AnalysisOptions::default();
        let v = verify_robustness::<Rational>(&net, &qs(&["0.8", "0.2"]), &q("0.1"), 0, &opts).unwrap();
        assert!(v.verified());
        assert_eq!(v.margins[1], Some(q("0.4")));
        let v = verify_robustness::<f64>(&net, &qs(&["0.8", "0.2"]), &q("0.1"), 0, &opts).unwrap();
        assert!(v.verified());
        let v = verify_robustness::<Rational>(&net, &qs(&["0.8", "0.2"]), &q("0.4"), 0, &opts).unwrap();
        assert_eq!(v.result, VerdictKind::Unknown);
        assert_eq!(v.margins[1], Some(q("-0.2")));
        assert!(verify_robustness::<Rational>(&net, &qs(&["0.8", "0.2"]), &q("0.1"), 2, &opts).is_err());
    }

    #[test]
    fn affine_only_net_is_exact() {
        // the dense composition x -> (x0 + x1, x0 - x1) -> (2 x0) is exact
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "1"], &["1", "-1"]], &["0", "0"]),
                dense(2, 1, &[&["1", "1"]], &["0"]),
            ],
        )
        .unwrap();
        let b = InputBox::new(qs(&["0.5", "0.5"]), q("0.5")).unwrap();
        let a = analyze::<Rational>(&net, &b, &AnalysisOptions::default()).unwrap();
        assert_eq!(a.bounds(2)[0], Interval::new(q("0"), q("2")));
        let fi = crate::network::forward_interval::<Rational>(&net, &b).unwrap();
        assert_eq!(fi[2][0], Interval::new(q("-1"), q("3")));
    }

    #[test]
    fn single_relu_hand_expansion() {
        // y = relu(x0 - x1), out = y - x0 + 1 over the unit box.
        // x0 - x1 in [-1, 1]: gamma = delta = 1/2, alpha = 0.
        // upper: out <= 0.5 (x0 - x1) + 0.5 - x0 + 1 = -0.5 x0 - 0.5 x1 + 1.5 <= 1.5
        // lower: out >= 0 - x0 + 1 >= 0
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "-1"], &["1", "0"]], &["0", "0"]),
                relu(2, 1),
                dense(3, 2, &[&["1", "0"]], &["0"]),
                dense(4, 0, &[&["1", "0"]], &["0"]),
            ],
        );
        // that net has two sinks; build the single-output variant instead
        assert!(net.is_err());
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "-1"], &["1", "1"]], &["0", "0"]),
                relu(2, 1),
                dense(3, 2, &[&["1", "-0.5"]], &["1"]),
            ],
        )
        .unwrap();
        // layer 1: n0 = x0 - x1 in [-1,1], n1 = x0 + x1 in [0,2] (stable)
        // out = relu(n0) - 0.5 n1 + 1
        // upper: 0.5 n0 + 0.5 - 0.5 n1 + 1 = 0.5(x0 - x1) - 0.5(x0 + x1) + 1.5 = -x1 + 1.5 <= 1.5
        // lower: 0 - 0.5 (x0 + x1) + 1 >= 0
        let b = InputBox::new(qs(&["0.5", "0.5"]), q("0.5")).unwrap();
        let a = analyze::<Rational>(&net, &b, &AnalysisOptions::default()).unwrap();
        assert_eq!(a.bounds(3)[0], Interval::new(q("0"), q("1.5")));
        assert_eq!(a.bounds(1)[0], Interval::new(q("-1"), q("1")));
        assert_eq!(a.layers[1].status(1), ReluStatus::StablePos);
        assert_eq!(a.layers[1].status(0), ReluStatus::Unstable);
        assert!(a.layers[1].relax.is_some());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(1, 0, &[&["1", "-1"], &["0.3", "0.7"], &["-1", "0.5"]], &["0.1", "-0.2", "0"]),
                relu(2, 1),
                dense(3, 2, &[&["1", "-0.5", "0.25"], &["-1", "1", "0.5"]], &["0", "0.1"]),
            ],
        )
        .unwrap();
        let b = InputBox::new(qs(&["0.4", "0.6"]), q("0.3")).unwrap();
        let one = analyze::<f64>(&net, &b, &AnalysisOptions { workers: Some(1), ..Default::default() }).unwrap();
        let four = analyze::<f64>(&net, &b, &AnalysisOptions { workers: Some(4), ..Default::default() }).unwrap();
        for k in 0..net.len() {
            for (x, y) in one.bounds(k).iter().zip(four.bounds(k)) {
                assert_eq!(x.lo.to_bits(), y.lo.to_bits());
                assert_eq!(x.hi.to_bits(), y.hi.to_bits());
            }
        }
    }
}
