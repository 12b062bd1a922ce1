//! Concrete and interval forward evaluation.

use num_traits::ToPrimitive;

use super::{LayerId, LayerKind, Network};
use crate::error::{Error, Result};
use crate::interval::{Endpoint, Interval, Rational};
use crate::network::InputBox;

/// Scalar type for concrete evaluation.
pub trait EvalScalar: Clone + PartialOrd + std::fmt::Debug {
    fn zero() -> Self;
    fn from_weight(w: &Rational) -> Self;
    fn add(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
}

impl EvalScalar for f64 {
    fn zero() -> Self {
        0.0
    }

    /// Round-to-nearest conversion, as a conventional float implementation
    /// would store the weight.
    fn from_weight(w: &Rational) -> Self {
        w.to_f64().expect("finite weight")
    }

    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }

    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
}

impl EvalScalar for Rational {
    fn zero() -> Self {
        num_traits::Zero::zero()
    }

    fn from_weight(w: &Rational) -> Self {
        w.clone()
    }

    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }

    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
}

/// Evaluates the network on one input. Returns every layer's activations,
/// index 0 being the input itself. Affine sums accumulate in ascending term
/// order and add the bias last.
pub fn forward_eval<S: EvalScalar>(net: &Network, x: &[S]) -> Result<Vec<Vec<S>>> {
    if x.len() != net.input_shape().len() {
        return Err(Error::InvalidInput(format!(
            "input has {} values, network expects {}",
            x.len(),
            net.input_shape().len()
        )));
    }
    let mut acts: Vec<Vec<S>> = vec![x.to_vec()];
    for k in 1..net.len() {
        let layer = net.layer(k);
        let out = match &layer.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Relu => acts[layer.preds[0]]
                .iter()
                .map(|v| if *v > S::zero() { v.clone() } else { S::zero() })
                .collect(),
            LayerKind::Add(_) => acts[layer.preds[0]]
                .iter()
                .zip(&acts[layer.preds[1]])
                .map(|(a, b)| a.add(b))
                .collect(),
            LayerKind::Dense(d) => {
                let inp = &acts[layer.preds[0]];
                (0..d.outputs())
                    .map(|o| {
                        let s = d
                            .row(o)
                            .iter()
                            .zip(inp)
                            .fold(S::zero(), |acc, (w, v)| acc.add(&S::from_weight(w).mul(v)));
                        s.add(&S::from_weight(&d.bias[o]))
                    })
                    .collect()
            }
            LayerKind::Conv(c) => {
                let inp = &acts[layer.preds[0]];
                let ishape = net.layer(layer.preds[0]).shape;
                let oshape = layer.shape;
                let mut out = Vec::with_capacity(oshape.len());
                for ow in 0..oshape.width {
                    for oh in 0..oshape.height {
                        for d in 0..c.out_channels {
                            let mut acc = S::zero();
                            for f in 0..c.kernel.0 {
                                for g in 0..c.kernel.1 {
                                    let iw = (ow * c.stride.0 + f) as i64 - c.padding.0 as i64;
                                    let ih = (oh * c.stride.1 + g) as i64 - c.padding.1 as i64;
                                    if !ishape.contains(iw, ih) {
                                        continue;
                                    }
                                    for ci in 0..c.in_channels {
                                        let v = &inp[ishape.index(iw as usize, ih as usize, ci)];
                                        let w = S::from_weight(c.weight(f, g, ci, d));
                                        acc = acc.add(&w.mul(v));
                                    }
                                }
                            }
                            out.push(acc.add(&S::from_weight(&c.bias[d])));
                        }
                    }
                }
                out
            }
        };
        acts.push(out);
    }
    Ok(acts)
}

/// Network parameters converted to enclosures in one endpoint type.
#[derive(Clone, Debug)]
pub struct LoweredNet<T> {
    pub layers: Vec<LoweredLayer<T>>,
}

#[derive(Clone, Debug)]
pub enum LoweredLayer<T> {
    /// Input, ReLU and add layers carry no parameters.
    Plain,
    /// Row-major `outputs × inputs`.
    Dense {
        inputs: usize,
        weights: Vec<Interval<T>>,
        bias: Vec<Interval<T>>,
    },
    /// Filter in `[c_out][fw][fh][c_in]` layout, contiguous in `c_in`.
    Conv {
        weights: Vec<Interval<T>>,
        bias: Vec<Interval<T>>,
    },
}

impl<T: Endpoint> LoweredNet<T> {
    pub fn new(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Dense(d) => LoweredLayer::Dense {
                    inputs: d.inputs,
                    weights: d.weights.iter().map(Interval::from_rational).collect(),
                    bias: d.bias.iter().map(Interval::from_rational).collect(),
                },
                LayerKind::Conv(c) => {
                    let mut w = Vec::with_capacity(c.filter.len());
                    for d in 0..c.out_channels {
                        for f in 0..c.kernel.0 {
                            for g in 0..c.kernel.1 {
                                for ci in 0..c.in_channels {
                                    w.push(Interval::from_rational(c.weight(f, g, ci, d)));
                                }
                            }
                        }
                    }
                    LoweredLayer::Conv {
                        weights: w,
                        bias: c.bias.iter().map(Interval::from_rational).collect(),
                    }
                }
                _ => LoweredLayer::Plain,
            })
            .collect();
        LoweredNet { layers }
    }
}

/// Sum and error bookkeeping for one affine neuron.
struct AffineSum<T> {
    value: Interval<T>,
    abs_sum: T,
    products: usize,
    terms: usize,
}

fn accumulate<'a, T: Endpoint>(
    terms: impl Iterator<Item = (&'a Interval<T>, &'a Interval<T>)>,
    bias: &Interval<T>,
    fan_in: usize,
    track_error: bool,
) -> AffineSum<T> {
    let mut value = Interval::zero();
    let mut abs_sum = T::zero();
    let mut products = 0;
    for (x, w) in terms {
        value.add_mul(x, w);
        if track_error && !w.is_zero() {
            abs_sum = abs_sum.add_up(&x.mag().mul_up(&w.mag()));
            products += 1;
        }
    }
    value.add_assign(bias);
    if track_error {
        abs_sum = abs_sum.add_up(&bias.mag());
    }
    AffineSum {
        value,
        abs_sum,
        products,
        terms: fan_in + 1,
    }
}

fn widen<T: Endpoint>(iv: &Interval<T>, e: &T) -> Interval<T> {
    Interval {
        lo: iv.lo.sub_down(e),
        hi: iv.hi.add_up(e),
    }
}

/// Runs `f(o, sum)` for every neuron `o` of affine layer `k`, given bounds of
/// its predecessors.
fn for_each_affine<T: Endpoint>(
    net: &Network,
    lowered: &LoweredNet<T>,
    k: LayerId,
    bounds: &[Vec<Interval<T>>],
    mut f: impl FnMut(usize, AffineSum<T>),
) {
    let layer = net.layer(k);
    let track = T::MODE == crate::interval::SoundnessMode::WidenedFloat64;
    match (&layer.kind, &lowered.layers[k]) {
        (LayerKind::Dense(_), LoweredLayer::Dense { inputs, weights, bias }) => {
            let inp = &bounds[layer.preds[0]];
            for (o, b) in bias.iter().enumerate() {
                let row = &weights[o * inputs..(o + 1) * inputs];
                f(o, accumulate(inp.iter().zip(row), b, *inputs, track));
            }
        }
        (LayerKind::Conv(c), LoweredLayer::Conv { weights, bias }) => {
            let inp = &bounds[layer.preds[0]];
            let ishape = net.layer(layer.preds[0]).shape;
            let oshape = layer.shape;
            let per_d = c.kernel.0 * c.kernel.1 * c.in_channels;
            let mut terms: Vec<(&Interval<T>, &Interval<T>)> = Vec::with_capacity(per_d);
            for ow in 0..oshape.width {
                for oh in 0..oshape.height {
                    for d in 0..c.out_channels {
                        terms.clear();
                        for fi in 0..c.kernel.0 {
                            for g in 0..c.kernel.1 {
                                let iw = (ow * c.stride.0 + fi) as i64 - c.padding.0 as i64;
                                let ih = (oh * c.stride.1 + g) as i64 - c.padding.1 as i64;
                                if !ishape.contains(iw, ih) {
                                    continue;
                                }
                                let base = ishape.index(iw as usize, ih as usize, 0);
                                let wbase = ((d * c.kernel.0 + fi) * c.kernel.1 + g) * c.in_channels;
                                for ci in 0..c.in_channels {
                                    terms.push((&inp[base + ci], &weights[wbase + ci]));
                                }
                            }
                        }
                        let fan_in = terms.len();
                        let s = accumulate(terms.iter().copied(), &bias[d], fan_in, track);
                        f(oshape.index(ow, oh, d), s);
                    }
                }
            }
        }
        (LayerKind::Add(_), _) => {
            let a = &bounds[layer.preds[0]];
            let b = &bounds[layer.preds[1]];
            for (o, (x, y)) in a.iter().zip(b).enumerate() {
                let mut value = x.clone();
                value.add_assign(y);
                let abs_sum = if track { x.mag().add_up(&y.mag()) } else { T::zero() };
                f(
                    o,
                    AffineSum {
                        value,
                        abs_sum,
                        products: 0,
                        terms: 2,
                    },
                );
            }
        }
        _ => panic!("layer {k} is not affine"),
    }
}

/// Interval image of one layer given bounds of all earlier layers.
pub fn propagate_layer<T: Endpoint>(
    net: &Network,
    lowered: &LoweredNet<T>,
    k: LayerId,
    bounds: &[Vec<Interval<T>>],
) -> Vec<Interval<T>> {
    let layer = net.layer(k);
    match layer.kind {
        LayerKind::Input => bounds[0].clone(),
        LayerKind::Relu => bounds[layer.preds[0]].iter().map(Interval::relu).collect(),
        _ => {
            let mut out = vec![Interval::zero(); layer.shape.len()];
            for_each_affine(net, lowered, k, bounds, |o, s| {
                let e = T::eval_error(&s.abs_sum, s.terms, s.products);
                out[o] = widen(&s.value, &e);
            });
            out
        }
    }
}

/// Bias of affine layer `k` widened by the worst-case evaluation error of
/// each neuron, given sound bounds on its inputs. Substituting
/// `x_k = W x_{k-1} + b_eff` then covers every conventional float
/// evaluation. Equals the exact bias in rational mode; for add layers the
/// bias is zero.
pub fn effective_bias<T: Endpoint>(
    net: &Network,
    lowered: &LoweredNet<T>,
    k: LayerId,
    bounds: &[Vec<Interval<T>>],
) -> Vec<Interval<T>> {
    let exact = T::MODE == crate::interval::SoundnessMode::ExactRational;
    match &lowered.layers[k] {
        LoweredLayer::Dense { bias, .. } | LoweredLayer::Conv { bias, .. } if exact => {
            let shape = net.layer(k).shape;
            let c = bias.len();
            (0..shape.len()).map(|i| bias[i % c].clone()).collect()
        }
        LoweredLayer::Plain if exact => vec![Interval::zero(); net.layer(k).shape.len()],
        _ => {
            let shape = net.layer(k).shape;
            let mut out = vec![Interval::zero(); shape.len()];
            let bias_of = |o: usize| -> Interval<T> {
                match &lowered.layers[k] {
                    LoweredLayer::Dense { bias, .. } => bias[o].clone(),
                    LoweredLayer::Conv { bias, .. } => bias[o % bias.len()].clone(),
                    LoweredLayer::Plain => Interval::zero(),
                }
            };
            for_each_affine(net, lowered, k, bounds, |o, s| {
                let e = T::eval_error(&s.abs_sum, s.terms, s.products);
                out[o] = widen(&bias_of(o), &e);
            });
            out
        }
    }
}

/// Interval propagation through the whole network.
pub fn forward_interval<T: Endpoint>(net: &Network, input: &InputBox) -> Result<Vec<Vec<Interval<T>>>> {
    let lowered = LoweredNet::<T>::new(net);
    forward_interval_lowered(net, &lowered, input)
}

pub fn forward_interval_lowered<T: Endpoint>(
    net: &Network,
    lowered: &LoweredNet<T>,
    input: &InputBox,
) -> Result<Vec<Vec<Interval<T>>>> {
    if input.len() != net.input_shape().len() {
        return Err(Error::InvalidInput(format!(
            "input has {} values, network expects {}",
            input.len(),
            net.input_shape().len()
        )));
    }
    let mut bounds = vec![input.bounds::<T>()];
    for k in 1..net.len() {
        let b = propagate_layer(net, lowered, k, &bounds);
        bounds.push(b);
    }
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testnets::*;
    use crate::network::{Network, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_q(v: f64) -> Rational {
        Rational::from_float(v).unwrap()
    }

    #[test]
    fn dense_and_relu_examples() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![dense(1, 0, &[&["1", "-1"]], &["0"]), relu(2, 1)],
        )
        .unwrap();
        let acts = forward_eval(&net, &qs(&["0.8", "0.2"])).unwrap();
        assert_eq!(acts[1], qs(&["0.6"]));
        let acts = forward_eval(&net, &[0.2f64, 0.8]).unwrap();
        assert!(acts[1][0] < 0.0);
        assert_eq!(acts[2], vec![0.0]);

        let b = InputBox::new(qs(&["0.5", "0.5"]), q("0.5")).unwrap();
        let bounds = forward_interval::<Rational>(&net, &b).unwrap();
        assert_eq!(bounds[1][0], Interval::new(q("-1"), q("1")));
        assert_eq!(bounds[2][0], Interval::new(q("0"), q("1")));
        let fb = forward_interval::<f64>(&net, &b).unwrap();
        assert!(fb[1][0].lo <= -1.0 && fb[1][0].hi >= 1.0);
    }

    #[test]
    fn relu_on_vector() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![dense(1, 0, &[&["1", "0"], &["0", "1"]], &["0", "0"]), relu(2, 1)],
        )
        .unwrap();
        let acts = forward_eval(&net, &qs(&["-1", "2"])).unwrap();
        assert_eq!(acts[2], qs(&["0", "2"]));
    }

    /// Independent nested-loop convolution straight from the definition.
    fn naive_conv(
        x: &[Rational],
        (iw, ih, ic): (usize, usize, usize),
        filt: &dyn Fn(usize, usize, usize, usize) -> Rational,
        k: usize,
        s: usize,
        p: usize,
        oc: usize,
    ) -> Vec<Rational> {
        let ow = (iw + 2 * p - k) / s + 1;
        let oh = (ih + 2 * p - k) / s + 1;
        let mut out = vec![q("0"); ow * oh * oc];
        for a in 0..ow {
            for b in 0..oh {
                for d in 0..oc {
                    let mut acc = q("0");
                    for f in 0..k {
                        for g in 0..k {
                            let xw = (a * s + f) as i64 - p as i64;
                            let xh = (b * s + g) as i64 - p as i64;
                            if xw < 0 || xh < 0 || xw >= iw as i64 || xh >= ih as i64 {
                                continue;
                            }
                            for c in 0..ic {
                                acc += filt(f, g, c, d) * &x[(xw as usize * ih + xh as usize) * ic + c];
                            }
                        }
                    }
                    out[(a * oh + b) * oc + d] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut table = vec![];
            for _ in 0..(4 * 3 * 3 * 3 * 3) {
                table.push(Rational::new(rng.gen_range(-8..8).into(), 4.into()));
            }
            let t2 = table.clone();
            let filt = move |f: usize, g: usize, c: usize, d: usize| t2[((f * 3 + g) * 3 + c) * 3 + d].clone();
            let f1 = filt.clone();
            let f2 = filt.clone();
            let net = Network::from_layers(
                Shape::new(6, 5, 2),
                vec![
                    conv(1, 0, 3, 1, 1, 2, 3, move |f, g, c, d| f1(f, g, c, d)),
                    relu(2, 1),
                    conv(3, 2, 3, 2, 0, 3, 3, move |f, g, c, d| f2(f, g, c, d)),
                ],
            )
            .unwrap();
            let x: Vec<Rational> = (0..60).map(|_| Rational::new(rng.gen_range(0..100).into(), 100.into())).collect();
            let acts = forward_eval(&net, &x).unwrap();
            let l1 = naive_conv(&x, (6, 5, 2), &filt, 3, 1, 1, 3);
            assert_eq!(acts[1], l1);
            let r: Vec<Rational> = l1.iter().map(|v| v.clone().max(q("0"))).collect();
            let l3 = naive_conv(&r, (6, 5, 3), &filt, 3, 2, 0, 3);
            assert_eq!(acts[3], l3);
        }
    }

    #[test]
    fn residual_equals_unrolled_branches() {
        let w = |f: usize, g: usize, c: usize, d: usize| Rational::new(((f + 2 * g + c + d) as i64 - 3).into(), 4.into());
        let net = Network::from_layers(
            Shape::new(4, 4, 1),
            vec![
                conv(1, 0, 3, 1, 1, 1, 2, w),
                relu(2, 1),
                conv(3, 2, 3, 1, 1, 2, 2, w),
                add(4, 3, 2),
            ],
        )
        .unwrap();
        let x: Vec<Rational> = (0..16).map(|i| Rational::new((i as i64 * 7 % 11).into(), 10.into())).collect();
        let acts = forward_eval(&net, &x).unwrap();
        for i in 0..acts[4].len() {
            assert_eq!(acts[4][i], &acts[3][i] + &acts[2][i]);
        }
    }

    #[test]
    fn forward_interval_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = |f: usize, g: usize, c: usize, d: usize| Rational::new((((f * 5 + g * 3 + c + 2 * d) % 7) as i64 - 3).into(), 8.into());
        let net = Network::from_layers(
            Shape::new(5, 5, 1),
            vec![
                conv(1, 0, 3, 1, 1, 1, 2, w),
                relu(2, 1),
                conv(3, 2, 2, 2, 0, 2, 2, w),
                relu(4, 3),
                dense(5, 4, &[&["0.5", "-1", "0.25", "1", "-0.5", "0.75", "1", "-1"], &["1", "1", "-1", "0", "0.125", "0", "-2", "0.5"]], &["0.1", "-0.1"]),
            ],
        )
        .unwrap();
        let center: Vec<Rational> = (0..25).map(|i| Rational::new(((i * 37 % 100) as i64).into(), 100.into())).collect();
        let b = InputBox::new(center, q("0.05")).unwrap();
        let fb = forward_interval::<f64>(&net, &b).unwrap();
        let rb = forward_interval::<Rational>(&net, &b).unwrap();
        let inner = b.inner_f64_bounds();
        for _ in 0..1000 {
            let x: Vec<f64> = inner.iter().map(|(l, h)| rng.gen_range(*l..=*h)).collect();
            let acts = forward_eval(&net, &x).unwrap();
            let exact = forward_eval(&net, &x.iter().map(|v| to_q(*v)).collect::<Vec<_>>()).unwrap();
            for k in 0..net.len() {
                for (i, v) in acts[k].iter().enumerate() {
                    assert!(fb[k][i].contains(v), "layer {k} neuron {i}");
                    assert!(rb[k][i].contains(&exact[k][i]));
                }
            }
        }
        for k in 0..net.len() {
            for (f, r) in fb[k].iter().zip(&rb[k]) {
                assert!(to_q(f.lo) <= r.lo && r.hi <= to_q(f.hi));
            }
        }
    }
}
