//! Slow, independent reference implementations for testing.
//!
//! Nothing here calls into the analysis engine; only the network and input
//! types are shared. Every layer is flattened to an explicit affine map so
//! the code stays obviously correct.

pub mod attack;
pub mod permuted;
pub mod reach;
pub mod reference;

use num_traits::Zero;

use crate::interval::Rational;
use crate::network::{LayerId, LayerKind, Network};

pub use attack::{attack, AttackResult};
pub use permuted::{permuted_eval, PermutedEvaluator, RoundingMode};
pub use reach::{reach, ReachabilitySet};
pub use reference::{reference_analyze, reference_margins, reference_verify, REFERENCE_NEURON_LIMIT};

/// Explicit affine map of a dense or convolutional layer: one sparse row of
/// `(input index, weight)` pairs per output neuron.
#[derive(Clone, Debug)]
pub(crate) struct AffineMap {
    pub rows: Vec<Vec<(usize, Rational)>>,
    pub bias: Vec<Rational>,
}

pub(crate) fn affine_map(net: &Network, k: LayerId) -> Option<AffineMap> {
    let layer = net.layer(k);
    match &layer.kind {
        LayerKind::Dense(d) => {
            let rows = (0..d.outputs())
                .map(|i| {
                    d.row(i)
                        .iter()
                        .enumerate()
                        .filter(|(_, w)| !w.is_zero())
                        .map(|(j, w)| (j, w.clone()))
                        .collect()
                })
                .collect();
            Some(AffineMap {
                rows,
                bias: d.bias.clone(),
            })
        }
        LayerKind::Conv(c) => {
            let ishape = net.layer(layer.preds[0]).shape;
            let oshape = layer.shape;
            let mut rows = vec![Vec::new(); oshape.len()];
            let mut bias = vec![Rational::zero(); oshape.len()];
            for (o, row) in rows.iter_mut().enumerate() {
                let (ow, oh, d) = oshape.coords(o);
                bias[o] = c.bias[d].clone();
                for f in 0..c.kernel.0 {
                    for g in 0..c.kernel.1 {
                        let iw = (ow * c.stride.0 + f) as i64 - c.padding.0 as i64;
                        let ih = (oh * c.stride.1 + g) as i64 - c.padding.1 as i64;
                        if iw < 0 || ih < 0 || iw >= ishape.width as i64 || ih >= ishape.height as i64 {
                            continue;
                        }
                        for ci in 0..c.in_channels {
                            let w = c.weight(f, g, ci, d);
                            if !w.is_zero() {
                                row.push((ishape.index(iw as usize, ih as usize, ci), w.clone()));
                            }
                        }
                    }
                }
                row.sort_by_key(|(j, _)| *j);
            }
            Some(AffineMap { rows, bias })
        }
        _ => None,
    }
}

/// Exact concrete evaluation of every layer.
pub(crate) fn exact_eval(net: &Network, maps: &[Option<AffineMap>], x: &[Rational]) -> Vec<Vec<Rational>> {
    let mut vals: Vec<Vec<Rational>> = vec![x.to_vec()];
    for k in 1..net.len() {
        let layer = net.layer(k);
        let v = match &layer.kind {
            LayerKind::Dense(_) | LayerKind::Conv(_) => {
                let m = maps[k].as_ref().expect("affine map");
                let inp = &vals[layer.preds[0]];
                m.rows
                    .iter()
                    .zip(&m.bias)
                    .map(|(row, b)| row.iter().fold(b.clone(), |acc, (j, w)| acc + w * &inp[*j]))
                    .collect()
            }
            LayerKind::Relu => vals[layer.preds[0]]
                .iter()
                .map(|v| if *v > Rational::zero() { v.clone() } else { Rational::zero() })
                .collect(),
            LayerKind::Add(_) => vals[layer.preds[0]]
                .iter()
                .zip(&vals[layer.preds[1]])
                .map(|(a, b)| a + b)
                .collect(),
            LayerKind::Input => unreachable!("input is layer 0"),
        };
        vals.push(v);
    }
    vals
}

pub(crate) fn all_maps(net: &Network) -> Vec<Option<AffineMap>> {
    (0..net.len()).map(|k| affine_map(net, k)).collect()
}
