//! Brute-force dependence sets by breadth-first predecessor expansion.

use std::collections::BTreeSet;

use crate::network::{LayerId, LayerKind, Network};

/// Neurons as `(layer, w, h, d)`.
pub type ReachabilitySet = BTreeSet<(LayerId, usize, usize, usize)>;

/// Direct structural predecessors of one neuron (independent of weight
/// values).
fn preds_of(net: &Network, k: LayerId, n: usize) -> Vec<(LayerId, usize)> {
    let layer = net.layer(k);
    let (w, h, d) = layer.shape.coords(n);
    match &layer.kind {
        LayerKind::Input => Vec::new(),
        LayerKind::Dense(_) => {
            let p = layer.preds[0];
            (0..net.layer(p).shape.len()).map(|j| (p, j)).collect()
        }
        LayerKind::Relu => vec![(layer.preds[0], n)],
        LayerKind::Add(_) => layer.preds.iter().map(|p| (*p, n)).collect(),
        LayerKind::Conv(c) => {
            let p = layer.preds[0];
            let ps = net.layer(p).shape;
            let _ = d;
            let mut out = Vec::new();
            for x in 0..ps.width {
                for y in 0..ps.height {
                    // does some filter tap of (w, h) land on (x, y)?
                    let fx = x as i64 + c.padding.0 as i64 - (w * c.stride.0) as i64;
                    let fy = y as i64 + c.padding.1 as i64 - (h * c.stride.1) as i64;
                    if (0..c.kernel.0 as i64).contains(&fx) && (0..c.kernel.1 as i64).contains(&fy) {
                        for ci in 0..ps.channels {
                            out.push((p, ps.index(x, y, ci)));
                        }
                    }
                }
            }
            out
        }
    }
}

/// Neurons exactly `m` predecessor steps behind neuron `n` of layer `k`.
pub fn reach(net: &Network, k: LayerId, n: usize, m: usize) -> ReachabilitySet {
    let mut frontier: BTreeSet<(LayerId, usize)> = BTreeSet::from([(k, n)]);
    for _ in 0..m {
        frontier = frontier
            .iter()
            .flat_map(|&(l, i)| preds_of(net, l, i))
            .collect();
    }
    frontier
        .into_iter()
        .map(|(l, i)| {
            let (w, h, d) = net.layer(l).shape.coords(i);
            (l, w, h, d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::Rational;
    use crate::network::testnets::*;
    use crate::network::Shape;

    fn one(_: usize, _: usize, _: usize, _: usize) -> Rational {
        Rational::from_integer(1.into())
    }

    #[test]
    fn two_conv_chain_sizes() {
        // 3x3 then 2x2 convolutions, stride 1, two channels everywhere
        let net = Network::from_layers(
            Shape::new(6, 6, 2),
            vec![conv(1, 0, 2, 1, 0, 2, 2, one), conv(2, 1, 3, 1, 0, 2, 2, one)],
        )
        .unwrap();
        assert_eq!(reach(&net, 2, 0, 1).len(), 18);
        assert_eq!(reach(&net, 2, 0, 2).len(), 32);
        assert_eq!(reach(&net, 2, 0, 0).len(), 1);
    }

    #[test]
    fn dense_reaches_whole_layer() {
        let net = Network::from_layers(
            Shape::flat(3),
            vec![dense(1, 0, &[&["1", "0", "0"]], &["0"])],
        )
        .unwrap();
        assert_eq!(reach(&net, 1, 0, 1).len(), 3);
    }
}
