//! Dependence-set geometry.
//!
//! Backsubstituting a neuron through `m` convolutions touches a cuboid of the
//! layer `m` steps back: full depth, and a spatial window whose width and
//! origin follow simple recurrences per axis. Starting from width `W = 1` and
//! origin `o = q` (the query coordinate), one step through a convolution with
//! filter `f`, stride `s` and padding `p` gives
//!
//! ```text
//! W' = (W - 1)·s + f
//! o' = o·s - p
//! ```
//!
//! The origin may be negative and the window may stick out of the grid when
//! padding is present. Cells outside the grid stand for zero padding and
//! carry no neuron.

use crate::error::{Error, Result};
use crate::network::{LayerId, LayerKind, Network, Shape};

/// Filter geometry of one convolution, per axis `(w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn square(f: usize, s: usize, p: usize) -> Self {
        ConvGeom {
            kernel: (f, f),
            stride: (s, s),
            padding: (p, p),
        }
    }
}

/// Axis-aligned cuboid of neurons in one layer. Always spans every channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepCuboid {
    pub layer: LayerId,
    pub origin: (i64, i64),
    pub width: (usize, usize),
    pub channels: usize,
}

impl DepCuboid {
    /// The single-column cuboid of one neuron's spatial position.
    pub fn column(layer: LayerId, w: usize, h: usize, channels: usize) -> Self {
        DepCuboid {
            layer,
            origin: (w as i64, h as i64),
            width: (1, 1),
            channels,
        }
    }

    pub fn size(&self) -> usize {
        dep_size(self.width, self.channels)
    }

    /// Flat indices of the in-grid neurons, ascending.
    pub fn clamped(&self, shape: Shape) -> Vec<usize> {
        let mut out = Vec::new();
        for dw in 0..self.width.0 {
            for dh in 0..self.width.1 {
                let (w, h) = (self.origin.0 + dw as i64, self.origin.1 + dh as i64);
                if shape.contains(w, h) {
                    for d in 0..shape.channels {
                        out.push(shape.index(w as usize, h as usize, d));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn contains(&self, w: i64, h: i64) -> bool {
        w >= self.origin.0
            && h >= self.origin.1
            && w < self.origin.0 + self.width.0 as i64
            && h < self.origin.1 + self.width.1 as i64
    }

    /// Smallest cuboid covering both (same layer assumed).
    pub fn union(&self, other: &DepCuboid) -> DepCuboid {
        debug_assert_eq!(self.layer, other.layer);
        let lo = (self.origin.0.min(other.origin.0), self.origin.1.min(other.origin.1));
        let hi = (
            (self.origin.0 + self.width.0 as i64).max(other.origin.0 + other.width.0 as i64),
            (self.origin.1 + self.width.1 as i64).max(other.origin.1 + other.width.1 as i64),
        );
        DepCuboid {
            layer: self.layer,
            origin: lo,
            width: ((hi.0 - lo.0) as usize, (hi.1 - lo.1) as usize),
            channels: self.channels,
        }
    }

    /// Intersection with the grid of `shape`, or `None` if no cell is inside.
    pub fn clip(&self, shape: Shape) -> Option<DepCuboid> {
        let lo = (self.origin.0.max(0), self.origin.1.max(0));
        let hi = (
            (self.origin.0 + self.width.0 as i64).min(shape.width as i64),
            (self.origin.1 + self.width.1 as i64).min(shape.height as i64),
        );
        (lo.0 < hi.0 && lo.1 < hi.1).then(|| DepCuboid {
            layer: self.layer,
            origin: lo,
            width: ((hi.0 - lo.0) as usize, (hi.1 - lo.1) as usize),
            channels: self.channels,
        })
    }

    /// One backsubstitution step through convolution `g` into its input.
    pub fn through_conv(&self, g: &ConvGeom, into: LayerId, channels: usize) -> DepCuboid {
        DepCuboid {
            layer: into,
            origin: (
                self.origin.0 * g.stride.0 as i64 - g.padding.0 as i64,
                self.origin.1 * g.stride.1 as i64 - g.padding.1 as i64,
            ),
            width: (
                (self.width.0 - 1) * g.stride.0 + g.kernel.0,
                (self.width.1 - 1) * g.stride.1 + g.kernel.1,
            ),
            channels,
        }
    }
}

/// A dependence set: a cuboid, or a whole layer behind a dense layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DepSet {
    Cuboid(DepCuboid),
    Full(LayerId),
}

/// Width after backsubstituting through `chain` (filter, stride) pairs, the
/// first element being the layer the query lives in.
pub fn dep_width_axis(chain: &[(usize, usize)]) -> usize {
    chain.iter().fold(1, |w, &(f, s)| (w - 1) * s + f)
}

pub fn dep_width(chain: &[ConvGeom]) -> (usize, usize) {
    let a: Vec<_> = chain.iter().map(|g| (g.kernel.0, g.stride.0)).collect();
    let b: Vec<_> = chain.iter().map(|g| (g.kernel.1, g.stride.1)).collect();
    (dep_width_axis(&a), dep_width_axis(&b))
}

pub fn dep_size(width: (usize, usize), channels: usize) -> usize {
    width.0 * width.1 * channels
}

/// Product of strides along the chain.
pub fn accumulated_stride(chain: &[ConvGeom]) -> (usize, usize) {
    chain
        .iter()
        .fold((1, 1), |(a, b), g| (a * g.stride.0, b * g.stride.1))
}

/// Shift of the origin caused by padding: `Σ_i p_i · Π_{j>i} s_j`.
pub fn accumulated_offset(chain: &[ConvGeom]) -> (i64, i64) {
    chain.iter().fold((0, 0), |(a, b), g| {
        (
            a * g.stride.0 as i64 + g.padding.0 as i64,
            b * g.stride.1 as i64 + g.padding.1 as i64,
        )
    })
}

/// Absolute origin of the dependence cuboid: `S·q - offset` per axis.
pub fn dep_position(query: (usize, usize), chain: &[ConvGeom]) -> (i64, i64) {
    let s = accumulated_stride(chain);
    let o = accumulated_offset(chain);
    (
        (s.0 * query.0) as i64 - o.0,
        (s.1 * query.1) as i64 - o.1,
    )
}

fn geom_of(net: &Network, k: LayerId) -> Option<ConvGeom> {
    match &net.layer(k).kind {
        LayerKind::Conv(c) => Some(ConvGeom {
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        }),
        _ => None,
    }
}

/// First dependence set of a set of neurons of one layer.
///
/// Convolutions give the bounding cuboid of the union of the windows (exact
/// when the neurons form a spatial rectangle), ReLU layers the same
/// positions, dense layers the whole predecessor. Add layers have two
/// predecessors; use [`dep_split_residual`] for those.
pub fn dep_set_first(net: &Network, layer: LayerId, neurons: &[usize]) -> Result<DepSet> {
    let l = net.layer(layer);
    if neurons.is_empty() {
        return Err(Error::Config("empty neuron set".into()));
    }
    let bbox = || {
        let coords: Vec<_> = neurons.iter().map(|&n| l.shape.coords(n)).collect();
        let w0 = coords.iter().map(|c| c.0).min().unwrap();
        let w1 = coords.iter().map(|c| c.0).max().unwrap();
        let h0 = coords.iter().map(|c| c.1).min().unwrap();
        let h1 = coords.iter().map(|c| c.1).max().unwrap();
        DepCuboid {
            layer,
            origin: (w0 as i64, h0 as i64),
            width: (w1 - w0 + 1, h1 - h0 + 1),
            channels: l.shape.channels,
        }
    };
    match &l.kind {
        LayerKind::Input => Err(Error::Config("the input layer has no predecessors".into())),
        LayerKind::Dense(_) => Ok(DepSet::Full(l.preds[0])),
        LayerKind::Relu => {
            let mut c = bbox();
            c.layer = l.preds[0];
            Ok(DepSet::Cuboid(c))
        }
        LayerKind::Conv(_) => {
            let g = geom_of(net, layer).unwrap();
            let p = l.preds[0];
            Ok(DepSet::Cuboid(bbox().through_conv(&g, p, net.layer(p).shape.channels)))
        }
        LayerKind::Add(_) => Err(Error::Config(format!(
            "layer {} joins two branches; split it per branch",
            net.file_id(layer)
        ))),
    }
}

/// First dependence set of an add-layer neuron, partitioned by branch: the
/// same position in each of the two predecessors.
pub fn dep_split_residual(net: &Network, join: LayerId, neuron: usize) -> Result<(DepCuboid, DepCuboid)> {
    let l = net.layer(join);
    if !matches!(l.kind, LayerKind::Add(_)) {
        return Err(Error::Config(format!(
            "layer {} is not a residual exit",
            net.file_id(join)
        )));
    }
    let (w, h, _) = l.shape.coords(neuron);
    let c = l.shape.channels;
    Ok((
        DepCuboid::column(l.preds[0], w, h, c),
        DepCuboid::column(l.preds[1], w, h, c),
    ))
}

/// Advance a cuboid one step into the predecessor of its layer. Returns
/// `None` when the layer is dense (the set becomes the whole predecessor) or
/// has no single predecessor.
pub fn step_back(net: &Network, cub: &DepCuboid) -> Option<DepCuboid> {
    let l = net.layer(cub.layer);
    match &l.kind {
        LayerKind::Relu => Some(DepCuboid {
            layer: l.preds[0],
            ..*cub
        }),
        LayerKind::Conv(_) => {
            let g = geom_of(net, cub.layer).unwrap();
            let p = l.preds[0];
            Some(cub.through_conv(&g, p, net.layer(p).shape.channels))
        }
        _ => None,
    }
}

/// Dependence cuboid of one neuron `m` steps back along a chain of
/// convolution and ReLU layers, clipped to the grid after every step (so
/// padding never widens later steps). `None` if the walk leaves the chain
/// (dense or add layer, or the input) before `m` steps.
pub fn dep_chain_cuboid(net: &Network, layer: LayerId, neuron: usize, m: usize) -> Option<DepCuboid> {
    let shape = net.layer(layer).shape;
    let (w, h, _) = shape.coords(neuron);
    let mut c = DepCuboid::column(layer, w, h, shape.channels);
    for _ in 0..m {
        let next = step_back(net, &c)?;
        let shape = net.layer(next.layer).shape;
        c = match geom_of(net, c.layer) {
            // a box edge can land on padding or between strided taps
            Some(g) => {
                let (o0, w0) = tap_span(c.origin.0, c.width.0, g.kernel.0, g.stride.0, g.padding.0, shape.width)?;
                let (o1, w1) = tap_span(c.origin.1, c.width.1, g.kernel.1, g.stride.1, g.padding.1, shape.height)?;
                DepCuboid {
                    origin: (o0, o1),
                    width: (w0, w1),
                    ..next
                }
            }
            None => next.clip(shape)?,
        };
    }
    Some(c)
}

/// Span of the in-grid input positions read by outputs `origin..origin+len`
/// along one axis.
fn tap_span(origin: i64, len: usize, k: usize, s: usize, p: usize, size: usize) -> Option<(i64, usize)> {
    let taps = (origin..origin + len as i64)
        .flat_map(|o| (0..k as i64).map(move |f| o * s as i64 - p as i64 + f))
        .filter(|x| (0..size as i64).contains(x));
    let (lo, hi) = taps.fold((i64::MAX, i64::MIN), |(lo, hi), x| (lo.min(x), hi.max(x)));
    (lo <= hi).then(|| (lo, (hi - lo + 1) as usize))
}

/// Footprint at the block head of an add-layer neuron, separately through
/// each branch. The two cuboids may differ in size and origin.
pub fn dep_branch_footprints(
    net: &Network,
    join: LayerId,
    neuron: usize,
) -> Result<(Option<DepCuboid>, Option<DepCuboid>)> {
    let LayerKind::Add(block) = &net.layer(join).kind else {
        return Err(Error::Config(format!(
            "layer {} is not a residual exit",
            net.file_id(join)
        )));
    };
    let (a, b) = dep_split_residual(net, join, neuron)?;
    let walk = |mut c: DepCuboid| -> Option<DepCuboid> {
        while c.layer != block.head {
            c = step_back(net, &c)?;
        }
        Some(c)
    };
    Ok((walk(a), walk(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_examples() {
        assert_eq!(dep_width_axis(&[(3, 1)]), 3);
        assert_eq!(dep_width_axis(&[(3, 1), (2, 1)]), 4);
        assert_eq!(dep_width_axis(&[(1, 1); 7]), 1);
        assert_eq!(dep_width_axis(&[]), 1);
        assert_eq!(dep_width_axis(&[(3, 2), (3, 2)]), 7);
    }

    #[test]
    fn size_examples() {
        assert_eq!(dep_size((3, 3), 2), 18);
        assert_eq!(dep_size((4, 4), 2), 32);
        assert_eq!(dep_size((1, 1), 1), 1);
    }

    #[test]
    fn stride_and_position() {
        assert_eq!(accumulated_stride(&[]), (1, 1));
        assert_eq!(accumulated_stride(&[ConvGeom::square(3, 1, 0); 3]), (1, 1));
        assert_eq!(accumulated_stride(&[ConvGeom::square(3, 2, 0); 2]), (4, 4));
        assert_eq!(dep_position((0, 0), &[ConvGeom::square(3, 2, 0); 3]), (0, 0));
        let s2 = [ConvGeom::square(2, 2, 0)];
        assert_eq!(dep_position((3, 0), &s2).0, 6);
        // incremental recurrence agrees with the closed form
        let chain = [
            ConvGeom::square(3, 2, 1),
            ConvGeom::square(2, 1, 0),
            ConvGeom::square(4, 3, 1),
        ];
        let mut c = DepCuboid::column(0, 5, 2, 1);
        for g in &chain {
            c = c.through_conv(g, 0, 1);
        }
        assert_eq!(c.origin, dep_position((5, 2), &chain));
        assert_eq!(c.width, dep_width(&chain));
    }

    #[test]
    fn asymmetric_axes() {
        let g = ConvGeom {
            kernel: (3, 1),
            stride: (2, 1),
            padding: (1, 0),
        };
        assert_eq!(dep_width(&[g, g]), (7, 1));
        assert_eq!(dep_position((1, 4), &[g, g]), (1, 4));
    }

    #[test]
    fn union_of_columns() {
        let a = DepCuboid::column(0, 1, 1, 2);
        let b = DepCuboid::column(0, 2, 1, 2);
        let u = a.union(&b);
        assert_eq!(u.origin, (1, 1));
        assert_eq!(u.width, (2, 1));
    }

    #[test]
    fn tap_span_skips_padding_and_strided_gaps() {
        // 1x1 stride 2 padding 1 over a grid of 9: output 0 reads padding,
        // outputs 1..=2 read inputs 1 and 3
        assert_eq!(tap_span(0, 3, 1, 2, 1, 9), Some((1, 3)));
        assert_eq!(tap_span(0, 1, 1, 2, 1, 9), None);
        assert_eq!(tap_span(-1, 4, 3, 1, 0, 5), Some((0, 5)));
    }

    #[test]
    fn chain_cuboid_is_tight_at_padded_edges() {
        let net = crate::gen::generate_from_str(0, Shape::new(9, 9, 2), "conv 1x1x2 s2 p1; conv 2x2x2 s1 p0").unwrap();
        let c = dep_chain_cuboid(&net, 2, 1, 2).unwrap();
        assert_eq!((c.layer, c.origin, c.width), (0, (1, 1), (1, 1)));
        assert!(dep_chain_cuboid(&net, 2, 1, 3).is_none());
    }
}
