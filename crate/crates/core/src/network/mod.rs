//! Network model: a DAG of dense, convolutional, ReLU and residual-add layers
//! with exact rational weights.
//!
//! Layers are stored in a topological order. Layer 0 is always the implicit
//! input layer. Neuron `(w, h, d)` of a layer with shape `W×H×C` lives at flat
//! index `(w·H + h)·C + d`.

pub mod eval;
pub mod format;
pub mod input;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, FileLayerId, Result};
use crate::interval::Rational;

pub use eval::{forward_eval, forward_interval, EvalScalar, LoweredLayer, LoweredNet};
pub use format::{load_model, parse_model, save_model, write_model};
pub use input::{load_inputs, parse_inputs, InputBox, InputRecord};

/// Position in the topological order; 0 is the input layer.
pub type LayerId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Shape {
            width,
            height,
            channels,
        }
    }

    pub fn flat(n: usize) -> Self {
        Shape::new(1, 1, n)
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, w: usize, h: usize, d: usize) -> usize {
        (w * self.height + h) * self.channels + d
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let d = i % self.channels;
        let wh = i / self.channels;
        (wh / self.height, wh % self.height, d)
    }

    /// Whether signed spatial coordinates fall inside the grid.
    #[inline]
    pub fn contains(&self, w: i64, h: i64) -> bool {
        w >= 0 && h >= 0 && (w as usize) < self.width && (h as usize) < self.height
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// Fully connected layer. `weights` is row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub weights: Vec<Rational>,
    pub bias: Vec<Rational>,
}

impl Dense {
    pub fn new(weights: Vec<Vec<Rational>>, bias: Vec<Rational>) -> Self {
        let inputs = weights.first().map_or(0, |r| r.len());
        Dense {
            inputs,
            weights: weights.into_iter().flatten().collect(),
            bias,
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> &Rational {
        &self.weights[out * self.inputs + inp]
    }

    pub fn row(&self, out: usize) -> &[Rational] {
        &self.weights[out * self.inputs..(out + 1) * self.inputs]
    }
}

/// Convolution with zero padding. `filter` is laid out `[fw][fh][c_in][c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter: Vec<Rational>,
    pub bias: Vec<Rational>,
}

impl Conv {
    #[inline]
    pub fn filter_index(&self, f: usize, g: usize, c: usize, d: usize) -> usize {
        ((f * self.kernel.1 + g) * self.in_channels + c) * self.out_channels + d
    }

    #[inline]
    pub fn weight(&self, f: usize, g: usize, c: usize, d: usize) -> &Rational {
        &self.filter[self.filter_index(f, g, c, d)]
    }

    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        let axis = |n: usize, f: usize, s: usize, p: usize| {
            let padded = n + 2 * p;
            (padded >= f && s > 0).then(|| (padded - f) / s + 1)
        };
        Some(Shape::new(
            axis(input.width, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(input.height, self.kernel.1, self.stride.1, self.padding.1)?,
            self.out_channels,
        ))
    }
}

/// A width-two residual block: two simple chains leaving `head` and meeting
/// at an add layer. An empty branch is an identity skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub head: LayerId,
    /// Branch layers in forward order, excluding head and join.
    pub branch_a: Vec<LayerId>,
    pub branch_b: Vec<LayerId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Dense(Dense),
    Conv(Conv),
    Relu,
    /// Element-wise sum of the two predecessors closing a residual block.
    Add(ResidualBlock),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Dense(_) => "dense",
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Add(_) => "add",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub file_id: FileLayerId,
    pub kind: LayerKind,
    pub preds: Vec<LayerId>,
    pub shape: Shape,
}

/// Layer description before validation, with predecessors named by file id.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLayer {
    pub id: FileLayerId,
    pub kind: RawKind,
    pub preds: Vec<FileLayerId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawKind {
    Dense(Dense),
    Conv(Conv),
    Relu,
    Add,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    succs: Vec<Vec<LayerId>>,
}

impl Network {
    /// Validates a layer list (in any order) and sorts it topologically.
    /// File id 0 denotes the input layer and must not be declared.
    pub fn from_layers(input_shape: Shape, raw: Vec<RawLayer>) -> Result<Network> {
        if input_shape.is_empty() {
            return Err(Error::InvalidNetwork("input shape has a zero dimension".into()));
        }
        if raw.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        let mut by_id: BTreeMap<FileLayerId, RawLayer> = BTreeMap::new();
        for l in raw {
            if l.id == 0 {
                return Err(Error::Parse {
                    layer: Some(0),
                    message: "id 0 is reserved for the input layer".into(),
                });
            }
            let id = l.id;
            if by_id.insert(id, l).is_some() {
                return Err(Error::Parse {
                    layer: Some(id),
                    message: "duplicate layer id".into(),
                });
            }
        }
        for l in by_id.values() {
            let want = if matches!(l.kind, RawKind::Add) { 2 } else { 1 };
            if l.preds.len() != want {
                return Err(Error::Parse {
                    layer: Some(l.id),
                    message: format!("expected {want} predecessor(s), found {}", l.preds.len()),
                });
            }
            for p in &l.preds {
                if *p != 0 && !by_id.contains_key(p) {
                    return Err(Error::Parse {
                        layer: Some(l.id),
                        message: format!("unknown predecessor {p}"),
                    });
                }
            }
        }

        // Kahn's algorithm, smallest ready id first.
        let mut indegree: BTreeMap<FileLayerId, usize> =
            by_id.values().map(|l| (l.id, l.preds.len())).collect();
        let mut children: BTreeMap<FileLayerId, Vec<FileLayerId>> = BTreeMap::new();
        for l in by_id.values() {
            for p in &l.preds {
                children.entry(*p).or_default().push(l.id);
            }
        }
        let mut ready: BTreeSet<FileLayerId> = BTreeSet::new();
        let mut order: Vec<FileLayerId> = Vec::with_capacity(by_id.len());
        let release = |id: FileLayerId,
                       indegree: &mut BTreeMap<FileLayerId, usize>,
                       ready: &mut BTreeSet<FileLayerId>| {
            for c in children.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(*c);
                }
            }
        };
        release(0, &mut indegree, &mut ready);
        while let Some(id) = ready.pop_first() {
            order.push(id);
            release(id, &mut indegree, &mut ready);
        }
        if order.len() != by_id.len() {
            let stuck = indegree
                .iter()
                .filter(|(id, d)| **d > 0 && !order.contains(id))
                .map(|(id, _)| *id)
                .next()
                .unwrap_or(0);
            return Err(Error::Cycle { layer: stuck });
        }

        let mut pos: BTreeMap<FileLayerId, LayerId> = BTreeMap::new();
        pos.insert(0, 0);
        for (i, id) in order.iter().enumerate() {
            pos.insert(*id, i + 1);
        }

        let mut layers = vec![Layer {
            file_id: 0,
            kind: LayerKind::Input,
            preds: vec![],
            shape: input_shape,
        }];
        for id in &order {
            let raw = by_id.remove(id).unwrap();
            let preds: Vec<LayerId> = raw.preds.iter().map(|p| pos[p]).collect();
            let pshape = layers[preds[0]].shape;
            let (kind, shape) = match raw.kind {
                RawKind::Dense(d) => {
                    if d.bias.is_empty() {
                        return Err(Error::ShapeMismatch {
                            layer: raw.id,
                            other: None,
                            message: "dense layer has no outputs".into(),
                        });
                    }
                    if d.inputs != pshape.len() || d.weights.len() != d.inputs * d.outputs() {
                        return Err(Error::ShapeMismatch {
                            layer: raw.id,
                            other: Some(layers[preds[0]].file_id),
                            message: format!(
                                "dense weights are {}x{} but the predecessor has {} neurons",
                                d.outputs(),
                                d.inputs,
                                pshape.len()
                            ),
                        });
                    }
                    let n = d.outputs();
                    (LayerKind::Dense(d), Shape::flat(n))
                }
                RawKind::Conv(c) => {
                    let expect = c.kernel.0 * c.kernel.1 * c.in_channels * c.out_channels;
                    if c.filter.len() != expect
                        || c.bias.len() != c.out_channels
                        || c.out_channels == 0
                        || c.kernel.0 == 0
                        || c.kernel.1 == 0
                    {
                        return Err(Error::ShapeMismatch {
                            layer: raw.id,
                            other: None,
                            message: "malformed convolution filter or bias".into(),
                        });
                    }
                    if c.in_channels != pshape.channels {
                        return Err(Error::ShapeMismatch {
                            layer: raw.id,
                            other: Some(layers[preds[0]].file_id),
                            message: format!(
                                "filter expects {} input channels, predecessor has {}",
                                c.in_channels, pshape.channels
                            ),
                        });
                    }
                    let out = c.output_shape(pshape).ok_or_else(|| Error::ShapeMismatch {
                        layer: raw.id,
                        other: Some(layers[preds[0]].file_id),
                        message: format!(
                            "{}x{} filter with stride {:?} and padding {:?} does not fit input {pshape}",
                            c.kernel.0, c.kernel.1, c.stride, c.padding
                        ),
                    })?;
                    (LayerKind::Conv(c), out)
                }
                RawKind::Relu => (LayerKind::Relu, pshape),
                RawKind::Add => {
                    let (a, b) = (preds[0], preds[1]);
                    if layers[a].shape != layers[b].shape {
                        return Err(Error::ShapeMismatch {
                            layer: layers[a].file_id,
                            other: Some(layers[b].file_id),
                            message: format!(
                                "residual branches end in shapes {} and {} (join {})",
                                layers[a].shape, layers[b].shape, raw.id
                            ),
                        });
                    }
                    let block = ResidualBlock {
                        head: 0,
                        branch_a: vec![],
                        branch_b: vec![],
                    };
                    (LayerKind::Add(block), pshape)
                }
            };
            layers.push(Layer {
                file_id: raw.id,
                kind,
                preds,
                shape,
            });
        }

        let mut succs = vec![Vec::new(); layers.len()];
        for (i, l) in layers.iter().enumerate() {
            for p in &l.preds {
                succs[*p].push(i);
            }
        }
        let mut net = Network { layers, succs };
        net.resolve_blocks()?;
        net.check_fanout()?;
        Ok(net)
    }

    fn resolve_blocks(&mut self) -> Result<()> {
        for j in 0..self.layers.len() {
            if !matches!(self.layers[j].kind, LayerKind::Add(_)) {
                continue;
            }
            let (pa, pb) = (self.layers[j].preds[0], self.layers[j].preds[1]);
            let jid = self.layers[j].file_id;
            if pa == pb {
                return Err(Error::InvalidNetwork(format!(
                    "add layer {jid} has the same predecessor twice"
                )));
            }
            let chain_a = self.simple_chain(pa);
            let chain_b = self.simple_chain(pb);
            let head_pos_b = chain_b.iter().position(|n| chain_a.contains(n));
            let Some(hb) = head_pos_b else {
                return Err(Error::InvalidNetwork(format!(
                    "add layer {jid}: branches do not share a head within simple chains"
                )));
            };
            let head = chain_b[hb];
            let ha = chain_a.iter().position(|n| *n == head).unwrap();
            let mut branch_a: Vec<LayerId> = chain_a[..ha].to_vec();
            let mut branch_b: Vec<LayerId> = chain_b[..hb].to_vec();
            branch_a.reverse();
            branch_b.reverse();
            for &n in branch_a.iter().chain(&branch_b) {
                if self.succs[n].len() != 1 {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {} inside the residual block closed by {jid} has {} successors",
                        self.layers[n].file_id,
                        self.succs[n].len()
                    )));
                }
            }
            if self.succs[head].len() != 2 {
                return Err(Error::InvalidNetwork(format!(
                    "residual head {} must have exactly two successors",
                    self.layers[head].file_id
                )));
            }
            self.layers[j].kind = LayerKind::Add(ResidualBlock {
                head,
                branch_a,
                branch_b,
            });
        }
        Ok(())
    }

    /// `start` followed by its single-predecessor ancestors, stopping after
    /// the first add layer or the input.
    fn simple_chain(&self, start: LayerId) -> Vec<LayerId> {
        let mut chain = vec![start];
        let mut cur = start;
        while let [p] = self.layers[cur].preds[..] {
            chain.push(p);
            cur = p;
        }
        chain
    }

    fn check_fanout(&self) -> Result<()> {
        let heads: BTreeSet<LayerId> = self.blocks().map(|(_, b)| b.head).collect();
        let mut sinks = 0;
        for (i, s) in self.succs.iter().enumerate() {
            if s.is_empty() {
                sinks += 1;
                if i != self.layers.len() - 1 {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {} has no successors but is not the output",
                        self.layers[i].file_id
                    )));
                }
            }
            if s.len() > 1 && !(s.len() == 2 && heads.contains(&i)) {
                return Err(Error::InvalidNetwork(format!(
                    "layer {} feeds {} layers outside a residual block",
                    self.layers[i].file_id,
                    s.len()
                )));
            }
        }
        if sinks != 1 {
            return Err(Error::InvalidNetwork("network must have exactly one output".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &Layer {
        &self.layers[id]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn succs(&self, id: LayerId) -> &[LayerId] {
        &self.succs[id]
    }

    pub fn input_shape(&self) -> Shape {
        self.layers[0].shape
    }

    pub fn output(&self) -> LayerId {
        self.layers.len() - 1
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.output()].shape.len()
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape.len()).sum()
    }

    pub fn is_affine(&self, id: LayerId) -> bool {
        matches!(
            self.layers[id].kind,
            LayerKind::Dense(_) | LayerKind::Conv(_) | LayerKind::Add(_)
        )
    }

    pub fn feeds_relu(&self, id: LayerId) -> bool {
        self.succs[id]
            .iter()
            .any(|s| matches!(self.layers[*s].kind, LayerKind::Relu))
    }

    /// Affine layers that feed a ReLU, plus the output layer if affine, in
    /// topological order.
    pub fn query_layers(&self) -> Vec<LayerId> {
        (1..self.layers.len())
            .filter(|&i| self.is_affine(i) && (self.feeds_relu(i) || i == self.output()))
            .collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (LayerId, &ResidualBlock)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::Add(b) => Some((i, b)),
            _ => None,
        })
    }

    /// Layer ids in file order, for error messages and serialization.
    pub fn file_id(&self, id: LayerId) -> FileLayerId {
        self.layers[id].file_id
    }

    /// The layer list as unvalidated descriptions (inverse of `from_layers`).
    pub fn to_raw(&self) -> Vec<RawLayer> {
        self.layers[1..]
            .iter()
            .map(|l| RawLayer {
                id: l.file_id,
                kind: match &l.kind {
                    LayerKind::Dense(d) => RawKind::Dense(d.clone()),
                    LayerKind::Conv(c) => RawKind::Conv(c.clone()),
                    LayerKind::Relu => RawKind::Relu,
                    LayerKind::Add(_) => RawKind::Add,
                    LayerKind::Input => unreachable!("input is layer 0"),
                },
                preds: l.preds.iter().map(|p| self.layers[*p].file_id).collect(),
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod testnets {
    //! Small hand-built networks shared by unit tests.
    use super::*;
    use crate::decimal::parse_decimal;

    pub fn q(s: &str) -> Rational {
        parse_decimal(s).unwrap()
    }

    pub fn qs(v: &[&str]) -> Vec<Rational> {
        v.iter().map(|s| q(s)).collect()
    }

    pub fn dense(id: u64, pred: u64, w: &[&[&str]], b: &[&str]) -> RawLayer {
        RawLayer {
            id,
            kind: RawKind::Dense(Dense::new(w.iter().map(|r| qs(r)).collect(), qs(b))),
            preds: vec![pred],
        }
    }

    pub fn relu(id: u64, pred: u64) -> RawLayer {
        RawLayer {
            id,
            kind: RawKind::Relu,
            preds: vec![pred],
        }
    }

    pub fn add(id: u64, a: u64, b: u64) -> RawLayer {
        RawLayer {
            id,
            kind: RawKind::Add,
            preds: vec![a, b],
        }
    }

    /// Convolution with every filter weight produced by `w(f, g, c, d)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        id: u64,
        pred: u64,
        kernel: usize,
        stride: usize,
        padding: usize,
        cin: usize,
        cout: usize,
        w: impl Fn(usize, usize, usize, usize) -> Rational,
    ) -> RawLayer {
        let mut filter = Vec::new();
        for f in 0..kernel {
            for g in 0..kernel {
                for c in 0..cin {
                    for d in 0..cout {
                        filter.push(w(f, g, c, d));
                    }
                }
            }
        }
        RawLayer {
            id,
            kind: RawKind::Conv(Conv {
                kernel: (kernel, kernel),
                stride: (stride, stride),
                padding: (padding, padding),
                in_channels: cin,
                out_channels: cout,
                filter,
                bias: vec![Rational::from_integer(0.into()); cout],
            }),
            preds: vec![pred],
        }
    }

    /// Two inputs, output `x0 - x1` and `x1 - x0`.
    pub fn identity_margin_net() -> Network {
        Network::from_layers(
            Shape::flat(2),
            vec![dense(1, 0, &[&["1", "0"], &["0", "1"]], &["0", "0"])],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testnets::*;
    use super::*;

    fn one(_: usize, _: usize, _: usize, _: usize) -> Rational {
        q("1")
    }

    #[test]
    fn shape_indexing_round_trips() {
        let s = Shape::new(3, 4, 5);
        for i in 0..s.len() {
            let (w, h, d) = s.coords(i);
            assert_eq!(s.index(w, h, d), i);
        }
    }

    #[test]
    fn conv_output_shape_of_valid_3x3() {
        let net = Network::from_layers(
            Shape::new(5, 5, 2),
            vec![conv(1, 0, 3, 1, 0, 2, 2, one)],
        )
        .unwrap();
        assert_eq!(net.layer(1).shape, Shape::new(3, 3, 2));
    }

    #[test]
    fn topological_sort_handles_arbitrary_ids() {
        let net = Network::from_layers(
            Shape::flat(2),
            vec![
                dense(3, 7, &[&["1", "1"]], &["0"]),
                relu(7, 9),
                dense(9, 0, &[&["1", "0"], &["0", "1"]], &["0", "0"]),
            ],
        )
        .unwrap();
        let ids: Vec<u64> = net.layers().iter().map(|l| l.file_id).collect();
        assert_eq!(ids, vec![0, 9, 7, 3]);
        assert_eq!(net.query_layers(), vec![1, 3]);
    }

    #[test]
    fn cycle_is_reported() {
        let err = Network::from_layers(
            Shape::flat(1),
            vec![relu(1, 2), relu(2, 1), dense(3, 0, &[&["1"]], &["0"])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Cycle { .. }), "{err}");
    }

    #[test]
    fn residual_shape_mismatch_names_both_layers() {
        let err = Network::from_layers(
            Shape::new(4, 4, 1),
            vec![
                conv(1, 0, 3, 1, 1, 1, 1, one),
                conv(2, 0, 3, 1, 0, 1, 1, one),
                add(3, 1, 2),
            ],
        )
        .unwrap_err();
        match err {
            Error::ShapeMismatch { layer, other, .. } => {
                assert_eq!((layer, other), (1, Some(2)));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn residual_blocks_are_resolved() {
        let net = Network::from_layers(
            Shape::new(4, 4, 1),
            vec![
                conv(1, 0, 3, 1, 1, 1, 2, one),
                relu(2, 1),
                conv(3, 2, 3, 1, 1, 2, 2, one),
                relu(4, 3),
                conv(5, 4, 1, 1, 0, 2, 2, one),
                add(6, 5, 2),
                relu(7, 6),
            ],
        )
        .unwrap();
        let (j, b) = net.blocks().next().unwrap();
        assert_eq!(j, 6);
        assert_eq!(b.head, 2);
        assert_eq!(b.branch_a, vec![3, 4, 5]);
        assert!(b.branch_b.is_empty());
        assert_eq!(net.query_layers(), vec![1, 3, 6]);
    }

    #[test]
    fn rejects_bad_fanout_and_preds() {
        let err = Network::from_layers(
            Shape::flat(1),
            vec![dense(1, 0, &[&["1"]], &["0"]), dense(2, 0, &[&["1"]], &["0"])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork(_)), "{err}");
        let err = Network::from_layers(Shape::flat(1), vec![dense(1, 4, &[&["1"]], &["0"])])
            .unwrap_err();
        assert!(matches!(err, Error::Parse { layer: Some(1), .. }), "{err}");
        let err = Network::from_layers(Shape::flat(2), vec![dense(1, 0, &[&["1"]], &["0"])])
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: 1, .. }), "{err}");
    }
}
