//! Backsubstitution steps: matrix initialisation and one step through a
//! dense, convolutional, ReLU or residual-add layer.

use rayon::prelude::*;

use super::matrix::{for_each_cell, BoundMatrix, Polarity, Row};
use super::Relaxation;
use crate::error::{Error, Result};
use crate::interval::{iv_mul_scalar, iv_mul_weight, Endpoint, Interval};
use crate::network::{LayerId, LayerKind, LoweredLayer, LoweredNet, Network};

/// How convolutions are backsubstituted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvStrategy {
    /// Sparse per-row transpose convolution over dependence-set windows.
    #[default]
    Gbc,
    /// Multiply by the fully materialized (mostly zero) weight matrix.
    DenseMaterialized,
}

/// Read-only state shared by all rows of a pass.
pub struct StepContext<'a, T> {
    pub net: &'a Network,
    pub lowered: &'a LoweredNet<T>,
    /// Current bounds of every layer.
    pub bounds: &'a [Vec<Interval<T>>],
    /// ReLU relaxations, indexed by ReLU layer.
    pub relax: &'a [Option<Vec<Relaxation<T>>>],
    /// Effective biases, indexed by affine layer.
    pub biases: &'a [Option<Vec<Interval<T>>>],
    pub strategy: ConvStrategy,
    /// Dense weight matrices of convolutions, for the materialized strategy.
    pub materialized: Option<&'a [Option<Vec<Interval<T>>>]>,
}

impl<'a, T: Endpoint> StepContext<'a, T> {
    fn bias(&self, k: LayerId) -> Result<&'a [Interval<T>]> {
        self.biases[k].as_deref().ok_or_else(|| {
            Error::Config(format!("no effective bias for layer {}", self.net.file_id(k)))
        })
    }
}

/// Dense weight matrix (`N_k × N_{k-1}`, row-major) of a convolution.
pub fn materialize_conv<T: Endpoint>(net: &Network, lowered: &LoweredNet<T>, k: LayerId) -> Vec<Interval<T>> {
    let layer = net.layer(k);
    let (LayerKind::Conv(c), LoweredLayer::Conv { weights, .. }) = (&layer.kind, &lowered.layers[k]) else {
        panic!("layer {k} is not a convolution");
    };
    let ishape = net.layer(layer.preds[0]).shape;
    let oshape = layer.shape;
    let nin = ishape.len();
    let mut out = vec![Interval::zero(); oshape.len() * nin];
    for ow in 0..oshape.width {
        for oh in 0..oshape.height {
            for d in 0..c.out_channels {
                let o = oshape.index(ow, oh, d);
                for f in 0..c.kernel.0 {
                    for g in 0..c.kernel.1 {
                        let iw = (ow * c.stride.0 + f) as i64 - c.padding.0 as i64;
                        let ih = (oh * c.stride.1 + g) as i64 - c.padding.1 as i64;
                        if !ishape.contains(iw, ih) {
                            continue;
                        }
                        for ci in 0..c.in_channels {
                            let i = ishape.index(iw as usize, ih as usize, ci);
                            out[o * nin + i] =
                                weights[((d * c.kernel.0 + f) * c.kernel.1 + g) * c.in_channels + ci].clone();
                        }
                    }
                }
            }
        }
    }
    out
}

/// Builds the matrix of the affine expressions of `neurons` of layer `q`.
///
/// Dense and convolutional layers start over their predecessor with their
/// weights and effective bias (convolutions over the filter window). An add
/// layer starts as the identity over itself.
pub fn init_bound_matrix<T: Endpoint>(
    ctx: &StepContext<'_, T>,
    q: LayerId,
    polarity: Polarity,
    neurons: &[usize],
    slots: &[usize],
) -> Result<BoundMatrix<T>> {
    let net = ctx.net;
    let layer = net.layer(q);
    let qshape = layer.shape;
    let mut m = match (&layer.kind, &ctx.lowered.layers[q]) {
        (LayerKind::Dense(_), LoweredLayer::Dense { inputs, weights, .. }) => {
            let bias = ctx.bias(q)?;
            let p = layer.preds[0];
            let pshape = net.layer(p).shape;
            let rows = neurons
                .iter()
                .map(|&i| Row {
                    coeffs: weights[i * inputs..(i + 1) * inputs].to_vec(),
                    constant: bias[i].clone(),
                    origin: (0, 0),
                })
                .collect();
            BoundMatrix {
                query_layer: q,
                current_layer: p,
                polarity,
                width: (pshape.width, pshape.height),
                rows,
                row_index: slots.to_vec(),
            }
        }
        (LayerKind::Conv(c), LoweredLayer::Conv { weights, .. }) => {
            let bias = ctx.bias(q)?;
            let p = layer.preds[0];
            let pshape = net.layer(p).shape;
            let width = c.kernel;
            let rows = neurons
                .iter()
                .map(|&i| {
                    let (w, h, d) = qshape.coords(i);
                    let origin = (
                        (w * c.stride.0) as i64 - c.padding.0 as i64,
                        (h * c.stride.1) as i64 - c.padding.1 as i64,
                    );
                    let mut coeffs = vec![Interval::zero(); width.0 * width.1 * c.in_channels];
                    for_each_cell(origin, width, pshape, |cell, _| {
                        // cell = (f·fh + g)·C_in + c_in
                        let fgc = cell;
                        coeffs[cell] = weights[d * width.0 * width.1 * c.in_channels + fgc].clone();
                    });
                    Row {
                        coeffs,
                        constant: bias[i].clone(),
                        origin,
                    }
                })
                .collect();
            let mut m = BoundMatrix {
                query_layer: q,
                current_layer: p,
                polarity,
                width,
                rows,
                row_index: slots.to_vec(),
            };
            m.normalize(pshape);
            m
        }
        (LayerKind::Add(_), _) => {
            let rows = neurons
                .iter()
                .map(|&i| {
                    let (w, h, d) = qshape.coords(i);
                    let mut coeffs = vec![Interval::zero(); qshape.channels];
                    coeffs[d] = Interval::point(T::one());
                    Row {
                        coeffs,
                        constant: Interval::zero(),
                        origin: (w as i64, h as i64),
                    }
                })
                .collect();
            let mut m = BoundMatrix {
                query_layer: q,
                current_layer: q,
                polarity,
                width: (1, 1),
                rows,
                row_index: slots.to_vec(),
            };
            m.normalize(qshape);
            m
        }
        _ => {
            return Err(Error::Config(format!(
                "backsubstitution must start at an affine layer, layer {} is {}",
                net.file_id(q),
                layer.kind.name()
            )))
        }
    };
    m.query_layer = q;
    Ok(m)
}

/// Row-wise product with a dense `N_k × N_{k-1}` weight matrix. A plain
/// dense kernel: every entry is multiplied, zero or not, so the work done is
/// exactly the `N_k·N_{k-1}` multiply-adds per row that are reported.
fn dense_product<T: Endpoint>(
    m: &mut BoundMatrix<T>,
    weights: &[Interval<T>],
    bias: &[Interval<T>],
    nin: usize,
) -> u64 {
    m.rows
        .par_iter_mut()
        .map(|row| {
            let mut out = vec![Interval::zero(); nin];
            let nout = row.coeffs.len();
            for (j, c) in row.coeffs.iter().enumerate() {
                row.constant.add_assign(&iv_mul_weight(c, &bias[j]));
                let wrow = &weights[j * nin..(j + 1) * nin];
                for (o, w) in out.iter_mut().zip(wrow) {
                    o.add_assign(&iv_mul_weight(c, w));
                }
            }
            row.coeffs = out;
            (nout * nin) as u64
        })
        .sum()
}

/// Step through dense layer `k`: `M^{k-1} = M^k · W^k`, bias into the constant.
pub fn backsub_dense_step<T: Endpoint>(ctx: &StepContext<'_, T>, m: &mut BoundMatrix<T>) -> Result<u64> {
    let k = m.current_layer;
    let layer = ctx.net.layer(k);
    let LoweredLayer::Dense { inputs, weights, .. } = &ctx.lowered.layers[k] else {
        return Err(Error::Config(format!("layer {} is not dense", ctx.net.file_id(k))));
    };
    m.to_full(layer.shape);
    let ops = dense_product(m, weights, ctx.bias(k)?, *inputs);
    let p = layer.preds[0];
    let ps = ctx.net.layer(p).shape;
    m.current_layer = p;
    m.width = (ps.width, ps.height);
    Ok(ops)
}

/// Step through convolution `k` via its materialized dense matrix.
pub fn backsub_conv_dense_step<T: Endpoint>(
    ctx: &StepContext<'_, T>,
    m: &mut BoundMatrix<T>,
    weights: &[Interval<T>],
) -> Result<u64> {
    let k = m.current_layer;
    let layer = ctx.net.layer(k);
    let p = layer.preds[0];
    let ps = ctx.net.layer(p).shape;
    m.to_full(layer.shape);
    let ops = dense_product(m, weights, ctx.bias(k)?, ps.len());
    m.current_layer = p;
    m.width = (ps.width, ps.height);
    Ok(ops)
}

/// Sparse step through convolution `k`.
///
/// For each row with window origin `o` and width `W` in layer `k`, the output
/// window in layer `k-1` has origin `o·s - p` and width `(W-1)·s + f`; the
/// coefficient of input cell `(w·s + f, h·s + g, c)` accumulates
/// `M[w][h][d] · F[f][g][c][d]`. Cells that fall on the zero padding are
/// skipped. Per row the loop order is `(w, h)`, then `d`, then `(f, g)`, then
/// `c`, so results do not depend on scheduling.
pub fn gbc_step<T: Endpoint>(ctx: &StepContext<'_, T>, m: &mut BoundMatrix<T>) -> Result<u64> {
    let k = m.current_layer;
    let net = ctx.net;
    let layer = net.layer(k);
    let (LayerKind::Conv(c), LoweredLayer::Conv { weights, .. }) = (&layer.kind, &ctx.lowered.layers[k]) else {
        return Err(Error::Config(format!("layer {} is not a convolution", net.file_id(k))));
    };
    let bias = ctx.bias(k)?;
    let kshape = layer.shape;
    let p = layer.preds[0];
    let pshape = net.layer(p).shape;
    let (fw, fh) = c.kernel;
    let (sw, sh) = c.stride;
    let cin = c.in_channels;
    let cout = c.out_channels;
    let win = m.width;
    let wout = ((win.0 - 1) * sw + fw, (win.1 - 1) * sh + fh);

    let ops = m
        .rows
        .par_iter_mut()
        .map(|row| {
            let o_in = row.origin;
            let o_out = (
                o_in.0 * sw as i64 - c.padding.0 as i64,
                o_in.1 * sh as i64 - c.padding.1 as i64,
            );
            let mut out = vec![Interval::zero(); wout.0 * wout.1 * cin];
            let mut ops = 0u64;
            for dw in 0..win.0 {
                let aw = o_in.0 + dw as i64;
                if aw < 0 || aw >= kshape.width as i64 {
                    continue;
                }
                for dh in 0..win.1 {
                    let ah = o_in.1 + dh as i64;
                    if ah < 0 || ah >= kshape.height as i64 {
                        continue;
                    }
                    let cell = (dw * win.1 + dh) * cout;
                    let nbase = kshape.index(aw as usize, ah as usize, 0);
                    for d in 0..cout {
                        let mc = &row.coeffs[cell + d];
                        let mut visited = 0u64;
                        let live = !mc.is_zero();
                        if live {
                            row.constant.add_mul(mc, &bias[nbase + d]);
                        }
                        for f in 0..fw {
                            let a = dw * sw + f;
                            let xw = o_out.0 + a as i64;
                            if xw < 0 || xw >= pshape.width as i64 {
                                continue;
                            }
                            for g in 0..fh {
                                let b = dh * sh + g;
                                let xh = o_out.1 + b as i64;
                                if xh < 0 || xh >= pshape.height as i64 {
                                    continue;
                                }
                                visited += cin as u64;
                                if !live {
                                    continue;
                                }
                                let obase = (a * wout.1 + b) * cin;
                                let wbase = ((d * fw + f) * fh + g) * cin;
                                for ci in 0..cin {
                                    out[obase + ci].add_mul(mc, &weights[wbase + ci]);
                                }
                            }
                        }
                        ops += visited;
                    }
                }
            }
            row.coeffs = out;
            row.origin = o_out;
            ops
        })
        .sum();
    m.width = wout;
    m.current_layer = p;
    m.normalize(pshape);
    Ok(ops)
}

/// Step through ReLU layer `k` using its relaxation.
///
/// Because a ReLU output is non-negative, an interval coefficient `[c]` on it
/// can be replaced by its upper endpoint for an upper bound (lower endpoint
/// for a lower bound). The point coefficient then picks the upper relaxation
/// `γx + δ` when it pushes the bound up and the lower relaxation `αx + β`
/// otherwise.
pub fn backsub_relu_step<T: Endpoint>(ctx: &StepContext<'_, T>, m: &mut BoundMatrix<T>) -> Result<()> {
    let k = m.current_layer;
    let layer = ctx.net.layer(k);
    let relax = ctx.relax[k].as_deref().ok_or_else(|| {
        Error::Config(format!("no relaxation for ReLU layer {}", ctx.net.file_id(k)))
    })?;
    let shape = layer.shape;
    let width = m.width;
    let upper = m.polarity == Polarity::Upper;
    m.rows.par_iter_mut().for_each(|row| {
        let Row { coeffs, constant, origin } = row;
        for_each_cell(*origin, width, shape, |cell, n| {
            let c = &coeffs[cell];
            if c.is_zero() {
                return;
            }
            let z = T::zero();
            let point = if upper { c.hi.clone() } else { c.lo.clone() };
            let r = &relax[n];
            let use_upper_relax = (point >= z) == upper;
            let (slope, offset) = if use_upper_relax {
                (&r.gamma, &r.delta)
            } else {
                (&r.alpha, &r.beta)
            };
            let newc = iv_mul_scalar(slope, &point);
            constant.add_assign(&iv_mul_scalar(offset, &point));
            coeffs[cell] = newc;
        });
    });
    m.current_layer = layer.preds[0];
    Ok(())
}

/// One step through `m.current_layer` (not an add layer).
pub fn step_through<T: Endpoint>(ctx: &StepContext<'_, T>, m: &mut BoundMatrix<T>) -> Result<u64> {
    let k = m.current_layer;
    match &ctx.net.layer(k).kind {
        LayerKind::Dense(_) => backsub_dense_step(ctx, m),
        LayerKind::Conv(_) => match (ctx.strategy, ctx.materialized) {
            (ConvStrategy::DenseMaterialized, Some(mats)) => {
                let w = mats[k].as_deref().ok_or_else(|| {
                    Error::Config(format!("no materialized matrix for layer {}", ctx.net.file_id(k)))
                })?;
                backsub_conv_dense_step(ctx, m, w)
            }
            _ => gbc_step(ctx, m),
        },
        LayerKind::Relu => backsub_relu_step(ctx, m).map(|_| 0),
        LayerKind::Add(_) => backsub_residual(ctx, m),
        LayerKind::Input => Err(Error::Config("cannot step through the input layer".into())),
    }
}

/// Step through a residual block from its add layer to its head.
///
/// The matrix is copied into both branches (the constant and the add layer's
/// rounding term stay with the first copy), each copy is carried through its
/// branch, and the two results are summed cell by cell at the head over the
/// union of their windows.
pub fn backsub_residual<T: Endpoint>(ctx: &StepContext<'_, T>, m: &mut BoundMatrix<T>) -> Result<u64> {
    let j = m.current_layer;
    let net = ctx.net;
    let layer = net.layer(j);
    let LayerKind::Add(block) = &layer.kind else {
        return Err(Error::Config(format!("layer {} is not an add layer", net.file_id(j))));
    };
    let jshape = layer.shape;
    if T::MODE == crate::interval::SoundnessMode::WidenedFloat64 {
        let bias = ctx.bias(j)?;
        let width = m.width;
        m.rows.par_iter_mut().for_each(|row| {
            let Row { coeffs, constant, origin } = row;
            for_each_cell(*origin, width, jshape, |cell, n| {
                constant.add_mul(&coeffs[cell], &bias[n]);
            });
        });
    }

    let mut a = m.clone();
    let mut b = m.clone();
    a.current_layer = layer.preds[0];
    b.current_layer = layer.preds[1];
    for row in &mut b.rows {
        row.constant = Interval::zero();
    }
    let mut ops = 0;
    for (branch, mat) in [(&block.branch_a, &mut a), (&block.branch_b, &mut b)] {
        for &k in branch.iter().rev() {
            debug_assert_eq!(mat.current_layer, k);
            ops += step_through(ctx, mat)?;
        }
        if mat.current_layer != block.head {
            return Err(Error::InvalidNetwork(format!(
                "residual branch of layer {} did not end at the head",
                net.file_id(j)
            )));
        }
    }

    let hshape = net.layer(block.head).shape;
    if a.is_full(hshape) || b.is_full(hshape) {
        a.to_full(hshape);
        b.to_full(hshape);
    }
    let (wa, wb) = (a.width, b.width);
    let width = (
        a.rows
            .iter()
            .zip(&b.rows)
            .map(|(ra, rb)| union_extent(ra.origin.0, wa.0, rb.origin.0, wb.0).1)
            .max()
            .unwrap_or(wa.0),
        a.rows
            .iter()
            .zip(&b.rows)
            .map(|(ra, rb)| union_extent(ra.origin.1, wa.1, rb.origin.1, wb.1).1)
            .max()
            .unwrap_or(wa.1),
    );
    let ch = hshape.channels;
    let rows: Vec<Row<T>> = a
        .rows
        .into_par_iter()
        .zip(b.rows.into_par_iter())
        .map(|(ra, rb)| {
            let origin = (ra.origin.0.min(rb.origin.0), ra.origin.1.min(rb.origin.1));
            let mut coeffs = vec![Interval::zero(); width.0 * width.1 * ch];
            for (src, sw) in [(&ra, wa), (&rb, wb)] {
                let off = ((src.origin.0 - origin.0) as usize, (src.origin.1 - origin.1) as usize);
                for dw in 0..sw.0 {
                    for dh in 0..sw.1 {
                        let from = (dw * sw.1 + dh) * ch;
                        let to = ((dw + off.0) * width.1 + dh + off.1) * ch;
                        for d in 0..ch {
                            let v = &src.coeffs[from + d];
                            if !v.is_zero() {
                                coeffs[to + d].add_assign(v);
                            }
                        }
                    }
                }
            }
            let mut constant = ra.constant;
            constant.add_assign(&rb.constant);
            Row {
                coeffs,
                constant,
                origin,
            }
        })
        .collect();
    m.rows = rows;
    m.width = width;
    m.current_layer = block.head;
    m.normalize(hshape);
    Ok(ops)
}

fn union_extent(oa: i64, wa: usize, ob: i64, wb: usize) -> (i64, usize) {
    let lo = oa.min(ob);
    let hi = (oa + wa as i64).max(ob + wb as i64);
    (lo, (hi - lo) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::generate_from_str;
    use crate::interval::Rational;
    use crate::network::eval::{effective_bias, forward_interval_lowered};
    use crate::network::{InputBox, Shape};

    struct Fixture {
        net: Network,
        lowered: LoweredNet<Rational>,
        bounds: Vec<Vec<Interval<Rational>>>,
        biases: Vec<Option<Vec<Interval<Rational>>>>,
        relax: Vec<Option<Vec<Relaxation<Rational>>>>,
        materialized: Vec<Option<Vec<Interval<Rational>>>>,
    }

    fn fixture(seed: u64, shape: Shape, arch: &str) -> Fixture {
        let net = generate_from_str(seed, shape, arch).unwrap();
        let lowered = LoweredNet::<Rational>::new(&net);
        let x = vec![Rational::new(1.into(), 2.into()); shape.len()];
        let region = InputBox::new(x, Rational::new(1.into(), 8.into())).unwrap();
        let bounds = forward_interval_lowered(&net, &lowered, &region).unwrap();
        let biases = (0..net.len())
            .map(|k| net.is_affine(k).then(|| effective_bias(&net, &lowered, k, &bounds)))
            .collect();
        let materialized = (0..net.len())
            .map(|k| matches!(net.layer(k).kind, LayerKind::Conv(_)).then(|| materialize_conv(&net, &lowered, k)))
            .collect();
        Fixture {
            relax: vec![None; net.len()],
            net,
            lowered,
            bounds,
            biases,
            materialized,
        }
    }

    impl Fixture {
        fn ctx(&self, strategy: ConvStrategy) -> StepContext<'_, Rational> {
            StepContext {
                net: &self.net,
                lowered: &self.lowered,
                bounds: &self.bounds,
                relax: &self.relax,
                biases: &self.biases,
                strategy,
                materialized: Some(&self.materialized),
            }
        }
    }

    /// Steps a fresh matrix for query layer `q` through conv layer `k` both
    /// ways and compares the resulting expressions.
    fn compare_conv_step(f: &Fixture, q: LayerId) -> (u64, u64) {
        let n = f.net.layer(q).shape.len();
        let all: Vec<usize> = (0..n).collect();
        let mut total = (0, 0);
        for polarity in [Polarity::Lower, Polarity::Upper] {
            let ctx = f.ctx(ConvStrategy::Gbc);
            let mut sparse = init_bound_matrix(&ctx, q, polarity, &all, &all).unwrap();
            let mut dense = sparse.clone();
            let k = sparse.current_layer;
            let w = f.materialized[k].as_ref().unwrap();
            total.0 += gbc_step(&ctx, &mut sparse).unwrap();
            total.1 += backsub_conv_dense_step(&ctx, &mut dense, w).unwrap();
            assert_eq!(sparse.current_layer, dense.current_layer);
            let pshape = f.net.layer(sparse.current_layer).shape;
            for r in 0..n {
                assert_eq!(sparse.dense_row(r, pshape), dense.dense_row(r, pshape), "row {r}");
                assert_eq!(sparse.rows[r].constant, dense.rows[r].constant);
            }
        }
        total
    }

    #[test]
    fn gbc_matches_materialized_on_windowed_rows() {
        // second conv rows are windows over the first conv, with padding
        let f = fixture(3, Shape::new(7, 7, 2), "conv 3x3x3 s2 p1; conv 2x2x2 s1 p1");
        let (gbc, dense) = compare_conv_step(&f, 2);
        assert!(gbc * 2 < dense, "{gbc} vs {dense}");
    }

    #[test]
    fn gbc_matches_materialized_on_full_rows() {
        let f = fixture(4, Shape::new(6, 5, 2), "conv 2x3x2 s1 p0; dense 3");
        compare_conv_step(&f, 2);
    }

    #[test]
    fn dense_step_reaches_input_exactly() {
        // one dense step of a dense-over-dense expression equals the product
        // of the two weight matrices
        let f = fixture(5, Shape::flat(3), "dense 4; dense 2");
        let ctx = f.ctx(ConvStrategy::Gbc);
        let mut m = init_bound_matrix(&ctx, 2, Polarity::Upper, &[0, 1], &[0, 1]).unwrap();
        backsub_dense_step(&ctx, &mut m).unwrap();
        assert_eq!(m.current_layer, 0);
        let (LayerKind::Dense(a), LayerKind::Dense(b)) = (&f.net.layer(1).kind, &f.net.layer(2).kind) else {
            unreachable!()
        };
        for r in 0..2 {
            for i in 0..3 {
                let want: Rational = (0..4).map(|j| b.weight(r, j) * a.weight(j, i)).sum();
                assert_eq!(m.rows[r].coeffs[i], Interval::point(want));
            }
            let c: Rational = (0..4).map(|j| b.weight(r, j) * &a.bias[j]).sum::<Rational>() + &b.bias[r];
            assert_eq!(m.rows[r].constant, Interval::point(c));
        }
    }
}
