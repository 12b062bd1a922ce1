//! One backsubstitution pass: walk a matrix from its query layer to the
//! input, concretizing after every affine step and dropping finished rows.

use super::matrix::{compact_rows, concretize, BoundMatrix, CandidateBound, Polarity, Row};
use super::steps::{init_bound_matrix, step_through, StepContext};
use crate::error::{Error, Result};
use crate::interval::{Endpoint, Interval};
use crate::network::{LayerId, LayerKind};

pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BacksubOptions {
    /// Drop rows whose neuron is already known to be stable.
    pub early_term: bool,
    /// Compact after every `cadence`-th concretization (at least 1).
    pub cadence: usize,
    /// Rows per chunk; derived from `memory_budget` when unset.
    pub chunk_rows: Option<usize>,
    /// Bytes available for one chunk's coefficient buffers.
    pub memory_budget: usize,
}

impl Default for BacksubOptions {
    fn default() -> Self {
        BacksubOptions {
            early_term: true,
            cadence: 1,
            chunk_rows: None,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PassStats {
    /// Rows entered into backsubstitution.
    pub rows: usize,
    /// Rows removed by compaction before reaching the input.
    pub rows_terminated_early: usize,
    pub concretizations: usize,
    /// Multiply-add operations scheduled by dense and convolution steps.
    pub mul_adds: u64,
}

impl PassStats {
    pub fn absorb(&mut self, other: &PassStats) {
        self.rows += other.rows;
        self.rows_terminated_early += other.rows_terminated_early;
        self.concretizations += other.concretizations;
        self.mul_adds += other.mul_adds;
    }
}

/// Rows per chunk for a pass ending at `q`.
pub fn chunk_size<T: Endpoint>(ctx: &StepContext<'_, T>, q: LayerId, options: &BacksubOptions) -> usize {
    if let Some(n) = options.chunk_rows {
        return n.max(1);
    }
    let widest = (0..=q).map(|k| ctx.net.layer(k).shape.len()).max().unwrap_or(1);
    let footprint = widest * 2 * std::mem::size_of::<Interval<T>>();
    (options.memory_budget / footprint.max(1)).max(1)
}

/// Tightens the bounds of every neuron of affine layer `q` in direction
/// `polarity`. `cand` must hold one slot per neuron of `q`, seeded with the
/// current bounds.
pub fn run_backsubstitution<T: Endpoint>(
    ctx: &StepContext<'_, T>,
    q: LayerId,
    polarity: Polarity,
    cand: &mut CandidateBound<T>,
    options: &BacksubOptions,
) -> Result<PassStats> {
    let n = ctx.net.layer(q).shape.len();
    if cand.len() != n || cand.polarity != polarity {
        return Err(Error::Config("candidate bound does not match the query layer".into()));
    }
    let concretize_first = !matches!(ctx.net.layer(q).kind, LayerKind::Add(_));
    let chunk = chunk_size(ctx, q, options);
    let mut stats = PassStats::default();
    let slots: Vec<usize> = (0..n).collect();
    for part in slots.chunks(chunk) {
        let m = init_bound_matrix(ctx, q, polarity, part, part)?;
        walk(ctx, m, concretize_first, cand, options, &mut stats)?;
    }
    Ok(stats)
}

/// Lower bounds of `o_label - o_j` for every class `j` (the label's own slot
/// stays `None`), by backsubstituting the margin expressions from the output
/// layer.
pub fn run_margin_pass<T: Endpoint>(
    ctx: &StepContext<'_, T>,
    label: usize,
    options: &BacksubOptions,
) -> Result<(Vec<Option<T>>, PassStats)> {
    let out = ctx.net.output();
    let shape = ctx.net.layer(out).shape;
    let classes = shape.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut cand = CandidateBound::unbounded(Polarity::Lower, classes);
    let others: Vec<usize> = (0..classes).filter(|j| *j != label).collect();
    let chunk = chunk_size(ctx, out, options);
    let mut stats = PassStats::default();
    for part in others.chunks(chunk) {
        let rows = part
            .iter()
            .map(|&j| {
                let mut coeffs = vec![Interval::zero(); classes];
                coeffs[label] = Interval::point(T::one());
                coeffs[j] = Interval::point(T::one().neg());
                Row {
                    coeffs,
                    constant: Interval::zero(),
                    origin: (0, 0),
                }
            })
            .collect();
        let m = BoundMatrix {
            query_layer: out,
            current_layer: out,
            polarity: Polarity::Lower,
            width: (shape.width, shape.height),
            rows,
            row_index: part.to_vec(),
        };
        walk(ctx, m, true, &mut cand, options, &mut stats)?;
    }
    Ok((cand.best, stats))
}

fn walk<T: Endpoint>(
    ctx: &StepContext<'_, T>,
    mut m: BoundMatrix<T>,
    concretize_first: bool,
    cand: &mut CandidateBound<T>,
    options: &BacksubOptions,
    stats: &mut PassStats,
) -> Result<()> {
    stats.rows += m.len();
    let cadence = options.cadence.max(1);
    let mut since_compaction = 0usize;

    let compact = |m: &mut BoundMatrix<T>, cand: &CandidateBound<T>, stats: &mut PassStats| {
        let flags: Vec<bool> = m.row_index.iter().map(|s| cand.frozen[*s]).collect();
        let dropped = flags.iter().filter(|f| **f).count();
        if dropped > 0 {
            compact_rows(m, &flags);
            stats.rows_terminated_early += dropped;
        }
    };

    if options.early_term {
        compact(&mut m, cand, stats);
    }
    let mut after_concretize = |m: &mut BoundMatrix<T>, cand: &CandidateBound<T>, stats: &mut PassStats| {
        stats.concretizations += 1;
        since_compaction += 1;
        if options.early_term && since_compaction >= cadence && m.current_layer != 0 {
            since_compaction = 0;
            compact(m, cand, stats);
        }
    };

    if concretize_first {
        let k = m.current_layer;
        concretize(&m, ctx.net.layer(k).shape, &ctx.bounds[k], cand);
        after_concretize(&mut m, cand, stats);
    }
    while m.current_layer != 0 && !m.is_empty() {
        let through_relu = matches!(ctx.net.layer(m.current_layer).kind, LayerKind::Relu);
        stats.mul_adds += step_through(ctx, &mut m)?;
        let k = m.current_layer;
        if !through_relu || k == 0 {
            concretize(&m, ctx.net.layer(k).shape, &ctx.bounds[k], cand);
            after_concretize(&mut m, cand, stats);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backsub::steps::ConvStrategy;
    use crate::gen::generate_from_str;
    use crate::interval::Rational;
    use crate::network::eval::{effective_bias, forward_interval_lowered};
    use crate::network::{InputBox, LoweredNet, Shape};

    #[test]
    fn single_affine_layer_gives_interval_bounds() {
        // over the input box, interval arithmetic is exact for one affine
        // layer, so backsubstitution cannot improve on it
        for (shape, arch) in [(Shape::flat(4), "dense 5"), (Shape::new(4, 4, 2), "conv 3x3x2 s1 p1")] {
            let net = generate_from_str(9, shape, arch).unwrap();
            let lowered = LoweredNet::<Rational>::new(&net);
            let x = vec![Rational::new(1.into(), 3.into()); shape.len()];
            let region = InputBox::new(x, Rational::new(1.into(), 10.into())).unwrap();
            let bounds = forward_interval_lowered(&net, &lowered, &region).unwrap();
            let biases = vec![None, Some(effective_bias(&net, &lowered, 1, &bounds))];
            let relax = vec![None, None];
            let ctx = StepContext {
                net: &net,
                lowered: &lowered,
                bounds: &bounds,
                relax: &relax,
                biases: &biases,
                strategy: ConvStrategy::Gbc,
                materialized: None,
            };
            for polarity in [Polarity::Lower, Polarity::Upper] {
                let mut cand = CandidateBound::unbounded(polarity, bounds[1].len());
                let opts = BacksubOptions {
                    chunk_rows: Some(3),
                    ..Default::default()
                };
                let stats = run_backsubstitution(&ctx, 1, polarity, &mut cand, &opts).unwrap();
                assert_eq!(stats.rows, bounds[1].len());
                for (b, iv) in cand.best.iter().zip(&bounds[1]) {
                    let want = match polarity {
                        Polarity::Lower => &iv.lo,
                        Polarity::Upper => &iv.hi,
                    };
                    assert_eq!(b.as_ref(), Some(want));
                }
            }
        }
    }

    #[test]
    fn mismatched_candidate_is_rejected() {
        let net = generate_from_str(1, Shape::flat(2), "dense 3").unwrap();
        let lowered = LoweredNet::<Rational>::new(&net);
        let region = InputBox::new(vec![Rational::new(0.into(), 1.into()); 2], Rational::new(0.into(), 1.into())).unwrap();
        let bounds = forward_interval_lowered(&net, &lowered, &region).unwrap();
        let ctx = StepContext {
            net: &net,
            lowered: &lowered,
            bounds: &bounds,
            relax: &[None, None],
            biases: &[None, None],
            strategy: ConvStrategy::Gbc,
            materialized: None,
        };
        let mut cand = CandidateBound::unbounded(Polarity::Lower, 2);
        assert!(run_backsubstitution(&ctx, 1, Polarity::Lower, &mut cand, &BacksubOptions::default()).is_err());
    }
}
