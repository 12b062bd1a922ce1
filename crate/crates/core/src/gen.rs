//! Seeded network generation from a small architecture language.
//!
//! ```text
//! arch  := item (';' item)*
//! item  := 'dense' N
//!        | 'conv' FxGxC ['s' S] ['p' P]
//!        | 'relu'
//!        | 'res{' arch? '|' arch? '}'
//! ```
//!
//! `conv 3x3x8 s1 p1` is a 3×3 convolution with 8 output channels, stride 1
//! and padding 1. A residual block feeds the current layer into both
//! branches and adds their outputs; an empty branch is the identity. All
//! weights are dyadic rationals drawn from a ChaCha stream, so the same seed
//! always yields the same file.

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interval::Rational;
use crate::network::{Conv, Dense, Network, RawKind, RawLayer, Shape};

/// Weights are multiples of `2^-WEIGHT_BITS`.
const WEIGHT_BITS: u32 = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchItem {
    Dense(usize),
    Conv {
        kernel: (usize, usize),
        channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Residual(Vec<ArchItem>, Vec<ArchItem>),
}

fn grammar(msg: impl Into<String>) -> Error {
    Error::Grammar(msg.into())
}

fn parse_num(tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| grammar(format!("expected {what}, found `{tok}`")))
}

fn parse_item(text: &str) -> Result<ArchItem> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    match toks.as_slice() {
        ["relu"] => Ok(ArchItem::Relu),
        ["dense", n] => {
            let n = parse_num(n, "a neuron count")?;
            if n == 0 {
                return Err(grammar("dense layer with no neurons"));
            }
            Ok(ArchItem::Dense(n))
        }
        ["conv", dims, rest @ ..] => {
            let d: Vec<usize> = dims
                .split('x')
                .map(|t| parse_num(t, "a filter dimension"))
                .collect::<Result<_>>()?;
            let [f, g, c] = d[..] else {
                return Err(grammar(format!("conv dimensions must be FxGxC, found `{dims}`")));
            };
            if f == 0 || g == 0 || c == 0 {
                return Err(grammar("conv dimensions must be positive"));
            }
            let (mut stride, mut padding) = (1, 0);
            for t in rest {
                if let Some(v) = t.strip_prefix('s') {
                    stride = parse_num(v, "a stride")?;
                } else if let Some(v) = t.strip_prefix('p') {
                    padding = parse_num(v, "a padding")?;
                } else {
                    return Err(grammar(format!("unknown conv option `{t}`")));
                }
            }
            if stride == 0 {
                return Err(grammar("stride must be positive"));
            }
            Ok(ArchItem::Conv {
                kernel: (f, g),
                channels: c,
                stride,
                padding,
            })
        }
        [] => Err(grammar("empty layer description")),
        _ => Err(grammar(format!("cannot parse `{}`", text.trim()))),
    }
}

/// Splits on `sep` at bracket depth zero.
fn split_top(text: &str, sep: char) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return Err(grammar("unbalanced `}`"));
                }
            }
            c if c == sep && depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(grammar("unbalanced `{`"));
    }
    parts.push(&text[start..]);
    Ok(parts)
}

fn parse_seq(text: &str, nested: bool) -> Result<Vec<ArchItem>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut items = Vec::new();
    for part in split_top(text, ';')? {
        let part = part.trim();
        if let Some(body) = part.strip_prefix("res{").and_then(|b| b.strip_suffix('}')) {
            if nested {
                return Err(grammar("residual blocks cannot be nested"));
            }
            let branches = split_top(body, '|')?;
            let [a, b] = branches[..] else {
                return Err(grammar("a residual block needs exactly two branches separated by `|`"));
            };
            items.push(ArchItem::Residual(parse_seq(a, true)?, parse_seq(b, true)?));
        } else {
            items.push(parse_item(part)?);
        }
    }
    Ok(items)
}

/// Parses an architecture description.
pub fn parse_arch(text: &str) -> Result<Vec<ArchItem>> {
    let items = parse_seq(text, false)?;
    if items.is_empty() {
        return Err(grammar("empty architecture"));
    }
    Ok(items)
}

/// Parses `WxHxC`.
pub fn parse_shape(text: &str) -> Result<Shape> {
    let d: Vec<usize> = text
        .split('x')
        .map(|t| parse_num(t.trim(), "a dimension"))
        .collect::<Result<_>>()?;
    match d[..] {
        [w, h, c] if w > 0 && h > 0 && c > 0 => Ok(Shape::new(w, h, c)),
        [n] if n > 0 => Ok(Shape::flat(n)),
        _ => Err(grammar(format!("shape must be WxHxC or N, found `{text}`"))),
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<RawLayer>,
    next_id: u64,
}

impl Builder {
    fn dyadic(&mut self, scale: f64) -> Rational {
        let r = (scale * f64::from(1u32 << WEIGHT_BITS)).round().max(1.0) as i64;
        let k = self.rng.gen_range(-r..=r);
        Rational::new(BigInt::from(k), BigInt::from(1i64 << WEIGHT_BITS))
    }

    fn push(&mut self, kind: RawKind, preds: Vec<u64>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.layers.push(RawLayer { id, kind, preds });
        id
    }

    /// Appends `items` after layer `pred` of shape `shape`.
    fn chain(&mut self, items: &[ArchItem], mut pred: u64, mut shape: Shape) -> Result<(u64, Shape)> {
        for item in items {
            match item {
                ArchItem::Relu => {
                    pred = self.push(RawKind::Relu, vec![pred]);
                }
                ArchItem::Dense(n) => {
                    let fan_in = shape.len();
                    let scale = (2.0 / fan_in as f64).sqrt();
                    let weights = (0..*n)
                        .map(|_| (0..fan_in).map(|_| self.dyadic(scale)).collect())
                        .collect();
                    let bias = (0..*n).map(|_| self.dyadic(0.1)).collect();
                    pred = self.push(RawKind::Dense(Dense::new(weights, bias)), vec![pred]);
                    shape = Shape::flat(*n);
                }
                ArchItem::Conv {
                    kernel,
                    channels,
                    stride,
                    padding,
                } => {
                    let fan_in = kernel.0 * kernel.1 * shape.channels;
                    let scale = (2.0 / fan_in as f64).sqrt();
                    let filter = (0..fan_in * channels).map(|_| self.dyadic(scale)).collect();
                    let bias = (0..*channels).map(|_| self.dyadic(0.1)).collect();
                    let conv = Conv {
                        kernel: *kernel,
                        stride: (*stride, *stride),
                        padding: (*padding, *padding),
                        in_channels: shape.channels,
                        out_channels: *channels,
                        filter,
                        bias,
                    };
                    shape = conv.output_shape(shape).ok_or_else(|| {
                        grammar(format!(
                            "convolution {}x{} s{} p{} does not fit a {}x{} grid",
                            kernel.0, kernel.1, stride, padding, shape.width, shape.height
                        ))
                    })?;
                    pred = self.push(RawKind::Conv(conv), vec![pred]);
                }
                ArchItem::Residual(a, b) => {
                    if a.is_empty() && b.is_empty() {
                        return Err(grammar("a residual block needs at least one non-empty branch"));
                    }
                    let (ea, sa) = self.chain(a, pred, shape)?;
                    let (eb, sb) = self.chain(b, pred, shape)?;
                    if sa != sb {
                        return Err(grammar(format!(
                            "residual branches end in different shapes {}x{}x{} and {}x{}x{}",
                            sa.width, sa.height, sa.channels, sb.width, sb.height, sb.channels
                        )));
                    }
                    pred = self.push(RawKind::Add, vec![ea, eb]);
                    shape = sa;
                }
            }
        }
        Ok((pred, shape))
    }
}

/// Builds a network for `arch` over inputs of `input_shape` with weights
/// drawn from `seed`.
pub fn generate(seed: u64, input_shape: Shape, arch: &[ArchItem]) -> Result<Network> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::new(),
        next_id: 1,
    };
    b.chain(arch, 0, input_shape)?;
    Network::from_layers(input_shape, b.layers)
}

/// Parses and builds in one go.
pub fn generate_from_str(seed: u64, input_shape: Shape, arch: &str) -> Result<Network> {
    generate(seed, input_shape, &parse_arch(arch)?)
}

/// Limits for [`random_arch`].
#[derive(Clone, Debug)]
pub struct RandomArchLimits {
    /// Affine layers (dense, conv, each residual branch layer counts).
    pub max_affine: usize,
    pub max_side: usize,
    pub max_channels: usize,
    pub max_kernel: usize,
    pub max_neurons: usize,
    pub classes: usize,
}

impl Default for RandomArchLimits {
    fn default() -> Self {
        RandomArchLimits {
            max_affine: 5,
            max_side: 8,
            max_channels: 4,
            max_kernel: 3,
            max_neurons: 2000,
            classes: 4,
        }
    }
}

/// A random mix of convolutions, residual blocks and dense layers ending in
/// a dense classifier, with its input shape. Retries until the network fits
/// the limits.
pub fn random_arch(seed: u64, limits: &RandomArchLimits) -> (Shape, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a7c4);
    loop {
        let side = rng.gen_range(2..=limits.max_side);
        let input = Shape::new(side, side, rng.gen_range(1..=limits.max_channels.min(2)));
        let budget = rng.gen_range(1..=limits.max_affine);
        let mut parts: Vec<String> = Vec::new();
        let mut used = 1; // final classifier
        let mut spatial = true;
        while used < budget {
            let pick = rng.gen_range(0..10);
            let f = rng.gen_range(1..=limits.max_kernel);
            let c = rng.gen_range(1..=limits.max_channels);
            let s = rng.gen_range(1..=2);
            let p = rng.gen_range(0..=1);
            if spatial && pick < 4 {
                parts.push(format!("conv {f}x{f}x{c} s{s} p{p}"));
                used += 1;
            } else if spatial && pick < 7 && used + 1 < budget {
                // shape-preserving branch: odd kernel with matching padding
                let k = if limits.max_kernel >= 3 && rng.gen_bool(0.5) { 3 } else { 1 };
                let branch = format!("conv {k}x{k}xC s1 p{}", k / 2);
                if rng.gen_bool(0.5) {
                    parts.push(format!("res{{{branch}; relu; {branch}|}}"));
                    used += 2;
                } else {
                    parts.push(format!("res{{{branch}|conv 1x1xC s1 p0}}"));
                    used += 2;
                }
            } else {
                parts.push(format!("dense {}", rng.gen_range(2..=12)));
                used += 1;
                spatial = false;
            }
            if rng.gen_bool(0.8) {
                parts.push("relu".into());
            }
        }
        parts.push(format!("dense {}", limits.classes));
        // fill in residual channel counts with the running channel count
        let arch = resolve_channels(&parts, input.channels);
        let Ok(items) = parse_arch(&arch) else { continue };
        if let Ok(net) = generate(0, input, &items) {
            if net.neuron_count() <= limits.max_neurons {
                return (input, arch);
            }
        }
    }
}

/// Replaces the `C` placeholder in residual branches by the channel count
/// entering the block.
fn resolve_channels(parts: &[String], input_channels: usize) -> String {
    let mut ch = input_channels;
    let mut out = Vec::new();
    for p in parts {
        if p.starts_with("res{") {
            out.push(p.replace('C', &ch.to_string()));
        } else {
            if let Some(rest) = p.strip_prefix("conv ") {
                if let Some(c) = rest.split_whitespace().next().and_then(|d| d.split('x').nth(2)) {
                    ch = c.parse().unwrap_or(ch);
                }
            }
            if p.starts_with("dense") {
                ch = 1;
            }
            out.push(p.clone());
        }
    }
    out.join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{write_model, LayerKind};

    #[test]
    fn parses_example_grammar() {
        let a = parse_arch("conv 3x3x8 s1 p1; relu; dense 10").unwrap();
        assert_eq!(
            a,
            vec![
                ArchItem::Conv {
                    kernel: (3, 3),
                    channels: 8,
                    stride: 1,
                    padding: 1
                },
                ArchItem::Relu,
                ArchItem::Dense(10)
            ]
        );
        let r = parse_arch("res{conv 3x3x2 p1; relu | }; dense 2").unwrap();
        assert!(matches!(&r[0], ArchItem::Residual(a, b) if a.len() == 2 && b.is_empty()));
    }

    #[test]
    fn grammar_errors() {
        for bad in ["", "dense", "dense x", "conv 3x3 s1", "conv 3x3x2 q1", "res{dense 2}", "res{res{|}|}", "relu}", "pool 2"] {
            assert!(matches!(parse_arch(bad), Err(Error::Grammar(_))), "{bad}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = Shape::new(4, 4, 1);
        let a = write_model(&generate_from_str(7, s, "conv 3x3x2 p1; relu; dense 3").unwrap());
        let b = write_model(&generate_from_str(7, s, "conv 3x3x2 p1; relu; dense 3").unwrap());
        let c = write_model(&generate_from_str(8, s, "conv 3x3x2 p1; relu; dense 3").unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn residual_spec_builds_valid_block() {
        let net = generate_from_str(1, Shape::new(5, 5, 2), "res{conv 3x3x2 p1; relu; conv 3x3x2 p1|}; relu; dense 2").unwrap();
        assert_eq!(net.blocks().count(), 1);
        let (j, b) = net.blocks().next().unwrap();
        assert_eq!(b.head, 0);
        assert_eq!(b.branch_a.len(), 3);
        assert!(b.branch_b.is_empty());
        assert!(matches!(net.layer(j).kind, LayerKind::Add(_)));
        assert!(generate_from_str(1, Shape::new(5, 5, 2), "res{conv 3x3x3 p1|}").is_err());
    }

    #[test]
    fn random_archs_respect_limits() {
        let limits = RandomArchLimits::default();
        for seed in 0..40 {
            let (shape, arch) = random_arch(seed, &limits);
            let net = generate_from_str(seed, shape, &arch).unwrap();
            assert!(net.neuron_count() <= limits.max_neurons, "{arch}");
            assert_eq!(net.output_size(), limits.classes);
        }
    }
}
