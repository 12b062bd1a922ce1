//! JSON model format.
//!
//! ```json
//! {
//!   "input_shape": [W, H, C],
//!   "layers": [
//!     {"id":1,"kind":"conv","predecessors":[0],"kernel":[3,3],"stride":[1,1],"padding":[1,1],"filter":[...],"bias":[...]},
//!     {"id":2,"kind":"relu","predecessors":[1]},
//!     {"id":3,"kind":"dense","predecessors":[2],"weights":[[...]],"bias":[...]},
//!     {"id":4,"kind":"add","predecessors":[2,3]}
//!   ]
//! }
//! ```
//!
//! Numbers in `weights`, `filter` and `bias` are decimal strings so that they
//! load exactly. `filter` is nested `[fw][fh][c_in][c_out]`. Id 0 is the input
//! layer. `stride` and `padding` default to `[1,1]` and `[0,0]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Conv, Dense, LayerKind, Network, RawKind, RawLayer, Shape};
use crate::decimal::{format_decimal, parse_decimal};
use crate::error::{Error, FileLayerId, Result};
use crate::interval::Rational;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    id: FileLayerId,
    kind: String,
    predecessors: Vec<FileLayerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter: Option<Vec<Vec<Vec<Vec<String>>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct ModelJson {
    input_shape: [usize; 3],
    layers: Vec<Value>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<Network> {
    let model: ModelJson = serde_json::from_str(text).map_err(|e| Error::Parse {
        layer: None,
        message: e.to_string(),
    })?;
    let [w, h, c] = model.input_shape;
    let mut raw = Vec::with_capacity(model.layers.len());
    for v in model.layers {
        raw.push(parse_layer(v)?);
    }
    Network::from_layers(Shape::new(w, h, c), raw)
}

fn parse_layer(v: Value) -> Result<RawLayer> {
    let id = v.get("id").and_then(Value::as_u64);
    let lj: LayerJson = serde_json::from_value(v).map_err(|e| Error::Parse {
        layer: id,
        message: e.to_string(),
    })?;
    let id = lj.id;
    let perr = |message: String| Error::Parse {
        layer: Some(id),
        message,
    };
    let num = |s: &String| parse_decimal(s).map_err(perr);
    let nums = |v: &Vec<String>| v.iter().map(num).collect::<Result<Vec<Rational>>>();
    let bias = || lj.bias.as_ref().map(nums).transpose()?.ok_or_else(|| perr("missing bias".into()));
    let forbid = |present: bool, field: &str| {
        if present {
            Err(perr(format!("field {field:?} not allowed for kind {:?}", lj.kind)))
        } else {
            Ok(())
        }
    };

    let kind = match lj.kind.as_str() {
        "dense" => {
            forbid(lj.filter.is_some(), "filter")?;
            forbid(lj.kernel.is_some() || lj.stride.is_some() || lj.padding.is_some(), "kernel/stride/padding")?;
            let rows = lj.weights.as_ref().ok_or_else(|| perr("missing weights".into()))?;
            let width = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != width) {
                return Err(perr("ragged weight matrix".into()));
            }
            let weights = rows.iter().map(nums).collect::<Result<Vec<_>>>()?;
            let bias = bias()?;
            if bias.len() != weights.len() {
                return Err(Error::ShapeMismatch {
                    layer: id,
                    other: None,
                    message: format!("{} weight rows but {} biases", weights.len(), bias.len()),
                });
            }
            RawKind::Dense(Dense::new(weights, bias))
        }
        "conv" => {
            forbid(lj.weights.is_some(), "weights")?;
            let filter = lj.filter.as_ref().ok_or_else(|| perr("missing filter".into()))?;
            let fw = filter.len();
            let fh = filter.first().map_or(0, Vec::len);
            let cin = filter.first().and_then(|x| x.first()).map_or(0, Vec::len);
            let cout = filter
                .first()
                .and_then(|x| x.first())
                .and_then(|x| x.first())
                .map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(fw * fh * cin * cout);
            for a in filter {
                if a.len() != fh {
                    return Err(perr("ragged filter".into()));
                }
                for b in a {
                    if b.len() != cin {
                        return Err(perr("ragged filter".into()));
                    }
                    for c in b {
                        if c.len() != cout {
                            return Err(perr("ragged filter".into()));
                        }
                        for s in c {
                            flat.push(num(s)?);
                        }
                    }
                }
            }
            let kernel = lj.kernel.unwrap_or([fw, fh]);
            if kernel != [fw, fh] {
                return Err(Error::ShapeMismatch {
                    layer: id,
                    other: None,
                    message: format!("kernel {kernel:?} disagrees with filter {fw}x{fh}"),
                });
            }
            let stride = lj.stride.unwrap_or([1, 1]);
            if stride.contains(&0) {
                return Err(perr("stride must be positive".into()));
            }
            let padding = lj.padding.unwrap_or([0, 0]);
            RawKind::Conv(Conv {
                kernel: (fw, fh),
                stride: (stride[0], stride[1]),
                padding: (padding[0], padding[1]),
                in_channels: cin,
                out_channels: cout,
                filter: flat,
                bias: bias()?,
            })
        }
        "relu" | "add" => {
            forbid(
                lj.weights.is_some()
                    || lj.filter.is_some()
                    || lj.bias.is_some()
                    || lj.kernel.is_some()
                    || lj.stride.is_some()
                    || lj.padding.is_some(),
                "parameters",
            )?;
            if lj.kind == "relu" {
                RawKind::Relu
            } else {
                RawKind::Add
            }
        }
        other => {
            return Err(Error::UnsupportedLayer {
                layer: id,
                kind: other.to_string(),
            })
        }
    };
    Ok(RawLayer {
        id,
        kind,
        preds: lj.predecessors,
    })
}

fn dec(r: &Rational) -> String {
    format_decimal(r).expect("weights loaded from decimals terminate")
}

/// Canonical serialization: layers in topological order, one per line,
/// minimal decimal strings.
pub fn write_model(net: &Network) -> String {
    let s = net.input_shape();
    let mut out = format!(
        "{{\n  \"input_shape\": [{}, {}, {}],\n  \"layers\": [\n",
        s.width, s.height, s.channels
    );
    let n = net.len();
    for (i, layer) in net.layers().iter().enumerate().skip(1) {
        let mut lj = LayerJson {
            id: layer.file_id,
            kind: layer.kind.name().to_string(),
            predecessors: layer.preds.iter().map(|p| net.file_id(*p)).collect(),
            kernel: None,
            stride: None,
            padding: None,
            weights: None,
            filter: None,
            bias: None,
        };
        match &layer.kind {
            LayerKind::Dense(d) => {
                lj.weights = Some(
                    (0..d.outputs())
                        .map(|o| d.row(o).iter().map(dec).collect())
                        .collect(),
                );
                lj.bias = Some(d.bias.iter().map(dec).collect());
            }
            LayerKind::Conv(c) => {
                lj.kernel = Some([c.kernel.0, c.kernel.1]);
                lj.stride = Some([c.stride.0, c.stride.1]);
                lj.padding = Some([c.padding.0, c.padding.1]);
                lj.filter = Some(
                    (0..c.kernel.0)
                        .map(|f| {
                            (0..c.kernel.1)
                                .map(|g| {
                                    (0..c.in_channels)
                                        .map(|ci| {
                                            (0..c.out_channels)
                                                .map(|d| dec(c.weight(f, g, ci, d)))
                                                .collect()
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                );
                lj.bias = Some(c.bias.iter().map(dec).collect());
            }
            _ => {}
        }
        out.push_str("    ");
        out.push_str(&serde_json::to_string(&lj).expect("serializable"));
        out.push_str(if i + 1 < n { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(net)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
