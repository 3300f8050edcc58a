//! On-disk network format: a JSON document describing the layer chain and
//! a little-endian blob of concatenated `f64` weight tensors.
//!
//! ```json
//! {
//!   "format": "fvinv-network",
//!   "version": 1,
//!   "input_shape": [16, 16, 3],
//!   "weights_file": "net.bin",
//!   "layers": [
//!     { "kind": "conv2d", "padding": "valid", "output_shape": [14, 14, 8],
//!       "tensors": [ { "name": "weight", "shape": [8, 3, 3, 3], "offset": 0, "bytes": 1728 } ] },
//!     { "kind": "relu", "output_shape": [14, 14, 8] }
//!   ]
//! }
//! ```
//!
//! `offset` and `bytes` address the blob; `weights_file` is resolved
//! relative to the JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Differentiable, Layer, Network, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "fvinv-network";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub weights_file: String,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Builds the JSON document and the weight blob for `net`.
pub fn encode_network(net: &Network, weights_file: &str) -> (NetworkDocument, Vec<u8>) {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(net.layers().len());
    for (layer, shape) in net.layers().iter().zip(&net.shapes) {
        let names: &[&str] = match layer {
            Layer::BiasAdd { .. } => &["bias"],
            _ => &["weight"],
        };
        let tensors = layer
            .weights()
            .into_iter()
            .zip(names)
            .map(|(t, name)| {
                let offset = blob.len();
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes: t.len() * 8,
                }
            })
            .collect();
        let (padding, size, stride) = match layer {
            Layer::Conv2d { padding, .. } => (Some(*padding), None, None),
            Layer::MaxPool2d { size, stride } => (None, Some(*size), Some(*stride)),
            _ => (None, None, None),
        };
        layers.push(LayerRecord {
            kind: layer.kind().to_string(),
            padding,
            size,
            stride,
            output_shape: shape.clone(),
            tensors,
        });
    }
    let doc = NetworkDocument {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        weights_file: weights_file.into(),
        layers,
    };
    (doc, blob)
}

/// Rebuilds a network from its document and weight blob.
pub fn decode_network(doc: &NetworkDocument, blob: &[u8]) -> Result<Network> {
    if doc.format != FORMAT_NAME || doc.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported network format {} v{}",
            doc.format, doc.version
        )));
    }
    let read_tensor = |rec: &TensorRecord| -> Result<Tensor> {
        let n: usize = rec.shape.iter().product();
        if rec.bytes != n * 8 || rec.offset % 8 != 0 {
            return Err(Error::Format(format!("tensor {} has inconsistent size", rec.name)));
        }
        let end = rec
            .offset
            .checked_add(rec.bytes)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| Error::Format(format!("tensor {} exceeds weight blob", rec.name)))?;
        let data = blob[rec.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(rec.shape.clone(), data)
    };
    let tensor = |rec: &LayerRecord, i: usize| -> Result<Tensor> {
        let t = rec
            .tensors
            .first()
            .ok_or_else(|| Error::Format(format!("layer {i} ({}) is missing its tensor", rec.kind)))?;
        read_tensor(t)
    };
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, rec) in doc.layers.iter().enumerate() {
        let missing = |field: &str| Error::Format(format!("layer {i} ({}) needs `{field}`", rec.kind));
        let layer = match rec.kind.as_str() {
            "dense" => Layer::Dense {
                weight: tensor(rec, i)?,
            },
            "conv2d" => Layer::Conv2d {
                weight: tensor(rec, i)?,
                padding: rec.padding.ok_or_else(|| missing("padding"))?,
            },
            "bias_add" => Layer::BiasAdd {
                bias: tensor(rec, i)?,
            },
            "relu" => Layer::Relu,
            "sigmoid" => Layer::Sigmoid,
            "softmax" => Layer::Softmax,
            "square" => Layer::Square,
            "maxpool2d" => Layer::MaxPool2d {
                size: rec.size.ok_or_else(|| missing("size"))?,
                stride: rec.stride.ok_or_else(|| missing("stride"))?,
            },
            "flatten" => Layer::Flatten,
            other => return Err(Error::Format(format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    let net = Network::new(doc.input_shape.clone(), layers)?;
    for (i, (rec, shape)) in doc.layers.iter().zip(&net.shapes).enumerate() {
        if &rec.output_shape != shape {
            return Err(Error::Format(format!(
                "layer {i} ({}) records output shape {:?} but computes {:?}",
                rec.kind, rec.output_shape, shape
            )));
        }
    }
    Ok(net)
}

/// Writes `path` (JSON) and a sibling `.bin` weight blob.
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let bin_path = path.with_extension("bin");
    let bin_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad network path {}", path.display())))?
        .to_string();
    let (doc, blob) = encode_network(net, &bin_name);
    fs::write(&bin_path, blob)?;
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let doc: NetworkDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let blob = fs::read(dir.join(&doc.weights_file))?;
    decode_network(&doc, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_net() -> Network {
        let conv = Tensor::new(vec![2, 3, 3, 1], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let dense = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.5]).unwrap();
        Network::new(
            vec![4, 4, 1],
            vec![
                Layer::Conv2d {
                    weight: conv,
                    padding: Padding::Valid,
                },
                Layer::BiasAdd {
                    bias: Tensor::from_vec(vec![0.1, -0.2]),
                },
                Layer::Relu,
                Layer::MaxPool2d { size: 2, stride: 1 },
                Layer::Flatten,
                Layer::Dense { weight: Tensor::zeros(&[2, 2]) },
                Layer::Dense { weight: dense },
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = sample_net();
        save_network(&net, &path).unwrap();
        assert!(dir.path().join("net.bin").exists());
        let back = load_network(&path).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn blob_is_little_endian_f64() {
        let (doc, blob) = encode_network(&sample_net(), "w.bin");
        let bias = &doc.layers[1].tensors[0];
        assert_eq!(bias.offset, 18 * 8);
        assert_eq!(&blob[bias.offset..bias.offset + 8], &0.1f64.to_le_bytes());
    }

    #[test]
    fn rejects_truncated_blob() {
        let (doc, blob) = encode_network(&sample_net(), "w.bin");
        assert!(decode_network(&doc, &blob[..blob.len() - 8]).is_err());
    }

    #[test]
    fn rejects_wrong_recorded_shape() {
        let (mut doc, blob) = encode_network(&sample_net(), "w.bin");
        doc.layers[2].output_shape = vec![9, 9, 9];
        assert!(decode_network(&doc, &blob).is_err());
    }
}
