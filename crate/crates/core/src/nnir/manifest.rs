//! Model manifest (JSON) plus raw float32 weight blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_refs_len, infer_shapes, DType, Graph, LayerNode, NnirError, Op, TensorShape, WeightBlob, WeightRef};

pub const MANIFEST_FORMAT: &str = "sacc-model";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format: String,
    version: u32,
    #[serde(default)]
    name: String,
    input_shape: [usize; 4],
    input: usize,
    output: usize,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    name: String,
    op: String,
    #[serde(default)]
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry {
    tensor: usize,
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
    #[serde(default)]
    bias: bool,
}

impl NodeEntry {
    fn attr(&self, name: &str, v: Option<usize>) -> Result<usize, NnirError> {
        v.ok_or_else(|| NnirError::Manifest(format!("node {} ({}) is missing `{name}`", self.id, self.op)))
    }

    fn kernel(&self) -> Result<[usize; 2], NnirError> {
        self.kernel
            .ok_or_else(|| NnirError::Manifest(format!("node {} ({}) is missing `kernel`", self.id, self.op)))
    }

    fn to_op(&self) -> Result<Op, NnirError> {
        Ok(match self.op.as_str() {
            "input" => Op::Input,
            "conv2d" => {
                let [kernel_h, kernel_w] = self.kernel()?;
                Op::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride: self.attr("stride", self.stride)?,
                    padding: self.attr("padding", self.padding)?,
                    out_channels: self.attr("out_channels", self.out_channels)?,
                }
            }
            "dense" => Op::Dense {
                out_features: self.attr("out_features", self.out_features)?,
            },
            "relu" => Op::Relu,
            "add" => Op::Add,
            "maxpool" => {
                let [kh, kw] = self.kernel()?;
                if kh != kw {
                    return Err(NnirError::Manifest(format!(
                        "node {}: only square max-pool kernels are supported",
                        self.id
                    )));
                }
                Op::MaxPool {
                    kernel: kh,
                    stride: self.attr("stride", self.stride)?,
                    padding: self.attr("padding", self.padding)?,
                }
            }
            "avgpool_global" => Op::AvgPoolGlobal,
            "pad" => Op::Pad {
                padding: self.attr("padding", self.padding)?,
            },
            other => return Err(NnirError::UnknownOp(other.to_string())),
        })
    }

    fn from_node(n: &LayerNode) -> Self {
        let mut e = NodeEntry {
            id: n.id,
            name: n.name.clone(),
            op: n.op.name().to_string(),
            inputs: n.inputs.clone(),
            kernel: None,
            stride: None,
            padding: None,
            out_channels: None,
            out_features: None,
            weights: n.weights.as_ref().map(|w| WeightEntry {
                tensor: w.tensor,
                shape: w.shape.clone(),
                offset: w.offset,
                dtype: "float32".into(),
                bias: w.bias,
            }),
        };
        match &n.op {
            Op::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                out_channels,
            } => {
                e.kernel = Some([*kernel_h, *kernel_w]);
                e.stride = Some(*stride);
                e.padding = Some(*padding);
                e.out_channels = Some(*out_channels);
            }
            Op::Dense { out_features } => e.out_features = Some(*out_features),
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                e.kernel = Some([*kernel, *kernel]);
                e.stride = Some(*stride);
                e.padding = Some(*padding);
            }
            Op::Pad { padding } => e.padding = Some(*padding),
            Op::Input | Op::Relu | Op::Add | Op::AvgPoolGlobal => {}
        }
        e
    }
}

/// Parses a manifest and infers shapes.
pub fn parse_manifest(text: &str) -> Result<Graph, NnirError> {
    let file: ManifestFile = serde_json::from_str(text)?;
    if file.format != MANIFEST_FORMAT {
        return Err(NnirError::Manifest(format!(
            "unexpected format `{}` (expected `{MANIFEST_FORMAT}`)",
            file.format
        )));
    }
    if file.version != MANIFEST_VERSION {
        return Err(NnirError::Manifest(format!(
            "unsupported manifest version {}",
            file.version
        )));
    }
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for e in &file.nodes {
        let weights = match &e.weights {
            None => None,
            Some(w) => {
                if w.dtype != "float32" {
                    return Err(NnirError::Manifest(format!(
                        "node {}: unsupported dtype `{}`",
                        e.id, w.dtype
                    )));
                }
                Some(WeightRef {
                    tensor: w.tensor,
                    shape: w.shape.clone(),
                    offset: w.offset,
                    dtype: DType::Float32,
                    bias: w.bias,
                })
            }
        };
        nodes.push(LayerNode {
            id: e.id,
            name: e.name.clone(),
            op: e.to_op()?,
            inputs: e.inputs.clone(),
            out_shape: None,
            weights,
        });
    }
    let g = Graph {
        nodes,
        input: file.input,
        output: file.output,
    };
    let [n, h, w, c] = file.input_shape;
    infer_shapes(&g, TensorShape::new(n, h, w, c))
}

/// Serializes `g` (shapes must be inferred).
pub fn write_manifest(g: &Graph, name: &str) -> String {
    let s = g.node(g.input).shape();
    let file = ManifestFile {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: name.into(),
        input_shape: [s.n, s.h, s.w, s.c],
        input: g.input,
        output: g.output,
        nodes: g.nodes.iter().map(NodeEntry::from_node).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    text.push('\n');
    text
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnirError + '_ {
    move |source| NnirError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a manifest and its weight blob; every weight reference is bounds-checked.
pub fn load_model(manifest_path: &Path, blob_path: &Path) -> Result<(Graph, WeightBlob), NnirError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let g = parse_manifest(&text)?;
    let bytes = std::fs::read(blob_path).map_err(io_err(blob_path))?;
    check_refs_len(&g, bytes.len() as u64)?;
    let usable = bytes.len() - bytes.len() % 4;
    let blob = WeightBlob::from_le_bytes(&bytes[..usable])?;
    Ok((g, blob))
}

pub fn write_model(
    manifest_path: &Path,
    blob_path: &Path,
    g: &Graph,
    blob: &WeightBlob,
    name: &str,
) -> Result<(), NnirError> {
    std::fs::write(manifest_path, write_manifest(g, name)).map_err(io_err(manifest_path))?;
    std::fs::write(blob_path, blob.to_le_bytes()).map_err(io_err(blob_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnir::{build_resnet20, random_weights};

    #[test]
    fn resnet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_resnet20(10);
        let blob = random_weights(&g, 7);
        let (m, b) = (dir.path().join("m.json"), dir.path().join("w.bin"));
        write_model(&m, &b, &g, &blob, "resnet20").unwrap();
        let (g2, blob2) = load_model(&m, &b).unwrap();
        assert_eq!(g, g2);
        assert_eq!(blob, blob2);
        blob2.check_refs(&g2).unwrap();
    }

    #[test]
    fn truncated_blob_is_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_resnet20(10);
        let blob = random_weights(&g, 7);
        let (m, b) = (dir.path().join("m.json"), dir.path().join("w.bin"));
        write_model(&m, &b, &g, &blob, "resnet20").unwrap();
        let mut bytes = std::fs::read(&b).unwrap();
        bytes.pop();
        std::fs::write(&b, bytes).unwrap();
        let err = load_model(&m, &b).unwrap_err();
        assert!(matches!(err, NnirError::OutOfBounds { .. }), "{err}");
    }

    #[test]
    fn unknown_op_is_named() {
        let g = build_resnet20(10);
        let text = write_manifest(&g, "r").replacen("\"op\": \"relu\"", "\"op\": \"gelu\"", 1);
        let err = parse_manifest(&text).unwrap_err();
        assert!(matches!(&err, NnirError::UnknownOp(op) if op == "gelu"));
        assert!(err.to_string().contains("gelu"));
    }

    #[test]
    fn dangling_reference_rejected() {
        let text = r#"{"format":"sacc-model","version":1,"input_shape":[1,4,4,1],
            "input":0,"output":1,
            "nodes":[{"id":0,"op":"input"},{"id":1,"op":"relu","inputs":[7]}]}"#;
        let err = parse_manifest(text).unwrap_err();
        assert!(err.to_string().contains("missing node 7"), "{err}");
    }

    #[test]
    fn malformed_manifest_rejected() {
        assert!(parse_manifest("{not json").is_err());
        let text = r#"{"format":"other","version":1,"input_shape":[1,4,4,1],
            "input":0,"output":0,"nodes":[{"id":0,"op":"input"}]}"#;
        assert!(matches!(parse_manifest(text), Err(NnirError::Manifest(_))));
        let text = r#"{"format":"sacc-model","version":1,"input_shape":[1,4,4,1],
            "input":0,"output":1,
            "nodes":[{"id":0,"op":"input"},{"id":1,"op":"pad","inputs":[0]}]}"#;
        assert!(parse_manifest(text).unwrap_err().to_string().contains("padding"));
    }
}
