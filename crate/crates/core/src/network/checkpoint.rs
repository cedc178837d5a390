//! Checkpoint directories: `manifest.toml` plus one IBRT blob per tensor.
//!
//! ```text
//! format_version = 1
//! mode = "training"
//! encoding = "direct"
//! input_shape = [2]
//! blobs = ["layer00.weight.ibrt", "layer00.bias.ibrt", ...]
//!
//! [[layers]]
//! type = "linear"
//! weight = { file = "layer00.weight.ibrt", shape = [16, 2] }
//! bias = { file = "layer00.bias.ibrt", shape = [16] }
//!
//! [[layers]]
//! type = "neuron"
//! config = { kind = "ibra-lif", alpha = 1.0, v_th = 1.0, d = 5.11, n = 100, timesteps = 1 }
//! ```
//!
//! Lowered neuron layers add a `lowered` table with the spike coding, for
//! bit-planes `{ coding = "bit-plane", n, planes, plane_order }`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::neuron::NeuronConfig;
use crate::tensor::{load_tensor, save_tensor, ContainerError, Tensor};

use super::graph::{GraphMode, InputEncoding, LayerGraph};
use super::layer::{Activation, BatchNormLayer, Conv2dLayer, Layer, LinearLayer, NeuronLayer, SpikeCoding};
use super::NetworkError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("blob {file}: manifest shape {manifest:?} but blob holds {blob:?}")]
    ShapeMismatch {
        file: String,
        manifest: Vec<usize>,
        blob: Vec<usize>,
    },
    #[error("blob {file}: {source}")]
    Blob {
        file: String,
        #[source]
        source: ContainerError,
    },
    #[error("manifest: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobRef {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum LayerEntry {
    Conv {
        stride: usize,
        padding: usize,
        weight: BlobRef,
        bias: BlobRef,
    },
    Linear {
        weight: BlobRef,
        bias: BlobRef,
    },
    Head {
        weight: BlobRef,
        bias: BlobRef,
    },
    BatchNorm {
        eps: f64,
        momentum: f64,
        gamma: BlobRef,
        beta: BlobRef,
        running_mean: BlobRef,
        running_var: BlobRef,
    },
    Neuron {
        config: NeuronConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lowered: Option<SpikeCoding>,
    },
    Activation {
        activation: Activation,
    },
    MaxPool {
        size: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    mode: GraphMode,
    encoding: InputEncoding,
    input_shape: Vec<usize>,
    origin: Vec<usize>,
    blobs: Vec<String>,
    layers: Vec<LayerEntry>,
}

struct Writer<'a> {
    dir: &'a Path,
    blobs: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, layer: usize, name: &str, t: &Tensor) -> std::io::Result<BlobRef> {
        let file = format!("layer{layer:02}.{name}.ibrt");
        save_tensor(self.dir.join(&file), &t.to_f64())?;
        self.blobs.push(file.clone());
        Ok(BlobRef {
            file,
            shape: t.shape().to_vec(),
        })
    }
}

/// Writes `graph` into `dir`, creating it if needed. Tensors are stored as
/// `real64` so the round trip is exact.
pub fn save_checkpoint(graph: &LayerGraph, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
    graph.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = Writer { dir, blobs: Vec::new() };
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        layers.push(match layer {
            Layer::Conv(c) => LayerEntry::Conv {
                stride: c.stride,
                padding: c.padding,
                weight: w.put(i, "weight", &c.weight)?,
                bias: w.put(i, "bias", &c.bias)?,
            },
            Layer::Linear(l) => LayerEntry::Linear {
                weight: w.put(i, "weight", &l.weight)?,
                bias: w.put(i, "bias", &l.bias)?,
            },
            Layer::Head(l) => LayerEntry::Head {
                weight: w.put(i, "weight", &l.weight)?,
                bias: w.put(i, "bias", &l.bias)?,
            },
            Layer::BatchNorm(b) => LayerEntry::BatchNorm {
                eps: b.eps,
                momentum: b.momentum,
                gamma: w.put(i, "gamma", &b.gamma)?,
                beta: w.put(i, "beta", &b.beta)?,
                running_mean: w.put(i, "running_mean", &b.running_mean)?,
                running_var: w.put(i, "running_var", &b.running_var)?,
            },
            Layer::Neuron(n) => LayerEntry::Neuron {
                config: n.config,
                lowered: n.coding,
            },
            Layer::Activation(a) => LayerEntry::Activation { activation: *a },
            Layer::MaxPool { size } => LayerEntry::MaxPool { size: *size },
            Layer::Flatten => LayerEntry::Flatten,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        mode: graph.mode,
        encoding: graph.encoding,
        input_shape: graph.input_shape.clone(),
        origin: graph.origin.clone(),
        blobs: w.blobs,
        layers,
    };
    std::fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
    Ok(())
}

/// Peeks at the version before parsing the full manifest.
#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LayerGraph, CheckpointError> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let probe: VersionProbe = toml::from_str(&text)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: probe.format_version,
        });
    }
    let m: Manifest = toml::from_str(&text)?;

    let referenced = m.layers.iter().flat_map(blob_refs).map(|b| b.file.clone()).collect::<Vec<_>>();
    if referenced != m.blobs {
        return Err(CheckpointError::Integrity(format!(
            "layers reference {} blobs but the blob list has {}",
            referenced.len(),
            m.blobs.len()
        )));
    }
    for file in &m.blobs {
        if !dir.join(file).is_file() {
            return Err(CheckpointError::Integrity(format!(
                "manifest lists {} blobs but {file} is missing",
                m.blobs.len()
            )));
        }
    }
    let read = |b: &BlobRef| -> Result<Tensor, CheckpointError> {
        let t = load_tensor(dir.join(&b.file)).map_err(|source| CheckpointError::Blob {
            file: b.file.clone(),
            source,
        })?;
        if t.shape() != b.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                file: b.file.clone(),
                manifest: b.shape.clone(),
                blob: t.shape().to_vec(),
            });
        }
        Ok(t.to_f64())
    };

    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        layers.push(match e {
            LayerEntry::Conv { stride, padding, weight, bias } => Layer::Conv(Conv2dLayer {
                weight: read(weight)?,
                bias: read(bias)?,
                stride: *stride,
                padding: *padding,
            }),
            LayerEntry::Linear { weight, bias } => Layer::Linear(LinearLayer {
                weight: read(weight)?,
                bias: read(bias)?,
            }),
            LayerEntry::Head { weight, bias } => Layer::Head(LinearLayer {
                weight: read(weight)?,
                bias: read(bias)?,
            }),
            LayerEntry::BatchNorm { eps, momentum, gamma, beta, running_mean, running_var } => {
                Layer::BatchNorm(BatchNormLayer {
                    gamma: read(gamma)?,
                    beta: read(beta)?,
                    running_mean: read(running_mean)?,
                    running_var: read(running_var)?,
                    eps: *eps,
                    momentum: *momentum,
                })
            }
            LayerEntry::Neuron { config, lowered } => Layer::Neuron(NeuronLayer {
                config: *config,
                coding: *lowered,
            }),
            LayerEntry::Activation { activation } => Layer::Activation(*activation),
            LayerEntry::MaxPool { size } => Layer::MaxPool { size: *size },
            LayerEntry::Flatten => Layer::Flatten,
        });
    }
    let g = LayerGraph {
        input_shape: m.input_shape,
        layers,
        mode: m.mode,
        encoding: m.encoding,
        origin: m.origin,
    };
    g.validate()?;
    Ok(g)
}

fn blob_refs(e: &LayerEntry) -> Vec<&BlobRef> {
    match e {
        LayerEntry::Conv { weight, bias, .. } | LayerEntry::Linear { weight, bias } | LayerEntry::Head { weight, bias } => {
            vec![weight, bias]
        }
        LayerEntry::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
            vec![gamma, beta, running_mean, running_var]
        }
        _ => vec![],
    }
}
