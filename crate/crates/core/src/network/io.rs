//! TOML network-spec files with little-endian `f32` weight blobs.
//!
//! ```toml
//! [network]
//! name = "example"
//! input = [3, 8, 8]          # optional, [channels, height, width]
//! excluded = [1]             # optional, defaults to [1]
//!
//! [[layer]]
//! name = "conv1"
//! kind = "convolutional"     # or "fully-connected"
//! width = 8                  # output feature map
//! height = 8
//! window = 3                 # or [kh, kw]
//! stride = 1                 # optional, or [sh, sw]
//! in_channels = 3
//! out_channels = 16
//! decomposition = "spatial"  # "channel" | "none"
//! activation = "relu"        # optional; last layer defaults to "identity"
//! fixed_rank = 4             # optional
//! weights = { file = "example.bin", offset = 0 }   # offsets count f32 elements
//! bias = { file = "example.bin", offset = 432 }
//! singular_values = [3.0, 2.0, 1.0]                # alternative to weights
//! ```
//!
//! Weights are stored `O×I×Kh×Kw` in row-major order (fully-connected: `O×I`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{Activation, Decomposition, LayerKind, LayerSpec, NetworkSpec};
use crate::error::{EncError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    network: Header,
    #[serde(rename = "layer")]
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default)]
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    excluded: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recorded_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum Extent {
    Square(usize),
    Pair([usize; 2]),
}

impl Extent {
    fn pair(self) -> [usize; 2] {
        match self {
            Extent::Square(v) => [v, v],
            Extent::Pair(p) => p,
        }
    }

    fn from_pair(p: [usize; 2]) -> Self {
        if p[0] == p[1] {
            Extent::Square(p[0])
        } else {
            Extent::Pair(p)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    file: String,
    #[serde(default)]
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    width: usize,
    height: usize,
    window: Extent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<Extent>,
    in_channels: usize,
    out_channels: usize,
    decomposition: Decomposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    singular_values: Option<Vec<f64>>,
}

struct BlobCache {
    base: PathBuf,
    loaded: HashMap<String, Vec<f32>>,
}

impl BlobCache {
    fn slice(&mut self, blob: &BlobRef, len: usize, layer: usize, name: &str) -> Result<Vec<f32>> {
        if !self.loaded.contains_key(&blob.file) {
            let path = self.base.join(&blob.file);
            let bytes = fs::read(&path).map_err(|e| EncError::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(EncError::Parse {
                    path,
                    message: "blob length is not a multiple of 4 bytes".into(),
                });
            }
            let mut values = vec![0f32; bytes.len() / 4];
            LittleEndian::read_f32_into(&bytes, &mut values);
            self.loaded.insert(blob.file.clone(), values);
        }
        let values = &self.loaded[&blob.file];
        values
            .get(blob.offset..blob.offset + len)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| {
                EncError::layer(
                    layer,
                    name,
                    format!(
                        "blob {} holds {} values, need {len} at offset {}",
                        blob.file,
                        values.len(),
                        blob.offset
                    ),
                )
            })
    }
}

/// Parses and validates a network-spec file. Weight blobs are resolved
/// relative to the file's directory.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EncError::io(path, e))?;
    let file: NetworkFile = toml::from_str(&text).map_err(|e| EncError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut blobs = BlobCache {
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        loaded: HashMap::new(),
    };
    let count = file.layers.len();
    let mut layers = Vec::with_capacity(count);
    let mut fixed = Vec::new();
    for (pos, entry) in file.layers.into_iter().enumerate() {
        let index = pos + 1;
        let mut layer = LayerSpec {
            index,
            name: entry.name,
            kind: entry.kind,
            width: entry.width,
            height: entry.height,
            kernel: entry.window.pair(),
            stride: entry.stride.map_or([1, 1], Extent::pair),
            in_channels: entry.in_channels,
            out_channels: entry.out_channels,
            decomposition: entry.decomposition,
            activation: entry.activation.unwrap_or(if index == count {
                Activation::Identity
            } else {
                Activation::Relu
            }),
            weights: None,
            bias: None,
            singular_values: entry.singular_values,
        };
        if let Some(blob) = &entry.weights {
            layer.weights = Some(blobs.slice(blob, layer.weight_len(), index, &layer.name)?);
        }
        if let Some(blob) = &entry.bias {
            layer.bias = Some(blobs.slice(blob, layer.out_channels, index, &layer.name)?);
        }
        if let Some(r) = entry.fixed_rank {
            fixed.push((index, r));
        }
        layers.push(layer);
    }
    let mut net = NetworkSpec::new(layers)?;
    net.name = file.network.name;
    net.recorded_accuracy = file.network.recorded_accuracy;
    net.set_excluded(file.network.excluded.unwrap_or_else(|| vec![1]))?;
    for (index, rank) in fixed {
        net.set_fixed_rank(index, rank)?;
    }
    if let Some(input) = file.network.input {
        net = net.with_input(input)?;
    }
    Ok(net)
}

/// Writes `net` to `path`, placing all weights and biases into `blob_name`
/// next to it. Layers without weights keep their singular values inline.
pub fn save_network(net: &NetworkSpec, path: impl AsRef<Path>, blob_name: &str) -> Result<()> {
    let path = path.as_ref();
    let mut blob: Vec<f32> = Vec::new();
    let mut entries = Vec::with_capacity(net.len());
    for layer in net.layers() {
        let mut push = |values: &Option<Vec<f32>>| {
            values.as_ref().map(|v| {
                let offset = blob.len();
                blob.extend_from_slice(v);
                BlobRef {
                    file: blob_name.to_string(),
                    offset,
                }
            })
        };
        let weights = push(&layer.weights);
        let bias = push(&layer.bias);
        entries.push(LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind,
            width: layer.width,
            height: layer.height,
            window: Extent::from_pair(layer.kernel),
            stride: (layer.stride != [1, 1]).then(|| Extent::from_pair(layer.stride)),
            in_channels: layer.in_channels,
            out_channels: layer.out_channels,
            decomposition: layer.decomposition,
            activation: Some(layer.activation),
            fixed_rank: net.fixed_ranks().get(&layer.index).copied(),
            singular_values: if weights.is_none() {
                layer.singular_values.clone()
            } else {
                None
            },
            weights,
            bias,
        });
    }
    let file = NetworkFile {
        network: Header {
            name: net.name.clone(),
            input: net.input,
            excluded: Some(net.excluded().iter().copied().collect()),
            recorded_accuracy: net.recorded_accuracy,
        },
        layers: entries,
    };
    let text = toml::to_string(&file).map_err(|e| EncError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| EncError::io(path, e))?;
    if !blob.is_empty() {
        let blob_path = path.with_file_name(blob_name);
        let mut bytes = vec![0u8; blob.len() * 4];
        LittleEndian::write_f32_into(&blob, &mut bytes);
        fs::write(&blob_path, bytes).map_err(|e| EncError::io(&blob_path, e))?;
    }
    Ok(())
}
