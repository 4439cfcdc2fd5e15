//! Network description: layer geometry, weights, singular values and rank
//! configurations.
//!
//! Matricization order is fixed so singular values are reproducible:
//!
//! * spatial: the `O×I×D×D` tensor becomes an `(I·D)×(O·D)` matrix with row
//!   `i·D + y` (input channel, vertical tap) and column `o·D + x` (output
//!   channel, horizontal tap);
//! * channel: an `(I·D²)×O` matrix with row `(i·D + y)·D + x` and column `o`;
//! * fully-connected layers are channel decompositions with `D = W = H = 1`,
//!   i.e. the transposed `I×O` weight matrix.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Index;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{EncError, Result};
use crate::linalg;

pub use io::{load_network, save_network};

/// Relative tolerance when inline singular values are checked against weights.
pub const SINGULAR_VALUE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Convolutional,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    /// `D×1` then `1×D` factor convolutions through an `r`-channel bottleneck.
    Spatial,
    /// `D×D` convolution to `r` channels, then `1×1` to `O`.
    Channel,
    /// Never factorized; runs densely and counts as a single fixed unit.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// 1-based position in the network.
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Output feature-map width.
    pub width: usize,
    /// Output feature-map height.
    pub height: usize,
    /// Kernel extent `[vertical, horizontal]`; square unless the layer is a
    /// factor produced by decomposition.
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    pub decomposition: Decomposition,
    pub activation: Activation,
    /// Dense weights in `O×I×Kh×Kw` order (fully-connected: `O×I`).
    pub weights: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
    pub singular_values: Option<Vec<f64>>,
}

impl LayerSpec {
    pub fn convolutional(
        name: impl Into<String>,
        width: usize,
        height: usize,
        window: usize,
        in_channels: usize,
        out_channels: usize,
        decomposition: Decomposition,
    ) -> Self {
        LayerSpec {
            index: 0,
            name: name.into(),
            kind: LayerKind::Convolutional,
            width,
            height,
            kernel: [window, window],
            stride: [1, 1],
            in_channels,
            out_channels,
            decomposition,
            activation: Activation::Relu,
            weights: None,
            bias: None,
            singular_values: None,
        }
    }

    pub fn fully_connected(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected,
            ..LayerSpec::convolutional(name, 1, 1, 1, in_features, out_features, Decomposition::Channel)
        }
    }

    pub fn with_weights(mut self, weights: Vec<f32>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_singular_values(mut self, sigma: Vec<f64>) -> Self {
        self.singular_values = Some(sigma);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride, stride];
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Filter window size `D`.
    pub fn window(&self) -> usize {
        self.kernel[0]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel[0] * self.kernel[1]
    }

    /// Largest rank of the decomposition-specific matricization.
    pub fn max_rank(&self) -> usize {
        let (i, o, d) = (self.in_channels, self.out_channels, self.window());
        match self.decomposition {
            Decomposition::Spatial => (i * d).min(o * d),
            Decomposition::Channel => (i * d * d).min(o),
            Decomposition::None => 1,
        }
    }

    /// Shape `(rows, cols)` of the matricized weights.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let (i, o, d) = (self.in_channels, self.out_channels, self.window());
        match self.decomposition {
            Decomposition::Spatial => (i * d, o * d),
            Decomposition::Channel | Decomposition::None => (i * self.kernel[0] * self.kernel[1], o),
        }
    }

    /// Reshapes the weight tensor into the matrix whose SVD drives the
    /// decomposition.
    pub fn matricize(&self) -> Result<DMatrix<f64>> {
        let weights = self
            .weights
            .as_ref()
            .ok_or_else(|| EncError::layer(self.index, &self.name, "weights required"))?;
        let (rows, cols) = self.matrix_shape();
        let (i_ch, o_ch) = (self.in_channels, self.out_channels);
        let (kh, kw) = (self.kernel[0], self.kernel[1]);
        let mut m = DMatrix::<f64>::zeros(rows, cols);
        for o in 0..o_ch {
            for i in 0..i_ch {
                for y in 0..kh {
                    for x in 0..kw {
                        let w = weights[((o * i_ch + i) * kh + y) * kw + x] as f64;
                        match self.decomposition {
                            Decomposition::Spatial => m[(i * kh + y, o * kw + x)] = w,
                            _ => m[((i * kh + y) * kw + x, o)] = w,
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let err = |msg: String| EncError::layer(self.index, &self.name, msg);
        let dims = [
            self.width,
            self.height,
            self.kernel[0],
            self.kernel[1],
            self.stride[0],
            self.stride[1],
            self.in_channels,
            self.out_channels,
        ];
        if dims.contains(&0) {
            return Err(err("W, H, D, I, O and stride must all be at least 1".into()));
        }
        match (self.kind, self.decomposition) {
            (LayerKind::FullyConnected, Decomposition::Spatial) => {
                return Err(err("fully-connected layers use channel decomposition".into()));
            }
            (LayerKind::FullyConnected, _) => {
                if self.width != 1 || self.height != 1 || self.kernel != [1, 1] {
                    return Err(err("fully-connected layers require W = H = D = 1".into()));
                }
            }
            (LayerKind::Convolutional, Decomposition::None) => {}
            (LayerKind::Convolutional, _) => {
                if self.kernel[0] != self.kernel[1] {
                    return Err(err("decomposed convolutions need a square window".into()));
                }
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != self.weight_len() {
                return Err(err(format!(
                    "weights hold {} values, expected O·I·D·D = {}",
                    w.len(),
                    self.weight_len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(err("weights contain non-finite values".into()));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(err(format!("bias holds {} values, expected O = {}", b.len(), self.out_channels)));
            }
        }
        if self.decomposition == Decomposition::None {
            return Ok(());
        }
        if self.weights.is_none() && self.singular_values.is_none() {
            return Err(err("either weights or singular_values must be given".into()));
        }
        if let Some(sigma) = &self.singular_values {
            check_singular_values(sigma, self.max_rank()).map_err(err)?;
        }
        Ok(())
    }
}

fn check_singular_values(sigma: &[f64], max_rank: usize) -> std::result::Result<(), String> {
    if sigma.len() != max_rank {
        return Err(format!(
            "{} singular values given, maximum rank is {}",
            sigma.len(),
            max_rank
        ));
    }
    if let Some(pos) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(format!("singular value {} is not strictly positive", pos + 1));
    }
    if let Some(pos) = sigma.windows(2).position(|w| w[1] > w[0]) {
        return Err(format!(
            "singular values must be nonincreasing (σ{} = {} < σ{} = {})",
            pos + 1,
            sigma[pos],
            pos + 2,
            sigma[pos + 1]
        ));
    }
    Ok(())
}

/// Singular values of the matricized weights, nonincreasing, of length
/// [`LayerSpec::max_rank`].
pub fn matricize_and_svd(layer: &LayerSpec) -> Result<Vec<f64>> {
    if layer.decomposition == Decomposition::None {
        return Err(EncError::layer(layer.index, &layer.name, "layer is not decomposed"));
    }
    let m = layer.matricize()?;
    Ok(linalg::singular_values(m))
}

pub fn max_rank(layer: &LayerSpec) -> usize {
    layer.max_rank()
}

/// An ordered, validated list of layers plus the compression policy
/// (excluded layers and fixed-rank overrides).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Input geometry `[channels, height, width]`, needed only for inference.
    pub input: Option<[usize; 3]>,
    /// Validation accuracy recorded when the network was produced.
    pub recorded_accuracy: Option<f64>,
    layers: Vec<LayerSpec>,
    excluded: BTreeSet<usize>,
    fixed_ranks: BTreeMap<usize, usize>,
}

impl NetworkSpec {
    /// Validates the layers, numbering them `1..=L` and filling missing
    /// singular values from weights. No layer is excluded.
    pub fn new(mut layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(EncError::Network("a network needs at least one layer".into()));
        }
        for (pos, layer) in layers.iter_mut().enumerate() {
            layer.index = pos + 1;
        }
        let checked: Vec<Result<LayerSpec>> = {
            use rayon::prelude::*;
            layers.into_par_iter().map(complete_layer).collect()
        };
        let layers = checked.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(NetworkSpec {
            name: String::new(),
            input: None,
            recorded_accuracy: None,
            layers,
            excluded: BTreeSet::new(),
            fixed_ranks: BTreeMap::new(),
        })
    }

    pub fn with_input(mut self, input: [usize; 3]) -> Result<Self> {
        self.input = Some(input);
        self.check_geometry()?;
        Ok(self)
    }

    pub fn with_excluded(mut self, excluded: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.set_excluded(excluded)?;
        Ok(self)
    }

    pub fn set_excluded(&mut self, excluded: impl IntoIterator<Item = usize>) -> Result<()> {
        let set: BTreeSet<usize> = excluded.into_iter().collect();
        if let Some(bad) = set.iter().find(|&&l| l == 0 || l > self.layers.len()) {
            return Err(EncError::Network(format!(
                "excluded layer {bad} outside 1..={}",
                self.layers.len()
            )));
        }
        self.excluded = set;
        Ok(())
    }

    /// Pins layer `index` to `rank`, removing it from the search.
    pub fn set_fixed_rank(&mut self, index: usize, rank: usize) -> Result<()> {
        let layer = self
            .layers
            .get(index.wrapping_sub(1))
            .ok_or_else(|| EncError::Network(format!("fixed-rank layer {index} does not exist")))?;
        if rank == 0 || rank > layer.max_rank() {
            return Err(EncError::layer(
                index,
                &layer.name,
                format!("fixed rank {rank} outside 1..={}", layer.max_rank()),
            ));
        }
        self.fixed_ranks.insert(index, rank);
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index - 1]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    pub fn fixed_ranks(&self) -> &BTreeMap<usize, usize> {
        &self.fixed_ranks
    }

    pub fn max_ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::max_rank).collect()
    }

    /// Rank a layer is pinned to, if it takes no part in the search.
    pub fn pinned_rank(&self, index: usize) -> Option<usize> {
        let layer = self.layer(index);
        if let Some(&r) = self.fixed_ranks.get(&index) {
            Some(r)
        } else if self.excluded.contains(&index) || layer.max_rank() < 2 {
            Some(layer.max_rank())
        } else {
            None
        }
    }

    pub fn is_compressible(&self, index: usize) -> bool {
        self.pinned_rank(index).is_none()
    }

    /// 1-based indices of the layers whose rank is searched.
    pub fn compressible(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&l| self.is_compressible(l)).collect()
    }

    /// All layers at maximum rank.
    pub fn max_configuration(&self) -> RankConfiguration {
        RankConfiguration(self.max_ranks())
    }

    /// Maximum rank everywhere except pinned layers.
    pub fn base_configuration(&self) -> RankConfiguration {
        RankConfiguration(
            (1..=self.len())
                .map(|l| self.pinned_rank(l).unwrap_or(self.layer(l).max_rank()))
                .collect(),
        )
    }

    /// Rank 1 on every searchable layer, pinned ranks elsewhere.
    pub fn min_configuration(&self) -> RankConfiguration {
        RankConfiguration((1..=self.len()).map(|l| self.pinned_rank(l).unwrap_or(1)).collect())
    }

    pub fn validate_ranks(&self, ranks: &RankConfiguration) -> Result<()> {
        if ranks.len() != self.len() {
            return Err(EncError::Ranks(format!(
                "{} ranks given for {} layers",
                ranks.len(),
                self.len()
            )));
        }
        for (pos, (&r, layer)) in ranks.iter().zip(&self.layers).enumerate() {
            let l = pos + 1;
            if r == 0 || r > layer.max_rank() {
                return Err(EncError::Ranks(format!(
                    "layer {l} ({}) rank {r} outside 1..={}",
                    layer.name,
                    layer.max_rank()
                )));
            }
            if let Some(pinned) = self.pinned_rank(l) {
                if pinned != r && layer.max_rank() >= 2 {
                    return Err(EncError::Ranks(format!(
                        "layer {l} ({}) is pinned to rank {pinned}, got {r}",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks feature-map sizes and channel counts along the layer chain.
    fn check_geometry(&self) -> Result<()> {
        let Some([mut c, mut h, mut w]) = self.input else {
            return Ok(());
        };
        for layer in &self.layers {
            let err = |msg: String| EncError::layer(layer.index, &layer.name, msg);
            match layer.kind {
                LayerKind::Convolutional => {
                    if layer.in_channels != c {
                        return Err(err(format!("expects {} input channels, previous layer yields {c}", layer.in_channels)));
                    }
                    let oh = conv_output(h, layer.kernel[0], layer.stride[0]);
                    let ow = conv_output(w, layer.kernel[1], layer.stride[1]);
                    if (oh, ow) != (layer.height, layer.width) {
                        return Err(err(format!(
                            "declared output {}×{} but {h}×{w} input gives {oh}×{ow}",
                            layer.height, layer.width
                        )));
                    }
                    (c, h, w) = (layer.out_channels, oh, ow);
                }
                LayerKind::FullyConnected => {
                    if layer.in_channels != c * h * w {
                        return Err(err(format!(
                            "expects {} inputs, previous layer yields {}",
                            layer.in_channels,
                            c * h * w
                        )));
                    }
                    (c, h, w) = (layer.out_channels, 1, 1);
                }
            }
        }
        Ok(())
    }
}

/// Output extent of a zero-padded ("same") convolution.
pub fn conv_output(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

fn complete_layer(mut layer: LayerSpec) -> Result<LayerSpec> {
    layer.validate()?;
    if layer.decomposition == Decomposition::None || layer.weights.is_none() {
        return Ok(layer);
    }
    let computed = matricize_and_svd(&layer)?;
    match &layer.singular_values {
        Some(given) => {
            for (d, (g, c)) in given.iter().zip(&computed).enumerate() {
                if (g - c).abs() > SINGULAR_VALUE_TOLERANCE * computed[0].max(f64::MIN_POSITIVE) {
                    return Err(EncError::layer(
                        layer.index,
                        &layer.name,
                        format!("singular value {} is {g} but the weights give {c}", d + 1),
                    ));
                }
            }
        }
        None => {
            check_singular_values(&computed, layer.max_rank())
                .map_err(|m| EncError::layer(layer.index, &layer.name, format!("weights: {m}")))?;
            layer.singular_values = Some(computed);
        }
    }
    Ok(layer)
}

/// One rank per layer; ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankConfiguration(pub Vec<usize>);

impl RankConfiguration {
    pub fn new(ranks: Vec<usize>) -> Self {
        RankConfiguration(ranks)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    /// Copy with the rank of layer `index` (1-based) replaced.
    pub fn with_rank(&self, index: usize, rank: usize) -> Self {
        let mut ranks = self.0.clone();
        ranks[index - 1] = rank;
        RankConfiguration(ranks)
    }

    /// Coordinate-wise `self ≤ other`.
    pub fn le(&self, other: &RankConfiguration) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }
}

impl Index<usize> for RankConfiguration {
    type Output = usize;

    fn index(&self, pos: usize) -> &usize {
        &self.0[pos]
    }
}

impl fmt::Display for RankConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "]")
    }
}
