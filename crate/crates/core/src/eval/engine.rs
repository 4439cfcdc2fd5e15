//! Single-precision forward pass over (possibly truncated) networks.
//!
//! A layer below its maximum rank runs as two factor layers built from the
//! balanced truncated SVD of its matricized weights: spatial layers as a
//! `D×1` then `1×D` convolution, channel layers as a `D×D` convolution to
//! `r` channels then `1×1`, fully-connected layers as two matrix products.
//! Layers at full rank run densely. Convolutions are zero-padded by
//! `(k−1)/2` on each side. Argmax ties go to the lowest class index.

use ndarray::Array2;
use rayon::prelude::*;

use super::dataset::MiniDataset;
use super::AccuracyEvaluator;
use crate::error::{EncError, Result};
use crate::linalg::ThinSvd;
use crate::network::{conv_output, Activation, Decomposition, LayerKind, LayerSpec, NetworkSpec, RankConfiguration};

#[derive(Debug, Clone)]
struct Conv {
    /// `out × (in·kh·kw)`, columns ordered `(in, row, col)`.
    kernel: Array2<f32>,
    in_channels: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
}

#[derive(Debug, Clone)]
enum Op {
    Conv(Conv),
    /// `out × in`.
    Dense(Array2<f32>),
}

#[derive(Debug, Clone)]
struct Stage {
    op: Op,
    bias: Option<Vec<f32>>,
    relu: bool,
}

/// A network lowered to a fixed list of dense operations for one rank
/// configuration.
#[derive(Debug, Clone)]
pub struct CompiledNetwork {
    input: [usize; 3],
    stages: Vec<Stage>,
}

impl CompiledNetwork {
    /// `svds[l]` may hold a precomputed SVD of layer `l+1`; missing entries
    /// are computed on demand.
    pub fn compile(network: &NetworkSpec, ranks: &RankConfiguration, svds: &[Option<ThinSvd>]) -> Result<Self> {
        network.validate_ranks(ranks)?;
        let input = network
            .input
            .ok_or_else(|| EncError::Shape("network has no input geometry".into()))?;
        let last = network.len();
        let mut stages = Vec::with_capacity(network.len() * 2);
        for layer in network.layers() {
            let rank = ranks[layer.index - 1];
            let relu = layer.activation == Activation::Relu && layer.index != last;
            let bias = layer.bias.clone();
            if layer.decomposition == Decomposition::None || rank == layer.max_rank() {
                stages.push(Stage {
                    op: dense_op(layer)?,
                    bias,
                    relu,
                });
                continue;
            }
            let computed;
            let svd = match svds.get(layer.index - 1).and_then(Option::as_ref) {
                Some(s) => s,
                None => {
                    computed = ThinSvd::new(layer.matricize()?);
                    &computed
                }
            };
            let (first, second) = factor_ops(layer, svd, rank);
            stages.push(Stage {
                op: first,
                bias: None,
                relu: false,
            });
            stages.push(Stage { op: second, bias, relu });
        }
        Ok(CompiledNetwork { input, stages })
    }

    /// Unnormalized class scores for one item laid out `(channel, row, col)`.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        let [mut c, mut h, mut w] = self.input;
        if input.len() != c * h * w {
            return Err(EncError::Shape(format!(
                "input holds {} values, network expects {c}×{h}×{w}",
                input.len()
            )));
        }
        let mut x = input.to_vec();
        for stage in &self.stages {
            let (mut y, shape) = match &stage.op {
                Op::Conv(conv) => {
                    if conv.in_channels != c {
                        return Err(EncError::Shape(format!(
                            "convolution expects {} channels, got {c}",
                            conv.in_channels
                        )));
                    }
                    conv_forward(conv, &x, [c, h, w])
                }
                Op::Dense(m) => {
                    if m.ncols() != x.len() {
                        return Err(EncError::Shape(format!(
                            "dense layer expects {} inputs, got {}",
                            m.ncols(),
                            x.len()
                        )));
                    }
                    let v = ndarray::ArrayView1::from(&x[..]);
                    (m.dot(&v).to_vec(), [m.nrows(), 1, 1])
                }
            };
            if let Some(bias) = &stage.bias {
                let plane = shape[1] * shape[2];
                for (o, b) in bias.iter().enumerate() {
                    for v in &mut y[o * plane..(o + 1) * plane] {
                        *v += b;
                    }
                }
            }
            if stage.relu {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            x = y;
            [c, h, w] = shape;
        }
        Ok(x)
    }

    /// Fraction of items whose top-scoring class equals the label.
    pub fn accuracy(&self, data: &MiniDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(EncError::Argument("empty dataset".into()));
        }
        let correct = (0..data.len())
            .into_par_iter()
            .map(|i| {
                self.forward(data.item(i))
                    .map(|scores| usize::from(argmax(&scores) == data.labels[i] as usize))
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))?;
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn dense_op(layer: &LayerSpec) -> Result<Op> {
    let weights = layer
        .weights
        .clone()
        .ok_or_else(|| EncError::layer(layer.index, &layer.name, "weights required for inference"))?;
    let cols = layer.in_channels * layer.kernel[0] * layer.kernel[1];
    let kernel = Array2::from_shape_vec((layer.out_channels, cols), weights)
        .map_err(|e| EncError::Shape(e.to_string()))?;
    Ok(match layer.kind {
        LayerKind::FullyConnected => Op::Dense(kernel),
        LayerKind::Convolutional => Op::Conv(Conv {
            kernel,
            in_channels: layer.in_channels,
            kh: layer.kernel[0],
            kw: layer.kernel[1],
            stride: layer.stride,
        }),
    })
}

fn to_f32(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(i, j)| f(i, j) as f32)
}

/// First and second factor operations of a rank-`rank` truncation.
fn factor_ops(layer: &LayerSpec, svd: &ThinSvd, rank: usize) -> (Op, Op) {
    let (a, b) = svd.factors(rank);
    let (i_ch, o_ch, d) = (layer.in_channels, layer.out_channels, layer.window());
    let [sh, sw] = layer.stride;
    match (layer.kind, layer.decomposition) {
        (LayerKind::FullyConnected, _) => (
            Op::Dense(to_f32(rank, i_ch, |k, i| a[(i, k)])),
            Op::Dense(to_f32(o_ch, rank, |o, k| b[(k, o)])),
        ),
        (_, Decomposition::Spatial) => (
            Op::Conv(Conv {
                kernel: to_f32(rank, i_ch * d, |k, row| a[(row, k)]),
                in_channels: i_ch,
                kh: d,
                kw: 1,
                stride: [sh, 1],
            }),
            Op::Conv(Conv {
                kernel: to_f32(o_ch, rank * d, |o, col| b[(col / d, o * d + col % d)]),
                in_channels: rank,
                kh: 1,
                kw: d,
                stride: [1, sw],
            }),
        ),
        _ => (
            Op::Conv(Conv {
                kernel: to_f32(rank, i_ch * d * d, |k, row| a[(row, k)]),
                in_channels: i_ch,
                kh: d,
                kw: d,
                stride: layer.stride,
            }),
            Op::Conv(Conv {
                kernel: to_f32(o_ch, rank, |o, k| b[(k, o)]),
                in_channels: rank,
                kh: 1,
                kw: 1,
                stride: [1, 1],
            }),
        ),
    }
}

fn conv_forward(conv: &Conv, x: &[f32], [c, h, w]: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
    let (kh, kw) = (conv.kh, conv.kw);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = conv_output(h, kh, conv.stride[0]);
    let ow = conv_output(w, kw, conv.stride[1]);
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * conv.stride[0] + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * conv.stride[1] + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    let out = conv.kernel.dot(&cols);
    let out_c = conv.kernel.nrows();
    (out.into_raw_vec_and_offset().0, [out_c, oh, ow])
}

/// Scores of `network` truncated to `ranks` for a single input.
pub fn forward(network: &NetworkSpec, ranks: &RankConfiguration, input: &[f32]) -> Result<Vec<f32>> {
    CompiledNetwork::compile(network, ranks, &[])?.forward(input)
}

/// Evaluates truncated networks on a fixed dataset with the forward engine.
///
/// SVDs are computed once at construction, so the evaluator must only be
/// used with the network it was built for.
pub struct MiniEvaluator {
    data: MiniDataset,
    svds: Vec<Option<ThinSvd>>,
    fingerprint: Vec<(String, usize)>,
}

impl MiniEvaluator {
    pub fn new(network: &NetworkSpec, data: MiniDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(EncError::Argument("evaluation dataset is empty".into()));
        }
        if let Some(input) = network.input {
            if input != data.shape {
                return Err(EncError::Shape(format!(
                    "network input {input:?} does not match dataset items {:?}",
                    data.shape
                )));
            }
        }
        let svds = network
            .layers()
            .par_iter()
            .map(|layer| {
                if layer.decomposition == Decomposition::None || layer.max_rank() < 2 || layer.weights.is_none() {
                    Ok(None)
                } else {
                    layer.matricize().map(|m| Some(ThinSvd::new(m)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MiniEvaluator {
            data,
            svds,
            fingerprint: fingerprint(network),
        })
    }

    pub fn dataset(&self) -> &MiniDataset {
        &self.data
    }

    pub fn compile(&self, network: &NetworkSpec, ranks: &RankConfiguration) -> Result<CompiledNetwork> {
        if fingerprint(network) != self.fingerprint {
            return Err(EncError::Argument("evaluator was built for a different network".into()));
        }
        CompiledNetwork::compile(network, ranks, &self.svds)
    }
}

fn fingerprint(network: &NetworkSpec) -> Vec<(String, usize)> {
    network
        .layers()
        .iter()
        .map(|l| (l.name.clone(), l.weights.as_ref().map_or(0, Vec::len)))
        .collect()
}

impl AccuracyEvaluator for MiniEvaluator {
    fn evaluate(&self, network: &NetworkSpec, ranks: &RankConfiguration) -> Result<f64> {
        self.compile(network, ranks)?.accuracy(&self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_conv() {
        let layer = LayerSpec::convolutional("id", 2, 2, 1, 2, 2, Decomposition::Spatial)
            .with_weights(vec![1.0, 0.0, 0.0, 1.0]);
        let net = NetworkSpec::new(vec![layer]).unwrap().with_input([2, 2, 2]).unwrap();
        let x: Vec<f32> = (0..8).map(|v| v as f32 - 3.5).collect();
        let y = forward(&net, &net.max_configuration(), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn same_padding_conv_matches_direct_sum() {
        // 1 input channel, 1 output channel, 3×3 kernel on a 3×3 image
        let kernel: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let layer = LayerSpec::convolutional("c", 3, 3, 3, 1, 1, Decomposition::None).with_weights(kernel.clone());
        let net = NetworkSpec::new(vec![layer]).unwrap().with_input([1, 3, 3]).unwrap();
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let y = forward(&net, &net.max_configuration(), &x).unwrap();
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                let mut s = 0.0;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..3).contains(&iy) && (0..3).contains(&ix) {
                            s += kernel[(ky * 3 + kx) as usize] * x[(iy * 3 + ix) as usize];
                        }
                    }
                }
                assert_eq!(y[(oy * 3 + ox) as usize], s);
            }
        }
    }
}
