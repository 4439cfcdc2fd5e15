//! Materializes a rank configuration as an explicitly factorized network.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::complexity::{coefficient, dense_total, ComplexityMode, ComplexityModel};
use crate::error::{EncError, Result};
use crate::linalg::ThinSvd;
use crate::network::{conv_output, Activation, Decomposition, LayerKind, LayerSpec, NetworkSpec, RankConfiguration};

/// One layer split into two factor layers.
#[derive(Debug, Clone)]
pub struct FactorizedLayer {
    /// 1-based index of the original layer.
    pub index: usize,
    pub rank: usize,
    pub first: LayerSpec,
    pub second: LayerSpec,
    /// `‖W − Ŵ_r‖_F` of the matricized weights.
    pub frobenius_error: f64,
    /// `‖W‖_F`.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub index: usize,
    pub name: String,
    pub decomposition: Decomposition,
    pub rank: usize,
    pub max_rank: usize,
    pub frobenius_error: f64,
    pub relative_error: f64,
    pub flops_coefficient: u64,
    pub params_coefficient: u64,
}

impl LayerReport {
    pub fn flops(&self) -> u64 {
        self.flops_coefficient * self.rank as u64
    }

    pub fn params(&self) -> u64 {
        self.params_coefficient * self.rank as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub layers: Vec<LayerReport>,
    pub flops: u64,
    pub params: u64,
    /// `C_orig` in each mode.
    pub original_flops: u64,
    pub original_params: u64,
    /// Cost of the network run without any decomposition.
    pub dense_flops: u64,
    pub dense_params: u64,
}

impl DecompositionReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let err = |e: csv::Error| EncError::Argument(format!("csv: {e}"));
        writer
            .write_record([
                "layer",
                "name",
                "decomposition",
                "rank",
                "r_max",
                "frobenius_error",
                "relative_error",
                "flops",
                "params",
            ])
            .map_err(err)?;
        for l in &self.layers {
            writer
                .write_record([
                    l.index.to_string(),
                    l.name.clone(),
                    decomposition_name(l.decomposition).to_string(),
                    l.rank.to_string(),
                    l.max_rank.to_string(),
                    format!("{:.9e}", l.frobenius_error),
                    format!("{:.9e}", l.relative_error),
                    l.flops().to_string(),
                    l.params().to_string(),
                ])
                .map_err(err)?;
        }
        writer
            .write_record([
                "total".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                self.flops.to_string(),
                self.params.to_string(),
            ])
            .map_err(err)?;
        writer.flush().map_err(|e| EncError::Argument(format!("csv: {e}")))?;
        Ok(())
    }
}

fn decomposition_name(d: Decomposition) -> &'static str {
    match d {
        Decomposition::Spatial => "spatial",
        Decomposition::Channel => "channel",
        Decomposition::None => "none",
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    a as f64 / b as f64
}

impl fmt::Display for DecompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5}  {:<16} {:<8} {:>6} {:>6} {:>12} {:>9} {:>14} {:>12}",
            "layer", "name", "kind", "rank", "r_max", "error", "rel.err", "flops", "params"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5}  {:<16} {:<8} {:>6} {:>6} {:>12.4e} {:>9.4} {:>14} {:>12}",
                l.index,
                l.name,
                decomposition_name(l.decomposition),
                l.rank,
                l.max_rank,
                l.frobenius_error,
                l.relative_error,
                l.flops(),
                l.params()
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "flops   {:>14}  {:.4} of C_orig ({}), {:.4} of dense ({})",
            self.flops,
            ratio(self.flops, self.original_flops),
            self.original_flops,
            ratio(self.flops, self.dense_flops),
            self.dense_flops
        )?;
        write!(
            f,
            "params  {:>14}  {:.4} of C_orig ({}), {:.4} of dense ({})",
            self.params,
            ratio(self.params, self.original_params),
            self.original_params,
            ratio(self.params, self.dense_params),
            self.dense_params
        )
    }
}

/// Splits a layer into its two rank-`rank` factor layers.
pub fn factorize_layer(layer: &LayerSpec, rank: usize, input_hw: Option<[usize; 2]>) -> Result<FactorizedLayer> {
    if layer.decomposition == Decomposition::None {
        return Err(EncError::layer(layer.index, &layer.name, "layer is not decomposed"));
    }
    if rank == 0 || rank > layer.max_rank() {
        return Err(EncError::layer(
            layer.index,
            &layer.name,
            format!("rank {rank} outside 1..={}", layer.max_rank()),
        ));
    }
    let svd = ThinSvd::new(layer.matricize()?);
    let (a, b) = svd.factors(rank);
    let (i_ch, o_ch, d) = (layer.in_channels, layer.out_channels, layer.window());
    let [sh, sw] = layer.stride;
    let base = |name: &str, kind: LayerKind, in_channels: usize, out_channels: usize| LayerSpec {
        index: 0,
        name: format!("{}.{name}", layer.name),
        kind,
        width: layer.width,
        height: layer.height,
        kernel: [1, 1],
        stride: [1, 1],
        in_channels,
        out_channels,
        decomposition: Decomposition::None,
        activation: Activation::Identity,
        weights: None,
        bias: None,
        singular_values: None,
    };
    let mut first = base("u", layer.kind, i_ch, rank);
    let mut second = base("v", layer.kind, rank, o_ch);
    second.activation = layer.activation;
    second.bias = layer.bias.clone();
    match (layer.kind, layer.decomposition) {
        (LayerKind::FullyConnected, _) => {
            first.weights = Some(collect(rank, i_ch, |k, i| a[(i, k)]));
            second.weights = Some(collect(o_ch, rank, |o, k| b[(k, o)]));
        }
        (_, Decomposition::Spatial) => {
            first.kernel = [d, 1];
            first.stride = [sh, 1];
            if let Some([_, w_in]) = input_hw {
                first.width = conv_output(w_in, 1, 1);
            }
            first.weights = Some(collect(rank, i_ch * d, |k, row| a[(row, k)]));
            second.kernel = [1, d];
            second.stride = [1, sw];
            second.weights = Some(collect(o_ch, rank * d, |o, col| b[(col / d, o * d + col % d)]));
        }
        _ => {
            first.kernel = [d, d];
            first.stride = layer.stride;
            first.weights = Some(collect(rank, i_ch * d * d, |k, row| a[(row, k)]));
            second.weights = Some(collect(o_ch, rank, |o, k| b[(k, o)]));
        }
    }
    Ok(FactorizedLayer {
        index: layer.index,
        rank,
        first,
        second,
        frobenius_error: svd.tail_norm(rank),
        norm: svd.tail_norm(0),
    })
}

/// Row-major `rows × cols` values of `f`, as `f32`.
fn collect(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f32> {
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            v.push(f(r, c) as f32);
        }
    }
    v
}

/// Input extents `[height, width]` of every layer, when the network declares
/// its input geometry.
fn input_extents(network: &NetworkSpec) -> Vec<Option<[usize; 2]>> {
    let Some([_, mut h, mut w]) = network.input else {
        return vec![None; network.len()];
    };
    network
        .layers()
        .iter()
        .map(|l| {
            let here = [h, w];
            (h, w) = match l.kind {
                LayerKind::Convolutional => (l.height, l.width),
                LayerKind::FullyConnected => (1, 1),
            };
            Some(here)
        })
        .collect()
}

/// Factorizes every decomposed layer at its rank in `ranks`; undecomposed
/// layers are copied. Returns the factorized network and a report.
pub fn decompose_network(network: &NetworkSpec, ranks: &RankConfiguration) -> Result<(NetworkSpec, DecompositionReport)> {
    network.validate_ranks(ranks)?;
    let extents = input_extents(network);
    let parts: Vec<Option<FactorizedLayer>> = network
        .layers()
        .par_iter()
        .map(|layer| {
            if layer.decomposition == Decomposition::None {
                return Ok(None);
            }
            if layer.weights.is_none() {
                return Err(EncError::layer(layer.index, &layer.name, "weights required to decompose"));
            }
            factorize_layer(layer, ranks[layer.index - 1], extents[layer.index - 1]).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut layers = Vec::new();
    let mut rows = Vec::new();
    for (layer, part) in network.layers().iter().zip(&parts) {
        let (error, norm) = match part {
            Some(p) => {
                layers.push(p.first.clone());
                layers.push(p.second.clone());
                (p.frobenius_error, p.norm)
            }
            None => {
                layers.push(layer.clone());
                (0.0, 0.0)
            }
        };
        rows.push(LayerReport {
            index: layer.index,
            name: layer.name.clone(),
            decomposition: layer.decomposition,
            rank: ranks[layer.index - 1],
            max_rank: layer.max_rank(),
            frobenius_error: error,
            relative_error: if norm > 0.0 { error / norm } else { 0.0 },
            flops_coefficient: coefficient(layer, ComplexityMode::Flops),
            params_coefficient: coefficient(layer, ComplexityMode::Parameters),
        });
    }
    let flops_model = ComplexityModel::new(network, ComplexityMode::Flops);
    let params_model = ComplexityModel::new(network, ComplexityMode::Parameters);
    let report = DecompositionReport {
        flops: flops_model.total(ranks)?,
        params: params_model.total(ranks)?,
        original_flops: flops_model.original(),
        original_params: params_model.original(),
        dense_flops: dense_total(network, ComplexityMode::Flops),
        dense_params: dense_total(network, ComplexityMode::Parameters),
        layers: rows,
    };
    let mut factorized = NetworkSpec::new(layers)?;
    factorized.name = format!("{}-factorized", network.name);
    factorized.recorded_accuracy = None;
    if let Some(input) = network.input {
        factorized = factorized.with_input(input)?;
    }
    Ok((factorized, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::forward;

    #[test]
    fn diagonal_fc_rank_one_error() {
        let layer = LayerSpec::fully_connected("fc", 2, 2).with_weights(vec![3.0, 0.0, 0.0, 1.0]);
        let net = NetworkSpec::new(vec![layer]).unwrap();
        let (factorized, report) = decompose_network(&net, &RankConfiguration::new(vec![1])).unwrap();
        assert!((report.layers[0].frobenius_error - 1.0).abs() < 1e-12);
        assert_eq!(factorized.len(), 2);
        assert_eq!(report.flops, 4);
        assert_eq!(report.dense_flops, 4);
    }

    #[test]
    fn full_rank_factorization_is_exact() {
        let weights: Vec<f32> = (0..2 * 3 * 9).map(|k| ((k * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let conv = LayerSpec::convolutional("c", 4, 4, 3, 3, 2, Decomposition::Spatial).with_weights(weights);
        let net = NetworkSpec::new(vec![conv]).unwrap().with_input([3, 4, 4]).unwrap();
        let (factorized, report) = decompose_network(&net, &net.max_configuration()).unwrap();
        assert!(report.layers[0].frobenius_error < 1e-9);
        assert_eq!(report.flops, report.original_flops);
        let input: Vec<f32> = (0..48).map(|k| (k as f32 * 0.37).sin()).collect();
        let dense = forward(&net, &net.max_configuration(), &input).unwrap();
        let split = forward(&factorized, &factorized.max_configuration(), &input).unwrap();
        for (a, b) in dense.iter().zip(&split) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
        }
    }
}
