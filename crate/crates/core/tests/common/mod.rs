//! Independent oracles and synthetic networks shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use enc_core::curve::{CurveKind, LayerCurve};
use enc_core::network::load_network;
use enc_core::{
    Budget, ComplexityMode, ComplexityModel, CurveSet, DatasetFile, Decomposition, LayerSpec, MetricKind, NetworkMetric,
    NetworkSpec, RankConfiguration,
};
use enc_core::search::SearchSpace;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture(seed: u32) -> NetworkSpec {
    load_network(fixture_dir().join(format!("fixture_s{seed}.toml"))).expect("fixture network")
}

pub fn fixture_data() -> DatasetFile {
    DatasetFile::load(fixture_dir().join("fixture_data.bin")).expect("fixture dataset")
}

/// Singular values of a row-major `rows × cols` matrix by one-sided Jacobi
/// rotations, sorted nonincreasing.
pub fn jacobi_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    // work on columns of the taller orientation
    let (m, n, a) = if rows >= cols {
        (rows, cols, data.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        (cols, rows, t)
    };
    let mut u = a;
    let col = |u: &[f64], j: usize, i: usize| u[i * n + j];
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (col(&u, p, i), col(&u, q, i));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[i * n + p], u[i * n + q]);
                    u[i * n + p] = c * x - s * y;
                    u[i * n + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..n).map(|j| (0..m).map(|i| col(&u, j, i).powi(2)).sum::<f64>().sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    sigma
}

/// Matricized weights, row-major, straight from the `O×I×D×D` layout.
pub fn matricize(layer: &LayerSpec) -> (usize, usize, Vec<f64>) {
    let w = layer.weights.as_ref().expect("weights");
    let (i_ch, o_ch, d) = (layer.in_channels, layer.out_channels, layer.window());
    match layer.decomposition {
        Decomposition::Spatial => {
            let (rows, cols) = (i_ch * d, o_ch * d);
            let mut m = vec![0.0; rows * cols];
            for o in 0..o_ch {
                for i in 0..i_ch {
                    for y in 0..d {
                        for x in 0..d {
                            m[(i * d + y) * cols + o * d + x] = w[((o * i_ch + i) * d + y) * d + x] as f64;
                        }
                    }
                }
            }
            (rows, cols, m)
        }
        _ => {
            let (rows, cols) = (i_ch * d * d, o_ch);
            let mut m = vec![0.0; rows * cols];
            for o in 0..o_ch {
                for k in 0..rows {
                    m[k * cols + o] = w[o * rows + k] as f64;
                }
            }
            (rows, cols, m)
        }
    }
}

/// `y(r) = (S_r − S_1)/(S_max − S_1)` with `S_r` the sum of the `r` largest
/// singular values, for `r = 1..=r_max` (index 0 unused).
pub fn direct_pca(sigma: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(sigma.len());
    let mut sum = 0.0;
    for v in sigma {
        sum += v;
        s.push(sum);
    }
    let (first, last) = (s[0], s[s.len() - 1]);
    let mut y = vec![0.0];
    y.extend(s.iter().map(|v| (v - first) / (last - first)));
    y
}

pub fn random_sigma(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.dedup();
    while s.len() < n {
        let last = *s.last().unwrap();
        s.push(last * 0.5);
    }
    s
}

/// Fully-connected network with the given `(in, out)` shapes and random
/// singular values.
pub fn synthetic_fc(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> NetworkSpec {
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(k, &(i, o))| {
            LayerSpec::fully_connected(format!("fc{}", k + 1), i, o).with_singular_values(random_sigma(rng, i.min(o)))
        })
        .collect();
    NetworkSpec::new(layers).unwrap()
}

/// Random convolutional network of `n` spatial or channel layers with
/// `r_max` at least `min_rank`.
pub fn synthetic_conv(rng: &mut ChaCha8Rng, n: usize, min_rank: usize) -> NetworkSpec {
    let layers = (0..n)
        .map(|k| {
            let d = 3;
            let i = rng.random_range(min_rank.div_ceil(d).max(2)..=24);
            let o = rng.random_range(min_rank.max(2)..=min_rank.max(2) + 16);
            let hw = [4, 8, 16][rng.random_range(0..3)];
            let decomposition = if rng.random_bool(0.5) { Decomposition::Spatial } else { Decomposition::Channel };
            let layer = LayerSpec::convolutional(format!("conv{}", k + 1), hw, hw, d, i, o, decomposition);
            let m = layer.max_rank();
            layer.with_singular_values(random_sigma(rng, m))
        })
        .collect();
    NetworkSpec::new(layers).unwrap()
}

/// Measured-kind curves known at every integer rank, with exact knot values.
pub fn random_measured(rng: &mut ChaCha8Rng, net: &NetworkSpec) -> (CurveSet, Vec<Vec<f64>>) {
    let mut tables = Vec::new();
    let mut curves = Vec::new();
    for l in 1..=net.len() {
        let m = net.layer(l).max_rank();
        let mut steps: Vec<f64> = (1..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = steps.iter().sum();
        steps.iter_mut().for_each(|s| *s /= total);
        let mut y = vec![0.0, 0.0];
        let mut acc = 0.0;
        for (k, s) in steps.iter().enumerate() {
            acc += s;
            y.push(if k + 2 == m { 1.0 } else { acc });
        }
        let ranks: Vec<usize> = (1..=m).collect();
        curves.push(Some(LayerCurve::from_knots(l, CurveKind::Measured, &ranks, &y[1..]).unwrap()));
        tables.push(y);
    }
    let pca = CurveSet::pca(net).unwrap().get(CurveKind::Pca).unwrap().to_vec();
    (CurveSet::from_curves(pca, Some(curves)).unwrap(), tables)
}

/// Direct product-form metric values, without logarithms.
pub struct DirectMetric {
    pub pca: Vec<Vec<f64>>,
    pub measured: Option<Vec<Vec<f64>>>,
    pub model: ComplexityModel,
}

impl DirectMetric {
    pub fn new(net: &NetworkSpec, measured: Option<Vec<Vec<f64>>>, mode: ComplexityMode) -> Self {
        let pca = net.layers().iter().map(|l| direct_pca(l.singular_values.as_ref().unwrap())).collect();
        DirectMetric {
            pca,
            measured,
            model: ComplexityModel::new(net, mode),
        }
    }

    pub fn a_p(&self, r: &[usize]) -> f64 {
        r.iter().zip(&self.pca).map(|(&r, y)| y[r]).product()
    }

    pub fn a_m(&self, r: &[usize]) -> f64 {
        r.iter().zip(self.measured.as_ref().unwrap()).map(|(&r, y)| y[r]).product()
    }

    pub fn value(&self, kind: MetricKind, r: &[usize]) -> f64 {
        match kind {
            MetricKind::Pca => self.a_p(r),
            MetricKind::Measured => self.a_m(r),
            MetricKind::Combined => {
                self.a_p(r) * self.model.total_of(r).unwrap() as f64 / self.model.original() as f64 + self.a_m(r)
            }
        }
    }
}

/// Every stepped configuration of `space` whose complexity lies strictly
/// inside `C_t ± δ_m`.
pub fn brute_force_window(space: &SearchSpace, model: &ComplexityModel, budget: &Budget) -> BTreeSet<Vec<usize>> {
    let n = space.r_max.len();
    let values: Vec<Vec<usize>> = (0..n)
        .map(|l| {
            let (lo, hi, t) = (space.r_min[l], space.r_max[l], space.steps[l]);
            (0..=(hi - lo) / t).map(|k| hi - k * t).collect()
        })
        .collect();
    let mut out = BTreeSet::new();
    let mut idx = vec![0usize; n];
    loop {
        let r: Vec<usize> = (0..n).map(|l| values[l][idx[l]]).collect();
        let c = model.total_of(&r).unwrap() as f64;
        if budget.target - budget.candidate_margin < c && c < budget.target + budget.candidate_margin {
            out.insert(r);
        }
        let mut k = 0;
        loop {
            if k == n {
                return out;
            }
            idx[k] += 1;
            if idx[k] < values[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// The configuration maximizing `score`, ties to the lexicographically
/// smallest.
pub fn argmax<'a>(set: impl IntoIterator<Item = &'a Vec<usize>>, score: impl Fn(&[usize]) -> f64) -> Vec<usize> {
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for r in set {
        let v = score(r);
        match best {
            Some((b, _)) if v <= b => {}
            _ => best = Some((v, r)),
        }
    }
    best.unwrap().1.clone()
}

pub fn metric_for(net: &NetworkSpec, kind: MetricKind, curves: CurveSet) -> NetworkMetric {
    NetworkMetric::new(kind, curves, ComplexityModel::new(net, ComplexityMode::Flops)).unwrap()
}

pub fn ranks(v: &[usize]) -> RankConfiguration {
    RankConfiguration::new(v.to_vec())
}

/// VGG-16 convolutional layers at 224×224 input, spatially decomposed,
/// with power-law singular values jittered by `rng`.
pub fn vgg16(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let dims = [
        (224, 3, 64),
        (224, 64, 64),
        (112, 64, 128),
        (112, 128, 128),
        (56, 128, 256),
        (56, 256, 256),
        (56, 256, 256),
        (28, 256, 512),
        (28, 512, 512),
        (28, 512, 512),
        (14, 512, 512),
        (14, 512, 512),
        (14, 512, 512),
    ];
    let layers = dims
        .iter()
        .enumerate()
        .map(|(k, &(hw, i, o))| {
            let layer = LayerSpec::convolutional(format!("conv{}", k + 1), hw, hw, 3, i, o, Decomposition::Spatial);
            let decay = rng.random_range(0.4..1.2);
            let sigma = (1..=layer.max_rank()).map(|j| (j as f64).powf(-decay)).collect();
            layer.with_singular_values(sigma)
        })
        .collect();
    let mut net = NetworkSpec::new(layers).unwrap();
    net.name = "vgg16-shaped".into();
    net
}

/// Naive `f64` forward pass with per-layer weights, zero padding of
/// `(k−1)/2`, ReLU on every layer but the last.
pub fn dense_forward(net: &NetworkSpec, weights: &[Vec<f64>], input: &[f32]) -> Vec<f64> {
    let [mut c, mut h, mut w] = net.input.expect("input geometry");
    let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let last = net.len();
    for (layer, wt) in net.layers().iter().zip(weights) {
        let (o_ch, i_ch) = (layer.out_channels, layer.in_channels);
        let (mut y, shape) = match layer.kind {
            enc_core::LayerKind::FullyConnected => {
                assert_eq!(x.len(), i_ch);
                let y: Vec<f64> = (0..o_ch).map(|o| (0..i_ch).map(|i| wt[o * i_ch + i] * x[i]).sum()).collect();
                (y, [o_ch, 1, 1])
            }
            enc_core::LayerKind::Convolutional => {
                assert_eq!(c, i_ch);
                let [kh, kw] = layer.kernel;
                let [sh, sw] = layer.stride;
                let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
                let oh = (h + 2 * ph - kh) / sh + 1;
                let ow = (w + 2 * pw - kw) / sw + 1;
                let mut y = vec![0.0; o_ch * oh * ow];
                for o in 0..o_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for i in 0..i_ch {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * sh + ky) as isize - ph as isize;
                                        let ix = (ox * sw + kx) as isize - pw as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        s += wt[((o * i_ch + i) * kh + ky) * kw + kx]
                                            * x[(i * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                (y, [o_ch, oh, ow])
            }
        };
        if let Some(b) = &layer.bias {
            let plane = shape[1] * shape[2];
            for (o, &bv) in b.iter().enumerate() {
                y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv as f64);
            }
        }
        if layer.activation == enc_core::network::Activation::Relu && layer.index != last {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = y;
        [c, h, w] = shape;
    }
    x
}

pub fn weights_f64(layer: &LayerSpec) -> Vec<f64> {
    layer.weights.as_ref().unwrap().iter().map(|&v| v as f64).collect()
}

/// Weight tensor of a row-major matricized matrix, inverting [`matricize`].
pub fn unmatricize(layer: &LayerSpec, m: &[f64]) -> Vec<f64> {
    let (i_ch, o_ch, d) = (layer.in_channels, layer.out_channels, layer.window());
    let mut w = vec![0.0; layer.weight_len()];
    match layer.decomposition {
        Decomposition::Spatial => {
            let cols = o_ch * d;
            for o in 0..o_ch {
                for i in 0..i_ch {
                    for y in 0..d {
                        for x in 0..d {
                            w[((o * i_ch + i) * d + y) * d + x] = m[(i * d + y) * cols + o * d + x];
                        }
                    }
                }
            }
        }
        _ => {
            let rows = i_ch * d * d;
            for o in 0..o_ch {
                for k in 0..rows {
                    w[o * rows + k] = m[k * o_ch + o];
                }
            }
        }
    }
    w
}

/// Best rank-1 approximation `σ₁u₁v₁ᵀ` by power iteration on `MᵀM`.
pub fn rank_one(rows: usize, cols: usize, m: &[f64]) -> Vec<f64> {
    let mut v = vec![1.0; cols];
    let mut u = vec![0.0; rows];
    for _ in 0..5000 {
        for i in 0..rows {
            u[i] = (0..cols).map(|j| m[i * cols + j] * v[j]).sum();
        }
        let mut next: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| m[i * cols + j] * u[i]).sum()).collect();
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        next.iter_mut().for_each(|x| *x /= n);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    for i in 0..rows {
        u[i] = (0..cols).map(|j| m[i * cols + j] * v[j]).sum();
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = u[i] * v[j];
        }
    }
    out
}
