//! Trains the small convolutional fixture networks used by the tests.
//!
//! ```text
//! cargo run --release -p enc-core --example train_fixture -- crates/core/fixtures 1 2 3 4 5
//! ```
//!
//! Writes `fixture_data.bin` (a 10-class synthetic image dataset built from
//! Gaussian class prototypes plus noise; its train split holds items drawn
//! like the training set but not trained on) and, per seed, `fixture_s<seed>.toml`
//! with its weight blob. The network is four 3×3 convolutions and one
//! fully-connected layer on 3×8×8 inputs; the seed controls initialization
//! and batch order. The dataset is the same for every seed.

use std::path::PathBuf;

use enc_core::eval::{AccuracyEvaluator, DatasetFile, MiniDataset, MiniEvaluator};
use enc_core::network::{load_network, save_network, Activation, Decomposition, LayerSpec, NetworkSpec};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

const DATA_SEED: u64 = 7;
const CLASSES: usize = 10;
const SHAPE: [usize; 3] = [3, 8, 8];
const TRAIN_ITEMS: usize = 6000;
/// Held-out items shipped as the train split, used for measured curves.
const CALIBRATION_ITEMS: usize = 300;
const VALIDATION_ITEMS: usize = 500;
const NOISE: f32 = 3.5;
const EPOCHS: usize = 20;
const BATCH: usize = 32;
const LEARNING_RATE: f32 = 0.02;
const MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    /// Input extent (square).
    size: usize,
}

impl Conv {
    fn out(&self) -> usize {
        (self.size - 1) / self.stride + 1
    }
}

const K: usize = 3;
const CONVS: [Conv; 4] = [
    Conv { cin: 3, cout: 16, stride: 1, size: 8 },
    Conv { cin: 16, cout: 32, stride: 2, size: 8 },
    Conv { cin: 32, cout: 32, stride: 1, size: 4 },
    Conv { cin: 32, cout: 64, stride: 2, size: 4 },
];
const FC_IN: usize = 64 * 2 * 2;

#[derive(Clone)]
struct Params {
    w: Vec<Array2<f32>>,
    b: Vec<Vec<f32>>,
}

impl Params {
    fn zeros_like(other: &Params) -> Params {
        Params {
            w: other.w.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            b: other.b.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    fn add(mut self, other: Params) -> Params {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }
}

fn init(rng: &mut ChaCha8Rng) -> Params {
    let mut w = Vec::new();
    let mut b = Vec::new();
    for c in CONVS {
        let fan_in = c.cin * K * K;
        let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).unwrap();
        w.push(Array2::from_shape_fn((c.cout, fan_in), |_| normal.sample(rng)));
        b.push(vec![0.0; c.cout]);
    }
    let normal = Normal::new(0.0, (1.0 / FC_IN as f32).sqrt()).unwrap();
    w.push(Array2::from_shape_fn((CLASSES, FC_IN), |_| normal.sample(rng)));
    b.push(vec![0.0; CLASSES]);
    Params { w, b }
}

fn im2col(x: &[f32], c: usize, size: usize, stride: usize) -> Array2<f32> {
    let out = (size - 1) / stride + 1;
    let mut cols = Array2::<f32>::zeros((c * K * K, out * out));
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * K + ky) * K + kx;
                for oy in 0..out {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    for ox in 0..out {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= size as isize {
                            continue;
                        }
                        cols[(row, oy * out + ox)] = x[(ch * size + iy as usize) * size + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, c: usize, size: usize, stride: usize) -> Vec<f32> {
    let out = (size - 1) / stride + 1;
    let mut x = vec![0.0; c * size * size];
    for ch in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ch * K + ky) * K + kx;
                for oy in 0..out {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= size as isize {
                        continue;
                    }
                    for ox in 0..out {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= size as isize {
                            continue;
                        }
                        x[(ch * size + iy as usize) * size + ix as usize] += cols[(row, oy * out + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Gradient of the cross-entropy loss for one item.
fn gradient(p: &Params, x: &[f32], label: usize) -> Params {
    let mut cols = Vec::new();
    let mut acts: Vec<Array2<f32>> = Vec::new();
    let mut a = x.to_vec();
    for (i, c) in CONVS.iter().enumerate() {
        let col = im2col(&a, c.cin, c.size, c.stride);
        let mut z = p.w[i].dot(&col);
        for (o, mut row) in z.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| (v + p.b[i][o]).max(0.0));
        }
        a = z.iter().copied().collect();
        cols.push(col);
        acts.push(z);
    }
    let features = ndarray::Array1::from(a);
    let mut logits = p.w[4].dot(&features);
    for (o, v) in logits.iter_mut().enumerate() {
        *v += p.b[4][o];
    }
    let max = logits.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    let mut dlogits = exp / sum;
    dlogits[label] -= 1.0;

    let mut g = Params::zeros_like(p);
    g.w[4] = dlogits
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&features.view().insert_axis(ndarray::Axis(0)));
    g.b[4] = dlogits.to_vec();
    let mut da: Vec<f32> = p.w[4].t().dot(&dlogits).to_vec();
    for i in (0..4).rev() {
        let c = CONVS[i];
        let out = c.out();
        let mut dz = Array2::from_shape_vec((c.cout, out * out), da).unwrap();
        dz.zip_mut_with(&acts[i], |d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        g.w[i] = dz.dot(&cols[i].t());
        g.b[i] = dz.rows().into_iter().map(|r| r.sum()).collect();
        if i > 0 {
            da = col2im(&p.w[i].t().dot(&dz), c.cin, c.size, c.stride);
        } else {
            da = Vec::new();
        }
    }
    g
}

fn dataset(rng: &mut ChaCha8Rng, prototypes: &[Vec<f32>], n: usize) -> MiniDataset {
    let noise = Normal::new(0.0, NOISE).unwrap();
    let mut inputs = Vec::with_capacity(n * 192);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..CLASSES);
        inputs.extend(prototypes[label].iter().map(|&v| v + noise.sample(rng)));
        labels.push(label as u32);
    }
    MiniDataset::new(SHAPE, CLASSES, inputs, labels).unwrap()
}

/// Class prototypes: 3×4×4 Gaussian patterns upsampled to 3×8×8.
fn prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..CLASSES)
        .map(|_| {
            let coarse: Vec<f32> = (0..3 * 16).map(|_| normal.sample(rng)).collect();
            let mut fine = vec![0.0; 3 * 64];
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        fine[(c * 8 + y) * 8 + x] = coarse[(c * 4 + y / 2) * 4 + x / 2];
                    }
                }
            }
            fine
        })
        .collect()
}

fn network(p: &Params, seed: u64) -> NetworkSpec {
    let names = ["conv1", "conv2", "conv3", "conv4"];
    let mut layers: Vec<LayerSpec> = CONVS
        .iter()
        .enumerate()
        .map(|(i, c)| {
            LayerSpec::convolutional(names[i], c.out(), c.out(), K, c.cin, c.cout, Decomposition::Spatial)
                .with_stride(c.stride)
                .with_weights(p.w[i].iter().copied().collect())
                .with_bias(p.b[i].clone())
        })
        .collect();
    layers.push(
        LayerSpec::fully_connected("fc", FC_IN, CLASSES)
            .with_weights(p.w[4].iter().copied().collect())
            .with_bias(p.b[4].clone())
            .with_activation(Activation::Identity),
    );
    let mut net = NetworkSpec::new(layers).unwrap().with_input(SHAPE).unwrap();
    net.set_excluded([1]).unwrap();
    net.name = format!("fixture-s{seed}");
    net
}

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "crates/core/fixtures".into()));
    let seeds: Vec<u64> = args.map(|s| s.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3, 4, 5] } else { seeds };
    std::fs::create_dir_all(&out).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(DATA_SEED);
    let protos = prototypes(&mut rng);
    let train = dataset(&mut rng, &protos, TRAIN_ITEMS);
    let validation = dataset(&mut rng, &protos, VALIDATION_ITEMS);
    let calibration = dataset(&mut rng, &protos, CALIBRATION_ITEMS);
    let data = DatasetFile {
        train: calibration,
        validation: validation.clone(),
    };
    data.save(out.join("fixture_data.bin")).unwrap();

    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut p = init(&mut rng);
        let mut velocity = Params::zeros_like(&p);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..EPOCHS {
            order.shuffle(&mut rng);
            let lr = if epoch < EPOCHS * 2 / 3 { LEARNING_RATE } else { LEARNING_RATE * 0.1 };
            for batch in order.chunks(BATCH) {
                let g = batch
                    .par_iter()
                    .map(|&i| gradient(&p, train.item(i), train.labels[i] as usize))
                    .reduce(|| Params::zeros_like(&p), Params::add);
                let scale = lr / batch.len() as f32;
                for (k, (v, gw)) in velocity.w.iter_mut().zip(&g.w).enumerate() {
                    *v = &*v * MOMENTUM - gw * scale;
                    p.w[k] += &*v;
                }
                for (k, (v, gb)) in velocity.b.iter_mut().zip(&g.b).enumerate() {
                    for (j, (vv, gg)) in v.iter_mut().zip(gb).enumerate() {
                        *vv = *vv * MOMENTUM - gg * scale;
                        p.b[k][j] += *vv;
                    }
                }
            }
        }
        let toml = out.join(format!("fixture_s{seed}.toml"));
        let blob = format!("fixture_s{seed}.bin");
        let mut net = network(&p, seed);
        save_network(&net, &toml, &blob).unwrap();
        let loaded = load_network(&toml).unwrap();
        let evaluator = MiniEvaluator::new(&loaded, validation.clone()).unwrap();
        let accuracy = evaluator.evaluate(&loaded, &loaded.max_configuration()).unwrap();
        let train_eval = MiniEvaluator::new(&loaded, train.clone()).unwrap();
        let train_accuracy = train_eval.evaluate(&loaded, &loaded.max_configuration()).unwrap();
        net.recorded_accuracy = Some(accuracy);
        save_network(&net, &toml, &blob).unwrap();
        println!("seed {seed}: train accuracy {train_accuracy:.4}, validation accuracy {accuracy:.4}");
    }
}
