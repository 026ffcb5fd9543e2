//! Reference implementations shared by the integration tests. Nothing here
//! calls the library's numeric code; only the parameter layout is shared.
#![allow(dead_code)]

use pktclass::cnn::{Architecture, CnnModel};
use pktclass::encoder::ByteMatrix;
use pktclass::train::init_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nested-loop valid cross-correlation. `filters[k][a][b]`, result `[k][i][j]`.
pub fn naive_conv(
    input: &[Vec<f64>],
    filters: &[Vec<Vec<f64>>],
    biases: &[f64],
    stride: usize,
) -> Vec<Vec<Vec<f64>>> {
    let side = input.len();
    let f = filters[0].len();
    let out = (side - f) / stride + 1;
    let mut result = vec![vec![vec![0.0; out]; out]; filters.len()];
    for k in 0..filters.len() {
        for i in 0..out {
            for j in 0..out {
                let mut acc = biases[k];
                for a in 0..f {
                    for b in 0..f {
                        acc += filters[k][a][b] * input[i * stride + a][j * stride + b];
                    }
                }
                result[k][i][j] = acc;
            }
        }
    }
    result
}

/// What the piecewise-linear parts of the network did on one input: the sign
/// of every conv pre-activation and the winner of every pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub positive: Vec<bool>,
    pub winners: Vec<(usize, usize)>,
}

/// Cross-entropy loss of `model` on `(input, label)`, computed from scratch
/// with unclamped `-ln p`.
pub fn oracle_loss(model: &CnnModel, input: &ByteMatrix, label: usize) -> (f64, ActivationPattern) {
    let side = input.side();
    let f = model.conv.filter_size;
    let s = model.conv.stride;
    let k_count = model.conv.biases.len();
    let x: Vec<Vec<f64>> = (0..side)
        .map(|r| (0..side).map(|c| input.get(r, c)).collect())
        .collect();
    let filters: Vec<Vec<Vec<f64>>> = (0..k_count)
        .map(|k| {
            (0..f)
                .map(|a| (0..f).map(|b| model.conv.filters[k * f * f + a * f + b]).collect())
                .collect()
        })
        .collect();
    let pre = naive_conv(&x, &filters, &model.conv.biases, s);
    let conv_side = pre[0].len();
    let mut positive = Vec::new();
    for map in &pre {
        for row in map {
            for &v in row {
                positive.push(v > 0.0);
            }
        }
    }
    let p = model.pool_size;
    let ps = model.pool_stride;
    let pooled_side = (conv_side - p) / ps + 1;
    let mut features = Vec::new();
    let mut winners = Vec::new();
    for map in &pre {
        for i in 0..pooled_side {
            for j in 0..pooled_side {
                let mut best = f64::NEG_INFINITY;
                let mut at = (0, 0);
                for a in 0..p {
                    for b in 0..p {
                        let v = map[i * ps + a][j * ps + b].max(0.0);
                        if v > best {
                            best = v;
                            at = (a, b);
                        }
                    }
                }
                features.push(best);
                winners.push(at);
            }
        }
    }
    let n_in = features.len();
    let logits: Vec<f64> = (0..model.dense.biases.len())
        .map(|o| {
            model.dense.biases[o]
                + (0..n_in)
                    .map(|i| model.dense.weights[o * n_in + i] * features[i])
                    .sum::<f64>()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    (log_norm - logits[label], ActivationPattern { positive, winners })
}

/// A randomly initialised small model with non-zero biases, plus a random
/// input and label.
pub fn toy_problem(seed: u64, side: usize, filters: usize, classes: usize) -> (CnnModel, ByteMatrix, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        num_filters: filters,
        ..Architecture::packet_classifier(side, classes)
    };
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    let mut model = init_model(arch, names, &mut rng).expect("valid architecture");
    for b in model.conv.biases.iter_mut().chain(model.dense.biases.iter_mut()) {
        *b = rng.gen_range(-0.1..0.1);
    }
    let input = ByteMatrix::from_values(side, (0..side * side).map(|_| rng.gen()).collect());
    let label = rng.gen_range(0..classes);
    (model, input, label)
}

pub fn random_matrix(rng: &mut impl Rng, side: usize) -> Vec<Vec<f64>> {
    (0..side).map(|_| (0..side).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}
