//! Single-layer kernels: valid cross-correlation, ReLU, overlapping max
//! pooling, the dense map and softmax, plus their backward counterparts.

use super::{CnnError, Tensor};

/// `K` square filters of side `F` applied with a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `K * F * F` weights, filter-major then row-major.
    pub filters: Vec<f64>,
    pub biases: Vec<f64>,
    pub filter_size: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn zeros(num_filters: usize, filter_size: usize, stride: usize) -> Self {
        ConvLayer {
            filters: vec![0.0; num_filters * filter_size * filter_size],
            biases: vec![0.0; num_filters],
            filter_size,
            stride,
        }
    }

    pub fn num_filters(&self) -> usize {
        self.biases.len()
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let n = self.filter_size * self.filter_size;
        &self.filters[k * n..(k + 1) * n]
    }

    pub fn output_side(&self, input_side: usize) -> Option<usize> {
        if input_side < self.filter_size || self.stride == 0 {
            return None;
        }
        Some((input_side - self.filter_size) / self.stride + 1)
    }
}

/// Fully connected map `z = W x + b`, `W` stored row-major `N_out x N_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub inputs: usize,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        self.biases.len()
    }
}

fn square_side(t: &Tensor, what: &str) -> Result<usize, CnnError> {
    match *t.dims() {
        [h, w] if h == w => Ok(h),
        _ => Err(CnnError::ShapeMismatch(format!(
            "{what} expects a square matrix, got dims {:?}",
            t.dims()
        ))),
    }
}

/// Valid (unpadded) cross-correlation. Output dims `[K, out, out]` with
/// `out = (side - F) / stride + 1`.
pub fn conv_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor, CnnError> {
    let side = square_side(input, "convolution")?;
    let out = layer.output_side(side).ok_or_else(|| {
        CnnError::ShapeMismatch(format!(
            "input side {side} smaller than filter side {}",
            layer.filter_size
        ))
    })?;
    let f = layer.filter_size;
    let s = layer.stride;
    let x = input.data();
    let k_count = layer.num_filters();
    let mut y = vec![0.0; k_count * out * out];
    for k in 0..k_count {
        let w = layer.filter(k);
        let map = &mut y[k * out * out..(k + 1) * out * out];
        map.fill(layer.biases[k]);
        for a in 0..f {
            for b in 0..f {
                let wab = w[a * f + b];
                for i in 0..out {
                    let row = &x[(i * s + a) * side + b..];
                    let dst = &mut map[i * out..(i + 1) * out];
                    for (j, cell) in dst.iter_mut().enumerate() {
                        *cell += wab * row[j * s];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[k_count, out, out], y))
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// Max pooling output plus, for each output cell, the flat index of the
/// input cell that won.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Per-map max pooling over `pool x pool` windows moved by `stride`.
/// Ties go to the first cell in row-major window order.
pub fn maxpool_forward(maps: &Tensor, pool: usize, stride: usize) -> Result<Pooled, CnnError> {
    let (k_count, side) = match *maps.dims() {
        [k, h, w] if h == w => (k, h),
        [h, w] if h == w => (1, h),
        _ => {
            return Err(CnnError::ShapeMismatch(format!(
                "max pooling expects square maps, got dims {:?}",
                maps.dims()
            )))
        }
    };
    if pool == 0 || stride == 0 || side < pool {
        return Err(CnnError::ShapeMismatch(format!(
            "map side {side} cannot hold pool {pool} with stride {stride}"
        )));
    }
    let out = (side - pool) / stride + 1;
    let x = maps.data();
    let mut values = Vec::with_capacity(k_count * out * out);
    let mut argmax = Vec::with_capacity(k_count * out * out);
    for k in 0..k_count {
        let base = k * side * side;
        for i in 0..out {
            for j in 0..out {
                let mut best = base + i * stride * side + j * stride;
                for a in 0..pool {
                    for b in 0..pool {
                        let idx = base + (i * stride + a) * side + j * stride + b;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                values.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let dims: Vec<usize> = if maps.dims().len() == 3 {
        vec![k_count, out, out]
    } else {
        vec![out, out]
    };
    Ok(Pooled {
        output: Tensor::from_vec(&dims, values),
        argmax,
    })
}

/// Routes each pooled gradient to the input cell that produced the max.
/// Overlapping windows accumulate.
pub fn maxpool_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx] += g;
    }
    grad_in
}

pub fn dense_forward(features: &Tensor, layer: &DenseLayer) -> Result<Tensor, CnnError> {
    let x = features.data();
    if x.len() != layer.inputs {
        return Err(CnnError::ShapeMismatch(format!(
            "dense layer expects {} inputs, got {}",
            layer.inputs,
            x.len()
        )));
    }
    let z = layer
        .weights
        .chunks_exact(layer.inputs)
        .zip(&layer.biases)
        .map(|(row, &b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_vec(&[layer.outputs()], z))
}

/// Max-shifted softmax.
pub fn softmax(z: &Tensor) -> Result<Tensor, CnnError> {
    let zs = z.data();
    if zs.is_empty() {
        return Err(CnnError::ShapeMismatch("softmax of an empty vector".into()));
    }
    if zs.iter().any(|v| !v.is_finite()) {
        return Err(CnnError::NumericalError(format!("non-finite logits {zs:?}")));
    }
    let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = zs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor::from_vec(
        &[zs.len()],
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}
