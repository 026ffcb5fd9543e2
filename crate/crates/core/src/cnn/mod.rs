//! The packet classifier network: one convolutional layer with ReLU, one
//! max-pooling layer, and a dense layer feeding softmax.
//!
//! Everything runs in `f64`. [`forward`] keeps the activations that
//! [`backward`] needs to produce cross-entropy gradients for every parameter.

mod layers;
mod tensor;

pub use layers::{
    conv_forward, dense_forward, maxpool_backward, maxpool_forward, relu, softmax, ConvLayer,
    DenseLayer, Pooled,
};
pub use tensor::Tensor;

use thiserror::Error;

use crate::encoder::ByteMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("forward cache does not match the model: {0}")]
    CacheMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Shape parameters of a [`CnnModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub input_side: usize,
    pub num_filters: usize,
    pub filter_size: usize,
    pub conv_stride: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// 16 filters of 3x3, stride 1, 2x2 pooling with stride 1.
    pub fn packet_classifier(input_side: usize, num_classes: usize) -> Self {
        Architecture {
            input_side,
            num_filters: 16,
            filter_size: 3,
            conv_stride: 1,
            pool_size: 2,
            pool_stride: 1,
            num_classes,
        }
    }

    pub fn conv_side(&self) -> Option<usize> {
        if self.conv_stride == 0 || self.input_side < self.filter_size {
            return None;
        }
        Some((self.input_side - self.filter_size) / self.conv_stride + 1)
    }

    pub fn pooled_side(&self) -> Option<usize> {
        let c = self.conv_side()?;
        if self.pool_stride == 0 || self.pool_size == 0 || c < self.pool_size {
            return None;
        }
        Some((c - self.pool_size) / self.pool_stride + 1)
    }

    /// Flattened pooled feature length, the dense layer's input width.
    pub fn dense_inputs(&self) -> Option<usize> {
        self.pooled_side().map(|p| p * p * self.num_filters)
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        if self.num_filters == 0 || self.filter_size == 0 || self.num_classes == 0 {
            return Err(CnnError::InvalidModel(format!(
                "filters, filter size and classes must be positive: {self:?}"
            )));
        }
        self.dense_inputs().map(|_| ()).ok_or_else(|| {
            CnnError::InvalidModel(format!("input side too small for {self:?}"))
        })
    }
}

/// Trained parameters plus the labels of the output classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub conv: ConvLayer,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dense: DenseLayer,
    pub input_side: usize,
    pub class_names: Vec<String>,
}

impl CnnModel {
    /// A model with every parameter zero.
    pub fn zeros(arch: Architecture, class_names: Vec<String>) -> Result<Self, CnnError> {
        arch.validate()?;
        let model = CnnModel {
            conv: ConvLayer::zeros(arch.num_filters, arch.filter_size, arch.conv_stride),
            pool_size: arch.pool_size,
            pool_stride: arch.pool_stride,
            dense: DenseLayer::zeros(arch.dense_inputs().unwrap(), arch.num_classes),
            input_side: arch.input_side,
            class_names,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_side: self.input_side,
            num_filters: self.conv.num_filters(),
            filter_size: self.conv.filter_size,
            conv_stride: self.conv.stride,
            pool_size: self.pool_size,
            pool_stride: self.pool_stride,
            num_classes: self.dense.outputs(),
        }
    }

    /// Checks that the stored parameter lengths agree with the architecture.
    pub fn validate(&self) -> Result<(), CnnError> {
        let arch = self.architecture();
        arch.validate()?;
        let k = arch.num_filters;
        let f = arch.filter_size;
        if self.conv.filters.len() != k * f * f {
            return Err(CnnError::InvalidModel(format!(
                "{} conv weights for {k} filters of side {f}",
                self.conv.filters.len()
            )));
        }
        let n_in = arch.dense_inputs().unwrap();
        if self.dense.inputs != n_in {
            return Err(CnnError::InvalidModel(format!(
                "dense layer takes {} inputs but pooled features have {n_in}",
                self.dense.inputs
            )));
        }
        if self.dense.weights.len() != n_in * arch.num_classes {
            return Err(CnnError::InvalidModel(format!(
                "{} dense weights for a {}x{n_in} layer",
                self.dense.weights.len(),
                arch.num_classes
            )));
        }
        if self.class_names.len() != arch.num_classes {
            return Err(CnnError::InvalidModel(format!(
                "{} class names for {} outputs",
                self.class_names.len(),
                arch.num_classes
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.dense.outputs()
    }

    pub fn parameters(&self) -> [&[f64]; 4] {
        [
            &self.conv.filters,
            &self.conv.biases,
            &self.dense.weights,
            &self.dense.biases,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.conv.filters,
            &mut self.conv.biases,
            &mut self.dense.weights,
            &mut self.dense.biases,
        ]
    }

    /// Class probabilities for one input matrix.
    pub fn probabilities(&self, input: &ByteMatrix) -> Result<Tensor, CnnError> {
        forward(self, input).map(|(p, _)| p)
    }

    /// Winning class index and its probability; lowest index wins ties.
    pub fn predict(&self, input: &ByteMatrix) -> Result<(usize, f64), CnnError> {
        let p = self.probabilities(input)?;
        let best = p.argmax();
        Ok((best, p.data()[best]))
    }
}

/// Activations retained between [`forward`] and [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    /// Convolution output before ReLU, dims `[K, c, c]`.
    pub conv_pre: Tensor,
    /// Winning conv-map index for every pooled cell.
    pub pool_argmax: Vec<usize>,
    /// Flattened pooled features fed to the dense layer.
    pub features: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

pub fn forward(model: &CnnModel, input: &ByteMatrix) -> Result<(Tensor, ForwardCache), CnnError> {
    if input.side() != model.input_side {
        return Err(CnnError::ShapeMismatch(format!(
            "model expects {0}x{0} input, got {1}x{1}",
            model.input_side,
            input.side()
        )));
    }
    let input = Tensor::from(input);
    let conv_pre = conv_forward(&input, &model.conv)?;
    let activated = relu(&conv_pre);
    let Pooled { output, argmax } = maxpool_forward(&activated, model.pool_size, model.pool_stride)?;
    let features = output.flatten();
    let logits = dense_forward(&features, &model.dense)?;
    let probabilities = softmax(&logits)?;
    Ok((
        probabilities.clone(),
        ForwardCache {
            input,
            conv_pre,
            pool_argmax: argmax,
            features,
            logits,
            probabilities,
        },
    ))
}

/// Parameter gradients, laid out like [`CnnModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv_filters: Vec<f64>,
    pub conv_biases: Vec<f64>,
    pub dense_weights: Vec<f64>,
    pub dense_biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Gradients {
            conv_filters: vec![0.0; model.conv.filters.len()],
            conv_biases: vec![0.0; model.conv.biases.len()],
            dense_weights: vec![0.0; model.dense.weights.len()],
            dense_biases: vec![0.0; model.dense.biases.len()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            &self.conv_filters,
            &self.conv_biases,
            &self.dense_weights,
            &self.dense_biases,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.conv_filters,
            &mut self.conv_biases,
            &mut self.dense_weights,
            &mut self.dense_biases,
        ]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= factor);
        }
    }
}

/// Cross-entropy gradients for one sample. The fused softmax/cross-entropy
/// gradient at the logits is `p - y`; the rest follows by the chain rule.
pub fn backward(
    model: &CnnModel,
    cache: &ForwardCache,
    one_hot_target: &[f64],
) -> Result<Gradients, CnnError> {
    let arch = model.architecture();
    let n = arch.num_classes;
    let conv_side = arch.conv_side().unwrap_or(0);
    let conv_len = arch.num_filters * conv_side * conv_side;
    if one_hot_target.len() != n || cache.probabilities.len() != n {
        return Err(CnnError::CacheMismatch(format!(
            "model has {n} classes, target has {}, cache has {}",
            one_hot_target.len(),
            cache.probabilities.len()
        )));
    }
    if cache.features.len() != model.dense.inputs
        || cache.conv_pre.len() != conv_len
        || cache.pool_argmax.len() != model.dense.inputs
        || cache.input.dims() != [model.input_side, model.input_side]
    {
        return Err(CnnError::CacheMismatch(
            "cached activations have different shapes than the model".into(),
        ));
    }

    let d_logits: Vec<f64> = cache
        .probabilities
        .data()
        .iter()
        .zip(one_hot_target)
        .map(|(p, y)| p - y)
        .collect();

    let n_in = model.dense.inputs;
    let x = cache.features.data();
    let mut dense_weights = vec![0.0; n * n_in];
    let mut d_features = vec![0.0; n_in];
    for (j, &g) in d_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &model.dense.weights[j * n_in..(j + 1) * n_in];
        let grow = &mut dense_weights[j * n_in..(j + 1) * n_in];
        for i in 0..n_in {
            grow[i] = g * x[i];
            d_features[i] += g * row[i];
        }
    }

    let mut d_conv = maxpool_backward(&d_features, &cache.pool_argmax, conv_len);
    for (d, &pre) in d_conv.iter_mut().zip(cache.conv_pre.data()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }

    let f = arch.filter_size;
    let s = arch.conv_stride;
    let side = model.input_side;
    let input = cache.input.data();
    let mut conv_filters = vec![0.0; model.conv.filters.len()];
    let mut conv_biases = vec![0.0; arch.num_filters];
    let map_len = conv_side * conv_side;
    for k in 0..arch.num_filters {
        let gk = &mut conv_filters[k * f * f..(k + 1) * f * f];
        for (pos, &g) in d_conv[k * map_len..(k + 1) * map_len].iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            conv_biases[k] += g;
            let (i, j) = (pos / conv_side, pos % conv_side);
            for a in 0..f {
                let row = &input[(i * s + a) * side + j * s..];
                for b in 0..f {
                    gk[a * f + b] += g * row[b];
                }
            }
        }
    }

    Ok(Gradients {
        conv_filters,
        conv_biases,
        dense_weights,
        dense_biases: d_logits,
    })
}
