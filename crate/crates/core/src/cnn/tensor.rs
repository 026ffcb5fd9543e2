use crate::encoder::ByteMatrix;

/// Dense row-major array of `f64` with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    /// Panics when `data.len()` is not the product of `dims`.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            dims.iter().product::<usize>(),
            "tensor data length does not match dims {dims:?}"
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed as a rank-1 vector.
    pub fn flatten(self) -> Tensor {
        let n = self.data.len();
        Tensor {
            dims: vec![n],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl From<&ByteMatrix> for Tensor {
    fn from(m: &ByteMatrix) -> Self {
        Tensor::from_vec(&[m.side(), m.side()], m.values().to_vec())
    }
}

impl From<ByteMatrix> for Tensor {
    fn from(m: ByteMatrix) -> Self {
        let side = m.side();
        Tensor::from_vec(&[side, side], m.into_values())
    }
}
