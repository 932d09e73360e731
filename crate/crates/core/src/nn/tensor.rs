use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major f32 tensor. Feature maps use shape `[C, D, H, W]` with
/// `W` fastest, which matches the x-fastest layout of [`crate::volume`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Tensor {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel count of a `[C, D, H, W]` map.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extent `[D, H, W]` of a feature map.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped feature maps along the channel axis.
    pub fn stack_channels(parts: &[&[f32]], spatial: [usize; 3]) -> Result<Self> {
        let n: usize = spatial.iter().product();
        if parts.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("channel length does not match spatial extent".into()));
        }
        let mut data = Vec::with_capacity(n * parts.len());
        parts.iter().for_each(|p| data.extend_from_slice(p));
        Tensor::new(vec![parts.len(), spatial[0], spatial[1], spatial[2]], data)
    }
}
