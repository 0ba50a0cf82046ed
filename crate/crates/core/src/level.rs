use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// One pyramid level: a `c×h×w` map with its level index and its stride
/// relative to the input image (`2^level`).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeature<T> {
    pub level: usize,
    pub stride: usize,
    pub map: Tensor<T>,
}

impl<T: Scalar> LevelFeature<T> {
    pub fn new(level: usize, map: Tensor<T>) -> Self {
        Self {
            level,
            stride: 1 << level,
            map,
        }
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.map.dims3()?;
        Ok((h, w))
    }
}
