use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named, flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Layer {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Layer {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }
}

/// Named layers of flat parameter vectors, in a fixed order shared by all workers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Self {
        ParamSet { layers }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.name.clone(), l.shape.clone()))
                .collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    /// All values concatenated in layer order.
    pub fn flatten(&self) -> Vec<f32> {
        self.layers.iter().flat_map(|l| l.values.iter().copied()).collect()
    }

    pub fn check_same_shape(&self, other: &ParamSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::config(format!(
                "parameter sets have {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.shape != b.shape || a.values.len() != b.values.len() {
                return Err(Error::config(format!(
                    "layer mismatch: {}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash of the raw bits; used to assert cross-rank consistency.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.layers.iter().flat_map(|l| &l.values) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
