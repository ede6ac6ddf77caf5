//! Integer label maps: `0` is background, any other value an object id.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub type ObjectId = u8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<ObjectId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<ObjectId>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Input(format!(
                "{} labels for a {height}×{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> ObjectId) -> Self {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[ObjectId] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<ObjectId> {
        self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> ObjectId {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: ObjectId) {
        self.labels[y * self.width + x] = id;
    }

    /// Distinct non-zero labels, ascending.
    pub fn object_ids(&self) -> Vec<ObjectId> {
        let set: BTreeSet<ObjectId> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }

    pub fn area(&self, id: ObjectId) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// `1×H×W` indicator of `id`.
    pub fn indicator<T: Element>(&self, id: ObjectId) -> Tensor<T> {
        Tensor::from_fn([1, self.height, self.width], |i| {
            if self.labels[i] == id {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }

    /// Applies `f` to every label.
    pub fn map(&self, f: impl Fn(ObjectId) -> ObjectId) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }
}
