use std::ops::Index;

use crate::error::{Error, Result};

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Wraps `probs` after checking non-negativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("distribution has negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("distribution sums to {total}")));
        }
        Ok(Distribution(probs))
    }

    /// Normalizes non-negative weights. All-zero weights are rejected.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidArgument(format!("cannot normalize weights summing to {total}")));
        }
        for w in &mut weights {
            *w /= total;
        }
        Distribution::new(weights)
    }

    pub fn uniform(size: usize) -> Self {
        Distribution(vec![1.0 / size as f64; size])
    }

    /// Numerically stable softmax; every entry is kept strictly positive.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p = (*p / total).max(f64::MIN_POSITIVE);
        }
        Distribution(probs)
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Distribution(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Highest-probability id; ties go to the lower id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }
}

impl Index<u32> for Distribution {
    type Output = f64;

    fn index(&self, id: u32) -> &f64 {
        &self.0[id as usize]
    }
}
