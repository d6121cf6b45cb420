use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real-valued signal. Clean data lives in [-1, 1]; intermediate diffusion
/// states are unbounded but always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform must be non-empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("waveform sample {i}"),
            });
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len.max(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|v| v * k).collect())
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got: self.len() })
        }
    }
}

/// A short token sequence conditioning the generator, plus its corpus index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    pub tokens: Vec<usize>,
}

impl Condition {
    pub const MAX_TOKENS: usize = 4;

    pub fn new(id: usize, tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let c = Self { id, tokens };
        c.validate(vocab_size)?;
        Ok(c)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > Self::MAX_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "condition {} has {} tokens (expected 1..={})",
                self.id,
                self.tokens.len(),
                Self::MAX_TOKENS
            )));
        }
        if let Some(&tok) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {tok} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }

    /// Sorted multiset form; two conditions with equal keys produce the same
    /// template.
    pub fn multiset_key(&self) -> Vec<usize> {
        let mut k = self.tokens.clone();
        k.sort_unstable();
        k
    }
}
