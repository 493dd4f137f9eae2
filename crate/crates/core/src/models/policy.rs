//! Policy distributions, latent policies and the codebook.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance of the simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A distribution over the K codebook entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyDistribution {
    probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let d = Self { probs };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn from_scalars<S: Scalar>(values: &[S]) -> Result<Self> {
        Self::new(values.iter().map(|v| v.as_f64()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::Validation("empty policy distribution".into()));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation("policy distribution has a negative entry".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("policy distribution sums to {total}")));
        }
        Ok(())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Most probable index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn is_one_hot(&self) -> bool {
        self.probs.iter().filter(|&&p| p != 0.0).count() == 1
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A point in the convex hull of the codebook rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentPolicy {
    pub vector: Vec<f64>,
}

/// The K x d matrix of policy vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    vectors: Tensor<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(vectors: Tensor<S>) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::Shape("codebook needs K >= 1 and d >= 1".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Validation("codebook has non-finite entries".into()));
        }
        Ok(Self { vectors })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn d(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor<S> {
        &self.vectors
    }

    pub fn row(&self, k: usize) -> &[S] {
        self.vectors.row(k)
    }

    /// Convex combination `sum_k probs[k] * vectors[k]`.
    pub fn mix(&self, dist: &PolicyDistribution) -> Result<LatentPolicy> {
        mix_latent(self, dist)
    }
}

pub fn mix_latent<S: Scalar>(codebook: &Codebook<S>, dist: &PolicyDistribution) -> Result<LatentPolicy> {
    if dist.k() != codebook.k() {
        return Err(Error::Shape(format!(
            "distribution over {} entries for a codebook of {}",
            dist.k(),
            codebook.k()
        )));
    }
    let mut vector = vec![0.0; codebook.d()];
    for (k, &p) in dist.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (acc, v) in vector.iter_mut().zip(codebook.row(k)) {
            *acc += p * v.as_f64();
        }
    }
    Ok(LatentPolicy { vector })
}

/// `<qvec, probs>`: the Q value of a soft policy label.
pub fn expected_q(qvec: &[f64], dist: &PolicyDistribution) -> Result<f64> {
    if qvec.len() != dist.k() {
        return Err(Error::Shape(format!(
            "q vector of length {} against a distribution over {}",
            qvec.len(),
            dist.k()
        )));
    }
    Ok(qvec.iter().zip(dist.probs()).map(|(q, p)| q * p).sum())
}
