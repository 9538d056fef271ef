//! Learnable Mahalanobis distance over fused embeddings plus the pairwise
//! contrastive loss that trains it.
//!
//! The metric matrix is parametrized through a lower-triangular factor L
//! with the quadratic form computed as `|L^T (e_i - e_j)|_2`, so positive
//! semi-definiteness is structural rather than enforced by projection.

use thiserror::Error;

use crate::corpus::Label;
use crate::tensor::{Binder, ParamId, Params, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("degenerate batch of {0} samples: pair construction needs at least 2")]
    DegenerateBatch(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Default stabilizer inside the square root.
pub const DEFAULT_EPSILON_D: f64 = 1e-12;

/// Triangular factor of the metric matrix. The parameter tensor is a full
/// square matrix; a constant lower-triangular mask both zeroes the upper
/// entries and kills their gradients, so training never leaves the
/// triangular family. Initialized to the identity (Euclidean start).
#[derive(Debug, Clone)]
pub struct MetricFactor {
    factor: ParamId,
    mask: Tensor,
    pub epsilon_d: f64,
    dim: usize,
}

impl MetricFactor {
    pub fn init(dim: usize, name: &str, params: &mut Params) -> Self {
        Self::with_epsilon(dim, name, params, DEFAULT_EPSILON_D)
    }

    pub fn with_epsilon(dim: usize, name: &str, params: &mut Params, epsilon_d: f64) -> Self {
        let factor = params.add(format!("{name}.l"), Tensor::eye(dim));
        let mut mask = Tensor::zeros(&[dim, dim]);
        for r in 0..dim {
            for c in 0..=r {
                mask.data_mut()[r * dim + c] = 1.0;
            }
        }
        MetricFactor {
            factor,
            mask,
            epsilon_d,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The masked (strictly lower-triangular-plus-diagonal) factor.
    pub fn effective_factor(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
    ) -> Result<Var, TensorError> {
        let l = binder.var(tape, params, self.factor);
        let mask = tape.constant(self.mask.clone());
        tape.hadamard(l, mask)
    }

    /// Mahalanobis distance `sqrt((ei-ej)^T L L^T (ei-ej) + eps)`.
    pub fn distance(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        ei: Var,
        ej: Var,
    ) -> Result<Var, TensorError> {
        let l_eff = self.effective_factor(tape, params, binder)?;
        self.distance_with_factor(tape, l_eff, ei, ej)
    }

    /// Same, reusing an already-bound factor (one mask per tape, not per
    /// pair).
    pub fn distance_with_factor(
        &self,
        tape: &mut Tape,
        l_eff: Var,
        ei: Var,
        ej: Var,
    ) -> Result<Var, TensorError> {
        if tape.value(ei).len() != self.dim || tape.value(ej).len() != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "mahalanobis",
                detail: format!(
                    "embeddings {:?}/{:?}, metric dim {}",
                    tape.value(ei).shape(),
                    tape.value(ej).shape(),
                    self.dim
                ),
            });
        }
        let diff = tape.sub(ei, ej)?;
        let lt = tape.transpose(l_eff)?;
        let projected = tape.matvec(lt, diff)?;
        let quad = tape.dot(projected, projected)?;
        let guarded = tape.add_scalar(quad, self.epsilon_d)?;
        tape.sqrt(guarded)
    }
}

/// Exhaustive unordered pairs of a batch, split by label equality.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub margin: f64,
}

pub fn build_pairs(labels: &[Label], margin: f64) -> Result<PairSets, MetricError> {
    if labels.len() < 2 {
        return Err(MetricError::DegenerateBatch(labels.len()));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    Ok(PairSets {
        positives,
        negatives,
        margin,
    })
}

/// Mean positive-pair distance plus mean hinge on negative pairs:
/// `(1/|P|) sum d + (1/|N|) sum max(0, m - d)`. An empty pair set
/// contributes zero instead of dividing by zero.
pub fn contrastive_loss(
    tape: &mut Tape,
    params: &Params,
    binder: &mut Binder,
    factor: &MetricFactor,
    embeddings: &[Var],
    labels: &[Label],
    margin: f64,
) -> Result<Var, MetricError> {
    if embeddings.len() != labels.len() {
        return Err(MetricError::Tensor(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("{} embeddings, {} labels", embeddings.len(), labels.len()),
        }));
    }
    let pairs = build_pairs(labels, margin)?;
    let l_eff = factor.effective_factor(tape, params, binder)?;

    let mut loss: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, term: Var| -> Result<(), TensorError> {
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };

    if !pairs.positives.is_empty() {
        let mut acc: Option<Var> = None;
        for &(i, j) in &pairs.positives {
            let d = factor.distance_with_factor(tape, l_eff, embeddings[i], embeddings[j])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d)?,
                None => d,
            });
        }
        let mean = tape.scale(acc.unwrap(), 1.0 / pairs.positives.len() as f64)?;
        add_term(tape, mean)?;
    }
    if !pairs.negatives.is_empty() {
        let mut acc: Option<Var> = None;
        for &(i, j) in &pairs.negatives {
            let d = factor.distance_with_factor(tape, l_eff, embeddings[i], embeddings[j])?;
            let neg = tape.scale(d, -1.0)?;
            let gap = tape.add_scalar(neg, margin)?;
            let hinge = tape.relu(gap)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, hinge)?,
                None => hinge,
            });
        }
        let mean = tape.scale(acc.unwrap(), 1.0 / pairs.negatives.len() as f64)?;
        add_term(tape, mean)?;
    }
    Ok(match loss {
        Some(l) => l,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}
