//! NT-Xent loss, batch composition and self-supervised pre-training.

mod train;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::augment::AugmentError;
use crate::autodiff::{Scalar, Tape, Tensor, TensorError, Var};
use crate::model::CheckpointError;

pub use train::{
    pair_similarity, pretrain, PairSimilarity, PretrainOutcome, RunOutput, StepLoss, TrainConfig,
};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("row {0} has zero norm")]
    ZeroVector(usize),
    #[error("NT-Xent needs 2N >= 4 rows in view-major order, got {0}")]
    BatchTooSmall(usize),
    #[error("batch of {need} distinct songs requested from {have}")]
    InsufficientSongs { have: usize, need: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for ContrastiveError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::ZeroVector(i) => Self::ZeroVector(i),
            other => Self::Tensor(other),
        }
    }
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, ContrastiveError> {
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(ContrastiveError::ZeroVector(0));
    }
    if nv == 0.0 {
        return Err(ContrastiveError::ZeroVector(1));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row `i`'s positive partner for `2N` rows laid out as `[x_1..x_N, x'_1..x'_N]`.
pub fn partner(i: usize, n_pairs: usize) -> usize {
    if i < n_pairs {
        i + n_pairs
    } else {
        i - n_pairs
    }
}

/// NT-Xent over `z: [2N, d]` (rows `k` and `k + N` are a positive pair),
/// averaged over all `2N` anchors. Differentiable with respect to `z`.
pub fn nt_xent<T: Scalar>(tape: &mut Tape<T>, z: Var, temperature: f64) -> Result<Var, ContrastiveError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!("nt_xent expects [2N, d], got {shape:?}")).into());
    }
    let rows = shape[0];
    if rows < 4 || !rows.is_multiple_of(2) {
        return Err(ContrastiveError::BatchTooSmall(rows));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ContrastiveError::InvalidConfig(format!("temperature {temperature}")));
    }
    let zn = tape.row_normalize(z)?;
    let sim = tape.matmul_t(zn, zn)?;
    let logits = tape.scale(sim, T::from_f64(1.0 / temperature));
    let targets = (0..rows).map(|i| partner(i, rows / 2)).collect();
    Ok(tape.cross_entropy(logits, targets, true)?)
}

/// Loss value only.
pub fn nt_xent_value<T: Scalar>(z: &Tensor<T>, temperature: f64) -> Result<f64, ContrastiveError> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let loss = nt_xent(&mut tape, v, temperature)?;
    Ok(tape.value(loss).data()[0].to_f64())
}

/// `n` distinct song indices drawn uniformly from `0..songs`.
pub fn compose_batch<R: Rng + ?Sized>(songs: usize, n: usize, rng: &mut R) -> Result<Vec<usize>, ContrastiveError> {
    if n > songs {
        return Err(ContrastiveError::InsufficientSongs { have: songs, need: n });
    }
    Ok(index::sample(rng, songs, n).into_vec())
}

/// One epoch: a fresh permutation of the songs cut into `⌊songs / n⌋`
/// batches of distinct songs; the remainder is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(
    songs: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, ContrastiveError> {
    if n == 0 || n > songs {
        return Err(ContrastiveError::InsufficientSongs { have: songs, need: n.max(1) });
    }
    let perm = index::sample(rng, songs, songs).into_vec();
    Ok(perm.chunks_exact(n).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests;
