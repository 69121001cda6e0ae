//! Target distributions for the generalized contrastive loss.
//!
//! Every target is an N×N row-stochastic matrix whose row `i` is a
//! distribution over which caption (or image) sample `i` should match.
//! Hard labels are the identity; the soft variants spread the non-diagonal
//! mass uniformly (label smoothing), by teacher softmax (distillation), or by
//! an entropic transport plan over teacher similarities.

use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::numerics::{gram, row_softmax, EmbeddingBatch, Matrix};
use crate::sinkhorn::{sinkhorn, SinkhornConfig};

pub const DEFAULT_ETA: f64 = 100.0;

/// Which modality's rows the target is normalized over: `Image` rows index
/// images and distribute over captions, `Text` the other way round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub gamma_v: f64,
    pub gamma_t: f64,
    /// Subtracted from the diagonal so a sample never matches its own pair.
    pub eta: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            gamma_v: 1.0,
            gamma_t: 1.0,
            eta: DEFAULT_ETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Hard,
    LabelSmoothing,
    Kd,
    Otter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub matrix: Matrix,
    pub kind: TargetKind,
    /// Weight on the identity; 0 for a bare off-diagonal target.
    pub alpha: f64,
}

impl TargetDistribution {
    pub fn hard(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
            kind: TargetKind::Hard,
            alpha: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

fn check_pair(v: &EmbeddingBatch, t: &EmbeddingBatch) -> Result<()> {
    if v.len() != t.len() || v.dim() != t.dim() {
        return Err(OtterError::DimensionMismatch(format!(
            "teacher batches {}x{} and {}x{}",
            v.len(),
            v.dim(),
            t.len(),
            t.dim()
        )));
    }
    Ok(())
}

/// Teacher similarity matrix: `γ_v·VVᵀ + γ_t·TTᵀ + cross − η·I`, where the
/// cross term is `VTᵀ` for the image side and `TVᵀ` for the text side.
pub fn similarity_matrix(
    teacher_v: &EmbeddingBatch,
    teacher_t: &EmbeddingBatch,
    cfg: &SimilarityConfig,
    side: Side,
) -> Result<Matrix> {
    check_pair(teacher_v, teacher_t)?;
    let n = teacher_v.len();
    let cross = match side {
        Side::Image => gram(teacher_v, teacher_t)?,
        Side::Text => gram(teacher_t, teacher_v)?,
    };
    let mut s = cross;
    if cfg.gamma_v != 0.0 {
        s = s.add_scaled(&gram(teacher_v, teacher_v)?, cfg.gamma_v)?;
    }
    if cfg.gamma_t != 0.0 {
        s = s.add_scaled(&gram(teacher_t, teacher_t)?, cfg.gamma_t)?;
    }
    if cfg.eta != 0.0 {
        for i in 0..n {
            s[(i, i)] -= cfg.eta;
        }
    }
    Ok(s)
}

/// Transport-plan target: the row-stochastic Sinkhorn plan of `s`.
pub fn otter_target(s: &Matrix, sk: &SinkhornConfig) -> Result<TargetDistribution> {
    if s.is_square() && s.rows() < 2 {
        return Err(OtterError::DegenerateRow(s.rows()));
    }
    let plan = sinkhorn(s, sk)?;
    Ok(TargetDistribution {
        matrix: plan.matrix,
        kind: TargetKind::Otter,
        alpha: 0.0,
    })
}

/// Distillation target: row softmax of the teacher's cross-modal similarity,
/// diagonal included.
pub fn kd_target(
    teacher_v: &EmbeddingBatch,
    teacher_t: &EmbeddingBatch,
    inv_temp: f64,
    side: Side,
) -> Result<TargetDistribution> {
    check_pair(teacher_v, teacher_t)?;
    let cross = match side {
        Side::Image => gram(teacher_v, teacher_t)?,
        Side::Text => gram(teacher_t, teacher_v)?,
    };
    Ok(TargetDistribution {
        matrix: row_softmax(&cross, inv_temp),
        kind: TargetKind::Kd,
        alpha: 0.0,
    })
}

/// Uniform off-diagonal target, `(1 - I) / (n - 1)`.
pub fn label_smoothing_target(n: usize) -> Result<TargetDistribution> {
    if n < 2 {
        return Err(OtterError::DegenerateRow(n));
    }
    let off = 1.0 / (n - 1) as f64;
    Ok(TargetDistribution {
        matrix: Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { off }),
        kind: TargetKind::LabelSmoothing,
        alpha: 0.0,
    })
}

/// `α·I + (1 − α)·m`.
pub fn mix_with_identity(m: &TargetDistribution, alpha: f64) -> Result<TargetDistribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OtterError::AlphaOutOfRange(alpha));
    }
    if !m.matrix.is_square() {
        return Err(OtterError::NotSquare {
            rows: m.matrix.rows(),
            cols: m.matrix.cols(),
        });
    }
    let beta = 1.0 - alpha;
    let matrix = Matrix::from_fn(m.len(), m.len(), |i, j| {
        let eye = if i == j { alpha } else { 0.0 };
        eye + beta * m.matrix[(i, j)]
    });
    Ok(TargetDistribution {
        matrix,
        kind: m.kind,
        alpha,
    })
}
