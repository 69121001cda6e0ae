//! The combined contrastive loss and its closed-form gradients.
//!
//! For a batch of N pairs the student produces unit image embeddings `Zv`
//! and text embeddings `Zt`, logits `L = Zv Ztᵀ`, and per-direction
//! probabilities `Pv = softmax_rows(t·L)`, `Pt = softmax_rows(t·Lᵀ)` with
//! learnable inverse temperature `t`. The loss is
//!
//! ```text
//! α·(CE(I, Pv) + CE(I, Pt)) + (1 − α)·(CE(Qv, Pv) + CE(Qt, Pt))
//! ```
//!
//! with teacher-built targets `Qv`, `Qt` held constant. Cross-entropy is
//! linear in the target, so this equals `CE(α I + (1−α) Q, P)` per direction
//! and the logit gradient is `t·(P − Q_eff)/N`.

use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::numerics::{cross_entropy_rows, dot, gram, row_softmax, EmbeddingBatch, Matrix};
use crate::targets::{
    kd_target, label_smoothing_target, otter_target, similarity_matrix, Side, TargetDistribution,
};
use crate::trainer::{EncoderState, Method, PairBatch, TeacherState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub info_nce_v: f64,
    pub info_nce_t: f64,
    pub distill_v: f64,
    pub distill_t: f64,
    pub alpha: f64,
}

/// Gradients of the total loss with respect to the student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_weights_image: Matrix,
    pub d_weights_text: Matrix,
    /// Derivative with respect to the stored `log_inv_temp`.
    pub d_log_inv_temp: f64,
}

impl GradientBundle {
    pub fn zeros_like(state: &EncoderState) -> Self {
        Self {
            d_weights_image: Matrix::zeros(state.w_image.rows(), state.w_image.cols()),
            d_weights_text: Matrix::zeros(state.w_text.rows(), state.w_text.cols()),
            d_log_inv_temp: 0.0,
        }
    }

    /// Derivative with respect to the inverse temperature itself.
    pub fn d_inv_temp(&self, inv_temp: f64) -> f64 {
        self.d_log_inv_temp / inv_temp
    }

    pub fn is_finite(&self) -> bool {
        self.d_weights_image.is_finite()
            && self.d_weights_text.is_finite()
            && self.d_log_inv_temp.is_finite()
    }
}

fn check_batches(zv: &EmbeddingBatch, zt: &EmbeddingBatch) -> Result<()> {
    if zv.len() != zt.len() {
        return Err(OtterError::DimensionMismatch(format!(
            "{} image vs {} text embeddings",
            zv.len(),
            zt.len()
        )));
    }
    Ok(())
}

/// Student probabilities in both directions.
fn probabilities(
    zv: &EmbeddingBatch,
    zt: &EmbeddingBatch,
    inv_temp: f64,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_batches(zv, zt)?;
    let logits = gram(zv, zt)?;
    let pv = row_softmax(&logits, inv_temp);
    let pt = row_softmax(&logits.transpose(), inv_temp);
    Ok((logits, pv, pt))
}

/// Symmetric InfoNCE: `(image→text, text→image)` cross-entropies against the identity.
pub fn info_nce(zv: &EmbeddingBatch, zt: &EmbeddingBatch, inv_temp: f64) -> Result<(f64, f64)> {
    let (_, pv, pt) = probabilities(zv, zt, inv_temp)?;
    let eye = Matrix::identity(zv.len());
    Ok((
        cross_entropy_rows(&eye, &pv)?,
        cross_entropy_rows(&eye, &pt)?,
    ))
}

/// Cross-entropy of the student's probabilities against soft targets, per direction.
pub fn distill_loss(
    zv: &EmbeddingBatch,
    zt: &EmbeddingBatch,
    inv_temp: f64,
    target_v: &TargetDistribution,
    target_t: &TargetDistribution,
) -> Result<(f64, f64)> {
    let (_, pv, pt) = probabilities(zv, zt, inv_temp)?;
    Ok((
        cross_entropy_rows(&target_v.matrix, &pv)?,
        cross_entropy_rows(&target_t.matrix, &pt)?,
    ))
}

/// Builds `(image-side, text-side)` targets for `cfg.method` from teacher embeddings.
pub fn build_targets(
    teacher_v: &EmbeddingBatch,
    teacher_t: &EmbeddingBatch,
    teacher_inv_temp: f64,
    cfg: &TrainConfig,
) -> Result<(TargetDistribution, TargetDistribution)> {
    let n = teacher_v.len();
    match cfg.method {
        Method::Infonce => Ok((TargetDistribution::hard(n), TargetDistribution::hard(n))),
        Method::Ls => {
            let m = label_smoothing_target(n)?;
            Ok((m.clone(), m))
        }
        Method::Kd => Ok((
            kd_target(teacher_v, teacher_t, teacher_inv_temp, Side::Image)?,
            kd_target(teacher_v, teacher_t, teacher_inv_temp, Side::Text)?,
        )),
        Method::Otter => {
            let sim = cfg.similarity();
            let sk = cfg.sinkhorn();
            let sv = similarity_matrix(teacher_v, teacher_t, &sim, Side::Image)?;
            let st = similarity_matrix(teacher_v, teacher_t, &sim, Side::Text)?;
            Ok((otter_target(&sv, &sk)?, otter_target(&st, &sk)?))
        }
    }
}

/// Teacher embeddings for a batch. Targets built from them are constants.
pub fn teacher_targets(
    teacher: &TeacherState,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<(TargetDistribution, TargetDistribution)> {
    let n = batch.len();
    // Hard and label-smoothing targets need no teacher forward pass.
    match cfg.method {
        Method::Infonce => return Ok((TargetDistribution::hard(n), TargetDistribution::hard(n))),
        Method::Ls => {
            let m = label_smoothing_target(n)?;
            return Ok((m.clone(), m));
        }
        Method::Kd | Method::Otter => {}
    }
    let tv = teacher.params.embed_images(&batch.image_features)?;
    let tt = teacher.params.embed_texts(&batch.text_features)?;
    build_targets(&tv, &tt, teacher.params.inv_temp(), cfg)
}

/// Forward pass, loss breakdown and exact gradients for one batch.
pub fn loss_and_gradients(
    encoder: &EncoderState,
    teacher: &TeacherState,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, GradientBundle)> {
    let n = batch.len();
    if n < 2 {
        return Err(OtterError::DegenerateRow(n));
    }
    if batch.text_features.rows() != n {
        return Err(OtterError::ShapeMismatch(format!(
            "{n} images vs {} captions",
            batch.text_features.rows()
        )));
    }
    let (target_v, target_t) = teacher_targets(teacher, batch, cfg)?;
    let alpha = cfg.alpha;

    let raw_v = batch.image_features.matmul(&encoder.w_image)?;
    let raw_t = batch.text_features.matmul(&encoder.w_text)?;
    let zv = crate::numerics::l2_normalize_rows(&raw_v)?;
    let zt = crate::numerics::l2_normalize_rows(&raw_t)?;
    let inv_temp = encoder.inv_temp();
    let (logits, pv, pt) = probabilities(&zv, &zt, inv_temp)?;

    let eye = Matrix::identity(n);
    let info_nce_v = cross_entropy_rows(&eye, &pv)?;
    let info_nce_t = cross_entropy_rows(&eye, &pt)?;
    let distill_v = cross_entropy_rows(&target_v.matrix, &pv)?;
    let distill_t = cross_entropy_rows(&target_t.matrix, &pt)?;
    let total = alpha * (info_nce_v + info_nce_t) + (1.0 - alpha) * (distill_v + distill_t);
    if !total.is_finite() {
        return Err(OtterError::NonFiniteLoss);
    }

    // Residuals P − (αI + (1−α)Q), one per direction.
    let residual = |p: &Matrix, q: &Matrix| {
        Matrix::from_fn(n, n, |i, j| {
            let eye = if i == j { alpha } else { 0.0 };
            p[(i, j)] - (eye + (1.0 - alpha) * q[(i, j)])
        })
    };
    let rv = residual(&pv, &target_v.matrix);
    let rt = residual(&pt, &target_t.matrix);

    let nf = n as f64;
    // ∂total/∂t = Σ rv ⊙ L / N + Σ rt ⊙ Lᵀ / N
    let mut d_inv_temp = 0.0;
    for i in 0..n {
        for j in 0..n {
            d_inv_temp += rv[(i, j)] * logits[(i, j)] + rt[(i, j)] * logits[(j, i)];
        }
    }
    d_inv_temp /= nf;

    // ∂total/∂L = t (rv + rtᵀ) / N
    let scale = inv_temp / nf;
    let d_logits = Matrix::from_fn(n, n, |i, j| scale * (rv[(i, j)] + rt[(j, i)]));

    let d_zv = d_logits.matmul(zt.matrix())?;
    let d_zt = d_logits.t_matmul(zv.matrix())?;
    let d_raw_v = normalization_backward(&raw_v, &zv, &d_zv);
    let d_raw_t = normalization_backward(&raw_t, &zt, &d_zt);

    let grads = GradientBundle {
        d_weights_image: batch.image_features.t_matmul(&d_raw_v)?,
        d_weights_text: batch.text_features.t_matmul(&d_raw_t)?,
        d_log_inv_temp: d_inv_temp * inv_temp,
    };
    if !grads.is_finite() {
        return Err(OtterError::NonFinite("gradients".into()));
    }

    Ok((
        LossBreakdown {
            total,
            info_nce_v,
            info_nce_t,
            distill_v,
            distill_t,
            alpha,
        },
        grads,
    ))
}

/// Back-propagates through `z = y / ‖y‖` row by row: `dy = (dz − z (z·dz)) / ‖y‖`.
fn normalization_backward(raw: &Matrix, z: &EmbeddingBatch, dz: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let norm = crate::numerics::norm(raw.row(i));
        let zi = z.matrix().row(i);
        let gi = dz.row(i);
        let proj = dot(zi, gi);
        for ((o, &g), &zz) in out.row_mut(i).iter_mut().zip(gi).zip(zi) {
            *o = (g - zz * proj) / norm;
        }
    }
    out
}
