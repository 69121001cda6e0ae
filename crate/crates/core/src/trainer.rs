//! Linear dual encoders, an EMA teacher and the SGD training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::losses::{loss_and_gradients, GradientBundle, LossBreakdown};
use crate::numerics::{l2_normalize_rows, EmbeddingBatch, Matrix};
use crate::sinkhorn::SinkhornConfig;
use crate::targets::SimilarityConfig;

/// Conventional contrastive starting temperature, 1 / 0.07.
pub const DEFAULT_INIT_INV_TEMP: f64 = 1.0 / 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Infonce,
    Ls,
    Kd,
    Otter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Infonce, Method::Ls, Method::Kd, Method::Otter];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Infonce => "infonce",
            Method::Ls => "ls",
            Method::Kd => "kd",
            Method::Otter => "otter",
        }
    }

    /// Identity weight used when none is given: 0.9 for label smoothing, 0.5 otherwise.
    pub fn default_alpha(&self) -> f64 {
        match self {
            Method::Ls => 0.9,
            _ => 0.5,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = OtterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "infonce" => Ok(Method::Infonce),
            "ls" => Ok(Method::Ls),
            "kd" => Ok(Method::Kd),
            "otter" => Ok(Method::Otter),
            _ => Err(OtterError::MethodUnknown(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub gamma_v: f64,
    pub gamma_t: f64,
    pub eta: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub use_ema_teacher: bool,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub d_emb: usize,
    pub init_inv_temp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Otter)
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            alpha: method.default_alpha(),
            gamma_v: 1.0,
            gamma_t: 1.0,
            eta: crate::targets::DEFAULT_ETA,
            lambda: crate::sinkhorn::DEFAULT_LAMBDA,
            sinkhorn_iters: crate::sinkhorn::DEFAULT_ITERS,
            use_ema_teacher: true,
            ema_momentum: 0.999,
            batch_size: 64,
            epochs: 10,
            lr: 3e-3,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            d_emb: 16,
            init_inv_temp: DEFAULT_INIT_INV_TEMP,
        }
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            gamma_v: self.gamma_v,
            gamma_t: self.gamma_t,
            eta: self.eta,
        }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig::new(self.lambda, self.sinkhorn_iters)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(OtterError::ConfigInvalid(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(OtterError::AlphaOutOfRange(self.alpha));
        }
        if !(self.gamma_v >= 0.0 && self.gamma_t >= 0.0 && self.eta >= 0.0) {
            return bad("gamma_v, gamma_t and eta must be non-negative".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!(
                "ema momentum must be in [0, 1), got {}",
                self.ema_momentum
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!(
                "sgd momentum must be in [0, 1), got {}",
                self.sgd_momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if self.d_emb == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.init_inv_temp > 0.0 && self.init_inv_temp.is_finite()) {
            return bad("initial inverse temperature must be positive".into());
        }
        Ok(())
    }
}

/// Student parameters: two bias-free linear maps and the log inverse temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    /// `d_img_in × d_emb`
    pub w_image: Matrix,
    /// `d_txt_in × d_emb`
    pub w_text: Matrix,
    pub log_inv_temp: f64,
}

impl EncoderState {
    /// Uniform `[-1/√d_in, 1/√d_in]` weights.
    pub fn init(d_img_in: usize, d_txt_in: usize, d_emb: usize, inv_temp: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |d_in: usize| {
            let bound = 1.0 / (d_in as f64).sqrt();
            Matrix::from_fn(d_in, d_emb, |_, _| rng.random_range(-bound..=bound))
        };
        let w_image = draw(d_img_in);
        let w_text = draw(d_txt_in);
        Self {
            w_image,
            w_text,
            log_inv_temp: inv_temp.ln(),
        }
    }

    pub fn inv_temp(&self) -> f64 {
        self.log_inv_temp.exp()
    }

    pub fn d_emb(&self) -> usize {
        self.w_image.cols()
    }

    pub fn embed_images(&self, x: &Matrix) -> Result<EmbeddingBatch> {
        l2_normalize_rows(&x.matmul(&self.w_image)?)
    }

    pub fn embed_texts(&self, x: &Matrix) -> Result<EmbeddingBatch> {
        l2_normalize_rows(&x.matmul(&self.w_text)?)
    }

    fn check_same_shape(&self, other: &EncoderState) -> Result<()> {
        if self.w_image.shape() != other.w_image.shape()
            || self.w_text.shape() != other.w_text.shape()
        {
            return Err(OtterError::ShapeMismatch(format!(
                "encoder {:?}/{:?} vs {:?}/{:?}",
                self.w_image.shape(),
                self.w_text.shape(),
                other.w_image.shape(),
                other.w_text.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_image.is_finite() && self.w_text.is_finite() && self.log_inv_temp.is_finite()
    }
}

/// Slow-moving copy of the student used to build targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: EncoderState,
    pub momentum: f64,
}

impl TeacherState {
    pub fn from_student(student: &EncoderState, momentum: f64) -> Self {
        Self {
            params: student.clone(),
            momentum,
        }
    }
}

/// One batch of paired features. `latent_labels` are carried for
/// evaluation and never read during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub image_features: Matrix,
    pub text_features: Matrix,
    pub latent_labels: Option<Vec<i64>>,
}

impl PairBatch {
    pub fn new(image_features: Matrix, text_features: Matrix) -> Result<Self> {
        if image_features.rows() != text_features.rows() {
            return Err(OtterError::ShapeMismatch(format!(
                "{} images vs {} captions",
                image_features.rows(),
                text_features.rows()
            )));
        }
        Ok(Self {
            image_features,
            text_features,
            latent_labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(OtterError::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.latent_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            image_features: self.image_features.select_rows(idx),
            text_features: self.text_features.select_rows(idx),
            latent_labels: self
                .latent_labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Consecutive batches of `batch_size`; a trailing partial batch is dropped.
    pub fn chunks(&self, batch_size: usize) -> Vec<PairBatch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order
            .chunks_exact(batch_size.max(1))
            .map(|c| self.select(c))
            .collect()
    }
}

/// `θ̃ ← m·θ̃ + (1 − m)·θ`, applied to every parameter including the temperature.
pub fn ema_update(teacher: &TeacherState, student: &EncoderState) -> Result<TeacherState> {
    teacher.params.check_same_shape(student)?;
    let m = teacher.momentum;
    let blend = |t: &Matrix, s: &Matrix| {
        Matrix::from_vec(
            t.rows(),
            t.cols(),
            t.as_slice()
                .iter()
                .zip(s.as_slice())
                .map(|(a, b)| m * a + (1.0 - m) * b)
                .collect(),
        )
    };
    Ok(TeacherState {
        params: EncoderState {
            w_image: blend(&teacher.params.w_image, &student.w_image)?,
            w_text: blend(&teacher.params.w_text, &student.w_text)?,
            log_inv_temp: m * teacher.params.log_inv_temp + (1.0 - m) * student.log_inv_temp,
        },
        momentum: m,
    })
}

/// Cosine-annealed learning rate, `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(OtterError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + phase.cos()))
}

/// Heavy-ball SGD: `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    state: &EncoderState,
    grads: &GradientBundle,
    velocity: &GradientBundle,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(EncoderState, GradientBundle)> {
    fn update(
        p: &Matrix,
        g: &Matrix,
        v: &Matrix,
        lr: f64,
        mu: f64,
        wd: f64,
    ) -> Result<(Matrix, Matrix)> {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(OtterError::ShapeMismatch(format!(
                "param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let mut new_v = Vec::with_capacity(p.as_slice().len());
        let mut new_p = Vec::with_capacity(p.as_slice().len());
        for ((&pi, &gi), &vi) in p.as_slice().iter().zip(g.as_slice()).zip(v.as_slice()) {
            let vn = mu * vi + (gi + wd * pi);
            new_v.push(vn);
            new_p.push(pi - lr * vn);
        }
        Ok((
            Matrix::from_vec(p.rows(), p.cols(), new_p)?,
            Matrix::from_vec(p.rows(), p.cols(), new_v)?,
        ))
    }

    let (w_image, v_image) = update(
        &state.w_image,
        &grads.d_weights_image,
        &velocity.d_weights_image,
        lr,
        momentum,
        weight_decay,
    )?;
    let (w_text, v_text) = update(
        &state.w_text,
        &grads.d_weights_text,
        &velocity.d_weights_text,
        lr,
        momentum,
        weight_decay,
    )?;
    let v_temp = momentum * velocity.d_log_inv_temp
        + (grads.d_log_inv_temp + weight_decay * state.log_inv_temp);
    Ok((
        EncoderState {
            w_image,
            w_text,
            log_inv_temp: state.log_inv_temp - lr * v_temp,
        },
        GradientBundle {
            d_weights_image: v_image,
            d_weights_text: v_text,
            d_log_inv_temp: v_temp,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub student: EncoderState,
    pub teacher: TeacherState,
    pub log: TrainLog,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Trains over a fixed sequence of batches, replayed in the same order every epoch.
pub fn train(config: &TrainConfig, batches: &[PairBatch]) -> Result<TrainOutcome> {
    let first = batches.first().ok_or(OtterError::EmptyDataset)?;
    for (i, b) in batches.iter().enumerate() {
        if b.len() != config.batch_size {
            return Err(OtterError::ShapeMismatch(format!(
                "batch {i} has {} samples, expected {}",
                b.len(),
                config.batch_size
            )));
        }
    }
    let steps_per_epoch = batches.len();
    run(
        config,
        first.image_features.cols(),
        first.text_features.cols(),
        steps_per_epoch,
        |_| batches.to_vec(),
    )
}

/// Trains on a flat dataset, reshuffling sample order every epoch with a
/// stream derived from `config.seed`. The trailing partial batch is dropped.
pub fn train_shuffled(config: &TrainConfig, data: &PairBatch) -> Result<TrainOutcome> {
    let steps_per_epoch = data.len() / config.batch_size.max(1);
    if steps_per_epoch == 0 {
        return Err(OtterError::EmptyDataset);
    }
    run(
        config,
        data.image_features.cols(),
        data.text_features.cols(),
        steps_per_epoch,
        |epoch| shuffled_batches(data, config.batch_size, config.seed, epoch),
    )
}

/// Deterministic per-epoch permutation of `data`, cut into full batches.
pub fn shuffled_batches(
    data: &PairBatch,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<PairBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| data.select(c))
        .collect()
}

fn run(
    config: &TrainConfig,
    d_img_in: usize,
    d_txt_in: usize,
    steps_per_epoch: usize,
    mut epoch_batches: impl FnMut(usize) -> Vec<PairBatch>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut student = EncoderState::init(
        d_img_in,
        d_txt_in,
        config.d_emb,
        config.init_inv_temp,
        config.seed,
    );
    let mut teacher = TeacherState::from_student(&student, config.ema_momentum);
    let mut velocity = GradientBundle::zeros_like(&student);
    let total_steps = config.epochs * steps_per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        for batch in epoch_batches(epoch) {
            let lr = cosine_lr(step, total_steps, config.lr)?;
            // Without an EMA teacher the targets come from the current student.
            let teacher_now = if config.use_ema_teacher {
                teacher.clone()
            } else {
                TeacherState::from_student(&student, config.ema_momentum)
            };
            let (loss, grads) = loss_and_gradients(&student, &teacher_now, &batch, config)
                .map_err(|e| e.at_step(step))?;
            let (next, next_velocity) = sgd_step(
                &student,
                &grads,
                &velocity,
                lr,
                config.sgd_momentum,
                config.weight_decay,
            )
            .map_err(|e| e.at_step(step))?;
            if !next.is_finite() {
                return Err(OtterError::NonFinite("encoder parameters".into()).at_step(step));
            }
            student = next;
            velocity = next_velocity;
            if config.use_ema_teacher {
                teacher = ema_update(&teacher, &student).map_err(|e| e.at_step(step))?;
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
            });
            step += 1;
        }
    }
    if !config.use_ema_teacher {
        teacher = TeacherState::from_student(&student, config.ema_momentum);
    }
    Ok(TrainOutcome {
        student,
        teacher,
        log,
        steps: step,
    })
}

/// Everything needed to resume or score a run. Stored as JSON; floats are
/// written in shortest round-trip form, so save → load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub student: EncoderState,
    pub teacher: TeacherState,
    pub steps: usize,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "otter-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(config: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config: config.clone(),
            student: outcome.student.clone(),
            teacher: outcome.teacher.clone(),
            steps: outcome.steps,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| OtterError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| OtterError::FormatError {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if ck.format != Self::FORMAT || ck.version != Self::VERSION {
            return Err(OtterError::FormatError {
                location: "header".into(),
                message: format!(
                    "not a version-{} checkpoint: {} v{}",
                    Self::VERSION,
                    ck.format,
                    ck.version
                ),
            });
        }
        if !ck.student.is_finite() || !ck.teacher.params.is_finite() {
            return Err(OtterError::NonFinite("checkpoint parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_state(v: f64) -> EncoderState {
        EncoderState {
            w_image: Matrix::filled(1, 1, v),
            w_text: Matrix::filled(1, 1, v),
            log_inv_temp: v,
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("otter".parse::<Method>().unwrap(), Method::Otter);
        assert_eq!("KD".parse::<Method>().unwrap(), Method::Kd);
        assert_eq!(
            "clip".parse::<Method>(),
            Err(OtterError::MethodUnknown("clip".into()))
        );
        assert_eq!(TrainConfig::for_method(Method::Ls).alpha, 0.9);
        assert_eq!(TrainConfig::for_method(Method::Otter).alpha, 0.5);
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.method, Method::Otter);
        assert_eq!((c.gamma_v, c.gamma_t, c.eta), (1.0, 1.0, 100.0));
        assert_eq!((c.lambda, c.sinkhorn_iters), (0.15, 5));
        assert!(c.use_ema_teacher);
        assert_eq!(c.ema_momentum, 0.999);
        assert_eq!(
            (c.lr, c.sgd_momentum, c.weight_decay, c.epochs),
            (3e-3, 0.9, 0.0, 10)
        );
        c.validate().unwrap();
    }

    #[test]
    fn ema_examples() {
        let student = scalar_state(1.0);
        let copy = ema_update(
            &TeacherState {
                params: scalar_state(0.0),
                momentum: 0.0,
            },
            &student,
        )
        .unwrap();
        assert_eq!(copy.params, student);

        let frozen = TeacherState {
            params: scalar_state(0.25),
            momentum: 1.0,
        };
        assert_eq!(
            ema_update(&frozen, &student).unwrap().params,
            scalar_state(0.25)
        );

        let t = ema_update(
            &TeacherState {
                params: scalar_state(0.0),
                momentum: 0.999,
            },
            &student,
        )
        .unwrap();
        assert_abs_diff_eq!(t.params.w_image[(0, 0)], 0.001, epsilon = 1e-15);
        assert_abs_diff_eq!(t.params.log_inv_temp, 0.001, epsilon = 1e-15);
    }

    #[test]
    fn ema_converges_geometrically() {
        let student = scalar_state(1.0);
        let mut t = TeacherState {
            params: scalar_state(0.0),
            momentum: 0.9,
        };
        for k in 1..=100 {
            t = ema_update(&t, &student).unwrap();
            let closed = 1.0 - 0.9f64.powi(k);
            assert_abs_diff_eq!(t.params.w_text[(0, 0)], closed, epsilon = 1e-12);
        }
    }

    #[test]
    fn ema_shape_mismatch() {
        let t = TeacherState {
            params: scalar_state(0.0),
            momentum: 0.5,
        };
        let s = EncoderState::init(2, 2, 2, 1.0, 0);
        assert!(matches!(
            ema_update(&t, &s),
            Err(OtterError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.3).unwrap(), 0.3);
        assert_abs_diff_eq!(cosine_lr(10, 10, 0.3).unwrap(), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(5, 10, 0.3).unwrap(), 0.15, epsilon = 1e-16);
        assert_eq!(
            cosine_lr(11, 10, 0.3),
            Err(OtterError::StepOutOfRange {
                step: 11,
                total: 10
            })
        );
        assert!(cosine_lr(0, 0, 0.3).is_err());
    }

    fn bundle(v: f64) -> GradientBundle {
        GradientBundle {
            d_weights_image: Matrix::filled(1, 1, v),
            d_weights_text: Matrix::filled(1, 1, v),
            d_log_inv_temp: v,
        }
    }

    #[test]
    fn sgd_plain_step() {
        let (s, _) = sgd_step(
            &scalar_state(1.0),
            &bundle(2.0),
            &bundle(0.0),
            0.1,
            0.0,
            0.0,
        )
        .unwrap();
        assert_abs_diff_eq!(s.w_image[(0, 0)], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(s.log_inv_temp, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let state = scalar_state(0.7);
        let (s, v) = sgd_step(&state, &bundle(0.0), &bundle(0.0), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s, state);
        assert_eq!(v.d_weights_image[(0, 0)], 0.0);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = g, v2 = 0.9 g + g; displacement lr·g·(1 + 1.9)
        let (lr, g) = (0.1, 2.0);
        let s0 = scalar_state(0.0);
        let (s1, v1) = sgd_step(&s0, &bundle(g), &bundle(0.0), lr, 0.9, 0.0).unwrap();
        let (s2, _) = sgd_step(&s1, &bundle(g), &v1, lr, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(s2.w_image[(0, 0)], -lr * g * 2.9, epsilon = 1e-15);
    }

    #[test]
    fn sgd_weight_decay_and_shape() {
        let (s, _) = sgd_step(
            &scalar_state(1.0),
            &bundle(0.0),
            &bundle(0.0),
            0.5,
            0.0,
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(s.w_text[(0, 0)], 0.95, epsilon = 1e-15);
        let big = GradientBundle::zeros_like(&EncoderState::init(2, 2, 2, 1.0, 0));
        assert!(sgd_step(&scalar_state(1.0), &big, &bundle(0.0), 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = EncoderState::init(16, 9, 4, 1.0 / 0.07, 3);
        let b = EncoderState::init(16, 9, 4, 1.0 / 0.07, 3);
        assert_eq!(a, b);
        assert!(a.w_image.as_slice().iter().all(|v| v.abs() <= 0.25));
        assert!(a.w_text.as_slice().iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert_abs_diff_eq!(a.inv_temp(), 1.0 / 0.07, epsilon = 1e-12);
    }

    #[test]
    fn partial_batches_are_dropped() {
        let data = PairBatch::new(Matrix::zeros(10, 2), Matrix::zeros(10, 3)).unwrap();
        let chunks = data.chunks(4);
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.len() == 4));
        assert_eq!(shuffled_batches(&data, 4, 1, 0).len(), 2);
    }

    #[test]
    fn train_rejects_empty() {
        let cfg = TrainConfig::default();
        assert_eq!(train(&cfg, &[]), Err(OtterError::EmptyDataset));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = PairBatch::new(
            Matrix::from_fn(8, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin()),
            Matrix::from_fn(8, 2, |i, j| ((i * 2 + j) as f64 * 0.53).cos()),
        )
        .unwrap();
        let mut cfg = TrainConfig::for_method(Method::Otter);
        cfg.batch_size = 4;
        cfg.epochs = 2;
        cfg.d_emb = 2;
        let out = train_shuffled(&cfg, &data).unwrap();
        let ck = Checkpoint::new(&cfg, &out);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.student.w_image), bits(&ck.student.w_image));
        assert_eq!(
            back.student.log_inv_temp.to_bits(),
            ck.student.log_inv_temp.to_bits()
        );
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
