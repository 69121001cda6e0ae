#![allow(dead_code)]

use otter::losses::loss_and_gradients;
use otter::numerics::{l2_normalize_rows, EmbeddingBatch, Matrix};
use otter::trainer::{EncoderState, Method, PairBatch, TeacherState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_unit_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingBatch {
    l2_normalize_rows(&random_matrix(rng, n, d)).unwrap()
}

/// Random student, a distinct teacher, and a random batch.
pub fn gradient_fixture(
    method: Method,
    seed: u64,
    n: usize,
    d_in: usize,
    d_emb: usize,
) -> (EncoderState, TeacherState, PairBatch, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = PairBatch::new(
        random_matrix(&mut rng, n, d_in),
        random_matrix(&mut rng, n, d_in),
    )
    .unwrap();
    let inv_temp = rng.random_range(2.0..15.0);
    let student = EncoderState::init(d_in, d_in, d_emb, inv_temp, seed.wrapping_mul(31) + 1);
    let teacher_params = EncoderState::init(
        d_in,
        d_in,
        d_emb,
        rng.random_range(2.0..15.0),
        seed.wrapping_mul(31) + 2,
    );
    let teacher = TeacherState::from_student(&teacher_params, 0.999);
    let mut cfg = TrainConfig::for_method(method);
    cfg.d_emb = d_emb;
    (student, teacher, batch, cfg)
}

fn total(enc: &EncoderState, teacher: &TeacherState, batch: &PairBatch, cfg: &TrainConfig) -> f64 {
    loss_and_gradients(enc, teacher, batch, cfg)
        .unwrap()
        .0
        .total
}

/// Relative difference with a small absolute floor for near-zero coordinates.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between analytic gradients and central finite
/// differences over every parameter coordinate.
pub fn max_gradient_error(
    enc: &EncoderState,
    teacher: &TeacherState,
    batch: &PairBatch,
    cfg: &TrainConfig,
    h: f64,
) -> f64 {
    let (_, grads) = loss_and_gradients(enc, teacher, batch, cfg).unwrap();
    let mut worst: f64 = 0.0;

    let central = |perturb: &dyn Fn(&mut EncoderState, f64)| {
        let mut plus = enc.clone();
        perturb(&mut plus, h);
        let mut minus = enc.clone();
        perturb(&mut minus, -h);
        (total(&plus, teacher, batch, cfg) - total(&minus, teacher, batch, cfg)) / (2.0 * h)
    };

    for k in 0..enc.w_image.as_slice().len() {
        let fd = central(&|e: &mut EncoderState, d| e.w_image.as_mut_slice()[k] += d);
        worst = worst.max(rel_err(grads.d_weights_image.as_slice()[k], fd));
    }
    for k in 0..enc.w_text.as_slice().len() {
        let fd = central(&|e: &mut EncoderState, d| e.w_text.as_mut_slice()[k] += d);
        worst = worst.max(rel_err(grads.d_weights_text.as_slice()[k], fd));
    }
    let fd = central(&|e: &mut EncoderState, d| e.log_inv_temp += d);
    worst = worst.max(rel_err(grads.d_log_inv_temp, fd));
    worst
}
