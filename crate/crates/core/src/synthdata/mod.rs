//! Seeded synthetic image-caption data with known latent concepts.
//!
//! Each concept owns one unit prototype per modality. An image is its
//! concept's image prototype plus isotropic Gaussian noise; its caption is
//! drawn the same way from the *caption* concept, which with probability
//! `caption_swap_prob` is a different concept chosen uniformly. That models
//! loosely paired web data where a caption may describe another image in
//! the batch better than its own.
//!
//! The attribute variant used by the compositional retrieval benchmark builds
//! features as normalized sums of per-attribute prototypes.

mod format;

pub use format::{load_embeddings, save_embeddings, MAGIC, VERSION};

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::numerics::{l2_normalize_rows, Matrix};
use crate::trainer::PairBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub d_img_in: usize,
    pub d_txt_in: usize,
    pub feature_noise_sigma: f64,
    pub caption_swap_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            samples_per_concept: 128,
            d_img_in: 32,
            d_txt_in: 32,
            feature_noise_sigma: 0.1,
            caption_swap_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OtterError::ConfigInvalid(m));
        if self.n_concepts < 2 {
            return bad(format!("need at least 2 concepts, got {}", self.n_concepts));
        }
        if self.samples_per_concept == 0 {
            return bad("samples per concept must be positive".into());
        }
        if self.d_img_in < 2 || self.d_txt_in < 2 {
            return bad(format!(
                "feature dimensions must be at least 2, got {} and {}",
                self.d_img_in, self.d_txt_in
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma must be >= 0, got {}",
                self.feature_noise_sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.caption_swap_prob) {
            return bad(format!(
                "swap probability must be in [0, 1], got {}",
                self.caption_swap_prob
            ));
        }
        Ok(())
    }
}

/// Per-sample attribute sets plus the text-side prototype of every attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeAnnotations {
    pub sets: Vec<BTreeSet<u32>>,
    /// `n_attributes × d_txt_in`
    pub text_prototypes: Matrix,
}

impl AttributeAnnotations {
    pub fn n_attributes(&self) -> usize {
        self.text_prototypes.rows()
    }

    /// Caption-space feature of an attribute set: the normalized sum of its
    /// attribute prototypes. `None` for the empty set.
    pub fn text_feature(&self, attrs: &BTreeSet<u32>) -> Option<Vec<f64>> {
        if attrs.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; self.text_prototypes.cols()];
        for &a in attrs {
            for (o, v) in acc.iter_mut().zip(self.text_prototypes.row(a as usize)) {
                *o += v;
            }
        }
        let n = crate::numerics::norm(&acc);
        if n < crate::numerics::MIN_ROW_NORM {
            return None;
        }
        acc.iter_mut().for_each(|v| *v /= n);
        Some(acc)
    }
}

/// A paired dataset, generated or loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Features; `latent_labels` holds the image concepts when known.
    pub pairs: PairBatch,
    pub concept_of_image: Option<Vec<usize>>,
    pub concept_of_caption: Option<Vec<usize>>,
    /// `n_concepts × d_txt_in`; the zero-shot class "prompts".
    pub class_prototypes_text: Option<Matrix>,
    /// `n_concepts × d_img_in`
    pub class_prototypes_image: Option<Matrix>,
    pub attributes: Option<AttributeAnnotations>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn d_img_in(&self) -> usize {
        self.pairs.image_features.cols()
    }

    pub fn d_txt_in(&self) -> usize {
        self.pairs.text_features.cols()
    }

    pub fn n_concepts(&self) -> Option<usize> {
        if let Some(p) = &self.class_prototypes_text {
            return Some(p.rows());
        }
        self.concept_of_image
            .as_ref()
            .and_then(|c| c.iter().max().map(|m| m + 1))
    }

    /// Fraction of samples whose caption concept differs from the image concept.
    pub fn off_concept_fraction(&self) -> Option<f64> {
        let img = self.concept_of_image.as_ref()?;
        let cap = self.concept_of_caption.as_ref()?;
        let off = img.iter().zip(cap).filter(|(a, b)| a != b).count();
        Some(off as f64 / img.len().max(1) as f64)
    }

    /// Class text features for zero-shot inference: the stored prototypes, or
    /// else the mean caption feature of each labelled concept.
    pub fn class_text_features(&self) -> Result<Matrix> {
        if let Some(p) = &self.class_prototypes_text {
            return Ok(p.clone());
        }
        let labels = self.concept_of_image.as_ref().ok_or_else(|| {
            OtterError::ConfigInvalid("dataset has neither class prototypes nor labels".into())
        })?;
        let c = self.n_concepts().unwrap_or(0);
        let d = self.d_txt_in();
        let mut sums = Matrix::zeros(c, d);
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (o, v) in sums
                .row_mut(l)
                .iter_mut()
                .zip(self.pairs.text_features.row(i))
            {
                *o += v;
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                sums.row_mut(k).iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(sums)
    }
}

fn gaussian_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let m = Matrix::from_fn(rows, cols, |_, _| -> f64 { StandardNormal.sample(rng) });
    Ok(l2_normalize_rows(&m)?.into_matrix())
}

fn noisy_copy(rng: &mut ChaCha8Rng, proto: &[f64], sigma: f64, out: &mut Vec<f64>) {
    for &p in proto {
        let noise: f64 = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        } else {
            0.0
        };
        out.push(p + noise);
    }
}

/// A concept different from `c`, uniformly among the other `n - 1`.
fn other_concept(rng: &mut ChaCha8Rng, c: usize, n: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= c {
        k + 1
    } else {
        k
    }
}

struct Prototypes {
    image: Matrix,
    text: Matrix,
}

fn draw_samples(
    cfg: &SynthConfig,
    protos: &Prototypes,
    per_concept: usize,
    swap_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SynthDataset> {
    let n = cfg.n_concepts * per_concept;
    let mut concepts: Vec<usize> = (0..cfg.n_concepts)
        .flat_map(|c| std::iter::repeat_n(c, per_concept))
        .collect();
    concepts.shuffle(rng);

    let mut img = Vec::with_capacity(n * cfg.d_img_in);
    let mut txt = Vec::with_capacity(n * cfg.d_txt_in);
    let mut caption_concepts = Vec::with_capacity(n);
    for &c in &concepts {
        let swapped = swap_prob > 0.0 && rng.random_bool(swap_prob);
        let cc = if swapped {
            other_concept(rng, c, cfg.n_concepts)
        } else {
            c
        };
        noisy_copy(rng, protos.image.row(c), cfg.feature_noise_sigma, &mut img);
        noisy_copy(rng, protos.text.row(cc), cfg.feature_noise_sigma, &mut txt);
        caption_concepts.push(cc);
    }
    let pairs = PairBatch::new(
        Matrix::from_vec(n, cfg.d_img_in, img)?,
        Matrix::from_vec(n, cfg.d_txt_in, txt)?,
    )?
    .with_labels(concepts.iter().map(|&c| c as i64).collect())?;
    Ok(SynthDataset {
        pairs,
        concept_of_image: Some(concepts),
        concept_of_caption: Some(caption_concepts),
        class_prototypes_text: Some(protos.text.clone()),
        class_prototypes_image: Some(protos.image.clone()),
        attributes: None,
    })
}

fn draw_prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Prototypes> {
    Ok(Prototypes {
        image: gaussian_unit_rows(rng, cfg.n_concepts, cfg.d_img_in)?,
        text: gaussian_unit_rows(rng, cfg.n_concepts, cfg.d_txt_in)?,
    })
}

/// Generates `n_concepts × samples_per_concept` pairs in shuffled order.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = draw_prototypes(cfg, &mut rng)?;
    draw_samples(
        cfg,
        &protos,
        cfg.samples_per_concept,
        cfg.caption_swap_prob,
        &mut rng,
    )
}

/// Training set as in [`generate`] plus a clean held-out set drawn from the
/// same prototypes (`holdout_per_concept` images per concept, no caption swaps).
pub fn generate_with_holdout(
    cfg: &SynthConfig,
    holdout_per_concept: usize,
) -> Result<(SynthDataset, SynthDataset)> {
    let train = generate(cfg)?;
    if holdout_per_concept == 0 {
        return Err(OtterError::ConfigInvalid(
            "held-out set must be non-empty".into(),
        ));
    }
    let protos = Prototypes {
        image: train.class_prototypes_image.clone().expect("generated"),
        text: train.class_prototypes_text.clone().expect("generated"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let test = draw_samples(cfg, &protos, holdout_per_concept, 0.0, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSynthConfig {
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub n_attributes: usize,
    /// Size of each concept's base attribute set.
    pub attributes_per_concept: usize,
    /// Probability of dropping each base attribute from a sample.
    pub drop_prob: f64,
    /// Probability of adding each non-base attribute to a sample.
    pub add_prob: f64,
    pub d_img_in: usize,
    pub d_txt_in: usize,
    pub feature_noise_sigma: f64,
    pub caption_swap_prob: f64,
    pub seed: u64,
}

impl Default for AttributeSynthConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            samples_per_concept: 64,
            n_attributes: 64,
            attributes_per_concept: 16,
            drop_prob: 0.1,
            add_prob: 0.03,
            d_img_in: 32,
            d_txt_in: 32,
            feature_noise_sigma: 0.05,
            caption_swap_prob: 0.0,
            seed: 0,
        }
    }
}

impl AttributeSynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OtterError::ConfigInvalid(m));
        if self.n_concepts < 2 || self.samples_per_concept == 0 {
            return bad("need at least 2 concepts and 1 sample per concept".into());
        }
        if self.attributes_per_concept == 0 || self.attributes_per_concept > self.n_attributes {
            return bad(format!(
                "attributes per concept must be in 1..={}",
                self.n_attributes
            ));
        }
        if self.n_attributes > u32::MAX as usize {
            return bad("too many attributes".into());
        }
        for (name, p) in [
            ("drop", self.drop_prob),
            ("add", self.add_prob),
            ("swap", self.caption_swap_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability must be in [0, 1], got {p}"));
            }
        }
        if self.d_img_in < 2 || self.d_txt_in < 2 {
            return bad("feature dimensions must be at least 2".into());
        }
        if !(self.feature_noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        Ok(())
    }
}

fn sum_of_rows(protos: &Matrix, attrs: &BTreeSet<u32>) -> Vec<f64> {
    let mut acc = vec![0.0; protos.cols()];
    for &a in attrs {
        for (o, v) in acc.iter_mut().zip(protos.row(a as usize)) {
            *o += v;
        }
    }
    let n = crate::numerics::norm(&acc);
    if n > 0.0 {
        acc.iter_mut().for_each(|v| *v /= n);
    }
    acc
}

/// Attribute-annotated pairs: each sample perturbs its concept's base
/// attribute set; its image (caption) feature is the normalized sum of the
/// image (text) prototypes of its attributes, plus noise.
pub fn generate_attributes(cfg: &AttributeSynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img_protos = gaussian_unit_rows(&mut rng, cfg.n_attributes, cfg.d_img_in)?;
    let txt_protos = gaussian_unit_rows(&mut rng, cfg.n_attributes, cfg.d_txt_in)?;
    let universe: Vec<u32> = (0..cfg.n_attributes as u32).collect();
    let bases: Vec<BTreeSet<u32>> = (0..cfg.n_concepts)
        .map(|_| {
            universe
                .choose_multiple(&mut rng, cfg.attributes_per_concept)
                .copied()
                .collect()
        })
        .collect();

    let n = cfg.n_concepts * cfg.samples_per_concept;
    let mut concepts: Vec<usize> = (0..cfg.n_concepts)
        .flat_map(|c| std::iter::repeat_n(c, cfg.samples_per_concept))
        .collect();
    concepts.shuffle(&mut rng);

    let mut sets = Vec::with_capacity(n);
    for &c in &concepts {
        let mut s = BTreeSet::new();
        for &a in &universe {
            let keep = if bases[c].contains(&a) {
                !rng.random_bool(cfg.drop_prob)
            } else {
                rng.random_bool(cfg.add_prob)
            };
            if keep {
                s.insert(a);
            }
        }
        if s.is_empty() {
            s.insert(*bases[c].iter().next().expect("non-empty base"));
        }
        sets.push(s);
    }

    let mut img = Vec::with_capacity(n * cfg.d_img_in);
    let mut txt = Vec::with_capacity(n * cfg.d_txt_in);
    let mut caption_concepts = Vec::with_capacity(n);
    for i in 0..n {
        let j = if cfg.caption_swap_prob > 0.0 && rng.random_bool(cfg.caption_swap_prob) {
            let k = rng.random_range(0..n - 1);
            if k >= i {
                k + 1
            } else {
                k
            }
        } else {
            i
        };
        caption_concepts.push(concepts[j]);
        let vi = sum_of_rows(&img_protos, &sets[i]);
        let ti = sum_of_rows(&txt_protos, &sets[j]);
        noisy_copy(&mut rng, &vi, cfg.feature_noise_sigma, &mut img);
        noisy_copy(&mut rng, &ti, cfg.feature_noise_sigma, &mut txt);
    }

    let pairs = PairBatch::new(
        Matrix::from_vec(n, cfg.d_img_in, img)?,
        Matrix::from_vec(n, cfg.d_txt_in, txt)?,
    )?
    .with_labels(concepts.iter().map(|&c| c as i64).collect())?;
    Ok(SynthDataset {
        pairs,
        concept_of_image: Some(concepts),
        concept_of_caption: Some(caption_concepts),
        class_prototypes_text: None,
        class_prototypes_image: None,
        attributes: Some(AttributeAnnotations {
            sets,
            text_prototypes: txt_protos,
        }),
    })
}
