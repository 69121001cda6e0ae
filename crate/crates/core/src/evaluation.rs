//! Zero-shot KNN classification, flat hit@K, matching-probability statistics
//! and the compositional retrieval benchmark.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::numerics::{dot, fsum, gram, l2_normalize_rows, row_softmax, EmbeddingBatch, Matrix};
use crate::synthdata::SynthDataset;
use crate::trainer::{EncoderState, PairBatch};

/// Unit-norm text embeddings of the candidate classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    class_embeddings: EmbeddingBatch,
    class_ids: Vec<usize>,
}

impl ClassIndex {
    /// Normalizes `embeddings` row-wise; row `c` belongs to `class_ids[c]`.
    pub fn new(embeddings: &Matrix, class_ids: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != class_ids.len() {
            return Err(OtterError::ShapeMismatch(format!(
                "{} class embeddings for {} ids",
                embeddings.rows(),
                class_ids.len()
            )));
        }
        if class_ids.len() < 2 {
            return Err(OtterError::ConfigInvalid(
                "class index needs at least 2 classes".into(),
            ));
        }
        let unique: BTreeSet<_> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(OtterError::ConfigInvalid("duplicate class ids".into()));
        }
        Ok(Self {
            class_embeddings: l2_normalize_rows(embeddings)?,
            class_ids,
        })
    }

    /// Classes `0..C` in row order.
    pub fn from_prototypes(embeddings: &Matrix) -> Result<Self> {
        Self::new(embeddings, (0..embeddings.rows()).collect())
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings.dim()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn embeddings(&self) -> &EmbeddingBatch {
        &self.class_embeddings
    }
}

/// Top-`k` class ids per image by cosine similarity, ties to the lower id.
pub fn knn_predict(
    images: &EmbeddingBatch,
    index: &ClassIndex,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k > index.len() {
        return Err(OtterError::KTooLarge {
            k,
            classes: index.len(),
        });
    }
    if images.dim() != index.dim() {
        return Err(OtterError::DimensionMismatch(format!(
            "image embeddings have dimension {}, class index {}",
            images.dim(),
            index.dim()
        )));
    }
    let normalized;
    let images = if images.is_normalized() {
        images
    } else {
        normalized = l2_normalize_rows(images.matrix())?;
        &normalized
    };
    let sims = gram(images, &index.class_embeddings)?;
    Ok(sims
        .row_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .total_cmp(&row[a])
                    .then(index.class_ids[a].cmp(&index.class_ids[b]))
            });
            order
                .into_iter()
                .take(k)
                .map(|c| index.class_ids[c])
                .collect()
        })
        .collect())
}

/// Fraction of images whose first `k` predictions meet their label set.
pub fn flat_hit_at_k(
    predictions: &[Vec<usize>],
    true_labels: &[BTreeSet<usize>],
    k: usize,
) -> Result<f64> {
    if predictions.len() != true_labels.len() {
        return Err(OtterError::ShapeMismatch(format!(
            "{} predictions for {} label sets",
            predictions.len(),
            true_labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(OtterError::EmptyDataset);
    }
    let mut hits = 0usize;
    for (i, (pred, labels)) in predictions.iter().zip(true_labels).enumerate() {
        if labels.is_empty() {
            return Err(OtterError::EmptyLabelSet(i));
        }
        if pred.iter().take(k).any(|p| labels.contains(p)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flat_hit_at: BTreeMap<usize, f64>,
    pub n_images: usize,
    pub config_fingerprint: String,
}

/// FH@K for every K in `ks`, from a single top-max(K) prediction pass.
pub fn evaluate(
    images: &EmbeddingBatch,
    index: &ClassIndex,
    true_labels: &[BTreeSet<usize>],
    ks: &[usize],
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let preds = knn_predict(images, index, k_max)?;
    let mut flat_hit_at = BTreeMap::new();
    for &k in ks {
        flat_hit_at.insert(k, flat_hit_at_k(&preds, true_labels, k)?);
    }
    Ok(EvalReport {
        flat_hit_at,
        n_images: images.len(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

/// Zero-shot FH@K of `model` on a labelled dataset: images are classified
/// against the text embeddings of the dataset's class text features.
pub fn zero_shot_report(
    model: &EncoderState,
    data: &SynthDataset,
    ks: &[usize],
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let labels = data
        .concept_of_image
        .as_ref()
        .ok_or_else(|| OtterError::ConfigInvalid("dataset has no image labels".into()))?;
    if model.w_image.rows() != data.d_img_in() || model.w_text.rows() != data.d_txt_in() {
        return Err(OtterError::DimensionMismatch(format!(
            "model expects {}/{} input features, dataset has {}/{}",
            model.w_image.rows(),
            model.w_text.rows(),
            data.d_img_in(),
            data.d_txt_in()
        )));
    }
    let class_emb = model.embed_texts(&data.class_text_features()?)?;
    let index = ClassIndex::from_prototypes(class_emb.matrix())?;
    let images = model.embed_images(&data.pairs.image_features)?;
    let truth: Vec<BTreeSet<usize>> = labels.iter().map(|&l| BTreeSet::from([l])).collect();
    evaluate(&images, &index, &truth, ks, config_fingerprint)
}

/// Matching-probability statistics of one or more N×N probability matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub paired_mean: f64,
    pub unpaired_mean: f64,
    pub unpaired_max_mean: f64,
    pub batch_size: usize,
    pub n_batches: usize,
}

/// Statistics of a single square probability matrix, read image→text by
/// rows, or text→image when `transposed`.
pub fn noise_stats(prob: &Matrix, transposed: bool) -> Result<NoiseStats> {
    if !prob.is_square() {
        return Err(OtterError::NotSquare {
            rows: prob.rows(),
            cols: prob.cols(),
        });
    }
    let n = prob.rows();
    if n < 2 {
        return Err(OtterError::DegenerateRow(0));
    }
    let owned;
    let p = if transposed {
        owned = prob.transpose();
        &owned
    } else {
        prob
    };
    let paired = fsum(p.diagonal()) / n as f64;
    let mut off = Vec::with_capacity(n * (n - 1));
    let mut row_max = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for (j, &v) in p.row(i).iter().enumerate() {
            if i != j {
                off.push(v);
                m = m.max(v);
            }
        }
        row_max.push(m);
    }
    Ok(NoiseStats {
        paired_mean: paired,
        unpaired_mean: fsum(off) / (n * (n - 1)) as f64,
        unpaired_max_mean: fsum(row_max) / n as f64,
        batch_size: n,
        n_batches: 1,
    })
}

/// Averages per-batch statistics (all batches must share one size).
pub fn average_noise_stats(batches: &[NoiseStats]) -> Result<NoiseStats> {
    let first = batches.first().ok_or(OtterError::EmptyDataset)?;
    if batches.iter().any(|b| b.batch_size != first.batch_size) {
        return Err(OtterError::ShapeMismatch("mixed batch sizes".into()));
    }
    let n = batches.len() as f64;
    Ok(NoiseStats {
        paired_mean: fsum(batches.iter().map(|b| b.paired_mean)) / n,
        unpaired_mean: fsum(batches.iter().map(|b| b.unpaired_mean)) / n,
        unpaired_max_mean: fsum(batches.iter().map(|b| b.unpaired_max_mean)) / n,
        batch_size: first.batch_size,
        n_batches: batches.iter().map(|b| b.n_batches).sum(),
    })
}

/// Per-batch statistics of `model`'s image→text matching probabilities on
/// `n_batches` random subsets of `batch_size` pairs (sampled without
/// replacement within a batch), at the model's own temperature.
pub fn sample_noise_stats(
    model: &EncoderState,
    data: &PairBatch,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
    transposed: bool,
) -> Result<Vec<NoiseStats>> {
    if batch_size < 2 || batch_size > data.len() {
        return Err(OtterError::ConfigInvalid(format!(
            "batch size {batch_size} must be in [2, {}]",
            data.len()
        )));
    }
    if n_batches == 0 {
        return Err(OtterError::ConfigInvalid("need at least one batch".into()));
    }
    let zv = model.embed_images(&data.image_features)?;
    let zt = model.embed_texts(&data.text_features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = (0..n_batches)
        .map(|_| index::sample(&mut rng, data.len(), batch_size).into_vec())
        .collect();
    let inv_temp = model.inv_temp();
    picks
        .par_iter()
        .map(|idx| {
            let v = EmbeddingBatch::assume_normalized(zv.matrix().select_rows(idx))?;
            let t = EmbeddingBatch::assume_normalized(zt.matrix().select_rows(idx))?;
            noise_stats(&row_softmax(&gram(&v, &t)?, inv_temp), transposed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSample {
    pub embedding: Vec<f64>,
    pub attributes: BTreeSet<u32>,
}

/// A composed query: image `i` plus the attributes of `j` it lacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionalQuery {
    pub image: usize,
    pub partner: usize,
    /// Q^v = A_i.
    pub image_attributes: BTreeSet<u32>,
    /// Q^t = A_j − A_i.
    pub text_attributes: BTreeSet<u32>,
    /// Q = Q^v ∪ Q^t.
    pub attributes: BTreeSet<u32>,
    pub embedding: Vec<f64>,
}

/// Samples up to `n_queries` distinct ordered pairs `(i, j)`, `i ≠ j`, sharing
/// at least `min_common` attributes. `text_embed` maps Q^t to its text-side
/// embedding (`None` for Q^t = ∅); the query embedding is the normalized sum
/// of image `i`'s embedding and that vector.
pub fn compositional_queries(
    samples: &[AttributeSample],
    min_common: usize,
    n_queries: usize,
    seed: u64,
    text_embed: impl Fn(&BTreeSet<u32>) -> Option<Vec<f64>>,
) -> Result<Vec<CompositionalQuery>> {
    if samples.len() < 2 {
        return Err(OtterError::EmptyDataset);
    }
    let mut eligible = Vec::new();
    for (i, a) in samples.iter().enumerate() {
        for (j, b) in samples.iter().enumerate() {
            if i != j && a.attributes.intersection(&b.attributes).count() >= min_common {
                eligible.push((i, j));
            }
        }
    }
    if eligible.is_empty() {
        return Err(OtterError::NoEligiblePairs(min_common));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<(usize, usize)> = eligible
        .choose_multiple(&mut rng, n_queries.min(eligible.len()))
        .copied()
        .collect();

    picked
        .into_iter()
        .map(|(i, j)| {
            let qv = samples[i].attributes.clone();
            let qt: BTreeSet<u32> = samples[j].attributes.difference(&qv).copied().collect();
            let q: BTreeSet<u32> = qv.union(&qt).copied().collect();
            let mut emb = samples[i].embedding.clone();
            if let Some(t) = text_embed(&qt) {
                if t.len() != emb.len() {
                    return Err(OtterError::DimensionMismatch(format!(
                        "text embedding {} vs image embedding {}",
                        t.len(),
                        emb.len()
                    )));
                }
                for (e, v) in emb.iter_mut().zip(&t) {
                    *e += v;
                }
            }
            let n = dot(&emb, &emb).sqrt();
            if n > 0.0 {
                emb.iter_mut().for_each(|e| *e /= n);
            }
            Ok(CompositionalQuery {
                image: i,
                partner: j,
                image_attributes: qv,
                text_attributes: qt,
                attributes: q,
                embedding: emb,
            })
        })
        .collect()
}

/// Index of the gallery row with highest cosine similarity to each query,
/// never returning the query's own source image when `exclude_source`.
pub fn retrieve_nearest(
    queries: &[CompositionalQuery],
    gallery: &EmbeddingBatch,
    exclude_source: bool,
) -> Result<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            if q.embedding.len() != gallery.dim() {
                return Err(OtterError::DimensionMismatch(format!(
                    "query dimension {} vs gallery {}",
                    q.embedding.len(),
                    gallery.dim()
                )));
            }
            let mut best: Option<(usize, f64)> = None;
            for (g, row) in gallery.matrix().row_iter().enumerate() {
                if exclude_source && g == q.image {
                    continue;
                }
                let s = dot(&q.embedding, row);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((g, s));
                }
            }
            best.map(|(g, _)| g).ok_or(OtterError::EmptyDataset)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionScores {
    pub or: f64,
    pub ior: f64,
    pub tor: f64,
    pub n_queries: usize,
    /// Queries with Q^t = ∅, left out of TOR.
    pub n_empty_text: usize,
    /// Queries with Q^v = ∅, left out of IOR.
    pub n_empty_image: usize,
}

/// Mean overlap of each retrieved attribute set with Q, Q^v and Q^t.
pub fn compositionality_scores(
    queries: &[CompositionalQuery],
    retrieved: &[BTreeSet<u32>],
) -> Result<CompositionScores> {
    if queries.len() != retrieved.len() {
        return Err(OtterError::ShapeMismatch(format!(
            "{} queries, {} retrieved sets",
            queries.len(),
            retrieved.len()
        )));
    }
    if queries.is_empty() {
        return Err(OtterError::EmptyDataset);
    }
    let overlap =
        |a: &BTreeSet<u32>, r: &BTreeSet<u32>| a.intersection(r).count() as f64 / a.len() as f64;
    let mut or = Vec::new();
    let mut ior = Vec::new();
    let mut tor = Vec::new();
    for (i, (q, r)) in queries.iter().zip(retrieved).enumerate() {
        if q.attributes.is_empty() {
            return Err(OtterError::EmptyQuery(i));
        }
        or.push(overlap(&q.attributes, r));
        if !q.image_attributes.is_empty() {
            ior.push(overlap(&q.image_attributes, r));
        }
        if !q.text_attributes.is_empty() {
            tor.push(overlap(&q.text_attributes, r));
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            fsum(v.iter().copied()) / v.len() as f64
        }
    };
    Ok(CompositionScores {
        or: mean(&or),
        ior: mean(&ior),
        tor: mean(&tor),
        n_queries: queries.len(),
        n_empty_text: queries.len() - tor.len(),
        n_empty_image: queries.len() - ior.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeReport {
    pub model: CompositionScores,
    /// Same queries, each answered by a uniformly random image other than
    /// the query's source.
    pub random_baseline: CompositionScores,
}

/// Runs the compositional retrieval benchmark on an attribute-annotated
/// dataset: queries combine image `i` with the text embedding of the
/// attributes of `j` it lacks; retrieval is cosine nearest neighbour over all
/// images except `i`.
pub fn compose_bench(
    model: &EncoderState,
    data: &SynthDataset,
    min_common: usize,
    n_queries: usize,
    seed: u64,
) -> Result<ComposeReport> {
    let attrs = data
        .attributes
        .as_ref()
        .ok_or_else(|| OtterError::ConfigInvalid("dataset has no attribute annotations".into()))?;
    let images = model.embed_images(&data.pairs.image_features)?;
    let samples: Vec<AttributeSample> = images
        .matrix()
        .row_iter()
        .zip(&attrs.sets)
        .map(|(e, a)| AttributeSample {
            embedding: e.to_vec(),
            attributes: a.clone(),
        })
        .collect();
    let text_embed = |qt: &BTreeSet<u32>| -> Option<Vec<f64>> {
        let feature = attrs.text_feature(qt)?;
        let m = Matrix::from_vec(1, feature.len(), feature).ok()?;
        model
            .embed_texts(&m)
            .ok()
            .map(|e| e.matrix().row(0).to_vec())
    };
    let queries = compositional_queries(&samples, min_common, n_queries, seed, text_embed)?;

    let hits = retrieve_nearest(&queries, &images, true)?;
    let retrieved: Vec<BTreeSet<u32>> = hits.iter().map(|&g| attrs.sets[g].clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = samples.len();
    let random: Vec<BTreeSet<u32>> = queries
        .iter()
        .map(|q| {
            let k = rng.random_range(0..n - 1);
            attrs.sets[if k >= q.image { k + 1 } else { k }].clone()
        })
        .collect();

    Ok(ComposeReport {
        model: compositionality_scores(&queries, &retrieved)?,
        random_baseline: compositionality_scores(&queries, &random)?,
    })
}
