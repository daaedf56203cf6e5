//! Text to latent, retrieval over posterior means, latent arithmetic and
//! friction anchors.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::corpus::{self, Corpus, EmbeddingTable, NormStats};
use crate::nn;
use crate::render::FrictionAnchorSet;
use crate::vae::{self, ArOutputNorm, EpochMetrics, TrainConfig, TrainSet, Vae, VaeDims, VaeError};
use crate::Scalar;

pub const DEFAULT_PERTURB_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("no trained model loaded")]
    ModelNotReady,
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("no embedding for caption {0:?}")]
    MissingEmbedding(String),
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Text projection output for one embedding, used directly as the latent.
pub fn text_to_latent<T: Scalar>(model: Option<&mut Vae<T>>, embedding: &[T]) -> Result<Vec<T>, AlignError> {
    let model = model.ok_or(AlignError::ModelNotReady)?;
    let d = model.dims.text_dim;
    if embedding.len() != d {
        return Err(AlignError::DimensionMismatch { expected: d, found: embedding.len() });
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite);
    }
    let x = Array2::from_shape_vec((1, d), embedding.to_vec()).expect("shape checked");
    Ok(model.text_to_latent(&x)?.row(0).to_vec())
}

/// Posterior means keyed by material id.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentIndex {
    pub ids: Vec<String>,
    pub means: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Top `k` materials by cosine similarity to `query`, ties by id.
pub fn retrieve_materials(index: &LatentIndex, query: &[f64], k: usize) -> Result<Vec<(String, f64)>, AlignError> {
    if index.ids.is_empty() {
        return Err(AlignError::EmptyIndex);
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite);
    }
    let mut scored = Vec::with_capacity(index.ids.len());
    for (id, m) in index.ids.iter().zip(&index.means) {
        if m.len() != query.len() {
            return Err(AlignError::DimensionMismatch { expected: m.len(), found: query.len() });
        }
        scored.push((id.clone(), cosine(query, m)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn average_latents<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>, AlignError> {
    if a.len() != b.len() {
        return Err(AlignError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let half = T::lit(0.5);
    Ok(a.iter().zip(b).map(|(x, y)| half * (*x + *y)).collect())
}

/// `z` plus seeded Gaussian noise with standard deviation `radius`.
pub fn perturb<T: Scalar>(z: &[T], radius: T, seed: u64) -> Vec<T> {
    if radius == T::zero() {
        return z.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    z.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + radius * T::lit(e)
        })
        .collect()
}

/// Source material of an augmented record (`M001~03` belongs to `M001`).
pub fn source_id(id: &str) -> &str {
    id.split('~').next().unwrap_or(id)
}

/// Posterior means of every record, in corpus order.
pub fn posterior_means<T: Scalar>(model: &mut Vae<T>, corpus: &Corpus, stats: &NormStats) -> Result<Array2<T>, AlignError> {
    let ar = stats.normalize_ar(&corpus.ar_tensors()).mapv(T::lit);
    let tap = stats.normalize_tap(&corpus.tap_tensors()).mapv(T::lit);
    Ok(model.encode(&ar, &tap)?.mu)
}

/// Mean of the posterior means of each source material, in first-seen order,
/// with that material's friction coefficient.
pub fn source_means<T: Scalar>(model: &mut Vae<T>, corpus: &Corpus, stats: &NormStats) -> Result<(LatentIndex, Vec<f64>), AlignError> {
    let mu = posterior_means(model, corpus, stats)?;
    let mut ids: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut friction = Vec::new();
    for (m, row) in corpus.materials.iter().zip(mu.rows()) {
        let sid = source_id(&m.id);
        let k = match ids.iter().position(|x| x == sid) {
            Some(k) => k,
            None => {
                ids.push(sid.to_string());
                sums.push(vec![0.0; row.len()]);
                counts.push(0);
                friction.push(m.friction_coefficient);
                ids.len() - 1
            }
        };
        for (s, v) in sums[k].iter_mut().zip(row) {
            *s += v.to_f64_lossy();
        }
        counts[k] += 1;
    }
    let means = sums.into_iter().zip(&counts).map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect()).collect();
    Ok((LatentIndex { ids, means }, friction))
}

/// One anchor per source material.
pub fn build_anchor_set<T: Scalar>(model: &mut Vae<T>, corpus: &Corpus, stats: &NormStats) -> Result<FrictionAnchorSet<T>, AlignError> {
    let (index, friction) = source_means(model, corpus, stats)?;
    Ok(FrictionAnchorSet {
        anchors: index
            .means
            .into_iter()
            .zip(friction)
            .map(|(m, mu)| (m.into_iter().map(T::lit).collect(), T::lit(mu.max(0.0))))
            .collect(),
    })
}

/// Normalized tensors, class labels and caption embeddings for training.
pub fn build_train_set<T: Scalar>(corpus: &Corpus, stats: &NormStats, table: &EmbeddingTable) -> Result<TrainSet<T>, AlignError> {
    let mut captions = Vec::with_capacity(corpus.len());
    for m in &corpus.materials {
        let mut embs = Vec::with_capacity(m.captions.len());
        for c in &m.captions {
            let e = table.get(c).ok_or_else(|| AlignError::MissingEmbedding(c.clone()))?;
            embs.push(e.iter().map(|&v| T::lit(v as f64)).collect());
        }
        captions.push(embs);
    }
    Ok(TrainSet {
        ar: stats.normalize_ar(&corpus.ar_tensors()).mapv(T::lit),
        tap: stats.normalize_tap(&corpus.tap_tensors()).mapv(T::lit),
        labels: corpus.materials.iter().map(|m| m.class_label as usize).collect(),
        captions,
    })
}

/// Fit normalization on `training`, build the model (seeded by `cfg.seed`)
/// and train it.
pub fn train_on_corpus<T: Scalar>(
    training: &Corpus,
    table: &EmbeddingTable,
    dims: VaeDims,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Vae<T>, NormStats, Vec<EpochMetrics>), AlignError> {
    let stats = match &training.norm_stats {
        Some(s) => s.clone(),
        None => corpus::normalize(training).map_err(|e| VaeError::InvalidConfig(e.to_string()))?.stats,
    };
    let data = build_train_set(training, &stats, table)?;
    let mut model = Vae::new(dims, cfg.seed)?;
    model.out_norm = ArOutputNorm::from_stats(&stats, &model.dims)?;
    let log = vae::train(&mut model, &data, cfg, on_epoch)?;
    Ok((model, stats, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub hits: usize,
    pub total: usize,
    /// (caption, own material, closest material)
    pub misses: Vec<(String, String, String)>,
}

impl RetrievalReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// For every caption of every material in `materials`, decode its text latent
/// and check that its own material is the closest (Smooth-L1 over the
/// normalized AR and tap tensors).
pub fn caption_retrieval<T: Scalar>(
    model: &mut Vae<T>,
    materials: &Corpus,
    stats: &NormStats,
    table: &EmbeddingTable,
) -> Result<RetrievalReport, AlignError> {
    let ar = stats.normalize_ar(&materials.ar_tensors()).mapv(T::lit);
    let tap = stats.normalize_tap(&materials.tap_tensors()).mapv(T::lit);
    let mut report = RetrievalReport { hits: 0, total: 0, misses: Vec::new() };
    for (i, m) in materials.materials.iter().enumerate() {
        for c in &m.captions {
            let e = table.get(c).ok_or_else(|| AlignError::MissingEmbedding(c.clone()))?;
            let e: Vec<T> = e.iter().map(|&v| T::lit(v as f64)).collect();
            let z = text_to_latent(Some(model), &e)?;
            let z = Array2::from_shape_vec((1, z.len()), z).expect("row");
            let (par, ptap) = model.decode_normalized(&z)?;
            let mut best = (usize::MAX, f64::INFINITY);
            for j in 0..materials.len() {
                let d = nn::smooth_l1(&par, &ar.slice(ndarray::s![j..j + 1, ..]).to_owned()).0.to_f64_lossy()
                    + nn::smooth_l1(&ptap, &tap.slice(ndarray::s![j..j + 1, ..]).to_owned()).0.to_f64_lossy();
                if d < best.1 {
                    best = (j, d);
                }
            }
            report.total += 1;
            if best.0 == i {
                report.hits += 1;
            } else {
                let other = materials.materials.get(best.0).map(|o| o.id.clone()).unwrap_or_default();
                report.misses.push((c.clone(), m.id.clone(), other));
            }
        }
    }
    Ok(report)
}
