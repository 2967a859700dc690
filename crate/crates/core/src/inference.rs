//! Image-modal and text-modal class distributions.
//!
//! Both modalities score an embedding against the class prompt embeddings
//! of the inference space, scale the cosine similarities by a temperature
//! and apply a softmax. The text modality averages the per-caption
//! distributions of the retrieved captions with equal weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{ClassSet, EmbeddingMatrix};

pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub space: String,
    /// Logit scale applied to cosine similarities before the softmax.
    pub temperature: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            space: "inference".into(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A class distribution with its entropy (nats) and modal confidence
/// `1 - H(p) / ln C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub confidence: f64,
}

impl Prediction {
    /// `probs` must already be a distribution over at least two classes.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let entropy = entropy(&probs);
        let confidence = confidence(entropy, probs.len());
        Self {
            probs,
            entropy,
            confidence,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Least index attaining the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `1 - H / ln C`, clamped against rounding to `[0, 1]`.
pub fn confidence(entropy: f64, num_classes: usize) -> f64 {
    (1.0 - entropy / (num_classes as f64).ln()).clamp(0.0, 1.0)
}

/// Cosine similarity of `v` with each class embedding.
pub fn class_similarities(v: &[f32], classes: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if v.len() != classes.dim() {
        return Err(Error::DimMismatch {
            expected: classes.dim(),
            found: v.len(),
        });
    }
    Ok(classes
        .rows()
        .map(|c| c.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect())
}

fn class_distribution(v: &[f32], classes: &EmbeddingMatrix, temperature: f64) -> Result<Vec<f64>> {
    let logits: Vec<f64> = class_similarities(v, classes)?
        .into_iter()
        .map(|s| temperature * s)
        .collect();
    Ok(softmax(&logits))
}

pub fn image_modal_probability(
    query_image: &[f32],
    classes: &ClassSet,
    config: &InferenceConfig,
) -> Result<Prediction> {
    let emb = classes.embeddings(&config.space)?;
    Ok(Prediction::from_probs(class_distribution(
        query_image,
        emb,
        config.temperature,
    )?))
}

/// One distribution per caption embedding.
pub fn caption_distributions<R: AsRef<[f32]>>(
    caption_embeddings: &[R],
    classes: &ClassSet,
    config: &InferenceConfig,
) -> Result<Vec<Vec<f64>>> {
    let emb = classes.embeddings(&config.space)?;
    caption_embeddings
        .iter()
        .map(|c| class_distribution(c.as_ref(), emb, config.temperature))
        .collect()
}

pub fn average_distributions(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists.first().ok_or(Error::EmptyCaptions)?;
    let mut acc = vec![0.0; first.len()];
    for d in dists {
        if d.len() != acc.len() {
            return Err(Error::ClassCountMismatch(acc.len(), d.len()));
        }
        for (a, p) in acc.iter_mut().zip(d) {
            *a += p;
        }
    }
    let k = dists.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

pub fn text_modal_probability<R: AsRef<[f32]>>(
    caption_embeddings: &[R],
    classes: &ClassSet,
    config: &InferenceConfig,
) -> Result<Prediction> {
    if caption_embeddings.is_empty() {
        return Err(Error::EmptyCaptions);
    }
    let dists = caption_distributions(caption_embeddings, classes, config)?;
    Ok(Prediction::from_probs(average_distributions(&dists)?))
}
