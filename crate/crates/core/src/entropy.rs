//! Per-token visual entropy and attention information scores.
//!
//! Visual entropy is the Shannon entropy (bits) of a patch's gray-level
//! histogram, divided by `log2 G`. Attention information starts from the
//! text-to-vision cross-attention averaged over layers and heads, turns each
//! visual token's column into a distribution over text tokens with a softmax,
//! and reports `1 - H / log2 W`. Both scores lie in `[0, 1]`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, MAGIC_ATTENTION};
use crate::error::{Error, Result};
use crate::ingest::{patch_histogram, Frame, GrayHistogram, PatchGrid};

/// Tolerance on `sum(q) == 1` accepted by [`attention_entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Cross-attention scores indexed `(layer, head, text token, visual token)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub text_tokens: usize,
    pub visual_tokens: usize,
    /// Flat scores in `(l, h, w, i)` row-major order.
    pub scores: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, text_tokens: usize, visual_tokens: usize, scores: Vec<f64>) -> Result<Self> {
        let t = AttentionTensor {
            layers,
            heads,
            text_tokens,
            visual_tokens,
            scores,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.text_tokens == 0 || self.visual_tokens == 0 {
            return Err(Error::DimensionMismatch(format!(
                "attention dimensions must be positive, got L={} H={} W={} N={}",
                self.layers, self.heads, self.text_tokens, self.visual_tokens
            )));
        }
        let expected = self.layers * self.heads * self.text_tokens * self.visual_tokens;
        if self.scores.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "attention tensor needs {expected} scores, got {}",
                self.scores.len()
            )));
        }
        if let Some(pos) = self.scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::DimensionMismatch(format!(
                "attention score {} at flat index {pos} is negative or not finite",
                self.scores[pos]
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize, text: usize, visual: usize) -> f64 {
        let idx = ((layer * self.heads + head) * self.text_tokens + text) * self.visual_tokens + visual;
        self.scores[idx]
    }

    pub fn to_container(&self) -> Container {
        Container {
            magic: MAGIC_ATTENTION,
            dims: [
                self.layers as u32,
                self.heads as u32,
                self.text_tokens as u32,
                self.visual_tokens as u32,
            ],
            data: self.scores.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        Self::new(c.dim(0), c.dim(1), c.dim(2), c.dim(3), c.data)
    }

    /// Reads the binary container, or the JSON form when the file starts with `{`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
        if first == Some(&b'{') {
            let t: AttentionTensor =
                serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
            t.validate().map_err(|e| Error::format(path, e.to_string()))?;
            Ok(t)
        } else {
            Self::from_container(Container::decode(&bytes, MAGIC_ATTENTION, path)?)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }
}

/// Layer/head-averaged attention, `text_tokens x visual_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAttention {
    pub text_tokens: usize,
    pub visual_tokens: usize,
    pub values: Vec<f64>,
}

impl MeanAttention {
    #[inline]
    pub fn get(&self, text: usize, visual: usize) -> f64 {
        self.values[text * self.visual_tokens + visual]
    }

    pub fn column(&self, visual: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.text_tokens).map(move |w| self.get(w, visual))
    }
}

/// Normalized scores for every visual token of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyScores {
    pub visual: Vec<f64>,
    pub attention_info: Vec<f64>,
}

impl EntropyScores {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

/// Shannon entropy of a histogram in bits; empty bins contribute nothing.
pub fn visual_entropy(hist: &GrayHistogram) -> Result<f64> {
    if hist.total() == 0 {
        return Err(Error::EmptyHistogram);
    }
    let total = hist.total() as f64;
    let mut h = 0.0;
    for &c in hist.counts() {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.log2();
        }
    }
    // a single occupied bin gives -(1 * log2 1) = -0.0
    Ok(h.max(0.0))
}

pub fn normalize_visual_entropy(bits: f64, levels: usize) -> f64 {
    bits / (levels as f64).log2()
}

pub fn mean_attention(attn: &AttentionTensor) -> Result<MeanAttention> {
    attn.validate()?;
    let (w, n) = (attn.text_tokens, attn.visual_tokens);
    let mut values = vec![0.0; w * n];
    let slice = w * n;
    for lh in 0..attn.layers * attn.heads {
        let block = &attn.scores[lh * slice..(lh + 1) * slice];
        for (acc, &s) in values.iter_mut().zip(block) {
            *acc += s;
        }
    }
    let count = (attn.layers * attn.heads) as f64;
    for v in &mut values {
        *v /= count;
    }
    Ok(MeanAttention {
        text_tokens: w,
        visual_tokens: n,
        values,
    })
}

/// Softmax of visual token `visual`'s column over text tokens.
pub fn attention_distribution(mean: &MeanAttention, visual: usize) -> Result<Vec<f64>> {
    if visual >= mean.visual_tokens {
        return Err(Error::TokenOutOfRange {
            token: visual,
            num_tokens: mean.visual_tokens,
        });
    }
    Ok(softmax(mean.column(visual)))
}

pub(crate) fn softmax(xs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Entropy in bits of a probability vector.
pub fn attention_entropy(q: &[f64]) -> Result<f64> {
    let sum: f64 = q.iter().sum();
    if q.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::NotADistribution { sum });
    }
    let mut h = 0.0;
    for &p in q {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    Ok(h.max(0.0))
}

/// `1 - H / log2 W`; a single text token counts as fully concentrated.
pub fn attention_information(bits: f64, text_tokens: usize) -> f64 {
    if text_tokens <= 1 {
        return 1.0;
    }
    1.0 - bits / (text_tokens as f64).log2()
}

/// Attention information for every visual token of a tensor.
pub fn attention_scores(attn: &AttentionTensor) -> Result<Vec<f64>> {
    let mean = mean_attention(attn)?;
    (0..mean.visual_tokens)
        .into_par_iter()
        .map(|i| {
            let q = attention_distribution(&mean, i)?;
            Ok(attention_information(attention_entropy(&q)?, mean.text_tokens))
        })
        .collect()
}

/// Normalized visual entropy for every token of a frame.
pub fn visual_scores(frame: &Frame, grid: &PatchGrid, levels: usize) -> Result<Vec<f64>> {
    grid.check_frame(frame)?;
    (0..grid.num_tokens())
        .into_par_iter()
        .map(|i| {
            let hist = patch_histogram(frame, grid, i, levels)?;
            Ok(normalize_visual_entropy(visual_entropy(&hist)?, levels))
        })
        .collect()
}

pub fn score_frame(frame: &Frame, grid: &PatchGrid, attn: &AttentionTensor, levels: usize) -> Result<EntropyScores> {
    if grid.num_tokens() != attn.visual_tokens {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} tokens but attention tensor has {} visual tokens",
            grid.num_tokens(),
            attn.visual_tokens
        )));
    }
    Ok(EntropyScores {
        visual: visual_scores(frame, grid, levels)?,
        attention_info: attention_scores(attn)?,
    })
}
