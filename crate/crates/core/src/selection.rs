//! Timestep-scheduled token selection and the reuse-set algebra.
//!
//! At rollout step `t` the budget moves linearly from visual-entropy picks to
//! attention-information picks:
//!
//! ```text
//! alpha  = min(t, T) / T
//! k_vis  = floor(k2 - (k2 - k1) * alpha)
//! k_attn = floor(k1 + (k2 - k1) * alpha)
//! ```
//!
//! Important tokens are the union of both top-k sets. Static tokens are the
//! patches whose cosine similarity to the previous frame reaches `tau`, and
//! the reusable tokens are the static ones that are not important.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::EntropyScores;
use crate::error::{Error, Result};
use crate::ingest::{Frame, PatchGrid};

pub type IndexSet = BTreeSet<usize>;

pub const DEFAULT_K1: usize = 40;
pub const DEFAULT_K2: usize = 60;
pub const DEFAULT_HORIZON: usize = 100;
/// Default cosine threshold for a patch to count as static.
pub const DEFAULT_TAU: f64 = 0.996;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub k1: usize,
    pub k2: usize,
    /// Rollout length `T` over which the allocation shifts.
    pub horizon: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl ScheduleParams {
    pub fn new(k1: usize, k2: usize, horizon: usize) -> Result<Self> {
        let p = ScheduleParams { k1, k2, horizon };
        p.validate(None)?;
        Ok(p)
    }

    /// Checks `k1 <= k2 (<= num_tokens)` and `T >= 1`.
    pub fn validate(&self, num_tokens: Option<usize>) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("T must be at least 1".into()));
        }
        if self.k1 > self.k2 {
            return Err(Error::InvalidConfig(format!("k1 ({}) exceeds k2 ({})", self.k1, self.k2)));
        }
        if let Some(n) = num_tokens {
            if self.k2 > n {
                return Err(Error::InvalidConfig(format!("k2 ({}) exceeds token count ({n})", self.k2)));
            }
        }
        Ok(())
    }

    pub fn total_budget(&self) -> usize {
        self.k1 + self.k2
    }
}

/// `(k_vis, k_attn)` at `alpha = num / den`, floors taken exactly.
fn allocate(p: &ScheduleParams, num: usize, den: usize) -> (usize, usize) {
    let span = p.k2 - p.k1;
    let k_vis = (p.k2 * den - span * num) / den;
    let k_attn = (p.k1 * den + span * num) / den;
    (k_vis, k_attn)
}

/// Budget split at rollout step `t`; `alpha` saturates at 1 past the horizon.
pub fn schedule(t: usize, p: &ScheduleParams) -> (usize, usize) {
    allocate(p, t.min(p.horizon), p.horizon)
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> IndexSet {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(k).collect()
}

pub fn select_important(scores: &EntropyScores, t: usize, p: &ScheduleParams) -> IndexSet {
    let (k_vis, k_attn) = schedule(t, p);
    union_top_k(scores, k_vis, k_attn)
}

fn union_top_k(scores: &EntropyScores, k_vis: usize, k_attn: usize) -> IndexSet {
    let mut set = top_k(&scores.visual, k_vis);
    set.extend(top_k(&scores.attention_info, k_attn));
    set
}

/// Which scores drive important-token selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Timestep-scheduled union of both rankings.
    #[default]
    Full,
    /// Top `k1 + k2` by visual entropy.
    VisualOnly,
    /// Top `k1 + k2` by attention information.
    AttentionOnly,
    /// Union of both rankings with `alpha` pinned at 1/2.
    StaticCombination,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 4] = [
        SelectionMode::VisualOnly,
        SelectionMode::AttentionOnly,
        SelectionMode::StaticCombination,
        SelectionMode::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::Full => "full",
            SelectionMode::VisualOnly => "visual-only",
            SelectionMode::AttentionOnly => "attention-only",
            SelectionMode::StaticCombination => "static-combination",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selection mode {s:?}")))
    }

    pub fn budget(&self, t: usize, p: &ScheduleParams) -> (usize, usize) {
        match self {
            SelectionMode::Full => schedule(t, p),
            SelectionMode::VisualOnly => (p.total_budget(), 0),
            SelectionMode::AttentionOnly => (0, p.total_budget()),
            SelectionMode::StaticCombination => allocate(p, 1, 2),
        }
    }

    /// Important set plus the `(k_vis, k_attn)` budget it was drawn with.
    pub fn select(&self, scores: &EntropyScores, t: usize, p: &ScheduleParams) -> (IndexSet, usize, usize) {
        let (k_vis, k_attn) = self.budget(t, p);
        (union_top_k(scores, k_vis, k_attn), k_vis, k_attn)
    }
}

/// Cosine similarity of one token's pixel vectors in two frames.
///
/// Two all-zero patches are identical (1.0); one all-zero patch is unrelated (0.0).
pub fn patch_cosine(current: &Frame, previous: &Frame, grid: &PatchGrid, token: usize) -> Result<f64> {
    grid.check_frame(current)?;
    grid.check_frame(previous)?;
    let (a, b) = (current.pixels(), previous.pixels());
    let (mut dot, mut na, mut nb) = (0u64, 0u64, 0u64);
    for idx in grid.pixel_indices(token)? {
        let (u, v) = (a[idx] as u64, b[idx] as u64);
        dot += u * v;
        na += u * u;
        nb += v * v;
    }
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => (dot as f64 / ((na as u128 * nb as u128) as f64).sqrt()).clamp(-1.0, 1.0),
    })
}

/// Tokens whose patch similarity to the previous frame is at least `tau`.
/// Without a previous frame nothing is static.
pub fn detect_static(current: &Frame, previous: Option<&Frame>, grid: &PatchGrid, tau: f64) -> Result<IndexSet> {
    let Some(previous) = previous else {
        grid.check_frame(current)?;
        return Ok(IndexSet::new());
    };
    if current.width() != previous.width() || current.height() != previous.height() {
        return Err(Error::DimensionMismatch(format!(
            "consecutive frames are {}x{} and {}x{}",
            previous.width(),
            previous.height(),
            current.width(),
            current.height()
        )));
    }
    let similar = (0..grid.num_tokens())
        .into_par_iter()
        .map(|i| Ok((i, patch_cosine(current, previous, grid, i)? >= tau)))
        .collect::<Result<Vec<_>>>()?;
    Ok(similar.into_iter().filter(|&(_, hit)| hit).map(|(i, _)| i).collect())
}

/// Static, important and reusable tokens for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSets {
    pub t: usize,
    pub k_vis: usize,
    pub k_attn: usize,
    #[serde(rename = "static")]
    pub static_set: IndexSet,
    pub important: IndexSet,
    pub reuse: IndexSet,
}

impl TokenSets {
    pub fn with_budget(mut self, k_vis: usize, k_attn: usize) -> Self {
        self.k_vis = k_vis;
        self.k_attn = k_attn;
        self
    }

    /// Confirms `reuse = static \ important` and every index is below `num_tokens`.
    pub fn check(&self, num_tokens: usize) -> Result<()> {
        let expected: IndexSet = self.static_set.difference(&self.important).copied().collect();
        if expected != self.reuse {
            return Err(Error::Invariant(format!("step {}: reuse set is not static \\ important", self.t)));
        }
        let out_of_range = [&self.static_set, &self.important, &self.reuse]
            .into_iter()
            .flat_map(|s| s.last())
            .any(|&i| i >= num_tokens);
        if out_of_range {
            return Err(Error::Invariant(format!("step {}: token index beyond {num_tokens}", self.t)));
        }
        Ok(())
    }
}

pub fn build_token_sets(static_set: IndexSet, important: IndexSet, t: usize) -> TokenSets {
    let reuse = static_set.difference(&important).copied().collect();
    TokenSets {
        t,
        k_vis: 0,
        k_attn: 0,
        static_set,
        important,
        reuse,
    }
}
