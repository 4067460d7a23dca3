//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! k1 = 40
//! k2 = 60
//! T = 100
//! grid = 16x16
//! attn_source = previous-frame
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::{DEFAULT_GRAY_LEVELS, DEFAULT_GRID};
use crate::metrics::CostModel;
use crate::selection::{ScheduleParams, SelectionMode, DEFAULT_TAU};

/// Which frame's cross-attention feeds step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionSource {
    SameFrame,
    /// Step `t` uses the tensor of frame `t - 1`; step 0 uses its own.
    #[default]
    PreviousFrame,
}

impl AttentionSource {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionSource::SameFrame => "same-frame",
            AttentionSource::PreviousFrame => "previous-frame",
        }
    }

    /// Index of the attention tensor used at step `t`.
    pub fn index(&self, t: usize) -> usize {
        match self {
            AttentionSource::SameFrame => t,
            AttentionSource::PreviousFrame => t.saturating_sub(1),
        }
    }
}

impl FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-frame" | "same" => Ok(AttentionSource::SameFrame),
            "previous-frame" | "previous" => Ok(AttentionSource::PreviousFrame),
            _ => Err(Error::InvalidConfig(format!("unknown attention source {s:?}"))),
        }
    }
}

/// Parses `16x16`, `16X16` or a bare `16`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("grid {s:?} is not ROWSxCOLS"));
    let mut parts = s.split(['x', 'X']);
    let rows: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let cols = match parts.next() {
        Some(c) => c.trim().parse().map_err(|_| bad())?,
        None => rows,
    };
    if parts.next().is_some() || rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub gray_levels: usize,
    pub schedule: ScheduleParams,
    pub tau: f64,
    pub cost: CostModel,
    pub attn_source: AttentionSource,
    pub mode: SelectionMode,
    pub seed: u64,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layers: usize,
    pub frames: Option<PathBuf>,
    pub attention: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
    pub overlays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_rows: DEFAULT_GRID,
            grid_cols: DEFAULT_GRID,
            gray_levels: DEFAULT_GRAY_LEVELS,
            schedule: ScheduleParams::default(),
            tau: DEFAULT_TAU,
            cost: CostModel::default(),
            attn_source: AttentionSource::default(),
            mode: SelectionMode::default(),
            seed: 0,
            d_model: 16,
            d_k: 16,
            d_v: 16,
            heads: 1,
            layers: 1,
            frames: None,
            attention: None,
            embeddings: None,
            weights: None,
            out: PathBuf::from("out"),
            overlays: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn num_tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "grid" => (self.grid_rows, self.grid_cols) = parse_grid(value)?,
            "g_levels" | "g-levels" | "G" => self.gray_levels = parse(key, value)?,
            "k1" => self.schedule.k1 = parse(key, value)?,
            "k2" => self.schedule.k2 = parse(key, value)?,
            "T" | "horizon" => self.schedule.horizon = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "flops_per_token" => self.cost.flops_per_token = parse(key, value)?,
            "fixed_flops" => self.cost.fixed_flops = parse(key, value)?,
            "attn_source" | "attn-source" => self.attn_source = value.parse()?,
            "mode" => self.mode = SelectionMode::parse(value)?,
            "seed" => self.seed = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_k" => self.d_k = parse(key, value)?,
            "d_v" => self.d_v = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "frames" => self.frames = Some(PathBuf::from(value)),
            "attention" => self.attention = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "weights" => self.weights = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "overlays" => self.overlays = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file; relative input paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.frames, &mut cfg.attention, &mut cfg.embeddings, &mut cfg.weights]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Points every input at a directory written by the scene generator.
    pub fn use_scene_dir(&mut self, dir: &Path) {
        self.frames = Some(dir.join("frames.txt"));
        self.attention = Some(dir.join("attention"));
        self.embeddings = Some(dir.join("embeddings.bin"));
        self.weights = Some(dir.join("weights.bin"));
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::InvalidConfig("grid must be nonempty".into()));
        }
        if !(2..=DEFAULT_GRAY_LEVELS).contains(&self.gray_levels) {
            return Err(Error::InvalidConfig(format!(
                "g_levels must be in 2..=256, got {}",
                self.gray_levels
            )));
        }
        self.schedule.validate(Some(self.num_tokens()))?;
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau must be in [-1, 1], got {}", self.tau)));
        }
        CostModel::new(self.cost.flops_per_token, self.cost.fixed_flops)?;
        if self.d_model == 0 || self.d_k == 0 || self.d_v == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !self.d_k.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide d_k ({}) and d_v ({})",
                self.heads, self.d_k, self.d_v
            )));
        }
        Ok(())
    }

    /// Effective parameters as `key = value` pairs (input paths excluded).
    pub fn provenance(&self) -> BTreeMap<String, String> {
        let pairs: [(&str, String); 16] = [
            ("grid", format!("{}x{}", self.grid_rows, self.grid_cols)),
            ("g_levels", self.gray_levels.to_string()),
            ("k1", self.schedule.k1.to_string()),
            ("k2", self.schedule.k2.to_string()),
            ("T", self.schedule.horizon.to_string()),
            ("tau", self.tau.to_string()),
            ("flops_per_token", self.cost.flops_per_token.to_string()),
            ("fixed_flops", self.cost.fixed_flops.to_string()),
            ("attn_source", self.attn_source.name().to_string()),
            ("mode", self.mode.name().to_string()),
            ("seed", self.seed.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_k", self.d_k.to_string()),
            ("d_v", self.d_v.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Provenance rendered back into the config file format.
    pub fn to_text(&self) -> String {
        self.provenance()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
