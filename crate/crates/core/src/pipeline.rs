//! Per-step driver: score, select, detect static tokens, update the KV
//! cache, and account for the work saved.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::RunConfig;
use crate::entropy::{score_frame, AttentionTensor, EntropyScores};
use crate::error::{Error, Result};
use crate::ingest::{load_sequence, resolve_sequence, Frame, PatchGrid};
use crate::kv::{output_drift, EmbeddingSequence, KvEngine, PatchEmbedder, ProjectionWeights, TokenEmbedding};
use crate::metrics::{build_report, RunReport, StepRecord};
use crate::overlay::render_overlay;
use crate::selection::{build_token_sets, detect_static, ScheduleParams, SelectionMode, TokenSets};
use crate::synth::Scene;

/// Everything a rollout needs besides the configuration.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub frames: Vec<Frame>,
    pub attention: Vec<AttentionTensor>,
    /// Per-step token embeddings; derived from the frames when absent.
    pub embeddings: Option<Vec<TokenEmbedding>>,
    /// Attention layers; seeded random weights when absent.
    pub engine: Option<KvEngine>,
}

impl Rollout {
    pub fn from_scene(scene: &Scene) -> Self {
        Rollout {
            frames: scene.frames.clone(),
            attention: scene.attention.clone(),
            embeddings: Some(scene.embeddings.steps.clone()),
            engine: Some(scene.engine.clone()),
        }
    }

    /// Loads frames, attention tensors and optional embeddings/weights named in `cfg`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let frames_path = cfg
            .frames
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no frames given".into()))?;
        let attn_path = cfg
            .attention
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no attention tensors given".into()))?;
        let frames = load_sequence(frames_path)?;
        let attention = resolve_sequence(attn_path, &["bin", "attn", "json"])?
            .iter()
            .map(|p| AttentionTensor::load(p))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = match &cfg.embeddings {
            Some(p) => Some(EmbeddingSequence::load(p)?.steps),
            None => None,
        };
        let engine = match &cfg.weights {
            Some(p) => Some(KvEngine::load_weights(p, cfg.heads)?),
            None => None,
        };
        Ok(Rollout {
            frames,
            attention,
            embeddings,
            engine,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RunReport,
    pub sets: Vec<TokenSets>,
    pub scores: Vec<EntropyScores>,
    /// Wall-clock time of the cached forward passes. Hardware dependent; not part of the report.
    pub engine_time: Duration,
}

fn build_engine(cfg: &RunConfig) -> Result<KvEngine> {
    let layers = (0..cfg.layers)
        .map(|l| {
            ProjectionWeights::random(
                cfg.d_model,
                cfg.d_k,
                cfg.d_v,
                cfg.heads,
                cfg.seed.wrapping_add(1 + l as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    KvEngine::new(layers)
}

pub fn run_pipeline(cfg: &RunConfig, rollout: &Rollout) -> Result<PipelineOutput> {
    cfg.validate()?;
    let first = rollout
        .frames
        .first()
        .ok_or_else(|| Error::InvalidFrame("rollout has no frames".into()))?;
    let grid = PatchGrid::new(first.width(), first.height(), cfg.grid_rows, cfg.grid_cols)?;
    let n = grid.num_tokens();
    let steps = rollout.frames.len();
    let needed = cfg.attn_source.index(steps - 1) + 1;
    if rollout.attention.len() < needed {
        return Err(Error::InvalidConfig(format!(
            "{} frames with {} attention sourcing need {needed} attention tensors, found {}",
            steps,
            cfg.attn_source.name(),
            rollout.attention.len()
        )));
    }
    if let Some(e) = &rollout.embeddings {
        if e.len() < steps {
            return Err(Error::InvalidConfig(format!(
                "{steps} frames but only {} embedding steps",
                e.len()
            )));
        }
    }

    let mut cached = match &rollout.engine {
        Some(e) => e.clone(),
        None => build_engine(cfg)?,
    };
    let mut reference = cached.clone();
    let embedder = rollout
        .embeddings
        .is_none()
        .then(|| PatchEmbedder::new(&grid, cached.layers()[0].d_model(), cfg.seed));

    let mut records = Vec::with_capacity(steps);
    let mut all_sets = Vec::with_capacity(steps);
    let mut all_scores = Vec::with_capacity(steps);
    let mut engine_time = Duration::ZERO;
    let mut previous: Option<Frame> = None;
    for (t, raw) in rollout.frames.iter().enumerate() {
        let mut step = || -> Result<(StepRecord, TokenSets, EntropyScores, Frame)> {
            let frame = if cfg.gray_levels < 256 {
                raw.quantize(cfg.gray_levels)?
            } else {
                raw.clone()
            };
            let attn = &rollout.attention[cfg.attn_source.index(t)];
            let scores = score_frame(&frame, &grid, attn, cfg.gray_levels)?;
            let (important, k_vis, k_attn) = cfg.mode.select(&scores, t, &cfg.schedule);
            let static_set = detect_static(&frame, previous.as_ref(), &grid, cfg.tau)?;
            let sets = build_token_sets(static_set, important, t).with_budget(k_vis, k_attn);
            sets.check(n)?;

            let x = match (&rollout.embeddings, &embedder) {
                (Some(e), _) => e[t].clone(),
                (None, Some(embedder)) => embedder.embed(raw, &grid)?,
                (None, None) => unreachable!("embedder exists whenever embeddings are absent"),
            };
            if x.rows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "embeddings have {} rows for {n} tokens",
                    x.rows()
                )));
            }
            let started = Instant::now();
            let out_cached = cached.step(&x, &sets.reuse)?;
            engine_time += started.elapsed();
            let out_full = reference.step(&x, &Default::default())?;
            if cached.caches()[0].reused_count() != sets.reuse.len() {
                return Err(Error::Invariant(format!(
                    "cache reused {} rows, reuse set has {}",
                    cached.caches()[0].reused_count(),
                    sets.reuse.len()
                )));
            }
            let drift = output_drift(&out_full, &out_cached)?;
            let record = StepRecord {
                t,
                num_tokens: n,
                static_count: sets.static_set.len(),
                important_count: sets.important.len(),
                reuse_count: sets.reuse.len(),
                k_vis,
                k_attn,
                drift: Some(drift),
            };
            Ok((record, sets, scores, frame))
        };
        let (record, sets, scores, frame) = step().map_err(Error::at_step(t))?;
        records.push(record);
        all_sets.push(sets);
        all_scores.push(scores);
        previous = Some(frame);
    }

    let mut report = build_report(&records, &cfg.cost)?;
    report.config = cfg.provenance();
    Ok(PipelineOutput {
        report,
        sets: all_sets,
        scores: all_scores,
        engine_time,
    })
}

/// Plain-text trace of the selected sets and report totals, one field per line.
pub fn trace_text(report: &RunReport, sets: &[TokenSets]) -> String {
    let join = |s: &crate::selection::IndexSet| s.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut out = String::from("# token selection trace v1\n");
    for s in sets {
        let _ = writeln!(out, "t={} k_vis={} k_attn={}", s.t, s.k_vis, s.k_attn);
        let _ = writeln!(out, "static={}", join(&s.static_set));
        let _ = writeln!(out, "important={}", join(&s.important));
        let _ = writeln!(out, "reuse={}", join(&s.reuse));
    }
    let _ = writeln!(out, "steps={}", report.steps);
    let _ = writeln!(out, "total_flops={}", report.total_flops);
    let _ = writeln!(out, "baseline_flops={}", report.baseline_flops);
    let _ = writeln!(out, "flops_ratio={}", report.flops_ratio);
    let _ = writeln!(out, "reuse_rate={}", report.reuse_rate);
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.csv`, `token_sets.jsonl`, `trace.txt` and,
/// when enabled, `overlays/step_NNNN.png`.
pub fn write_outputs(cfg: &RunConfig, rollout: &Rollout, output: &PipelineOutput) -> Result<Vec<PathBuf>> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<()> {
        let p = out.join(name);
        write_file(&p, contents)?;
        written.push(p);
        Ok(())
    };
    emit("report.json", output.report.to_json())?;
    emit("report.csv", output.report.to_csv())?;
    let jsonl: String = output
        .sets
        .iter()
        .map(|s| serde_json::to_string(s).expect("token sets serialize") + "\n")
        .collect();
    emit("token_sets.jsonl", jsonl)?;
    emit("trace.txt", trace_text(&output.report, &output.sets))?;

    if cfg.overlays {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (frame, sets) in rollout.frames.iter().zip(&output.sets) {
            let grid = PatchGrid::new(frame.width(), frame.height(), cfg.grid_rows, cfg.grid_cols)?;
            let img = render_overlay(frame, &grid, sets)?;
            written.extend(img.save(&dir.join(format!("step_{:04}", sets.t)))?);
        }
    }
    Ok(written)
}

/// One point of a token-budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub k1: usize,
    pub k2: usize,
    pub flops_ratio: f64,
    pub reuse_rate: f64,
    pub mean_important: f64,
}

/// Splits `budget` into `(k1, k2)` with `k1 : k2 = ratio.0 : ratio.1`, rounding `k1` down.
pub fn split_budget(budget: usize, ratio: (usize, usize)) -> Result<(usize, usize)> {
    let parts = ratio.0 + ratio.1;
    if parts == 0 || ratio.0 > ratio.1 {
        return Err(Error::InvalidConfig(format!(
            "ratio {}:{} must have k1 <= k2 and a positive sum",
            ratio.0, ratio.1
        )));
    }
    let k1 = budget * ratio.0 / parts;
    Ok((k1, budget - k1))
}

/// Runs the rollout once per total budget, everything else fixed.
pub fn sweep(cfg: &RunConfig, rollout: &Rollout, budgets: &[usize], ratio: (usize, usize)) -> Result<Vec<SweepPoint>> {
    budgets
        .iter()
        .map(|&budget| {
            let (k1, k2) = split_budget(budget, ratio)?;
            let mut c = cfg.clone();
            c.schedule = ScheduleParams {
                k1,
                k2,
                horizon: cfg.schedule.horizon,
            };
            let out = run_pipeline(&c, rollout)?;
            let mean_important =
                out.sets.iter().map(|s| s.important.len()).sum::<usize>() as f64 / out.sets.len() as f64;
            Ok(SweepPoint {
                budget,
                k1,
                k2,
                flops_ratio: out.report.flops_ratio,
                reuse_rate: out.report.reuse_rate,
                mean_important,
            })
        })
        .collect()
}

/// Runs every selection mode on the same rollout.
pub fn run_ablations(cfg: &RunConfig, rollout: &Rollout) -> Result<Vec<(SelectionMode, PipelineOutput)>> {
    SelectionMode::ALL
        .into_iter()
        .map(|mode| {
            let mut c = cfg.clone();
            c.mode = mode;
            Ok((mode, run_pipeline(&c, rollout)?))
        })
        .collect()
}
