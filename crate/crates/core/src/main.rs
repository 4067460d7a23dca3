use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infocache::entropy::score_frame;
use infocache::ingest::{load_frame, PatchGrid};
use infocache::pipeline::{run_pipeline, sweep, write_outputs, Rollout};
use infocache::selection::{build_token_sets, detect_static};
use infocache::synth::{Scene, SceneSpec, MOVING_SQUARE_SEED};
use infocache::{AttentionTensor, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "infocache", version, about = "Entropy-guided token selection and KV-cache reuse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rollout and write report.json, report.csv and overlays.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        params: ParamArgs,
        /// Skip overlay images.
        #[arg(long)]
        no_overlays: bool,
    },
    /// Generate a synthetic moving-object scene.
    Synth(SynthArgs),
    /// Score one frame against one attention tensor.
    Entropy {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        attention: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Token sets for a single step.
    Select {
        #[arg(long)]
        frame: PathBuf,
        /// Previous frame; omit for the first step of a rollout.
        #[arg(long)]
        prev: Option<PathBuf>,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Repeat a rollout over several total token budgets.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        params: ParamArgs,
        /// Total budgets k1 + k2.
        #[arg(long, value_delimiter = ',', default_value = "60,80,100,120,140")]
        budgets: Vec<usize>,
        /// k1:k2 split.
        #[arg(long, default_value = "2:3")]
        ratio: String,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Config file of key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `synth`.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Use the bundled moving-square scene, generated in memory.
    #[arg(long)]
    synthetic: bool,
    /// Frame directory or manifest.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Attention tensor directory or manifest.
    #[arg(long)]
    attention: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// ROWSxCOLS
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    g_levels: Option<usize>,
    /// same-frame or previous-frame
    #[arg(long)]
    attn_source: Option<String>,
    /// full, visual-only, attention-only or static-combination
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    flops_per_token: Option<f64>,
    #[arg(long)]
    fixed_flops: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MOVING_SQUARE_SEED)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    object_size: Option<usize>,
    /// DX,DY pixels per step
    #[arg(long, allow_hyphen_values = true)]
    velocity: Option<String>,
    #[arg(long)]
    noise: Option<u8>,
    #[arg(long)]
    text_tokens: Option<usize>,
    #[arg(long)]
    object_words: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

impl ParamArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let text = |v: &Option<String>| v.clone();
        let pairs: [(&str, Option<String>); 14] = [
            ("k1", self.k1.map(|v| v.to_string())),
            ("k2", self.k2.map(|v| v.to_string())),
            ("T", self.horizon.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("grid", text(&self.grid)),
            ("g_levels", self.g_levels.map(|v| v.to_string())),
            ("attn_source", text(&self.attn_source)),
            ("mode", text(&self.mode)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("flops_per_token", self.flops_per_token.map(|v| v.to_string())),
            ("fixed_flops", self.fixed_flops.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if let Some(d) = self.d_model {
            cfg.d_k = d;
            cfg.d_v = d;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(())
    }
}

fn prepare(input: &InputArgs, params: &ParamArgs) -> Result<(RunConfig, Rollout)> {
    let mut cfg = match &input.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &input.scene {
        cfg.use_scene_dir(dir);
    }
    for (slot, value) in [
        (&mut cfg.frames, &input.frames),
        (&mut cfg.attention, &input.attention),
        (&mut cfg.embeddings, &input.embeddings),
        (&mut cfg.weights, &input.weights),
    ] {
        if value.is_some() {
            *slot = value.clone();
        }
    }
    params.apply(&mut cfg)?;
    cfg.validate()?;
    let rollout = if input.synthetic {
        Rollout::from_scene(&Scene::generate(&SceneSpec::moving_square(), MOVING_SQUARE_SEED)?)
    } else {
        Rollout::load(&cfg)?
    };
    Ok((cfg, rollout))
}

fn single_step_config(params: &ParamArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    params.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_scored(frame: &Path, attention: &Path, cfg: &RunConfig) -> Result<(infocache::Frame, PatchGrid, infocache::EntropyScores)> {
    let mut f = load_frame(frame, 0)?;
    if cfg.gray_levels < 256 {
        f = f.quantize(cfg.gray_levels)?;
    }
    let grid = PatchGrid::new(f.width(), f.height(), cfg.grid_rows, cfg.grid_cols)?;
    let attn = AttentionTensor::load(attention)?;
    let scores = score_frame(&f, &grid, &attn, cfg.gray_levels)?;
    Ok((f, grid, scores))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = SceneSpec::moving_square();
    let pairs: [(&str, Option<String>); 12] = [
        ("steps", args.steps.map(|v| v.to_string())),
        ("width", args.width.map(|v| v.to_string())),
        ("height", args.height.map(|v| v.to_string())),
        ("grid", args.grid.clone()),
        ("objects", args.objects.map(|v| v.to_string())),
        ("object_size", args.object_size.map(|v| v.to_string())),
        ("velocity", args.velocity.clone()),
        ("noise", args.noise.map(|v| v.to_string())),
        ("text_tokens", args.text_tokens.map(|v| v.to_string())),
        ("object_words", args.object_words.map(|v| v.to_string())),
        ("layers", args.layers.map(|v| v.to_string())),
        ("heads", args.heads.map(|v| v.to_string())),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            spec.set(key, &v)?;
        }
    }
    let scene = Scene::generate(&spec, args.seed)?;
    scene.write(&args.out)?;
    println!("wrote {} frames to {}", scene.frames.len(), args.out.display());
    Ok(())
}

fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("ratio {s:?} is not A:B"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            input,
            params,
            no_overlays,
        } => {
            let (mut cfg, rollout) = prepare(&input, &params)?;
            cfg.overlays &= !no_overlays;
            let output = run_pipeline(&cfg, &rollout)?;
            write_outputs(&cfg, &rollout, &output)?;
            let r = &output.report;
            println!(
                "steps={} flops_ratio={:.4} speedup={:.3} reuse_rate={:.4} drift_max_abs={:e}",
                r.steps,
                r.flops_ratio,
                r.speedup(),
                r.reuse_rate,
                r.drift.max_abs
            );
            eprintln!(
                "engine wall time (non-normative, hardware dependent): {:.3} ms",
                output.engine_time.as_secs_f64() * 1e3
            );
            println!("outputs in {}", cfg.out.display());
        }
        Command::Synth(args) => synth(&args)?,
        Command::Entropy {
            frame,
            attention,
            params,
        } => {
            let cfg = single_step_config(&params)?;
            let (_, _, scores) = load_scored(&frame, &attention, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&scores).expect("scores serialize"));
        }
        Command::Select {
            frame,
            prev,
            attention,
            t,
            params,
        } => {
            let cfg = single_step_config(&params)?;
            let (current, grid, scores) = load_scored(&frame, &attention, &cfg)?;
            let previous = match prev {
                Some(p) => {
                    let f = load_frame(&p, 0)?;
                    Some(if cfg.gray_levels < 256 { f.quantize(cfg.gray_levels)? } else { f })
                }
                None => None,
            };
            let (important, k_vis, k_attn) = cfg.mode.select(&scores, t, &cfg.schedule);
            let static_set = detect_static(&current, previous.as_ref(), &grid, cfg.tau)?;
            let sets = build_token_sets(static_set, important, t).with_budget(k_vis, k_attn);
            sets.check(grid.num_tokens())?;
            println!("{}", serde_json::to_string(&sets).expect("sets serialize"));
        }
        Command::Sweep {
            input,
            params,
            budgets,
            ratio,
        } => {
            let (cfg, rollout) = prepare(&input, &params)?;
            let points = sweep(&cfg, &rollout, &budgets, parse_ratio(&ratio)?)?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
                path: cfg.out.clone(),
                source: e,
            })?;
            let mut csv = String::from("budget,k1,k2,flops_ratio,reuse_rate,mean_important\n");
            println!("{:>7} {:>4} {:>4} {:>11} {:>10}", "budget", "k1", "k2", "flops_ratio", "reuse_rate");
            for p in &points {
                println!(
                    "{:>7} {:>4} {:>4} {:>11.4} {:>10.4}",
                    p.budget, p.k1, p.k2, p.flops_ratio, p.reuse_rate
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    p.budget, p.k1, p.k2, p.flops_ratio, p.reuse_rate, p.mean_important
                ));
            }
            let path = cfg.out.join("sweep.csv");
            std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
            let path = cfg.out.join("sweep.json");
            let json = serde_json::to_string_pretty(&points).expect("sweep serializes") + "\n";
            std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
