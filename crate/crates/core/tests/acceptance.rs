//! Acceptance checks, one PASS/FAIL line each. Exits nonzero if any fail.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::collection::btree_set;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infocache::entropy::{attention_scores, visual_entropy, visual_scores};
use infocache::pipeline::{run_ablations, run_pipeline, sweep, trace_text, Rollout};
use infocache::selection::{build_token_sets, schedule, ScheduleParams};
use infocache::synth::{Scene, SceneSpec, MOVING_SQUARE_SEED};
use infocache::{AttentionTensor, Frame, GrayHistogram, KvEngine, PatchGrid, RunConfig};

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn moving_square() -> Rollout {
    let scene = Scene::generate(&SceneSpec::moving_square(), MOVING_SQUARE_SEED).expect("bundled scene generates");
    Rollout::from_scene(&scene)
}

// 1 ────────────────────────────────────────────────────────────────────────

/// `total parts bits` lines, keyed by the descending nonzero counts.
fn load_partition_table() -> std::collections::HashMap<Vec<u64>, f64> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/entropy_partitions.txt");
    let text = std::fs::read_to_string(&path).expect("partition table present");
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let parts = f[1].split(',').map(|p| p.parse().unwrap()).collect();
            (parts, f[2].parse().unwrap())
        })
        .collect()
}

/// Calls `f` on every count vector of length `levels` summing to at most `max_total`.
fn for_each_histogram(levels: usize, max_total: u64, f: &mut impl FnMut(&[u64])) {
    fn rec(counts: &mut Vec<u64>, levels: usize, left: u64, f: &mut impl FnMut(&[u64])) {
        if counts.len() == levels {
            if counts.iter().any(|&c| c > 0) {
                f(counts);
            }
            return;
        }
        for c in 0..=left {
            counts.push(c);
            rec(counts, levels, left - c, f);
            counts.pop();
        }
    }
    rec(&mut Vec::with_capacity(levels), levels, max_total, f);
}

fn entropy_oracle() -> Outcome {
    let started = Instant::now();
    let table = load_partition_table();
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut failure = None;
    for levels in 1..=8 {
        for_each_histogram(levels, 16, &mut |counts| {
            let mut key: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
            key.sort_unstable_by(|a, b| b.cmp(a));
            let expected = table[&key];
            let got = visual_entropy(&GrayHistogram::from_counts(counts.to_vec())).unwrap();
            let err = if expected == 0.0 { got.abs() } else { ((got - expected) / expected).abs() };
            worst = worst.max(err);
            if err > 1e-9 && failure.is_none() {
                failure = Some(format!("{counts:?}: got {got}, expected {expected}"));
            }
            checked += 1;
        });
    }
    let elapsed = started.elapsed();
    if let Some(f) = failure {
        return Err(f);
    }
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{checked} histograms, max relative error {worst:.2e}, {:.2} s",
        elapsed.as_secs_f64()
    ))
}

// 2 ────────────────────────────────────────────────────────────────────────

fn random_frame(rng: &mut ChaCha8Rng, levels: usize) -> (Frame, PatchGrid) {
    let (rows, cols) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (pw, ph) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let (w, h) = (cols * pw, rows * ph);
    let top = levels as u32;
    let pixels = match rng.gen_range(0..4) {
        0 => vec![rng.gen_range(0..top) as u8; w * h],
        1 => {
            let (a, b) = (rng.gen_range(0..top) as u8, rng.gen_range(0..top) as u8);
            (0..w * h).map(|_| if rng.gen() { a } else { b }).collect()
        }
        2 => (0..w * h).map(|i| (i % levels) as u8).collect(),
        _ => (0..w * h).map(|_| rng.gen_range(0..top) as u8).collect(),
    };
    let frame = Frame::new(w, h, pixels, 0).unwrap();
    (frame, PatchGrid::new(w, h, rows, cols).unwrap())
}

fn random_tensor(rng: &mut ChaCha8Rng) -> AttentionTensor {
    let (l, h, w, n) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=8),
        rng.gen_range(1..=12),
    );
    let scale = [1e-6, 1.0, 50.0, 1e4][rng.gen_range(0..4)];
    let len = l * h * w * n;
    let scores = match rng.gen_range(0..3) {
        0 => vec![rng.gen_range(0.0..1.0) * scale; len],
        1 => (0..len).map(|i| if i % (w + 1) == 0 { scale } else { 0.0 }).collect(),
        _ => (0..len).map(|_| rng.gen_range(0.0..1.0) * scale).collect(),
    };
    AttentionTensor::new(l, h, w, n, scores).unwrap()
}

fn entropy_bounds() -> Outcome {
    const CASES: usize = 10_000;
    const SLACK: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut violations = Vec::new();
    let (mut vis_n, mut attn_n) = (0usize, 0usize);
    for case in 0..CASES {
        let levels = [2, 3, 8, 16, 100, 256][rng.gen_range(0..6)];
        let (frame, grid) = random_frame(&mut rng, levels);
        let tensor = random_tensor(&mut rng);
        match visual_scores(&frame, &grid, levels) {
            Ok(v) => {
                vis_n += v.len();
                violations.extend(v.into_iter().filter(|s| !(-SLACK..=1.0 + SLACK).contains(s)).map(|s| format!("case {case}: visual {s}")));
            }
            Err(e) => violations.push(format!("case {case}: {e}")),
        }
        match attention_scores(&tensor) {
            Ok(a) => {
                attn_n += a.len();
                violations.extend(a.into_iter().filter(|s| !(-SLACK..=1.0 + SLACK).contains(s)).map(|s| format!("case {case}: attention {s}")));
            }
            Err(e) => violations.push(format!("case {case}: {e}")),
        }
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok(format!("{CASES} frames/tensors, {vis_n} visual and {attn_n} attention scores in [0, 1]"))
}

// 3 ────────────────────────────────────────────────────────────────────────

fn schedule_shape() -> Outcome {
    let p = ScheduleParams::new(40, 60, 100).map_err(|e| e.to_string())?;
    ensure(schedule(0, &p) == (60, 40), || format!("schedule(0) = {:?}", schedule(0, &p)))?;
    ensure(schedule(100, &p) == (40, 60), || format!("schedule(100) = {:?}", schedule(100, &p)))?;
    let mut prev_attn = 0;
    let mut sums = BTreeSet::new();
    for t in 0..=100 {
        let (v, a) = schedule(t, &p);
        ensure(a >= prev_attn, || format!("k_attn drops at t = {t}"))?;
        ensure(v + a == 99 || v + a == 100, || format!("budget {} at t = {t}", v + a))?;
        prev_attn = a;
        sums.insert(v + a);
    }
    Ok(format!("(60, 40) -> (40, 60), k_attn nondecreasing, budget sums {sums:?}"))
}

// 4 ────────────────────────────────────────────────────────────────────────

fn static_exactness() -> Outcome {
    let spec = SceneSpec {
        velocity: (0, 0),
        ..SceneSpec::moving_square()
    };
    let scene = Scene::generate(&spec, MOVING_SQUARE_SEED).map_err(|e| e.to_string())?;
    let rollout = Rollout::from_scene(&scene);
    let out = run_pipeline(&RunConfig::default(), &rollout).map_err(|e| e.to_string())?;

    // replay the reuse sets through a cached and a from-scratch engine and compare bits
    let mut cached: KvEngine = scene.engine.clone();
    let mut full = scene.engine.clone();
    let mut reused = 0;
    for (x, sets) in scene.embeddings.steps.iter().zip(&out.sets) {
        let a = cached.step(x, &sets.reuse).map_err(|e| e.to_string())?;
        let b = full.step(x, &Default::default()).map_err(|e| e.to_string())?;
        let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, || format!("outputs differ at t = {}", sets.t))?;
        reused += sets.reuse.len();
    }
    let d = out.report.drift;
    ensure(out.report.steps == 100, || format!("{} steps", out.report.steps))?;
    ensure(reused > 0, || "nothing was reused".into())?;
    ensure(d.max_abs == 0.0 && d.rms == 0.0, || format!("drift ({}, {})", d.max_abs, d.rms))?;
    Ok(format!("100 steps bitwise identical, {reused} rows reused, drift ({}, {})", d.max_abs, d.rms))
}

// 5 ────────────────────────────────────────────────────────────────────────

fn set_algebra() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let sets = (btree_set(0usize..256, 0..=256), btree_set(0usize..256, 0..=256));
    let cases = std::cell::Cell::new(0usize);
    runner
        .run(&sets, |(static_set, important)| {
            cases.set(cases.get() + 1);
            let s = build_token_sets(static_set.clone(), important.clone(), 0);
            let expected: BTreeSet<usize> = static_set.difference(&important).copied().collect();
            proptest::prop_assert_eq!(&s.reuse, &expected);
            proptest::prop_assert!(s.reuse.is_disjoint(&s.important));
            proptest::prop_assert!(s.reuse.is_subset(&s.static_set));
            proptest::prop_assert!(s.check(256).is_ok());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} random static/important pairs", cases.get()))
}

// 6 ────────────────────────────────────────────────────────────────────────

fn budget_sweep(rollout: &Rollout) -> Outcome {
    let points = sweep(&RunConfig::default(), rollout, &[60, 80, 100, 120, 140], (2, 3)).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = points.iter().map(|p| p.flops_ratio).collect();
    let shown = ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" -> ");
    ensure(ratios.windows(2).all(|w| w[0] <= w[1]), || format!("not monotone: {shown}"))?;
    Ok(format!("flops_ratio {shown}"))
}

// 7 ────────────────────────────────────────────────────────────────────────

fn reference_trace() -> Outcome {
    let started = Instant::now();
    let rollout = moving_square();
    let out = run_pipeline(&RunConfig::default(), &rollout).map_err(|e| e.to_string())?;
    let ours = trace_text(&out.report, &out.sets);
    let elapsed = started.elapsed();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/moving_square_trace.txt");
    let expected = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    if ours != expected {
        let line = ours.lines().zip(expected.lines()).position(|(a, b)| a != b).map_or(0, |i| i + 1);
        return Err(format!("trace differs from the reference at line {line}"));
    }
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{} bytes identical, {:.2} s", ours.len(), elapsed.as_secs_f64()))
}

// 8 ────────────────────────────────────────────────────────────────────────

fn ablations(rollout: &Rollout) -> Outcome {
    let runs = run_ablations(&RunConfig::default(), rollout).map_err(|e| e.to_string())?;
    for (i, (m1, a)) in runs.iter().enumerate() {
        for (m2, b) in &runs[i + 1..] {
            let differ = a.sets.iter().zip(&b.sets).filter(|(x, y)| x.important != y.important).count();
            ensure(differ >= 1, || format!("{} and {} select the same tokens", m1.name(), m2.name()))?;
        }
    }
    let names: Vec<&str> = runs.iter().map(|(m, _)| m.name()).collect();
    Ok(format!("{} pairwise distinct", names.join(", ")))
}

fn main() {
    let rollout = moving_square();
    let checks: Vec<Check> = vec![
        ("entropy oracle", Box::new(entropy_oracle)),
        ("entropy bounds", Box::new(entropy_bounds)),
        ("schedule endpoints and monotonicity", Box::new(schedule_shape)),
        ("static scene KV reuse exactness", Box::new(static_exactness)),
        ("reuse set algebra", Box::new(set_algebra)),
        ("budget sweep flops ratio", Box::new(|| budget_sweep(&rollout))),
        ("end-to-end reference trace", Box::new(reference_trace)),
        ("ablation structure", Box::new(|| ablations(&rollout))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
