//! Picks the static-token threshold from synthetic data.
//!
//! Two populations of patch pairs are scored with the same cosine similarity
//! used by static detection:
//!
//! - near-identical: a noisy flat patch against itself with every pixel
//!   nudged by at most one gray level, at several background levels
//! - changed: consecutive frames of the moving-square scene where some pixel
//!   moved by more than one gray level
//!
//! Cosine similarity cannot separate the two completely. An object clipping a
//! few pixels of a bright patch barely moves the angle, while one-level
//! jitter on a dark patch moves it a lot. The table shows, per candidate
//! threshold, the darkest background whose jitter still counts as static and
//! how many changed patches would be wrongly reused.
//!
//!     cargo run --release --example calibrate_tau

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infocache::selection::{patch_cosine, DEFAULT_TAU};
use infocache::synth::{Scene, SceneSpec, MOVING_SQUARE_SEED};
use infocache::Frame;

fn main() -> infocache::Result<()> {
    let spec = SceneSpec::moving_square();
    let scene = Scene::generate(&spec, MOVING_SQUARE_SEED)?;
    let grid = spec.grid()?;
    let n = grid.num_tokens();

    let mut changed = Vec::new();
    for pair in scene.frames.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        for token in 0..n {
            let moved = grid
                .pixel_indices(token)?
                .any(|i| cur.pixels()[i].abs_diff(prev.pixels()[i]) > 1);
            if moved {
                changed.push(patch_cosine(cur, prev, &grid, token)?);
            }
        }
    }

    // one-level jitter on noisy flat backgrounds, dark to bright
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("1-LSB jitter, min cosine by background level:");
    let mut floor = Vec::new();
    for base in [4u8, 8, 12, 16, 24, 32, 64, 96, 128, 192, 248] {
        let mut min = f64::INFINITY;
        for _ in 0..10 {
            let a: Vec<u8> = (0..spec.width * spec.height)
                .map(|_| base + rng.gen_range(0..=spec.noise))
                .collect();
            let b: Vec<u8> = a.iter().map(|&v| v - 1 + rng.gen_range(0..=2)).collect();
            let fa = Frame::new(spec.width, spec.height, a, 0)?;
            let fb = Frame::new(spec.width, spec.height, b, 1)?;
            for token in 0..n {
                min = min.min(patch_cosine(&fb, &fa, &grid, token)?);
            }
        }
        println!("  level {base:>3}: {min:.6}");
        floor.push((base, min));
    }

    let mut changed: Vec<f64> = changed.into_iter().collect();
    changed.sort_by(f64::total_cmp);
    println!("changed patches ({}): max cosine {:.6}", changed.len(), changed.last().unwrap());
    println!("{:>8} {:>16} {:>22}", "tau", "darkest 1-LSB ok", "changed marked static");
    for tau in [0.99, 0.994, 0.995, 0.996, 0.997, 0.998, 0.999, 0.9995] {
        let darkest = floor.iter().find(|(_, m)| *m >= tau).map_or(255, |(b, _)| *b);
        let leaked = changed.iter().filter(|&&c| c >= tau).count();
        let mark = if tau == DEFAULT_TAU { "  <- default" } else { "" };
        println!(
            "{tau:>8} {darkest:>16} {:>15} ({:.2}%){mark}",
            leaked,
            100.0 * leaked as f64 / changed.len() as f64
        );
    }
    Ok(())
}
