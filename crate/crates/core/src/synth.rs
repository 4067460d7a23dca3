//! Deterministic synthetic rollouts: textured squares moving over a static
//! background, with cross-attention that concentrates object-referring text
//! tokens on the patches the objects cover.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::{softmax, AttentionTensor};
use crate::error::{Error, Result};
use crate::ingest::{write_pgm, Frame, PatchGrid};
use crate::kv::{EmbeddingSequence, KvEngine, PatchEmbedder, ProjectionWeights};

/// Seed of the bundled moving-square scene.
pub const MOVING_SQUARE_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub objects: usize,
    pub object_size: usize,
    /// Pixels per step; objects bounce off the frame edges.
    pub velocity: (i64, i64),
    pub background: u8,
    /// Amplitude of the static background texture.
    pub noise: u8,
    pub text_tokens: usize,
    /// Text tokens `0..object_words` attend to the objects.
    pub object_words: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl SceneSpec {
    /// One 48-pixel textured square drifting over a lightly textured 224x224 background for 100 steps.
    pub fn moving_square() -> Self {
        SceneSpec {
            width: 224,
            height: 224,
            steps: 100,
            grid_rows: 16,
            grid_cols: 16,
            objects: 1,
            object_size: 48,
            velocity: (3, 2),
            background: 96,
            noise: 6,
            text_tokens: 8,
            object_words: 4,
            layers: 2,
            heads: 2,
            d_model: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.steps == 0 {
            return bad("width, height and steps must be positive".into());
        }
        if PatchGrid::new(self.width, self.height, self.grid_rows, self.grid_cols).is_err() {
            return bad(format!(
                "{}x{} grid does not divide a {}x{} frame",
                self.grid_rows, self.grid_cols, self.width, self.height
            ));
        }
        if self.objects > 0 && (self.object_size == 0 || self.object_size > self.width.min(self.height)) {
            return bad(format!("object size {} does not fit the frame", self.object_size));
        }
        if self.background as u16 + self.noise as u16 > 255 {
            return bad("background + noise exceeds 255".into());
        }
        if self.text_tokens == 0 || self.object_words > self.text_tokens {
            return bad(format!(
                "need 1 <= text tokens and object words <= text tokens, got {} / {}",
                self.object_words, self.text_tokens
            ));
        }
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 {
            return bad("layers, heads and d_model must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.width, self.height, self.grid_rows, self.grid_cols)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidSpec(format!("{key}: cannot parse {value:?}"));
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<T> {
            v.trim().parse().map_err(|_| bad())
        }
        match key.trim() {
            "width" => self.width = num(value, bad)?,
            "height" => self.height = num(value, bad)?,
            "steps" => self.steps = num(value, bad)?,
            "grid" => {
                (self.grid_rows, self.grid_cols) =
                    crate::config::parse_grid(value).map_err(|_| bad())?
            }
            "objects" => self.objects = num(value, bad)?,
            "object_size" => self.object_size = num(value, bad)?,
            "velocity" => {
                let (x, y) = value.split_once(',').ok_or_else(bad)?;
                self.velocity = (num(x, bad)?, num(y, bad)?);
            }
            "background" => self.background = num(value, bad)?,
            "noise" => self.noise = num(value, bad)?,
            "text_tokens" => self.text_tokens = num(value, bad)?,
            "object_words" => self.object_words = num(value, bad)?,
            "layers" => self.layers = num(value, bad)?,
            "heads" => self.heads = num(value, bad)?,
            "d_model" => self.d_model = num(value, bad)?,
            other => return Err(Error::InvalidSpec(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "width = {}\nheight = {}\nsteps = {}\ngrid = {}x{}\nobjects = {}\nobject_size = {}\nvelocity = {},{}\n\
             background = {}\nnoise = {}\ntext_tokens = {}\nobject_words = {}\nlayers = {}\nheads = {}\nd_model = {}\n",
            self.width,
            self.height,
            self.steps,
            self.grid_rows,
            self.grid_cols,
            self.objects,
            self.object_size,
            self.velocity.0,
            self.velocity.1,
            self.background,
            self.noise,
            self.text_tokens,
            self.object_words,
            self.layers,
            self.heads,
            self.d_model
        )
    }
}

/// Triangle wave keeping `start + v * t` inside `[0, span]`.
fn bounce(start: i64, velocity: i64, t: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span as i64;
    let p = (start + velocity * t as i64).rem_euclid(period);
    (if p > span as i64 { period - p } else { p }) as usize
}

struct MovingObject {
    texture: Vec<u8>,
    start: (i64, i64),
    velocity: (i64, i64),
}

/// A generated rollout held in memory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub attention: Vec<AttentionTensor>,
    pub embeddings: EmbeddingSequence,
    pub engine: KvEngine,
    /// Per step, the fraction of each token's pixels covered by an object.
    pub coverage: Vec<Vec<f64>>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Scene> {
        spec.validate()?;
        let grid = spec.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let background: Vec<u8> = (0..spec.width * spec.height)
            .map(|_| spec.background + rng.gen_range(0..=spec.noise))
            .collect();
        let s = spec.object_size;
        let objects: Vec<MovingObject> = (0..spec.objects)
            .map(|k| {
                let texture = (0..s * s).map(|_| rng.gen()).collect();
                let start = (
                    rng.gen_range(0..=(spec.width - s) as i64),
                    rng.gen_range(0..=(spec.height - s) as i64),
                );
                let sign = if k % 2 == 0 { 1 } else { -1 };
                MovingObject {
                    texture,
                    start,
                    velocity: (sign * spec.velocity.0, spec.velocity.1),
                }
            })
            .collect();

        let embedder = PatchEmbedder::new(&grid, spec.d_model, seed);
        let weights = ProjectionWeights::random(spec.d_model, spec.d_model, spec.d_model, 1, seed.wrapping_add(1))?;
        let engine = KvEngine::new(vec![weights])?;

        let mut frames = Vec::with_capacity(spec.steps);
        let mut attention = Vec::with_capacity(spec.steps);
        let mut embeddings = Vec::with_capacity(spec.steps);
        let mut coverage = Vec::with_capacity(spec.steps);
        for t in 0..spec.steps {
            let mut px = background.clone();
            let mut covered = vec![false; px.len()];
            for obj in &objects {
                let x0 = bounce(obj.start.0, obj.velocity.0, t, spec.width - s);
                let y0 = bounce(obj.start.1, obj.velocity.1, t, spec.height - s);
                for y in 0..s {
                    let row = (y0 + y) * spec.width + x0;
                    px[row..row + s].copy_from_slice(&obj.texture[y * s..(y + 1) * s]);
                    covered[row..row + s].fill(true);
                }
            }
            let frame = Frame::new(spec.width, spec.height, px, t)?;
            let cov: Vec<f64> = (0..grid.num_tokens())
                .map(|i| {
                    let region = grid.pixel_indices(i).expect("token in range");
                    let hits = region.filter(|&idx| covered[idx]).count();
                    hits as f64 / (grid.patch_width() * grid.patch_height()) as f64
                })
                .collect();
            attention.push(synth_attention(spec, &cov, seed, t)?);
            embeddings.push(embedder.embed(&frame, &grid)?);
            frames.push(frame);
            coverage.push(cov);
        }
        Ok(Scene {
            spec: spec.clone(),
            seed,
            frames,
            attention,
            embeddings: EmbeddingSequence { steps: embeddings },
            engine,
            coverage,
        })
    }

    /// Writes `frames/`, `frames.txt`, `attention/`, `embeddings.bin`, `weights.bin` and `scene.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        let frames_dir = dir.join("frames");
        let attn_dir = dir.join("attention");
        mkdir(&frames_dir)?;
        mkdir(&attn_dir)?;
        let mut manifest = String::from("# frames in timestep order\n");
        for (t, (frame, attn)) in self.frames.iter().zip(&self.attention).enumerate() {
            let name = format!("frame_{t:04}.pgm");
            write_pgm(frame, &frames_dir.join(&name))?;
            manifest.push_str(&format!("frames/{name}\n"));
            attn.save(&attn_dir.join(format!("attn_{t:04}.bin")))?;
        }
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("frames.txt", manifest)?;
        write("scene.txt", format!("seed = {}\n{}", self.seed, self.spec.to_text()))?;
        self.embeddings.save(&dir.join("embeddings.bin"))?;
        self.engine.save_weights(&dir.join("weights.bin"))
    }
}

/// Row-softmaxed text-to-vision attention; object words get a logit boost
/// proportional to each patch's object coverage.
fn synth_attention(spec: &SceneSpec, coverage: &[f64], seed: u64, t: usize) -> Result<AttentionTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    let n = coverage.len();
    let mut scores = Vec::with_capacity(spec.layers * spec.heads * spec.text_tokens * n);
    for _ in 0..spec.layers * spec.heads {
        for w in 0..spec.text_tokens {
            let boost = if w < spec.object_words { 4.0 } else { 0.0 };
            let logits: Vec<f64> = coverage
                .iter()
                .map(|c| rng.gen_range(-0.5..0.5) + boost * c)
                .collect();
            scores.extend(softmax(logits.iter().copied()));
        }
    }
    AttentionTensor::new(spec.layers, spec.heads, spec.text_tokens, n, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::visual_scores;

    fn small() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            steps: 6,
            grid_rows: 8,
            grid_cols: 8,
            objects: 1,
            object_size: 16,
            velocity: (3, 1),
            background: 80,
            noise: 0,
            text_tokens: 4,
            object_words: 2,
            layers: 1,
            heads: 2,
            d_model: 8,
        }
    }

    #[test]
    fn bounce_stays_in_range() {
        for t in 0..200 {
            assert!(bounce(5, 3, t, 40) <= 40);
        }
        assert_eq!(bounce(0, 1, 41, 40), 39);
        assert_eq!(bounce(7, 5, 3, 0), 0);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = Scene::generate(&small(), 3).unwrap();
        let b = Scene::generate(&small(), 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.attention, b.attention);
        assert_eq!(a.embeddings, b.embeddings);
        let c = Scene::generate(&small(), 4).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn zero_motion_repeats_frames() {
        let mut spec = small();
        spec.velocity = (0, 0);
        let s = Scene::generate(&spec, 1).unwrap();
        for pair in s.frames.windows(2) {
            assert_eq!(pair[0].pixels(), pair[1].pixels());
        }
        for pair in s.embeddings.steps.windows(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn object_patches_have_more_entropy() {
        let spec = small();
        let s = Scene::generate(&spec, 9).unwrap();
        let grid = spec.grid().unwrap();
        for (frame, cov) in s.frames.iter().zip(&s.coverage) {
            let v = visual_scores(frame, &grid, 256).unwrap();
            let bg_max = (0..v.len()).filter(|&i| cov[i] == 0.0).map(|i| v[i]).fold(0.0, f64::max);
            let obj_min = (0..v.len()).filter(|&i| cov[i] > 0.0).map(|i| v[i]).fold(1.0, f64::min);
            assert!(obj_min > bg_max, "{obj_min} <= {bg_max}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let spec = small();
        let s = Scene::generate(&spec, 2).unwrap();
        let a = &s.attention[0];
        let n = a.visual_tokens;
        for row in a.scores.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        let mut spec = small();
        spec.grid_rows = 7;
        assert!(matches!(Scene::generate(&spec, 0), Err(Error::InvalidSpec(_))));
        let mut spec = small();
        spec.object_size = 65;
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.object_words = 5;
        assert!(spec.validate().is_err());
        assert!(small().set("velocity", "3").is_err());
    }

    #[test]
    fn writes_byte_identical_files() {
        let s = Scene::generate(&small(), 5).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        s.write(a.path()).unwrap();
        Scene::generate(&small(), 5).unwrap().write(b.path()).unwrap();
        for rel in ["frames.txt", "scene.txt", "embeddings.bin", "weights.bin", "frames/frame_0003.pgm", "attention/attn_0005.bin"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }
}
