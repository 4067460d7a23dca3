//! Frame loading, grayscale conversion and patch partitioning.
//!
//! A frame is split into a `rows x cols` grid of equally sized rectangular
//! patches. Token `i` covers the patch at `(i / cols, i % cols)`, and every
//! pixel belongs to exactly one token.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Default number of gray levels.
pub const DEFAULT_GRAY_LEVELS: usize = 256;
/// Default grid side; 16 x 16 = 256 visual tokens.
pub const DEFAULT_GRID: usize = 16;

/// Luma weights in thousandths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LumaWeights {
    pub r: u32,
    pub g: u32,
    pub b: u32,
}

impl LumaWeights {
    /// ITU-R BT.601: 0.299 R + 0.587 G + 0.114 B.
    pub const BT601: LumaWeights = LumaWeights {
        r: 299,
        g: 587,
        b: 114,
    };

    /// Weighted sum rounded half-up, clamped to `[0, 255]`.
    pub fn apply(&self, r: u8, g: u8, b: u8) -> u8 {
        let weighted = self.r as u64 * r as u64 + self.g as u64 * g as u64 + self.b as u64 * b as u64;
        // exact round-half-up of weighted / 1000
        let gray = (weighted + 500) / 1000;
        gray.min(255) as u8
    }
}

impl Default for LumaWeights {
    fn default() -> Self {
        Self::BT601
    }
}

/// BT.601 luma of an RGB triple.
pub fn to_grayscale(r: u8, g: u8, b: u8) -> u8 {
    LumaWeights::BT601.apply(r, g, b)
}

/// A grayscale frame with row-major intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    frame_index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, frame_index: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidFrame(format!("empty frame {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidFrame(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
            frame_index,
        })
    }

    /// Frame filled with a single intensity.
    pub fn filled(width: usize, height: usize, value: u8, frame_index: usize) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], frame_index)
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[u8], frame_index: usize) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::InvalidFrame(format!(
                "{} RGB bytes for a {width}x{height} frame",
                rgb.len()
            )));
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|px| to_grayscale(px[0], px[1], px[2]))
            .collect();
        Self::new(width, height, pixels, frame_index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn with_index(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn max_intensity(&self) -> u8 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }

    /// Maps 8-bit intensities onto `levels` bins: `v * levels / 256`.
    pub fn quantize(&self, levels: usize) -> Result<Frame> {
        if !(2..=DEFAULT_GRAY_LEVELS).contains(&levels) {
            return Err(Error::InvalidConfig(format!("gray levels must be in 2..=256, got {levels}")));
        }
        let pixels = self
            .pixels
            .iter()
            .map(|&v| ((v as usize * levels) / DEFAULT_GRAY_LEVELS) as u8)
            .collect();
        Frame::new(self.width, self.height, pixels, self.frame_index)
    }
}

/// Pixel rectangle covered by one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

/// Uniform patch grid over a frame of fixed size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    frame_width: usize,
    frame_height: usize,
}

impl PatchGrid {
    pub fn new(frame_width: usize, frame_height: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || !frame_height.is_multiple_of(rows) || !frame_width.is_multiple_of(cols) {
            return Err(Error::NonDivisibleGrid {
                width: frame_width,
                height: frame_height,
                rows,
                cols,
            });
        }
        Ok(PatchGrid {
            rows,
            cols,
            frame_width,
            frame_height,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    pub fn frame_height(&self) -> usize {
        self.frame_height
    }

    pub fn patch_width(&self) -> usize {
        self.frame_width / self.cols
    }

    pub fn patch_height(&self) -> usize {
        self.frame_height / self.rows
    }

    pub fn region(&self, token: usize) -> Result<Region> {
        self.check_token(token)?;
        let (pw, ph) = (self.patch_width(), self.patch_height());
        Ok(Region {
            x0: (token % self.cols) * pw,
            y0: (token / self.cols) * ph,
            width: pw,
            height: ph,
        })
    }

    /// Row-major pixel indices of a token's region.
    pub fn pixel_indices(&self, token: usize) -> Result<impl Iterator<Item = usize> + '_> {
        let r = self.region(token)?;
        let w = self.frame_width;
        Ok((r.y0..r.y0 + r.height).flat_map(move |y| (r.x0..r.x0 + r.width).map(move |x| y * w + x)))
    }

    /// Token owning pixel `(x, y)`.
    pub fn token_at(&self, x: usize, y: usize) -> usize {
        (y / self.patch_height()) * self.cols + x / self.patch_width()
    }

    pub fn matches(&self, frame: &Frame) -> bool {
        frame.width() == self.frame_width && frame.height() == self.frame_height
    }

    pub(crate) fn check_frame(&self, frame: &Frame) -> Result<()> {
        if self.matches(frame) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "grid built for {}x{} but frame is {}x{}",
                self.frame_width,
                self.frame_height,
                frame.width(),
                frame.height()
            )))
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token < self.num_tokens() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                num_tokens: self.num_tokens(),
            })
        }
    }
}

/// Splits `frame` into a `rows x cols` grid.
pub fn partition(frame: &Frame, rows: usize, cols: usize) -> Result<PatchGrid> {
    PatchGrid::new(frame.width(), frame.height(), rows, cols)
}

/// Gray-level counts for one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl GrayHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        GrayHistogram { counts, total }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn levels(&self) -> usize {
        self.counts.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Histogram of `token`'s pixels over `levels` gray levels.
pub fn patch_histogram(frame: &Frame, grid: &PatchGrid, token: usize, levels: usize) -> Result<GrayHistogram> {
    grid.check_frame(frame)?;
    if levels < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 gray levels, got {levels}")));
    }
    let mut counts = vec![0u64; levels];
    let pixels = frame.pixels();
    for idx in grid.pixel_indices(token)? {
        let v = pixels[idx] as usize;
        if v >= levels {
            return Err(Error::InvalidFrame(format!(
                "intensity {v} at pixel {idx} exceeds {levels} gray levels"
            )));
        }
        counts[v] += 1;
    }
    Ok(GrayHistogram::from_counts(counts))
}

// ── Files ────────────────────────────────────────────────────────────────────

/// Parses a binary (P5) PGM with 8-bit samples.
pub fn decode_pgm(bytes: &[u8], path: &Path, frame_index: usize) -> Result<Frame> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?;
        *field = text.parse().map_err(|_| bad("header field out of range"))?;
    }
    // exactly one whitespace byte before the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}; expected 1..=255")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| bad("dimensions overflow"))?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad("raster shorter than width x height"))?;
    if raster.iter().any(|&v| v as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Frame::new(width, height, raster.to_vec(), frame_index)
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(frame.pixels());
    out
}

pub fn write_pgm(frame: &Frame, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8], path: &Path, frame_index: usize) -> Result<Frame> {
    use image::{DynamicImage, ImageFormat};

    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Frame::new(w, h, buf.into_raw(), frame_index),
        DynamicImage::ImageRgb8(buf) => Frame::from_rgb(w, h, buf.as_raw(), frame_index),
        other => Err(Error::format(
            path,
            format!("unsupported PNG color type {:?}; expected 8-bit gray or RGB", other.color()),
        )),
    }
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8], path: &Path, _frame_index: usize) -> Result<Frame> {
    Err(Error::format(path, "PNG support disabled at build time"))
}

/// Loads a PGM or PNG frame, detected by content.
pub fn load_frame(path: &Path, frame_index: usize) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path, frame_index)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path, frame_index)
    } else {
        Err(Error::format(path, "neither a P5 PGM nor a PNG"))
    }
}

/// Paths listed in a manifest: one per line, `#` comments and blank lines skipped.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(parse_manifest(&text)
        .into_iter()
        .map(|p| if p.is_absolute() { p } else { base.join(p) })
        .collect())
}

pub fn parse_manifest(text: &str) -> Vec<PathBuf> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PathBuf::from)
        .collect()
}

/// Files in `dir` with one of `extensions`, sorted lexicographically.
pub fn list_dir(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Resolves a directory (sorted listing) or a manifest file into ordered paths.
pub fn resolve_sequence(path: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        list_dir(path, extensions)
    } else {
        read_manifest(path)
    }
}

/// Loads a frame sequence in timestep order.
pub fn load_sequence(path: &Path) -> Result<Vec<Frame>> {
    let paths = resolve_sequence(path, &["pgm", "png"])?;
    if paths.is_empty() {
        return Err(Error::InvalidFrame(format!("no frames found at {}", path.display())));
    }
    paths.iter().enumerate().map(|(t, p)| load_frame(p, t)).collect()
}
