//! Token overlays: important tokens tinted purple, reusable tokens green.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::{Frame, PatchGrid};
use crate::selection::TokenSets;

pub const IMPORTANT_TINT: [u8; 3] = [160, 32, 240];
pub const REUSE_TINT: [u8; 3] = [0, 200, 0];
/// Tint weight in percent.
pub const TINT_ALPHA: u32 = 45;

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Gray promoted to RGB.
    pub fn from_gray(frame: &Frame) -> Self {
        RgbImage {
            width: frame.width(),
            height: frame.height(),
            data: frame.pixels().iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// PNG when built with the `png` feature, otherwise three PGMs
    /// (`*_r.pgm`, `*_g.pgm`, `*_b.pgm`). Returns the files written.
    pub fn save(&self, stem: &Path) -> Result<Vec<PathBuf>> {
        #[cfg(feature = "png")]
        {
            let path = stem.with_extension("png");
            image::save_buffer(
                &path,
                &self.data,
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::format(&path, e.to_string()))?;
            Ok(vec![path])
        }
        #[cfg(not(feature = "png"))]
        {
            self.save_pgm_triplet(stem)
        }
    }

    pub fn save_pgm_triplet(&self, stem: &Path) -> Result<Vec<PathBuf>> {
        let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("overlay").to_string();
        let mut written = Vec::with_capacity(3);
        for (c, suffix) in ["r", "g", "b"].iter().enumerate() {
            let path = stem.with_file_name(format!("{name}_{suffix}.pgm"));
            let frame = Frame::new(self.width, self.height, self.channel(c), 0)?;
            crate::ingest::write_pgm(&frame, &path)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn blend(gray: u8, tint: [u8; 3]) -> [u8; 3] {
    tint.map(|c| ((gray as u32 * (100 - TINT_ALPHA) + c as u32 * TINT_ALPHA + 50) / 100) as u8)
}

pub fn render_overlay(frame: &Frame, grid: &PatchGrid, sets: &TokenSets) -> Result<RgbImage> {
    grid.check_frame(frame)?;
    if let Some(i) = sets.important.intersection(&sets.reuse).next() {
        return Err(Error::Invariant(format!("token {i} is both important and reusable")));
    }
    let mut img = RgbImage::from_gray(frame);
    for (set, tint) in [(&sets.important, IMPORTANT_TINT), (&sets.reuse, REUSE_TINT)] {
        for &token in set {
            for idx in grid.pixel_indices(token)? {
                let rgb = blend(frame.pixels()[idx], tint);
                img.data[3 * idx..3 * idx + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok(img)
}
