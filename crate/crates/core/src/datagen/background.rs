//! Seeded background texture sources.
//!
//! `texture-a` is smooth multi-octave colour noise (natural-photo-like
//! low-frequency content); `texture-b` is a collage of flat-coloured
//! rectangles and disks with hard edges (segmentation-image-like content).
//! Each source renders a pool of large textures once per corpus seed; patches
//! are random 32x32 crops from the pool.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const PATCH_SIZE: u32 = 32;
const POOL_SIZE: usize = 12;
const TEXTURE_SIZE: u32 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundSource {
    TextureA,
    TextureB,
}

impl BackgroundSource {
    pub const ALL: [BackgroundSource; 2] = [BackgroundSource::TextureA, BackgroundSource::TextureB];

    pub fn id(self) -> &'static str {
        match self {
            BackgroundSource::TextureA => "texture-a",
            BackgroundSource::TextureB => "texture-b",
        }
    }
}

impl fmt::Display for BackgroundSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BackgroundSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackgroundSource::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown background source {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPatch {
    pub pixels: RgbImage,
    pub source_id: BackgroundSource,
}

/// A pool of textures from which patches are cropped.
#[derive(Debug, Clone)]
pub struct PatchSource {
    source: BackgroundSource,
    pool: Vec<RgbImage>,
}

impl PatchSource {
    pub fn new(source: BackgroundSource, corpus_seed: u64) -> Self {
        let mut rng = seed::rng(corpus_seed, seed::stream::BACKGROUND_POOL ^ source as u64);
        let pool = (0..POOL_SIZE)
            .map(|_| match source {
                BackgroundSource::TextureA => smooth_noise(&mut rng),
                BackgroundSource::TextureB => shape_collage(&mut rng),
            })
            .collect();
        Self { source, pool }
    }

    pub fn from_pool(source: BackgroundSource, pool: Vec<RgbImage>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config(format!("background source {source} is empty")));
        }
        if pool.iter().any(|t| t.width() < PATCH_SIZE || t.height() < PATCH_SIZE) {
            return Err(Error::Config("background textures must be at least 32x32".into()));
        }
        Ok(Self { source, pool })
    }

    pub fn source(&self) -> BackgroundSource {
        self.source
    }

    pub fn crop(&self, rng: &mut ChaCha8Rng) -> BackgroundPatch {
        let tex = &self.pool[rng.random_range(0..self.pool.len())];
        let x = rng.random_range(0..=tex.width() - PATCH_SIZE);
        let y = rng.random_range(0..=tex.height() - PATCH_SIZE);
        let pixels = image::imageops::crop_imm(tex, x, y, PATCH_SIZE, PATCH_SIZE).to_image();
        BackgroundPatch {
            pixels,
            source_id: self.source,
        }
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng) -> RgbImage {
    let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let octaves: Vec<(usize, f32, Vec<[f32; 3]>)> = [3usize, 6, 12]
        .iter()
        .zip([0.55f32, 0.3, 0.15])
        .map(|(&cells, amp)| {
            let grid = (0..(cells + 1) * (cells + 1))
                .map(|_| [rng.random::<f32>(), rng.random(), rng.random()])
                .collect();
            (cells, amp, grid)
        })
        .collect();
    RgbImage::from_fn(TEXTURE_SIZE, TEXTURE_SIZE, |x, y| {
        let mut acc = [0f32; 3];
        for (cells, amp, grid) in &octaves {
            let fx = x as f32 / TEXTURE_SIZE as f32 * *cells as f32;
            let fy = y as f32 / TEXTURE_SIZE as f32 * *cells as f32;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let at = |gx: usize, gy: usize| grid[gy * (cells + 1) + gx];
            for (c, slot) in acc.iter_mut().enumerate() {
                let top = at(ix, iy)[c] * (1.0 - tx) + at(ix + 1, iy)[c] * tx;
                let bot = at(ix, iy + 1)[c] * (1.0 - tx) + at(ix + 1, iy + 1)[c] * tx;
                *slot += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        let px = |c: usize| ((0.45 * base[c] + 0.75 * acc[c]) * 255.0).clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn shape_collage(rng: &mut ChaCha8Rng) -> RgbImage {
    let mut color = || Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    let mut img = RgbImage::from_pixel(TEXTURE_SIZE, TEXTURE_SIZE, color());
    let n = rng.random_range(10..20);
    for _ in 0..n {
        let c = Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
        let cx = rng.random_range(0..TEXTURE_SIZE) as i64;
        let cy = rng.random_range(0..TEXTURE_SIZE) as i64;
        let rx = rng.random_range(4..28) as i64;
        let ry = rng.random_range(4..28) as i64;
        let disk = rng.random_bool(0.4);
        for y in (cy - ry).max(0)..(cy + ry).min(TEXTURE_SIZE as i64) {
            for x in (cx - rx).max(0)..(cx + rx).min(TEXTURE_SIZE as i64) {
                let inside = !disk || {
                    let (dx, dy) = ((x - cx) as f32 / rx as f32, (y - cy) as f32 / ry as f32);
                    dx * dx + dy * dy <= 1.0
                };
                if inside {
                    img.put_pixel(x as u32, y as u32, c);
                }
            }
        }
    }
    for p in img.pixels_mut() {
        for v in p.0.iter_mut() {
            *v = (i16::from(*v) + rng.random_range(-8i16..=8)).clamp(0, 255) as u8;
        }
    }
    img
}
