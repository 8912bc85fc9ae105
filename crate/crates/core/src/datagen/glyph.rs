//! Foreground glyph sources.
//!
//! Procedural stroke families stand in for the MNIST-style foreground sets:
//! every family draws the same ten digit skeletons, but with its own pen,
//! weight, slant and proportions. Real IDX files can be ingested through
//! [`crate::datagen::idx`].

use std::fmt;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_SIZE: u32 = 32;
const DRAW_SIZE: u32 = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Glyph {
    pub pixels: GrayImage,
    pub class_label: u8,
}

impl Glyph {
    /// Brings any glyph to 32x32: smaller images are zero-padded around the
    /// centre, larger ones are resized.
    pub fn canonical(pixels: GrayImage, class_label: u8) -> Glyph {
        let (w, h) = pixels.dimensions();
        let pixels = if (w, h) == (CANONICAL_SIZE, CANONICAL_SIZE) {
            pixels
        } else if w <= CANONICAL_SIZE && h <= CANONICAL_SIZE {
            let mut out = GrayImage::new(CANONICAL_SIZE, CANONICAL_SIZE);
            imageops::overlay(
                &mut out,
                &pixels,
                i64::from((CANONICAL_SIZE - w) / 2),
                i64::from((CANONICAL_SIZE - h) / 2),
            );
            out
        } else {
            imageops::resize(&pixels, CANONICAL_SIZE, CANONICAL_SIZE, FilterType::Triangle)
        };
        Glyph { pixels, class_label }
    }
}

pub trait GlyphSource: Send + Sync {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    /// Draws the `index`-th glyph of a domain. Implementations must be a pure
    /// function of `(index, rng state)`.
    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Glyph>;
}

/// Procedural handwriting-like families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrokeFamily {
    Plain,
    BoldItalic,
    ThinCondensed,
    Blocky,
    Dotted,
    Outline,
}

impl StrokeFamily {
    pub const ALL: [StrokeFamily; 6] = [
        StrokeFamily::Plain,
        StrokeFamily::BoldItalic,
        StrokeFamily::ThinCondensed,
        StrokeFamily::Blocky,
        StrokeFamily::Dotted,
        StrokeFamily::Outline,
    ];

    pub fn id(self) -> &'static str {
        match self {
            StrokeFamily::Plain => "stroke-plain",
            StrokeFamily::BoldItalic => "stroke-bold-italic",
            StrokeFamily::ThinCondensed => "stroke-thin-condensed",
            StrokeFamily::Blocky => "stroke-blocky",
            StrokeFamily::Dotted => "stroke-dotted",
            StrokeFamily::Outline => "stroke-outline",
        }
    }

    fn style(self) -> Style {
        let base = Style {
            thickness: 2.4,
            slant: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            jitter: 0.025,
            pen: Pen::Round,
        };
        match self {
            StrokeFamily::Plain => base,
            StrokeFamily::BoldItalic => Style {
                thickness: 3.8,
                slant: 0.32,
                scale_x: 0.9,
                ..base
            },
            StrokeFamily::ThinCondensed => Style {
                thickness: 1.4,
                scale_x: 0.62,
                scale_y: 1.05,
                jitter: 0.035,
                ..base
            },
            StrokeFamily::Blocky => Style {
                thickness: 2.8,
                pen: Pen::Square,
                jitter: 0.015,
                ..base
            },
            StrokeFamily::Dotted => Style {
                thickness: 3.0,
                pen: Pen::Dotted { spacing: 3.2 },
                ..base
            },
            StrokeFamily::Outline => Style {
                thickness: 4.6,
                pen: Pen::Outline { wall: 1.2 },
                slant: -0.12,
                ..base
            },
        }
    }
}

impl fmt::Display for StrokeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for StrokeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrokeFamily::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown stroke family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
enum Pen {
    Round,
    Square,
    Dotted { spacing: f32 },
    Outline { wall: f32 },
}

#[derive(Debug, Clone, Copy)]
struct Style {
    /// Stroke width in pixels of the 28x28 drawing area.
    thickness: f32,
    slant: f32,
    scale_x: f32,
    scale_y: f32,
    /// Per-sample control point noise, in unit-box coordinates.
    jitter: f32,
    pen: Pen,
}

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = i as f32 / steps as f32 * std::f32::consts::TAU;
            (cx + rx * t.sin(), cy - ry * t.cos())
        })
        .collect()
}

/// Digit skeletons in the unit box, y pointing down.
fn skeleton(class: u8) -> Vec<Stroke> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.4, 20)],
        1 => vec![vec![(0.34, 0.26), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.22, 0.3),
            (0.32, 0.13),
            (0.5, 0.08),
            (0.7, 0.13),
            (0.78, 0.3),
            (0.68, 0.5),
            (0.22, 0.9),
            (0.84, 0.9),
        ]],
        3 => vec![vec![
            (0.22, 0.16),
            (0.5, 0.08),
            (0.76, 0.2),
            (0.7, 0.4),
            (0.45, 0.5),
            (0.72, 0.58),
            (0.8, 0.78),
            (0.52, 0.92),
            (0.2, 0.84),
        ]],
        4 => vec![vec![(0.66, 0.92), (0.66, 0.08), (0.16, 0.66), (0.86, 0.66)]],
        5 => vec![vec![
            (0.8, 0.1),
            (0.27, 0.1),
            (0.23, 0.46),
            (0.52, 0.4),
            (0.77, 0.54),
            (0.76, 0.8),
            (0.5, 0.92),
            (0.2, 0.84),
        ]],
        6 => vec![vec![
            (0.74, 0.12),
            (0.46, 0.1),
            (0.26, 0.34),
            (0.22, 0.7),
            (0.4, 0.9),
            (0.64, 0.88),
            (0.78, 0.7),
            (0.64, 0.53),
            (0.4, 0.53),
            (0.24, 0.66),
        ]],
        7 => vec![vec![(0.16, 0.1), (0.84, 0.1), (0.4, 0.92)]],
        8 => vec![ellipse(0.5, 0.29, 0.22, 0.19, 16), ellipse(0.5, 0.7, 0.27, 0.22, 16)],
        9 => vec![ellipse(0.5, 0.32, 0.25, 0.22, 16), vec![(0.75, 0.32), (0.62, 0.92)]],
        _ => unreachable!("digit skeletons cover classes 0..10"),
    }
}

fn seg_dist(p: (f32, f32), a: (f32, f32), b: (f32, f32), square: bool) -> (f32, f32) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    let d = if square {
        qx.abs().max(qy.abs())
    } else {
        (qx * qx + qy * qy).sqrt()
    };
    (d, t)
}

fn coverage(d: f32, half_width: f32) -> f32 {
    (half_width + 0.5 - d).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct ProceduralGlyphs {
    family: StrokeFamily,
    name: String,
}

impl ProceduralGlyphs {
    pub fn new(family: StrokeFamily) -> Self {
        Self {
            family,
            name: family.id().to_string(),
        }
    }

    pub fn family(&self) -> StrokeFamily {
        self.family
    }

    fn render(&self, class: u8, rng: &mut ChaCha8Rng) -> GrayImage {
        let style = self.family.style();
        let size = DRAW_SIZE as f32;
        let angle: f32 = rng.random_range(-0.15..0.15);
        let scale: f32 = rng.random_range(0.88..1.06);
        let (tx, ty): (f32, f32) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let thickness = style.thickness * rng.random_range(0.85..1.15);
        let (sin, cos) = angle.sin_cos();

        // Map unit-box skeleton points to pixel space.
        let strokes: Vec<Stroke> = skeleton(class)
            .into_iter()
            .map(|stroke| {
                stroke
                    .into_iter()
                    .map(|(x, y)| {
                        let x = x + rng.random_range(-style.jitter..=style.jitter);
                        let y = y + rng.random_range(-style.jitter..=style.jitter);
                        let (cx, cy) = ((x - 0.5) * style.scale_x, (y - 0.5) * style.scale_y);
                        let cx = cx - style.slant * cy;
                        let (rx, ry) = (cos * cx - sin * cy, sin * cx + cos * cy);
                        let margin = 0.78 * scale;
                        (size / 2.0 + rx * size * margin + tx, size / 2.0 + ry * size * margin + ty)
                    })
                    .collect()
            })
            .collect();

        let square = matches!(style.pen, Pen::Square);
        let half = thickness / 2.0;
        GrayImage::from_fn(DRAW_SIZE, DRAW_SIZE, |px, py| {
            let p = (px as f32 + 0.5, py as f32 + 0.5);
            let mut best = f32::INFINITY;
            let mut best_arc = 0.0f32;
            let mut arc = 0.0f32;
            for stroke in &strokes {
                for w in stroke.windows(2) {
                    let (d, t) = seg_dist(p, w[0], w[1], square);
                    let seg_len = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
                    if d < best {
                        best = d;
                        best_arc = arc + t * seg_len;
                    }
                    arc += seg_len;
                }
            }
            let v = match style.pen {
                Pen::Round | Pen::Square => coverage(best, half),
                Pen::Dotted { spacing } => {
                    // Distance to the nearest dot centre along the stroke.
                    let along = (best_arc / spacing).fract() - 0.5;
                    let d = (best * best + (along * spacing).powi(2)).sqrt();
                    coverage(d, half * 0.75)
                }
                Pen::Outline { wall } => {
                    let ring = (best - (half - wall)).abs();
                    coverage(ring, wall / 2.0) * coverage(best, half)
                }
            };
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

impl GlyphSource for ProceduralGlyphs {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        10
    }

    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Glyph> {
        let class = (index % 10) as u8;
        Ok(Glyph::canonical(self.render(class, rng), class))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn canonical_pads_28_to_32() {
        let g = Glyph::canonical(GrayImage::from_pixel(28, 28, image::Luma([9])), 3);
        assert_eq!(g.pixels.dimensions(), (32, 32));
        assert_eq!(g.pixels.get_pixel(0, 0).0[0], 0);
        assert_eq!(g.pixels.get_pixel(2, 2).0[0], 9);
        assert_eq!(g.pixels.get_pixel(29, 29).0[0], 9);
        assert_eq!(g.pixels.get_pixel(30, 30).0[0], 0);
    }

    #[test]
    fn every_family_draws_nonempty_balanced_glyphs() {
        for family in StrokeFamily::ALL {
            let src = ProceduralGlyphs::new(family);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for i in 0..20 {
                let g = src.draw(i, &mut rng).unwrap();
                assert_eq!(g.class_label as usize, i % 10);
                assert_eq!(g.pixels.dimensions(), (32, 32));
                let ink: u32 = g.pixels.as_raw().iter().map(|&v| u32::from(v)).sum();
                assert!(ink > 255 * 10, "{family} class {} too faint", g.class_label);
                // Padding border stays empty.
                assert_eq!(g.pixels.get_pixel(0, 0).0[0], 0);
            }
        }
    }

    #[test]
    fn families_differ_in_ink() {
        let ink = |f: StrokeFamily| -> u64 {
            let src = ProceduralGlyphs::new(f);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..10)
                .map(|i| {
                    let g = src.draw(i, &mut rng).unwrap();
                    g.pixels.as_raw().iter().map(|&v| u64::from(v)).sum::<u64>()
                })
                .sum()
        };
        assert!(ink(StrokeFamily::BoldItalic) > ink(StrokeFamily::ThinCondensed) * 3 / 2);
    }

    #[test]
    fn family_ids_parse() {
        for f in StrokeFamily::ALL {
            assert_eq!(f.id().parse::<StrokeFamily>().unwrap(), f);
        }
    }
}
