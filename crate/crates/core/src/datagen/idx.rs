//! Adapter for MNIST-format (IDX) glyph files.

use std::path::Path;

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::glyph::{Glyph, GlyphSource};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Vec<GrayImage>> {
    if be_u32(bytes, 0) != Some(IMAGES_MAGIC) {
        return Err(format_err(path, "not an IDX image file"));
    }
    let header = |i: usize| be_u32(bytes, 4 + 4 * i).ok_or_else(|| format_err(path, "truncated header"));
    let (n, rows, cols) = (header(0)? as usize, header(1)?, header(2)?);
    let plane = (rows * cols) as usize;
    let body = &bytes[16..];
    if body.len() < n * plane {
        return Err(format_err(
            path,
            format!("expected {} pixel bytes, found {}", n * plane, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(plane)
        .take(n)
        .map(|c| GrayImage::from_raw(cols, rows, c.to_vec()).expect("plane sized from header"))
        .collect())
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0) != Some(LABELS_MAGIC) {
        return Err(format_err(path, "not an IDX label file"));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| format_err(path, "truncated header"))? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_err(path, "truncated labels"));
    }
    Ok(body[..n].to_vec())
}

/// Glyphs loaded from an IDX image/label pair, sampled uniformly.
#[derive(Debug, Clone)]
pub struct IdxGlyphs {
    name: String,
    images: Vec<GrayImage>,
    labels: Vec<u8>,
    num_classes: usize,
}

impl IdxGlyphs {
    pub fn load(name: &str, images: &Path, labels: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
        let imgs = parse_idx_images(images, &read(images)?)?;
        let labs = parse_idx_labels(labels, &read(labels)?)?;
        Self::from_parts(name, imgs, labs)
    }

    pub fn from_parts(name: &str, images: Vec<GrayImage>, labels: Vec<u8>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config(format!("glyph source {name} is empty")));
        }
        if images.len() != labels.len() {
            return Err(Error::dim(images.len(), labels.len()));
        }
        let num_classes = usize::from(*labels.iter().max().expect("non-empty")) + 1;
        Ok(Self {
            name: name.to_string(),
            images,
            labels,
            num_classes,
        })
    }
}

impl GlyphSource for IdxGlyphs {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn draw(&self, _index: usize, rng: &mut ChaCha8Rng) -> Result<Glyph> {
        let i = rng.random_range(0..self.images.len());
        Ok(Glyph::canonical(self.images[i].clone(), self.labels[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i % 251) as u8));
        b
    }

    #[test]
    fn parses_and_pads_mnist_shaped_files() {
        let p = Path::new("mem");
        let imgs = parse_idx_images(p, &idx_images(3, 28, 28)).unwrap();
        assert_eq!(imgs.len(), 3);
        let mut labels = LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[4, 0, 9]);
        let labs = parse_idx_labels(p, &labels).unwrap();
        let src = IdxGlyphs::from_parts("mnist", imgs, labs).unwrap();
        assert_eq!(src.num_classes(), 10);
        let g = src.draw(0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.pixels.dimensions(), (32, 32));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(parse_idx_images(p, &[0, 0, 8, 1]).is_err());
        let mut b = idx_images(2, 4, 4);
        b.truncate(20);
        assert!(parse_idx_images(p, &b).is_err());
        assert!(IdxGlyphs::from_parts("x", vec![], vec![]).is_err());
    }
}
