//! Packed per-domain image container.
//!
//! Layout (little endian):
//! `b"D2VSHRD1"`, domain_id u32, count u32, height u16, width u16,
//! channels u8, num_classes u8, 2 reserved bytes, `count` label bytes,
//! then `count * height * width * channels` pixel bytes in HWC order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"D2VSHRD1";
const HEADER_LEN: usize = 8 + 4 + 4 + 2 + 2 + 1 + 1 + 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainShard {
    pub domain_id: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub num_classes: u8,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl DomainShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        usize::from(self.height) * usize::from(self.width) * usize::from(self.channels)
    }

    /// HWC bytes of the `i`-th image.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len() + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.domain_id.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.channels);
        out.push(self.num_classes);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.labels);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a domain shard"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
        let domain_id = u32_at(8);
        let count = u32_at(12) as usize;
        let (height, width) = (u16_at(16), u16_at(18));
        let (channels, num_classes) = (bytes[20], bytes[21]);
        let plane = usize::from(height) * usize::from(width) * usize::from(channels);
        let body = &bytes[HEADER_LEN..];
        if body.len() != count + count * plane {
            return Err(bad("payload length does not match header"));
        }
        Ok(Self {
            domain_id,
            height,
            width,
            channels,
            num_classes,
            labels: body[..count].to_vec(),
            pixels: body[count..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
