//! Synthetic multi-domain corpus generation.

pub mod background;
pub mod corpus;
pub mod glyph;
pub mod idx;
pub mod render;
pub mod shard;

pub use background::{BackgroundPatch, BackgroundSource, PatchSource};
pub use corpus::{
    build_corpus, glyph_source, render_domain, CorpusConfig, DatasetManifest, DomainEntry, DomainRequest, DomainSpec, Normalization,
    RenderedDomain, Scale, MANIFEST_FILE,
};
pub use glyph::{Glyph, GlyphSource, ProceduralGlyphs, StrokeFamily};
pub use render::{apply_mode, blend_abs_diff, gray_to_rgb, luma, RenderMode};
pub use shard::DomainShard;
