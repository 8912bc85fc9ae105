//! Domain grid, manifest and corpus construction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::background::{BackgroundSource, PatchSource};
use super::glyph::{GlyphSource, ProceduralGlyphs, StrokeFamily, CANONICAL_SIZE};
use super::idx::IdxGlyphs;
use super::render::{apply_mode, blend_abs_diff, gray_to_rgb, RenderMode};
use super::shard::DomainShard;
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub foreground_set: String,
    pub background_source: Option<BackgroundSource>,
    pub mode: RenderMode,
    pub num_classes: usize,
}

impl DomainSpec {
    pub fn new(
        domain_id: u32,
        foreground_set: impl Into<String>,
        background_source: Option<BackgroundSource>,
        mode: RenderMode,
        num_classes: usize,
    ) -> Result<Self> {
        if mode.needs_background() != background_source.is_some() {
            return Err(Error::Config(format!(
                "mode {mode} {} a background source",
                if mode.needs_background() { "requires" } else { "forbids" }
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(Self {
            domain_id,
            foreground_set: foreground_set.into(),
            background_source,
            mode,
            num_classes,
        })
    }

    /// Short human label, e.g. `stroke-plain/texture-a/BB`.
    pub fn label(&self) -> String {
        match self.background_source {
            Some(bg) => format!("{}/{}/{}", self.foreground_set, bg, self.mode),
            None => format!("{}/{}", self.foreground_set, self.mode),
        }
    }
}

/// Per-channel statistics of pixel/255 over the whole corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    #[serde(flatten)]
    pub spec: DomainSpec,
    pub count: usize,
    /// Relative to the manifest directory.
    pub shard_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub domains: Vec<DomainEntry>,
    pub normalization: Normalization,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported manifest schema {}", self.schema_version)));
        }
        if self.domains.is_empty() {
            return Err(Error::Precondition("manifest has no domains".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.spec.domain_id as usize != i {
                return Err(Error::Precondition(format!(
                    "domain ids must be 0..N in order; position {i} holds {}",
                    d.spec.domain_id
                )));
            }
            if d.count == 0 {
                return Err(Error::Precondition(format!("domain {i} has no examples")));
            }
            if d.spec.mode.needs_background() != d.spec.background_source.is_some() {
                return Err(Error::Precondition(format!("domain {i}: mode/background mismatch")));
            }
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Largest class count over all domains.
    pub fn num_classes(&self) -> usize {
        self.domains.iter().map(|d| d.spec.num_classes).max().unwrap_or(0)
    }

    pub fn domain(&self, id: u32) -> Result<&DomainEntry> {
        self.domains
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("domain {id} not in manifest")))
    }

    pub fn shard_path(&self, id: u32) -> Result<PathBuf> {
        Ok(self.root.join(&self.domain(id)?.shard_path))
    }

    pub fn load_shard(&self, id: u32) -> Result<DomainShard> {
        DomainShard::load(&self.shard_path(id)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale {s:?}"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

/// One explicitly requested domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRequest {
    pub foreground_set: String,
    #[serde(default)]
    pub background_source: Option<BackgroundSource>,
    pub mode: RenderMode,
    #[serde(default)]
    pub count: Option<usize>,
}

/// Corpus generation settings. Unset fields take the defaults of the
/// requested [`Scale`].
///
/// Foreground sets are either a procedural family id (`stroke-plain`, ...)
/// or `idx:<name>:<images-path>:<labels-path>` for MNIST-format files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub schema_version: u32,
    pub foreground_sets: Option<Vec<String>>,
    pub background_sources: Vec<BackgroundSource>,
    pub modes: Vec<RenderMode>,
    pub count_per_domain: Option<usize>,
    /// Count for `Or` domains; defaults to half of `count_per_domain`.
    pub original_count: Option<usize>,
    /// Explicit domain list; replaces the grid when present.
    pub domains: Option<Vec<DomainRequest>>,
    pub mask_threshold: u8,
    pub write_png: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            foreground_sets: None,
            background_sources: BackgroundSource::ALL.to_vec(),
            modes: RenderMode::ALL.to_vec(),
            count_per_domain: None,
            original_count: None,
            domains: None,
            mask_threshold: 0,
            write_png: true,
        }
    }
}

impl CorpusConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn default_count(scale: Scale) -> usize {
        match scale {
            Scale::Desk => 500,
            Scale::Full => 40_000,
        }
    }

    pub fn foregrounds(&self, scale: Scale) -> Vec<String> {
        self.foreground_sets.clone().unwrap_or_else(|| {
            let n = match scale {
                Scale::Desk => 3,
                Scale::Full => 6,
            };
            StrokeFamily::ALL[..n].iter().map(|f| f.id().to_string()).collect()
        })
    }

    /// Expands the configuration into `(request, count)` pairs in domain-id order.
    pub fn domain_plan(&self, scale: Scale) -> Result<Vec<DomainRequest>> {
        let count = self.count_per_domain.unwrap_or_else(|| Self::default_count(scale));
        let or_count = self.original_count.unwrap_or(count.div_ceil(2));
        if count == 0 || or_count == 0 {
            return Err(Error::Config("domain counts must be positive".into()));
        }
        if let Some(domains) = &self.domains {
            if domains.is_empty() {
                return Err(Error::Config("explicit domain list is empty".into()));
            }
            return Ok(domains
                .iter()
                .map(|d| DomainRequest {
                    count: Some(d.count.unwrap_or(if d.mode.needs_background() { count } else { or_count })),
                    ..d.clone()
                })
                .collect());
        }
        let foregrounds = self.foregrounds(scale);
        if foregrounds.is_empty() {
            return Err(Error::Config("no foreground sets".into()));
        }
        let mut plan = Vec::new();
        for fg in &foregrounds {
            for &bg in &self.background_sources {
                for mode in RenderMode::BACKGROUNDED {
                    if self.modes.contains(&mode) {
                        plan.push(DomainRequest {
                            foreground_set: fg.clone(),
                            background_source: Some(bg),
                            mode,
                            count: Some(count),
                        });
                    }
                }
            }
            if self.modes.contains(&RenderMode::Original) {
                plan.push(DomainRequest {
                    foreground_set: fg.clone(),
                    background_source: None,
                    mode: RenderMode::Original,
                    count: Some(or_count),
                });
            }
        }
        Ok(plan)
    }
}

/// Resolves a foreground identifier to a glyph source.
pub fn glyph_source(id: &str) -> Result<Box<dyn GlyphSource>> {
    if let Some(rest) = id.strip_prefix("idx:") {
        let parts: Vec<&str> = rest.splitn(3, ':').collect();
        let [name, images, labels] = parts[..] else {
            return Err(Error::Config(format!(
                "idx foreground must be idx:<name>:<images>:<labels>, got {id:?}"
            )));
        };
        return Ok(Box::new(IdxGlyphs::load(name, Path::new(images), Path::new(labels))?));
    }
    Ok(Box::new(ProceduralGlyphs::new(id.parse()?)))
}

#[derive(Debug, Clone)]
pub struct RenderedDomain {
    pub domain_id: u32,
    pub images: Vec<RgbImage>,
    pub labels: Vec<u8>,
}

impl RenderedDomain {
    pub fn to_shard(&self, num_classes: usize) -> DomainShard {
        let mut pixels = Vec::with_capacity(self.images.len() * 32 * 32 * 3);
        for img in &self.images {
            pixels.extend_from_slice(img.as_raw());
        }
        DomainShard {
            domain_id: self.domain_id,
            height: CANONICAL_SIZE as u16,
            width: CANONICAL_SIZE as u16,
            channels: 3,
            num_classes: num_classes as u8,
            labels: self.labels.clone(),
            pixels,
        }
    }
}

/// Renders `count` labelled images for one domain. Pure in `(spec, sources, count, seed)`.
pub fn render_domain(
    spec: &DomainSpec,
    glyphs: &dyn GlyphSource,
    patches: Option<&PatchSource>,
    count: usize,
    seed: u64,
    mask_threshold: u8,
) -> Result<RenderedDomain> {
    if count == 0 {
        return Err(Error::Precondition("count must be positive".into()));
    }
    let patches = match (spec.background_source, patches) {
        (Some(bg), Some(p)) if p.source() == bg => Some(p),
        (Some(bg), _) => {
            return Err(Error::Config(format!("domain needs background source {bg}")));
        }
        (None, _) => None,
    };
    let mut rng = seed::rng(seed, seed::stream::DOMAIN_RENDER);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let glyph = glyphs.draw(i, &mut rng)?;
        let fg = gray_to_rgb(&glyph.pixels);
        let out = match patches {
            Some(p) => {
                let bg = p.crop(&mut rng);
                let blended = blend_abs_diff(&fg, &bg.pixels)?;
                apply_mode(&blended, &glyph.pixels, spec.mode, &fg, mask_threshold)?
            }
            None => fg,
        };
        images.push(out);
        labels.push(glyph.class_label);
    }
    Ok(RenderedDomain {
        domain_id: spec.domain_id,
        images,
        labels,
    })
}

fn png_path(dir: &Path, index: usize, label: u8) -> PathBuf {
    dir.join(format!("{index:06}_{label}.png"))
}

/// Renders every domain of the configuration into `out_dir` and writes the manifest.
pub fn build_corpus(config: &CorpusConfig, scale: Scale, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let plan = config.domain_plan(scale)?;
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(&out_dir.join("shards"))?;

    let mut glyph_cache: BTreeMap<String, Box<dyn GlyphSource>> = BTreeMap::new();
    let mut patch_cache: BTreeMap<BackgroundSource, PatchSource> = BTreeMap::new();
    let mut sums = [0f64; 3];
    let mut sq_sums = [0f64; 3];
    let mut n_px = 0u64;
    let mut domains = Vec::with_capacity(plan.len());

    for (id, req) in plan.iter().enumerate() {
        if !glyph_cache.contains_key(&req.foreground_set) {
            glyph_cache.insert(req.foreground_set.clone(), glyph_source(&req.foreground_set)?);
        }
        let glyphs = glyph_cache[&req.foreground_set].as_ref();
        if let Some(bg) = req.background_source {
            patch_cache.entry(bg).or_insert_with(|| PatchSource::new(bg, seed));
        }
        let spec = DomainSpec::new(
            id as u32,
            req.foreground_set.clone(),
            req.background_source,
            req.mode,
            glyphs.num_classes(),
        )?;
        let count = req.count.expect("plan fills counts");
        let patches = req.background_source.map(|bg| &patch_cache[&bg]);
        let rendered = render_domain(
            &spec,
            glyphs,
            patches,
            count,
            seed::mix(seed, u64::from(spec.domain_id)),
            config.mask_threshold,
        )?;
        log::info!("rendered domain {id} ({}) x{count}", spec.label());

        for img in &rendered.images {
            for px in img.pixels() {
                for c in 0..3 {
                    let v = f64::from(px.0[c]) / 255.0;
                    sums[c] += v;
                    sq_sums[c] += v * v;
                }
            }
            n_px += u64::from(img.width() * img.height());
        }

        let shard_rel = PathBuf::from("shards").join(format!("domain_{id:03}.bin"));
        rendered.to_shard(spec.num_classes).save(&out_dir.join(&shard_rel))?;
        let png_dir = if config.write_png {
            let rel = PathBuf::from("images").join(format!("domain_{id:03}"));
            let dir = out_dir.join(&rel);
            mk(&dir)?;
            for (i, img) in rendered.images.iter().enumerate() {
                img.save(png_path(&dir, i, rendered.labels[i]))?;
            }
            Some(rel)
        } else {
            None
        };
        domains.push(DomainEntry {
            spec,
            count,
            shard_path: shard_rel,
            png_dir,
        });
    }

    let n = n_px as f64;
    let mut normalization = Normalization::default();
    for c in 0..3 {
        let mean = sums[c] / n;
        let var = (sq_sums[c] / n - mean * mean).max(1e-8);
        normalization.mean[c] = mean as f32;
        normalization.std[c] = var.sqrt() as f32;
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        domains,
        normalization,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fnv(bytes: &[u8]) -> u64 {
        bytes
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }

    #[test]
    fn spec_enforces_background_rule() {
        assert!(DomainSpec::new(0, "stroke-plain", None, RenderMode::Color, 10).is_err());
        assert!(DomainSpec::new(0, "stroke-plain", Some(BackgroundSource::TextureA), RenderMode::Original, 10).is_err());
        assert!(DomainSpec::new(0, "stroke-plain", None, RenderMode::Original, 10).is_ok());
    }

    #[test]
    fn grid_cardinality_is_nine_per_foreground() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.domain_plan(Scale::Desk).unwrap().len(), 27);
        assert_eq!(cfg.domain_plan(Scale::Full).unwrap().len(), 54);
        let plan = cfg.domain_plan(Scale::Full).unwrap();
        assert_eq!(plan[0].count, Some(40_000));
        assert_eq!(plan[8].mode, RenderMode::Original);
        assert_eq!(plan[8].count, Some(20_000));
    }

    #[test]
    fn render_is_deterministic_and_labelled() {
        let spec = DomainSpec::new(4, "stroke-plain", Some(BackgroundSource::TextureB), RenderMode::Color, 10).unwrap();
        let glyphs = ProceduralGlyphs::new(StrokeFamily::Plain);
        let patches = PatchSource::new(BackgroundSource::TextureB, 1);
        let a = render_domain(&spec, &glyphs, Some(&patches), 1, 42, 0).unwrap();
        let b = render_domain(&spec, &glyphs, Some(&patches), 1, 42, 0).unwrap();
        assert_eq!(fnv(a.images[0].as_raw()), fnv(b.images[0].as_raw()));
        assert_eq!(a.domain_id, 4);
        let c = render_domain(&spec, &glyphs, Some(&patches), 1, 43, 0).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn render_rejects_missing_background_and_zero_count() {
        let spec = DomainSpec::new(0, "stroke-plain", Some(BackgroundSource::TextureA), RenderMode::Color, 10).unwrap();
        let glyphs = ProceduralGlyphs::new(StrokeFamily::Plain);
        assert!(render_domain(&spec, &glyphs, None, 3, 0, 0).is_err());
        let patches = PatchSource::new(BackgroundSource::TextureA, 1);
        assert!(render_domain(&spec, &glyphs, Some(&patches), 0, 0, 0).is_err());
    }

    #[test]
    fn corpus_round_trips_and_is_byte_identical() {
        let cfg = CorpusConfig {
            foreground_sets: Some(vec!["stroke-plain".into()]),
            count_per_domain: Some(6),
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_corpus(&cfg, Scale::Desk, 9, d1.path()).unwrap();
        let m2 = build_corpus(&cfg, Scale::Desk, 9, d2.path()).unwrap();
        assert_eq!(m1.num_domains(), 9);
        assert_eq!(m1.domains[8].count, 3);
        let loaded = DatasetManifest::load(&d1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m1);
        assert_eq!(m1.to_json(), m2.to_json());
        for id in 0..9 {
            let a = std::fs::read(m1.shard_path(id).unwrap()).unwrap();
            let b = std::fs::read(m2.shard_path(id).unwrap()).unwrap();
            assert_eq!(a, b);
        }
        let png = d1.path().join("images/domain_000/000000_0.png");
        assert!(png.exists());
    }

    #[test]
    fn manifest_validation_catches_gaps() {
        let mut m = DatasetManifest {
            schema_version: 1,
            seed: 0,
            domains: vec![DomainEntry {
                spec: DomainSpec::new(1, "stroke-plain", None, RenderMode::Original, 10).unwrap(),
                count: 3,
                shard_path: "x".into(),
                png_dir: None,
            }],
            normalization: Normalization::default(),
            root: PathBuf::new(),
        };
        assert!(m.validate().is_err());
        m.domains[0].spec.domain_id = 0;
        assert!(m.validate().is_ok());
        m.domains[0].count = 0;
        assert!(m.validate().is_err());
    }
}
