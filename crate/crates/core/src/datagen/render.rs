use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Post-processing applied to a blended image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RenderMode {
    /// Blend on the glyph mask, black elsewhere.
    #[serde(rename = "BB")]
    BlackBackground,
    /// Blend on the glyph mask, white elsewhere.
    #[serde(rename = "WB")]
    WhiteBackground,
    /// Luma of the blend, replicated to three channels.
    #[serde(rename = "GS")]
    Grayscale,
    /// The blend itself.
    #[serde(rename = "Cr")]
    Color,
    /// The glyph alone, no background.
    #[serde(rename = "Or")]
    Original,
}

impl RenderMode {
    pub const ALL: [RenderMode; 5] = [
        RenderMode::BlackBackground,
        RenderMode::WhiteBackground,
        RenderMode::Grayscale,
        RenderMode::Color,
        RenderMode::Original,
    ];

    /// Modes that composite the glyph over a background patch, in grid order.
    pub const BACKGROUNDED: [RenderMode; 4] = [
        RenderMode::BlackBackground,
        RenderMode::WhiteBackground,
        RenderMode::Color,
        RenderMode::Grayscale,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RenderMode::BlackBackground => "BB",
            RenderMode::WhiteBackground => "WB",
            RenderMode::Grayscale => "GS",
            RenderMode::Color => "Cr",
            RenderMode::Original => "Or",
        }
    }

    pub fn needs_background(self) -> bool {
        self != RenderMode::Original
    }
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RenderMode::ALL
            .into_iter()
            .find(|m| m.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown render mode {s:?}")))
    }
}

fn check_same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dim(format!("{:?}", a.dimensions()), format!("{:?}", b.dimensions())));
    }
    Ok(())
}

/// Per-channel absolute difference `|fg - bg|`.
pub fn blend_abs_diff(fg: &RgbImage, bg: &RgbImage) -> Result<RgbImage> {
    check_same_shape(fg, bg)?;
    let data = fg.as_raw().iter().zip(bg.as_raw()).map(|(&a, &b)| a.abs_diff(b)).collect();
    Ok(RgbImage::from_raw(fg.width(), fg.height(), data).expect("buffer sized from input"))
}

/// BT.601 luma, rounded half up. Integer weights keep ties exact.
pub fn luma(px: Rgb<u8>) -> u8 {
    let [r, g, b] = px.0.map(u32::from);
    ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
}

/// Glyph broadcast to three identical channels.
pub fn gray_to_rgb(glyph: &GrayImage) -> RgbImage {
    RgbImage::from_fn(glyph.width(), glyph.height(), |x, y| {
        let v = glyph.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    })
}

/// Applies a render mode to a blended image.
///
/// The foreground mask is `glyph > mask_threshold`. `fg_original` is the
/// glyph as a three-channel image and is returned verbatim for `Or`.
pub fn apply_mode(blended: &RgbImage, glyph: &GrayImage, mode: RenderMode, fg_original: &RgbImage, mask_threshold: u8) -> Result<RgbImage> {
    check_same_shape(blended, fg_original)?;
    if glyph.dimensions() != blended.dimensions() {
        return Err(Error::dim(
            format!("{:?}", blended.dimensions()),
            format!("{:?}", glyph.dimensions()),
        ));
    }
    let masked = |fill: u8| {
        RgbImage::from_fn(blended.width(), blended.height(), |x, y| {
            if glyph.get_pixel(x, y).0[0] > mask_threshold {
                *blended.get_pixel(x, y)
            } else {
                Rgb([fill; 3])
            }
        })
    };
    Ok(match mode {
        RenderMode::Color => blended.clone(),
        RenderMode::Grayscale => RgbImage::from_fn(blended.width(), blended.height(), |x, y| {
            let v = luma(*blended.get_pixel(x, y));
            Rgb([v, v, v])
        }),
        RenderMode::BlackBackground => masked(0),
        RenderMode::WhiteBackground => masked(255),
        RenderMode::Original => fg_original.clone(),
    })
}
