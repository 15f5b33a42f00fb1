use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Augmentation types. `CropResize` is the base step present in every pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugKind {
    CropResize,
    ColorJitter,
    Grayscale,
    Blur,
    HFlip,
    Rotation,
}

impl AugKind {
    /// The four kinds an arrangement permutes.
    pub const ARRANGEABLE: [AugKind; 4] = [AugKind::ColorJitter, AugKind::Grayscale, AugKind::Blur, AugKind::HFlip];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::CropResize => "crop_resize",
            AugKind::ColorJitter => "color_jitter",
            AugKind::Grayscale => "grayscale",
            AugKind::Blur => "blur",
            AugKind::HFlip => "hflip",
            AugKind::Rotation => "rotation",
        }
    }

    /// Single-letter code used in arrangements (`C`, `G`, `B`, `F`).
    pub fn code(self) -> char {
        match self {
            AugKind::CropResize => 'K',
            AugKind::ColorJitter => 'C',
            AugKind::Grayscale => 'G',
            AugKind::Blur => 'B',
            AugKind::HFlip => 'F',
            AugKind::Rotation => 'R',
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "k" | "crop" | "crop_resize" => AugKind::CropResize,
            "c" | "color" | "color_jitter" | "jitter" => AugKind::ColorJitter,
            "g" | "gray" | "grayscale" => AugKind::Grayscale,
            "b" | "blur" => AugKind::Blur,
            "f" | "flip" | "hflip" => AugKind::HFlip,
            "r" | "rot" | "rotation" => AugKind::Rotation,
            other => return Err(Error::Pipeline(format!("unknown augmentation kind `{other}`"))),
        };
        Ok(kind)
    }
}

/// Crop box as fractions of the source extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub x: f32,
    pub y: f32,
    pub h: f32,
    pub w: f32,
}

impl CropParams {
    pub const FULL: CropParams = CropParams { x: 0.0, y: 0.0, h: 1.0, w: 1.0 };

    pub fn to_vec(self) -> [f32; 4] {
        [self.x, self.y, self.h, self.w]
    }

    pub fn is_valid(self) -> bool {
        let ok = |o: f32, e: f32| o >= 0.0 && e > 0.0 && o + e <= 1.0 + 1e-6;
        ok(self.x, self.w) && ok(self.y, self.h)
    }
}

/// Color-jitter factors `[b, c, s, h]` plus the order the sub-ops ran in
/// (indices into `[b, c, s, h]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub order: [u8; 4],
}

impl ColorJitterParams {
    pub const IDENTITY: ColorJitterParams =
        ColorJitterParams { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0, order: [0, 1, 2, 3] };

    pub fn to_vec(self) -> [f32; 4] {
        [self.brightness, self.contrast, self.saturation, self.hue]
    }
}

/// Everything sampled for one view, sufficient to re-apply the transform.
///
/// A field is `None` when its kind is not part of the pipeline that produced
/// the view; a kind that is present but did not fire records its identity
/// value.
#[derive(Clone, Debug, PartialEq)]
pub struct AugParams {
    /// Steps in application order.
    pub order: Vec<AugKind>,
    pub crop: CropParams,
    pub flip: Option<bool>,
    pub jitter: Option<ColorJitterParams>,
    pub grayscale: Option<bool>,
    pub blur_sigma: Option<f32>,
    pub rotation_quarter_turns: Option<u8>,
}

/// Length of [`AugParams::to_flat`].
pub const FLAT_LEN: usize = 12;

/// Column names of [`AugParams::to_flat`].
pub const FLAT_LAYOUT: [&str; FLAT_LEN] = ["x", "y", "h", "w", "flip", "b", "c", "s", "hue", "gray", "sigma", "rot"];

impl AugParams {
    pub fn identity() -> Self {
        Self {
            order: vec![AugKind::CropResize],
            crop: CropParams::FULL,
            flip: None,
            jitter: None,
            grayscale: None,
            blur_sigma: None,
            rotation_quarter_turns: None,
        }
    }

    pub fn contains(&self, kind: AugKind) -> bool {
        self.order.contains(&kind)
    }

    /// `x, y, h, w, flip, b, c, s, hue, gray, sigma, rot`, identity values
    /// standing in for absent fields.
    pub fn to_flat(&self) -> [f32; FLAT_LEN] {
        let j = self.jitter.unwrap_or(ColorJitterParams::IDENTITY);
        let flag = |b: Option<bool>| if b.unwrap_or(false) { 1.0 } else { 0.0 };
        [
            self.crop.x,
            self.crop.y,
            self.crop.h,
            self.crop.w,
            flag(self.flip),
            j.brightness,
            j.contrast,
            j.saturation,
            j.hue,
            flag(self.grayscale),
            self.blur_sigma.unwrap_or(0.0),
            self.rotation_quarter_turns.unwrap_or(0) as f32,
        ]
    }
}
