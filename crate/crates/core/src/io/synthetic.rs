//! Synthetic shapes dataset.
//!
//! Each class is a (shape, color family) pair. Foreground colors of the two
//! families are drawn at the same luma, so two classes sharing a shape
//! differ only in hue and cannot be told apart after grayscale conversion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::image::{hsv_to_rgb, luma};
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::io::dataset::Dataset;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    TriangleUp,
    HBar,
    VBar,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::TriangleUp, Shape::HBar, Shape::VBar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::TriangleUp => "triangle_up",
            Shape::HBar => "hbar",
            Shape::VBar => "vbar",
        }
    }

    /// Point test in shape-local coordinates, `u, v ∈ [-1, 1]`, `v` down.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::TriangleUp => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8 * 0.95,
            Shape::HBar => u.abs() <= 1.0 && v.abs() <= 0.35,
            Shape::VBar => u.abs() <= 0.35 && v.abs() <= 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorFamily {
    Warm,
    Cool,
}

impl ColorFamily {
    pub fn name(self) -> &'static str {
        match self {
            ColorFamily::Warm => "warm",
            ColorFamily::Cool => "cool",
        }
    }

    /// Hue range in turns.
    fn hue_range(self) -> (f32, f32) {
        match self {
            ColorFamily::Warm => (0.95, 1.12),
            ColorFamily::Cool => (0.45, 0.62),
        }
    }
}

/// Largest supported class count: every shape in both families.
pub const MAX_CLASSES: usize = 10;

/// Class `k` is shape `k / 2` in family `k % 2`, so classes `2j` and
/// `2j + 1` form a color-critical pair.
pub fn class_def(class: usize) -> (Shape, ColorFamily) {
    let family = if class.is_multiple_of(2) { ColorFamily::Warm } else { ColorFamily::Cool };
    (Shape::ALL[class / 2], family)
}

/// Two classes are color-critical when they share a shape and differ only
/// in color family.
pub fn color_critical(a: usize, b: usize) -> bool {
    let (sa, fa) = class_def(a);
    let (sb, fb) = class_def(b);
    sa == sb && fa != fb
}

/// Manifest CSV: one row per unordered class pair.
pub fn manifest_csv(classes: usize) -> String {
    let mut out = String::from("class_a,class_b,shape_a,shape_b,family_a,family_b,color_critical\n");
    for a in 0..classes {
        for b in a + 1..classes {
            let (sa, fa) = class_def(a);
            let (sb, fb) = class_def(b);
            let _ = writeln!(
                out,
                "{a},{b},{},{},{},{},{}",
                sa.name(),
                sb.name(),
                fa.name(),
                fb.name(),
                color_critical(a, b) as u8
            );
        }
    }
    out
}

/// RGB at luma `l` with hue `hue`; the chroma offset has zero luma, and the
/// saturation factor `sat` scales it within the largest in-gamut extent.
pub fn color_at_luma(hue: f32, l: f32, sat: f32) -> [f32; 3] {
    let pure = hsv_to_rgb(hue.rem_euclid(1.0), 1.0, 1.0);
    let pl = luma(pure);
    let dir = pure.map(|c| c - pl);
    let mut k = f32::INFINITY;
    for d in dir {
        if d > 0.0 {
            k = k.min((1.0 - l) / d);
        } else if d < 0.0 {
            k = k.min(l / -d);
        }
    }
    let k = if k.is_finite() { k * sat } else { 0.0 };
    dir.map(|d| (l + k * d).clamp(0.0, 1.0))
}

/// Renders one image of `class` from `rng`.
pub fn render(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let (shape, family) = class_def(class);
    let fg_luma = rng.random_range(0.45..0.6);
    let bg_luma = if rng.random_bool(0.5) { rng.random_range(0.08..0.22) } else { rng.random_range(0.83..0.95) };
    let (h0, h1) = family.hue_range();
    let fg = color_at_luma(rng.random_range(h0..h1), fg_luma, rng.random_range(0.7..1.0));
    let bg = [bg_luma; 3];
    let s = size as f32;
    let radius = s * rng.random_range(0.22..0.34);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let noise = 0.03;
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampled coverage
            let mut cov = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let u = (x as f32 + ox - cx) / radius;
                let v = (y as f32 + oy - cy) / radius;
                if shape.contains(u, v) {
                    cov += 0.25;
                }
            }
            let jitter = rng.random_range(-noise..noise);
            let i = y * size + x;
            for c in 0..3 {
                data[c * n + i] = (bg[c] * (1.0 - cov) + fg[c] * cov + jitter).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(size, size, data)
}

/// `n` images, labels balanced as `i mod classes` and then shuffled.
pub fn generate_synthetic(n: usize, classes: usize, seed: u64, size: usize) -> Result<Dataset> {
    if classes == 0 || classes > MAX_CLASSES {
        return Err(Error::InvalidConfig(format!("classes must be in 1..={MAX_CLASSES}, got {classes}")));
    }
    if n < classes {
        return Err(Error::InvalidConfig(format!("n = {n} is below the class count {classes}")));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!("image size {size} is below 8")));
    }
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5eed])));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            // Quantize now so the in-memory set equals what a file round trip gives.
            let img = render(l as usize, size, &mut rng);
            let data = img.data().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
            Image::new(size, size, data)
        })
        .collect();
    Ok(Dataset { height: size, width: size, labels, images })
}

/// Writes the dataset to `path` and the class-pair manifest next to it
/// (`<path>.manifest.csv`).
pub fn write_synthetic(path: impl AsRef<Path>, dataset: &Dataset, classes: usize) -> Result<()> {
    let path = path.as_ref();
    crate::io::dataset::save_dataset(path, dataset)?;
    let manifest = manifest_path(path);
    fs::write(&manifest, manifest_csv(classes)).map_err(|e| Error::io(&manifest, e))
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.csv");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_colors_share_luma() {
        for hue in [0.0, 0.05, 0.5, 0.6] {
            for l in [0.45, 0.55] {
                let c = color_at_luma(hue, l, 1.0);
                assert!((luma(c) - l).abs() < 1e-5, "{hue} {l} {c:?}");
            }
        }
    }

    #[test]
    fn pairs_are_flagged() {
        assert!(color_critical(0, 1));
        assert!(color_critical(8, 9));
        assert!(!color_critical(1, 2));
        assert!(!color_critical(0, 2));
    }
}
