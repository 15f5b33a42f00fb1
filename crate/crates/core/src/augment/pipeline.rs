//! Add-one pipeline construction and seeded view sampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::params::{AugKind, AugParams, ColorJitterParams, CropParams};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// How the four stage pipelines relate to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PipelineMode {
    /// Stage `i` applies the base step plus the first `i` arranged kinds.
    Hierarchical,
    /// Every stage applies every kind.
    Uniform,
    /// Every stage applies every kind, with magnitudes scaled by `i / 4`.
    HierarchicalStrength,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::Hierarchical => "hierarchical",
            PipelineMode::Uniform => "uniform",
            PipelineMode::HierarchicalStrength => "hierarchical_strength",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "hierarchical" => Ok(PipelineMode::Hierarchical),
            "uniform" => Ok(PipelineMode::Uniform),
            "hierarchical_strength" => Ok(PipelineMode::HierarchicalStrength),
            other => Err(Error::Pipeline(format!("unknown pipeline mode `{other}`"))),
        }
    }
}

/// Magnitudes and probabilities shared by every pipeline of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSettings {
    /// Side of the square output view.
    pub out_size: usize,
    /// Area fraction range of the random crop.
    pub crop_scale: (f32, f32),
    /// Aspect-ratio range of the random crop.
    pub crop_ratio: (f32, f32),
    pub jitter_prob: f32,
    /// Maximum deviation of `[b, c, s, h]` from identity.
    pub jitter_max: [f32; 4],
    pub gray_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
    pub flip_prob: f32,
    pub rotation_prob: f32,
}

impl Default for AugSettings {
    fn default() -> Self {
        Self {
            out_size: 32,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter_prob: 0.8,
            jitter_max: [0.4, 0.4, 0.4, 0.1],
            gray_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
            rotation_prob: 0.5,
        }
    }
}

impl AugSettings {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
            ("blur_prob", self.blur_prob),
            ("flip_prob", self.flip_prob),
            ("rotation_prob", self.rotation_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Pipeline(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Pipeline(format!("crop scale range ({lo}, {hi}) is degenerate")));
        }
        let (lo, hi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Pipeline(format!("crop ratio range ({lo}, {hi}) is degenerate")));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Pipeline(format!("blur sigma range ({lo}, {hi}) is degenerate")));
        }
        if self.jitter_max.iter().any(|&m| m <= 0.0) || self.jitter_max[..3].iter().any(|&m| m >= 1.0) {
            return Err(Error::Pipeline(format!(
                "jitter maxima {:?} must be positive, with b/c/s below 1",
                self.jitter_max
            )));
        }
        if self.jitter_max[3] > 0.5 {
            return Err(Error::Pipeline("hue shift maximum exceeds half a turn".into()));
        }
        if self.out_size < 2 {
            return Err(Error::Pipeline("output size must be at least 2".into()));
        }
        Ok(())
    }

    fn base_prob(&self, kind: AugKind) -> f32 {
        match kind {
            AugKind::CropResize => 1.0,
            AugKind::ColorJitter => self.jitter_prob,
            AugKind::Grayscale => self.gray_prob,
            AugKind::Blur => self.blur_prob,
            AugKind::HFlip => self.flip_prob,
            AugKind::Rotation => self.rotation_prob,
        }
    }
}

/// One step of a pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugStepSpec {
    pub kind: AugKind,
    pub probability: f32,
    /// Multiplier in `(0, 1]` applied to the magnitude ranges of
    /// [`AugSettings`].
    pub strength: f32,
}

/// One composition `T_i`: steps in application order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub stage: usize,
    pub steps: Vec<AugStepSpec>,
}

impl Pipeline {
    pub fn kinds(&self) -> Vec<AugKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }

    pub fn contains(&self, kind: AugKind) -> bool {
        self.steps.iter().any(|s| s.kind == kind)
    }
}

/// The four stage pipelines of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSet {
    pub arrangement: [AugKind; 4],
    pub mode: PipelineMode,
    pub rotation_from_stage: Option<usize>,
    pub settings: AugSettings,
    stages: [Pipeline; 4],
}

/// Parses an arrangement such as `C,G,B,F`, `CGBF` or
/// `color_jitter,grayscale,blur,hflip`.
pub fn parse_arrangement(s: &str) -> Result<[AugKind; 4]> {
    let s = s.trim();
    let kinds = if !s.contains(',') && s.len() == 4 && s.is_ascii() {
        s.chars().map(|c| c.to_string().parse()).collect::<Result<Vec<AugKind>>>()?
    } else {
        s.split(',').map(str::parse).collect::<Result<Vec<AugKind>>>()?
    };
    <[AugKind; 4]>::try_from(kinds)
        .map_err(|k| Error::Pipeline(format!("arrangement needs four kinds, got {}", k.len())))
}

pub fn arrangement_code(arrangement: &[AugKind; 4]) -> String {
    arrangement.iter().map(|k| k.code()).collect()
}

/// Builds `T_1 … T_4` for an arrangement of the four non-base kinds.
pub fn build_pipelines(
    arrangement: [AugKind; 4],
    mode: PipelineMode,
    rotation_from_stage: Option<usize>,
    settings: AugSettings,
) -> Result<PipelineSet> {
    settings.validate()?;
    for (i, k) in arrangement.iter().enumerate() {
        if !AugKind::ARRANGEABLE.contains(k) {
            return Err(Error::Pipeline(format!("{k} cannot be arranged; expected one of C, G, B, F")));
        }
        if arrangement[..i].contains(k) {
            return Err(Error::Pipeline(format!("{k} appears more than once in the arrangement")));
        }
    }
    if let Some(r) = rotation_from_stage {
        if !(1..=4).contains(&r) {
            return Err(Error::Pipeline(format!("rotation_from_stage {r} is outside 1..=4")));
        }
    }
    let stages = std::array::from_fn(|idx| {
        let stage = idx + 1;
        let strength = match mode {
            PipelineMode::HierarchicalStrength => stage as f32 / 4.0,
            _ => 1.0,
        };
        let step = |kind: AugKind| {
            let mut probability = settings.base_prob(kind);
            // Flip and grayscale have no magnitude; their strength is their rate.
            if matches!(kind, AugKind::HFlip | AugKind::Grayscale) {
                probability *= strength;
            }
            AugStepSpec { kind, probability, strength }
        };
        let mut steps = vec![step(AugKind::CropResize)];
        if rotation_from_stage.is_some_and(|r| stage >= r) {
            steps.push(AugStepSpec { kind: AugKind::Rotation, probability: settings.rotation_prob, strength: 1.0 });
        }
        let added = match mode {
            PipelineMode::Hierarchical => stage,
            PipelineMode::Uniform | PipelineMode::HierarchicalStrength => 4,
        };
        steps.extend(arrangement[..added].iter().map(|&k| step(k)));
        Pipeline { stage, steps }
    });
    Ok(PipelineSet { arrangement, mode, rotation_from_stage, settings, stages })
}

/// One positive pair with the parameters of both views.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view: Image,
    pub params: AugParams,
    pub view_prime: Image,
    pub params_prime: AugParams,
}

impl PipelineSet {
    /// `T_stage`, 1-based.
    pub fn stage(&self, stage: usize) -> &Pipeline {
        &self.stages[stage - 1]
    }

    pub fn stages(&self) -> &[Pipeline; 4] {
        &self.stages
    }

    /// Whether `kind` takes part in `T_stage`.
    pub fn stage_has(&self, stage: usize, kind: AugKind) -> bool {
        self.stage(stage).contains(kind)
    }

    /// Draws two independent instances of every `T_i` for one image.
    pub fn generate_pairs(&self, image: &Image, seed: u64) -> [ViewPair; 4] {
        std::array::from_fn(|idx| {
            let pipeline = &self.stages[idx];
            let (view, params) = sample_view(image, pipeline, &self.settings, derive_seed(&[seed, idx as u64, 0]));
            let (view_prime, params_prime) =
                sample_view(image, pipeline, &self.settings, derive_seed(&[seed, idx as u64, 1]));
            ViewPair { view, params, view_prime, params_prime }
        })
    }
}

/// Samples parameters for `pipeline` and applies them.
pub fn sample_view(image: &Image, pipeline: &Pipeline, settings: &AugSettings, seed: u64) -> (Image, AugParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(pipeline, settings, image.height(), image.width(), &mut rng);
    (apply_params(image, &params, settings.out_size), params)
}

pub fn sample_params(
    pipeline: &Pipeline,
    settings: &AugSettings,
    src_h: usize,
    src_w: usize,
    rng: &mut impl Rng,
) -> AugParams {
    let mut params = AugParams::identity();
    params.order = pipeline.kinds();
    for step in &pipeline.steps {
        let fires = step.probability > 0.0 && rng.random::<f32>() < step.probability;
        let s = step.strength;
        match step.kind {
            AugKind::CropResize => {
                let (lo, hi) = settings.crop_scale;
                let lo = 1.0 - (1.0 - lo) * s;
                params.crop = sample_crop(rng, src_h, src_w, (lo, hi.max(lo)), settings.crop_ratio);
            }
            AugKind::Rotation => {
                params.rotation_quarter_turns = Some(if fires { rng.random_range(1..=3) } else { 0 });
            }
            AugKind::ColorJitter => {
                let jitter = if fires {
                    let m = settings.jitter_max;
                    let mut order = [0u8, 1, 2, 3];
                    let b = rng.random_range(1.0 - m[0] * s..=1.0 + m[0] * s);
                    let c = rng.random_range(1.0 - m[1] * s..=1.0 + m[1] * s);
                    let sat = rng.random_range(1.0 - m[2] * s..=1.0 + m[2] * s);
                    let h = rng.random_range(-m[3] * s..=m[3] * s);
                    order.shuffle(rng);
                    ColorJitterParams { brightness: b, contrast: c, saturation: sat, hue: h, order }
                } else {
                    ColorJitterParams::IDENTITY
                };
                params.jitter = Some(jitter);
            }
            AugKind::Grayscale => params.grayscale = Some(fires),
            AugKind::Blur => {
                let (lo, hi) = settings.blur_sigma;
                let hi = lo + (hi - lo) * s;
                params.blur_sigma = Some(if fires { rng.random_range(lo..=hi) } else { 0.0 });
            }
            AugKind::HFlip => params.flip = Some(fires),
        }
    }
    params
}

/// Random-resized-crop box: ten rejection attempts, then a centered fallback.
fn sample_crop(rng: &mut impl Rng, h: usize, w: usize, scale: (f32, f32), ratio: (f32, f32)) -> CropParams {
    let (hf, wf) = (h as f32, w as f32);
    let area = hf * wf;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let bw = (target * aspect).sqrt();
        let bh = (target / aspect).sqrt();
        if bw <= wf && bh <= hf {
            let top = rng.random_range(0.0..=hf - bh);
            let left = rng.random_range(0.0..=wf - bw);
            return CropParams { x: left / wf, y: top / hf, h: bh / hf, w: bw / wf };
        }
    }
    let in_ratio = wf / hf;
    let (bw, bh) = if in_ratio < ratio.0 {
        (wf, wf / ratio.0)
    } else if in_ratio > ratio.1 {
        (hf * ratio.1, hf)
    } else {
        (wf, hf)
    };
    CropParams { x: (wf - bw) / 2.0 / wf, y: (hf - bh) / 2.0 / hf, h: bh / hf, w: bw / wf }
}

/// Re-applies recorded parameters. Pure: the same inputs always give the
/// same view.
pub fn apply_params(image: &Image, params: &AugParams, out_size: usize) -> Image {
    let mut img = image.clone();
    for &kind in &params.order {
        img = match kind {
            AugKind::CropResize => {
                let (h, w) = (img.height() as f32, img.width() as f32);
                let c = params.crop;
                img.crop_resize(c.y * h, c.x * w, c.h * h, c.w * w, out_size)
            }
            AugKind::Rotation => match params.rotation_quarter_turns {
                Some(t) if t % 4 != 0 => img.rotate_quarter(t),
                _ => img,
            },
            AugKind::ColorJitter => match params.jitter {
                Some(j) => apply_jitter(img, &j),
                None => img,
            },
            AugKind::Grayscale if params.grayscale == Some(true) => img.grayscale(),
            AugKind::Blur => match params.blur_sigma {
                Some(s) if s > 0.0 => img.gaussian_blur3(s),
                _ => img,
            },
            AugKind::HFlip if params.flip == Some(true) => img.hflip(),
            AugKind::Grayscale | AugKind::HFlip => img,
        };
    }
    img
}

/// Runs the four jitter sub-ops in recorded order, skipping identity factors.
pub fn apply_jitter(mut img: Image, j: &ColorJitterParams) -> Image {
    for &op in &j.order {
        match op {
            0 if j.brightness != 1.0 => img.adjust_brightness(j.brightness),
            1 if j.contrast != 1.0 => img.adjust_contrast(j.contrast),
            2 if j.saturation != 1.0 => img.adjust_saturation(j.saturation),
            3 if j.hue != 0.0 => img.adjust_hue(j.hue),
            _ => {}
        }
    }
    img
}

/// Normalized distance of `[b, c, s, h]` from identity, each coordinate
/// scaled by its maximum deviation; `0` at identity, `1` at the corner.
pub fn jitter_strength(j: &ColorJitterParams, max: [f32; 4]) -> f32 {
    let d = [(j.brightness - 1.0) / max[0], (j.contrast - 1.0) / max[1], (j.saturation - 1.0) / max[2], j.hue / max[3]];
    (d.iter().map(|v| v * v).sum::<f32>() / 4.0).sqrt()
}

/// Bucket of [`jitter_strength`] among `n` even partitions of `[0, 1]`.
pub fn jitter_strength_bucket(j: &ColorJitterParams, max: [f32; 4], n: usize) -> usize {
    let s = jitter_strength(j, max);
    ((s * n as f32).floor().max(0.0) as usize).min(n - 1)
}
