//! Frozen-feature evaluation: linear probe, augmentation-strength probe,
//! per-stage invariance report and the rotation-placement study.

use std::fmt::Write as _;

use haug_tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    apply_jitter, jitter_strength_bucket, AugKind, AugParams, AugSettings, ColorJitterParams, CropParams, Image,
};
use crate::error::{Error, Result};
use crate::io::config::{Config, EvalSection};
use crate::io::dataset::Dataset;
use crate::model::{rows, Model};
use crate::seed::derive_seed;
use crate::trainer::{lr_at, pretrain, sgd_step};

/// Images per eval-mode forward chunk.
const FEATURE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub task: String,
    /// Held-out top-1 accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ProbeResult {
    pub const CSV_HEADER: &'static str = "task,accuracy,train_accuracy,n_classes,n_train,n_test,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{},{}",
            self.task, self.accuracy, self.train_accuracy, self.n_classes, self.n_train, self.n_test, self.seed
        )
    }
}

/// Linear-classifier training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.1, batch_size: 256, momentum: 0.9 }
    }
}

impl From<&EvalSection> for ProbeOptions {
    fn from(e: &EvalSection) -> Self {
        Self { epochs: e.probe_epochs, lr: e.probe_lr, batch_size: e.probe_batch, ..Self::default() }
    }
}

/// Per-dimension mean and standard deviation of `x` (std floored at 1e-6).
fn moments(x: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in x {
        for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(1e-6)).collect();
    (mean, std)
}

fn standardize(x: &[Vec<f32>], mean: &[f64], std: &[f64]) -> Vec<Float> {
    x.iter().flat_map(|r| r.iter().zip(mean).zip(std).map(|((&v, m), s)| ((v as f64 - m) / s) as Float)).collect()
}

fn argmax(row: &[Float]) -> usize {
    row.iter().enumerate().fold((0, Float::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

fn accuracy(w: &Tensor, b: &Tensor, x: &[Float], y: &[usize], d: usize) -> f64 {
    let k = b.numel();
    let mut correct = 0;
    let mut logits = vec![0.0; k];
    for (r, &label) in x.chunks(d).zip(y) {
        for (c, l) in logits.iter_mut().enumerate() {
            let wr = &w.data()[c * d..][..d];
            *l = b.data()[c] + wr.iter().zip(r).map(|(a, b)| a * b).sum::<Float>();
        }
        if argmax(&logits) == label {
            correct += 1;
        }
    }
    correct as f64 / y.len().max(1) as f64
}

/// Trains a softmax linear classifier on standardized features (train-set
/// statistics) and reports held-out accuracy.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe_features(
    task: &str,
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    n_classes: usize,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeResult> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Probe("feature and label counts differ or the train split is empty".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l >= n_classes) {
        return Err(Error::Probe(format!("label {bad} does not fit {n_classes} classes")));
    }
    let d = train_x[0].len();
    let (mean, std) = moments(train_x);
    let xtr = standardize(train_x, &mean, &std);
    let xte = standardize(test_x, &mean, &std);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x9b0be]));
    let bound = 1.0 / (d as f64).sqrt();
    let mut w = Tensor::from_fn(&[n_classes, d], |_| rng.random_range(-bound..bound) as Float);
    let mut b = Tensor::zeros(&[n_classes]);
    let mut vw = Tensor::zeros(&[n_classes, d]);
    let mut vb = Tensor::zeros(&[n_classes]);

    let n = train_x.len();
    let batch = opts.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let total = steps_per_epoch * opts.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lr = lr_at(step, total, opts.lr, crate::trainer::LR_REFERENCE_BATCH as usize) as Float;
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(&xtr[i * d..][..d]);
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut g = haug_tensor::Graph::new();
            let x = g.constant(Tensor::new(vec![chunk.len(), d], xb)?);
            let wv = g.param(w.clone());
            let bv = g.param(b.clone());
            let logits = g.linear(x, wv, Some(bv))?;
            let loss = g.cross_entropy(logits, &yb)?;
            g.backward(loss)?;
            let gw = g.take_grad(wv).expect("param grad");
            let gb = g.take_grad(bv).expect("param grad");
            let m = opts.momentum as Float;
            sgd_step(&mut w, &gw, &mut vw, lr, m, 0.0);
            sgd_step(&mut b, &gb, &mut vb, lr, m, 0.0);
            step += 1;
        }
    }
    Ok(ProbeResult {
        task: task.to_string(),
        accuracy: accuracy(&w, &b, &xte, test_y, d),
        train_accuracy: accuracy(&w, &b, &xtr, train_y, d),
        n_classes,
        n_train: n,
        n_test: test_x.len(),
        seed,
    })
}

/// Full-frame bilinear resize to the model's view size.
pub fn fit_to_view(images: &[Image], size: usize) -> Vec<Image> {
    images
        .iter()
        .map(|im| {
            if im.height() == size && im.width() == size {
                im.clone()
            } else {
                im.crop_resize(0.0, 0.0, im.height() as f32, im.width() as f32, size)
            }
        })
        .collect()
}

/// Linear probe on pooled backbone features of `stage`.
pub fn linear_probe(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    stage: usize,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeResult> {
    let n_classes = train.num_classes().max(test.num_classes());
    let size = model.config.image_size;
    let ftr = model.features(&fit_to_view(&train.images, size), stage, false, FEATURE_CHUNK)?;
    let fte = model.features(&fit_to_view(&test.images, size), stage, false, FEATURE_CHUNK)?;
    let ytr: Vec<usize> = train.labels.iter().map(|&l| l as usize).collect();
    let yte: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
    linear_probe_features(&format!("linear_stage{stage}"), &ftr, &ytr, &fte, &yte, n_classes, opts, seed)
}

/// Representation read by the augmentation probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeRepr {
    /// Pooled stage-4 features `e`.
    Features,
    /// Stage-4 projection `h(e)`. When the model embeds augmentation
    /// parameters, the embedding slot is fed identity parameters so the
    /// output carries only what `e` carries.
    Projection,
}

impl ProbeRepr {
    pub fn name(self) -> &'static str {
        match self {
            ProbeRepr::Features => "e",
            ProbeRepr::Projection => "h(e)",
        }
    }
}

/// Jittered views with their parameters and strength buckets.
#[derive(Clone, Debug)]
pub struct AugProbeSet {
    pub views: Vec<Image>,
    pub params: Vec<AugParams>,
    pub labels: Vec<usize>,
}

/// Draws jitter uniformly within the configured maxima until it lands in `bucket`.
fn jitter_in_bucket(rng: &mut impl Rng, max: [f32; 4], n_buckets: usize, bucket: usize) -> Result<ColorJitterParams> {
    for _ in 0..1_000_000 {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        let j = ColorJitterParams {
            brightness: rng.random_range(1.0 - max[0]..=1.0 + max[0]),
            contrast: rng.random_range(1.0 - max[1]..=1.0 + max[1]),
            saturation: rng.random_range(1.0 - max[2]..=1.0 + max[2]),
            hue: rng.random_range(-max[3]..=max[3]),
            order,
        };
        if jitter_strength_bucket(&j, max, n_buckets) == bucket {
            return Ok(j);
        }
    }
    Err(Error::Probe(format!("could not sample jitter strength bucket {bucket}")))
}

/// `n` jittered views of `images` (cycled from `offset`), labels balanced
/// over `n_buckets` strength buckets. Views are full-frame resizes.
pub fn aug_probe_set(
    images: &[Image],
    offset: usize,
    n: usize,
    settings: &AugSettings,
    n_buckets: usize,
    seed: u64,
) -> Result<AugProbeSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, offset as u64, 0xa9]));
    let mut set =
        AugProbeSet { views: Vec::with_capacity(n), params: Vec::with_capacity(n), labels: Vec::with_capacity(n) };
    for j in 0..n {
        let src = &images[(offset + j) % images.len()];
        let bucket = j % n_buckets;
        let jitter = jitter_in_bucket(&mut rng, settings.jitter_max, n_buckets, bucket)?;
        let base = src.crop_resize(0.0, 0.0, src.height() as f32, src.width() as f32, settings.out_size);
        set.views.push(apply_jitter(base, &jitter));
        set.params.push(AugParams {
            order: vec![AugKind::CropResize, AugKind::ColorJitter],
            crop: CropParams::FULL,
            jitter: Some(jitter),
            ..AugParams::identity()
        });
        set.labels.push(bucket);
    }
    Ok(set)
}

fn probe_repr(model: &Model, set: &AugProbeSet, repr: ProbeRepr) -> Result<Vec<Vec<f32>>> {
    match repr {
        ProbeRepr::Features => model.features(&set.views, 4, false, FEATURE_CHUNK),
        ProbeRepr::Projection => {
            let mut out = Vec::with_capacity(set.views.len());
            let kinds = model.config.stage_embeds[3].clone();
            let null = AugParams { jitter: Some(ColorJitterParams::IDENTITY), ..AugParams::identity() };
            for views in set.views.chunks(FEATURE_CHUNK) {
                let mut s = model.session(false);
                let refs: Vec<&Image> = views.iter().collect();
                let prefs = vec![&null; views.len()];
                let x = model.input(&mut s, &refs)?;
                let e = model.stage_features(&mut s, x, 4)?;
                let e_aug = model.embed_aug(&mut s, &prefs, &kinds, 4)?;
                let z = model.project(&mut s, e, e_aug, 4)?;
                out.extend(rows(s.graph.value(z)));
            }
            Ok(out)
        }
    }
}

/// Predicts the jitter strength bucket of single views from `repr`.
#[allow(clippy::too_many_arguments)]
pub fn aug_probe(
    model: &Model,
    images: &[Image],
    settings: &AugSettings,
    repr: ProbeRepr,
    n_buckets: usize,
    n_train: usize,
    n_test: usize,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeResult> {
    if images.len() < 2 {
        return Err(Error::Probe("augmentation probe needs at least two source images".into()));
    }
    let settings = AugSettings { out_size: model.config.image_size, ..settings.clone() };
    // Train and test views come from disjoint image ranges where possible.
    let split = images.len() / 2;
    let train = aug_probe_set(&images[..split], 0, n_train, &settings, n_buckets, seed)?;
    let test = aug_probe_set(&images[split..], 0, n_test, &settings, n_buckets, derive_seed(&[seed, 1]))?;
    let ftr = probe_repr(model, &train, repr)?;
    let fte = probe_repr(model, &test, repr)?;
    linear_probe_features(
        &format!("aug_strength_{}", repr.name()),
        &ftr,
        &train.labels,
        &fte,
        &test.labels,
        n_buckets,
        opts,
        seed,
    )
}

/// Transforms compared by the invariance report, at canonical strength.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvKind {
    Identity,
    Crop,
    ColorJitter,
    Grayscale,
    Blur,
    HFlip,
    Rotation,
}

impl InvKind {
    pub const ALL: [InvKind; 7] = [
        InvKind::Identity,
        InvKind::Crop,
        InvKind::ColorJitter,
        InvKind::Grayscale,
        InvKind::Blur,
        InvKind::HFlip,
        InvKind::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InvKind::Identity => "identity",
            InvKind::Crop => "crop",
            InvKind::ColorJitter => "color_jitter",
            InvKind::Grayscale => "grayscale",
            InvKind::Blur => "blur",
            InvKind::HFlip => "hflip",
            InvKind::Rotation => "rotation",
        }
    }

    /// Canonical-strength transform of a view already at model resolution.
    pub fn apply(self, view: &Image, settings: &AugSettings) -> Image {
        let size = view.height();
        match self {
            InvKind::Identity => view.clone(),
            InvKind::Crop => {
                let s = size as f32;
                view.crop_resize(0.125 * s, 0.125 * s, 0.75 * s, 0.75 * s, size)
            }
            InvKind::ColorJitter => {
                let m = settings.jitter_max;
                let j = ColorJitterParams {
                    brightness: 1.0 + m[0] / 2.0,
                    contrast: 1.0 + m[1] / 2.0,
                    saturation: 1.0 + m[2] / 2.0,
                    hue: m[3] / 2.0,
                    order: [0, 1, 2, 3],
                };
                apply_jitter(view.clone(), &j)
            }
            InvKind::Grayscale => view.grayscale(),
            InvKind::Blur => view.gaussian_blur3(1.0),
            InvKind::HFlip => view.hflip(),
            InvKind::Rotation => view.rotate_quarter(1),
        }
    }
}

impl std::str::FromStr for InvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InvKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Probe(format!("unknown invariance kind `{s}`")))
    }
}

/// Mean cosine between `eᵢ(x)` and `eᵢ(a(x))`, stage × kind. Both are
/// centered on the mean clean feature of the sample first, which removes
/// the shared positive offset that makes every pair of post-ReLU pooled
/// features look alike.
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub kinds: Vec<InvKind>,
    /// `matrix[stage - 1][k]`.
    pub matrix: [Vec<f64>; 4],
    pub n_images: usize,
}

impl InvarianceReport {
    pub fn get(&self, stage: usize, kind: InvKind) -> Option<f64> {
        let k = self.kinds.iter().position(|&x| x == kind)?;
        Some(self.matrix[stage - 1][k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for k in &self.kinds {
            out.push(',');
            out.push_str(k.name());
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{}", i + 1);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Cosine of `a - center` and `b - center`.
pub fn centered_cosine(a: &[f32], b: &[f32], center: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((&x, &y), c) in a.iter().zip(b).zip(center) {
        let (x, y) = (x as f64 - c, y as f64 - c);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na * nb).sqrt().max(1e-12)
}

/// Eval-mode invariance of each stage feature `eᵢ` to each transform.
pub fn invariance_report(
    model: &Model,
    images: &[Image],
    kinds: &[InvKind],
    settings: &AugSettings,
) -> Result<InvarianceReport> {
    if images.is_empty() {
        return Err(Error::Probe("invariance report needs at least one image".into()));
    }
    let base = fit_to_view(images, model.config.image_size);
    let mut matrix: [Vec<f64>; 4] = Default::default();
    for stage in 1..=4 {
        let fx = model.features(&base, stage, true, FEATURE_CHUNK)?;
        let (center, _) = moments(&fx);
        for &kind in kinds {
            let moved: Vec<Image> = base.iter().map(|v| kind.apply(v, settings)).collect();
            let fa = if kind == InvKind::Identity {
                fx.clone()
            } else {
                model.features(&moved, stage, true, FEATURE_CHUNK)?
            };
            let mean = fx.iter().zip(&fa).map(|(a, b)| centered_cosine(a, b, &center)).sum::<f64>() / fx.len() as f64;
            matrix[stage - 1].push(mean);
        }
    }
    Ok(InvarianceReport { kinds: kinds.to_vec(), matrix, n_images: images.len() })
}

/// Rotation placements compared by [`rotation_placement_experiment`].
pub const ROTATION_VARIANTS: [(&str, Option<usize>); 3] =
    [("none", None), ("from_stage1", Some(1)), ("from_stage4", Some(4))];

/// One row of the rotation-placement table.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationRow {
    pub variant: &'static str,
    pub result: ProbeResult,
}

/// Pretrains without rotation and with rotation from stages 1 and 4 for
/// each seed in `cfg.eval.seeds`, then linear-probes each run.
pub fn rotation_placement_experiment(
    cfg: &Config,
    train: &Dataset,
    test: &Dataset,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<RotationRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.eval.seeds {
        for (variant, rot) in ROTATION_VARIANTS {
            let mut c = cfg.clone();
            c.augment.rotation_from_stage = rot;
            c.train.seed = seed;
            let run = pretrain(&c, train, None, &mut |_| {})?;
            let result = linear_probe(&run.state.model, train, test, c.eval.stage, &(&c.eval).into(), seed)?;
            progress(&format!("{variant} seed {seed}: {:.4}", result.accuracy));
            rows.push(RotationRow { variant, result });
        }
    }
    Ok(rows)
}

pub fn rotation_csv(rows: &[RotationRow]) -> String {
    let mut out = format!("variant,{}\n", ProbeResult::CSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{},{}", r.variant, r.result.csv_row());
    }
    out
}

/// Mean probe accuracy of one variant.
pub fn variant_mean(rows: &[RotationRow], variant: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.result.accuracy).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
