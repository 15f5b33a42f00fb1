//! Staged siamese encoder: backbone stages `f₁…f₄`, stage adapters `g₁…g₄`,
//! per-stage projection heads and predictors, and the augmentation-parameter
//! embedder used for feature expansion.

use std::collections::HashMap;

use haug_tensor::{BatchMoments, Float, Graph, RunningStats, Tensor, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{AugKind, AugParams, Image, PipelineSet};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Augmentation kinds that can be embedded, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbedKind {
    Color,
    Crop,
}

impl EmbedKind {
    pub const ALL: [EmbedKind; 2] = [EmbedKind::Color, EmbedKind::Crop];

    pub fn name(self) -> &'static str {
        match self {
            EmbedKind::Color => "color",
            EmbedKind::Crop => "crop",
        }
    }

    pub fn aug_kind(self) -> AugKind {
        match self {
            EmbedKind::Color => AugKind::ColorJitter,
            EmbedKind::Crop => AugKind::CropResize,
        }
    }

    /// Parameter vector fed to the embedder: `[b, c, s, h]` or `[x, y, h, w]`.
    pub fn input(self, params: &AugParams) -> Option<[f32; 4]> {
        match self {
            EmbedKind::Color => params.jitter.map(|j| j.to_vec()),
            EmbedKind::Crop => Some(params.crop.to_vec()),
        }
    }
}

/// Architecture hyperparameters. Everything here is covered by the
/// checkpoint config digest.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of backbone stages 1–4.
    pub channels: [usize; 4],
    /// Side of the square input views.
    pub image_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    /// Embedded kinds per stage (empty: no expansion at that stage).
    pub stage_embeds: [Vec<EmbedKind>; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            image_size: 32,
            embed_dim: 32,
            proj_dim: 64,
            pred_hidden: 16,
            stage_embeds: Default::default(),
        }
    }
}

impl ModelConfig {
    /// Expands every stage whose pipeline contains the corresponding kind.
    pub fn with_expansion(mut self, pipelines: &PipelineSet, kinds: &[EmbedKind]) -> Self {
        self.stage_embeds = std::array::from_fn(|i| {
            EmbedKind::ALL
                .into_iter()
                .filter(|k| kinds.contains(k) && pipelines.stage_has(i + 1, k.aug_kind()))
                .collect()
        });
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn head_input_dim(&self, stage: usize) -> usize {
        self.feature_dim() + self.embed_dim * self.stage_embeds[stage - 1].len()
    }

    /// Kinds embedded at any stage.
    pub fn embedded_kinds(&self) -> Vec<EmbedKind> {
        EmbedKind::ALL.into_iter().filter(|k| self.stage_embeds.iter().any(|s| s.contains(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.embed_dim == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(format!(
                "view size {} is below 16, too small for four stride-2 stages",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Canonical text form hashed into checkpoints.
    pub fn describe(&self) -> String {
        let embeds: Vec<String> =
            self.stage_embeds.iter().map(|s| s.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")).collect();
        format!(
            "channels={:?};image_size={};embed_dim={};proj_dim={};pred_hidden={};stage_embeds={}",
            self.channels,
            self.image_size,
            self.embed_dim,
            self.proj_dim,
            self.pred_hidden,
            embeds.join("|")
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv or fully-connected weight: trained and weight-decayed.
    Weight,
    /// Bias or normalization affine: trained, not decayed.
    Bias,
    /// Normalization running statistic: updated from batch moments, not trained.
    Buffer,
}

/// Named tensors in a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    roles: Vec<ParamRole>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, role: ParamRole) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.roles.push(role);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn role(&self, id: usize) -> ParamRole {
        self.roles[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamRole)> {
        self.names.iter().zip(&self.tensors).zip(&self.roles).map(|((n, t), &r)| (n.as_str(), t, r))
    }

    /// Number of scalars in trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, _, r)| *r != ParamRole::Buffer).map(|(_, t, _)| t.numel()).sum()
    }

    /// FNV-1a over names and bit patterns of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, t, _) in self.iter() {
            eat(n.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The full trainable model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Seeded initialization; each tensor draws from its own stream keyed by
    /// its name, so toggling expansion leaves every shared tensor unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, name_hash(&spec.name)]));
            let n: usize = spec.shape.iter().product();
            let tensor = match spec.init {
                Init::Kaiming { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&spec.shape, |_| dist.sample(&mut rng) as Float)
                }
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.random_range(-bound..bound) as Float)
                }
                Init::Const(v) => Tensor::full(&spec.shape, v),
            };
            debug_assert_eq!(tensor.numel(), n);
            params.insert(spec.name, tensor, spec.role);
        }
        Ok(Self { config, params })
    }

    pub fn session(&self, training: bool) -> Session<'_> {
        Session::new(&self.params, training)
    }

    /// Stacks views into an `[N, 3, S, S]` constant.
    pub fn input(&self, s: &mut Session, views: &[&Image]) -> Result<Var> {
        let size = self.config.image_size;
        let mut data = Vec::with_capacity(views.len() * 3 * size * size);
        for v in views {
            if v.height() != size || v.width() != size {
                return Err(Error::Resolution {
                    expected: size,
                    got: if v.height() != size { v.height() } else { v.width() },
                });
            }
            data.extend(v.data().iter().map(|&p| p as Float));
        }
        Ok(s.graph.constant(Tensor::new(vec![views.len(), 3, size, size], data)?))
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<()> {
        let shape = s.graph.shape(x);
        let size = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidConfig(format!("views must be [N, 3, S, S], got {shape:?}")));
        }
        if shape[2] != size || shape[3] != size {
            return Err(Error::Resolution { expected: size, got: if shape[2] != size { shape[2] } else { shape[3] } });
        }
        Ok(())
    }

    fn backbone_stage(&self, s: &mut Session, x: Var, stage: usize) -> Result<Var> {
        let x = s.conv_block(x, &format!("backbone.stage{stage}"), 0, 2)?;
        s.conv_block(x, &format!("backbone.stage{stage}"), 1, 1)
    }

    /// `f_stage ∘ … ∘ f₁` on views, before any adapter.
    pub fn backbone(&self, s: &mut Session, views: Var, stage: usize) -> Result<Var> {
        self.check_input(s, views)?;
        let mut x = views;
        for k in 1..=stage {
            x = self.backbone_stage(s, x, k)?;
        }
        Ok(x)
    }

    /// `eᵢ = GAP(gᵢ(fᵢ(…f₁(v))))`, shape `[N, feature_dim]`.
    pub fn stage_features(&self, s: &mut Session, views: Var, stage: usize) -> Result<Var> {
        let mut x = self.backbone(s, views, stage)?;
        for j in 0..4 - stage {
            x = s.conv_block(x, &format!("adapter.{stage}"), j, 2)?;
        }
        Ok(s.graph.global_avg_pool(x)?)
    }

    /// Concatenated per-kind embeddings, or `None` when `kinds` is empty.
    pub fn embed_aug(
        &self,
        s: &mut Session,
        params: &[&AugParams],
        kinds: &[EmbedKind],
        stage: usize,
    ) -> Result<Option<Var>> {
        let mut parts = Vec::with_capacity(kinds.len());
        for kind in EmbedKind::ALL.into_iter().filter(|k| kinds.contains(k)) {
            let mut data = Vec::with_capacity(params.len() * 4);
            for p in params {
                let v = kind.input(p).ok_or(Error::KindNotInPipeline { stage, kind: kind.aug_kind().name() })?;
                data.extend(v.iter().map(|&x| x as Float));
            }
            let x = s.graph.constant(Tensor::new(vec![params.len(), 4], data)?);
            let prefix = format!("embedder.{}", kind.name());
            let h = s.linear(x, &format!("{prefix}.fc"))?;
            let h = s.bn(h, &format!("{prefix}.bn"))?;
            parts.push(s.graph.relu(h)?);
        }
        Ok(match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(s.graph.concat(&parts, 1)?),
        })
    }

    /// `zᵢ = hᵢ([eᵢ, e_aug])`.
    pub fn project(&self, s: &mut Session, e: Var, e_aug: Option<Var>, stage: usize) -> Result<Var> {
        let x = match e_aug {
            Some(a) => s.graph.concat(&[e, a], 1)?,
            None => e,
        };
        let got = s.graph.shape(x)[1];
        if got != self.config.head_input_dim(stage) {
            return Err(Error::InvalidConfig(format!(
                "head {stage} expects {} inputs, got {got}",
                self.config.head_input_dim(stage)
            )));
        }
        let p = format!("head.{stage}");
        let mut h = x;
        for j in 0..3 {
            h = s.linear(h, &format!("{p}.fc{j}"))?;
            h = s.bn(h, &format!("{p}.bn{j}"))?;
            if j < 2 {
                h = s.graph.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Stage predictor `pᵢ(z)`.
    pub fn predict(&self, s: &mut Session, z: Var, stage: usize) -> Result<Var> {
        let p = format!("predictor.{stage}");
        let h = s.linear(z, &format!("{p}.fc0"))?;
        let h = s.bn(h, &format!("{p}.bn0"))?;
        let h = s.graph.relu(h)?;
        s.linear(h, &format!("{p}.fc1"))
    }

    /// Projection of one branch at one stage, including expansion.
    pub fn branch(&self, s: &mut Session, views: &[&Image], params: &[&AugParams], stage: usize) -> Result<Branch> {
        let x = self.input(s, views)?;
        let e = self.stage_features(s, x, stage)?;
        let kinds = self.config.stage_embeds[stage - 1].clone();
        let e_aug = self.embed_aug(s, params, &kinds, stage)?;
        let z = self.project(s, e, e_aug, stage)?;
        Ok(Branch { e, z })
    }

    /// Frozen eval-mode features for many images, in chunks.
    ///
    /// `adapter = false` pools the raw backbone output of `stage` (the
    /// representation kept after pretraining); `adapter = true` gives `eᵢ`.
    pub fn features(&self, images: &[Image], stage: usize, adapter: bool, chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for batch in images.chunks(chunk.max(1)) {
            let mut s = self.session(false);
            let refs: Vec<&Image> = batch.iter().collect();
            let x = self.input(&mut s, &refs)?;
            let f = if adapter {
                self.stage_features(&mut s, x, stage)?
            } else {
                let b = self.backbone(&mut s, x, stage)?;
                s.graph.global_avg_pool(b)?
            };
            out.extend(rows(s.graph.value(f)));
        }
        Ok(out)
    }
}

/// Rows of a 2-D tensor as `f32` vectors.
pub fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

/// Graph handles for one branch.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub e: Var,
    pub z: Var,
}

/// One forward pass: a fresh graph with parameters bound on first use.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    moments: Vec<(usize, BatchMoments)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], training, moments: Vec::new() }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Leaf for a stored tensor; trainable entries require grad in training mode.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name).ok_or_else(|| Error::InvalidConfig(format!("model has no parameter `{name}`")))?;
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let grad = self.training && self.store.role(id) != ParamRole::Buffer;
        let v = self.graph.leaf(self.store.tensor(id).clone(), grad);
        self.bound[id] = Some(v);
        Ok(v)
    }

    pub fn bound(&self, id: usize) -> Option<Var> {
        self.bound[id]
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.graph.linear(x, w, Some(b))?)
    }

    /// Normalization; training mode defers the running-stat update.
    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        if self.training {
            let (out, m) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let id = self.store.id(&mean_name).expect("norm layers register running stats");
            self.moments.push((id, m));
            Ok(out)
        } else {
            let stats = RunningStats {
                mean: self.store.get(&mean_name).expect("running mean").data().to_vec(),
                var: self.store.get(&format!("{prefix}.running_var")).expect("running var").data().to_vec(),
            };
            Ok(self.graph.batch_norm_eval(x, gamma, beta, &stats, BN_EPS)?)
        }
    }

    /// conv(3×3, no bias) → norm → ReLU, names `{prefix}.conv{j}` / `{prefix}.bn{j}`.
    pub fn conv_block(&mut self, x: Var, prefix: &str, j: usize, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.conv{j}.weight"))?;
        let h = self.graph.conv2d(x, w, stride, 1)?;
        let h = self.bn(h, &format!("{prefix}.bn{j}"))?;
        Ok(self.graph.relu(h)?)
    }

    /// Gradients of every store entry; unbound or frozen entries get `None`.
    pub fn gradients(&mut self) -> Vec<Option<Tensor>> {
        (0..self.bound.len()).map(|id| self.bound[id].and_then(|v| self.graph.take_grad(v))).collect()
    }

    /// Batch moments recorded so far, keyed by the running-mean entry.
    pub fn take_moments(&mut self) -> Vec<(usize, BatchMoments)> {
        std::mem::take(&mut self.moments)
    }
}

/// Folds recorded batch moments into the running statistics of `store`.
/// The running variance entry always follows its mean.
pub fn apply_moments(store: &mut ParamStore, moments: &[(usize, BatchMoments)]) {
    for (id, m) in moments {
        let mut stats =
            RunningStats { mean: store.tensor(*id).data().to_vec(), var: store.tensor(id + 1).data().to_vec() };
        stats.update(m);
        store.tensor_mut(*id).data_mut().copy_from_slice(&stats.mean);
        store.tensor_mut(id + 1).data_mut().copy_from_slice(&stats.var);
    }
}

enum Init {
    Kaiming { fan_in: usize },
    Uniform { fan_in: usize },
    Const(Float),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
    init: Init,
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, j: usize, cin: usize, cout: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.conv{j}.weight"),
        shape: vec![cout, cin, 3, 3],
        role: ParamRole::Weight,
        init: Init::Kaiming { fan_in: cin * 9 },
    });
    push_norm(out, &format!("{prefix}.bn{j}"), cout);
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    let entries = [
        ("weight", ParamRole::Bias, 1.0),
        ("bias", ParamRole::Bias, 0.0),
        ("running_mean", ParamRole::Buffer, 0.0),
        ("running_var", ParamRole::Buffer, 1.0),
    ];
    for (suffix, role, v) in entries {
        out.push(ParamSpec { name: format!("{prefix}.{suffix}"), shape: vec![c], role, init: Init::Const(v) });
    }
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, fin: usize, fout: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fout, fin],
        role: ParamRole::Weight,
        init: Init::Uniform { fan_in: fin },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fout],
        role: ParamRole::Bias,
        init: Init::Uniform { fan_in: fin },
    });
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let ch = cfg.channels;
    for stage in 1..=4 {
        let cin = if stage == 1 { 3 } else { ch[stage - 2] };
        let prefix = format!("backbone.stage{stage}");
        push_conv(&mut out, &prefix, 0, cin, ch[stage - 1]);
        push_conv(&mut out, &prefix, 1, ch[stage - 1], ch[stage - 1]);
    }
    for stage in 1..=3 {
        let prefix = format!("adapter.{stage}");
        for j in 0..4 - stage {
            push_conv(&mut out, &prefix, j, ch[stage - 1 + j], ch[stage + j]);
        }
    }
    for stage in 1..=4 {
        let prefix = format!("head.{stage}");
        let mut fin = cfg.head_input_dim(stage);
        for j in 0..3 {
            push_linear(&mut out, &format!("{prefix}.fc{j}"), fin, cfg.proj_dim);
            push_norm(&mut out, &format!("{prefix}.bn{j}"), cfg.proj_dim);
            fin = cfg.proj_dim;
        }
    }
    for stage in 1..=4 {
        let prefix = format!("predictor.{stage}");
        push_linear(&mut out, &format!("{prefix}.fc0"), cfg.proj_dim, cfg.pred_hidden);
        push_norm(&mut out, &format!("{prefix}.bn0"), cfg.pred_hidden);
        push_linear(&mut out, &format!("{prefix}.fc1"), cfg.pred_hidden, cfg.proj_dim);
    }
    for kind in cfg.embedded_kinds() {
        let prefix = format!("embedder.{}", kind.name());
        push_linear(&mut out, &format!("{prefix}.fc"), 4, cfg.embed_dim);
        push_norm(&mut out, &format!("{prefix}.bn"), cfg.embed_dim);
    }
    out
}
