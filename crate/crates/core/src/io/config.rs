//! Line-based `key = value` configuration with `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown sections and keys are errors that name the line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{
    arrangement_code, build_pipelines, parse_arrangement, AugKind, AugSettings, PipelineMode, PipelineSet,
};
use crate::error::{Error, Result};
use crate::model::{EmbedKind, ModelConfig};
use crate::objectives::{Objective, BARLOW_LAMBDA};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Side of the stored square images.
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub channels: [usize; 4],
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    /// Kinds whose parameters are embedded for feature expansion.
    pub expansion: Vec<EmbedKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSection {
    pub mode: PipelineMode,
    pub arrangement: [AugKind; 4],
    pub rotation_from_stage: Option<usize>,
    pub settings: AugSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub objective: Objective,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub ckpt_every: usize,
    /// Experiment override of the unweighted stage sum.
    pub stage_weights: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub stage: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub n_buckets: usize,
    pub aug_probe_train: usize,
    pub aug_probe_test: usize,
    pub invariance_samples: usize,
    /// Seeds for multi-seed direction checks.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            data: DataSection { train: "data/train.bin".into(), test: "data/test.bin".into(), image_size: 32 },
            model: ModelSection {
                channels: m.channels,
                embed_dim: m.embed_dim,
                proj_dim: m.proj_dim,
                pred_hidden: m.pred_hidden,
                expansion: vec![EmbedKind::Color],
            },
            augment: AugmentSection {
                mode: PipelineMode::Hierarchical,
                arrangement: AugKind::ARRANGEABLE,
                rotation_from_stage: None,
                settings: AugSettings::default(),
            },
            train: TrainSection {
                objective: Objective::SimSiam,
                base_lr: 0.05,
                batch_size: 64,
                epochs: 30,
                weight_decay: 1e-4,
                momentum: 0.9,
                seed: 0,
                ckpt_every: 0,
                stage_weights: None,
            },
            eval: EvalSection {
                stage: 4,
                probe_epochs: 30,
                probe_lr: 0.1,
                probe_batch: 256,
                n_buckets: 10,
                aug_probe_train: 2000,
                aug_probe_test: 1000,
                invariance_samples: 256,
                seeds: vec![0, 1, 2],
            },
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("cannot parse `{}`", v.trim()))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(parse_num).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(v: &str) -> std::result::Result<[T; N], String> {
    let items = parse_list::<T>(v)?;
    <[T; N]>::try_from(items).map_err(|i| format!("expected {N} comma-separated values, got {}", i.len()))
}

fn parse_pair(v: &str) -> std::result::Result<(f32, f32), String> {
    let [a, b] = parse_array::<f32, 2>(v)?;
    Ok((a, b))
}

fn is_none(v: &str) -> bool {
    matches!(v.trim(), "none" | "off" | "")
}

fn parse_expansion(v: &str) -> std::result::Result<Vec<EmbedKind>, String> {
    if is_none(v) {
        return Ok(Vec::new());
    }
    let mut kinds = Vec::new();
    for item in v.split(',') {
        let k = match item.trim() {
            "color" => EmbedKind::Color,
            "crop" => EmbedKind::Crop,
            other => return Err(format!("unknown expansion kind `{other}` (expected color, crop)")),
        };
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds.sort();
    Ok(kinds)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let location = format!("line {}", i + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    location: location.clone(),
                    key: line.to_string(),
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !matches!(name, "data" | "model" | "augment" | "train" | "eval") {
                    return Err(Error::Config {
                        location,
                        key: name.to_string(),
                        msg: "unknown section (expected data, model, augment, train, eval)".into(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                location: location.clone(),
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let sec = section.as_deref().ok_or_else(|| Error::Config {
                location: location.clone(),
                key: key.to_string(),
                msg: "key appears before any [section] header".into(),
            })?;
            cfg.apply(sec, key, value).map_err(|msg| Error::Config { location, key: format!("{sec}.{key}"), msg })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let err = |key: &str, msg: String| Error::Config { location: "--set".into(), key: key.to_string(), msg };
        let (path, value) =
            assignment.split_once('=').ok_or_else(|| err(assignment, "expected section.key=value".into()))?;
        let (sec, key) = path.trim().split_once('.').ok_or_else(|| err(path, "expected section.key".into()))?;
        self.apply(sec, key.trim(), value).map_err(|m| err(path.trim(), m))
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match (section, key) {
            ("data", "train") => self.data.train = v.into(),
            ("data", "test") => self.data.test = v.into(),
            ("data", "image_size") => self.data.image_size = parse_num(v)?,
            ("model", "channels") => self.model.channels = parse_array(v)?,
            ("model", "embed_dim") => self.model.embed_dim = parse_num(v)?,
            ("model", "proj_dim") => self.model.proj_dim = parse_num(v)?,
            ("model", "pred_hidden") => self.model.pred_hidden = parse_num(v)?,
            ("model", "expansion") => self.model.expansion = parse_expansion(v)?,
            ("augment", "mode") => self.augment.mode = v.parse().map_err(|e: Error| e.to_string())?,
            ("augment", "arrangement") => self.augment.arrangement = parse_arrangement(v).map_err(|e| e.to_string())?,
            ("augment", "rotation_from_stage") => {
                self.augment.rotation_from_stage = if is_none(v) { None } else { Some(parse_num(v)?) }
            }
            ("augment", "out_size") => self.augment.settings.out_size = parse_num(v)?,
            ("augment", "crop_scale") => self.augment.settings.crop_scale = parse_pair(v)?,
            ("augment", "crop_ratio") => self.augment.settings.crop_ratio = parse_pair(v)?,
            ("augment", "jitter_prob") => self.augment.settings.jitter_prob = parse_num(v)?,
            ("augment", "jitter_max") => self.augment.settings.jitter_max = parse_array(v)?,
            ("augment", "gray_prob") => self.augment.settings.gray_prob = parse_num(v)?,
            ("augment", "blur_prob") => self.augment.settings.blur_prob = parse_num(v)?,
            ("augment", "blur_sigma") => self.augment.settings.blur_sigma = parse_pair(v)?,
            ("augment", "flip_prob") => self.augment.settings.flip_prob = parse_num(v)?,
            ("augment", "rotation_prob") => self.augment.settings.rotation_prob = parse_num(v)?,
            ("train", "objective") => {
                let lambda = match self.train.objective {
                    Objective::BarlowTwins { lambda } => lambda,
                    Objective::SimSiam => BARLOW_LAMBDA,
                };
                self.train.objective = match v.parse().map_err(|e: Error| e.to_string())? {
                    Objective::BarlowTwins { .. } => Objective::BarlowTwins { lambda },
                    o => o,
                };
            }
            ("train", "barlow_lambda") => {
                let lambda = parse_num(v)?;
                if let Objective::BarlowTwins { lambda: l } = &mut self.train.objective {
                    *l = lambda;
                } else if lambda != BARLOW_LAMBDA {
                    return Err("barlow_lambda needs objective = barlow_twins set earlier".into());
                }
            }
            ("train", "base_lr") => self.train.base_lr = parse_num(v)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(v)?,
            ("train", "epochs") => self.train.epochs = parse_num(v)?,
            ("train", "weight_decay") => self.train.weight_decay = parse_num(v)?,
            ("train", "momentum") => self.train.momentum = parse_num(v)?,
            ("train", "seed") => self.train.seed = parse_num(v)?,
            ("train", "ckpt_every") => self.train.ckpt_every = parse_num(v)?,
            ("train", "stage_weights") => {
                self.train.stage_weights = if is_none(v) { None } else { Some(parse_array(v)?) }
            }
            ("eval", "stage") => self.eval.stage = parse_num(v)?,
            ("eval", "probe_epochs") => self.eval.probe_epochs = parse_num(v)?,
            ("eval", "probe_lr") => self.eval.probe_lr = parse_num(v)?,
            ("eval", "probe_batch") => self.eval.probe_batch = parse_num(v)?,
            ("eval", "n_buckets") => self.eval.n_buckets = parse_num(v)?,
            ("eval", "aug_probe_train") => self.eval.aug_probe_train = parse_num(v)?,
            ("eval", "aug_probe_test") => self.eval.aug_probe_test = parse_num(v)?,
            ("eval", "invariance_samples") => self.eval.invariance_samples = parse_num(v)?,
            ("eval", "seeds") => self.eval.seeds = parse_list(v)?,
            ("data" | "model" | "augment" | "train" | "eval", _) => return Err("unknown key".into()),
            _ => return Err(format!("unknown section `{section}`")),
        }
        Ok(())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.train.batch_size < 2 {
            return bad(format!("train.batch_size = {} is below 2", self.train.batch_size));
        }
        if self.train.epochs < 1 {
            return bad("train.epochs must be at least 1".into());
        }
        if !(self.train.base_lr >= 0.0 && self.train.weight_decay >= 0.0 && (0.0..1.0).contains(&self.train.momentum)) {
            return bad("train.base_lr and train.weight_decay must be non-negative, train.momentum in [0, 1)".into());
        }
        if !(1..=4).contains(&self.eval.stage) {
            return bad(format!("eval.stage = {} is outside 1..=4", self.eval.stage));
        }
        if self.eval.n_buckets < 2 || self.eval.probe_batch == 0 || self.eval.seeds.is_empty() {
            return bad("eval.n_buckets must be at least 2, eval.probe_batch positive, eval.seeds non-empty".into());
        }
        if self.data.image_size < self.augment.settings.out_size / 2 {
            return bad("data.image_size is far below augment.out_size".into());
        }
        self.pipelines()?;
        self.model_config()?.validate()
    }

    pub fn pipelines(&self) -> Result<PipelineSet> {
        build_pipelines(
            self.augment.arrangement,
            self.augment.mode,
            self.augment.rotation_from_stage,
            self.augment.settings.clone(),
        )
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig {
            channels: self.model.channels,
            image_size: self.augment.settings.out_size,
            embed_dim: self.model.embed_dim,
            proj_dim: self.model.proj_dim,
            pred_hidden: self.model.pred_hidden,
            stage_embeds: Default::default(),
        };
        Ok(base.with_expansion(&self.pipelines()?, &self.model.expansion))
    }

    /// Full text form; `Config::parse(&c.render()) == c`.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let d = &self.data;
        let _ = writeln!(o, "[data]");
        let _ = writeln!(o, "train = {}", d.train.display());
        let _ = writeln!(o, "test = {}", d.test.display());
        let _ = writeln!(o, "image_size = {}", d.image_size);
        let m = &self.model;
        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "channels = {}", join(&m.channels));
        let _ = writeln!(o, "embed_dim = {}", m.embed_dim);
        let _ = writeln!(o, "proj_dim = {}", m.proj_dim);
        let _ = writeln!(o, "pred_hidden = {}", m.pred_hidden);
        let exp: Vec<&str> = m.expansion.iter().map(|k| k.name()).collect();
        let _ = writeln!(o, "expansion = {}", if exp.is_empty() { "none".to_string() } else { exp.join(",") });
        let a = &self.augment;
        let s = &a.settings;
        let _ = writeln!(o, "\n[augment]");
        let _ = writeln!(o, "mode = {}", a.mode);
        let arr: Vec<String> = arrangement_code(&a.arrangement).chars().map(String::from).collect();
        let _ = writeln!(o, "arrangement = {}", arr.join(","));
        let rot = a.rotation_from_stage.map_or("none".to_string(), |r| r.to_string());
        let _ = writeln!(o, "rotation_from_stage = {rot}");
        let _ = writeln!(o, "out_size = {}", s.out_size);
        let _ = writeln!(o, "crop_scale = {},{}", s.crop_scale.0, s.crop_scale.1);
        let _ = writeln!(o, "crop_ratio = {},{}", s.crop_ratio.0, s.crop_ratio.1);
        let _ = writeln!(o, "jitter_prob = {}", s.jitter_prob);
        let _ = writeln!(o, "jitter_max = {}", join(&s.jitter_max));
        let _ = writeln!(o, "gray_prob = {}", s.gray_prob);
        let _ = writeln!(o, "blur_prob = {}", s.blur_prob);
        let _ = writeln!(o, "blur_sigma = {},{}", s.blur_sigma.0, s.blur_sigma.1);
        let _ = writeln!(o, "flip_prob = {}", s.flip_prob);
        let _ = writeln!(o, "rotation_prob = {}", s.rotation_prob);
        let t = &self.train;
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "objective = {}", t.objective);
        if let Objective::BarlowTwins { lambda } = t.objective {
            let _ = writeln!(o, "barlow_lambda = {lambda}");
        }
        let _ = writeln!(o, "base_lr = {}", t.base_lr);
        let _ = writeln!(o, "batch_size = {}", t.batch_size);
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(o, "momentum = {}", t.momentum);
        let _ = writeln!(o, "seed = {}", t.seed);
        let _ = writeln!(o, "ckpt_every = {}", t.ckpt_every);
        let sw = t.stage_weights.map_or("none".to_string(), |w| join(&w));
        let _ = writeln!(o, "stage_weights = {sw}");
        let e = &self.eval;
        let _ = writeln!(o, "\n[eval]");
        let _ = writeln!(o, "stage = {}", e.stage);
        let _ = writeln!(o, "probe_epochs = {}", e.probe_epochs);
        let _ = writeln!(o, "probe_lr = {}", e.probe_lr);
        let _ = writeln!(o, "probe_batch = {}", e.probe_batch);
        let _ = writeln!(o, "n_buckets = {}", e.n_buckets);
        let _ = writeln!(o, "aug_probe_train = {}", e.aug_probe_train);
        let _ = writeln!(o, "aug_probe_test = {}", e.aug_probe_test);
        let _ = writeln!(o, "invariance_samples = {}", e.invariance_samples);
        let _ = writeln!(o, "seeds = {}", join(&e.seeds));
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_render_round_trips() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = Config::parse("[train]\n\nbase_lr = 0.1\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4") && msg.contains("train.bogus"), "{msg}");
    }

    #[test]
    fn bad_value_names_line_and_key() {
        let err = Config::parse("[augment]\nmode = sideways\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("augment.mode"), "{msg}");
    }

    #[test]
    fn set_overrides() {
        let mut c = Config::parse("[augment]\nmode = hierarchical\n").unwrap();
        c.set("augment.mode=uniform").unwrap();
        assert_eq!(c.augment.mode, PipelineMode::Uniform);
        assert!(c.set("augment.nope=1").is_err());
    }
}
