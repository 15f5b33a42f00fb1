//! SGD with momentum, the cosine schedule, and the pretraining loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use haug_tensor::{Float, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{Image, PipelineSet, ViewPair};
use crate::error::{Error, Result};
use crate::io::checkpoint::save_checkpoint;
use crate::io::config::{Config, TrainSection};
use crate::io::dataset::{load_dataset, Dataset};
use crate::model::{apply_moments, Model, ParamRole, ParamStore, Session};
use crate::objectives::{barlow_twins_loss, overall_loss, report, simsiam_loss, LossReport, Objective};
use crate::seed::derive_seed;

/// Header of the per-step metrics CSV.
pub const METRICS_HEADER: &str = "epoch,step,lr,L1,L2,L3,L4,L_overall";

/// Batch-size reference of the linear scaling rule.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

/// `(base_lr · batch / 256) · ½ · (1 + cos(π · step / total))`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, batch_size: usize) -> f64 {
    let peak = base_lr * batch_size as f64 / LR_REFERENCE_BATCH;
    if total_steps == 0 {
        return peak;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One classic momentum step: `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: Float, momentum: Float, wd: Float) {
    let p = param.data_mut();
    let v = velocity.data_mut();
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Zero velocity aligned with `store`.
pub fn zero_velocity(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t, _)| Tensor::zeros(t.shape())).collect()
}

/// Steps every trainable entry. Missing gradients count as zero; weight
/// decay applies to conv/fc weights only.
pub fn sgd_update(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    velocity: &mut [Tensor],
    lr: Float,
    momentum: Float,
    weight_decay: Float,
) {
    for id in 0..store.len() {
        let role = store.role(id);
        if role == ParamRole::Buffer {
            continue;
        }
        let wd = if role == ParamRole::Weight { weight_decay } else { 0.0 };
        let zero;
        let g = match &grads[id] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(store.tensor(id).shape());
                &zero
            }
        };
        sgd_step(store.tensor_mut(id), g, &mut velocity[id], lr, momentum, wd);
    }
}

/// Graph handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub stages: [Var; 4],
    pub overall: Var,
}

/// Builds the four stage losses and their sum for a batch of view pairs.
pub fn build_losses(
    model: &Model,
    s: &mut Session,
    pairs: &[[ViewPair; 4]],
    objective: Objective,
    weights: Option<[Float; 4]>,
) -> Result<LossVars> {
    let mut stages = Vec::with_capacity(4);
    for stage in 1..=4 {
        let v: Vec<&Image> = pairs.iter().map(|p| &p[stage - 1].view).collect();
        let vp: Vec<&Image> = pairs.iter().map(|p| &p[stage - 1].view_prime).collect();
        let a: Vec<_> = pairs.iter().map(|p| &p[stage - 1].params).collect();
        let ap: Vec<_> = pairs.iter().map(|p| &p[stage - 1].params_prime).collect();
        let b1 = model.branch(s, &v, &a, stage)?;
        let b2 = model.branch(s, &vp, &ap, stage)?;
        let loss = match objective {
            Objective::SimSiam => {
                let p1 = model.predict(s, b1.z, stage)?;
                let p2 = model.predict(s, b2.z, stage)?;
                simsiam_loss(&mut s.graph, p1, p2, b1.z, b2.z)?
            }
            Objective::BarlowTwins { lambda } => barlow_twins_loss(&mut s.graph, b1.z, b2.z, lambda)?,
        };
        stages.push(loss);
    }
    let stages: [Var; 4] = stages.try_into().expect("four stages");
    let overall = overall_loss(&mut s.graph, stages, weights)?;
    Ok(LossVars { stages, overall })
}

/// View pairs of every image in a batch. `indices` are dataset positions,
/// which key the per-sample seed together with the run seed and epoch.
pub fn batch_pairs(
    pipelines: &PipelineSet,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
    epoch: usize,
) -> Vec<[ViewPair; 4]> {
    indices
        .iter()
        .map(|&i| pipelines.generate_pairs(&data.images[i], derive_seed(&[seed, epoch as u64, i as u64])))
        .collect()
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = zero_velocity(&model.params);
        Self { model, velocity }
    }

    /// Forward, backward and update on one batch.
    pub fn step(&mut self, pairs: &[[ViewPair; 4]], train: &TrainSection, lr: f64) -> Result<LossReport> {
        let weights = train.stage_weights.map(|w| w.map(|x| x as Float));
        let (report, grads, moments) = {
            let mut s = self.model.session(true);
            let vars = build_losses(&self.model, &mut s, pairs, train.objective, weights)?;
            let report = report(&s.graph, train.objective, vars.stages, vars.overall)?;
            if !report.overall.is_finite() {
                return Ok(report);
            }
            s.graph.backward(vars.overall)?;
            (report, s.gradients(), s.take_moments())
        };
        sgd_update(
            &mut self.model.params,
            &grads,
            &mut self.velocity,
            lr as Float,
            train.momentum as Float,
            train.weight_decay as Float,
        );
        apply_moments(&mut self.model.params, &moments);
        Ok(report)
    }
}

/// Mean stage losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: [f64; 4],
    pub mean_overall: f64,
}

/// Result of a pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub state: TrainState,
    pub final_report: LossReport,
    pub epochs: Vec<EpochSummary>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Steps per epoch and the effective batch size (incomplete batches are dropped).
pub fn schedule(n: usize, batch_size: usize) -> (usize, usize) {
    let batch = batch_size.min(n);
    (n / batch, batch)
}

/// Pretrains on `data`. With `out_dir`, writes `metrics.csv`, periodic
/// `ckpt_epoch<k>.haug` files and `final.haug`.
pub fn pretrain(
    cfg: &Config,
    data: &Dataset,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<Pretrained> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidConfig("pretraining needs at least two images".into()));
    }
    let pipelines = cfg.pipelines()?;
    let train = &cfg.train;
    let model = Model::new(cfg.model_config()?, train.seed)?;
    let mut state = TrainState::new(model);
    let (steps_per_epoch, batch) = schedule(data.len(), train.batch_size);
    let total = steps_per_epoch * train.epochs;

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(train.epochs);
    let mut last = None;
    for epoch in 0..train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[train.seed, epoch as u64, 0x0bad_5eed]));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut overall_sum = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &order[b * batch..(b + 1) * batch];
            let pairs = batch_pairs(&pipelines, data, idx, train.seed, epoch);
            let lr = lr_at(step, total, train.base_lr, train.batch_size);
            let rep = state.step(&pairs, train, lr)?;
            if !rep.overall.is_finite() || rep.per_stage.iter().any(|v| !v.is_finite()) {
                let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
                let path = dir.join(format!("nonfinite_epoch{epoch}_step{step}.haug"));
                // The failing step leaves the model untouched.
                save_checkpoint(&path, &state.model, None)?;
                let _ = fs::write(
                    dir.join(format!("nonfinite_epoch{epoch}_step{step}.txt")),
                    format!(
                        "{METRICS_HEADER}\n{epoch},{step},{lr},{},{},{},{},{}\nbatch indices: {idx:?}\n",
                        rep.per_stage[0], rep.per_stage[1], rep.per_stage[2], rep.per_stage[3], rep.overall
                    ),
                );
                return Err(Error::NonFiniteLoss { epoch, step, snapshot: path });
            }
            if let Some((path, w)) = metrics.as_mut() {
                let l = rep.per_stage;
                writeln!(w, "{epoch},{step},{lr},{},{},{},{},{}", l[0], l[1], l[2], l[3], rep.overall)
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            for (s, v) in sums.iter_mut().zip(rep.per_stage) {
                *s += v as f64;
            }
            overall_sum += rep.overall as f64;
            step += 1;
            last = Some(rep);
        }
        let summary = EpochSummary {
            epoch,
            steps: steps_per_epoch,
            mean: sums.map(|s| s / steps_per_epoch as f64),
            mean_overall: overall_sum / steps_per_epoch as f64,
        };
        progress(&summary);
        epochs.push(summary);
        if let Some(dir) = out_dir {
            if train.ckpt_every > 0 && (epoch + 1) % train.ckpt_every == 0 && epoch + 1 < train.epochs {
                save_checkpoint(
                    dir.join(format!("ckpt_epoch{}.haug", epoch + 1)),
                    &state.model,
                    Some(&state.velocity),
                )?;
            }
        }
    }
    let mut checkpoint = None;
    let mut metrics_path = None;
    if let Some((path, mut w)) = metrics {
        w.flush().map_err(|e| Error::io(&path, e))?;
        metrics_path = Some(path);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.haug");
        save_checkpoint(&path, &state.model, Some(&state.velocity))?;
        checkpoint = Some(path);
    }
    Ok(Pretrained { state, final_report: last.expect("at least one step"), epochs, checkpoint, metrics: metrics_path })
}

/// Loads `cfg.data.train` and pretrains, writing outputs to `out_dir`.
pub fn run_pretrain(cfg: &Config, out_dir: &Path, progress: &mut dyn FnMut(&EpochSummary)) -> Result<Pretrained> {
    let data = load_dataset(&cfg.data.train, cfg.data.image_size, cfg.data.image_size)?;
    pretrain(cfg, &data, Some(out_dir), progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_incomplete_batch() {
        assert_eq!(schedule(100, 32), (3, 32));
        assert_eq!(schedule(10, 32), (1, 10));
    }

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_at(0, 100, 0.05, 256), 0.05);
        assert!(lr_at(100, 100, 0.05, 256).abs() < 1e-18);
    }
}
