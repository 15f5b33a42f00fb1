//! Contrastive objectives and the summed multi-stage loss.

use std::fmt;
use std::str::FromStr;

use haug_tensor::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Default off-diagonal weight of the cross-correlation objective.
pub const BARLOW_LAMBDA: Float = 0.005;

/// Variance guard of the cross-correlation standardization. Small enough
/// that per-column rescaling of the inputs leaves the loss unchanged.
pub const BARLOW_EPS: Float = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Negative cosine with a predictor and stop-gradient.
    SimSiam,
    /// Cross-correlation towards identity.
    BarlowTwins { lambda: Float },
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::SimSiam => "simsiam",
            Objective::BarlowTwins { .. } => "barlow_twins",
        }
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Objective::SimSiam)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "simsiam" => Ok(Objective::SimSiam),
            "barlow_twins" | "barlow" => Ok(Objective::BarlowTwins { lambda: BARLOW_LAMBDA }),
            other => Err(Error::InvalidConfig(format!("unknown objective `{other}`"))),
        }
    }
}

fn batch_of(g: &Graph, v: Var, op: &str) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(Error::InvalidConfig(format!("{op}: expected a [B, D] batch, got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::InvalidConfig(format!("{op}: batch of {} is below 2", s[0])));
    }
    Ok(s[0])
}

/// `Σ_rows cos(a_r, b_r)`.
fn cosine_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize(a, 1)?;
    let bn = g.l2_normalize(b, 1)?;
    let prod = g.mul(an, bn)?;
    Ok(g.sum(prod)?)
}

/// `½·D(p, sg(z′)) + ½·D(p′, sg(z))` with `D` the mean negative cosine.
///
/// `p` and `p_prime` are predictor outputs for `z` and `z_prime`; pass the
/// projections themselves for an identity predictor.
pub fn simsiam_loss(g: &mut Graph, p: Var, p_prime: Var, z: Var, z_prime: Var) -> Result<Var> {
    let b = batch_of(g, z, "simsiam_loss")?;
    for v in [p, p_prime, z_prime] {
        if g.shape(v) != g.shape(z) {
            return Err(haug_tensor::TensorError::ShapeMismatch {
                op: "simsiam_loss",
                lhs: g.shape(z).to_vec(),
                rhs: g.shape(v).to_vec(),
            }
            .into());
        }
    }
    let zt = g.stop_gradient(z);
    let zpt = g.stop_gradient(z_prime);
    let c1 = cosine_sum(g, p, zpt)?;
    let c2 = cosine_sum(g, p_prime, zt)?;
    let total = g.add(c1, c2)?;
    Ok(g.scale(total, -0.5 / b as Float)?)
}

/// `Σᵢ(1 − Cᵢᵢ)² + λ·Σ_{i≠j} Cᵢⱼ²` with `C` the cross-correlation of the
/// batch-standardized inputs.
pub fn barlow_twins_loss(g: &mut Graph, z: Var, z_prime: Var, lambda: Float) -> Result<Var> {
    let b = batch_of(g, z, "barlow_twins_loss")?;
    if g.shape(z) != g.shape(z_prime) {
        return Err(haug_tensor::TensorError::ShapeMismatch {
            op: "barlow_twins_loss",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(z_prime).to_vec(),
        }
        .into());
    }
    let d = g.shape(z)[1];
    let ones = g.constant(Tensor::ones(&[d]));
    let zeros = g.constant(Tensor::zeros(&[d]));
    let (zn, _) = g.batch_norm_train(z, ones, zeros, BARLOW_EPS)?;
    let (zpn, _) = g.batch_norm_train(z_prime, ones, zeros, BARLOW_EPS)?;
    let znt = g.transpose(zn)?;
    let raw = g.matmul(znt, zpn)?;
    let c = g.scale(raw, 1.0 / b as Float)?;
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let off_mask = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 0.0 } else { 1.0 });
    let eye = g.constant(eye);
    let off_mask = g.constant(off_mask);
    let diag = g.mul(c, eye)?;
    let on_gap = g.sub(eye, diag)?;
    let on_sq = g.mul(on_gap, on_gap)?;
    let on = g.sum(on_sq)?;
    let off = g.mul(c, off_mask)?;
    let off_sq = g.mul(off, off)?;
    let off = g.sum(off_sq)?;
    let off = g.scale(off, lambda)?;
    Ok(g.add(on, off)?)
}

/// Per-stage losses and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub objective: Objective,
    pub per_stage: [Float; 4],
    pub overall: Float,
}

impl LossReport {
    /// `((L₁ + L₂) + L₃) + L₄`, the same order [`overall_loss`] uses.
    pub fn from_stages(objective: Objective, per_stage: [Float; 4]) -> Self {
        let overall = ((per_stage[0] + per_stage[1]) + per_stage[2]) + per_stage[3];
        Self { objective, per_stage, overall }
    }
}

/// Sums the four stage losses. `weights` is an experiment override; without
/// it the sum is unweighted and carries no extra ops.
pub fn overall_loss(g: &mut Graph, stages: [Var; 4], weights: Option<[Float; 4]>) -> Result<Var> {
    let mut terms = stages;
    if let Some(w) = weights {
        for (t, &w) in terms.iter_mut().zip(&w) {
            *t = g.scale(*t, w)?;
        }
    }
    let a = g.add(terms[0], terms[1])?;
    let b = g.add(a, terms[2])?;
    Ok(g.add(b, terms[3])?)
}

/// Report for a built overall loss. Per-stage entries are unweighted.
pub fn report(g: &Graph, objective: Objective, stages: [Var; 4], overall: Var) -> Result<LossReport> {
    let mut per_stage = [0.0; 4];
    for (v, s) in per_stage.iter_mut().zip(stages) {
        *v = g.value(s).item()?;
    }
    Ok(LossReport { objective, per_stage, overall: g.value(overall).item()? })
}
