//! Central finite-difference checks of reverse-mode gradients.
//!
//! The op under test is reduced to a scalar by a fixed pseudo-random
//! projection `Σ out_i · r_i`. The analytic side backpropagates that
//! projection through the graph; the numeric side only ever evaluates the
//! forward pass and accumulates the projection in `f64`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Float;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: Float,
    /// Lower bound on the relative-error denominator. Gradients smaller than
    /// this are compared in absolute terms, since central differences carry
    /// roughly `eps_machine · |f| / step` of noise.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: if cfg!(feature = "f64") { 1e-5 } else { 1e-3 },
            floor: if cfg!(feature = "f64") { 1e-3 } else { 1e-1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<GradEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

/// Deterministic projection weights in `[-1, 1]`.
fn projection(n: usize) -> Vec<Float> {
    (0..n).map(|i| ((i as f64 * 0.618_033_988_75 + 0.137).fract() * 2.0 - 1.0) as Float).collect()
}

fn projected<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let r = projection(g.value(out).numel());
    Ok(g.value(out).data().iter().zip(&r).map(|(&o, &w)| o as f64 * w as f64).sum())
}

/// Analytic gradients of the projected output w.r.t. every input.
pub fn analytic_gradients<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(Tensor::new(shape.clone(), projection(shape.iter().product()))?);
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad(v).cloned().expect("parameter leaves always receive a gradient")).collect())
}

/// Central-difference gradients of the projected output.
pub fn numeric_gradients<F>(build: &F, inputs: &[Tensor], step: Float) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut all = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[k].numel());
        for j in 0..inputs[k].numel() {
            let x = inputs[k].data()[j];
            let (xp, xm) = (x + step, x - step);
            work[k].data_mut()[j] = xp;
            let fp = projected(build, &work)?;
            work[k].data_mut()[j] = xm;
            let fm = projected(build, &work)?;
            work[k].data_mut()[j] = x;
            grads.push((fp - fm) / (xp as f64 - xm as f64));
        }
        all.push(grads);
    }
    Ok(all)
}

/// Compares analytic and numeric gradients element by element.
///
/// The per-element error is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let numeric = numeric_gradients(&build, inputs, opts.step)?;
    let mut report = GradCheckReport::default();
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n).enumerate() {
            let av = av as f64;
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(GradEntry { input: k, index: j, analytic: av, numeric: nv, rel_error: rel });
            }
        }
    }
    Ok(report)
}
