//! Constrained finetuning by dynamic-barrier lexicographic descent.
//!
//! Each step minimises the primary loss `l2` while keeping the constraint
//! loss `l1p` near or below `gamma * rho * xi_hat`. The update is
//! `theta - omega * (grad_l2 + lambda * grad_l1p)` where
//!
//! ```text
//! phi    = min(alpha * (l1p - gamma * anchor), beta * |grad_l1p|^2)
//! lambda = max((phi - grad_l2 . grad_l1p) / |grad_l1p|^2, 0)
//! ```
//!
//! `lambda` is the minimiser over `lambda >= 0` of
//! `0.5 * |grad_l2 + lambda * grad_l1p|^2 - lambda * phi`, the dual of
//! projecting `grad_l2` onto `{d : grad_l1p . d >= phi}`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condition::ConditionVector;
use crate::diffusion::{
    loss_value_with_draw, loss_with_draw, NoiseDraw, NoiseModel, NoiseSchedule, ScoreNetwork,
};
use crate::error::{invalid, Result};
use crate::tensor::ParamSet;

/// Hyperparameters of the constrained update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexoptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Step size.
    pub omega: f64,
    /// Relaxation multiplier applied to `xi_hat`.
    pub rho: f64,
    /// Probability of replacing the condition with NULL in the primary loss.
    pub p_uncond: f64,
    /// Below this squared constraint-gradient norm, `lambda` is 0.
    pub eps_div: f64,
    /// Raw constraint anchor, the pretrained unconditional loss.
    pub xi_hat: f64,
}

impl Default for LexoptConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            omega: 0.2,
            rho: 1.05,
            p_uncond: 0.1,
            eps_div: 1e-12,
            xi_hat: 0.0,
        }
    }
}

impl LexoptConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("omega", self.omega),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(invalid(format!(
                "p_uncond must lie in [0, 1], got {}",
                self.p_uncond
            )));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(invalid(format!("rho must be >= 1, got {}", self.rho)));
        }
        if !(self.xi_hat >= 0.0 && self.xi_hat.is_finite()) {
            return Err(invalid(format!("xi_hat must be >= 0, got {}", self.xi_hat)));
        }
        if !(self.eps_div >= 0.0) {
            return Err(invalid("eps_div must be >= 0"));
        }
        Ok(())
    }

    /// `rho * xi_hat`.
    pub fn relaxed_anchor(&self) -> f64 {
        self.rho * self.xi_hat
    }

    /// `gamma * rho * xi_hat`, the level the constraint loss is held to.
    pub fn constraint_level(&self) -> f64 {
        self.gamma * self.relaxed_anchor()
    }
}

/// Dynamic barrier `min(alpha * (l1p - gamma * anchor), beta * |grad|^2)`.
pub fn barrier_phi(l1p: f64, grad_l1p_normsq: f64, cfg: &LexoptConfig) -> f64 {
    (cfg.alpha * (l1p - cfg.constraint_level())).min(cfg.beta * grad_l1p_normsq)
}

/// Closed-form multiplier on the constraint gradient.
pub fn lambda_weight(phi: f64, grad_l2: &[f64], grad_l1p: &[f64], eps_div: f64) -> Result<f64> {
    if grad_l2.len() != grad_l1p.len() {
        return Err(invalid(format!(
            "gradient lengths differ: {} vs {}",
            grad_l2.len(),
            grad_l1p.len()
        )));
    }
    let norm_sq: f64 = grad_l1p.iter().map(|v| v * v).sum();
    if norm_sq < eps_div || norm_sq == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = grad_l2.iter().zip(grad_l1p).map(|(a, b)| a * b).sum();
    Ok(((phi - dot) / norm_sq).max(0.0))
}

/// `params - omega * (grad_l2 + lambda * grad_l1p)`.
pub fn lex_step(
    params: &ParamSet,
    grad_l2: &ParamSet,
    grad_l1p: &ParamSet,
    lambda: f64,
    omega: f64,
) -> Result<ParamSet> {
    if !params.same_layout(grad_l2) || !params.same_layout(grad_l1p) {
        return Err(invalid("parameter and gradient layouts differ"));
    }
    let (p, g2, g1) = (params.flatten(), grad_l2.flatten(), grad_l1p.flatten());
    let next: Vec<f64> = p
        .iter()
        .zip(&g2)
        .zip(&g1)
        .map(|((t, a), b)| t - omega * (a + lambda * b))
        .collect();
    params.unflatten(&next)
}

/// Per-step record of a constrained run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub l2: f64,
    pub l1p: f64,
    pub phi: f64,
    pub lambda: f64,
    pub grad_norm_l2: f64,
    pub grad_norm_l1p: f64,
    pub constraint_ok: bool,
}

pub const TRACE_HEADER: &str = "step,l2,l1p,phi,lambda,grad_norm_l2,grad_norm_l1p,constraint_ok";

pub fn write_traces<W: Write>(mut out: W, traces: &[StepTrace]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for t in traces {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            t.step, t.l2, t.l1p, t.phi, t.lambda, t.grad_norm_l2, t.grad_norm_l1p, t.constraint_ok
        )?;
    }
    Ok(())
}

pub fn save_traces(path: impl AsRef<Path>, traces: &[StepTrace]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_traces(std::io::BufWriter::new(file), traces)
}

/// Parses the output of [`write_traces`].
pub fn read_traces<R: std::io::BufRead>(input: R) -> Result<Vec<StepTrace>> {
    let bad = |line: usize, why: &str| crate::Error::Data(format!("trace line {line}: {why}"));
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim_end() == TRACE_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(bad(i + 2, "expected 8 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        out.push(StepTrace {
            step: f[0].parse().map_err(|_| bad(i + 2, "bad step"))?,
            l2: num(1)?,
            l1p: num(2)?,
            phi: num(3)?,
            lambda: num(4)?,
            grad_norm_l2: num(5)?,
            grad_norm_l1p: num(6)?,
            constraint_ok: f[7].parse().map_err(|_| bad(i + 2, "bad flag"))?,
        });
    }
    Ok(out)
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<StepTrace>> {
    read_traces(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: ParamSet,
}

/// A two-objective problem: primary loss and constraint loss.
pub trait LexProblem {
    /// Losses for one step at `params`. The constraint is only needed when
    /// `with_constraint` is set; implementations must consume `rng`
    /// identically either way.
    fn step_losses<R: Rng + ?Sized>(
        &mut self,
        params: &ParamSet,
        rng: &mut R,
        with_constraint: bool,
    ) -> Result<(LossGrad, Option<LossGrad>)>;
}

/// Runs `steps` constrained updates in place. On error `params` holds the
/// last parameters that produced finite losses.
pub fn lex_descent<P: LexProblem, R: Rng + ?Sized>(
    problem: &mut P,
    params: &mut ParamSet,
    cfg: &LexoptConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<StepTrace>> {
    cfg.validate()?;
    let mut traces = Vec::with_capacity(steps);
    let mut last_good: Option<ParamSet> = None;
    for step in 0..steps {
        let (l2, l1p) = match problem.step_losses(params, rng, true) {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = last_good {
                    *params = p;
                }
                return Err(e);
            }
        };
        let l1p = l1p.ok_or_else(|| invalid("problem did not return the constraint loss"))?;
        let g2 = l2.grad.flatten();
        let g1 = l1p.grad.flatten();
        let g1_sq: f64 = g1.iter().map(|v| v * v).sum();
        let phi = barrier_phi(l1p.value, g1_sq, cfg);
        let lambda = lambda_weight(phi, &g2, &g1, cfg.eps_div)?;
        let next = lex_step(params, &l2.grad, &l1p.grad, lambda, cfg.omega)?;
        last_good = Some(std::mem::replace(params, next));
        traces.push(StepTrace {
            step,
            l2: l2.value,
            l1p: l1p.value,
            phi,
            lambda,
            grad_norm_l2: g2.iter().map(|v| v * v).sum::<f64>().sqrt(),
            grad_norm_l1p: g1_sq.sqrt(),
            constraint_ok: l1p.value <= cfg.constraint_level(),
        });
    }
    Ok(traces)
}

/// Plain gradient descent on the primary loss; returns the primary loss
/// seen at each step. Failure handling matches [`lex_descent`].
pub fn plain_descent<P: LexProblem, R: Rng + ?Sized>(
    problem: &mut P,
    params: &mut ParamSet,
    omega: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(omega > 0.0) {
        return Err(invalid(format!("omega must be positive, got {omega}")));
    }
    let mut losses = Vec::with_capacity(steps);
    let mut last_good: Option<ParamSet> = None;
    for _ in 0..steps {
        let (l2, _) = match problem.step_losses(params, rng, false) {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = last_good {
                    *params = p;
                }
                return Err(e);
            }
        };
        let next = params.axpy(-omega, &l2.grad)?;
        last_good = Some(std::mem::replace(params, next));
        losses.push(l2.value);
    }
    Ok(losses)
}

/// Averages `n_batches` independent evaluations of a batch loss.
pub fn estimate_anchor<R: Rng + ?Sized>(
    n_batches: usize,
    rng: &mut R,
    mut batch_loss: impl FnMut(&mut R) -> Result<f64>,
) -> Result<f64> {
    if n_batches < 1 {
        return Err(invalid("need at least one batch"));
    }
    let mut total = 0.0;
    for _ in 0..n_batches {
        total += batch_loss(rng)?;
    }
    Ok(total / n_batches as f64)
}

/// Monte-Carlo estimate of the unconditional loss of a pretrained model over
/// `data`, using random minibatches with fresh `(t, eps)`. This is the raw
/// anchor; [`LexoptConfig::rho`] relaxes it.
pub fn compute_xi_hat<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    data: &[&[f64]],
    schedule: &NoiseSchedule,
    rng: &mut R,
    n_batches: usize,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() || batch_size == 0 {
        return Err(invalid("empty data or batch size"));
    }
    let b = batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    estimate_anchor(n_batches, rng, |rng| {
        let (picked, _) = order.partial_shuffle(rng, b);
        let xs: Vec<&[f64]> = picked.iter().map(|&i| data[i]).collect();
        let draw = NoiseDraw::sample(b, model.series_len(), schedule, rng)?;
        loss_value_with_draw(model, &xs, None, &draw, schedule)
    })
}

/// Labeled series served in shuffled epochs, with conditional dropout on the
/// primary loss and the NULL condition on the constraint loss.
pub struct DiffusionProblem<'a> {
    arch_net: &'a ScoreNetwork,
    series: &'a [&'a [f64]],
    conds: &'a [ConditionVector],
    schedule: &'a NoiseSchedule,
    batch_size: usize,
    p_uncond: f64,
    null: ConditionVector,
    queue: Vec<usize>,
    /// Number of labeled items drawn so far.
    pub items_seen: usize,
}

impl<'a> DiffusionProblem<'a> {
    pub fn new(
        net: &'a ScoreNetwork,
        series: &'a [&'a [f64]],
        conds: &'a [ConditionVector],
        schedule: &'a NoiseSchedule,
        batch_size: usize,
        p_uncond: f64,
    ) -> Result<Self> {
        if series.is_empty() {
            return Err(invalid("labeled set is empty"));
        }
        if series.len() != conds.len() {
            return Err(invalid("series and condition counts differ"));
        }
        if batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&p_uncond) {
            return Err(invalid("p_uncond must lie in [0, 1]"));
        }
        Ok(Self {
            arch_net: net,
            series,
            conds,
            schedule,
            batch_size,
            p_uncond,
            null: ConditionVector::null(net.arch().cond_dim),
            queue: Vec::new(),
            items_seen: 0,
        })
    }

    /// Steps per pass over the labeled set.
    pub fn steps_per_epoch(&self) -> usize {
        self.series.len().div_ceil(self.batch_size)
    }

    fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut order: Vec<usize> = (0..self.series.len()).collect();
            order.shuffle(rng);
            order.reverse();
            self.queue = order;
        }
        let take = self.batch_size.min(self.queue.len());
        let batch: Vec<usize> = (0..take).filter_map(|_| self.queue.pop()).collect();
        self.items_seen += batch.len();
        batch
    }
}

impl LexProblem for DiffusionProblem<'_> {
    fn step_losses<R: Rng + ?Sized>(
        &mut self,
        params: &ParamSet,
        rng: &mut R,
        with_constraint: bool,
    ) -> Result<(LossGrad, Option<LossGrad>)> {
        let idx = self.next_batch(rng);
        let net = self.arch_net.with_params(params.clone())?;
        let draw = NoiseDraw::sample(idx.len(), net.arch().series_len, self.schedule, rng)?;
        let xs: Vec<&[f64]> = idx.iter().map(|&i| self.series[i]).collect();
        let conds: Vec<&ConditionVector> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < self.p_uncond {
                    &self.null
                } else {
                    &self.conds[i]
                }
            })
            .collect();
        let l2 = loss_with_draw(&net, &xs, Some(&conds), &draw, self.schedule)?;
        let l1p = if with_constraint {
            let e = loss_with_draw(&net, &xs, None, &draw, self.schedule)?;
            Some(LossGrad {
                value: e.value,
                grad: e.grads,
            })
        } else {
            None
        };
        Ok((
            LossGrad {
                value: l2.value,
                grad: l2.grads,
            },
            l1p,
        ))
    }
}

/// Outcome of a finetuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRun {
    pub traces: Vec<StepTrace>,
    pub items_seen: usize,
}

/// Constrained finetuning of `net` on labeled pairs for `epochs` passes.
///
/// `cfg.xi_hat` must hold the pretrained anchor. On a numerical failure the
/// error is returned and `net` keeps the last good parameters.
#[allow(clippy::too_many_arguments)]
pub fn finetune<R: Rng + ?Sized>(
    net: &mut ScoreNetwork,
    series: &[&[f64]],
    conds: &[ConditionVector],
    schedule: &NoiseSchedule,
    cfg: &LexoptConfig,
    rng: &mut R,
    epochs: usize,
    batch_size: usize,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let template = net.clone();
    let mut problem =
        DiffusionProblem::new(&template, series, conds, schedule, batch_size, cfg.p_uncond)?;
    let steps = epochs * problem.steps_per_epoch();
    let mut params = net.params().clone();
    let result = lex_descent(&mut problem, &mut params, cfg, steps, rng);
    *net = net.with_params(params)?;
    Ok(FinetuneRun {
        traces: result?,
        items_seen: problem.items_seen,
    })
}

/// The same loop with `lambda` fixed at 0 and no constraint evaluation.
#[allow(clippy::too_many_arguments)]
pub fn plain_finetune<R: Rng + ?Sized>(
    net: &mut ScoreNetwork,
    series: &[&[f64]],
    conds: &[ConditionVector],
    schedule: &NoiseSchedule,
    omega: f64,
    p_uncond: f64,
    rng: &mut R,
    epochs: usize,
    batch_size: usize,
) -> Result<(Vec<f64>, usize)> {
    let template = net.clone();
    let mut problem =
        DiffusionProblem::new(&template, series, conds, schedule, batch_size, p_uncond)?;
    let steps = epochs * problem.steps_per_epoch();
    let mut params = net.params().clone();
    let result = plain_descent(&mut problem, &mut params, omega, steps, rng);
    *net = net.with_params(params)?;
    Ok((result?, problem.items_seen))
}

/// Two-parameter quadratic test problem: primary `|theta - target|^2`,
/// constraint `|theta|^2`, both with exact gradients.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticToy {
    pub target: [f64; 2],
}

impl QuadraticToy {
    pub fn params(theta: [f64; 2]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "theta",
            crate::tensor::Tensor::new(vec![2], theta.to_vec()).expect("finite"),
        )
        .expect("fresh");
        p
    }

    pub fn theta(params: &ParamSet) -> [f64; 2] {
        let d = params.flatten();
        [d[0], d[1]]
    }
}

impl LexProblem for QuadraticToy {
    fn step_losses<R: Rng + ?Sized>(
        &mut self,
        params: &ParamSet,
        _rng: &mut R,
        with_constraint: bool,
    ) -> Result<(LossGrad, Option<LossGrad>)> {
        let [a, b] = Self::theta(params);
        let [ta, tb] = self.target;
        let l2 = LossGrad {
            value: (a - ta).powi(2) + (b - tb).powi(2),
            grad: params.unflatten(&[2.0 * (a - ta), 2.0 * (b - tb)])?,
        };
        let l1p = with_constraint
            .then(|| -> Result<LossGrad> {
                Ok(LossGrad {
                    value: a * a + b * b,
                    grad: params.unflatten(&[2.0 * a, 2.0 * b])?,
                })
            })
            .transpose()?;
        Ok((l2, l1p))
    }
}
