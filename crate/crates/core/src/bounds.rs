//! Finite-class generalization bounds for the constrained objective and a
//! Monte-Carlo check of their coverage.
//!
//! For `m` samples,
//!
//! ```text
//! eps_m = sqrt(C s2) * sqrt(log_term / m)  max  C s2 * log_term / m
//! s2 = sigma2 + 1,  C = 8 sqrt(2),  log_term = log|Theta| + log(2 / delta)
//! ```
//!
//! The concentration argument applies Bernstein's inequality to squared
//! sub-Gaussian variables with separate constants `8 sqrt(2)` and `8` on the
//! two branches; this module uses the single constant `C` on both.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::condition::ConditionVector;
use crate::diffusion::{
    condition_matrix, diffuse_batch, predict_batch, NoiseDraw, NoiseModel, NoiseSchedule,
};
use crate::error::{invalid, Result};
use crate::seeding::stream;

/// `8 * sqrt(2)`.
pub const C: f64 = 8.0 * std::f64::consts::SQRT_2;

/// Inputs of the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsInput {
    /// Variance proxy of the sub-Gaussian noise predictions.
    pub sigma2: f64,
    /// Failure probability.
    pub delta: f64,
    /// Unlabeled sample count.
    pub n: usize,
    /// Labeled sample count.
    pub np: usize,
    /// Effective hypothesis-set cardinality.
    pub theta_card: f64,
}

impl BoundsInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(invalid(format!(
                "sigma2 must be finite and >= 0, got {}",
                self.sigma2
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.theta_card >= 1.0 && self.theta_card.is_finite()) {
            return Err(invalid(format!(
                "|Theta| must be >= 1, got {}",
                self.theta_card
            )));
        }
        if self.n < 1 || self.np < 1 {
            return Err(invalid("sample counts must be >= 1"));
        }
        Ok(())
    }

    pub fn sigma2_tilde(&self) -> f64 {
        self.sigma2 + 1.0
    }

    pub fn log_term(&self) -> f64 {
        self.theta_card.ln() + (2.0 / self.delta).ln()
    }
}

/// Deviation bound for `m` samples. `input.n` and `input.np` are ignored.
pub fn epsilon_bound(m: usize, input: &BoundsInput) -> Result<f64> {
    if m < 1 {
        return Err(invalid("sample count must be >= 1"));
    }
    input.validate()?;
    let cs = C * input.sigma2_tilde();
    let r = input.log_term() / m as f64;
    Ok((cs * r).sqrt().max(cs * r))
}

/// The three guarantees evaluated for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub input: BoundsInput,
    pub xi: f64,
    pub c: f64,
    pub sigma2_tilde: f64,
    pub log_term: f64,
    pub eps_n: f64,
    pub eps_np: f64,
    /// Width of the relaxed empirical feasible set, `eps_n + eps_np`.
    pub eps: f64,
    /// Excess primary loss of the empirical solution, at most `2 eps_np`.
    pub guarantee_l2_slack: f64,
    /// Constraint violation of the empirical solution, at most
    /// `2 eps_np + 2 eps_n`.
    pub guarantee_l1p_slack: f64,
    /// `xi + guarantee_l1p_slack`.
    pub l1p_ceiling: f64,
    pub assumption: String,
}

pub fn bound_report(input: &BoundsInput, xi: f64) -> Result<BoundsReport> {
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(invalid(format!("constraint level must be >= 0, got {xi}")));
    }
    let eps_n = epsilon_bound(input.n, input)?;
    let eps_np = epsilon_bound(input.np, input)?;
    let l1p = 2.0 * eps_np + 2.0 * eps_n;
    Ok(BoundsReport {
        input: *input,
        xi,
        c: C,
        sigma2_tilde: input.sigma2_tilde(),
        log_term: input.log_term(),
        eps_n,
        eps_np,
        eps: eps_n + eps_np,
        guarantee_l2_slack: 2.0 * eps_np,
        guarantee_l1p_slack: l1p,
        l1p_ceiling: xi + l1p,
        assumption: format!(
            "parameter space treated as a finite set of {} hypotheses; noise predictions sub-Gaussian with variance {}",
            input.theta_card, input.sigma2
        ),
    })
}

/// Fraction of trials in which some hypothesis' empirical mean of `X^2`,
/// `X ~ N(0, sigma2_h)`, misses `sigma2_h` by more than [`epsilon_bound`].
///
/// The bound uses the largest variance in `variances` and `|Theta| =
/// variances.len()`. Trial `i` draws from its own seeded stream.
pub fn monte_carlo_coverage(
    variances: &[f64],
    m: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if variances.is_empty() {
        return Err(invalid("hypothesis family is empty"));
    }
    if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(invalid("variances must be finite and >= 0"));
    }
    if trials < 100 {
        return Err(invalid(format!("need at least 100 trials, got {trials}")));
    }
    let input = BoundsInput {
        sigma2: variances.iter().cloned().fold(0.0, f64::max),
        delta,
        n: m,
        np: m,
        theta_card: variances.len() as f64,
    };
    let eps = epsilon_bound(m, &input)?;
    let mut violations = 0usize;
    for trial in 0..trials {
        let mut rng = stream(seed, &format!("bounds/trial/{trial}"));
        let worst = variances
            .iter()
            .map(|&s2| {
                let sd = s2.sqrt();
                let mean_sq = (0..m)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (sd * z).powi(2)
                    })
                    .sum::<f64>()
                    / m as f64;
                (mean_sq - s2).abs()
            })
            .fold(0.0, f64::max);
        if worst > eps {
            violations += 1;
        }
    }
    Ok(violations as f64 / trials as f64)
}

/// Plug-in variance of `eps_hat - eps` over random diffused samples with the
/// NULL condition. Heuristic: it measures one parameter point, not the class.
pub fn estimate_sigma2<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    data: &[&[f64]],
    schedule: &NoiseSchedule,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() || samples == 0 {
        return Err(invalid("need data and a positive sample count"));
    }
    let xs: Vec<&[f64]> = (0..samples)
        .map(|_| data[rng.random_range(0..data.len())])
        .collect();
    let draw = NoiseDraw::sample(samples, model.series_len(), schedule, rng)?;
    let x_t = diffuse_batch(&xs, &draw, schedule)?;
    let null = ConditionVector::null(model.cond_dim());
    let conds = condition_matrix(&vec![&null; samples], model.cond_dim())?;
    let pred = predict_batch(model, &x_t, &draw.steps, &conds)?;
    let resid: Vec<f64> = pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(p, e)| p - e)
        .collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    Ok(resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64)
}
