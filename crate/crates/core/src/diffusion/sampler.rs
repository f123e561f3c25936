use rand::Rng;
use rand_distr::StandardNormal;

use super::network::{condition_matrix, predict_batch, NoiseModel};
use super::schedule::NoiseSchedule;
use crate::condition::ConditionVector;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Draws one series by ancestral sampling with classifier-free guidance.
pub fn sample<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    c: &ConditionVector,
    w: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(sample_batch(model, schedule, std::slice::from_ref(c), w, rng)?.remove(0))
}

/// Guided noise estimate `(1 + w) * eps(c) - w * eps(NULL)`, row by row.
/// NULL rows and `w = 0` use a single prediction.
fn guided_noise<M: NoiseModel + ?Sized>(
    model: &M,
    x: &Tensor,
    steps: &[usize],
    conds: &[&ConditionVector],
    w: f64,
) -> Result<Tensor> {
    let cond = condition_matrix(conds, model.cond_dim())?;
    let cond_eps = predict_batch(model, x, steps, &cond)?;
    if w == 0.0 || conds.iter().all(|c| c.is_null) {
        return Ok(cond_eps);
    }
    let null = Tensor::zeros(&[conds.len(), model.cond_dim()]);
    let null_eps = predict_batch(model, x, steps, &null)?;
    let len = x.dims2().1;
    let mut out = Vec::with_capacity(cond_eps.len());
    for (i, c) in conds.iter().enumerate() {
        let (ce, ue) = (cond_eps.row(i), null_eps.row(i));
        if c.is_null {
            out.extend_from_slice(ue);
        } else {
            out.extend((0..len).map(|j| (1.0 + w) * ce[j] - w * ue[j]));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Runs one reverse chain per condition, all chains batched together.
///
/// Randomness is consumed as: the `B x L` starting noise row by row, then for
/// each step `t > 1` a `B x L` block of fresh noise.
pub fn sample_batch<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    conds: &[ConditionVector],
    w: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if !(w >= 0.0) || !w.is_finite() {
        return Err(invalid(format!("guidance weight must be >= 0, got {w}")));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let b = conds.len();
    let len = model.series_len();
    let refs: Vec<&ConditionVector> = conds.iter().collect();
    let mut x: Vec<f64> = (0..b * len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let xt = Tensor::matrix(b, len, x)?;
        let steps = vec![t; b];
        let eps = guided_noise(model, &xt, &steps, &refs, w)?;
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = schedule.sigma2(t).sqrt();
        x = xt
            .data()
            .iter()
            .zip(eps.data())
            .map(|(xv, ev)| inv_sqrt_alpha * (xv - coef * ev))
            .collect();
        if t > 1 {
            for v in x.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let out = Tensor::matrix(b, len, x)?;
    Ok(out.rows().map(|r| r.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Var};
    use crate::diffusion::network::{Arch, ScoreNetwork};
    use crate::tensor::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Returns `x_t * 0.1 + (row sum of c)` and counts NULL-batch calls.
    struct Probe {
        params: ParamSet,
        null_calls: AtomicUsize,
        calls: AtomicUsize,
    }

    impl NoiseModel for Probe {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn series_len(&self) -> usize {
            4
        }
        fn cond_dim(&self) -> usize {
            2
        }
        fn forward(
            &self,
            g: &mut Graph<'_>,
            _p: &[Var],
            x_t: &Tensor,
            _s: &[usize],
            c: &Tensor,
        ) -> Result<Var> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if c.data().iter().all(|&v| v == 0.0) {
                self.null_calls.fetch_add(1, Ordering::SeqCst);
            }
            let mut out = Vec::new();
            for (i, row) in x_t.rows().enumerate() {
                let s: f64 = c.row(i).iter().sum();
                out.extend(row.iter().map(|v| 0.1 * v + s));
            }
            Ok(g.constant(Tensor::new(x_t.shape().to_vec(), out)?))
        }
    }

    fn probe() -> Probe {
        Probe {
            params: ParamSet::new(),
            null_calls: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn zero_guidance_skips_the_null_branch() {
        let p = probe();
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let c = ConditionVector {
            values: vec![0.5, 0.25],
            is_null: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        sample(&p, &s, &c, 0.0, &mut rng).unwrap();
        assert_eq!(p.null_calls.load(Ordering::SeqCst), 0);
        assert_eq!(p.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn guidance_blends_both_branches() {
        let p = probe();
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = ConditionVector {
            values: vec![0.5, 0.25],
            is_null: false,
        };
        let eps = guided_noise(&p, &x, &[1], &[&c], 2.0).unwrap();
        // cond = 0.1 x + 0.75, null = 0.1 x, blend = 0.1 x + 3 * 0.75
        for (e, xv) in eps.data().iter().zip(x.data()) {
            assert!((e - (0.1 * xv + 2.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn null_condition_ignores_guidance_weight() {
        let s = NoiseSchedule::linear(6, 0.05, 0.3).unwrap();
        let null = ConditionVector::null(2);
        let a = sample(&probe(), &s, &null, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample(&probe(), &s, &null, 3.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_with_zero_net_rescales() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ScoreNetwork::init(Arch::new(6, 6), &mut rng).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let out = sample(&net, &s, &ConditionVector::null(6), 0.0, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let x1: Vec<f64> = (0..6)
            .map(|_| r2.sample::<f64, _>(StandardNormal))
            .collect();
        for (o, x) in out.iter().zip(x1) {
            assert!((o - x / 0.5f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn same_seed_same_series() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ScoreNetwork::init(Arch::new(6, 6), &mut rng).unwrap();
        let flat: Vec<f64> = (0..net.params().num_scalars())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        let net = net
            .with_params(net.params().unflatten(&flat).unwrap())
            .unwrap();
        let c = ConditionVector {
            values: vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.0],
            is_null: false,
        };
        let a = sample(&net, &s, &c, 1.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&net, &s, &c, 1.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_weight_rejected() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&probe(), &s, &ConditionVector::null(2), -0.1, &mut rng).is_err());
    }
}
