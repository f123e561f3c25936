//! Empirical noise-prediction losses.
//!
//! All three losses share one form, the mean over batch items and series
//! positions of `(eps_theta(x_t, c, t) - eps)^2`; they differ only in the
//! population the batch is drawn from and whether `c` is the NULL token.

use rand::Rng;
use rand_distr::StandardNormal;

use super::network::{condition_matrix, NoiseModel};
use super::schedule::NoiseSchedule;
use crate::autodiff::{evaluate, value_and_grad, Graph, Var};
use crate::condition::ConditionVector;
use crate::error::{invalid, Result};
use crate::tensor::{ParamSet, Tensor};

/// Sampled diffusion steps and Gaussian noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    /// `B x L`
    pub eps: Tensor,
}

impl NoiseDraw {
    /// Steps uniform on `1..=T`, then noise row by row.
    pub fn sample<R: Rng + ?Sized>(
        batch: usize,
        len: usize,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(invalid("noise draw needs a non-empty batch"));
        }
        let steps = (0..batch)
            .map(|_| rng.random_range(1..=schedule.steps()))
            .collect();
        let eps = (0..batch * len)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            steps,
            eps: Tensor::matrix(batch, len, eps)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grads: ParamSet,
}

/// Forward-diffuses every series of a batch with its own step and noise.
pub fn diffuse_batch(xs: &[&[f64]], draw: &NoiseDraw, schedule: &NoiseSchedule) -> Result<Tensor> {
    if xs.len() != draw.batch() {
        return Err(invalid(format!(
            "{} series for a draw of {}",
            xs.len(),
            draw.batch()
        )));
    }
    let len = draw.eps.dims2().1;
    let mut data = Vec::with_capacity(xs.len() * len);
    for (i, x) in xs.iter().enumerate() {
        if x.len() != len {
            return Err(invalid(format!(
                "series {i} has {} values, expected {len}",
                x.len()
            )));
        }
        data.extend(super::schedule::diffuse(
            x,
            draw.steps[i],
            draw.eps.row(i),
            schedule,
        )?);
    }
    Tensor::matrix(xs.len(), len, data)
}

struct Prepared {
    x_t: Tensor,
    cond: Tensor,
}

fn prepare<M: NoiseModel + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    conds: Option<&[&ConditionVector]>,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<Prepared> {
    if xs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let x_t = diffuse_batch(xs, draw, schedule)?;
    let cond = match conds {
        Some(c) => {
            if c.len() != xs.len() {
                return Err(invalid("condition count differs from batch size"));
            }
            condition_matrix(c, model.cond_dim())?
        }
        None => Tensor::zeros(&[xs.len(), model.cond_dim()]),
    };
    Ok(Prepared { x_t, cond })
}

fn objective<'p, M: NoiseModel + ?Sized>(
    model: &'p M,
    prep: &'p Prepared,
    draw: &'p NoiseDraw,
) -> impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var> + 'p {
    move |g: &mut Graph<'_>, v: &[Var]| {
        let out = model.forward(g, v, &prep.x_t, &draw.steps, &prep.cond)?;
        let target = g.constant(draw.eps.clone());
        g.mse(out, target)
    }
}

/// Loss and gradients on a fixed draw. `conds = None` means NULL for every
/// item.
pub fn loss_with_draw<M: NoiseModel + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    conds: Option<&[&ConditionVector]>,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<LossEval> {
    let prep = prepare(model, xs, conds, draw, schedule)?;
    let (value, grads) = value_and_grad(model.params(), objective(model, &prep, draw))?;
    Ok(LossEval { value, grads })
}

/// Loss value only, no backward pass.
pub fn loss_value_with_draw<M: NoiseModel + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    conds: Option<&[&ConditionVector]>,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let prep = prepare(model, xs, conds, draw, schedule)?;
    evaluate(model.params(), objective(model, &prep, draw))
}

/// Conditional loss on labeled pairs with a fresh draw, which is returned so
/// the unconditional loss can reuse it.
pub fn loss_conditional<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    batch: &[(&[f64], &ConditionVector)],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LossEval, NoiseDraw)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let draw = NoiseDraw::sample(batch.len(), model.series_len(), schedule, rng)?;
    let xs: Vec<&[f64]> = batch.iter().map(|(x, _)| *x).collect();
    let cs: Vec<&ConditionVector> = batch.iter().map(|(_, c)| *c).collect();
    let eval = loss_with_draw(model, &xs, Some(&cs), &draw, schedule)?;
    Ok((eval, draw))
}

/// Where the unconditional loss gets its `(t, eps)`.
pub enum DrawSource<'a, R: ?Sized> {
    Shared(&'a NoiseDraw),
    Fresh(&'a mut R),
}

/// Unconditional loss, every item conditioned on the NULL token.
pub fn loss_unconditional<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    schedule: &NoiseSchedule,
    source: DrawSource<'_, R>,
) -> Result<LossEval> {
    if xs.is_empty() {
        return Err(invalid("empty batch"));
    }
    match source {
        DrawSource::Shared(draw) => loss_with_draw(model, xs, None, draw, schedule),
        DrawSource::Fresh(rng) => {
            let draw = NoiseDraw::sample(xs.len(), model.series_len(), schedule, rng)?;
            loss_with_draw(model, xs, None, &draw, schedule)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::network::{Arch, ScoreNetwork};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Inverts the forward process using the clean batch it was given, so
    /// it returns exactly `eps + offset`.
    struct Oracle<'a> {
        clean: Vec<Vec<f64>>,
        schedule: &'a NoiseSchedule,
        offset: Vec<f64>,
        params: ParamSet,
    }

    impl NoiseModel for Oracle<'_> {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn series_len(&self) -> usize {
            self.offset.len()
        }
        fn cond_dim(&self) -> usize {
            6
        }
        fn forward(
            &self,
            g: &mut Graph<'_>,
            _p: &[Var],
            x_t: &Tensor,
            steps: &[usize],
            _c: &Tensor,
        ) -> Result<Var> {
            let mut out = Vec::new();
            for (i, row) in x_t.rows().enumerate() {
                let ab = self.schedule.alpha_bar(steps[i]);
                for (j, v) in row.iter().enumerate() {
                    out.push(
                        (v - ab.sqrt() * self.clean[i][j]) / (1.0 - ab).sqrt() + self.offset[j],
                    );
                }
            }
            Ok(g.constant(Tensor::new(x_t.shape().to_vec(), out)?))
        }
    }

    fn data(n: usize, len: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = NoiseSchedule::default();
        let xs = data(5, 8);
        let oracle = Oracle {
            clean: xs.clone(),
            schedule: &s,
            offset: vec![0.0; 8],
            params: ParamSet::new(),
        };
        let c = ConditionVector::null(6);
        let batch: Vec<(&[f64], &ConditionVector)> =
            xs.iter().map(|x| (x.as_slice(), &c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (eval, _) = loss_conditional(&oracle, &batch, &s, &mut rng).unwrap();
        assert!(eval.value < 1e-20, "{}", eval.value);
    }

    #[test]
    fn constant_offset_gives_mean_square_offset() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let xs = data(4, 4);
        let v = vec![0.5, -1.0, 0.25, 2.0];
        let oracle = Oracle {
            clean: xs.clone(),
            schedule: &s,
            offset: v.clone(),
            params: ParamSet::new(),
        };
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eval = loss_unconditional(&oracle, &refs, &s, DrawSource::Fresh(&mut rng)).unwrap();
        let expect = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(
            (eval.value - expect).abs() < 1e-12,
            "{} vs {expect}",
            eval.value
        );
    }

    #[test]
    fn zero_predictor_loss_is_chi_square_mean() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = ScoreNetwork::init(Arch::new(8, 6), &mut rng).unwrap();
        let xs = data(10_000, 8);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let eval = loss_unconditional(&net, &refs, &s, DrawSource::Fresh(&mut rng)).unwrap();
        // mean of 80,000 squared standard normals: sd of the mean is sqrt(2/80000)
        let se = (2.0f64 / 80_000.0).sqrt();
        assert!((eval.value - 1.0).abs() < 3.0 * se, "{}", eval.value);
    }

    #[test]
    fn shared_draw_with_condition_blind_model() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let arch = Arch {
            series_len: 8,
            cond_dim: 6,
            time_dim: 4,
            hidden: vec![12],
            activation: crate::diffusion::Activation::Tanh,
        };
        let net = ScoreNetwork::init(arch, &mut rng).unwrap();
        // zero the condition rows of the first weight matrix: the net ignores c
        let mut flat = net.params().flatten();
        for v in flat.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let mut params = net.params().unflatten(&flat).unwrap();
        let w0 = params.get("layer0.weight").unwrap().clone();
        let mut w = w0.data().to_vec();
        for row in 12..18 {
            for col in 0..12 {
                w[row * 12 + col] = 0.0;
            }
        }
        let mut rebuilt = ParamSet::new();
        for (name, t) in params.iter() {
            let t = if name == "layer0.weight" {
                Tensor::new(w0.shape().to_vec(), w.clone()).unwrap()
            } else {
                t.clone()
            };
            rebuilt.insert(name, t).unwrap();
        }
        params = rebuilt;
        let net = net.with_params(params).unwrap();

        let xs = data(6, 8);
        let c = ConditionVector {
            values: vec![0.7, -0.2, 0.1, 0.9, -1.0, 0.4],
            is_null: false,
        };
        let batch: Vec<(&[f64], &ConditionVector)> =
            xs.iter().map(|x| (x.as_slice(), &c)).collect();
        let (l2, draw) = loss_conditional(&net, &batch, &s, &mut rng).unwrap();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let l1 = loss_unconditional::<_, ChaCha8Rng>(&net, &refs, &s, DrawSource::Shared(&draw))
            .unwrap();
        assert_eq!(l1.value.to_bits(), l2.value.to_bits());
    }

    #[test]
    fn same_set_same_draw_same_value() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ScoreNetwork::init(Arch::new(8, 6), &mut rng).unwrap();
        let xs = data(7, 8);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let draw = NoiseDraw::sample(7, 8, &s, &mut rng).unwrap();
        let a = loss_with_draw(&net, &refs, None, &draw, &s).unwrap();
        let b = loss_value_with_draw(&net, &refs, None, &draw, &s).unwrap();
        assert_eq!(a.value.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_batch_rejected() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ScoreNetwork::init(Arch::new(8, 6), &mut rng).unwrap();
        assert!(loss_conditional(&net, &[], &s, &mut rng).is_err());
        assert!(loss_unconditional(&net, &[], &s, DrawSource::Fresh(&mut rng)).is_err());
    }
}
