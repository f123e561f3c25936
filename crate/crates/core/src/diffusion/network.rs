use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::condition::ConditionVector;
use crate::error::{invalid, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Shape of the perceptron noise predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub series_len: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Arch {
    pub fn new(series_len: usize, cond_dim: usize) -> Self {
        Self {
            series_len,
            cond_dim,
            time_dim: 16,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.series_len + self.time_dim + self.cond_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.series_len));
        dims
    }

    fn validate(&self) -> Result<()> {
        if self.series_len == 0 || !self.time_dim.is_multiple_of(2) || self.hidden.contains(&0) {
            return Err(invalid(format!("bad architecture {self:?}")));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Anything that predicts the added noise from `(x_t, t, c)` and can be
/// differentiated with respect to its parameters.
pub trait NoiseModel: Sync {
    fn params(&self) -> &ParamSet;
    fn series_len(&self) -> usize;
    fn cond_dim(&self) -> usize;

    /// Batched forward pass. `x_t` is `B x L`, `cond` is `B x d_c`, and
    /// `params` are the graph handles of [`NoiseModel::params`] in order.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        x_t: &Tensor,
        steps: &[usize],
        cond: &Tensor,
    ) -> Result<Var>;
}

/// Value-only batched prediction.
pub fn predict_batch<M: NoiseModel + ?Sized>(
    model: &M,
    x_t: &Tensor,
    steps: &[usize],
    cond: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .params()
        .tensors()
        .map(|t| g.constant_ref(t))
        .collect();
    let out = model.forward(&mut g, &vars, x_t, steps, cond)?;
    Ok(g.value(out).clone())
}

/// Stacks condition vectors into a `B x d_c` matrix.
pub fn condition_matrix(conds: &[&ConditionVector], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(conds.len() * dim);
    for c in conds {
        if c.dim() != dim {
            return Err(invalid(format!(
                "condition has dimension {}, model expects {dim}",
                c.dim()
            )));
        }
        data.extend_from_slice(&c.values);
    }
    Tensor::matrix(conds.len(), dim, data)
}

/// Perceptron over `[x_t | time embedding | c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    arch: Arch,
    params: ParamSet,
}

impl ScoreNetwork {
    /// Scaled-normal hidden weights, zero biases, zero output layer. The
    /// first-layer rows fed by the condition start at zero, so a network
    /// trained only on NULL conditions ignores `c` until finetuned.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let mut params = ParamSet::new();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = if i == last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut data: Vec<f64> =
                    (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                if i == 0 {
                    let cond_start = arch.series_len + arch.time_dim;
                    data[cond_start * fan_out..].fill(0.0);
                }
                Tensor::matrix(fan_in, fan_out, data)?
            };
            params.insert(format!("layer{i}.weight"), w)?;
            params.insert(format!("layer{i}.bias"), Tensor::zeros(&[1, fan_out]))?;
        }
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: Arch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let ok = params.len() == 2 * dims.len()
            && dims.iter().enumerate().all(|(i, &(a, b))| {
                params
                    .get(&format!("layer{i}.weight"))
                    .map(|t| t.shape() == [a, b])
                    .unwrap_or(false)
                    && params
                        .get(&format!("layer{i}.bias"))
                        .map(|t| t.shape() == [1, b])
                        .unwrap_or(false)
            });
        if !ok {
            return Err(invalid("parameters do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        Self::from_parts(self.arch.clone(), params)
    }

    /// Noise prediction for one series.
    pub fn predict_noise(&self, x_t: &[f64], t: usize, c: &ConditionVector) -> Result<Vec<f64>> {
        if x_t.len() != self.arch.series_len {
            return Err(invalid(format!(
                "series has {} values, model expects {}",
                x_t.len(),
                self.arch.series_len
            )));
        }
        let x = Tensor::matrix(1, x_t.len(), x_t.to_vec())?;
        let cond = condition_matrix(&[c], self.arch.cond_dim)?;
        Ok(predict_batch(self, &x, &[t], &cond)?.into_data())
    }
}

impl NoiseModel for ScoreNetwork {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn series_len(&self) -> usize {
        self.arch.series_len
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        x_t: &Tensor,
        steps: &[usize],
        cond: &Tensor,
    ) -> Result<Var> {
        let (b, l) = x_t.dims2();
        if l != self.arch.series_len || steps.len() != b || cond.dims2() != (b, self.arch.cond_dim)
        {
            return Err(invalid(format!(
                "forward: x_t {:?}, {} steps, cond {:?} for arch {:?}",
                x_t.shape(),
                steps.len(),
                cond.shape(),
                self.arch
            )));
        }
        if params.len() != self.params.len() {
            return Err(invalid("forward: parameter handle count mismatch"));
        }
        let mut temb = Vec::with_capacity(b * self.arch.time_dim);
        for &t in steps {
            temb.extend(time_embedding(t, self.arch.time_dim));
        }
        let xv = g.constant(x_t.clone());
        let tv = g.constant(Tensor::matrix(b, self.arch.time_dim, temb)?);
        let cv = g.constant(cond.clone());
        let mut h = g.concat(&[xv, tv, cv])?;
        let layers = params.len() / 2;
        for i in 0..layers {
            h = g.matmul(h, params[2 * i])?;
            h = g.add_row(h, params[2 * i + 1])?;
            if i + 1 < layers {
                h = match self.arch.activation {
                    Activation::Silu => g.silu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }
}
