//! End-to-end pipeline: pretraining, the three finetuning modes,
//! controllability evaluation and plot-data export.
//!
//! Every random stream is derived from a run seed and a fixed label (see
//! [`crate::seeding`]), so a `(dataset seed, training seed, eval seed)`
//! triple reproduces every artifact byte for byte.
//!
//! Stored series lie in `[0, 1]`; the diffusion model sees `2x - 1`.
//! Functions here take and return stored-space series and convert at the
//! model boundary.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::condition::{
    parse_text, ConditionEncoder, ConditionVector, Feature, FeatureBins, FeatureVector, FEATURES,
};
use crate::diffusion::{
    loss_value_with_draw, loss_with_draw, sample_batch, Activation, Arch, Checkpoint, NoiseDraw,
    NoiseModel, NoiseSchedule, ScoreNetwork,
};
use crate::error::{invalid, Error, Result};
use crate::lexopt::{
    compute_xi_hat, finetune, plain_finetune, save_traces, LexoptConfig, StepTrace,
};
use crate::seeding::{stream, Rng};
use crate::synthdata::{extract_features, minmax_normalize, Dataset};

pub const DEFAULT_LABEL_FRACTIONS: [f64; 5] = [0.02, 0.05, 0.10, 0.20, 0.40];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Checkpoint header keys written by the pipeline.
pub mod keys {
    pub const ENCODER: &str = "encoder";
    pub const XI_HAT: &str = "xi_hat";
    pub const INITIAL_L1: &str = "initial_l1";
    pub const FINAL_L1: &str = "final_l1";
    pub const MODE: &str = "mode";
}

/// Finetuning mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Constrained finetuning of a pretrained model.
    Text2Data,
    /// The same finetuning without the constraint.
    Unconstrained,
    /// Conditional training from scratch on the labeled pairs only.
    Supervised,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Text2Data, Mode::Unconstrained, Mode::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Text2Data => "text2data",
            Mode::Unconstrained => "unconstrained",
            Mode::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected text2data, unconstrained or supervised"
                ))
            })
    }
}

/// Stage-1 training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient-descent step size.
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Batches averaged for the constraint anchor.
    pub xi_batches: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let arch = Arch::new(crate::synthdata::DEFAULT_LEN, 6);
        let schedule = NoiseSchedule::default();
        Self {
            epochs: 1500,
            batch_size: 64,
            lr: 0.5,
            seed: 0,
            hidden: arch.hidden,
            time_dim: arch.time_dim,
            activation: arch.activation,
            steps: schedule.steps(),
            beta_start: schedule.beta_start(),
            beta_end: schedule.beta_end(),
            xi_batches: 100,
        }
    }
}

impl PretrainConfig {
    fn arch(&self, series_len: usize, cond_dim: usize) -> Arch {
        Arch {
            series_len,
            cond_dim,
            time_dim: self.time_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

/// Result of stage-1 training.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// Unconditional loss over the data before and after training, on one
    /// fixed noise draw.
    pub initial_l1: f64,
    pub final_l1: f64,
    /// Monte-Carlo constraint anchor at the trained parameters.
    pub xi_hat: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Stored `[0, 1]` series to model space.
pub fn to_model_space(series: &[&[f64]]) -> Vec<Vec<f64>> {
    series
        .iter()
        .map(|s| s.iter().map(|v| 2.0 * v - 1.0).collect())
        .collect()
}

/// Model-space series back to stored space.
pub fn from_model_space(mut series: Vec<f64>) -> Vec<f64> {
    series.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    series
}

fn as_slices(series: &[Vec<f64>]) -> Vec<&[f64]> {
    series.iter().map(Vec::as_slice).collect()
}

/// Unconditional loss over model-space `series` on a draw fixed by `seed`.
fn probe_l1<M: NoiseModel + ?Sized>(
    model: &M,
    series: &[&[f64]],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, "probe");
    let draw = NoiseDraw::sample(series.len(), model.series_len(), schedule, &mut rng)?;
    loss_value_with_draw(model, series, None, &draw, schedule)
}

/// Held-out unconditional loss, averaged over `rounds` passes with draws
/// fixed by `seed` so models can be compared on common noise.
pub fn heldout_l1<M: NoiseModel + ?Sized>(
    model: &M,
    series: &[&[f64]],
    schedule: &NoiseSchedule,
    seed: u64,
    rounds: usize,
) -> Result<f64> {
    if rounds == 0 {
        return Err(invalid("rounds must be positive"));
    }
    let owned = to_model_space(series);
    let series = as_slices(&owned);
    let mut total = 0.0;
    for r in 0..rounds {
        total += probe_l1(
            model,
            &series,
            schedule,
            crate::seeding::derive_seed(seed, &format!("heldout/{r}")),
        )?;
    }
    Ok(total / rounds as f64)
}

/// Trains the unconditional model on every series with the NULL condition.
pub fn pretrain(
    train: &Dataset,
    bins: &FeatureBins,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pretraining needs lr > 0 and batch_size > 0".into(),
        ));
    }
    let encoder = ConditionEncoder::new(bins.clone(), false);
    let schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let mut net = ScoreNetwork::init(
        cfg.arch(train.series_len, encoder.dim()),
        &mut stream(cfg.seed, "pretrain/init"),
    )?;
    let owned = to_model_space(&train.all_series());
    let series = as_slices(&owned);
    let probe_seed = crate::seeding::derive_seed(cfg.seed, "pretrain/probe");
    let initial_l1 = probe_l1(&net, &series, &schedule, probe_seed)?;

    let mut rng = stream(cfg.seed, "pretrain/batches");
    let mut order: Vec<usize> = (0..series.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| series[i]).collect();
            let draw = NoiseDraw::sample(xs.len(), net.arch().series_len, &schedule, &mut rng)?;
            let eval = loss_with_draw(&net, &xs, None, &draw, &schedule)?;
            let next = net.params().axpy(-cfg.lr, &eval.grads)?;
            net = net.with_params(next)?;
            sum += eval.value;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        log::debug!(
            "pretrain epoch {} loss {:.5}",
            epoch_losses.len(),
            sum / batches as f64
        );
    }

    let final_l1 = probe_l1(&net, &series, &schedule, probe_seed)?;
    let xi_hat = compute_xi_hat(
        &net,
        &series,
        &schedule,
        &mut stream(cfg.seed, "pretrain/xi"),
        cfg.xi_batches,
        cfg.batch_size,
    )?;
    let mut checkpoint = Checkpoint::new(net, schedule, "pretrain", cfg.seed);
    checkpoint.set(keys::ENCODER, serde_json::to_string(&encoder)?);
    checkpoint.set(keys::XI_HAT, format!("{xi_hat:e}"));
    checkpoint.set(keys::INITIAL_L1, format!("{initial_l1:e}"));
    checkpoint.set(keys::FINAL_L1, format!("{final_l1:e}"));
    Ok(PretrainOutput {
        checkpoint,
        initial_l1,
        final_l1,
        xi_hat,
        epoch_losses,
    })
}

/// The condition encoder stored in a checkpoint header.
pub fn checkpoint_encoder(ckpt: &Checkpoint) -> Result<ConditionEncoder> {
    let raw = ckpt
        .get(keys::ENCODER)
        .ok_or_else(|| Error::Data("checkpoint has no encoder entry".into()))?;
    serde_json::from_str(raw).map_err(|e| Error::Data(format!("bad encoder entry: {e}")))
}

/// Stage-2 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Constrained-update settings; `omega` is also the unconstrained step.
    /// `xi_hat` is ignored in favour of [`FinetuneConfig::xi_hat`].
    pub lex: LexoptConfig,
    /// Raw anchor; falls back to the initial checkpoint's `xi_hat`.
    pub xi_hat: Option<f64>,
    /// Step size of from-scratch supervised training.
    pub supervised_lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Text2Data,
            epochs: 3000,
            batch_size: 32,
            seed: 0,
            lex: LexoptConfig::default(),
            xi_hat: None,
            supervised_lr: PretrainConfig::default().lr,
        }
    }
}

/// Result of stage-2 training.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    /// Per-step constrained-update records; empty outside text2data mode.
    pub traces: Vec<StepTrace>,
    /// Primary loss at each step.
    pub primary_losses: Vec<f64>,
    /// Labeled items drawn by the data loader.
    pub items_seen: usize,
    /// Constraint configuration actually used.
    pub lex: LexoptConfig,
}

/// A finetuning run that stopped early.
#[derive(Debug)]
pub struct FinetuneFailure {
    pub error: Error,
    /// Parameters from the last step with finite losses, when training had
    /// started.
    pub last_good: Option<Box<Checkpoint>>,
}

impl From<FinetuneFailure> for Error {
    fn from(f: FinetuneFailure) -> Self {
        f.error
    }
}

impl From<Error> for FinetuneFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
        }
    }
}

/// Runs one finetuning mode on the labeled pairs.
///
/// Text2data and unconstrained modes start from `init`. Supervised mode
/// takes only the architecture, schedule and encoder from `init` and trains
/// fresh weights. A numerical failure mid-run returns the last good
/// checkpoint with the error.
pub fn run_finetune(
    series: &[&[f64]],
    conds: &[ConditionVector],
    init: &Checkpoint,
    cfg: &FinetuneConfig,
) -> std::result::Result<FinetuneOutput, FinetuneFailure> {
    if series.is_empty() {
        return Err(Error::Data("no labeled series".into()).into());
    }
    let encoder = checkpoint_encoder(init)?;
    let schedule = init.schedule.clone();
    let owned = to_model_space(series);
    let series = as_slices(&owned);
    let series = series.as_slice();
    let mut rng = stream(cfg.seed, &format!("finetune/{}", cfg.mode));
    let mut lex = cfg.lex;
    let (net, run) = match cfg.mode {
        Mode::Text2Data => {
            let xi = cfg
                .xi_hat
                .or_else(|| init.get_f64(keys::XI_HAT))
                .ok_or_else(|| {
                    Error::Config(
                        "text2data mode needs xi_hat from --xi or the initial checkpoint".into(),
                    )
                })?;
            lex.xi_hat = xi;
            lex.validate().map_err(|e| Error::Config(e.to_string()))?;
            let mut net = init.net.clone();
            let run = finetune(
                &mut net,
                series,
                conds,
                &schedule,
                &lex,
                &mut rng,
                cfg.epochs,
                cfg.batch_size,
            )
            .map(|r| {
                (
                    r.traces.iter().map(|t| t.l2).collect(),
                    r.traces,
                    r.items_seen,
                )
            });
            (net, run)
        }
        Mode::Unconstrained => {
            let mut net = init.net.clone();
            let run = plain_finetune(
                &mut net,
                series,
                conds,
                &schedule,
                lex.omega,
                lex.p_uncond,
                &mut rng,
                cfg.epochs,
                cfg.batch_size,
            )
            .map(|(losses, seen)| (losses, Vec::new(), seen));
            (net, run)
        }
        Mode::Supervised => {
            let mut net = ScoreNetwork::init(
                init.net.arch().clone(),
                &mut stream(cfg.seed, "supervised/init"),
            )?;
            let run = plain_finetune(
                &mut net,
                series,
                conds,
                &schedule,
                cfg.supervised_lr,
                lex.p_uncond,
                &mut rng,
                cfg.epochs,
                cfg.batch_size,
            )
            .map(|(losses, seen)| (losses, Vec::new(), seen));
            (net, run)
        }
    };
    let mut checkpoint = Checkpoint::new(net, schedule, "finetune", cfg.seed);
    checkpoint.set(
        keys::ENCODER,
        serde_json::to_string(&encoder).map_err(Error::from)?,
    );
    checkpoint.set(keys::MODE, cfg.mode);
    if cfg.mode == Mode::Text2Data {
        checkpoint.set(keys::XI_HAT, format!("{:e}", lex.xi_hat));
    }
    match run {
        Ok((primary_losses, traces, items_seen)) => Ok(FinetuneOutput {
            checkpoint,
            traces,
            primary_losses,
            items_seen,
            lex,
        }),
        Err(error @ Error::NumericalInstability { .. }) => Err(FinetuneFailure {
            error,
            last_good: Some(Box::new(checkpoint)),
        }),
        Err(error) => Err(error.into()),
    }
}

/// Anything that turns conditions into series.
pub trait Generator {
    /// One series per condition, in order.
    fn generate(&self, conds: &[ConditionVector], rng: &mut Rng) -> Result<Vec<Vec<f64>>>;
}

/// Guided reverse diffusion with a trained network.
pub struct DiffusionGenerator<'a> {
    pub net: &'a ScoreNetwork,
    pub schedule: &'a NoiseSchedule,
    pub w: f64,
    /// Rows per reverse-diffusion batch.
    pub chunk: usize,
}

impl<'a> DiffusionGenerator<'a> {
    pub fn new(ckpt: &'a Checkpoint, w: f64) -> Self {
        Self {
            net: &ckpt.net,
            schedule: &ckpt.schedule,
            w,
            chunk: 256,
        }
    }
}

impl Generator for DiffusionGenerator<'_> {
    fn generate(&self, conds: &[ConditionVector], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(conds.len());
        for chunk in conds.chunks(self.chunk.max(1)) {
            out.extend(
                sample_batch(self.net, self.schedule, chunk, self.w, rng)?
                    .into_iter()
                    .map(from_model_space),
            );
        }
        Ok(out)
    }
}

/// Samples `n` series for a text prompt.
pub fn sample_text(
    ckpt: &Checkpoint,
    text: &str,
    w: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let encoder = checkpoint_encoder(ckpt)?;
    let encoded = encoder.encode(&parse_text(text)?);
    let conds = vec![encoded.condition; n];
    DiffusionGenerator::new(ckpt, w).generate(&conds, &mut stream(seed, "sample"))
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    /// Unconditional samples shared by every prompt for the NULL baseline.
    pub null_samples: usize,
    /// Evaluate only the first `max_prompts` test items.
    pub max_prompts: Option<usize>,
    pub seed: u64,
    /// Generated/target pairs kept for plotting.
    pub keep_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: 8,
            null_samples: 256,
            max_prompts: None,
            seed: 0,
            keep_pairs: 32,
        }
    }
}

/// Error statistics for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: Feature,
    /// Mean over prompts of the mean over samples of `|generated - target|`.
    pub mae: f64,
    /// The same error for NULL-condition samples.
    pub null_mae: f64,
    /// Mean absolute difference between two test targets.
    pub spread: f64,
}

/// Controllability of one model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub label_fraction: f64,
    pub seed: u64,
    pub n_prompts: usize,
    pub n_per_prompt: usize,
    pub scores: Vec<FeatureScore>,
}

impl EvalReport {
    pub fn mae(&self, f: Feature) -> f64 {
        self.scores[f.index()].mae
    }
}

/// One generated series beside the series its prompt came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPair {
    pub prompt: usize,
    pub target: Vec<f64>,
    pub generated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub pairs: Vec<SeriesPair>,
}

/// Mean `|a - b|` over all ordered pairs of distinct items.
fn mean_pairwise_difference(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{i<j} (x_j - x_i) = sum_j x_j (2j - n + 1)
    let s: f64 = sorted
        .iter()
        .enumerate()
        .map(|(j, x)| x * (2.0 * j as f64 - n as f64 + 1.0))
        .sum();
    2.0 * s / (n * (n - 1)) as f64
}

/// Renders, parses and encodes every test prompt, generates
/// `n_per_prompt` series each, and scores their features against the
/// prompt's target. Generated series are min-max normalized before feature
/// extraction, as stored series are.
pub fn evaluate_controllability<G: Generator + ?Sized>(
    generator: &G,
    test: &Dataset,
    encoder: &ConditionEncoder,
    cfg: &EvalConfig,
    mode: &str,
    label_fraction: f64,
) -> Result<Evaluation> {
    if cfg.n_per_prompt == 0 {
        return Err(invalid("n_per_prompt must be positive"));
    }
    let count = cfg.max_prompts.map_or(test.len(), |m| m.min(test.len()));
    if count == 0 {
        return Err(invalid("no test prompts"));
    }
    let mut targets: Vec<FeatureVector> = Vec::with_capacity(count);
    let mut conds = Vec::with_capacity(count * cfg.n_per_prompt);
    for (i, r) in test.records[..count].iter().enumerate() {
        let text = r
            .text
            .as_deref()
            .ok_or_else(|| invalid(format!("test item {i} is unlabeled")))?;
        let target = r
            .features
            .ok_or_else(|| invalid(format!("test item {i} has no features")))?;
        let condition = encoder.encode(&parse_text(text)?).condition;
        targets.push(target);
        conds.extend(std::iter::repeat_n(condition, cfg.n_per_prompt));
    }

    let mut rng = stream(cfg.seed, "eval/conditional");
    let generated = generator.generate(&conds, &mut rng)?;
    if generated.len() != conds.len() {
        return Err(invalid("generator returned the wrong number of series"));
    }
    let mut sums = [0.0; 6];
    let mut pairs = Vec::new();
    for (p, target) in targets.iter().enumerate() {
        let mut prompt_sum = [0.0; 6];
        for s in 0..cfg.n_per_prompt {
            let series = &generated[p * cfg.n_per_prompt + s];
            let got = extract_features(&minmax_normalize(series))?;
            for f in FEATURES {
                prompt_sum[f.index()] += (got.get(f) - target.get(f)).abs();
            }
            if s == 0 && pairs.len() < cfg.keep_pairs {
                pairs.push(SeriesPair {
                    prompt: p,
                    target: test.records[p].values.clone(),
                    generated: series.clone(),
                });
            }
        }
        for j in 0..6 {
            sums[j] += prompt_sum[j] / cfg.n_per_prompt as f64;
        }
    }

    let null_mae = if cfg.null_samples > 0 {
        let nulls = vec![encoder.null(); cfg.null_samples];
        let pool = generator.generate(&nulls, &mut stream(cfg.seed, "eval/null"))?;
        let feats = pool
            .iter()
            .map(|s| extract_features(&minmax_normalize(s)))
            .collect::<Result<Vec<_>>>()?;
        FEATURES.map(|f| {
            targets
                .iter()
                .map(|t| {
                    feats
                        .iter()
                        .map(|g| (g.get(f) - t.get(f)).abs())
                        .sum::<f64>()
                        / feats.len() as f64
                })
                .sum::<f64>()
                / count as f64
        })
    } else {
        [f64::NAN; 6]
    };

    let scores = FEATURES
        .iter()
        .map(|&f| {
            let vals: Vec<f64> = targets.iter().map(|t| t.get(f)).collect();
            FeatureScore {
                feature: f,
                mae: sums[f.index()] / count as f64,
                null_mae: null_mae[f.index()],
                spread: mean_pairwise_difference(&vals),
            }
        })
        .collect();
    Ok(Evaluation {
        report: EvalReport {
            mode: mode.to_string(),
            label_fraction,
            seed: cfg.seed,
            n_prompts: count,
            n_per_prompt: cfg.n_per_prompt,
            scores,
        },
        pairs,
    })
}

/// One line of the MAE table.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeRow {
    pub label_fraction: f64,
    pub mode: String,
    pub feature: String,
    pub mae: f64,
    pub seed: u64,
}

pub const MAE_HEADER: &str = "label_fraction,mode,feature,mae,seed";

/// Rows of all reports sorted by label fraction, mode, feature name, seed.
pub fn mae_rows(reports: &[EvalReport]) -> Vec<MaeRow> {
    let mut rows: Vec<MaeRow> = reports
        .iter()
        .flat_map(|r| {
            r.scores.iter().map(move |s| MaeRow {
                label_fraction: r.label_fraction,
                mode: r.mode.clone(),
                feature: s.feature.name().to_string(),
                mae: s.mae,
                seed: r.seed,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        a.label_fraction
            .total_cmp(&b.label_fraction)
            .then_with(|| a.mode.cmp(&b.mode))
            .then_with(|| a.feature.cmp(&b.feature))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    rows
}

pub fn write_mae_csv<W: Write>(mut out: W, rows: &[MaeRow]) -> Result<()> {
    writeln!(out, "{MAE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label_fraction, r.mode, r.feature, r.mae, r.seed
        )?;
    }
    Ok(())
}

pub fn read_mae_csv<R: BufRead>(input: R) -> Result<Vec<MaeRow>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h == MAE_HEADER => {}
        _ => return Err(Error::Data("missing MAE table header".into())),
    }
    let bad = |n: usize| Error::Data(format!("malformed MAE row {n}"));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n + 2));
        }
        rows.push(MaeRow {
            label_fraction: f[0].parse().map_err(|_| bad(n + 2))?,
            mode: f[1].to_string(),
            feature: f[2].to_string(),
            mae: f[3].parse().map_err(|_| bad(n + 2))?,
            seed: f[4].parse().map_err(|_| bad(n + 2))?,
        });
    }
    Ok(rows)
}

/// Writes `mae.csv`, `pairs.jsonl` and one `trace_<name>.csv` per trace set
/// into `out`; returns the written paths.
pub fn export_plot_data(
    evals: &[Evaluation],
    traces: &[(String, Vec<StepTrace>)],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if evals.is_empty() {
        return Err(invalid("nothing to export"));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let reports: Vec<EvalReport> = evals.iter().map(|e| e.report.clone()).collect();
    let path = out.join("mae.csv");
    let mut w = BufWriter::new(std::fs::File::create(&path)?);
    write_mae_csv(&mut w, &mae_rows(&reports))?;
    w.flush()?;
    written.push(path);

    let path = out.join("pairs.jsonl");
    let mut w = BufWriter::new(std::fs::File::create(&path)?);
    for e in evals {
        for p in &e.pairs {
            let line = serde_json::json!({
                "mode": e.report.mode,
                "label_fraction": e.report.label_fraction,
                "seed": e.report.seed,
                "prompt": p.prompt,
                "target": p.target,
                "generated": p.generated,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    written.push(path);

    for (name, t) in traces {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(invalid(format!("bad trace name {name:?}")));
        }
        let path = out.join(format!("trace_{name}.csv"));
        save_traces(&path, t)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_mae_file(path: &Path) -> Result<Vec<MaeRow>> {
    read_mae_csv(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_dataset, DatasetBundle, Record};
    use rand::Rng as _;

    /// Looks up the stored series whose encoded prompt equals the condition.
    struct Oracle {
        table: Vec<(ConditionVector, Vec<f64>)>,
    }

    impl Generator for Oracle {
        fn generate(&self, conds: &[ConditionVector], _rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
            conds
                .iter()
                .map(|c| {
                    self.table
                        .iter()
                        .find(|(k, _)| k == c)
                        .map(|(_, s)| s.clone())
                        .ok_or_else(|| invalid("unknown condition"))
                })
                .collect()
        }
    }

    /// Ignores the condition and returns a random series from a pool.
    struct Shuffler {
        pool: Vec<Vec<f64>>,
    }

    impl Generator for Shuffler {
        fn generate(&self, conds: &[ConditionVector], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
            Ok(conds
                .iter()
                .map(|_| self.pool[rng.random_range(0..self.pool.len())].clone())
                .collect())
        }
    }

    fn bundle() -> DatasetBundle {
        make_dataset(300, 16, 0.2, 5).unwrap()
    }

    fn oracle_for(b: &DatasetBundle) -> Oracle {
        let enc = b.encoder();
        Oracle {
            table: b
                .test
                .records
                .iter()
                .map(|r| {
                    (
                        enc.encode(&parse_text(r.text.as_deref().unwrap()).unwrap())
                            .condition,
                        r.values.clone(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_generator_scores_zero() {
        let b = bundle();
        let cfg = EvalConfig {
            null_samples: 0,
            ..Default::default()
        };
        let e =
            evaluate_controllability(&oracle_for(&b), &b.test, &b.encoder(), &cfg, "oracle", 0.2)
                .unwrap();
        assert!(e.report.scores.iter().all(|s| s.mae == 0.0));
        assert_eq!(e.report.n_prompts, 60);
    }

    #[test]
    fn condition_blind_generator_matches_the_spread() {
        let b = make_dataset(1000, 16, 0.2, 6).unwrap();
        let pool: Vec<Vec<f64>> = b.test.records.iter().map(|r| r.values.clone()).collect();
        let cfg = EvalConfig {
            n_per_prompt: 16,
            null_samples: 0,
            ..Default::default()
        };
        let e =
            evaluate_controllability(&Shuffler { pool }, &b.test, &b.encoder(), &cfg, "null", 0.2)
                .unwrap();
        for s in &e.report.scores {
            assert!((s.mae - s.spread).abs() <= 0.1 * s.spread, "{:?}", s);
        }
    }

    #[test]
    fn two_prompt_hand_computation() {
        let mk = |values: Vec<f64>| {
            let fv = extract_features(&values).unwrap();
            let text = crate::condition::render_text(
                &fv,
                crate::condition::TextKind::Exact,
                None,
                &mut stream(0, "t"),
            )
            .unwrap();
            Record {
                values,
                features: Some(fv),
                text: Some(text),
            }
        };
        let ramp: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let zig = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let test = Dataset {
            series_len: 8,
            records: vec![mk(ramp.clone()), mk(zig.clone())],
        };
        let fvs: Vec<FeatureVector> = test.records.iter().map(|r| r.features.unwrap()).collect();
        let bins = FeatureBins::from_corpus(&fvs).unwrap();
        let encoder = ConditionEncoder::new(bins, false);
        // a generator that answers every prompt with the other prompt's series
        let swap = Oracle {
            table: vec![
                (encoder.encode_features(&fvs[0]), zig.clone()),
                (encoder.encode_features(&fvs[1]), ramp.clone()),
            ],
        };
        let cfg = EvalConfig {
            n_per_prompt: 1,
            null_samples: 0,
            ..Default::default()
        };
        let e = evaluate_controllability(&swap, &test, &encoder, &cfg, "swap", 1.0).unwrap();
        for f in FEATURES {
            let expected = (fvs[0].get(f) - fvs[1].get(f)).abs();
            assert!((e.report.mae(f) - expected).abs() <= 1e-12, "{f}");
            assert!((e.report.scores[f.index()].spread - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn unlabeled_test_items_are_rejected() {
        let mut b = bundle();
        let oracle = oracle_for(&b);
        b.test.records[3].text = None;
        let cfg = EvalConfig {
            null_samples: 0,
            ..Default::default()
        };
        let err = evaluate_controllability(&oracle, &b.test, &b.encoder(), &cfg, "x", 0.2);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pairwise_difference_matches_brute_force() {
        let v = [0.3f64, -1.0, 2.5, 2.5, 0.0];
        let mut s = 0.0;
        for a in v {
            for b in v {
                s += (a - b).abs();
            }
        }
        assert!((mean_pairwise_difference(&v) - s / 20.0).abs() < 1e-12);
    }

    fn report(mode: &str, frac: f64, seed: u64, base: f64) -> EvalReport {
        EvalReport {
            mode: mode.into(),
            label_fraction: frac,
            seed,
            n_prompts: 1,
            n_per_prompt: 1,
            scores: FEATURES
                .iter()
                .enumerate()
                .map(|(i, &f)| FeatureScore {
                    feature: f,
                    mae: base + i as f64 / 7.0,
                    null_mae: 1.0,
                    spread: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn mae_table_order_and_round_trip() {
        let reports = vec![
            report("unconstrained", 0.1, 0, 0.3),
            report("text2data", 0.1, 1, 0.1),
            report("text2data", 0.02, 0, 0.2),
        ];
        let rows = mae_rows(&reports[..1]);
        assert_eq!(rows.len(), 6);
        let rows = mae_rows(&reports);
        for w in rows.windows(2) {
            let key = |r: &MaeRow| (r.label_fraction, r.mode.clone(), r.feature.clone());
            assert!(key(&w[0]).partial_cmp(&key(&w[1])).unwrap().is_le());
        }
        let mut buf = Vec::new();
        write_mae_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_mae_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn export_requires_reports() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_plot_data(&[], &[], dir.path()).is_err());
        let e = Evaluation {
            report: report("text2data", 0.1, 0, 0.0),
            pairs: vec![],
        };
        let files = export_plot_data(&[e], &[("t".into(), vec![])], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(read_mae_file(&files[0]).unwrap().len(), 6);
    }

    fn tiny_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 16,
            hidden: vec![16],
            time_dim: 4,
            steps: 20,
            xi_batches: 4,
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_zero_epochs_is_identity() {
        let b = bundle();
        let cfg = tiny_pretrain();
        let a = pretrain(&b.train, &b.manifest.bins, &cfg).unwrap();
        let again = pretrain(&b.train, &b.manifest.bins, &cfg).unwrap();
        assert_eq!(
            a.checkpoint.to_text().unwrap(),
            again.checkpoint.to_text().unwrap()
        );
        let zero = pretrain(
            &b.train,
            &b.manifest.bins,
            &PretrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        let init =
            ScoreNetwork::init(cfg.arch(16, 6), &mut stream(cfg.seed, "pretrain/init")).unwrap();
        assert_eq!(zero.checkpoint.net, init);
        assert_eq!(zero.initial_l1, zero.final_l1);
        assert!(checkpoint_encoder(&a.checkpoint).unwrap() == b.encoder());
    }

    #[test]
    fn finetune_modes() {
        let b = bundle();
        let pre = pretrain(&b.train, &b.manifest.bins, &tiny_pretrain()).unwrap();
        let (series, conds) = b.train.labeled_pairs(&b.encoder()).unwrap();
        let np = series.len();
        let base = FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };

        let t2d = run_finetune(&series, &conds, &pre.checkpoint, &base).unwrap();
        assert_eq!(t2d.traces.len(), 2 * np.div_ceil(8));
        assert_eq!(t2d.lex.xi_hat, pre.xi_hat);
        let mut csv = Vec::new();
        crate::lexopt::write_traces(&mut csv, &t2d.traces).unwrap();
        let header = String::from_utf8(csv).unwrap();
        assert!(header.starts_with("step,l2,l1p,phi,lambda"));

        let sup = run_finetune(
            &series,
            &conds,
            &pre.checkpoint,
            &FinetuneConfig {
                mode: Mode::Supervised,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(sup.items_seen, 2 * np);
        assert!(sup.traces.is_empty());

        let mut no_xi = pre.checkpoint.clone();
        no_xi.extra.remove(keys::XI_HAT);
        assert!(matches!(
            run_finetune(&series, &conds, &no_xi, &base),
            Err(FinetuneFailure {
                error: Error::Config(_),
                last_good: None
            })
        ));
        let unc = run_finetune(
            &series,
            &conds,
            &no_xi,
            &FinetuneConfig {
                mode: Mode::Unconstrained,
                ..base
            },
        )
        .unwrap();
        assert_eq!(unc.primary_losses.len(), 2 * np.div_ceil(8));
    }

    #[test]
    fn modes_parse() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("fancy".parse::<Mode>(), Err(Error::Config(_))));
    }
}
