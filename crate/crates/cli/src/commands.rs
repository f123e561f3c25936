use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lexdiff_core::bounds::{bound_report, estimate_sigma2, BoundsInput};
use lexdiff_core::diffusion::Checkpoint;
use lexdiff_core::harness::{
    checkpoint_encoder, evaluate_controllability, export_plot_data, keys, pretrain, run_finetune,
    sample_text, to_model_space, DiffusionGenerator, EvalConfig, Evaluation, FinetuneConfig, Mode,
    PretrainConfig,
};
use lexdiff_core::lexopt::{load_traces, save_traces};
use lexdiff_core::seeding::stream;
use lexdiff_core::synthdata::{extract_features, make_dataset, DatasetBundle};
use lexdiff_core::Error;

use crate::Command;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

const TRACE_SUFFIX: &str = ".traces.csv";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } => {
                CliError::Config(msg)
            }
            Error::NumericalInstability { .. } => CliError::Numerical(msg),
            Error::Data(_) | Error::Infeasible(_) | Error::Io(_) | Error::Json(_) => {
                CliError::Data(msg)
            }
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            n,
            length,
            label_frac,
            seed,
            out,
        } => {
            let bundle = make_dataset(n, length, label_frac, seed)?;
            bundle.save(&out)?;
            print_json(&serde_json::json!({
                "out": out,
                "train": bundle.manifest.train_size,
                "test": bundle.manifest.test_size,
                "labeled": bundle.manifest.train_labeled.len(),
            }));
            Ok(())
        }
        Command::Pretrain {
            data,
            epochs,
            batch_size,
            lr,
            seed,
            xi_batches,
            out,
        } => {
            let bundle = DatasetBundle::load(&data)?;
            let d = PretrainConfig::default();
            let cfg = PretrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                seed: seed.unwrap_or(d.seed),
                xi_batches: xi_batches.unwrap_or(d.xi_batches),
                ..d
            };
            let res = pretrain(&bundle.train, &bundle.manifest.bins, &cfg)?;
            res.checkpoint.save(&out)?;
            print_json(&serde_json::json!({
                "out": out,
                "initial_l1": res.initial_l1,
                "final_l1": res.final_l1,
                "xi_hat": res.xi_hat,
            }));
            Ok(())
        }
        Command::Finetune {
            mode,
            data,
            init,
            xi,
            rho,
            alpha,
            beta,
            gamma,
            omega,
            p_uncond,
            epochs,
            batch_size,
            seed,
            supervised_lr,
            out,
            traces,
        } => {
            let init = load_checkpoint(&init)?;
            // labeled lines only; unlabeled records are never parsed
            let (_, train) = DatasetBundle::load_labeled_train(&data)?;
            let (series, conds) = train.labeled_pairs(&checkpoint_encoder(&init)?)?;
            let d = FinetuneConfig::default();
            let mut lex = d.lex;
            lex.rho = rho.unwrap_or(lex.rho);
            lex.alpha = alpha.unwrap_or(lex.alpha);
            lex.beta = beta.unwrap_or(lex.beta);
            lex.gamma = gamma.unwrap_or(lex.gamma);
            lex.omega = omega.unwrap_or(lex.omega);
            lex.p_uncond = p_uncond.unwrap_or(lex.p_uncond);
            lex.validate()?;
            let cfg = FinetuneConfig {
                mode,
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                seed: seed.unwrap_or(d.seed),
                lex,
                xi_hat: xi,
                supervised_lr: supervised_lr.unwrap_or(d.supervised_lr),
            };
            let res = match run_finetune(&series, &conds, &init, &cfg) {
                Ok(r) => r,
                Err(failure) => {
                    if let Some(ckpt) = failure.last_good {
                        let path = out.with_extension("last-good.ckpt");
                        ckpt.save(&path)?;
                        log::error!("kept last good parameters in {}", path.display());
                    }
                    return Err(failure.error.into());
                }
            };
            res.checkpoint.save(&out)?;
            let trace_path = match (traces, mode) {
                (Some(p), _) => Some(p),
                (None, Mode::Text2Data) => Some(trace_path_for(&out)),
                (None, _) => None,
            };
            if let Some(p) = &trace_path {
                save_traces(p, &res.traces)?;
            }
            let tail = &res.primary_losses[res.primary_losses.len().saturating_sub(50)..];
            let tail_mean = |v: Vec<f64>| {
                if v.is_empty() {
                    None
                } else {
                    Some(v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            let l1p_tail = tail_mean(res.traces.iter().rev().take(50).map(|t| t.l1p).collect());
            print_json(&serde_json::json!({
                "out": out,
                "mode": mode.name(),
                "steps": res.primary_losses.len(),
                "items_seen": res.items_seen,
                "primary_loss_tail": tail_mean(tail.to_vec()),
                "constraint_loss_tail": l1p_tail,
                "constraint_level": (mode == Mode::Text2Data).then(|| res.lex.constraint_level()),
                "traces": trace_path,
            }));
            Ok(())
        }
        Command::Sample {
            ckpt,
            text,
            w,
            n,
            seed,
            out,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let series = sample_text(&ckpt, &text, w, n, seed)?;
            let file = std::fs::File::create(&out).map_err(Error::from)?;
            let mut wtr = BufWriter::new(file);
            for values in &series {
                let line = serde_json::json!({ "values": values, "features": extract_features(values).ok() });
                serde_json::to_writer(&mut wtr, &line).map_err(Error::from)?;
                wtr.write_all(b"\n").map_err(Error::from)?;
            }
            wtr.flush().map_err(Error::from)?;
            print_json(&serde_json::json!({ "out": out, "n": series.len() }));
            Ok(())
        }
        Command::Evaluate {
            ckpt,
            data,
            w,
            seed,
            n_per_prompt,
            null_samples,
            max_prompts,
            keep_pairs,
            out,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let bundle = DatasetBundle::load(&data)?;
            let d = EvalConfig::default();
            let cfg = EvalConfig {
                n_per_prompt: n_per_prompt.unwrap_or(d.n_per_prompt),
                null_samples: null_samples.unwrap_or(d.null_samples),
                max_prompts: max_prompts.or(d.max_prompts),
                seed,
                keep_pairs: keep_pairs.unwrap_or(d.keep_pairs),
            };
            let mode = ckpt.get(keys::MODE).unwrap_or(&ckpt.stage).to_string();
            let encoder = checkpoint_encoder(&ckpt)?;
            let eval = evaluate_controllability(
                &DiffusionGenerator::new(&ckpt, w),
                &bundle.test,
                &encoder,
                &cfg,
                &mode,
                bundle.manifest.label_fraction,
            )?;
            write_json(&out, &serde_json::to_value(&eval).map_err(Error::from)?)?;
            print_json(&serde_json::to_value(&eval.report).map_err(Error::from)?);
            Ok(())
        }
        Command::Bounds {
            sigma2,
            delta,
            n,
            np,
            theta_card,
            xi,
            ckpt,
            data,
            samples,
            seed,
            out,
        } => {
            let ckpt = ckpt.as_deref().map(load_checkpoint).transpose()?;
            let bundle = data.as_deref().map(DatasetBundle::load).transpose()?;
            let (sigma2, source) = match (sigma2, &ckpt, &bundle) {
                (Some(s), _, _) => (s, "given"),
                (None, Some(c), Some(b)) => {
                    let owned = to_model_space(&b.train.all_series());
                    let refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
                    let s = estimate_sigma2(
                        &c.net,
                        &refs,
                        &c.schedule,
                        samples,
                        &mut stream(seed, "bounds/sigma2"),
                    )?;
                    (s, "heuristic plug-in estimate: variance of eps_hat - eps at one parameter point")
                }
                _ => {
                    return Err(CliError::Config(
                        "need --sigma2, or --ckpt and --data to estimate it".into(),
                    ))
                }
            };
            let counts = bundle
                .as_ref()
                .map(|b| (b.manifest.train_size, b.manifest.train_labeled.len()));
            let n = n
                .or(counts.map(|c| c.0))
                .ok_or_else(|| CliError::Config("need --n or --data".into()))?;
            let np = np
                .or(counts.map(|c| c.1))
                .ok_or_else(|| CliError::Config("need --np or --data".into()))?;
            let xi = xi
                .or_else(|| ckpt.as_ref().and_then(|c| c.get_f64(keys::XI_HAT)))
                .unwrap_or(0.0);
            let input = BoundsInput {
                sigma2,
                delta,
                n,
                np,
                theta_card,
            };
            let report = bound_report(&input, xi)?;
            let mut value = serde_json::to_value(&report).map_err(Error::from)?;
            value["sigma2_source"] = source.into();
            if let Some(p) = &out {
                write_json(p, &value)?;
            }
            print_json(&value);
            Ok(())
        }
        Command::Export { input, out } => {
            let (evals, traces) = collect_exports(&input)?;
            let written = export_plot_data(&evals, &traces, &out)?;
            print_json(&serde_json::json!({ "written": written }));
            Ok(())
        }
    }
}

fn trace_path_for(ckpt: &Path) -> PathBuf {
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ckpt.with_file_name(format!("{stem}{TRACE_SUFFIX}"))
}

type Traces = Vec<(String, Vec<lexdiff_core::lexopt::StepTrace>)>;

/// Reads `*.json` evaluations and `*.traces.csv` traces from `dir` in file
/// name order.
fn collect_exports(dir: &Path) -> Result<(Vec<Evaluation>, Traces)> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut evals = Vec::new();
    let mut traces = Vec::new();
    for path in names {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(stem) = name.strip_suffix(TRACE_SUFFIX) {
            traces.push((stem.to_string(), load_traces(&path)?));
        } else if name.ends_with(".json") {
            let text = std::fs::read_to_string(&path).map_err(Error::from)?;
            let eval: Evaluation = serde_json::from_str(&text).map_err(|e| {
                CliError::Data(format!("{} is not an evaluation: {e}", path.display()))
            })?;
            evals.push(eval);
        }
    }
    if evals.is_empty() {
        return Err(CliError::Data(format!(
            "no evaluation files in {}",
            dir.display()
        )));
    }
    Ok((evals, traces))
}
