//! Runs the full pipeline for one seed and prints losses, constraint
//! statistics and per-feature MAE for each finetuning mode.
//!
//! Settings come from environment variables and default to the library
//! defaults, e.g.
//! `SEED=1 OMEGA=0.5 FT_EPOCHS=200 cargo run --release --example experiment`.

use std::time::Instant;

use lexdiff_core::condition::FEATURES;
use lexdiff_core::diffusion::Checkpoint;
use lexdiff_core::harness::{
    evaluate_controllability, heldout_l1, pretrain, run_finetune, DiffusionGenerator, EvalConfig,
    FinetuneConfig, Mode, PretrainConfig,
};
use lexdiff_core::synthdata::make_dataset;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> lexdiff_core::Result<()> {
    let seed: u64 = env("SEED", 0);
    let n: usize = env("N", 2000);
    let frac: f64 = env("FRAC", 0.1);
    let bundle = make_dataset(n, env("LEN", 64), frac, seed)?;
    let d = PretrainConfig::default();
    let pre_cfg = PretrainConfig {
        epochs: env("PRE_EPOCHS", d.epochs),
        batch_size: env("PRE_BATCH", d.batch_size),
        lr: env("PRE_LR", d.lr),
        seed,
        ..d
    };
    // PRE_CACHE names a directory that keeps stage-1 checkpoints between runs
    let cache = std::env::var("PRE_CACHE").ok().map(|d| {
        std::path::PathBuf::from(d).join(format!(
            "pre_{seed}_{n}_{}_{}.ckpt",
            pre_cfg.epochs, pre_cfg.lr
        ))
    });
    let pre_ckpt = match cache.as_ref().filter(|p| p.exists()) {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let t = Instant::now();
            let pre = pretrain(&bundle.train, &bundle.manifest.bins, &pre_cfg)?;
            println!(
                "pretrain {:.1}s initial {:.4} final {:.4} xi {:.4}",
                t.elapsed().as_secs_f64(),
                pre.initial_l1,
                pre.final_l1,
                pre.xi_hat,
            );
            if let Some(p) = &cache {
                pre.checkpoint.save(p)?;
            }
            pre.checkpoint
        }
    };
    let (series, conds) = bundle.train.labeled_pairs(&bundle.encoder())?;
    let test = bundle.test.all_series();
    let schedule = pre_ckpt.schedule.clone();
    println!(
        "heldout pretrained {:.4}",
        heldout_l1(&pre_ckpt.net, &test, &schedule, 99, 4)?
    );
    let mut lex = lexdiff_core::lexopt::LexoptConfig::default();
    lex.omega = env("OMEGA", lex.omega);
    lex.rho = env("RHO", lex.rho);
    let eval_cfg = EvalConfig {
        max_prompts: std::env::var("PROMPTS").ok().and_then(|v| v.parse().ok()),
        seed,
        ..Default::default()
    };
    let modes: String = env("MODES", "text2data,unconstrained,supervised".to_string());
    for mode in modes.split(',').map(|m| m.parse::<Mode>().unwrap()) {
        let d = FinetuneConfig::default();
        let cfg = FinetuneConfig {
            mode,
            epochs: env("FT_EPOCHS", d.epochs),
            batch_size: env("FT_BATCH", d.batch_size),
            seed,
            lex,
            xi_hat: None,
            supervised_lr: env("SUP_LR", d.supervised_lr),
        };
        let t = Instant::now();
        let out = run_finetune(&series, &conds, &pre_ckpt, &cfg)?;
        let train_time = t.elapsed().as_secs_f64();
        let h = heldout_l1(&out.checkpoint.net, &test, &schedule, 99, 4)?;
        let tail = &out.primary_losses[out.primary_losses.len().saturating_sub(50)..];
        let l2_tail = tail.iter().sum::<f64>() / tail.len() as f64;
        let l1p_tail = if out.traces.is_empty() {
            f64::NAN
        } else {
            let t = &out.traces[out.traces.len().saturating_sub(50)..];
            t.iter().map(|s| s.l1p).sum::<f64>() / t.len() as f64
        };
        let t = Instant::now();
        let e = evaluate_controllability(
            &DiffusionGenerator::new(&out.checkpoint, 0.0),
            &bundle.test,
            &bundle.encoder(),
            &eval_cfg,
            mode.name(),
            frac,
        )?;
        println!(
            "{mode:>13} train {train_time:.1}s eval {:.1}s steps {} l2_tail {l2_tail:.4} l1p_tail/level {:.3} heldout {h:.4}",
            t.elapsed().as_secs_f64(),
            out.primary_losses.len(),
            l1p_tail / (out.lex.constraint_level()),
        );
        let maes: Vec<String> = FEATURES
            .iter()
            .map(|&f| {
                let s = e.report.scores[f.index()];
                format!(
                    "{}={:.4}(null {:.4} spread {:.4})",
                    f.name(),
                    s.mae,
                    s.null_mae,
                    s.spread
                )
            })
            .collect();
        println!("{:>13} {}", "", maes.join(" "));
    }
    Ok(())
}
