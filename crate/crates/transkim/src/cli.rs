//! Command implementations behind the `transkim` binary.
//!
//! Exit codes are a stable contract: 0 ok, 2 config error, 3 divergence,
//! 4 compatibility error, 5 malformed input. Every command is deterministic
//! given its config and seed.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PadPolicy, RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::flops::{count_flops, curve_area, layerwise_curve};
use crate::model::Model;
use crate::report::{render_csv, render_html};
use crate::runtime::evaluate_dataset;
use crate::tasks::{gen_needle, gen_span, read_ndjson, write_ndjson, Example, Label, SIGNAL_HI};
use crate::trace::SkimTrace;
use crate::train::{train_loop, write_metrics};
use crate::{checkpoint, tasks};

#[derive(Parser, Debug)]
#[command(name = "transkim", version, about = "Token-skimming transformer engine")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a model on a generated synthetic dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable key=value override, e.g. --set lambda=0.3
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file; writes a skim trace.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "none")]
        policy: PadPolicy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a skim trace as an HTML heatmap or retention CSV.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "html")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per harmony coefficient on an 80/20 split and emit
    /// the accuracy/speedup trade-off CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "none")]
        policy: PadPolicy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ReportFormat {
    Html,
    Csv,
}

impl clap::ValueEnum for PadPolicy {
    fn value_variants<'a>() -> &'a [Self] {
        &[PadPolicy::Sequence, PadPolicy::Batch, PadPolicy::None]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(match self {
            PadPolicy::Sequence => clap::builder::PossibleValue::new("sequence"),
            PadPolicy::Batch => clap::builder::PossibleValue::new("batch"),
            PadPolicy::None => clap::builder::PossibleValue::new("none"),
        })
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::EmptyInput(_) => 2,
        Error::Divergence(_) => 3,
        Error::Compatibility(_) | Error::VocabError { .. } => 4,
        Error::Malformed { .. } | Error::Schema(_) => 5,
        _ => 1,
    }
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.cmd {
        Cmd::Train {
            config,
            set,
            seed,
            out,
        } => cmd_train(&config, &set, seed, out.as_deref()),
        Cmd::Eval {
            checkpoint,
            dataset,
            policy,
            out,
        } => cmd_eval(&checkpoint, &dataset, policy, out.as_deref()),
        Cmd::Report { trace, format, out } => cmd_report(&trace, format, out.as_deref()),
        Cmd::Sweep {
            config,
            set,
            seed,
            policy,
            out,
        } => cmd_sweep(&config, &set, seed, policy, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path, set: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_overrides(set)?;
    if let Some(s) = seed {
        cfg.optimizer.seed = s;
    }
    Ok(cfg)
}

fn resolve_out(cfg: Option<&RunConfig>, flag: Option<&Path>) -> PathBuf {
    match (flag, cfg) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => PathBuf::from(&c.output_dir),
        (None, None) => PathBuf::from("out"),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Generate the train and held-out eval splits for a task config.
pub fn generate_datasets(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let t = &cfg.task;
    let seed = cfg.optimizer.seed;
    let make = |n: usize, seed: u64| -> Result<Vec<Example>> {
        match t.kind {
            TaskKind::Needle => gen_needle(
                n,
                (t.seq_len_min, t.seq_len_max),
                t.n_signal,
                cfg.model.vocab_size,
                seed,
            ),
            TaskKind::Span => gen_span(
                n,
                (t.seq_len_min, t.seq_len_max),
                (t.span_min, t.span_max),
                cfg.model.vocab_size,
                seed,
            ),
        }
    };
    Ok((
        make(t.n_examples, seed)?,
        make(t.n_eval, seed.wrapping_add(1))?,
    ))
}

/// Train per the config; writes checkpoint, metrics log, datasets and the
/// resolved-config snapshot into the output directory.
pub fn cmd_train(
    config_path: &Path,
    set: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path, set, seed)?;
    let out_dir = resolve_out(Some(&cfg), out);
    ensure_dir(&out_dir)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.render())
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let (train_data, eval_data) = generate_datasets(&cfg)?;
    write_ndjson(&out_dir.join("train.ndjson"), &train_data)?;
    write_ndjson(&out_dir.join("eval.ndjson"), &eval_data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    let model: Model<f32> = Model::new(cfg.model.clone(), &mut rng);
    let steps_per_epoch = train_data.len().div_ceil(cfg.optimizer.batch_size).max(1);
    let outcome = train_loop(
        model,
        &train_data,
        &cfg.optimizer,
        cfg.train_policy,
        |r| {
            if r.step % steps_per_epoch == 0 {
                println!(
                    "step {:>5}  loss {:.4}  (task {:.4}, skim {:.4})  acc {:.3}",
                    r.step, r.loss_total, r.loss_downstream, r.loss_skim, r.acc
                );
            }
        },
    )?;
    write_metrics(&out_dir.join("metrics.ndjson"), &outcome.metrics)?;
    checkpoint::save(&out_dir.join("checkpoint.tskm"), &outcome.model)?;
    println!("checkpoint written to {}", out_dir.join("checkpoint.tskm").display());
    Ok(())
}

fn reject_incompatible(model: &Model<f32>, examples: &[Example]) -> Result<()> {
    let vocab = model.config.vocab_size;
    for ex in examples {
        if let Some(&bad) = ex.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Compatibility(format!(
                "dataset token id {bad} out of range for checkpoint vocab_size {vocab}"
            )));
        }
        if vocab <= SIGNAL_HI as usize {
            return Err(Error::Compatibility(format!(
                "checkpoint vocab_size {vocab} cannot cover the reserved id layout"
            )));
        }
        let label_ok = matches!(
            (&ex.label, model.config.head_kind),
            (Label::Seq(_), crate::config::HeadKind::SequenceClassification)
                | (Label::Token(_), crate::config::HeadKind::TokenClassification)
        );
        if !label_ok {
            return Err(Error::Compatibility(
                "dataset label kind does not match the checkpoint head".into(),
            ));
        }
    }
    Ok(())
}

/// Evaluate a checkpoint on a dataset: prints accuracy, skim recall, keep
/// precision, FLOPs speedup under the chosen policy and per-layer retention;
/// writes the skim trace JSON.
pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    policy: PadPolicy,
    out: Option<&Path>,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path).map_err(input_error)?;
    let examples = read_ndjson(dataset_path).map_err(input_error)?;
    reject_incompatible(&model, &examples)?;
    let out_dir = resolve_out(None, out);
    ensure_dir(&out_dir)?;

    let eval = evaluate_dataset(&model, &examples)?;
    let report = count_flops(&model.config, &eval.trace, policy)?;
    let curve = layerwise_curve(&eval.trace.examples)?;
    eval.trace.write(&out_dir.join("trace.json"))?;

    println!("accuracy        {:.4}", eval.accuracy);
    println!("skim recall     {:.4}", eval.skim_recall);
    println!("keep precision  {:.4}", eval.keep_precision);
    println!(
        "flops           baseline {}  skimmed {}  predictor {}",
        report.baseline_flops, report.skimmed_flops, report.predictor_overhead_flops
    );
    println!(
        "speedup         {:.4}x under policy {} (predictor share {:.4})",
        report.speedup, report.policy, report.overhead_fraction
    );
    let pretty: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
    println!("retention       [{}]  area {:.4}", pretty.join(", "), curve_area(&curve));
    println!("trace written to {}", out_dir.join("trace.json").display());
    Ok(())
}

/// Treat unreadable command inputs as malformed input (exit 5).
fn input_error(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Malformed {
            path,
            what: source.to_string(),
        },
        other => other,
    }
}

/// Render a trace as an HTML heatmap or a retention CSV.
pub fn cmd_report(trace_path: &Path, format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let trace = SkimTrace::read(trace_path).map_err(input_error)?;
    let out_dir = resolve_out(None, out);
    ensure_dir(&out_dir)?;
    let path = match format {
        ReportFormat::Html => {
            let html = render_html(&trace)?;
            let p = out_dir.join("report.html");
            std::fs::write(&p, html).map_err(|e| Error::io(p.display().to_string(), e))?;
            p
        }
        ReportFormat::Csv => {
            let csv = render_csv(&trace)?;
            let p = out_dir.join("report.csv");
            std::fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))?;
            p
        }
    };
    println!("report written to {}", path.display());
    Ok(())
}

/// One sweep point: a fresh model trained at `lambda` on the 80% split,
/// evaluated on the 20% split.
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub speedup: f64,
}

/// Library form of the sweep so harnesses can reuse it.
pub fn run_sweep(cfg: &RunConfig, policy: PadPolicy) -> Result<Vec<SweepRow>> {
    let grid = cfg
        .lambda_grid
        .clone()
        .ok_or_else(|| Error::Config("sweep requires lambda_grid in the config".into()))?;
    if grid.is_empty() {
        return Err(Error::Config("lambda_grid is empty".into()));
    }
    let (all_data, _) = generate_datasets(cfg)?;
    // One fixed 80/20 split shared by every grid point.
    let dev_from = all_data.len() - all_data.len() / 5;
    let train_data = &all_data[..dev_from];
    let dev_data = &all_data[dev_from..];
    if train_data.is_empty() || dev_data.is_empty() {
        return Err(Error::Config(format!(
            "task.n_examples {} is too small for an 80/20 split",
            all_data.len()
        )));
    }
    let mut optim = cfg.optimizer.clone();
    if let Some(e) = cfg.sweep_epochs {
        optim.epochs = e;
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let mut model_cfg = cfg.model.clone();
        model_cfg.lambda = lambda;
        let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
        let model: Model<f32> = Model::new(model_cfg, &mut rng);
        let outcome = train_loop(model, train_data, &optim, cfg.train_policy, |_| {})?;
        let eval = evaluate_dataset(&outcome.model, dev_data)?;
        let report = count_flops(&outcome.model.config, &eval.trace, policy)?;
        rows.push(SweepRow {
            lambda,
            accuracy: eval.accuracy,
            speedup: report.speedup,
        });
    }
    Ok(rows)
}

/// Grid-search the harmony coefficient and emit the trade-off CSV.
pub fn cmd_sweep(
    config_path: &Path,
    set: &[String],
    seed: Option<u64>,
    policy: PadPolicy,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path, set, seed)?;
    let out_dir = resolve_out(Some(&cfg), out);
    ensure_dir(&out_dir)?;
    let rows = run_sweep(&cfg, policy)?;
    let mut csv = String::from("lambda,accuracy,speedup\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.lambda, r.accuracy, r.speedup));
        println!("lambda {:<4}  accuracy {:.4}  speedup {:.4}x", r.lambda, r.accuracy, r.speedup);
    }
    let p = out_dir.join("sweep.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))?;
    println!("sweep written to {}", p.display());
    Ok(())
}

// Re-exported for integration tests that build batches by hand.
pub use tasks::pad_batch;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Divergence("x".into())), 3);
        assert_eq!(exit_code(&Error::Compatibility("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Malformed {
                path: "p".into(),
                what: "w".into()
            }),
            5
        );
        assert_eq!(exit_code(&Error::Contract("x".into())), 1);
    }

    #[test]
    fn missing_config_names_path_and_is_config_error() {
        let err = load_config(Path::new("/definitely/missing.cfg"), &[], None).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("/definitely/missing.cfg"));
    }

    #[test]
    fn set_override_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "model.lambda=0.1\n").unwrap();
        let cfg = load_config(&path, &["lambda=0.3".into()], None).unwrap();
        assert_eq!(cfg.model.lambda, 0.3);
    }
}
