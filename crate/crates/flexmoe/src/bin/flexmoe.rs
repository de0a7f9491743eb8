//! Command-line front end: train / eval / analyze / gradcheck / synth.
//!
//! All commands read one flat TOML configuration (`--config`, with every
//! field optional) plus per-field override flags, and write their artifacts
//! under the configured output directory. Replicate seeds run as independent
//! deterministic threads — `FLEXMOE_THREADS` caps how many run at once — and
//! their metrics are aggregated as mean ± sample standard deviation in seed
//! order, so results never depend on scheduling.
//!
//! `eval` and `analyze` rebuild both the model and the dataset from the
//! configuration echoed inside the checkpoint, so a checkpoint is
//! self-describing; the active configuration only locates the checkpoint and
//! the output directory.
//!
//! Failures print a single machine-readable line to stderr —
//! `error kind=<kind> message="..."` — and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexmoe::config::RunConfig;
use flexmoe::data::{synth_generate, write_dataset_csvs, Dataset, Sample};
use flexmoe::metrics::{
    activation_matrix, bank_similarity, top1_matrix, write_activation_matrix,
    write_bank_similarity_cols, write_bank_similarity_rows, write_eval_report, EvalReport,
    TokenRouting,
};
use flexmoe::model::FlexMoeModel;
use flexmoe::selfcheck;
use flexmoe::smoe::FlopCounters;
use flexmoe::train::{train, write_epoch_log, write_step_log, Checkpoint};
use flexmoe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flexmoe",
    version,
    about = "Sparse mixture-of-experts classifier for multimodal data with missing modalities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags mirroring configuration fields; any flag given overrides the file.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration; every field optional, defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Replicate seeds, comma-separated (overrides `seeds`).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    warmup_epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lambda_aux: Option<f64>,
    /// "most-observed-first" or "least-observed-first".
    #[arg(long, global = true)]
    curriculum: Option<String>,
    #[arg(long, global = true)]
    experts: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// "bank", "global", or "zeros".
    #[arg(long, global = true)]
    missing_fill: Option<String>,
    /// Dataset manifest path (overrides the synthetic source).
    #[arg(long, global = true)]
    manifest: Option<String>,
    #[arg(long, global = true)]
    synth_samples: Option<usize>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$target = v.clone(); })*
            };
        }
        set! {
            out => out_dir,
            seeds => seeds,
            epochs => epochs,
            warmup_epochs => warmup_epochs,
            learning_rate => learning_rate,
            batch_size => batch_size,
            lambda_aux => lambda_aux,
            curriculum => curriculum,
            experts => experts,
            top_k => top_k,
            d => d,
            heads => heads,
            layers => layers,
            missing_fill => missing_fill,
            synth_samples => synth_samples,
            data_seed => data_seed,
        }
        if self.manifest.is_some() {
            cfg.manifest = self.manifest.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one replicate per seed; write checkpoints, loss logs,
    /// per-seed test reports, and a mean ± std summary.
    Train,
    /// Evaluate a checkpoint on its test split; write eval_report.csv.
    Eval {
        /// Defaults to `<out>/seed_<first seed>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Routing and fill-bank analyses of a checkpoint; write
    /// activation/top-1 matrices and bank similarity CSVs.
    Analyze {
        /// Defaults to `<out>/seed_<first seed>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check full-pipeline gradients against central finite differences.
    Gradcheck,
    /// Materialize the configured synthetic dataset as CSVs + manifest.
    Synth,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.load()?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
        Command::Analyze { checkpoint } => cmd_analyze(&cfg, checkpoint),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Synth => cmd_synth(&cfg),
    }
}

/// Worker cap: `FLEXMOE_THREADS` if set, else one thread per replicate up to
/// the machine's parallelism.
fn max_threads(replicates: usize) -> Result<usize> {
    match std::env::var("FLEXMOE_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Argument(format!(
                "FLEXMOE_THREADS {raw:?} must be an integer ≥ 1"
            ))),
        },
        Err(_) => {
            let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
            Ok(hw.min(replicates.max(1)))
        }
    }
}

/// Runs one job per seed, at most `threads` at a time, collecting results in
/// seed order regardless of completion order.
fn run_replicates<T, F>(seeds: &[u64], threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let mut results: Vec<Option<Result<T>>> = seeds.iter().map(|_| None).collect();
    for start in (0..seeds.len()).step_by(threads) {
        let end = (start + threads).min(seeds.len());
        let chunk = &seeds[start..end];
        let job = &job;
        let outcomes = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || job(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Aborted("replicate thread panicked".into()))
                    })
                })
                .collect::<Vec<_>>()
        });
        for (offset, outcome) in outcomes.into_iter().enumerate() {
            results[start + offset] = Some(outcome);
        }
    }
    results.into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct SeedResult {
    seed: u64,
    best_val_accuracy: f64,
    best_epoch: usize,
    report: EvalReport,
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let echo = cfg.to_toml();
    std::fs::write(out_dir.join("config.toml"), &echo)?;

    let (train_ds, val_ds, test_ds) = cfg.materialize()?;
    println!(
        "data: {} train / {} val / {} test samples, {} modalities, {} classes",
        train_ds.len(),
        val_ds.len(),
        test_ds.len(),
        train_ds.set.len(),
        train_ds.classes
    );

    let threads = max_threads(cfg.seeds.len())?;
    let results = run_replicates(&cfg.seeds, threads, |seed| -> Result<SeedResult> {
        let model = FlexMoeModel::new(cfg.arch()?, seed)?;
        let outcome = train(model, &cfg.train_config(seed)?, &train_ds, &val_ds)?;

        let seed_dir = out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        write_step_log(&seed_dir.join("step_log.csv"), &outcome.steps)?;
        write_epoch_log(&seed_dir.join("epoch_log.csv"), &outcome.epochs)?;

        let steps = outcome.steps.len() as u64;
        Checkpoint::capture(
            &echo,
            seed,
            outcome.epochs.len() as u64,
            steps,
            outcome.best_val_accuracy,
            &outcome.model.store,
            &outcome.optimizer,
        )?
        .write(&seed_dir.join("final.ckpt"))?;
        // Best-validation parameters with the final optimizer state.
        Checkpoint::capture(
            &echo,
            seed,
            outcome.best_epoch as u64,
            steps,
            outcome.best_val_accuracy,
            &outcome.best_params,
            &outcome.optimizer,
        )?
        .write(&seed_dir.join("best.ckpt"))?;

        let report = test_report(&outcome.best_model(), &test_ds)?;
        write_eval_report(&seed_dir.join("eval_report.csv"), &report)?;
        Ok(SeedResult {
            seed,
            best_val_accuracy: outcome.best_val_accuracy,
            best_epoch: outcome.best_epoch,
            report,
        })
    })?;

    for r in &results {
        println!(
            "seed {}: best val accuracy {:.4} (epoch {}), test accuracy {:.4}, macro F1 {:.4}, macro AUC {:.4}",
            r.seed,
            r.best_val_accuracy,
            r.best_epoch,
            r.report.accuracy,
            r.report.macro_f1,
            r.report.auc_macro
        );
    }

    let summary_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["metric", "mean", "std", "n_seeds"])?;
    let rows: [(&str, fn(&SeedResult) -> f64); 4] = [
        ("test_accuracy", |r| r.report.accuracy),
        ("test_macro_f1", |r| r.report.macro_f1),
        ("test_auc_macro", |r| r.report.auc_macro),
        ("best_val_accuracy", |r| r.best_val_accuracy),
    ];
    for (name, get) in rows {
        let values: Vec<f64> = results.iter().map(get).collect();
        let (mean, std) = mean_std(&values);
        w.write_record([
            name.to_string(),
            format!("{mean:.17e}"),
            format!("{std:.17e}"),
            results.len().to_string(),
        ])?;
        if name == "test_accuracy" {
            println!("test accuracy {mean:.4} ± {std:.4} over {} seed(s)", results.len());
        }
    }
    w.flush()?;
    println!("artifacts under {}", out_dir.display());
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    let first = *cfg
        .seeds
        .first()
        .ok_or_else(|| Error::Config("seeds must name at least one replicate".into()))?;
    Ok(PathBuf::from(&cfg.out_dir).join(format!("seed_{first}")).join("best.ckpt"))
}

/// Model + configuration reconstructed from a checkpoint's embedded echo.
fn restore(path: &Path) -> Result<(FlexMoeModel, RunConfig, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let (model, cfg) = RunConfig::model_from_checkpoint(&ck).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((model, cfg, ck))
}

fn test_report(model: &FlexMoeModel, test_ds: &Dataset) -> Result<EvalReport> {
    let refs: Vec<&Sample> = test_ds.samples.iter().collect();
    let labels: Vec<usize> = test_ds.samples.iter().map(|s| s.label).collect();
    let mut counters = FlopCounters::default();
    let (scores, _) = model.evaluate(&refs, &mut counters)?;
    EvalReport::from_scores(&scores, &labels)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = match checkpoint {
        Some(p) => p,
        None => default_checkpoint(cfg)?,
    };
    let (model, echo_cfg, ck) = restore(&path)?;
    let (_, _, test_ds) = echo_cfg.materialize()?;
    let report = test_report(&model, &test_ds)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join("eval_report.csv");
    write_eval_report(&report_path, &report)?;
    println!(
        "checkpoint {} (seed {}): test accuracy {:.4}, macro F1 {:.4}, macro AUC {:.4} on {} samples",
        path.display(),
        ck.seed,
        report.accuracy,
        report.macro_f1,
        report.auc_macro,
        report.n
    );
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = match checkpoint {
        Some(p) => p,
        None => default_checkpoint(cfg)?,
    };
    let (model, echo_cfg, _) = restore(&path)?;
    // Routing condenses over every split: evaluation splits are fully
    // observed by protocol, so partial-combination rows can only come from
    // training samples.
    let (train_ds, val_ds, test_ds) = echo_cfg.materialize()?;
    let all: Vec<&Sample> = train_ds
        .samples
        .iter()
        .chain(&val_ds.samples)
        .chain(&test_ds.samples)
        .collect();
    let mut counters = FlopCounters::default();
    let (_, tokens) = model.evaluate(&all, &mut counters)?;

    let set = &model.arch.set;
    let experts = model.arch.n_experts;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let act = activation_matrix(set, &tokens, experts)?;
    let top1 = top1_matrix(set, &tokens, experts)?;
    let act_path = out_dir.join("activation_matrix.csv");
    let top1_path = out_dir.join("top1_matrix.csv");
    write_activation_matrix(&act_path, set, &act)?;
    write_activation_matrix(&top1_path, set, &top1)?;
    println!("wrote {}", act_path.display());
    println!("wrote {}", top1_path.display());

    let steered = steering_rate(&model, &tokens);
    if let Some((hits, total, rate)) = steered {
        println!(
            "partial-modality tokens routed top-1 to their combination expert: {hits}/{total} ({:.1}%)",
            rate * 100.0
        );
    }

    match &model.bank {
        Some(bank) => {
            let table = model.store.get(bank.param);
            let sim = bank_similarity(set, &bank.layout, table)?;
            let rows_path = out_dir.join("bank_similarity_combos.csv");
            let cols_path = out_dir.join("bank_similarity_modalities.csv");
            write_bank_similarity_rows(&rows_path, &sim)?;
            write_bank_similarity_cols(&cols_path, &sim)?;
            println!("wrote {}", rows_path.display());
            println!("wrote {}", cols_path.display());
        }
        None => println!(
            "no fill bank in this model (missing_fill = {}); bank similarity skipped",
            echo_cfg.missing_fill
        ),
    }
    Ok(())
}

/// Fraction of partial-combination tokens whose top-1 expert is their
/// combination's designated expert.
fn steering_rate(model: &FlexMoeModel, tokens: &[TokenRouting]) -> Option<(usize, usize, f64)> {
    let partial: Vec<_> = tokens.iter().filter(|t| !t.combo.is_full()).collect();
    if partial.is_empty() {
        return None;
    }
    let hits = partial
        .iter()
        .filter(|t| t.top1 == model.expert_map.index_of(&t.combo))
        .count();
    Some((hits, partial.len(), hits as f64 / partial.len() as f64))
}

fn cmd_gradcheck() -> Result<()> {
    let outcome = selfcheck::run()?;
    println!(
        "checked {} coordinates ({} structurally inactive) in {} ms",
        outcome.report.coords_checked,
        outcome.coords_zero,
        outcome.elapsed.as_millis()
    );
    println!(
        "routing margin {:.3e}, smallest active gradient {:.3e}",
        outcome.routing_margin, outcome.min_nonzero_grad
    );
    match &outcome.report.worst {
        Some(w) => println!(
            "max relative error {:.3e} (tolerance {:.0e}) at {}[{}]: analytic {:.12e} vs central {:.12e}",
            outcome.report.max_rel_error,
            selfcheck::SELF_CHECK_TOLERANCE,
            w.param,
            w.index,
            w.analytic,
            w.numeric
        ),
        None => println!("max relative error {:.3e}", outcome.report.max_rel_error),
    }
    if outcome.report.max_rel_error < selfcheck::SELF_CHECK_TOLERANCE {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
            outcome.report.max_rel_error,
            selfcheck::SELF_CHECK_TOLERANCE
        )))
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ds = synth_generate(&cfg.synth_config()?)?;
    let out_dir = PathBuf::from(&cfg.out_dir).join("dataset");
    let manifest = write_dataset_csvs(&ds, &out_dir)?;
    println!(
        "wrote {} samples ({} modalities, {} classes) under {}",
        ds.len(),
        ds.set.len(),
        ds.classes,
        out_dir.display()
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}
