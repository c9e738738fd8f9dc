use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mlti_core::harness::{
    ablation, cross_domain, evaluate_model, preset, pooled, run_experiment, run_theory, summarize,
    sweep_tasks, write_run, write_sweep, write_tables, write_theory, RunConfig, PRESETS,
};
use mlti_core::learners::read_checkpoint;
use mlti_core::taskgen::{build_bank, export_bank, import_bank};

#[derive(Parser)]
#[command(name = "mlti", version, about = "Meta-learning with task interpolation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or `preset:<name>` for a built-in preset.
    #[arg(long)]
    config: String,
    /// Run a single training seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path override, e.g. `train.iterations=100`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train every seed and evaluate on the meta-test pool.
    Train(Common),
    /// Evaluate a checkpoint on the meta-test pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare vanilla, intra-task, cross-task and full interpolation.
    Ablation(Common),
    /// Repeat the ablation over growing meta-train pools.
    Sweep(Common),
    /// Meta-train on `bank` and meta-test on `target_bank`.
    CrossDomain(Common),
    /// Lemma checks and variance ordering.
    Theory(Common),
    /// Export or import a task bank as text.
    Bank {
        #[command(subcommand)]
        action: BankAction,
    },
}

#[derive(Subcommand)]
enum BankAction {
    /// Write the configured bank to `--out` as a file.
    Export(Common),
    /// Validate a bank file and describe it.
    Import { path: PathBuf },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seeds=[{seed}]"));
    }
    let config = match common.config.strip_prefix("preset:") {
        Some(name) => preset(name)
            .with_context(|| format!("known presets: {}", PRESETS.join(", ")))?
            .with_overrides(&overrides)?,
        None => {
            let text = fs::read_to_string(&common.config)
                .with_context(|| format!("reading {}", common.config))?;
            RunConfig::parse(&text, &overrides).with_context(|| format!("in {}", common.config))?
        }
    };
    Ok(config)
}

fn report(out: &Path, what: &str) {
    println!("{what} written to {}", out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let config = load_config(&common)?;
            let output = run_experiment(&config)?;
            write_run(&common.out, &output)?;
            if let Some(s) = pooled(&output.summaries, &config.run_id) {
                println!("{} {}: {:.4} ± {:.4} (n = {})", config.run_id, s.metric, s.mean, s.ci95, s.n);
            }
            report(&common.out, "run");
        }
        Command::Eval { common, checkpoint } => {
            let config = load_config(&common)?;
            let text = fs::read_to_string(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let model = read_checkpoint(&text)?;
            if model.dims() != config.dims().as_slice() {
                bail!("checkpoint dims {:?} do not match the config's {:?}", model.dims(), config.dims());
            }
            let bank = build_bank(&config.bank, config.bank_seed)?;
            let mut records = Vec::new();
            for &seed in &config.seeds {
                records.extend(evaluate_model(&config, &model, &bank, seed)?);
            }
            let summaries = summarize(&records)?;
            write_tables(&common.out, &config, &records, &summaries)?;
            if let Some(s) = pooled(&summaries, &config.run_id) {
                println!("{} {}: {:.4} ± {:.4} (n = {})", config.run_id, s.metric, s.mean, s.ci95, s.n);
            }
            report(&common.out, "evaluation");
        }
        Command::Ablation(common) => {
            let config = load_config(&common)?;
            let output = ablation(&config)?;
            write_tables(&common.out, &config, &output.records, &output.summaries)?;
            for (name, _) in &output.runs {
                if let Some(mean) = output.mean(name) {
                    println!("{name}: {mean:.4}");
                }
            }
            report(&common.out, "ablation");
        }
        Command::Sweep(common) => {
            let config = load_config(&common)?;
            let output = sweep_tasks(&config)?;
            write_sweep(&common.out, &config, &output)?;
            for p in &output.points {
                println!("pool {:>4} {:<8} {:.4} ± {:.4}", p.pool_size, p.condition, p.summary.mean, p.summary.ci95);
            }
            report(&common.out, "sweep");
        }
        Command::CrossDomain(common) => {
            let config = load_config(&common)?;
            let output = cross_domain(&config)?;
            write_run(&common.out, &output)?;
            if let Some(s) = pooled(&output.summaries, &config.run_id) {
                println!("{} {}: {:.4} ± {:.4} (n = {})", config.run_id, s.metric, s.mean, s.ci95, s.n);
            }
            report(&common.out, "cross-domain run");
        }
        Command::Theory(common) => {
            let config = load_config(&common)?;
            let output = run_theory(&config.theory)?;
            write_theory(&common.out, &output)?;
            fs::write(common.out.join("resolved-config.toml"), config.resolved())?;
            for (check, slope) in &output.slopes {
                println!("{check}: remainder slope {slope:.3}");
            }
            let psd = output.variance.iter().filter(|v| v.psd).count();
            println!("variance ordering: {psd}/{} instances PSD", output.variance.len());
            report(&common.out, "theory tables");
        }
        Command::Bank { action } => match action {
            BankAction::Export(common) => {
                let config = load_config(&common)?;
                let bank = build_bank(&config.bank, config.bank_seed)?;
                if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(&common.out, export_bank(&bank))
                    .with_context(|| format!("writing {}", common.out.display()))?;
                report(&common.out, "bank");
            }
            BankAction::Import { path } => {
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let bank = import_bank(&text)?;
                println!(
                    "{} bank, seed {}: {} meta-train and {} meta-test ids",
                    bank.spec.kind_name(),
                    bank.seed,
                    bank.meta_train_pool.len(),
                    bank.meta_test_pool.len()
                );
            }
        },
    }
    Ok(())
}
