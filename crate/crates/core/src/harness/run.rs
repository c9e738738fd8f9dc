use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{Learner, RunConfig};
use super::metrics::{metrics_csv, summarize, summary_csv, MetricsRecord, Phase, Summary};
use super::HarnessError;
use crate::learners::{
    maml_meta_test, maml_train_step, protonet_meta_test, protonet_train_step, variant_config,
    write_checkpoint, LayeredModel, LearnError, MetricKind, OuterOptimizer, StepReport,
};
use crate::mlti::{MixMode, TaskMixer};
use crate::rng::substream;
use crate::taskgen::{build_bank, sample_episode, Episode, PoolSplit, TargetKind, TaskBank};

/// Substream coordinates under a training seed: `[INIT]`, `[TRAIN, it, b]`,
/// `[MIX, it]` and `[TEST, episode]`.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_MIX: u64 = 2;
pub const STREAM_TEST: u64 = 3;

/// Everything one experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub summaries: Vec<Summary>,
    /// `(seed, checkpoint text)`.
    pub checkpoints: Vec<(u64, String)>,
    /// Ids of the meta-test pool evaluated on.
    pub test_pool: Vec<usize>,
}

pub fn metric_kind(bank: &TaskBank) -> MetricKind {
    match bank.spec.target_kind() {
        TargetKind::Classes => MetricKind::Accuracy,
        TargetKind::Scalar => MetricKind::Mse,
    }
}

/// Freshly initialized model for `seed`.
pub fn init_model(config: &RunConfig, seed: u64) -> Result<LayeredModel, HarnessError> {
    let base = LayeredModel::new(&config.dims(), config.prefix(), &mut substream(seed, &[STREAM_INIT]))?;
    Ok(match config.learner.variant() {
        Some(v) => variant_config(&base, v, config.train.inner_lr),
        None => base,
    })
}

fn training_batch(config: &RunConfig, bank: &TaskBank, seed: u64, it: usize) -> Result<Vec<Episode>, HarnessError> {
    (0..config.train.batch_size)
        .map(|b| {
            let mut rng = substream(seed, &[STREAM_TRAIN, it as u64, b as u64]);
            sample_episode(bank, PoolSplit::Train, config.n_way, config.k_shot, config.q_queries, &mut rng)
                .map_err(HarnessError::from)
        })
        .collect()
}

/// Meta-trains from the seed's initialization; returns the model and the
/// training-loss records.
pub fn train_model(config: &RunConfig, bank: &TaskBank, seed: u64) -> Result<(LayeredModel, Vec<MetricsRecord>), HarnessError> {
    let mut model = init_model(config, seed)?;
    let mut optimizer = OuterOptimizer::new(config.train.optimizer, config.train.outer_lr);
    let mixer: Option<&dyn TaskMixer> = match config.mix.mode {
        MixMode::Vanilla => None,
        _ => Some(&config.mix),
    };
    let mut records = Vec::new();
    let last = config.train.iterations.saturating_sub(1);
    for it in 0..config.train.iterations {
        let batch = training_batch(config, bank, seed, it)?;
        let mut rng = substream(seed, &[STREAM_MIX, it as u64]);
        let step: Result<StepReport, LearnError> = match config.learner {
            Learner::Protonet => protonet_train_step(&mut model, &batch, &config.train, mixer, &mut optimizer, it, &mut rng),
            _ => maml_train_step(&mut model, &batch, &config.train, mixer, &mut optimizer, it, &mut rng),
        };
        let report = step.map_err(|source| HarnessError::Run {
            run_id: config.run_id.clone(),
            seed,
            source,
        })?;
        if it % config.log_every == 0 || it == last {
            records.push(MetricsRecord {
                run_id: config.run_id.clone(),
                seed,
                phase: Phase::Train,
                index: it,
                metric: "loss".into(),
                value: report.loss,
            });
        }
    }
    Ok((model, records))
}

/// Scores `model` on `config.test_episodes` meta-test episodes of `bank`,
/// without interpolation; episodes are evaluated in parallel.
pub fn evaluate_model(config: &RunConfig, model: &LayeredModel, bank: &TaskBank, seed: u64) -> Result<Vec<MetricsRecord>, HarnessError> {
    let metric = metric_kind(bank).name();
    (0..config.test_episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = substream(seed, &[STREAM_TEST, e as u64]);
            let ep = sample_episode(bank, PoolSplit::Test, config.n_way, config.k_shot, config.q_queries, &mut rng)?;
            let eval = match config.learner {
                Learner::Protonet => protonet_meta_test(model, &ep),
                _ => maml_meta_test(model, &ep, config.train.inner_lr, config.train.meta_test_updates()),
            }
            .map_err(|source| HarnessError::Run {
                run_id: config.run_id.clone(),
                seed,
                source,
            })?;
            Ok(MetricsRecord {
                run_id: config.run_id.clone(),
                seed,
                phase: Phase::Test,
                index: e,
                metric: metric.into(),
                value: eval.metric,
            })
        })
        .collect()
}

/// Input width and target kind must agree between training and test banks.
pub fn check_compatible(source: &TaskBank, target: &TaskBank) -> Result<(), HarnessError> {
    if source.input_dim() != target.input_dim() {
        return Err(HarnessError::Config(format!(
            "input widths differ: {} vs {}",
            source.input_dim(),
            target.input_dim()
        )));
    }
    if source.spec.target_kind() != target.spec.target_kind() || source.spec.scenario() != target.spec.scenario() {
        return Err(HarnessError::Config(format!(
            "banks differ in task kind: {} vs {}",
            source.spec.kind_name(),
            target.spec.kind_name()
        )));
    }
    Ok(())
}

/// Trains every seed on `train_bank` and evaluates on `test_bank`'s meta-test pool.
pub fn run_on_banks(config: &RunConfig, train_bank: &TaskBank, test_bank: &TaskBank) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    check_compatible(train_bank, test_bank)?;
    let per_seed: Vec<(Vec<MetricsRecord>, (u64, String))> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (model, mut records) = train_model(config, train_bank, seed)?;
            records.extend(evaluate_model(config, &model, test_bank, seed)?);
            Ok((records, (seed, write_checkpoint(&model))))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    for (r, c) in per_seed {
        records.extend(r);
        checkpoints.push(c);
    }
    let summaries = summarize(&records)?;
    Ok(RunOutput {
        config: config.clone(),
        records,
        summaries,
        checkpoints,
        test_pool: test_bank.meta_test_pool.clone(),
    })
}

/// Trains on the meta-train pool and evaluates on the meta-test pool of the configured bank.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let bank = build_bank(&config.bank, config.bank_seed)?;
    run_on_banks(config, &bank, &bank)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes `metrics.csv`, `summary.csv` and `resolved-config.toml` for any set
/// of records gathered by one collector.
pub fn write_tables(dir: &Path, config: &RunConfig, records: &[MetricsRecord], summaries: &[Summary]) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(records)?)?;
    write_file(&dir.join("summary.csv"), &summary_csv(summaries))?;
    write_file(&dir.join("resolved-config.toml"), &config.resolved())
}

/// Writes the tables plus one `checkpoint-seed-<seed>` file per seed.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<(), HarnessError> {
    write_tables(dir, &output.config, &output.records, &output.summaries)?;
    for (seed, text) in &output.checkpoints {
        write_file(&dir.join(format!("checkpoint-seed-{seed}")), text)?;
    }
    Ok(())
}
