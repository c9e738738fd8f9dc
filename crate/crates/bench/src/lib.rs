//! Fixtures shared by the criterion benches.

use mlti_core::harness::{init_model, preset, RunConfig};
use mlti_core::learners::LayeredModel;
use mlti_core::rng::substream;
use mlti_core::taskgen::{build_bank, sample_episode, Episode, PoolSplit, TaskBank};

/// The desk-scale MAML preset with its bank, a fresh model and one training batch.
pub struct Fixture {
    pub config: RunConfig,
    pub bank: TaskBank,
    pub model: LayeredModel,
    pub batch: Vec<Episode>,
}

pub fn fixture(name: &str) -> Fixture {
    let config = preset(name).expect("known preset");
    let bank = build_bank(&config.bank, config.bank_seed).expect("valid bank");
    let model = init_model(&config, 0).expect("valid dims");
    let batch = (0..config.train.batch_size as u64)
        .map(|b| {
            sample_episode(&bank, PoolSplit::Train, config.n_way, config.k_shot, config.q_queries, &mut substream(0, &[b]))
                .expect("episode")
        })
        .collect();
    Fixture {
        config,
        bank,
        model,
        batch,
    }
}
