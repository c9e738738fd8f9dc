use super::config::{Learner, RunConfig};
use super::HarnessError;
use crate::learners::OptimizerKind;
use crate::mlti::{MixConfig, MixMethod, MixMode};
use crate::taskgen::BankSpec;

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 7] = [
    "nls-maml",
    "nls-protonet",
    "task-sweep",
    "cross-domain",
    "glyph-ls",
    "pose-regression",
    "theory",
];

fn gaussian(classes: usize, train: usize, test: usize, shift: f64) -> BankSpec {
    BankSpec::GaussianClasses {
        classes,
        dim: 16,
        radius: 6.0,
        noise: 1.0,
        samples_per_class: Some(20),
        shift,
        train_count: train,
        test_count: test,
    }
}

/// Desk-scale experiment settings by name.
pub fn preset(name: &str) -> Result<RunConfig, HarnessError> {
    let base = RunConfig {
        bank: gaussian(24, 8, 16, 0.0),
        ..RunConfig::default()
    };
    let mut c = match name {
        "nls-maml" => base,
        "nls-protonet" => RunConfig {
            learner: Learner::Protonet,
            ..base
        },
        // The smallest pool holds 4 classes, so episodes are 4-way.
        "task-sweep" => RunConfig {
            bank: gaussian(48, 32, 16, 0.0),
            n_way: 4,
            ..base
        },
        "cross-domain" => RunConfig {
            target_bank: Some(gaussian(24, 8, 16, 0.5)),
            ..base
        },
        "glyph-ls" => RunConfig {
            bank: BankSpec::GlyphGrid {
                grid: 8,
                noise: 0.1,
                train_count: 12,
                test_count: 12,
            },
            n_way: 10,
            mix: MixConfig {
                method: MixMethod::Cutmix,
                layer_max: 0,
                ..MixConfig::default()
            },
            ..base
        },
        "pose-regression" => RunConfig {
            bank: BankSpec::RotationRegression {
                grid: 8,
                noise: 0.05,
                train_count: 10,
                test_count: 10,
            },
            n_way: 1,
            k_shot: 10,
            q_queries: 10,
            ..base
        },
        "theory" => base,
        _ => {
            return Err(HarnessError::Config(format!(
                "unknown preset {name:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    c.run_id = name.to_string();
    c.train.optimizer = OptimizerKind::Adam;
    if c.mix.mode == MixMode::Vanilla {
        c.mix.mode = MixMode::Both;
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(RunConfig::parse(&c.resolved(), &[]).unwrap(), c, "{name}");
        }
        assert!(preset("nope").is_err());
    }
}
