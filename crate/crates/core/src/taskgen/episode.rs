use rand::seq::index;
use rand::Rng as _;

use super::glyph::GLYPH_COUNT;
use super::{BankError, BankSpec, Episode, PoolSplit, TargetKind, TaskBank};
use crate::diffcore::Tensor;
use crate::rng::Rng;

/// Draws one episode from the chosen pool.
///
/// Non-label-sharing banks pick `n_way` classes as a uniformly random ordered
/// sample, so label `r` maps to a fresh random class every episode.
/// Label-sharing classification banks require `n_way` to equal the shared
/// label count; regression banks require `n_way == 1`.
pub fn sample_episode(
    bank: &TaskBank,
    split: PoolSplit,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    rng: &mut Rng,
) -> Result<Episode, BankError> {
    if k_shot == 0 || q_queries == 0 {
        return Err(BankError::Invalid(
            "episodes need at least one support and one query row per class".into(),
        ));
    }
    let pool = bank.pool(split);
    let dim = bank.input_dim();
    let mut support = Vec::with_capacity(n_way * k_shot * dim);
    let mut query = Vec::with_capacity(n_way * q_queries * dim);
    let (class_ids, task_id, support_y, query_y) = match &bank.spec {
        BankSpec::GaussianClasses {
            samples_per_class, ..
        } => {
            if n_way == 0 || n_way > pool.len() {
                return Err(BankError::FewerClasses {
                    needed: n_way,
                    available: pool.len(),
                });
            }
            if let Some(s) = samples_per_class {
                if k_shot + q_queries > *s {
                    return Err(BankError::FewerSamples {
                        needed: k_shot + q_queries,
                        available: *s,
                    });
                }
            }
            let picked: Vec<usize> = index::sample(rng, pool.len(), n_way)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let mut q_rows = Vec::with_capacity(n_way);
            for &class in &picked {
                let draws: Vec<Option<usize>> = match samples_per_class {
                    Some(s) => index::sample(rng, *s, k_shot + q_queries)
                        .into_iter()
                        .map(Some)
                        .collect(),
                    None => vec![None; k_shot + q_queries],
                };
                for (n, d) in draws.into_iter().enumerate() {
                    let row = bank.gaussian_row(class, d, rng);
                    if n < k_shot {
                        support.extend(row);
                    } else {
                        q_rows.push(row);
                    }
                }
            }
            query.extend(q_rows.into_iter().flatten());
            (
                picked.clone(),
                picked[0],
                Tensor::one_hot(&labels(n_way, k_shot), n_way)?,
                Tensor::one_hot(&labels(n_way, q_queries), n_way)?,
            )
        }
        BankSpec::GlyphGrid { .. } => {
            if n_way != GLYPH_COUNT {
                return Err(BankError::WayMismatch {
                    labels: GLYPH_COUNT,
                    requested: n_way,
                });
            }
            let task = pool[rng.random_range(0..pool.len())];
            for class in 0..n_way {
                for _ in 0..k_shot {
                    support.extend(bank.glyph_row(task, class, rng));
                }
            }
            for class in 0..n_way {
                for _ in 0..q_queries {
                    query.extend(bank.glyph_row(task, class, rng));
                }
            }
            (
                (0..n_way).collect(),
                task,
                Tensor::one_hot(&labels(n_way, k_shot), n_way)?,
                Tensor::one_hot(&labels(n_way, q_queries), n_way)?,
            )
        }
        BankSpec::RotationRegression { .. } => {
            if n_way != 1 {
                return Err(BankError::WayMismatch {
                    labels: 1,
                    requested: n_way,
                });
            }
            let object = pool[rng.random_range(0..pool.len())];
            let mut sy = Vec::with_capacity(k_shot);
            let mut qy = Vec::with_capacity(q_queries);
            for n in 0..k_shot + q_queries {
                let (row, target) = bank.rotation_row(object, rng);
                if n < k_shot {
                    support.extend(row);
                    sy.push(target);
                } else {
                    query.extend(row);
                    qy.push(target);
                }
            }
            (
                vec![object],
                object,
                Tensor::matrix(k_shot, 1, sy)?,
                Tensor::matrix(q_queries, 1, qy)?,
            )
        }
    };
    Ok(Episode {
        support_x: Tensor::matrix(n_way * k_shot, dim, support)?,
        support_y,
        query_x: Tensor::matrix(n_way * q_queries, dim, query)?,
        query_y,
        scenario: bank.spec.scenario(),
        target: bank.spec.target_kind(),
        n_way,
        k_shot,
        q_queries,
        class_ids,
        task_id,
        grid: bank.spec.grid_side(),
    })
}

fn labels(n_way: usize, per_class: usize) -> Vec<usize> {
    (0..n_way)
        .flat_map(|r| std::iter::repeat_n(r, per_class))
        .collect()
}

impl Episode {
    /// Whether targets are one-hot class rows.
    pub fn is_classification(&self) -> bool {
        self.target == TargetKind::Classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::taskgen::{build_bank, Scenario};

    fn gaussian(pool: Option<usize>) -> TaskBank {
        build_bank(
            &BankSpec::GaussianClasses {
                classes: 12,
                dim: 6,
                radius: 2.0,
                noise: 0.5,
                samples_per_class: pool,
                shift: 0.0,
                train_count: 8,
                test_count: 4,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn five_way_one_shot_shapes() {
        let bank = gaussian(None);
        let ep = sample_episode(&bank, PoolSplit::Train, 5, 1, 15, &mut substream(1, &[])).unwrap();
        assert_eq!(ep.support_x.shape(), &[5, 6]);
        assert_eq!(ep.query_x.shape(), &[75, 6]);
        assert_eq!(ep.support_y.shape(), &[5, 5]);
        assert_eq!(ep.scenario, Scenario::NonLabelSharing);
        for c in &ep.class_ids {
            assert!(bank.meta_train_pool.contains(c));
        }
    }

    #[test]
    fn too_many_ways_rejected() {
        let bank = gaussian(None);
        let err = sample_episode(&bank, PoolSplit::Test, 5, 1, 1, &mut substream(1, &[])).unwrap_err();
        assert_eq!(
            err,
            BankError::FewerClasses {
                needed: 5,
                available: 4
            }
        );
        assert!(err.to_string().contains("fewer base classes than needed"));
    }

    #[test]
    fn finite_pool_rows_are_deterministic_and_disjoint() {
        let bank = gaussian(Some(6));
        let ep = sample_episode(&bank, PoolSplit::Train, 2, 3, 3, &mut substream(4, &[])).unwrap();
        for r in 0..2 {
            for s in 0..3 {
                for q in 0..3 {
                    assert_ne!(ep.support_x.row(r * 3 + s), ep.query_x.row(r * 3 + q));
                }
            }
        }
        assert!(sample_episode(&bank, PoolSplit::Train, 2, 4, 3, &mut substream(4, &[])).is_err());
    }

    #[test]
    fn rotation_targets_in_unit_interval() {
        let bank = build_bank(
            &BankSpec::RotationRegression {
                grid: 8,
                noise: 0.05,
                train_count: 12,
                test_count: 8,
            },
            2,
        )
        .unwrap();
        let mut rng = substream(3, &[]);
        for _ in 0..50 {
            let ep = sample_episode(&bank, PoolSplit::Train, 1, 5, 10, &mut rng).unwrap();
            assert_eq!(ep.query_y.shape(), &[10, 1]);
            assert!(ep
                .support_y
                .data()
                .iter()
                .chain(ep.query_y.data())
                .all(|&t| (0.0..1.0).contains(&t)));
        }
    }

    #[test]
    fn glyph_episode_needs_all_labels() {
        let bank = build_bank(
            &BankSpec::GlyphGrid {
                grid: 8,
                noise: 0.1,
                train_count: 16,
                test_count: 10,
            },
            2,
        )
        .unwrap();
        let mut rng = substream(3, &[]);
        assert!(sample_episode(&bank, PoolSplit::Train, 5, 1, 1, &mut rng).is_err());
        let ep = sample_episode(&bank, PoolSplit::Test, 10, 1, 2, &mut rng).unwrap();
        assert!(bank.meta_test_pool.contains(&ep.task_id));
        assert_eq!(ep.query_labels().len(), 20);
        assert_eq!(ep.grid, Some(8));
    }
}
