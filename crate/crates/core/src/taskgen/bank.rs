use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::glyph::{self, Grid, Transform, GLYPH_COUNT, TRANSFORM_COMBOS};
use super::{BankError, BankSpec, PoolSplit};
use crate::rng::{substream, Rng};

/// Seed-derived content of a bank.
#[derive(Debug, Clone, PartialEq)]
pub enum BankData {
    /// One mean per class.
    Gaussian { means: Vec<Vec<f64>> },
    /// Shared glyph set; task `t` applies [`Transform::from_index`]`(t)`.
    Glyph { glyphs: Vec<Grid> },
    /// Shared glyph set; object `o` is glyph `o % 10` at half scale when `o >= 10`.
    Rotation { glyphs: Vec<Grid> },
}

/// Immutable, fully seed-determined task bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBank {
    pub spec: BankSpec,
    pub seed: u64,
    pub data: BankData,
    /// Seed of the permutation the pools are cut from.
    pub pool_seed: u64,
    /// Class ids (non-label-sharing) or task ids (label-sharing).
    pub meta_train_pool: Vec<usize>,
    pub meta_test_pool: Vec<usize>,
}

/// Builds a bank from its parameters; identical arguments give identical banks.
pub fn build_bank(spec: &BankSpec, seed: u64) -> Result<TaskBank, BankError> {
    validate(spec)?;
    let data = match spec {
        BankSpec::GaussianClasses {
            classes,
            dim,
            radius,
            ..
        } => BankData::Gaussian {
            means: (0..*classes)
                .map(|c| sphere_point(&mut substream(seed, &[0, c as u64]), *dim, *radius))
                .collect(),
        },
        BankSpec::GlyphGrid { grid, .. } => BankData::Glyph {
            glyphs: glyph::base_glyphs(*grid),
        },
        BankSpec::RotationRegression { grid, .. } => BankData::Rotation {
            glyphs: glyph::base_glyphs(*grid),
        },
    };
    let (train, test) = spec.counts();
    let bank = TaskBank {
        spec: spec.clone(),
        seed,
        data,
        pool_seed: seed,
        meta_train_pool: Vec::new(),
        meta_test_pool: Vec::new(),
    };
    split_pools(bank, train, test, seed)
}

/// Cuts disjoint pools from a seeded permutation of all ids: the train pool is
/// its first `train_count` entries and the test pool its last `test_count`, so
/// growing `train_count` only appends.
pub fn split_pools(
    mut bank: TaskBank,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<TaskBank, BankError> {
    let total = bank.total();
    if train_count == 0 || test_count == 0 {
        return Err(BankError::Invalid("pool sizes must be at least 1".into()));
    }
    if train_count + test_count > total {
        return Err(BankError::PoolTooLarge {
            what: bank.unit_name(),
            needed: train_count + test_count,
            available: total,
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut substream(seed, &[1]));
    bank.meta_train_pool = order[..train_count].to_vec();
    bank.meta_test_pool = order[total - test_count..].to_vec();
    bank.pool_seed = seed;
    bank.spec.set_counts(train_count, test_count);
    Ok(bank)
}

fn validate(spec: &BankSpec) -> Result<(), BankError> {
    let bad = |m: String| Err(BankError::Invalid(m));
    match spec {
        BankSpec::GaussianClasses {
            classes,
            dim,
            radius,
            noise,
            samples_per_class,
            shift,
            ..
        } => {
            if *classes < 2 {
                return bad(format!("gaussian-classes needs at least 2 classes, got {classes}"));
            }
            if *dim == 0 {
                return bad("gaussian-classes needs dim >= 1".into());
            }
            if !(radius.is_finite() && *radius >= 0.0) {
                return bad(format!("radius must be finite and >= 0, got {radius}"));
            }
            if !(noise.is_finite() && *noise >= 0.0) {
                return bad(format!("noise must be finite and >= 0, got {noise}"));
            }
            if *samples_per_class == Some(0) {
                return bad("samples_per_class must be at least 1".into());
            }
            if !shift.is_finite() {
                return bad("shift must be finite".into());
            }
        }
        BankSpec::GlyphGrid { grid, noise, .. } | BankSpec::RotationRegression { grid, noise, .. } => {
            if *grid < 8 {
                return bad(format!("glyph grid side must be at least 8, got {grid}"));
            }
            if !(noise.is_finite() && *noise >= 0.0) {
                return bad(format!("noise must be finite and >= 0, got {noise}"));
            }
        }
    }
    Ok(())
}

fn sphere_point(rng: &mut Rng, dim: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| radius * x / norm).collect()
}

impl TaskBank {
    /// Number of classes (non-label-sharing) or tasks (label-sharing).
    pub fn total(&self) -> usize {
        match (&self.spec, &self.data) {
            (BankSpec::GaussianClasses { classes, .. }, _) => *classes,
            (_, BankData::Glyph { .. }) => TRANSFORM_COMBOS,
            _ => 2 * GLYPH_COUNT,
        }
    }

    fn unit_name(&self) -> &'static str {
        match self.spec {
            BankSpec::GaussianClasses { .. } => "classes",
            _ => "tasks",
        }
    }

    pub fn pool(&self, split: PoolSplit) -> &[usize] {
        match split {
            PoolSplit::Train => &self.meta_train_pool,
            PoolSplit::Test => &self.meta_test_pool,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// One input row of gaussian class `class`. With a finite per-class pool
    /// the row is a pure function of `(seed, class, index)`.
    pub(crate) fn gaussian_row(&self, class: usize, index: Option<usize>, rng: &mut Rng) -> Vec<f64> {
        let (BankData::Gaussian { means }, BankSpec::GaussianClasses { noise, shift, .. }) =
            (&self.data, &self.spec)
        else {
            unreachable!("gaussian_row on a non-gaussian bank");
        };
        let mut own;
        let r: &mut Rng = match index {
            Some(i) => {
                own = substream(self.seed, &[2, class as u64, i as u64]);
                &mut own
            }
            None => rng,
        };
        means[class]
            .iter()
            .map(|m| m + noise * r.sample::<f64, _>(StandardNormal) + shift)
            .collect()
    }

    /// One glyph-grid input for class `glyph_id` under task `task`.
    pub(crate) fn glyph_row(&self, task: usize, glyph_id: usize, rng: &mut Rng) -> Vec<f64> {
        let (BankData::Glyph { glyphs }, BankSpec::GlyphGrid { grid, noise, .. }) =
            (&self.data, &self.spec)
        else {
            unreachable!("glyph_row on a non-glyph bank");
        };
        let base = Transform::from_index(task).apply(&glyphs[glyph_id], *grid);
        add_noise(base, *noise, rng)
    }

    /// One rotated object and its target `θ / 2π`.
    pub(crate) fn rotation_row(&self, object: usize, rng: &mut Rng) -> (Vec<f64>, f64) {
        let (BankData::Rotation { glyphs }, BankSpec::RotationRegression { grid, noise, .. }) =
            (&self.data, &self.spec)
        else {
            unreachable!("rotation_row on a non-rotation bank");
        };
        let g = &glyphs[object % GLYPH_COUNT];
        let shaped = if object >= GLYPH_COUNT {
            glyph::half_scale(g, *grid)
        } else {
            g.clone()
        };
        let turn: f64 = rng.random_range(0.0..1.0);
        let rotated = glyph::rotate_angle(&shaped, *grid, turn * std::f64::consts::TAU);
        (add_noise(rotated, *noise, rng), turn)
    }
}

fn add_noise(mut grid: Vec<f64>, noise: f64, rng: &mut Rng) -> Vec<f64> {
    if noise > 0.0 {
        for v in &mut grid {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    grid
}
