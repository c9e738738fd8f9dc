//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use mlti_core::rng::substream;
use mlti_core::taskgen::{build_bank, sample_episode, BankSpec, Episode, PoolSplit, TaskBank};

pub fn gaussian_spec(classes: usize, dim: usize, radius: f64, noise: f64) -> BankSpec {
    BankSpec::GaussianClasses {
        classes,
        dim,
        radius,
        noise,
        samples_per_class: None,
        shift: 0.0,
        train_count: classes / 2,
        test_count: classes - classes / 2,
    }
}

pub fn gaussian_bank(classes: usize, dim: usize, radius: f64, noise: f64, seed: u64) -> TaskBank {
    build_bank(&gaussian_spec(classes, dim, radius, noise), seed).unwrap()
}

pub fn episodes(
    bank: &TaskBank,
    split: PoolSplit,
    n: usize,
    n_way: usize,
    k: usize,
    q: usize,
    seed: u64,
) -> Vec<Episode> {
    (0..n)
        .map(|e| sample_episode(bank, split, n_way, k, q, &mut substream(seed, &[e as u64])).unwrap())
        .collect()
}

/// Smallest distance between two class means of the bank.
pub fn min_mean_gap(bank: &TaskBank) -> f64 {
    let mlti_core::taskgen::BankData::Gaussian { means } = &bank.data else {
        panic!("not a gaussian bank");
    };
    let mut best = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// First bank (by seed) whose class means are at least `gap_sigmas` noise
/// standard deviations apart.
pub fn separable_bank(classes: usize, dim: usize, radius: f64, noise: f64, gap_sigmas: f64) -> TaskBank {
    (0..1000)
        .map(|s| gaussian_bank(classes, dim, radius, noise, s))
        .find(|b| min_mean_gap(b) >= gap_sigmas * noise)
        .expect("no seed below 1000 gives the requested separation")
}
