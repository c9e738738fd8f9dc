use rand_distr::{Distribution, StandardNormal};

use super::{sigmoid, TheoryError};
use crate::diffcore::Tensor;
use crate::rng::substream;

/// One binary task: features (hidden representations or raw inputs), class
/// labels in `{0, 1}` and the task's linear head (`φ_i`, or the shared `θ`).
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryTask {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TheoryTask {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices of each class, in row order.
    pub fn class_rows(&self) -> [Vec<usize>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (r, &y) in self.labels.iter().enumerate() {
            out[y].push(r);
        }
        out
    }

    fn projection(&self, row: usize, w: &[f64]) -> f64 {
        self.features.row(row).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    /// `wᵀ x_k` for every row.
    pub fn projections(&self, w: &[f64]) -> Vec<f64> {
        (0..self.features.rows()).map(|r| self.projection(r, w)).collect()
    }
}

/// Two-class tasks with linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryModel {
    pub tasks: Vec<TheoryTask>,
}

fn normal_vec(rng: &mut crate::rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z })
        .collect::<Vec<f64>>()
}

impl TheoryModel {
    pub fn new(tasks: Vec<TheoryTask>) -> Result<Self, TheoryError> {
        let model = Self { tasks };
        model.validate()?;
        Ok(model)
    }

    /// Every task non-empty, two balanced classes of equal size across tasks,
    /// one feature width, head widths matching.
    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        let Some(first) = self.tasks.first() else {
            return bad("no tasks".into());
        };
        let d = first.dim();
        let per_class = first.class_rows()[0].len();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.features.shape().len() != 2 || t.dim() != d || t.weights.len() != d {
                return bad(format!("task {i} has inconsistent widths"));
            }
            if t.labels.len() != t.features.rows() || t.labels.iter().any(|&y| y > 1) {
                return bad(format!("task {i} needs one label in {{0, 1}} per row"));
            }
            let rows = t.class_rows();
            if rows[0].len() != per_class || rows[1].len() != per_class || per_class == 0 {
                return bad(format!(
                    "task {i}: every class of every task needs the same non-zero size"
                ));
            }
            if !t.features.is_finite() || t.weights.iter().any(|w| !w.is_finite()) {
                return bad(format!("task {i} holds non-finite values"));
            }
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.tasks[0].class_rows()[0].len()
    }

    /// Hidden representations `σ(W x)` of class-conditional gaussian inputs
    /// with per-task offsets, centred and scaled to unit mean row norm;
    /// task heads `φ_i` are drawn independently unless `shared_head`.
    pub fn gbml(
        task_count: usize,
        per_class: usize,
        input_dim: usize,
        hidden_dim: usize,
        shared_head: bool,
        seed: u64,
    ) -> Result<Self, TheoryError> {
        let mut rng = substream(seed, &[0]);
        let w = normal_vec(&mut rng, hidden_dim * input_dim, 1.0 / (input_dim as f64).sqrt());
        let head = normal_vec(&mut rng, hidden_dim, 2.0 / (hidden_dim as f64).sqrt());
        let mut tasks = Vec::with_capacity(task_count);
        for i in 0..task_count {
            let mut rng = substream(seed, &[1, i as u64]);
            let offset = normal_vec(&mut rng, input_dim, 1.0);
            let class_shift = normal_vec(&mut rng, input_dim, 1.0);
            let mut data = Vec::with_capacity(2 * per_class * hidden_dim);
            let mut labels = Vec::with_capacity(2 * per_class);
            for y in 0..2 {
                let sign = if y == 0 { -1.0 } else { 1.0 };
                for _ in 0..per_class {
                    let noise = normal_vec(&mut rng, input_dim, 1.0);
                    let x: Vec<f64> = (0..input_dim)
                        .map(|c| offset[c] + sign * class_shift[c] + noise[c])
                        .collect();
                    for h in 0..hidden_dim {
                        let z: f64 = (0..input_dim).map(|c| w[h * input_dim + c] * x[c]).sum();
                        data.push(sigmoid(z));
                    }
                    labels.push(y);
                }
            }
            let weights = if shared_head {
                head.clone()
            } else {
                normal_vec(&mut rng, hidden_dim, 2.0 / (hidden_dim as f64).sqrt())
            };
            tasks.push(TheoryTask {
                features: Tensor::matrix(2 * per_class, hidden_dim, data)
                    .map_err(|e| TheoryError::Invalid(e.to_string()))?,
                labels,
                weights,
            });
        }
        let mut model = Self::new(tasks)?;
        model.tasks = center_features(&model.tasks)?;
        model.normalize();
        Ok(model)
    }

    /// Raw class-conditional gaussian features with per-task offsets and a
    /// shared `θ`, centred and scaled to unit mean row norm.
    pub fn protonet(task_count: usize, per_class: usize, dim: usize, seed: u64) -> Result<Self, TheoryError> {
        let mut rng = substream(seed, &[0]);
        let theta = normal_vec(&mut rng, dim, 2.0 / (dim as f64).sqrt());
        let mut tasks = Vec::with_capacity(task_count);
        for i in 0..task_count {
            let mut rng = substream(seed, &[1, i as u64]);
            let offset = normal_vec(&mut rng, dim, 1.0);
            let class_shift = normal_vec(&mut rng, dim, 1.0);
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for y in 0..2 {
                let sign = if y == 0 { -1.0 } else { 1.0 };
                for _ in 0..per_class {
                    let noise = normal_vec(&mut rng, dim, 0.7);
                    data.extend((0..dim).map(|c| offset[c] + sign * class_shift[c] + noise[c]));
                    labels.push(y);
                }
            }
            tasks.push(TheoryTask {
                features: Tensor::matrix(2 * per_class, dim, data)
                    .map_err(|e| TheoryError::Invalid(e.to_string()))?,
                labels,
                weights: theta.clone(),
            });
        }
        let mut model = Self::new(tasks)?;
        model.tasks = center_features(&model.tasks)?;
        model.normalize();
        Ok(model)
    }

    fn normalize(&mut self) {
        let (mut total, mut rows) = (0.0, 0usize);
        for t in &self.tasks {
            for r in 0..t.features.rows() {
                total += t.features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                rows += 1;
            }
        }
        let s = rows as f64 / total;
        for t in &mut self.tasks {
            t.features = t.features.map(|v| v * s);
        }
    }

    /// Features multiplied by `epsilon`; heads unchanged.
    pub fn scaled(&self, epsilon: f64) -> Self {
        Self {
            tasks: self
                .tasks
                .iter()
                .map(|t| TheoryTask {
                    features: t.features.map(|v| v * epsilon),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

/// `(1/|I|) Σ_i (1/R_i) Σ_r mean of class r in task i`, over the classes present.
pub fn class_weighted_mean(tasks: &[TheoryTask]) -> Result<Vec<f64>, TheoryError> {
    let Some(first) = tasks.first() else {
        return Err(TheoryError::Invalid("no tasks".into()));
    };
    let d = first.dim();
    let mut mean = vec![0.0; d];
    for (i, t) in tasks.iter().enumerate() {
        if t.dim() != d || t.features.rows() == 0 || t.labels.len() != t.features.rows() {
            return Err(TheoryError::Invalid(format!("task {i} is empty or malformed")));
        }
        let classes: Vec<Vec<usize>> = t.class_rows().into_iter().filter(|c| !c.is_empty()).collect();
        let share = 1.0 / (tasks.len() * classes.len()) as f64;
        for rows in &classes {
            for &r in rows {
                for (m, v) in mean.iter_mut().zip(t.features.row(r)) {
                    *m += share * v / rows.len() as f64;
                }
            }
        }
    }
    Ok(mean)
}

/// Subtracts the class-weighted grand mean from every feature row.
pub fn center_features(tasks: &[TheoryTask]) -> Result<Vec<TheoryTask>, TheoryError> {
    let mean = class_weighted_mean(tasks)?;
    Ok(tasks
        .iter()
        .map(|t| {
            let d = t.dim();
            let data = t
                .features
                .data()
                .iter()
                .enumerate()
                .map(|(n, v)| v - mean[n % d])
                .collect();
            TheoryTask {
                features: Tensor::matrix(t.features.rows(), d, data).expect("same shape"),
                ..t.clone()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_norm(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn centering_zeroes_the_grand_mean_and_is_idempotent() {
        let m = TheoryModel::gbml(4, 5, 3, 6, false, 1).unwrap();
        assert!(max_norm(&class_weighted_mean(&m.tasks).unwrap()) < 1e-12);
        let again = center_features(&m.tasks).unwrap();
        for (a, b) in again.iter().zip(&m.tasks) {
            assert!(a.features.max_abs_diff(&b.features) < 1e-12);
        }
    }

    #[test]
    fn constant_data_maps_to_zero() {
        let t = TheoryTask {
            features: Tensor::filled(&[4, 2], 3.5),
            labels: vec![0, 0, 1, 1],
            weights: vec![1.0, 1.0],
        };
        let c = center_features(&[t.clone(), t]).unwrap();
        assert!(c.iter().all(|t| t.features.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unbalanced_tasks_rejected() {
        let t = TheoryTask {
            features: Tensor::zeros(&[3, 2]),
            labels: vec![0, 0, 1],
            weights: vec![0.0, 0.0],
        };
        assert!(TheoryModel::new(vec![t]).is_err());
    }
}
