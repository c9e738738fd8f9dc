use rand::Rng as _;

use super::MixError;
use crate::diffcore::Tensor;
use crate::rng::Rng;

/// Half-open rectangle `[row0, row1) x [col0, col1)` on an `h x w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub h: usize,
    pub w: usize,
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Patch {
    /// Patch with side lengths `round(h·√(1−λ)) x round(w·√(1−λ))` centred at
    /// `center`, clipped to the grid.
    pub fn new(h: usize, w: usize, lambda: f64, center: (usize, usize)) -> Self {
        let s = (1.0 - lambda).max(0.0).sqrt();
        let ph = (h as f64 * s).round() as i64;
        let pw = (w as f64 * s).round() as i64;
        let (cy, cx) = (center.0 as i64, center.1 as i64);
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let r0 = cy - ph / 2;
        let c0 = cx - pw / 2;
        Self {
            h,
            w,
            row0: clip(r0, h),
            row1: clip(r0 + ph, h),
            col0: clip(c0, w),
            col1: clip(c0 + pw, w),
        }
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    /// `1 − area / (h·w)`.
    pub fn lambda_adj(&self) -> f64 {
        let cells = self.h * self.w;
        (cells - self.area()) as f64 / cells as f64
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }

    /// Per-cell weight of the first grid: 0 inside the patch, 1 outside.
    pub fn keep_mask(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.h * self.w];
        for r in self.row0..self.row1 {
            for c in self.col0..self.col1 {
                m[r * self.w + c] = 0.0;
            }
        }
        m
    }

    /// Draws a uniform centre and builds the patch.
    pub fn sample(h: usize, w: usize, lambda: f64, rng: &mut Rng) -> Self {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        Self::new(h, w, lambda, (cy, cx))
    }
}

/// Copies a patch of `grid_b` into `grid_a` around `center`.
///
/// Grids are `[h, w]` tensors or flattened rows of length `h·w`. Returns the
/// mixed grid and `λ_adj = 1 − patch area / (h·w)`.
pub fn cutmix_at(
    grid_a: &Tensor,
    grid_b: &Tensor,
    h: usize,
    w: usize,
    lambda: f64,
    center: (usize, usize),
) -> Result<(Tensor, f64), MixError> {
    if grid_a.shape() != grid_b.shape() {
        return Err(MixError::Incompatible(format!(
            "cutmix grids differ in shape: {:?} vs {:?}",
            grid_a.shape(),
            grid_b.shape()
        )));
    }
    if grid_a.len() != h * w {
        return Err(MixError::Incompatible(format!(
            "cutmix grid holds {} cells, expected {h}x{w}",
            grid_a.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MixError::Config(format!("λ must lie in [0, 1], got {lambda}")));
    }
    let patch = Patch::new(h, w, lambda, center);
    let mut out = grid_a.clone().with_tracked(false);
    let src = grid_b.data();
    let dst = out.data_mut();
    for r in patch.row0..patch.row1 {
        for c in patch.col0..patch.col1 {
            dst[r * w + c] = src[r * w + c];
        }
    }
    Ok((out, patch.lambda_adj()))
}

/// [`cutmix_at`] with a uniformly drawn centre.
pub fn cutmix(
    grid_a: &Tensor,
    grid_b: &Tensor,
    h: usize,
    w: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<(Tensor, f64), MixError> {
    let cy = rng.random_range(0..h.max(1));
    let cx = rng.random_range(0..w.max(1));
    cutmix_at(grid_a, grid_b, h, w, lambda, (cy, cx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn grids() -> (Tensor, Tensor) {
        (
            Tensor::new(vec![6, 8], (0..48).map(f64::from).collect()).unwrap(),
            Tensor::new(vec![6, 8], (0..48).map(|v| -1.0 - f64::from(v)).collect()).unwrap(),
        )
    }

    #[test]
    fn lambda_one_keeps_first_grid() {
        let (a, b) = grids();
        let (m, adj) = cutmix_at(&a, &b, 6, 8, 1.0, (2, 3)).unwrap();
        assert_eq!(m, a);
        assert_eq!(adj, 1.0);
    }

    #[test]
    fn lambda_zero_centred_takes_second_grid() {
        let (a, b) = grids();
        let (m, adj) = cutmix_at(&a, &b, 6, 8, 0.0, (3, 4)).unwrap();
        assert_eq!(m.data(), b.data());
        assert_eq!(adj, 0.0);
    }

    #[test]
    fn provenance_count_matches_area() {
        let (a, b) = grids();
        let mut rng = substream(4, &[]);
        for k in 0..200 {
            let lambda = f64::from(k) / 199.0;
            let mut replay = rng.clone();
            let (m, adj) = cutmix(&a, &b, 6, 8, lambda, &mut rng).unwrap();
            let cy = replay.random_range(0..6);
            let cx = replay.random_range(0..8);
            let patch = Patch::new(6, 8, lambda, (cy, cx));
            let from_b = m.data().iter().filter(|v| **v < 0.0).count();
            assert_eq!(from_b, patch.area());
            assert_eq!(((1.0 - adj) * 48.0).round() as usize, from_b);
            assert!(((1.0 - adj) * 48.0 - from_b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(cutmix_at(&a, &b, 2, 2, 0.5, (0, 0)).is_err());
    }
}
