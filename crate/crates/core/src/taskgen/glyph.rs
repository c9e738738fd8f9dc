//! Procedural single-channel glyphs and their exact grid transforms.

use rand::Rng as _;

use crate::rng::substream;

/// Number of glyph classes.
pub const GLYPH_COUNT: usize = 10;
/// Intensity multipliers available to a glyph task.
pub const TINT_LEVELS: usize = 7;
/// Scale x rotation x tint.
pub const TRANSFORM_COMBOS: usize = 2 * 4 * TINT_LEVELS;

/// Glyph shapes never depend on the bank seed.
const GLYPH_SEED: u64 = 0x676c_7970_6873;

/// Row-major `side x side` grid.
pub type Grid = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transform {
    pub half_scale: bool,
    /// Clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Index into the tint levels, 0..7.
    pub tint: u8,
}

impl Transform {
    pub fn from_index(index: usize) -> Self {
        Self {
            half_scale: index / (4 * TINT_LEVELS) == 1,
            quarter_turns: ((index / TINT_LEVELS) % 4) as u8,
            tint: (index % TINT_LEVELS) as u8,
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.half_scale) * 4 * TINT_LEVELS
            + usize::from(self.quarter_turns) * TINT_LEVELS
            + usize::from(self.tint)
    }

    pub fn tint_value(self) -> f64 {
        tint_value(self.tint)
    }

    pub fn apply(self, glyph: &[f64], side: usize) -> Grid {
        let mut g = if self.half_scale {
            half_scale(glyph, side)
        } else {
            glyph.to_vec()
        };
        for _ in 0..self.quarter_turns {
            g = rotate90(&g, side);
        }
        let t = self.tint_value();
        g.iter_mut().for_each(|v| *v *= t);
        g
    }
}

/// Tint level `k` of 0..7, evenly spaced over [0.4, 1.0].
pub fn tint_value(k: u8) -> f64 {
    0.4 + 0.1 * f64::from(k)
}

/// The fixed glyph set for a grid side: seeded random blobs smoothed by one
/// 3x3 majority pass. Empty or repeated patterns are redrawn.
pub fn base_glyphs(side: usize) -> Vec<Grid> {
    let mut glyphs: Vec<Grid> = Vec::with_capacity(GLYPH_COUNT);
    let mut attempt = 0u64;
    while glyphs.len() < GLYPH_COUNT {
        let mut rng = substream(GLYPH_SEED, &[side as u64, attempt]);
        attempt += 1;
        let raw: Grid = (0..side * side)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let g = majority_pass(&raw, side);
        let ink: f64 = g.iter().sum();
        if ink < (side * side) as f64 * 0.15 || glyphs.contains(&g) {
            continue;
        }
        glyphs.push(g);
    }
    glyphs
}

/// Each cell becomes 1 when at least 5 of its 3x3 neighbourhood (cells
/// outside the grid count as 0) are set.
pub fn majority_pass(bits: &[f64], side: usize) -> Grid {
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut count = 0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0
                        && cc >= 0
                        && (rr as usize) < side
                        && (cc as usize) < side
                        && bits[rr as usize * side + cc as usize] > 0.5
                    {
                        count += 1;
                    }
                }
            }
            out[r * side + c] = if count >= 5 { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Quarter turn clockwise.
pub fn rotate90(grid: &[f64], side: usize) -> Grid {
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = grid[(side - 1 - c) * side + r];
        }
    }
    out
}

/// 2x2 block average, centred on a zero canvas of the same side.
pub fn half_scale(grid: &[f64], side: usize) -> Grid {
    let h = side / 2;
    let offset = (side - h) / 2;
    let mut out = vec![0.0; side * side];
    for r in 0..h {
        for c in 0..h {
            let mut s = 0.0;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                s += grid[(2 * r + dr) * side + 2 * c + dc];
            }
            out[(r + offset) * side + c + offset] = s / 4.0;
        }
    }
    out
}

/// Rotation by an arbitrary angle (radians, counter-clockwise) about the grid
/// centre with bilinear sampling; samples outside the grid read as 0.
pub fn rotate_angle(grid: &[f64], side: usize, theta: f64) -> Grid {
    let centre = (side as f64 - 1.0) / 2.0;
    let (s, c) = theta.sin_cos();
    let at = |r: i64, col: i64| -> f64 {
        if r < 0 || col < 0 || r as usize >= side || col as usize >= side {
            0.0
        } else {
            grid[r as usize * side + col as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            let dx = col as f64 - centre;
            let dy = centre - r as f64;
            // Inverse rotation maps the output pixel back into the source.
            let sx = c * dx + s * dy;
            let sy = -s * dx + c * dy;
            let fc = sx + centre;
            let fr = centre - sy;
            let (r0, c0) = (fr.floor(), fc.floor());
            let (wr, wc) = (fr - r0, fc - c0);
            let (r0, c0) = (r0 as i64, c0 as i64);
            out[r * side + col] = (1.0 - wr) * (1.0 - wc) * at(r0, c0)
                + (1.0 - wr) * wc * at(r0, c0 + 1)
                + wr * (1.0 - wc) * at(r0 + 1, c0)
                + wr * wc * at(r0 + 1, c0 + 1);
        }
    }
    out
}
