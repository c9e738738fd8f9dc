use rand::Rng as _;

use super::{MixConfig, MixError, MixMethod, MixMode};
use crate::rng::Rng;

/// Partner and layer chosen for task `i` of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub i: usize,
    pub j: usize,
    pub layer: usize,
    /// The task is used without interpolation.
    pub vanilla: bool,
}

/// Picks the partner `j` (first draw) and the layer (second draw) for task `i`.
///
/// Vanilla mode consumes no randomness. Methods restricted to inputs always
/// return layer 0 without a draw.
pub fn select_pair_and_layer(
    i: usize,
    batch_len: usize,
    config: &MixConfig,
    rng: &mut Rng,
) -> Result<Selection, MixError> {
    if batch_len == 0 || i >= batch_len {
        return Err(MixError::Incompatible(format!(
            "task index {i} outside a batch of {batch_len}"
        )));
    }
    let j = match config.mode {
        MixMode::Vanilla => {
            return Ok(Selection {
                i,
                j: i,
                layer: 0,
                vanilla: true,
            })
        }
        MixMode::Intra => i,
        MixMode::Cross => {
            if batch_len < 2 {
                return Err(MixError::BatchTooSmall(batch_len));
            }
            let k = rng.random_range(0..batch_len - 1);
            if k >= i {
                k + 1
            } else {
                k
            }
        }
        MixMode::Both => rng.random_range(0..batch_len),
    };
    let layer = match config.method {
        MixMethod::ManifoldMixup => rng.random_range(0..=config.layer_max),
        MixMethod::Mixup | MixMethod::Cutmix => 0,
    };
    Ok(Selection {
        i,
        j,
        layer,
        vanilla: false,
    })
}
