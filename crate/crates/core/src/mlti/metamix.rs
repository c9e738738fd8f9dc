use rand::seq::SliceRandom;

use super::plan::mix_ls;
use super::MixError;
use crate::rng::Rng;
use crate::taskgen::Episode;

/// Mixes the query set of a task with a shuffled copy of itself; the support
/// set is left untouched.
pub fn metamix_query_only(task: &Episode, lambda: f64, rng: &mut Rng) -> Result<Episode, MixError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MixError::Config(format!("λ must lie in [0, 1], got {lambda}")));
    }
    let mut perm: Vec<usize> = (0..task.query_x.rows()).collect();
    perm.shuffle(rng);
    let (query_x, query_y) = mix_ls(
        &task.query_x,
        &task.query_y,
        &task.query_x,
        &task.query_y,
        lambda,
        &perm,
    )?;
    Ok(Episode {
        query_x,
        query_y,
        ..task.clone()
    })
}
