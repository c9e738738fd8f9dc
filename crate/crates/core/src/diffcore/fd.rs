use super::{DiffError, ParamSet, Tensor};

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of every tensor in `point`.
pub fn finite_diff_oracle<F>(mut f: F, point: &ParamSet, step: f64) -> Result<ParamSet, DiffError>
where
    F: FnMut(&ParamSet) -> Result<f64, DiffError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(DiffError::Validation(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut work = point.clone();
    let mut out = ParamSet::new();
    for (name, tensor) in point {
        let mut grad = vec![0.0; tensor.len()];
        for (index, slot) in grad.iter_mut().enumerate() {
            let x = tensor.data()[index];
            work.get_mut(name).expect("cloned key").data_mut()[index] = x + step;
            let plus = f(&work)?;
            work.get_mut(name).expect("cloned key").data_mut()[index] = x - step;
            let minus = f(&work)?;
            work.get_mut(name).expect("cloned key").data_mut()[index] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFiniteFd {
                    name: name.clone(),
                    index,
                });
            }
            *slot = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), Tensor::from_parts(tensor.shape().to_vec(), grad));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all shared entries; 0 when both vanish.
pub fn relative_error(a: &ParamSet, b: &ParamSet) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (name, ta) in a {
        let Some(tb) = b.get(name) else {
            return f64::INFINITY;
        };
        if ta.shape() != tb.shape() {
            return f64::INFINITY;
        }
        for (x, y) in ta.data().iter().zip(tb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
