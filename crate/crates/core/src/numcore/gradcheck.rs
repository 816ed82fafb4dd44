//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use super::{NumError, ParamId, ParamSet, Tensor};

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate of every parameter.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &ParamSet,
    h: f64,
) -> Result<BTreeMap<ParamId, Tensor>, NumError>
where
    F: FnMut(&ParamSet) -> Result<f64, NumError>,
{
    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
        .collect();
    let values = finite_difference_coords(&mut f, params, &coords, h)?;
    let mut out: BTreeMap<ParamId, Tensor> = params
        .iter()
        .map(|(id, _, t)| (id, Tensor::zeros(t.shape())))
        .collect();
    for ((id, i), v) in coords.into_iter().zip(values) {
        out.get_mut(&id)
            .expect("coordinate of known param")
            .data_mut()[i] = v;
    }
    Ok(out)
}

/// Central differences for a chosen subset of coordinates.
pub fn finite_difference_coords<F>(
    mut f: F,
    params: &ParamSet,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<Vec<f64>, NumError>
where
    F: FnMut(&ParamSet) -> Result<f64, NumError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NumError::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumError::NonDeterministic { first, second });
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// dominating the relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(*x, *y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::scalar(3.0));
        let g = finite_difference_gradient(|p| Ok(p.get(id).data()[0].powi(2)), &p, 1e-5).unwrap();
        assert!((g[&id].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_difference_at_kink_is_zero() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::scalar(0.0));
        let g = finite_difference_gradient(|p| Ok(p.get(id).data()[0].abs()), &p, 1e-5).unwrap();
        assert_eq!(g[&id].data()[0], 0.0);
    }

    #[test]
    fn detects_non_deterministic_function() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(1.0));
        let calls = Cell::new(0.0);
        let err = finite_difference_gradient(
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, NumError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(1.0));
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, 0.0).is_err());
    }
}
