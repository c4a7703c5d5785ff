//! Central finite differences, the reference for every analytic gradient.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NdError, Result};
use crate::param::ParameterTree;
use crate::tensor::Tensor;

/// Central-difference estimate of the gradient of scalar `f` at `point`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NdError::NonFinite(format!("function value near coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Compares analytic parameter gradients against central differences.
///
/// `loss` evaluates the scalar objective for a given tree. `analytic` holds
/// the gradients to verify. At most `max_coords` coordinates per parameter
/// are probed, chosen with `seed`. Returns the relative error per
/// parameter name.
pub fn check_parameter_gradients(
    tree: &ParameterTree<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    mut loss: impl FnMut(&ParameterTree<f64>) -> Result<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = tree.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = tree
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let base = tree.tensor(&name)?.clone();
        let zeros = Tensor::zeros(base.shape());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let n = base.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &i in &coords {
            let mut probe = base.clone();
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            work.set_tensor(&name, probe.clone())?;
            let fp = loss(&work)?;
            probe.data_mut()[i] = orig - h;
            work.set_tensor(&name, probe)?;
            let fm = loss(&work)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        work.set_tensor(&name, base)?;
        let ana: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
        out.insert(name, relative_error(&ana, &numeric, 1e-10));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[0]), &[2.0], 1e-4).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let g = finite_difference_gradient(|_| Ok(7.5), &[1.0, -2.0, 3.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn product_partials() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[1]), &[2.0, 3.0], 1e-4).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = finite_difference_gradient(|x| Ok(1.0 / x[0]), &[0.0], 1e-4);
        assert!(r.is_ok()); // ±1/h is finite
        let r = finite_difference_gradient(|x| Ok((x[0] - 1e-4).ln()), &[0.0], 1e-4);
        assert!(matches!(r, Err(NdError::NonFinite(_))));
    }
}
