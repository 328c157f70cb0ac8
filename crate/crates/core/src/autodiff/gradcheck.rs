//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimate `df/dx` elementwise as `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericDomain {
                op: "finite_difference_gradient".into(),
            });
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between backward and central differences for every input
/// of `f`, which builds a scalar loss from leaves holding `inputs`.
pub fn check_input_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<f64>>
where
    F: Fn(&Tape<'_>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = finite_difference_gradient(
            |x| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { x.clone() } else { t.clone() }))
                    .collect();
                tape.item(f(&tape, &vars)?)
            },
            &inputs[i],
            DEFAULT_STEP,
        )?;
        errors.push(relative_error(&analytic, numeric.data()));
    }
    Ok(errors)
}

/// Relative error between backward and central differences over the
/// parameters of `store`. When `max_coords` is given, a seeded random subset
/// of that many scalar coordinates is probed.
pub fn check_param_gradients<F>(store: &ParamStore, f: F, max_coords: Option<usize>, seed: u64) -> Result<f64>
where
    F: Fn(&Tape<'_>) -> Result<Var>,
{
    let grads = {
        let tape = Tape::with_params(store);
        let loss = f(&tape)?;
        tape.backward(loss)?
    };
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, id) in store.ids().enumerate() {
        coords.extend((0..store.get(id).numel()).map(|k| (pi, k)));
    }
    if let Some(m) = max_coords.filter(|&m| m < coords.len()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), m).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }
    let ids: Vec<_> = store.ids().collect();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = store.clone();
    for &(pi, k) in &coords {
        let id = ids[pi];
        analytic.push(grads.param(id).map_or(0.0, |g| g.data()[k]));
        let orig = probe.get(id).data()[k];
        let mut eval = |v: f64| -> Result<f64> {
            probe.get_mut(id).data_mut()[k] = v;
            let tape = Tape::with_params(&probe);
            let loss = f(&tape)?;
            tape.item(loss)
        };
        let up = eval(orig + DEFAULT_STEP)?;
        let down = eval(orig - DEFAULT_STEP)?;
        probe.get_mut(id).data_mut()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericDomain {
                op: "finite_difference_gradient".into(),
            });
        }
        numeric.push((up - down) / (2.0 * DEFAULT_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, DEFAULT_STEP)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0].exp()), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = finite_difference_gradient(|_| Ok(f64::NAN), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NumericDomain { .. })));
    }
}
