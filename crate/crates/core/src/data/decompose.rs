use crate::error::{Error, Result};

/// Centered moving-average trend and its residual. Near the edges the window
/// is truncated to the available samples.
///
/// The residual is rounded so that `trend[i] + residual[i] == x[i]` holds
/// exactly in floating point.
pub fn moving_average_decompose(x: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(Error::Parameter(format!("decomposition window must be odd, got {k}")));
    }
    if k > x.len() {
        return Err(Error::Parameter(format!(
            "decomposition window {k} longer than series of {}",
            x.len()
        )));
    }
    let half = k / 2;
    let n = x.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    let mut trend = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        // direct sum rather than prefix differences on short windows keeps
        // constant series exact
        let t = if hi - lo <= 64 {
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        } else {
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        };
        let (t, r) = exact_split(x[i], t);
        trend.push(t);
        residual.push(r);
    }
    Ok((trend, residual))
}

/// Adjust `(t, x - t)` so the pair sums back to `x` bit-exactly.
fn exact_split(x: f64, t: f64) -> (f64, f64) {
    let r = x - t;
    if t + r == x {
        return (t, r);
    }
    // Recompute the trend from the rounded residual; `x - r` is exact when r
    // and x are within a factor of two, which covers the remaining cases
    // unless x is tiny relative to t. Fall back to a zero residual there.
    let t2 = x - r;
    if t2 + r == x {
        (t2, r)
    } else {
        (x, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let (t, r) = moving_average_decompose(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(t, vec![1.5, 2.0, 2.5]);
        assert_eq!(r, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn constant_series() {
        let x = vec![4.25; 30];
        let (t, r) = moving_average_decompose(&x, 25).unwrap();
        assert_eq!(t, x);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_windows() {
        assert!(matches!(moving_average_decompose(&[1.0; 5], 4), Err(Error::Parameter(_))));
        assert!(matches!(moving_average_decompose(&[1.0; 5], 7), Err(Error::Parameter(_))));
    }

    #[test]
    fn tiny_value_next_to_large_trend_stays_exact() {
        let x = [1.0, 1e-17, 1.0];
        let (t, r) = moving_average_decompose(&x, 3).unwrap();
        for i in 0..3 {
            assert_eq!(t[i] + r[i], x[i]);
        }
    }
}
