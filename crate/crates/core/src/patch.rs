//! Patched time series at two resolutions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Patch length `p` and stride `stride` applied to a range of `range_len` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub p: usize,
    pub stride: usize,
    pub range_len: usize,
}

impl PatchSpec {
    pub fn new(p: usize, stride: usize, range_len: usize) -> Result<Self> {
        let spec = PatchSpec { p, stride, range_len };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.stride == 0 || self.p > self.range_len {
            return Err(Error::Parameter(format!(
                "patch length {} / stride {} invalid for a range of {}",
                self.p, self.stride, self.range_len
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.range_len - self.p) / self.stride + 1
    }

    pub fn resolution(&self) -> f64 {
        r_pts(self.p, self.stride)
    }
}

/// `floor((len - p) / stride) + 1`.
pub fn num_patches(len: usize, p: usize, stride: usize) -> Result<usize> {
    Ok(PatchSpec::new(p, stride, len)?.num_patches())
}

/// Length-independent resolution `sqrt(p) / stride`.
pub fn r_pts(p: usize, stride: usize) -> f64 {
    (p as f64).sqrt() / stride as f64
}

/// Length-dependent resolution `N * sqrt(p)`.
pub fn r_pts_absolute(len: usize, p: usize, stride: usize) -> Result<f64> {
    Ok(num_patches(len, p, stride)? as f64 * (p as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchedSeries {
    /// `N x P`
    pub patches: Tensor,
    pub spec: PatchSpec,
    pub n: usize,
}

/// Rows `x[i*stride .. i*stride + p]`; steps after the last full patch are dropped.
pub fn patch(x: &[f64], spec: PatchSpec) -> Result<PatchedSeries> {
    if spec.range_len != x.len() {
        return Err(Error::Parameter(format!(
            "patch spec covers {} steps but the series has {}",
            spec.range_len,
            x.len()
        )));
    }
    spec.validate()?;
    let n = spec.num_patches();
    let mut data = Vec::with_capacity(n * spec.p);
    for i in 0..n {
        data.extend_from_slice(&x[i * spec.stride..i * spec.stride + spec.p]);
    }
    Ok(PatchedSeries {
        patches: Tensor::new(&[n, spec.p], data)?,
        spec,
        n,
    })
}

/// Coarse patches over the whole look-back and fine patches over its last
/// `short_len` steps. The long resolution must be strictly coarser.
pub fn multi_scale_patch(
    lookback: &[f64],
    long: PatchSpec,
    short: PatchSpec,
    short_len: usize,
) -> Result<(PatchedSeries, PatchedSeries)> {
    check_scales(lookback.len(), long, short, short_len)?;
    let long_pts = patch(lookback, long)?;
    let short_pts = patch(&lookback[lookback.len() - short_len..], short)?;
    Ok((long_pts, short_pts))
}

/// Configuration-time checks shared by the model constructors.
pub fn check_scales(lookback: usize, long: PatchSpec, short: PatchSpec, short_len: usize) -> Result<()> {
    if short_len == 0 || short_len >= lookback {
        return Err(Error::Configuration(format!(
            "short range {short_len} must lie strictly inside the look-back {lookback}"
        )));
    }
    if long.range_len != lookback || short.range_len != short_len {
        return Err(Error::Configuration(format!(
            "patch ranges {} / {} do not match look-back {lookback} / short range {short_len}",
            long.range_len, short.range_len
        )));
    }
    long.validate().map_err(|e| Error::Configuration(e.to_string()))?;
    short.validate().map_err(|e| Error::Configuration(e.to_string()))?;
    if long.resolution() >= short.resolution() {
        return Err(Error::Configuration(format!(
            "long-range resolution {:.4} must be below short-range resolution {:.4}",
            long.resolution(),
            short.resolution()
        )));
    }
    Ok(())
}

struct UnfoldBackward {
    p: usize,
    stride: usize,
}

impl<T: Scalar> Backward<T> for UnfoldBackward {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let len = x.shape()[1];
        let n = out.shape()[1];
        let mut gx = vec![T::zero(); x.numel()];
        for (r, gr) in g.data().chunks(n * self.p).enumerate() {
            for i in 0..n {
                let dst = r * len + i * self.stride;
                for j in 0..self.p {
                    gx[dst + j] += gr[i * self.p + j];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), gx)?)])
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Patch every row of `x: [R, len]` into `[R, N, p]`.
    pub fn unfold(&self, x: Var, p: usize, stride: usize) -> Result<Var> {
        self.record("unfold", &[x], |v| {
            let x = v[0];
            if x.rank() != 2 {
                return Err(Error::dim(format!("unfold expects [rows, len], got {:?}", x.shape())));
            }
            let (rows, len) = (x.shape()[0], x.shape()[1]);
            let n = PatchSpec::new(p, stride, len)?.num_patches();
            let mut data = Vec::with_capacity(rows * n * p);
            for row in x.data().chunks(len) {
                for i in 0..n {
                    data.extend_from_slice(&row[i * stride..i * stride + p]);
                }
            }
            Ok((Tensor::new(&[rows, n, p], data)?, UnfoldBackward { p, stride }))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Vec<f64> {
        (1..=n).map(|i| i as f64).collect()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(num_patches(672, 48, 16).unwrap(), 40);
        assert_eq!(num_patches(336, 16, 8).unwrap(), 41);
        assert_eq!(num_patches(5, 5, 3).unwrap(), 1);
        assert!(matches!(num_patches(4, 5, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn resolutions() {
        assert!((r_pts(48, 16) - 0.4330).abs() < 1e-3);
        assert_eq!(r_pts(16, 8), 0.5);
        assert_eq!(r_pts(1, 1), 1.0);
        assert_eq!(r_pts_absolute(672, 48, 16).unwrap(), 40.0 * 48f64.sqrt());
    }

    #[test]
    fn patch_examples() {
        let p = patch(&seq(6), PatchSpec::new(2, 2, 6).unwrap()).unwrap();
        assert_eq!(p.patches.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = patch(&seq(5), PatchSpec::new(3, 1, 5).unwrap()).unwrap();
        assert_eq!(p.patches.data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0]);
        let p = patch(&seq(7), PatchSpec::new(4, 2, 7).unwrap()).unwrap();
        assert_eq!(p.n, 2);
        assert_eq!(p.patches.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn default_multi_scale_shapes() {
        let x = seq(672);
        let long = PatchSpec::new(48, 16, 672).unwrap();
        let short = PatchSpec::new(16, 8, 336).unwrap();
        let (l, s) = multi_scale_patch(&x, long, short, 336).unwrap();
        assert_eq!(l.patches.shape(), &[40, 48]);
        assert_eq!(s.patches.shape(), &[41, 16]);
        assert_eq!(s.patches.at(&[0, 0]), 337.0);
    }

    #[test]
    fn equal_resolutions_rejected() {
        let x = seq(10);
        let long = PatchSpec::new(1, 1, 10).unwrap();
        let short = PatchSpec::new(1, 1, 9).unwrap();
        assert!(matches!(
            multi_scale_patch(&x, long, short, 9),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn unfold_matches_patch() {
        let tape = Tape::<f64>::new();
        let rows: Vec<f64> = seq(14);
        let x = tape.constant(Tensor::from_f64(&[2, 7], &rows).unwrap());
        let u = tape.unfold(x, 4, 2).unwrap();
        assert_eq!(tape.shape(u), vec![2, 2, 4]);
        let first = patch(&rows[..7], PatchSpec::new(4, 2, 7).unwrap()).unwrap();
        assert_eq!(&tape.value(u).data()[..8], first.patches.data());
    }
}
