//! Diagonal selective state-space recurrence.
//!
//! For every channel `e` and state index `n`:
//!
//! ```text
//! z      = dt[t,e] * a[e,n]
//! a_bar  = exp(z)
//! b_bar  = (exp(z) - 1) / a[e,n] * b[t,n]        (dt * b[t,n] when |z| < 1e-8)
//! h[t]   = a_bar * h[t-1] + b_bar * u[t,e]
//! y[t,e] = sum_n c[t,n] * h[t,n] + d[e] * u[t,e]
//! ```

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this `|dt * a|` the input coefficient uses its Euler limit.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Discretize one diagonal entry: returns `(a_bar, b_bar)`.
pub fn zoh_discretize(a: f64, b: f64, dt: f64) -> (f64, f64) {
    let (a_bar, q) = zoh_coeffs(a, dt);
    (a_bar, q * b)
}

/// `(exp(dt a), (exp(dt a) - 1) / a)`.
#[inline]
pub(crate) fn zoh_coeffs<T: Scalar>(a: T, dt: T) -> (T, T) {
    let z = dt * a;
    let a_bar = z.exp();
    let q = if z.abs() < T::of(ZOH_LIMIT) { dt } else { z.exp_m1() / a };
    (a_bar, q)
}

/// `(a_bar, q)` from `em1 = expm1(dt a)` without a second exponential.
#[inline]
fn zoh_from_em1<T: Scalar>(a: T, dt: T, em1: T) -> (T, T) {
    let q = if (dt * a).abs() < T::of(ZOH_LIMIT) { dt } else { em1 / a };
    (em1 + T::one(), q)
}

/// `d/da [(exp(dt a) - 1) / a] / dt^2`, i.e. `(z e^z - e^z + 1) / z^2`.
#[inline]
#[cfg(test)]
fn psi<T: Scalar>(z: T) -> T {
    psi_from_em1(z, z.exp_m1())
}

#[inline]
fn psi_from_em1<T: Scalar>(z: T, em1: T) -> T {
    if z.abs() < T::of(1e-2) {
        // sum_{k>=2} (k-1)/k! z^(k-2)
        let c = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0, 1.0 / 840.0];
        c.iter().rev().fold(T::zero(), |acc, &ck| acc * z + T::of(ck))
    } else {
        (z * (em1 + T::one()) - em1) / (z * z)
    }
}

/// Dimensions of a batched scan: `rows` independent sequences of `len`
/// steps over `e` channels with `n` states each.
#[derive(Debug, Clone, Copy)]
struct Dims {
    rows: usize,
    len: usize,
    e: usize,
    n: usize,
}

fn check_dims<T: Scalar>(v: &[&Tensor<T>]) -> Result<Dims> {
    let (u, dt, a, b, c, d) = (v[0], v[1], v[2], v[3], v[4], v[5]);
    if u.rank() != 3 || a.rank() != 2 {
        return Err(Error::dim(format!(
            "selective scan expects u [R,T,E] and A [E,N], got {:?} and {:?}",
            u.shape(),
            a.shape()
        )));
    }
    let (rows, len, e) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = a.shape()[1];
    let ok = dt.shape() == u.shape()
        && a.shape()[0] == e
        && b.shape() == [rows, len, n]
        && c.shape() == [rows, len, n]
        && d.shape() == [e];
    if !ok {
        return Err(Error::dim(format!(
            "selective scan shapes: u {:?}, dt {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            u.shape(),
            dt.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    if a.data().iter().any(|&x| x >= T::zero()) {
        return Err(Error::Contract("state matrix entries must be negative".into()));
    }
    Ok(Dims { rows, len, e, n })
}

/// Run the recurrence for channel `(r, ch)`, writing states into `hs`
/// (`len x n`, when given) and adding outputs into `y`.
#[allow(clippy::too_many_arguments)]
fn scan_channel<T: Scalar>(
    dims: Dims,
    r: usize,
    ch: usize,
    u: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    h: &mut [T],
    mut hs: Option<&mut [T]>,
    mut em: Option<&mut [T]>,
    mut y: Option<&mut [T]>,
) {
    let Dims { len, e, n, .. } = dims;
    h.iter_mut().for_each(|v| *v = T::zero());
    let arow = &a[ch * n..(ch + 1) * n];
    for t in 0..len {
        let ui = (r * len + t) * e + ch;
        let (ut, dtt) = (u[ui], dt[ui]);
        let bc = (r * len + t) * n;
        let mut acc = T::zero();
        for k in 0..n {
            let em1 = (dtt * arow[k]).exp_m1();
            let (a_bar, q) = zoh_from_em1(arow[k], dtt, em1);
            if let Some(em) = em.as_deref_mut() {
                em[t * n + k] = em1;
            }
            h[k] = a_bar * h[k] + q * b[bc + k] * ut;
            acc += c[bc + k] * h[k];
        }
        if let Some(hs) = hs.as_deref_mut() {
            hs[t * n..(t + 1) * n].copy_from_slice(h);
        }
        if let Some(y) = y.as_deref_mut() {
            y[ui] += acc;
        }
    }
}

fn scan_forward<T: Scalar>(v: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let dims = check_dims(v)?;
    let (u, d) = (v[0].data(), v[5].data());
    let mut y: Vec<T> = u.iter().enumerate().map(|(i, &x)| d[i % dims.e] * x).collect();
    let mut h = vec![T::zero(); dims.n];
    for r in 0..dims.rows {
        for ch in 0..dims.e {
            scan_channel(
                dims,
                r,
                ch,
                u,
                v[1].data(),
                v[2].data(),
                v[3].data(),
                v[4].data(),
                &mut h,
                None,
                None,
                Some(&mut y),
            );
        }
    }
    Tensor::new(v[0].shape(), y)
}

struct ScanBackward;

impl<T: Scalar> Backward<T> for ScanBackward {
    fn backward(&self, v: &[&Tensor<T>], _o: &Tensor<T>, gy: &Tensor<T>, _needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let dims = check_dims(v)?;
        let Dims { rows, len, e, n } = dims;
        let (u, dt, a, b, c, d) = (v[0].data(), v[1].data(), v[2].data(), v[3].data(), v[4].data(), v[5].data());
        let gy = gy.data();
        let mut gu = vec![T::zero(); u.len()];
        let mut gdt = vec![T::zero(); u.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); c.len()];
        let mut gd = vec![T::zero(); e];
        let mut h = vec![T::zero(); n];
        let mut hs = vec![T::zero(); len * n];
        let mut em = vec![T::zero(); len * n];
        let mut gh = vec![T::zero(); n];
        for r in 0..rows {
            for ch in 0..e {
                // states are recomputed per channel instead of being kept
                // from the forward pass
                scan_channel(dims, r, ch, u, dt, a, b, c, &mut h, Some(&mut hs), Some(&mut em), None);
                gh.iter_mut().for_each(|x| *x = T::zero());
                let arow = &a[ch * n..(ch + 1) * n];
                for t in (0..len).rev() {
                    let ui = (r * len + t) * e + ch;
                    let (ut, dtt, gyt) = (u[ui], dt[ui], gy[ui]);
                    let bc = (r * len + t) * n;
                    gd[ch] += gyt * ut;
                    let mut gut = gyt * d[ch];
                    let mut gdtt = T::zero();
                    for k in 0..n {
                        let ht = hs[t * n + k];
                        let hprev = if t > 0 { hs[(t - 1) * n + k] } else { T::zero() };
                        gc[bc + k] += gyt * ht;
                        let g = gh[k] + gyt * c[bc + k];
                        let ak = arow[k];
                        let z = dtt * ak;
                        let em1 = em[t * n + k];
                        let (a_bar, q) = zoh_from_em1(ak, dtt, em1);
                        let g_abar = g * hprev;
                        let g_q = g * b[bc + k] * ut;
                        gdtt += g_abar * ak * a_bar + g_q * a_bar;
                        ga[ch * n + k] += g_abar * dtt * a_bar + g_q * dtt * dtt * psi_from_em1(z, em1);
                        gb[bc + k] += g * q * ut;
                        gut += g * q * b[bc + k];
                        gh[k] = g * a_bar;
                    }
                    gu[ui] += gut;
                    gdt[ui] += gdtt;
                }
            }
        }
        let shape = |t: &Tensor<T>| t.shape().to_vec();
        Ok(vec![
            Some(Tensor::new(&shape(v[0]), gu)?),
            Some(Tensor::new(&shape(v[1]), gdt)?),
            Some(Tensor::new(&shape(v[2]), ga)?),
            Some(Tensor::new(&shape(v[3]), gb)?),
            Some(Tensor::new(&shape(v[4]), gc)?),
            Some(Tensor::new(&shape(v[5]), gd)?),
        ])
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Fused selective scan over `u, dt: [R,T,E]`, `a: [E,N]` (negative),
    /// `b, c: [R,T,N]`, `d: [E]`. Returns `[R,T,E]`.
    pub fn selective_scan(&self, u: Var, dt: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        self.record("selective_scan", &[u, dt, a, b, c, d], |v| Ok((scan_forward(v)?, ScanBackward)))
    }
}

/// Inputs of a single-sequence scan for the tape-free reference paths.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    /// `T x E`
    pub dt: Tensor,
    /// `E x N`, negative
    pub a: Tensor,
    /// `T x N`
    pub b: Tensor,
    /// `T x N`
    pub c: Tensor,
    /// `E`
    pub d: Tensor,
}

impl ScanInputs {
    fn dims(&self, u: &Tensor) -> Result<(usize, usize, usize)> {
        let (len, e) = match u.shape() {
            [t, e] => (*t, *e),
            s => return Err(Error::dim(format!("reference scan expects u [T,E], got {s:?}"))),
        };
        let n = self.a.shape().get(1).copied().unwrap_or(0);
        let ok = self.dt.shape() == [len, e]
            && self.a.shape() == [e, n]
            && self.b.shape() == [len, n]
            && self.c.shape() == [len, n]
            && self.d.shape() == [e];
        if !ok {
            return Err(Error::dim("reference scan parameter shapes disagree with u"));
        }
        Ok((len, e, n))
    }

    /// Time-invariant inputs: one step size per channel and fixed `b`, `c`.
    pub fn frozen(len: usize, dt: &[f64], a: Tensor, b: &[f64], c: &[f64], d: Tensor) -> Result<ScanInputs> {
        let e = dt.len();
        let n = b.len();
        Ok(ScanInputs {
            dt: Tensor::from_fn(&[len, e], |i| dt[i % e]),
            a,
            b: Tensor::from_fn(&[len, n], |i| b[i % n]),
            c: Tensor::from_fn(&[len, n], |i| c[i % n]),
            d,
        })
    }
}

/// Fixed-size latent state of the recurrence: `E x N` regardless of length.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Tensor,
}

impl HiddenState {
    pub fn zeros(e: usize, n: usize) -> Self {
        HiddenState { h: Tensor::zeros(&[e, n]) }
    }

    /// Advance one step; returns `y_t` (length E).
    pub fn step(&mut self, u: &[f64], dt: &[f64], a: &Tensor, b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
        let (e, n) = (self.h.shape()[0], self.h.shape()[1]);
        let h = self.h.data_mut();
        let mut y = Vec::with_capacity(e);
        for ch in 0..e {
            let mut acc = d[ch] * u[ch];
            for k in 0..n {
                let (a_bar, q) = zoh_coeffs(a.data()[ch * n + k], dt[ch]);
                let i = ch * n + k;
                h[i] = a_bar * h[i] + q * b[k] * u[ch];
                acc += c[k] * h[i];
            }
            y.push(acc);
        }
        y
    }
}

/// Sequential reference recurrence over `u: T x E`. Also returns the final state.
pub fn selective_scan_reference(u: &Tensor, p: &ScanInputs) -> Result<(Tensor, HiddenState)> {
    let (len, e, n) = p.dims(u)?;
    let mut state = HiddenState::zeros(e, n);
    let mut y = Vec::with_capacity(len * e);
    for t in 0..len {
        let row = |x: &Tensor, w: usize| x.data()[t * w..(t + 1) * w].to_vec();
        y.extend(state.step(&row(u, e), &row(&p.dt, e), &p.a, &row(&p.b, n), &row(&p.c, n), p.d.data()));
    }
    Ok((Tensor::new(&[len, e], y)?, state))
}

/// The same recurrence evaluated as a prefix scan over the affine maps
/// `h -> a_bar * h + x`, combined by recursive doubling.
pub fn selective_scan_associative(u: &Tensor, p: &ScanInputs) -> Result<Tensor> {
    let (len, e, n) = p.dims(u)?;
    let mut y: Vec<f64> = (0..len * e).map(|i| p.d.data()[i % e] * u.data()[i]).collect();
    let mut mul = vec![0.0; len];
    let mut add = vec![0.0; len];
    for ch in 0..e {
        for k in 0..n {
            let a = p.a.data()[ch * n + k];
            for t in 0..len {
                let (a_bar, q) = zoh_coeffs(a, p.dt.data()[t * e + ch]);
                mul[t] = a_bar;
                add[t] = q * p.b.data()[t * n + k] * u.data()[t * e + ch];
            }
            // inclusive scan: element t becomes the composition of maps 0..=t
            let mut offset = 1;
            while offset < len {
                for t in (offset..len).rev() {
                    let (m0, a0) = (mul[t - offset], add[t - offset]);
                    add[t] += mul[t] * a0;
                    mul[t] *= m0;
                }
                offset *= 2;
            }
            for t in 0..len {
                y[t * e + ch] += p.c.data()[t * n + k] * add[t];
            }
        }
    }
    Tensor::new(&[len, e], y)
}

/// Causal convolution with the materialized kernel
/// `K[k] = sum_n c[n] * a_bar^k * b_bar` (plus the `d` feed-through).
/// Only valid when the inputs do not vary over time.
pub fn lti_convolution_scan(u: &Tensor, p: &ScanInputs) -> Result<Tensor> {
    let (len, e, n) = p.dims(u)?;
    let varies = |x: &Tensor, w: usize| x.data().chunks(w).any(|row| row != &x.data()[..w]);
    if len > 0 && (varies(&p.dt, e) || varies(&p.b, n) || varies(&p.c, n)) {
        return Err(Error::Contract(
            "convolutional scan needs time-invariant step sizes and projections".into(),
        ));
    }
    let mut y: Vec<f64> = (0..len * e).map(|i| p.d.data()[i % e] * u.data()[i]).collect();
    for ch in 0..e {
        let mut kernel = vec![0.0; len];
        for k in 0..n {
            let (a_bar, q) = zoh_coeffs(p.a.data()[ch * n + k], p.dt.data()[ch]);
            let mut pow = q * p.b.data()[k] * p.c.data()[k];
            for kv in kernel.iter_mut() {
                *kv += pow;
                pow *= a_bar;
            }
        }
        for t in 0..len {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate().take(t + 1) {
                acc += kv * u.data()[(t - j) * e + ch];
            }
            y[t * e + ch] += acc;
        }
    }
    Tensor::new(&[len, e], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frozen_example() -> (Tensor, ScanInputs) {
        // a = -1, dt = ln 2 gives a_bar = 0.5 and b_bar = 0.5 * b
        let u = Tensor::from_f64(&[3, 1], &[1.0, 1.0, 1.0]).unwrap();
        let p = ScanInputs::frozen(
            3,
            &[std::f64::consts::LN_2],
            Tensor::from_f64(&[1, 1], &[-1.0]).unwrap(),
            &[2.0],
            &[1.0],
            Tensor::zeros(&[1]),
        )
        .unwrap();
        (u, p)
    }

    #[test]
    fn zoh_examples() {
        let (a_bar, b_bar) = zoh_discretize(-1.0, 1.0, std::f64::consts::LN_2);
        assert!((a_bar - 0.5).abs() < 1e-15 && (b_bar - 0.5).abs() < 1e-15);
        let (a_bar, b_bar) = zoh_discretize(-3.0, 1.0, 0.0);
        assert_eq!((a_bar, b_bar), (1.0, 0.0));
        let (_, b_bar) = zoh_discretize(-1e-12, 2.0, 1.0);
        assert_eq!(b_bar, 2.0);
    }

    #[test]
    fn psi_series_joins_closed_form() {
        for z in [-0.0101f64, -0.00999, 0.00999, 0.0101] {
            let e = z.exp();
            let closed = (z * e - e + 1.0) / (z * z);
            assert!((psi(z) - closed).abs() < 1e-10, "{z}");
        }
    }

    #[test]
    fn frozen_hand_example_all_paths() {
        let (u, p) = frozen_example();
        let want = [1.0, 1.5, 1.75];
        let (rec, _) = selective_scan_reference(&u, &p).unwrap();
        let conv = lti_convolution_scan(&u, &p).unwrap();
        let assoc = selective_scan_associative(&u, &p).unwrap();
        for out in [rec, conv, assoc] {
            for (g, w) in out.data().iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (_, p) = frozen_example();
        let u = Tensor::zeros(&[3, 1]);
        assert!(selective_scan_reference(&u, &p).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convolution_rejects_selective_inputs() {
        let (u, mut p) = frozen_example();
        p.dt.data_mut()[2] = 0.3;
        assert!(matches!(lti_convolution_scan(&u, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn c_zero_leaves_feedthrough() {
        let (u, mut p) = frozen_example();
        p.c = Tensor::zeros(&[3, 1]);
        p.d = Tensor::from_f64(&[1], &[0.25]).unwrap();
        let y = lti_convolution_scan(&u, &p).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn tape_primitive_matches_reference() {
        let (u, p) = frozen_example();
        let tape = Tape::<f64>::new();
        let r = |t: &Tensor, shape: &[usize]| tape.constant(t.reshaped(shape).unwrap());
        let y = tape
            .selective_scan(
                r(&u, &[1, 3, 1]),
                r(&p.dt, &[1, 3, 1]),
                tape.constant(p.a.clone()),
                r(&p.b, &[1, 3, 1]),
                r(&p.c, &[1, 3, 1]),
                tape.constant(p.d.clone()),
            )
            .unwrap();
        let (want, _) = selective_scan_reference(&u, &p).unwrap();
        assert_eq!(tape.value(y).data(), want.data());
    }
}
