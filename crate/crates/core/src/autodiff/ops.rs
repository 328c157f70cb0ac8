//! Differentiable primitives recorded on a [`Tape`].

use std::rc::Rc;

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

/// Input above which softplus is evaluated as the identity.
pub const SOFTPLUS_THRESHOLD: f64 = 30.0;

// ---------------------------------------------------------------------------
// broadcasting helpers

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out` (zero along broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                s[i - pad]
            }
        })
        .collect()
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    // b repeats along the leading axes of a
    if out == a.shape() && is_suffix(b.shape(), a.shape()) {
        let nb = bd.len();
        let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let mut data = Vec::with_capacity(out.iter().product());
    for_each_broadcast(&out, &sa, &sb, |_, ia, ib| data.push(f(ad[ia], bd[ib])));
    Ok(Tensor::from_parts(out, data))
}

fn is_suffix(b: &[usize], a: &[usize]) -> bool {
    let b: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    b.len() <= a.len() && a[a.len() - b.len()..] == b[..]
}

/// Sum `g` down to `shape` along broadcast axes.
pub(crate) fn sum_to_shape<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    if is_suffix(shape, g.shape()) {
        for (i, &v) in g.data().iter().enumerate() {
            out[i % n] += v;
        }
    } else {
        let st = aligned_strides(shape, g.shape());
        let zeros = vec![0; g.rank()];
        let gd = g.data();
        for_each_broadcast(g.shape(), &st, &zeros, |i, it, _| out[it] += gd[i]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---------------------------------------------------------------------------
// elementwise binary

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
}

impl<T: Scalar> Backward<T> for BinaryBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            let full = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => g.clone(),
                BinaryKind::Mul => binary_map(g, b, |x, y| x * y).expect("shapes checked in forward"),
            };
            sum_to_shape(full, a.shape())
        });
        let gb = needs[1].then(|| {
            let full = match self.kind {
                BinaryKind::Add => g.clone(),
                BinaryKind::Sub => g.map(|x| -x),
                BinaryKind::Mul => binary_map(g, a, |x, y| x * y).expect("shapes checked in forward"),
            };
            sum_to_shape(full, b.shape())
        });
        Ok(vec![ga, gb])
    }
}

struct ScaleBackward<T> {
    factor: T,
}

impl<T: Scalar> Backward<T> for ScaleBackward<T> {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let f = self.factor;
        Ok(vec![Some(g.map(|x| x * f))])
    }
}

// ---------------------------------------------------------------------------
// elementwise unary

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
    Tanh,
    Gelu,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(SOFTPLUS_THRESHOLD) {
        x
    } else {
        // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl UnaryKind {
    fn forward<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Gelu => {
                let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Softplus => {
                if x > T::of(SOFTPLUS_THRESHOLD) {
                    T::one()
                } else {
                    sigmoid(x)
                }
            }
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Gelu => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * a * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Gelu => "gelu",
        }
    }
}

struct UnaryBackward {
    kind: UnaryKind,
}

impl<T: Scalar> Backward<T> for UnaryBackward {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let x = inputs[0].data();
        let y = out.data();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * self.kind.derivative(x[i], y[i]))
            .collect();
        Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), data))])
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `a @ b` for `a: [..., n, k]` with either `b: [k, m]` (shared) or
/// `b: [..., k, m]` (same leading dims).
fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::dim(format!("matmul needs matrices, got {ash:?} @ {bsh:?}")));
    }
    let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != kb {
        return Err(Error::dim(format!("matmul inner dims differ: {ash:?} @ {bsh:?}")));
    }
    let lead = &ash[..ash.len() - 2];
    let mut out_shape = lead.to_vec();
    out_shape.extend([n, m]);
    let mut out = vec![T::zero(); numel(&out_shape)];
    if bsh.len() == 2 {
        let rows = numel(lead) * n;
        gemm(rows, k, m, a.data(), (k, 1), b.data(), (m, 1), &mut out, false);
    } else {
        if &bsh[..bsh.len() - 2] != lead {
            return Err(Error::dim(format!("matmul batch dims differ: {ash:?} @ {bsh:?}")));
        }
        for i in 0..numel(lead) {
            gemm(
                n,
                k,
                m,
                &a.data()[i * n * k..(i + 1) * n * k],
                (k, 1),
                &b.data()[i * k * m..(i + 1) * k * m],
                (m, 1),
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// `c (+)= a @ b` where `a` is `m x k` and `b` is `k x n`, each given with
/// (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
        assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    }
    assert!(m * n <= c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

struct MatmulBackward;

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ash, bsh) = (a.shape(), b.shape());
        let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let m = bsh[bsh.len() - 1];
        let batch = numel(&ash[..ash.len() - 2]);
        let gd = g.data();
        let mut ga = None;
        let mut gb = None;
        if bsh.len() == 2 {
            let rows = batch * n;
            if needs[0] {
                let mut d = vec![T::zero(); rows * k];
                // g (rows x m) @ b^T (m x k)
                gemm(rows, m, k, gd, (m, 1), b.data(), (1, m), &mut d, false);
                ga = Some(Tensor::from_parts(ash.to_vec(), d));
            }
            if needs[1] {
                let mut d = vec![T::zero(); k * m];
                // a^T (k x rows) @ g (rows x m)
                gemm(k, rows, m, a.data(), (1, k), gd, (m, 1), &mut d, false);
                gb = Some(Tensor::from_parts(bsh.to_vec(), d));
            }
        } else {
            if needs[0] {
                let mut d = vec![T::zero(); batch * n * k];
                for i in 0..batch {
                    gemm(
                        n,
                        m,
                        k,
                        &gd[i * n * m..(i + 1) * n * m],
                        (m, 1),
                        &b.data()[i * k * m..(i + 1) * k * m],
                        (1, m),
                        &mut d[i * n * k..(i + 1) * n * k],
                        false,
                    );
                }
                ga = Some(Tensor::from_parts(ash.to_vec(), d));
            }
            if needs[1] {
                let mut d = vec![T::zero(); batch * k * m];
                for i in 0..batch {
                    gemm(
                        k,
                        n,
                        m,
                        &a.data()[i * n * k..(i + 1) * n * k],
                        (1, k),
                        &gd[i * n * m..(i + 1) * n * m],
                        (m, 1),
                        &mut d[i * k * m..(i + 1) * k * m],
                        false,
                    );
                }
                gb = Some(Tensor::from_parts(bsh.to_vec(), d));
            }
        }
        Ok(vec![ga, gb])
    }
}

// ---------------------------------------------------------------------------
// softmax / layer norm

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

struct SoftmaxBackward;

impl<T: Scalar> Backward<T> for SoftmaxBackward {
    fn backward(&self, _i: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let w = *y.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(y.numel());
        for (yr, gr) in y.data().chunks(w).zip(g.data().chunks(w)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
        }
        Ok(vec![Some(Tensor::from_parts(y.shape().to_vec(), out))])
    }
}

pub(crate) fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

struct LayerNormBackward<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for LayerNormBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = gamma.numel();
        let nf = T::of(d as f64);
        let mut gx = vec![T::zero(); x.numel()];
        let mut ggamma = vec![T::zero(); d];
        let mut gbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut gxhat = vec![T::zero(); d];
        for (r, (xr, gr)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
            let (mean, rstd) = row_stats(xr, self.eps);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                xhat[j] = (xr[j] - mean) * rstd;
                gxhat[j] = gr[j] * gamma.data()[j];
                ggamma[j] += gr[j] * xhat[j];
                gbeta[j] += gr[j];
                s1 += gxhat[j];
                s2 += gxhat[j] * xhat[j];
            }
            let (m1, m2) = (s1 / nf, s2 / nf);
            for j in 0..d {
                gx[r * d + j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(vec![d], ggamma)),
            needs[2].then(|| Tensor::from_parts(vec![d], gbeta)),
        ])
    }
}

// ---------------------------------------------------------------------------
// convolutions

/// Depthwise causal convolution: `y[b,t,c] = bias[c] + sum_j w[c,j] * x[b, t-(k-1)+j, c]`,
/// positions before the start read as zero.
struct DepthwiseCausalBackward;

impl<T: Scalar> Backward<T> for DepthwiseCausalBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (x, w) = (inputs[0], inputs[1]);
        let sh = x.shape();
        let (t_len, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let batch = x.numel() / (t_len * c);
        let k = w.shape()[1];
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); w.numel()];
        let mut gb = vec![T::zero(); c];
        for b in 0..batch {
            let base = b * t_len * c;
            for t in 0..t_len {
                for ch in 0..c {
                    let go = gd[base + t * c + ch];
                    gb[ch] += go;
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                        let xi = base + src * c + ch;
                        gx[xi] += go * wd[ch * k + j];
                        gw[ch * k + j] += go * xd[xi];
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(sh.to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
            needs[2].then(|| Tensor::from_parts(vec![c], gb)),
        ])
    }
}

/// Dense 1-D convolution over time with explicit zero padding.
struct Conv1dBackward {
    pad_left: usize,
}

impl<T: Scalar> Backward<T> for Conv1dBackward {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let (x, w) = (inputs[0], inputs[1]);
        let sh = x.shape();
        let (t_in, c_in) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let t_out = out.shape()[out.rank() - 2];
        let batch = x.numel() / (t_in * c_in);
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); w.numel()];
        let mut gb = vec![T::zero(); c_out];
        for b in 0..batch {
            for t in 0..t_out {
                for o in 0..c_out {
                    let go = gd[(b * t_out + t) * c_out + o];
                    gb[o] += go;
                    for j in 0..k {
                        let src = t + j;
                        if src < self.pad_left || src - self.pad_left >= t_in {
                            continue;
                        }
                        let xrow = (b * t_in + src - self.pad_left) * c_in;
                        for i in 0..c_in {
                            let wi = (o * c_in + i) * k + j;
                            gx[xrow + i] += go * wd[wi];
                            gw[wi] += go * xd[xrow + i];
                        }
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(sh.to_vec(), gx)),
            needs[1].then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
            needs[2].then(|| Tensor::from_parts(vec![c_out], gb)),
        ])
    }
}

// ---------------------------------------------------------------------------
// shape manipulation

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            g.data().to_vec(),
        ))])
    }
}

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let sh = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
    let in_strides = strides(sh);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; sh.len()];
    let xd = x.data();
    let mut data = Vec::with_capacity(x.numel());
    for_each_broadcast(&out_shape, &src_strides, &zeros, |_, s, _| data.push(xd[s]));
    Tensor::from_parts(out_shape, data)
}

struct PermuteBackward {
    inverse: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PermuteBackward {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        Ok(vec![Some(permute_data(g, &self.inverse))])
    }
}

struct ConcatBackward {
    axis: usize,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Grads<T> {
        let osh = out.shape();
        let outer = numel(&osh[..self.axis]);
        let inner = numel(&osh[self.axis + 1..]);
        let total = osh[self.axis] * inner;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let width = x.shape()[self.axis] * inner;
            if need {
                let mut d = Vec::with_capacity(x.numel());
                for o in 0..outer {
                    d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + width]);
                }
                grads.push(Some(Tensor::from_parts(x.shape().to_vec(), d)));
            } else {
                grads.push(None);
            }
            offset += width;
        }
        Ok(grads)
    }
}

struct SliceBackward {
    axis: usize,
    start: usize,
}

impl<T: Scalar> Backward<T> for SliceBackward {
    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let sh = inputs[0].shape();
        let outer = numel(&sh[..self.axis]);
        let inner = numel(&sh[self.axis + 1..]);
        let full = sh[self.axis] * inner;
        let part = out.shape()[self.axis] * inner;
        let mut d = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            let dst = o * full + self.start * inner;
            d[dst..dst + part].copy_from_slice(&g.data()[o * part..(o + 1) * part]);
        }
        Ok(vec![Some(Tensor::from_parts(sh.to_vec(), d))])
    }
}

struct MaskedFillBackward {
    mask: Rc<[bool]>,
}

impl<T: Scalar> Backward<T> for MaskedFillBackward {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let m = self.mask.len();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.mask[i % m] { T::zero() } else { v })
            .collect();
        Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), data))])
    }
}

struct SumBackward<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for SumBackward<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Grads<T> {
        let v = g.data()[0] * self.scale;
        Ok(vec![Some(Tensor::full(inputs[0].shape(), v))])
    }
}

// ---------------------------------------------------------------------------
// public surface

impl<'p, T: Scalar> Tape<'p, T> {
    fn binary(&self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        self.record(name, &[a, b], |v| {
            let out = match kind {
                BinaryKind::Add => binary_map(v[0], v[1], |x, y| x + y),
                BinaryKind::Sub => binary_map(v[0], v[1], |x, y| x - y),
                BinaryKind::Mul => binary_map(v[0], v[1], |x, y| x * y),
            }?;
            Ok((out, BinaryBackward { kind }))
        })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        self.record("scale", &[a], |v| Ok((v[0].map(|x| x * factor), ScaleBackward { factor })))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.record("add_scalar", &[a], |v| {
            Ok((v[0].map(|x| x + c), ScaleBackward { factor: T::one() }))
        })
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub(crate) fn unary(&self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.record(kind.name(), &[a], |v| Ok((v[0].map(|x| kind.forward(x)), UnaryBackward { kind })))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// `log(1 + e^x)`, switching to the identity above 30.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.record("matmul", &[a, b], |v| Ok((matmul_forward(v[0], v[1])?, MatmulBackward)))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.record("softmax", &[a], |v| {
            let x = v[0];
            if x.rank() == 0 {
                return Err(Error::dim("softmax of a scalar"));
            }
            let w = x.shape()[x.rank() - 1];
            let data = if w == 0 { Vec::new() } else { softmax_rows(x.data(), w) };
            Ok((Tensor::from_parts(x.shape().to_vec(), data), SoftmaxBackward))
        })
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let eps = T::of(eps);
        self.record("layer_norm", &[x, gamma, beta], |v| {
            let (x, g, b) = (v[0], v[1], v[2]);
            let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::dim(format!(
                    "layer_norm over width {d} with gamma {:?} / beta {:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(d) {
                let (mean, rstd) = row_stats(row, eps);
                out.extend(
                    row.iter()
                        .enumerate()
                        .map(|(j, &v)| (v - mean) * rstd * g.data()[j] + b.data()[j]),
                );
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), LayerNormBackward { eps }))
        })
    }

    /// Depthwise causal convolution of `x: [..., T, C]` with `w: [C, k]` and
    /// `bias: [C]`; the input is left-padded with `k - 1` zeros.
    pub fn causal_depthwise_conv1d(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.record("causal_depthwise_conv1d", &[x, w, bias], |v| {
            let (x, w, bias) = (v[0], v[1], v[2]);
            let sh = x.shape();
            if sh.len() < 2 {
                return Err(Error::dim("conv input needs [..., T, C]"));
            }
            let (t_len, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
            if w.rank() != 2 || w.shape()[0] != c || w.shape()[1] == 0 || bias.shape() != [c] {
                return Err(Error::dim(format!(
                    "depthwise conv over {c} channels with kernel {:?} and bias {:?}",
                    w.shape(),
                    bias.shape()
                )));
            }
            let k = w.shape()[1];
            let batch = x.numel() / (t_len * c).max(1);
            let (xd, wd, bd) = (x.data(), w.data(), bias.data());
            let mut out = vec![T::zero(); x.numel()];
            for b in 0..batch {
                let base = b * t_len * c;
                for t in 0..t_len {
                    for ch in 0..c {
                        let mut acc = bd[ch];
                        for j in 0..k {
                            if let Some(src) = (t + j).checked_sub(k - 1) {
                                acc += wd[ch * k + j] * xd[base + src * c + ch];
                            }
                        }
                        out[base + t * c + ch] = acc;
                    }
                }
            }
            Ok((Tensor::from_parts(sh.to_vec(), out), DepthwiseCausalBackward))
        })
    }

    /// Dense convolution of `x: [B, T, C_in]` with `w: [C_out, C_in, k]`,
    /// zero-padded by `pad_left`/`pad_right` steps.
    pub fn conv1d(&self, x: Var, w: Var, bias: Var, pad_left: usize, pad_right: usize) -> Result<Var> {
        self.record("conv1d", &[x, w, bias], |v| {
            let (x, w, bias) = (v[0], v[1], v[2]);
            let sh = x.shape();
            if sh.len() != 3 || w.rank() != 3 || w.shape()[1] != sh[2] || bias.shape() != [w.shape()[0]] {
                return Err(Error::dim(format!(
                    "conv1d input {:?}, kernel {:?}, bias {:?}",
                    sh,
                    w.shape(),
                    bias.shape()
                )));
            }
            let (batch, t_in, c_in) = (sh[0], sh[1], sh[2]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let padded = t_in + pad_left + pad_right;
            if padded < k {
                return Err(Error::dim("conv1d kernel longer than padded input"));
            }
            let t_out = padded - k + 1;
            let (xd, wd, bd) = (x.data(), w.data(), bias.data());
            let mut out = vec![T::zero(); batch * t_out * c_out];
            for b in 0..batch {
                for t in 0..t_out {
                    for o in 0..c_out {
                        let mut acc = bd[o];
                        for j in 0..k {
                            let src = t + j;
                            if src < pad_left || src - pad_left >= t_in {
                                continue;
                            }
                            let xrow = (b * t_in + src - pad_left) * c_in;
                            for i in 0..c_in {
                                acc += wd[(o * c_in + i) * k + j] * xd[xrow + i];
                            }
                        }
                        out[(b * t_out + t) * c_out + o] = acc;
                    }
                }
            }
            Ok((
                Tensor::from_parts(vec![batch, t_out, c_out], out),
                Conv1dBackward { pad_left },
            ))
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record("reshape", &[a], |v| {
            if numel(shape) != v[0].numel() {
                return Err(Error::dim(format!(
                    "cannot reshape {:?} into {shape:?}",
                    v[0].shape()
                )));
            }
            Ok((Tensor::from_parts(shape.to_vec(), v[0].data().to_vec()), ReshapeBackward))
        })
    }

    /// Collapse all axes from `start` onwards into one.
    pub fn flatten_from(&self, a: Var, start: usize) -> Result<Var> {
        let sh = self.shape(a);
        if start > sh.len() {
            return Err(Error::dim("flatten axis out of range"));
        }
        let mut shape = sh[..start].to_vec();
        shape.push(numel(&sh[start..]));
        self.reshape(a, &shape)
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        self.record("permute", &[a], |v| {
            let rank = v[0].rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::dim(format!("invalid permutation {perm:?} for rank {rank}")));
            }
            let mut inverse = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            Ok((permute_data(v[0], perm), PermuteBackward { inverse }))
        })
    }

    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if d0 >= rank || d1 >= rank {
            return Err(Error::dim(format!("transpose axes {d0},{d1} for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record("concat", parts, |v| {
            let first = v.first().ok_or_else(|| Error::dim("concat of nothing"))?;
            let rank = first.rank();
            if axis >= rank {
                return Err(Error::dim("concat axis out of range"));
            }
            for t in v.iter() {
                let same = t.rank() == rank
                    && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
                if !same {
                    return Err(Error::dim(format!(
                        "concat along {axis}: {:?} vs {:?}",
                        first.shape(),
                        t.shape()
                    )));
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = v.iter().map(|t| t.shape()[axis]).sum();
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in v.iter() {
                    let w = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Ok((Tensor::from_parts(shape, data), ConcatBackward { axis }))
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record("slice", &[a], |v| {
            let sh = v[0].shape();
            if axis >= sh.len() || start + len > sh[axis] {
                return Err(Error::dim(format!(
                    "slice {start}..{} of axis {axis} in {sh:?}",
                    start + len
                )));
            }
            let outer = numel(&sh[..axis]);
            let inner = numel(&sh[axis + 1..]);
            let full = sh[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = o * full + start * inner;
                data.extend_from_slice(&v[0].data()[s..s + len * inner]);
            }
            let mut shape = sh.to_vec();
            shape[axis] = len;
            Ok((Tensor::from_parts(shape, data), SliceBackward { axis, start }))
        })
    }

    /// Replace entries where `fill` is true by `value`. `fill` covers the
    /// trailing axes of `a` and repeats over the leading ones.
    pub fn masked_fill(&self, a: Var, fill: Rc<[bool]>, value: f64) -> Result<Var> {
        let value = T::of(value);
        self.record_unchecked("masked_fill", &[a], |v| {
            let m = fill.len();
            if m == 0 || v[0].numel() % m != 0 {
                return Err(Error::dim(format!(
                    "mask of {m} entries for tensor {:?}",
                    v[0].shape()
                )));
            }
            let data = v[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| if fill[i % m] { value } else { x })
                .collect();
            Ok((
                Tensor::from_parts(v[0].shape().to_vec(), data),
                MaskedFillBackward { mask: fill.clone() },
            ))
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.record("sum", &[a], |v| Ok((Tensor::scalar(v[0].sum()), SumBackward { scale: T::one() })))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.record("mean", &[a], |v| {
            let n = v[0].numel();
            if n == 0 {
                return Err(Error::dim("mean of an empty tensor"));
            }
            let scale = T::one() / T::of(n as f64);
            Ok((Tensor::scalar(v[0].sum() * scale), SumBackward { scale }))
        })
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim(format!(
                "mse between {:?} and {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }
}
