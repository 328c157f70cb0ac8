//! Scaled dot-product attention: a dense masked path and a fused banded path.

use std::cell::Cell;
use std::rc::Rc;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static LOGITS: Cell<u64> = const { Cell::new(0) };
}

/// Number of attention logits evaluated by the banded path on this thread
/// since the last [`reset_logit_counter`].
pub fn logits_evaluated() -> u64 {
    LOGITS.with(Cell::get)
}

pub fn reset_logit_counter() {
    LOGITS.with(|c| c.set(0));
}

fn count_logits(n: u64) {
    LOGITS.with(|c| c.set(c.get() + n));
}

/// Which positions each token may attend to; `true` means allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        AttentionMask {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// The fill pattern for `masked_fill` (true where attention is blocked).
    pub fn blocked(&self) -> Rc<[bool]> {
        self.allowed.iter().map(|&a| !a).collect()
    }
}

/// Half-width of the symmetric band for window `w`.
pub fn band_half_width(w: usize) -> usize {
    w / 2
}

/// Symmetric band: `i` may attend to `j` iff `|i - j| <= w / 2`.
pub fn window_mask(n: usize, w: usize) -> AttentionMask {
    let half = band_half_width(w);
    let allowed = (0..n * n).map(|k| (k / n).abs_diff(k % n) <= half).collect();
    AttentionMask { n, allowed }
}

/// Single-head reference: `softmax(q k^T / sqrt(d_k) + mask) v` for `N x d_k` inputs.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let tape = Tape::<f64>::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = dense_attention(&tape, q, k, v, Some(mask))?;
    Ok(tape.to_tensor(out))
}

/// Dense attention over the last two axes of `q, k, v: [..., N, d_k]`.
/// Blocked logits are filled with negative infinity before the softmax.
pub fn dense_attention<T: Scalar>(
    tape: &Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let sh = tape.shape(q);
    if sh.len() < 2 || tape.shape(k) != sh || tape.shape(v) != sh {
        return Err(Error::dim(format!(
            "attention inputs {:?} / {:?} / {:?}",
            sh,
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let (n, dk) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let kt = tape.transpose(k, sh.len() - 2, sh.len() - 1)?;
    let mut scores = tape.scale(tape.matmul(q, kt)?, 1.0 / (dk as f64).sqrt())?;
    if let Some(mask) = mask {
        if mask.n != n {
            return Err(Error::dim(format!("mask for {} tokens applied to {n}", mask.n)));
        }
        if !mask.is_full() {
            scores = tape.masked_fill(scores, mask.blocked(), f64::NEG_INFINITY)?;
        }
    }
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

#[derive(Debug, Clone, Copy)]
struct BandDims {
    rows: usize,
    n: usize,
    heads: usize,
    dk: usize,
    half: usize,
}

impl BandDims {
    #[inline]
    fn at(&self, r: usize, i: usize, h: usize) -> usize {
        ((r * self.n + i) * self.heads + h) * self.dk
    }

    fn range(&self, i: usize) -> (usize, usize) {
        (i.saturating_sub(self.half), (i + self.half + 1).min(self.n))
    }
}

fn band_dims<T: Scalar>(v: &[&Tensor<T>], heads: usize, half: usize) -> Result<BandDims> {
    let sh = v[0].shape();
    if sh.len() != 3 || v[1].shape() != sh || v[2].shape() != sh || heads == 0 || !sh[2].is_multiple_of(heads) {
        return Err(Error::dim(format!(
            "banded attention needs equal [R,N,D] inputs with D divisible by {heads} heads, got {sh:?}"
        )));
    }
    Ok(BandDims {
        rows: sh[0],
        n: sh[1],
        heads,
        dk: sh[2] / heads,
        half,
    })
}

/// Softmax weights of one query row over its band, written into `p`.
fn band_weights<T: Scalar>(d: BandDims, q: &[T], k: &[T], r: usize, i: usize, h: usize, p: &mut Vec<T>) {
    let (lo, hi) = d.range(i);
    let scale = T::one() / T::of(d.dk as f64).sqrt();
    let qi = &q[d.at(r, i, h)..d.at(r, i, h) + d.dk];
    p.clear();
    let mut max = T::neg_infinity();
    for j in lo..hi {
        let kj = &k[d.at(r, j, h)..d.at(r, j, h) + d.dk];
        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
        max = max.max(s);
        p.push(s);
    }
    let mut sum = T::zero();
    for s in p.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    p.iter_mut().for_each(|s| *s /= sum);
}

struct BandedBackward {
    dims: BandDims,
}

impl<T: Scalar> Backward<T> for BandedBackward {
    fn backward(&self, v: &[&Tensor<T>], _o: &Tensor<T>, g: &Tensor<T>, _n: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let d = self.dims;
        let (q, k, val, go) = (v[0].data(), v[1].data(), v[2].data(), g.data());
        let scale = T::one() / T::of(d.dk as f64).sqrt();
        let mut gq = vec![T::zero(); q.len()];
        let mut gk = vec![T::zero(); k.len()];
        let mut gv = vec![T::zero(); val.len()];
        let mut p = Vec::with_capacity(2 * d.half + 1);
        let mut gp = Vec::with_capacity(2 * d.half + 1);
        for r in 0..d.rows {
            for h in 0..d.heads {
                for i in 0..d.n {
                    band_weights(d, q, k, r, i, h, &mut p);
                    let (lo, hi) = d.range(i);
                    let oi = d.at(r, i, h);
                    let goi = &go[oi..oi + d.dk];
                    gp.clear();
                    let mut dot = T::zero();
                    for (idx, j) in (lo..hi).enumerate() {
                        let vj = d.at(r, j, h);
                        let s = goi.iter().zip(&val[vj..vj + d.dk]).map(|(&a, &b)| a * b).sum::<T>();
                        dot += p[idx] * s;
                        gp.push(s);
                        for c in 0..d.dk {
                            gv[vj + c] += p[idx] * goi[c];
                        }
                    }
                    for (idx, j) in (lo..hi).enumerate() {
                        let gs = p[idx] * (gp[idx] - dot) * scale;
                        let kj = d.at(r, j, h);
                        for c in 0..d.dk {
                            gq[oi + c] += gs * k[kj + c];
                            gk[kj + c] += gs * q[oi + c];
                        }
                    }
                }
            }
        }
        let shape = v[0].shape();
        Ok(vec![
            Some(Tensor::new(shape, gq)?),
            Some(Tensor::new(shape, gk)?),
            Some(Tensor::new(shape, gv)?),
        ])
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Multi-head attention of `q, k, v: [R, N, D]` (heads are contiguous
    /// slices of `D`) restricted to `|i - j| <= half`. Only in-band logits
    /// are evaluated.
    pub fn banded_attention(&self, q: Var, k: Var, v: Var, heads: usize, half: usize) -> Result<Var> {
        self.record("banded_attention", &[q, k, v], |vals| {
            let d = band_dims(vals, heads, half)?;
            let (qd, kd, vd) = (vals[0].data(), vals[1].data(), vals[2].data());
            let mut out = vec![T::zero(); qd.len()];
            let mut p = Vec::with_capacity(2 * half + 1);
            let mut evaluated = 0u64;
            for r in 0..d.rows {
                for h in 0..d.heads {
                    for i in 0..d.n {
                        band_weights(d, qd, kd, r, i, h, &mut p);
                        evaluated += p.len() as u64;
                        let (lo, _) = d.range(i);
                        let oi = d.at(r, i, h);
                        for (idx, &w) in p.iter().enumerate() {
                            let vj = d.at(r, lo + idx, h);
                            for c in 0..d.dk {
                                out[oi + c] += w * vd[vj + c];
                            }
                        }
                    }
                }
            }
            count_logits(evaluated);
            Ok((Tensor::new(vals[0].shape(), out)?, BandedBackward { dims: d }))
        })
    }
}
