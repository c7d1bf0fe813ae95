// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eager kernels. The tape records these and pairs each with its adjoint.

use super::rng::SeedRng;
use super::scalar::is_masked;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Layernorm epsilon used by every normalization in the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

fn require_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a row-major matrix.
fn gemm<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = require_2d(op, a)?;
    let (br, bc) = require_2d(op, b)?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            op,
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: extents and strides are derived from the owning buffers
        // above and `out` is a fresh m*n allocation.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `[m×k] · [k×n] -> [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm("matmul", a, false, b, false)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm("matmul_bt", a, false, b, true)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm("matmul_at", a, true, b, false)
}

/// Row-wise softmax of `scores + mask` where mask entries are `0` or
/// [`Scalar::MASKED`]. Masked outputs are exactly zero.
pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if scores.shape() != mask.shape() {
        return Err(Error::shape(
            "masked_softmax",
            format!("scores {:?} vs mask {:?}", scores.shape(), mask.shape()),
        ));
    }
    let cols = scores.cols();
    let mut out = vec![T::zero(); scores.len()];
    if cols == 0 {
        return Tensor::new(scores.shape().to_vec(), out);
    }
    for (r, ((srow, mrow), orow)) in scores
        .data()
        .chunks(cols)
        .zip(mask.data().chunks(cols))
        .zip(out.chunks_mut(cols))
        .enumerate()
    {
        let mut max = T::neg_infinity();
        let mut open = false;
        for (&s, &m) in srow.iter().zip(mrow) {
            if !is_masked(m) {
                open = true;
                if s > max {
                    max = s;
                }
            }
        }
        // non-finite scores propagate as NaN rather than as a masking error
        if !open {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = T::zero();
        for ((o, &s), &m) in orow.iter_mut().zip(srow).zip(mrow) {
            if !is_masked(m) {
                let e = (s - max).exp();
                *o = e;
                total = total + e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    Tensor::new(scores.shape().to_vec(), out)
}

/// Adjoint of softmax given its output `probs` and the upstream gradient.
pub(crate) fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let cols = probs.cols();
    let mut out = vec![T::zero(); probs.len()];
    if cols > 0 {
        for ((prow, grow), orow) in probs
            .data()
            .chunks(cols)
            .zip(grad.data().chunks(cols))
            .zip(out.chunks_mut(cols))
        {
            let dot: T = prow.iter().zip(grow).map(|(&p, &g)| p * g).sum();
            for ((o, &p), &g) in orow.iter_mut().zip(prow).zip(grow) {
                *o = p * (g - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out).expect("same shape as probs")
}

/// Per-row statistics kept for the layernorm adjoint.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T> {
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layernorm `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let (rows, cols) = x.dims2();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(
            "layernorm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let eps = T::from_f64(LAYERNORM_EPS);
    let n = T::from_f64(cols as f64);
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let xh = (row[c] - mean) * rs;
            normalized[r * cols + c] = xh;
            out[r * cols + c] = xh * gain.data()[c] + bias.data()[c];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        LayerNormStats {
            normalized: Tensor::new(shape, normalized)?,
            rstd,
        },
    ))
}

/// Gradients of layernorm with respect to `(x, gain, bias)`.
pub(crate) fn layernorm_backward<T: Scalar>(
    stats: &LayerNormStats<T>,
    gain: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, cols) = stats.normalized.dims2();
    let n = T::from_f64(cols as f64);
    let mut dx = vec![T::zero(); rows * cols];
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    for r in 0..rows {
        let xh = stats.normalized.row(r);
        let g = grad.row(r);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for c in 0..cols {
            let dxh = g[c] * gain.data()[c];
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = sum_dxh_xh + dxh * xh[c];
            dgain[c] = dgain[c] + g[c] * xh[c];
            dbias[c] = dbias[c] + g[c];
        }
        let rs = stats.rstd[r];
        for c in 0..cols {
            let dxh = g[c] * gain.data()[c];
            dx[r * cols + c] = rs * (dxh - sum_dxh / n - xh[c] * sum_dxh_xh / n);
        }
    }
    let shape = stats.normalized.shape().to_vec();
    (
        Tensor::new(shape, dx).expect("shape"),
        Tensor::new(gain.shape().to_vec(), dgain).expect("shape"),
        Tensor::new(gain.shape().to_vec(), dbias).expect("shape"),
    )
}

/// tanh-approximated GELU, the GPT-2 flavour.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

// 0.5(1 + tanh u) == sigmoid(2u); one exp is much cheaper than tanh.
#[inline]
fn gelu_gate<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64(2.0 * SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let z = c * (x + a * x * x * x);
    let s = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    (s, c * (T::one() + T::from_f64(3.0) * a * x * x))
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * gelu_gate(x).0
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let (s, dz) = gelu_gate(x);
    s + x * s * (T::one() - s) * dz
}

/// Gathers rows of `table` for each id.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, dim) = require_2d("embedding_lookup", table)?;
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= vocab {
            return Err(Error::TokenOutOfRange {
                id: id as u32,
                vocab,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), dim], out)
}

/// Mean negative log-likelihood of `targets` (pairs of logit row, gold id).
///
/// Returns the loss and the row softmax of every targeted row so the adjoint
/// can reuse it.
pub fn cross_entropy_over_positions<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[(usize, usize)],
) -> Result<(T, Vec<Vec<T>>)> {
    if targets.is_empty() {
        return Err(Error::Contract("empty loss-position set".into()));
    }
    let (rows, vocab) = logits.dims2();
    let mut total = T::zero();
    let mut probs = Vec::with_capacity(targets.len());
    for &(r, gold) in targets {
        if r >= rows || gold >= vocab {
            return Err(Error::shape(
                "cross_entropy",
                format!("target ({r}, {gold}) outside logits {:?}", logits.shape()),
            ));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total = total + (z.ln() + max - row[gold]);
        probs.push(exps.into_iter().map(|e| e / z).collect());
    }
    let n = T::from_f64(targets.len() as f64);
    Ok((total / n, probs))
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut SeedRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let keep = T::from_f64(1.0 / (1.0 - p));
    let data = (0..n)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2();
        let n = b.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let b = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let p = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b2 = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&p, &b2).unwrap(), t(&[&[5.0, 6.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeedRng::new(11);
        let a = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-6);

        let a32: Tensor<f32> = a.cast();
        let b32: Tensor<f32> = b.cast();
        let fast32 = matmul(&a32, &b32).unwrap().cast::<f64>();
        assert!(fast32.max_abs_diff(&slow).unwrap() <= 1e-6);
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = SeedRng::new(5);
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let bt = transpose(&b);
        let at = transpose(&a);
        let x = matmul_bt(&a, &b).unwrap();
        assert!(x.max_abs_diff(&naive_matmul(&a, &bt)).unwrap() < 1e-12);
        let c = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let y = matmul_at(&a, &c).unwrap();
        assert!(y.max_abs_diff(&naive_matmul(&at, &c)).unwrap() < 1e-12);
    }

    fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = a.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.get2(i, j);
            }
        }
        Tensor::new(vec![c, r], out).unwrap()
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let m = f64::MASKED;
        let p = masked_softmax(&t(&[&[1.0, 1.0]]), &t(&[&[0.0, m]])).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);

        let p = masked_softmax(&t(&[&[0.0, 0.0, 0.0]]), &t(&[&[0.0, 0.0, 0.0]])).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let p = masked_softmax(&t(&[&[2.0, 1.0, 0.0]]), &t(&[&[0.0, 0.0, m]])).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        let sigma = e2 / (e2 + e1);
        assert!((p.data()[0] - sigma).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - (1.0 - sigma)).abs() < 1e-12);
        assert_eq!(p.data()[2], 0.0);
    }

    #[test]
    fn softmax_f32_masked_entries_are_exact_zero() {
        let scores = Tensor::<f32>::new(vec![2, 3], vec![80.0, -3.0, 5.0, 0.5, 0.5, 0.5]).unwrap();
        let mask = Tensor::<f32>::new(vec![2, 3], vec![0.0, f32::MASKED, 0.0, f32::MASKED, 0.0, 0.0])
            .unwrap();
        let p = masked_softmax(&scores, &mask).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[3], 0.0);
        for r in 0..2 {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let m = f64::MASKED;
        let err = masked_softmax(&t(&[&[0.0, 1.0], &[1.0, 2.0]]), &t(&[&[0.0, 0.0], &[m, m]]))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let (loss, _) = cross_entropy_over_positions(&logits, &[(0, 1), (2, 6)]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_over_positions(&logits, &[]).is_err());
    }

    #[test]
    fn gelu_known_values() {
        let x = t(&[&[0.0, 1.0, -1.0]]);
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_192).abs() < 1e-5);
        assert!((y.data()[2] + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn layernorm_zero_mean_unit_variance() {
        let x = t(&[&[1.0, 2.0, 3.0, 4.0]]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let (y, _) = layernorm(&x, &g, &b).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dropout_mask_is_reproducible_and_scaled() {
        let a: Tensor<f32> = dropout_mask(&[100], 0.1, &mut SeedRng::new(3));
        let b: Tensor<f32> = dropout_mask(&[100], 0.1, &mut SeedRng::new(3));
        assert_eq!(a, b);
        let keep = 1.0 / 0.9f64;
        assert!(a
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v as f64 - keep).abs() < 1e-6));
    }
}
