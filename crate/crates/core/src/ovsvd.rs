// SPDX-License-Identifier: MIT OR Apache-2.0

//! OV circuits and their singular vectors.
//!
//! In the row-vector convention a head maps a residual `x` to
//! `x W_V^h W_O^h`, so `OV = W_V^h W_O^h` is `d_model x d_model` with rank at
//! most `d_head`. Its right singular vectors live in the output space and are
//! decoded through the unembedding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, TensorId};

pub const SVD_SCHEMA: &str = "factlab.svd/1";
const MAX_SWEEPS: usize = 80;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `W_V^h` (d_model x d_head) and `W_O^h` (d_head x d_model) of one head.
pub fn ov_factors(model: &Checkpoint, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
    let cfg = model.config();
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::Index(format!(
            "head {layer}.{head} outside a {} x {} model",
            cfg.n_layers, cfg.n_heads
        )));
    }
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let wv = model.get(TensorId::Wv(layer));
    let wv_h = Matrix::from_fn(d, dh, |i, j| wv[i * d + head * dh + j] as f64);
    let wo = model.w_o_head(layer, head);
    let wo_h = Matrix::from_fn(dh, d, |i, j| wo[i * d + j] as f64);
    Ok((wv_h, wo_h))
}

/// `W_V^h W_O^h`.
pub fn ov_matrix(model: &Checkpoint, layer: usize, head: usize) -> Result<Matrix> {
    let (a, b) = ov_factors(model, layer, head)?;
    Ok(a.matmul(&b))
}

/// Thin SVD `OV = U diag(S) V^T`. `u[i]` and `v[i]` are the i-th left and
/// right singular vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OVDecomposition {
    pub head: Option<(usize, usize)>,
    pub s: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OVDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.first().map_or(0, Vec::len);
        let n = self.v.first().map_or(0, Vec::len);
        let mut out = Matrix::zeros(m, n);
        for ((s, u), v) in self.s.iter().zip(&self.u).zip(&self.v) {
            for (row, &ui) in out.data.chunks_mut(n.max(1)).zip(u) {
                let a = s * ui;
                for (o, &vj) in row.iter_mut().zip(v) {
                    *o += a * vj;
                }
            }
        }
        out
    }
}

/// Column-major list of vectors.
type Columns = Vec<Vec<f64>>;

/// One-sided Jacobi on the columns of `a` (m x n). Returns `(W, V)` where
/// `a V = W` has mutually orthogonal columns, stored column-wise.
fn jacobi_columns(a: &Matrix) -> Result<(Columns, Columns)> {
    let n = a.cols;
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = w[p].iter().zip(&w[q]).fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| {
                    (a + x * x, b + y * y, g + x * y)
                });
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut w, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            return Ok((w, v));
        }
    }
    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    Err(Error::Numerical(format!(
        "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps on a {}x{} matrix (column norm range {min:.3e}..{max:.3e}, ratio {:.3e})",
        a.rows,
        a.cols,
        if min > 0.0 { max / min } else { f64::INFINITY }
    )))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Replace degenerate vectors (flagged `false`) by unit vectors orthogonal
/// to all others, drawn from the canonical basis.
fn complete_basis(vecs: &mut [Vec<f64>], ok: &[bool]) {
    let dim = vecs.first().map_or(0, Vec::len);
    let mut next = 0;
    for i in 0..vecs.len() {
        if ok[i] {
            continue;
        }
        loop {
            assert!(next < dim, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; dim];
            e[next] = 1.0;
            next += 1;
            for _ in 0..2 {
                for (j, other) in vecs.iter().enumerate() {
                    if j != i && (ok[j] || j < i) {
                        let p = dot(&e, other);
                        e.iter_mut().zip(other).for_each(|(x, o)| *x -= p * o);
                    }
                }
            }
            if normalize(&mut e) > 1e-6 {
                vecs[i] = e;
                break;
            }
        }
    }
}

/// Flip each pair so the right vector's largest-magnitude entry (first on
/// ties) is positive.
fn fix_signs(u: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    for (ui, vi) in u.iter_mut().zip(v.iter_mut()) {
        let mut best = 0;
        for (j, x) in vi.iter().enumerate() {
            if x.abs() > vi[best].abs() {
                best = j;
            }
        }
        if vi.get(best).is_some_and(|&x| x < 0.0) {
            vi.iter_mut().for_each(|x| *x = -*x);
            ui.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Singular triplets of `a` from a Jacobi pass, sorted by decreasing value
/// (ties keep column order) and truncated to `rank`.
fn svd_from_jacobi(a: &Matrix, rank: usize) -> Result<(Vec<f64>, Columns, Columns)> {
    let (w, v) = jacobi_columns(a)?;
    let mut order: Vec<usize> = (0..w.len()).collect();
    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    order.truncate(rank.min(a.cols));
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut s = Vec::with_capacity(order.len());
    let mut u = Vec::with_capacity(order.len());
    let mut vs = Vec::with_capacity(order.len());
    let mut ok = Vec::with_capacity(order.len());
    for &i in &order {
        let mut col = w[i].clone();
        let n = normalize(&mut col);
        let good = n > smax * 1e-13 && n > 0.0;
        s.push(if good { n } else { 0.0 });
        ok.push(good);
        u.push(col);
        vs.push(v[i].clone());
    }
    if a.rows > 0 {
        complete_basis(&mut u, &ok);
    }
    Ok((s, u, vs))
}

/// Thin SVD of a general matrix, keeping `rank` triplets.
pub fn svd_ov(ov: &Matrix, rank: usize) -> Result<OVDecomposition> {
    if !ov.is_finite() {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    if rank > ov.rows.min(ov.cols) {
        return Err(Error::Config(format!(
            "rank {rank} exceeds matrix shape {}x{}",
            ov.rows, ov.cols
        )));
    }
    let (s, mut u, mut v) = svd_from_jacobi(ov, rank)?;
    fix_signs(&mut u, &mut v);
    Ok(OVDecomposition { head: None, s, u, v })
}

/// Householder thin QR of a tall matrix: `a = Q R` with `Q` (m x n) having
/// orthonormal columns (returned column-wise) and `R` upper triangular n x n.
fn thin_qr(a: &Matrix) -> (Vec<Vec<f64>>, Matrix) {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "thin QR needs a tall matrix");
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut x: Vec<f64> = (k..m).map(|i| r.at(i, k)).collect();
        let norm = dot(&x, &x).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vn = normalize(&mut x);
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for j in k..n {
            let p: f64 = (k..m).map(|i| x[i - k] * r.at(i, j)).sum();
            for i in k..m {
                r.data[i * n + j] -= 2.0 * p * x[i - k];
            }
        }
        reflectors.push(x);
    }
    // Q = H_0 ... H_{n-1} applied to the first n identity columns.
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for k in (0..n).rev() {
        let h = &reflectors[k];
        if h.is_empty() {
            continue;
        }
        for col in q.iter_mut() {
            let p: f64 = (k..m).map(|i| h[i - k] * col[i]).sum();
            for i in k..m {
                col[i] -= 2.0 * p * h[i - k];
            }
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| if j >= i { r.at(i, j) } else { 0.0 });
    (q, r)
}

/// Thin SVD of `a b` from its factors (`a`: m x k, `b`: k x n, k <= m, n)
/// without forming the product.
pub fn svd_factored(a: &Matrix, b: &Matrix) -> Result<OVDecomposition> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numerical("factor has non-finite entries".into()));
    }
    let k = a.cols;
    assert_eq!(k, b.rows, "factor shapes do not chain");
    let (qa, ra) = thin_qr(a);
    let (qb, rb) = thin_qr(&b.transpose());
    // a b = Qa (Ra Rb^T) Qb^T
    let core = ra.matmul(&rb.transpose());
    let (s, uc, vc) = svd_from_jacobi(&core, k)?;
    let lift = |q: &[Vec<f64>], c: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; q[0].len()];
        for (col, &w) in q.iter().zip(c) {
            out.iter_mut().zip(col).for_each(|(o, x)| *o += w * x);
        }
        out
    };
    let mut u: Vec<Vec<f64>> = uc.iter().map(|c| lift(&qa, c)).collect();
    let mut v: Vec<Vec<f64>> = vc.iter().map(|c| lift(&qb, c)).collect();
    fix_signs(&mut u, &mut v);
    Ok(OVDecomposition { head: None, s, u, v })
}

/// Thin SVD of one head's OV circuit via its factors.
pub fn head_svd(model: &Checkpoint, layer: usize, head: usize) -> Result<OVDecomposition> {
    let (a, b) = ov_factors(model, layer, head)?;
    let mut dec = svd_factored(&a, &b)?;
    dec.head = Some((layer, head));
    Ok(dec)
}

/// Largest deviation of the Gram matrix of `vecs` from the identity.
pub fn orthonormality_error(vecs: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..vecs.len() {
        for j in 0..vecs.len() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(&vecs[i], &vecs[j]) - want).abs());
        }
    }
    worst
}

/// `||OV - U S V^T||_F / ||OV||_F`, or the absolute error for a zero matrix.
pub fn reconstruction_error(ov: &Matrix, dec: &OVDecomposition) -> f64 {
    let r = dec.reconstruct();
    let diff: f64 = ov.data.iter().zip(&r.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n = ov.frobenius();
    if n > 0.0 {
        diff / n
    } else {
        diff
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedVector {
    pub index: usize,
    pub singular_value: f64,
    /// `(token id, score)`, highest score first; ties by lowest id.
    pub top: Vec<(u32, f64)>,
}

/// Indices of the `k` largest scores, ties broken by lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i as u32, scores[i])).collect()
}

/// Which side of the decomposition to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DecodeSide {
    /// Right vectors through the unembedding.
    #[default]
    Output,
    /// Left vectors against the token embeddings.
    Input,
}

/// Top-`k` tokens for the first `n_vectors` singular vectors.
///
/// `matrix` is `d_model x vocab` row-major for the output side (the
/// unembedding) and `vocab x d_model` for the input side (the embedding).
pub fn decode_singular_vectors(
    dec: &OVDecomposition,
    matrix: &[f64],
    vocab: usize,
    k: usize,
    n_vectors: usize,
    side: DecodeSide,
) -> Result<Vec<DecodedVector>> {
    if k > vocab {
        return Err(Error::Config(format!("k = {k} exceeds the vocabulary of {vocab}")));
    }
    let vecs = match side {
        DecodeSide::Output => &dec.v,
        DecodeSide::Input => &dec.u,
    };
    let d = vecs.first().map_or(0, Vec::len);
    if matrix.len() != d * vocab {
        return Err(Error::Input(format!(
            "decode matrix has {} entries, expected {d} x {vocab}",
            matrix.len()
        )));
    }
    Ok(vecs
        .iter()
        .zip(&dec.s)
        .take(n_vectors)
        .enumerate()
        .map(|(index, (v, &s))| {
            let scores: Vec<f64> = match side {
                DecodeSide::Output => (0..vocab)
                    .map(|t| (0..d).map(|j| v[j] * matrix[j * vocab + t]).sum())
                    .collect(),
                DecodeSide::Input => (0..vocab).map(|t| dot(v, &matrix[t * d..(t + 1) * d])).collect(),
            };
            DecodedVector {
                index,
                singular_value: s,
                top: top_k(&scores, k),
            }
        })
        .collect())
}

/// Decode a head's output side through the checkpoint's unembedding, or its
/// input side through the token embeddings.
pub fn decode_head(
    model: &Checkpoint,
    dec: &OVDecomposition,
    k: usize,
    n_vectors: usize,
    side: DecodeSide,
) -> Result<Vec<DecodedVector>> {
    let vocab = model.config().vocab_size;
    let id = match side {
        DecodeSide::Output => TensorId::Unembed,
        DecodeSide::Input => TensorId::TokEmbed,
    };
    let m: Vec<f64> = model.get(id).iter().map(|&x| x as f64).collect();
    decode_singular_vectors(dec, &m, vocab, k, n_vectors, side)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Entity share of each decoded vector's top-k.
    pub per_vector: Vec<f64>,
    /// Mean over vectors.
    pub mean: f64,
}

pub fn cluster_report(decoded: &[DecodedVector], is_entity: impl Fn(u32) -> bool) -> ClusterReport {
    let per_vector: Vec<f64> = decoded
        .iter()
        .map(|d| {
            if d.top.is_empty() {
                0.0
            } else {
                d.top.iter().filter(|(t, _)| is_entity(*t)).count() as f64 / d.top.len() as f64
            }
        })
        .collect();
    let mean = if per_vector.is_empty() {
        0.0
    } else {
        per_vector.iter().sum::<f64>() / per_vector.len() as f64
    };
    ClusterReport { per_vector, mean }
}

/// Table with one row per singular vector and its quoted top tokens.
pub fn decoded_table(title: &str, decoded: &[DecodedVector], token: impl Fn(u32) -> String) -> String {
    let mut s = format!("# schema: {SVD_SCHEMA} {title}\nvector\tsigma\ttokens\n");
    for d in decoded {
        let toks: Vec<String> = d.top.iter().map(|(t, _)| format!("'{}'", token(*t))).collect();
        let _ = writeln!(s, "{}\t{:.6}\t{}", d.index, d.singular_value, toks.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_like_matrix() {
        let m = Matrix::from_fn(8, 8, |i, j| if i == j && i < 3 { 1.0 } else { 0.0 });
        let dec = svd_ov(&m, 3).unwrap();
        assert_eq!(dec.s, vec![1.0, 1.0, 1.0]);
        for (i, v) in dec.v.iter().enumerate() {
            let e: Vec<f64> = (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            assert_eq!(v, &e);
        }
    }

    #[test]
    fn dense_and_factored_agree() {
        let a = random(16, 4, 1);
        let b = random(4, 16, 2);
        let ov = a.matmul(&b);
        let dense = svd_ov(&ov, 4).unwrap();
        let fact = svd_factored(&a, &b).unwrap();
        for (x, y) in dense.s.iter().zip(&fact.s) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in dense.v.iter().zip(&fact.v) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-8);
            }
        }
        assert!(reconstruction_error(&ov, &fact) < 1e-12);
        assert!(orthonormality_error(&fact.u) < 1e-12);
        assert!(orthonormality_error(&fact.v) < 1e-12);
    }

    #[test]
    fn zero_factors_still_give_orthonormal_vectors() {
        let dec = svd_factored(&Matrix::zeros(10, 3), &random(3, 10, 4)).unwrap();
        assert_eq!(dec.s, vec![0.0; 3]);
        assert!(orthonormality_error(&dec.u) < 1e-12);
        assert!(orthonormality_error(&dec.v) < 1e-12);
    }

    #[test]
    fn scale_equivariance() {
        let a = random(12, 3, 5);
        let b = random(3, 12, 6);
        let d1 = svd_factored(&a, &b).unwrap();
        let a3 = Matrix::from_fn(12, 3, |i, j| 3.0 * a.at(i, j));
        let d3 = svd_factored(&a3, &b).unwrap();
        for (x, y) in d1.s.iter().zip(&d3.s) {
            assert!((3.0 * x - y).abs() < 1e-10);
        }
        for (x, y) in d1.v.iter().zip(&d3.v) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect();
            let k = rng.random_range(0..=n);
            let mut oracle: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            assert_eq!(top_k(&scores, k), oracle);
        }
    }

    #[test]
    fn identity_unembedding_decodes_one_hot() {
        let d = 5;
        let mut v = vec![0.0; d];
        v[3] = 1.0;
        let dec = OVDecomposition {
            head: None,
            s: vec![2.0],
            u: vec![v.clone()],
            v: vec![v],
        };
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        let out = decode_singular_vectors(&dec, &eye, d, 2, 1, DecodeSide::Output).unwrap();
        assert_eq!(out[0].top[0], (3, 1.0));
        assert_eq!(out[0].top[1], (0, 0.0));
        assert!(decode_singular_vectors(&dec, &eye, d, 6, 1, DecodeSide::Output).is_err());
    }

    #[test]
    fn cluster_shares() {
        let mk = |toks: &[u32]| DecodedVector {
            index: 0,
            singular_value: 1.0,
            top: toks.iter().map(|&t| (t, 0.0)).collect(),
        };
        let none = cluster_report(&[mk(&[1, 2, 3])], |t| t > 10);
        assert_eq!(none.mean, 0.0);
        let all = cluster_report(&[mk(&[11, 12])], |t| t > 10);
        assert_eq!(all.mean, 1.0);
        let mixed = cluster_report(&[mk(&[1, 11, 12, 3]), mk(&[20, 2])], |t| t > 10);
        assert_eq!(mixed.per_vector, vec![0.5, 0.5]);
    }
}
