// SPDX-License-Identifier: MIT OR Apache-2.0

//! Manual reverse pass for the forward in `forward.rs`.

use super::forward::{gelu_grad, Cache, LogitRows};
use super::params::{Model, TensorId};
use super::real::{gemm, Real};
use crate::error::{Error, Result};

/// Gradient of a layer norm given its normalized input and inverse std.
/// Accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    rows: usize,
    d: usize,
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j].f64() * gain[j].f64();
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[j].f64();
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = rstd[r].f64();
        for j in 0..d {
            let dxh = dyr[j].f64() * gain[j].f64();
            dx[r * d + j] += F::of(rs * (dxh - mean_dxhat - xr[j].f64() * mean_dxhat_xhat));
        }
    }
}

fn sum_rows_into<F: Real>(src: &[F], cols: usize, dst: &mut [F]) {
    for row in src.chunks(cols) {
        dst.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
    }
}

impl<F: Real> Model<F> {
    /// Accumulate parameter gradients into `grads` given `dlogits` for every
    /// row of `cache`.
    pub(crate) fn backward(&self, cache: &Cache<F>, dlogits: &[F], grads: &mut Model<F>) {
        assert_eq!(cache.logit_rows, LogitRows::All, "backward needs logits for all rows");
        let cfg = self.cfg;
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dh = cfg.d_head();
        let dm = cfg.d_mlp();
        let vocab = cfg.vocab_size;
        let rows = cache.rows;
        let scale = 1.0 / (dh as f64).sqrt();

        gemm(true, false, d, vocab, rows, F::one(), &cache.f, dlogits, F::one(), grads.get_mut(TensorId::Unembed));
        let mut df = vec![F::zero(); rows * d];
        gemm(false, true, rows, d, vocab, F::one(), dlogits, self.get(TensorId::Unembed), F::zero(), &mut df);

        let mut dx = vec![F::zero(); rows * d];
        {
            let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
            layer_norm_backward(&df, &cache.xhatf, &cache.rstdf, self.get(TensorId::LnfGain), rows, d, &mut dx, &mut dg, &mut db);
            add_into(grads.get_mut(TensorId::LnfGain), &dg);
            add_into(grads.get_mut(TensorId::LnfBias), &db);
        }

        for l in (0..cfg.n_layers).rev() {
            let lc = &cache.layers[l];

            // MLP branch.
            gemm(true, false, dm, d, rows, F::one(), &lc.hact, &dx, F::one(), grads.get_mut(TensorId::MlpOut(l)));
            sum_rows_into(&dx, d, grads.get_mut(TensorId::MlpOutBias(l)));
            let mut dh_act = vec![F::zero(); rows * dm];
            gemm(false, true, rows, dm, d, F::one(), &dx, self.get(TensorId::MlpOut(l)), F::zero(), &mut dh_act);
            for (g, &z) in dh_act.iter_mut().zip(&lc.hpre) {
                *g *= gelu_grad(z);
            }
            gemm(true, false, d, dm, rows, F::one(), &lc.m, &dh_act, F::one(), grads.get_mut(TensorId::MlpIn(l)));
            sum_rows_into(&dh_act, dm, grads.get_mut(TensorId::MlpInBias(l)));
            let mut dm_in = vec![F::zero(); rows * d];
            gemm(false, true, rows, d, dm, F::one(), &dh_act, self.get(TensorId::MlpIn(l)), F::zero(), &mut dm_in);
            let mut dx_mid = dx.clone();
            {
                let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
                layer_norm_backward(&dm_in, &lc.xhat2, &lc.rstd2, self.get(TensorId::Ln2Gain(l)), rows, d, &mut dx_mid, &mut dg, &mut db);
                add_into(grads.get_mut(TensorId::Ln2Gain(l)), &dg);
                add_into(grads.get_mut(TensorId::Ln2Bias(l)), &db);
            }

            // Attention branch.
            gemm(true, false, d, d, rows, F::one(), &lc.r, &dx_mid, F::one(), grads.get_mut(TensorId::Wo(l)));
            sum_rows_into(&dx_mid, d, grads.get_mut(TensorId::Bo(l)));
            let mut dr = vec![F::zero(); rows * d];
            gemm(false, true, rows, d, d, F::one(), &dx_mid, self.get(TensorId::Wo(l)), F::zero(), &mut dr);
            for row in dr.chunks_mut(d) {
                for h in 0..nh {
                    if lc.scales[h] != F::one() {
                        row[h * dh..(h + 1) * dh].iter_mut().for_each(|g| *g *= lc.scales[h]);
                    }
                }
            }

            let mut dq = vec![F::zero(); rows * d];
            let mut dk = vec![F::zero(); rows * d];
            let mut dv = vec![F::zero(); rows * d];
            let mut dp = Vec::new();
            for &(start, len, poff) in &cache.segs {
                for h in 0..nh {
                    let p = &lc.probs[poff + h * len * len..poff + (h + 1) * len * len];
                    let col = |row: usize| (start + row) * d + h * dh;
                    // dP[i][j] = dr_i . v_j ; dv_j += P[i][j] dr_i
                    dp.clear();
                    dp.resize(len * len, 0.0f64);
                    for i in 0..len {
                        let dri = &dr[col(i)..col(i) + dh];
                        for j in 0..=i {
                            let vj = &lc.v[col(j)..col(j) + dh];
                            dp[i * len + j] = dri.iter().zip(vj).map(|(a, b)| a.f64() * b.f64()).sum();
                            let pij = p[i * len + j];
                            for c in 0..dh {
                                dv[col(j) + c] += pij * dri[c];
                            }
                        }
                    }
                    // dS = P * (dP - sum_j dP P); then dq_i += dS_ij k_j s, dk_j += dS_ij q_i s
                    for i in 0..len {
                        let dot: f64 = (0..=i).map(|j| dp[i * len + j] * p[i * len + j].f64()).sum();
                        for j in 0..=i {
                            let ds = p[i * len + j].f64() * (dp[i * len + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let ds = F::of(ds);
                            for c in 0..dh {
                                dq[col(i) + c] += ds * lc.k[col(j) + c];
                                dk[col(j) + c] += ds * lc.q[col(i) + c];
                            }
                        }
                    }
                }
            }

            let mut da = vec![F::zero(); rows * d];
            for (dproj, w, b) in [
                (&dq, TensorId::Wq(l), TensorId::Bq(l)),
                (&dk, TensorId::Wk(l), TensorId::Bk(l)),
                (&dv, TensorId::Wv(l), TensorId::Bv(l)),
            ] {
                gemm(true, false, d, d, rows, F::one(), &lc.a, dproj, F::one(), grads.get_mut(w));
                sum_rows_into(dproj, d, grads.get_mut(b));
                gemm(false, true, rows, d, d, F::one(), dproj, self.get(w), F::one(), &mut da);
            }
            let mut dx_in = dx_mid;
            {
                let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
                layer_norm_backward(&da, &lc.xhat1, &lc.rstd1, self.get(TensorId::Ln1Gain(l)), rows, d, &mut dx_in, &mut dg, &mut db);
                add_into(grads.get_mut(TensorId::Ln1Gain(l)), &dg);
                add_into(grads.get_mut(TensorId::Ln1Bias(l)), &db);
            }
            dx = dx_in;
        }

        let te = grads.offset(TensorId::TokEmbed).0;
        let pe = grads.offset(TensorId::PosEmbed).0;
        for &(start, len, _) in &cache.segs {
            for p in 0..len {
                let t = cache.tokens[start + p] as usize;
                for j in 0..d {
                    let g = dx[(start + p) * d + j];
                    grads.data[te + t * d + j] += g;
                    grads.data[pe + p * d + j] += g;
                }
            }
        }
    }

    /// Mean next-token cross-entropy over every target position of `seqs`,
    /// accumulating its gradient into `grads`.
    ///
    /// Each sequence predicts tokens `1..len` from tokens `0..len-1`.
    pub fn loss_and_grad(&self, seqs: &[&[u32]], grads: Option<&mut Model<F>>) -> Result<f64> {
        let inputs: Vec<&[u32]> = seqs
            .iter()
            .map(|s| {
                if s.len() < 2 {
                    Err(Error::Input("training sequences need at least two tokens".into()))
                } else {
                    Ok(&s[..s.len() - 1])
                }
            })
            .collect::<Result<_>>()?;
        let cache = self.forward_cached(&inputs, None, LogitRows::All)?;
        let vocab = self.cfg.vocab_size;
        let n_targets = cache.rows;
        let mut dlogits = vec![F::zero(); cache.rows * vocab];
        let mut total = 0.0;
        for (s, &(start, len, _)) in seqs.iter().zip(&cache.segs) {
            for p in 0..len {
                let row = start + p;
                let target = s[p + 1] as usize;
                let logits = &cache.logits[row * vocab..(row + 1) * vocab];
                let max = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x.f64() - max).exp()).sum();
                let log_z = max + z.ln();
                total += log_z - logits[target].f64();
                let g = &mut dlogits[row * vocab..(row + 1) * vocab];
                for (j, gj) in g.iter_mut().enumerate() {
                    let prob = (logits[j].f64() - log_z).exp();
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    *gj = F::of((prob - onehot) / n_targets as f64);
                }
            }
        }
        if let Some(grads) = grads {
            self.backward(&cache, &dlogits, grads);
        }
        Ok(total / n_targets as f64)
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
