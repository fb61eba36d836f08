// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-normalization decoder forward pass over a packed batch.
//!
//! Sequences are stacked row-wise so position-wise layers run as one matrix
//! product; attention is computed per sequence with a causal mask.

use serde::{Deserialize, Serialize};

use super::params::{Model, TensorId};
use super::real::{gemm, Real};
use crate::error::{Error, Result};
use crate::intervention::InterventionSet;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Which rows of the output get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    /// Only the final position of each sequence.
    Last,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub xhat1: Vec<F>,
    pub rstd1: Vec<F>,
    pub a: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// Attention probabilities, per sequence then per head, `T x T` each.
    pub probs: Vec<F>,
    /// Attention result vectors after any head scaling (`rows x d_model`).
    pub r: Vec<F>,
    pub scales: Vec<F>,
    pub attn: Vec<F>,
    pub xhat2: Vec<F>,
    pub rstd2: Vec<F>,
    pub m: Vec<F>,
    pub hpre: Vec<F>,
    pub hact: Vec<F>,
    pub mlp: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache<F> {
    pub tokens: Vec<u32>,
    /// `(row offset, length, probs offset)` per sequence.
    pub segs: Vec<(usize, usize, usize)>,
    pub rows: usize,
    pub embed: Vec<F>,
    pub layers: Vec<LayerCache<F>>,
    pub x_final: Vec<F>,
    pub xhatf: Vec<F>,
    pub rstdf: Vec<F>,
    pub f: Vec<F>,
    pub logit_rows: LogitRows,
    pub logits: Vec<F>,
}

/// Per-head attention results and per-component residual writes captured at
/// one position of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub position: usize,
    /// `heads[layer][head]` is the head's result vector `r^h` (length d_head)
    /// as it enters the output projection.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Token plus position embedding.
    pub embed: Vec<f64>,
    /// Attention sublayer output per layer (includes output bias).
    pub attn_out: Vec<Vec<f64>>,
    /// MLP sublayer output per layer.
    pub mlp_out: Vec<Vec<f64>>,
    /// Residual stream before the final normalization.
    pub final_resid: Vec<f64>,
}

/// Result of a single-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `len x vocab` logits, row-major.
    pub logits: Vec<F>,
    pub trace: Option<ResidualTrace>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm<F: Real>(
    x: &[F],
    rows: usize,
    d: usize,
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = F::of(rs);
        for j in 0..d {
            let xh = F::of((row[j].f64() - mean) * rs);
            xhat[r * d + j] = xh;
            out[r * d + j] = gain[j] * xh + bias[j];
        }
    }
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let x = x.f64();
    F::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let x = x.f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    F::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

fn add_bias<F: Real>(out: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in out.chunks_mut(n) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += *b);
    }
}

impl<F: Real> Model<F> {
    fn check_tokens(&self, seqs: &[&[u32]]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if s.len() > self.cfg.max_context {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_context {}",
                    s.len(),
                    self.cfg.max_context
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {t} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn forward_cached(
        &self,
        seqs: &[&[u32]],
        interventions: Option<&InterventionSet>,
        logit_rows: LogitRows,
    ) -> Result<Cache<F>> {
        self.check_tokens(seqs)?;
        if let Some(iv) = interventions {
            iv.validate(&self.cfg)?;
        }
        let cfg = self.cfg;
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dh = cfg.d_head();
        let dm = cfg.d_mlp();
        let vocab = cfg.vocab_size;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut segs = Vec::with_capacity(seqs.len());
        let (mut row, mut poff) = (0, 0);
        for s in seqs {
            segs.push((row, s.len(), poff));
            row += s.len();
            poff += nh * s.len() * s.len();
        }
        let rows = row;
        let probs_len = poff;
        let tokens: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();

        let mut x = vec![F::zero(); rows * d];
        {
            let te = self.get(TensorId::TokEmbed);
            let pe = self.get(TensorId::PosEmbed);
            for &(start, len, _) in &segs {
                for p in 0..len {
                    let t = tokens[start + p] as usize;
                    let dst = &mut x[(start + p) * d..(start + p + 1) * d];
                    for j in 0..d {
                        dst[j] = te[t * d + j] + pe[p * d + j];
                    }
                }
            }
        }
        let embed = x.clone();

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let x_in = x;
            let mut a = vec![F::zero(); rows * d];
            let mut xhat1 = vec![F::zero(); rows * d];
            let mut rstd1 = vec![F::zero(); rows];
            layer_norm(
                &x_in,
                rows,
                d,
                self.get(TensorId::Ln1Gain(l)),
                self.get(TensorId::Ln1Bias(l)),
                &mut a,
                &mut xhat1,
                &mut rstd1,
            );

            let proj = |w: TensorId, b: TensorId| {
                let mut out = vec![F::zero(); rows * d];
                gemm(false, false, rows, d, d, F::one(), &a, self.get(w), F::zero(), &mut out);
                add_bias(&mut out, self.get(b));
                out
            };
            let q = proj(TensorId::Wq(l), TensorId::Bq(l));
            let k = proj(TensorId::Wk(l), TensorId::Bk(l));
            let v = proj(TensorId::Wv(l), TensorId::Bv(l));

            let scales: Vec<F> = (0..nh)
                .map(|h| {
                    interventions
                        .and_then(|iv| iv.alpha(l, h))
                        .map(F::of)
                        .unwrap_or_else(F::one)
                })
                .collect();

            let mut probs = vec![F::zero(); probs_len];
            let mut r = vec![F::zero(); rows * d];
            let mut scores = Vec::new();
            for &(start, len, poff) in &segs {
                for h in 0..nh {
                    let pblock = &mut probs[poff + h * len * len..poff + (h + 1) * len * len];
                    for i in 0..len {
                        let qi = &q[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                        scores.clear();
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..=i {
                            let kj = &k[(start + j) * d + h * dh..(start + j) * d + (h + 1) * dh];
                            let s = qi
                                .iter()
                                .zip(kj)
                                .map(|(a, b)| a.f64() * b.f64())
                                .sum::<f64>()
                                * scale.f64();
                            max = max.max(s);
                            scores.push(s);
                        }
                        let mut total = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            total += *s;
                        }
                        let prow = &mut pblock[i * len..(i + 1) * len];
                        for (j, s) in scores.iter().enumerate() {
                            prow[j] = F::of(s / total);
                        }
                        let ri = (start + i) * d + h * dh;
                        for c in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..=i {
                                acc += prow[j].f64() * v[(start + j) * d + h * dh + c].f64();
                            }
                            r[ri + c] = F::of(acc);
                        }
                        if scales[h] != F::one() {
                            for c in 0..dh {
                                r[ri + c] *= scales[h];
                            }
                        }
                    }
                }
            }

            let mut attn = vec![F::zero(); rows * d];
            gemm(false, false, rows, d, d, F::one(), &r, self.get(TensorId::Wo(l)), F::zero(), &mut attn);
            add_bias(&mut attn, self.get(TensorId::Bo(l)));
            let x_mid: Vec<F> = x_in.iter().zip(&attn).map(|(a, b)| *a + *b).collect();

            let mut m = vec![F::zero(); rows * d];
            let mut xhat2 = vec![F::zero(); rows * d];
            let mut rstd2 = vec![F::zero(); rows];
            layer_norm(
                &x_mid,
                rows,
                d,
                self.get(TensorId::Ln2Gain(l)),
                self.get(TensorId::Ln2Bias(l)),
                &mut m,
                &mut xhat2,
                &mut rstd2,
            );
            let mut hpre = vec![F::zero(); rows * dm];
            gemm(false, false, rows, dm, d, F::one(), &m, self.get(TensorId::MlpIn(l)), F::zero(), &mut hpre);
            add_bias(&mut hpre, self.get(TensorId::MlpInBias(l)));
            let hact: Vec<F> = hpre.iter().map(|&z| gelu(z)).collect();
            let mut mlp = vec![F::zero(); rows * d];
            gemm(false, false, rows, d, dm, F::one(), &hact, self.get(TensorId::MlpOut(l)), F::zero(), &mut mlp);
            add_bias(&mut mlp, self.get(TensorId::MlpOutBias(l)));
            x = x_mid.iter().zip(&mlp).map(|(a, b)| *a + *b).collect();

            layers.push(LayerCache {
                xhat1,
                rstd1,
                a,
                q,
                k,
                v,
                probs,
                r,
                scales,
                attn,
                xhat2,
                rstd2,
                m,
                hpre,
                hact,
                mlp,
            });
        }

        let x_final = x;
        let mut f = vec![F::zero(); rows * d];
        let mut xhatf = vec![F::zero(); rows * d];
        let mut rstdf = vec![F::zero(); rows];
        layer_norm(
            &x_final,
            rows,
            d,
            self.get(TensorId::LnfGain),
            self.get(TensorId::LnfBias),
            &mut f,
            &mut xhatf,
            &mut rstdf,
        );
        let unembed = self.get(TensorId::Unembed);
        let logits = match logit_rows {
            LogitRows::All => {
                let mut out = vec![F::zero(); rows * vocab];
                gemm(false, false, rows, vocab, d, F::one(), &f, unembed, F::zero(), &mut out);
                out
            }
            LogitRows::Last => {
                let last: Vec<F> = segs
                    .iter()
                    .flat_map(|&(start, len, _)| f[(start + len - 1) * d..(start + len) * d].iter().copied())
                    .collect();
                let mut out = vec![F::zero(); segs.len() * vocab];
                gemm(false, false, segs.len(), vocab, d, F::one(), &last, unembed, F::zero(), &mut out);
                out
            }
        };

        Ok(Cache {
            tokens,
            segs,
            rows,
            embed,
            layers,
            x_final,
            xhatf,
            rstdf,
            f,
            logit_rows,
            logits,
        })
    }

    /// Run one sequence. Captures a trace at `capture_at` when given.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture_at: Option<usize>,
        interventions: Option<&InterventionSet>,
    ) -> Result<ForwardOutput<F>> {
        if let Some(p) = capture_at {
            if p >= tokens.len() {
                return Err(Error::Input(format!(
                    "capture position {p} outside a sequence of {}",
                    tokens.len()
                )));
            }
        }
        let cache = self.forward_cached(&[tokens], interventions, LogitRows::All)?;
        let trace = capture_at.map(|p| cache.trace(0, p, self.cfg.n_heads));
        Ok(ForwardOutput {
            logits: cache.logits,
            trace,
        })
    }

    /// Logits at the final position only, plus an optional trace there.
    pub fn forward_last(
        &self,
        tokens: &[u32],
        capture: bool,
        interventions: Option<&InterventionSet>,
    ) -> Result<ForwardOutput<F>> {
        let cache = self.forward_cached(&[tokens], interventions, LogitRows::Last)?;
        let trace = capture.then(|| cache.trace(0, tokens.len() - 1, self.cfg.n_heads));
        Ok(ForwardOutput {
            logits: cache.logits,
            trace,
        })
    }
}

impl<F: Real> Cache<F> {
    pub(crate) fn trace(&self, seq: usize, position: usize, n_heads: usize) -> ResidualTrace {
        let (start, _, _) = self.segs[seq];
        let row = start + position;
        let d = self.embed.len() / self.rows;
        let dh = d / n_heads;
        let pick = |buf: &[F]| -> Vec<f64> { buf[row * d..(row + 1) * d].iter().map(|x| x.f64()).collect() };
        ResidualTrace {
            position,
            heads: self
                .layers
                .iter()
                .map(|lc| {
                    (0..n_heads)
                        .map(|h| {
                            lc.r[row * d + h * dh..row * d + (h + 1) * dh]
                                .iter()
                                .map(|x| x.f64())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            embed: pick(&self.embed),
            attn_out: self.layers.iter().map(|lc| pick(&lc.attn)).collect(),
            mlp_out: self.layers.iter().map(|lc| pick(&lc.mlp)).collect(),
            final_resid: pick(&self.x_final),
        }
    }
}
