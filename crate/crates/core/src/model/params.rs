// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat parameter storage.
//!
//! Every tensor lives in one contiguous buffer at a fixed offset, so the
//! optimizer, gradient checks, and the checkpoint writer can treat the model
//! as a single vector while the forward pass addresses tensors by name.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::config::ModelConfig;
use super::real::Real;
use crate::error::Result;

/// Names of the parameter tensors. Layer-indexed variants carry the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorId {
    TokEmbed,
    PosEmbed,
    Ln1Gain(usize),
    Ln1Bias(usize),
    Wq(usize),
    Bq(usize),
    Wk(usize),
    Bk(usize),
    Wv(usize),
    Bv(usize),
    Wo(usize),
    Bo(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    MlpIn(usize),
    MlpInBias(usize),
    MlpOut(usize),
    MlpOutBias(usize),
    LnfGain,
    LnfBias,
    Unembed,
}

impl TensorId {
    pub fn name(self) -> String {
        use TensorId::*;
        match self {
            TokEmbed => "tok_embed".into(),
            PosEmbed => "pos_embed".into(),
            LnfGain => "lnf.gain".into(),
            LnfBias => "lnf.bias".into(),
            Unembed => "unembed".into(),
            Ln1Gain(l) => format!("layers.{l}.ln1.gain"),
            Ln1Bias(l) => format!("layers.{l}.ln1.bias"),
            Wq(l) => format!("layers.{l}.attn.w_q"),
            Bq(l) => format!("layers.{l}.attn.b_q"),
            Wk(l) => format!("layers.{l}.attn.w_k"),
            Bk(l) => format!("layers.{l}.attn.b_k"),
            Wv(l) => format!("layers.{l}.attn.w_v"),
            Bv(l) => format!("layers.{l}.attn.b_v"),
            Wo(l) => format!("layers.{l}.attn.w_o"),
            Bo(l) => format!("layers.{l}.attn.b_o"),
            Ln2Gain(l) => format!("layers.{l}.ln2.gain"),
            Ln2Bias(l) => format!("layers.{l}.ln2.bias"),
            MlpIn(l) => format!("layers.{l}.mlp.w_in"),
            MlpInBias(l) => format!("layers.{l}.mlp.b_in"),
            MlpOut(l) => format!("layers.{l}.mlp.w_out"),
            MlpOutBias(l) => format!("layers.{l}.mlp.b_out"),
        }
    }
}

/// Offsets and shapes of every tensor, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<(TensorId, usize, [usize; 2])>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use TensorId::*;
        let d = cfg.d_model;
        let h = cfg.d_mlp();
        let v = cfg.vocab_size;
        let mut shapes = vec![(TokEmbed, [v, d]), (PosEmbed, [cfg.max_context, d])];
        for l in 0..cfg.n_layers {
            shapes.extend([
                (Ln1Gain(l), [1, d]),
                (Ln1Bias(l), [1, d]),
                (Wq(l), [d, d]),
                (Bq(l), [1, d]),
                (Wk(l), [d, d]),
                (Bk(l), [1, d]),
                (Wv(l), [d, d]),
                (Bv(l), [1, d]),
                (Wo(l), [d, d]),
                (Bo(l), [1, d]),
                (Ln2Gain(l), [1, d]),
                (Ln2Bias(l), [1, d]),
                (MlpIn(l), [d, h]),
                (MlpInBias(l), [1, h]),
                (MlpOut(l), [h, d]),
                (MlpOutBias(l), [1, d]),
            ]);
        }
        shapes.extend([(LnfGain, [1, d]), (LnfBias, [1, d]), (Unembed, [d, v])]);
        let mut off = 0;
        let entries = shapes
            .into_iter()
            .map(|(id, shape)| {
                let e = (id, off, shape);
                off += shape[0] * shape[1];
                e
            })
            .collect();
        Layout {
            entries,
            total: off,
        }
    }
}

/// A model's configuration plus its flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub(crate) cfg: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<F>,
}

impl<F: Real> Model<F> {
    /// All-zero parameters (gains included).
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let data = vec![F::zero(); layout.total];
        Ok(Model { cfg, layout, data })
    }

    /// Random initialization: normal(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2 n_layers), unit norm gains, zero biases.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        use TensorId::*;
        let mut m = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 0.02;
        let resid = base / (2.0 * cfg.n_layers as f64).sqrt();
        let entries = m.layout.entries.clone();
        for (id, off, shape) in entries {
            let n = shape[0] * shape[1];
            let slot = &mut m.data[off..off + n];
            let std = match id {
                Ln1Gain(_) | Ln2Gain(_) | LnfGain => {
                    slot.iter_mut().for_each(|x| *x = F::one());
                    continue;
                }
                Ln1Bias(_) | Ln2Bias(_) | LnfBias | Bq(_) | Bk(_) | Bv(_) | Bo(_)
                | MlpInBias(_) | MlpOutBias(_) => continue,
                Wo(_) | MlpOut(_) => resid,
                _ => base,
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            slot.iter_mut().for_each(|x| *x = F::of(normal.sample(&mut rng)));
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub(crate) fn offset(&self, id: TensorId) -> (usize, usize) {
        use TensorId::*;
        let per_layer = 16;
        let idx = match id {
            TokEmbed => 0,
            PosEmbed => 1,
            LnfGain => 2 + per_layer * self.cfg.n_layers,
            LnfBias => 3 + per_layer * self.cfg.n_layers,
            Unembed => 4 + per_layer * self.cfg.n_layers,
            Ln1Gain(l) => 2 + per_layer * l,
            Ln1Bias(l) => 3 + per_layer * l,
            Wq(l) => 4 + per_layer * l,
            Bq(l) => 5 + per_layer * l,
            Wk(l) => 6 + per_layer * l,
            Bk(l) => 7 + per_layer * l,
            Wv(l) => 8 + per_layer * l,
            Bv(l) => 9 + per_layer * l,
            Wo(l) => 10 + per_layer * l,
            Bo(l) => 11 + per_layer * l,
            Ln2Gain(l) => 12 + per_layer * l,
            Ln2Bias(l) => 13 + per_layer * l,
            MlpIn(l) => 14 + per_layer * l,
            MlpInBias(l) => 15 + per_layer * l,
            MlpOut(l) => 16 + per_layer * l,
            MlpOutBias(l) => 17 + per_layer * l,
        };
        let (found, off, shape) = self.layout.entries[idx];
        debug_assert_eq!(found, id);
        (off, shape[0] * shape[1])
    }

    pub fn get(&self, id: TensorId) -> &[F] {
        let (off, n) = self.offset(id);
        &self.data[off..off + n]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut [F] {
        let (off, n) = self.offset(id);
        &mut self.data[off..off + n]
    }

    /// The `d_head x d_model` block of the attention output matrix for `head`.
    pub fn w_o_head(&self, layer: usize, head: usize) -> &[F] {
        let d = self.cfg.d_model;
        let dh = self.cfg.d_head();
        &self.get(TensorId::Wo(layer))[head * dh * d..(head + 1) * dh * d]
    }

    /// Same shape and config with every entry converted.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg,
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_context: 6,
            mlp_multiple: 4,
        }
    }

    #[test]
    fn offsets_agree_with_layout_table() {
        let m = Model::<f32>::zeros(cfg()).unwrap();
        let mut expect = 0;
        for &(id, off, shape) in &m.layout.entries {
            assert_eq!(off, expect);
            assert_eq!(m.offset(id), (off, shape[0] * shape[1]));
            expect += shape[0] * shape[1];
        }
        assert_eq!(expect, m.n_params());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(cfg(), 1).unwrap();
        let b = Model::<f32>::init(cfg(), 1).unwrap();
        let c = Model::<f32>::init(cfg(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get(TensorId::LnfGain).iter().all(|&x| x == 1.0));
        assert!(a.get(TensorId::Bo(1)).iter().all(|&x| x == 0.0));
    }
}
