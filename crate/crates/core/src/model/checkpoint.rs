// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FLCKPT\0\0"
//! 8       4     format version (u32, currently 1)
//! 12      24    n_layers, n_heads, d_model, vocab_size, max_context,
//!               mlp_multiple (u32 each)
//! 36      8     parameter count (u64)
//! 44      4*N   parameters (f32), tensors in layout order, row-major
//! ```
//!
//! Layout order is: token embedding, position embedding, then per layer
//! ln1 gain/bias, W_q, b_q, W_k, b_k, W_v, b_v, W_o, b_o, ln2 gain/bias,
//! MLP in weight/bias, MLP out weight/bias; finally the last norm's
//! gain/bias and the unembedding.

use std::path::Path;

use super::config::ModelConfig;
use super::params::Model;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLCKPT\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 44;

/// Trained parameters in storage precision.
pub type Checkpoint = Model<f32>;

impl Model<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.cfg;
        for v in [c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_context, c.mlp_multiple] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(origin, detail);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let f: Vec<usize> = (0..6).map(|k| u32_at(12 + 4 * k) as usize).collect();
        let cfg = ModelConfig {
            n_layers: f[0],
            n_heads: f[1],
            d_model: f[2],
            vocab_size: f[3],
            max_context: f[4],
            mlp_multiple: f[5],
        };
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        let n = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
        let mut model = Model::<f32>::zeros(cfg)?;
        if n != model.data.len() {
            return Err(bad(format!(
                "parameter count {n} does not match config ({})",
                model.data.len()
            )));
        }
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(bad(format!(
                "expected {} bytes, found {}",
                HEADER_LEN + 4 * n,
                bytes.len()
            )));
        }
        for (x, chunk) in model.data.iter_mut().zip(bytes[HEADER_LEN..].chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        if !model.all_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
