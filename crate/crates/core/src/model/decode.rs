// SPDX-License-Identifier: MIT OR Apache-2.0

use super::params::Model;
use super::real::Real;
use crate::error::{Error, Result};
use crate::intervention::InterventionSet;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl<F: Real> Model<F> {
    /// Greedy continuation of `prompt`.
    ///
    /// Stops after `max_new` tokens, when `eot` is produced (not included in
    /// the output), or when the context window is full. Interventions apply to
    /// every forward pass.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        max_new: usize,
        eot: Option<u32>,
        interventions: Option<&InterventionSet>,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if prompt.len() > self.cfg.max_context {
            return Err(Error::Input(format!(
                "prompt of {} tokens exceeds max_context {}",
                prompt.len(),
                self.cfg.max_context
            )));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new && seq.len() <= self.cfg.max_context {
            let fwd = self.forward_last(&seq, false, interventions)?;
            let next = argmax(&fwd.logits) as u32;
            if Some(next) == eot {
                break;
            }
            out.push(next);
            if seq.len() == self.cfg.max_context {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }
}
