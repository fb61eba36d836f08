// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit attribution per attention head.
//!
//! A head's write into the residual stream is `r^h W_O^h`. Projecting it on
//! the unembedding columns of the memorized and in-context answers and
//! subtracting gives the head's logit difference. The final layer norm is not
//! applied, so the per-component differences add up exactly to the
//! difference read from the pre-normalization residual.

use std::fmt::Write as _;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::BinAssignment;
use crate::harness::{AnswerClass, BehaviorRecord, PromptInstance};
use crate::model::{Checkpoint, ResidualTrace, TensorId};
use crate::svg::{hex, Svg};

pub const ATTRIBUTION_SCHEMA: &str = "factlab.attribution/1";
pub const SELECTION_SCHEMA: &str = "factlab.heads/1";
pub const DEFAULT_BATCH_SIZE: usize = 5;

/// `W_U[:, a] - W_U[:, b]` as a d_model vector.
pub fn unembed_difference(model: &Checkpoint, a: u32, b: u32) -> Vec<f64> {
    let cfg = model.config();
    let wu = model.get(TensorId::Unembed);
    (0..cfg.d_model)
        .map(|j| wu[j * cfg.vocab_size + a as usize] as f64 - wu[j * cfg.vocab_size + b as usize] as f64)
        .collect()
}

fn check_head(model: &Checkpoint, layer: usize, head: usize) -> Result<()> {
    let cfg = model.config();
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::Index(format!(
            "head {layer}.{head} outside a {} x {} model",
            cfg.n_layers, cfg.n_heads
        )));
    }
    Ok(())
}

/// The head's residual write `r^h W_O^h` (without the shared output bias).
pub fn head_contribution(model: &Checkpoint, trace: &ResidualTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    check_head(model, layer, head)?;
    let d = model.config().d_model;
    let w = model.w_o_head(layer, head);
    let r = &trace.heads[layer][head];
    let mut out = vec![0.0; d];
    for (i, &ri) in r.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * d..(i + 1) * d]) {
            *o += ri * wij as f64;
        }
    }
    Ok(out)
}

/// Logit of `mem_token` minus logit of `ctx_token` contributed by one head.
pub fn head_logit_diff(
    model: &Checkpoint,
    trace: &ResidualTrace,
    layer: usize,
    head: usize,
    mem_token: u32,
    ctx_token: u32,
) -> Result<f64> {
    let contrib = head_contribution(model, trace, layer, head)?;
    let dir = unembed_difference(model, mem_token, ctx_token);
    Ok(contrib.iter().zip(&dir).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `grid[layer][head]`: mean logit difference (memorized minus in-context).
    pub grid: Vec<Vec<f64>>,
    /// Ids of the prompts averaged into the grid.
    pub prompt_ids: Vec<usize>,
    /// Prompts that could not be run, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl AttributionMap {
    pub fn n_layers(&self) -> usize {
        self.grid.len()
    }

    pub fn n_heads(&self) -> usize {
        self.grid.first().map_or(0, Vec::len)
    }

    pub fn n_entries(&self) -> usize {
        self.grid.iter().map(Vec::len).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.grid.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# schema: {ATTRIBUTION_SCHEMA} prompts={} skipped={}\nlayer",
            self.prompt_ids.len(),
            self.skipped.len()
        );
        for h in 0..self.n_heads() {
            let _ = write!(s, "\th{h}");
        }
        s.push('\n');
        for (l, row) in self.grid.iter().enumerate() {
            let _ = write!(s, "{l}");
            for v in row {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-head logit differences for one prompt at its final position.
pub fn prompt_grid(model: &Checkpoint, prompt: &PromptInstance) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    let out = model.forward_last(&prompt.tokens, true, None)?;
    let trace = out.trace.expect("trace requested");
    let dir = unembed_difference(model, prompt.memorized_token, prompt.in_context_token);
    let mut grid = vec![vec![0.0; cfg.n_heads]; cfg.n_layers];
    for (l, row) in grid.iter_mut().enumerate() {
        for (h, cell) in row.iter_mut().enumerate() {
            let c = head_contribution(model, &trace, l, h)?;
            *cell = c.iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(grid)
}

/// Mean per-head logit difference over `prompts`. Prompts whose forward pass
/// fails are skipped and listed.
pub fn attribution_map(model: &Checkpoint, prompts: &[PromptInstance]) -> Result<AttributionMap> {
    if prompts.is_empty() {
        return Err(Error::Input("attribution needs at least one prompt".into()));
    }
    let cfg = model.config();
    let mut sum = vec![vec![0.0; cfg.n_heads]; cfg.n_layers];
    let mut map = AttributionMap {
        grid: Vec::new(),
        prompt_ids: Vec::new(),
        skipped: Vec::new(),
    };
    for p in prompts {
        match prompt_grid(model, p) {
            Ok(g) => {
                for (s, row) in sum.iter_mut().zip(&g) {
                    s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                map.prompt_ids.push(p.id);
            }
            Err(e) => {
                log::warn!("attribution skipped prompt {}: {e}", p.id);
                map.skipped.push((p.id, e.to_string()));
            }
        }
    }
    let n = map.prompt_ids.len().max(1) as f64;
    map.grid = sum.into_iter().map(|row| row.into_iter().map(|v| v / n).collect()).collect();
    Ok(map)
}

/// One map per consecutive batch of `batch_size` prompts.
pub fn batched_maps(model: &Checkpoint, prompts: &[PromptInstance], batch_size: usize) -> Result<Vec<AttributionMap>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    prompts.chunks(batch_size).map(|b| attribution_map(model, b)).collect()
}

/// Prompts sampled per bin and class from un-intervened behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub in_context: Vec<usize>,
    pub memorized: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SelectionSet {
    /// In-context ids followed by memorized ids.
    pub fn all_ids(&self) -> Vec<usize> {
        self.in_context.iter().chain(&self.memorized).copied().collect()
    }
}

/// Draw up to `per_bin` in-context and `per_bin` memorized records from each
/// bin. Bins with fewer take everything and add a warning.
pub fn sample_selection_set(
    records: &[BehaviorRecord],
    bins: &BinAssignment,
    per_bin: usize,
    seed: u64,
) -> Result<SelectionSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SelectionSet {
        in_context: Vec::new(),
        memorized: Vec::new(),
        warnings: Vec::new(),
    };
    for class in [AnswerClass::InContext, AnswerClass::Memorized] {
        if !records.iter().any(|r| r.class == class) {
            return Err(Error::Selection(format!(
                "no {} records to sample from",
                class.as_str()
            )));
        }
        for b in 0..bins.n_bins {
            let pool: Vec<usize> = records
                .iter()
                .filter(|r| r.class == class && bins.bin_of(&r.item_key(bins.criterion)) == Some(b))
                .map(|r| r.prompt_id)
                .collect();
            if pool.len() < per_bin {
                set.warnings.push(format!(
                    "bin {b} has {} {} records, wanted {per_bin}",
                    pool.len(),
                    class.as_str()
                ));
            }
            let mut picked: Vec<usize> = pool.sample(&mut rng, per_bin).copied().collect();
            picked.sort_unstable();
            match class {
                AnswerClass::InContext => set.in_context.extend(picked),
                _ => set.memorized.extend(picked),
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// Head with the largest positive mean score, if any is positive.
    pub memory_head: Option<(usize, usize)>,
    /// Head with the most negative mean score, if any is negative.
    pub context_head: Option<(usize, usize)>,
    /// All heads, highest score first; ties by (layer, head).
    pub ranked: Vec<HeadScore>,
    pub n_maps: usize,
}

/// Rank heads by their mean score across `maps`.
pub fn select_heads(maps: &[AttributionMap]) -> Result<HeadSelection> {
    if maps.len() < 2 {
        return Err(Error::Selection(format!("need at least 2 maps, got {}", maps.len())));
    }
    let (nl, nh) = (maps[0].n_layers(), maps[0].n_heads());
    if maps.iter().any(|m| m.n_layers() != nl || m.n_heads() != nh) {
        return Err(Error::Selection("maps have different shapes".into()));
    }
    let mut ranked = Vec::with_capacity(nl * nh);
    for l in 0..nl {
        for h in 0..nh {
            let score = maps.iter().map(|m| m.grid[l][h]).sum::<f64>() / maps.len() as f64;
            ranked.push(HeadScore { layer: l, head: h, score });
        }
    }
    if ranked.iter().all(|s| s.score == 0.0) {
        return Err(Error::Degenerate("every head scores zero".into()));
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    let memory_head = ranked.first().filter(|s| s.score > 0.0).map(|s| (s.layer, s.head));
    let context_head = ranked
        .iter()
        .filter(|s| s.score < 0.0)
        .min_by(|a, b| a.score.total_cmp(&b.score).then((a.layer, a.head).cmp(&(b.layer, b.head))))
        .map(|s| (s.layer, s.head));
    Ok(HeadSelection {
        memory_head,
        context_head,
        ranked,
        n_maps: maps.len(),
    })
}

const NEUTRAL: (f64, f64, f64) = (247.0, 247.0, 247.0);
const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);

/// Diverging color for `v` on `[-range, range]`: blue below zero, red above.
pub fn diverging_color(v: f64, range: f64) -> (u8, u8, u8) {
    let t = if range > 0.0 { (v / range).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { BLUE } else { RED };
    let a = t.abs();
    let mix = |n: f64, e: f64| (n + (e - n) * a).round() as u8;
    (mix(NEUTRAL.0, end.0), mix(NEUTRAL.1, end.1), mix(NEUTRAL.2, end.2))
}

/// Heatmap of a map, layers top to bottom and heads left to right.
/// `fixed_range` pins the color scale, otherwise it spans the largest
/// magnitude in the map.
pub fn emit_heatmap(map: &AttributionMap, title: &str, fixed_range: Option<f64>) -> String {
    let range = fixed_range.unwrap_or_else(|| map.max_abs());
    let cell = 36.0;
    let (left, top) = (60.0, 50.0);
    let (nl, nh) = (map.n_layers(), map.n_heads());
    let w = left + cell * nh as f64 + 110.0;
    let h = top + cell * nl as f64 + 40.0;
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0, 24.0, 14.0, "middle", title);
    svg.comment(&format!("range {range:.6}"));
    for (l, row) in map.grid.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        svg.comment(&format!("layer {l}: {}", vals.join(",")));
        svg.text(left - 8.0, top + cell * (l as f64 + 0.6), 10.0, "end", &format!("L{l}"));
        for (hd, &v) in row.iter().enumerate() {
            svg.rect(left + cell * hd as f64, top + cell * l as f64, cell - 1.0, cell - 1.0, &hex(diverging_color(v, range)));
        }
    }
    for hd in 0..nh {
        svg.text(left + cell * (hd as f64 + 0.5), top + cell * nl as f64 + 14.0, 10.0, "middle", &format!("H{hd}"));
    }
    let lx = left + cell * nh as f64 + 20.0;
    for k in 0..=10 {
        let v = range * (1.0 - k as f64 / 5.0);
        svg.rect(lx, top + 10.0 * k as f64, 14.0, 10.0, &hex(diverging_color(v, range)));
    }
    svg.text(lx + 18.0, top + 8.0, 9.0, "start", &format!("{range:.2} memorized"));
    svg.text(lx + 18.0, top + 108.0, 9.0, "start", &format!("{:.2} in-context", -range));
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn model() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 3,
            d_model: 12,
            vocab_size: 20,
            max_context: 16,
            mlp_multiple: 2,
        };
        let mut m = Model::<f32>::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in m.data_mut() {
            *x = rng.random_range(-0.4..0.4);
        }
        m
    }

    fn prompt(id: usize, tokens: Vec<u32>, mem: u32, ctx: u32) -> PromptInstance {
        PromptInstance {
            id,
            family: 0,
            country: String::new(),
            in_context_city: String::new(),
            memorized_city: String::new(),
            text: String::new(),
            tokens,
            in_context_token: ctx,
            memorized_token: mem,
        }
    }

    #[test]
    fn components_sum_to_pre_norm_logit_difference() {
        let m = model();
        let cfg = *m.config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let len = rng.random_range(2..16);
            let toks: Vec<u32> = (0..len).map(|_| rng.random_range(0..20)).collect();
            let (mem, ctx) = (rng.random_range(0..20), rng.random_range(0..20));
            let trace = m.forward_last(&toks, true, None).unwrap().trace.unwrap();
            let dir = unembed_difference(&m, mem, ctx);
            let dot = |v: &[f64]| v.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            let mut total = dot(&trace.embed);
            for l in 0..cfg.n_layers {
                for h in 0..cfg.n_heads {
                    total += head_logit_diff(&m, &trace, l, h, mem, ctx).unwrap();
                }
                let bo: Vec<f64> = m.get(TensorId::Bo(l)).iter().map(|&x| x as f64).collect();
                total += dot(&bo);
                total += dot(&trace.mlp_out[l]);
            }
            let direct = dot(&trace.final_resid);
            assert!(
                (total - direct).abs() <= 1e-4 * direct.abs().max(1e-3),
                "{total} vs {direct}"
            );
        }
    }

    #[test]
    fn trivial_and_symmetry_properties() {
        let m = model();
        let mut trace = m.forward_last(&[1, 2, 3], true, None).unwrap().trace.unwrap();
        assert_eq!(head_logit_diff(&m, &trace, 1, 2, 4, 4).unwrap(), 0.0);
        let a = head_logit_diff(&m, &trace, 1, 2, 4, 9).unwrap();
        let b = head_logit_diff(&m, &trace, 1, 2, 9, 4).unwrap();
        assert!((a + b).abs() < 1e-12);
        for v in trace.heads[1][2].iter_mut() {
            *v *= -1.5;
        }
        let scaled = head_logit_diff(&m, &trace, 1, 2, 4, 9).unwrap();
        assert!((scaled + 1.5 * a).abs() < 1e-9 * a.abs().max(1.0));
        for v in trace.heads[0][0].iter_mut() {
            *v = 0.0;
        }
        assert_eq!(head_logit_diff(&m, &trace, 0, 0, 4, 9).unwrap(), 0.0);
        assert!(matches!(head_logit_diff(&m, &trace, 2, 0, 4, 9), Err(Error::Index(_))));
    }

    #[test]
    fn batch_map_is_mean_of_single_maps() {
        let m = model();
        let prompts: Vec<PromptInstance> = (0..5)
            .map(|i| prompt(i, vec![1, 2 + i as u32, 7, 3], 5, 6 + i as u32))
            .collect();
        let single = attribution_map(&m, &prompts[..1]).unwrap();
        let trace = m.forward_last(&prompts[0].tokens, true, None).unwrap().trace.unwrap();
        assert_eq!(
            single.grid[1][0],
            head_logit_diff(&m, &trace, 1, 0, 5, 6).unwrap()
        );
        let all = attribution_map(&m, &prompts).unwrap();
        for l in 0..2 {
            for h in 0..3 {
                let mean: f64 = prompts
                    .iter()
                    .map(|p| attribution_map(&m, std::slice::from_ref(p)).unwrap().grid[l][h])
                    .sum::<f64>()
                    / 5.0;
                assert!((all.grid[l][h] - mean).abs() < 1e-12);
            }
        }
        let bad = vec![prompts[0].clone(), prompt(9, vec![99], 1, 2)];
        let map = attribution_map(&m, &bad).unwrap();
        assert_eq!(map.skipped.len(), 1);
        assert_eq!(map.prompt_ids, vec![0]);
    }

    fn grid_map(grid: Vec<Vec<f64>>) -> AttributionMap {
        AttributionMap {
            grid,
            prompt_ids: vec![],
            skipped: vec![],
        }
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let one_hot = grid_map(vec![vec![0.0, 0.0], vec![0.0, 2.0]]);
        let zero = grid_map(vec![vec![0.0; 2]; 2]);
        let sel = select_heads(&[one_hot, zero.clone()]).unwrap();
        assert_eq!(sel.memory_head, Some((1, 1)));
        assert_eq!(sel.context_head, None);
        assert!(matches!(select_heads(&[zero.clone(), zero.clone()]), Err(Error::Degenerate(_))));
        assert!(matches!(select_heads(&[zero]), Err(Error::Selection(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<AttributionMap> = (0..6)
            .map(|_| grid_map((0..3).map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()))
            .collect();
        let sel = select_heads(&maps).unwrap();
        let mut oracle: Vec<(f64, usize, usize)> = Vec::new();
        for l in 0..3 {
            for h in 0..4 {
                oracle.push((maps.iter().map(|m| m.grid[l][h]).sum::<f64>() / 6.0, l, h));
            }
        }
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let got: Vec<(usize, usize)> = sel.ranked.iter().map(|s| (s.layer, s.head)).collect();
        let want: Vec<(usize, usize)> = oracle.iter().map(|o| (o.1, o.2)).collect();
        assert_eq!(got, want);
        assert_eq!(sel.memory_head, Some(want[0]));
        assert_eq!(sel.context_head, Some(*want.last().unwrap()));
    }

    #[test]
    fn color_scale_matches_reference_mapping() {
        // Linear blend from (247,247,247) toward blue (33,102,172) or red (178,24,43).
        let cases = [
            (0.0, (247, 247, 247)),
            (10.0, (178, 24, 43)),
            (-10.0, (33, 102, 172)),
            (5.0, (213, 136, 145)),
            (-5.0, (140, 175, 210)),
            (25.0, (178, 24, 43)),
            (-2.5, (194, 211, 228)),
            (2.5, (230, 191, 196)),
            (1.0, (240, 225, 227)),
            (-7.5, (87, 138, 191)),
        ];
        for (v, want) in cases {
            assert_eq!(diverging_color(v, 10.0), want, "value {v}");
        }
    }

    #[test]
    fn heatmap_is_deterministic_and_neutral_for_zero() {
        let zero = grid_map(vec![vec![0.0; 3]; 2]);
        let svg = emit_heatmap(&zero, "zero", None);
        // every cell and legend swatch is neutral when the map is all zeros
        assert_eq!(svg.matches("fill=\"#").count(), svg.matches("fill=\"#f7f7f7\"").count());
        assert_eq!(svg.matches("fill=\"#f7f7f7\"").count(), 6 + 11);
        let m = grid_map(vec![vec![1.0, -3.0], vec![0.5, 9.0]]);
        assert_eq!(emit_heatmap(&m, "x", Some(10.0)), emit_heatmap(&m, "x", Some(10.0)));
    }

    fn rec(id: usize, country: &str, class: AnswerClass) -> BehaviorRecord {
        BehaviorRecord {
            prompt_id: id,
            family: 0,
            country: country.into(),
            in_context_city: String::new(),
            memorized_city: String::new(),
            continuation: vec![],
            text: String::new(),
            class,
            both_present: false,
            intervention: None,
            diagnostic: None,
        }
    }

    #[test]
    fn selection_sampling() {
        use crate::freq::{percentile_bins, BinItem, Criterion};
        let items: Vec<BinItem> = (0..10)
            .map(|i| BinItem {
                key: format!("c{i}"),
                count: i,
            })
            .collect();
        let bins = percentile_bins(Criterion::Country, &items, 10).unwrap();
        let mut records = Vec::new();
        for i in 0..10 {
            for k in 0..30 {
                let class = if k % 2 == 0 { AnswerClass::InContext } else { AnswerClass::Memorized };
                records.push(rec(records.len(), &format!("c{i}"), class));
            }
        }
        let s = sample_selection_set(&records, &bins, 10, 7).unwrap();
        assert_eq!((s.in_context.len(), s.memorized.len()), (100, 100));
        assert!(s.warnings.is_empty());
        assert_eq!(s, sample_selection_set(&records, &bins, 10, 7).unwrap());
        for id in &s.in_context {
            assert_eq!(records[*id].class, AnswerClass::InContext);
        }

        let one = percentile_bins(Criterion::Country, &items, 1).unwrap();
        let s = sample_selection_set(&records, &one, 1, 0).unwrap();
        assert_eq!(s.all_ids().len(), 2);

        let only_mem: Vec<BehaviorRecord> = records.iter().filter(|r| r.class == AnswerClass::Memorized).cloned().collect();
        assert!(matches!(sample_selection_set(&only_mem, &bins, 10, 0), Err(Error::Selection(_))));
    }
}
