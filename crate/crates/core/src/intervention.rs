// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq::BinAssignment;
use crate::harness::{
    aggregate_by_bin, class_proportions, run_behavior_suite, AnswerClass, BehaviorRecord, BinSummary,
    PromptInstance,
};
use crate::model::{Checkpoint, ModelConfig};
use crate::stats::ls_slope;
use crate::vocab::Vocabulary;

/// Scale one head's attention result vector by `alpha` before the output
/// projection, in every forward pass it is active for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub head: usize,
    pub alpha: f64,
}

/// A set of head interventions, at most one per head.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSet {
    specs: Vec<InterventionSpec>,
}

impl InterventionSet {
    pub fn new(specs: impl IntoIterator<Item = InterventionSpec>) -> Result<Self> {
        let mut set = InterventionSet::default();
        for s in specs {
            set.push(s)?;
        }
        Ok(set)
    }

    pub fn single(spec: InterventionSpec) -> Self {
        InterventionSet { specs: vec![spec] }
    }

    pub fn push(&mut self, spec: InterventionSpec) -> Result<()> {
        if self
            .specs
            .iter()
            .any(|s| s.layer == spec.layer && s.head == spec.head)
        {
            return Err(Error::Composition(format!(
                "head {}.{} already has an intervention",
                spec.layer, spec.head
            )));
        }
        if !spec.alpha.is_finite() {
            return Err(Error::Composition(format!("alpha {} is not finite", spec.alpha)));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[InterventionSpec] {
        &self.specs
    }

    pub fn alpha(&self, layer: usize, head: usize) -> Option<f64> {
        self.specs
            .iter()
            .find(|s| s.layer == layer && s.head == head)
            .map(|s| s.alpha)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for s in &self.specs {
            if s.layer >= cfg.n_layers || s.head >= cfg.n_heads {
                return Err(Error::Index(format!(
                    "head {}.{} outside a {} x {} model",
                    s.layer, s.head, cfg.n_layers, cfg.n_heads
                )));
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        if self.specs.is_empty() {
            return "none".into();
        }
        self.specs
            .iter()
            .map(|s| format!("{}.{}x{}", s.layer, s.head, s.alpha))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Default sweep grid: -2.0 to 3.0 in steps of 0.1.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=50).map(|i| (i as f64 - 20.0) / 10.0).collect()
}

/// What an alpha sweep tries to achieve with its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDirection {
    /// Memory head scaled at or below 1; flips memorized answers to in-context.
    MemoryDown,
    /// Memory head scaled at or above 1; flips in-context answers to memorized.
    MemoryUp,
    /// Context head scaled at or above 1; flips memorized answers to in-context.
    ContextUp,
    /// Context head scaled at or below 1; flips in-context answers to memorized.
    ContextDown,
}

impl SweepDirection {
    pub const ALL: [SweepDirection; 4] = [
        SweepDirection::MemoryDown,
        SweepDirection::MemoryUp,
        SweepDirection::ContextUp,
        SweepDirection::ContextDown,
    ];

    /// `(from, to)` classes whose flips the criterion counts.
    pub fn flip(self) -> (AnswerClass, AnswerClass) {
        match self {
            SweepDirection::MemoryDown | SweepDirection::ContextUp => (AnswerClass::Memorized, AnswerClass::InContext),
            SweepDirection::MemoryUp | SweepDirection::ContextDown => (AnswerClass::InContext, AnswerClass::Memorized),
        }
    }

    pub fn admits(self, alpha: f64) -> bool {
        match self {
            SweepDirection::MemoryDown | SweepDirection::ContextDown => alpha <= 1.0,
            SweepDirection::MemoryUp | SweepDirection::ContextUp => alpha >= 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepDirection::MemoryDown => "memory_down",
            SweepDirection::MemoryUp => "memory_up",
            SweepDirection::ContextUp => "context_up",
            SweepDirection::ContextDown => "context_down",
        }
    }
}

/// `flips[from][to]`: prompts moving from the baseline class to the
/// intervened class, indexed by [`AnswerClass::index`].
pub type FlipMatrix = [[usize; 3]; 3];

fn check_alignment(prompts: &[PromptInstance], baseline: &[BehaviorRecord]) -> Result<()> {
    if prompts.len() != baseline.len()
        || prompts.iter().zip(baseline).any(|(p, r)| p.id != r.prompt_id || p.family != r.family)
    {
        return Err(Error::Input(
            "baseline records do not match the prompt set".into(),
        ));
    }
    Ok(())
}

pub fn flip_matrix(baseline: &[BehaviorRecord], intervened: &[BehaviorRecord]) -> FlipMatrix {
    let mut m = [[0; 3]; 3];
    for (b, i) in baseline.iter().zip(intervened) {
        m[b.class.index()][i.class.index()] += 1;
    }
    m
}

/// Fraction of `from` prompts that became `to`; 0 when there are none.
pub fn flip_rate(m: &FlipMatrix, from: AnswerClass, to: AnswerClass) -> f64 {
    let row = m[from.index()];
    let n: usize = row.iter().sum();
    if n == 0 {
        0.0
    } else {
        row[to.index()] as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    /// `[in_context, memorized, other]`.
    pub proportions: [f64; 3],
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub layer: usize,
    pub head: usize,
    pub direction: SweepDirection,
    pub points: Vec<SweepPoint>,
    pub best_alpha: f64,
}

impl SweepCurve {
    pub fn point(&self, alpha: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.alpha == alpha)
    }

    /// Whether `class`'s proportion never rises while alpha moves from 1
    /// to the chosen alpha along the grid.
    pub fn nonincreasing_toward_best(&self, class: AnswerClass) -> bool {
        let (lo, hi) = if self.best_alpha < 1.0 { (self.best_alpha, 1.0) } else { (1.0, self.best_alpha) };
        let mut path: Vec<&SweepPoint> = self.points.iter().filter(|p| p.alpha >= lo && p.alpha <= hi).collect();
        path.sort_by(|a, b| (a.alpha - 1.0).abs().total_cmp(&(b.alpha - 1.0).abs()));
        path.windows(2)
            .all(|w| w[1].proportions[class.index()] <= w[0].proportions[class.index()])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# schema: {SWEEP_SCHEMA} head={}.{} direction={} best_alpha={}\nalpha\tin_context\tmemorized\tother\tcriterion\n",
            self.layer,
            self.head,
            self.direction.as_str(),
            self.best_alpha
        );
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:.2}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                p.alpha, p.proportions[0], p.proportions[1], p.proportions[2], p.criterion
            );
        }
        s
    }
}

pub const SWEEP_SCHEMA: &str = "factlab.sweep/1";
pub const MEASURE_SCHEMA: &str = "factlab.intervention/1";

/// Behavior of the tuning set at one alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub alpha: f64,
    pub proportions: [f64; 3],
    pub flips: FlipMatrix,
}

/// Decode the tuning prompts at every alpha of `grid` on one head.
#[allow(clippy::too_many_arguments)]
pub fn sweep_runs(
    model: &Checkpoint,
    vocab: &Vocabulary,
    (layer, head): (usize, usize),
    grid: &[f64],
    prompts: &[PromptInstance],
    baseline: &[BehaviorRecord],
    max_new: usize,
) -> Result<Vec<SweepRun>> {
    if !grid.contains(&1.0) {
        return Err(Error::Config("alpha grid must contain 1.0".into()));
    }
    check_alignment(prompts, baseline)?;
    let mut runs = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let set = InterventionSet::new([InterventionSpec { layer, head, alpha }])?;
        set.validate(model.config())?;
        let records = run_behavior_suite(model, vocab, prompts, max_new, Some(&set));
        runs.push(SweepRun {
            alpha,
            proportions: class_proportions(&records),
            flips: flip_matrix(baseline, &records),
        });
    }
    Ok(runs)
}

impl SweepCurve {
    /// Score `runs` for `direction` and pick the alpha that maximizes its
    /// flip rate. Ties go to the alpha closest to 1, then the smaller alpha.
    pub fn from_runs(layer: usize, head: usize, direction: SweepDirection, runs: &[SweepRun]) -> Self {
        let (from, to) = direction.flip();
        let points: Vec<SweepPoint> = runs
            .iter()
            .map(|r| SweepPoint {
                alpha: r.alpha,
                proportions: r.proportions,
                criterion: flip_rate(&r.flips, from, to),
            })
            .collect();
        let best_alpha = points
            .iter()
            .filter(|p| direction.admits(p.alpha))
            .min_by(|a, b| {
                b.criterion
                    .total_cmp(&a.criterion)
                    .then((a.alpha - 1.0).abs().total_cmp(&(b.alpha - 1.0).abs()))
                    .then(a.alpha.total_cmp(&b.alpha))
            })
            .map_or(1.0, |p| p.alpha);
        SweepCurve {
            layer,
            head,
            direction,
            points,
            best_alpha,
        }
    }
}

/// [`sweep_runs`] scored for a single direction.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    model: &Checkpoint,
    vocab: &Vocabulary,
    head: (usize, usize),
    direction: SweepDirection,
    grid: &[f64],
    prompts: &[PromptInstance],
    baseline: &[BehaviorRecord],
    max_new: usize,
) -> Result<SweepCurve> {
    let runs = sweep_runs(model, vocab, head, grid, prompts, baseline, max_new)?;
    Ok(SweepCurve::from_runs(head.0, head.1, direction, &runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub intervention: String,
    pub baseline: [f64; 3],
    pub intervened: [f64; 3],
    /// `intervened - baseline` per class.
    pub deltas: [f64; 3],
    pub flips: FlipMatrix,
    #[serde(skip)]
    pub records: Vec<BehaviorRecord>,
}

impl Measurement {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# schema: {MEASURE_SCHEMA} intervention={}\nclass\tbaseline\tintervened\tdelta\n",
            self.intervention
        );
        for c in AnswerClass::ALL {
            let i = c.index();
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:+.6}",
                c.as_str(),
                self.baseline[i],
                self.intervened[i],
                self.deltas[i]
            );
        }
        s.push_str("flip_from\\to\tin_context\tmemorized\tother\n");
        for c in AnswerClass::ALL {
            let r = self.flips[c.index()];
            let _ = writeln!(s, "{}\t{}\t{}\t{}", c.as_str(), r[0], r[1], r[2]);
        }
        s
    }
}

/// Decode `prompts` under `set` and compare with `baseline`.
pub fn apply_and_measure(
    model: &Checkpoint,
    vocab: &Vocabulary,
    set: &InterventionSet,
    prompts: &[PromptInstance],
    baseline: &[BehaviorRecord],
    max_new: usize,
) -> Result<Measurement> {
    check_alignment(prompts, baseline)?;
    set.validate(model.config())?;
    let records = run_behavior_suite(model, vocab, prompts, max_new, Some(set));
    let b = class_proportions(baseline);
    let i = class_proportions(&records);
    Ok(Measurement {
        intervention: set.describe(),
        baseline: b,
        intervened: i,
        deltas: [i[0] - b[0], i[1] - b[1], i[2] - b[2]],
        flips: flip_matrix(baseline, &records),
        records,
    })
}

/// Apply a head setting tuned on family 0 to prompts of another family.
pub fn generalization_test(
    model: &Checkpoint,
    vocab: &Vocabulary,
    set: &InterventionSet,
    prompts: &[PromptInstance],
    baseline: &[BehaviorRecord],
    max_new: usize,
) -> Result<Measurement> {
    if prompts.iter().any(|p| p.family == 0) {
        return Err(Error::Input(
            "generalization prompts must come from a family other than 0".into(),
        ));
    }
    apply_and_measure(model, vocab, set, prompts, baseline, max_new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEffect {
    pub baseline: BinSummary,
    pub intervened: BinSummary,
    /// Least-squares slope over bin index per class, `[in_context, memorized, other]`.
    pub baseline_slopes: [f64; 3],
    pub intervened_slopes: [f64; 3],
}

fn slopes(s: &BinSummary) -> [f64; 3] {
    let x: Vec<f64> = s.rows.iter().map(|r| r.bin as f64).collect();
    AnswerClass::ALL.map(|c| ls_slope(&x, &s.column(c)))
}

/// Per-bin curves before and after an intervention with their slopes.
pub fn frequency_effect_after_intervention(
    baseline: &[BehaviorRecord],
    intervened: &[BehaviorRecord],
    bins: &BinAssignment,
) -> Result<FrequencyEffect> {
    let b = aggregate_by_bin(baseline, bins)?;
    let i = aggregate_by_bin(intervened, bins)?;
    Ok(FrequencyEffect {
        baseline_slopes: slopes(&b),
        intervened_slopes: slopes(&i),
        baseline: b,
        intervened: i,
    })
}
