// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each stage reads named upstream artifacts, writes a
//! fixed set of files, and records content hashes in the manifest so that
//! unchanged stages are skipped on rerun.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use factlab_core::attribution::{
    attribution_map, batched_maps, emit_heatmap, sample_selection_set, select_heads, HeadSelection, SelectionSet,
};
use factlab_core::corpus::{generate_documents, DocKind, DocumentSet, EntityIndex, WorldSpec};
use factlab_core::freq::{percentile_bins, BinAssignment, Criterion};
use factlab_core::harness::{
    aggregate_by_bin, build_prompt_set, class_counts, class_proportions, closed_book_recall, frequency_items,
    load_records, prefix_stats, run_behavior_suite, save_records, template_texts, AnswerClass, BehaviorRecord,
    PrefixStats, PromptInstance,
};
use factlab_core::intervention::{
    apply_and_measure, frequency_effect_after_intervention, generalization_test, sweep_runs, InterventionSet,
    InterventionSpec, Measurement, SweepCurve, SweepDirection,
};
use factlab_core::model::{train, Checkpoint};
use factlab_core::ovsvd::{
    cluster_report, decode_head, decoded_table, head_svd, orthonormality_error, ov_matrix, reconstruction_error,
    DecodeSide,
};
use factlab_core::stats::{ls_slope, spearman};
use factlab_core::vocab::Vocabulary;
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, CORPUS_SEED_OFFSET, SELECTION_SEED_OFFSET, TRAIN_SEED_OFFSET};
use crate::error::{CliError, Result};
use crate::manifest::{hash_file, sha256_hex, Manifest, StageRecord};

pub const WORLD: &str = "corpus/world.json";
pub const VOCAB: &str = "corpus/vocab.json";
pub const DOCS: &str = "corpus/docs.jsonl";
pub const CORPUS_SUMMARY: &str = "corpus/summary.tsv";

pub const EVAL_SCHEMA: &str = "factlab.eval/1";
pub const SELECTION_FILE_SCHEMA: &str = "factlab.selection/1";
pub const SWEEP_SUMMARY_SCHEMA: &str = "factlab.sweepsummary/1";
pub const INTERVENE_SCHEMA: &str = "factlab.intervenesummary/1";
pub const TRANSFER_SCHEMA: &str = "factlab.transfer/1";
pub const SVD_SUMMARY_SCHEMA: &str = "factlab.svdsummary/1";
pub const TRAIN_LOG_SCHEMA: &str = "factlab.trainlog/1";
pub const CORPUS_SUMMARY_SCHEMA: &str = "factlab.corpussummary/1";

/// Criteria binned for the behavior curves, all on relation family 0.
pub const BIN_CRITERIA: [Criterion; 4] = Criterion::ALL;

pub fn bins_path(c: Criterion) -> String {
    format!("bins/{}.tsv", c.as_str())
}

pub fn model_path(model: &str, file: &str) -> String {
    format!("models/{model}/{file}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

pub struct Workspace {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub force: bool,
    manifest: Manifest,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e)),
        None => Ok(()),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    schema: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct Untagged<T> {
    schema: String,
    #[serde(flatten)]
    body: T,
}

/// JSON object whose first key is `schema`.
pub fn write_json<T: Serialize>(path: &Path, schema: &str, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Tagged { schema, body }).expect("artifact serializes");
    write(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed: Untagged<T> = serde_json::from_str(&text).map_err(|e| factlab_core::Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })?;
    if parsed.schema != schema {
        return Err(factlab_core::Error::Format {
            path: path.into(),
            detail: format!("expected schema {schema}, found {}", parsed.schema),
        }
        .into());
    }
    Ok(parsed.body)
}

impl Workspace {
    pub fn open(config: PipelineConfig, dir: PathBuf, force: bool) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let manifest = Manifest::load(&dir)?;
        Ok(Workspace {
            dir,
            config,
            force,
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Path of an upstream artifact, or an error naming the stage that makes it.
    pub fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, stage })
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn stage(
        &mut self,
        key: &str,
        config: &impl Serialize,
        inputs: &[(String, &'static str)],
        outputs: &[String],
        run: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<StageOutcome> {
        let mut want = StageRecord {
            config: sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes()),
            ..StageRecord::default()
        };
        for (rel, producer) in inputs {
            let p = self.require(rel, producer)?;
            want.inputs.insert(rel.clone(), hash_file(&p)?);
        }
        if !self.force && self.manifest.is_fresh(&self.dir, key, &want) {
            info!("{key}: inputs unchanged, skipping");
            return Ok(StageOutcome::Skipped);
        }
        info!("{key}: running");
        let started = std::time::Instant::now();
        run(self)?;
        for rel in outputs {
            let p = self.path(rel);
            want.outputs.insert(rel.clone(), hash_file(&p)?);
        }
        info!("{key}: done in {:.1}s", started.elapsed().as_secs_f64());
        self.manifest.stages.insert(key.to_string(), want);
        self.manifest.save(&self.dir)?;
        Ok(StageOutcome::Ran)
    }

    fn load_world(&self) -> Result<WorldSpec> {
        Ok(WorldSpec::load(&self.require(WORLD, "gen-corpus")?)?)
    }

    fn load_vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::load(&self.require(VOCAB, "gen-corpus")?)?)
    }

    fn load_docs(&self) -> Result<DocumentSet> {
        Ok(DocumentSet::load(&self.require(DOCS, "gen-corpus")?)?)
    }

    fn load_bins(&self, c: Criterion) -> Result<BinAssignment> {
        let p = self.require(&bins_path(c), "freq-bins")?;
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(BinAssignment::from_tsv(&text)?)
    }

    fn load_model(&self, model: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::load(&self.require(&model_path(model, "model.ckpt"), "train")?)?)
    }

    fn load_records(&self, model: &str, file: &str, stage: &'static str) -> Result<Vec<BehaviorRecord>> {
        Ok(load_records(&self.require(&model_path(model, file), stage)?)?)
    }

    fn seed(&self, offset: u64) -> u64 {
        self.config.seed.wrapping_add(offset)
    }

    /// Model names in configuration order, or just `only` after checking it exists.
    pub fn model_names(&self, only: Option<&str>) -> Result<Vec<String>> {
        match only {
            Some(name) => Ok(vec![self.config.model(name)?.name.clone()]),
            None => Ok(self.config.models.iter().map(|m| m.name.clone()).collect()),
        }
    }
}

fn corpus_inputs() -> Vec<(String, &'static str)> {
    vec![
        (WORLD.into(), "gen-corpus"),
        (VOCAB.into(), "gen-corpus"),
        (DOCS.into(), "gen-corpus"),
    ]
}

pub fn gen_corpus(ws: &mut Workspace) -> Result<StageOutcome> {
    let cfg = (ws.config.seed, ws.config.world.clone(), ws.config.corpus.clone());
    let outputs = [WORLD, VOCAB, DOCS, CORPUS_SUMMARY].map(String::from);
    ws.stage("gen-corpus", &cfg, &[], &outputs, |ws| {
        let world = ws.config.world()?;
        let (vocab, docs) =
            generate_documents(&world, &ws.config.corpus, ws.seed(CORPUS_SEED_OFFSET), &template_texts())?;
        ensure_parent(&ws.path(WORLD))?;
        world.save(&ws.path(WORLD))?;
        vocab.save(&ws.path(VOCAB))?;
        docs.save(&ws.path(DOCS))?;
        let mut s = format!("# schema: {CORPUS_SUMMARY_SCHEMA}\nkey\tvalue\n");
        let _ = writeln!(s, "documents\t{}", docs.len());
        for kind in [DocKind::Fact, DocKind::City, DocKind::Filler] {
            let n = docs.metadata.iter().filter(|m| m.kind == kind).count();
            let _ = writeln!(s, "{kind:?}_documents\t{n}");
        }
        let tokens: usize = docs.documents.iter().map(Vec::len).sum();
        let _ = writeln!(s, "tokens\t{tokens}\nvocab_size\t{}", vocab.len());
        write(&ws.path(CORPUS_SUMMARY), &s)
    })
}

pub fn freq_bins(ws: &mut Workspace) -> Result<StageOutcome> {
    let cfg = ws.config.analysis.n_bins;
    let outputs: Vec<String> = BIN_CRITERIA.iter().map(|&c| bins_path(c)).collect();
    ws.stage("freq-bins", &cfg, &corpus_inputs(), &outputs, |ws| {
        let (world, vocab, docs) = (ws.load_world()?, ws.load_vocab()?, ws.load_docs()?);
        for c in BIN_CRITERIA {
            let items = frequency_items(&world, &vocab, &docs, 0, c)?;
            let bins = percentile_bins(c, &items, ws.config.analysis.n_bins)?;
            write(&ws.path(&bins_path(c)), &bins.to_tsv())?;
        }
        Ok(())
    })
}

pub fn train_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let spec = ws.config.model(model)?.clone();
    let cfg = (ws.config.seed, spec.clone(), ws.config.train.clone());
    let outputs = [model_path(model, "model.ckpt"), model_path(model, "train_log.tsv")];
    let inputs = vec![(VOCAB.to_string(), "gen-corpus"), (DOCS.to_string(), "gen-corpus")];
    ws.stage(&format!("train/{model}"), &cfg, &inputs, &outputs, |ws| {
        let (vocab, docs) = (ws.load_vocab()?, ws.load_docs()?);
        let out = train(
            &docs,
            vocab.eot_id(),
            spec.model_config(vocab.len()),
            &ws.config.train,
            ws.seed(TRAIN_SEED_OFFSET),
            None,
        )?;
        if let Some(reason) = out.aborted {
            return Err(factlab_core::Error::Diverged {
                step: out.steps_run,
                detail: reason,
            }
            .into());
        }
        let ck = ws.path(&outputs[0]);
        ensure_parent(&ck)?;
        out.model.save(&ck)?;
        let mut log = format!(
            "# schema: {TRAIN_LOG_SCHEMA} model={model} params={}\nstep\tloss\n",
            out.model.n_params()
        );
        for (step, loss) in &out.losses {
            let _ = writeln!(log, "{step}\t{loss:.6}");
        }
        write(&ws.path(&outputs[1]), &log)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub criterion: Criterion,
    pub class: AnswerClass,
    pub per_bin: Vec<f64>,
    pub rho: f64,
    pub p_value: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub all: f64,
    pub top_bin: f64,
    pub bottom_bin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub n_layers: usize,
    pub n_params: usize,
    pub n_prompts: usize,
    /// `[in_context, memorized, other]`.
    pub proportions: [f64; 3],
    pub counts: [usize; 3],
    pub recall: Recall,
    pub prefix: PrefixStats,
    pub trends: Vec<Trend>,
}

impl EvalSummary {
    pub fn trend(&self, criterion: Criterion, class: AnswerClass) -> Option<&Trend> {
        self.trends.iter().find(|t| t.criterion == criterion && t.class == class)
    }
}

fn bin_inputs() -> Vec<(String, &'static str)> {
    BIN_CRITERIA.iter().map(|&c| (bins_path(c), "freq-bins")).collect()
}

fn trends(records: &[BehaviorRecord], bins: &BinAssignment) -> Result<Vec<Trend>> {
    let summary = aggregate_by_bin(records, bins)?;
    let x: Vec<f64> = summary.rows.iter().map(|r| r.bin as f64).collect();
    Ok(AnswerClass::ALL
        .iter()
        .map(|&class| {
            let ys = summary.column(class);
            let c = spearman(&x, &ys);
            Trend {
                criterion: bins.criterion,
                class,
                rho: c.rho,
                p_value: c.p_value,
                slope: ls_slope(&x, &ys),
                per_bin: ys,
            }
        })
        .collect())
}

pub fn eval_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let cfg = ws.config.analysis.max_new;
    let mut inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (model_path(model, "model.ckpt"), "train"),
    ];
    inputs.extend(bin_inputs());
    let mut outputs = vec![model_path(model, "records.jsonl"), model_path(model, "eval.json")];
    outputs.extend(BIN_CRITERIA.iter().map(|c| model_path(model, &format!("bins_{}.tsv", c.as_str()))));
    ws.stage(&format!("eval/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let max_new = ws.config.analysis.max_new;
        let prompts = build_prompt_set(&world, &vocab, 0)?;
        let records = run_behavior_suite(&ck, &vocab, &prompts, max_new, None);
        save_records(&records, &ws.path(&outputs[0]))?;
        let mut all_trends = Vec::new();
        for (k, c) in BIN_CRITERIA.iter().enumerate() {
            let bins = ws.load_bins(*c)?;
            write(&ws.path(&outputs[2 + k]), &aggregate_by_bin(&records, &bins)?.to_tsv())?;
            all_trends.extend(trends(&records, &bins)?);
        }
        let country = ws.load_bins(Criterion::Country)?;
        let in_bin = |b: usize| -> Vec<usize> {
            (0..world.n_countries())
                .filter(|&c| country.bin_of(&world.countries[c]) == Some(b))
                .collect()
        };
        let all: Vec<usize> = (0..world.n_countries()).collect();
        let recall = Recall {
            all: closed_book_recall(&ck, &world, &vocab, 0, &all)?,
            top_bin: closed_book_recall(&ck, &world, &vocab, 0, &in_bin(country.n_bins - 1))?,
            bottom_bin: closed_book_recall(&ck, &world, &vocab, 0, &in_bin(0))?,
        };
        let summary = EvalSummary {
            model: model.to_string(),
            n_layers: ck.config().n_layers,
            n_params: ck.n_params(),
            n_prompts: records.len(),
            proportions: class_proportions(&records),
            counts: class_counts(&records),
            recall,
            prefix: prefix_stats(&records, &world),
            trends: all_trends,
        };
        write_json(&ws.path(&outputs[1]), EVAL_SCHEMA, &summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub selection: Option<SelectionSet>,
    pub heads: Option<HeadSelection>,
    /// Why no heads were selected, when they were not.
    pub note: Option<String>,
}

pub fn attribute_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let a = &ws.config.analysis;
    let cfg = (ws.config.seed, a.per_bin, a.batch_size);
    let inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (bins_path(Criterion::Country), "freq-bins"),
        (model_path(model, "model.ckpt"), "train"),
        (model_path(model, "records.jsonl"), "eval"),
    ];
    let outputs = vec![
        model_path(model, "selection.json"),
        model_path(model, "attribution.tsv"),
        model_path(model, "heatmap.svg"),
    ];
    ws.stage(&format!("attribute/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let records = ws.load_records(model, "records.jsonl", "eval")?;
        let bins = ws.load_bins(Criterion::Country)?;
        let prompts = build_prompt_set(&world, &vocab, 0)?;
        let a = &ws.config.analysis;
        let mut file = SelectionFile {
            selection: None,
            heads: None,
            note: None,
        };
        let sel_prompts = match sample_selection_set(&records, &bins, a.per_bin, ws.seed(SELECTION_SEED_OFFSET)) {
            Ok(sel) => {
                let p: Vec<PromptInstance> = sel.all_ids().iter().map(|&i| prompts[i].clone()).collect();
                file.selection = Some(sel);
                p
            }
            Err(e) => {
                file.note = Some(e.to_string());
                Vec::new()
            }
        };
        let map = attribution_map(&ck, &sel_prompts)?;
        if !sel_prompts.is_empty() {
            match batched_maps(&ck, &sel_prompts, a.batch_size).and_then(|m| select_heads(&m)) {
                Ok(h) => file.heads = Some(h),
                Err(e) => file.note = Some(e.to_string()),
            }
        }
        write_json(&ws.path(&outputs[0]), SELECTION_FILE_SCHEMA, &file)?;
        write(&ws.path(&outputs[1]), &map.to_tsv())?;
        let title = format!("{model}: mean logit difference per head (memorized - in-context)");
        write(&ws.path(&outputs[2]), &emit_heatmap(&map, &title, None))
    })
}

/// Selection prompts and their baseline records.
fn tuning_set(
    sel: &SelectionSet,
    prompts: &[PromptInstance],
    records: &[BehaviorRecord],
) -> (Vec<PromptInstance>, Vec<BehaviorRecord>) {
    let ids = sel.all_ids();
    (
        ids.iter().map(|&i| prompts[i].clone()).collect(),
        ids.iter().map(|&i| records[i].clone()).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSweep {
    pub layer: usize,
    pub head: usize,
    /// Best alpha for the head's primary direction (memory down, context up).
    pub alpha: f64,
    pub criterion: f64,
    /// Best alpha and criterion for the opposite direction.
    pub alpha_opposite: f64,
    pub criterion_opposite: f64,
    /// Memorized proportion never rises from alpha 1 to the primary alpha.
    pub memorized_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub model: String,
    pub grid: Vec<f64>,
    pub n_tuning: usize,
    pub memory: Option<HeadSweep>,
    pub context: Option<HeadSweep>,
}

pub const SWEEP_FILES: [(&str, SweepDirection); 4] = [
    ("sweep_memory_down.tsv", SweepDirection::MemoryDown),
    ("sweep_memory_up.tsv", SweepDirection::MemoryUp),
    ("sweep_context_up.tsv", SweepDirection::ContextUp),
    ("sweep_context_down.tsv", SweepDirection::ContextDown),
];

pub fn sweep_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let grid = ws.config.analysis.alpha_grid.values();
    let cfg = (&grid, ws.config.analysis.max_new);
    let inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (model_path(model, "model.ckpt"), "train"),
        (model_path(model, "records.jsonl"), "eval"),
        (model_path(model, "selection.json"), "attribute"),
    ];
    let mut outputs: Vec<String> = SWEEP_FILES.iter().map(|(f, _)| model_path(model, f)).collect();
    outputs.push(model_path(model, "sweep.json"));
    ws.stage(&format!("sweep-alpha/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let records = ws.load_records(model, "records.jsonl", "eval")?;
        let sel: SelectionFile = read_json(&ws.require(&model_path(model, "selection.json"), "attribute")?, SELECTION_FILE_SCHEMA)?;
        let prompts = build_prompt_set(&world, &vocab, 0)?;
        let max_new = ws.config.analysis.max_new;
        let (tp, tb) = match &sel.selection {
            Some(s) => tuning_set(s, &prompts, &records),
            None => (Vec::new(), Vec::new()),
        };
        let heads = sel.heads.as_ref();
        let picks = [
            (heads.and_then(|h| h.memory_head), SweepDirection::MemoryDown, SweepDirection::MemoryUp),
            (heads.and_then(|h| h.context_head), SweepDirection::ContextUp, SweepDirection::ContextDown),
        ];
        let mut summary = SweepSummary {
            model: model.to_string(),
            grid: grid.clone(),
            n_tuning: tp.len(),
            memory: None,
            context: None,
        };
        for (k, (head, primary, opposite)) in picks.into_iter().enumerate() {
            let files = [&outputs[2 * k], &outputs[2 * k + 1]];
            let Some((l, h)) = head else {
                for f in files {
                    write(&ws.path(f), &format!("# schema: {} no head selected\n", factlab_core::intervention::SWEEP_SCHEMA))?;
                }
                continue;
            };
            let runs = sweep_runs(&ck, &vocab, (l, h), &grid, &tp, &tb, max_new)?;
            let a = SweepCurve::from_runs(l, h, primary, &runs);
            let b = SweepCurve::from_runs(l, h, opposite, &runs);
            write(&ws.path(files[0]), &a.to_tsv())?;
            write(&ws.path(files[1]), &b.to_tsv())?;
            let crit = |c: &SweepCurve| c.point(c.best_alpha).map_or(0.0, |p| p.criterion);
            let hs = HeadSweep {
                layer: l,
                head: h,
                alpha: a.best_alpha,
                criterion: crit(&a),
                alpha_opposite: b.best_alpha,
                criterion_opposite: crit(&b),
                memorized_monotone: a.nonincreasing_toward_best(AnswerClass::Memorized),
            };
            if k == 0 {
                summary.memory = Some(hs);
            } else {
                summary.context = Some(hs);
            }
        }
        write_json(&ws.path(&outputs[4]), SWEEP_SUMMARY_SCHEMA, &summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutcome {
    pub layer: usize,
    pub head: usize,
    pub alpha: f64,
    pub baseline: [f64; 3],
    pub intervened: [f64; 3],
    pub deltas: [f64; 3],
    pub flips: [[usize; 3]; 3],
}

impl HeadOutcome {
    fn new(hs: &HeadSweep, m: &Measurement) -> Self {
        HeadOutcome {
            layer: hs.layer,
            head: hs.head,
            alpha: hs.alpha,
            baseline: m.baseline,
            intervened: m.intervened,
            deltas: m.deltas,
            flips: m.flips,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySlopes {
    /// Per country bin, `[in_context, memorized, other]` columns.
    pub baseline: Vec<[f64; 3]>,
    pub intervened: Vec<[f64; 3]>,
    pub baseline_slopes: [f64; 3],
    pub intervened_slopes: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub model: String,
    pub n_held_out: usize,
    pub memory: Option<HeadOutcome>,
    pub context: Option<HeadOutcome>,
    /// Country-bin curves under the memory-head intervention.
    pub frequency: Option<FrequencySlopes>,
}

fn spec_of(hs: &HeadSweep) -> InterventionSet {
    InterventionSet::single(InterventionSpec {
        layer: hs.layer,
        head: hs.head,
        alpha: hs.alpha,
    })
}

fn rows(s: &factlab_core::harness::BinSummary) -> Vec<[f64; 3]> {
    s.rows.iter().map(|r| [r.in_context, r.memorized, r.other]).collect()
}

pub fn intervene_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let cfg = ws.config.analysis.max_new;
    let inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (bins_path(Criterion::Country), "freq-bins"),
        (model_path(model, "model.ckpt"), "train"),
        (model_path(model, "records.jsonl"), "eval"),
        (model_path(model, "selection.json"), "attribute"),
        (model_path(model, "sweep.json"), "sweep-alpha"),
    ];
    let outputs = vec![
        model_path(model, "intervene_memory.tsv"),
        model_path(model, "intervene_context.tsv"),
        model_path(model, "records_memory.jsonl"),
        model_path(model, "freq_effect.tsv"),
        model_path(model, "intervene.json"),
    ];
    ws.stage(&format!("intervene/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let records = ws.load_records(model, "records.jsonl", "eval")?;
        let sel: SelectionFile = read_json(&ws.path(&model_path(model, "selection.json")), SELECTION_FILE_SCHEMA)?;
        let sweep: SweepSummary = read_json(&ws.path(&model_path(model, "sweep.json")), SWEEP_SUMMARY_SCHEMA)?;
        let bins = ws.load_bins(Criterion::Country)?;
        let prompts = build_prompt_set(&world, &vocab, 0)?;
        let tuning: BTreeSet<usize> = sel.selection.as_ref().map(|s| s.all_ids().into_iter().collect()).unwrap_or_default();
        let held: Vec<usize> = (0..prompts.len()).filter(|i| !tuning.contains(i)).collect();
        let hp: Vec<PromptInstance> = held.iter().map(|&i| prompts[i].clone()).collect();
        let hb: Vec<BehaviorRecord> = held.iter().map(|&i| records[i].clone()).collect();
        let max_new = ws.config.analysis.max_new;
        let mut summary = InterventionSummary {
            model: model.to_string(),
            n_held_out: hp.len(),
            memory: None,
            context: None,
            frequency: None,
        };
        let empty = format!("# schema: {} no head selected\n", factlab_core::intervention::MEASURE_SCHEMA);
        match &sweep.memory {
            Some(hs) => {
                let m = apply_and_measure(&ck, &vocab, &spec_of(hs), &hp, &hb, max_new)?;
                write(&ws.path(&outputs[0]), &m.to_tsv())?;
                save_records(&m.records, &ws.path(&outputs[2]))?;
                let fe = frequency_effect_after_intervention(&hb, &m.records, &bins)?;
                let mut t = format!(
                    "# schema: {} criterion=country intervention={}\nbin\tbase_in_context\tbase_memorized\tbase_other\tiv_in_context\tiv_memorized\tiv_other\n",
                    factlab_core::harness::SUMMARY_SCHEMA,
                    m.intervention
                );
                for (b, i) in fe.baseline.rows.iter().zip(&fe.intervened.rows) {
                    let _ = writeln!(
                        t,
                        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        b.bin, b.in_context, b.memorized, b.other, i.in_context, i.memorized, i.other
                    );
                }
                let s = |v: [f64; 3]| format!("{:.6}\t{:.6}\t{:.6}", v[0], v[1], v[2]);
                let _ = writeln!(t, "slope\t{}\t{}", s(fe.baseline_slopes), s(fe.intervened_slopes));
                write(&ws.path(&outputs[3]), &t)?;
                summary.frequency = Some(FrequencySlopes {
                    baseline: rows(&fe.baseline),
                    intervened: rows(&fe.intervened),
                    baseline_slopes: fe.baseline_slopes,
                    intervened_slopes: fe.intervened_slopes,
                });
                summary.memory = Some(HeadOutcome::new(hs, &m));
            }
            None => {
                write(&ws.path(&outputs[0]), &empty)?;
                save_records(&[], &ws.path(&outputs[2]))?;
                write(&ws.path(&outputs[3]), &empty)?;
            }
        }
        match &sweep.context {
            Some(hs) => {
                let m = apply_and_measure(&ck, &vocab, &spec_of(hs), &hp, &hb, max_new)?;
                write(&ws.path(&outputs[1]), &m.to_tsv())?;
                summary.context = Some(HeadOutcome::new(hs, &m));
            }
            None => write(&ws.path(&outputs[1]), &empty)?,
        }
        write_json(&ws.path(&outputs[4]), INTERVENE_SCHEMA, &summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub dataset: String,
    pub setting: String,
    pub proportions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub model: String,
    pub family: u8,
    pub relation: String,
    pub rows: Vec<TransferRow>,
}

pub fn transfer_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let cfg = (ws.config.analysis.max_new, ws.config.analysis.transfer_family);
    let inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (model_path(model, "model.ckpt"), "train"),
        (model_path(model, "sweep.json"), "sweep-alpha"),
        (model_path(model, "intervene.json"), "intervene"),
    ];
    let outputs = vec![
        model_path(model, "records_transfer.jsonl"),
        model_path(model, "transfer.tsv"),
        model_path(model, "transfer.json"),
    ];
    ws.stage(&format!("generalize/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let sweep: SweepSummary = read_json(&ws.path(&model_path(model, "sweep.json")), SWEEP_SUMMARY_SCHEMA)?;
        let iv: InterventionSummary = read_json(&ws.path(&model_path(model, "intervene.json")), INTERVENE_SCHEMA)?;
        let fam = ws.config.analysis.transfer_family;
        let relation = world.family(fam)?.relation.clone();
        let base_rel = world.family(0)?.relation.clone();
        let prompts = build_prompt_set(&world, &vocab, fam)?;
        let max_new = ws.config.analysis.max_new;
        let baseline = run_behavior_suite(&ck, &vocab, &prompts, max_new, None);
        save_records(&baseline, &ws.path(&outputs[0]))?;
        let mut rows = Vec::new();
        if let Some(m) = iv.memory.as_ref().or(iv.context.as_ref()) {
            rows.push(TransferRow {
                dataset: base_rel.clone(),
                setting: "baseline".into(),
                proportions: m.baseline,
            });
        }
        for (name, o) in [("memory head", &iv.memory), ("context head", &iv.context)] {
            if let Some(o) = o {
                rows.push(TransferRow {
                    dataset: base_rel.clone(),
                    setting: format!("{name} {}.{} x{}", o.layer, o.head, o.alpha),
                    proportions: o.intervened,
                });
            }
        }
        rows.push(TransferRow {
            dataset: relation.clone(),
            setting: "baseline".into(),
            proportions: class_proportions(&baseline),
        });
        for (name, hs) in [("memory head", &sweep.memory), ("context head", &sweep.context)] {
            if let Some(hs) = hs {
                let m = generalization_test(&ck, &vocab, &spec_of(hs), &prompts, &baseline, max_new)?;
                rows.push(TransferRow {
                    dataset: relation.clone(),
                    setting: format!("{name} {}.{} x{}", hs.layer, hs.head, hs.alpha),
                    proportions: m.intervened,
                });
            }
        }
        let mut t = format!("# schema: {TRANSFER_SCHEMA} model={model}\ndataset\tsetting\tin_context\tmemorized\tother\n");
        for r in &rows {
            let p = r.proportions;
            let _ = writeln!(t, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.dataset, r.setting, p[0], p[1], p[2]);
        }
        write(&ws.path(&outputs[1]), &t)?;
        let summary = TransferSummary {
            model: model.to_string(),
            family: fam,
            relation,
            rows,
        };
        write_json(&ws.path(&outputs[2]), TRANSFER_SCHEMA, &summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSvdCheck {
    pub layer: usize,
    pub head: usize,
    pub singular_values: Vec<f64>,
    pub orthonormality_u: f64,
    pub orthonormality_v: f64,
    pub reconstruction: f64,
    pub nonincreasing: bool,
    /// Mean entity share of the decoded top-k over the first vectors.
    pub entity_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedHead {
    pub role: String,
    pub layer: usize,
    pub head: usize,
    /// One row per singular vector: sigma and quoted tokens.
    pub vectors: Vec<(f64, Vec<String>)>,
    pub entity_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdSummary {
    pub model: String,
    pub top_k: usize,
    pub n_vectors: usize,
    pub heads: Vec<HeadSvdCheck>,
    pub decoded: Vec<DecodedHead>,
}

pub fn svd_model(ws: &mut Workspace, model: &str) -> Result<StageOutcome> {
    let a = &ws.config.analysis;
    let cfg = (a.svd_top_k, a.svd_vectors);
    let inputs = vec![
        (WORLD.to_string(), "gen-corpus"),
        (VOCAB.to_string(), "gen-corpus"),
        (model_path(model, "model.ckpt"), "train"),
        (model_path(model, "selection.json"), "attribute"),
    ];
    let outputs = vec![
        model_path(model, "svd_memory.tsv"),
        model_path(model, "svd_context.tsv"),
        model_path(model, "svd.json"),
    ];
    ws.stage(&format!("svd/{model}"), &cfg, &inputs, &outputs.clone(), |ws| {
        let (world, vocab, ck) = (ws.load_world()?, ws.load_vocab()?, ws.load_model(model)?);
        let sel: SelectionFile = read_json(&ws.path(&model_path(model, "selection.json")), SELECTION_FILE_SCHEMA)?;
        let entities = EntityIndex::new(&world, &vocab)?;
        let (k, n) = (ws.config.analysis.svd_top_k, ws.config.analysis.svd_vectors);
        let c = *ck.config();
        let mut heads = Vec::new();
        let mut decoded_by_head = Vec::new();
        for l in 0..c.n_layers {
            for h in 0..c.n_heads {
                let dec = head_svd(&ck, l, h)?;
                let ov = ov_matrix(&ck, l, h)?;
                let top = decode_head(&ck, &dec, k, n, DecodeSide::Output)?;
                let share = cluster_report(&top, |t| entities.is_entity(t)).mean;
                heads.push(HeadSvdCheck {
                    layer: l,
                    head: h,
                    nonincreasing: dec.s.windows(2).all(|w| w[1] <= w[0]) && dec.s.iter().all(|&s| s >= 0.0),
                    singular_values: dec.s.clone(),
                    orthonormality_u: orthonormality_error(&dec.u),
                    orthonormality_v: orthonormality_error(&dec.v),
                    reconstruction: reconstruction_error(&ov, &dec),
                    entity_share: share,
                });
                decoded_by_head.push(((l, h), top, share));
            }
        }
        let token = |t: u32| vocab.token(t).unwrap_or("?").to_string();
        let roles = [("memory", sel.heads.as_ref().and_then(|s| s.memory_head)), ("context", sel.heads.as_ref().and_then(|s| s.context_head))];
        let mut decoded = Vec::new();
        for (k_role, (role, head)) in roles.into_iter().enumerate() {
            let path = ws.path(&outputs[k_role]);
            let Some(hd) = head else {
                write(&path, &format!("# schema: {} no {role} head selected\n", factlab_core::ovsvd::SVD_SCHEMA))?;
                continue;
            };
            let (_, top, share) = decoded_by_head.iter().find(|(id, _, _)| *id == hd).expect("every head decoded");
            write(&path, &decoded_table(&format!("{role} head {}.{}", hd.0, hd.1), top, token))?;
            decoded.push(DecodedHead {
                role: role.into(),
                layer: hd.0,
                head: hd.1,
                vectors: top
                    .iter()
                    .map(|d| (d.singular_value, d.top.iter().map(|(t, _)| token(*t)).collect()))
                    .collect(),
                entity_share: *share,
            });
        }
        let summary = SvdSummary {
            model: model.to_string(),
            top_k: k,
            n_vectors: n,
            heads,
            decoded,
        };
        write_json(&ws.path(&outputs[2]), SVD_SUMMARY_SCHEMA, &summary)
    })
}

/// Every per-model stage in order.
pub fn run_model(ws: &mut Workspace, model: &str) -> Result<()> {
    train_model(ws, model)?;
    eval_model(ws, model)?;
    attribute_model(ws, model)?;
    sweep_model(ws, model)?;
    intervene_model(ws, model)?;
    transfer_model(ws, model)?;
    svd_model(ws, model)?;
    Ok(())
}

pub fn pipeline(ws: &mut Workspace) -> Result<()> {
    gen_corpus(ws)?;
    freq_bins(ws)?;
    for m in ws.model_names(None)? {
        run_model(ws, &m)?;
    }
    crate::report::write_report(&ws.dir, &ws.path("report"))?;
    Ok(())
}
