// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual prompting and answer classification.
//!
//! Each prompt states a false value for a country and then asks for it:
//! `the capital of X is Y . Q : what is the capital of X ? A :`. The
//! continuation is classified by which city it produces first.

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentSet, EntityIndex, WorldSpec};
use crate::error::{Error, Result};
use crate::freq::{count_cooccurrences, count_occurrences, BinAssignment, BinItem, Criterion};
use crate::intervention::InterventionSet;
use crate::model::Checkpoint;
use crate::vocab::Vocabulary;

pub const RECORDS_SCHEMA: &str = "factlab.records/1";
pub const SUMMARY_SCHEMA: &str = "factlab.binsummary/1";

pub const PROMPT_TEMPLATE: &str =
    "the {relation} of {country} is {city} . Q : what is the {relation} of {country} ? A :";
pub const CLOSED_BOOK_TEMPLATE: &str = "Q : what is the {relation} of {country} ? A :";
/// Continuations starting with this stem restate the question.
pub const ANSWER_STEM: &str = "the {relation} of {country} is";

pub const DEFAULT_MAX_NEW: usize = 12;

fn fill(template: &str, relation: &str, country: &str, city: &str) -> String {
    template
        .replace("{relation}", relation)
        .replace("{country}", country)
        .replace("{city}", city)
}

/// Words that appear in prompts but not necessarily in the corpus.
pub fn template_texts() -> Vec<String> {
    [PROMPT_TEMPLATE, CLOSED_BOOK_TEMPLATE]
        .iter()
        .map(|t| fill(t, "", "", ""))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: usize,
    pub family: u8,
    pub country: String,
    pub in_context_city: String,
    pub memorized_city: String,
    pub text: String,
    /// Encoded prompt, starting with the end-of-text token.
    pub tokens: Vec<u32>,
    pub in_context_token: u32,
    pub memorized_token: u32,
}

impl PromptInstance {
    pub fn item_key(&self, criterion: Criterion) -> String {
        match criterion {
            Criterion::Country => self.country.clone(),
            Criterion::InContextCity => self.in_context_city.clone(),
            Criterion::MemorizedPair => pair_key(&self.country, &self.memorized_city),
            Criterion::InContextPair => pair_key(&self.country, &self.in_context_city),
        }
    }
}

pub fn pair_key(country: &str, city: &str) -> String {
    format!("{country}/{city}")
}

/// Every country paired with every other country's value, in country order.
pub fn build_prompt_set(world: &WorldSpec, vocab: &Vocabulary, family: u8) -> Result<Vec<PromptInstance>> {
    let fam = world.family(family)?;
    let n = world.n_countries();
    if n < 2 {
        return Err(Error::Config("prompt sets need at least two countries".into()));
    }
    let mut out = Vec::with_capacity(n * (n - 1));
    for c in 0..n {
        for other in (0..n).filter(|&o| o != c) {
            let text = fill(PROMPT_TEMPLATE, &fam.relation, &world.countries[c], &fam.values[other]);
            let mut tokens = vec![vocab.eot_id()];
            tokens.extend(vocab.encode(&text)?);
            out.push(PromptInstance {
                id: out.len(),
                family,
                country: world.countries[c].clone(),
                in_context_city: fam.values[other].clone(),
                memorized_city: fam.values[c].clone(),
                text,
                tokens,
                in_context_token: vocab.single_token_id(&fam.values[other])?,
                memorized_token: vocab.single_token_id(&fam.values[c])?,
            });
        }
    }
    Ok(out)
}

/// `(country index, encoded prompt)` closed-book questions, one per country.
pub fn closed_book_prompts(world: &WorldSpec, vocab: &Vocabulary, family: u8) -> Result<Vec<Vec<u32>>> {
    let fam = world.family(family)?;
    world
        .countries
        .iter()
        .map(|c| {
            let mut t = vec![vocab.eot_id()];
            t.extend(vocab.encode(&fill(CLOSED_BOOK_TEMPLATE, &fam.relation, c, ""))?);
            Ok(t)
        })
        .collect()
}

/// Fraction of `countries` whose closed-book answer starts with the true value.
pub fn closed_book_recall(
    model: &Checkpoint,
    world: &WorldSpec,
    vocab: &Vocabulary,
    family: u8,
    countries: &[usize],
) -> Result<f64> {
    if countries.is_empty() {
        return Ok(0.0);
    }
    let prompts = closed_book_prompts(world, vocab, family)?;
    let index = EntityIndex::new(world, vocab)?;
    let hits = countries
        .par_iter()
        .map(|&c| {
            let out = model.greedy_decode(&prompts[c], 1, Some(vocab.eot_id()), None)?;
            Ok(out.first() == Some(&index.value_token(family, c)))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / countries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerClass {
    InContext,
    Memorized,
    Other,
}

impl AnswerClass {
    pub const ALL: [AnswerClass; 3] = [AnswerClass::InContext, AnswerClass::Memorized, AnswerClass::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerClass::InContext => "in_context",
            AnswerClass::Memorized => "memorized",
            AnswerClass::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// First occurrence of either city decides; `both_present` flags
/// continuations that contain both.
pub fn classify_output(continuation: &[u32], in_context: u32, memorized: u32) -> (AnswerClass, bool) {
    let class = continuation
        .iter()
        .find_map(|&t| {
            if t == in_context {
                Some(AnswerClass::InContext)
            } else if t == memorized {
                Some(AnswerClass::Memorized)
            } else {
                None
            }
        })
        .unwrap_or(AnswerClass::Other);
    let both = continuation.contains(&in_context) && continuation.contains(&memorized);
    (class, both)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub prompt_id: usize,
    pub family: u8,
    pub country: String,
    pub in_context_city: String,
    pub memorized_city: String,
    pub continuation: Vec<u32>,
    pub text: String,
    pub class: AnswerClass,
    pub both_present: bool,
    pub intervention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl BehaviorRecord {
    pub fn item_key(&self, criterion: Criterion) -> String {
        match criterion {
            Criterion::Country => self.country.clone(),
            Criterion::InContextCity => self.in_context_city.clone(),
            Criterion::MemorizedPair => pair_key(&self.country, &self.memorized_city),
            Criterion::InContextPair => pair_key(&self.country, &self.in_context_city),
        }
    }
}

/// Greedy-decode every prompt and classify the result. A failing prompt is
/// recorded as `Other` with a diagnostic.
pub fn run_behavior_suite(
    model: &Checkpoint,
    vocab: &Vocabulary,
    prompts: &[PromptInstance],
    max_new: usize,
    interventions: Option<&InterventionSet>,
) -> Vec<BehaviorRecord> {
    let described = interventions.filter(|s| !s.is_empty()).map(InterventionSet::describe);
    prompts
        .par_iter()
        .map(|p| {
            let decoded = interventions
                .map_or(Ok(()), |iv| iv.validate(model.config()))
                .and_then(|_| model.greedy_decode(&p.tokens, max_new, Some(vocab.eot_id()), interventions));
            let (continuation, diagnostic) = match decoded {
                Ok(c) => (c, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            let (class, both_present) = classify_output(&continuation, p.in_context_token, p.memorized_token);
            BehaviorRecord {
                prompt_id: p.id,
                family: p.family,
                country: p.country.clone(),
                in_context_city: p.in_context_city.clone(),
                memorized_city: p.memorized_city.clone(),
                text: vocab.decode(&continuation),
                continuation,
                class,
                both_present,
                intervention: described.clone(),
                diagnostic,
            }
        })
        .collect()
}

/// Class counts in `[in_context, memorized, other]` order.
pub fn class_counts(records: &[BehaviorRecord]) -> [usize; 3] {
    let mut c = [0; 3];
    for r in records {
        c[r.class.index()] += 1;
    }
    c
}

/// Class proportions in `[in_context, memorized, other]` order; zeros when empty.
pub fn class_proportions(records: &[BehaviorRecord]) -> [f64; 3] {
    let c = class_counts(records);
    let n = records.len();
    if n == 0 {
        return [0.0; 3];
    }
    c.map(|x| x as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub n: usize,
    pub in_context: f64,
    pub memorized: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub criterion: Criterion,
    pub rows: Vec<BinRow>,
}

impl BinSummary {
    pub fn column(&self, class: AnswerClass) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match class {
                AnswerClass::InContext => r.in_context,
                AnswerClass::Memorized => r.memorized,
                AnswerClass::Other => r.other,
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# schema: {SUMMARY_SCHEMA} criterion={}\nbin\tn\tin_context\tmemorized\tother\n",
            self.criterion
        );
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.bin, r.n, r.in_context, r.memorized, r.other);
        }
        s
    }
}

/// Per-bin class proportions. Empty bins report zero proportions.
pub fn aggregate_by_bin(records: &[BehaviorRecord], bins: &BinAssignment) -> Result<BinSummary> {
    let mut counts = vec![[0usize; 3]; bins.n_bins];
    for r in records {
        let key = r.item_key(bins.criterion);
        let b = bins
            .bin_of(&key)
            .ok_or_else(|| Error::MissingBin(format!("`{key}` has no {} bin", bins.criterion)))?;
        counts[b][r.class.index()] += 1;
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(bin, c)| {
            let n: usize = c.iter().sum();
            let p = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
            BinRow {
                bin,
                n,
                in_context: p(c[0]),
                memorized: p(c[1]),
                other: p(c[2]),
            }
        })
        .collect();
    Ok(BinSummary {
        criterion: bins.criterion,
        rows,
    })
}

/// Corpus counts for every item a criterion bins, keyed like
/// [`BehaviorRecord::item_key`].
pub fn frequency_items(
    world: &WorldSpec,
    vocab: &Vocabulary,
    docs: &DocumentSet,
    family: u8,
    criterion: Criterion,
) -> Result<Vec<BinItem>> {
    let index = EntityIndex::new(world, vocab)?;
    let fam = world.family(family)?;
    let n = world.n_countries();
    let items = match criterion {
        Criterion::Country => {
            let terms: Vec<u32> = (0..n).map(|c| index.country_token(c)).collect();
            let t = count_occurrences(docs, &terms);
            (0..n)
                .map(|c| BinItem {
                    key: world.countries[c].clone(),
                    count: t.term(terms[c]),
                })
                .collect()
        }
        Criterion::InContextCity => {
            let terms: Vec<u32> = (0..n).map(|c| index.value_token(family, c)).collect();
            let t = count_occurrences(docs, &terms);
            (0..n)
                .map(|c| BinItem {
                    key: fam.values[c].clone(),
                    count: t.term(terms[c]),
                })
                .collect()
        }
        Criterion::MemorizedPair => {
            let pairs: Vec<(u32, u32)> = (0..n)
                .map(|c| (index.country_token(c), index.value_token(family, c)))
                .collect();
            let t = count_cooccurrences(docs, &pairs);
            (0..n)
                .map(|c| BinItem {
                    key: pair_key(&world.countries[c], &fam.values[c]),
                    count: t.pair(pairs[c].0, pairs[c].1),
                })
                .collect()
        }
        Criterion::InContextPair => {
            let mut pairs = Vec::with_capacity(n * (n - 1));
            let mut keys = Vec::with_capacity(n * (n - 1));
            for c in 0..n {
                for o in (0..n).filter(|&o| o != c) {
                    pairs.push((index.country_token(c), index.value_token(family, o)));
                    keys.push(pair_key(&world.countries[c], &fam.values[o]));
                }
            }
            let t = count_cooccurrences(docs, &pairs);
            keys.into_iter()
                .zip(&pairs)
                .map(|(key, &(a, b))| BinItem { key, count: t.pair(a, b) })
                .collect()
        }
    };
    Ok(items)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixStats {
    pub total: usize,
    pub with_stem: usize,
    /// Stem-initial continuations per class, `[in_context, memorized, other]`.
    pub by_class: [usize; 3],
}

/// Count continuations that begin by restating `the <relation> of <country> is`.
pub fn prefix_stats(records: &[BehaviorRecord], world: &WorldSpec) -> PrefixStats {
    let mut s = PrefixStats {
        total: records.len(),
        ..PrefixStats::default()
    };
    for r in records {
        let relation = world
            .families
            .get(r.family as usize)
            .map_or("", |f| f.relation.as_str());
        let stem = fill(ANSWER_STEM, relation, &r.country, "");
        let text = r.text.trim_start();
        let starts = text
            .strip_prefix(stem.as_str())
            .is_some_and(|rest| rest.is_empty() || rest.starts_with(' '));
        if starts {
            s.with_stem += 1;
            s.by_class[r.class.index()] += 1;
        }
    }
    s
}

pub fn save_records(records: &[BehaviorRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "schema": RECORDS_SCHEMA, "n": records.len() });
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<BehaviorRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::format(path, e.to_string()))?;
    if header["schema"] != RECORDS_SCHEMA {
        return Err(Error::format(path, format!("expected schema {RECORDS_SCHEMA}")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_world, generate_documents, CorpusConfig};
    use crate::freq::percentile_bins;

    #[test]
    fn classification_rules() {
        assert_eq!(classify_output(&[5, 7], 7, 9), (AnswerClass::InContext, false));
        assert_eq!(classify_output(&[], 7, 9), (AnswerClass::Other, false));
        assert_eq!(classify_output(&[9, 1, 7], 7, 9), (AnswerClass::Memorized, true));
        assert_eq!(classify_output(&[1, 2, 3], 7, 9), (AnswerClass::Other, false));
    }

    fn small_world() -> (WorldSpec, Vocabulary, DocumentSet) {
        let world = build_world(3, 12, 1.0).unwrap();
        let cfg = CorpusConfig {
            total_docs: 400,
            ..CorpusConfig::default()
        };
        let (vocab, docs) = generate_documents(&world, &cfg, 1, &template_texts()).unwrap();
        (world, vocab, docs)
    }

    #[test]
    fn prompt_set_is_the_cross_product() {
        let (world, vocab, _) = small_world();
        let prompts = build_prompt_set(&world, &vocab, 0).unwrap();
        assert_eq!(prompts.len(), 12 * 11);
        let mut seen = std::collections::HashSet::new();
        for p in &prompts {
            assert_ne!(p.in_context_city, p.memorized_city);
            assert!(seen.insert((p.country.clone(), p.in_context_city.clone())));
            assert_eq!(p.tokens[0], vocab.eot_id());
            assert_eq!(vocab.decode(&p.tokens[1..]), p.text);
        }
        let first = &prompts[0];
        assert_eq!(
            first.text,
            format!(
                "the capital of {} is {} . Q : what is the capital of {} ? A :",
                world.countries[0], world.families[0].values[1], world.countries[0]
            )
        );
    }

    fn record(country: &str, ctx: &str, class: AnswerClass, text: &str) -> BehaviorRecord {
        BehaviorRecord {
            prompt_id: 0,
            family: 0,
            country: country.into(),
            in_context_city: ctx.into(),
            memorized_city: "m".into(),
            continuation: vec![],
            text: text.into(),
            class,
            both_present: false,
            intervention: None,
            diagnostic: None,
        }
    }

    #[test]
    fn aggregation_matches_recount_and_sums_to_one() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let keys: Vec<String> = (0..20).map(|i| format!("k{i:02}")).collect();
        let items: Vec<BinItem> = keys
            .iter()
            .map(|k| BinItem {
                key: k.clone(),
                count: rng.random_range(0..50),
            })
            .collect();
        let bins = percentile_bins(Criterion::Country, &items, 4).unwrap();
        let records: Vec<BehaviorRecord> = (0..500)
            .map(|_| {
                let class = AnswerClass::ALL[rng.random_range(0..3)];
                record(&keys[rng.random_range(0..20)], "c", class, "")
            })
            .collect();
        let summary = aggregate_by_bin(&records, &bins).unwrap();
        for row in &summary.rows {
            let members: Vec<&BehaviorRecord> = records
                .iter()
                .filter(|r| bins.bin_of(&r.country) == Some(row.bin))
                .collect();
            assert_eq!(row.n, members.len());
            let mem = members.iter().filter(|r| r.class == AnswerClass::Memorized).count();
            assert!((row.memorized - mem as f64 / row.n as f64).abs() < 1e-15);
            assert!((row.in_context + row.memorized + row.other - 1.0).abs() < 1e-9);
        }
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(aggregate_by_bin(&shuffled, &bins).unwrap(), summary);

        let one = percentile_bins(Criterion::Country, &items, 1).unwrap();
        let global = class_proportions(&records);
        let s = aggregate_by_bin(&records, &one).unwrap();
        assert_eq!([s.rows[0].in_context, s.rows[0].memorized, s.rows[0].other], global);

        let missing = vec![record("nowhere", "c", AnswerClass::Other, "")];
        assert!(matches!(aggregate_by_bin(&missing, &bins), Err(Error::MissingBin(_))));
    }

    #[test]
    fn prefix_stats_scan() {
        let (world, _, _) = small_world();
        let c = world.countries[0].clone();
        assert_eq!(prefix_stats(&[], &world), PrefixStats::default());
        let recs = vec![
            record(&c, "x", AnswerClass::Memorized, &format!("the capital of {c} is m .")),
            record(&c, "x", AnswerClass::InContext, "x ."),
            record(&c, "x", AnswerClass::Other, &format!("the capital of {c}x is")),
        ];
        let s = prefix_stats(&recs, &world);
        assert_eq!(s.total, 3);
        assert_eq!(s.with_stem, 1);
        assert_eq!(s.by_class, [0, 1, 0]);
    }

    #[test]
    fn frequency_items_match_metadata() {
        let (world, vocab, docs) = small_world();
        let items = frequency_items(&world, &vocab, &docs, 0, Criterion::Country).unwrap();
        for (c, it) in items.iter().enumerate() {
            let want = docs.metadata.iter().filter(|m| m.countries.contains(&(c as u32))).count();
            assert_eq!(it.count, want as u64);
        }
        let pairs = frequency_items(&world, &vocab, &docs, 0, Criterion::MemorizedPair).unwrap();
        for (c, it) in pairs.iter().enumerate() {
            let want = docs
                .metadata
                .iter()
                .filter(|m| m.capital_pairs().any(|x| x == c as u32))
                .count();
            assert_eq!(it.count, want as u64);
        }
        let ctx = frequency_items(&world, &vocab, &docs, 0, Criterion::InContextPair).unwrap();
        assert_eq!(ctx.len(), 12 * 11);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = vec![record("a", "b", AnswerClass::InContext, "b .")];
        save_records(&recs, &p).unwrap();
        assert_eq!(load_records(&p).unwrap(), recs);
    }
}
