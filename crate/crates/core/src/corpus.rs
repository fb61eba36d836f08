// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic world and pretraining corpus generation.
//!
//! A [`WorldSpec`] holds countries, one value per country for every relation
//! family (family 0 is the capital relation), and the relative document share
//! of each country. [`generate_documents`] samples a corpus from it in which
//! the number of documents mentioning each country follows those weights.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocabulary};

pub const WORLD_SCHEMA: &str = "factlab.world/1";
pub const CORPUS_SCHEMA: &str = "factlab.corpus/1";

/// Relation words of the built-in families, indexed by family id.
pub const RELATIONS: &[&str] = &["capital", "currency"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A relation between countries and one value per country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationFamily {
    pub id: u8,
    pub relation: String,
    /// `values[c]` is the true value for country `c`.
    pub values: Vec<String>,
}

/// How often capital (value) tokens are drawn when they appear without
/// their own country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CityWeights {
    /// Values share their country's weight.
    Inherit,
    /// Values carry their own normalized weights.
    Independent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub zipf_exponent: f64,
    pub countries: Vec<String>,
    pub families: Vec<RelationFamily>,
    /// Relative document share per country; sums to one.
    pub frequency_weights: Vec<f64>,
    pub city_weights: CityWeights,
    /// Words used by filler documents. Never entity names.
    pub filler_nouns: Vec<String>,
    pub filler_values: Vec<String>,
    pub filler_attrs: Vec<String>,
}

/// Knobs for [`build_world_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_countries: usize,
    pub zipf_exponent: f64,
    /// Number of relation families (1 or 2).
    pub n_families: usize,
    /// When set, capitals get their own Zipf weights over a shuffled rank.
    pub independent_city_exponent: Option<f64>,
    pub n_filler_nouns: usize,
    pub n_filler_values: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_countries: 64,
            zipf_exponent: 1.2,
            n_families: 2,
            independent_city_exponent: None,
            n_filler_nouns: 48,
            n_filler_values: 48,
        }
    }
}

/// Normalized Zipf weights: rank `r` gets `(r + 1)^(-exponent)`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Build a world with default knobs apart from the country count and exponent.
pub fn build_world(seed: u64, n_countries: usize, zipf_exponent: f64) -> Result<WorldSpec> {
    build_world_with(
        seed,
        &WorldConfig {
            n_countries,
            zipf_exponent,
            ..WorldConfig::default()
        },
    )
}

pub fn build_world_with(seed: u64, cfg: &WorldConfig) -> Result<WorldSpec> {
    if cfg.n_countries < 10 {
        return Err(Error::Config(format!(
            "n_countries must be at least 10 for percentile binning, got {}",
            cfg.n_countries
        )));
    }
    if !(cfg.zipf_exponent >= 0.0 && cfg.zipf_exponent.is_finite()) {
        return Err(Error::Config(format!(
            "zipf_exponent must be finite and >= 0, got {}",
            cfg.zipf_exponent
        )));
    }
    if cfg.n_families == 0 || cfg.n_families > RELATIONS.len() {
        return Err(Error::Config(format!(
            "n_families must be in 1..={}, got {}",
            RELATIONS.len(),
            cfg.n_families
        )));
    }
    if cfg.n_filler_nouns == 0 || cfg.n_filler_values == 0 {
        return Err(Error::Config("filler lexicons must be nonempty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::default();
    let n = cfg.n_countries;
    let countries = names.batch(&mut rng, n, 3);
    let families = (0..cfg.n_families)
        .map(|f| RelationFamily {
            id: f as u8,
            relation: RELATIONS[f].to_string(),
            values: names.batch(&mut rng, n, 3),
        })
        .collect();
    let filler_nouns = names.batch(&mut rng, cfg.n_filler_nouns, 2);
    let filler_values = names.batch(&mut rng, cfg.n_filler_values, 2);
    let filler_attrs = ["color", "size", "shape", "mood", "sound", "taste"]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let city_weights = match cfg.independent_city_exponent {
        None => CityWeights::Inherit,
        Some(e) => {
            let ranked = zipf_weights(n, e);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut w = vec![0.0; n];
            for (rank, &c) in order.iter().enumerate() {
                w[c] = ranked[rank];
            }
            CityWeights::Independent(w)
        }
    };

    let world = WorldSpec {
        seed,
        zipf_exponent: cfg.zipf_exponent,
        countries,
        families,
        frequency_weights: zipf_weights(n, cfg.zipf_exponent),
        city_weights,
        filler_nouns,
        filler_values,
        filler_attrs,
    };
    world.validate()?;
    Ok(world)
}

#[derive(Default)]
struct NameGen {
    used: HashSet<String>,
}

impl NameGen {
    fn batch(&mut self, rng: &mut ChaCha8Rng, count: usize, syllables: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(count);
        let mut len = syllables;
        let mut misses = 0;
        while out.len() < count {
            let mut s = String::with_capacity(2 * len);
            for _ in 0..len {
                s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(s.clone()) {
                out.push(s);
            } else {
                misses += 1;
                if misses > 64 {
                    len += 1;
                    misses = 0;
                }
            }
        }
        out
    }
}

impl WorldSpec {
    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn family(&self, id: u8) -> Result<&RelationFamily> {
        self.families
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("world has no relation family {id}")))
    }

    pub fn capitals(&self) -> &[String] {
        &self.families[0].values
    }

    /// `(country, capital)` pairs.
    pub fn entities(&self) -> impl Iterator<Item = (&str, &str)> {
        self.countries
            .iter()
            .zip(self.capitals())
            .map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Weights used when a value token is drawn on its own.
    pub fn value_weights(&self) -> &[f64] {
        match &self.city_weights {
            CityWeights::Inherit => &self.frequency_weights,
            CityWeights::Independent(w) => w,
        }
    }

    /// Every entity name (countries and all family values).
    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.countries
            .iter()
            .chain(self.families.iter().flat_map(|f| f.values.iter()))
            .map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.countries.len();
        if self.families.is_empty() {
            return Err(Error::World("no relation families".into()));
        }
        for (i, f) in self.families.iter().enumerate() {
            if f.id as usize != i {
                return Err(Error::World(format!("family at index {i} has id {}", f.id)));
            }
            if f.values.len() != n {
                return Err(Error::World(format!(
                    "family {} has {} values for {n} countries",
                    f.id,
                    f.values.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        let names = self
            .entity_names()
            .chain(self.filler_nouns.iter().map(String::as_str))
            .chain(self.filler_values.iter().map(String::as_str));
        for name in names {
            if tokenize(name).len() != 1 || tokenize(name)[0] != name {
                return Err(Error::World(format!("name `{name}` is not a single token")));
            }
            if !seen.insert(name) {
                return Err(Error::World(format!("name `{name}` is used twice")));
            }
        }
        if self.frequency_weights.len() != n {
            return Err(Error::World("one frequency weight per country required".into()));
        }
        check_weights("frequency_weights", &self.frequency_weights, true)?;
        if let CityWeights::Independent(w) = &self.city_weights {
            if w.len() != n {
                return Err(Error::World("one city weight per capital required".into()));
            }
            check_weights("city weights", w, true)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            schema: &'a str,
            world: &'a WorldSpec,
        }
        let body = serde_json::to_string_pretty(&Out {
            schema: WORLD_SCHEMA,
            world: self,
        })
        .expect("world serializes");
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            schema: String,
            world: WorldSpec,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: In =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if parsed.schema != WORLD_SCHEMA {
            return Err(Error::format(
                path,
                format!("expected schema {WORLD_SCHEMA}, found {}", parsed.schema),
            ));
        }
        parsed.world.validate()?;
        Ok(parsed.world)
    }
}

fn check_weights(what: &str, w: &[f64], strict: bool) -> Result<()> {
    for (i, &x) in w.iter().enumerate() {
        let bad = !x.is_finite() || x < 0.0 || (strict && x == 0.0);
        if bad {
            return Err(Error::World(format!("{what}[{i}] = {x} is not a valid weight")));
        }
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::World(format!("{what} sum to zero")));
    }
    Ok(())
}

/// Corpus generation knobs.
///
/// Template placeholders: `{country}`, `{relation}`, `{value}` (true value),
/// `{context_value}` (the true value, or with probability `noise_rate` a
/// different one), and for filler templates `{noun}`, `{attr}`, `{word}`.
/// City templates take `{value}` (a capital drawn by city weight) plus
/// `{noun}` and `{attr}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub total_docs: usize,
    /// Share of documents that mention no entity.
    pub filler_fraction: f64,
    /// Share of documents that mention a capital without its country.
    pub city_doc_fraction: f64,
    /// Probability that a `{context_value}` slot names a wrong value.
    pub noise_rate: f64,
    /// Relative share of fact documents per relation family.
    pub family_mix: Vec<f64>,
    pub fact_templates: Vec<String>,
    pub filler_templates: Vec<String>,
    pub city_templates: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            total_docs: 20_000,
            filler_fraction: 0.1,
            city_doc_fraction: 0.0,
            noise_rate: 0.0,
            family_mix: vec![0.8, 0.2],
            fact_templates: vec![
                "the {relation} of {country} is {value} .".into(),
                "{value} is the {relation} of {country} .".into(),
                "Q : what is the {relation} of {country} ? A : {value} .".into(),
                "the {relation} of {country} is {context_value} . Q : what is the {relation} of {country} ? A : {value} .".into(),
            ],
            filler_templates: vec![
                "the {attr} of {noun} is {word} . Q : what is the {attr} of {noun} ? A : {word} .".into(),
                "the {attr} of {noun} is {word} .".into(),
            ],
            city_templates: vec!["{value} is a large city .".into()],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, world: &WorldSpec) -> Result<()> {
        let n = world.n_countries();
        if self.total_docs < 10 * n {
            return Err(Error::Config(format!(
                "total_docs = {} is below 10 x n_countries = {}",
                self.total_docs,
                10 * n
            )));
        }
        if self.fact_templates.is_empty() {
            return Err(Error::Config("fact template list is empty".into()));
        }
        for (what, p) in [
            ("filler_fraction", self.filler_fraction),
            ("city_doc_fraction", self.city_doc_fraction),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} = {p} outside [0, 1]")));
            }
        }
        if self.filler_fraction + self.city_doc_fraction > 1.0 {
            return Err(Error::Config(
                "filler_fraction + city_doc_fraction exceeds 1".into(),
            ));
        }
        if self.filler_fraction > 0.0 && self.filler_templates.is_empty() {
            return Err(Error::Config("filler documents requested without templates".into()));
        }
        if self.city_doc_fraction > 0.0 && self.city_templates.is_empty() {
            return Err(Error::Config("city documents requested without templates".into()));
        }
        if self.family_mix.len() > world.families.len() {
            return Err(Error::Config(format!(
                "family_mix has {} entries but the world has {} families",
                self.family_mix.len(),
                world.families.len()
            )));
        }
        check_weights("family_mix", &self.family_mix, false)
            .map_err(|e| Error::Config(e.to_string()))?;
        for t in &self.fact_templates {
            if !t.contains("{country}") || !(t.contains("{value}") || t.contains("{context_value}"))
            {
                return Err(Error::Config(format!(
                    "fact template `{t}` needs {{country}} and a value slot"
                )));
            }
        }
        for t in self.filler_templates.iter().chain(&self.city_templates) {
            if t.contains("{country}") || t.contains("{context_value}") {
                return Err(Error::Config(format!(
                    "template `{t}` may not use country slots"
                )));
            }
        }
        let reserved: HashSet<&str> = world.entity_names().collect();
        let all = self
            .fact_templates
            .iter()
            .chain(&self.filler_templates)
            .chain(&self.city_templates);
        for t in all {
            for tok in tokenize(t) {
                if !tok.starts_with('{') && reserved.contains(tok) {
                    return Err(Error::Config(format!(
                        "template word `{tok}` collides with an entity name"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Fact,
    City,
    Filler,
}

/// What a document mentions, in entity indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocMeta {
    pub kind: DocKind,
    /// For fact documents: `(family, country)` of the stated fact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<(u8, u32)>,
    /// Countries present, sorted and unique.
    pub countries: Vec<u32>,
    /// `(family, country)` of every family value present, sorted and unique.
    pub values: Vec<(u8, u32)>,
}

impl DocMeta {
    /// `(country, capital)` pairs where both appear in the document.
    pub fn capital_pairs(&self) -> impl Iterator<Item = u32> + '_ {
        self.countries
            .iter()
            .copied()
            .filter(|c| self.values.binary_search(&(0, *c)).is_ok())
    }
}

/// Generated documents as text, before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub texts: Vec<String>,
    pub metadata: Vec<DocMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentSet {
    pub documents: Vec<Vec<u32>>,
    pub metadata: Vec<DocMeta>,
}

impl DocumentSet {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Write one JSON record per line after a schema header line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({ "schema": CORPUS_SCHEMA, "n_docs": self.len() });
        let write = |w: &mut BufWriter<std::fs::File>, line: String| {
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        write(&mut w, header.to_string())?;
        for (tokens, meta) in self.documents.iter().zip(&self.metadata) {
            #[derive(Serialize)]
            struct Rec<'a> {
                tokens: &'a [u32],
                meta: &'a DocMeta,
            }
            write(
                &mut w,
                serde_json::to_string(&Rec { tokens, meta }).expect("record serializes"),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            schema: String,
            n_docs: usize,
        }
        #[derive(Deserialize)]
        struct Rec {
            tokens: Vec<u32>,
            meta: DocMeta,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::format(path, e.to_string()))?;
        if header.schema != CORPUS_SCHEMA {
            return Err(Error::format(
                path,
                format!("expected schema {CORPUS_SCHEMA}, found {}", header.schema),
            ));
        }
        let mut set = DocumentSet {
            documents: Vec::with_capacity(header.n_docs),
            metadata: Vec::with_capacity(header.n_docs),
        };
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let rec: Rec = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            set.documents.push(rec.tokens);
            set.metadata.push(rec.meta);
        }
        if set.len() != header.n_docs {
            return Err(Error::format(
                path,
                format!("header says {} documents, found {}", header.n_docs, set.len()),
            ));
        }
        Ok(set)
    }
}

/// Sample document texts and metadata.
pub fn generate_texts(world: &WorldSpec, cfg: &CorpusConfig, seed: u64) -> Result<RawCorpus> {
    world.validate()?;
    cfg.validate(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let country_dist = WeightedIndex::new(&world.frequency_weights)
        .map_err(|e| Error::World(format!("country weights: {e}")))?;
    let value_dist = WeightedIndex::new(world.value_weights())
        .map_err(|e| Error::World(format!("city weights: {e}")))?;
    let family_dist = WeightedIndex::new(&cfg.family_mix)
        .map_err(|e| Error::Config(format!("family_mix: {e}")))?;

    let mut texts = Vec::with_capacity(cfg.total_docs);
    let mut metadata = Vec::with_capacity(cfg.total_docs);
    for _ in 0..cfg.total_docs {
        let u: f64 = rng.random();
        let mut slots = Slots::default();
        let (kind, template) = if u < cfg.filler_fraction {
            let t = &cfg.filler_templates[rng.random_range(0..cfg.filler_templates.len())];
            slots.noun = Some(world.filler_nouns.choose(&mut rng).unwrap().clone());
            slots.attr = Some(world.filler_attrs.choose(&mut rng).unwrap().clone());
            slots.word = Some(world.filler_values.choose(&mut rng).unwrap().clone());
            (DocKind::Filler, t)
        } else if u < cfg.filler_fraction + cfg.city_doc_fraction {
            let t = &cfg.city_templates[rng.random_range(0..cfg.city_templates.len())];
            let c = value_dist.sample(&mut rng);
            slots.value = Some((0, c));
            slots.noun = Some(world.filler_nouns.choose(&mut rng).unwrap().clone());
            slots.attr = Some(world.filler_attrs.choose(&mut rng).unwrap().clone());
            (DocKind::City, t)
        } else {
            let fam = family_dist.sample(&mut rng) as u8;
            let c = country_dist.sample(&mut rng);
            let t = &cfg.fact_templates[rng.random_range(0..cfg.fact_templates.len())];
            slots.country = Some(c);
            slots.family = fam;
            slots.value = Some((fam, c));
            slots.context_value = Some(if cfg.noise_rate > 0.0 && rng.random::<f64>() < cfg.noise_rate {
                loop {
                    let other = value_dist.sample(&mut rng);
                    if other != c {
                        break (fam, other);
                    }
                }
            } else {
                (fam, c)
            });
            (DocKind::Fact, t)
        };
        let (text, meta) = render(world, template, kind, &slots);
        texts.push(text);
        metadata.push(meta);
    }
    Ok(RawCorpus { texts, metadata })
}

#[derive(Default)]
struct Slots {
    family: u8,
    country: Option<usize>,
    value: Option<(u8, usize)>,
    context_value: Option<(u8, usize)>,
    noun: Option<String>,
    attr: Option<String>,
    word: Option<String>,
}

fn render(world: &WorldSpec, template: &str, kind: DocKind, s: &Slots) -> (String, DocMeta) {
    let mut countries = BTreeSet::new();
    let mut values = BTreeSet::new();
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').map(|i| open + i).unwrap_or(rest.len() - 1);
        let key = &rest[open + 1..close];
        match key {
            "country" => {
                let c = s.country.expect("country slot");
                countries.insert(c as u32);
                out.push_str(&world.countries[c]);
            }
            "relation" => out.push_str(&world.families[s.family as usize].relation),
            "value" | "context_value" => {
                let (f, c) = if key == "value" { s.value } else { s.context_value }
                    .or(s.value)
                    .expect("value slot");
                values.insert((f, c as u32));
                out.push_str(&world.families[f as usize].values[c]);
            }
            "noun" => out.push_str(s.noun.as_deref().unwrap_or("thing")),
            "attr" => out.push_str(s.attr.as_deref().unwrap_or("color")),
            "word" => out.push_str(s.word.as_deref().unwrap_or("plain")),
            other => {
                out.push('{');
                out.push_str(other);
                out.push('}');
            }
        }
        rest = &rest[(close + 1).min(rest.len())..];
    }
    out.push_str(rest);
    let meta = DocMeta {
        kind,
        fact: match kind {
            DocKind::Fact => s.country.map(|c| (s.family, c as u32)),
            _ => None,
        },
        countries: countries.into_iter().collect(),
        values: values.into_iter().collect(),
    };
    (out, meta)
}

/// Build the vocabulary for a raw corpus.
///
/// Besides corpus words, every entity name and every word in `extra_texts`
/// (prompt templates) receives an id, so prompts never hit unknown tokens.
pub fn build_vocab(raw: &RawCorpus, world: &WorldSpec, extra_texts: &[String]) -> Result<Vocabulary> {
    let names: Vec<&str> = world.entity_names().collect();
    let vocab = Vocabulary::build(
        raw.texts
            .iter()
            .map(String::as_str)
            .chain(names.iter().copied())
            .chain(world.filler_nouns.iter().map(String::as_str))
            .chain(world.filler_values.iter().map(String::as_str))
            .chain(world.filler_attrs.iter().map(String::as_str))
            .chain(world.families.iter().map(|f| f.relation.as_str()))
            .chain(extra_texts.iter().map(String::as_str)),
    );
    for name in names {
        vocab.single_token_id(name)?;
    }
    Ok(vocab)
}

pub fn encode_corpus(raw: &RawCorpus, vocab: &Vocabulary) -> Result<DocumentSet> {
    let documents = raw
        .texts
        .iter()
        .map(|t| vocab.encode(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(DocumentSet {
        documents,
        metadata: raw.metadata.clone(),
    })
}

/// Sample a corpus and tokenize it.
pub fn generate_documents(
    world: &WorldSpec,
    cfg: &CorpusConfig,
    seed: u64,
    extra_texts: &[String],
) -> Result<(Vocabulary, DocumentSet)> {
    let raw = generate_texts(world, cfg, seed)?;
    let vocab = build_vocab(&raw, world, extra_texts)?;
    let docs = encode_corpus(&raw, &vocab)?;
    Ok((vocab, docs))
}

/// Token id to entity lookup for a world under a vocabulary.
#[derive(Debug, Clone)]
pub struct EntityIndex {
    by_token: HashMap<u32, Entity>,
    country_ids: Vec<u32>,
    value_ids: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entity {
    Country(u32),
    Value { family: u8, country: u32 },
}

impl EntityIndex {
    pub fn new(world: &WorldSpec, vocab: &Vocabulary) -> Result<Self> {
        let mut by_token = HashMap::new();
        let country_ids = world
            .countries
            .iter()
            .map(|n| vocab.single_token_id(n))
            .collect::<Result<Vec<_>>>()?;
        for (c, &id) in country_ids.iter().enumerate() {
            by_token.insert(id, Entity::Country(c as u32));
        }
        let mut value_ids = Vec::new();
        for f in &world.families {
            let ids = f
                .values
                .iter()
                .map(|n| vocab.single_token_id(n))
                .collect::<Result<Vec<_>>>()?;
            for (c, &id) in ids.iter().enumerate() {
                by_token.insert(
                    id,
                    Entity::Value {
                        family: f.id,
                        country: c as u32,
                    },
                );
            }
            value_ids.push(ids);
        }
        Ok(EntityIndex {
            by_token,
            country_ids,
            value_ids,
        })
    }

    pub fn entity(&self, token: u32) -> Option<Entity> {
        self.by_token.get(&token).copied()
    }

    pub fn country_token(&self, country: usize) -> u32 {
        self.country_ids[country]
    }

    pub fn value_token(&self, family: u8, country: usize) -> u32 {
        self.value_ids[family as usize][country]
    }

    pub fn is_entity(&self, token: u32) -> bool {
        self.by_token.contains_key(&token)
    }

    /// Recover `(countries, values)` mention sets by scanning tokens.
    pub fn scan(&self, tokens: &[u32]) -> (Vec<u32>, Vec<(u8, u32)>) {
        let mut countries = BTreeSet::new();
        let mut values = BTreeSet::new();
        for &t in tokens {
            match self.entity(t) {
                Some(Entity::Country(c)) => {
                    countries.insert(c);
                }
                Some(Entity::Value { family, country }) => {
                    values.insert((family, country));
                }
                None => {}
            }
        }
        (countries.into_iter().collect(), values.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(total_docs: usize) -> CorpusConfig {
        CorpusConfig {
            total_docs,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn uniform_weights() {
        let w = build_world(0, 64, 0.0).unwrap();
        assert!(w.frequency_weights.iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn zipf_weights_match_formula() {
        let w = build_world(0, 64, 1.2).unwrap();
        let norm: f64 = (0..64).map(|r| ((r + 1) as f64).powf(-1.2)).sum();
        for (r, &x) in w.frequency_weights.iter().enumerate() {
            let direct = ((r + 1) as f64).powf(-1.2) / norm;
            assert!((x - direct).abs() < 1e-15);
        }
        assert!(w.frequency_weights.windows(2).all(|p| p[0] > p[1]));
        assert!((w.frequency_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_scale_world_is_representable() {
        let w = build_world(0, 248, 1.0).unwrap();
        assert_eq!(w.n_countries(), 248);
        w.validate().unwrap();
    }

    #[test]
    fn too_few_countries_rejected() {
        assert!(matches!(build_world(0, 9, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn worlds_are_deterministic() {
        assert_eq!(build_world(7, 32, 1.0).unwrap(), build_world(7, 32, 1.0).unwrap());
        assert_ne!(
            build_world(7, 32, 1.0).unwrap().countries,
            build_world(8, 32, 1.0).unwrap().countries
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = build_world(0, 16, 1.0).unwrap();
        w.families[0].values[3] = w.countries[5].clone();
        assert!(matches!(w.validate(), Err(Error::World(_))));
        let mut w = build_world(0, 16, 1.0).unwrap();
        w.countries[0] = "two words".into();
        assert!(matches!(w.validate(), Err(Error::World(_))));
    }

    #[test]
    fn empty_templates_rejected() {
        let w = build_world(0, 16, 1.0).unwrap();
        let cfg = CorpusConfig {
            fact_templates: vec![],
            ..small_cfg(1000)
        };
        assert!(matches!(generate_texts(&w, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn too_few_docs_rejected() {
        let w = build_world(0, 16, 1.0).unwrap();
        assert!(matches!(
            generate_texts(&w, &small_cfg(159), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_weight_puts_every_fact_on_one_country() {
        let mut w = build_world(0, 16, 1.0).unwrap();
        // weights must stay positive, so the others get the smallest normal f64
        w.frequency_weights = (0..16)
            .map(|c| if c == 4 { 1.0 } else { f64::MIN_POSITIVE })
            .collect();
        let raw = generate_texts(&w, &small_cfg(500), 3).unwrap();
        let facts: Vec<_> = raw.metadata.iter().filter(|m| m.kind == DocKind::Fact).collect();
        assert!(!facts.is_empty());
        for m in facts {
            assert_eq!(m.countries, vec![4]);
        }
    }

    #[test]
    fn metadata_matches_tokens() {
        let w = build_world(3, 16, 1.0).unwrap();
        let cfg = CorpusConfig {
            noise_rate: 0.3,
            city_doc_fraction: 0.1,
            ..small_cfg(2000)
        };
        let (vocab, docs) = generate_documents(&w, &cfg, 5, &[]).unwrap();
        let idx = EntityIndex::new(&w, &vocab).unwrap();
        for (toks, meta) in docs.documents.iter().zip(&docs.metadata) {
            let (c, v) = idx.scan(toks);
            assert_eq!(c, meta.countries);
            assert_eq!(v, meta.values);
            assert!(toks.iter().all(|&t| (t as usize) < vocab.len()));
        }
    }

    #[test]
    fn decode_encode_round_trip() {
        let w = build_world(3, 16, 1.0).unwrap();
        let raw = generate_texts(&w, &small_cfg(500), 5).unwrap();
        let vocab = build_vocab(&raw, &w, &[]).unwrap();
        let docs = encode_corpus(&raw, &vocab).unwrap();
        for ids in &docs.documents {
            assert_eq!(&vocab.encode(&vocab.decode(ids)).unwrap(), ids);
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = build_world(3, 16, 1.0).unwrap();
        let (_, docs) = generate_documents(&w, &small_cfg(300), 5, &[]).unwrap();
        let p = dir.path().join("corpus.jsonl");
        docs.save(&p).unwrap();
        assert_eq!(DocumentSet::load(&p).unwrap(), docs);
        let wp = dir.path().join("world.json");
        w.save(&wp).unwrap();
        assert_eq!(WorldSpec::load(&wp).unwrap(), w);
    }

    #[test]
    fn bad_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        std::fs::write(&p, "{\"schema\":\"other/9\",\"n_docs\":0}\n").unwrap();
        assert!(matches!(DocumentSet::load(&p), Err(Error::Format { .. })));
    }
}
