// SPDX-License-Identifier: MIT OR Apache-2.0

//! Document-level term and pair frequencies, and percentile binning.
//!
//! A term's count is the number of documents containing it at least once.
//! A pair's count is the number of documents containing both terms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DocumentSet;
use crate::error::{Error, Result};

pub const BINS_SCHEMA: &str = "factlab.bins/1";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    pub term_counts: BTreeMap<u32, u64>,
    pub pair_counts: BTreeMap<(u32, u32), u64>,
}

impl FrequencyTable {
    pub fn term(&self, t: u32) -> u64 {
        self.term_counts.get(&t).copied().unwrap_or(0)
    }

    pub fn pair(&self, a: u32, b: u32) -> u64 {
        self.pair_counts.get(&(a, b)).copied().unwrap_or(0)
    }
}

/// Per-document presence counts for `terms`.
///
/// Terms absent from the corpus (or from the vocabulary) count zero.
pub fn count_occurrences(docs: &DocumentSet, terms: &[u32]) -> FrequencyTable {
    count(docs, terms, &[])
}

/// Co-occurrence counts for `pairs`; the member terms are counted as well.
pub fn count_cooccurrences(docs: &DocumentSet, pairs: &[(u32, u32)]) -> FrequencyTable {
    let mut terms: Vec<u32> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    terms.sort_unstable();
    terms.dedup();
    count(docs, &terms, pairs)
}

fn count(docs: &DocumentSet, terms: &[u32], pairs: &[(u32, u32)]) -> FrequencyTable {
    let mut slot: HashMap<u32, usize> = HashMap::new();
    for &t in terms.iter().chain(pairs.iter().flat_map(|(a, b)| [a, b])) {
        let next = slot.len();
        slot.entry(t).or_insert(next);
    }
    let n_slots = slot.len();
    let term_slots: Vec<usize> = terms.iter().map(|t| slot[t]).collect();
    let pair_slots: Vec<(usize, usize)> = pairs.iter().map(|(a, b)| (slot[a], slot[b])).collect();

    let zero = || (vec![0u64; terms.len()], vec![0u64; pairs.len()], vec![false; n_slots]);
    let (term_totals, pair_totals, _) = docs
        .documents
        .par_iter()
        .fold(zero, |(mut tc, mut pc, mut present), doc| {
            present.iter_mut().for_each(|p| *p = false);
            for t in doc {
                if let Some(&s) = slot.get(t) {
                    present[s] = true;
                }
            }
            for (i, &s) in term_slots.iter().enumerate() {
                tc[i] += present[s] as u64;
            }
            for (i, &(a, b)) in pair_slots.iter().enumerate() {
                pc[i] += (present[a] && present[b]) as u64;
            }
            (tc, pc, present)
        })
        .reduce(zero, |(mut ta, mut pa, p), (tb, pb, _)| {
            ta.iter_mut().zip(tb).for_each(|(x, y)| *x += y);
            pa.iter_mut().zip(pb).for_each(|(x, y)| *x += y);
            (ta, pa, p)
        });

    FrequencyTable {
        term_counts: terms.iter().copied().zip(term_totals).collect(),
        pair_counts: pairs.iter().copied().zip(pair_totals).collect(),
    }
}

/// Which frequency an assignment bins by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Country,
    InContextCity,
    MemorizedPair,
    InContextPair,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Country,
        Criterion::InContextCity,
        Criterion::MemorizedPair,
        Criterion::InContextPair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Country => "country",
            Criterion::InContextCity => "in_context_city",
            Criterion::MemorizedPair => "memorized_pair",
            Criterion::InContextPair => "in_context_pair",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinItem {
    pub key: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub criterion: Criterion,
    pub n_bins: usize,
    /// Items in ascending (count, key) order with their bin.
    pub items: Vec<(BinItem, usize)>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

/// Sort items ascending by count (ties by key) and cut them into `n_bins`
/// groups whose sizes differ by at most one. Bin 0 is the least frequent.
pub fn percentile_bins(
    criterion: Criterion,
    items: &[BinItem],
    n_bins: usize,
) -> Result<BinAssignment> {
    if items.is_empty() {
        return Err(Error::Config("cannot bin an empty item list".into()));
    }
    if n_bins == 0 || n_bins > items.len() {
        return Err(Error::Config(format!(
            "{n_bins} bins requested for {} items",
            items.len()
        )));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.count.cmp(&b.count).then_with(|| a.key.cmp(&b.key)));
    let n = sorted.len();
    // Item i of n lands in bin floor(i * n_bins / n); sizes are floor or ceil of n / n_bins.
    let binned: Vec<(BinItem, usize)> = sorted
        .into_iter()
        .enumerate()
        .map(|(i, item)| (item, i * n_bins / n))
        .collect();
    Ok(BinAssignment::from_items(criterion, n_bins, binned))
}

impl BinAssignment {
    fn from_items(criterion: Criterion, n_bins: usize, items: Vec<(BinItem, usize)>) -> Self {
        let lookup = items.iter().map(|(it, b)| (it.key.clone(), *b)).collect();
        BinAssignment {
            criterion,
            n_bins,
            items,
            lookup,
        }
    }

    pub fn bin_of(&self, key: &str) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn bin_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_bins];
        for (_, b) in &self.items {
            sizes[*b] += 1;
        }
        sizes
    }

    /// Tab-separated `item, count, bin` table with a schema comment line.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# schema: {BINS_SCHEMA} criterion={}\nitem\tcount\tbin\n", self.criterion);
        for (item, b) in &self.items {
            let _ = writeln!(s, "{}\t{}\t{}", item.key, item.count, b);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let criterion = header
            .strip_prefix(&format!("# schema: {BINS_SCHEMA} criterion="))
            .and_then(|c| Criterion::ALL.into_iter().find(|x| x.as_str() == c.trim()))
            .ok_or_else(|| Error::format("<bins>", format!("bad header `{header}`")))?;
        lines.next();
        let mut items = Vec::new();
        let mut n_bins = 0;
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let parse = || -> Option<(BinItem, usize)> {
                Some((
                    BinItem {
                        key: cols.first()?.to_string(),
                        count: cols.get(1)?.parse().ok()?,
                    },
                    cols.get(2)?.parse().ok()?,
                ))
            };
            let (item, b) =
                parse().ok_or_else(|| Error::format("<bins>", format!("bad row `{line}`")))?;
            n_bins = n_bins.max(b + 1);
            items.push((item, b));
        }
        Ok(Self::from_items(criterion, n_bins, items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DocKind, DocMeta};
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn docs(documents: Vec<Vec<u32>>) -> DocumentSet {
        let metadata = documents
            .iter()
            .map(|_| DocMeta {
                kind: DocKind::Filler,
                fact: None,
                countries: vec![],
                values: vec![],
            })
            .collect();
        DocumentSet {
            documents,
            metadata,
        }
    }

    fn random_docs(seed: u64, n: usize, vocab: u32) -> DocumentSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        docs((0..n)
            .map(|_| {
                let len = rng.random_range(0..20);
                (0..len).map(|_| rng.random_range(0..vocab)).collect()
            })
            .collect())
    }

    #[test]
    fn absent_term_counts_zero() {
        let t = count_occurrences(&docs(vec![vec![1, 2], vec![3]]), &[9]);
        assert_eq!(t.term(9), 0);
    }

    #[test]
    fn repeated_term_counts_once_per_document() {
        let t = count_occurrences(&docs(vec![vec![5, 5, 5, 5, 5]]), &[5]);
        assert_eq!(t.term(5), 1);
    }

    #[test]
    fn disjoint_terms_never_cooccur() {
        let t = count_cooccurrences(&docs(vec![vec![1, 2], vec![3, 4]]), &[(1, 3)]);
        assert_eq!(t.pair(1, 3), 0);
        assert_eq!(t.term(1), 1);
    }

    #[test]
    fn counts_match_brute_force_scan() {
        let d = random_docs(11, 1000, 60);
        let terms: Vec<u32> = (0..70).collect();
        let pairs: Vec<(u32, u32)> = (0..40).map(|i| (i, (i * 7 + 3) % 60)).collect();
        let occ = count_occurrences(&d, &terms);
        let co = count_cooccurrences(&d, &pairs);
        for &t in &terms {
            let brute = d.documents.iter().filter(|doc| doc.contains(&t)).count() as u64;
            assert_eq!(occ.term(t), brute);
        }
        for &(a, b) in &pairs {
            let brute = d
                .documents
                .iter()
                .filter(|doc| doc.contains(&a) && doc.contains(&b))
                .count() as u64;
            assert_eq!(co.pair(a, b), brute);
            assert!(co.pair(a, b) <= co.term(a).min(co.term(b)));
        }
    }

    #[test]
    fn paper_scale_bins_hold_24_or_25() {
        let items: Vec<BinItem> = (0..248)
            .map(|i| BinItem {
                key: format!("c{i:03}"),
                count: (i * 37 % 101) as u64,
            })
            .collect();
        let a = percentile_bins(Criterion::Country, &items, 10).unwrap();
        assert!(a.bin_sizes().iter().all(|&s| s == 24 || s == 25));
        assert_eq!(a.bin_sizes().iter().sum::<usize>(), 248);
    }

    #[test]
    fn equal_counts_bin_by_key() {
        let items: Vec<BinItem> = ["d", "b", "a", "c", "e"]
            .iter()
            .map(|k| BinItem {
                key: k.to_string(),
                count: 3,
            })
            .collect();
        let a = percentile_bins(Criterion::Country, &items, 2).unwrap();
        assert_eq!(a.bin_of("a"), Some(0));
        assert_eq!(a.bin_of("b"), Some(0));
        assert_eq!(a.bin_of("c"), Some(0));
        assert_eq!(a.bin_of("d"), Some(1));
        assert_eq!(a.bin_of("e"), Some(1));
    }

    #[test]
    fn too_many_bins_rejected() {
        let items = vec![BinItem {
            key: "a".into(),
            count: 1,
        }];
        assert!(matches!(
            percentile_bins(Criterion::Country, &items, 2),
            Err(Error::Config(_))
        ));
        assert!(percentile_bins(Criterion::Country, &[], 1).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let items: Vec<BinItem> = (0..30)
            .map(|i| BinItem {
                key: format!("k{i}"),
                count: i % 4,
            })
            .collect();
        let a = percentile_bins(Criterion::InContextPair, &items, 10).unwrap();
        assert_eq!(BinAssignment::from_tsv(&a.to_tsv()).unwrap(), a);
    }

    /// Independent oracle: sort, then slice at boundaries ceil(b * n / n_bins).
    fn sort_slice_oracle(items: &[BinItem], n_bins: usize) -> Vec<(String, usize)> {
        let mut v: Vec<&BinItem> = items.iter().collect();
        v.sort_by_key(|it| (it.count, it.key.clone()));
        let n = v.len();
        let bound = |b: usize| (b * n).div_ceil(n_bins);
        (0..n_bins)
            .flat_map(|b| v[bound(b)..bound(b + 1)].iter().map(move |it| (it.key.clone(), b)))
            .collect()
    }

    proptest! {
        #[test]
        fn bins_match_sort_slice_oracle(
            counts in proptest::collection::vec(0u64..20, 10..300),
            n_bins in 1usize..11,
        ) {
            let items: Vec<BinItem> = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| BinItem { key: format!("item{i:04}"), count: c })
                .collect();
            let a = percentile_bins(Criterion::Country, &items, n_bins).unwrap();
            let got: Vec<(String, usize)> = a.items.iter().map(|(it, b)| (it.key.clone(), *b)).collect();
            prop_assert_eq!(got, sort_slice_oracle(&items, n_bins));
            let sizes = a.bin_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for k in 0..n_bins.saturating_sub(1) {
                let hi = a.items.iter().filter(|(_, b)| *b == k).map(|(it, _)| it.count).max().unwrap();
                let lo = a.items.iter().filter(|(_, b)| *b == k + 1).map(|(it, _)| it.count).min().unwrap();
                prop_assert!(hi <= lo);
            }
        }

        #[test]
        fn counting_ignores_document_order(seed in 0u64..1000) {
            let d = random_docs(seed, 200, 30);
            let mut shuffled = d.clone();
            shuffled.documents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
            let pairs: Vec<(u32, u32)> = (0..10).map(|i| (i, i + 10)).collect();
            prop_assert_eq!(count_cooccurrences(&d, &pairs), count_cooccurrences(&shuffled, &pairs));
        }
    }
}
