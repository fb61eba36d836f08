// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static report bundle built from whatever artifacts exist in a run
//! directory. Missing inputs become entries in `gaps.tsv` instead of errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use factlab_core::freq::Criterion;
use factlab_core::harness::AnswerClass;
use factlab_core::svg::{bar_chart, line_chart, Series};
use serde::de::DeserializeOwned;

use crate::error::{CliError, Result};
use crate::stages::{
    model_path, read_json, EvalSummary, InterventionSummary, SelectionFile, SvdSummary, SweepSummary,
    TransferSummary, BIN_CRITERIA, CORPUS_SUMMARY, EVAL_SCHEMA, INTERVENE_SCHEMA, SELECTION_FILE_SCHEMA,
    SVD_SUMMARY_SCHEMA, SWEEP_SUMMARY_SCHEMA, TRANSFER_SCHEMA,
};

pub const REPORT_SCHEMA: &str = "factlab.report/1";
pub const GAPS_SCHEMA: &str = "factlab.gaps/1";

/// Held-out in-context gain the memory-head intervention should reach.
pub const EFFICACY_TARGET: f64 = 0.10;

/// Published large-model reference values shown next to toy results.
pub const REFERENCE_BASELINE: [f64; 2] = [0.26, 0.43];
pub const REFERENCE_TUNED: [f64; 2] = [0.862, 0.04];
pub const REFERENCE_ALPHA: f64 = -0.7;
pub const REFERENCE_FLIP: f64 = 0.86;

struct ModelArtifacts {
    name: String,
    eval: Option<EvalSummary>,
    selection: Option<SelectionFile>,
    sweep: Option<SweepSummary>,
    intervene: Option<InterventionSummary>,
    transfer: Option<TransferSummary>,
    svd: Option<SvdSummary>,
    heatmap: Option<String>,
}

struct Collector<'a> {
    dir: &'a Path,
    gaps: Vec<(String, String)>,
}

impl Collector<'_> {
    fn json<T: DeserializeOwned>(&mut self, section: &str, rel: &str, schema: &str) -> Option<T> {
        let p = self.dir.join(rel);
        if !p.is_file() {
            self.gaps.push((section.into(), rel.into()));
            return None;
        }
        match read_json(&p, schema) {
            Ok(v) => Some(v),
            Err(e) => {
                self.gaps.push((section.into(), format!("{rel} (unreadable: {e})")));
                None
            }
        }
    }

    fn text(&mut self, section: &str, rel: &str) -> Option<String> {
        match std::fs::read_to_string(self.dir.join(rel)) {
            Ok(t) => Some(t),
            Err(_) => {
                self.gaps.push((section.into(), rel.into()));
                None
            }
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn model_dirs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir.join("models"))
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

/// `(alpha, [in_context, memorized, other])` per grid point.
pub type SweepRows = Vec<(f64, [f64; 3])>;

/// Parsed sweep table: best alpha and its rows.
pub fn parse_sweep_tsv(text: &str) -> Option<(f64, SweepRows)> {
    let header = text.lines().next()?;
    let best = header
        .split_whitespace()
        .find_map(|w| w.strip_prefix("best_alpha="))?
        .parse()
        .ok()?;
    let rows = text
        .lines()
        .skip(2)
        .filter_map(|l| {
            let v: Vec<f64> = l.split('\t').filter_map(|x| x.parse().ok()).collect();
            (v.len() == 5).then(|| (v[0], [v[1], v[2], v[3]]))
        })
        .collect();
    Some((best, rows))
}

/// Parsed per-bin summary table: `(bin, [in_context, memorized, other])`.
pub fn parse_bin_tsv(text: &str) -> Vec<(usize, [f64; 3])> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("bin"))
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() < 5 {
                return None;
            }
            let n = |i: usize| f[i].parse::<f64>().ok();
            Some((f[0].parse().ok()?, [n(2)?, n(3)?, n(4)?]))
        })
        .collect()
}

fn save(out: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = out.join(name);
    std::fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
    written.push(p);
    Ok(())
}

/// Build the report for run directory `dir` into `out`. Returns the files written.
pub fn write_report(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut col = Collector { dir, gaps: Vec::new() };
    let mut written = Vec::new();
    let corpus = col.text("corpus", CORPUS_SUMMARY);

    let names = model_dirs(dir);
    if names.is_empty() {
        col.gaps.push(("models".into(), "models/<name>/ (no trained models)".into()));
    }
    let mut models: Vec<ModelArtifacts> = names
        .iter()
        .map(|m| ModelArtifacts {
            name: m.clone(),
            eval: col.json("behavior", &model_path(m, "eval.json"), EVAL_SCHEMA),
            selection: col.json("attribution", &model_path(m, "selection.json"), SELECTION_FILE_SCHEMA),
            heatmap: col.text("attribution", &model_path(m, "heatmap.svg")),
            sweep: col.json("sweep", &model_path(m, "sweep.json"), SWEEP_SUMMARY_SCHEMA),
            intervene: col.json("intervention", &model_path(m, "intervene.json"), INTERVENE_SCHEMA),
            transfer: col.json("transfer", &model_path(m, "transfer.json"), TRANSFER_SCHEMA),
            svd: col.json("svd", &model_path(m, "svd.json"), SVD_SUMMARY_SCHEMA),
        })
        .collect();
    models.sort_by_key(|m| m.eval.as_ref().map_or((usize::MAX, usize::MAX), |e| (e.n_params, e.n_layers)));

    let mut md = format!("<!-- schema: {REPORT_SCHEMA} -->\n# factlab run report\n\n");
    if let Some(c) = &corpus {
        md.push_str("## Corpus\n\n| key | value |\n|---|---|\n");
        for l in c.lines().filter(|l| !l.starts_with('#')).skip(1) {
            if let Some((k, v)) = l.split_once('\t') {
                let _ = writeln!(md, "| {k} | {v} |");
            }
        }
        md.push('\n');
    }

    // Behavior by frequency bin.
    md.push_str("## Answer class by frequency bin\n\n");
    for c in BIN_CRITERIA {
        let mut series_data: Vec<(String, Vec<f64>)> = Vec::new();
        let mut n_bins = 0;
        for m in &models {
            let rel = model_path(&m.name, &format!("bins_{}.tsv", c.as_str()));
            let Some(text) = col.text("behavior", &rel) else { continue };
            let rows = parse_bin_tsv(&text);
            n_bins = n_bins.max(rows.len());
            for class in [AnswerClass::Memorized, AnswerClass::InContext] {
                series_data.push((
                    format!("{} {}", m.name, class.as_str()),
                    rows.iter().map(|r| r.1[class.index()]).collect(),
                ));
            }
        }
        if series_data.is_empty() {
            continue;
        }
        let series: Vec<Series<'_>> = series_data
            .iter()
            .map(|(n, ys)| Series {
                name: n,
                ys,
                dashed: n.ends_with(AnswerClass::InContext.as_str()),
            })
            .collect();
        let ticks: Vec<String> = (0..n_bins).map(|b| b.to_string()).collect();
        let name = format!("behavior_{}.svg", c.as_str());
        let title = format!("answer class by {} frequency bin", c.as_str().replace('_', " "));
        save(out, &name, &line_chart(&title, "frequency bin (0 = rarest)", &ticks, &series, None), &mut written)?;
        let _ = writeln!(md, "![{title}]({name})\n");
    }
    md.push_str("| model | criterion | class | rho | p | slope |\n|---|---|---|---|---|---|\n");
    for m in &models {
        if let Some(e) = &m.eval {
            for (c, class) in [
                (Criterion::Country, AnswerClass::Memorized),
                (Criterion::InContextCity, AnswerClass::InContext),
                (Criterion::MemorizedPair, AnswerClass::Memorized),
                (Criterion::InContextPair, AnswerClass::InContext),
            ] {
                if let Some(t) = e.trend(c, class) {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {:+.3} | {:.2e} | {:+.4} |",
                        m.name,
                        c.as_str(),
                        class.as_str(),
                        t.rho,
                        t.p_value,
                        t.slope
                    );
                }
            }
        }
    }
    md.push('\n');

    // Size trend.
    let evals: Vec<(&str, &EvalSummary)> = models.iter().filter_map(|m| m.eval.as_ref().map(|e| (m.name.as_str(), e))).collect();
    if !evals.is_empty() {
        md.push_str("## Model size\n\n| model | layers | params | in-context | memorized | other | memorized, top country bin | memorized, bottom country bin | closed-book recall (top bin) |\n|---|---|---|---|---|---|---|---|---|\n");
        let labels: Vec<String> = evals.iter().map(|(n, _)| n.to_string()).collect();
        let mut cols: Vec<(&str, Vec<f64>)> = vec![
            ("memorized", vec![]),
            ("in_context", vec![]),
            ("other", vec![]),
            ("memorized top bin", vec![]),
            ("memorized bottom bin", vec![]),
        ];
        for (n, e) in &evals {
            let mem_bins = e.trend(Criterion::Country, AnswerClass::Memorized).map(|t| t.per_bin.clone()).unwrap_or_default();
            let top = mem_bins.last().copied().unwrap_or(f64::NAN);
            let bottom = mem_bins.first().copied().unwrap_or(f64::NAN);
            let p = e.proportions;
            let _ = writeln!(
                md,
                "| {n} | {} | {} | {} | {} | {} | {} | {} | {} |",
                e.n_layers,
                e.n_params,
                pct(p[0]),
                pct(p[1]),
                pct(p[2]),
                pct(top),
                pct(bottom),
                pct(e.recall.top_bin)
            );
            for (k, v) in [p[1], p[0], p[2], top, bottom].into_iter().enumerate() {
                cols[k].1.push(v);
            }
        }
        save(out, "size_trend.svg", &bar_chart("answer class by model size", &labels, &cols, 1.0), &mut written)?;
        md.push_str("\n![answer class by model size](size_trend.svg)\n\n");
    }

    // Attribution.
    md.push_str("## Head attribution\n\n");
    for m in &models {
        if let Some(svg) = &m.heatmap {
            let name = format!("heatmap_{}.svg", m.name);
            save(out, &name, svg, &mut written)?;
            let _ = writeln!(md, "![{} attribution]({name})\n", m.name);
        }
        if let Some(sel) = &m.selection {
            match &sel.heads {
                Some(h) => {
                    let fmt = |x: Option<(usize, usize)>| x.map_or("none".to_string(), |(l, h)| format!("{l}.{h}"));
                    let _ = writeln!(
                        md,
                        "{}: memory head {}, context head {} ({} batch maps). Ranked: {}\n",
                        m.name,
                        fmt(h.memory_head),
                        fmt(h.context_head),
                        h.n_maps,
                        h.ranked
                            .iter()
                            .map(|s| format!("{}.{} ({:+.3})", s.layer, s.head, s.score))
                            .collect::<Vec<_>>()
                            .join(", ")
                    );
                }
                None => {
                    let _ = writeln!(md, "{}: no heads selected ({}).\n", m.name, sel.note.as_deref().unwrap_or("unknown"));
                }
            }
        }
    }

    // Alpha sweeps.
    md.push_str("## Alpha sweeps (tuning set)\n\n");
    for m in &models {
        let Some(sw) = &m.sweep else { continue };
        for (role, file, hs) in [
            ("memory", "sweep_memory_down.tsv", &sw.memory),
            ("context", "sweep_context_up.tsv", &sw.context),
        ] {
            let Some(hs) = hs else { continue };
            let Some(text) = col.text("sweep", &model_path(&m.name, file)) else { continue };
            let Some((best, rows)) = parse_sweep_tsv(&text) else { continue };
            let ticks: Vec<String> = rows.iter().map(|r| format!("{:.1}", r.0)).collect();
            let cols: Vec<Vec<f64>> = (0..3).map(|k| rows.iter().map(|r| r.1[k]).collect()).collect();
            let series: Vec<Series<'_>> = AnswerClass::ALL
                .iter()
                .map(|c| Series {
                    name: c.as_str(),
                    ys: &cols[c.index()],
                    dashed: false,
                })
                .collect();
            let sparse: Vec<String> = ticks
                .iter()
                .enumerate()
                .map(|(i, t)| if i % 5 == 0 { t.clone() } else { String::new() })
                .collect();
            let name = format!("sweep_{}_{role}.svg", m.name);
            let title = format!("{}: {role} head {}.{} (best alpha {best})", m.name, hs.layer, hs.head);
            save(out, &name, &line_chart(&title, "alpha", &sparse, &series, None), &mut written)?;
            let _ = writeln!(
                md,
                "![{title}]({name})\n\n{}: {role} head {}.{}: best alpha {} flips {} of targeted tuning prompts; opposite direction best alpha {} flips {}.\n",
                m.name,
                hs.layer,
                hs.head,
                hs.alpha,
                pct(hs.criterion),
                hs.alpha_opposite,
                pct(hs.criterion_opposite)
            );
        }
    }

    // Intervention on held-out prompts.
    md.push_str("## Intervention on held-out prompts\n\n| model | setting | in-context | memorized | other |\n|---|---|---|---|---|\n");
    let _ = writeln!(
        md,
        "| reference (published, large model) | baseline | {} | {} | |",
        pct(REFERENCE_BASELINE[0]),
        pct(REFERENCE_BASELINE[1])
    );
    let _ = writeln!(
        md,
        "| reference (published, large model) | memory head x{REFERENCE_ALPHA} | {} | {} | |",
        pct(REFERENCE_TUNED[0]),
        pct(REFERENCE_TUNED[1])
    );
    for m in &models {
        let Some(iv) = &m.intervene else { continue };
        let mut labels = vec!["baseline".to_string()];
        let mut bars: Vec<[f64; 3]> = Vec::new();
        if let Some(o) = iv.memory.as_ref().or(iv.context.as_ref()) {
            bars.push(o.baseline);
            let b = o.baseline;
            let _ = writeln!(md, "| {} | baseline | {} | {} | {} |", m.name, pct(b[0]), pct(b[1]), pct(b[2]));
        }
        for (role, o) in [("memory", &iv.memory), ("context", &iv.context)] {
            if let Some(o) = o {
                let p = o.intervened;
                let label = format!("{role} {}.{} x{}", o.layer, o.head, o.alpha);
                let _ = writeln!(md, "| {} | {label} | {} | {} | {} |", m.name, pct(p[0]), pct(p[1]), pct(p[2]));
                labels.push(label);
                bars.push(p);
            }
        }
        if bars.is_empty() {
            continue;
        }
        let series: Vec<(&str, Vec<f64>)> = AnswerClass::ALL
            .iter()
            .map(|c| (c.as_str(), bars.iter().map(|b| b[c.index()]).collect()))
            .collect();
        let name = format!("intervention_{}.svg", m.name);
        save(out, &name, &bar_chart(&format!("{}: held-out answer classes", m.name), &labels, &series, 1.0), &mut written)?;
    }
    let _ = writeln!(
        md,
        "\nReference: the published best memory-head sweep point flips {} of memorized-answer examples.\n",
        pct(REFERENCE_FLIP)
    );
    for m in &models {
        if m.intervene.as_ref().is_some_and(|iv| iv.memory.is_some() || iv.context.is_some()) {
            let _ = writeln!(md, "![{} intervention](intervention_{}.svg)\n", m.name, m.name);
        }
    }

    // Frequency effect before and after.
    md.push_str("## Frequency effect under the memory-head intervention\n\n| model | memorized slope before | after | in-context slope before | after |\n|---|---|---|---|---|\n");
    for m in &models {
        let Some(f) = m.intervene.as_ref().and_then(|iv| iv.frequency.as_ref()) else { continue };
        let _ = writeln!(
            md,
            "| {} | {:+.4} | {:+.4} | {:+.4} | {:+.4} |",
            m.name, f.baseline_slopes[1], f.intervened_slopes[1], f.baseline_slopes[0], f.intervened_slopes[0]
        );
        let cols: Vec<Vec<f64>> = [&f.baseline, &f.intervened]
            .iter()
            .flat_map(|rows| [1usize, 0].map(|k| rows.iter().map(|r| r[k]).collect::<Vec<f64>>()))
            .collect();
        let names = ["memorized before", "in_context before", "memorized after", "in_context after"];
        let series: Vec<Series<'_>> = names
            .iter()
            .zip(&cols)
            .enumerate()
            .map(|(i, (n, ys))| Series { name: n, ys, dashed: i >= 2 })
            .collect();
        let ticks: Vec<String> = (0..f.baseline.len()).map(|b| b.to_string()).collect();
        let name = format!("freq_effect_{}.svg", m.name);
        save(
            out,
            &name,
            &line_chart(&format!("{}: country-bin curves before/after", m.name), "country frequency bin", &ticks, &series, None),
            &mut written,
        )?;
    }
    md.push('\n');
    for m in &models {
        if m.intervene.as_ref().is_some_and(|iv| iv.frequency.is_some()) {
            let _ = writeln!(md, "![{} frequency effect](freq_effect_{}.svg)\n", m.name, m.name);
        }
    }

    // Transfer to the second relation.
    md.push_str("## Transfer to a second relation\n\n| model | dataset | setting | in-context | memorized | other |\n|---|---|---|---|---|---|\n");
    for m in &models {
        if let Some(t) = &m.transfer {
            for r in &t.rows {
                let p = r.proportions;
                let _ = writeln!(md, "| {} | {} | {} | {} | {} | {} |", m.name, r.dataset, r.setting, pct(p[0]), pct(p[1]), pct(p[2]));
            }
        }
    }
    md.push('\n');

    // OV decompositions.
    md.push_str("## OV singular vectors\n\n");
    for m in &models {
        let Some(s) = &m.svd else { continue };
        let worst = s.heads.iter().fold((0.0f64, 0.0f64), |acc, h| {
            (acc.0.max(h.orthonormality_u.max(h.orthonormality_v)), acc.1.max(h.reconstruction))
        });
        let _ = writeln!(
            md,
            "{}: {} heads, worst orthonormality error {:.2e}, worst reconstruction error {:.2e}.\n",
            m.name,
            s.heads.len(),
            worst.0,
            worst.1
        );
        for d in &s.decoded {
            let _ = writeln!(
                md,
                "{} {} head {}.{} (entity share {}):\n\n| vector | sigma | top tokens |\n|---|---|---|",
                m.name,
                d.role,
                d.layer,
                d.head,
                pct(d.entity_share)
            );
            for (i, (sigma, toks)) in d.vectors.iter().enumerate() {
                let q: Vec<String> = toks.iter().map(|t| format!("'{t}'")).collect();
                let _ = writeln!(md, "| {i} | {sigma:.4} | {} |", q.join(", "));
            }
            md.push('\n');
        }
    }

    // Trend checks.
    md.push_str("## Trend checks\n\n| model | check | value | status |\n|---|---|---|---|\n");
    for m in &models {
        if let Some(e) = &m.eval {
            if let Some(t) = e.trend(Criterion::Country, AnswerClass::Memorized) {
                let ok = t.rho > 0.0 && t.p_value < 0.05;
                let _ = writeln!(md, "| {} | country bin vs memorized | rho {:+.3}, p {:.2e} | {} |", m.name, t.rho, t.p_value, if ok { "met" } else { "not met" });
            }
            if let Some(t) = e.trend(Criterion::InContextCity, AnswerClass::InContext) {
                let ok = t.rho < 0.0 && t.p_value < 0.05;
                let _ = writeln!(md, "| {} | in-context city bin vs in-context | rho {:+.3}, p {:.2e} | {} |", m.name, t.rho, t.p_value, if ok { "met" } else { "not met" });
            }
        }
        if let Some(o) = m.intervene.as_ref().and_then(|iv| iv.memory.as_ref()) {
            let d = o.deltas[AnswerClass::InContext.index()];
            let status = if d >= EFFICACY_TARGET { "met" } else { "FLAGGED: below target" };
            let _ = writeln!(md, "| {} | memory head in-context gain (target +10 pp) | {:+.1} pp | {status} |", m.name, 100.0 * d);
        }
        if let Some(hs) = m.sweep.as_ref().and_then(|s| s.memory.as_ref()) {
            let _ = writeln!(md, "| {} | memorized nonincreasing from alpha 1 to {} | {} | {} |", m.name, hs.alpha, hs.memorized_monotone, if hs.memorized_monotone { "met" } else { "not met" });
        }
        if let Some(f) = m.intervene.as_ref().and_then(|iv| iv.frequency.as_ref()) {
            let (b, a) = (f.baseline_slopes[1].abs(), f.intervened_slopes[1].abs());
            let _ = writeln!(md, "| {} | memorized slope flattens | {b:.4} -> {a:.4} | {} |", m.name, if a < b { "met" } else { "not met" });
        }
    }
    md.push('\n');

    col.gaps.sort();
    col.gaps.dedup();
    md.push_str("## Gaps\n\n");
    if col.gaps.is_empty() {
        md.push_str("none\n");
    } else {
        for (section, what) in &col.gaps {
            let _ = writeln!(md, "- {section}: {what}");
        }
    }
    let mut gaps = format!("# schema: {GAPS_SCHEMA}\nsection\tmissing\n");
    for (section, what) in &col.gaps {
        let _ = writeln!(gaps, "{section}\t{what}");
    }
    save(out, "gaps.tsv", &gaps, &mut written)?;
    save(out, "report.md", &md, &mut written)?;
    written.sort();
    Ok(written)
}
