//! Condition-grid evaluation.
//!
//! For every quality condition and every prefix the harness completes the
//! prefix, embeds the completion, retrieves the top-η gallery records and
//! pools their true aesthetic and relevance scores. Means pool all retrieved
//! items of a cell (equivalent to averaging per-prefix means when η is
//! constant). Completer or embedder failures are counted per cell and never
//! abort the grid.
//!
//! The module also holds the rerank baseline, the monotonicity checks, report
//! rendering and a seeded synthetic gallery generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completer::{
    mock_embed, Completer, CompletionError, CorpusCompleter, EndpointConfig, ExternalCompleter,
    IdentityCompleter, MockEmbedder, QualityCondition, RandomCompleter, TextEmbedder,
};
use crate::gallery::{Gallery, GalleryRecord};
use crate::num::dot_f64;
use crate::quantile::{assign_levels, LevelPreset, LevelScheme};
use crate::search::top_k_row;

const COCO_CLASSES: &str = include_str!("../data/coco_classes.txt");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prefixes to evaluate")]
    EmptyPrefixes,
    #[error("no conditions to evaluate")]
    EmptyConditions,
    #[error("gallery has no assigned quality levels")]
    LevelsNotAssigned,
    #[error("eta must be at least 1")]
    ZeroEta,
    #[error("rerank k must be at least 1")]
    ZeroK,
    #[error("report does not cover the full grid: missing {0}")]
    IncompleteGrid(String),
    #[error("unsupported method {0:?} for this operation")]
    UnsupportedMethod(Method),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(String),
    #[error("synthetic gallery: {0}")]
    Synthetic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "identity")]
    Prefix,
    Random,
    Corpus,
    External,
    Rerank,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Prefix => "prefix",
            Method::Random => "random",
            Method::Corpus => "corpus",
            Method::External => "external",
            Method::Rerank => "rerank",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "prefix" | "identity" => Ok(Method::Prefix),
            "random" => Ok(Method::Random),
            "corpus" => Ok(Method::Corpus),
            "external" => Ok(Method::External),
            "rerank" => Ok(Method::Rerank),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// `"a"` or `"an"` by the first letter of the noun.
pub fn with_article(noun: &str) -> String {
    let vowel = noun
        .chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c));
    format!("{} {noun}", if vowel { "an" } else { "a" })
}

/// The 80 COCO class names.
pub fn coco_classes() -> Vec<&'static str> {
    COCO_CLASSES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// The class names with their articles: `"a person"`, `"an airplane"`, ...
pub fn default_prefixes() -> Vec<String> {
    coco_classes().into_iter().map(with_article).collect()
}

pub fn default_conditions(preset: LevelPreset) -> Vec<QualityCondition> {
    let names = preset.names();
    QualityCondition::grid(&names, &names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prefixes: Vec<String>,
    pub conditions: Vec<QualityCondition>,
    pub eta: usize,
    pub method: Method,
    pub seed: u64,
    /// Candidates requested per completion; the first one is retrieved.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prefixes: default_prefixes(),
            conditions: default_conditions(LevelPreset::Three),
            eta: 1,
            method: Method::Corpus,
            seed: 0,
            k: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.prefixes.is_empty() {
            return Err(EvalError::EmptyPrefixes);
        }
        if self.conditions.is_empty() {
            return Err(EvalError::EmptyConditions);
        }
        if self.eta == 0 {
            return Err(EvalError::ZeroEta);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixResult {
    pub prefix: String,
    /// Text actually embedded; `None` when the prefix was skipped.
    pub query: Option<String>,
    pub hit_ids: Vec<String>,
    pub ave_aes: Option<f64>,
    pub ave_rel: Option<f64>,
    pub items: usize,
    pub fallback: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub condition: Option<QualityCondition>,
    pub ave_aes: Option<f64>,
    pub ave_rel: Option<f64>,
    pub items: usize,
    /// Prefixes dropped after a completer or embedder failure.
    pub skipped: usize,
    /// Prefixes whose completer returned nothing; the bare prefix was used.
    pub fallbacks: usize,
    /// Retrieved records without scores, excluded from the means.
    pub unscored_hits: usize,
    pub per_prefix: Vec<PrefixResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub gallery_hash: String,
    pub gallery_n: usize,
    pub eta: usize,
    pub seed: u64,
    pub k: usize,
    pub pooling: String,
    pub rel_scheme: Option<LevelScheme<f64>>,
    pub aes_scheme: Option<LevelScheme<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub metadata: ReportMetadata,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    pub fn cell(&self, condition: &QualityCondition) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.condition.as_ref() == Some(condition))
    }
}

fn metadata(gallery: &Gallery, eta: usize, seed: u64, k: usize) -> ReportMetadata {
    ReportMetadata {
        gallery_hash: gallery.content_hash(),
        gallery_n: gallery.len(),
        eta,
        seed,
        k,
        pooling: "items".to_string(),
        rel_scheme: gallery.rel_scheme().cloned(),
        aes_scheme: gallery.aes_scheme().cloned(),
    }
}

/// Completer for `method`. External completion needs `endpoint`.
pub fn build_completer<'a>(
    method: Method,
    gallery: &'a Gallery,
    seed: u64,
    endpoint: Option<&EndpointConfig>,
) -> Result<Box<dyn Completer + 'a>, EvalError> {
    Ok(match method {
        Method::Prefix => Box::new(IdentityCompleter),
        Method::Random => Box::new(RandomCompleter::new(gallery, seed)),
        Method::Corpus => Box::new(CorpusCompleter::new(gallery)?),
        Method::External => match endpoint {
            Some(cfg) => Box::new(ExternalCompleter::new(cfg.clone())),
            None => {
                return Err(EvalError::Completion(CompletionError::Unreachable(
                    "no endpoint configured".into(),
                )))
            }
        },
        Method::Rerank => return Err(EvalError::UnsupportedMethod(method)),
    })
}

enum Prepared {
    Query { text: String, emb: Vec<f32>, fallback: bool },
    Skipped(String),
}

fn prepare(
    prefix: &str,
    condition: &QualityCondition,
    k: usize,
    completer: &dyn Completer,
    embedder: &dyn TextEmbedder,
) -> Prepared {
    let (text, fallback) = match completer.complete(prefix, condition, k.max(1)) {
        Ok(cands) => match cands.into_iter().next() {
            Some(c) => (c.text, false),
            None => (prefix.to_string(), true),
        },
        Err(e) => return Prepared::Skipped(e.to_string()),
    };
    match embedder.embed(&text) {
        Ok(emb) => Prepared::Query { text, emb, fallback },
        Err(e) => Prepared::Skipped(e.to_string()),
    }
}

struct Pooled {
    aes_sum: f64,
    rel_sum: f64,
    items: usize,
    unscored: usize,
}

fn pool(gallery: &Gallery, hits: &[(usize, f64)]) -> Pooled {
    let mut p = Pooled {
        aes_sum: 0.0,
        rel_sum: 0.0,
        items: 0,
        unscored: 0,
    };
    for &(index, _) in hits {
        let rec = gallery.record(index);
        match (rec.aes_score, rec.rel_score) {
            (Some(a), Some(r)) => {
                p.aes_sum += a;
                p.rel_sum += r;
                p.items += 1;
            }
            _ => p.unscored += 1,
        }
    }
    p
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn row_scores(gallery: &Gallery, emb: &[f32]) -> Vec<f64> {
    gallery.embeddings().map(|c| dot_f64(emb, c)).collect()
}

fn cell_from(
    gallery: &Gallery,
    condition: Option<QualityCondition>,
    prefixes: &[String],
    picks: Vec<Result<(String, Vec<(usize, f64)>, bool), String>>,
) -> CellReport {
    let mut cell = CellReport {
        condition,
        ave_aes: None,
        ave_rel: None,
        items: 0,
        skipped: 0,
        fallbacks: 0,
        unscored_hits: 0,
        per_prefix: Vec::with_capacity(prefixes.len()),
    };
    let (mut aes_sum, mut rel_sum) = (0.0, 0.0);
    for (prefix, pick) in prefixes.iter().zip(picks) {
        match pick {
            Ok((query, hits, fallback)) => {
                let p = pool(gallery, &hits);
                aes_sum += p.aes_sum;
                rel_sum += p.rel_sum;
                cell.items += p.items;
                cell.unscored_hits += p.unscored;
                cell.fallbacks += fallback as usize;
                cell.per_prefix.push(PrefixResult {
                    prefix: prefix.clone(),
                    query: Some(query),
                    hit_ids: hits.iter().map(|&(i, _)| gallery.record(i).id.clone()).collect(),
                    ave_aes: mean(p.aes_sum, p.items),
                    ave_rel: mean(p.rel_sum, p.items),
                    items: p.items,
                    fallback,
                    error: None,
                });
            }
            Err(error) => {
                cell.skipped += 1;
                cell.per_prefix.push(PrefixResult {
                    prefix: prefix.clone(),
                    query: None,
                    hit_ids: Vec::new(),
                    ave_aes: None,
                    ave_rel: None,
                    items: 0,
                    fallback: false,
                    error: Some(error),
                });
            }
        }
    }
    cell.ave_aes = mean(aes_sum, cell.items);
    cell.ave_rel = mean(rel_sum, cell.items);
    cell
}

/// Complete, embed, retrieve top-η and pool true scores for every
/// (condition, prefix) pair.
pub fn run_grid(
    config: &EvalConfig,
    gallery: &Gallery,
    completer: &dyn Completer,
    embedder: &dyn TextEmbedder,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if !gallery.has_levels() {
        return Err(EvalError::LevelsNotAssigned);
    }
    let cells = config
        .conditions
        .par_iter()
        .map(|condition| {
            let picks = config
                .prefixes
                .par_iter()
                .map(|prefix| match prepare(prefix, condition, config.k, completer, embedder) {
                    Prepared::Query { text, emb, fallback } => {
                        if emb.len() != gallery.dim() {
                            return Err(format!(
                                "embedding has dimension {}, gallery has {}",
                                emb.len(),
                                gallery.dim()
                            ));
                        }
                        let hits = top_k_row(&row_scores(gallery, &emb), config.eta);
                        Ok((text, hits, fallback))
                    }
                    Prepared::Skipped(e) => Err(e),
                })
                .collect();
            cell_from(gallery, Some(condition.clone()), &config.prefixes, picks)
        })
        .collect();
    Ok(EvalReport {
        method: config.method,
        metadata: metadata(gallery, config.eta, config.seed, config.k),
        cells,
    })
}

/// Retrieve the top-`k` records by cosine for each bare prefix and keep the
/// one with the highest aesthetic score (earliest rank on ties).
pub fn rerank_baseline(
    gallery: &Gallery,
    prefixes: &[String],
    embedder: &dyn TextEmbedder,
    k: usize,
) -> Result<EvalReport, EvalError> {
    if prefixes.is_empty() {
        return Err(EvalError::EmptyPrefixes);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let picks = prefixes
        .par_iter()
        .map(|prefix| {
            let emb = embedder.embed(prefix).map_err(|e| e.to_string())?;
            if emb.len() != gallery.dim() {
                return Err(format!("embedding dimension {} != {}", emb.len(), gallery.dim()));
            }
            let top = top_k_row(&row_scores(gallery, &emb), k);
            let mut best: Option<(usize, f64)> = None;
            for &(index, score) in &top {
                if let Some(aes) = gallery.record(index).aes_score {
                    let better = match best {
                        Some((b, _)) => aes > gallery.record(b).aes_score.unwrap_or(f64::NEG_INFINITY),
                        None => true,
                    };
                    if better {
                        best = Some((index, score));
                    }
                }
            }
            let hits = match best {
                Some(hit) => vec![hit],
                None => top.into_iter().take(1).collect(),
            };
            Ok((prefix.clone(), hits, false))
        })
        .collect();
    Ok(EvalReport {
        method: Method::Rerank,
        metadata: metadata(gallery, 1, 0, k),
        cells: vec![cell_from(gallery, None, prefixes, picks)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub lower: QualityCondition,
    pub upper: QualityCondition,
    /// `mean(upper) - mean(lower)` on the checked axis.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisVerdict {
    pub pass: bool,
    /// Smallest step between adjacent levels, `+inf` for a single level.
    pub min_margin: f64,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// `ave_rel` along the relevance condition at each fixed aesthetic level.
    pub rel: AxisVerdict,
    /// `ave_aes` along the aesthetic condition at each fixed relevance level.
    pub aes: AxisVerdict,
}

impl MonotonicityReport {
    pub fn pass(&self) -> bool {
        self.rel.pass && self.aes.pass
    }
}

type GridMeans = HashMap<(usize, usize), (f64, f64)>;

fn grid_means(report: &EvalReport) -> Result<(Vec<String>, Vec<String>, GridMeans), EvalError> {
    let rel = report
        .metadata
        .rel_scheme
        .as_ref()
        .ok_or_else(|| EvalError::IncompleteGrid("relevance scheme".into()))?;
    let aes = report
        .metadata
        .aes_scheme
        .as_ref()
        .ok_or_else(|| EvalError::IncompleteGrid("aesthetic scheme".into()))?;
    let mut means = HashMap::new();
    for (j, rel_name) in rel.names().iter().enumerate() {
        for (l, aes_name) in aes.names().iter().enumerate() {
            let cond = QualityCondition::new(rel_name.clone(), aes_name.clone());
            let cell = report
                .cell(&cond)
                .ok_or_else(|| EvalError::IncompleteGrid(format!("({rel_name}, {aes_name})")))?;
            match (cell.ave_aes, cell.ave_rel) {
                (Some(a), Some(r)) => {
                    means.insert((j, l), (a, r));
                }
                _ => {
                    return Err(EvalError::IncompleteGrid(format!(
                        "({rel_name}, {aes_name}) has no scored items"
                    )))
                }
            }
        }
    }
    Ok((rel.names().to_vec(), aes.names().to_vec(), means))
}

fn axis_verdict(steps: Vec<(QualityCondition, QualityCondition, f64)>, min_margin: f64) -> AxisVerdict {
    let mut verdict = AxisVerdict {
        pass: true,
        min_margin: f64::INFINITY,
        violations: Vec::new(),
    };
    for (lower, upper, margin) in steps {
        verdict.min_margin = verdict.min_margin.min(margin);
        let bad = if min_margin > 0.0 { margin < min_margin } else { margin < 0.0 };
        if bad {
            verdict.pass = false;
            verdict.violations.push(Violation { lower, upper, margin });
        }
    }
    verdict
}

/// Non-strict monotonicity on both axes.
pub fn monotonicity_check(report: &EvalReport) -> Result<MonotonicityReport, EvalError> {
    monotonicity_check_with_margin(report, 0.0)
}

/// Every step between adjacent levels must be at least `min_margin`
/// (non-decreasing when `min_margin` is 0).
pub fn monotonicity_check_with_margin(
    report: &EvalReport,
    min_margin: f64,
) -> Result<MonotonicityReport, EvalError> {
    let (rel_names, aes_names, means) = grid_means(report)?;
    let cond = |j: usize, l: usize| QualityCondition::new(rel_names[j].clone(), aes_names[l].clone());
    let mut rel_steps = Vec::new();
    for l in 0..aes_names.len() {
        for j in 1..rel_names.len() {
            let margin = means[&(j, l)].1 - means[&(j - 1, l)].1;
            rel_steps.push((cond(j - 1, l), cond(j, l), margin));
        }
    }
    let mut aes_steps = Vec::new();
    for j in 0..rel_names.len() {
        for l in 1..aes_names.len() {
            let margin = means[&(j, l)].0 - means[&(j, l - 1)].0;
            aes_steps.push((cond(j, l - 1), cond(j, l), margin));
        }
    }
    Ok(MonotonicityReport {
        rel: axis_verdict(rel_steps, min_margin),
        aes: axis_verdict(aes_steps, min_margin),
    })
}

/// Monotonicity along `(0,0) → (1,1) → ... → (N-1,N-1)` on both means.
pub fn diagonal_check(report: &EvalReport, min_margin: f64) -> Result<MonotonicityReport, EvalError> {
    let (rel_names, aes_names, means) = grid_means(report)?;
    let n = rel_names.len().min(aes_names.len());
    let cond = |j: usize| QualityCondition::new(rel_names[j].clone(), aes_names[j].clone());
    let mut rel_steps = Vec::new();
    let mut aes_steps = Vec::new();
    for j in 1..n {
        let (lo, hi) = (means[&(j - 1, j - 1)], means[&(j, j)]);
        rel_steps.push((cond(j - 1), cond(j), hi.1 - lo.1));
        aes_steps.push((cond(j - 1), cond(j), hi.0 - lo.0));
    }
    Ok(MonotonicityReport {
        rel: axis_verdict(rel_steps, min_margin),
        aes: axis_verdict(aes_steps, min_margin),
    })
}

/// Whether a rerank sweep over increasing `k` trades relevance for
/// aesthetics: `aes` non-decreasing, `rel` non-increasing.
pub fn rerank_tradeoff_holds(aes: &[f64], rel: &[f64]) -> bool {
    aes.windows(2).all(|w| w[1] >= w[0]) && rel.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String, EvalError> {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| EvalError::Serialize(e.to_string()))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
            w.write_record([
                "method", "rel_cond", "aes_cond", "k", "ave_aes", "ave_rel", "items", "skipped",
                "fallbacks",
            ])
            .map_err(ser)?;
            for cell in &report.cells {
                let (rel, aes) = cell
                    .condition
                    .as_ref()
                    .map(|c| (c.rel_level.clone(), c.aes_level.clone()))
                    .unwrap_or_default();
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    report.method.as_str().to_string(),
                    rel,
                    aes,
                    report.metadata.k.to_string(),
                    opt(cell.ave_aes),
                    opt(cell.ave_rel),
                    cell.items.to_string(),
                    cell.skipped.to_string(),
                    cell.fallbacks.to_string(),
                ])
                .map_err(ser)?;
            }
            let bytes = w.into_inner().map_err(|e| EvalError::Serialize(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| EvalError::Serialize(e.to_string()))
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "| Method | Rel Cond | Aes Cond | Ave Aes | Ave Rel | Items | Skipped |"
            );
            let _ = writeln!(out, "|---|---|---|---|---|---|---|");
            for cell in &report.cells {
                let (rel, aes) = cell
                    .condition
                    .as_ref()
                    .map(|c| (c.rel_level.as_str(), c.aes_level.as_str()))
                    .unwrap_or(("-", "-"));
                let _ = writeln!(
                    out,
                    "| {} | {rel} | {aes} | {} | {} | {} | {} |",
                    report.method.as_str(),
                    fmt_opt(cell.ave_aes),
                    fmt_opt(cell.ave_rel),
                    cell.items,
                    cell.skipped
                );
            }
            Ok(out)
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| EvalError::Serialize(e.to_string());
        w.write_record(["lo", "hi", "count"]).map_err(ser)?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])
            .map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Serialize(e.to_string()))
    }
}

/// Equal-width bins over `[min, max]` of the finite values.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Histogram {
            edges: (0..=bins).map(|i| i as f64).collect(),
            counts: vec![0; bins],
        };
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for v in finite {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryHistograms {
    pub aes: Histogram,
    pub rel: Histogram,
    pub scored: usize,
}

pub fn gallery_histograms(gallery: &Gallery, bins: usize) -> GalleryHistograms {
    let aes: Vec<f64> = gallery.records().iter().filter_map(|r| r.aes_score).collect();
    let rel: Vec<f64> = gallery.records().iter().filter_map(|r| r.rel_score).collect();
    GalleryHistograms {
        aes: histogram(&aes, bins),
        rel: histogram(&rel, bins),
        scored: gallery.records().iter().filter(|r| r.is_scored()).count(),
    }
}

/// Seeded quality-stratified gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub levels: usize,
    pub dim: usize,
    pub seed: u64,
    /// Seed of the mock embedder used for captions and queries.
    pub embed_seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, levels: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            levels,
            dim: 256,
            seed,
            embed_seed: 0,
        }
    }

    pub fn embedder(&self) -> MockEmbedder {
        MockEmbedder::new(self.dim, self.embed_seed)
    }
}

pub const SYNTH_REL_RANGE: (f64, f64) = (-0.95, 0.95);
pub const SYNTH_AES_RANGE: (f64, f64) = (2.5, 7.5);
/// Fraction of each band's width left empty on either side.
const BAND_GAP: f64 = 0.25;

/// Relevance vocabulary from least to most relevant.
pub const REL_POOLS: [&[&str]; 5] = [
    &["blurry", "distant", "partially", "hidden", "behind", "clutter", "background", "faint", "obscured", "cropped", "corner", "barely"],
    &["somewhere", "near", "crowd", "among", "various", "objects", "scattered", "some", "other", "things", "around", "assorted"],
    &["standing", "beside", "counter", "street", "room", "outside", "inside", "next", "wall", "floor", "road", "yard"],
    &["close", "clear", "view", "centered", "detailed", "visible", "front", "single", "plain", "bright", "daylight", "sharp"],
    &["closeup", "portrait", "isolated", "focused", "studio", "full", "frame", "crisp", "prominent", "showcase", "vivid", "macro"],
];

/// Aesthetic vocabulary from least to most appealing.
pub const AES_POOLS: [&[&str]; 5] = [
    &["dull", "grainy", "washed", "murky", "noisy", "flat", "dim", "muddy"],
    &["ordinary", "muted", "casual", "simple", "average", "snapshot", "everyday", "modest"],
    &["pleasant", "balanced", "tidy", "soft", "natural", "warm", "calm", "neat"],
    &["elegant", "graceful", "rich", "glowing", "refined", "lush", "polished", "charming"],
    &["stunning", "breathtaking", "cinematic", "gorgeous", "dramatic", "radiant", "exquisite", "majestic"],
];

fn pool_index(band: usize, levels: usize) -> usize {
    if levels <= 1 {
        REL_POOLS.len() - 1
    } else {
        band * (REL_POOLS.len() - 1) / (levels - 1)
    }
}

fn band_range(range: (f64, f64), band: usize, levels: usize) -> (f64, f64) {
    let width = (range.1 - range.0) / levels as f64;
    let lo = range.0 + width * band as f64;
    (lo + BAND_GAP * width, lo + (1.0 - BAND_GAP) * width)
}

/// Builds a gallery where caption wording tracks quality bands.
///
/// Record `i` gets class `i % 80` and a (relevance, aesthetic) band cell that
/// cycles per class, so every class covers every cell. Captions read
/// `<article> <class> <relevance words> <aesthetic words>`; more relevant
/// bands use fewer relevance words. Aesthetic scores are uniform inside
/// their band. Relevance scores inside a band follow the caption's cosine to
/// its class prefix, so closer matches score higher. Embeddings are the mock
/// embeddings of the captions. Levels are fitted with the preset matching
/// `levels` (3 or 5).
pub fn synthetic_gallery(config: &SynthConfig) -> Result<Gallery, EvalError> {
    let preset = LevelPreset::from_count(config.levels)
        .ok_or_else(|| EvalError::Synthetic(format!("unsupported level count {}", config.levels)))?;
    if config.n == 0 {
        return Err(EvalError::Synthetic("n must be positive".into()));
    }
    let levels = config.levels;
    let classes = coco_classes();
    let cells = levels * levels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    struct Draft {
        caption: String,
        prefix: String,
        rel_band: usize,
        aes: f64,
    }
    let mut drafts = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let class = i % classes.len();
        let cell = (i / classes.len() + class) % cells;
        let (rel_band, aes_band) = (cell / levels, cell % levels);
        let prefix = with_article(classes[class]);
        let base = 1 + 2 * (levels - 1 - rel_band);
        let len = base + rng.random_range(0..=1);
        let rel_pool = REL_POOLS[pool_index(rel_band, levels)];
        let aes_pool = AES_POOLS[pool_index(aes_band, levels)];
        let mut words: Vec<&str> = Vec::with_capacity(len + 2);
        for _ in 0..len {
            words.push(rel_pool.choose(&mut rng).expect("non-empty pool"));
        }
        for _ in 0..2 {
            words.push(aes_pool.choose(&mut rng).expect("non-empty pool"));
        }
        let (lo, hi) = band_range(SYNTH_AES_RANGE, aes_band, levels);
        drafts.push(Draft {
            caption: format!("{prefix} {}", words.join(" ")),
            prefix,
            rel_band,
            aes: rng.random_range(lo..=hi),
        });
    }

    let embs: Vec<Vec<f32>> = drafts
        .par_iter()
        .map(|d| mock_embed(&d.caption, config.dim, config.embed_seed))
        .collect::<Result<_, _>>()
        .map_err(|e| EvalError::Synthetic(e.to_string()))?;
    let prefix_cos: Vec<f64> = drafts
        .par_iter()
        .zip(&embs)
        .map(|(d, e)| {
            mock_embed(&d.prefix, config.dim, config.embed_seed)
                .map(|p| dot_f64(&p, e))
                .map_err(|e| EvalError::Synthetic(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let mut band_cos = vec![(f64::INFINITY, f64::NEG_INFINITY); levels];
    for (d, &c) in drafts.iter().zip(&prefix_cos) {
        let b = &mut band_cos[d.rel_band];
        *b = (b.0.min(c), b.1.max(c));
    }

    let records: Vec<GalleryRecord> = drafts
        .into_iter()
        .zip(embs)
        .zip(prefix_cos)
        .enumerate()
        .map(|(i, ((d, emb), cos))| {
            let (lo, hi) = band_range(SYNTH_REL_RANGE, d.rel_band, levels);
            let (cmin, cmax) = band_cos[d.rel_band];
            let t = if cmax > cmin { (cos - cmin) / (cmax - cmin) } else { 0.5 };
            GalleryRecord::new(format!("syn-{i:06}"), d.caption, emb).with_scores(d.aes, lo + (hi - lo) * t)
        })
        .collect();
    let gallery = Gallery::new(records).map_err(|e| EvalError::Synthetic(e.to_string()))?;
    let rel_scores: Vec<f64> = gallery.records().iter().filter_map(|r| r.rel_score).collect();
    let aes_scores: Vec<f64> = gallery.records().iter().filter_map(|r| r.aes_score).collect();
    let rel = LevelScheme::fit_preset(&rel_scores, preset).map_err(|e| EvalError::Synthetic(e.to_string()))?;
    let aes = LevelScheme::fit_preset(&aes_scores, preset).map_err(|e| EvalError::Synthetic(e.to_string()))?;
    assign_levels(gallery, rel, aes).map_err(|e| EvalError::Synthetic(e.to_string()))
}
