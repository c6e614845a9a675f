//! Quality-conditioned query completion and text embedding.
//!
//! Four completers share the [`Completer`] trait:
//!
//! - [`CorpusCompleter`] looks up gallery captions that extend the prefix and
//!   carry the requested quality levels, backing off to the nearest condition.
//! - [`IdentityCompleter`] returns the prefix untouched (the prefix baseline).
//! - [`RandomCompleter`] appends the continuation of a random caption,
//!   ignoring the condition.
//! - [`ExternalCompleter`] asks an HTTP completion endpoint.
//!
//! Prefix matching is word based and case-insensitive, and a leading `a`/`an`
//! is dropped on both sides before comparing.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gallery::Gallery;
use crate::quantile::{FIVE_LEVEL_NAMES, THREE_LEVEL_NAMES};

pub const DEFAULT_ENDPOINT_TIMEOUT_SECS: f64 = 30.0;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompletionError {
    #[error("query prefix is empty")]
    EmptyPrefix,
    #[error("unknown level label {0:?}")]
    UnknownLevelLabel(String),
    #[error("gallery has no assigned quality levels")]
    LevelsNotAssigned,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("completion endpoint timed out")]
    Timeout,
    #[error("completion endpoint returned HTTP {0}")]
    HttpError(u16),
    #[error("completion endpoint response is malformed: {0}")]
    MalformedResponse(String),
    #[error("completion endpoint unreachable: {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("text has no tokens")]
    EmptyText,
    #[error("embedding dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("embedding endpoint failed: {0}")]
    Endpoint(String),
}

/// A (relevance level, aesthetic level) pair, by label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityCondition {
    pub rel_level: String,
    pub aes_level: String,
}

impl QualityCondition {
    pub fn new(rel: impl Into<String>, aes: impl Into<String>) -> Self {
        QualityCondition {
            rel_level: rel.into(),
            aes_level: aes.into(),
        }
    }

    /// Level indices under the gallery's schemes.
    pub fn resolve(&self, gallery: &Gallery) -> Result<(usize, usize), CompletionError> {
        let (rel, aes) = gallery.schemes().ok_or(CompletionError::LevelsNotAssigned)?;
        let r = rel
            .index_of(&self.rel_level)
            .ok_or_else(|| CompletionError::UnknownLevelLabel(self.rel_level.clone()))?;
        let a = aes
            .index_of(&self.aes_level)
            .ok_or_else(|| CompletionError::UnknownLevelLabel(self.aes_level.clone()))?;
        Ok((r, a))
    }

    /// The full grid, relevance-major within each aesthetic level:
    /// `(L,L), (M,L), (H,L), (L,M), ...` as `(rel, aes)`.
    pub fn grid(rel_names: &[String], aes_names: &[String]) -> Vec<QualityCondition> {
        aes_names
            .iter()
            .flat_map(|aes| {
                rel_names
                    .iter()
                    .map(move |rel| QualityCondition::new(rel.clone(), aes.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionSource {
    Corpus,
    Identity,
    Random,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionCandidate {
    /// Full completed query, always `prefix + suffix`.
    pub text: String,
    pub suffix: String,
    pub source: CompletionSource,
    pub matched_record_id: Option<String>,
    pub condition: QualityCondition,
    pub exact_condition_match: bool,
}

pub trait Completer: Send + Sync {
    fn source(&self) -> CompletionSource;

    /// Up to `k` candidates for `prefix` under `condition`.
    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError>;
}

fn is_known_label(label: &str) -> bool {
    THREE_LEVEL_NAMES.contains(&label) || FIVE_LEVEL_NAMES.contains(&label)
}

/// `Relevance: <rel>, Aesthetic: <aes>, Query: <prefix>` for the built-in
/// three- and five-level label sets.
pub fn build_instruction(
    condition: &QualityCondition,
    prefix: &str,
) -> Result<String, CompletionError> {
    for label in [&condition.rel_level, &condition.aes_level] {
        if !is_known_label(label) {
            return Err(CompletionError::UnknownLevelLabel(label.clone()));
        }
    }
    format_instruction(condition, prefix)
}

/// [`build_instruction`] validated against explicit label sets.
pub fn build_instruction_with(
    condition: &QualityCondition,
    prefix: &str,
    rel_names: &[String],
    aes_names: &[String],
) -> Result<String, CompletionError> {
    if !rel_names.contains(&condition.rel_level) {
        return Err(CompletionError::UnknownLevelLabel(condition.rel_level.clone()));
    }
    if !aes_names.contains(&condition.aes_level) {
        return Err(CompletionError::UnknownLevelLabel(condition.aes_level.clone()));
    }
    format_instruction(condition, prefix)
}

fn format_instruction(
    condition: &QualityCondition,
    prefix: &str,
) -> Result<String, CompletionError> {
    let prefix = prefix.trim_end();
    if prefix.trim().is_empty() {
        return Err(CompletionError::EmptyPrefix);
    }
    Ok(format!(
        "Relevance: {}, Aesthetic: {}, Query: {}",
        condition.rel_level, condition.aes_level, prefix
    ))
}

fn is_article(word: &str) -> bool {
    word.eq_ignore_ascii_case("a") || word.eq_ignore_ascii_case("an")
}

/// Lowercased whitespace tokens with one leading article removed.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = text.split_whitespace().peekable();
    if words.peek().is_some_and(|w| is_article(w)) {
        words.next();
    }
    words.map(|w| w.to_lowercase()).collect()
}

/// Original-case caption words after the leading article.
fn content_words(text: &str) -> Vec<&str> {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    if words.first().is_some_and(|w| is_article(w)) {
        words.remove(0);
    }
    words
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether `text` extends `prefix` word for word (after normalization).
pub fn extends_prefix(text: &str, prefix: &str) -> bool {
    let t = normalize_words(text);
    let p = normalize_words(prefix);
    t.len() >= p.len() && t[..p.len()] == p[..]
}

fn normalized_prefix(prefix: &str) -> Result<Vec<String>, CompletionError> {
    let words = normalize_words(prefix);
    if words.is_empty() {
        return Err(CompletionError::EmptyPrefix);
    }
    Ok(words)
}

fn candidate_from_caption(
    prefix: &str,
    caption: &str,
    skip: usize,
    source: CompletionSource,
    record_id: &str,
    condition: &QualityCondition,
    exact: bool,
) -> CompletionCandidate {
    let head = collapse_whitespace(prefix);
    let tail: Vec<&str> = content_words(caption).into_iter().skip(skip).collect();
    let suffix = if tail.is_empty() {
        String::new()
    } else {
        format!(" {}", tail.join(" "))
    };
    CompletionCandidate {
        text: format!("{head}{suffix}"),
        suffix,
        source,
        matched_record_id: Some(record_id.to_string()),
        condition: condition.clone(),
        exact_condition_match: exact,
    }
}

/// Caption lookup conditioned on the gallery's assigned levels.
pub struct CorpusCompleter<'a> {
    gallery: &'a Gallery,
    words: Vec<Vec<String>>,
}

impl<'a> CorpusCompleter<'a> {
    pub fn new(gallery: &'a Gallery) -> Result<Self, CompletionError> {
        if !gallery.has_levels() {
            return Err(CompletionError::LevelsNotAssigned);
        }
        let words = gallery
            .records()
            .iter()
            .map(|r| normalize_words(&r.caption))
            .collect();
        Ok(CorpusCompleter { gallery, words })
    }

    fn matching(&self, prefix: &[String]) -> impl Iterator<Item = usize> + '_ {
        let prefix = prefix.to_vec();
        self.words.iter().enumerate().filter_map(move |(i, w)| {
            (w.len() >= prefix.len() && w[..prefix.len()] == prefix[..]).then_some(i)
        })
    }

    /// Candidates ordered by relevance score (descending) then id. When no
    /// caption carries the exact condition, the single nearest condition by
    /// L1 level distance is used instead; ties prefer the higher relevance
    /// level, then the higher aesthetic level.
    pub fn complete_corpus(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        let (want_rel, want_aes) = condition.resolve(self.gallery)?;
        let prefix_words = normalized_prefix(prefix)?;
        let levelled: Vec<(usize, usize, usize)> = self
            .matching(&prefix_words)
            .filter_map(|i| {
                let (r, a) = self.gallery.record(i).levels()?;
                Some((i, r, a))
            })
            .collect();
        if levelled.is_empty() {
            return Ok(Vec::new());
        }

        let distance = |r: usize, a: usize| r.abs_diff(want_rel) + a.abs_diff(want_aes);
        let (target_rel, target_aes) = levelled
            .iter()
            .map(|&(_, r, a)| (r, a))
            .min_by(|x, y| {
                distance(x.0, x.1)
                    .cmp(&distance(y.0, y.1))
                    .then(y.0.cmp(&x.0))
                    .then(y.1.cmp(&x.1))
            })
            .expect("non-empty");
        let exact = (target_rel, target_aes) == (want_rel, want_aes);

        let mut chosen: Vec<usize> = levelled
            .into_iter()
            .filter(|&(_, r, a)| (r, a) == (target_rel, target_aes))
            .map(|(i, _, _)| i)
            .collect();
        chosen.sort_by(|&x, &y| {
            let (rx, ry) = (self.gallery.record(x), self.gallery.record(y));
            let sx = rx.rel_score.unwrap_or(f64::NEG_INFINITY);
            let sy = ry.rel_score.unwrap_or(f64::NEG_INFINITY);
            sy.partial_cmp(&sx)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| rx.id.cmp(&ry.id))
        });
        chosen.truncate(k);
        Ok(chosen
            .into_iter()
            .map(|i| {
                let record = self.gallery.record(i);
                candidate_from_caption(
                    prefix,
                    &record.caption,
                    prefix_words.len(),
                    CompletionSource::Corpus,
                    &record.id,
                    condition,
                    exact,
                )
            })
            .collect())
    }
}

impl Completer for CorpusCompleter<'_> {
    fn source(&self) -> CompletionSource {
        CompletionSource::Corpus
    }

    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        self.complete_corpus(prefix, condition, k)
    }
}

/// The prefix baseline: no completion at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCompleter;

pub fn complete_identity(
    prefix: &str,
    condition: &QualityCondition,
) -> Result<CompletionCandidate, CompletionError> {
    if prefix.trim().is_empty() {
        return Err(CompletionError::EmptyPrefix);
    }
    Ok(CompletionCandidate {
        text: prefix.to_string(),
        suffix: String::new(),
        source: CompletionSource::Identity,
        matched_record_id: None,
        condition: condition.clone(),
        exact_condition_match: false,
    })
}

impl Completer for IdentityCompleter {
    fn source(&self) -> CompletionSource {
        CompletionSource::Identity
    }

    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        _k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        complete_identity(prefix, condition).map(|c| vec![c])
    }
}

/// Appends the continuation of a uniformly drawn caption. The draw depends
/// only on the seed and the normalized prefix, never on the condition.
pub struct RandomCompleter<'a> {
    gallery: &'a Gallery,
    words: Vec<Vec<String>>,
    seed: u64,
}

impl<'a> RandomCompleter<'a> {
    pub fn new(gallery: &'a Gallery, seed: u64) -> Self {
        let words = gallery
            .records()
            .iter()
            .map(|r| normalize_words(&r.caption))
            .collect();
        RandomCompleter {
            gallery,
            words,
            seed,
        }
    }

    /// Draws among captions extending the prefix, or among all captions when
    /// none does (dropping that caption's first content word).
    pub fn complete_random(
        &self,
        prefix: &str,
        condition: &QualityCondition,
    ) -> Result<CompletionCandidate, CompletionError> {
        if self.gallery.is_empty() {
            return Err(CompletionError::EmptyGallery);
        }
        let prefix_words = normalized_prefix(prefix)?;
        let matching: Vec<usize> = self
            .words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.len() >= prefix_words.len() && w[..prefix_words.len()] == prefix_words[..])
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(0, &prefix_words.join(" ")));
        let (index, skip) = if matching.is_empty() {
            (rng.random_range(0..self.gallery.len()), 1)
        } else {
            (matching[rng.random_range(0..matching.len())], prefix_words.len())
        };
        let record = self.gallery.record(index);
        Ok(candidate_from_caption(
            prefix,
            &record.caption,
            skip,
            CompletionSource::Random,
            &record.id,
            condition,
            false,
        ))
    }
}

impl Completer for RandomCompleter<'_> {
    fn source(&self) -> CompletionSource {
        CompletionSource::Random
    }

    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        _k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        self.complete_random(prefix, condition).map(|c| vec![c])
    }
}

/// Connection settings for an external completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default)]
    pub api_key_header: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> f64 {
    DEFAULT_ENDPOINT_TIMEOUT_SECS
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            api_key_header: None,
            api_key: None,
            timeout_secs: DEFAULT_ENDPOINT_TIMEOUT_SECS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    instruction: String,
    prefix: &'a str,
    rel: &'a str,
    aes: &'a str,
    n: usize,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    completions: Vec<String>,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().expect("in-flight lock");
        while *available == 0 {
            available = self.freed.wait(available).expect("in-flight lock");
        }
        *available -= 1;
        InFlightPermit { owner: self }
    }
}

struct InFlightPermit<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.owner.available.lock().expect("in-flight lock") += 1;
        self.owner.freed.notify_one();
    }
}

/// HTTP client for an LLM completion service.
pub struct ExternalCompleter {
    config: EndpointConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl ExternalCompleter {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        let in_flight = InFlight::new(config.max_in_flight);
        ExternalCompleter {
            config,
            agent,
            in_flight,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn complete_external(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        let instruction = build_instruction_unchecked(condition, prefix)?;
        let body = CompletionRequest {
            instruction,
            prefix,
            rel: &condition.rel_level,
            aes: &condition.aes_level,
            n: k,
        };
        let mut request = self.agent.post(&self.config.url);
        if let (Some(header), Some(key)) = (&self.config.api_key_header, &self.config.api_key) {
            request = request.header(header.as_str(), key.as_str());
        }
        let _permit = self.in_flight.acquire();
        let mut response = request.send_json(&body).map_err(map_transport_error)?;
        let parsed: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| CompletionError::MalformedResponse(e.to_string()))?;
        Ok(parsed
            .completions
            .iter()
            .take(k)
            .map(|c| preserve_prefix(prefix, c, condition))
            .collect())
    }
}

fn build_instruction_unchecked(
    condition: &QualityCondition,
    prefix: &str,
) -> Result<String, CompletionError> {
    // external services may use their own label vocabulary
    for label in [&condition.rel_level, &condition.aes_level] {
        if label.trim().is_empty() {
            return Err(CompletionError::UnknownLevelLabel(label.clone()));
        }
    }
    format_instruction(condition, prefix)
}

fn map_transport_error(err: ureq::Error) -> CompletionError {
    match err {
        ureq::Error::StatusCode(code) => CompletionError::HttpError(code),
        ureq::Error::Timeout(_) => CompletionError::Timeout,
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => CompletionError::Timeout,
        other => CompletionError::Unreachable(other.to_string()),
    }
}

/// Passes through completions that already extend the prefix; otherwise the
/// returned text is treated as a suffix and appended.
pub fn preserve_prefix(
    prefix: &str,
    completion: &str,
    condition: &QualityCondition,
) -> CompletionCandidate {
    let (text, suffix) = if extends_prefix(completion, prefix) && !completion.trim().is_empty() {
        let text = completion.to_string();
        let head_len = text.len().min(prefix.len());
        let suffix = if text.starts_with(prefix) {
            text[head_len..].to_string()
        } else {
            String::new()
        };
        (text, suffix)
    } else if completion.trim().is_empty() {
        (prefix.to_string(), String::new())
    } else {
        let suffix = format!(" {}", completion.trim());
        (format!("{}{}", prefix.trim_end(), suffix), suffix)
    };
    CompletionCandidate {
        text,
        suffix,
        source: CompletionSource::External,
        matched_record_id: None,
        condition: condition.clone(),
        exact_condition_match: true,
    }
}

impl Completer for ExternalCompleter {
    fn source(&self) -> CompletionSource {
        CompletionSource::External
    }

    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        self.complete_external(prefix, condition, k)
    }
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Weight of the length feature stored in coordinate 0.
pub const LENGTH_FEATURE_WEIGHT: f64 = 0.1;

/// FNV-1a over the seed and the token, finished with the splitmix64 mixer.
pub fn stable_hash(seed: u64, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Deterministic hashed bag-of-words embedding.
///
/// Each lowercased whitespace token adds `+/-1` to one of coordinates
/// `1..d`; coordinate 0 carries `LENGTH_FEATURE_WEIGHT * ln(1 + tokens)`.
/// The result is L2-normalized.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::InvalidDimension(dim));
    }
    let mut acc = vec![0.0f64; dim];
    let mut tokens = 0usize;
    for token in text.split_whitespace() {
        let h = stable_hash(seed, &token.to_lowercase());
        let bin = 1 + (h % (dim as u64 - 1)) as usize;
        acc[bin] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        tokens += 1;
    }
    if tokens == 0 {
        return Err(EmbedError::EmptyText);
    }
    acc[0] += LENGTH_FEATURE_WEIGHT * (tokens as f64).ln_1p();
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(acc.into_iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEmbedder { dim, seed }
    }
}

impl TextEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        mock_embed(text, self.dim, self.seed)
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// Text encoder behind an HTTP endpoint: `POST {text}` answered by
/// `{embedding: [f32]}`. Responses are renormalized like ingested rows.
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout_secs: f64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .build()
            .into();
        HttpEmbedder {
            url: url.into(),
            dim,
            agent,
        }
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&EmbedRequest { text })
            .map_err(|e| EmbedError::Endpoint(e.to_string()))?;
        let mut parsed: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Endpoint(e.to_string()))?;
        if parsed.embedding.len() != self.dim {
            return Err(EmbedError::Endpoint(format!(
                "expected {} dimensions, got {}",
                self.dim,
                parsed.embedding.len()
            )));
        }
        crate::gallery::normalize_embedding(text, &mut parsed.embedding)
            .map_err(|e| EmbedError::Endpoint(e.to_string()))?;
        Ok(parsed.embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{compute_relevance, GalleryRecord};
    use crate::quantile::{assign_levels, LevelScheme};
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn cond(r: &str, a: &str) -> QualityCondition {
        QualityCondition::new(r, a)
    }

    #[test]
    fn instruction_format() {
        assert_eq!(
            build_instruction(&cond("High", "High"), "a train").unwrap(),
            "Relevance: High, Aesthetic: High, Query: a train"
        );
        assert_eq!(
            build_instruction(&cond("Low", "Low"), "x").unwrap(),
            "Relevance: Low, Aesthetic: Low, Query: x"
        );
        assert_eq!(
            build_instruction(&cond("VH", "VL"), "a dog").unwrap(),
            "Relevance: VH, Aesthetic: VL, Query: a dog"
        );
        assert_eq!(
            build_instruction(&cond("Great", "High"), "a dog"),
            Err(CompletionError::UnknownLevelLabel("Great".into()))
        );
        assert_eq!(
            build_instruction(&cond("High", "High"), "  "),
            Err(CompletionError::EmptyPrefix)
        );
        let names = vec!["cold".to_string(), "hot".to_string()];
        assert_eq!(
            build_instruction_with(&cond("hot", "cold"), "tea", &names, &names).unwrap(),
            "Relevance: hot, Aesthetic: cold, Query: tea"
        );
    }

    #[test]
    fn normalization_strips_one_article() {
        assert_eq!(normalize_words("An  Apple pie"), vec!["apple", "pie"]);
        assert_eq!(normalize_words("a a"), vec!["a"]);
        assert!(extends_prefix("a dog on a beach", "A DOG"));
        assert!(extends_prefix("dog on a beach", "a dog"));
        assert!(!extends_prefix("a hot dog", "a dog"));
        assert!(!extends_prefix("a doghouse", "a dog"));
    }

    fn unit(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i % d] = 1.0;
        v
    }

    /// Four captions; levels set through explicit cuts so each record's
    /// (rel, aes) level is known by construction.
    fn small_gallery() -> Gallery {
        let rows = [
            ("c1", "a cat sleeping on a warm sofa", 0.9, 6.5), // High, High
            ("c2", "a cat in a dark alley", 0.1, 3.0),         // Low, Low
            ("d1", "a dog running on grass", 0.9, 3.0),        // High, Low
            ("t1", "a train at the station", 0.5, 5.0),        // Medium, Medium
        ];
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (id, cap, rel, aes))| GalleryRecord::new(*id, *cap, unit(i, 4)).with_scores(*aes, *rel))
            .collect();
        let names: Vec<String> = THREE_LEVEL_NAMES.iter().map(|s| s.to_string()).collect();
        let rel = LevelScheme::from_parts(names.clone(), vec![33.0, 66.0], vec![0.3, 0.7]).unwrap();
        let aes = LevelScheme::from_parts(names, vec![33.0, 66.0], vec![4.0, 6.0]).unwrap();
        assign_levels(Gallery::new(records).unwrap(), rel, aes).unwrap()
    }

    /// Exhaustive oracle: every levelled record whose caption extends the
    /// prefix and carries exactly the requested levels.
    fn exact_oracle(g: &Gallery, prefix: &str, c: &QualityCondition) -> Vec<String> {
        let (r, a) = c.resolve(g).unwrap();
        let mut ids: Vec<String> = g
            .records()
            .iter()
            .filter(|rec| extends_prefix(&rec.caption, prefix) && rec.levels() == Some((r, a)))
            .map(|rec| rec.id.clone())
            .collect();
        ids.sort();
        ids
    }

    #[test]
    fn corpus_exact_match() {
        let g = small_gallery();
        let c = CorpusCompleter::new(&g).unwrap();
        let out = c.complete_corpus("a cat", &cond("High", "High"), 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matched_record_id.as_deref(), Some("c1"));
        assert!(out[0].exact_condition_match);
        assert_eq!(out[0].text, "a cat sleeping on a warm sofa");
        assert_eq!(out[0].suffix, " sleeping on a warm sofa");
        assert_eq!(exact_oracle(&g, "a cat", &cond("High", "High")), vec!["c1"]);
    }

    #[test]
    fn corpus_no_match_is_empty() {
        let g = small_gallery();
        let c = CorpusCompleter::new(&g).unwrap();
        assert!(c.complete_corpus("a zebra", &cond("High", "High"), 5).unwrap().is_empty());
    }

    #[test]
    fn corpus_backs_off_to_nearest_condition() {
        let g = small_gallery();
        let c = CorpusCompleter::new(&g).unwrap();
        // only the (High, Low) dog exists
        let out = c.complete_corpus("dog", &cond("High", "High"), 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matched_record_id.as_deref(), Some("d1"));
        assert!(!out[0].exact_condition_match);
        assert_eq!(out[0].text, "dog running on grass");
        // (Low, Low) cat is the only cat at distance <= 2 from (Low, Medium)
        let out = c.complete_corpus("a cat", &cond("Low", "Medium"), 5).unwrap();
        assert_eq!(out[0].matched_record_id.as_deref(), Some("c2"));
        assert!(!out[0].exact_condition_match);
    }

    #[test]
    fn corpus_backoff_ties_prefer_higher_relevance() {
        let g = small_gallery();
        let c = CorpusCompleter::new(&g).unwrap();
        // from (Medium, Medium): c1 (High, High) and c2 (Low, Low) are both at distance 2
        let out = c.complete_corpus("a cat", &cond("Medium", "Medium"), 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matched_record_id.as_deref(), Some("c1"));
    }

    #[test]
    fn corpus_errors() {
        let g = small_gallery();
        let c = CorpusCompleter::new(&g).unwrap();
        assert_eq!(
            c.complete_corpus("a cat", &cond("Huge", "High"), 1),
            Err(CompletionError::UnknownLevelLabel("Huge".into()))
        );
        assert_eq!(
            c.complete_corpus("an", &cond("High", "High"), 1),
            Err(CompletionError::EmptyPrefix)
        );
        let plain = Gallery::new(vec![GalleryRecord::new("a", "a cat", unit(0, 2))]).unwrap();
        assert!(matches!(
            CorpusCompleter::new(&plain),
            Err(CompletionError::LevelsNotAssigned)
        ));
    }

    #[test]
    fn identity_examples() {
        let c = complete_identity("a dog", &cond("Low", "High")).unwrap();
        assert_eq!(c.text, "a dog");
        assert!(c.suffix.is_empty());
        assert_eq!(complete_identity("an airplane", &cond("L", "H")).unwrap().text, "an airplane");
        assert_eq!(
            complete_identity("", &cond("L", "H")),
            Err(CompletionError::EmptyPrefix)
        );
    }

    #[test]
    fn random_is_seeded_and_condition_blind() {
        let g = small_gallery();
        let a = RandomCompleter::new(&g, 11);
        let b = RandomCompleter::new(&g, 11);
        let x = a.complete_random("a cat", &cond("Low", "Low")).unwrap();
        let y = b.complete_random("a cat", &cond("High", "High")).unwrap();
        assert_eq!(x.text, y.text);
        assert!(x.text.starts_with("a cat"));
        // a prefix matching nothing still starts with the prefix
        let z = a.complete_random("a zebra", &cond("Low", "Low")).unwrap();
        assert!(z.text.starts_with("a zebra"));
        let texts: std::collections::HashSet<String> = (0..32)
            .map(|s| RandomCompleter::new(&g, s).complete_random("a cat", &cond("Low", "Low")).unwrap().text)
            .collect();
        assert!(texts.len() > 1, "different seeds should reach both cat captions");
    }

    #[test]
    fn embed_is_deterministic_and_unit() {
        let a = mock_embed("a dog", 32, 5).unwrap();
        let b = mock_embed("a dog", 32, 5).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(mock_embed("a   dog", 32, 5).unwrap(), a);
        assert_eq!(mock_embed("A Dog", 32, 5).unwrap(), a);
    }

    #[test]
    fn embed_shared_tokens() {
        let x = mock_embed("a dog on grass", 64, 1).unwrap();
        let y = mock_embed("a cat on grass", 64, 1).unwrap();
        let cos = compute_relevance(&x, &y).unwrap();
        assert!(cos > 0.0 && cos < 1.0, "cos = {cos}");
    }

    #[test]
    fn embed_errors() {
        assert_eq!(mock_embed("   ", 8, 0), Err(EmbedError::EmptyText));
        assert_eq!(mock_embed("x", 1, 0), Err(EmbedError::InvalidDimension(1)));
    }

    #[test]
    fn self_relevance_is_one() {
        let e = mock_embed("a teddy bear on a bed", 48, 9).unwrap();
        assert!((compute_relevance(&e, &e).unwrap() - 1.0).abs() < 1e-6);
    }

    /// Serves `responses` in order, one connection each, and returns the
    /// request bodies it saw.
    fn stub_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn external_appends_suffix_and_passes_full_sentences() {
        let (url, handle) = stub_server(vec![(
            200,
            r#"{"completions":[" on a beach","a dog chasing a ball","A DOG asleep"]}"#.into(),
        )]);
        let client = ExternalCompleter::new(EndpointConfig::new(url));
        let out = client.complete_external("a dog", &cond("High", "High"), 3).unwrap();
        assert_eq!(out[0].text, "a dog on a beach");
        assert_eq!(out[0].suffix, " on a beach");
        assert_eq!(out[1].text, "a dog chasing a ball");
        assert_eq!(out[2].text, "A DOG asleep");
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({
                "instruction": "Relevance: High, Aesthetic: High, Query: a dog",
                "prefix": "a dog",
                "rel": "High",
                "aes": "High",
                "n": 3
            })
        );
    }

    #[test]
    fn external_errors() {
        let (url, handle) = stub_server(vec![
            (500, "{}".into()),
            (200, r#"{"nope":1}"#.into()),
        ]);
        let client = ExternalCompleter::new(EndpointConfig::new(url));
        assert_eq!(
            client.complete_external("a dog", &cond("High", "High"), 1),
            Err(CompletionError::HttpError(500))
        );
        assert!(matches!(
            client.complete_external("a dog", &cond("High", "High"), 1),
            Err(CompletionError::MalformedResponse(_))
        ));
        handle.join().unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let dead = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        assert!(matches!(
            ExternalCompleter::new(EndpointConfig::new(dead)).complete_external("a dog", &cond("High", "High"), 1),
            Err(CompletionError::Unreachable(_))
        ));
    }

    #[test]
    fn external_timeout() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let hold = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_millis(800));
            drop(stream);
        });
        let mut cfg = EndpointConfig::new(url);
        cfg.timeout_secs = 0.2;
        assert_eq!(
            ExternalCompleter::new(cfg).complete_external("a dog", &cond("High", "High"), 1),
            Err(CompletionError::Timeout)
        );
        hold.join().unwrap();
    }

    proptest! {
        #[test]
        fn instruction_is_injective(
            r1 in prop::sample::select(vec!["Low", "Medium", "High", "VL", "L", "M", "H", "VH"]),
            a1 in prop::sample::select(vec!["Low", "Medium", "High", "VL", "L", "M", "H", "VH"]),
            p1 in "[a-z]{1,6}( [a-z]{1,6})?",
            r2 in prop::sample::select(vec!["Low", "Medium", "High", "VL", "L", "M", "H", "VH"]),
            a2 in prop::sample::select(vec!["Low", "Medium", "High", "VL", "L", "M", "H", "VH"]),
            p2 in "[a-z]{1,6}( [a-z]{1,6})?",
        ) {
            let x = build_instruction(&cond(r1, a1), &p1).unwrap();
            let y = build_instruction(&cond(r2, a2), &p2).unwrap();
            prop_assert_eq!(x == y, (r1, a1, &p1) == (r2, a2, &p2));
        }

        #[test]
        fn every_candidate_extends_prefix(
            noun in prop::sample::select(vec!["cat", "dog", "train", "zebra"]),
            article in prop::sample::select(vec!["a ", "an ", "", "A "]),
            r in prop::sample::select(vec!["Low", "Medium", "High"]),
            a in prop::sample::select(vec!["Low", "Medium", "High"]),
            seed in any::<u64>(),
        ) {
            let g = small_gallery();
            let prefix = format!("{article}{noun}");
            let c = cond(r, a);
            let corpus = CorpusCompleter::new(&g).unwrap();
            let random = RandomCompleter::new(&g, seed);
            let mut all = corpus.complete(&prefix, &c, 4).unwrap();
            all.extend(random.complete(&prefix, &c, 1).unwrap());
            all.extend(IdentityCompleter.complete(&prefix, &c, 1).unwrap());
            all.push(preserve_prefix(&prefix, " in the snow", &c));
            for cand in &all {
                prop_assert!(extends_prefix(&cand.text, &prefix), "{:?}", cand.text);
                prop_assert_eq!(&cand.text, &format!("{}{}", &cand.text[..cand.text.len() - cand.suffix.len()], cand.suffix));
            }
            // exact candidates carry exactly the requested levels
            let want = c.resolve(&g).unwrap();
            for cand in corpus.complete(&prefix, &c, 4).unwrap().iter().filter(|c| c.exact_condition_match) {
                let id = cand.matched_record_id.as_ref().unwrap();
                let rec = g.records().iter().find(|r| &r.id == id).unwrap();
                prop_assert_eq!(rec.levels(), Some(want));
            }
        }
    }
}
