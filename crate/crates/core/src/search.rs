//! Cosine scoring and exact top-η selection.
//!
//! Scores are dot products of unit vectors accumulated in `f64`. Selection
//! keeps a heap bounded at η per query and orders hits by descending score,
//! breaking ties by ascending gallery index, so the output is always a prefix
//! of the stable descending sort of the row.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completer::{EmbedError, TextEmbedder};
use crate::gallery::Gallery;
use crate::num::{dot_f64, Scalar};

/// Queries scored per block in [`retrieve`]; bounds the transient score
/// buffer at `QUERY_BLOCK * n`.
pub const QUERY_BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("query {query} has dimension {found}, gallery has {expected}")]
    DimensionMismatch {
        query: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedder failed on query {query:?}: {source}")]
    EmbedderFailure {
        query: String,
        #[source]
        source: EmbedError,
    },
}

/// Dense `m x n` matrix of query-to-gallery similarities, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Hits for one query, echoing the text that was actually embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub query: String,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub queries: Vec<QueryHits>,
}

/// Scores every query against every corpus row. Generic over the storage
/// scalar; accumulation is always `f64`.
pub fn score_rows<Q, C, T>(queries: &[Q], corpus: &[C]) -> Vec<f64>
where
    Q: AsRef<[T]> + Sync,
    C: AsRef<[T]> + Sync,
    T: Scalar,
{
    let n = corpus.len();
    let mut values = vec![0.0; queries.len() * n];
    if n == 0 {
        return values;
    }
    values
        .par_chunks_mut(n)
        .zip(queries.par_iter())
        .for_each(|(out, q)| {
            let q = q.as_ref();
            for (slot, c) in out.iter_mut().zip(corpus) {
                *slot = dot_f64(q, c.as_ref());
            }
        });
    values
}

fn check_dims<Q: AsRef<[f32]>>(queries: &[Q], dim: usize) -> Result<(), SearchError> {
    for (i, q) in queries.iter().enumerate() {
        if q.as_ref().len() != dim {
            return Err(SearchError::DimensionMismatch {
                query: i,
                expected: dim,
                found: q.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// `S_ij = q_i . c_j` for the gallery's embeddings. Query ids are `q0, q1, ...`.
pub fn score_matrix<Q: AsRef<[f32]> + Sync>(
    query_embs: &[Q],
    gallery: &Gallery,
) -> Result<ScoreMatrix, SearchError> {
    check_dims(query_embs, gallery.dim())?;
    let corpus: Vec<&[f32]> = gallery.embeddings().collect();
    Ok(ScoreMatrix {
        rows: query_embs.len(),
        cols: gallery.len(),
        values: score_rows(query_embs, &corpus),
        query_ids: (0..query_embs.len()).map(|i| format!("q{i}")).collect(),
        gallery_ids: gallery.records().iter().map(|r| r.id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
struct Ranked {
    index: usize,
    score: f64,
}

impl Ranked {
    /// `Less` means ranked ahead.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// The `eta` best `(index, score)` pairs of one row, best first.
pub fn top_k_row(row: &[f64], eta: usize) -> Vec<(usize, f64)> {
    if eta == 0 {
        return Vec::new();
    }
    // max-heap on rank order: the top is the worst hit kept so far
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(eta.min(row.len()) + 1);
    for (index, &score) in row.iter().enumerate() {
        let candidate = Ranked { index, score };
        if heap.len() < eta {
            heap.push(candidate);
        } else if let Some(worst) = heap.peek() {
            if candidate < *worst {
                heap.pop();
                heap.push(candidate);
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|r| (r.index, r.score))
        .collect()
}

fn hits_from(row: &[f64], eta: usize, ids: &[String]) -> Vec<Hit> {
    top_k_row(row, eta)
        .into_iter()
        .map(|(index, score)| Hit {
            index,
            id: ids[index].clone(),
            score,
        })
        .collect()
}

/// Per-row top-η over a score matrix.
pub fn top_k(scores: &ScoreMatrix, eta: usize) -> RetrievalResult {
    let queries = (0..scores.rows)
        .into_par_iter()
        .map(|i| QueryHits {
            query: scores.query_ids[i].clone(),
            hits: hits_from(scores.row(i), eta, &scores.gallery_ids),
        })
        .collect();
    RetrievalResult { queries }
}

/// Top-η for already embedded queries, scoring in blocks of [`QUERY_BLOCK`].
pub fn retrieve_embedded<Q: AsRef<[f32]> + Sync>(
    texts: &[String],
    query_embs: &[Q],
    gallery: &Gallery,
    eta: usize,
) -> Result<RetrievalResult, SearchError> {
    assert_eq!(texts.len(), query_embs.len(), "one text per embedding");
    check_dims(query_embs, gallery.dim())?;
    let corpus: Vec<&[f32]> = gallery.embeddings().collect();
    let ids: Vec<String> = gallery.records().iter().map(|r| r.id.clone()).collect();
    let n = gallery.len();
    let mut queries = Vec::with_capacity(texts.len());
    for (block_texts, block_embs) in texts.chunks(QUERY_BLOCK).zip(query_embs.chunks(QUERY_BLOCK)) {
        let block = score_rows(block_embs, &corpus);
        let hits: Vec<Vec<Hit>> = block
            .par_chunks(n.max(1))
            .take(block_embs.len())
            .map(|row| hits_from(&row[..n], eta, &ids))
            .collect();
        queries.extend(
            block_texts
                .iter()
                .zip(hits)
                .map(|(text, hits)| QueryHits {
                    query: text.clone(),
                    hits,
                }),
        );
    }
    Ok(RetrievalResult { queries })
}

/// Embeds each text and returns its top-η gallery hits.
pub fn retrieve(
    query_texts: &[String],
    embedder: &dyn TextEmbedder,
    gallery: &Gallery,
    eta: usize,
) -> Result<RetrievalResult, SearchError> {
    let embs = query_texts
        .iter()
        .map(|text| {
            embedder
                .embed(text)
                .map_err(|source| SearchError::EmbedderFailure {
                    query: text.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    retrieve_embedded(query_texts, &embs, gallery, eta)
}
