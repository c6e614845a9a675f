//! Percentiles and score-to-level discretization.
//!
//! A score `x` falls into the smallest level `j` with `x <= cuts[j]`, or the
//! top level when it exceeds every cut. With three levels this is exactly
//! Low for `x <= c1`, High for `x > c2` and Medium otherwise; ties at a cut
//! go to the lower level, and a constant score vector puts everything in the
//! lowest level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gallery::Gallery;
use crate::num::Scalar;

pub const THREE_LEVEL_NAMES: [&str; 3] = ["Low", "Medium", "High"];
pub const THREE_LEVEL_PERCENTILES: [f64; 2] = [33.0, 66.0];
pub const FIVE_LEVEL_NAMES: [&str; 5] = ["VL", "L", "M", "H", "VH"];
pub const FIVE_LEVEL_PERCENTILES: [f64; 4] = [20.0, 40.0, 60.0, 80.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantileError {
    #[error("score vector is empty")]
    EmptyVector,
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("percentile {0} is outside [0, 100]")]
    PercentileOutOfRange(f64),
    #[error("percentiles must be strictly increasing and inside (0, 100)")]
    NonMonotonePercentiles,
    #[error("cut points must be finite and non-decreasing")]
    NonMonotoneCuts,
    #[error("{names} level names need {} percentiles, got {percentiles}", names - 1)]
    NameCountMismatch { names: usize, percentiles: usize },
    #[error("record {id:?} has no {axis} score")]
    MissingScore { id: String, axis: &'static str },
}

/// The two level layouts used throughout: three (Low/Medium/High at the
/// 33rd and 66th percentiles) or five (VL..VH at every 20th).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelPreset {
    Three,
    Five,
}

impl LevelPreset {
    pub fn from_count(levels: usize) -> Option<Self> {
        match levels {
            3 => Some(LevelPreset::Three),
            5 => Some(LevelPreset::Five),
            _ => None,
        }
    }

    pub fn names(self) -> Vec<String> {
        let names: &[&str] = match self {
            LevelPreset::Three => &THREE_LEVEL_NAMES,
            LevelPreset::Five => &FIVE_LEVEL_NAMES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn percentiles(self) -> Vec<f64> {
        match self {
            LevelPreset::Three => THREE_LEVEL_PERCENTILES.to_vec(),
            LevelPreset::Five => FIVE_LEVEL_PERCENTILES.to_vec(),
        }
    }

    pub fn len(self) -> usize {
        match self {
            LevelPreset::Three => 3,
            LevelPreset::Five => 5,
        }
    }
}

fn check_finite<T: Scalar>(scores: &[T]) -> Result<(), QuantileError> {
    if scores.is_empty() {
        return Err(QuantileError::EmptyVector);
    }
    match scores.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(QuantileError::NonFiniteScore { index }),
        None => Ok(()),
    }
}

fn sorted_copy<T: Scalar>(scores: &[T]) -> Result<Vec<T>, QuantileError> {
    check_finite(scores)?;
    let mut sorted = scores.to_vec();
    // finite values only, so partial_cmp is total here
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(sorted)
}

/// Percentile of an already sorted, non-empty, finite vector.
fn perc_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    let xi = p / T::of(100.0) * T::of((n - 1) as f64);
    let lo = xi.floor();
    let frac = xi - lo;
    let lo = lo.to_usize().unwrap_or(0).min(n - 1);
    if frac == T::zero() || lo + 1 >= n {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// The `p`-th percentile with linear interpolation between order statistics,
/// `xi = p/100 * (n - 1)`.
pub fn perc<T: Scalar>(scores: &[T], p: T) -> Result<T, QuantileError> {
    if !(p >= T::zero() && p <= T::of(100.0)) {
        return Err(QuantileError::PercentileOutOfRange(p.as_f64()));
    }
    let sorted = sorted_copy(scores)?;
    Ok(perc_sorted(&sorted, p))
}

/// Ordered level names and the cut points separating them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScheme<T> {
    names: Vec<String>,
    percentiles: Vec<T>,
    cuts: Vec<T>,
}

impl<T: Scalar> LevelScheme<T> {
    /// Fits cut points to the empirical percentiles of `scores`.
    pub fn fit(
        scores: &[T],
        names: Vec<String>,
        percentiles: Vec<T>,
    ) -> Result<Self, QuantileError> {
        validate_layout(&names, &percentiles)?;
        let sorted = sorted_copy(scores)?;
        let cuts = percentiles
            .iter()
            .map(|&p| perc_sorted(&sorted, p))
            .collect();
        Ok(LevelScheme {
            names,
            percentiles,
            cuts,
        })
    }

    /// Builds a scheme from explicit cuts (e.g. deserialized or hand-written).
    pub fn from_parts(
        names: Vec<String>,
        percentiles: Vec<T>,
        cuts: Vec<T>,
    ) -> Result<Self, QuantileError> {
        validate_layout(&names, &percentiles)?;
        if cuts.len() != percentiles.len()
            || cuts.iter().any(|c| !c.is_finite())
            || cuts.windows(2).any(|w| w[0] > w[1])
        {
            return Err(QuantileError::NonMonotoneCuts);
        }
        Ok(LevelScheme {
            names,
            percentiles,
            cuts,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn percentiles(&self) -> &[T] {
        &self.percentiles
    }

    pub fn cuts(&self) -> &[T] {
        &self.cuts
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, level: usize) -> &str {
        &self.names[level]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Smallest `j` with `x <= cuts[j]`, else the top level.
    pub fn level_of(&self, x: T) -> usize {
        self.cuts.partition_point(|&c| c < x)
    }

    pub fn level_counts(&self, scores: &[T]) -> Vec<usize> {
        let mut counts = vec![0; self.len()];
        for &x in scores {
            counts[self.level_of(x)] += 1;
        }
        counts
    }
}

impl LevelScheme<f64> {
    pub fn fit_preset(scores: &[f64], preset: LevelPreset) -> Result<Self, QuantileError> {
        LevelScheme::fit(scores, preset.names(), preset.percentiles())
    }
}

fn validate_layout<T: Scalar>(names: &[String], percentiles: &[T]) -> Result<(), QuantileError> {
    if names.len() != percentiles.len() + 1 {
        return Err(QuantileError::NameCountMismatch {
            names: names.len(),
            percentiles: percentiles.len(),
        });
    }
    let inside = |p: &T| *p > T::zero() && *p < T::of(100.0);
    if !percentiles.iter().all(inside) || percentiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(QuantileError::NonMonotonePercentiles);
    }
    Ok(())
}

pub fn fit_scheme<T: Scalar>(
    scores: &[T],
    names: Vec<String>,
    percentiles: Vec<T>,
) -> Result<LevelScheme<T>, QuantileError> {
    LevelScheme::fit(scores, names, percentiles)
}

pub fn level_of<T: Scalar>(scheme: &LevelScheme<T>, x: T) -> usize {
    scheme.level_of(x)
}

/// Fits one scheme per axis over the scored records of `gallery`.
pub fn fit_gallery_schemes(
    gallery: &Gallery,
    names: Vec<String>,
    percentiles: Vec<f64>,
) -> Result<(LevelScheme<f64>, LevelScheme<f64>), QuantileError> {
    let rel: Vec<f64> = gallery.records().iter().filter_map(|r| r.rel_score).collect();
    let aes: Vec<f64> = gallery.records().iter().filter_map(|r| r.aes_score).collect();
    let rel_scheme = LevelScheme::fit(&rel, names.clone(), percentiles.clone())?;
    let aes_scheme = LevelScheme::fit(&aes, names, percentiles)?;
    for (axis, scheme, scores) in [("rel", &rel_scheme, &rel), ("aes", &aes_scheme, &aes)] {
        let counts = scheme.level_counts(scores);
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            tracing::warn!(
                axis,
                level = scheme.name(empty),
                "level holds no records; the score distribution is degenerate"
            );
        }
    }
    Ok((rel_scheme, aes_scheme))
}

/// Annotates every record with its level on both axes. Every record must
/// carry both scores.
pub fn assign_levels(
    gallery: Gallery,
    rel_scheme: LevelScheme<f64>,
    aes_scheme: LevelScheme<f64>,
) -> Result<Gallery, QuantileError> {
    let mut levels = Vec::with_capacity(gallery.len());
    for record in gallery.records() {
        let rel = record.rel_score.ok_or_else(|| QuantileError::MissingScore {
            id: record.id.clone(),
            axis: "rel",
        })?;
        let aes = record.aes_score.ok_or_else(|| QuantileError::MissingScore {
            id: record.id.clone(),
            axis: "aes",
        })?;
        levels.push((Some(rel_scheme.level_of(rel)), Some(aes_scheme.level_of(aes))));
    }
    Ok(gallery.with_levels(levels, rel_scheme, aes_scheme))
}

/// Like [`assign_levels`], but records missing a score keep no levels and are
/// counted instead of rejected. Returns the annotated gallery and the number
/// of unlevelled records.
pub fn assign_levels_lenient(
    gallery: Gallery,
    rel_scheme: LevelScheme<f64>,
    aes_scheme: LevelScheme<f64>,
) -> (Gallery, usize) {
    let mut skipped = 0;
    let levels = gallery
        .records()
        .iter()
        .map(|record| match (record.rel_score, record.aes_score) {
            (Some(rel), Some(aes)) => {
                (Some(rel_scheme.level_of(rel)), Some(aes_scheme.level_of(aes)))
            }
            _ => {
                skipped += 1;
                (None, None)
            }
        })
        .collect();
    (gallery.with_levels(levels, rel_scheme, aes_scheme), skipped)
}
