//! Rank analysis of score matrices under query perturbation.
//!
//! Given original query embeddings `A` (m×d), a perturbation `Δ` and gallery
//! embeddings `C` (n×d), the score matrices are `S_A = A Cᵀ` and
//! `S_B = (A + Δ) Cᵀ`. Splitting the coordinates along the row space of `A`
//! (`V_S`) and its complement (`V_⊥`) gives `S_B = X + Y` with
//! `X = (A_S + Δ_S) C_Sᵀ` and `Y = Δ_⊥ C_⊥ᵀ`. This module computes that
//! decomposition, checks the four sufficient conditions for
//! `rank(S_B) > rank(S_A)`, searches for the index sets they quantify over,
//! and runs Monte Carlo campaigns over generated instances.
//!
//! Everything is generic over [`RankScalar`] (`f32` or `f64`). Index sets are
//! 0-based column indices into `X`, `Y` and `Z`.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, RealField};
use num_traits::{FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index-set search falls back to enumerating every `I` at or below this `n`.
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Multiplier on the machine-epsilon rule for ranks of projected residuals,
/// whose scale is set by the matrix before projection.
pub const RESIDUAL_TOL_FACTOR: f64 = 16.0;

pub trait RankScalar: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Tolerance for orthogonality and projector identities.
    const ORTH_TOL: f64;
}

impl RankScalar for f64 {
    const ORTH_TOL: f64 = 1e-10;
}

impl RankScalar for f32 {
    const ORTH_TOL: f64 = 1e-4;
}

fn cst<T: RankScalar>(x: f64) -> T {
    <T as FromPrimitive>::from_f64(x).expect("representable constant")
}

fn f64_of<T: RankScalar>(x: T) -> f64 {
    <T as ToPrimitive>::to_f64(&x).unwrap_or(f64::NAN)
}

fn epsilon<T: RankScalar>() -> f64 {
    f64_of(T::default_epsilon())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankError {
    #[error("matrix A is zero")]
    ZeroMatrix,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad index set: {0}")]
    BadIndexSet(String),
    #[error("cannot generate instance: {0}")]
    InvalidDims(String),
}

/// Singular value decomposition with values sorted in descending order.
/// `u` is rows×p and `v` is cols×p with `p = min(rows, cols)`.
pub struct SortedSvd<T: RankScalar> {
    pub u: DMatrix<T>,
    pub values: Vec<T>,
    pub v: DMatrix<T>,
}

pub fn svd_sorted<T: RankScalar>(m: &DMatrix<T>) -> SortedSvd<T> {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    if p == 0 {
        return SortedSvd {
            u: DMatrix::zeros(rows, 0),
            values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        };
    }
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal));
    let values = order.iter().map(|&i| s[i]).collect();
    let u = svd.u.expect("u requested").select_columns(order.iter());
    let v = svd
        .v_t
        .expect("v requested")
        .transpose()
        .select_columns(order.iter());
    SortedSvd { u, values, v }
}

fn check_finite<T: RankScalar>(m: &DMatrix<T>) -> Result<(), RankError> {
    if m.iter().all(|x| f64_of(*x).is_finite()) {
        Ok(())
    } else {
        Err(RankError::NonFinite)
    }
}

/// `max(rows, cols) · ε · σ_max`.
pub fn default_tolerance<T: RankScalar>(m: &DMatrix<T>) -> T {
    let s = svd_sorted(m);
    tolerance_for(m.nrows(), m.ncols(), s.values.first().copied())
}

fn tolerance_for<T: RankScalar>(rows: usize, cols: usize, sigma_max: Option<T>) -> T {
    let sigma = sigma_max.map(f64_of).unwrap_or(0.0);
    cst(rows.max(cols) as f64 * epsilon::<T>() * sigma)
}

/// Number of singular values strictly above `tol` (default
/// `max(rows, cols) · ε · σ_max`).
pub fn rank_of<T: RankScalar>(m: &DMatrix<T>, tol: Option<T>) -> Result<usize, RankError> {
    check_finite(m)?;
    Ok(rank_unchecked(m, tol))
}

fn rank_unchecked<T: RankScalar>(m: &DMatrix<T>, tol: Option<T>) -> usize {
    let s = svd_sorted(m);
    let tol = tol.unwrap_or_else(|| tolerance_for(m.nrows(), m.ncols(), s.values.first().copied()));
    s.values.iter().filter(|&&x| x > tol).count()
}

pub fn spectral_norm<T: RankScalar>(m: &DMatrix<T>) -> T {
    svd_sorted(m).values.first().copied().unwrap_or_else(T::zero)
}

/// Orthogonal projector onto the span of the left singular vectors whose
/// singular values exceed `tol`.
pub fn column_projector<T: RankScalar>(m: &DMatrix<T>, tol: Option<T>) -> DMatrix<T> {
    let s = svd_sorted(m);
    let tol = tol.unwrap_or_else(|| tolerance_for(m.nrows(), m.ncols(), s.values.first().copied()));
    let k = s.values.iter().filter(|&&x| x > tol).count();
    let uk = s.u.columns(0, k);
    uk * uk.transpose()
}

/// Pseudo-inverse by SVD truncation at `tol` (default rule when `None`).
pub fn pseudo_inverse<T: RankScalar>(m: &DMatrix<T>, tol: Option<T>) -> DMatrix<T> {
    let s = svd_sorted(m);
    let tol = tol.unwrap_or_else(|| tolerance_for(m.nrows(), m.ncols(), s.values.first().copied()));
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (j, &sigma) in s.values.iter().enumerate() {
        if sigma > tol {
            out += s.v.column(j) * s.u.column(j).transpose() * (T::one() / sigma);
        }
    }
    out
}

/// The `(A, Δ, C)` triple with the row-space split of `A`.
#[derive(Debug, Clone)]
pub struct PerturbationInstance<T: RankScalar> {
    pub a: DMatrix<T>,
    pub delta: DMatrix<T>,
    pub c: DMatrix<T>,
    pub b: DMatrix<T>,
    pub r: usize,
    pub sigma_r: T,
    pub singular_values: Vec<T>,
    pub tau_rank: T,
    pub v_s: DMatrix<T>,
    pub v_perp: DMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct BlockDecomposition<T: RankScalar> {
    pub a_s: DMatrix<T>,
    pub delta_s: DMatrix<T>,
    pub delta_perp: DMatrix<T>,
    pub c_s: DMatrix<T>,
    pub c_perp: DMatrix<T>,
    pub x: DMatrix<T>,
    pub y: DMatrix<T>,
    /// Projector onto `col(X)`.
    pub p: DMatrix<T>,
    /// `(I - P) Y`.
    pub z: DMatrix<T>,
    pub s_a: DMatrix<T>,
    pub s_b: DMatrix<T>,
    pub x_rank: usize,
    /// Rank threshold for matrices derived from `Z`, scaled by `‖Y‖₂`.
    pub residual_tol: T,
}

impl<T: RankScalar> BlockDecomposition<T> {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Projector onto `col(Z_I)`.
    pub fn z_projector(&self, i: &[usize]) -> DMatrix<T> {
        column_projector(&self.z.select_columns(i.iter()), Some(self.residual_tol))
    }

    /// `(I - P_{Z_I}) Z`, every column.
    pub fn z_residual(&self, i: &[usize]) -> DMatrix<T> {
        let m = self.z.nrows();
        (DMatrix::identity(m, m) - self.z_projector(i)) * &self.z
    }

    /// `‖X_I† P Y_I‖₂` with the pseudo-inverse truncated at the default rule.
    pub fn lemma_norm(&self, i: &[usize]) -> T {
        let x_i = self.x.select_columns(i.iter());
        let py_i = &self.p * self.y.select_columns(i.iter());
        spectral_norm(&(pseudo_inverse(&x_i, None) * py_i))
    }

    /// The stacked operator `[P; (I - P_{Z_I})(I - P)]`.
    pub fn t_operator(&self, i: &[usize]) -> DMatrix<T> {
        let m = self.p.nrows();
        let eye = DMatrix::<T>::identity(m, m);
        let lower = (&eye - self.z_projector(i)) * (&eye - &self.p);
        let mut t = DMatrix::zeros(2 * m, m);
        t.rows_mut(0, m).copy_from(&self.p);
        t.rows_mut(m, m).copy_from(&lower);
        t
    }
}

/// SVD-based split of `(A, Δ, C)` into the blocks used by the rank analysis.
pub fn decompose<T: RankScalar>(
    a: &DMatrix<T>,
    delta: &DMatrix<T>,
    c: &DMatrix<T>,
) -> Result<(PerturbationInstance<T>, BlockDecomposition<T>), RankError> {
    let (m, d) = a.shape();
    if delta.shape() != (m, d) {
        return Err(RankError::DimensionMismatch(format!(
            "Delta is {}x{}, A is {m}x{d}",
            delta.nrows(),
            delta.ncols()
        )));
    }
    if c.ncols() != d {
        return Err(RankError::DimensionMismatch(format!(
            "C has {} columns, A has {d}",
            c.ncols()
        )));
    }
    check_finite(a)?;
    check_finite(delta)?;
    check_finite(c)?;
    if m == 0 || d == 0 || a.iter().all(|x| *x == T::zero()) {
        return Err(RankError::ZeroMatrix);
    }

    // pad with zero rows so the SVD yields all d right singular vectors
    let mut padded = DMatrix::zeros(m.max(d), d);
    padded.rows_mut(0, m).copy_from(a);
    let svd = svd_sorted(&padded);
    let tau_rank = tolerance_for(m, d, svd.values.first().copied());
    let r = svd.values.iter().filter(|&&s| s > tau_rank).count();
    let sigma_r = svd.values[r - 1];
    let v_s = svd.v.columns(0, r).into_owned();
    let v_perp = svd.v.columns(r, d - r).into_owned();

    let b = a + delta;
    let a_s = a * &v_s;
    let delta_s = delta * &v_s;
    let delta_perp = delta * &v_perp;
    let c_s = c * &v_s;
    let c_perp = c * &v_perp;
    let x = (&a_s + &delta_s) * c_s.transpose();
    let y = &delta_perp * c_perp.transpose();
    let x_rank = rank_unchecked(&x, None);
    let p = column_projector(&x, None);
    let z = (DMatrix::identity(m, m) - &p) * &y;
    let residual_tol = cst(
        RESIDUAL_TOL_FACTOR * m.max(c.nrows()) as f64 * epsilon::<T>() * f64_of(spectral_norm(&y)),
    );
    let s_a = a * c.transpose();
    let s_b = &b * c.transpose();

    let inst = PerturbationInstance {
        a: a.clone(),
        delta: delta.clone(),
        c: c.clone(),
        b,
        r,
        sigma_r,
        singular_values: svd.values,
        tau_rank,
        v_s,
        v_perp,
    };
    let blocks = BlockDecomposition {
        a_s,
        delta_s,
        delta_perp,
        c_s,
        c_perp,
        x,
        y,
        p,
        z,
        s_a,
        s_b,
        x_rank,
        residual_tol,
    };
    Ok((inst, blocks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// `‖Δ‖₂ < σ_r(A)`.
    SmallPerturbation,
    /// `X_I` is a basis of `col(X)`.
    BasisColumns,
    /// `‖X_I† P Y_I‖₂ < 1`.
    LemmaBound,
    /// `rank((I - P_{Z_I}) Z_K) ≥ 1`.
    RankGain,
}

impl Assumption {
    pub fn label(self) -> &'static str {
        match self {
            Assumption::SmallPerturbation => "i",
            Assumption::BasisColumns => "ii",
            Assumption::LemmaBound => "iii",
            Assumption::RankGain => "iv",
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSets {
    pub i: Vec<usize>,
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub delta_norm: f64,
    pub sigma_r: f64,
    pub small_perturbation: bool,
    pub r: usize,
    pub x_rank: usize,
    pub x_i_rank: usize,
    pub basis_columns: bool,
    pub lemma_norm: f64,
    pub lemma_bound: bool,
    pub k: usize,
    pub rank_gain: bool,
}

impl AssumptionReport {
    pub fn first_failure(&self) -> Option<Assumption> {
        [
            (self.small_perturbation, Assumption::SmallPerturbation),
            (self.basis_columns, Assumption::BasisColumns),
            (self.lemma_bound, Assumption::LemmaBound),
            (self.rank_gain, Assumption::RankGain),
        ]
        .into_iter()
        .find(|(ok, _)| !ok)
        .map(|(_, a)| a)
    }

    pub fn all_hold(&self) -> bool {
        self.first_failure().is_none()
    }
}

fn validate_sets(i: &[usize], k: &[usize], r: usize, n: usize) -> Result<(), RankError> {
    if i.len() != r {
        return Err(RankError::BadIndexSet(format!("|I| = {}, expected r = {r}", i.len())));
    }
    let mut seen = vec![false; n];
    for (name, set) in [("I", i), ("K", k)] {
        for &j in set {
            if j >= n {
                return Err(RankError::BadIndexSet(format!("{name} index {j} out of range 0..{n}")));
            }
            if seen[j] {
                return Err(RankError::BadIndexSet(format!("index {j} repeated or shared by I and K")));
            }
            seen[j] = true;
        }
    }
    Ok(())
}

/// Measures all four conditions for the given index sets.
pub fn check_assumptions<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
    i: &[usize],
    k: &[usize],
) -> Result<AssumptionReport, RankError> {
    validate_sets(i, k, inst.r, blocks.n())?;
    let delta_norm = f64_of(spectral_norm(&inst.delta));
    let sigma_r = f64_of(inst.sigma_r);
    let x_i_rank = rank_unchecked(&blocks.x.select_columns(i.iter()), None);
    let lemma_norm = f64_of(blocks.lemma_norm(i));
    let k_rank = rank_unchecked(
        &blocks.z_residual(i).select_columns(k.iter()),
        Some(blocks.residual_tol),
    );
    Ok(AssumptionReport {
        delta_norm,
        sigma_r,
        small_perturbation: delta_norm < sigma_r,
        r: inst.r,
        x_rank: blocks.x_rank,
        x_i_rank,
        basis_columns: x_i_rank == inst.r && blocks.x_rank == inst.r,
        lemma_norm,
        lemma_bound: lemma_norm < 1.0,
        k: k_rank,
        rank_gain: k_rank >= 1,
    })
}

/// Greedy column pivoting: repeatedly take the column with the largest
/// residual norm and deflate the rest against it.
pub fn pivoted_columns<T: RankScalar>(
    m: &DMatrix<T>,
    candidates: &[usize],
    max_count: usize,
    tol: T,
) -> Vec<usize> {
    let mut residual: Vec<(usize, nalgebra::DVector<T>)> = candidates
        .iter()
        .map(|&j| (j, m.column(j).into_owned()))
        .collect();
    let mut picked = Vec::new();
    while picked.len() < max_count && !residual.is_empty() {
        let (pos, norm) = residual
            .iter()
            .enumerate()
            .map(|(p, (_, v))| (p, v.norm()))
            .fold((0, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if norm <= tol {
            break;
        }
        let (j, v) = residual.swap_remove(pos);
        let q = v / norm;
        for (_, w) in residual.iter_mut() {
            let proj = q.dot(w);
            *w -= &q * proj;
        }
        picked.push(j);
    }
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FindResult {
    Found(IndexSets),
    /// No candidate `I` got past `failed`; the furthest-reaching attempt is
    /// reported.
    NotFound { failed: Assumption },
}

fn attempt_with<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
    i: &[usize],
) -> Result<IndexSets, Assumption> {
    let r = inst.r;
    if i.len() != r || blocks.x_rank != r {
        return Err(Assumption::BasisColumns);
    }
    if rank_unchecked(&blocks.x.select_columns(i.iter()), None) != r {
        return Err(Assumption::BasisColumns);
    }
    if f64_of(blocks.lemma_norm(i)) >= 1.0 {
        return Err(Assumption::LemmaBound);
    }
    let rest: Vec<usize> = (0..blocks.n()).filter(|j| !i.contains(j)).collect();
    let residual = blocks.z_residual(i);
    let k = pivoted_columns(&residual, &rest, rest.len(), blocks.residual_tol);
    if k.is_empty() {
        return Err(Assumption::RankGain);
    }
    Ok(IndexSets { i: i.to_vec(), k })
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let r = c.len();
    for pos in (0..r).rev() {
        if c[pos] < n - r + pos {
            c[pos] += 1;
            for q in pos + 1..r {
                c[q] = c[q - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Searches for `I` (basis columns of `X`) and `K` (columns adding rank
/// outside `col(X) + col(Z_I)`). Greedy pivoting first, then every size-`r`
/// subset when `n ≤ EXHAUSTIVE_LIMIT`.
pub fn find_sets<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
) -> FindResult {
    let n = blocks.n();
    let r = inst.r;
    let all: Vec<usize> = (0..n).collect();
    let x_tol = tolerance_for(blocks.x.nrows(), n, Some(spectral_norm(&blocks.x)));
    let greedy = pivoted_columns(&blocks.x, &all, r, x_tol);
    let mut furthest = match attempt_with(inst, blocks, &greedy) {
        Ok(sets) => return FindResult::Found(sets),
        Err(a) => a,
    };
    if n <= EXHAUSTIVE_LIMIT && r <= n {
        let mut comb: Vec<usize> = (0..r).collect();
        loop {
            if comb != greedy {
                match attempt_with(inst, blocks, &comb) {
                    Ok(sets) => return FindResult::Found(sets),
                    Err(a) => furthest = furthest.max(a),
                }
            }
            if !next_combination(&mut comb, n) {
                break;
            }
        }
    }
    FindResult::NotFound { failed: furthest }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LemmaVerdict {
    Confirmed { rank: usize, r: usize },
    Refuted { rank: usize, r: usize },
    Inapplicable { failed: Assumption },
}

/// Checks `rank(X_I + P Y_I) = r` when `X_I` is a basis of `col(X)` and
/// `‖X_I† P Y_I‖₂ < 1`.
pub fn verify_lemma1<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
    i: &[usize],
) -> Result<LemmaVerdict, RankError> {
    validate_sets(i, &[], inst.r, blocks.n())?;
    let r = inst.r;
    let x_i = blocks.x.select_columns(i.iter());
    if blocks.x_rank != r || rank_unchecked(&x_i, None) != r {
        return Ok(LemmaVerdict::Inapplicable {
            failed: Assumption::BasisColumns,
        });
    }
    if f64_of(blocks.lemma_norm(i)) >= 1.0 {
        return Ok(LemmaVerdict::Inapplicable {
            failed: Assumption::LemmaBound,
        });
    }
    let sum = x_i + &blocks.p * blocks.y.select_columns(i.iter());
    let rank = rank_unchecked(&sum, None);
    Ok(if rank == r {
        LemmaVerdict::Confirmed { rank, r }
    } else {
        LemmaVerdict::Refuted { rank, r }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prop1Verdict {
    Holds,
    Violated,
    NotApplicable { failed: Assumption },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Outcome {
    pub verdict: Prop1Verdict,
    pub rank_sa: usize,
    pub rank_sb: usize,
    pub r: usize,
    pub sets: Option<IndexSets>,
    pub report: Option<AssumptionReport>,
    /// Rank of `(T S_B)` restricted to the columns `I ∪ K`.
    pub restricted_rank: Option<usize>,
}

impl Prop1Outcome {
    pub fn k(&self) -> Option<usize> {
        self.report.as_ref().map(|r| r.k)
    }
}

/// Full pipeline: decompose, check (i), search index sets, verify the rank
/// increase `rank(S_B) ≥ r + k > r = rank(S_A)`.
pub fn verify_prop1<T: RankScalar>(
    a: &DMatrix<T>,
    delta: &DMatrix<T>,
    c: &DMatrix<T>,
) -> Result<Prop1Outcome, RankError> {
    let (inst, blocks) = decompose(a, delta, c)?;
    Ok(verify_decomposed(&inst, &blocks))
}

pub fn verify_decomposed<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
) -> Prop1Outcome {
    let rank_sa = rank_unchecked(&blocks.s_a, None);
    let rank_sb = rank_unchecked(&blocks.s_b, None);
    let mut outcome = Prop1Outcome {
        verdict: Prop1Verdict::Holds,
        rank_sa,
        rank_sb,
        r: inst.r,
        sets: None,
        report: None,
        restricted_rank: None,
    };
    if spectral_norm(&inst.delta) >= inst.sigma_r {
        outcome.verdict = Prop1Verdict::NotApplicable {
            failed: Assumption::SmallPerturbation,
        };
        return outcome;
    }
    let sets = match find_sets(inst, blocks) {
        FindResult::Found(sets) => sets,
        FindResult::NotFound { failed } => {
            outcome.verdict = Prop1Verdict::NotApplicable { failed };
            return outcome;
        }
    };
    let report = check_assumptions(inst, blocks, &sets.i, &sets.k).expect("found sets are valid");
    if let Some(failed) = report.first_failure() {
        outcome.verdict = Prop1Verdict::NotApplicable { failed };
    } else {
        let cols: Vec<usize> = sets.i.iter().chain(&sets.k).copied().collect();
        let ts = blocks.t_operator(&sets.i) * blocks.s_b.select_columns(cols.iter());
        outcome.restricted_rank = Some(rank_unchecked(&ts, None));
        let ok = rank_sa == inst.r && rank_sb >= inst.r + report.k && rank_sb > rank_sa;
        outcome.verdict = if ok { Prop1Verdict::Holds } else { Prop1Verdict::Violated };
    }
    outcome.sets = Some(sets);
    outcome.report = Some(report);
    outcome
}

/// Numerical health of a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Largest deviation of `[V_S V_⊥]ᵀ[V_S V_⊥]` from the identity.
    pub orthogonality_error: f64,
    /// `‖A V_⊥‖_F / ‖A‖_F`.
    pub span_error: f64,
    /// `‖S_B - X - Y‖_F / (‖X‖_F + ‖Y‖_F)`.
    pub reconstruction_error: f64,
    /// `max(‖P² - P‖_F, ‖P - Pᵀ‖_F)`.
    pub projector_error: f64,
    /// `σ_min(A_S + Δ_S)`.
    pub perturbed_sigma_min: f64,
    /// `rank(S_A) == rank(A_S C_Sᵀ)`.
    pub rotation_invariant: bool,
}

pub fn diagnostics<T: RankScalar>(
    inst: &PerturbationInstance<T>,
    blocks: &BlockDecomposition<T>,
) -> Diagnostics {
    let d = inst.a.ncols();
    let mut v = DMatrix::zeros(d, d);
    v.columns_mut(0, inst.r).copy_from(&inst.v_s);
    v.columns_mut(inst.r, d - inst.r).copy_from(&inst.v_perp);
    let gram = v.transpose() * &v - DMatrix::identity(d, d);
    let orthogonality_error = gram.iter().map(|x| f64_of(x.abs())).fold(0.0, f64::max);
    let span_error = f64_of((&inst.a * &inst.v_perp).norm()) / f64_of(inst.a.norm());
    let denom = f64_of(blocks.x.norm()) + f64_of(blocks.y.norm());
    let recon = f64_of((&blocks.s_b - &blocks.x - &blocks.y).norm());
    let reconstruction_error = if denom > 0.0 { recon / denom } else { recon };
    let p2 = &blocks.p * &blocks.p - &blocks.p;
    let pt = &blocks.p - blocks.p.transpose();
    let projector_error = f64_of(p2.norm()).max(f64_of(pt.norm()));
    let perturbed = &blocks.a_s + &blocks.delta_s;
    let perturbed_sigma_min = svd_sorted(&perturbed)
        .values
        .last()
        .map(|x| f64_of(*x))
        .unwrap_or(0.0);
    let rotated = &blocks.a_s * blocks.c_s.transpose();
    let rotation_invariant = rank_unchecked(&blocks.s_a, None) == rank_unchecked(&rotated, None);
    Diagnostics {
        orthogonality_error,
        span_error,
        reconstruction_error,
        projector_error,
        perturbed_sigma_min,
        rotation_invariant,
    }
}

/// A generated `(A, Δ, C)` triple in double precision.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub a: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: usize,
}

impl GeneratedInstance {
    pub fn cast<T: RankScalar>(&self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let conv = |m: &DMatrix<f64>| m.map(|x| cst::<T>(x));
        (conv(&self.a), conv(&self.delta), conv(&self.c))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian(rng, d, d).qr().q()
}

fn largest_rank(m: usize, d: usize, n: usize) -> usize {
    // the rank gain needs room outside both col(X) and the span of Z_I
    ((m.min(d).saturating_sub(1)) / 2).min(n.saturating_sub(1) / 2)
}

/// One random instance shaped to make the rank-increase hypotheses likely:
/// `A = U diag(σ) Vᵀ` with `σ ∈ [1, 2]`, `Δ` mixing row-space and
/// complement directions and scaled to `‖Δ‖₂ = σ_r / 2`, and unit-norm
/// Gaussian rows for `C`.
pub fn generate_instance(
    rng: &mut ChaCha8Rng,
    dims: Option<(usize, usize, usize)>,
    max_dim: usize,
) -> Result<GeneratedInstance, RankError> {
    let (m, d, n) = match dims {
        Some(dims) => dims,
        None => {
            if max_dim < 3 {
                return Err(RankError::InvalidDims(format!("max_dim {max_dim} < 3")));
            }
            let m = rng.random_range(3..=max_dim);
            let d = rng.random_range(3..=max_dim);
            let r_cap = largest_rank(m, d, max_dim);
            let n_min = 2 * rng.random_range(1..=r_cap) + 1;
            (m, d, rng.random_range(n_min..=max_dim))
        }
    };
    let r_cap = largest_rank(m, d, n);
    if r_cap == 0 {
        return Err(RankError::InvalidDims(format!(
            "m={m}, d={d}, n={n} leave no room for a rank increase"
        )));
    }
    let r = rng.random_range(1..=r_cap);
    let u = random_orthogonal(rng, m);
    let v = random_orthogonal(rng, d);
    let sigma: Vec<f64> = (0..r).map(|_| rng.random_range(1.0..2.0)).collect();
    let sigma_r = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let mut a = DMatrix::zeros(m, d);
    for (j, s) in sigma.iter().enumerate() {
        a += u.column(j) * v.column(j).transpose() * *s;
    }

    let v_s = v.columns(0, r);
    let q = rng.random_range(r + 1..=d - r);
    let v_out = v.columns(r, q);
    let delta_in = gaussian(rng, m, r) * v_s.transpose();
    let delta_out = gaussian(rng, m, q) * v_out.transpose();
    let w: f64 = rng.random_range(0.0..1.0);
    let in_scale = w / spectral_norm(&delta_in);
    let mut delta = delta_in * in_scale + &delta_out / spectral_norm(&delta_out);
    let scale = 0.5 * sigma_r / spectral_norm(&delta);
    delta *= scale;

    let mut c = gaussian(rng, n, d);
    for mut row in c.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    Ok(GeneratedInstance { a, delta, c, r })
}

/// Rejection-samples until an instance meets all four hypotheses.
pub fn generate_satisfying(
    rng: &mut ChaCha8Rng,
    dims: Option<(usize, usize, usize)>,
    max_dim: usize,
    max_attempts: usize,
) -> Result<Option<(GeneratedInstance, Prop1Outcome)>, RankError> {
    for _ in 0..max_attempts {
        let g = generate_instance(rng, dims, max_dim)?;
        let (inst, blocks) = decompose(&g.a, &g.delta, &g.c)?;
        if inst.r != g.r {
            continue;
        }
        let outcome = verify_decomposed(&inst, &blocks);
        if !matches!(outcome.verdict, Prop1Verdict::NotApplicable { .. }) {
            return Ok(Some((g, outcome)));
        }
    }
    Ok(None)
}

pub const DEFAULT_MAX_DIM: usize = 20;
pub const DEFAULT_MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub trials: usize,
    pub seed: u64,
    /// Fixed `(m, d, n)`; random dimensions up to `max_dim` when absent.
    pub dims: Option<(usize, usize, usize)>,
    pub max_dim: usize,
    pub max_attempts: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            trials: 100,
            seed: 0,
            dims: None,
            max_dim: DEFAULT_MAX_DIM,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstMargins {
    /// Smallest `σ_r(A) - ‖Δ‖₂`.
    pub min_sigma_gap: f64,
    /// Largest `‖X_I† P Y_I‖₂`.
    pub max_lemma_norm: f64,
    /// Smallest `rank(S_B) - (r + k)`.
    pub min_rank_excess: i64,
    /// Smallest `σ_min(A_S + Δ_S)`.
    pub min_perturbed_sigma: f64,
    pub max_reconstruction_error: f64,
    pub max_projector_error: f64,
    pub max_orthogonality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub generated: usize,
    pub generation_failures: usize,
    pub holds: usize,
    pub violated: usize,
    pub lemma_confirmed: usize,
    pub lemma_refuted: usize,
    pub rotation_invariance_failures: usize,
    pub worst: WorstMargins,
}

/// Per-trial seed, so trials can run in any order.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed.wrapping_add((trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct TrialResult {
    outcome: Prop1Outcome,
    lemma: LemmaVerdict,
    diag: Diagnostics,
}

fn run_trial(config: &CampaignConfig, trial: usize) -> Result<Option<TrialResult>, RankError> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(config.seed, trial));
    let Some((g, outcome)) = generate_satisfying(&mut rng, config.dims, config.max_dim, config.max_attempts)? else {
        return Ok(None);
    };
    let (inst, blocks) = decompose(&g.a, &g.delta, &g.c)?;
    let i = &outcome.sets.as_ref().expect("satisfying instance has sets").i;
    let lemma = verify_lemma1(&inst, &blocks, i)?;
    let diag = diagnostics(&inst, &blocks);
    Ok(Some(TrialResult { outcome, lemma, diag }))
}

/// Monte Carlo over generated hypothesis-satisfying instances.
pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignReport, RankError> {
    let results: Vec<Option<TrialResult>> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<_, _>>()?;
    let mut report = CampaignReport {
        config: config.clone(),
        generated: 0,
        generation_failures: 0,
        holds: 0,
        violated: 0,
        lemma_confirmed: 0,
        lemma_refuted: 0,
        rotation_invariance_failures: 0,
        worst: WorstMargins {
            min_sigma_gap: f64::INFINITY,
            max_lemma_norm: 0.0,
            min_rank_excess: i64::MAX,
            min_perturbed_sigma: f64::INFINITY,
            max_reconstruction_error: 0.0,
            max_projector_error: 0.0,
            max_orthogonality_error: 0.0,
        },
    };
    for result in results {
        let Some(t) = result else {
            report.generation_failures += 1;
            continue;
        };
        report.generated += 1;
        match t.outcome.verdict {
            Prop1Verdict::Holds => report.holds += 1,
            _ => report.violated += 1,
        }
        match t.lemma {
            LemmaVerdict::Confirmed { .. } => report.lemma_confirmed += 1,
            _ => report.lemma_refuted += 1,
        }
        if !t.diag.rotation_invariant {
            report.rotation_invariance_failures += 1;
        }
        let w = &mut report.worst;
        if let Some(a) = &t.outcome.report {
            w.min_sigma_gap = w.min_sigma_gap.min(a.sigma_r - a.delta_norm);
            w.max_lemma_norm = w.max_lemma_norm.max(a.lemma_norm);
            let excess = t.outcome.rank_sb as i64 - (t.outcome.r + a.k) as i64;
            w.min_rank_excess = w.min_rank_excess.min(excess);
        }
        w.min_perturbed_sigma = w.min_perturbed_sigma.min(t.diag.perturbed_sigma_min);
        w.max_reconstruction_error = w.max_reconstruction_error.max(t.diag.reconstruction_error);
        w.max_projector_error = w.max_projector_error.max(t.diag.projector_error);
        w.max_orthogonality_error = w.max_orthogonality_error.max(t.diag.orthogonality_error);
    }
    Ok(report)
}

/// `A = [[1,0,0],[0,1,0],[1,1,0]]`, `Δ = 0.1·e₃e₃ᵀ`, `C = I₃`.
pub fn hand_instance() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    let mut delta = DMatrix::zeros(3, 3);
    delta[(2, 2)] = 0.1;
    (a, delta, DMatrix::identity(3, 3))
}
