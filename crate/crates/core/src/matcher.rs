//! Patch-level matching retrieval and matching selection.
//!
//! Retrieval compares every 3x3 target (depth) patch against every source
//! (RGB) patch by cosine similarity and keeps the `k` best per target.
//! The fast path L2-normalizes both patch sets once and evaluates the
//! correlation rows as a blocked matrix product, streaming `block_rows`
//! rows at a time so peak memory is `block_rows * hw` instead of `(hw)^2`.
//!
//! Every correlation entry is accumulated in the same order (feature index
//! ascending from zero) regardless of blocking or thread count, so results
//! are bit-identical across schedules.

use rayon::prelude::*;

use crate::diffops::{gradient_magnitude, hessian_norm_map};
use crate::error::{Error, Result};
use crate::grid::{extract_patches, fold_patches, FeatureMap, PatchSet};

/// Patches whose L2 norm falls below this get similarity 0 with everything.
pub const MIN_PATCH_NORM: f64 = 1e-12;

pub const DEFAULT_BLOCK_ROWS: usize = 64;

/// Columns per tile of the correlation kernel.
const COL_TILE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatchOrder {
    Zero,
    First,
    Second,
}

impl MatchOrder {
    pub const ALL: [MatchOrder; 3] = [MatchOrder::Zero, MatchOrder::First, MatchOrder::Second];

    pub fn index(self) -> usize {
        match self {
            MatchOrder::Zero => 0,
            MatchOrder::First => 1,
            MatchOrder::Second => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            MatchOrder::Zero => 'z',
            MatchOrder::First => 'f',
            MatchOrder::Second => 's',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'z' => Some(MatchOrder::Zero),
            'f' => Some(MatchOrder::First),
            's' => Some(MatchOrder::Second),
            _ => None,
        }
    }
}

/// Row-major unit-norm patch vectors; near-zero patches are stored as zeros.
#[derive(Clone, Debug)]
pub struct NormalizedPatches {
    dim: usize,
    count: usize,
    rows: Vec<f64>,
}

impl NormalizedPatches {
    pub fn new(p: &PatchSet) -> Self {
        let dim = p.dim();
        let mut rows = p.vectors().to_vec();
        for row in rows.chunks_exact_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < MIN_PATCH_NORM {
                row.fill(0.0);
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Self {
            dim,
            count: p.count(),
            rows,
        }
    }

    pub fn from_map(f: &FeatureMap) -> Self {
        Self::new(&extract_patches(f))
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Feature-major copy (`dim x count`) used as the right-hand operand.
    fn transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.rows.len()];
        for (j, row) in self.rows.chunks_exact(self.dim).enumerate() {
            for (k, &v) in row.iter().enumerate() {
                t[k * self.count + j] = v;
            }
        }
        t
    }
}

/// Cosine similarity of two already-normalized vectors, accumulated in the
/// same order as the blocked kernel.
#[inline]
fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc.clamp(-1.0, 1.0)
}

/// Writes `rows x n` similarities of `targets` (row-major, `dim` wide)
/// against the feature-major source matrix into `out`.
fn correlate_block(targets: &[f64], dim: usize, source_t: &[f64], n: usize, out: &mut [f64]) {
    let rows = targets.len() / dim;
    debug_assert_eq!(out.len(), rows * n);
    out.fill(0.0);
    let mut r = 0;
    while r + 4 <= rows {
        let t = &targets[r * dim..(r + 4) * dim];
        let block = &mut out[r * n..(r + 4) * n];
        let (o0, rest) = block.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            let (o0, o1, o2, o3) = (
                &mut o0[j0..j1],
                &mut o1[j0..j1],
                &mut o2[j0..j1],
                &mut o3[j0..j1],
            );
            for k in 0..dim {
                let s = &source_t[k * n + j0..k * n + j1];
                let (a0, a1, a2, a3) = (t[k], t[dim + k], t[2 * dim + k], t[3 * dim + k]);
                for j in 0..s.len() {
                    let sv = s[j];
                    o0[j] += a0 * sv;
                    o1[j] += a1 * sv;
                    o2[j] += a2 * sv;
                    o3[j] += a3 * sv;
                }
            }
        }
        r += 4;
    }
    for r in r..rows {
        let t = &targets[r * dim..(r + 1) * dim];
        let o = &mut out[r * n..(r + 1) * n];
        for (k, &a) in t.iter().enumerate() {
            let s = &source_t[k * n..(k + 1) * n];
            for (ov, &sv) in o.iter_mut().zip(s) {
                *ov += a * sv;
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Full `hw x hw` cosine-similarity matrix between target and source patches.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSet {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CorrelationSet {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn ensure_same_shape(target: &FeatureMap, source: &FeatureMap) -> Result<()> {
    if target.shape() != source.shape() {
        return Err(Error::shape(
            format!("source {:?}", target.shape()),
            format!("{:?}", source.shape()),
        ));
    }
    Ok(())
}

pub fn correlation_set(target: &FeatureMap, source: &FeatureMap) -> Result<CorrelationSet> {
    ensure_same_shape(target, source)?;
    let t = NormalizedPatches::from_map(target);
    let s = NormalizedPatches::from_map(source);
    let source_t = s.transposed();
    let n = s.count;
    let mut values = vec![0.0; t.count * n];
    values
        .par_chunks_mut(DEFAULT_BLOCK_ROWS * n)
        .zip(t.rows.par_chunks(DEFAULT_BLOCK_ROWS * t.dim))
        .for_each(|(out, rows)| correlate_block(rows, t.dim, &source_t, n, out));
    Ok(CorrelationSet {
        rows: t.count,
        cols: n,
        values,
    })
}

/// Top-k indices and scores per target patch.
///
/// Within a row, scores are non-increasing and equal scores are ordered by
/// ascending source index. [`rescore`] produces results whose indices are
/// fixed in advance, in which case only the index order is preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub order: MatchOrder,
    k: usize,
    count: usize,
    source_count: usize,
    eta: Vec<usize>,
    psi: Vec<f64>,
}

impl MatchResult {
    pub fn new(
        order: MatchOrder,
        k: usize,
        source_count: usize,
        eta: Vec<usize>,
        psi: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || !eta.len().is_multiple_of(k) || eta.len() != psi.len() {
            return Err(Error::InvalidArgument(format!(
                "match result with k = {k}, {} indices, {} scores",
                eta.len(),
                psi.len()
            )));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("match scores"));
        }
        Ok(Self {
            order,
            k,
            count: eta.len() / k,
            source_count,
            eta,
            psi,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of target patches.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn eta(&self, i: usize) -> &[usize] {
        &self.eta[i * self.k..(i + 1) * self.k]
    }

    pub fn psi(&self, i: usize) -> &[f64] {
        &self.psi[i * self.k..(i + 1) * self.k]
    }

    pub fn all_eta(&self) -> &[usize] {
        &self.eta
    }

    pub fn all_psi(&self) -> &[f64] {
        &self.psi
    }

    /// Best source index for target `i`.
    pub fn top1(&self, i: usize) -> usize {
        self.eta[i * self.k]
    }
}

/// Writes the `k` largest entries of `row` (score descending, index
/// ascending on ties) into `idx` / `score`.
pub fn select_top_k(row: &[f64], idx: &mut [usize], score: &mut [f64]) {
    let k = idx.len();
    debug_assert!(k <= row.len() && score.len() == k);
    if k * 8 >= row.len() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for (slot, &j) in order[..k].iter().enumerate() {
            idx[slot] = j;
            score[slot] = row[j];
        }
        return;
    }
    let mut len = 0;
    for (j, &v) in row.iter().enumerate() {
        if len == k && v <= score[k - 1] {
            continue;
        }
        let pos = score[..len].partition_point(|&s| s >= v);
        let end = if len < k { len } else { k - 1 };
        for p in (pos..end).rev() {
            idx[p + 1] = idx[p];
            score[p + 1] = score[p];
        }
        idx[pos] = j;
        score[pos] = v;
        len = (len + 1).min(k);
    }
}

pub fn top_k(cs: &CorrelationSet, k: usize, order: MatchOrder) -> Result<MatchResult> {
    check_k(k, cs.cols)?;
    let mut eta = vec![0; cs.rows * k];
    let mut psi = vec![0.0; cs.rows * k];
    for i in 0..cs.rows {
        select_top_k(
            cs.row(i),
            &mut eta[i * k..(i + 1) * k],
            &mut psi[i * k..(i + 1) * k],
        );
    }
    MatchResult::new(order, k, cs.cols, eta, psi)
}

fn check_k(k: usize, count: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > count {
        return Err(Error::KTooLarge { k, count });
    }
    Ok(())
}

/// Streaming retrieval: correlation rows are produced `block_rows` at a time
/// and reduced to top-k immediately, never materializing the full matrix.
pub fn retrieve(
    target: &FeatureMap,
    source: &FeatureMap,
    k: usize,
    order: MatchOrder,
    block_rows: usize,
) -> Result<MatchResult> {
    ensure_same_shape(target, source)?;
    let side = SourceSide::new(source);
    retrieve_from(
        &NormalizedPatches::from_map(target),
        &side,
        k,
        order,
        block_rows,
    )
}

fn retrieve_from(
    t: &NormalizedPatches,
    side: &SourceSide,
    k: usize,
    order: MatchOrder,
    block_rows: usize,
) -> Result<MatchResult> {
    let n = side.norm.count;
    check_k(k, n)?;
    let block_rows = block_rows.max(1);
    let dim = t.dim;
    let mut eta = vec![0; t.count * k];
    let mut psi = vec![0.0; t.count * k];
    eta.par_chunks_mut(block_rows * k)
        .zip(psi.par_chunks_mut(block_rows * k))
        .zip(t.rows.par_chunks(block_rows * dim))
        .for_each_init(
            || vec![0.0; block_rows * n],
            |buf, ((eta, psi), rows)| {
                let r = rows.len() / dim;
                let buf = &mut buf[..r * n];
                correlate_block(rows, dim, &side.transposed, n, buf);
                for (i, row) in buf.chunks_exact(n).enumerate() {
                    select_top_k(
                        row,
                        &mut eta[i * k..(i + 1) * k],
                        &mut psi[i * k..(i + 1) * k],
                    );
                }
            },
        );
    MatchResult::new(order, k, n, eta, psi)
}

/// Recomputes the scores of `prior`'s index pairs for new target features.
/// Index lists are kept as they are, even if the new scores would rank
/// them differently.
pub fn rescore(
    target: &FeatureMap,
    source: &FeatureMap,
    prior: &MatchResult,
) -> Result<MatchResult> {
    ensure_same_shape(target, source)?;
    rescore_from(
        &NormalizedPatches::from_map(target),
        &NormalizedPatches::from_map(source),
        prior,
    )
}

fn rescore_from(
    t: &NormalizedPatches,
    s: &NormalizedPatches,
    prior: &MatchResult,
) -> Result<MatchResult> {
    let n = s.count;
    if prior.count != t.count || prior.source_count != n {
        return Err(Error::shape(
            format!("{} targets / {} sources", t.count, n),
            format!("{} / {}", prior.count, prior.source_count),
        ));
    }
    check_indices(prior, n)?;
    let psi = prior
        .eta
        .iter()
        .enumerate()
        .map(|(slot, &j)| unit_dot(t.row(slot / prior.k), s.row(j)))
        .collect();
    MatchResult::new(prior.order, prior.k, n, prior.eta.clone(), psi)
}

fn check_indices(m: &MatchResult, n: usize) -> Result<()> {
    match m.eta.iter().find(|&&j| j >= n) {
        Some(&index) => Err(Error::IndexOutOfRange { index, count: n }),
        None => Ok(()),
    }
}

fn softmax(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Gathers the matched source patches of every target position, weights
/// them by the softmax of their scores, and folds the result back to a map.
pub fn matching_selection(source: &FeatureMap, m: &MatchResult) -> Result<FeatureMap> {
    selection_from(&extract_patches(source), m)
}

fn selection_from(patches: &PatchSet, m: &MatchResult) -> Result<FeatureMap> {
    let n = patches.count();
    if m.count != n {
        return Err(Error::shape(
            format!("{n} target positions"),
            format!("{}", m.count),
        ));
    }
    check_indices(m, n)?;
    let dim = patches.dim();
    let mut out = vec![0.0; n * dim];
    let mut weights = vec![0.0; m.k];
    for (i, acc) in out.chunks_exact_mut(dim).enumerate() {
        softmax(m.psi(i), &mut weights);
        for (&j, &w) in m.eta(i).iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(patches.patch(j)) {
                *a += w * v;
            }
        }
    }
    Ok(fold_patches(&PatchSet::new(
        patches.channels(),
        patches.height(),
        patches.width(),
        out,
    )?))
}

/// How matches are obtained: a fresh exhaustive search, or fixed indices
/// from an earlier search with re-evaluated scores.
#[derive(Clone, Copy, Debug)]
pub enum Retrieval<'a> {
    Search { k: usize, block_rows: usize },
    Frozen(&'a MatchResult),
}

impl Retrieval<'_> {
    pub fn search(k: usize) -> Self {
        Retrieval::Search {
            k,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }

    fn run(
        &self,
        target: &FeatureMap,
        side: &SourceSide,
        order: MatchOrder,
    ) -> Result<MatchResult> {
        let t = NormalizedPatches::from_map(target);
        match *self {
            Retrieval::Search { k, block_rows } => retrieve_from(&t, side, k, order, block_rows),
            Retrieval::Frozen(prior) => rescore_from(&t, &side.norm, prior),
        }
    }
}

/// Output of one matching order.
#[derive(Clone, Debug)]
pub struct OrderMatch {
    pub result: MatchResult,
    /// RGB features selected by the matches (`F_r^z`, `F_r^f` or `F_r^s`).
    pub matched: FeatureMap,
    /// Matched RGB gradient (first order) or Hessian norm (second order).
    pub prior: Option<FeatureMap>,
}

/// Patch forms of one source map, computed once and shared by every
/// retrieval against it.
#[derive(Clone, Debug)]
struct SourceSide {
    patches: PatchSet,
    norm: NormalizedPatches,
    transposed: Vec<f64>,
}

impl SourceSide {
    fn new(map: &FeatureMap) -> Self {
        let patches = extract_patches(map);
        let norm = NormalizedPatches::new(&patches);
        let transposed = norm.transposed();
        Self {
            patches,
            norm,
            transposed,
        }
    }
}

/// RGB-side maps that stay fixed while the depth stream is updated: the
/// features, their gradient magnitude and Hessian norm, each with its
/// patches prepared for retrieval and selection.
#[derive(Clone, Debug)]
pub struct SourceMaps {
    features: FeatureMap,
    gradient: FeatureMap,
    hessian: FeatureMap,
    sides: [SourceSide; 3],
}

impl SourceMaps {
    pub fn new(rgb: &FeatureMap) -> Self {
        let gradient = gradient_magnitude(rgb);
        let hessian = hessian_norm_map(rgb);
        let sides = [
            SourceSide::new(rgb),
            SourceSide::new(&gradient),
            SourceSide::new(&hessian),
        ];
        Self {
            features: rgb.clone(),
            gradient,
            hessian,
            sides,
        }
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn gradient(&self) -> &FeatureMap {
        &self.gradient
    }

    pub fn hessian(&self) -> &FeatureMap {
        &self.hessian
    }
}

/// Zero order correlates the raw features, first order their gradient
/// magnitudes, second order their Hessian norms. Selection always gathers
/// from the RGB features; higher orders also gather their own RGB map.
pub fn match_order(
    rgb: &FeatureMap,
    depth: &FeatureMap,
    order: MatchOrder,
    retrieval: Retrieval<'_>,
) -> Result<OrderMatch> {
    ensure_same_shape(depth, rgb)?;
    match_order_with(&SourceMaps::new(rgb), depth, order, retrieval)
}

/// [`match_order`] with precomputed RGB-side maps.
pub fn match_order_with(
    source: &SourceMaps,
    depth: &FeatureMap,
    order: MatchOrder,
    retrieval: Retrieval<'_>,
) -> Result<OrderMatch> {
    ensure_same_shape(depth, &source.features)?;
    let [features, gradient, hessian] = &source.sides;
    match order {
        MatchOrder::Zero => {
            let result = retrieval.run(depth, features, order)?;
            let matched = selection_from(&features.patches, &result)?;
            Ok(OrderMatch {
                result,
                matched,
                prior: None,
            })
        }
        MatchOrder::First | MatchOrder::Second => {
            let (side, depth_map) = if order == MatchOrder::First {
                (gradient, gradient_magnitude(depth))
            } else {
                (hessian, hessian_norm_map(depth))
            };
            let result = retrieval.run(&depth_map, side, order)?;
            let matched = selection_from(&features.patches, &result)?;
            let prior = selection_from(&side.patches, &result)?;
            Ok(OrderMatch {
                result,
                matched,
                prior: Some(prior),
            })
        }
    }
}

/// Mean absolute difference after per-channel standardization of both maps.
/// Used to compare feature distributions across modalities.
pub fn standardized_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    a.standardize(1e-8).mean_abs_diff(&b.standardize(1e-8))
}

/// Fraction of the masked targets whose best match sits at
/// `target + (dy, dx)`.
pub fn displacement_fraction(
    m: &MatchResult,
    width: usize,
    mask: &[bool],
    dy: isize,
    dx: isize,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        total += 1;
        let (ty, tx) = ((i / width) as isize, (i % width) as isize);
        let j = m.top1(i);
        let (sy, sx) = ((j / width) as isize, (j % width) as isize);
        if sy - ty == dy && sx - tx == dx {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Most frequent top-1 displacement `(dy, dx)` over the masked targets and
/// the fraction of targets that agree with it.
pub fn dominant_displacement(
    m: &MatchResult,
    width: usize,
    mask: &[bool],
) -> ((isize, isize), f64) {
    use std::collections::BTreeMap;
    let mut votes: BTreeMap<(isize, isize), usize> = BTreeMap::new();
    let mut total = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        let j = m.top1(i);
        let d = (
            (j / width) as isize - (i / width) as isize,
            (j % width) as isize - (i % width) as isize,
        );
        *votes.entry(d).or_default() += 1;
        total += 1;
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, n)| (d, n as f64 / total as f64))
        .unwrap_or(((0, 0), 0.0))
}

/// Mask of the entries strictly above the given percentile (0-100) of `values`.
pub fn above_percentile(values: &[f64], percentile: f64) -> Vec<bool> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let threshold = sorted[rank.min(sorted.len() - 1)];
    values.iter().map(|&v| v > threshold).collect()
}
