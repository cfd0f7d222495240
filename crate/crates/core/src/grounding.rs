//! Segment scoring directly on an alignment map.
//!
//! For a clip-inclusive span `[s, e]` of length `L`:
//!
//! ```text
//! SC(s,e) = mean_{i active, j in [s,e]} P[i][j]
//!         - mean_{j outside [s,e]} min_{i active} P[i][j]
//! ```
//!
//! The second term is 0 for the full span. [`score_all_bruteforce`] evaluates
//! this literally; [`score_all_fast`] uses column sums, column minima and their
//! prefix sums so each span costs O(1).

use std::cmp::Ordering;

use crate::alignment::AlignmentMap;
use crate::error::{FsanError, Result};

/// Clip-inclusive span `s..=e`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Segment {
    pub s: usize,
    pub e: usize,
}

impl Segment {
    pub fn new(s: usize, e: usize) -> Self {
        debug_assert!(s <= e);
        Segment { s, e }
    }

    pub fn len(self) -> usize {
        self.e - self.s + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, j: usize) -> bool {
        self.s <= j && j <= self.e
    }

    /// `[s·clip, (e+1)·clip]` in seconds.
    pub fn to_seconds(self, clip_duration_s: f64) -> (f64, f64) {
        (self.s as f64 * clip_duration_s, (self.e + 1) as f64 * clip_duration_s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScorerOptions {
    /// When false (and `N_v > 1`) the full span is never scored.
    pub include_full_span: bool,
}

impl Default for ScorerOptions {
    fn default() -> Self {
        ScorerOptions {
            include_full_span: true,
        }
    }
}

/// All scored spans in `(s, e)` lexicographic order.
pub fn enumerate_segments(n_clips: usize, opts: ScorerOptions) -> Vec<Segment> {
    let mut out = Vec::with_capacity(n_clips * (n_clips + 1) / 2);
    for s in 0..n_clips {
        for e in s..n_clips {
            if !opts.include_full_span && n_clips > 1 && s == 0 && e == n_clips - 1 {
                continue;
            }
            out.push(Segment::new(s, e));
        }
    }
    out
}

/// Scores on the upper triangle (`s <= e`) of an `N_v×N_v` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentScoreTable {
    n_clips: usize,
    scores: Vec<Option<f64>>,
}

impl SegmentScoreTable {
    fn empty(n_clips: usize) -> Self {
        SegmentScoreTable {
            n_clips,
            scores: vec![None; n_clips * n_clips],
        }
    }

    fn set(&mut self, seg: Segment, v: f64) {
        self.scores[seg.s * self.n_clips + seg.e] = Some(v);
    }

    pub fn n_clips(&self) -> usize {
        self.n_clips
    }

    pub fn get(&self, s: usize, e: usize) -> Option<f64> {
        if s >= self.n_clips || e >= self.n_clips {
            return None;
        }
        self.scores[s * self.n_clips + e]
    }

    /// Defined cells in `(s, e)` lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (Segment, f64)> + '_ {
        let n = self.n_clips;
        self.scores
            .iter()
            .enumerate()
            .filter_map(move |(k, v)| v.map(|v| (Segment::new(k / n, k % n), v)))
    }

    pub fn len(&self) -> usize {
        self.scores.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scores of [`SegmentScoreTable::iter`] as a flat vector.
    pub fn values(&self) -> Vec<f64> {
        self.iter().map(|(_, v)| v).collect()
    }

    pub fn max_abs_diff(&self, other: &SegmentScoreTable) -> f64 {
        assert_eq!(self.n_clips, other.n_clips);
        self.scores
            .iter()
            .zip(&other.scores)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

fn check_active(map: &AlignmentMap) -> Result<Vec<usize>> {
    let active = map.active_rows();
    if active.is_empty() {
        return Err(FsanError::Input("alignment map has no active rows".into()));
    }
    Ok(active)
}

/// Direct triple-loop evaluation; `ops` counts scalar arithmetic and comparisons.
pub fn score_all_bruteforce_counted(
    map: &AlignmentMap,
    opts: ScorerOptions,
    ops: &mut u64,
) -> Result<SegmentScoreTable> {
    let active = check_active(map)?;
    let p = map.values();
    let n_v = map.n_clips();
    let n_act = active.len() as f64;
    let mut table = SegmentScoreTable::empty(n_v);
    for seg in enumerate_segments(n_v, opts) {
        let mut pos = 0.0;
        for &i in &active {
            for j in seg.s..=seg.e {
                pos += p.at(i, j);
                *ops += 1;
            }
        }
        pos /= n_act * seg.len() as f64;
        let mut neg = 0.0;
        for j in (0..n_v).filter(|&j| !seg.contains(j)) {
            let mut m = f64::INFINITY;
            for &i in &active {
                m = m.min(p.at(i, j));
                *ops += 1;
            }
            neg += m;
            *ops += 1;
        }
        if seg.len() < n_v {
            neg /= (n_v - seg.len()) as f64;
        }
        *ops += 3;
        table.set(seg, pos - neg);
    }
    Ok(table)
}

pub fn score_all_bruteforce(map: &AlignmentMap, opts: ScorerOptions) -> Result<SegmentScoreTable> {
    score_all_bruteforce_counted(map, opts, &mut 0)
}

/// Prefix-sum evaluation, `O(N_act·N_v + N_v²)`.
pub fn score_all_fast_counted(
    map: &AlignmentMap,
    opts: ScorerOptions,
    ops: &mut u64,
) -> Result<SegmentScoreTable> {
    let active = check_active(map)?;
    let p = map.values();
    let n_v = map.n_clips();
    let n_act = active.len() as f64;

    let mut col_sum = vec![0.0; n_v];
    let mut col_min = vec![f64::INFINITY; n_v];
    for &i in &active {
        for (j, (cs, cm)) in col_sum.iter_mut().zip(col_min.iter_mut()).enumerate() {
            let v = p.at(i, j);
            *cs += v;
            *cm = cm.min(v);
        }
        *ops += 2 * n_v as u64;
    }
    let mut sum_prefix = vec![0.0; n_v + 1];
    let mut min_prefix = vec![0.0; n_v + 1];
    for j in 0..n_v {
        sum_prefix[j + 1] = sum_prefix[j] + col_sum[j];
        min_prefix[j + 1] = min_prefix[j] + col_min[j];
    }
    *ops += 2 * n_v as u64;
    let total_min = min_prefix[n_v];

    let mut table = SegmentScoreTable::empty(n_v);
    for seg in enumerate_segments(n_v, opts) {
        let len = seg.len();
        let pos = (sum_prefix[seg.e + 1] - sum_prefix[seg.s]) / (n_act * len as f64);
        let neg = if len < n_v {
            (total_min - (min_prefix[seg.e + 1] - min_prefix[seg.s])) / (n_v - len) as f64
        } else {
            0.0
        };
        *ops += 7;
        table.set(seg, pos - neg);
    }
    Ok(table)
}

pub fn score_all_fast(map: &AlignmentMap, opts: ScorerOptions) -> Result<SegmentScoreTable> {
    score_all_fast_counted(map, opts, &mut 0)
}

/// `max_{s<=e} SC(s,e)`.
pub fn matching_score(map: &AlignmentMap, opts: ScorerOptions) -> Result<f64> {
    let table = score_all_fast(map, opts)?;
    table
        .iter()
        .map(|(_, v)| v)
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
        .ok_or_else(|| FsanError::Input("no segments to score".into()))
}

/// Descending score, ties broken by smaller `s`, then smaller `e`.
pub fn rank_order(a: &(Segment, f64), b: &(Segment, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingResult {
    pub ranked: Vec<(Segment, f64)>,
    pub clip_duration_s: f64,
}

impl GroundingResult {
    pub fn top(&self) -> Option<(Segment, f64)> {
        self.ranked.first().copied()
    }

    /// `(start_s, end_s, score)` in rank order.
    pub fn timestamps(&self) -> Vec<(f64, f64, f64)> {
        self.ranked
            .iter()
            .map(|(seg, sc)| {
                let (a, b) = seg.to_seconds(self.clip_duration_s);
                (a, b, *sc)
            })
            .collect()
    }
}

/// Full deterministic ranking of all defined segments.
pub fn rank_segments(table: &SegmentScoreTable) -> Vec<(Segment, f64)> {
    let mut all: Vec<(Segment, f64)> = table.iter().collect();
    all.sort_by(rank_order);
    all
}

pub fn propose_topk(table: &SegmentScoreTable, k: usize, clip_duration_s: f64) -> Result<GroundingResult> {
    if k == 0 {
        return Err(FsanError::Config("k must be at least 1".into()));
    }
    let mut ranked = rank_segments(table);
    ranked.truncate(k);
    Ok(GroundingResult {
        ranked,
        clip_duration_s,
    })
}

/// One row of the scorer benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_tokens: usize,
    pub n_clips: usize,
    pub ops_oracle: u64,
    pub ops_fast: u64,
    pub t_oracle_ns: u128,
    pub t_fast_ns: u128,
    pub max_abs_diff: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "N_s,N_v,ops_oracle,ops_fast,t_oracle_ns,t_fast_ns";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_tokens, self.n_clips, self.ops_oracle, self.ops_fast, self.t_oracle_ns, self.t_fast_ns
        )
    }
}

/// Times and counts both scorers on one map.
pub fn bench_map(map: &AlignmentMap, opts: ScorerOptions) -> Result<BenchRow> {
    let (mut ops_oracle, mut ops_fast) = (0, 0);
    let t0 = std::time::Instant::now();
    let oracle = score_all_bruteforce_counted(map, opts, &mut ops_oracle)?;
    let t_oracle_ns = t0.elapsed().as_nanos();
    let t1 = std::time::Instant::now();
    let fast = score_all_fast_counted(map, opts, &mut ops_fast)?;
    let t_fast_ns = t1.elapsed().as_nanos();
    Ok(BenchRow {
        n_tokens: map.n_tokens(),
        n_clips: map.n_clips(),
        ops_oracle,
        ops_fast,
        t_oracle_ns,
        t_fast_ns,
        max_abs_diff: oracle.max_abs_diff(&fast),
    })
}
