//! Grounding metrics: IoU, Recall@k at IoU thresholds, mIoU, and the
//! multi-annotator Rank@k protocol with worst-label discard.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{FsanError, Result};
use crate::grounding::Segment;

pub const RECALL_KS: [usize; 2] = [1, 5];
pub const IOU_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];

pub type Interval = (f64, f64);

/// Temporal IoU; two identical points have IoU 1, any other degenerate pair 0.
pub fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Fraction of samples whose top-`k` predictions contain one with IoU ≥ `threshold`.
pub fn recall_at_k(predictions: &[Vec<Interval>], gts: &[Interval], k: usize, threshold: f64) -> Result<f64> {
    if k < 1 {
        return Err(FsanError::Config("k must be at least 1".into()));
    }
    if predictions.len() != gts.len() {
        return Err(FsanError::dim("recall_at_k", &[predictions.len()], &[gts.len()]));
    }
    if gts.is_empty() {
        return Err(FsanError::Input("no samples to evaluate".into()));
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(preds, gt)| preds.iter().take(k).any(|p| iou(*p, **gt) >= threshold))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// Mean top-1 IoU; a sample with no prediction counts as 0.
pub fn mean_iou(predictions: &[Vec<Interval>], gts: &[Interval]) -> Result<f64> {
    if gts.is_empty() || predictions.len() != gts.len() {
        return Err(FsanError::Input("mIoU needs one prediction list per sample".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(gts)
        .map(|(p, g)| p.first().map_or(0.0, |t| iou(*t, *g)))
        .sum();
    Ok(total / gts.len() as f64)
}

/// One scored sample of the single-annotator protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub video_id: String,
    pub duration_s: f64,
    /// Predicted intervals in rank order.
    pub ranked: Vec<Interval>,
    pub gt: Interval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// `(k, threshold, recall)` for every k in [`RECALL_KS`] and threshold in [`IOU_THRESHOLDS`].
    pub recalls: Vec<(usize, f64, f64)>,
    pub miou: f64,
    pub n: usize,
    /// `(vid, duration_s, top-1 IoU)` per sample, in input order.
    pub per_sample: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn recall(&self, k: usize, threshold: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|(kk, t, _)| *kk == k && (*t - threshold).abs() < 1e-12)
            .map(|r| r.2)
    }

    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for k in RECALL_KS {
            let mut inner = Map::new();
            for (_, t, r) in self.recalls.iter().filter(|r| r.0 == k) {
                inner.insert(format!("{t}"), json!(r));
            }
            root.insert(format!("R@{k}"), Value::Object(inner));
        }
        root.insert("mIoU".into(), json!(self.miou));
        root.insert("n".into(), json!(self.n));
        Value::Object(root)
    }

    pub fn per_sample_csv(&self) -> String {
        per_sample_csv(&self.per_sample)
    }
}

pub fn per_sample_csv(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("vid,duration_s,iou\n");
    for (vid, dur, v) in rows {
        writeln!(out, "{vid},{dur},{v:.6}").unwrap();
    }
    out
}

pub fn write_per_sample_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    std::fs::write(path, per_sample_csv(rows)).map_err(|e| FsanError::io(path, e))
}

pub fn evaluate_activitynet(samples: &[EvalSample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(FsanError::Input("empty evaluation set".into()));
    }
    let preds: Vec<Vec<Interval>> = samples.iter().map(|s| s.ranked.clone()).collect();
    let gts: Vec<Interval> = samples.iter().map(|s| s.gt).collect();
    let mut recalls = Vec::new();
    for k in RECALL_KS {
        for t in IOU_THRESHOLDS {
            recalls.push((k, t, recall_at_k(&preds, &gts, k, t)?));
        }
    }
    let per_sample = samples
        .iter()
        .map(|s| {
            let v = s.ranked.first().map_or(0.0, |p| iou(*p, s.gt));
            (s.video_id.clone(), s.duration_s, v)
        })
        .collect();
    Ok(MetricReport {
        recalls,
        miou: mean_iou(&preds, &gts)?,
        n: samples.len(),
        per_sample,
    })
}

/// Which annotator label the multi-annotator protocol drops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardRule {
    /// The label whose snapped span ranks worst.
    #[default]
    Rank,
    /// The label with the lowest top-1 IoU.
    Iou,
}

/// Clip-aligned candidate with the highest IoU against `span`; ties go to the
/// earliest candidate.
pub fn snap_to_clips(span: Interval, candidates: &[Segment], clip_duration_s: f64) -> Segment {
    let mut best = candidates[0];
    let mut best_iou = f64::NEG_INFINITY;
    for &c in candidates {
        let v = iou(c.to_seconds(clip_duration_s), span);
        if v > best_iou {
            best = c;
            best_iou = v;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct DidemoRanks {
    /// 1-based rank of each annotator's snapped span.
    pub ranks: Vec<usize>,
    /// Index of the dropped annotator, if more than one label exists.
    pub discarded: Option<usize>,
    pub mean_rank: f64,
}

/// Ranks every annotator label within `ranking` and drops the worst one.
pub fn didemo_ranks(ranking: &[Segment], annotator_spans: &[Interval], clip_duration_s: f64) -> Result<DidemoRanks> {
    if annotator_spans.is_empty() {
        return Err(FsanError::Input("sample has no annotator spans".into()));
    }
    if ranking.is_empty() {
        return Err(FsanError::Input("empty candidate ranking".into()));
    }
    let mut candidates = ranking.to_vec();
    candidates.sort();
    let ranks: Vec<usize> = annotator_spans
        .iter()
        .map(|&span| {
            let seg = snap_to_clips(span, &candidates, clip_duration_s);
            ranking.iter().position(|&r| r == seg).expect("candidate is ranked") + 1
        })
        .collect();
    let discarded = (ranks.len() > 1).then(|| {
        let worst = *ranks.iter().max().unwrap();
        ranks.iter().position(|&r| r == worst).unwrap()
    });
    let kept: Vec<usize> = ranks
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != discarded)
        .map(|(_, r)| *r)
        .collect();
    let mean_rank = kept.iter().sum::<usize>() as f64 / kept.len() as f64;
    Ok(DidemoRanks {
        ranks,
        discarded,
        mean_rank,
    })
}

pub fn didemo_rank_at_k(ranks: &DidemoRanks, k: usize) -> bool {
    ranks.mean_rank <= k as f64
}

/// Mean top-1 IoU over the annotator labels that survive the discard.
pub fn didemo_miou(top1: Interval, annotator_spans: &[Interval], ranks: &DidemoRanks, rule: DiscardRule) -> f64 {
    let ious: Vec<f64> = annotator_spans.iter().map(|&s| iou(top1, s)).collect();
    let drop = match rule {
        DiscardRule::Rank => ranks.discarded,
        DiscardRule::Iou => (ious.len() > 1).then(|| {
            let mut worst = 0;
            for (i, v) in ious.iter().enumerate() {
                if *v < ious[worst] {
                    worst = i;
                }
            }
            worst
        }),
    };
    let kept: Vec<f64> = ious
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != drop)
        .map(|(_, v)| *v)
        .collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// One scored sample of the multi-annotator protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct DidemoSample {
    pub video_id: String,
    pub duration_s: f64,
    pub ranking: Vec<Segment>,
    pub annotator_spans: Vec<Interval>,
    pub clip_duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DidemoReport {
    pub rank_at_1: f64,
    pub rank_at_5: f64,
    pub miou: f64,
    pub n: usize,
    pub per_sample: Vec<(String, f64, f64)>,
}

impl DidemoReport {
    pub fn to_json(&self) -> Value {
        json!({
            "Rank@1": self.rank_at_1,
            "Rank@5": self.rank_at_5,
            "mIoU": self.miou,
            "n": self.n,
        })
    }
}

pub fn evaluate_didemo(samples: &[DidemoSample], rule: DiscardRule) -> Result<DidemoReport> {
    if samples.is_empty() {
        return Err(FsanError::Input("empty evaluation set".into()));
    }
    let (mut r1, mut r5, mut total) = (0usize, 0usize, 0.0);
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let ranks = didemo_ranks(&s.ranking, &s.annotator_spans, s.clip_duration_s)?;
        r1 += didemo_rank_at_k(&ranks, 1) as usize;
        r5 += didemo_rank_at_k(&ranks, 5) as usize;
        let top = s.ranking[0].to_seconds(s.clip_duration_s);
        let m = didemo_miou(top, &s.annotator_spans, &ranks, rule);
        total += m;
        per_sample.push((s.video_id.clone(), s.duration_s, m));
    }
    let n = samples.len();
    Ok(DidemoReport {
        rank_at_1: r1 as f64 / n as f64,
        rank_at_5: r5 as f64 / n as f64,
        miou: total / n as f64,
        n,
        per_sample,
    })
}
