//! Training, evaluation and benchmarking drivers used by the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{repeated_token_mask, AlignmentMap};
use crate::data_io::{split, AnnotationRecord, DataSplit, Dataset};
use crate::encoders::ClipSequence;
use crate::error::{FsanError, Result};
use crate::eval_metrics::{evaluate_activitynet, evaluate_didemo, DidemoReport, DidemoSample, DiscardRule, EvalSample, MetricReport};
use crate::grounding::{bench_map, BenchRow, ScorerOptions, Segment};
use crate::layers::Forward;
use crate::model::FsanModel;
use crate::objectives::{sample_negative, sample_objective, LossReport, MapVar};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

/// Query ready for the network: token ids plus pooled clips.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub video_id: String,
    pub ids: Vec<usize>,
    pub clips: ClipSequence,
}

pub fn prepare(model: &FsanModel, data: &Dataset, records: &[AnnotationRecord]) -> Result<Vec<PreparedSample>> {
    records
        .par_iter()
        .map(|r| {
            Ok(PreparedSample {
                video_id: r.video_id.clone(),
                ids: model.token_ids(&r.tokens),
                clips: model.clips(data.frames(&r.video_id)?, r.duration_s)?,
            })
        })
        .collect()
}

/// Record subset selector over a seeded split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    #[default]
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitName {
    type Err = FsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            other => Err(FsanError::Config(format!("unknown split {other:?}"))),
        }
    }
}

pub fn select_split(records: &[AnnotationRecord], ratios: [f64; 3], seed: u64, which: SplitName) -> Result<Vec<AnnotationRecord>> {
    if which == SplitName::All {
        return Ok(records.to_vec());
    }
    let DataSplit { train, val, test } = split(records, ratios, seed)?;
    Ok(match which {
        SplitName::Train => train,
        SplitName::Val => val,
        _ => test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_t: f64,
    pub l_i: f64,
    pub l_o: f64,
    pub total: f64,
}

impl StepLog {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_t, self.l_i, self.l_o, self.total)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Loss log, one CSV line per optimizer step.
    pub loss_log: Option<PathBuf>,
    /// Overwritten with the current weights after every epoch.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepLog>,
    /// Samples whose negative could not be drawn; their matching term was 0.
    pub skipped_triplets: usize,
}

impl TrainSummary {
    /// Mean total loss over the first and last `frac` of steps.
    pub fn head_tail_means(&self, frac: f64) -> Option<(f64, f64)> {
        let n = self.steps.len();
        let m = ((n as f64 * frac).ceil() as usize).max(1);
        if n < 2 * m {
            return None;
        }
        let mean = |s: &[StepLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..m]), mean(&self.steps[n - m..])))
    }
}

/// One forward/backward on a single sample; returns the report and parameter gradients.
fn sample_step(
    model: &FsanModel,
    pos: &PreparedSample,
    neg_ids: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, Vec<Tensor>)> {
    let cfg = model.objective_config();
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let (loss, report) = {
        let mut fw = Forward::train(&mut tape, &vars, rng, model.config.dropout);
        let p_pos = model.alignment(&mut fw, &pos.ids, &pos.clips)?;
        let p_neg = match neg_ids {
            Some(ids) => Some((model.alignment(&mut fw, ids, &pos.clips)?, repeated_token_mask(&pos.ids, ids))),
            None => None,
        };
        let tape = &mut *fw.tape;
        let pos_map = MapVar::all_active(tape, p_pos)?;
        let neg_map = match p_neg {
            Some((v, mask)) => Some(MapVar::new(tape, v, &mask)?),
            None => None,
        };
        sample_objective(tape, &pos_map, neg_map.as_ref(), &cfg)?
    };
    let grads = tape.backward(loss)?;
    Ok((report, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Seeded training with `batch_size`-sample gradient accumulation and Adam.
pub fn train(model: &mut FsanModel, data: &Dataset, records: &[AnnotationRecord], opts: &TrainOptions) -> Result<TrainSummary> {
    if records.is_empty() {
        return Err(FsanError::Input("empty training set".into()));
    }
    let samples = prepare(model, data, records)?;
    let vids: Vec<&str> = samples.iter().map(|s| s.video_id.as_str()).collect();
    let token_ids: Vec<Vec<usize>> = samples.iter().map(|s| s.ids.clone()).collect();
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let mut log = match &opts.loss_log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| FsanError::io(p, e))?)),
        None => None,
    };
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = summary.steps.len();
            let mut acc: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut sums = [0.0; 4];
            for &i in batch {
                let neg = sample_negative(&vids, &token_ids, i, cfg.max_negative_resamples, &mut rng);
                if neg.is_none() {
                    summary.skipped_triplets += 1;
                }
                let neg_ids = neg.map(|j| token_ids[j].as_slice());
                let (r, grads) = sample_step(model, &samples[i], neg_ids, &mut rng).map_err(|e| match e {
                    FsanError::Domain { .. } => FsanError::Numerical(format!(
                        "{e} at step {step} (epoch {epoch}, sample {})",
                        samples[i].video_id
                    )),
                    other => other,
                })?;
                if !r.total.is_finite() {
                    return Err(FsanError::Numerical(format!(
                        "non-finite loss at step {step} (epoch {epoch}, sample {})",
                        samples[i].video_id
                    )));
                }
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
                for (s, v) in sums.iter_mut().zip([r.l_t, r.l_i, r.l_o, r.total]) {
                    *s += v;
                }
            }
            let n = batch.len() as f64;
            for a in acc.iter_mut() {
                a.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            if acc.iter().any(|a| !a.is_finite()) {
                return Err(FsanError::Numerical(format!("non-finite gradient at step {step}")));
            }
            adam.step(model.params.tensors_mut(), &acc)?;
            let entry = StepLog {
                step,
                l_t: sums[0] / n,
                l_i: sums[1] / n,
                l_o: sums[2] / n,
                total: sums[3] / n,
            };
            if let (Some(w), Some(p)) = (log.as_mut(), &opts.loss_log) {
                writeln!(w, "{}", entry.csv()).map_err(|e| FsanError::io(p, e))?;
            }
            summary.steps.push(entry);
        }
        if let Some(ck) = &opts.checkpoint {
            model.save(ck)?;
        }
        log::info!("epoch {epoch}: {} steps", summary.steps.len());
    }
    if let (Some(w), Some(p)) = (log.as_mut(), &opts.loss_log) {
        w.flush().map_err(|e| FsanError::io(p, e))?;
    }
    if let Some(ck) = &opts.checkpoint {
        model.save(ck)?;
    }
    Ok(summary)
}

/// Full rankings for every record, computed in parallel, in input order.
pub fn rank_all(model: &FsanModel, samples: &[PreparedSample]) -> Result<Vec<Vec<(Segment, f64)>>> {
    samples.par_iter().map(|s| model.rank(&s.ids, &s.clips)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Activitynet,
    Didemo,
}

impl std::str::FromStr for Protocol {
    type Err = FsanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activitynet" => Ok(Protocol::Activitynet),
            "didemo" => Ok(Protocol::Didemo),
            other => Err(FsanError::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Activitynet(MetricReport),
    Didemo(DidemoReport),
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            EvalReport::Activitynet(r) => r.to_json(),
            EvalReport::Didemo(r) => r.to_json(),
        }
    }

    pub fn per_sample(&self) -> &[(String, f64, f64)] {
        match self {
            EvalReport::Activitynet(r) => &r.per_sample,
            EvalReport::Didemo(r) => &r.per_sample,
        }
    }
}

/// Grounds every record with a ground-truth span and scores the predictions.
pub fn evaluate(
    model: &FsanModel,
    data: &Dataset,
    records: &[AnnotationRecord],
    protocol: Protocol,
    discard: DiscardRule,
) -> Result<EvalReport> {
    if protocol == Protocol::Didemo && model.config.n_clips != 6 {
        return Err(FsanError::Config(format!(
            "didemo protocol needs n_clips = 6, model has {}",
            model.config.n_clips
        )));
    }
    let eligible: Vec<AnnotationRecord> = records.iter().filter(|r| !r.gt_spans.is_empty()).cloned().collect();
    if eligible.is_empty() {
        return Err(FsanError::Input("empty evaluation set".into()));
    }
    let samples = prepare(model, data, &eligible)?;
    let rankings = rank_all(model, &samples)?;
    match protocol {
        Protocol::Activitynet => {
            let evals: Vec<EvalSample> = eligible
                .iter()
                .zip(&samples)
                .zip(&rankings)
                .map(|((r, s), ranked)| EvalSample {
                    video_id: r.video_id.clone(),
                    duration_s: r.duration_s,
                    ranked: ranked.iter().map(|(g, _)| g.to_seconds(s.clips.clip_duration_s)).collect(),
                    gt: r.gt_spans[0],
                })
                .collect();
            Ok(EvalReport::Activitynet(evaluate_activitynet(&evals)?))
        }
        Protocol::Didemo => {
            let evals: Vec<DidemoSample> = eligible
                .iter()
                .zip(&samples)
                .zip(&rankings)
                .map(|((r, s), ranked)| DidemoSample {
                    video_id: r.video_id.clone(),
                    duration_s: r.duration_s,
                    ranking: ranked.iter().map(|(g, _)| *g).collect(),
                    annotator_spans: r.gt_spans.clone(),
                    clip_duration_s: s.clips.clip_duration_s,
                })
                .collect();
            Ok(EvalReport::Didemo(evaluate_didemo(&evals, discard)?))
        }
    }
}

pub const DEFAULT_BENCH_SIZES: &[(usize, usize)] = &[(4, 4), (8, 16), (12, 32), (20, 64), (32, 128)];

/// Parses `"8x16,20x64"` as `(N_s, N_v)` pairs.
pub fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| FsanError::Config(format!("size {part:?} is not NsxNv")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .ok()
                    .filter(|v| *v > 0)
                    .ok_or_else(|| FsanError::Config(format!("bad size component {s:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub const BENCH_TOLERANCE: f64 = 1e-9;

/// Benchmarks both scorers on a seeded `U(-1,1)` map per size; fails if they disagree.
pub fn bench(sizes: &[(usize, usize)], seed: u64) -> Result<Vec<BenchRow>> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &(ns, nv))| {
            let map_seed = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(map_seed);
            let values = Tensor::uniform(&[ns, nv], 1.0, &mut rng);
            let mut mask: Vec<bool> = (0..ns).map(|_| rng.random::<bool>()).collect();
            mask[0] = true;
            let map = AlignmentMap::with_mask(values, mask)?;
            let row = bench_map(&map, ScorerOptions::default())?;
            if row.max_abs_diff.is_nan() || row.max_abs_diff > BENCH_TOLERANCE {
                return Err(FsanError::Numerical(format!(
                    "scorers disagree by {} on {ns}x{nv} (seed {map_seed})",
                    row.max_abs_diff
                )));
            }
            Ok(row)
        })
        .collect()
}

pub fn train_on_split(
    model: &mut FsanModel,
    data: &Dataset,
    which: SplitName,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let records = select_split(&data.records, model.config.split_ratios, model.config.seed, which)?;
    train(model, data, &records, opts)
}

pub fn evaluate_split(
    model: &FsanModel,
    data: &Dataset,
    which: SplitName,
    protocol: Protocol,
    discard: DiscardRule,
) -> Result<EvalReport> {
    let records = select_split(&data.records, model.config.split_ratios, model.config.seed, which)?;
    evaluate(model, data, &records, protocol, discard)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| FsanError::io(parent, e))?;
    }
    Ok(())
}
