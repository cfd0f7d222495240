//! Feature files, annotations, dataset splits and planted-moment synthetic data.
//!
//! Feature layout, all integers little-endian:
//!
//! ```text
//! "FSAV" | u32 version (1) | u32 N rows | u32 D cols | N·D f32, row-major
//! ```
//!
//! A dataset directory holds `annotations.jsonl` and `features/<vid>.fsav`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::tokenize;
use crate::error::{FsanError, Result};
use crate::tensor::{Reader, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"FSAV";
pub const FEATURE_VERSION: u32 = 1;
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const FEATURE_DIR: &str = "features";

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 {
        return Err(FsanError::Shape {
            shape: frames.shape().to_vec(),
            reason: "feature matrix must be N×D".into(),
        });
    }
    let mut out = Vec::with_capacity(16 + frames.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != FEATURE_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected FSAV".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = n * d * 4;
    let actual = buf.len() - r.pos;
    if actual < expected {
        return Err(r.err(format!(
            "truncated payload: expected {expected} bytes for {n}×{d}, found {actual}"
        )));
    }
    let raw = r.take(expected)?;
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[n, d], data).map_err(|e| r.err(e.to_string()))
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    fs::write(path, encode_features(frames)?).map_err(|e| FsanError::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| FsanError::io(path, e))?;
    decode_features(&buf, path)
}

/// One query with its video and (evaluation-only) ground-truth spans in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "vid")]
    pub video_id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "spans")]
    pub gt_spans: Vec<(f64, f64)>,
    pub duration_s: f64,
}

impl AnnotationRecord {
    pub fn first_span(&self) -> Option<(f64, f64)> {
        self.gt_spans.first().copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub records: Vec<AnnotationRecord>,
    /// Records dropped for an empty query or an empty span.
    pub rejected: usize,
}

/// Validates one record: lowercases tokens and clips spans to `[0, duration_s]`.
fn normalize_record(mut rec: AnnotationRecord) -> std::result::Result<AnnotationRecord, String> {
    if !(rec.duration_s.is_finite() && rec.duration_s > 0.0) {
        return Err(format!("duration_s {} must be positive", rec.duration_s));
    }
    rec.tokens = rec.tokens.iter().flat_map(|t| tokenize(t)).collect();
    if rec.tokens.is_empty() {
        return Err("empty token list".into());
    }
    for span in rec.gt_spans.iter_mut() {
        let (a, b) = (span.0.clamp(0.0, rec.duration_s), span.1.clamp(0.0, rec.duration_s));
        if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) {
            return Err(format!("span [{}, {}] has start >= end", span.0, span.1));
        }
        *span = (a, b);
    }
    Ok(rec)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Annotations> {
    let mut out = Annotations::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| FsanError::Parse {
            path: path.to_path_buf(),
            line: Some(n + 1),
            offset: None,
            reason: e.to_string(),
        })?;
        match normalize_record(rec) {
            Ok(r) => out.records.push(r),
            Err(reason) => {
                log::warn!("{}:{}: record rejected: {reason}", path.display(), n + 1);
                out.rejected += 1;
            }
        }
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| FsanError::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn annotations_to_jsonl(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| FsanError::io(path, e))?;
    f.write_all(annotations_to_jsonl(records).as_bytes())
        .map_err(|e| FsanError::io(path, e))
}

fn check_video_id(vid: &str) -> Result<()> {
    if vid.is_empty() || vid.contains(['/', '\\']) || vid == "." || vid == ".." {
        return Err(FsanError::Input(format!("video id {vid:?} is not a valid file stem")));
    }
    Ok(())
}

pub fn feature_path(dir: &Path, vid: &str) -> PathBuf {
    dir.join(FEATURE_DIR).join(format!("{vid}.fsav"))
}

/// Records plus frame features keyed by video id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub features: BTreeMap<String, Tensor>,
    pub rejected: usize,
}

impl Dataset {
    pub fn frames(&self, vid: &str) -> Result<&Tensor> {
        self.features
            .get(vid)
            .ok_or_else(|| FsanError::Input(format!("no features for video {vid:?}")))
    }

    pub fn video_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.video_id.as_str()).collect()
    }

    /// Keeps only `records`, together with their features.
    pub fn subset(&self, records: Vec<AnnotationRecord>) -> Dataset {
        let vids: HashSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
        let features = self
            .features
            .iter()
            .filter(|(k, _)| vids.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Dataset {
            records,
            features,
            rejected: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let fdir = dir.join(FEATURE_DIR);
        fs::create_dir_all(&fdir).map_err(|e| FsanError::io(&fdir, e))?;
        for (vid, frames) in &self.features {
            check_video_id(vid)?;
            write_features(&feature_path(dir, vid), frames)?;
        }
        write_annotations(&dir.join(ANNOTATION_FILE), &self.records)
    }

    /// Loads annotations and the feature file of every referenced video.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let ann = load_annotations(&dir.join(ANNOTATION_FILE))?;
        let mut vids: Vec<&str> = ann.records.iter().map(|r| r.video_id.as_str()).collect();
        vids.sort_unstable();
        vids.dedup();
        let features = vids
            .par_iter()
            .map(|vid| {
                check_video_id(vid)?;
                Ok((vid.to_string(), load_features(&feature_path(dir, vid))?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Dataset {
            records: ann.records,
            features,
            rejected: ann.rejected,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub n_clips: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Inclusive range of distinct tokens per query.
    pub tokens_per_query: (usize, usize),
    /// Inclusive range of planted moment lengths, in clips.
    pub moment_length: (usize, usize),
    pub noise_sigma: f64,
    pub frames_per_clip: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_videos: 250,
            n_clips: 16,
            feature_dim: 32,
            vocab_size: 40,
            tokens_per_query: (3, 6),
            moment_length: (3, 8),
            noise_sigma: 0.1,
            frames_per_clip: 1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FsanError::Config(m.to_owned()));
        if self.n_videos == 0 {
            return bad("empty dataset");
        }
        if self.n_clips == 0 || self.feature_dim == 0 || self.frames_per_clip == 0 {
            return bad("n_clips, feature_dim and frames_per_clip must be positive");
        }
        let (kmin, kmax) = self.tokens_per_query;
        if kmin == 0 || kmin > kmax || kmax > self.vocab_size {
            return bad("tokens_per_query must satisfy 1 <= min <= max <= vocab_size");
        }
        let (lmin, lmax) = self.moment_length;
        if lmin == 0 || lmin > lmax || lmax > self.n_clips {
            return bad("moment_length must satisfy 1 <= min <= max <= n_clips");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FsanError::io(path, e))?;
        let cfg: SyntheticConfig =
            serde_json::from_str(&text).map_err(|e| FsanError::Config(format!("synthetic config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token directions and planted spans, for inspecting generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub token_directions: Tensor,
    /// Planted clip-inclusive span per video.
    pub spans: Vec<(usize, usize)>,
    pub query_ids: Vec<Vec<usize>>,
}

pub fn synthetic_token(id: usize) -> String {
    format!("w{id}")
}

/// One query per video; clip duration is one second.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let dirs = Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut rng);
    let mut dataset = Dataset::default();
    let mut truth = SyntheticTruth {
        token_directions: dirs.clone(),
        spans: Vec::new(),
        query_ids: Vec::new(),
    };
    for v in 0..cfg.n_videos {
        let len = rng.random_range(cfg.moment_length.0..=cfg.moment_length.1);
        let s = rng.random_range(0..=cfg.n_clips - len);
        let e = s + len - 1;
        let k = rng.random_range(cfg.tokens_per_query.0..=cfg.tokens_per_query.1);
        let ids = sample(&mut rng, cfg.vocab_size, k).into_vec();
        let mut query = vec![0.0; d];
        for &id in &ids {
            query.iter_mut().zip(dirs.row(id)).for_each(|(q, x)| *q += x / k as f64);
        }
        let mut frames = Vec::with_capacity(cfg.n_clips * cfg.frames_per_clip * d);
        let background = Tensor::randn(&[d], 1.0, &mut rng).into_data();
        for j in 0..cfg.n_clips {
            let base = if (s..=e).contains(&j) { &query } else { &background };
            for _ in 0..cfg.frames_per_clip {
                let noise = Tensor::randn(&[d], cfg.noise_sigma, &mut rng);
                frames.extend(base.iter().zip(noise.data()).map(|(b, n)| b + n));
            }
        }
        let vid = format!("v{v:04}");
        dataset.features.insert(
            vid.clone(),
            Tensor::new(&[cfg.n_clips * cfg.frames_per_clip, d], frames)?,
        );
        dataset.records.push(AnnotationRecord {
            video_id: vid,
            tokens: ids.iter().map(|&i| synthetic_token(i)).collect(),
            gt_spans: vec![(s as f64, (e + 1) as f64)],
            duration_s: cfg.n_clips as f64,
        });
        truth.spans.push((s, e));
        truth.query_ids.push(ids);
    }
    Ok((dataset, truth))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSplit {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
}

/// Seeded partition by video id; records keep their relative order.
pub fn split(records: &[AnnotationRecord], ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(FsanError::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut vids: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.video_id.as_str()) {
            vids.push(&r.video_id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vids.shuffle(&mut rng);
    let n = vids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let bucket: BTreeMap<&str, usize> = vids
        .iter()
        .enumerate()
        .map(|(i, v)| (*v, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 }))
        .collect();
    let mut out = DataSplit::default();
    for r in records {
        match bucket[r.video_id.as_str()] {
            0 => out.train.push(r.clone()),
            1 => out.val.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    Ok(out)
}
