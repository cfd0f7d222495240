//! Language and video input encoders.
//!
//! Text: embedding lookup, linear projection to `d`, learnable positional
//! encodings and a small post-LN transformer encoder. Video: frame features
//! are pooled into a fixed number of clips, then linearly projected to `d`.
//! The video branch has no contextual encoder of its own; context comes from
//! the interaction stack.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsanError, Result};
use crate::layers::{Activation, AttentionScale, Forward, Linear, ParamBuilder, ResidualBlock};
use crate::tensor::{ParamId, Tensor, Var};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Lowercase, whitespace-separated tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_lowercase).collect()
}

/// Token to id map; id 0 is `<unk>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens.into_iter().skip(1).collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// `tokens` excludes `<unk>`, which is always inserted at id 0.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens: vec![UNK.to_owned()],
            index: HashMap::new(),
        };
        v.index.insert(UNK.to_owned(), UNK_ID);
        for t in tokens {
            v.insert(&t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// All tokens after `<unk>`, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[1..]
    }
}

/// Reads `token v1 v2 ... vd` lines; blank lines are skipped.
pub fn load_embedding_file(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| FsanError::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let parse_err = |reason: String| FsanError::Parse {
            path: path.to_path_buf(),
            line: Some(n + 1),
            offset: None,
            reason,
        };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("bad value {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(parse_err(format!("expected {dim} values, found {}", values.len())));
        }
        out.insert(token.to_owned(), values);
    }
    Ok(out)
}

/// Assigns ids by first occurrence and initializes a `|vocab|×dim` table,
/// copying rows from `embeddings` where a token is present there.
pub fn build_vocabulary<R: Rng, S: AsRef<str>>(
    corpus: &[Vec<S>],
    embeddings: Option<&HashMap<String, Vec<f64>>>,
    dim: usize,
    rng: &mut R,
) -> Result<(Vocabulary, Tensor)> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(FsanError::Input("vocabulary corpus is empty".into()));
    }
    let mut vocab = Vocabulary::default();
    for sentence in corpus {
        for t in sentence {
            vocab.insert(t.as_ref());
        }
    }
    let mut table = Tensor::randn(&[vocab.len(), dim], EMBEDDING_INIT_STD, rng);
    if let Some(emb) = embeddings {
        for (id, tok) in vocab.tokens.iter().enumerate() {
            if let Some(v) = emb.get(tok) {
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(v);
            }
        }
    }
    Ok((vocab, table))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    /// `N_s×d` contextual token features.
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub proj: Linear,
    pub positional: ParamId,
    pub layers: Vec<ResidualBlock>,
    pub max_tokens: usize,
    pub scale: AttentionScale,
}

#[allow(clippy::too_many_arguments)]
impl TextEncoder {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        table: Tensor,
        d: usize,
        heads: usize,
        layers: usize,
        ffn_hidden: usize,
        activation: Activation,
        max_tokens: usize,
        scale: AttentionScale,
    ) -> Result<Self> {
        let embed_dim = table.cols();
        b.scope("text", |b| {
            let embedding = b.add("embedding", table);
            let proj = Linear::new(b, "proj", embed_dim, d, true);
            let positional = b.normal("positional", &[max_tokens, d], EMBEDDING_INIT_STD);
            let layers = (0..layers)
                .map(|i| ResidualBlock::new(b, &format!("layer{i}"), d, heads, ffn_hidden, activation))
                .collect::<Result<Vec<_>>>()?;
            Ok(TextEncoder {
                embedding,
                proj,
                positional,
                layers,
                max_tokens,
                scale,
            })
        })
    }

    /// Returns the `N_s×d` token features.
    pub fn encode(&self, fw: &mut Forward<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(FsanError::Input("empty token sequence".into()));
        }
        if ids.len() > self.max_tokens {
            return Err(FsanError::Input(format!(
                "{} tokens exceed max_tokens {}",
                ids.len(),
                self.max_tokens
            )));
        }
        let e = fw.tape.gather_rows(fw.p(self.embedding), ids)?;
        let x = self.proj.forward(fw, e)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = fw.tape.gather_rows(fw.p(self.positional), &positions)?;
        let mut x = fw.tape.add(x, pos)?;
        x = fw.dropout(x);
        for layer in &self.layers {
            x = layer.forward(fw, x, Some(x), self.scale)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Pooled clips of one video, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSequence {
    /// `N_v×d_raw` pooled frame features.
    pub features: Tensor,
    pub clip_duration_s: f64,
    pub video_duration_s: f64,
}

impl ClipSequence {
    pub fn n_clips(&self) -> usize {
        self.features.rows()
    }
}

/// Contiguous frame ranges for `n_clips` bins over `frames` frames; the
/// first `frames % n_clips` bins get one extra frame.
pub fn bin_ranges(frames: usize, n_clips: usize) -> Vec<Range<usize>> {
    let base = frames / n_clips;
    let rem = frames % n_clips;
    let mut start = 0;
    (0..n_clips)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Pools `T×d_raw` frames into `n_clips` clips. Fewer frames than clips are
/// first repeated cyclically up to `n_clips`.
pub fn pool_video(
    frames: &Tensor,
    n_clips: usize,
    video_duration_s: f64,
    pooling: Pooling,
) -> Result<ClipSequence> {
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(FsanError::Input(format!(
            "frame matrix must be T×d with T >= 1, got {:?}",
            frames.shape()
        )));
    }
    if n_clips == 0 {
        return Err(FsanError::Input("n_clips must be positive".into()));
    }
    let d = frames.cols();
    let t = frames.rows();
    let frame_ids: Vec<usize> = (0..t.max(n_clips)).map(|i| i % t).collect();
    let mut out = Vec::with_capacity(n_clips * d);
    for r in bin_ranges(frame_ids.len(), n_clips) {
        let rows = frame_ids[r].iter().map(|&i| frames.row(i));
        let pooled: Vec<f64> = match pooling {
            Pooling::Mean => {
                let rows: Vec<&[f64]> = rows.collect();
                let base = rows[0];
                let mut acc = vec![0.0; d];
                for row in &rows[1..] {
                    acc.iter_mut().zip(row.iter().zip(base)).for_each(|(a, (x, b))| *a += x - b);
                }
                let n = rows.len() as f64;
                acc.into_iter().zip(base).map(|(a, b)| b + a / n).collect()
            }
            Pooling::Max => {
                let mut acc = vec![f64::NEG_INFINITY; d];
                for row in rows {
                    acc.iter_mut().zip(row).for_each(|(a, x)| *a = a.max(*x));
                }
                acc
            }
        };
        out.extend(pooled);
    }
    Ok(ClipSequence {
        features: Tensor::new(&[n_clips, d], out)?,
        clip_duration_s: video_duration_s / n_clips as f64,
        video_duration_s,
    })
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub proj: Linear,
}

impl VideoEncoder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d_raw: usize, d: usize) -> Self {
        b.scope("video", |b| VideoEncoder {
            proj: Linear::new(b, "proj", d_raw, d, true),
        })
    }

    /// Returns the `N_v×d` clip features.
    pub fn encode(&self, fw: &mut Forward<'_>, clips: &ClipSequence) -> Result<Var> {
        let x = fw.tape.constant(clips.features.clone());
        let x = self.proj.forward(fw, x)?;
        Ok(fw.dropout(x))
    }
}
