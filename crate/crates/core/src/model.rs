//! The full grounding network: encoders, interaction stack and alignment head.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{compute_sap, AlignmentMap, SapParams};
use crate::config::ModelConfig;
use crate::encoders::{
    build_vocabulary, load_embedding_file, pool_video, ClipSequence, TextEncoder, VideoEncoder, Vocabulary,
    EMBEDDING_INIT_STD,
};
use crate::error::{FsanError, Result};
use crate::grounding::{propose_topk, rank_segments, score_all_fast, GroundingResult, ScorerOptions, Segment};
use crate::icim::{IcimOptions, IcimStack};
use crate::layers::{Forward, ParamBuilder};
use crate::objectives::ObjectiveConfig;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};

/// Everything besides the weights needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub d_raw: usize,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Clone, Debug)]
pub struct FsanModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub d_raw: usize,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub video: VideoEncoder,
    pub icim: IcimStack,
    pub sap: SapParams,
}

impl FsanModel {
    /// Builds a model with embedding table `table` (`|vocab|×embed_dim`).
    pub fn with_table(config: ModelConfig, vocab: Vocabulary, table: Tensor, d_raw: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if table.shape() != [vocab.len(), config.embed_dim] {
            return Err(FsanError::dim("embedding table", table.shape(), &[vocab.len(), config.embed_dim]));
        }
        let c = &config;
        let ffn_hidden = c.d * c.ffn_mult;
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, rng);
        let text = TextEncoder::new(
            &mut b,
            table,
            c.d,
            c.heads,
            c.text_encoder_layers,
            ffn_hidden,
            c.ffn_activation,
            c.max_tokens,
            c.attention_scale,
        )?;
        let video = VideoEncoder::new(&mut b, d_raw, c.d);
        let options = IcimOptions {
            no_cross_modal: c.no_cross_modal,
            no_inner_modal: c.no_inner_modal,
            scale: c.attention_scale,
        };
        let icim = IcimStack::new(
            &mut b,
            c.icim_layers,
            c.d,
            c.heads,
            ffn_hidden,
            c.ffn_activation,
            c.max_tokens,
            c.n_clips,
            options,
        )?;
        let sap = SapParams::new(&mut b, c.d_l, c.d, c.d);
        Ok(FsanModel {
            config,
            vocab,
            d_raw,
            params,
            text,
            video,
            icim,
            sap,
        })
    }

    /// Fresh model whose vocabulary covers `corpus`, seeded by `config.seed`.
    pub fn from_corpus<S: AsRef<str>>(config: ModelConfig, corpus: &[Vec<S>], d_raw: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = match &config.embedding_file {
            Some(p) => Some(load_embedding_file(p, config.embed_dim)?),
            None => None,
        };
        let (vocab, table) = build_vocabulary(corpus, embeddings.as_ref(), config.embed_dim, &mut rng)?;
        Self::with_table(config, vocab, table, d_raw, &mut rng)
    }

    /// Model skeleton for `meta`; weights are placeholders until loaded.
    pub fn from_meta(meta: ModelMeta) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(meta.config.seed);
        let table = Tensor::randn(&[meta.vocab.len(), meta.config.embed_dim], EMBEDDING_INIT_STD, &mut rng);
        Self::with_table(meta.config, meta.vocab, table, meta.d_raw, &mut rng)
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            d_raw: self.d_raw,
        }
    }

    /// Writes the weights and the `.meta.json` sidecar.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        write_checkpoint(checkpoint, &self.params)?;
        let mp = meta_path(checkpoint);
        let json = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        fs::write(&mp, json).map_err(|e| FsanError::io(&mp, e))
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let mp = meta_path(checkpoint);
        let text = fs::read_to_string(&mp).map_err(|e| FsanError::io(&mp, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| FsanError::Parse {
            path: mp.clone(),
            line: Some(e.line()),
            offset: None,
            reason: e.to_string(),
        })?;
        let mut model = Self::from_meta(meta)?;
        model.params.load_from(&read_checkpoint(checkpoint)?)?;
        Ok(model)
    }

    pub fn scorer_options(&self) -> ScorerOptions {
        ScorerOptions {
            include_full_span: self.config.include_full_span,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let c = &self.config;
        ObjectiveConfig {
            triplet: crate::objectives::TripletConfig {
                delta: c.delta,
                max_negative_resamples: c.max_negative_resamples,
            },
            weights: c.loss_weights(),
            scorer: self.scorer_options(),
            outer_form: c.outer_loss_form,
            normalize_inner_sum: c.normalize_inner_sum,
            detach_sc_weights: c.detach_sc_weights,
        }
    }

    /// Token ids, truncated to `max_tokens`.
    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = self.vocab.ids(tokens);
        ids.truncate(self.config.max_tokens);
        ids
    }

    pub fn clips(&self, frames: &Tensor, duration_s: f64) -> Result<ClipSequence> {
        if frames.rank() != 2 || frames.cols() != self.d_raw {
            return Err(FsanError::dim("video features", frames.shape(), &[frames.rows(), self.d_raw]));
        }
        pool_video(frames, self.config.n_clips, duration_s, self.config.pooling)
    }

    /// The `N_s×N_v` alignment map on `fw`'s tape.
    pub fn alignment(&self, fw: &mut Forward<'_>, ids: &[usize], clips: &ClipSequence) -> Result<Var> {
        let s = self.text.encode(fw, ids)?;
        let v = self.video.encode(fw, clips)?;
        let (s, v) = self.icim.forward(fw, s, v)?;
        compute_sap(fw, s, v, &self.sap)
    }

    /// Evaluation-mode alignment map with all rows active.
    pub fn infer_map(&self, ids: &[usize], clips: &ClipSequence) -> Result<AlignmentMap> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let p = self.alignment(&mut fw, ids, clips)?;
        AlignmentMap::new(tape.value(p).clone())
    }

    /// Full segment ranking for one query.
    pub fn rank(&self, ids: &[usize], clips: &ClipSequence) -> Result<Vec<(Segment, f64)>> {
        let map = self.infer_map(ids, clips)?;
        Ok(rank_segments(&score_all_fast(&map, self.scorer_options())?))
    }

    pub fn ground(&self, ids: &[usize], clips: &ClipSequence, k: usize) -> Result<(GroundingResult, AlignmentMap)> {
        let map = self.infer_map(ids, clips)?;
        let table = score_all_fast(&map, self.scorer_options())?;
        Ok((propose_topk(&table, k, clips.clip_duration_s)?, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FsanModel {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            icim_layers: 1,
            d_l: 4,
            n_clips: 4,
            embed_dim: 6,
            ffn_mult: 2,
            ..ModelConfig::desk()
        };
        FsanModel::from_corpus(cfg, &[vec!["a", "b"], vec!["c"]], 5).unwrap()
    }

    #[test]
    fn map_shape_and_range() {
        let m = tiny();
        let frames = Tensor::randn(&[7, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let clips = m.clips(&frames, 7.0).unwrap();
        let map = m.infer_map(&m.token_ids(&["a", "c", "zzz"]), &clips).unwrap();
        assert_eq!(map.values().shape(), &[3, 4]);
        assert!(map.values().data().iter().all(|x| x.abs() <= 1.0 + 1e-9));
        let (g, _) = m.ground(&[1], &clips, 3).unwrap();
        assert_eq!(g.ranked.len(), 3);
        assert!(g.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn save_load_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("m.ckpt");
        m.save(&ck).unwrap();
        let back = FsanModel::load(&ck).unwrap();
        assert_eq!(back.vocab, m.vocab);
        for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
            assert!(a.max_abs_diff(b) <= 1e-6 * b.data().iter().fold(1.0f64, |m, x| m.max(x.abs())));
        }
        assert!(FsanModel::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn wrong_feature_width_rejected() {
        let m = tiny();
        assert!(m.clips(&Tensor::zeros(&[4, 3]), 4.0).is_err());
    }
}
