//! Training losses: video-level triplet matching, SC-weighted inner-sample and
//! outer-sample losses, and their weighted aggregate.
//!
//! All losses are built on the tape from an alignment map variable plus its
//! active rows. Segment columns follow [`enumerate_segments`] order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{repeated_token_mask, AlignmentMap};
use crate::error::{FsanError, Result};
use crate::grounding::{enumerate_segments, score_all_fast, ScorerOptions, Segment, SegmentScoreTable};
use crate::tensor::{Tape, Tensor, Var};

pub const REMAP_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let all = [lambda1, lambda2, lambda3];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(FsanError::Config(format!("loss weights {all:?} must be nonnegative")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FsanError::Config(format!("loss weights {all:?} must sum to 1")));
        }
        Ok(LossWeights {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    /// Matching loss only.
    pub fn matching_only() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).expect("on the simplex")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub delta: f64,
    pub max_negative_resamples: usize,
}

impl TripletConfig {
    pub fn new(delta: f64, max_negative_resamples: usize) -> Result<Self> {
        if delta.is_nan() || delta <= 0.0 {
            return Err(FsanError::Config(format!("margin {delta} must be positive")));
        }
        Ok(TripletConfig {
            delta,
            max_negative_resamples,
        })
    }
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            delta: 0.5,
            max_negative_resamples: 10,
        }
    }
}

/// How complementary-clip minima enter the outer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterLossForm {
    /// `-log(remap(min))`: raises the weakest out-of-span response.
    #[default]
    AsWritten,
    /// `-log(1 - remap(min))`: lowers it.
    Suppressive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_t: f64,
    pub l_i: f64,
    pub l_o: f64,
    pub total: f64,
    /// Sum of `|SC|` over the weight table.
    pub weight_mass: f64,
}

/// An alignment map living on a tape, with its active rows.
#[derive(Clone, Debug)]
pub struct MapVar {
    pub values: Var,
    pub active: Vec<usize>,
}

impl MapVar {
    pub fn new(tape: &Tape, values: Var, row_mask: &[bool]) -> Result<Self> {
        let t = tape.value(values);
        if t.rank() != 2 || row_mask.len() != t.rows() {
            return Err(FsanError::dim("map mask", t.shape(), &[row_mask.len()]));
        }
        let active: Vec<usize> = (0..row_mask.len()).filter(|&i| row_mask[i]).collect();
        if active.is_empty() {
            return Err(FsanError::Input("alignment map has no active rows".into()));
        }
        Ok(MapVar { values, active })
    }

    /// Every row active.
    pub fn all_active(tape: &Tape, values: Var) -> Result<Self> {
        let rows = tape.value(values).rows();
        Self::new(tape, values, &vec![true; rows])
    }

    pub fn n_clips(&self, tape: &Tape) -> usize {
        tape.value(self.values).cols()
    }

    /// Current values as a plain map, for no-gradient scoring.
    pub fn snapshot(&self, tape: &Tape) -> AlignmentMap {
        let t = tape.value(self.values).clone();
        let mut mask = vec![false; t.rows()];
        for &i in &self.active {
            mask[i] = true;
        }
        AlignmentMap::with_mask(t, mask).expect("validated on construction")
    }

    fn active_rows(&self, tape: &mut Tape) -> Result<Var> {
        tape.gather_rows(self.values, &self.active)
    }
}

fn spans_of(segments: &[Segment]) -> Vec<(usize, usize)> {
    segments.iter().map(|g| (g.s, g.e)).collect()
}

/// `N_v×K` matrix with `1/(N_v-L_k)` where clip `j` lies outside span `k`.
fn complement_matrix(n_clips: usize, segments: &[Segment]) -> Tensor {
    let k = segments.len();
    let mut c = Tensor::zeros(&[n_clips, k]);
    for (q, g) in segments.iter().enumerate() {
        if g.len() == n_clips {
            continue;
        }
        let w = 1.0 / (n_clips - g.len()) as f64;
        for j in (0..n_clips).filter(|&j| !g.contains(j)) {
            c.set(j, q, w);
        }
    }
    c
}

fn mean_over_active(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let ones = tape.constant(Tensor::filled(&[1, rows], 1.0 / rows as f64));
    tape.matmul(ones, x)
}

/// `1×N_v` column minima over active rows.
fn column_minima(tape: &mut Tape, map: &MapVar) -> Result<Var> {
    let p_act = map.active_rows(tape)?;
    let t = tape.transpose(p_act)?;
    let mins = tape.row_min(t)?;
    let n = tape.value(mins).len();
    tape.reshape(mins, &[1, n])
}

/// Differentiable `1×K` vector of segment scores for `segments`.
pub fn sc_vector(tape: &mut Tape, map: &MapVar, segments: &[Segment]) -> Result<Var> {
    let n_v = map.n_clips(tape);
    let p_act = map.active_rows(tape)?;
    let means = tape.span_sums(p_act, &spans_of(segments), true)?;
    let pos = mean_over_active(tape, means)?;
    let mins = column_minima(tape, map)?;
    let c = tape.constant(complement_matrix(n_v, segments));
    let neg = tape.matmul(mins, c)?;
    tape.sub(pos, neg)
}

/// `S(V,S) = max SC`, with the gradient routed through the first argmax span.
pub fn matching_score_var(tape: &mut Tape, map: &MapVar, opts: ScorerOptions) -> Result<Var> {
    let segments = enumerate_segments(map.n_clips(tape), opts);
    let sc = sc_vector(tape, map, &segments)?;
    Ok(tape.max_all(sc))
}

/// `max(0, δ - S(V,S) + S(V,S⁻))`.
pub fn matching_loss(
    tape: &mut Tape,
    pos: &MapVar,
    neg: &MapVar,
    cfg: &TripletConfig,
    opts: ScorerOptions,
) -> Result<Var> {
    let s_pos = matching_score_var(tape, pos, opts)?;
    let s_neg = matching_score_var(tape, neg, opts)?;
    let diff = tape.sub(s_neg, s_pos)?;
    let shifted = tape.add_scalar(diff, cfg.delta);
    Ok(tape.relu(shifted))
}

/// Plain hinge on two scores.
pub fn hinge(delta: f64, s_pos: f64, s_neg: f64) -> f64 {
    (delta - s_pos + s_neg).max(0.0)
}

/// `1×K` constant weights taken from a score table, in `segments` order.
pub fn weights_from_table(tape: &mut Tape, table: &SegmentScoreTable, segments: &[Segment]) -> Result<Var> {
    let w = segments
        .iter()
        .map(|g| {
            table
                .get(g.s, g.e)
                .ok_or_else(|| FsanError::Contract(format!("weight table lacks segment {g:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = w.len();
    Ok(tape.constant(Tensor::new(&[1, k], w)?))
}

/// Segment weights for the inner and outer losses.
pub enum SpanWeights<'a> {
    /// Constant weights from a no-gradient score table.
    Frozen(&'a SegmentScoreTable),
    /// A `1×K` tape value, possibly carrying gradient.
    Var(Var),
}

impl SpanWeights<'_> {
    fn resolve(&self, tape: &mut Tape, segments: &[Segment]) -> Result<Var> {
        let w = match self {
            SpanWeights::Frozen(t) => weights_from_table(tape, t, segments)?,
            SpanWeights::Var(v) => *v,
        };
        let shape = tape.value(w).shape();
        if shape != [1, segments.len()] {
            return Err(FsanError::dim("span weights", shape, &[1, segments.len()]));
        }
        Ok(w)
    }
}

/// `Σ w_{s,e} · (-(1/N_act) Σ_i σ(Σ_{j∈[s,e]} P[i][j]))`.
pub fn inner_sample_loss(
    tape: &mut Tape,
    map: &MapVar,
    weights: &SpanWeights<'_>,
    segments: &[Segment],
    normalize_inner_sum: bool,
) -> Result<Var> {
    let w = weights.resolve(tape, segments)?;
    let p_act = map.active_rows(tape)?;
    let sums = tape.span_sums(p_act, &spans_of(segments), normalize_inner_sum)?;
    let sig = tape.sigmoid(sums);
    let mean = mean_over_active(tape, sig)?;
    let per_span = tape.scale(mean, -1.0);
    let weighted = tape.mul(w, per_span)?;
    Ok(tape.sum(weighted))
}

/// `Σ w_{s,e} · (-(1/(N_v-L)) Σ_{j∉[s,e]} log(remap(min_i P[i][j])))`,
/// where `remap(x) = clamp((1+x)/2, 1e-6, 1)`; full spans contribute 0.
pub fn outer_sample_loss(
    tape: &mut Tape,
    map: &MapVar,
    weights: &SpanWeights<'_>,
    segments: &[Segment],
    form: OuterLossForm,
) -> Result<Var> {
    let w = weights.resolve(tape, segments)?;
    let n_v = map.n_clips(tape);
    let mins = column_minima(tape, map)?;
    let half = tape.scale(mins, 0.5);
    let remapped = tape.add_scalar(half, 0.5);
    let arg = match form {
        OuterLossForm::AsWritten => remapped,
        OuterLossForm::Suppressive => {
            let neg = tape.scale(remapped, -1.0);
            tape.add_scalar(neg, 1.0)
        }
    };
    let clamped = tape.clamp(arg, REMAP_FLOOR, 1.0);
    let logs = tape.log(clamped)?;
    let c = tape.constant(complement_matrix(n_v, segments));
    let per_span = tape.matmul(logs, c)?;
    let per_span = tape.scale(per_span, -1.0);
    let weighted = tape.mul(w, per_span)?;
    Ok(tape.sum(weighted))
}

/// `λ1·l_t + λ2·l_i + λ3·l_o`.
pub fn total_loss(tape: &mut Tape, l_t: Var, l_i: Var, l_o: Var, w: LossWeights) -> Result<(Var, LossReport)> {
    let a = tape.scale(l_t, w.lambda1);
    let b = tape.scale(l_i, w.lambda2);
    let c = tape.scale(l_o, w.lambda3);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let report = LossReport {
        l_t: tape.value(l_t).item()?,
        l_i: tape.value(l_i).item()?,
        l_o: tape.value(l_o).item()?,
        total: tape.value(total).item()?,
        weight_mass: 0.0,
    };
    Ok((total, report))
}

/// Options shared by the composed objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub triplet: TripletConfig,
    pub weights: LossWeights,
    pub scorer: ScorerOptions,
    pub outer_form: OuterLossForm,
    pub normalize_inner_sum: bool,
    pub detach_sc_weights: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            triplet: TripletConfig::default(),
            weights: LossWeights::default(),
            scorer: ScorerOptions::default(),
            outer_form: OuterLossForm::AsWritten,
            normalize_inner_sum: false,
            detach_sc_weights: true,
        }
    }
}

/// The aggregate loss for one sample. Without a negative the matching term is 0.
pub fn sample_objective(
    tape: &mut Tape,
    pos: &MapVar,
    neg: Option<&MapVar>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    sample_objective_with(tape, pos, neg, cfg, None)
}

/// [`sample_objective`] with an optional precomputed weight table, used when
/// weights are detached.
pub fn sample_objective_with(
    tape: &mut Tape,
    pos: &MapVar,
    neg: Option<&MapVar>,
    cfg: &ObjectiveConfig,
    frozen: Option<&SegmentScoreTable>,
) -> Result<(Var, LossReport)> {
    let l_t = match neg {
        Some(neg) => matching_loss(tape, pos, neg, &cfg.triplet, cfg.scorer)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let segments = enumerate_segments(pos.n_clips(tape), cfg.scorer);
    let table;
    let weights = if cfg.detach_sc_weights {
        table = match frozen {
            Some(t) => t.clone(),
            None => score_all_fast(&pos.snapshot(tape), cfg.scorer)?,
        };
        SpanWeights::Frozen(&table)
    } else {
        SpanWeights::Var(sc_vector(tape, pos, &segments)?)
    };
    let weight_mass = match &weights {
        SpanWeights::Frozen(t) => t.iter().map(|(_, v)| v.abs()).sum(),
        SpanWeights::Var(v) => tape.value(*v).data().iter().map(|x| x.abs()).sum(),
    };
    let l_i = inner_sample_loss(tape, pos, &weights, &segments, cfg.normalize_inner_sum)?;
    let l_o = outer_sample_loss(tape, pos, &weights, &segments, cfg.outer_form)?;
    let (total, mut report) = total_loss(tape, l_t, l_i, l_o, cfg.weights)?;
    report.weight_mass = weight_mass;
    Ok((total, report))
}

/// Draws a negative record index from a different video whose tokens are not
/// all repeated from the positive. `None` when no draw succeeds within the
/// allowed attempts.
pub fn sample_negative<R: Rng + ?Sized>(
    video_ids: &[&str],
    token_ids: &[Vec<usize>],
    positive: usize,
    max_tries: usize,
    rng: &mut R,
) -> Option<usize> {
    let candidates: Vec<usize> = (0..video_ids.len())
        .filter(|&i| video_ids[i] != video_ids[positive])
        .collect();
    if candidates.is_empty() {
        return None;
    }
    for _ in 0..max_tries.max(1) {
        let pick = candidates[rng.random_range(0..candidates.len())];
        if repeated_token_mask(&token_ids[positive], &token_ids[pick]).contains(&true) {
            return Some(pick);
        }
    }
    None
}
