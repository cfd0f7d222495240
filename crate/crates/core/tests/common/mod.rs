#![allow(dead_code)]

use fsan::alignment::repeated_token_mask;
use fsan::config::ModelConfig;
use fsan::encoders::Vocabulary;
use fsan::error::Result;
use fsan::grounding::score_all_fast;
use fsan::layers::Forward;
use fsan::model::FsanModel;
use fsan::objectives::{sample_objective_with, MapVar};
use fsan::tensor::{gradient_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub loss: Loss,
}

impl OpCase {
    pub fn check(&self) -> GradCheckReport {
        gradient_check(&self.leaves, &self.loss, GradCheckConfig::default()).unwrap()
    }
}

/// `Σ w ∘ y` with a fixed random `w`, so every output coordinate matters.
fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = Tensor::new(tape.value(y).shape(), w.data().to_vec())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case<F>(name: &'static str, leaves: Vec<Tensor>, out_shape: &[usize], rng: &mut ChaCha8Rng, f: F) -> OpCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let w = Tensor::randn(out_shape, 1.0, rng);
    OpCase {
        name,
        leaves,
        loss: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted(t, y, &w)
        }),
    }
}

/// One case per differentiable tape operation, shapes at most 6×6.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..=6);
    let c = rng.random_range(2..=6);
    let k = rng.random_range(1..=6);
    let mut m = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = m(&[r, c]);
    let b = m(&[r, c]);
    let bk = m(&[c, k]);
    let side = m(&[r, k]);
    let row = m(&[c]);
    let gain = m(&[c]);
    let bias = m(&[c]);
    let pos = m(&[r, c]).map(|x| x.abs() + 0.1);
    let kinked = m(&[r, c]).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 });
    let clampable = m(&[r, c]).map(|x| if (x.abs() - 0.5).abs() < 0.05 { x * 0.5 } else { x });

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spans: Vec<(usize, usize)> = (0..4)
        .map(|_| {
            let s = rng.random_range(0..c);
            (s, rng.random_range(s..c))
        })
        .collect();
    let spans2 = spans.clone();
    let idx: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
    let split = rng.random_range(1..c);
    let rng = &mut rng;
    vec![
        case("matmul", vec![a.clone(), bk], &[r, k], rng, |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![a.clone()], &[c, r], rng, |t, v| t.transpose(v[0])),
        case("reshape", vec![a.clone()], &[c * r, 1], rng, move |t, v| t.reshape(v[0], &[c * r, 1])),
        case("add", vec![a.clone(), b.clone()], &[r, c], rng, |t, v| t.add(v[0], v[1])),
        case("sub", vec![a.clone(), b.clone()], &[r, c], rng, |t, v| t.sub(v[0], v[1])),
        case("mul", vec![a.clone(), b], &[r, c], rng, |t, v| t.mul(v[0], v[1])),
        case("add_row", vec![a.clone(), row], &[r, c], rng, |t, v| t.add_row(v[0], v[1])),
        case("scale", vec![a.clone()], &[r, c], rng, |t, v| Ok(t.scale(v[0], -1.7))),
        case("add_scalar", vec![a.clone()], &[r, c], rng, |t, v| Ok(t.add_scalar(v[0], 0.3))),
        case("sigmoid", vec![a.clone()], &[r, c], rng, |t, v| Ok(t.sigmoid(v[0]))),
        case("relu", vec![kinked], &[r, c], rng, |t, v| Ok(t.relu(v[0]))),
        case("log", vec![pos], &[r, c], rng, |t, v| t.log(v[0])),
        case("clamp", vec![clampable], &[r, c], rng, |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        case("sum", vec![a.clone()], &[1], rng, |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![a.clone()], &[1], rng, |t, v| Ok(t.mean(v[0]))),
        case("row_min", vec![a.clone()], &[r, 1], rng, |t, v| t.row_min(v[0])),
        case("max_all", vec![a.clone()], &[1], rng, |t, v| Ok(t.max_all(v[0]))),
        case("softmax_rows", vec![a.clone()], &[r, c], rng, |t, v| t.softmax_rows(v[0])),
        case("layer_norm", vec![a.clone(), gain, bias], &[r, c], rng, |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("l2_normalize_columns", vec![a.clone()], &[r, c], rng, |t, v| {
            t.l2_normalize_columns(v[0], 1e-12)
        }),
        case("gather_rows", vec![a.clone()], &[r + 2, c], rng, move |t, v| t.gather_rows(v[0], &idx)),
        case("select_cols", vec![a.clone()], &[r, c - split], rng, move |t, v| {
            t.select_cols(v[0], split, c - split)
        }),
        case("concat_cols", vec![a.clone(), side], &[r, c + k], rng, |t, v| t.concat_cols(&[v[0], v[1]])),
        case("dropout", vec![a.clone()], &[r, c], rng, move |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(t.dropout(v[0], 0.3, &mut mask_rng))
        }),
        case("span_sums", vec![a.clone()], &[r, 4], rng, move |t, v| t.span_sums(v[0], &spans, false)),
        case("span_means", vec![a], &[r, 4], rng, move |t, v| t.span_sums(v[0], &spans2, true)),
    ]
}

/// d=8, m=2, L=1, N_v=4 model over a five-token vocabulary.
pub fn tiny_model(seed: u64) -> FsanModel {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        icim_layers: 1,
        text_encoder_layers: 1,
        d_l: 4,
        n_clips: 4,
        embed_dim: 8,
        ffn_mult: 2,
        seed,
        ..ModelConfig::desk()
    };
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e"].map(String::from).to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Tensor::randn(&[vocab.len(), cfg.embed_dim], 1.0, &mut rng);
    FsanModel::with_table(cfg, vocab, table, 5, &mut rng).unwrap()
}

/// Finite-difference check of the full objective over every model parameter,
/// with N_s=3 query tokens and the segment weights frozen at the base point.
pub fn full_loss_check(seed: u64) -> GradCheckReport {
    let model = tiny_model(seed);
    let frames = Tensor::randn(&[4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    let clips = model.clips(&frames, 4.0).unwrap();
    let pos_ids = model.token_ids(&["a", "b", "c"]);
    let neg_ids = model.token_ids(&["c", "d", "e"]);
    let mask = repeated_token_mask(&pos_ids, &neg_ids);
    let cfg = model.objective_config();
    let base = model.infer_map(&pos_ids, &clips).unwrap();
    let table = score_all_fast(&base, cfg.scorer).unwrap();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut fw = Forward::eval(tape, vars);
        let p = model.alignment(&mut fw, &pos_ids, &clips)?;
        let n = model.alignment(&mut fw, &neg_ids, &clips)?;
        let pos = MapVar::all_active(tape, p)?;
        let neg = MapVar::new(tape, n, &mask)?;
        Ok(sample_objective_with(tape, &pos, Some(&neg), &cfg, Some(&table))?.0)
    };
    gradient_check(model.params.tensors(), f, GradCheckConfig::default()).unwrap()
}

/// Uniform `U(-1,1)` map with a random row mask keeping at least one row.
pub fn random_map(rng: &mut ChaCha8Rng, max_tokens: usize, max_clips: usize) -> fsan::alignment::AlignmentMap {
    let ns = rng.random_range(1..=max_tokens);
    let nv = rng.random_range(1..=max_clips);
    let values = Tensor::uniform(&[ns, nv], 1.0, rng);
    let mut mask: Vec<bool> = (0..ns).map(|_| rng.random::<bool>()).collect();
    let keep = rng.random_range(0..ns);
    mask[keep] = true;
    fsan::alignment::AlignmentMap::with_mask(values, mask).unwrap()
}
