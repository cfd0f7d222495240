//! Parameterized building blocks shared by the encoders and the interaction stack.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{FsanError, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// One forward pass over a bound parameter set.
///
/// Dropout is active only when a training rng is supplied.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    vars: &'a [Var],
    train_rng: Option<&'a mut dyn RngCore>,
    dropout: f64,
}

impl<'a> Forward<'a> {
    pub fn eval(tape: &'a mut Tape, vars: &'a [Var]) -> Self {
        Forward {
            tape,
            vars,
            train_rng: None,
            dropout: 0.0,
        }
    }

    pub fn train(tape: &'a mut Tape, vars: &'a [Var], rng: &'a mut dyn RngCore, dropout: f64) -> Self {
        Forward {
            tape,
            vars,
            train_rng: Some(rng),
            dropout,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train_rng.is_some()
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match self.train_rng.as_mut() {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.full(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full(name);
        self.store.add(full, value)
    }

    /// Glorot-uniform matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let t = Tensor::uniform(&[rows, cols], bound, self.rng);
        self.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        b.scope(name, |b| Linear {
            weight: b.xavier("weight", input, output),
            bias: bias.then(|| b.add("bias", Tensor::zeros(&[output]))),
        })
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = fw.tape.matmul(x, fw.p(self.weight))?;
        match self.bias {
            Some(b) => fw.tape.add_row(y, fw.p(b)),
            None => Ok(y),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gain: b.add("gain", Tensor::filled(&[d], 1.0)),
            bias: b.add("bias", Tensor::zeros(&[d])),
        })
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (fw.p(self.gain), fw.p(self.bias));
        fw.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

/// Position-wise two-layer network with dropout on the hidden activations.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        d: usize,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        b.scope(name, |b| FeedForward {
            fc1: Linear::new(b, "fc1", d, hidden, true),
            fc2: Linear::new(b, "fc2", hidden, d, true),
            activation,
        })
    }

    pub fn forward(&self, fw: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(fw, x)?;
        let h = match self.activation {
            Activation::Relu => fw.tape.relu(h),
            Activation::Sigmoid => fw.tape.sigmoid(h),
        };
        let h = fw.dropout(h);
        self.fc2.forward(fw, h)
    }
}

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d / heads)`
    #[default]
    HeadDim,
    /// `sqrt(d)`
    ModelDim,
}

/// Projections of one multi-head attention: `W_Q, W_K, W_V, W_M`, each `d×d`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_m: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(FsanError::Config(format!(
                "head count {heads} must divide model dimension {d}"
            )));
        }
        Ok(b.scope(name, |b| AttentionParams {
            w_q: b.xavier("w_q", d, d),
            w_k: b.xavier("w_k", d, d),
            w_v: b.xavier("w_v", d, d),
            w_m: b.xavier("w_m", d, d),
            heads,
            d,
        }))
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Queries from `x` (`N_x×d`), keys and values from `y` (`N_y×d`); returns `N_x×d`.
pub fn multi_head_attention(
    fw: &mut Forward<'_>,
    x: Var,
    y: Var,
    p: &AttentionParams,
    scale: AttentionScale,
) -> Result<Var> {
    let (sx, sy) = (fw.tape.value(x).shape().to_vec(), fw.tape.value(y).shape().to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != p.d || sy[1] != p.d {
        return Err(FsanError::dim("multi_head_attention", &sx, &sy));
    }
    let q = fw.tape.matmul(x, fw.p(p.w_q))?;
    let k = fw.tape.matmul(y, fw.p(p.w_k))?;
    let v = fw.tape.matmul(y, fw.p(p.w_v))?;
    let dh = p.head_dim();
    let inv_scale = 1.0
        / match scale {
            AttentionScale::HeadDim => (dh as f64).sqrt(),
            AttentionScale::ModelDim => (p.d as f64).sqrt(),
        };
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                fw.tape.select_cols(q, h * dh, dh)?,
                fw.tape.select_cols(k, h * dh, dh)?,
                fw.tape.select_cols(v, h * dh, dh)?,
            )
        };
        let kt = fw.tape.transpose(kh)?;
        let logits = fw.tape.matmul(qh, kt)?;
        let logits = fw.tape.scale(logits, inv_scale);
        let attn = fw.tape.softmax_rows(logits)?;
        let attn = fw.dropout(attn);
        heads.push(fw.tape.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        fw.tape.concat_cols(&heads)?
    };
    fw.tape.matmul(cat, fw.p(p.w_m))
}

/// `x' = LN(MA(x, context) + x)`, `x'' = LN(FFN(x') + x')`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub attn: AttentionParams,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        activation: Activation,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ResidualBlock {
                attn: AttentionParams::new(b, "attn", d, heads)?,
                ln_attn: LayerNorm::new(b, "ln_attn", d),
                ffn: FeedForward::new(b, "ffn", d, ffn_hidden, activation),
                ln_ffn: LayerNorm::new(b, "ln_ffn", d),
            })
        })
    }

    /// With `context = None` the attention branch contributes zero.
    pub fn forward(
        &self,
        fw: &mut Forward<'_>,
        x: Var,
        context: Option<Var>,
        scale: AttentionScale,
    ) -> Result<Var> {
        let pre = match context {
            Some(y) => {
                let a = multi_head_attention(fw, x, y, &self.attn, scale)?;
                fw.tape.add(a, x)?
            }
            None => x,
        };
        let x1 = self.ln_attn.forward(fw, pre)?;
        let f = self.ffn.forward(fw, x1)?;
        let f = fw.tape.add(f, x1)?;
        self.ln_ffn.forward(fw, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_store(d: usize, heads: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            AttentionParams::new(&mut b, "a", d, heads).unwrap()
        };
        (store, p)
    }

    #[test]
    fn zero_logits_average_the_values() {
        let (mut store, p) = attention_store(3, 1);
        *store.get_mut(p.w_q) = Tensor::zeros(&[3, 3]);
        *store.get_mut(p.w_k) = Tensor::zeros(&[3, 3]);
        *store.get_mut(p.w_v) = Tensor::identity(3);
        *store.get_mut(p.w_m) = Tensor::identity(3);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -3.0]]).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let xv = fw.tape.constant(x);
        let out = multi_head_attention(&mut fw, xv, xv, &p, AttentionScale::HeadDim).unwrap();
        let out = tape.value(out);
        for i in 0..2 {
            assert_eq!(out.row(i), &[2.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn single_key_gives_identical_rows() {
        let (store, p) = attention_store(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let (xv, yv) = (fw.tape.constant(x), fw.tape.constant(y.clone()));
        let out = multi_head_attention(&mut fw, xv, yv, &p, AttentionScale::HeadDim).unwrap();
        let out = tape.value(out).clone();
        // y · W_V · W_M
        let wv = store.get(p.w_v);
        let wm = store.get(p.w_m);
        let yv = crate::tensor::matmul_raw(y.data(), wv.data(), 1, 4, 4);
        let expect = crate::tensor::matmul_raw(&yv, wm.data(), 1, 4, 4);
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(
            AttentionParams::new(&mut b, "a", 6, 4),
            Err(FsanError::Config(_))
        ));
    }

    #[test]
    fn input_width_must_match() {
        let (store, p) = attention_store(4, 2);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let x = fw.tape.constant(Tensor::zeros(&[2, 3]));
        assert!(multi_head_attention(&mut fw, x, x, &p, AttentionScale::HeadDim).is_err());
    }
}
