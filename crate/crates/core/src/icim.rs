//! Iterative cross-modal interaction stack.
//!
//! Each layer runs a cross-modal block (text attends to video and video
//! attends to text, both from the layer's input pair) followed by an
//! inner-modal self-attention block per modality. Learnable positional
//! encodings, zero-initialized, are added once before the first layer.

use rand::Rng;

use crate::error::{FsanError, Result};
use crate::layers::{Activation, AttentionScale, Forward, ParamBuilder, ResidualBlock};
use crate::tensor::{ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IcimOptions {
    /// Replace `MA(S,V)` and `MA(V,S)` with zero.
    pub no_cross_modal: bool,
    /// Skip the inner-modal block entirely.
    pub no_inner_modal: bool,
    pub scale: AttentionScale,
}

#[derive(Clone, Debug)]
pub struct IcimLayer {
    pub text_cross: ResidualBlock,
    pub video_cross: ResidualBlock,
    pub text_inner: ResidualBlock,
    pub video_inner: ResidualBlock,
}

impl IcimLayer {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        activation: Activation,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(IcimLayer {
                text_cross: ResidualBlock::new(b, "text_cross", d, heads, ffn_hidden, activation)?,
                video_cross: ResidualBlock::new(b, "video_cross", d, heads, ffn_hidden, activation)?,
                text_inner: ResidualBlock::new(b, "text_inner", d, heads, ffn_hidden, activation)?,
                video_inner: ResidualBlock::new(b, "video_inner", d, heads, ffn_hidden, activation)?,
            })
        })
    }
}

#[derive(Clone, Debug)]
pub struct IcimStack {
    pub layers: Vec<IcimLayer>,
    pub pos_text: ParamId,
    pub pos_video: ParamId,
    pub max_text: usize,
    pub max_video: usize,
    pub options: IcimOptions,
}

impl IcimStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        activation: Activation,
        max_text: usize,
        max_video: usize,
        options: IcimOptions,
    ) -> Result<Self> {
        b.scope("icim", |b| {
            let pos_text = b.add("pos_text", Tensor::zeros(&[max_text, d]));
            let pos_video = b.add("pos_video", Tensor::zeros(&[max_video, d]));
            let layers = (0..layers)
                .map(|i| IcimLayer::new(b, &format!("layer{i}"), d, heads, ffn_hidden, activation))
                .collect::<Result<Vec<_>>>()?;
            Ok(IcimStack {
                layers,
                pos_text,
                pos_video,
                max_text,
                max_video,
                options,
            })
        })
    }

    /// Returns the enhanced `(S'', V'')`.
    pub fn forward(&self, fw: &mut Forward<'_>, s0: Var, v0: Var) -> Result<(Var, Var)> {
        let (ns, nv) = (fw.tape.value(s0).rows(), fw.tape.value(v0).rows());
        if ns > self.max_text || nv > self.max_video {
            return Err(FsanError::Input(format!(
                "sequence lengths ({ns}, {nv}) exceed positional tables ({}, {})",
                self.max_text, self.max_video
            )));
        }
        let mut s = add_positions(fw, s0, self.pos_text, ns)?;
        let mut v = add_positions(fw, v0, self.pos_video, nv)?;
        for layer in &self.layers {
            (s, v) = cross_modal_block(fw, s, v, layer, self.options)?;
            if !self.options.no_inner_modal {
                (s, v) = inner_modal_block(fw, s, v, layer, self.options)?;
            }
        }
        Ok((s, v))
    }
}

fn add_positions(fw: &mut Forward<'_>, x: Var, table: ParamId, n: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..n).collect();
    let pos = fw.tape.gather_rows(fw.p(table), &idx)?;
    fw.tape.add(x, pos)
}

/// `S'' = LN(FFN(S') + S')` with `S' = LN(MA(S,V) + S)`, and symmetrically for `V`;
/// both directions read the same `(S, V)`.
pub fn cross_modal_block(
    fw: &mut Forward<'_>,
    s: Var,
    v: Var,
    layer: &IcimLayer,
    options: IcimOptions,
) -> Result<(Var, Var)> {
    let (s_ctx, v_ctx) = if options.no_cross_modal {
        (None, None)
    } else {
        (Some(v), Some(s))
    };
    let s2 = layer.text_cross.forward(fw, s, s_ctx, options.scale)?;
    let v2 = layer.video_cross.forward(fw, v, v_ctx, options.scale)?;
    Ok((s2, v2))
}

/// Same structure as [`cross_modal_block`] with `MA(S,S)` and `MA(V,V)`.
pub fn inner_modal_block(
    fw: &mut Forward<'_>,
    s: Var,
    v: Var,
    layer: &IcimLayer,
    options: IcimOptions,
) -> Result<(Var, Var)> {
    let s2 = layer.text_inner.forward(fw, s, Some(s), options.scale)?;
    let v2 = layer.video_inner.forward(fw, v, Some(v), options.scale)?;
    Ok((s2, v2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(layers: usize, options: IcimOptions) -> (ParamStore, IcimStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            IcimStack::new(&mut b, layers, 8, 2, 16, Activation::Relu, 5, 6, options).unwrap()
        };
        (store, st)
    }

    fn run(store: &ParamStore, st: &IcimStack, s: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let (sv, vv) = (fw.tape.constant(s.clone()), fw.tape.constant(v.clone()));
        let (a, b) = st.forward(&mut fw, sv, vv)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    fn inputs(seed: u64, ns: usize, nv: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(&[ns, 8], 1.0, &mut rng), Tensor::randn(&[nv, 8], 1.0, &mut rng))
    }

    #[test]
    fn shapes_are_preserved() {
        let (store, st) = stack(2, IcimOptions::default());
        let (s, v) = inputs(1, 3, 4);
        let (s2, v2) = run(&store, &st, &s, &v).unwrap();
        assert_eq!(s2.shape(), &[3, 8]);
        assert_eq!(v2.shape(), &[4, 8]);
    }

    #[test]
    fn empty_stack_adds_positions_only() {
        let (mut store, st) = stack(0, IcimOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        *store.get_mut(st.pos_text) = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let (s, v) = inputs(1, 3, 4);
        let (s2, v2) = run(&store, &st, &s, &v).unwrap();
        let pos = store.get(st.pos_text);
        for i in 0..3 {
            for j in 0..8 {
                assert_eq!(s2.at(i, j), s.at(i, j) + pos.at(i, j));
            }
        }
        assert_eq!(v2, v);
    }

    #[test]
    fn too_long_sequences_are_rejected() {
        let (store, st) = stack(1, IcimOptions::default());
        let (s, v) = inputs(1, 6, 4);
        assert!(matches!(run(&store, &st, &s, &v), Err(FsanError::Input(_))));
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let (store, st) = stack(2, IcimOptions::default());
        let (s, v) = inputs(4, 2, 5);
        assert_eq!(run(&store, &st, &s, &v).unwrap(), run(&store, &st, &s, &v).unwrap());
    }

    #[test]
    fn clip_permutation_is_equivariant_without_positions() {
        let (store, st) = stack(1, IcimOptions::default());
        let (s, v) = inputs(7, 3, 4);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| v.row(i).to_vec()).collect();
        let (_, v_out) = run(&store, &st, &s, &v).unwrap();
        rows.swap(1, 3);
        let (_, v_perm) = run(&store, &st, &s, &Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            for (a, b) in v_out.row(i).iter().zip(v_perm.row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_cross_modal_isolates_text_from_video() {
        let opts = IcimOptions {
            no_cross_modal: true,
            ..IcimOptions::default()
        };
        let (store, st) = stack(2, opts);
        let (s, v) = inputs(9, 3, 4);
        let (_, v_other) = inputs(10, 3, 4);
        let (a, _) = run(&store, &st, &s, &v).unwrap();
        let (b, _) = run(&store, &st, &s, &v_other).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        // and the full model does depend on V
        let (store, st) = stack(2, IcimOptions::default());
        let (a, _) = run(&store, &st, &s, &v).unwrap();
        let (b, _) = run(&store, &st, &s, &v_other).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn no_inner_modal_changes_the_output() {
        let (store, st) = stack(1, IcimOptions::default());
        let mut st_ablate = st.clone();
        st_ablate.options.no_inner_modal = true;
        let (s, v) = inputs(3, 3, 4);
        let full = run(&store, &st, &s, &v).unwrap();
        let ablated = run(&store, &st_ablate, &s, &v).unwrap();
        assert!(full.0.max_abs_diff(&ablated.0) > 1e-6);

        // the ablated path is exactly the cross-modal block on positioned inputs
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let (sv, vv) = (fw.tape.constant(s.clone()), fw.tape.constant(v.clone()));
        let (a, b) = cross_modal_block(&mut fw, sv, vv, &st.layers[0], st.options).unwrap();
        assert_eq!(tape.value(a), &ablated.0);
        assert_eq!(tape.value(b), &ablated.1);
    }

    #[test]
    fn zeroed_branches_reduce_to_layer_norm() {
        let (mut store, st) = stack(1, IcimOptions::default());
        let l = &st.layers[0];
        for block in [&l.text_cross, &l.video_cross] {
            for id in [block.attn.w_m, block.ffn.fc2.weight, block.ffn.fc2.bias.unwrap()] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let (s, v) = inputs(5, 3, 4);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let (sv, vv) = (fw.tape.constant(s.clone()), fw.tape.constant(v.clone()));
        let (s2, _) = cross_modal_block(&mut fw, sv, vv, l, st.options).unwrap();
        let out = tape.value(s2);
        for i in 0..3 {
            let row = s.row(i);
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0;
            for (j, x) in row.iter().enumerate() {
                let once = (x - mu) / (var + 1e-5).sqrt();
                // LN applied twice; the second pass only differs through eps
                assert!((out.at(i, j) - once).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn single_token_inner_attention_is_linear_image() {
        let (store, st) = stack(1, IcimOptions::default());
        let (s, _) = inputs(6, 1, 4);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut fw = Forward::eval(&mut tape, &vars);
        let sv = fw.tape.constant(s.clone());
        let block = &st.layers[0].text_inner;
        let out =
            crate::layers::multi_head_attention(&mut fw, sv, sv, &block.attn, st.options.scale).unwrap();
        let out = tape.value(out).clone();
        let wv = store.get(block.attn.w_v);
        let wm = store.get(block.attn.w_m);
        let sv = crate::tensor::matmul_raw(s.data(), wv.data(), 1, 8, 8);
        let expect = crate::tensor::matmul_raw(&sv, wm.data(), 1, 8, 8);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
