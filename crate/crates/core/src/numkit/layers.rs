//! Transformer encoder building blocks: pre-norm residual layers with
//! multi-head attention and a GELU feed-forward, plus attention masks with an
//! always-visible prefix region for prefix-LM decoding.

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;

const MASK_NEG: f64 = -1e30;
pub const LN_EPS: f64 = 1e-5;

/// Attention visibility pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every position sees every position.
    Full,
    /// Position i sees j <= i, plus the first `prefix` positions
    /// unconditionally (mutually visible prefix, causal continuation).
    CausalWithPrefix { prefix: usize },
}

impl AttentionMask {
    pub fn causal() -> AttentionMask {
        AttentionMask::CausalWithPrefix { prefix: 0 }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Full => true,
            AttentionMask::CausalWithPrefix { prefix } => j < *prefix || j <= i,
        }
    }

    /// Additive mask matrix (0 where allowed, large negative elsewhere).
    pub fn additive(&self, n: usize) -> Option<Tensor> {
        if matches!(self, AttentionMask::Full) {
            return None;
        }
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if !self.allows(i, j) {
                    m.set(i, j, MASK_NEG);
                }
            }
        }
        Some(m)
    }
}

/// Weights of one pre-norm encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub heads: usize,
}

impl EncoderLayerParams {
    pub fn init(width: usize, ff_width: usize, heads: usize, rng: &mut Rng) -> EncoderLayerParams {
        assert!(heads >= 1 && width % heads == 0, "head count must divide width");
        let proj_std = 1.0 / (width as f64).sqrt();
        let ff_std = 1.0 / (ff_width as f64).sqrt();
        EncoderLayerParams {
            wq: Tensor::randn(&[width, width], proj_std, rng),
            wk: Tensor::randn(&[width, width], proj_std, rng),
            wv: Tensor::randn(&[width, width], proj_std, rng),
            wo: Tensor::randn(&[width, width], proj_std, rng),
            w1: Tensor::randn(&[width, ff_width], proj_std, rng),
            b1: Tensor::zeros(&[1, ff_width]),
            w2: Tensor::randn(&[ff_width, width], ff_std, rng),
            b2: Tensor::zeros(&[1, width]),
            ln1_gain: Tensor::full(&[1, width], 1.0),
            ln1_bias: Tensor::zeros(&[1, width]),
            ln2_gain: Tensor::full(&[1, width], 1.0),
            ln2_bias: Tensor::zeros(&[1, width]),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.shape[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub heads: usize,
}

impl EncoderLayerVars {
    pub fn load(g: &mut Graph, p: &EncoderLayerParams) -> EncoderLayerVars {
        EncoderLayerVars {
            wq: g.param(&p.wq),
            wk: g.param(&p.wk),
            wv: g.param(&p.wv),
            wo: g.param(&p.wo),
            w1: g.param(&p.w1),
            b1: g.param(&p.b1),
            w2: g.param(&p.w2),
            b2: g.param(&p.b2),
            ln1_gain: g.param(&p.ln1_gain),
            ln1_bias: g.param(&p.ln1_bias),
            ln2_gain: g.param(&p.ln2_gain),
            ln2_bias: g.param(&p.ln2_bias),
            heads: p.heads,
        }
    }

    /// Assemble from pre-sliced vars (packed gradient checks). The slice
    /// order matches `EncoderLayerParams::tensors`.
    pub fn from_slices(vars: &[Var], heads: usize) -> EncoderLayerVars {
        assert_eq!(vars.len(), 12, "a layer has 12 weight tensors");
        EncoderLayerVars {
            wq: vars[0],
            wk: vars[1],
            wv: vars[2],
            wo: vars[3],
            w1: vars[4],
            b1: vars[5],
            w2: vars[6],
            b2: vars[7],
            ln1_gain: vars[8],
            ln1_bias: vars[9],
            ln2_gain: vars[10],
            ln2_bias: vars[11],
            heads,
        }
    }

    pub fn var_list(&self) -> Vec<Var> {
        vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// One pre-norm residual block:
/// `y = x + MHA(LN1(x)); out = y + FFN(LN2(y))`.
///
/// `mask` is the additive attention mask for this sequence length (`None`
/// for full attention). Panics on width mismatch.
pub fn encoder_layer_forward(
    g: &mut Graph,
    x: Var,
    layer: &EncoderLayerVars,
    mask: Option<&Tensor>,
) -> Var {
    let (_n, d) = g.value(x).rows_cols();
    let width = g.value(layer.wq).rows_cols().0;
    assert_eq!(d, width, "input width {d} does not match layer width {width}");
    let heads = layer.heads;
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let xn = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS);
    let q = g.matmul(xn, layer.wq);
    let k = g.matmul(xn, layer.wk);
    let v = g.matmul(xn, layer.wv);

    let mut head_ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow_cols(q, h * head_dim, head_dim);
        let kh = g.narrow_cols(k, h * head_dim, head_dim);
        let vh = g.narrow_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let scores = match mask {
            Some(m) => g.add_const(scores, m),
            None => scores,
        };
        let attn = g.softmax_rows(scores);
        head_ctx.push(g.matmul(attn, vh));
    }
    let ctx = g.concat_cols(&head_ctx);
    let proj = g.matmul(ctx, layer.wo);
    let y = g.add(x, proj);

    let yn = g.layer_norm(y, layer.ln2_gain, layer.ln2_bias, LN_EPS);
    let h1 = g.matmul(yn, layer.w1);
    let h1 = g.add_row_broadcast(h1, layer.b1);
    let h1 = g.gelu(h1);
    let h2 = g.matmul(h1, layer.w2);
    let h2 = g.add_row_broadcast(h2, layer.b2);
    g.add(y, h2)
}

/// Run a stack of layers sharing one mask.
pub fn encoder_stack_forward(
    g: &mut Graph,
    x: Var,
    layers: &[EncoderLayerVars],
    mask: Option<&Tensor>,
) -> Var {
    let mut h = x;
    for layer in layers {
        h = encoder_layer_forward(g, h, layer, mask);
    }
    h
}

/// Learned positional embeddings [max_len, width].
pub fn position_embeddings(max_len: usize, width: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[max_len, width], 0.02, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::graph::{grad_check, pack_tensors, split_flat};

    fn small_layer(rng: &mut Rng) -> EncoderLayerParams {
        EncoderLayerParams::init(8, 16, 2, rng)
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut rng = Rng::seed_from_u64(21);
        let mut p = small_layer(&mut rng);
        p.wo = Tensor::zeros(&[8, 8]);
        p.w2 = Tensor::zeros(&[16, 8]);
        p.b2 = Tensor::zeros(&[1, 8]);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let layer = EncoderLayerVars::load(&mut g, &p);
        let out = encoder_layer_forward(&mut g, xv, &layer, None);
        for (a, b) in g.value(out).data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unmasked_layer_is_permutation_equivariant() {
        let mut rng = Rng::seed_from_u64(22);
        let p = small_layer(&mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut xp = Tensor::zeros(&[4, 8]);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..8 {
                xp.set(to, c, x.at(from, c));
            }
        }
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(input.clone());
            let layer = EncoderLayerVars::load(&mut g, &p);
            let out = encoder_layer_forward(&mut g, xv, &layer, None);
            g.value(out).clone()
        };
        let base = run(&x);
        let permuted = run(&xp);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (permuted.at(to, c) - base.at(from, c)).abs() < 1e-12,
                    "row {to} col {c}"
                );
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mask = AttentionMask::CausalWithPrefix { prefix: 2 };
        assert!(mask.allows(0, 1)); // inside prefix: mutually visible
        assert!(mask.allows(2, 2));
        assert!(!mask.allows(2, 3));
        assert!(mask.allows(3, 0));
        let m = mask.additive(4).unwrap();
        assert_eq!(m.at(2, 3), MASK_NEG);
        assert_eq!(m.at(3, 2), 0.0);
    }

    #[test]
    fn encoder_layer_grad_check() {
        let mut rng = Rng::seed_from_u64(23);
        for trial in 0..5 {
            let p = small_layer(&mut rng);
            let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let (flat, shapes) = pack_tensors(&p.tensors());
            let mask = AttentionMask::CausalWithPrefix { prefix: 2 }.additive(4);
            let err = grad_check(&flat, move |g, v| {
                let slices = split_flat(g, v, &shapes);
                let layer = EncoderLayerVars::from_slices(&slices, 2);
                let xv = g.constant(x.clone());
                let out = encoder_layer_forward(g, xv, &layer, mask.as_ref());
                let sq = g.mul_elem(out, out);
                g.mean_all(sq)
            });
            assert!(err <= 1e-4, "trial {trial}: encoder layer grad error {err}");
        }
    }
}
