//! Prefix-LM text decoder over the synthetic vocabulary.
//!
//! Conditioning content (projected grid patches, serialized QA prompt, and
//! the begin-of-region marker) forms a mutually visible prefix; generated
//! tokens attend causally. One parameter set serves both QA-chain decoding
//! and report decoding. Training runs on the autodiff tape; generation uses
//! an incremental forward with per-layer key/value caches.

use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, Var};
use crate::numkit::layers::{
    encoder_stack_forward, AttentionMask, EncoderLayerParams, EncoderLayerVars, LN_EPS,
};
use crate::numkit::tensor::{mat_mul, Tensor};
use crate::numkit::{FeatureGrid, Rng};

/// Input stream a position belongs to (embedding added per position).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Image,
    Chain,
    Report,
}

impl Segment {
    fn index(self) -> usize {
        match self {
            Segment::Image => 0,
            Segment::Chain => 1,
            Segment::Report => 2,
        }
    }
}

/// Decoder weights. `out_proj` starts at zero, which both yields exactly
/// uniform next-token distributions at initialization and doubles as the
/// untrained marker.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub seg_embed: Tensor,
    pub img_proj: Tensor,
    pub img_bias: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    pub out_proj: Tensor,
    pub max_chain_tokens: usize,
    pub max_report_tokens: usize,
}

impl DecoderParams {
    pub fn init(
        vocab: usize,
        feature_dim: usize,
        width: usize,
        depth: usize,
        heads: usize,
        max_seq: usize,
        max_chain_tokens: usize,
        max_report_tokens: usize,
        rng: &mut Rng,
    ) -> DecoderParams {
        let std = 0.02;
        DecoderParams {
            token_embed: Tensor::randn(&[vocab, width], std, rng),
            pos_embed: Tensor::randn(&[max_seq, width], std, rng),
            seg_embed: Tensor::randn(&[3, width], std, rng),
            img_proj: Tensor::randn(&[feature_dim, width], 1.0 / (feature_dim as f64).sqrt(), rng),
            img_bias: Tensor::zeros(&[1, width]),
            layers: (0..depth)
                .map(|_| EncoderLayerParams::init(width, 4 * width, heads, rng))
                .collect(),
            out_proj: Tensor::zeros(&[width, vocab]),
            max_chain_tokens,
            max_report_tokens,
        }
    }

    pub fn width(&self) -> usize {
        self.token_embed.shape[1]
    }

    pub fn vocab(&self) -> usize {
        self.token_embed.shape[0]
    }

    pub fn max_seq(&self) -> usize {
        self.pos_embed.shape[0]
    }

    /// A zero output projection means the model has never been trained.
    pub fn is_trained(&self) -> bool {
        self.out_proj.data.iter().any(|v| *v != 0.0)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![
            &self.token_embed,
            &self.pos_embed,
            &self.seg_embed,
            &self.img_proj,
            &self.img_bias,
        ];
        for l in &self.layers {
            t.extend(l.tensors());
        }
        t.push(&self.out_proj);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![
            &mut self.token_embed,
            &mut self.pos_embed,
            &mut self.seg_embed,
            &mut self.img_proj,
            &mut self.img_bias,
        ];
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t.push(&mut self.out_proj);
        t
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("seg_embed".to_string(), &self.seg_embed),
            ("img_proj".to_string(), &self.img_proj),
            ("img_bias".to_string(), &self.img_bias),
        ];
        let names = [
            "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain",
            "ln2_bias",
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in names.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }
}

/// Tape handles for the decoder weights.
pub struct DecoderVars {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub seg_embed: Var,
    pub img_proj: Var,
    pub img_bias: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub out_proj: Var,
}

impl DecoderVars {
    pub fn load(g: &mut Graph, p: &DecoderParams) -> DecoderVars {
        DecoderVars {
            token_embed: g.param(&p.token_embed),
            pos_embed: g.param(&p.pos_embed),
            seg_embed: g.param(&p.seg_embed),
            img_proj: g.param(&p.img_proj),
            img_bias: g.param(&p.img_bias),
            layers: p.layers.iter().map(|l| EncoderLayerVars::load(g, l)).collect(),
            out_proj: g.param(&p.out_proj),
        }
    }

    /// Rebuild from packed slices (gradient checks); order matches
    /// `DecoderParams::tensors`.
    pub fn from_slices(vars: &[Var], depth: usize, heads: usize) -> DecoderVars {
        assert_eq!(vars.len(), 6 + 12 * depth);
        let layers = (0..depth)
            .map(|i| EncoderLayerVars::from_slices(&vars[5 + 12 * i..5 + 12 * (i + 1)], heads))
            .collect();
        DecoderVars {
            token_embed: vars[0],
            pos_embed: vars[1],
            seg_embed: vars[2],
            img_proj: vars[3],
            img_bias: vars[4],
            layers,
            out_proj: vars[5 + 12 * depth],
        }
    }

    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![
            self.token_embed,
            self.pos_embed,
            self.seg_embed,
            self.img_proj,
            self.img_bias,
        ];
        for l in &self.layers {
            v.extend(l.var_list());
        }
        v.push(self.out_proj);
        v
    }
}

/// One teacher-forced sequence: optional grid, token ids with segments, the
/// fully visible prefix length (in positions, counting grid rows), and the
/// span of token indices to score.
#[derive(Clone, Debug)]
pub struct SequenceExample {
    pub tokens: Vec<usize>,
    pub segs: Vec<Segment>,
    /// Number of fully visible positions, counting image rows first.
    pub visible_prefix: usize,
    /// Token-index span `[start, end)` whose tokens are the prediction
    /// targets. `start` must be >= 1 or the grid must be present.
    pub target_span: (usize, usize),
}

/// Teacher-forced logits for a full sequence: `[img rows + tokens, vocab]`.
pub fn forward_logits(
    g: &mut Graph,
    vars: &DecoderVars,
    grid: Option<&FeatureGrid>,
    tokens: &[usize],
    segs: &[Segment],
    visible_prefix: usize,
) -> Var {
    assert_eq!(tokens.len(), segs.len(), "one segment per token");
    let img_rows = grid.map(|gr| gr.patches()).unwrap_or(0);
    let total = img_rows + tokens.len();
    let mut parts = Vec::new();
    if let Some(grid) = grid {
        let x = g.constant(grid.tensor());
        let proj = g.matmul(x, vars.img_proj);
        let proj = g.add_row_broadcast(proj, vars.img_bias);
        let pos_ids: Vec<usize> = (0..img_rows).collect();
        let pos = g.embedding(vars.pos_embed, &pos_ids);
        let seg = g.embedding(vars.seg_embed, &vec![Segment::Image.index(); img_rows]);
        let withpos = g.add(proj, pos);
        parts.push(g.add(withpos, seg));
    }
    if !tokens.is_empty() {
        let emb = g.embedding(vars.token_embed, tokens);
        let pos_ids: Vec<usize> = (img_rows..total).collect();
        let pos = g.embedding(vars.pos_embed, &pos_ids);
        let seg_ids: Vec<usize> = segs.iter().map(|s| s.index()).collect();
        let seg = g.embedding(vars.seg_embed, &seg_ids);
        let withpos = g.add(emb, pos);
        parts.push(g.add(withpos, seg));
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let mask = AttentionMask::CausalWithPrefix { prefix: visible_prefix }.additive(total);
    let h = encoder_stack_forward(g, x, &vars.layers, mask.as_ref());
    g.matmul(h, vars.out_proj)
}

/// Mean NLL of the example's target span under teacher forcing.
pub fn sequence_loss(
    g: &mut Graph,
    vars: &DecoderVars,
    grid: Option<&FeatureGrid>,
    ex: &SequenceExample,
) -> Var {
    let (start, end) = ex.target_span;
    assert!(start < end && end <= ex.tokens.len(), "bad target span");
    let img_rows = grid.map(|gr| gr.patches()).unwrap_or(0);
    assert!(
        img_rows + start >= 1,
        "first target needs a preceding position to predict from"
    );
    let logits = forward_logits(g, vars, grid, &ex.tokens, &ex.segs, ex.visible_prefix);
    let rows = g.narrow_rows(logits, img_rows + start - 1, end - start);
    let targets: Vec<usize> = ex.tokens[start..end].to_vec();
    g.cross_entropy_rows(rows, &targets)
}

/// Language-modeling loss of `targets` given a fully visible token prefix
/// (no image conditioning). Mean NLL per target token.
pub fn lm_loss(params: &DecoderParams, prefix: &[usize], targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidData("empty target sequence".into()));
    }
    if prefix.is_empty() {
        return Err(Error::InvalidData("prefix must hold at least one token".into()));
    }
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(targets);
    let segs = vec![Segment::Chain; tokens.len()];
    let ex = SequenceExample {
        tokens,
        segs,
        visible_prefix: prefix.len(),
        target_span: (prefix.len(), prefix.len() + targets.len()),
    };
    let mut g = Graph::new();
    let vars = DecoderVars::load(&mut g, params);
    let loss = sequence_loss(&mut g, &vars, None, &ex);
    Ok(g.scalar_value(loss))
}

// ---------------------------------------------------------------------------
// Incremental inference with per-layer K/V caches.
// ---------------------------------------------------------------------------

struct LayerCache {
    k: Vec<f64>, // [len, width] row-major
    v: Vec<f64>,
}

/// Streaming decoder state. Prefill processes the visible prefix in one
/// pass (mutually visible positions); subsequent steps append one token at
/// a time, attending to everything cached.
pub struct DecoderState<'a> {
    params: &'a DecoderParams,
    caches: Vec<LayerCache>,
    len: usize,
    last_hidden: Vec<f64>,
}

fn layer_norm_row(row: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let d = row.len();
    let mu = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..d).map(|c| (row[c] - mu) * inv * gain.data[c] + bias.data[c]).collect()
}

fn row_matmul(row: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.rows_cols();
    assert_eq!(row.len(), k);
    let mut out = vec![0.0; n];
    for p in 0..k {
        let rv = row[p];
        if rv == 0.0 {
            continue;
        }
        let wrow = &w.data[p * n..(p + 1) * n];
        for j in 0..n {
            out[j] += rv * wrow[j];
        }
    }
    out
}

fn gelu_row(row: &mut [f64]) {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    for x in row {
        *x = 0.5 * *x * (1.0 + (C * (*x + A * *x * *x * *x)).tanh());
    }
}

impl<'a> DecoderState<'a> {
    /// Build the state by prefilling the visible prefix (grid rows plus
    /// `tokens`, all mutually visible).
    pub fn prefill(
        params: &'a DecoderParams,
        grid: Option<&FeatureGrid>,
        tokens: &[usize],
        segs: &[Segment],
    ) -> DecoderState<'a> {
        let width = params.width();
        let img_rows = grid.map(|g| g.patches()).unwrap_or(0);
        let total = img_rows + tokens.len();
        assert!(total >= 1, "prefill needs at least one position");
        assert!(total <= params.max_seq(), "prefix exceeds positional table");
        // Embed all prefix rows.
        let mut x = Tensor::zeros(&[total, width]);
        if let Some(grid) = grid {
            let proj = mat_mul(&grid.tensor(), &params.img_proj);
            for r in 0..img_rows {
                for c in 0..width {
                    x.data[r * width + c] = proj.data[r * width + c]
                        + params.img_bias.data[c]
                        + params.pos_embed.data[r * width + c]
                        + params.seg_embed.data[Segment::Image.index() * width + c];
                }
            }
        }
        for (j, (&tok, seg)) in tokens.iter().zip(segs).enumerate() {
            let r = img_rows + j;
            for c in 0..width {
                x.data[r * width + c] = params.token_embed.data[tok * width + c]
                    + params.pos_embed.data[r * width + c]
                    + params.seg_embed.data[seg.index() * width + c];
            }
        }
        // Full attention inside the prefix.
        let mut caches = Vec::with_capacity(params.layers.len());
        let mut h = x;
        for layer in &params.layers {
            let heads = layer.heads;
            let hd = width / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut xn = Tensor::zeros(&[total, width]);
            for r in 0..total {
                let row = layer_norm_row(h.row(r), &layer.ln1_gain, &layer.ln1_bias);
                xn.data[r * width..(r + 1) * width].copy_from_slice(&row);
            }
            let q = mat_mul(&xn, &layer.wq);
            let k = mat_mul(&xn, &layer.wk);
            let v = mat_mul(&xn, &layer.wv);
            let mut ctx = Tensor::zeros(&[total, width]);
            for hidx in 0..heads {
                let off = hidx * hd;
                for i in 0..total {
                    // scores against all prefix positions
                    let qi = &q.data[i * width + off..i * width + off + hd];
                    let mut scores = vec![0.0; total];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..total {
                        let kj = &k.data[j * width + off..j * width + off + hd];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    for j in 0..total {
                        let w = scores[j] / z;
                        let vj = &v.data[j * width + off..j * width + off + hd];
                        for c in 0..hd {
                            ctx.data[i * width + off + c] += w * vj[c];
                        }
                    }
                }
            }
            let proj = mat_mul(&ctx, &layer.wo);
            let mut y = h.clone();
            y.add_assign(&proj);
            let mut out = y.clone();
            for r in 0..total {
                let yn = layer_norm_row(y.row(r), &layer.ln2_gain, &layer.ln2_bias);
                let mut h1 = row_matmul(&yn, &layer.w1);
                for (a, b) in h1.iter_mut().zip(&layer.b1.data) {
                    *a += *b;
                }
                gelu_row(&mut h1);
                let mut h2 = row_matmul(&h1, &layer.w2);
                for (a, b) in h2.iter_mut().zip(&layer.b2.data) {
                    *a += *b;
                }
                for c in 0..width {
                    out.data[r * width + c] += h2[c];
                }
            }
            caches.push(LayerCache { k: k.data, v: v.data });
            h = out;
        }
        let last_hidden = h.row(total - 1).to_vec();
        DecoderState { params, caches, len: total, last_hidden }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the next token, read off the last processed position.
    pub fn next_logits(&self) -> Vec<f64> {
        row_matmul(&self.last_hidden, &self.params.out_proj)
    }

    /// Greedy pick: highest logit, ties to the lowest token id.
    pub fn argmax_next(&self) -> usize {
        let logits = self.next_logits();
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Append one generated token and advance the caches.
    pub fn push_token(&mut self, token: usize, seg: Segment) {
        let params = self.params;
        let width = params.width();
        assert!(self.len < params.max_seq(), "sequence exceeds positional table");
        let r = self.len;
        let mut row: Vec<f64> = (0..width)
            .map(|c| {
                params.token_embed.data[token * width + c]
                    + params.pos_embed.data[r * width + c]
                    + params.seg_embed.data[seg.index() * width + c]
            })
            .collect();
        for (layer, cache) in params.layers.iter().zip(&mut self.caches) {
            let heads = layer.heads;
            let hd = width / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let xn = layer_norm_row(&row, &layer.ln1_gain, &layer.ln1_bias);
            let q = row_matmul(&xn, &layer.wq);
            let k = row_matmul(&xn, &layer.wk);
            let v = row_matmul(&xn, &layer.wv);
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let total = r + 1;
            let mut ctx = vec![0.0; width];
            for hidx in 0..heads {
                let off = hidx * hd;
                let qi = &q[off..off + hd];
                let mut scores = vec![0.0; total];
                let mut m = f64::NEG_INFINITY;
                for j in 0..total {
                    let kj = &cache.k[j * width + off..j * width + off + hd];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    m = m.max(s);
                }
                let mut z = 0.0;
                for s in &mut scores {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for j in 0..total {
                    let w = scores[j] / z;
                    let vj = &cache.v[j * width + off..j * width + off + hd];
                    for c in 0..hd {
                        ctx[off + c] += w * vj[c];
                    }
                }
            }
            let proj = row_matmul(&ctx, &layer.wo);
            let y: Vec<f64> = row.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let yn = layer_norm_row(&y, &layer.ln2_gain, &layer.ln2_bias);
            let mut h1 = row_matmul(&yn, &layer.w1);
            for (a, b) in h1.iter_mut().zip(&layer.b1.data) {
                *a += *b;
            }
            gelu_row(&mut h1);
            let mut h2 = row_matmul(&h1, &layer.w2);
            for (a, b) in h2.iter_mut().zip(&layer.b2.data) {
                *a += *b;
            }
            row = y.iter().zip(&h2).map(|(a, b)| a + b).collect();
        }
        self.last_hidden = row;
        self.len += 1;
    }
}

/// Greedy decode until `stop` or `max_new` tokens; returns generated ids
/// (without the stop token).
pub fn greedy_decode(state: &mut DecoderState, seg: Segment, stop: usize, max_new: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for _ in 0..max_new {
        if state.len() >= state.params.max_seq() {
            break;
        }
        let next = state.argmax_next();
        if next == stop {
            break;
        }
        state.push_token(next, seg);
        out.push(next);
    }
    out
}
