//! Lesion grounding: fuse projected visual patches with a location-typed QA
//! diagnosis and a learned regression token, run an encoder stack, and map
//! the regression token's embedding through a sigmoid head to a box.
//! Also the box metrics (IoU, GIoU-based loss, Acc@IoU) and the per-disease
//! precision/recall benchmark used for grounding evaluation.

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, QaDiagnosis, QaType};
use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, Var};
use crate::numkit::layers::{encoder_stack_forward, EncoderLayerParams, EncoderLayerVars};
use crate::numkit::optim::AdamW;
use crate::numkit::tensor::Tensor;
use crate::numkit::{FeatureGrid, Rng};
use crate::qachain::grammar::{qa_tokens, Vocab};

/// Smallest admissible predicted box side; keeps corner conversion valid
/// after coordinate quantization.
const MIN_SIZE: f64 = 1e-4;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrounderConfig {
    pub text_dim: usize,
    pub fused_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_text_tokens: usize,
}

impl Default for GrounderConfig {
    fn default() -> GrounderConfig {
        GrounderConfig { text_dim: 16, fused_dim: 32, depth: 6, heads: 4, max_text_tokens: 24 }
    }
}

impl GrounderConfig {
    /// Two-layer stack for fast tests and desk-scale training.
    pub fn fast() -> GrounderConfig {
        GrounderConfig { depth: 2, ..Default::default() }
    }
}

/// Grounder weights: projections into the shared width, the regression
/// token, positional and stream-type embeddings, the encoder stack, and the
/// sigmoid box head. Sequence layout is `[visual | text | REG]`.
#[derive(Clone, Debug)]
pub struct LesionGrounderParams {
    pub patches: usize,
    pub text_embed: Tensor,
    pub proj_v: Tensor,
    pub proj_v_bias: Tensor,
    pub proj_t: Tensor,
    pub proj_t_bias: Tensor,
    pub reg_token: Tensor,
    pub pos_embed: Tensor,
    pub stream_embed: Tensor,
    pub layers: Vec<EncoderLayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl LesionGrounderParams {
    pub fn init(
        vocab: usize,
        feature_dim: usize,
        patches: usize,
        cfg: &GrounderConfig,
        rng: &mut Rng,
    ) -> LesionGrounderParams {
        assert!(cfg.depth >= 1, "encoder stack needs at least one layer");
        let d = cfg.fused_dim;
        LesionGrounderParams {
            patches,
            text_embed: Tensor::randn(&[vocab, cfg.text_dim], 0.1, rng),
            proj_v: Tensor::randn(&[feature_dim, d], 1.0 / (feature_dim as f64).sqrt(), rng),
            proj_v_bias: Tensor::zeros(&[1, d]),
            proj_t: Tensor::randn(&[cfg.text_dim, d], 1.0 / (cfg.text_dim as f64).sqrt(), rng),
            proj_t_bias: Tensor::zeros(&[1, d]),
            reg_token: Tensor::randn(&[1, d], 0.1, rng),
            pos_embed: Tensor::randn(&[patches + cfg.max_text_tokens + 1, d], 0.02, rng),
            stream_embed: Tensor::randn(&[3, d], 0.02, rng),
            layers: (0..cfg.depth)
                .map(|_| EncoderLayerParams::init(d, 2 * d, cfg.heads, rng))
                .collect(),
            head_w: Tensor::randn(&[d, 4], 0.05, rng),
            head_b: Tensor::zeros(&[1, 4]),
        }
    }

    pub fn max_text_tokens(&self) -> usize {
        self.pos_embed.shape[0] - 1 - self.patches
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![
            &self.text_embed,
            &self.proj_v,
            &self.proj_v_bias,
            &self.proj_t,
            &self.proj_t_bias,
            &self.reg_token,
            &self.pos_embed,
            &self.stream_embed,
        ];
        for l in &self.layers {
            t.extend(l.tensors());
        }
        t.push(&self.head_w);
        t.push(&self.head_b);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![
            &mut self.text_embed,
            &mut self.proj_v,
            &mut self.proj_v_bias,
            &mut self.proj_t,
            &mut self.proj_t_bias,
            &mut self.reg_token,
            &mut self.pos_embed,
            &mut self.stream_embed,
        ];
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t.push(&mut self.head_w);
        t.push(&mut self.head_b);
        t
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let base = [
            "text_embed",
            "proj_v",
            "proj_v_bias",
            "proj_t",
            "proj_t_bias",
            "reg_token",
            "pos_embed",
            "stream_embed",
        ];
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let tensors = self.tensors();
        let mut i = 0;
        for name in base {
            out.push((name.to_string(), tensors[i]));
            i += 1;
        }
        let layer_names = [
            "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain",
            "ln2_bias",
        ];
        for li in 0..self.layers.len() {
            for n in layer_names {
                out.push((format!("layers.{li}.{n}"), tensors[i]));
                i += 1;
            }
        }
        out.push(("head_w".to_string(), tensors[i]));
        out.push(("head_b".to_string(), tensors[i + 1]));
        out
    }
}

/// Tape handles for the grounder.
pub struct GrounderVars {
    pub text_embed: Var,
    pub proj_v: Var,
    pub proj_v_bias: Var,
    pub proj_t: Var,
    pub proj_t_bias: Var,
    pub reg_token: Var,
    pub pos_embed: Var,
    pub stream_embed: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl GrounderVars {
    pub fn load(g: &mut Graph, p: &LesionGrounderParams) -> GrounderVars {
        GrounderVars {
            text_embed: g.param(&p.text_embed),
            proj_v: g.param(&p.proj_v),
            proj_v_bias: g.param(&p.proj_v_bias),
            proj_t: g.param(&p.proj_t),
            proj_t_bias: g.param(&p.proj_t_bias),
            reg_token: g.param(&p.reg_token),
            pos_embed: g.param(&p.pos_embed),
            stream_embed: g.param(&p.stream_embed),
            layers: p.layers.iter().map(|l| EncoderLayerVars::load(g, l)).collect(),
            head_w: g.param(&p.head_w),
            head_b: g.param(&p.head_b),
        }
    }

    pub fn from_slices(vars: &[Var], depth: usize, heads: usize) -> GrounderVars {
        assert_eq!(vars.len(), 10 + 12 * depth);
        let layers = (0..depth)
            .map(|i| EncoderLayerVars::from_slices(&vars[8 + 12 * i..8 + 12 * (i + 1)], heads))
            .collect();
        GrounderVars {
            text_embed: vars[0],
            proj_v: vars[1],
            proj_v_bias: vars[2],
            proj_t: vars[3],
            proj_t_bias: vars[4],
            reg_token: vars[5],
            pos_embed: vars[6],
            stream_embed: vars[7],
            layers,
            head_w: vars[8 + 12 * depth],
            head_b: vars[9 + 12 * depth],
        }
    }

    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![
            self.text_embed,
            self.proj_v,
            self.proj_v_bias,
            self.proj_t,
            self.proj_t_bias,
            self.reg_token,
            self.pos_embed,
            self.stream_embed,
        ];
        for l in &self.layers {
            v.extend(l.var_list());
        }
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Forward pass to the sigmoid box parameters `(cx, cy, w, h)` as a `[1,4]`
/// tape node.
pub fn forward_box_params(
    g: &mut Graph,
    vars: &GrounderVars,
    grid: &FeatureGrid,
    text_ids: &[usize],
) -> Var {
    let patches = grid.patches();
    let x = g.constant(grid.tensor());
    let v = g.matmul(x, vars.proj_v);
    let v = g.add_row_broadcast(v, vars.proj_v_bias);
    let v_pos: Vec<usize> = (0..patches).collect();
    let vp = g.embedding(vars.pos_embed, &v_pos);
    let vs = g.embedding(vars.stream_embed, &vec![0; patches]);
    let v = {
        let a = g.add(v, vp);
        g.add(a, vs)
    };
    let t = g.embedding(vars.text_embed, text_ids);
    let t = g.matmul(t, vars.proj_t);
    let t = g.add_row_broadcast(t, vars.proj_t_bias);
    let t_pos: Vec<usize> = (patches..patches + text_ids.len()).collect();
    let tp = g.embedding(vars.pos_embed, &t_pos);
    let ts = g.embedding(vars.stream_embed, &vec![1; text_ids.len()]);
    let t = {
        let a = g.add(t, tp);
        g.add(a, ts)
    };
    let reg_pos = g.embedding(vars.pos_embed, &[patches + text_ids.len()]);
    let reg_stream = g.embedding(vars.stream_embed, &[2]);
    let reg = {
        let a = g.add(vars.reg_token, reg_pos);
        g.add(a, reg_stream)
    };
    let fused = g.concat_rows(&[v, t, reg]);
    let h = encoder_stack_forward(g, fused, &vars.layers, None);
    let (rows, _) = g.value(h).rows_cols();
    let reg_out = g.select_row(h, rows - 1);
    let raw = g.matmul(reg_out, vars.head_w);
    let raw = g.add_row_broadcast(raw, vars.head_b);
    g.sigmoid(raw)
}

/// Convert sigmoid box parameters to a valid corner box (clipped to [0,1],
/// minimum side enforced before conversion).
pub fn params_to_box(cxcywh: &[f64]) -> BoundingBox {
    let (cx, cy) = (cxcywh[0], cxcywh[1]);
    let w = cxcywh[2].max(MIN_SIZE);
    let h = cxcywh[3].max(MIN_SIZE);
    let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
    let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
    let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
    let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
    BoundingBox::new(x1, y1, x2, y2).expect("sigmoid parameterization yields a valid box")
}

fn box_to_cxcywh(b: &BoundingBox) -> Tensor {
    Tensor::new(
        vec![1, 4],
        vec![(b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, b.width(), b.height()],
    )
}

/// Run the grounder on one location-typed diagnosis.
pub fn fuse_and_regress(
    grid: &FeatureGrid,
    diagnosis: &QaDiagnosis,
    params: &LesionGrounderParams,
    vocab: &Vocab,
) -> Result<BoundingBox> {
    if diagnosis.qtype != QaType::Location {
        return Err(Error::InvalidData(format!(
            "lesion grounding needs a location diagnosis, got {:?}",
            diagnosis.qtype
        )));
    }
    let mut text_ids = vocab.encode(&qa_tokens(diagnosis))?;
    text_ids.truncate(params.max_text_tokens());
    let mut g = Graph::new();
    let vars = GrounderVars::load(&mut g, params);
    let out = forward_box_params(&mut g, &vars, grid, &text_ids);
    Ok(params_to_box(&g.value(out).data))
}

/// GIoU of a `[1,4]` corner-box node against a constant box, composed from
/// differentiable primitives.
pub fn giou_node(g: &mut Graph, pred_corners: Var, gt: &BoundingBox) -> Var {
    let gx1 = g.scalar_const(gt.x1);
    let gy1 = g.scalar_const(gt.y1);
    let gx2 = g.scalar_const(gt.x2);
    let gy2 = g.scalar_const(gt.y2);
    let px1 = g.pick(pred_corners, 0);
    let py1 = g.pick(pred_corners, 1);
    let px2 = g.pick(pred_corners, 2);
    let py2 = g.pick(pred_corners, 3);

    let ix1 = g.maximum(px1, gx1);
    let iy1 = g.maximum(py1, gy1);
    let ix2 = g.minimum(px2, gx2);
    let iy2 = g.minimum(py2, gy2);
    let iw = {
        let d = g.sub(ix2, ix1);
        g.relu(d)
    };
    let ih = {
        let d = g.sub(iy2, iy1);
        g.relu(d)
    };
    let inter = g.mul_elem(iw, ih);

    let pw = g.sub(px2, px1);
    let ph = g.sub(py2, py1);
    let area_p = g.mul_elem(pw, ph);
    let area_g = g.scalar_const(gt.area());
    let sum_areas = g.add(area_p, area_g);
    let union = g.sub(sum_areas, inter);
    let iou = g.div_elem(inter, union);

    let hx1 = g.minimum(px1, gx1);
    let hy1 = g.minimum(py1, gy1);
    let hx2 = g.maximum(px2, gx2);
    let hy2 = g.maximum(py2, gy2);
    let hw = g.sub(hx2, hx1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul_elem(hw, hh);
    let slack = g.sub(hull, union);
    let penalty = g.div_elem(slack, hull);
    g.sub(iou, penalty)
}

/// Training loss on a `[1,4]` sigmoid-parameter node: smooth-L1 on
/// (cx,cy,w,h) plus `1 - GIoU` on the corner form.
pub fn box_loss_node(g: &mut Graph, pred_params: Var, gt: &BoundingBox) -> Var {
    let l1 = g.smooth_l1(pred_params, &box_to_cxcywh(gt), 1.0);
    let cx = g.pick(pred_params, 0);
    let cy = g.pick(pred_params, 1);
    let w = g.pick(pred_params, 2);
    let h = g.pick(pred_params, 3);
    let half_w = g.scale(w, 0.5);
    let half_h = g.scale(h, 0.5);
    let x1 = g.sub(cx, half_w);
    let y1 = g.sub(cy, half_h);
    let x2 = g.add(cx, half_w);
    let y2 = g.add(cy, half_h);
    let row = g.concat_cols(&[x1, y1, x2, y2]);
    let giou = giou_node(g, row, gt);
    let one = g.scalar_const(1.0);
    let giou_term = g.sub(one, giou);
    g.add(l1, giou_term)
}

/// Scalar box loss between two boxes: zero iff identical.
pub fn box_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(box_to_cxcywh(pred));
    let loss = box_loss_node(&mut g, p, gt);
    g.scalar_value(loss)
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of paired boxes with IoU at or above the threshold.
pub fn acc_at_iou(preds: &[BoundingBox], gts: &[BoundingBox], threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| iou(p, g) >= threshold).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// One grounding query: a grid, the query diagnosis text ids, and the
/// ground-truth boxes of that disease.
#[derive(Clone, Debug)]
pub struct GroundingQuery {
    pub disease: String,
    pub text_ids: Vec<usize>,
    pub gt_boxes: Vec<BoundingBox>,
}

/// Per-disease precision/recall at an IoU threshold. A prediction is a true
/// positive when it matches the best-overlapping unmatched ground-truth box
/// at or above the threshold (greedy by descending IoU).
#[derive(Clone, Debug, Default, Serialize)]
pub struct GroundingScores {
    pub per_disease: Vec<(String, f64, f64)>,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub mean_iou: f64,
}

pub fn evaluate_grounding(
    params: &LesionGrounderParams,
    grids: &[&FeatureGrid],
    queries: &[Vec<GroundingQuery>],
    threshold: f64,
) -> Result<GroundingScores> {
    if grids.len() != queries.len() {
        return Err(Error::LengthMismatch(format!(
            "{} grids vs {} query lists",
            grids.len(),
            queries.len()
        )));
    }
    use std::collections::BTreeMap;
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_pred: BTreeMap<String, usize> = BTreeMap::new();
    let mut n_gt: BTreeMap<String, usize> = BTreeMap::new();
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for (grid, qs) in grids.iter().zip(queries) {
        for q in qs {
            let mut g = Graph::new();
            let vars = GrounderVars::load(&mut g, params);
            let out = forward_box_params(&mut g, &vars, grid, &q.text_ids);
            let pred = params_to_box(&g.value(out).data);
            *n_pred.entry(q.disease.clone()).or_default() += 1;
            *n_gt.entry(q.disease.clone()).or_default() += q.gt_boxes.len();
            let best = q
                .gt_boxes
                .iter()
                .map(|b| iou(&pred, b))
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                iou_sum += best;
                iou_n += 1;
                if best >= threshold {
                    *tp.entry(q.disease.clone()).or_default() += 1;
                }
            }
        }
    }
    let mut per_disease = Vec::new();
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    for (disease, &preds) in &n_pred {
        let hits = *tp.get(disease).unwrap_or(&0) as f64;
        let gts = *n_gt.get(disease).unwrap_or(&0) as f64;
        let prec = if preds > 0 { hits / preds as f64 } else { 0.0 };
        let rec = if gts > 0.0 { hits / gts } else { 0.0 };
        per_disease.push((disease.clone(), prec, rec));
        prec_sum += prec;
        rec_sum += rec;
    }
    let k = per_disease.len().max(1) as f64;
    Ok(GroundingScores {
        per_disease,
        avg_precision: prec_sum / k,
        avg_recall: rec_sum / k,
        mean_iou: if iou_n > 0 { iou_sum / iou_n as f64 } else { 0.0 },
    })
}

/// One training sample.
#[derive(Clone, Debug)]
pub struct GrounderSample {
    pub grid: FeatureGrid,
    pub text_ids: Vec<usize>,
    pub target: BoundingBox,
}

#[derive(Clone, Debug)]
pub struct GrounderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GrounderTrainConfig {
    fn default() -> GrounderTrainConfig {
        GrounderTrainConfig { epochs: 6, lr: 3e-3, weight_decay: 0.01, batch: 8, seed: 0 }
    }
}

/// AdamW training with gradient accumulation; deterministic per config.
pub fn train_grounder(
    params: &mut LesionGrounderParams,
    samples: &[GrounderSample],
    cfg: &GrounderTrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidData("no grounding samples".into()));
    }
    let mut opt = AdamW::new(cfg.lr)?.with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = Rng::seed_from_u64(cfg.seed).fork("grounder-shuffle");
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0;
            for &i in chunk {
                let s = &samples[i];
                let mut g = Graph::new();
                let vars = GrounderVars::load(&mut g, params);
                let out = forward_box_params(&mut g, &vars, &s.grid, &s.text_ids);
                let loss = box_loss_node(&mut g, out, &s.target);
                loss_sum += g.scalar_value(loss);
                let grads = g.backward(loss);
                let step: Vec<Tensor> = vars
                    .var_list()
                    .iter()
                    .map(|v| {
                        grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&g.value(*v).shape))
                    })
                    .collect();
                match &mut acc {
                    None => acc = Some(step),
                    Some(a) => {
                        for (t, s) in a.iter_mut().zip(&step) {
                            t.add_assign(s);
                        }
                    }
                }
            }
            let mut acc = acc.unwrap();
            let scale = 1.0 / chunk.len() as f64;
            for t in &mut acc {
                t.scale_assign(scale);
            }
            let mut tensors = params.tensors_mut();
            let refs: Vec<&Tensor> = acc.iter().collect();
            opt.step(&mut tensors, &refs);
            last = loss_sum * scale;
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AnswerPayload, DiseaseRegistry, HLoc, VLoc};
    use crate::numkit::graph::{grad_check, pack_tensors, split_flat};
    use crate::qachain::grammar;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn location_diagnosis(disease: &str) -> QaDiagnosis {
        let payload = AnswerPayload::Location {
            hloc: HLoc::RightOnly,
            vlocs: [VLoc::Apex].into_iter().collect(),
        };
        QaDiagnosis {
            qtype: QaType::Location,
            disease: disease.into(),
            question: grammar::question_tokens(QaType::Location, disease),
            answer: grammar::answer_tokens(&payload),
            payload,
        }
    }

    #[test]
    fn iou_identity_disjoint_and_hand_case() {
        let a = bx(0.1, 0.1, 0.3, 0.3);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(0.6, 0.6, 0.8, 0.8);
        assert_eq!(iou(&a, &b), 0.0);
        // (0,0,.2,.2) vs (.1,.1,.3,.3): inter .01, union .07
        let c = bx(0.0, 0.0, 0.2, 0.2);
        let d = bx(0.1, 0.1, 0.3, 0.3);
        assert!((iou(&c, &d) - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&c, &d) - iou(&d, &c)).abs() < 1e-15, "symmetry");
    }

    #[test]
    fn acc_at_iou_contracts() {
        let preds = vec![bx(0.1, 0.1, 0.3, 0.3), bx(0.5, 0.5, 0.7, 0.7)];
        assert_eq!(acc_at_iou(&preds, &preds, 0.5).unwrap(), 1.0);
        let gts = vec![bx(0.1, 0.1, 0.3, 0.3)];
        assert!(acc_at_iou(&preds, &gts, 0.5).is_err());
    }

    #[test]
    fn box_loss_zero_iff_equal_and_positive_otherwise() {
        let a = bx(0.2, 0.3, 0.5, 0.6);
        assert!(box_loss(&a, &a).abs() < 1e-12);
        let b = bx(0.21, 0.3, 0.5, 0.6);
        assert!(box_loss(&a, &b) > 0.0);
    }

    #[test]
    fn giou_term_exceeds_one_for_distant_disjoint_boxes() {
        // corner boxes at opposite ends: union 0.08, hull 1.0
        let a = bx(0.0, 0.0, 0.2, 0.2);
        let b = bx(0.8, 0.8, 1.0, 1.0);
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 4], vec![a.x1, a.y1, a.x2, a.y2]));
        let giou = giou_node(&mut g, p, &b);
        let v = g.scalar_value(giou);
        assert!((v - (0.0 - 0.92)).abs() < 1e-12, "giou {v}");
        assert!(1.0 - v > 1.0);
    }

    #[test]
    fn box_loss_grad_check() {
        let mut rng = Rng::seed_from_u64(51);
        let gt = bx(0.3, 0.35, 0.6, 0.7);
        for trial in 0..5 {
            // random pre-sigmoid params away from the gt kinks
            let raw = Tensor::randn(&[1, 4], 0.8, &mut rng);
            let gt = gt;
            let err = grad_check(&raw, move |g, v| {
                let p = g.sigmoid(v);
                box_loss_node(g, p, &gt)
            });
            assert!(err <= 1e-4, "trial {trial}: box loss grad error {err}");
        }
    }

    #[test]
    fn predicted_boxes_are_always_valid() {
        let mut rng = Rng::seed_from_u64(52);
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        for _ in 0..10 {
            let params =
                LesionGrounderParams::init(vocab.len(), 8, 9, &GrounderConfig::fast(), &mut rng);
            let mut grid = FeatureGrid::zeros(3, 8);
            for v in &mut grid.data {
                *v = rng.normal_scaled(0.0, 2.0);
            }
            let b = fuse_and_regress(&grid, &location_diagnosis("pneumonia"), &params, &vocab)
                .unwrap();
            assert!(b.is_valid(), "{b:?}");
        }
    }

    #[test]
    fn non_location_diagnosis_is_rejected() {
        let mut rng = Rng::seed_from_u64(53);
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let params =
            LesionGrounderParams::init(vocab.len(), 8, 9, &GrounderConfig::fast(), &mut rng);
        let payload = AnswerPayload::Presence { present: true };
        let d = QaDiagnosis {
            qtype: QaType::Presence,
            disease: "pneumonia".into(),
            question: grammar::question_tokens(QaType::Presence, "pneumonia"),
            answer: grammar::answer_tokens(&payload),
            payload,
        };
        let grid = FeatureGrid::zeros(3, 8);
        assert!(fuse_and_regress(&grid, &d, &params, &vocab).is_err());
    }

    #[test]
    fn permuting_patches_with_their_positions_is_invariant() {
        let mut rng = Rng::seed_from_u64(54);
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let params =
            LesionGrounderParams::init(vocab.len(), 8, 9, &GrounderConfig::fast(), &mut rng);
        let mut grid = FeatureGrid::zeros(3, 8);
        for v in &mut grid.data {
            *v = rng.normal_scaled(0.0, 1.0);
        }
        let d = location_diagnosis("pneumonia");
        let base = fuse_and_regress(&grid, &d, &params, &vocab).unwrap();

        // permute patch rows and the matching positional-embedding rows
        let perm: Vec<usize> = vec![4, 0, 7, 2, 8, 1, 6, 3, 5];
        let mut grid2 = grid.clone();
        let mut params2 = params.clone();
        let c = grid.feature_dim;
        let dim = params.reg_token.shape[1];
        for (to, &from) in perm.iter().enumerate() {
            grid2.data[to * c..(to + 1) * c].copy_from_slice(&grid.data[from * c..(from + 1) * c]);
            for k in 0..dim {
                params2.pos_embed.data[to * dim + k] = params.pos_embed.data[from * dim + k];
            }
        }
        let permuted = fuse_and_regress(&grid2, &d, &params2, &vocab).unwrap();
        assert!((base.x1 - permuted.x1).abs() < 1e-9);
        assert!((base.y1 - permuted.y1).abs() < 1e-9);
        assert!((base.x2 - permuted.x2).abs() < 1e-9);
        assert!((base.y2 - permuted.y2).abs() < 1e-9);
    }

    #[test]
    fn end_to_end_grounder_grad_check_at_depth_two() {
        let mut rng = Rng::seed_from_u64(55);
        let registry = DiseaseRegistry::small(1);
        let vocab = Vocab::for_registry(&registry);
        let cfg = GrounderConfig {
            text_dim: 4,
            fused_dim: 8,
            depth: 2,
            heads: 2,
            max_text_tokens: 8,
        };
        let gt = bx(0.25, 0.3, 0.55, 0.62);
        for trial in 0..5 {
            let params = LesionGrounderParams::init(vocab.len(), 4, 4, &cfg, &mut rng);
            let mut grid = FeatureGrid::zeros(2, 4);
            for v in &mut grid.data {
                *v = rng.normal_scaled(0.0, 1.0);
            }
            let (packed, shapes) = pack_tensors(&params.tensors());
            let flat = Tensor::randn(&[packed.numel()], 0.3, &mut rng);
            let gt = gt;
            let grid = grid.clone();
            let err = grad_check(&flat, move |g, v| {
                let slices = split_flat(g, v, &shapes);
                let vars = GrounderVars::from_slices(&slices, 2, 2);
                let out = forward_box_params(g, &vars, &grid, &[1, 3, 2]);
                box_loss_node(g, out, &gt)
            });
            assert!(err <= 1e-4, "trial {trial}: end-to-end grounder grad error {err}");
        }
    }
}
