//! Diagnosis grounding: a small trainable text encoder matches report
//! sentences to QA diagnoses. Training uses a multi-positive contrastive
//! objective imposed in both directions; evaluation ranks 16-candidate
//! pools by cosine similarity (Top-N) and a keyword baseline serves as the
//! non-learned reference.

use serde::{Deserialize, Serialize};

use crate::domain::{AnswerPayload, DiseaseRegistry, QaDiagnosis, QaType, Token};
use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, PairSet, Var};
use crate::numkit::layers::{encoder_stack_forward, EncoderLayerParams, EncoderLayerVars};
use crate::numkit::optim::AdamW;
use crate::numkit::tensor::Tensor;
use crate::numkit::Rng;
use crate::qachain::grammar::{qa_tokens, Vocab};

/// Matching thresholds: cosine cutoff for the matched set and the softmax
/// temperature of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub gamma: f64,
    pub tau: f64,
}

impl Default for MatcherConfig {
    fn default() -> MatcherConfig {
        MatcherConfig { gamma: 0.9, tau: 0.07 }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > -1.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (-1,1], got {}", self.gamma)));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Text encoder: token + position embeddings, two encoder layers, mean
/// pooling, L2 normalization.
#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayerParams>,
}

impl TextEncoderParams {
    pub fn init(vocab: usize, dim: usize, depth: usize, heads: usize, max_len: usize, rng: &mut Rng) -> TextEncoderParams {
        TextEncoderParams {
            token_embed: Tensor::randn(&[vocab, dim], 0.1, rng),
            pos_embed: Tensor::randn(&[max_len, dim], 0.02, rng),
            layers: (0..depth).map(|_| EncoderLayerParams::init(dim, 2 * dim, heads, rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.token_embed.shape[1]
    }

    pub fn max_len(&self) -> usize {
        self.pos_embed.shape[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.token_embed, &self.pos_embed];
        for l in &self.layers {
            t.extend(l.tensors());
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.token_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        let names = [
            "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain",
            "ln2_bias",
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in names.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out
    }
}

pub struct TextEncoderVars {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<EncoderLayerVars>,
}

impl TextEncoderVars {
    pub fn load(g: &mut Graph, p: &TextEncoderParams) -> TextEncoderVars {
        TextEncoderVars {
            token_embed: g.param(&p.token_embed),
            pos_embed: g.param(&p.pos_embed),
            layers: p.layers.iter().map(|l| EncoderLayerVars::load(g, l)).collect(),
        }
    }

    pub fn from_slices(vars: &[Var], depth: usize, heads: usize) -> TextEncoderVars {
        assert_eq!(vars.len(), 2 + 12 * depth);
        TextEncoderVars {
            token_embed: vars[0],
            pos_embed: vars[1],
            layers: (0..depth)
                .map(|i| EncoderLayerVars::from_slices(&vars[2 + 12 * i..2 + 12 * (i + 1)], heads))
                .collect(),
        }
    }

    pub fn var_list(&self) -> Vec<Var> {
        let mut v = vec![self.token_embed, self.pos_embed];
        for l in &self.layers {
            v.extend(l.var_list());
        }
        v
    }
}

/// Encode one token-id sequence to a unit row `[1, d]` on the tape.
pub fn encode_ids(g: &mut Graph, vars: &TextEncoderVars, ids: &[usize]) -> Var {
    assert!(!ids.is_empty(), "cannot encode an empty sequence");
    let emb = g.embedding(vars.token_embed, ids);
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embedding(vars.pos_embed, &pos_ids);
    let x = g.add(emb, pos);
    let h = encoder_stack_forward(g, x, &vars.layers, None);
    let pooled = g.mean_rows(h);
    g.l2_normalize_rows(pooled)
}

/// Encode tokens to a unit vector. Errors on unknown tokens.
pub fn encode_text(params: &TextEncoderParams, tokens: &[Token], vocab: &Vocab) -> Result<Vec<f64>> {
    let mut ids = vocab.encode(tokens)?;
    ids.truncate(params.max_len());
    let mut g = Graph::new();
    let vars = TextEncoderVars::load(&mut g, params);
    let v = encode_ids(&mut g, &vars, &ids);
    Ok(g.value(v).data.clone())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One contrastive batch: token-id sequences on both sides plus per-subject
/// positive/negative candidate indices for each direction. A subject with
/// an empty positive and empty negative set is skipped (untrained); an empty
/// positive set with negatives present is an error.
#[derive(Clone, Debug, Default)]
pub struct MatchBatch {
    pub diagnoses: Vec<Vec<usize>>,
    pub sentences: Vec<Vec<usize>>,
    pub d2s: Vec<PairSet>,
    pub s2d: Vec<PairSet>,
}

impl MatchBatch {
    pub fn validate(&self) -> Result<()> {
        if self.d2s.len() != self.diagnoses.len() || self.s2d.len() != self.sentences.len() {
            return Err(Error::LengthMismatch("one pair set per subject".into()));
        }
        let check = |sets: &[PairSet], limit: usize, side: &str| -> Result<()> {
            for (i, s) in sets.iter().enumerate() {
                if s.positives.is_empty() && !s.negatives.is_empty() {
                    return Err(Error::EmptyPositives(i));
                }
                for &k in s.positives.iter().chain(&s.negatives) {
                    if k >= limit {
                        return Err(Error::InvalidData(format!("{side} candidate {k} out of range")));
                    }
                }
                if s.positives.iter().any(|p| s.negatives.contains(p)) {
                    return Err(Error::InvalidData(format!(
                        "subject {i}: positive and negative sets overlap"
                    )));
                }
            }
            Ok(())
        };
        check(&self.d2s, self.sentences.len(), "sentence")?;
        check(&self.s2d, self.diagnoses.len(), "diagnosis")?;
        if self.d2s.iter().all(|s| s.positives.is_empty())
            && self.s2d.iter().all(|s| s.positives.is_empty())
        {
            return Err(Error::InvalidData("batch has no trained subjects".into()));
        }
        Ok(())
    }
}

/// Multi-positive contrastive loss on the tape. Cosine similarities are
/// scaled by `1/tau`; each direction averages, over its subjects with
/// non-empty positives, the mean log-ratio over that subject's positives;
/// the two directions are averaged and negated for minimization.
pub fn mp_nce_loss_node(
    g: &mut Graph,
    vars: &TextEncoderVars,
    batch: &MatchBatch,
    tau: f64,
) -> Var {
    let d_rows: Vec<Var> = batch.diagnoses.iter().map(|ids| encode_ids(g, vars, ids)).collect();
    let s_rows: Vec<Var> = batch.sentences.iter().map(|ids| encode_ids(g, vars, ids)).collect();
    let d = g.concat_rows(&d_rows);
    let s = g.concat_rows(&s_rows);
    let sims = g.matmul_nt(d, s);
    let logits = g.scale(sims, 1.0 / tau);
    let trained_d = batch.d2s.iter().any(|p| !p.positives.is_empty());
    let trained_s = batch.s2d.iter().any(|p| !p.positives.is_empty());
    let mut terms = Vec::new();
    if trained_d {
        terms.push(g.subset_nce(logits, &batch.d2s));
    }
    if trained_s {
        let sims_t = g.matmul_nt(s, d);
        let logits_t = g.scale(sims_t, 1.0 / tau);
        terms.push(g.subset_nce(logits_t, &batch.s2d));
    }
    match terms.as_slice() {
        [one] => *one,
        [a, b] => {
            let sum = g.add(*a, *b);
            g.scale(sum, 0.5)
        }
        _ => unreachable!("validated batches train at least one direction"),
    }
}

/// Scalar multi-positive contrastive loss.
pub fn mp_nce_loss(batch: &MatchBatch, params: &TextEncoderParams, tau: f64) -> Result<f64> {
    batch.validate()?;
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let vars = TextEncoderVars::load(&mut g, params);
    let loss = mp_nce_loss_node(&mut g, &vars, batch, tau);
    Ok(g.scalar_value(loss))
}

/// Candidates whose cosine similarity with the sentence strictly exceeds
/// `gamma`, sorted by descending score (ties by candidate index).
pub fn match_diagnoses(
    sentence: &[Token],
    candidates: &[QaDiagnosis],
    params: &TextEncoderParams,
    vocab: &Vocab,
    cfg: &MatcherConfig,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    let query = encode_text(params, sentence, vocab)?;
    let mut scored = Vec::new();
    for (i, cand) in candidates.iter().enumerate() {
        let emb = encode_text(params, &qa_tokens(cand), vocab)?;
        let s = cosine(&query, &emb);
        if s > cfg.gamma {
            scored.push((i, s));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// One retrieval pool: candidate scores plus positive flags, aligned.
#[derive(Clone, Debug)]
pub struct RankedPool {
    pub scores: Vec<f64>,
    pub positives: Vec<bool>,
}

pub const POOL_SIZE: usize = 16;

/// Fraction of pools whose top-n by score contains a positive. Ties rank by
/// candidate index. Pool size must equal `expected_size` and every pool
/// needs at least one positive.
pub fn topn_accuracy(pools: &[RankedPool], n: usize, expected_size: usize) -> Result<f64> {
    if pools.is_empty() {
        return Err(Error::InvalidData("no pools to evaluate".into()));
    }
    let mut hits = 0usize;
    for pool in pools {
        if pool.scores.len() != expected_size || pool.positives.len() != expected_size {
            return Err(Error::PoolSize { expected: expected_size, got: pool.scores.len() });
        }
        if !pool.positives.iter().any(|p| *p) {
            return Err(Error::InvalidData("pool without a positive".into()));
        }
        let mut order: Vec<usize> = (0..expected_size).collect();
        order.sort_by(|&a, &b| {
            pool.scores[b].partial_cmp(&pool.scores[a]).unwrap().then(a.cmp(&b))
        });
        if order.iter().take(n).any(|&i| pool.positives[i]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pools.len() as f64)
}

/// Keyword vector: one indicator per registry disease name found in the
/// token sequence. The paper-style non-learned baseline.
pub fn keyword_vector(tokens: &[Token], registry: &DiseaseRegistry) -> Vec<f64> {
    registry
        .names
        .iter()
        .map(|d| if tokens.iter().any(|t| t == d) { 1.0 } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// Pairing and training
// ---------------------------------------------------------------------------

/// Pairing key: a QA about a disease either asserts it (presence yes,
/// location, severity, causal) or denies it (presence no).
pub fn diagnosis_key(d: &QaDiagnosis) -> (String, bool) {
    let positive = !matches!(d.payload, AnswerPayload::Presence { present: false });
    (d.disease.clone(), positive)
}

/// Keys a report sentence carries: positive findings name their diseases,
/// negations deny theirs. Grammar-paired diagnoses share a key.
pub fn sentence_keys(tokens: &[Token], registry: &DiseaseRegistry) -> Vec<(String, bool)> {
    let parsed = crate::qachain::grammar::parse_report(
        &[tokens, &[".".to_string()]].concat(),
        registry,
    );
    let mut keys = Vec::new();
    for f in parsed.findings {
        keys.push((f.disease, true));
    }
    for n in parsed.negations {
        keys.push((n, false));
    }
    keys
}

/// Sentence units of one study (token ids plus pairing keys).
#[derive(Clone, Debug)]
pub struct StudyText {
    pub sentences: Vec<(Vec<usize>, Vec<(String, bool)>)>,
    pub diagnoses: Vec<(Vec<usize>, (String, bool))>,
}

/// Split a report into sentence token runs (periods kept with sentences).
pub fn split_sentences(tokens: &[Token]) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        cur.push(t.clone());
        if t == "." {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn study_text(
    report: &[Token],
    chain: &[QaDiagnosis],
    vocab: &Vocab,
    registry: &DiseaseRegistry,
    max_len: usize,
) -> Result<StudyText> {
    let mut sentences = Vec::new();
    for s in split_sentences(report) {
        let keys = sentence_keys(&s, registry);
        let mut ids = vocab.encode(&s)?;
        ids.truncate(max_len);
        sentences.push((ids, keys));
    }
    let mut diagnoses = Vec::new();
    for d in chain {
        let mut ids = vocab.encode(&qa_tokens(d))?;
        ids.truncate(max_len);
        diagnoses.push((ids, diagnosis_key(d)));
    }
    Ok(StudyText { sentences, diagnoses })
}

/// Merge the texts of several studies into one contrastive batch:
/// positives are grammar-paired (shared key, same study), negatives are
/// every other candidate in the batch.
pub fn build_batch(studies: &[&StudyText]) -> MatchBatch {
    let mut batch = MatchBatch::default();
    let mut sentence_meta: Vec<(usize, Vec<(String, bool)>)> = Vec::new();
    let mut diagnosis_meta: Vec<(usize, (String, bool))> = Vec::new();
    for (si, st) in studies.iter().enumerate() {
        for (ids, keys) in &st.sentences {
            batch.sentences.push(ids.clone());
            sentence_meta.push((si, keys.clone()));
        }
        for (ids, key) in &st.diagnoses {
            batch.diagnoses.push(ids.clone());
            diagnosis_meta.push((si, key.clone()));
        }
    }
    for (_di, (dsi, dkey)) in diagnosis_meta.iter().enumerate() {
        let mut set = PairSet::default();
        for (sj, (ssi, skeys)) in sentence_meta.iter().enumerate() {
            if ssi == dsi && skeys.contains(dkey) {
                set.positives.push(sj);
            } else {
                set.negatives.push(sj);
            }
        }
        if set.positives.is_empty() {
            set.negatives.clear(); // untrained subject
        }
        batch.d2s.push(set);
    }
    for (_si, (ssi, skeys)) in sentence_meta.iter().enumerate() {
        let mut set = PairSet::default();
        for (dj, (dsi, dkey)) in diagnosis_meta.iter().enumerate() {
            if dsi == ssi && skeys.contains(dkey) {
                set.positives.push(dj);
            } else {
                set.negatives.push(dj);
            }
        }
        if set.positives.is_empty() {
            set.negatives.clear();
        }
        batch.s2d.push(set);
    }
    batch
}

#[derive(Clone, Debug)]
pub struct MatcherTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub studies_per_batch: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for MatcherTrainConfig {
    fn default() -> MatcherTrainConfig {
        MatcherTrainConfig {
            epochs: 12,
            lr: 3e-3,
            weight_decay: 0.01,
            studies_per_batch: 6,
            tau: 0.07,
            seed: 0,
        }
    }
}

/// Train the text encoder with the bidirectional contrastive objective.
pub fn train_matcher(
    params: &mut TextEncoderParams,
    texts: &[StudyText],
    cfg: &MatcherTrainConfig,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidData("no matcher training studies".into()));
    }
    let mut opt = AdamW::new(cfg.lr)?.with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let mut rng = Rng::seed_from_u64(cfg.seed).fork("matcher-shuffle");
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.studies_per_batch) {
            let group: Vec<&StudyText> = chunk.iter().map(|&i| &texts[i]).collect();
            let batch = build_batch(&group);
            if batch.validate().is_err() {
                continue; // e.g. a chunk with no pairable content
            }
            let mut g = Graph::new();
            let vars = TextEncoderVars::load(&mut g, params);
            let loss = mp_nce_loss_node(&mut g, &vars, &batch, cfg.tau);
            last = g.scalar_value(loss);
            let grads = g.backward(loss);
            let step: Vec<Tensor> = vars
                .var_list()
                .iter()
                .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&g.value(*v).shape)))
                .collect();
            let mut tensors = params.tensors_mut();
            let refs: Vec<&Tensor> = step.iter().collect();
            opt.step(&mut tensors, &refs);
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::graph::{grad_check, pack_tensors, split_flat};

    fn tiny_encoder(vocab: usize, rng: &mut Rng) -> TextEncoderParams {
        TextEncoderParams::init(vocab, 8, 2, 2, 16, rng)
    }

    #[test]
    fn encoded_vectors_are_unit_norm() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(61);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let v = encode_text(&params, &["no".into(), "pneumonia".into(), ".".into()], &vocab).unwrap();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sequences_have_cosine_one() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(62);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let t: Vec<Token> = vec!["is".into(), "there".into(), "pneumonia".into(), "?".into()];
        let a = encode_text(&params, &t, &vocab).unwrap();
        let b = encode_text(&params, &t, &vocab).unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        // unrelated sequences at random init are not perfectly aligned
        let c = encode_text(&params, &["no".into(), "pleural_effusion".into(), ".".into()], &vocab).unwrap();
        assert!(cosine(&a, &c).abs() < 1.0);
    }

    #[test]
    fn unknown_token_is_named_in_error() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(63);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let err = encode_text(&params, &["covid".into()], &vocab).unwrap_err();
        assert!(err.to_string().contains("covid"), "{err}");
    }

    /// Batch with one diagnosis subject and one sentence subject, each with
    /// one positive and one negative candidate. The two candidates on each
    /// side are identical token sequences, so their similarities are equal
    /// bit-for-bit and the loss is exactly ln 2.
    fn ln2_batch(vocab: &Vocab) -> MatchBatch {
        let s: Vec<usize> = vocab.encode(&["no".into(), "pneumonia".into(), ".".into()]).unwrap();
        let d: Vec<usize> =
            vocab.encode(&["is".into(), "there".into(), "pneumonia".into(), "?".into()]).unwrap();
        MatchBatch {
            diagnoses: vec![d.clone(), d],
            sentences: vec![s.clone(), s],
            d2s: vec![
                PairSet { positives: vec![0], negatives: vec![1] },
                PairSet::default(),
            ],
            s2d: vec![
                PairSet { positives: vec![0], negatives: vec![1] },
                PairSet::default(),
            ],
        }
    }

    #[test]
    fn equal_similarity_one_positive_one_negative_gives_ln2() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(64);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let loss = mp_nce_loss(&ln2_batch(&vocab), &params, 0.07).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn empty_negative_sets_give_zero_loss() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(65);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let mut batch = ln2_batch(&vocab);
        batch.d2s[0].negatives.clear();
        batch.s2d[0].negatives.clear();
        let loss = mp_nce_loss(&batch, &params, 0.07).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn saturated_separation_gives_negligible_loss() {
        // Synthetic logits path: positive cosine 1, negative cosine -1,
        // tau=0.07 -> per-direction term about exp(-2/0.07), far below 1e-9.
        // Exercised through the raw subset objective on a fixed matrix.
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![1.0 / 0.07, -1.0 / 0.07]));
        let sets = vec![PairSet { positives: vec![0], negatives: vec![1] }];
        let loss = g.subset_nce(logits, &sets);
        assert!(g.scalar_value(loss) < 1e-9);
    }

    #[test]
    fn loss_is_invariant_to_negative_ordering() {
        let registry = DiseaseRegistry::small(3);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(66);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let sentences: Vec<Vec<usize>> = [
            vec!["no".to_string(), "pneumonia".to_string(), ".".to_string()],
            vec!["no".to_string(), "pleural_effusion".to_string(), ".".to_string()],
            vec!["no".to_string(), "atelectasis".to_string(), ".".to_string()],
        ]
        .iter()
        .map(|t| vocab.encode(t).unwrap())
        .collect();
        let d = vocab.encode(&["is".into(), "there".into(), "pneumonia".into(), "?".into()]).unwrap();
        let base = MatchBatch {
            diagnoses: vec![d.clone()],
            sentences: sentences.clone(),
            d2s: vec![PairSet { positives: vec![0], negatives: vec![1, 2] }],
            s2d: vec![
                PairSet { positives: vec![0], negatives: vec![] },
                PairSet::default(),
                PairSet::default(),
            ],
        };
        let mut permuted = base.clone();
        permuted.d2s[0].negatives = vec![2, 1];
        let a = mp_nce_loss(&base, &params, 0.07).unwrap();
        let b = mp_nce_loss(&permuted, &params, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn overlapping_pair_sets_are_rejected() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut batch = ln2_batch(&vocab);
        batch.d2s[0].negatives = vec![0];
        assert!(batch.validate().is_err());
        let mut batch2 = ln2_batch(&vocab);
        batch2.d2s[1] = PairSet { positives: vec![], negatives: vec![0] };
        assert!(matches!(batch2.validate(), Err(Error::EmptyPositives(1))));
    }

    #[test]
    fn mp_nce_grad_check() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(67);
        let s1 = vocab.encode(&["no".into(), "pneumonia".into(), ".".into()]).unwrap();
        let s2 = vocab
            .encode(&["mild".into(), "pneumonia".into(), "in".into(), "the".into(), "apex".into(), "right".into(), "lung".into()])
            .unwrap();
        let d1 = vocab.encode(&["is".into(), "there".into(), "pneumonia".into(), "?".into()]).unwrap();
        let d2 = vocab.encode(&["how".into(), "severe".into(), "is".into(), "pneumonia".into(), "?".into()]).unwrap();
        let batch = MatchBatch {
            diagnoses: vec![d1, d2],
            sentences: vec![s1, s2],
            d2s: vec![
                PairSet { positives: vec![1], negatives: vec![0] },
                PairSet { positives: vec![0, 1], negatives: vec![] },
            ],
            s2d: vec![
                PairSet { positives: vec![0], negatives: vec![1] },
                PairSet { positives: vec![1], negatives: vec![0] },
            ],
        };
        for trial in 0..5 {
            let params = tiny_encoder(vocab.len(), &mut rng);
            let (packed, shapes) = pack_tensors(&params.tensors());
            let flat = Tensor::randn(&[packed.numel()], 0.3, &mut rng);
            let batch = batch.clone();
            let err = grad_check(&flat, move |g, v| {
                let slices = split_flat(g, v, &shapes);
                let vars = TextEncoderVars::from_slices(&slices, 2, 2);
                mp_nce_loss_node(g, &vars, &batch, 0.07)
            });
            assert!(err <= 1e-4, "trial {trial}: mp-nce grad error {err}");
        }
    }

    #[test]
    fn gamma_boundaries_control_match_set() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(68);
        let params = tiny_encoder(vocab.len(), &mut rng);
        let payload = AnswerPayload::Presence { present: true };
        let cand = QaDiagnosis {
            qtype: QaType::Presence,
            disease: "pneumonia".into(),
            question: crate::qachain::grammar::question_tokens(QaType::Presence, "pneumonia"),
            answer: crate::qachain::grammar::answer_tokens(&payload),
            payload,
        };
        let sentence: Vec<Token> = vec!["no".into(), "pneumonia".into(), ".".into()];
        let all = match_diagnoses(
            &sentence,
            &[cand.clone(), cand.clone()],
            &params,
            &vocab,
            &MatcherConfig { gamma: -1.0 + 1e-12, tau: 0.07 },
        )
        .unwrap();
        assert_eq!(all.len(), 2);
        // gamma = 1.0 is exclusive: cosine can never strictly exceed it
        let none = match_diagnoses(
            &sentence,
            &[cand.clone()],
            &params,
            &vocab,
            &MatcherConfig { gamma: 1.0, tau: 0.07 },
        )
        .unwrap();
        assert!(none.is_empty());
        // duplicating a non-matching candidate cannot change the result set size
        let dup = match_diagnoses(
            &sentence,
            &[cand.clone(), cand.clone(), cand],
            &params,
            &vocab,
            &MatcherConfig { gamma: 1.0, tau: 0.07 },
        )
        .unwrap();
        assert!(dup.is_empty());
    }

    #[test]
    fn topn_oracle_and_size_checks() {
        // oracle similarities: positive 1, others 0
        let mut pools = Vec::new();
        for i in 0..10 {
            let mut scores = vec![0.0; POOL_SIZE];
            let mut positives = vec![false; POOL_SIZE];
            scores[i % POOL_SIZE] = 1.0;
            positives[i % POOL_SIZE] = true;
            pools.push(RankedPool { scores, positives });
        }
        for n in 1..=3 {
            assert_eq!(topn_accuracy(&pools, n, POOL_SIZE).unwrap(), 1.0);
        }
        let bad = vec![RankedPool { scores: vec![0.0; 7], positives: vec![true; 7] }];
        assert!(matches!(topn_accuracy(&bad, 1, POOL_SIZE), Err(Error::PoolSize { .. })));
    }

    #[test]
    fn random_unit_embeddings_hit_one_sixteenth_top1() {
        let mut rng = Rng::seed_from_u64(69);
        let dim = 16;
        let mut pools = Vec::new();
        for _ in 0..2000 {
            let q = Tensor::randn(&[dim], 1.0, &mut rng);
            let mut scores = Vec::with_capacity(POOL_SIZE);
            for _ in 0..POOL_SIZE {
                let c = Tensor::randn(&[dim], 1.0, &mut rng);
                scores.push(cosine(&q.data, &c.data));
            }
            let mut positives = vec![false; POOL_SIZE];
            positives[rng.below(POOL_SIZE)] = true;
            pools.push(RankedPool { scores, positives });
        }
        let acc = topn_accuracy(&pools, 1, POOL_SIZE).unwrap();
        assert!((acc - 0.0625).abs() < 0.02, "random baseline top-1 {acc}");
    }

    #[test]
    fn temperature_scaling_preserves_argmax() {
        let mut rng = Rng::seed_from_u64(70);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let argmax = |v: &[f64]| {
                let mut b = 0;
                for i in 0..v.len() {
                    if v[i] > v[b] {
                        b = i;
                    }
                }
                b
            };
            let base = argmax(&scores);
            for tau in [0.01, 0.07, 0.5, 2.0] {
                let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
                assert_eq!(argmax(&scaled), base);
            }
        }
    }
}
