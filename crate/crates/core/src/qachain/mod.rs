//! The diagnostic chain: QA generation via self-talk decoding, QA-prompted
//! report decoding, and decoder training over the synthetic grammar.

pub mod decoder;
pub mod grammar;

pub use decoder::{lm_loss, DecoderParams, DecoderState, DecoderVars, Segment, SequenceExample};
pub use grammar::{
    chain_tokens, parse_chain_tokens, parse_report, qa_tokens, render_qa_chain, render_report,
    Vocab,
};

use crate::domain::{DiseaseRegistry, Provenance, QaDiagnosis, QaType, Report, Study, Token};
use crate::error::{Error, Result};
use crate::numkit::graph::Graph;
use crate::numkit::optim::AdamW;
use crate::numkit::tensor::Tensor;
use crate::numkit::{FeatureGrid, Rng};

/// One scheduled question for decoding without self-questioning.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleItem {
    /// Ask exactly this question.
    Ask { qtype: QaType, disease: String },
    /// Presence screen: on a decoded "yes", also ask location, severity,
    /// and the causal question when the registry maps one.
    Screen { disease: String },
}

/// Decoding-time configuration of the diagnostic dialog.
#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub self_questioning: bool,
    pub qa_context: bool,
    /// Greedy decoding is the only implemented strategy; kept as an explicit
    /// switch so configs are self-describing.
    pub greedy: bool,
    pub schedule: Vec<ScheduleItem>,
    pub max_qa: usize,
}

impl ChainConfig {
    pub fn self_talk() -> ChainConfig {
        ChainConfig {
            self_questioning: true,
            qa_context: true,
            greedy: true,
            schedule: Vec::new(),
            max_qa: 24,
        }
    }

    pub fn scheduled(schedule: Vec<ScheduleItem>) -> ChainConfig {
        ChainConfig {
            self_questioning: false,
            qa_context: true,
            greedy: true,
            schedule,
            max_qa: 24,
        }
    }

    /// Screening protocol over the given diseases.
    pub fn screen_schedule(diseases: &[String]) -> Vec<ScheduleItem> {
        diseases.iter().map(|d| ScheduleItem::Screen { disease: d.clone() }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.self_questioning && self.schedule.is_empty() {
            return Err(Error::InvalidConfig(
                "a question schedule is required when self-questioning is off".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of chain generation: parsed diagnoses plus the number of spans
/// dropped as unparseable or duplicated.
#[derive(Clone, Debug, Default)]
pub struct GeneratedChain {
    pub items: Vec<QaDiagnosis>,
    pub dropped: usize,
}

fn block_tokens(kept: &[QaDiagnosis]) -> Vec<Token> {
    let mut t: Vec<Token> = vec![grammar::BOC.into()];
    t.extend(chain_tokens(kept));
    t
}

/// Decode the answer span for a fixed question; `None` when unparseable.
fn decode_answer(
    params: &DecoderParams,
    grid: &FeatureGrid,
    vocab: &Vocab,
    registry: &DiseaseRegistry,
    context: &[QaDiagnosis],
    with_context: bool,
    qtype: QaType,
    disease: &str,
) -> Result<Option<QaDiagnosis>> {
    let mut prefix: Vec<Token> =
        if with_context { block_tokens(context) } else { vec![grammar::BOC.into()] };
    prefix.push(grammar::Q_MARK.into());
    let question = grammar::question_tokens(qtype, disease);
    prefix.extend(question.iter().cloned());
    prefix.push(grammar::A_MARK.into());
    let ids = vocab.encode(&prefix)?;
    let segs = vec![Segment::Chain; ids.len()];
    let mut state = DecoderState::prefill(params, Some(grid), &ids, &segs);
    let stop = vocab.id(grammar::SEP)?;
    let answer_ids = decoder::greedy_decode(&mut state, Segment::Chain, stop, 8);
    let answer = vocab.decode(&answer_ids);
    Ok(grammar::parse_answer(qtype, &answer, registry).map(|payload| QaDiagnosis {
        qtype,
        disease: disease.to_string(),
        question,
        answer,
        payload,
    }))
}

/// Autoregressive QA-chain generation.
///
/// With self-questioning the model emits question tokens itself; otherwise
/// the schedule drives the questions. With QA-context previously decoded
/// pairs stay visible in the prefix; otherwise each answer is decoded from
/// the image (and current question) alone.
pub fn generate_qa_chain(
    grid: &FeatureGrid,
    params: &DecoderParams,
    cfg: &ChainConfig,
    vocab: &Vocab,
    registry: &DiseaseRegistry,
) -> Result<GeneratedChain> {
    cfg.validate()?;
    if !params.is_trained() {
        return Err(Error::Untrained("chain decoder output projection is all zeros".into()));
    }
    let mut out = GeneratedChain::default();
    let mut seen: Vec<(QaType, String)> = Vec::new();

    if cfg.self_questioning && cfg.qa_context {
        // One continuous self-talk decode.
        let prefix = vocab.encode(&[grammar::BOC.into()])?;
        let segs = vec![Segment::Chain; 1];
        let mut state = DecoderState::prefill(params, Some(grid), &prefix, &segs);
        let stop = vocab.id(grammar::EOC)?;
        let generated =
            decoder::greedy_decode(&mut state, Segment::Chain, stop, params.max_chain_tokens);
        let tokens = vocab.decode(&generated);
        let (items, dropped) = parse_chain_tokens(&tokens, registry);
        out.dropped += dropped;
        for item in items {
            let key = (item.qtype, item.disease.clone());
            if seen.contains(&key) {
                out.dropped += 1;
            } else {
                seen.push(key);
                out.items.push(item);
            }
        }
        return Ok(out);
    }

    if cfg.self_questioning {
        // Questions are proposed in sequence (the running chain stays
        // visible so the dialog can move on), but each answer is decoded
        // without the previous pairs.
        let a_mark = vocab.id(grammar::A_MARK)?;
        let eoc = vocab.id(grammar::EOC)?;
        for _ in 0..cfg.max_qa {
            let prefix_tokens = block_tokens(&out.items);
            let ids = vocab.encode(&prefix_tokens)?;
            let segs = vec![Segment::Chain; ids.len()];
            let mut state = DecoderState::prefill(params, Some(grid), &ids, &segs);
            let mut q_ids = Vec::new();
            let mut chain_done = false;
            for _ in 0..16 {
                let next = state.argmax_next();
                if next == eoc {
                    chain_done = true;
                    break;
                }
                if next == a_mark {
                    break;
                }
                state.push_token(next, Segment::Chain);
                q_ids.push(next);
            }
            if chain_done {
                break;
            }
            let q_tokens = vocab.decode(&q_ids);
            let span: Vec<Token> =
                q_tokens.iter().filter(|t| *t != grammar::Q_MARK).cloned().collect();
            let Some((qtype, disease)) = grammar::parse_question(&span, registry) else {
                out.dropped += 1;
                break;
            };
            if seen.contains(&(qtype, disease.clone())) {
                // the dialog is repeating itself; stop
                out.dropped += 1;
                break;
            }
            match decode_answer(params, grid, vocab, registry, &[], false, qtype, &disease)? {
                Some(item) => {
                    seen.push((item.qtype, item.disease.clone()));
                    out.items.push(item);
                }
                None => out.dropped += 1,
            }
        }
        return Ok(out);
    }

    // Scheduled questions (depth-first screening).
    let mut screens: Vec<String> = Vec::new();
    let mut queue: Vec<(QaType, String)> = Vec::new();
    for item in &cfg.schedule {
        match item {
            ScheduleItem::Ask { qtype, disease } => queue.push((*qtype, disease.clone())),
            ScheduleItem::Screen { disease } => {
                queue.push((QaType::Presence, disease.clone()));
                screens.push(disease.clone());
            }
        }
    }
    let mut asked = 0;
    let mut i = 0;
    while i < queue.len() && asked < cfg.max_qa {
        let (qtype, disease) = queue[i].clone();
        i += 1;
        asked += 1;
        let decoded = decode_answer(
            params,
            grid,
            vocab,
            registry,
            &out.items,
            cfg.qa_context,
            qtype,
            &disease,
        )?;
        match decoded {
            Some(item) => {
                let positive_screen = qtype == QaType::Presence
                    && screens.contains(&disease)
                    && matches!(
                        item.payload,
                        crate::domain::AnswerPayload::Presence { present: true }
                    );
                let key = (item.qtype, item.disease.clone());
                if seen.contains(&key) {
                    out.dropped += 1;
                } else {
                    seen.push(key);
                    out.items.push(item);
                }
                if positive_screen {
                    let mut follow = vec![
                        (QaType::Location, disease.clone()),
                        (QaType::Severity, disease.clone()),
                    ];
                    if registry.causal_map.contains_key(&disease) {
                        follow.push((QaType::Causal, disease.clone()));
                    }
                    for (j, f) in follow.into_iter().enumerate() {
                        queue.insert(i + j, f);
                    }
                }
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

/// Greedy report decoding. With `use_prompt` the serialized chain (possibly
/// empty) sits in the visible prefix; without it the prefix is the image
/// alone. Always terminates at `max_report_tokens`.
pub fn decode_report(
    grid: &FeatureGrid,
    qa_chain: &[QaDiagnosis],
    params: &DecoderParams,
    vocab: &Vocab,
    use_prompt: bool,
) -> Result<Vec<Token>> {
    let mut prefix_tokens: Vec<Token> = Vec::new();
    let mut segs = Vec::new();
    if use_prompt {
        prefix_tokens.push(grammar::BOC.into());
        prefix_tokens.extend(chain_tokens(qa_chain));
        prefix_tokens.push(grammar::EOC.into());
        segs.extend(vec![Segment::Chain; prefix_tokens.len()]);
    }
    prefix_tokens.push(grammar::BOR.into());
    segs.push(Segment::Report);
    let ids = vocab.encode(&prefix_tokens)?;
    let mut state = DecoderState::prefill(params, Some(grid), &ids, &segs);
    let stop = vocab.id(grammar::EOR)?;
    let out = decoder::greedy_decode(&mut state, Segment::Report, stop, params.max_report_tokens);
    Ok(vocab.decode(&out))
}

/// Fill a missing report with a pseudo one decoded under QA guidance. A
/// study that already carries a report is returned unchanged; a study with
/// no chain gets one generated first.
pub fn estimate_pseudo_report(
    study: &Study,
    params: &DecoderParams,
    vocab: &Vocab,
    registry: &DiseaseRegistry,
    chain_cfg: &ChainConfig,
) -> Result<Study> {
    if study.report.is_some() {
        return Ok(study.clone());
    }
    let mut out = study.clone();
    let chain: Vec<QaDiagnosis> = match &out.qa_chain {
        Some(c) => c.items.clone(),
        None => {
            let generated = generate_qa_chain(&out.grid, params, chain_cfg, vocab, registry)?;
            out.qa_chain = Some(crate::domain::QaChain {
                provenance: Provenance::Pseudo,
                items: generated.items.clone(),
            });
            generated.items
        }
    };
    let tokens = decode_report(&out.grid, &chain, params, vocab, true)?;
    out.report = Some(Report { provenance: Provenance::Pseudo, tokens });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// How the decoder is trained; mirrors the decode-time chain configuration
/// so train and test procedures match.
#[derive(Clone, Debug)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Train report decoding with the chain in the prefix.
    pub prompt_reports: bool,
    /// Fraction of prompted report examples trained with the prompt removed,
    /// so decoding tolerates incomplete chains.
    pub prompt_dropout: f64,
    pub train_chain: bool,
    pub self_questioning: bool,
    pub qa_context: bool,
}

impl Default for DecoderTrainConfig {
    fn default() -> DecoderTrainConfig {
        DecoderTrainConfig {
            epochs: 4,
            lr: 3e-3,
            weight_decay: 0.01,
            batch: 8,
            seed: 0,
            prompt_reports: true,
            prompt_dropout: 0.1,
            train_chain: true,
            self_questioning: true,
            qa_context: true,
        }
    }
}

/// One training record: a grid plus whatever text the study carries.
#[derive(Clone, Debug)]
pub struct DecoderSample {
    pub grid: FeatureGrid,
    pub report: Option<Vec<Token>>,
    pub chain: Option<Vec<QaDiagnosis>>,
}

impl DecoderSample {
    pub fn from_study(study: &Study) -> DecoderSample {
        DecoderSample {
            grid: study.grid.clone(),
            report: study.report.as_ref().map(|r| r.tokens.clone()),
            chain: study.qa_chain.as_ref().map(|c| c.items.clone()),
        }
    }
}

fn report_example(
    vocab: &Vocab,
    chain: Option<&[QaDiagnosis]>,
    report: &[Token],
) -> Result<(SequenceExample, usize)> {
    let mut tokens: Vec<Token> = Vec::new();
    let mut segs = Vec::new();
    if let Some(chain) = chain {
        tokens.push(grammar::BOC.into());
        tokens.extend(chain_tokens(chain));
        tokens.push(grammar::EOC.into());
        segs.extend(vec![Segment::Chain; tokens.len()]);
    }
    tokens.push(grammar::BOR.into());
    segs.push(Segment::Report);
    let target_start = tokens.len();
    tokens.extend(report.iter().cloned());
    tokens.push(grammar::EOR.into());
    segs.extend(vec![Segment::Report; tokens.len() - target_start]);
    let ids = vocab.encode(&tokens)?;
    let n = ids.len();
    Ok((
        SequenceExample { tokens: ids, segs, visible_prefix: 0, target_span: (target_start, n) },
        target_start,
    ))
}

/// Chain examples for one sample under the given config, with token-relative
/// prefix lengths (the caller adds grid rows).
fn chain_examples(
    vocab: &Vocab,
    cfg: &DecoderTrainConfig,
    chain: &[QaDiagnosis],
) -> Result<Vec<(SequenceExample, usize)>> {
    let mut out = Vec::new();
    if cfg.self_questioning && cfg.qa_context {
        let mut tokens: Vec<Token> = vec![grammar::BOC.into()];
        tokens.extend(chain_tokens(chain));
        tokens.push(grammar::EOC.into());
        let n = tokens.len();
        let ids = vocab.encode(&tokens)?;
        out.push((
            SequenceExample {
                tokens: ids,
                segs: vec![Segment::Chain; n],
                visible_prefix: 0,
                target_span: (1, n),
            },
            1,
        ));
        return Ok(out);
    }
    for (i, qa) in chain.iter().enumerate() {
        // answer example: [BOC] [prev blocks]? <q> q <a> | answer <sep>
        let mut tokens: Vec<Token> = vec![grammar::BOC.into()];
        if cfg.qa_context {
            tokens.extend(chain_tokens(&chain[..i]));
        }
        tokens.push(grammar::Q_MARK.into());
        tokens.extend(qa.question.iter().cloned());
        tokens.push(grammar::A_MARK.into());
        let prefix = tokens.len();
        tokens.extend(qa.answer.iter().cloned());
        tokens.push(grammar::SEP.into());
        let n = tokens.len();
        let ids = vocab.encode(&tokens)?;
        out.push((
            SequenceExample {
                tokens: ids,
                segs: vec![Segment::Chain; n],
                visible_prefix: 0,
                target_span: (prefix, n),
            },
            prefix,
        ));
        if cfg.self_questioning {
            // question example: [BOC] [prev blocks] | <q> q <a>
            let mut tokens: Vec<Token> = vec![grammar::BOC.into()];
            tokens.extend(chain_tokens(&chain[..i]));
            let prefix = tokens.len();
            tokens.push(grammar::Q_MARK.into());
            tokens.extend(qa.question.iter().cloned());
            tokens.push(grammar::A_MARK.into());
            let n = tokens.len();
            let ids = vocab.encode(&tokens)?;
            out.push((
                SequenceExample {
                    tokens: ids,
                    segs: vec![Segment::Chain; n],
                    visible_prefix: 0,
                    target_span: (prefix, n),
                },
                prefix,
            ));
        }
    }
    if cfg.self_questioning {
        // end-of-chain example: [BOC] [all blocks] | <eoc>
        let mut tokens: Vec<Token> = vec![grammar::BOC.into()];
        tokens.extend(chain_tokens(chain));
        let prefix = tokens.len();
        tokens.push(grammar::EOC.into());
        let ids = vocab.encode(&tokens)?;
        out.push((
            SequenceExample {
                tokens: ids,
                segs: vec![Segment::Chain; prefix + 1],
                visible_prefix: 0,
                target_span: (prefix, prefix + 1),
            },
            prefix,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub steps: usize,
    pub final_loss: f64,
}

/// Train the decoder on the given samples with AdamW and gradient
/// accumulation. Deterministic for a fixed config.
pub fn train_decoder(
    params: &mut DecoderParams,
    samples: &[DecoderSample],
    vocab: &Vocab,
    cfg: &DecoderTrainConfig,
) -> Result<TrainStats> {
    let mut examples: Vec<(usize, SequenceExample)> = Vec::new();
    let mut dropout_rng = Rng::seed_from_u64(cfg.seed).fork("prompt-dropout");
    for (gi, s) in samples.iter().enumerate() {
        let img_rows = s.grid.patches();
        if let Some(report) = &s.report {
            let prompted = cfg.prompt_reports && !dropout_rng.bernoulli(cfg.prompt_dropout);
            let chain = if prompted { s.chain.as_deref() } else { None };
            let (mut ex, token_prefix) = report_example(vocab, chain, report)?;
            ex.visible_prefix = img_rows + token_prefix;
            examples.push((gi, ex));
        }
        if cfg.train_chain {
            if let Some(chain) = &s.chain {
                if !chain.is_empty() {
                    for (mut ex, token_prefix) in chain_examples(vocab, cfg, chain)? {
                        ex.visible_prefix = img_rows + token_prefix;
                        examples.push((gi, ex));
                    }
                }
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidData("no trainable examples".into()));
    }
    let needed = examples
        .iter()
        .map(|(gi, ex)| samples[*gi].grid.patches() + ex.tokens.len())
        .max()
        .unwrap();
    if needed > params.max_seq() {
        return Err(Error::InvalidData(format!(
            "sequence of {needed} positions exceeds positional table {}",
            params.max_seq()
        )));
    }

    let mut opt = AdamW::new(cfg.lr)?.with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = Rng::seed_from_u64(cfg.seed).fork("shuffle");
    let mut stats = TrainStats::default();
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0;
            for &idx in chunk {
                let (gi, ex) = &examples[idx];
                let mut g = Graph::new();
                let vars = DecoderVars::load(&mut g, params);
                let loss = decoder::sequence_loss(&mut g, &vars, Some(&samples[*gi].grid), ex);
                loss_sum += g.scalar_value(loss);
                let grads = g.backward(loss);
                let step_grads: Vec<Tensor> = vars
                    .var_list()
                    .iter()
                    .map(|v| {
                        grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&g.value(*v).shape))
                    })
                    .collect();
                match &mut acc {
                    None => acc = Some(step_grads),
                    Some(a) => {
                        for (t, s) in a.iter_mut().zip(&step_grads) {
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
            let grad_refs: Vec<&Tensor> = acc.iter().collect();
            opt.step(&mut tensors, &grad_refs);
            stats.steps += 1;
            stats.final_loss = loss_sum * scale;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AnnotationSet, HLoc, Severity, Slot, VLoc};

    fn toy_grid(seed: u64) -> FeatureGrid {
        let mut rng = Rng::seed_from_u64(seed);
        let mut g = FeatureGrid::zeros(2, 4);
        for v in &mut g.data {
            *v = rng.normal_scaled(0.0, 0.5);
        }
        g
    }

    fn truth_with(
        registry: &DiseaseRegistry,
        disease: &str,
        severity: Severity,
    ) -> AnnotationSet {
        let mut truth = AnnotationSet::absent(registry);
        for e in &mut truth.diseases {
            e.presence = Slot::ground_truth(false);
        }
        let e = truth.get_mut(disease).unwrap();
        e.presence = Slot::ground_truth(true);
        e.severity = Slot::ground_truth(severity);
        e.hloc = Slot::ground_truth(HLoc::RightOnly);
        e.vlocs = Slot::ground_truth([VLoc::Lower].into_iter().collect());
        truth
    }

    #[test]
    fn untrained_decoder_refuses_to_generate() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(41);
        let params = DecoderParams::init(vocab.len(), 4, 8, 2, 2, 128, 48, 24, &mut rng);
        let err = generate_qa_chain(
            &toy_grid(1),
            &params,
            &ChainConfig::self_talk(),
            &vocab,
            &registry,
        );
        assert!(matches!(err, Err(Error::Untrained(_))));
    }

    #[test]
    fn scheduled_config_requires_schedule() {
        let cfg = ChainConfig::scheduled(Vec::new());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overfit_single_report_drives_loss_down_and_decodes_it() {
        let registry = DiseaseRegistry::small(2);
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(42);
        let mut params = DecoderParams::init(vocab.len(), 4, 16, 2, 2, 128, 48, 24, &mut rng);
        let report: Vec<Token> = vec![
            "no".into(),
            "pneumonia".into(),
            ".".into(),
            "no".into(),
            "pleural_effusion".into(),
            ".".into(),
        ];
        let sample = DecoderSample { grid: toy_grid(2), report: Some(report.clone()), chain: None };
        let cfg = DecoderTrainConfig {
            epochs: 120,
            lr: 5e-3,
            batch: 1,
            prompt_reports: false,
            train_chain: false,
            prompt_dropout: 0.0,
            ..Default::default()
        };
        let stats = train_decoder(&mut params, &[sample.clone()], &vocab, &cfg).unwrap();
        assert!(stats.final_loss < 0.01, "memorization loss {}", stats.final_loss);
        let decoded = decode_report(&sample.grid, &[], &params, &vocab, false).unwrap();
        assert_eq!(decoded, report);
    }

    #[test]
    fn prompted_decoder_inherits_chain_attributes_without_correction() {
        // Train on random grids where the report is a pure function of the
        // chain; the model must copy the prompt, so a corrupted severity in
        // the chain reappears in the decoded report.
        let registry = DiseaseRegistry::new(
            vec!["pneumonia".into(), "pleural_effusion".into()],
            vec!["pneumonia".into(), "pleural_effusion".into()],
            Default::default(),
            Vec::new(), // no negative probes: keeps the toy sequences short
        )
        .unwrap();
        let vocab = Vocab::for_registry(&registry);
        let mut rng = Rng::seed_from_u64(43);
        let mut params = DecoderParams::init(vocab.len(), 4, 16, 2, 2, 160, 64, 32, &mut rng);
        let mut samples = Vec::new();
        let mut k = 0u64;
        for disease in ["pneumonia", "pleural_effusion"] {
            for severity in Severity::ALL {
                for _ in 0..2 {
                    let truth = truth_with(&registry, disease, severity);
                    samples.push(DecoderSample {
                        grid: toy_grid(100 + k),
                        report: Some(render_report(&truth, &registry)),
                        chain: Some(render_qa_chain(&truth, &registry)),
                    });
                    k += 1;
                }
            }
        }
        let cfg = DecoderTrainConfig {
            epochs: 200,
            lr: 5e-3,
            batch: 4,
            prompt_reports: true,
            prompt_dropout: 0.0,
            train_chain: false,
            ..Default::default()
        };
        train_decoder(&mut params, &samples, &vocab, &cfg).unwrap();

        let truth = truth_with(&registry, "pneumonia", Severity::Mild);
        let mut chain = render_qa_chain(&truth, &registry);
        // corrupt the severity answer: mild -> severe
        for qa in &mut chain {
            if qa.qtype == QaType::Severity {
                qa.answer = vec!["severe".into()];
                qa.payload = crate::domain::AnswerPayload::Severity { severity: Severity::Severe };
            }
        }
        let decoded = decode_report(&toy_grid(999), &chain, &params, &vocab, true).unwrap();
        let parsed = parse_report(&decoded, &registry);
        let finding = parsed.findings.iter().find(|f| f.disease == "pneumonia");
        assert!(finding.is_some(), "decoded report: {decoded:?}");
        assert_eq!(
            finding.unwrap().severity,
            Severity::Severe,
            "report must inherit the corrupted prompt severity: {decoded:?}"
        );
    }
}
