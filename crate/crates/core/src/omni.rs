//! Omni-supervised label completion.
//!
//! Stage 0 projects ground-truth QA chains into label slots (QA pairs are
//! annotations too). Stage I trains simple expert probes on whatever
//! ground-truth slices exist, fills every missing slot with a pseudo-label,
//! then filters by confidence and (optionally) clinical consistency, plus a
//! final validity pass that keeps the data model invariants. Stage II fills
//! missing reports by decoding under QA guidance. Every mutation lands in a
//! replayable audit log.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::anatomy::{box_to_subregions, LungModel, DEFAULT_MIN_FRAC};
use crate::consistency::{
    apply_clinical_consistency, filter_by_confidence, ConsistencyConfig, RemovalRecord,
};
use crate::domain::{
    AnnotationSet, AnswerPayload, BoundingBox, DiseaseRegistry, HLoc, Provenance, QaChain,
    QaDiagnosis, QaType, Severity, Slot, Study, Token, VLoc,
};
use crate::error::{Error, Result};
use crate::lesion_ground::{
    fuse_and_regress, train_grounder, GrounderConfig, GrounderSample, GrounderTrainConfig,
    LesionGrounderParams,
};
use crate::numkit::graph::Graph;
use crate::numkit::optim::AdamW;
use crate::numkit::tensor::Tensor;
use crate::numkit::{FeatureGrid, Rng};
use crate::qachain::{self, grammar, ChainConfig, DecoderParams, Vocab};

// ---------------------------------------------------------------------------
// Audit log
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ChainDerivation,
    ExpertFill,
    ConfidenceFilter,
    ClinicalConsistency,
    Validity,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AuditAction {
    SetPresence { disease: String, value: bool, provenance: Provenance, confidence: f64 },
    SetSeverity { disease: String, value: Severity, provenance: Provenance, confidence: f64 },
    SetHloc { disease: String, value: HLoc, provenance: Provenance, confidence: f64 },
    SetVlocs { disease: String, value: BTreeSet<VLoc>, provenance: Provenance, confidence: f64 },
    AddBox { disease: String, value: BoundingBox, provenance: Provenance, confidence: f64 },
    ClearPresence { disease: String },
    ClearSeverity { disease: String },
    ClearHloc { disease: String },
    ClearVlocs { disease: String },
    RemoveVloc { disease: String, value: VLoc },
    RemoveBox { disease: String, value: BoundingBox },
    SetReport { provenance: Provenance, tokens: Vec<Token> },
    SetChain { provenance: Provenance, items: Vec<QaDiagnosis> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub study_id: String,
    pub phase: Phase,
    pub action: AuditAction,
}

fn slot_conf<T>(s: &Slot<T>) -> f64 {
    s.confidence.unwrap_or(1.0)
}

/// Mutations taking `before` to `after`, in slot order.
fn diff_sets(study_id: &str, phase: Phase, before: &AnnotationSet, after: &AnnotationSet) -> Vec<AuditRecord> {
    let mut out = Vec::new();
    let mut push = |action: AuditAction| {
        out.push(AuditRecord { study_id: study_id.to_string(), phase, action });
    };
    for (b, a) in before.diseases.iter().zip(&after.diseases) {
        let d = &b.disease;
        if b.presence != a.presence {
            match (&a.presence.value, a.presence.is_absent()) {
                (_, true) => push(AuditAction::ClearPresence { disease: d.clone() }),
                (Some(v), _) => push(AuditAction::SetPresence {
                    disease: d.clone(),
                    value: *v,
                    provenance: a.presence.provenance,
                    confidence: slot_conf(&a.presence),
                }),
                _ => {}
            }
        }
        if b.severity != a.severity {
            match (&a.severity.value, a.severity.is_absent()) {
                (_, true) => push(AuditAction::ClearSeverity { disease: d.clone() }),
                (Some(v), _) => push(AuditAction::SetSeverity {
                    disease: d.clone(),
                    value: *v,
                    provenance: a.severity.provenance,
                    confidence: slot_conf(&a.severity),
                }),
                _ => {}
            }
        }
        if b.hloc != a.hloc {
            match (&a.hloc.value, a.hloc.is_absent()) {
                (_, true) => push(AuditAction::ClearHloc { disease: d.clone() }),
                (Some(v), _) => push(AuditAction::SetHloc {
                    disease: d.clone(),
                    value: *v,
                    provenance: a.hloc.provenance,
                    confidence: slot_conf(&a.hloc),
                }),
                _ => {}
            }
        }
        if b.vlocs != a.vlocs {
            if a.vlocs.is_absent() {
                push(AuditAction::ClearVlocs { disease: d.clone() });
            } else if b.vlocs.is_absent() {
                push(AuditAction::SetVlocs {
                    disease: d.clone(),
                    value: a.vlocs.value.clone().unwrap_or_default(),
                    provenance: a.vlocs.provenance,
                    confidence: slot_conf(&a.vlocs),
                });
            } else {
                let bv = b.vlocs.value.clone().unwrap_or_default();
                let av = a.vlocs.value.clone().unwrap_or_default();
                for v in bv.difference(&av) {
                    push(AuditAction::RemoveVloc { disease: d.clone(), value: *v });
                }
            }
        }
        if b.boxes != a.boxes {
            for slot in &b.boxes {
                if !a.boxes.contains(slot) {
                    push(AuditAction::RemoveBox {
                        disease: d.clone(),
                        value: slot.value.expect("box slots carry values"),
                    });
                }
            }
            for slot in &a.boxes {
                if !b.boxes.contains(slot) {
                    push(AuditAction::AddBox {
                        disease: d.clone(),
                        value: slot.value.expect("box slots carry values"),
                        provenance: slot.provenance,
                        confidence: slot_conf(slot),
                    });
                }
            }
        }
    }
    out
}

/// Apply audit records to a corpus; replaying the full log on the stage
/// input reconstructs the stage output exactly.
pub fn replay_audit(corpus: &[Study], records: &[AuditRecord]) -> Result<Vec<Study>> {
    let mut out: Vec<Study> = corpus.to_vec();
    for rec in records {
        let study = out
            .iter_mut()
            .find(|s| s.id == rec.study_id)
            .ok_or_else(|| Error::InvalidData(format!("audit names unknown study {}", rec.study_id)))?;
        fn entry<'a>(
            obs: &'a mut AnnotationSet,
            d: &str,
        ) -> Result<&'a mut crate::domain::DiseaseEntry> {
            obs.get_mut(d)
                .ok_or_else(|| Error::InvalidData(format!("audit names unknown disease {d}")))
        }
        fn make_slot<T>(prov: Provenance, conf: f64, v: T) -> Slot<T> {
            match prov {
                Provenance::GroundTruth => Slot::ground_truth(v),
                _ => Slot::pseudo(v, conf),
            }
        }
        match &rec.action {
            AuditAction::SetPresence { disease, value, provenance, confidence } => {
                entry(&mut study.observed, disease)?.presence =
                    make_slot(*provenance, *confidence, *value);
            }
            AuditAction::SetSeverity { disease, value, provenance, confidence } => {
                entry(&mut study.observed, disease)?.severity =
                    make_slot(*provenance, *confidence, *value);
            }
            AuditAction::SetHloc { disease, value, provenance, confidence } => {
                entry(&mut study.observed, disease)?.hloc =
                    make_slot(*provenance, *confidence, *value);
            }
            AuditAction::SetVlocs { disease, value, provenance, confidence } => {
                entry(&mut study.observed, disease)?.vlocs =
                    make_slot(*provenance, *confidence, value.clone());
            }
            AuditAction::AddBox { disease, value, provenance, confidence } => {
                let slot = match provenance {
                    Provenance::GroundTruth => Slot::ground_truth(*value),
                    _ => Slot::pseudo(*value, *confidence),
                };
                entry(&mut study.observed, disease)?.boxes.push(slot);
            }
            AuditAction::ClearPresence { disease } => {
                entry(&mut study.observed, disease)?.presence = Slot::absent();
            }
            AuditAction::ClearSeverity { disease } => {
                entry(&mut study.observed, disease)?.severity = Slot::absent();
            }
            AuditAction::ClearHloc { disease } => {
                entry(&mut study.observed, disease)?.hloc = Slot::absent();
            }
            AuditAction::ClearVlocs { disease } => {
                entry(&mut study.observed, disease)?.vlocs = Slot::absent();
            }
            AuditAction::RemoveVloc { disease, value } => {
                let e = entry(&mut study.observed, disease)?;
                let mut set = e.vlocs.value.clone().unwrap_or_default();
                set.remove(value);
                let conf = slot_conf(&e.vlocs);
                let prov = e.vlocs.provenance;
                e.vlocs = if set.is_empty() {
                    Slot::absent()
                } else {
                    Slot { provenance: prov, value: Some(set), confidence: Some(conf) }
                };
            }
            AuditAction::RemoveBox { disease, value } => {
                let e = entry(&mut study.observed, disease)?;
                if let Some(pos) = e.boxes.iter().position(|b| b.value.as_ref() == Some(value)) {
                    e.boxes.remove(pos);
                }
            }
            AuditAction::SetReport { provenance, tokens } => {
                study.report =
                    Some(crate::domain::Report { provenance: *provenance, tokens: tokens.clone() });
            }
            AuditAction::SetChain { provenance, items } => {
                study.qa_chain = Some(QaChain { provenance: *provenance, items: items.clone() });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage 0: chain-derived labels
// ---------------------------------------------------------------------------

/// Project ground-truth QA chains into label slots: a QA pair states a
/// presence / location / severity fact, so a study annotated with chains is
/// also label-annotated. Only absent slots are filled; provenance stays
/// ground truth.
pub fn derive_labels_from_chains(corpus: &[Study]) -> (Vec<Study>, Vec<AuditRecord>) {
    let mut out = corpus.to_vec();
    let mut audit = Vec::new();
    for study in &mut out {
        let Some(chain) = &study.qa_chain else { continue };
        if chain.provenance != Provenance::GroundTruth {
            continue;
        }
        let before = study.observed.clone();
        // presence facts first, then attributes
        for qa in &chain.items {
            if let AnswerPayload::Presence { present } = &qa.payload {
                if let Some(e) = study.observed.get_mut(&qa.disease) {
                    if e.presence.is_absent() {
                        e.presence = Slot::ground_truth(*present);
                    }
                }
            }
        }
        for qa in &chain.items {
            let Some(e) = study.observed.get_mut(&qa.disease) else { continue };
            match &qa.payload {
                AnswerPayload::Location { hloc, vlocs } => {
                    if e.hloc.is_absent() {
                        e.hloc = Slot::ground_truth(*hloc);
                    }
                    if e.vlocs.is_absent() {
                        e.vlocs = Slot::ground_truth(vlocs.clone());
                    }
                }
                AnswerPayload::Severity { severity } => {
                    if e.severity.is_absent() {
                        e.severity = Slot::ground_truth(*severity);
                    }
                }
                AnswerPayload::Presence { .. } | AnswerPayload::Causal { .. } => {}
            }
        }
        audit.extend(diff_sets(&study.id, Phase::ChainDerivation, &before, &study.observed));
    }
    (out, audit)
}

// ---------------------------------------------------------------------------
// Pooled features and expert probes
// ---------------------------------------------------------------------------

/// Spatially pooled grid statistics: global mean plus per-side and per-band
/// means (cells assigned by center).
#[derive(Clone, Debug)]
pub struct PooledFeatures {
    pub global: Vec<f64>,
    pub right: Vec<f64>,
    pub left: Vec<f64>,
    pub bands: [Vec<f64>; 5],
}

pub fn pooled_features(grid: &FeatureGrid, m: &LungModel) -> PooledFeatures {
    let c = grid.feature_dim;
    let mut global = vec![0.0; c];
    let mut right = vec![0.0; c];
    let mut left = vec![0.0; c];
    let mut bands: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; c]);
    let mut n_right = 0usize;
    let mut n_left = 0usize;
    let mut n_bands = [0usize; 5];
    let g = grid.grid_size;
    for row in 0..g {
        for col in 0..g {
            let cell = grid.cell(row, col);
            let (x, y) = grid.cell_center(row, col);
            for (acc, v) in global.iter_mut().zip(cell) {
                *acc += v;
            }
            if x >= m.right_lung.0 && x < m.right_lung.1 {
                for (acc, v) in right.iter_mut().zip(cell) {
                    *acc += v;
                }
                n_right += 1;
            } else if x >= m.left_lung.0 && x < m.left_lung.1 {
                for (acc, v) in left.iter_mut().zip(cell) {
                    *acc += v;
                }
                n_left += 1;
            }
            for (bi, band) in VLoc::ALL.iter().enumerate() {
                let (lo, hi) = m.band_interval(*band);
                let inside = if bi == 4 { y >= lo && y <= hi } else { y >= lo && y < hi };
                if inside {
                    for (acc, v) in bands[bi].iter_mut().zip(cell) {
                        *acc += v;
                    }
                    n_bands[bi] += 1;
                }
            }
        }
    }
    let scale = |v: &mut Vec<f64>, n: usize| {
        if n > 0 {
            for x in v.iter_mut() {
                *x /= n as f64;
            }
        }
    };
    scale(&mut global, g * g);
    scale(&mut right, n_right);
    scale(&mut left, n_left);
    for (b, n) in bands.iter_mut().zip(n_bands) {
        scale(b, n);
    }
    PooledFeatures { global, right, left, bands }
}

/// One linear softmax probe.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbe {
    /// Uninformative prior: uniform class probabilities. Used when a disease
    /// has no labels of some type; its confidence `1/classes` falls below
    /// any sensible threshold, so its pseudo-labels are filtered out.
    pub fn uniform(in_dim: usize, classes: usize) -> LinearProbe {
        LinearProbe { w: Tensor::zeros(&[in_dim, classes]), b: Tensor::zeros(&[1, classes]) }
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let (in_dim, classes) = self.w.rows_cols();
        assert_eq!(features.len(), in_dim, "probe feature width");
        let mut out = self.b.data.clone();
        for (i, f) in features.iter().enumerate() {
            if *f == 0.0 {
                continue;
            }
            for k in 0..classes {
                out[k] += f * self.w.data[i * classes + k];
            }
        }
        out
    }

    pub fn softmax(&self, features: &[f64]) -> Vec<f64> {
        let z = self.logits(features);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn argmax(&self, features: &[f64]) -> (usize, f64) {
        let p = self.softmax(features);
        let mut best = 0;
        for i in 0..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        (best, p[best])
    }
}

/// Full-batch softmax-regression training for a probe.
fn train_probe(
    examples: &[(Vec<f64>, usize)],
    in_dim: usize,
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearProbe> {
    if examples.is_empty() {
        return Err(Error::Untrained("probe has no training examples".into()));
    }
    let n = examples.len();
    let mut xdata = Vec::with_capacity(n * in_dim);
    let mut targets = Vec::with_capacity(n);
    for (f, t) in examples {
        assert_eq!(f.len(), in_dim);
        xdata.extend_from_slice(f);
        targets.push(*t);
    }
    let x = Tensor::new(vec![n, in_dim], xdata);
    let mut rng = Rng::seed_from_u64(seed).fork("probe");
    let mut w = Tensor::randn(&[in_dim, classes], 0.01, &mut rng);
    let mut b = Tensor::zeros(&[1, classes]);
    let mut opt = AdamW::new(lr)?.with_weight_decay(1e-4);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let wv = g.param(&w);
        let bv = g.param(&b);
        let xv = g.constant(x.clone());
        let z = g.matmul(xv, wv);
        let z = g.add_row_broadcast(z, bv);
        let loss = g.cross_entropy_rows(z, &targets);
        let mut grads = g.backward(loss);
        let gw = grads.take(wv);
        let gb = grads.take(bv);
        opt.step(&mut [&mut w, &mut b], &[&gw, &gb]);
    }
    Ok(LinearProbe { w, b })
}

/// The expert set: presence / severity / horizontal / vertical location
/// probes per disease, plus the box detector (a lesion grounder).
pub struct ExpertModels {
    pub presence: Vec<LinearProbe>,
    pub severity: Vec<LinearProbe>,
    pub hloc: Vec<LinearProbe>,
    pub vloc: Vec<LinearProbe>,
    pub detector: LesionGrounderParams,
    pub lung_model: LungModel,
    /// Per-disease probes that fell back to the uninformative prior because
    /// the corpus carried no labels of that type for them.
    pub prior_fallbacks: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExpertTrainConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub seed: u64,
    pub grounder_cfg: GrounderConfig,
    pub detector_train: GrounderTrainConfig,
}

impl Default for ExpertTrainConfig {
    fn default() -> ExpertTrainConfig {
        ExpertTrainConfig {
            probe_epochs: 250,
            probe_lr: 0.05,
            seed: 0,
            grounder_cfg: GrounderConfig::fast(),
            detector_train: GrounderTrainConfig::default(),
        }
    }
}

fn hloc_index(h: HLoc) -> usize {
    HLoc::ALL.iter().position(|x| *x == h).unwrap()
}

fn severity_index(s: Severity) -> usize {
    Severity::ALL.iter().position(|x| *x == s).unwrap()
}

/// Largest ground-truth box of a disease entry (regression target).
fn primary_box(entry: &crate::domain::DiseaseEntry) -> Option<BoundingBox> {
    entry
        .boxes
        .iter()
        .filter_map(|b| b.value)
        .max_by(|a, b| a.area().partial_cmp(&b.area()).unwrap())
}

/// Build a location-typed diagnosis for detector queries.
pub fn location_diagnosis(disease: &str, hloc: HLoc, vlocs: &BTreeSet<VLoc>) -> QaDiagnosis {
    let payload = AnswerPayload::Location { hloc, vlocs: vlocs.clone() };
    QaDiagnosis {
        qtype: QaType::Location,
        disease: disease.to_string(),
        question: grammar::question_tokens(QaType::Location, disease),
        answer: grammar::answer_tokens(&payload),
        payload,
    }
}

/// Train every expert on the ground-truth slices available in the corpus.
/// Errors when a required annotation type has no examples at all.
pub fn train_experts(
    corpus: &[Study],
    registry: &DiseaseRegistry,
    vocab: &Vocab,
    cfg: &ExpertTrainConfig,
) -> Result<ExpertModels> {
    let m = LungModel::default();
    let feats: Vec<PooledFeatures> = corpus.iter().map(|s| pooled_features(&s.grid, &m)).collect();
    let mut presence = Vec::new();
    let mut severity = Vec::new();
    let mut hloc = Vec::new();
    let mut vloc = Vec::new();
    let mut prior_fallbacks = Vec::new();
    let mut trained_any = [false; 4]; // presence, severity, hloc, vloc
    for (di, disease) in registry.names.iter().enumerate() {
        let mut pres_ex = Vec::new();
        let mut sev_ex = Vec::new();
        let mut h_ex = Vec::new();
        let mut v_ex = Vec::new();
        for (s, f) in corpus.iter().zip(&feats) {
            let e = s.observed.get(disease).expect("aligned sets");
            if e.presence.is_ground_truth() {
                pres_ex.push((f.global.clone(), usize::from(e.presence.value == Some(true))));
            }
            if e.severity.is_ground_truth() {
                sev_ex.push((f.global.clone(), severity_index(e.severity.value.unwrap())));
            }
            if e.hloc.is_ground_truth() {
                let mut sides = f.right.clone();
                sides.extend_from_slice(&f.left);
                h_ex.push((sides, hloc_index(e.hloc.value.unwrap())));
            }
            if e.vlocs.is_ground_truth() {
                let set = e.vlocs.value.as_ref().unwrap();
                for (bi, band) in VLoc::ALL.iter().enumerate() {
                    v_ex.push((f.bands[bi].clone(), usize::from(set.contains(band))));
                }
            }
        }
        let c = feats[0].global.len();
        let seed = cfg.seed.wrapping_add(di as u64);
        // An empty example set falls back to the uninformative prior for
        // that disease; the confidence filter then discards its outputs.
        let mut train_or_prior =
            |examples: &[(Vec<f64>, usize)], in_dim: usize, classes: usize, salt: u64, kind: usize|
             -> Result<LinearProbe> {
                if examples.is_empty() {
                    prior_fallbacks.push(format!("{disease}/{kind}", kind = ["presence", "severity", "hloc", "vloc"][kind]));
                    Ok(LinearProbe::uniform(in_dim, classes))
                } else {
                    trained_any[kind] = true;
                    train_probe(examples, in_dim, classes, cfg.probe_epochs, cfg.probe_lr, seed.wrapping_add(salt))
                }
            };
        presence.push(train_or_prior(&pres_ex, c, 2, 0, 0)?);
        severity.push(train_or_prior(&sev_ex, c, 3, 1000, 1)?);
        hloc.push(train_or_prior(&h_ex, 2 * c, 3, 2000, 2)?);
        vloc.push(train_or_prior(&v_ex, c, 2, 3000, 3)?);
    }
    for (kind, name) in ["presence", "severity", "location", "band"].iter().enumerate() {
        if !trained_any[kind] {
            return Err(Error::Untrained(format!(
                "{name} expert has no labels anywhere in the corpus"
            )));
        }
    }

    // Detector: one sample per ground-truth-boxed disease; the query text
    // comes from observed locations when present, otherwise from the box
    // geometry itself.
    let mut det_samples = Vec::new();
    for s in corpus {
        for e in &s.observed.diseases {
            if !e.boxes_are_ground_truth() {
                continue;
            }
            let Some(target) = primary_box(e) else { continue };
            let (h, v) = match (e.hloc.value, e.vlocs.value.clone()) {
                (Some(h), Some(v)) => (h, v),
                _ => {
                    let sr = crate::anatomy::union_subregions(
                        &e.box_values(),
                        &m,
                        DEFAULT_MIN_FRAC,
                    );
                    match (sr.side, sr.bands) {
                        (Some(h), bands) if !bands.is_empty() => (h, bands),
                        _ => continue,
                    }
                }
            };
            let d = location_diagnosis(&e.disease, h, &v);
            let mut ids = vocab.encode(&grammar::qa_tokens(&d))?;
            ids.truncate(cfg.grounder_cfg.max_text_tokens);
            det_samples.push(GrounderSample { grid: s.grid.clone(), text_ids: ids, target });
        }
    }
    if det_samples.is_empty() {
        return Err(Error::Untrained("box detector has no ground-truth boxes".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed).fork("detector-init");
    let patches = corpus[0].grid.patches();
    let feature_dim = corpus[0].grid.feature_dim;
    let mut detector =
        LesionGrounderParams::init(vocab.len(), feature_dim, patches, &cfg.grounder_cfg, &mut rng);
    train_grounder(&mut detector, &det_samples, &cfg.detector_train)?;

    Ok(ExpertModels { presence, severity, hloc, vloc, detector, lung_model: m, prior_fallbacks })
}

// ---------------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OmniConfig {
    pub confidence_threshold: f64,
    pub clinical_consistency: bool,
    pub consistency: ConsistencyConfig,
}

impl Default for OmniConfig {
    fn default() -> OmniConfig {
        OmniConfig {
            confidence_threshold: 0.7,
            clinical_consistency: true,
            consistency: ConsistencyConfig::default(),
        }
    }
}

/// Stage-I output bundle.
pub struct Stage1Report {
    pub audit: Vec<AuditRecord>,
    pub removals: Vec<(String, RemovalRecord)>,
}

fn presence_probability(e: &crate::domain::DiseaseEntry) -> f64 {
    match (&e.presence.provenance, e.presence.value) {
        (Provenance::GroundTruth, Some(true)) => 1.0,
        (Provenance::GroundTruth, Some(false)) => 0.0,
        (Provenance::Pseudo, Some(true)) => e.presence.confidence.unwrap_or(0.5),
        (Provenance::Pseudo, Some(false)) => 1.0 - e.presence.confidence.unwrap_or(0.5),
        _ => 0.0,
    }
}

/// Fill every missing slot with an expert estimate, then filter by
/// confidence and clinical consistency, and re-establish the data model
/// invariants. The sample itself is never dropped.
pub fn run_stage1(
    corpus: &[Study],
    experts: &ExpertModels,
    registry: &DiseaseRegistry,
    vocab: &Vocab,
    cfg: &OmniConfig,
) -> Result<(Vec<Study>, Stage1Report)> {
    let mut out = corpus.to_vec();
    let mut audit = Vec::new();
    let mut removals = Vec::new();
    for study in &mut out {
        let feats = pooled_features(&study.grid, &experts.lung_model);
        let mut sides = feats.right.clone();
        sides.extend_from_slice(&feats.left);

        // 1. independent expert estimates for every absent slot
        let before = study.observed.clone();
        for (di, disease) in registry.names.iter().enumerate() {
            let e = study.observed.get_mut(disease).expect("aligned sets");
            if e.presence.is_absent() {
                let (cls, conf) = experts.presence[di].argmax(&feats.global);
                e.presence = Slot::pseudo(cls == 1, conf);
            }
            if e.severity.is_absent() {
                let (cls, conf) = experts.severity[di].argmax(&feats.global);
                e.severity = Slot::pseudo(Severity::ALL[cls], conf);
            }
            if e.hloc.is_absent() {
                let (cls, conf) = experts.hloc[di].argmax(&sides);
                e.hloc = Slot::pseudo(HLoc::ALL[cls], conf);
            }
            if e.vlocs.is_absent() {
                let mut set = BTreeSet::new();
                let mut probs = Vec::new();
                let mut best: (VLoc, f64) = (VLoc::Apex, -1.0);
                for (bi, band) in VLoc::ALL.iter().enumerate() {
                    let p = experts.vloc[di].softmax(&feats.bands[bi])[1];
                    if p > best.1 {
                        best = (*band, p);
                    }
                    if p > 0.5 {
                        set.insert(*band);
                        probs.push(p);
                    }
                }
                if set.is_empty() {
                    set.insert(best.0);
                    probs.push(best.1);
                }
                let conf = probs.iter().sum::<f64>() / probs.len() as f64;
                e.vlocs = Slot::pseudo(set, conf);
            }
        }
        // boxes after locations: the detector is queried with the current
        // location values, for groundable diseases currently held present
        for disease in &registry.groundable {
            let e = study.observed.get(disease).expect("aligned sets");
            if !e.boxes.is_empty() || e.presence.value != Some(true) {
                continue;
            }
            let (Some(h), Some(v)) = (e.hloc.value, e.vlocs.value.clone()) else { continue };
            let p_present = presence_probability(e);
            let loc_conf = e.hloc.confidence.unwrap_or(1.0);
            let d = location_diagnosis(disease, h, &v);
            let predicted = fuse_and_regress(&study.grid, &d, &experts.detector, vocab)?;
            let e = study.observed.get_mut(disease).unwrap();
            e.boxes.push(Slot::pseudo(predicted, p_present * loc_conf));
        }
        audit.extend(diff_sets(&study.id, Phase::ExpertFill, &before, &study.observed));

        // 2. confidence filter
        let before = study.observed.clone();
        study.observed = filter_by_confidence(&study.observed, cfg.confidence_threshold);
        audit.extend(diff_sets(&study.id, Phase::ConfidenceFilter, &before, &study.observed));

        // 3. clinical consistency
        if cfg.clinical_consistency {
            let before = study.observed.clone();
            let (cleaned, log) =
                apply_clinical_consistency(&study.observed, &experts.lung_model, &cfg.consistency);
            study.observed = cleaned;
            audit.extend(diff_sets(&study.id, Phase::ClinicalConsistency, &before, &study.observed));
            removals.extend(log.into_iter().map(|r| (study.id.clone(), r)));
        }

        // 4. validity: attributes cannot coexist with a negative presence
        let before = study.observed.clone();
        for e in &mut study.observed.diseases {
            if e.presence.value == Some(false) {
                if e.severity.is_pseudo() {
                    e.severity = Slot::absent();
                }
                if e.hloc.is_pseudo() {
                    e.hloc = Slot::absent();
                }
                if e.vlocs.is_pseudo() {
                    e.vlocs = Slot::absent();
                }
                e.boxes.retain(|b| !b.is_pseudo());
            }
        }
        audit.extend(diff_sets(&study.id, Phase::Validity, &before, &study.observed));
    }
    Ok((out, Stage1Report { audit, removals }))
}

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Stage2Config {
    /// Render pseudo chains from completed labels for report-less studies
    /// without chains (falls back to self-talk generation when disabled or
    /// when no labels exist).
    pub chains_from_labels: bool,
    pub chain_cfg: ChainConfig,
}

impl Default for Stage2Config {
    fn default() -> Stage2Config {
        Stage2Config { chains_from_labels: true, chain_cfg: ChainConfig::self_talk() }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Stage2Report {
    pub with_gt_report: Vec<String>,
    pub pseudo_filled: Vec<String>,
    pub chain_sources: Vec<(String, String)>,
    #[serde(skip)]
    pub audit: Vec<AuditRecord>,
}

/// QA chain rendered from (possibly pseudo) label slots: facts for present
/// diseases, negative probes only where presence is explicitly false.
pub fn chain_from_labels(observed: &AnnotationSet, registry: &DiseaseRegistry) -> Vec<QaDiagnosis> {
    let mut chain = Vec::new();
    let qa = |qtype, disease: &str, payload: AnswerPayload| QaDiagnosis {
        qtype,
        disease: disease.to_string(),
        question: grammar::question_tokens(qtype, disease),
        answer: grammar::answer_tokens(&payload),
        payload,
    };
    for e in &observed.diseases {
        if e.presence.value != Some(true) {
            continue;
        }
        chain.push(qa(QaType::Presence, &e.disease, AnswerPayload::Presence { present: true }));
        if let (Some(h), Some(v)) = (e.hloc.value, e.vlocs.value.clone()) {
            chain.push(qa(QaType::Location, &e.disease, AnswerPayload::Location { hloc: h, vlocs: v }));
        }
        if let Some(s) = e.severity.value {
            chain.push(qa(QaType::Severity, &e.disease, AnswerPayload::Severity { severity: s }));
        }
        if let Some(cause) = registry.causal_map.get(&e.disease) {
            chain.push(qa(QaType::Causal, &e.disease, AnswerPayload::Causal { cause: cause.clone() }));
        }
    }
    for probe in &registry.negative_probes {
        if observed.get(probe).map(|e| e.presence.value == Some(false)).unwrap_or(false) {
            chain.push(qa(QaType::Presence, probe, AnswerPayload::Presence { present: false }));
        }
    }
    chain
}

/// Fill pseudo reports for every study lacking one, using a decoder trained
/// with QA prompting. Errors when no study carries a ground-truth report.
pub fn run_stage2(
    corpus: &[Study],
    decoder: &DecoderParams,
    registry: &DiseaseRegistry,
    vocab: &Vocab,
    cfg: &Stage2Config,
) -> Result<(Vec<Study>, Stage2Report)> {
    let mut report = Stage2Report::default();
    for s in corpus {
        if matches!(&s.report, Some(r) if r.provenance == Provenance::GroundTruth) {
            report.with_gt_report.push(s.id.clone());
        }
    }
    if report.with_gt_report.is_empty() {
        return Err(Error::StageFailure {
            stage: "stage2".into(),
            reason: "no study carries a ground-truth report".into(),
        });
    }
    let mut out = corpus.to_vec();
    for study in &mut out {
        if study.report.is_some() {
            continue;
        }
        let (chain, source) = match &study.qa_chain {
            Some(c) => (c.items.clone(), "observed".to_string()),
            None => {
                let has_labels =
                    study.observed.diseases.iter().any(|d| !d.presence.is_absent());
                if cfg.chains_from_labels && has_labels {
                    let items = chain_from_labels(&study.observed, registry);
                    study.qa_chain =
                        Some(QaChain { provenance: Provenance::Pseudo, items: items.clone() });
                    report.audit.push(AuditRecord {
                        study_id: study.id.clone(),
                        phase: Phase::Stage2,
                        action: AuditAction::SetChain {
                            provenance: Provenance::Pseudo,
                            items: items.clone(),
                        },
                    });
                    (items, "labels".to_string())
                } else {
                    let generated =
                        qachain::generate_qa_chain(&study.grid, decoder, &cfg.chain_cfg, vocab, registry)?;
                    study.qa_chain = Some(QaChain {
                        provenance: Provenance::Pseudo,
                        items: generated.items.clone(),
                    });
                    report.audit.push(AuditRecord {
                        study_id: study.id.clone(),
                        phase: Phase::Stage2,
                        action: AuditAction::SetChain {
                            provenance: Provenance::Pseudo,
                            items: generated.items.clone(),
                        },
                    });
                    (generated.items, "generated".to_string())
                }
            }
        };
        let tokens = qachain::decode_report(&study.grid, &chain, decoder, vocab, true)?;
        study.report =
            Some(crate::domain::Report { provenance: Provenance::Pseudo, tokens: tokens.clone() });
        report.audit.push(AuditRecord {
            study_id: study.id.clone(),
            phase: Phase::Stage2,
            action: AuditAction::SetReport { provenance: Provenance::Pseudo, tokens },
        });
        report.pseudo_filled.push(study.id.clone());
        report.chain_sources.push((study.id.clone(), source));
    }
    Ok((out, report))
}
