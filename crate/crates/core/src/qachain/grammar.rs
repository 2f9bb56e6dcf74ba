//! The closed synthetic report/QA grammar: vocabulary, deterministic
//! renderers from annotations to token sequences, and the inverse parsers.
//!
//! Report sentences take three forms:
//!   "<severity> <disease> in the <bands..> <side phrase> ."
//!   "no <disease> ."
//!   "<finding> and <finding> ."  (compound; lets one sentence justify
//!                                 several QA diagnoses)

use std::collections::{BTreeSet, HashMap};

use crate::domain::{
    AnnotationSet, AnswerPayload, DiseaseRegistry, HLoc, QaDiagnosis, QaType, Severity, Token,
    VLoc,
};
use crate::error::{Error, Result};

pub const BOC: &str = "<boc>";
pub const EOC: &str = "<eoc>";
pub const BOR: &str = "<bor>";
pub const EOR: &str = "<eor>";
pub const Q_MARK: &str = "<q>";
pub const A_MARK: &str = "<a>";
pub const SEP: &str = "<sep>";

/// Token table shared by every text model; covers everything the grammar
/// can emit for a given registry.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn for_registry(registry: &DiseaseRegistry) -> Vocab {
        let mut tokens: Vec<String> = Vec::new();
        let mut push = |t: &str, tokens: &mut Vec<String>| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        };
        for t in [BOC, EOC, BOR, EOR, Q_MARK, A_MARK, SEP] {
            push(t, &mut tokens);
        }
        for t in ["is", "there", "where", "how", "severe", "what", "causes", "?"] {
            push(t, &mut tokens);
        }
        for t in ["yes", "no"] {
            push(t, &mut tokens);
        }
        for s in Severity::ALL {
            push(s.token(), &mut tokens);
        }
        for t in ["left", "right", "both"] {
            push(t, &mut tokens);
        }
        for v in VLoc::ALL {
            push(v.token(), &mut tokens);
        }
        for t in ["in", "the", "lung", "lungs", "and", "."] {
            push(t, &mut tokens);
        }
        for d in &registry.names {
            push(d, &mut tokens);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<Token> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

fn side_token(h: HLoc) -> &'static str {
    match h {
        HLoc::Both => "both",
        HLoc::LeftOnly => "left",
        HLoc::RightOnly => "right",
    }
}

fn side_from_token(t: &str) -> Option<HLoc> {
    match t {
        "both" => Some(HLoc::Both),
        "left" => Some(HLoc::LeftOnly),
        "right" => Some(HLoc::RightOnly),
        _ => None,
    }
}

fn side_phrase(h: HLoc) -> Vec<Token> {
    match h {
        HLoc::Both => vec!["both".into(), "lungs".into()],
        HLoc::LeftOnly => vec!["left".into(), "lung".into()],
        HLoc::RightOnly => vec!["right".into(), "lung".into()],
    }
}

/// Question tokens for one (type, disease) pair.
pub fn question_tokens(qtype: QaType, disease: &str) -> Vec<Token> {
    match qtype {
        QaType::Presence => vec!["is".into(), "there".into(), disease.into(), "?".into()],
        QaType::Location => vec!["where".into(), "is".into(), disease.into(), "?".into()],
        QaType::Severity => {
            vec!["how".into(), "severe".into(), "is".into(), disease.into(), "?".into()]
        }
        QaType::Causal => vec!["what".into(), "causes".into(), disease.into(), "?".into()],
    }
}

/// Answer tokens for a payload.
pub fn answer_tokens(payload: &AnswerPayload) -> Vec<Token> {
    match payload {
        AnswerPayload::Presence { present } => {
            vec![if *present { "yes".into() } else { "no".into() }]
        }
        AnswerPayload::Location { hloc, vlocs } => {
            let mut t: Vec<Token> = vec![side_token(*hloc).into()];
            for v in VLoc::ALL {
                if vlocs.contains(&v) {
                    t.push(v.token().into());
                }
            }
            t
        }
        AnswerPayload::Severity { severity } => vec![severity.token().into()],
        AnswerPayload::Causal { cause } => vec![cause.clone()],
    }
}

/// Parse answer tokens back into a payload, given the question type.
pub fn parse_answer(
    qtype: QaType,
    tokens: &[Token],
    registry: &DiseaseRegistry,
) -> Option<AnswerPayload> {
    match qtype {
        QaType::Presence => match tokens {
            [t] if t == "yes" => Some(AnswerPayload::Presence { present: true }),
            [t] if t == "no" => Some(AnswerPayload::Presence { present: false }),
            _ => None,
        },
        QaType::Location => {
            let (first, rest) = tokens.split_first()?;
            let hloc = side_from_token(first)?;
            if rest.is_empty() {
                return None;
            }
            let mut vlocs = BTreeSet::new();
            for t in rest {
                vlocs.insert(VLoc::from_token(t)?);
            }
            Some(AnswerPayload::Location { hloc, vlocs })
        }
        QaType::Severity => match tokens {
            [t] => Severity::from_token(t).map(|severity| AnswerPayload::Severity { severity }),
            _ => None,
        },
        QaType::Causal => match tokens {
            [t] if registry.index_of(t).is_some() => {
                Some(AnswerPayload::Causal { cause: t.clone() })
            }
            _ => None,
        },
    }
}

fn qa(qtype: QaType, disease: &str, payload: AnswerPayload) -> QaDiagnosis {
    QaDiagnosis {
        qtype,
        disease: disease.to_string(),
        question: question_tokens(qtype, disease),
        answer: answer_tokens(&payload),
        payload,
    }
}

/// Deterministic canonical QA chain for a complete truth set: per present
/// disease (registry order) presence/location/severity plus a causal pair
/// when mapped, then a negative presence probe per absent probe disease.
pub fn render_qa_chain(truth: &AnnotationSet, registry: &DiseaseRegistry) -> Vec<QaDiagnosis> {
    let mut chain = Vec::new();
    for entry in &truth.diseases {
        if !entry.is_present() {
            continue;
        }
        let d = &entry.disease;
        chain.push(qa(QaType::Presence, d, AnswerPayload::Presence { present: true }));
        if let (Some(h), Some(v)) = (entry.hloc.value, entry.vlocs.value.clone()) {
            chain.push(qa(QaType::Location, d, AnswerPayload::Location { hloc: h, vlocs: v }));
        }
        if let Some(s) = entry.severity.value {
            chain.push(qa(QaType::Severity, d, AnswerPayload::Severity { severity: s }));
        }
        if let Some(cause) = registry.causal_map.get(d) {
            chain.push(qa(QaType::Causal, d, AnswerPayload::Causal { cause: cause.clone() }));
        }
    }
    for probe in &registry.negative_probes {
        let absent = truth.get(probe).map(|e| !e.is_present()).unwrap_or(false);
        if absent {
            chain.push(qa(QaType::Presence, probe, AnswerPayload::Presence { present: false }));
        }
    }
    chain
}

/// One positive finding clause: severity + disease + location.
fn finding_clause(entry: &crate::domain::DiseaseEntry) -> Option<Vec<Token>> {
    let sev = entry.severity.value?;
    let hloc = entry.hloc.value?;
    let vlocs = entry.vlocs.value.as_ref()?;
    let mut t: Vec<Token> = vec![sev.token().into(), entry.disease.clone(), "in".into(), "the".into()];
    for v in VLoc::ALL {
        if vlocs.contains(&v) {
            t.push(v.token().into());
        }
    }
    t.extend(side_phrase(hloc));
    Some(t)
}

/// Deterministic report for a complete truth set. The first two present
/// diseases merge into one compound sentence; remaining present diseases
/// get single sentences; absent probe diseases get negations.
pub fn render_report(truth: &AnnotationSet, registry: &DiseaseRegistry) -> Vec<Token> {
    let mut tokens: Vec<Token> = Vec::new();
    let clauses: Vec<Vec<Token>> =
        truth.diseases.iter().filter_map(|e| if e.is_present() { finding_clause(e) } else { None }).collect();
    let mut rest = clauses.as_slice();
    if clauses.len() >= 2 {
        tokens.extend(clauses[0].iter().cloned());
        tokens.push("and".into());
        tokens.extend(clauses[1].iter().cloned());
        tokens.push(".".into());
        rest = &clauses[2..];
    }
    for clause in rest {
        tokens.extend(clause.iter().cloned());
        tokens.push(".".into());
    }
    for probe in &registry.negative_probes {
        let absent = truth.get(probe).map(|e| !e.is_present()).unwrap_or(false);
        if absent {
            tokens.push("no".into());
            tokens.push(probe.clone());
            tokens.push(".".into());
        }
    }
    tokens
}

/// One parsed positive finding.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub disease: String,
    pub severity: Severity,
    pub hloc: HLoc,
    pub vlocs: BTreeSet<VLoc>,
}

/// Parsed content of one report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedReport {
    pub findings: Vec<Finding>,
    pub negations: Vec<String>,
    /// Sentences that failed to parse (counted, never fatal).
    pub unparseable: usize,
}

fn parse_clause(tokens: &[Token], registry: &DiseaseRegistry) -> Option<Finding> {
    // <sev> <disease> in the <vloc>+ (left lung | right lung | both lungs)
    if tokens.len() < 7 {
        return None;
    }
    let severity = Severity::from_token(&tokens[0])?;
    let disease = &tokens[1];
    registry.index_of(disease)?;
    if tokens[2] != "in" || tokens[3] != "the" {
        return None;
    }
    let tail = &tokens[4..];
    let (band_tokens, side_pair) = tail.split_at(tail.len().checked_sub(2)?);
    let hloc = match side_pair {
        [s, l] if l == "lung" => match s.as_str() {
            "left" => HLoc::LeftOnly,
            "right" => HLoc::RightOnly,
            _ => return None,
        },
        [s, l] if l == "lungs" && s == "both" => HLoc::Both,
        _ => return None,
    };
    if band_tokens.is_empty() {
        return None;
    }
    let mut vlocs = BTreeSet::new();
    for t in band_tokens {
        vlocs.insert(VLoc::from_token(t)?);
    }
    Some(Finding { disease: disease.clone(), severity, hloc, vlocs })
}

/// Robust report parser: splits on periods, recognizes the three sentence
/// forms, and counts anything else as unparseable.
pub fn parse_report(tokens: &[Token], registry: &DiseaseRegistry) -> ParsedReport {
    let mut out = ParsedReport::default();
    for sentence in tokens.split(|t| t == ".") {
        if sentence.is_empty() {
            continue;
        }
        if sentence.len() == 2 && sentence[0] == "no" {
            if registry.index_of(&sentence[1]).is_some() {
                out.negations.push(sentence[1].clone());
            } else {
                out.unparseable += 1;
            }
            continue;
        }
        let clauses: Vec<&[Token]> = sentence.split(|t| t == "and").collect();
        if clauses.is_empty() || clauses.len() > 2 {
            out.unparseable += 1;
            continue;
        }
        let parsed: Vec<Option<Finding>> =
            clauses.iter().map(|c| parse_clause(c, registry)).collect();
        if parsed.iter().all(|p| p.is_some()) {
            out.findings.extend(parsed.into_iter().flatten());
        } else {
            out.unparseable += 1;
        }
    }
    out
}

/// Serialize one QA diagnosis into its token form:
/// `<q> question <a> answer <sep>`.
pub fn qa_tokens(d: &QaDiagnosis) -> Vec<Token> {
    let mut t: Vec<Token> = vec![Q_MARK.into()];
    t.extend(d.question.iter().cloned());
    t.push(A_MARK.into());
    t.extend(d.answer.iter().cloned());
    t.push(SEP.into());
    t
}

/// Serialize a whole chain (without the begin/end markers).
pub fn chain_tokens(chain: &[QaDiagnosis]) -> Vec<Token> {
    chain.iter().flat_map(|d| qa_tokens(d)).collect()
}

/// Parse the question span of a serialized QA back into (type, disease).
pub fn parse_question(tokens: &[Token], registry: &DiseaseRegistry) -> Option<(QaType, String)> {
    let q = tokens;
    let check = |d: &Token| registry.index_of(d).map(|_| d.clone());
    match q {
        [a, b, d, qm] if a == "is" && b == "there" && qm == "?" => {
            Some((QaType::Presence, check(d)?))
        }
        [a, b, d, qm] if a == "where" && b == "is" && qm == "?" => {
            Some((QaType::Location, check(d)?))
        }
        [a, b, c, d, qm] if a == "how" && b == "severe" && c == "is" && qm == "?" => {
            Some((QaType::Severity, check(d)?))
        }
        [a, b, d, qm] if a == "what" && b == "causes" && qm == "?" => {
            Some((QaType::Causal, check(d)?))
        }
        _ => None,
    }
}

/// Parse a serialized chain span (sequence of `<q> .. <a> .. <sep>` blocks)
/// back into QA diagnoses. Malformed blocks are dropped and counted.
pub fn parse_chain_tokens(
    tokens: &[Token],
    registry: &DiseaseRegistry,
) -> (Vec<QaDiagnosis>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    let mut cursor = tokens;
    while !cursor.is_empty() {
        if cursor[0] != Q_MARK {
            // resynchronize at the next question marker
            dropped += 1;
            match cursor.iter().position(|t| t == Q_MARK) {
                Some(p) => cursor = &cursor[p..],
                None => break,
            }
            continue;
        }
        let block_end = cursor.iter().position(|t| t == SEP).map(|p| p + 1);
        let (block, rest) = match block_end {
            Some(e) => cursor.split_at(e),
            None => (cursor, &[][..]),
        };
        cursor = rest;
        let inner = &block[1..block.len() - if block_end.is_some() { 1 } else { 0 }];
        let parsed = (|| {
            let a_pos = inner.iter().position(|t| t == A_MARK)?;
            let (qtype, disease) = parse_question(&inner[..a_pos], registry)?;
            let answer = &inner[a_pos + 1..];
            let payload = parse_answer(qtype, answer, registry)?;
            Some(QaDiagnosis {
                qtype,
                disease,
                question: inner[..a_pos].to_vec(),
                answer: answer.to_vec(),
                payload,
            })
        })();
        match parsed {
            Some(d) => out.push(d),
            None => dropped += 1,
        }
    }
    (out, dropped)
}
