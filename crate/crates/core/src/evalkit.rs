//! Evaluation protocol: attribute extraction from reports (a deterministic
//! grammar parser stands in for a learned text classifier, since the report
//! language is closed), disease-level precision/recall/F1, extended
//! attribute accuracies (horizontal/vertical location and severity), the
//! n-gram overlap metrics, and table-shaped CSV emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::domain::{DiseaseRegistry, HLoc, Severity, Token, VLoc};
use crate::error::{Error, Result};
use crate::qachain::grammar;

/// How a disease is mentioned in a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mention {
    Positive,
    Negative,
    Unmentioned,
}

/// Per-disease attribute readout of one report.
#[derive(Clone, Debug, PartialEq)]
pub struct DiseaseReadout {
    pub presence: Mention,
    pub severity: Option<Severity>,
    pub hloc: Option<HLoc>,
    pub vlocs: Option<std::collections::BTreeSet<VLoc>>,
}

impl DiseaseReadout {
    fn unmentioned() -> DiseaseReadout {
        DiseaseReadout { presence: Mention::Unmentioned, severity: None, hloc: None, vlocs: None }
    }
}

/// Readout for every registry disease plus the count of unparseable
/// sentences encountered.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeReadout {
    pub diseases: BTreeMap<String, DiseaseReadout>,
    pub unparseable: usize,
}

impl AttributeReadout {
    pub fn get(&self, disease: &str) -> &DiseaseReadout {
        &self.diseases[disease]
    }
}

/// Parse a report into predefined classes. Unparseable sentences contribute
/// nothing; negation sentences mark the disease negative; compound
/// sentences yield both findings. The first mention of a disease wins.
pub fn extract_attributes(tokens: &[Token], registry: &DiseaseRegistry) -> AttributeReadout {
    let parsed = grammar::parse_report(tokens, registry);
    let mut diseases: BTreeMap<String, DiseaseReadout> =
        registry.names.iter().map(|n| (n.clone(), DiseaseReadout::unmentioned())).collect();
    for f in parsed.findings {
        let slot = diseases.get_mut(&f.disease).expect("parser only yields registry diseases");
        if slot.presence == Mention::Unmentioned {
            *slot = DiseaseReadout {
                presence: Mention::Positive,
                severity: Some(f.severity),
                hloc: Some(f.hloc),
                vlocs: Some(f.vlocs),
            };
        }
    }
    for n in parsed.negations {
        let slot = diseases.get_mut(&n).expect("parser only yields registry diseases");
        if slot.presence == Mention::Unmentioned {
            slot.presence = Mention::Negative;
        }
    }
    AttributeReadout { diseases, unparseable: parsed.unparseable }
}

/// Precision/recall/F1 from raw counts.
fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiseaseScore {
    pub disease: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification efficacy over paired readouts. The positive class is
/// `Mention::Positive`; an unmentioned disease counts as negative.
#[derive(Clone, Debug, Serialize)]
pub struct CeScores {
    pub per_disease: Vec<DiseaseScore>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn ce_scores(preds: &[AttributeReadout], refs: &[AttributeReadout]) -> Result<CeScores> {
    if preds.len() != refs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (p, r) in preds.iter().zip(refs) {
        for (disease, rref) in &r.diseases {
            let pred_pos = p
                .diseases
                .get(disease)
                .map(|d| d.presence == Mention::Positive)
                .unwrap_or(false);
            let ref_pos = rref.presence == Mention::Positive;
            let e = counts.entry(disease.clone()).or_default();
            match (pred_pos, ref_pos) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => {}
            }
        }
    }
    let mut per_disease = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let (mut pm, mut rm, mut fm) = (0.0, 0.0, 0.0);
    for (disease, (tp, fp, fn_)) in &counts {
        let (p, r, f1) = prf(*tp, *fp, *fn_);
        per_disease.push(DiseaseScore {
            disease: disease.clone(),
            tp: *tp,
            fp: *fp,
            fn_: *fn_,
            precision: p,
            recall: r,
            f1,
        });
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        pm += p;
        rm += r;
        fm += f1;
    }
    let k = per_disease.len().max(1) as f64;
    let (micro_p, micro_r, micro_f1) = prf(tp_all, fp_all, fn_all);
    Ok(CeScores {
        per_disease,
        micro_precision: micro_p,
        micro_recall: micro_r,
        micro_f1,
        macro_precision: pm / k,
        macro_recall: rm / k,
        macro_f1: fm / k,
    })
}

/// Attribute accuracies over findings where the reference defines the
/// attribute; a missing or mismatching prediction counts wrong (vertical
/// locations must match as sets).
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct AttrAccuracy {
    pub loc_h: f64,
    pub loc_v: f64,
    pub sev: f64,
}

pub fn attribute_accuracy(preds: &[AttributeReadout], refs: &[AttributeReadout]) -> Result<AttrAccuracy> {
    if preds.len() != refs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    let (mut h_ok, mut h_n) = (0usize, 0usize);
    let (mut v_ok, mut v_n) = (0usize, 0usize);
    let (mut s_ok, mut s_n) = (0usize, 0usize);
    for (p, r) in preds.iter().zip(refs) {
        for (disease, rref) in &r.diseases {
            if rref.presence != Mention::Positive {
                continue;
            }
            let pref = p.diseases.get(disease);
            if let Some(h) = rref.hloc {
                h_n += 1;
                if pref.and_then(|d| d.hloc) == Some(h) {
                    h_ok += 1;
                }
            }
            if let Some(v) = &rref.vlocs {
                v_n += 1;
                if pref.and_then(|d| d.vlocs.as_ref()) == Some(v) {
                    v_ok += 1;
                }
            }
            if let Some(s) = rref.severity {
                s_n += 1;
                if pref.and_then(|d| d.severity) == Some(s) {
                    s_ok += 1;
                }
            }
        }
    }
    let frac = |ok: usize, n: usize| if n > 0 { ok as f64 / n as f64 } else { 0.0 };
    Ok(AttrAccuracy { loc_h: frac(h_ok, h_n), loc_v: frac(v_ok, v_n), sev: frac(s_ok, s_n) })
}

/// BLEU-n with clipped counts and brevity penalty; zero when any order has
/// no matches (no smoothing) or when either side is empty.
pub fn bleu(pred: &[Token], reference: &[Token], n: usize) -> f64 {
    assert!(n >= 1, "bleu order must be >= 1");
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        if pred.len() < k {
            return 0.0;
        }
        let mut ref_counts: BTreeMap<&[Token], usize> = BTreeMap::new();
        for w in reference.windows(k) {
            *ref_counts.entry(w).or_default() += 1;
        }
        let mut matched = 0usize;
        let mut pred_counts: BTreeMap<&[Token], usize> = BTreeMap::new();
        for w in pred.windows(k) {
            *pred_counts.entry(w).or_default() += 1;
        }
        for (w, c) in &pred_counts {
            matched += (*c).min(*ref_counts.get(w).unwrap_or(&0));
        }
        let total = pred.len() - k + 1;
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if pred.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    };
    bp * (log_sum / n as f64).exp()
}

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L F-measure (balanced) from the longest common subsequence.
pub fn rouge_l(pred: &[Token], reference: &[Token]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / pred.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// NLG bundle over paired token sequences.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct NlgScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

pub fn nlg_scores(preds: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<NlgScores> {
    if preds.len() != refs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    if preds.is_empty() {
        return Ok(NlgScores::default());
    }
    let n = preds.len() as f64;
    let mut out = NlgScores::default();
    for (p, r) in preds.iter().zip(refs) {
        out.bleu1 += bleu(p, r, 1);
        out.bleu4 += bleu(p, r, 4);
        out.rouge_l += rouge_l(p, r);
    }
    out.bleu1 /= n;
    out.bleu4 /= n;
    out.rouge_l /= n;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Table emission
// ---------------------------------------------------------------------------

/// One table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Scalar(f64),
    /// mean and standard deviation across seeds
    MeanStd(f64, f64),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Scalar(v) => format!("{v:.6}"),
            Cell::MeanStd(m, s) => format!("{m:.4}±{s:.4}"),
            Cell::Empty => String::new(),
        }
    }
}

/// A named metric table with a fixed column order.
#[derive(Clone, Debug, Default)]
pub struct MetricTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

impl MetricTable {
    pub fn new(name: &str, columns: &[&str]) -> MetricTable {
        MetricTable {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: &str, cells: Vec<Cell>) {
        assert_eq!(cells.len(), self.columns.len(), "row width must match header");
        self.rows.push((label.to_string(), cells));
    }

    /// Deterministic CSV rendering: header row, then one row per label.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("row");
        for c in &self.columns {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(label);
            for cell in cells {
                let _ = write!(out, ",{}", cell.render());
            }
            out.push('\n');
        }
        out
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate per-seed values into one cell: a plain scalar for a single
/// run, mean±std across several.
pub fn aggregate_cell(values: &[f64]) -> Cell {
    match values.len() {
        0 => Cell::Empty,
        1 => Cell::Scalar(values[0]),
        _ => {
            let (m, s) = mean_std(values);
            Cell::MeanStd(m, s)
        }
    }
}

/// Write tables as CSV files named `<table>.csv` under `dir`.
pub fn emit_tables(tables: &[MetricTable], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        std::fs::write(&path, t.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn extracts_positive_finding_with_attributes() {
        let registry = DiseaseRegistry::default_14();
        let r = extract_attributes(&toks("moderate pneumonia in the lower right lung ."), &registry);
        let d = r.get("pneumonia");
        assert_eq!(d.presence, Mention::Positive);
        assert_eq!(d.severity, Some(Severity::Moderate));
        assert_eq!(d.hloc, Some(HLoc::RightOnly));
        assert_eq!(d.vlocs.as_ref().unwrap().len(), 1);
        assert!(d.vlocs.as_ref().unwrap().contains(&VLoc::Lower));
        assert_eq!(r.get("lesion").presence, Mention::Unmentioned);
    }

    #[test]
    fn extracts_negation() {
        let registry = DiseaseRegistry::default_14();
        let r = extract_attributes(&toks("no pleural_effusion ."), &registry);
        assert_eq!(r.get("pleural_effusion").presence, Mention::Negative);
        assert_eq!(r.get("pleural_effusion").severity, None);
    }

    #[test]
    fn unparseable_sentences_are_counted_not_fatal() {
        let registry = DiseaseRegistry::default_14();
        let r = extract_attributes(&toks("lung the in moderate . no pneumonia ."), &registry);
        assert_eq!(r.unparseable, 1);
        assert_eq!(r.get("pneumonia").presence, Mention::Negative);
    }

    #[test]
    fn render_parse_round_trip_recovers_truth_attributes() {
        use crate::domain::{AnnotationSet, Slot};
        let registry = DiseaseRegistry::default_14();
        let mut truth = AnnotationSet::absent(&registry);
        for e in &mut truth.diseases {
            e.presence = Slot::ground_truth(false);
        }
        for (d, sev, h, bands) in [
            ("pneumonia", Severity::Mild, HLoc::RightOnly, vec![VLoc::Apex]),
            ("lesion", Severity::Severe, HLoc::Both, vec![VLoc::Lower, VLoc::Base]),
            ("cardiomegaly", Severity::Moderate, HLoc::LeftOnly, vec![VLoc::Middle]),
        ] {
            let e = truth.get_mut(d).unwrap();
            e.presence = Slot::ground_truth(true);
            e.severity = Slot::ground_truth(sev);
            e.hloc = Slot::ground_truth(h);
            e.vlocs = Slot::ground_truth(bands.into_iter().collect());
        }
        let report = grammar::render_report(&truth, &registry);
        let readout = extract_attributes(&report, &registry);
        assert_eq!(readout.unparseable, 0);
        for e in &truth.diseases {
            let d = readout.get(&e.disease);
            if e.is_present() {
                assert_eq!(d.presence, Mention::Positive, "{}", e.disease);
                assert_eq!(d.severity, e.severity.value, "{}", e.disease);
                assert_eq!(d.hloc, e.hloc.value, "{}", e.disease);
                assert_eq!(d.vlocs.as_ref(), e.vlocs.value.as_ref(), "{}", e.disease);
            } else {
                assert_ne!(d.presence, Mention::Positive, "{}", e.disease);
            }
        }
    }

    #[test]
    fn ce_perfect_and_degenerate_cases() {
        let registry = DiseaseRegistry::default_14();
        let a = extract_attributes(&toks("mild pneumonia in the apex right lung ."), &registry);
        let b = extract_attributes(&toks("no pneumonia ."), &registry);
        let perfect = ce_scores(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!(perfect.micro_precision, 1.0);
        assert_eq!(perfect.micro_recall, 1.0);
        assert_eq!(perfect.micro_f1, 1.0);
        // all-negative predictions against positive references: recall 0
        let rec0 = ce_scores(&[b], &[a]).unwrap();
        assert_eq!(rec0.micro_recall, 0.0);
    }

    #[test]
    fn ce_hand_confusion_counts() {
        let registry = DiseaseRegistry::default_14();
        let pos = extract_attributes(&toks("mild pneumonia in the apex right lung ."), &registry);
        let neg = extract_attributes(&toks("no pneumonia ."), &registry);
        // TP=2, FP=1, FN=1 on the pneumonia column
        let preds = vec![pos.clone(), pos.clone(), pos.clone(), neg.clone()];
        let refs = vec![pos.clone(), pos.clone(), neg.clone(), pos.clone()];
        let s = ce_scores(&preds, &refs).unwrap();
        assert!((s.micro_precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.micro_recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ce_is_invariant_to_study_order() {
        let registry = DiseaseRegistry::default_14();
        let a = extract_attributes(&toks("mild pneumonia in the apex right lung ."), &registry);
        let b = extract_attributes(&toks("no pneumonia ."), &registry);
        let c = extract_attributes(&toks("severe lesion in the base left lung ."), &registry);
        let s1 = ce_scores(&[a.clone(), b.clone(), c.clone()], &[a.clone(), c.clone(), b.clone()]).unwrap();
        let s2 = ce_scores(&[c.clone(), a.clone(), b.clone()], &[b.clone(), a.clone(), c.clone()]).unwrap();
        assert!((s1.micro_f1 - s2.micro_f1).abs() < 1e-12);
    }

    #[test]
    fn attribute_accuracy_counts_controlled_corruption() {
        let registry = DiseaseRegistry::default_14();
        let truth = extract_attributes(&toks("mild pneumonia in the apex right lung ."), &registry);
        let flipped = extract_attributes(&toks("severe pneumonia in the apex right lung ."), &registry);
        let acc = attribute_accuracy(
            &[truth.clone(), flipped.clone()],
            &[truth.clone(), truth.clone()],
        )
        .unwrap();
        assert_eq!(acc.sev, 0.5);
        assert_eq!(acc.loc_h, 1.0);
        assert_eq!(acc.loc_v, 1.0);
        let perfect = attribute_accuracy(&[truth.clone()], &[truth]).unwrap();
        assert_eq!((perfect.loc_h, perfect.loc_v, perfect.sev), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bleu_and_rouge_hand_cases() {
        let a = toks("a b c d");
        assert_eq!(bleu(&a, &a, 1), 1.0);
        assert_eq!(bleu(&a, &a, 4), 1.0);
        assert_eq!(rouge_l(&a, &a), 1.0);
        let b = toks("x y z");
        assert_eq!(bleu(&a, &b, 1), 0.0);
        assert_eq!(rouge_l(&a, &b), 0.0);
        // pred "a b c d" vs ref "a b x d": BLEU-1 = 3/4, LCS = 3 -> F = 0.75
        let r = toks("a b x d");
        assert!((bleu(&a, &r, 1) - 0.75).abs() < 1e-12);
        assert!((rouge_l(&a, &r) - 0.75).abs() < 1e-12);
        // empty prediction scores zero
        assert_eq!(bleu(&[], &a, 1), 0.0);
        assert_eq!(rouge_l(&[], &a), 0.0);
    }

    #[test]
    fn bleu_bounds_and_identity_property() {
        let mut rng = crate::numkit::Rng::seed_from_u64(71);
        let alphabet = ["a", "b", "c", "d", "e"];
        for _ in 0..50 {
            let len = 4 + rng.below(6);
            let pred: Vec<Token> =
                (0..len).map(|_| alphabet[rng.below(alphabet.len())].to_string()).collect();
            let rlen = 4 + rng.below(6);
            let reference: Vec<Token> =
                (0..rlen).map(|_| alphabet[rng.below(alphabet.len())].to_string()).collect();
            for n in [1, 4] {
                let v = bleu(&pred, &reference, n);
                assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            let rl = rouge_l(&pred, &reference);
            assert!((0.0..=1.0 + 1e-12).contains(&rl));
            assert_eq!(bleu(&pred, &pred, 4), 1.0);
            assert_eq!(rouge_l(&pred, &pred), 1.0);
        }
    }

    #[test]
    fn table_csv_is_byte_stable() {
        let mut t = MetricTable::new("demo", &["f1", "bleu1"]);
        t.push_row("baseline", vec![aggregate_cell(&[0.5]), aggregate_cell(&[0.25])]);
        t.push_row(
            "full",
            vec![aggregate_cell(&[0.6, 0.62, 0.64]), aggregate_cell(&[0.3, 0.3, 0.3])],
        );
        let expected = "row,f1,bleu1\nbaseline,0.500000,0.250000\nfull,0.6200±0.0163,0.3000±0.0000\n";
        assert_eq!(t.to_csv(), expected);
    }

    #[test]
    fn single_run_omits_std() {
        assert_eq!(aggregate_cell(&[0.5]), Cell::Scalar(0.5));
        assert!(matches!(aggregate_cell(&[0.5, 0.6]), Cell::MeanStd(_, _)));
    }
}
