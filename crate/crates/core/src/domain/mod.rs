//! Domain vocabulary and the data model shared by every other module:
//! disease registry, label slots with provenance, annotation sets, QA
//! diagnoses, reports, and the `Study` record with its JSONL serialization.

mod validate;

pub use validate::{validate_study, Violation};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::FeatureGrid;

pub type Token = String;

/// The closed set of diseases, which subset is box-annotatable, and a small
/// finding -> causing-disease table used for causal QA pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseRegistry {
    pub names: Vec<String>,
    pub groundable: Vec<String>,
    pub causal_map: BTreeMap<String, String>,
    /// Diseases probed with an explicit negative ("no X") in rendered
    /// reports and QA chains when absent.
    pub negative_probes: Vec<String>,
}

impl DiseaseRegistry {
    pub fn new(
        names: Vec<String>,
        groundable: Vec<String>,
        causal_map: BTreeMap<String, String>,
        negative_probes: Vec<String>,
    ) -> Result<DiseaseRegistry> {
        if names.is_empty() {
            return Err(Error::InvalidConfig("registry needs at least one disease".into()));
        }
        let set: BTreeSet<&String> = names.iter().collect();
        if set.len() != names.len() {
            return Err(Error::InvalidConfig("registry names must be unique".into()));
        }
        for g in &groundable {
            if !set.contains(g) {
                return Err(Error::InvalidConfig(format!("groundable `{g}` not in registry")));
            }
        }
        for (k, v) in &causal_map {
            if !set.contains(k) || !set.contains(v) {
                return Err(Error::InvalidConfig(format!(
                    "causal pair `{k}` -> `{v}` not in registry"
                )));
            }
        }
        for p in &negative_probes {
            if !set.contains(p) {
                return Err(Error::InvalidConfig(format!("probe `{p}` not in registry")));
            }
        }
        Ok(DiseaseRegistry { names, groundable, causal_map, negative_probes })
    }

    /// Default registry: five groundable diseases plus nine report-only ones.
    pub fn default_14() -> DiseaseRegistry {
        let groundable =
            vec!["pneumonia", "pleural_effusion", "pneumothorax", "lesion", "fracture"];
        let report_only = vec![
            "atelectasis",
            "cardiomegaly",
            "consolidation",
            "edema",
            "emphysema",
            "fibrosis",
            "infiltration",
            "mass",
            "nodule",
        ];
        let names: Vec<String> =
            groundable.iter().chain(report_only.iter()).map(|s| s.to_string()).collect();
        let causal_map: BTreeMap<String, String> = [
            ("consolidation", "pneumonia"),
            ("atelectasis", "pleural_effusion"),
            ("edema", "cardiomegaly"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let probes = groundable.iter().map(|s| s.to_string()).collect();
        DiseaseRegistry::new(names, groundable.iter().map(|s| s.to_string()).collect(), causal_map, probes)
            .expect("default registry is valid")
    }

    /// Small registry for enumeration-style tests.
    pub fn small(n: usize) -> DiseaseRegistry {
        let all = ["pneumonia", "pleural_effusion", "atelectasis"];
        assert!(n >= 1 && n <= 3, "small registry supports 1..=3 diseases");
        let names: Vec<String> = all[..n].iter().map(|s| s.to_string()).collect();
        let groundable: Vec<String> =
            names.iter().filter(|s| *s != "atelectasis").cloned().collect();
        let mut causal = BTreeMap::new();
        if n == 3 {
            causal.insert("atelectasis".to_string(), "pleural_effusion".to_string());
        }
        DiseaseRegistry::new(names.clone(), groundable, causal, names).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_groundable(&self, name: &str) -> bool {
        self.groundable.iter().any(|g| g == name)
    }
}

/// Lesion severity grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn token(&self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    pub fn from_token(t: &str) -> Option<Severity> {
        Severity::ALL.into_iter().find(|s| s.token() == t)
    }

    /// Signal magnitude multiplier used by the synthetic world.
    pub fn signal_scale(&self) -> f64 {
        match self {
            Severity::Mild => 1.0,
            Severity::Moderate => 1.5,
            Severity::Severe => 2.0,
        }
    }
}

/// Horizontal (lung-side) location in image-frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HLoc {
    Both,
    LeftOnly,
    RightOnly,
}

impl HLoc {
    pub const ALL: [HLoc; 3] = [HLoc::Both, HLoc::LeftOnly, HLoc::RightOnly];
}

/// Vertical lung band, ordered top to bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VLoc {
    Apex,
    Upper,
    Middle,
    Lower,
    Base,
}

impl VLoc {
    pub const ALL: [VLoc; 5] = [VLoc::Apex, VLoc::Upper, VLoc::Middle, VLoc::Lower, VLoc::Base];

    pub fn token(&self) -> &'static str {
        match self {
            VLoc::Apex => "apex",
            VLoc::Upper => "upper",
            VLoc::Middle => "middle",
            VLoc::Lower => "lower",
            VLoc::Base => "base",
        }
    }

    pub fn from_token(t: &str) -> Option<VLoc> {
        VLoc::ALL.into_iter().find(|v| v.token() == t)
    }

    pub fn index(&self) -> usize {
        VLoc::ALL.iter().position(|v| v == self).unwrap()
    }
}

/// Round a coordinate to the wire precision (six fractional digits).
pub fn quantize6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Validated constructor; coordinates are quantized to 1e-6 so the wire
    /// format stays a six-digit decimal.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BoundingBox> {
        let b = BoundingBox {
            x1: quantize6(x1),
            y1: quantize6(y1),
            x2: quantize6(x2),
            y2: quantize6(y2),
        };
        let violations = b.violations();
        if violations.is_empty() {
            Ok(b)
        } else {
            Err(Error::InvalidData(format!("invalid box: {}", violations.join(", "))))
        }
    }

    /// Unchecked constructor for deserialized or deliberately invalid data.
    pub fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.x1 < self.x2) {
            v.push("x1<x2 failed".to_string());
        }
        if !(self.y1 < self.y2) {
            v.push("y1<y2 failed".to_string());
        }
        for (name, c) in
            [("x1", self.x1), ("y1", self.y1), ("x2", self.x2), ("y2", self.y2)]
        {
            if !(0.0..=1.0).contains(&c) || !c.is_finite() {
                v.push(format!("{name} out of [0,1]"));
            }
        }
        v
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Where a label value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    Absent,
}

/// One annotation slot: a value tagged with provenance and confidence.
/// Ground-truth slots always carry confidence 1.0; absent slots carry
/// neither value nor confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot<T> {
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none", default = "Option::default")]
    pub value: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none", default = "Option::default")]
    pub confidence: Option<f64>,
}

impl<T> Slot<T> {
    pub fn absent() -> Slot<T> {
        Slot { provenance: Provenance::Absent, value: None, confidence: None }
    }

    pub fn ground_truth(value: T) -> Slot<T> {
        Slot { provenance: Provenance::GroundTruth, value: Some(value), confidence: Some(1.0) }
    }

    pub fn pseudo(value: T, confidence: f64) -> Slot<T> {
        Slot { provenance: Provenance::Pseudo, value: Some(value), confidence: Some(confidence) }
    }

    pub fn is_absent(&self) -> bool {
        self.provenance == Provenance::Absent
    }

    pub fn is_ground_truth(&self) -> bool {
        self.provenance == Provenance::GroundTruth
    }

    pub fn is_pseudo(&self) -> bool {
        self.provenance == Provenance::Pseudo
    }

    pub fn as_value(&self) -> Option<&T> {
        self.value.as_ref()
    }
}

/// All annotation slots for one disease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseAnnotation {
    pub presence: Slot<bool>,
    pub severity: Slot<Severity>,
    pub hloc: Slot<HLoc>,
    pub vlocs: Slot<BTreeSet<VLoc>>,
    pub boxes: Vec<Slot<BoundingBox>>,
}

impl DiseaseAnnotation {
    pub fn absent() -> DiseaseAnnotation {
        DiseaseAnnotation {
            presence: Slot::absent(),
            severity: Slot::absent(),
            hloc: Slot::absent(),
            vlocs: Slot::absent(),
            boxes: Vec::new(),
        }
    }

    pub fn is_present(&self) -> bool {
        self.presence.value == Some(true)
    }
}

/// Per-disease annotations, ordered by the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub diseases: Vec<DiseaseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseEntry {
    pub disease: String,
    pub presence: Slot<bool>,
    pub severity: Slot<Severity>,
    pub hloc: Slot<HLoc>,
    pub vlocs: Slot<BTreeSet<VLoc>>,
    pub boxes: Vec<Slot<BoundingBox>>,
}

impl DiseaseEntry {
    pub fn absent(disease: &str) -> DiseaseEntry {
        DiseaseEntry {
            disease: disease.to_string(),
            presence: Slot::absent(),
            severity: Slot::absent(),
            hloc: Slot::absent(),
            vlocs: Slot::absent(),
            boxes: Vec::new(),
        }
    }

    pub fn is_present(&self) -> bool {
        self.presence.value == Some(true)
    }

    /// True when the box list is usable as a ground-truth reference
    /// (non-empty and every box slot is ground truth).
    pub fn boxes_are_ground_truth(&self) -> bool {
        !self.boxes.is_empty() && self.boxes.iter().all(|b| b.is_ground_truth())
    }

    pub fn box_values(&self) -> Vec<BoundingBox> {
        self.boxes.iter().filter_map(|b| b.value).collect()
    }
}

impl AnnotationSet {
    pub fn absent(registry: &DiseaseRegistry) -> AnnotationSet {
        AnnotationSet {
            diseases: registry.names.iter().map(|n| DiseaseEntry::absent(n)).collect(),
        }
    }

    pub fn get(&self, disease: &str) -> Option<&DiseaseEntry> {
        self.diseases.iter().find(|d| d.disease == disease)
    }

    pub fn get_mut(&mut self, disease: &str) -> Option<&mut DiseaseEntry> {
        self.diseases.iter_mut().find(|d| d.disease == disease)
    }

    pub fn present_diseases(&self) -> Vec<&DiseaseEntry> {
        self.diseases.iter().filter(|d| d.is_present()).collect()
    }
}

/// Question type of a QA diagnosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaType {
    Presence,
    Location,
    Severity,
    Causal,
}

/// Structured answer carried next to the answer tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerPayload {
    Presence { present: bool },
    Location { hloc: HLoc, vlocs: BTreeSet<VLoc> },
    Severity { severity: Severity },
    Causal { cause: String },
}

/// One question-answer pair about a single disease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaDiagnosis {
    pub qtype: QaType,
    pub disease: String,
    pub question: Vec<Token>,
    pub answer: Vec<Token>,
    pub payload: AnswerPayload,
}

/// Chain of QA diagnoses with a shared provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaChain {
    pub provenance: Provenance,
    pub items: Vec<QaDiagnosis>,
}

/// Report token sequence with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub tokens: Vec<Token>,
}

/// One synthetic exam: feature grid, complete generator-private truth, the
/// masked observed view handed to learners, and optional report / QA chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub grid: FeatureGrid,
    pub truth: AnnotationSet,
    pub observed: AnnotationSet,
    #[serde(skip_serializing_if = "Option::is_none", default = "Option::default")]
    pub report: Option<Report>,
    #[serde(skip_serializing_if = "Option::is_none", default = "Option::default")]
    pub qa_chain: Option<QaChain>,
}

impl Study {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Study> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Write studies as one JSON object per line.
pub fn write_jsonl(path: &Path, studies: &[Study]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in studies {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Study>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Study::from_json_line(&line)?);
    }
    Ok(out)
}

pub fn studies_to_jsonl(studies: &[Study]) -> Result<String> {
    let mut s = String::new();
    for st in studies {
        s.push_str(&st.to_json_line()?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_registry_shape() {
        let r = DiseaseRegistry::default_14();
        assert_eq!(r.len(), 14);
        assert_eq!(r.groundable.len(), 5);
        assert!(r.is_groundable("pneumonia"));
        assert!(!r.is_groundable("cardiomegaly"));
        for (k, v) in &r.causal_map {
            assert!(r.index_of(k).is_some() && r.index_of(v).is_some());
        }
    }

    #[test]
    fn registry_rejects_duplicates_and_strays() {
        let dup = DiseaseRegistry::new(
            vec!["a".into(), "a".into()],
            vec![],
            BTreeMap::new(),
            vec![],
        );
        assert!(dup.is_err());
        let stray = DiseaseRegistry::new(
            vec!["a".into()],
            vec!["b".into()],
            BTreeMap::new(),
            vec![],
        );
        assert!(stray.is_err());
    }

    #[test]
    fn box_constructor_validates_and_quantizes() {
        assert!(BoundingBox::new(0.2, 0.2, 0.1, 0.4).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.2, 0.5).is_err());
        let b = BoundingBox::new(0.123456789, 0.2, 0.5, 0.6).unwrap();
        assert_eq!(b.x1, 0.123457);
    }

    #[test]
    fn slot_constructors_respect_invariants() {
        let gt = Slot::ground_truth(Severity::Mild);
        assert_eq!(gt.confidence, Some(1.0));
        let ab: Slot<bool> = Slot::absent();
        assert!(ab.value.is_none() && ab.confidence.is_none());
    }

    #[test]
    fn severity_order_and_scale() {
        assert_eq!(Severity::ALL.len(), 3);
        assert!(Severity::Mild < Severity::Severe);
        assert_eq!(Severity::Moderate.signal_scale(), 1.5);
        assert_eq!(VLoc::ALL.len(), 5);
        assert!(VLoc::Apex < VLoc::Base);
        assert_eq!(HLoc::ALL.len(), 3);
    }

    #[test]
    fn study_json_round_trip_is_byte_identical() {
        let registry = DiseaseRegistry::small(2);
        let mut truth = AnnotationSet::absent(&registry);
        {
            let e = truth.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.severity = Slot::ground_truth(Severity::Moderate);
            e.hloc = Slot::ground_truth(HLoc::RightOnly);
            e.vlocs = Slot::ground_truth([VLoc::Lower].into_iter().collect());
            e.boxes = vec![Slot::ground_truth(BoundingBox::new(0.1, 0.6, 0.3, 0.8).unwrap())];
            let o = truth.get_mut("pleural_effusion").unwrap();
            o.presence = Slot::ground_truth(false);
        }
        let study = Study {
            id: "s-0".into(),
            grid: FeatureGrid::zeros(4, 8),
            observed: truth.clone(),
            truth,
            report: Some(Report {
                provenance: Provenance::GroundTruth,
                tokens: vec!["no".into(), "pneumonia".into(), ".".into()],
            }),
            qa_chain: None,
        };
        let line = study.to_json_line().unwrap();
        let back = Study::from_json_line(&line).unwrap();
        assert_eq!(back.to_json_line().unwrap(), line);
        assert_eq!(back, study);
    }
}
