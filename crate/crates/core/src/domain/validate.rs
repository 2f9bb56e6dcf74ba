//! Study validation: violations are returned as data, never as errors.

use std::fmt;

use super::{AnnotationSet, DiseaseEntry, DiseaseRegistry, Provenance, Slot, Study};

/// One broken invariant, naming the disease, slot, and rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub disease: Option<String>,
    pub slot: String,
    pub rule: String,
}

impl Violation {
    fn study(slot: &str, rule: impl Into<String>) -> Violation {
        Violation { disease: None, slot: slot.to_string(), rule: rule.into() }
    }

    fn on(disease: &str, slot: &str, rule: impl Into<String>) -> Violation {
        Violation { disease: Some(disease.to_string()), slot: slot.to_string(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.disease {
            Some(d) => write!(f, "{d}/{}: {}", self.slot, self.rule),
            None => write!(f, "{}: {}", self.slot, self.rule),
        }
    }
}

fn check_slot_shape<T>(out: &mut Vec<Violation>, disease: &str, name: &str, slot: &Slot<T>) {
    match slot.provenance {
        Provenance::Absent => {
            if slot.value.is_some() {
                out.push(Violation::on(disease, name, "absent slot carries a value"));
            }
            if slot.confidence.is_some() {
                out.push(Violation::on(disease, name, "absent slot carries a confidence"));
            }
        }
        Provenance::GroundTruth => {
            if slot.value.is_none() {
                out.push(Violation::on(disease, name, "ground_truth slot has no value"));
            }
            if slot.confidence != Some(1.0) {
                out.push(Violation::on(disease, name, "ground_truth slot must have confidence 1.0"));
            }
        }
        Provenance::Pseudo => {
            if slot.value.is_none() {
                out.push(Violation::on(disease, name, "pseudo slot has no value"));
            }
            match slot.confidence {
                Some(c) if (0.0..=1.0).contains(&c) => {}
                _ => out.push(Violation::on(disease, name, "pseudo confidence outside [0,1]")),
            }
        }
    }
}

fn check_entry(out: &mut Vec<Violation>, entry: &DiseaseEntry) {
    let d = &entry.disease;
    check_slot_shape(out, d, "presence", &entry.presence);
    check_slot_shape(out, d, "severity", &entry.severity);
    check_slot_shape(out, d, "hloc", &entry.hloc);
    check_slot_shape(out, d, "vlocs", &entry.vlocs);
    for (i, b) in entry.boxes.iter().enumerate() {
        let name = format!("boxes[{i}]");
        check_slot_shape(out, d, &name, b);
        if let Some(v) = &b.value {
            for rule in v.violations() {
                out.push(Violation::on(d, &name, rule));
            }
        }
    }
    if let Some(v) = &entry.vlocs.value {
        if v.is_empty() {
            out.push(Violation::on(d, "vlocs", "present vloc set must be non-empty"));
        }
    }
    // Attributes may exist only when presence is true or presence is absent.
    let presence_false = entry.presence.value == Some(false);
    if presence_false {
        for (name, absent) in [
            ("severity", entry.severity.is_absent()),
            ("hloc", entry.hloc.is_absent()),
            ("vlocs", entry.vlocs.is_absent()),
            ("boxes", entry.boxes.is_empty()),
        ] {
            if !absent {
                out.push(Violation::on(d, name, "attribute present while presence is false"));
            }
        }
    }
}

fn check_alignment(out: &mut Vec<Violation>, which: &str, set: &AnnotationSet, registry: &DiseaseRegistry) {
    let names: Vec<&String> = set.diseases.iter().map(|d| &d.disease).collect();
    let expected: Vec<&String> = registry.names.iter().collect();
    if names != expected {
        out.push(Violation::study(which, "diseases do not match registry order"));
    }
}

fn check_truth_complete(out: &mut Vec<Violation>, truth: &AnnotationSet, registry: &DiseaseRegistry) {
    for entry in &truth.diseases {
        let d = &entry.disease;
        for (name, gt) in [
            ("presence", entry.presence.is_ground_truth()),
            ("severity", entry.severity.is_ground_truth() || entry.severity.is_absent()),
            ("hloc", entry.hloc.is_ground_truth() || entry.hloc.is_absent()),
            ("vlocs", entry.vlocs.is_ground_truth() || entry.vlocs.is_absent()),
        ] {
            if !gt {
                out.push(Violation::on(d, name, "truth slot must be ground_truth"));
            }
        }
        for (i, b) in entry.boxes.iter().enumerate() {
            if !b.is_ground_truth() {
                out.push(Violation::on(d, &format!("boxes[{i}]"), "truth box must be ground_truth"));
            }
        }
        if entry.is_present() {
            for (name, absent) in [
                ("severity", entry.severity.is_absent()),
                ("hloc", entry.hloc.is_absent()),
                ("vlocs", entry.vlocs.is_absent()),
            ] {
                if absent {
                    out.push(Violation::on(d, name, "truth attribute missing for present disease"));
                }
            }
            if registry.is_groundable(d) && entry.boxes.is_empty() {
                out.push(Violation::on(d, "boxes", "groundable present disease has no truth box"));
            }
        }
        if !registry.is_groundable(d) && !entry.boxes.is_empty() {
            out.push(Violation::on(d, "boxes", "non-groundable disease carries boxes"));
        }
    }
}

fn check_observed_matches_truth(
    out: &mut Vec<Violation>,
    observed: &AnnotationSet,
    truth: &AnnotationSet,
) {
    for (obs, tru) in observed.diseases.iter().zip(&truth.diseases) {
        let d = &obs.disease;
        if obs.presence.is_ground_truth() && obs.presence.value != tru.presence.value {
            out.push(Violation::on(d, "presence", "observed ground_truth differs from truth"));
        }
        if obs.severity.is_ground_truth() && obs.severity.value != tru.severity.value {
            out.push(Violation::on(d, "severity", "observed ground_truth differs from truth"));
        }
        if obs.hloc.is_ground_truth() && obs.hloc.value != tru.hloc.value {
            out.push(Violation::on(d, "hloc", "observed ground_truth differs from truth"));
        }
        if obs.vlocs.is_ground_truth() && obs.vlocs.value != tru.vlocs.value {
            out.push(Violation::on(d, "vlocs", "observed ground_truth differs from truth"));
        }
        let obs_gt_boxes: Vec<_> = obs
            .boxes
            .iter()
            .filter(|b| b.is_ground_truth())
            .filter_map(|b| b.value)
            .collect();
        if !obs_gt_boxes.is_empty() && obs_gt_boxes != tru.box_values() {
            out.push(Violation::on(d, "boxes", "observed ground_truth boxes differ from truth"));
        }
    }
}

/// Check every invariant of the data model; an empty result means the study
/// is internally consistent.
pub fn validate_study(study: &Study, registry: &DiseaseRegistry) -> Vec<Violation> {
    let mut out = Vec::new();
    if study.id.is_empty() {
        out.push(Violation::study("id", "empty study id"));
    }
    if study.grid.data.len() != study.grid.patches() * study.grid.feature_dim {
        out.push(Violation::study("grid", "grid buffer does not match dimensions"));
    }
    if !study.grid.is_finite() {
        out.push(Violation::study("grid", "grid contains non-finite values"));
    }
    check_alignment(&mut out, "truth", &study.truth, registry);
    check_alignment(&mut out, "observed", &study.observed, registry);
    if out.iter().any(|v| v.rule.contains("registry order")) {
        return out; // entry-wise checks would be misaligned
    }
    for entry in &study.truth.diseases {
        check_entry(&mut out, entry);
    }
    for entry in &study.observed.diseases {
        check_entry(&mut out, entry);
    }
    check_truth_complete(&mut out, &study.truth, registry);
    check_observed_matches_truth(&mut out, &study.observed, &study.truth);
    if let Some(r) = &study.report {
        if r.provenance == Provenance::Absent {
            out.push(Violation::study("report", "report provenance cannot be absent"));
        }
        if r.tokens.is_empty() {
            out.push(Violation::study("report", "report has no tokens"));
        }
    }
    if let Some(c) = &study.qa_chain {
        if c.provenance == Provenance::Absent {
            out.push(Violation::study("qa_chain", "chain provenance cannot be absent"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BoundingBox, HLoc, Severity, Slot, VLoc};
    use crate::numkit::FeatureGrid;

    fn consistent_study() -> (Study, DiseaseRegistry) {
        let registry = DiseaseRegistry::small(2);
        let mut truth = AnnotationSet::absent(&registry);
        {
            let e = truth.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.severity = Slot::ground_truth(Severity::Mild);
            e.hloc = Slot::ground_truth(HLoc::RightOnly);
            e.vlocs = Slot::ground_truth([VLoc::Apex].into_iter().collect());
            e.boxes = vec![Slot::ground_truth(BoundingBox::new(0.1, 0.12, 0.3, 0.25).unwrap())];
        }
        {
            let e = truth.get_mut("pleural_effusion").unwrap();
            e.presence = Slot::ground_truth(false);
        }
        let study = Study {
            id: "s-1".into(),
            grid: FeatureGrid::zeros(4, 8),
            observed: truth.clone(),
            truth,
            report: None,
            qa_chain: None,
        };
        (study, registry)
    }

    #[test]
    fn consistent_study_has_no_violations() {
        let (study, registry) = consistent_study();
        assert!(validate_study(&study, &registry).is_empty());
    }

    #[test]
    fn severity_without_presence_is_flagged() {
        let (mut study, registry) = consistent_study();
        let e = study.observed.get_mut("pleural_effusion").unwrap();
        e.severity = Slot::ground_truth(Severity::Mild);
        // also desynchronizes from truth, so expect the gating violation among them
        let v = validate_study(&study, &registry);
        assert!(v.iter().any(|v| {
            v.disease.as_deref() == Some("pleural_effusion")
                && v.slot == "severity"
                && v.rule.contains("presence is false")
        }));
    }

    #[test]
    fn inverted_box_is_flagged() {
        let (mut study, registry) = consistent_study();
        let e = study.truth.get_mut("pneumonia").unwrap();
        e.boxes = vec![Slot::ground_truth(BoundingBox::raw(0.2, 0.2, 0.1, 0.4))];
        let obs = study.observed.get_mut("pneumonia").unwrap();
        obs.boxes = vec![Slot::ground_truth(BoundingBox::raw(0.2, 0.2, 0.1, 0.4))];
        let v = validate_study(&study, &registry);
        assert!(v.iter().any(|v| v.rule == "x1<x2 failed"), "{v:?}");
    }

    #[test]
    fn fabricated_observed_slot_is_flagged() {
        let (mut study, registry) = consistent_study();
        let e = study.observed.get_mut("pneumonia").unwrap();
        e.severity = Slot::ground_truth(Severity::Severe); // truth says mild
        let v = validate_study(&study, &registry);
        assert!(v.iter().any(|v| v.rule.contains("differs from truth")));
    }
}
