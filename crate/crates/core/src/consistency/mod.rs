//! Pseudo-label filtering: confidence thresholding plus the clinical
//! consistency rules that cross-check annotation types.
//!
//! Rules run in one pass, R1 -> R2 -> R3. Each rule's preconditions read
//! only ground-truth slots, which the rules never modify, so the verdicts
//! are independent and a single pass reaches the fixed point.

pub mod oracle;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::anatomy::{box_to_subregions, locations_consistent, LungModel, Verdict};
use crate::domain::{AnnotationSet, BoundingBox, HLoc, Slot, VLoc};
use crate::error::{Error, Result};

/// Which attribute slots a ground-truth-negative presence gates (R1), and
/// whether the box/location cross-checks (R2/R3) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub confidence_threshold: f64,
    pub gate_severity: bool,
    pub gate_hloc: bool,
    pub gate_vlocs: bool,
    pub gate_boxes: bool,
    pub box_location_cross_check: bool,
    pub min_frac: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> ConsistencyConfig {
        ConsistencyConfig {
            confidence_threshold: 0.7,
            gate_severity: true,
            gate_hloc: true,
            gate_vlocs: true,
            gate_boxes: true,
            box_location_cross_check: true,
            min_frac: crate::anatomy::DEFAULT_MIN_FRAC,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence threshold must lie in (0,1), got {}",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Which rule removed a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    R1PresenceGate,
    R2LocationVsGtBoxes,
    R3BoxVsGtLocations,
}

/// Audit record for one removed pseudo value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub disease: String,
    pub slot: String,
    pub value: String,
    pub rule: RuleId,
}

/// Drop pseudo slots whose confidence is strictly below `t`; ground-truth
/// slots are immune. Boundary confidences survive.
pub fn filter_by_confidence(a: &AnnotationSet, t: f64) -> AnnotationSet {
    fn filter_slot<T: Clone>(s: &Slot<T>, t: f64) -> Slot<T> {
        if s.is_pseudo() && s.confidence.unwrap_or(0.0) < t {
            Slot::absent()
        } else {
            s.clone()
        }
    }
    let mut out = a.clone();
    for entry in &mut out.diseases {
        entry.presence = filter_slot(&entry.presence, t);
        entry.severity = filter_slot(&entry.severity, t);
        entry.hloc = filter_slot(&entry.hloc, t);
        entry.vlocs = filter_slot(&entry.vlocs, t);
        entry.boxes.retain(|b| !(b.is_pseudo() && b.confidence.unwrap_or(0.0) < t));
    }
    out
}

fn fmt_box(b: &BoundingBox) -> String {
    format!("({:.6},{:.6},{:.6},{:.6})", b.x1, b.y1, b.x2, b.y2)
}

fn lungs_of(h: HLoc) -> BTreeSet<crate::anatomy::Side> {
    use crate::anatomy::Side;
    match h {
        HLoc::Both => [Side::Right, Side::Left].into_iter().collect(),
        HLoc::LeftOnly => [Side::Left].into_iter().collect(),
        HLoc::RightOnly => [Side::Right].into_iter().collect(),
    }
}

/// Apply the clinical-consistency rules to one annotation set. Individual
/// offending pseudo values are removed; the sample itself and all
/// ground-truth slots are untouched. Returns the cleaned set and the
/// removal log.
///
/// - R1: presence ground-truth false removes the disease's pseudo
///   severity / hloc / vlocs / boxes (per enabled gate).
/// - R2: ground-truth boxes remove pseudo location values that fall outside
///   the union of subregions the boxes occupy.
/// - R3: ground-truth locations remove pseudo boxes whose subregions are
///   disjoint from them (extrapulmonary boxes always fail).
///
/// R2 fires when at least one box slot is ground truth (the ground-truth
/// subset is the reference); both cross-checks stay silent when both sides
/// are pseudo.
pub fn apply_clinical_consistency(
    a: &AnnotationSet,
    m: &LungModel,
    cfg: &ConsistencyConfig,
) -> (AnnotationSet, Vec<RemovalRecord>) {
    let mut out = a.clone();
    let mut log = Vec::new();
    for entry in &mut out.diseases {
        let disease = entry.disease.clone();
        // R1: ground-truth negative presence gates pseudo attributes.
        if entry.presence.is_ground_truth() && entry.presence.value == Some(false) {
            if cfg.gate_severity && entry.severity.is_pseudo() {
                let v = entry.severity.value.unwrap();
                log.push(RemovalRecord {
                    disease: disease.clone(),
                    slot: "severity".into(),
                    value: v.token().into(),
                    rule: RuleId::R1PresenceGate,
                });
                entry.severity = Slot::absent();
            }
            if cfg.gate_hloc && entry.hloc.is_pseudo() {
                let v = entry.hloc.value.unwrap();
                log.push(RemovalRecord {
                    disease: disease.clone(),
                    slot: "hloc".into(),
                    value: format!("{v:?}"),
                    rule: RuleId::R1PresenceGate,
                });
                entry.hloc = Slot::absent();
            }
            if cfg.gate_vlocs && entry.vlocs.is_pseudo() {
                for v in entry.vlocs.value.as_ref().unwrap() {
                    log.push(RemovalRecord {
                        disease: disease.clone(),
                        slot: "vlocs".into(),
                        value: v.token().into(),
                        rule: RuleId::R1PresenceGate,
                    });
                }
                entry.vlocs = Slot::absent();
            }
            if cfg.gate_boxes {
                let mut kept = Vec::new();
                for b in entry.boxes.drain(..) {
                    if b.is_pseudo() {
                        log.push(RemovalRecord {
                            disease: disease.clone(),
                            slot: "boxes".into(),
                            value: fmt_box(b.value.as_ref().unwrap()),
                            rule: RuleId::R1PresenceGate,
                        });
                    } else {
                        kept.push(b);
                    }
                }
                entry.boxes = kept;
            }
        }
        if !cfg.box_location_cross_check {
            continue;
        }
        // R2: ground-truth boxes vet pseudo location values one by one.
        let gt_boxes: Vec<BoundingBox> = entry
            .boxes
            .iter()
            .filter(|b| b.is_ground_truth())
            .filter_map(|b| b.value)
            .collect();
        if !gt_boxes.is_empty() {
            let claimed_hloc = if entry.hloc.is_pseudo() { entry.hloc.value } else { None };
            let claimed_vlocs: BTreeSet<VLoc> = if entry.vlocs.is_pseudo() {
                entry.vlocs.value.clone().unwrap_or_default()
            } else {
                BTreeSet::new()
            };
            let verdicts =
                locations_consistent(claimed_hloc, &claimed_vlocs, &gt_boxes, m, cfg.min_frac);
            if verdicts.hloc == Verdict::Drop {
                let v = entry.hloc.value.unwrap();
                log.push(RemovalRecord {
                    disease: disease.clone(),
                    slot: "hloc".into(),
                    value: format!("{v:?}"),
                    rule: RuleId::R2LocationVsGtBoxes,
                });
                entry.hloc = Slot::absent();
            }
            if entry.vlocs.is_pseudo() {
                let mut kept: BTreeSet<VLoc> = BTreeSet::new();
                for (v, verdict) in &verdicts.vlocs {
                    if *verdict == Verdict::Keep {
                        kept.insert(*v);
                    } else {
                        log.push(RemovalRecord {
                            disease: disease.clone(),
                            slot: "vlocs".into(),
                            value: v.token().into(),
                            rule: RuleId::R2LocationVsGtBoxes,
                        });
                    }
                }
                let confidence = entry.vlocs.confidence.unwrap_or(1.0);
                entry.vlocs =
                    if kept.is_empty() { Slot::absent() } else { Slot::pseudo(kept, confidence) };
            }
        }
        // R3: ground-truth locations vet pseudo boxes.
        let gt_hloc = if entry.hloc.is_ground_truth() { entry.hloc.value } else { None };
        let gt_vlocs: Option<BTreeSet<VLoc>> =
            if entry.vlocs.is_ground_truth() { entry.vlocs.value.clone() } else { None };
        if gt_hloc.is_some() || gt_vlocs.is_some() {
            let mut kept = Vec::new();
            for b in entry.boxes.drain(..) {
                if !b.is_pseudo() {
                    kept.push(b);
                    continue;
                }
                let bv = b.value.unwrap();
                let sr = box_to_subregions(&bv, m, cfg.min_frac);
                let mut drop = sr.is_extrapulmonary();
                if let Some(gtv) = &gt_vlocs {
                    drop = drop || sr.bands.intersection(gtv).next().is_none();
                }
                if let Some(gth) = gt_hloc {
                    drop = drop || sr.lungs().intersection(&lungs_of(gth)).next().is_none();
                }
                if drop {
                    log.push(RemovalRecord {
                        disease: disease.clone(),
                        slot: "boxes".into(),
                        value: fmt_box(&bv),
                        rule: RuleId::R3BoxVsGtLocations,
                    });
                } else {
                    kept.push(b);
                }
            }
            entry.boxes = kept;
        }
    }
    (out, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DiseaseRegistry, Severity};

    fn base_set() -> AnnotationSet {
        AnnotationSet::absent(&DiseaseRegistry::small(3))
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn confidence_filter_drops_below_threshold() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.severity = Slot::pseudo(Severity::Moderate, 0.65);
            e.hloc = Slot::pseudo(HLoc::Both, 0.7); // boundary survives (strict <)
        }
        let out = filter_by_confidence(&a, 0.7);
        let e = out.get("pneumonia").unwrap();
        assert!(e.severity.is_absent());
        assert!(e.hloc.is_pseudo());
    }

    #[test]
    fn confidence_filter_never_touches_ground_truth() {
        let mut a = base_set();
        a.get_mut("pneumonia").unwrap().presence = Slot::ground_truth(true);
        a.get_mut("pneumonia").unwrap().severity = Slot::ground_truth(Severity::Mild);
        for t in [0.0, 0.5, 0.99] {
            let out = filter_by_confidence(&a, t);
            assert_eq!(out, a, "threshold {t}");
        }
    }

    #[test]
    fn zero_threshold_is_identity() {
        let mut a = base_set();
        a.get_mut("pneumonia").unwrap().presence = Slot::pseudo(true, 0.1);
        a.get_mut("pneumonia").unwrap().severity = Slot::pseudo(Severity::Severe, 0.0);
        let out = filter_by_confidence(&a, 0.0);
        assert_eq!(out, a);
    }

    #[test]
    fn r1_gates_pseudo_attributes_of_negative_disease() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(false);
            e.severity = Slot::pseudo(Severity::Moderate, 0.9);
        }
        let (out, log) = apply_clinical_consistency(&a, &LungModel::default(), &Default::default());
        assert!(out.get("pneumonia").unwrap().severity.is_absent());
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].rule, RuleId::R1PresenceGate);
        assert_eq!(log[0].slot, "severity");
    }

    #[test]
    fn r2_refines_pseudo_vlocs_with_gt_boxes() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            // box only in the apex band of the right lung
            e.boxes = vec![Slot::ground_truth(bx(0.10, 0.11, 0.40, 0.25))];
            e.vlocs = Slot::pseudo([VLoc::Apex, VLoc::Lower].into_iter().collect(), 0.8);
        }
        let (out, log) = apply_clinical_consistency(&a, &LungModel::default(), &Default::default());
        let e = out.get("pneumonia").unwrap();
        assert_eq!(e.vlocs.value.as_ref().unwrap().len(), 1);
        assert!(e.vlocs.value.as_ref().unwrap().contains(&VLoc::Apex));
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].rule, RuleId::R2LocationVsGtBoxes);
        assert_eq!(log[0].value, "lower");
    }

    #[test]
    fn r3_removes_pseudo_box_disjoint_from_gt_locations() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.hloc = Slot::ground_truth(HLoc::RightOnly);
            e.vlocs = Slot::ground_truth([VLoc::Apex].into_iter().collect());
            e.boxes = vec![
                Slot::pseudo(bx(0.10, 0.11, 0.40, 0.25), 0.9), // right apex: kept
                Slot::pseudo(bx(0.60, 0.60, 0.80, 0.72), 0.9), // left lower: dropped
            ];
        }
        let (out, log) = apply_clinical_consistency(&a, &LungModel::default(), &Default::default());
        assert_eq!(out.get("pneumonia").unwrap().boxes.len(), 1);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].rule, RuleId::R3BoxVsGtLocations);
    }

    #[test]
    fn ground_truth_only_set_is_a_fixed_point() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.severity = Slot::ground_truth(Severity::Mild);
            e.hloc = Slot::ground_truth(HLoc::RightOnly);
            e.vlocs = Slot::ground_truth([VLoc::Apex].into_iter().collect());
            e.boxes = vec![Slot::ground_truth(bx(0.10, 0.11, 0.40, 0.25))];
        }
        let (out, log) = apply_clinical_consistency(&a, &LungModel::default(), &Default::default());
        assert_eq!(out, a);
        assert!(log.is_empty());
    }

    #[test]
    fn engine_is_idempotent() {
        let mut a = base_set();
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(false);
            e.severity = Slot::pseudo(Severity::Moderate, 0.9);
            e.hloc = Slot::pseudo(HLoc::Both, 0.8);
        }
        {
            let e = a.get_mut("pleural_effusion").unwrap();
            e.presence = Slot::ground_truth(true);
            e.boxes = vec![Slot::ground_truth(bx(0.10, 0.11, 0.40, 0.25))];
            e.vlocs = Slot::pseudo([VLoc::Apex, VLoc::Base].into_iter().collect(), 0.9);
        }
        let m = LungModel::default();
        let cfg = ConsistencyConfig::default();
        let (once, _) = apply_clinical_consistency(&a, &m, &cfg);
        let (twice, log2) = apply_clinical_consistency(&once, &m, &cfg);
        assert_eq!(once, twice);
        assert!(log2.is_empty());
    }
}
