//! Brute-force reference for the consistency engine, used only by tests.
//!
//! Every pseudo value is judged independently against the literal rule text,
//! with its own interval arithmetic (no calls into `anatomy`), so agreement
//! with `apply_clinical_consistency` is a genuine two-route check.

use std::collections::BTreeSet;

use crate::anatomy::LungModel;
use crate::domain::{AnnotationSet, BoundingBox, HLoc, Slot, VLoc};
use crate::error::{Error, Result};

use super::ConsistencyConfig;

const MAX_DISEASES: usize = 3;
const MAX_BOXES: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Lung {
    R,
    L,
}

struct BoxFacts {
    lungs: BTreeSet<Lung>,
    bands: BTreeSet<VLoc>,
    extrapulmonary: bool,
}

fn interval_overlap(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> f64 {
    let lo = if a_lo > b_lo { a_lo } else { b_lo };
    let hi = if a_hi < b_hi { a_hi } else { b_hi };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn box_facts(b: &BoundingBox, m: &LungModel, min_frac: f64) -> BoxFacts {
    let mut lungs = BTreeSet::new();
    let w = b.x2 - b.x1;
    if interval_overlap(b.x1, b.x2, m.right_lung.0, m.right_lung.1) >= min_frac * w {
        lungs.insert(Lung::R);
    }
    if interval_overlap(b.x1, b.x2, m.left_lung.0, m.left_lung.1) >= min_frac * w {
        lungs.insert(Lung::L);
    }
    let mut bands = BTreeSet::new();
    let h = b.y2 - b.y1;
    let (v_lo, v_hi) = m.vertical_extent;
    let step = (v_hi - v_lo) / 5.0;
    for (i, band) in VLoc::ALL.iter().enumerate() {
        let lo = v_lo + i as f64 * step;
        let hi = v_lo + (i + 1) as f64 * step;
        if interval_overlap(b.y1, b.y2, lo, hi) >= min_frac * h {
            bands.insert(*band);
        }
    }
    let extrapulmonary = lungs.is_empty() || bands.is_empty();
    if extrapulmonary {
        BoxFacts { lungs: BTreeSet::new(), bands: BTreeSet::new(), extrapulmonary: true }
    } else {
        BoxFacts { lungs, bands, extrapulmonary: false }
    }
}

fn hloc_lungs(h: HLoc) -> BTreeSet<Lung> {
    match h {
        HLoc::Both => [Lung::R, Lung::L].into_iter().collect(),
        HLoc::LeftOnly => [Lung::L].into_iter().collect(),
        HLoc::RightOnly => [Lung::R].into_iter().collect(),
    }
}

fn union_side(lungs: &BTreeSet<Lung>) -> Option<HLoc> {
    match (lungs.contains(&Lung::R), lungs.contains(&Lung::L)) {
        (true, true) => Some(HLoc::Both),
        (true, false) => Some(HLoc::RightOnly),
        (false, true) => Some(HLoc::LeftOnly),
        (false, false) => None,
    }
}

/// Enumerate each pseudo value independently; keep it iff it satisfies every
/// enabled rule literally. Errors when the input exceeds enumeration bounds
/// (more than three diseases or four boxes on one disease).
pub fn brute_force_oracle(
    a: &AnnotationSet,
    m: &LungModel,
    cfg: &ConsistencyConfig,
) -> Result<AnnotationSet> {
    if a.diseases.len() > MAX_DISEASES {
        return Err(Error::InvalidData(format!(
            "oracle bound: {} diseases exceeds {MAX_DISEASES}",
            a.diseases.len()
        )));
    }
    let mut out = a.clone();
    for entry in &mut out.diseases {
        if entry.boxes.len() > MAX_BOXES {
            return Err(Error::InvalidData(format!(
                "oracle bound: {} boxes exceeds {MAX_BOXES}",
                entry.boxes.len()
            )));
        }
        let gt_negative =
            entry.presence.is_ground_truth() && entry.presence.value == Some(false);
        let gt_boxes: Vec<BoundingBox> = entry
            .boxes
            .iter()
            .filter(|b| b.is_ground_truth())
            .filter_map(|b| b.value)
            .collect();
        let gt_hloc = if entry.hloc.is_ground_truth() { entry.hloc.value } else { None };
        let gt_vlocs: Option<BTreeSet<VLoc>> =
            if entry.vlocs.is_ground_truth() { entry.vlocs.value.clone() } else { None };

        // Union of subregions occupied by the ground-truth boxes.
        let mut union_lungs: BTreeSet<Lung> = BTreeSet::new();
        let mut union_bands: BTreeSet<VLoc> = BTreeSet::new();
        for b in &gt_boxes {
            let facts = box_facts(b, m, cfg.min_frac);
            union_lungs.extend(facts.lungs.iter().cloned());
            union_bands.extend(facts.bands.iter().cloned());
        }
        if union_lungs.is_empty() || union_bands.is_empty() {
            union_lungs.clear();
            union_bands.clear();
        }

        // severity: only R1 applies.
        if entry.severity.is_pseudo() && cfg.gate_severity && gt_negative {
            entry.severity = Slot::absent();
        }

        // hloc: R1, then R2 against the ground-truth box union.
        if entry.hloc.is_pseudo() {
            let mut keep = true;
            if cfg.gate_hloc && gt_negative {
                keep = false;
            }
            if keep && cfg.box_location_cross_check && !gt_boxes.is_empty() {
                keep = union_side(&union_lungs) == entry.hloc.value;
            }
            if !keep {
                entry.hloc = Slot::absent();
            }
        }

        // vlocs: judged value by value.
        if entry.vlocs.is_pseudo() {
            let confidence = entry.vlocs.confidence.unwrap_or(1.0);
            let mut kept: BTreeSet<VLoc> = BTreeSet::new();
            for v in entry.vlocs.value.clone().unwrap_or_default() {
                let mut keep = true;
                if cfg.gate_vlocs && gt_negative {
                    keep = false;
                }
                if keep && cfg.box_location_cross_check && !gt_boxes.is_empty() {
                    keep = union_bands.contains(&v);
                }
                if keep {
                    kept.insert(v);
                }
            }
            entry.vlocs =
                if kept.is_empty() { Slot::absent() } else { Slot::pseudo(kept, confidence) };
        }

        // boxes: judged box by box (R1, then R3 against ground-truth locations).
        let mut kept_boxes = Vec::new();
        for b in entry.boxes.clone() {
            if !b.is_pseudo() {
                kept_boxes.push(b);
                continue;
            }
            let mut keep = true;
            if cfg.gate_boxes && gt_negative {
                keep = false;
            }
            if keep && cfg.box_location_cross_check && (gt_hloc.is_some() || gt_vlocs.is_some()) {
                let facts = box_facts(b.value.as_ref().unwrap(), m, cfg.min_frac);
                if facts.extrapulmonary {
                    keep = false;
                }
                if keep {
                    if let Some(gtv) = &gt_vlocs {
                        keep = facts.bands.intersection(gtv).next().is_some();
                    }
                }
                if keep {
                    if let Some(gth) = gt_hloc {
                        keep = facts.lungs.intersection(&hloc_lungs(gth)).next().is_some();
                    }
                }
            }
            if keep {
                kept_boxes.push(b);
            }
        }
        entry.boxes = kept_boxes;
    }
    Ok(out)
}

/// Fixed grid of twelve candidate boxes used by the exhaustive sweep:
/// single-band and multi-band boxes in each lung, a both-lung spanner,
/// an extrapulmonary box, and small/tall variants.
pub fn candidate_boxes() -> Vec<BoundingBox> {
    let bx = |x1, y1, x2, y2| BoundingBox::new(x1, y1, x2, y2).unwrap();
    vec![
        bx(0.10, 0.11, 0.40, 0.25), // right apex
        bx(0.10, 0.43, 0.40, 0.57), // right middle
        bx(0.10, 0.75, 0.40, 0.89), // right base
        bx(0.60, 0.11, 0.90, 0.25), // left apex
        bx(0.60, 0.43, 0.90, 0.57), // left middle
        bx(0.60, 0.75, 0.90, 0.89), // left base
        bx(0.30, 0.45, 0.70, 0.55), // spans both lungs, middle
        bx(0.47, 0.40, 0.53, 0.60), // mediastinal gap: extrapulmonary
        bx(0.15, 0.28, 0.25, 0.40), // small right upper
        bx(0.12, 0.12, 0.35, 0.73), // tall right: apex..lower
        bx(0.20, 0.60, 0.80, 0.88), // wide both, lower+base
        bx(0.62, 0.27, 0.88, 0.41), // left upper
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::apply_clinical_consistency;
    use crate::domain::{DiseaseRegistry, Severity};

    #[test]
    fn oracle_rejects_oversized_inputs() {
        let a = AnnotationSet::absent(&DiseaseRegistry::default_14());
        assert!(brute_force_oracle(&a, &LungModel::default(), &Default::default()).is_err());
    }

    #[test]
    fn empty_pseudo_set_is_identity() {
        let registry = DiseaseRegistry::small(2);
        let mut a = AnnotationSet::absent(&registry);
        a.get_mut("pneumonia").unwrap().presence = Slot::ground_truth(true);
        let out = brute_force_oracle(&a, &LungModel::default(), &Default::default()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn extrapulmonary_pseudo_box_removed_when_gt_locations_exist() {
        let registry = DiseaseRegistry::small(1);
        let mut a = AnnotationSet::absent(&registry);
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(true);
            e.hloc = Slot::ground_truth(HLoc::RightOnly);
            e.boxes = vec![Slot::pseudo(candidate_boxes()[7], 0.9)];
        }
        let m = LungModel::default();
        let cfg = ConsistencyConfig::default();
        let out = brute_force_oracle(&a, &m, &cfg).unwrap();
        assert!(out.get("pneumonia").unwrap().boxes.is_empty());
        let (engine, _) = apply_clinical_consistency(&a, &m, &cfg);
        assert_eq!(out, engine);
    }

    #[test]
    fn oracle_matches_engine_on_spot_checks() {
        let registry = DiseaseRegistry::small(3);
        let m = LungModel::default();
        let cfg = ConsistencyConfig::default();
        let boxes = candidate_boxes();
        // A handful of hand-picked mixed configurations.
        let mut a = AnnotationSet::absent(&registry);
        {
            let e = a.get_mut("pneumonia").unwrap();
            e.presence = Slot::ground_truth(false);
            e.severity = Slot::pseudo(Severity::Severe, 0.95);
            e.boxes = vec![Slot::pseudo(boxes[0], 0.8)];
        }
        {
            let e = a.get_mut("pleural_effusion").unwrap();
            e.presence = Slot::ground_truth(true);
            e.boxes = vec![Slot::ground_truth(boxes[1]), Slot::pseudo(boxes[3], 0.9)];
            e.vlocs = Slot::pseudo([VLoc::Middle, VLoc::Base].into_iter().collect(), 0.8);
            e.hloc = Slot::pseudo(HLoc::Both, 0.8);
        }
        {
            let e = a.get_mut("atelectasis").unwrap();
            e.presence = Slot::pseudo(true, 0.75);
            e.vlocs = Slot::ground_truth([VLoc::Apex].into_iter().collect());
            e.boxes = vec![Slot::pseudo(boxes[2], 0.9)];
        }
        let oracle = brute_force_oracle(&a, &m, &cfg).unwrap();
        let (engine, _) = apply_clinical_consistency(&a, &m, &cfg);
        assert_eq!(oracle, engine);
    }
}
