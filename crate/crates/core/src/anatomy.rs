//! Analytic lung geometry: two disjoint x-intervals for the lungs, five
//! equal vertical bands, and the box <-> subregion analysis behind the
//! clinical-consistency checks. Horizontal sides use image-frame left/right;
//! the synthetic world uses the same convention end to end.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, HLoc, VLoc};

/// Fraction of the box's own extent that must overlap a band or lung for
/// the box to count as falling in it.
pub const DEFAULT_MIN_FRAC: f64 = 0.10;

/// Analytic lung contours. Bands partition `[vert_lo, vert_hi]` in order
/// apex, upper, middle, lower, base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LungModel {
    pub right_lung: (f64, f64),
    pub left_lung: (f64, f64),
    pub vertical_extent: (f64, f64),
}

impl Default for LungModel {
    fn default() -> LungModel {
        LungModel {
            right_lung: (0.05, 0.45),
            left_lung: (0.55, 0.95),
            vertical_extent: (0.10, 0.90),
        }
    }
}

impl LungModel {
    /// Half-open `[lo, hi)` interval of one band; `base` is closed at the
    /// bottom of the vertical extent.
    pub fn band_interval(&self, band: VLoc) -> (f64, f64) {
        let (lo, hi) = self.vertical_extent;
        let step = (hi - lo) / VLoc::ALL.len() as f64;
        let i = band.index() as f64;
        (lo + i * step, lo + (i + 1.0) * step)
    }

    pub fn lung_interval(&self, side: Side) -> (f64, f64) {
        match side {
            Side::Right => self.right_lung,
            Side::Left => self.left_lung,
        }
    }
}

/// One physical lung (image frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Right,
    Left,
}

/// Subregions a box falls in: a side verdict plus vertical bands. An
/// extrapulmonary box has no side and no bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubregionSet {
    pub side: Option<HLoc>,
    pub bands: BTreeSet<VLoc>,
}

impl SubregionSet {
    pub fn extrapulmonary() -> SubregionSet {
        SubregionSet { side: None, bands: BTreeSet::new() }
    }

    pub fn is_extrapulmonary(&self) -> bool {
        self.side.is_none()
    }

    /// Lungs touched, as a set usable for intersection tests.
    pub fn lungs(&self) -> BTreeSet<Side> {
        hloc_lungs(self.side)
    }
}

fn hloc_lungs(h: Option<HLoc>) -> BTreeSet<Side> {
    match h {
        None => BTreeSet::new(),
        Some(HLoc::Both) => [Side::Right, Side::Left].into_iter().collect(),
        Some(HLoc::LeftOnly) => [Side::Left].into_iter().collect(),
        Some(HLoc::RightOnly) => [Side::Right].into_iter().collect(),
    }
}

fn overlap((a_lo, a_hi): (f64, f64), (b_lo, b_hi): (f64, f64)) -> f64 {
    (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0)
}

/// Which subregions a box falls in: every band whose interval overlaps the
/// box's y-extent by at least `min_frac` of the box height, and a side
/// verdict from the analogous x-overlap test against each lung. A box
/// qualifying for neither lung, or for no band, is extrapulmonary.
pub fn box_to_subregions(b: &BoundingBox, m: &LungModel, min_frac: f64) -> SubregionSet {
    let band_threshold = min_frac * b.height();
    let mut bands = BTreeSet::new();
    for band in VLoc::ALL {
        if overlap((b.y1, b.y2), m.band_interval(band)) >= band_threshold {
            bands.insert(band);
        }
    }
    let side_threshold = min_frac * b.width();
    let right = overlap((b.x1, b.x2), m.right_lung) >= side_threshold;
    let left = overlap((b.x1, b.x2), m.left_lung) >= side_threshold;
    let side = match (right, left) {
        (true, true) => Some(HLoc::Both),
        (true, false) => Some(HLoc::RightOnly),
        (false, true) => Some(HLoc::LeftOnly),
        (false, false) => None,
    };
    match side {
        Some(s) if !bands.is_empty() => SubregionSet { side: Some(s), bands },
        _ => SubregionSet::extrapulmonary(),
    }
}

/// Union of `box_to_subregions` over several boxes: bands union, and a side
/// computed from the union of lungs touched by any box.
pub fn union_subregions(boxes: &[BoundingBox], m: &LungModel, min_frac: f64) -> SubregionSet {
    let mut bands = BTreeSet::new();
    let mut lungs: BTreeSet<Side> = BTreeSet::new();
    for b in boxes {
        let sr = box_to_subregions(b, m, min_frac);
        bands.extend(sr.bands.iter().cloned());
        lungs.extend(sr.lungs());
    }
    let side = match (lungs.contains(&Side::Right), lungs.contains(&Side::Left)) {
        (true, true) => Some(HLoc::Both),
        (true, false) => Some(HLoc::RightOnly),
        (false, true) => Some(HLoc::LeftOnly),
        (false, false) => None,
    };
    if side.is_none() || bands.is_empty() {
        SubregionSet::extrapulmonary()
    } else {
        SubregionSet { side, bands }
    }
}

/// Keep/drop verdict for one claimed location value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop,
    /// No boxes to check against; the caller skips the check.
    Undecidable,
}

/// Per-value verdicts for claimed locations against a set of boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocationVerdicts {
    pub hloc: Verdict,
    pub vlocs: Vec<(VLoc, Verdict)>,
}

/// Check each claimed location value against the union of subregions the
/// boxes fall in: a vloc is kept iff it appears in the union's bands, and
/// the hloc is kept iff it equals the union's side. With no boxes every
/// verdict is undecidable.
pub fn locations_consistent(
    hloc: Option<HLoc>,
    vlocs: &BTreeSet<VLoc>,
    boxes: &[BoundingBox],
    m: &LungModel,
    min_frac: f64,
) -> LocationVerdicts {
    if boxes.is_empty() {
        return LocationVerdicts {
            hloc: Verdict::Undecidable,
            vlocs: vlocs.iter().map(|v| (*v, Verdict::Undecidable)).collect(),
        };
    }
    let union = union_subregions(boxes, m, min_frac);
    let hl = match hloc {
        None => Verdict::Undecidable,
        Some(h) => {
            if union.side == Some(h) {
                Verdict::Keep
            } else {
                Verdict::Drop
            }
        }
    };
    let vl = vlocs
        .iter()
        .map(|v| (*v, if union.bands.contains(v) { Verdict::Keep } else { Verdict::Drop }))
        .collect();
    LocationVerdicts { hloc: hl, vlocs: vl }
}
