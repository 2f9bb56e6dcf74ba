//! Deterministic synthetic corpus generator and annotation masker.
//!
//! Each study is a pure function of (config, index): lesions are planted as
//! boxes inside the analytic lungs, a disease-specific signal (scaled by
//! severity) is added to the grid cells the boxes cover, and truth locations
//! are computed back from the planted boxes so labels and geometry agree by
//! construction. Masking projects the truth into one of four observation
//! buckets, simulating datasets that each carry one annotation type.

use serde::{Deserialize, Serialize};

use crate::anatomy::{union_subregions, LungModel, DEFAULT_MIN_FRAC};
use crate::domain::{
    AnnotationSet, BoundingBox, DiseaseRegistry, Provenance, QaChain, Report, Severity, Slot,
    Study,
};
use crate::error::{Error, Result};
use crate::numkit::{FeatureGrid, Rng};
use crate::qachain::grammar;

/// Generator configuration. Defaults target the full-size world; tests and
/// experiments shrink the grid for speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid_size: usize,
    pub feature_dim: usize,
    pub disease_count: usize,
    pub lesion_signal_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Probability that a study carries no disease at all.
    pub negative_rate: f64,
    /// Most diseases planted in one study.
    pub max_present: usize,
    /// Probability that a planted disease gets a second box.
    pub two_box_rate: f64,
    /// Diseases eligible for planting; `None` means the whole registry.
    pub disease_pool: Option<Vec<String>>,
}

impl Default for WorldConfig {
    fn default() -> WorldConfig {
        WorldConfig {
            grid_size: 16,
            feature_dim: 32,
            disease_count: 14,
            lesion_signal_strength: 1.0,
            noise_std: 0.1,
            seed: 0,
            negative_rate: 0.3,
            max_present: 3,
            two_box_rate: 0.25,
            disease_pool: None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, registry: &DiseaseRegistry) -> Result<()> {
        if self.grid_size < 4 {
            return Err(Error::InvalidConfig(format!("grid_size must be >= 4, got {}", self.grid_size)));
        }
        if self.feature_dim < 8 {
            return Err(Error::InvalidConfig(format!("feature_dim must be >= 8, got {}", self.feature_dim)));
        }
        if self.disease_count != registry.len() {
            return Err(Error::InvalidConfig(format!(
                "disease_count {} does not match registry size {}",
                self.disease_count,
                registry.len()
            )));
        }
        if self.feature_dim < registry.len() {
            return Err(Error::InvalidConfig(
                "feature_dim must cover one signal channel per disease".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.lesion_signal_strength > self.noise_std) {
            return Err(Error::InvalidConfig(format!(
                "need lesion_signal_strength > noise_std >= 0, got {} vs {}",
                self.lesion_signal_strength, self.noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.negative_rate) {
            return Err(Error::InvalidConfig("negative_rate must lie in [0,1)".into()));
        }
        if self.max_present == 0 {
            return Err(Error::InvalidConfig("max_present must be >= 1".into()));
        }
        if let Some(pool) = &self.disease_pool {
            if pool.is_empty() {
                return Err(Error::InvalidConfig("disease_pool cannot be empty".into()));
            }
            for d in pool {
                if registry.index_of(d).is_none() {
                    return Err(Error::InvalidConfig(format!("pool disease `{d}` not in registry")));
                }
            }
        }
        Ok(())
    }
}

/// Fractions of studies whose observation keeps, respectively: reports only,
/// classification+boxes only, QA chains only, everything.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProfile {
    pub reports_only: f64,
    pub labels_and_boxes: f64,
    pub qa_only: f64,
    pub full: f64,
}

impl MaskProfile {
    pub fn new(reports_only: f64, labels_and_boxes: f64, qa_only: f64, full: f64) -> MaskProfile {
        MaskProfile { reports_only, labels_and_boxes, qa_only, full }
    }

    pub fn fractions(&self) -> [f64; 4] {
        [self.reports_only, self.labels_and_boxes, self.qa_only, self.full]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidConfig("mask fractions must be non-negative".into()));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("mask fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    ReportsOnly,
    LabelsAndBoxes,
    QaOnly,
    Full,
}

/// One planted lesion region (recorded as a truth box only for groundable
/// diseases; non-groundable regions still shape locations and signal).
struct PlantedDisease {
    disease: String,
    severity: Severity,
    boxes: Vec<BoundingBox>,
}

fn sample_box_in(rng: &mut Rng, lung: (f64, f64), m: &LungModel) -> BoundingBox {
    let (lx1, lx2) = lung;
    let max_w = (lx2 - lx1 - 0.02).min(0.28);
    let w = rng.range_f64(0.10_f64.min(max_w), max_w);
    let x1 = rng.range_f64(lx1 + 0.005, lx2 - w - 0.005);
    // one band, or two adjacent bands
    let two_bands = rng.bernoulli(0.3);
    let b0 = rng.below(if two_bands { 4 } else { 5 });
    let (lo, _) = m.band_interval(crate::domain::VLoc::ALL[b0]);
    let (_, hi) =
        m.band_interval(crate::domain::VLoc::ALL[if two_bands { b0 + 1 } else { b0 }]);
    let span = hi - lo;
    let h = rng.range_f64(0.55 * span, 0.9 * span);
    let y1 = lo + rng.range_f64(0.02 * span, span - h - 0.02 * span);
    BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("sampled box is valid by construction")
}

fn plant_diseases(
    rng: &mut Rng,
    cfg: &WorldConfig,
    registry: &DiseaseRegistry,
    m: &LungModel,
) -> Vec<PlantedDisease> {
    if rng.bernoulli(cfg.negative_rate) {
        return Vec::new();
    }
    let pool: Vec<String> = match &cfg.disease_pool {
        Some(p) => p.clone(),
        None => registry.names.clone(),
    };
    let n = 1 + rng.below(cfg.max_present.min(pool.len()));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut order);
    let mut planted: Vec<PlantedDisease> = order[..n]
        .iter()
        .map(|&i| {
            let disease = pool[i].clone();
            let severity = *rng.choose(&Severity::ALL);
            let first_right = rng.bernoulli(0.5);
            let lung = if first_right { m.right_lung } else { m.left_lung };
            let mut boxes = vec![sample_box_in(rng, lung, m)];
            if rng.bernoulli(cfg.two_box_rate) {
                let other = if rng.bernoulli(0.5) == first_right { m.left_lung } else { lung };
                boxes.push(sample_box_in(rng, other, m));
            }
            PlantedDisease { disease, severity, boxes }
        })
        .collect();
    // registry order for determinism of downstream rendering
    planted.sort_by_key(|p| registry.index_of(&p.disease).unwrap());
    planted
}

fn overlap_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Fraction of the cell's area covered by the box.
fn cell_coverage(grid_size: usize, row: usize, col: usize, b: &BoundingBox) -> f64 {
    let g = grid_size as f64;
    let cell_x = (col as f64 / g, (col as f64 + 1.0) / g);
    let cell_y = (row as f64 / g, (row as f64 + 1.0) / g);
    let ox = overlap_1d(cell_x, (b.x1, b.x2));
    let oy = overlap_1d(cell_y, (b.y1, b.y2));
    ox * oy * g * g
}

fn build_grid(
    rng: &mut Rng,
    cfg: &WorldConfig,
    registry: &DiseaseRegistry,
    planted: &[PlantedDisease],
) -> FeatureGrid {
    let mut grid = FeatureGrid::zeros(cfg.grid_size, cfg.feature_dim);
    if cfg.noise_std > 0.0 {
        for v in &mut grid.data {
            *v = rng.normal_scaled(0.0, cfg.noise_std);
        }
    }
    for p in planted {
        let channel = registry.index_of(&p.disease).unwrap();
        let amplitude = cfg.lesion_signal_strength * p.severity.signal_scale();
        for b in &p.boxes {
            for row in 0..cfg.grid_size {
                for col in 0..cfg.grid_size {
                    let frac = cell_coverage(cfg.grid_size, row, col, b);
                    if frac > 0.0 {
                        grid.cell_mut(row, col)[channel] += amplitude * frac;
                    }
                }
            }
        }
    }
    grid
}

/// Generate one study (pure in `(cfg, index)`).
pub fn generate_study(
    cfg: &WorldConfig,
    registry: &DiseaseRegistry,
    m: &LungModel,
    index: u64,
) -> Study {
    let mut rng = Rng::seed_from_u64(cfg.seed).fork("synthworld").fork_index(index);
    let planted = plant_diseases(&mut rng, cfg, registry, m);
    let grid = build_grid(&mut rng, cfg, registry, &planted);

    let mut truth = AnnotationSet::absent(registry);
    for entry in &mut truth.diseases {
        entry.presence = Slot::ground_truth(false);
    }
    for p in &planted {
        let sr = union_subregions(&p.boxes, m, DEFAULT_MIN_FRAC);
        let entry = truth.get_mut(&p.disease).expect("planted disease is registered");
        entry.presence = Slot::ground_truth(true);
        entry.severity = Slot::ground_truth(p.severity);
        entry.hloc = Slot::ground_truth(sr.side.expect("planted boxes sit inside a lung"));
        entry.vlocs = Slot::ground_truth(sr.bands.clone());
        if registry.is_groundable(&p.disease) {
            entry.boxes = p.boxes.iter().map(|b| Slot::ground_truth(*b)).collect();
        }
    }

    let report = grammar::render_report(&truth, registry);
    let chain = grammar::render_qa_chain(&truth, registry);
    Study {
        id: format!("study-{index:06}"),
        grid,
        observed: truth.clone(),
        truth,
        report: Some(Report { provenance: Provenance::GroundTruth, tokens: report }),
        qa_chain: Some(QaChain { provenance: Provenance::GroundTruth, items: chain }),
    }
}

/// Generate a corpus of `n` studies with complete truth and fully observed
/// annotations. Deterministic: the same `(cfg, n)` yields the same corpus.
pub fn generate_corpus(
    cfg: &WorldConfig,
    registry: &DiseaseRegistry,
    n: usize,
) -> Result<Vec<Study>> {
    if n == 0 {
        return Err(Error::InvalidConfig("corpus size must be >= 1".into()));
    }
    cfg.validate(registry)?;
    let m = LungModel::default();
    Ok((0..n as u64).map(|i| generate_study(cfg, registry, &m, i)).collect())
}

/// Deterministic bucket assignment: indices are shuffled once with `seed`,
/// then split at cumulative-rounded boundaries.
pub fn assign_buckets(n: usize, profile: &MaskProfile, seed: u64) -> Vec<Bucket> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed).fork("mask-buckets");
    rng.shuffle(&mut order);
    let f = profile.fractions();
    let mut boundaries = [0usize; 4];
    let mut cum = 0.0;
    for (i, frac) in f.iter().enumerate() {
        cum += frac;
        boundaries[i] = (cum * n as f64).round() as usize;
    }
    boundaries[3] = n;
    let mut buckets = vec![Bucket::Full; n];
    for (pos, &study_idx) in order.iter().enumerate() {
        let b = if pos < boundaries[0] {
            Bucket::ReportsOnly
        } else if pos < boundaries[1] {
            Bucket::LabelsAndBoxes
        } else if pos < boundaries[2] {
            Bucket::QaOnly
        } else {
            Bucket::Full
        };
        buckets[study_idx] = b;
    }
    buckets
}

fn project_observed(study: &Study, bucket: Bucket, registry: &DiseaseRegistry) -> Study {
    let mut out = study.clone();
    let truth_report = match &study.report {
        Some(r) if r.provenance == Provenance::GroundTruth => r.tokens.clone(),
        _ => grammar::render_report(&study.truth, registry),
    };
    let truth_chain = match &study.qa_chain {
        Some(c) if c.provenance == Provenance::GroundTruth => c.items.clone(),
        _ => grammar::render_qa_chain(&study.truth, registry),
    };
    match bucket {
        Bucket::ReportsOnly => {
            out.observed = AnnotationSet::absent(registry);
            out.report = Some(Report { provenance: Provenance::GroundTruth, tokens: truth_report });
            out.qa_chain = None;
        }
        Bucket::LabelsAndBoxes => {
            let mut observed = AnnotationSet::absent(registry);
            for (obs, tru) in observed.diseases.iter_mut().zip(&study.truth.diseases) {
                obs.presence = tru.presence.clone();
                obs.boxes = tru.boxes.clone();
            }
            out.observed = observed;
            out.report = None;
            out.qa_chain = None;
        }
        Bucket::QaOnly => {
            out.observed = AnnotationSet::absent(registry);
            out.report = None;
            out.qa_chain =
                Some(QaChain { provenance: Provenance::GroundTruth, items: truth_chain });
        }
        Bucket::Full => {
            out.observed = study.truth.clone();
            out.report = Some(Report { provenance: Provenance::GroundTruth, tokens: truth_report });
            out.qa_chain =
                Some(QaChain { provenance: Provenance::GroundTruth, items: truth_chain });
        }
    }
    out
}

/// Hide annotations per the profile's buckets. Truth is untouched; the
/// observed view is projected from truth, so the operation is idempotent
/// for a fixed seed and never fabricates values.
pub fn mask_annotations(
    studies: &[Study],
    profile: &MaskProfile,
    registry: &DiseaseRegistry,
    seed: u64,
) -> Result<Vec<Study>> {
    profile.validate()?;
    let buckets = assign_buckets(studies.len(), profile, seed);
    Ok(studies
        .iter()
        .zip(&buckets)
        .map(|(s, b)| project_observed(s, *b, registry))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{studies_to_jsonl, validate_study, VLoc};

    fn small_cfg(seed: u64) -> (WorldConfig, DiseaseRegistry) {
        let registry = DiseaseRegistry::default_14();
        let cfg = WorldConfig {
            grid_size: 6,
            feature_dim: 16,
            noise_std: 0.2,
            seed,
            ..Default::default()
        };
        (cfg, registry)
    }

    #[test]
    fn rejects_bad_configs() {
        let registry = DiseaseRegistry::default_14();
        let mut cfg = WorldConfig::default();
        cfg.grid_size = 3;
        assert!(cfg.validate(&registry).is_err());
        let mut cfg = WorldConfig::default();
        cfg.noise_std = 2.0;
        assert!(cfg.validate(&registry).is_err());
        let cfg = WorldConfig::default();
        assert!(generate_corpus(&cfg, &registry, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let (cfg, registry) = small_cfg(7);
        let a = generate_corpus(&cfg, &registry, 20).unwrap();
        let b = generate_corpus(&cfg, &registry, 20).unwrap();
        assert_eq!(studies_to_jsonl(&a).unwrap(), studies_to_jsonl(&b).unwrap());
        for s in &a {
            let v = validate_study(s, &registry);
            assert!(v.is_empty(), "study {}: {v:?}", s.id);
        }
    }

    #[test]
    fn planted_labels_match_box_geometry() {
        let (cfg, registry) = small_cfg(11);
        let m = LungModel::default();
        let corpus = generate_corpus(&cfg, &registry, 40).unwrap();
        let mut checked = 0;
        for s in &corpus {
            for e in &s.truth.diseases {
                if e.is_present() && !e.boxes.is_empty() {
                    let boxes = e.box_values();
                    let sr = union_subregions(&boxes, &m, DEFAULT_MIN_FRAC);
                    assert_eq!(e.hloc.value, sr.side, "study {}", s.id);
                    assert_eq!(e.vlocs.value.as_ref().unwrap(), &sr.bands, "study {}", s.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "too few groundable plants: {checked}");
    }

    #[test]
    fn single_lesion_in_right_apex_yields_right_only_apex() {
        // Direct construction check of the geometry-label contract.
        let registry = DiseaseRegistry::default_14();
        let m = LungModel::default();
        let b = BoundingBox::new(0.12, 0.12, 0.32, 0.24).unwrap();
        let sr = union_subregions(&[b], &m, DEFAULT_MIN_FRAC);
        assert_eq!(sr.side, Some(crate::domain::HLoc::RightOnly));
        assert_eq!(sr.bands, [VLoc::Apex].into_iter().collect());
        let _ = registry;
    }

    #[test]
    fn noise_free_signal_channel_recovers_presence_perfectly() {
        let registry = DiseaseRegistry::default_14();
        let cfg = WorldConfig {
            grid_size: 6,
            feature_dim: 16,
            noise_std: 0.0,
            lesion_signal_strength: 1.0,
            seed: 3,
            ..Default::default()
        };
        let m = LungModel::default();
        let corpus = generate_corpus(&cfg, &registry, 50).unwrap();
        let mut total = 0usize;
        for s in &corpus {
            for (di, e) in s.truth.diseases.iter().enumerate() {
                // oracle: average the disease channel over the whole grid
                let mean: f64 = (0..s.grid.patches())
                    .map(|p| s.grid.data[p * s.grid.feature_dim + di])
                    .sum::<f64>()
                    / s.grid.patches() as f64;
                let predicted = mean > 1e-9;
                assert_eq!(predicted, e.is_present(), "study {} disease {}", s.id, e.disease);
                total += 1;
            }
        }
        let _ = m;
        assert_eq!(total, 50 * registry.len());
    }

    #[test]
    fn mask_bucket_counts_follow_the_profile() {
        let (cfg, registry) = small_cfg(5);
        let corpus = generate_corpus(&cfg, &registry, 200).unwrap();
        let profile = MaskProfile::new(0.4, 0.3, 0.2, 0.1);
        let masked = mask_annotations(&corpus, &profile, &registry, 99).unwrap();
        let mut counts = [0usize; 4];
        for s in &masked {
            let has_report = s.report.is_some();
            let has_chain = s.qa_chain.is_some();
            let has_labels = s.observed.diseases.iter().any(|d| !d.presence.is_absent());
            match (has_report, has_labels, has_chain) {
                (true, false, false) => counts[0] += 1,
                (false, true, false) => counts[1] += 1,
                (false, false, true) => counts[2] += 1,
                (true, true, true) => counts[3] += 1,
                other => panic!("unexpected bucket shape {other:?}"),
            }
        }
        assert_eq!(counts, [80, 60, 40, 20]);
    }

    #[test]
    fn degenerate_profiles_keep_or_reveal_everything() {
        let (cfg, registry) = small_cfg(6);
        let corpus = generate_corpus(&cfg, &registry, 10).unwrap();
        let all_reports =
            mask_annotations(&corpus, &MaskProfile::new(1.0, 0.0, 0.0, 0.0), &registry, 1).unwrap();
        for s in &all_reports {
            assert!(s.report.is_some());
            assert!(s.qa_chain.is_none());
            assert!(s.observed.diseases.iter().all(|d| d.presence.is_absent()));
        }
        let identity =
            mask_annotations(&corpus, &MaskProfile::new(0.0, 0.0, 0.0, 1.0), &registry, 1).unwrap();
        assert_eq!(identity, corpus);
    }

    #[test]
    fn half_and_half_profile_splits_exactly() {
        let (cfg, registry) = small_cfg(8);
        let corpus = generate_corpus(&cfg, &registry, 10).unwrap();
        let masked =
            mask_annotations(&corpus, &MaskProfile::new(0.5, 0.5, 0.0, 0.0), &registry, 4).unwrap();
        let reports = masked.iter().filter(|s| s.report.is_some()).count();
        let labels = masked
            .iter()
            .filter(|s| s.observed.diseases.iter().any(|d| !d.presence.is_absent()))
            .count();
        assert_eq!(reports, 5);
        assert_eq!(labels, 5);
    }

    #[test]
    fn masking_is_idempotent_and_never_fabricates() {
        let (cfg, registry) = small_cfg(9);
        let corpus = generate_corpus(&cfg, &registry, 30).unwrap();
        let profile = MaskProfile::new(0.4, 0.3, 0.2, 0.1);
        let once = mask_annotations(&corpus, &profile, &registry, 2).unwrap();
        let twice = mask_annotations(&once, &profile, &registry, 2).unwrap();
        assert_eq!(once, twice);
        for s in &once {
            let violations = validate_study(s, &registry);
            // observed-vs-truth equality is part of study validation
            assert!(violations.is_empty(), "study {}: {violations:?}", s.id);
        }
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let (cfg, registry) = small_cfg(10);
        let corpus = generate_corpus(&cfg, &registry, 5).unwrap();
        let bad = MaskProfile::new(0.5, 0.5, 0.2, 0.0);
        assert!(mask_annotations(&corpus, &bad, &registry, 1).is_err());
    }
}
