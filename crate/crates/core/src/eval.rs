//! Detection metrics: greedy matching, AP over 40 recall points, the
//! similarity components and the combined rope score.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{rotated_iou_3d, Box3D, ObjectClass};
use crate::head::Detection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ground truth: AP is undefined")]
    NoGroundTruth,
    #[error("invalid evaluation setting: {0}")]
    Config(String),
}

pub const RECALL_POINTS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DifficultyLevel {
    Easy,
    Mid,
    Hard,
}

impl DifficultyLevel {
    pub const ALL: [DifficultyLevel; 3] = [DifficultyLevel::Easy, DifficultyLevel::Mid, DifficultyLevel::Hard];

    /// Occlusion code 0 is Easy, 1 is Mid; 2 and unknown codes are Hard.
    pub fn from_occlusion(code: i64) -> Self {
        match code {
            0 => DifficultyLevel::Easy,
            1 => DifficultyLevel::Mid,
            _ => DifficultyLevel::Hard,
        }
    }
}

impl fmt::Display for DifficultyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyLevel::Easy => "Easy",
            DifficultyLevel::Mid => "Mid",
            DifficultyLevel::Hard => "Hard",
        })
    }
}

/// Greedy assignment of predictions to ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// `(prediction, gt, IoU)`, in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Prediction indices by descending score, ties by index.
pub fn rank_by_score(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Each prediction, best score first, takes the unmatched gt of highest IoU
/// if that IoU reaches `iou_thr`. Classes are not checked.
pub fn match_detections(preds: &[Detection], gts: &[Box3D], iou_thr: f64) -> MatchSet {
    let mut used = vec![false; gts.len()];
    let mut m = MatchSet::default();
    for p in rank_by_score(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let iou = rotated_iou_3d(&preds[p].bbox, gt);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                used[g] = true;
                m.pairs.push((p, g, iou));
            }
            None => m.false_positives.push(p),
        }
    }
    m.false_negatives = (0..gts.len()).filter(|&g| !used[g]).collect();
    m
}

/// AP from `(score, is_true_positive)` entries against `n_gt` objects:
/// the mean over recall levels 1/40..1 of the best precision reached at
/// or beyond that recall.
pub fn ap_r40_ranked(entries: &[(f64, bool)], n_gt: usize) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut ranked = entries.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for i in 1..=RECALL_POINTS {
        let r = i as f64 / RECALL_POINTS as f64;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            total += precision[k];
        }
    }
    Ok(total / RECALL_POINTS as f64)
}

/// Single-set AP: greedy matching then [`ap_r40_ranked`].
pub fn ap_r40(preds: &[Detection], gts: &[Box3D], iou_thr: f64) -> Result<f64, EvalError> {
    let m = match_detections(preds, gts, iou_thr);
    let mut hit = vec![false; preds.len()];
    for &(p, _, _) in &m.pairs {
        hit[p] = true;
    }
    let entries: Vec<(f64, bool)> = preds.iter().zip(hit).map(|(d, h)| (d.score, h)).collect();
    ap_r40_ranked(&entries, gts.len())
}

/// Which term completes the four-way similarity average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityVariant {
    /// `(ACS + AOS + AAS + AGS) / 4`.
    #[default]
    AreaSimilarity,
    /// `(ACS + AOS + AGS + max(0, 1 − AGD/τg)) / 4`.
    GroundDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeWeights {
    pub ap: f64,
    pub similarity: f64,
}

impl Default for RopeWeights {
    fn default() -> Self {
        Self { ap: 8.0, similarity: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thr: f64,
    pub tau_center: f64,
    pub tau_ground: f64,
    pub weights: RopeWeights,
    pub variant: SimilarityVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thr: 0.5, tau_center: 2.0, tau_ground: 2.0, weights: RopeWeights::default(), variant: SimilarityVariant::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_thr > 0.0 && self.iou_thr <= 1.0) {
            return Err(EvalError::Config(format!("IoU threshold {} outside (0, 1]", self.iou_thr)));
        }
        if !(self.tau_center > 0.0 && self.tau_ground > 0.0) {
            return Err(EvalError::Config("similarity scales must be positive".into()));
        }
        if !(self.weights.ap > 0.0 && self.weights.similarity > 0.0) {
            return Err(EvalError::Config("rope weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityComponents {
    pub acs: f64,
    pub aos: f64,
    pub ags: f64,
    pub aas: f64,
    pub agd: f64,
}

impl SimilarityComponents {
    pub fn composite(&self, variant: SimilarityVariant, tau_ground: f64) -> f64 {
        let fourth = match variant {
            SimilarityVariant::AreaSimilarity => self.aas,
            SimilarityVariant::GroundDistance => (1.0 - self.agd / tau_ground).max(0.0),
        };
        (self.acs + self.aos + fourth + self.ags) / 4.0
    }
}

/// Mean corner distance of two footprints under the best cyclic pairing.
pub fn ground_corner_distance(a: &Box3D, b: &Box3D) -> f64 {
    let (ca, cb) = (a.bev_footprint(), b.bev_footprint());
    (0..4)
        .map(|s| (0..4).map(|i| (ca[i].0 - cb[(i + s) % 4].0).hypot(ca[i].1 - cb[(i + s) % 4].1)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / 4.0
}

/// Component means over `(prediction, gt)` box pairs; all zero when empty.
pub fn similarity_components(pairs: &[(Box3D, Box3D)], tau_center: f64, tau_ground: f64) -> SimilarityComponents {
    if pairs.is_empty() {
        return SimilarityComponents::default();
    }
    let mut s = SimilarityComponents::default();
    for (p, g) in pairs {
        s.acs += (1.0 - (p.cx - g.cx).hypot(p.cy - g.cy) / tau_center).max(0.0);
        s.aos += (1.0 + (p.yaw - g.yaw).cos()) / 2.0;
        let d = ground_corner_distance(p, g);
        s.agd += d;
        s.ags += (1.0 - d / tau_ground).max(0.0);
        let (ap, ag) = (p.l * p.w, g.l * g.w);
        s.aas += ap.min(ag) / ap.max(ag);
    }
    let n = pairs.len() as f64;
    SimilarityComponents { acs: s.acs / n, aos: s.aos / n, ags: s.ags / n, aas: s.aas / n, agd: s.agd / n }
}

/// `(ω1·AP + ω2·S) / (ω1 + ω2)`.
pub fn rope_score(ap: f64, similarity: f64, w: &RopeWeights) -> f64 {
    (w.ap * ap + w.similarity * similarity) / (w.ap + w.similarity)
}

/// A labeled object as seen by the evaluator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub difficulty: DifficultyLevel,
}

/// Ground truth and predictions of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneResult {
    pub gts: Vec<GroundTruth>,
    pub preds: Vec<Detection>,
}

/// One cell of the report. AP and rope score are `null` without ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub ap_r40: Option<f64>,
    pub rope_score: Option<f64>,
    pub acs: f64,
    pub aos: f64,
    pub ags: f64,
    pub aas: f64,
    pub agd: f64,
    pub n_gt: usize,
    pub n_pred: usize,
}

/// `class → difficulty → metrics`; difficulty keys are Easy, Mid, Hard and All.
pub type EvalReport = BTreeMap<String, BTreeMap<String, MetricEntry>>;

pub const ALL_DIFFICULTIES: &str = "All";

/// Matches each scene once per class against all of that class's gts.
/// For a difficulty bin, predictions matched to gts of another bin are left
/// out rather than counted as false positives.
pub fn evaluate(scenes: &[SceneResult], classes: &[ObjectClass], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut report = EvalReport::new();
    for &class in classes {
        // per scene: (pred, matched gt difficulty or None) and gt difficulties
        let mut preds: Vec<(f64, Option<DifficultyLevel>, Box3D, Option<Box3D>)> = Vec::new();
        let mut gt_levels = Vec::new();
        for scene in scenes {
            let gts: Vec<&GroundTruth> = scene.gts.iter().filter(|g| g.class == class).collect();
            let dets: Vec<Detection> = scene.preds.iter().filter(|d| d.class == class).copied().collect();
            let boxes: Vec<Box3D> = gts.iter().map(|g| g.bbox).collect();
            let m = match_detections(&dets, &boxes, cfg.iou_thr);
            let mut matched = vec![None; dets.len()];
            for &(p, g, _) in &m.pairs {
                matched[p] = Some(g);
            }
            for (d, g) in dets.iter().zip(matched) {
                preds.push((d.score, g.map(|g| gts[g].difficulty), d.bbox, g.map(|g| gts[g].bbox)));
            }
            gt_levels.extend(gts.iter().map(|g| g.difficulty));
        }
        let mut per_level = BTreeMap::new();
        let levels = DifficultyLevel::ALL.iter().map(|&l| (l.to_string(), Some(l)));
        for (key, level) in levels.chain([(ALL_DIFFICULTIES.to_string(), None)]) {
            let in_bin = |d: DifficultyLevel| level.map_or(true, |l| l == d);
            let n_gt = gt_levels.iter().filter(|&&d| in_bin(d)).count();
            let mut entries = Vec::new();
            let mut pairs = Vec::new();
            for &(score, lvl, pb, gb) in &preds {
                match (lvl, gb) {
                    (Some(d), Some(g)) if in_bin(d) => {
                        entries.push((score, true));
                        pairs.push((pb, g));
                    }
                    (Some(_), _) => {}
                    (None, _) => entries.push((score, false)),
                }
            }
            let ap = ap_r40_ranked(&entries, n_gt).ok();
            let comps = similarity_components(&pairs, cfg.tau_center, cfg.tau_ground);
            let s = comps.composite(cfg.variant, cfg.tau_ground);
            per_level.insert(
                key,
                MetricEntry {
                    ap_r40: ap,
                    rope_score: ap.map(|a| rope_score(a, s, &cfg.weights)),
                    acs: comps.acs,
                    aos: comps.aos,
                    ags: comps.ags,
                    aas: comps.aas,
                    agd: comps.agd,
                    n_gt,
                    n_pred: entries.len(),
                },
            );
        }
        report.insert(class.name().to_string(), per_level);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bx(x: f64, y: f64, yaw: f64) -> Box3D {
        Box3D::new(x, y, 0.8, 4.0, 1.8, 1.6, yaw).unwrap()
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, class: ObjectClass::Car, score }
    }

    /// Literal reading: for each recall level, the best precision over all
    /// cut-offs whose recall reaches it.
    fn ap_oracle(entries: &[(f64, bool)], n_gt: usize) -> f64 {
        let mut ranked = entries.to_vec();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut total = 0.0;
        for i in 1..=40 {
            let r = i as f64 / 40.0;
            let mut best: f64 = 0.0;
            for k in 1..=ranked.len() {
                let tp = ranked[..k].iter().filter(|e| e.1).count() as f64;
                if tp / n_gt as f64 >= r {
                    best = best.max(tp / k as f64);
                }
            }
            total += best;
        }
        total / 40.0
    }

    #[test]
    fn ap_examples() {
        let g = bx(10.0, 0.0, 0.0);
        assert_eq!(ap_r40(&[det(g, 0.9)], &[g], 0.5).unwrap(), 1.0);
        assert_eq!(ap_r40(&[], &[g], 0.5).unwrap(), 0.0);
        assert_eq!(ap_r40(&[det(g, 0.9)], &[], 0.5), Err(EvalError::NoGroundTruth));
        let ranked = [(0.9, true), (0.8, false), (0.7, true)];
        let ap = ap_r40_ranked(&ranked, 2).unwrap();
        // recall ½ at precision 1 for 20 levels, recall 1 at precision ⅔ for 20
        assert!((ap - (20.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-12);
        assert_eq!(ap, ap_oracle(&ranked, 2));
    }

    #[test]
    fn matching_examples() {
        let g = bx(10.0, 0.0, 0.0);
        let m = match_detections(&[det(bx(10.1, 0.0, 0.0), 0.5)], &[g], 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert!(m.pairs[0].2 > 0.9);
        let m = match_detections(&[det(g, 0.4), det(g, 0.8)], &[g], 0.5);
        assert_eq!(m.pairs, vec![(1, 0, 1.0)]);
        assert_eq!(m.false_positives, vec![0]);
        assert!(m.false_negatives.is_empty());
    }

    #[test]
    fn similarity_examples() {
        let g = bx(10.0, 2.0, 0.3);
        let s = similarity_components(&[(g, g)], 2.0, 2.0);
        assert_eq!((s.acs, s.aos, s.ags, s.aas, s.agd), (1.0, 1.0, 1.0, 1.0, 0.0));
        let flipped = Box3D { yaw: 0.3 - PI, ..g };
        let s = similarity_components(&[(flipped, g)], 2.0, 2.0);
        assert!(s.aos.abs() < 1e-15);
        assert!((s.acs - 1.0).abs() < 1e-15 && (s.aas - 1.0).abs() < 1e-15);
        assert!(s.agd < 1e-12 && (s.ags - 1.0).abs() < 1e-12);
        assert_eq!(similarity_components(&[], 2.0, 2.0), SimilarityComponents::default());
    }

    #[test]
    fn similarity_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(Box3D, Box3D)> = (0..30)
            .map(|_| {
                let g = bx(rng.gen_range(0.0..40.0), rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0));
                let p = Box3D::new(
                    g.cx + rng.gen_range(-1.5..1.5),
                    g.cy + rng.gen_range(-1.5..1.5),
                    g.cz,
                    g.l * rng.gen_range(0.7..1.3),
                    g.w * rng.gen_range(0.7..1.3),
                    g.h,
                    g.yaw + rng.gen_range(-1.0..1.0),
                )
                .unwrap();
                (p, g)
            })
            .collect();
        let s = similarity_components(&pairs, 2.0, 2.0);
        // oracle: corners rebuilt from scratch, all 4 cyclic pairings tried explicitly
        let corners = |b: &Box3D| -> Vec<(f64, f64)> {
            [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                .iter()
                .map(|(sx, sy)| {
                    let (lx, ly) = (sx * b.l / 2.0, sy * b.w / 2.0);
                    (b.cx + lx * b.yaw.cos() - ly * b.yaw.sin(), b.cy + lx * b.yaw.sin() + ly * b.yaw.cos())
                })
                .collect()
        };
        let (mut acs, mut aos, mut agd, mut ags, mut aas) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, g) in &pairs {
            let d = ((p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2)).sqrt();
            acs += f64::max(0.0, 1.0 - d / 2.0);
            aos += 0.5 * (1.0 + (p.yaw - g.yaw).cos());
            let (cp, cg) = (corners(p), corners(g));
            let mut best = f64::INFINITY;
            for shift in 0..4 {
                let t: f64 = (0..4)
                    .map(|i| ((cp[i].0 - cg[(i + shift) % 4].0).powi(2) + (cp[i].1 - cg[(i + shift) % 4].1).powi(2)).sqrt())
                    .sum();
                best = best.min(t / 4.0);
            }
            agd += best;
            ags += f64::max(0.0, 1.0 - best / 2.0);
            aas += (p.l * p.w).min(g.l * g.w) / (p.l * p.w).max(g.l * g.w);
        }
        let n = pairs.len() as f64;
        for (a, b) in [(s.acs, acs / n), (s.aos, aos / n), (s.agd, agd / n), (s.ags, ags / n), (s.aas, aas / n)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rope_examples() {
        let w = RopeWeights::default();
        assert_eq!(rope_score(1.0, 1.0, &w), 1.0);
        assert_eq!(rope_score(1.0, 0.0, &w), 0.8);
        assert!((rope_score(0.7849, 0.9, &w) - 0.80792).abs() < 1e-12);
        for x in [0.0, 0.25, 0.6, 1.0] {
            assert!((rope_score(x, x, &w) - x).abs() < 1e-15);
        }
        let c = SimilarityComponents { acs: 1.0, aos: 0.5, ags: 0.25, aas: 0.0, agd: 1.0 };
        assert_eq!(c.composite(SimilarityVariant::AreaSimilarity, 2.0), 1.75 / 4.0);
        assert_eq!(c.composite(SimilarityVariant::GroundDistance, 2.0), 2.25 / 4.0);
    }

    #[test]
    fn difficulty_codes() {
        assert_eq!(DifficultyLevel::from_occlusion(0), DifficultyLevel::Easy);
        assert_eq!(DifficultyLevel::from_occlusion(1), DifficultyLevel::Mid);
        assert_eq!(DifficultyLevel::from_occlusion(2), DifficultyLevel::Hard);
        assert_eq!(DifficultyLevel::from_occlusion(3), DifficultyLevel::Hard);
        assert!(DifficultyLevel::Easy < DifficultyLevel::Mid && DifficultyLevel::Mid < DifficultyLevel::Hard);
    }

    #[test]
    fn report_bins_and_ignores_other_levels() {
        let (a, b) = (bx(10.0, 0.0, 0.0), bx(20.0, 5.0, 1.0));
        let scene = SceneResult {
            gts: vec![
                GroundTruth { bbox: a, class: ObjectClass::Car, difficulty: DifficultyLevel::Easy },
                GroundTruth { bbox: b, class: ObjectClass::Car, difficulty: DifficultyLevel::Hard },
            ],
            preds: vec![det(a, 0.9), det(b, 0.8), det(bx(30.0, -5.0, 0.0), 0.7)],
        };
        let r = evaluate(&[scene], &[ObjectClass::Car, ObjectClass::Cyclist], &EvalConfig::default()).unwrap();
        let car = &r["Car"];
        assert_eq!(car["All"].n_gt, 2);
        assert_eq!(car["All"].n_pred, 3);
        assert_eq!(car["Easy"].n_pred, 2);
        assert_eq!(car["Easy"].ap_r40, Some(1.0));
        assert_eq!(car["Mid"].ap_r40, None);
        assert_eq!(car["All"].ap_r40, Some(1.0));
        assert_eq!(r["Cyclist"]["All"].ap_r40, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains(r#""Mid":{"ap_r40":null"#));
        assert!(evaluate(&[], &[], &EvalConfig { iou_thr: 0.0, ..Default::default() }).is_err());
    }

    fn random_entries(rng: &mut ChaCha8Rng) -> (Vec<(f64, bool)>, usize) {
        let n = rng.gen_range(0..15);
        let e: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.5))).collect();
        let tps = e.iter().filter(|x| x.1).count();
        (e, tps + rng.gen_range(1..4))
    }

    proptest! {
        #[test]
        fn ap_agrees_with_oracle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, n_gt) = random_entries(&mut rng);
            let ap = ap_r40_ranked(&e, n_gt).unwrap();
            prop_assert!((ap - ap_oracle(&e, n_gt)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_monotone_in_hits_and_rank_based(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, n_gt) = random_entries(&mut rng);
            let ap = ap_r40_ranked(&e, n_gt).unwrap();
            let scaled: Vec<(f64, bool)> = e.iter().map(|&(s, h)| (s.powi(3) * 5.0 + 1.0, h)).collect();
            prop_assert_eq!(ap_r40_ranked(&scaled, n_gt).unwrap(), ap);
            if let Some(i) = e.iter().position(|x| !x.1) {
                let mut better = e.clone();
                better[i].1 = true;
                prop_assert!(ap_r40_ranked(&better, n_gt).unwrap() + 1e-12 >= ap);
            }
        }

        #[test]
        fn matching_is_one_to_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<Box3D> = (0..6).map(|_| bx(rng.gen_range(0.0..12.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect();
            let preds: Vec<Detection> = (0..8)
                .map(|_| det(bx(rng.gen_range(0.0..12.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)), rng.gen_range(0.0..1.0)))
                .collect();
            let m = match_detections(&preds, &gts, 0.3);
            let mut seen_p = vec![0; preds.len()];
            let mut seen_g = vec![0; gts.len()];
            for &(p, g, iou) in &m.pairs {
                seen_p[p] += 1;
                seen_g[g] += 1;
                prop_assert!(iou >= 0.3);
            }
            for &p in &m.false_positives { seen_p[p] += 1; }
            for &g in &m.false_negatives { seen_g[g] += 1; }
            prop_assert!(seen_p.iter().all(|&c| c == 1));
            prop_assert!(seen_g.iter().all(|&c| c == 1));
        }
    }
}
