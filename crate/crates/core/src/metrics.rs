//! Evaluation protocol: IoU, accuracy at IoU 0.5 overall and per box-size bucket,
//! and recall at k for phrase localization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BBox;

/// A prediction counts as correct at or above this IoU.
pub const IOU_THRESHOLD: f64 = 0.5;
/// Areas below this are small (32 x 32).
pub const SMALL_AREA: f64 = 1024.0;
/// Areas above this are large (96 x 96).
pub const LARGE_AREA: f64 = 9216.0;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Middle,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Middle, SizeBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Middle => "middle",
            SizeBucket::Large => "large",
        }
    }
}

/// Bucket by ground-truth area in annotation pixels. Both boundaries belong to middle.
pub fn size_bucket(gt: &BBox) -> SizeBucket {
    let a = gt.area();
    if a < SMALL_AREA {
        SizeBucket::Small
    } else if a > LARGE_AREA {
        SizeBucket::Large
    } else {
        SizeBucket::Middle
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Flat evaluation summary. Accuracies and recalls are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub small_acc: f64,
    pub small_count: usize,
    pub middle_acc: f64,
    pub middle_count: usize,
    pub large_acc: f64,
    pub large_count: usize,
    pub acc50: f64,
    pub total_count: usize,
    /// Recall on base-only sentences; absent without phrase data.
    pub base_r1: Option<f64>,
    pub base_r5: Option<f64>,
    pub base_r10: Option<f64>,
    /// Recall on sentences that mention novel categories.
    pub novel_r1: Option<f64>,
    pub novel_r5: Option<f64>,
    pub novel_r10: Option<f64>,
    /// Whether predicted boxes were clipped to the image before scoring.
    pub clip_predictions: bool,
}

impl EvalReport {
    pub fn bucket(&self, b: SizeBucket) -> (f64, usize) {
        match b {
            SizeBucket::Small => (self.small_acc, self.small_count),
            SizeBucket::Middle => (self.middle_acc, self.middle_count),
            SizeBucket::Large => (self.large_acc, self.large_count),
        }
    }

    pub fn with_recall(mut self, base: Option<RecallAtK>, novel: Option<RecallAtK>) -> Self {
        self.base_r1 = base.map(|r| r.r1);
        self.base_r5 = base.map(|r| r.r5);
        self.base_r10 = base.map(|r| r.r10);
        self.novel_r1 = novel.map(|r| r.r1);
        self.novel_r5 = novel.map(|r| r.r5);
        self.novel_r10 = novel.map(|r| r.r10);
        self
    }
}

/// Scored outcome of one grounding prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub iou: f64,
    pub bucket: SizeBucket,
    pub correct: bool,
}

pub fn score_prediction(pred: &BBox, gt: &BBox) -> Outcome {
    let v = iou(pred, gt);
    Outcome {
        iou: v,
        bucket: size_bucket(gt),
        correct: v >= IOU_THRESHOLD,
    }
}

/// Aggregate outcomes into the grounding part of a report.
pub fn summarize(outcomes: &[Outcome], clip_predictions: bool) -> EvalReport {
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for o in outcomes {
        let i = o.bucket as usize;
        counts[i] += 1;
        hits[i] += usize::from(o.correct);
    }
    let total_hits: usize = hits.iter().sum();
    EvalReport {
        small_acc: percent(hits[0], counts[0]),
        small_count: counts[0],
        middle_acc: percent(hits[1], counts[1]),
        middle_count: counts[1],
        large_acc: percent(hits[2], counts[2]),
        large_count: counts[2],
        acc50: percent(total_hits, outcomes.len()),
        total_count: outcomes.len(),
        base_r1: None,
        base_r5: None,
        base_r10: None,
        novel_r1: None,
        novel_r5: None,
        novel_r10: None,
        clip_predictions,
    }
}

/// Accuracy at IoU 0.5, overall and per ground-truth size bucket.
pub fn acc50(preds: &[BBox], gts: &[BBox]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    let outcomes: Vec<Outcome> = preds.iter().zip(gts).map(|(p, g)| score_prediction(p, g)).collect();
    Ok(summarize(&outcomes, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Phrases with at least one ground-truth box.
    pub phrases: usize,
}

/// Rank (0-based) of the first prediction reaching the threshold against any target.
pub fn first_hit(ranked: &[BBox], targets: &[BBox]) -> Option<usize> {
    ranked
        .iter()
        .position(|p| targets.iter().any(|t| iou(p, t) >= IOU_THRESHOLD))
}

/// Recall at 1, 5 and 10 over phrases. Phrases without ground-truth boxes are skipped.
pub fn recall_at_k(ranked: &[Vec<BBox>], targets: &[Vec<BBox>]) -> Result<RecallAtK> {
    if ranked.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} ranked lists for {} phrases",
            ranked.len(),
            targets.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut phrases = 0;
    for (r, t) in ranked.iter().zip(targets) {
        if t.is_empty() {
            continue;
        }
        phrases += 1;
        if let Some(rank) = first_hit(r, t) {
            for (h, k) in hits.iter_mut().zip(RECALL_KS) {
                *h += usize::from(rank < k);
            }
        }
    }
    Ok(RecallAtK {
        r1: percent(hits[0], phrases),
        r5: percent(hits[1], phrases),
        r10: percent(hits[2], phrases),
        phrases,
    })
}

/// One line of the per-sample prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub pred_bbox: [f64; 4],
    pub iou: f64,
    pub bucket: SizeBucket,
    pub correct: bool,
    /// Ground-truth box, kept so size plots can be drawn from the dump alone.
    pub gt_bbox: [f64; 4],
}

impl PredictionRecord {
    pub fn new(image_id: &str, pred: &BBox, gt: &BBox) -> Self {
        let o = score_prediction(pred, gt);
        PredictionRecord {
            image_id: image_id.to_string(),
            pred_bbox: pred.to_array(),
            iou: o.iou,
            bucket: o.bucket,
            correct: o.correct,
            gt_bbox: gt.to_array(),
        }
    }

    pub fn outcome(&self) -> Outcome {
        Outcome {
            iou: self.iou,
            bucket: self.bucket,
            correct: self.correct,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let x = rng.random_range(0.0..200.0);
        let y = rng.random_range(0.0..200.0);
        b(x, y, x + rng.random_range(0.0..120.0), y + rng.random_range(0.0..120.0))
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        let z = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn iou_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let (p, q) = (random_box(&mut rng), random_box(&mut rng));
            let v = iou(&p, &q);
            assert_eq!(v, iou(&q, &p));
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(size_bucket(&b(0.0, 0.0, 20.0, 20.0)), SizeBucket::Small);
        assert_eq!(size_bucket(&b(0.0, 0.0, 100.0, 100.0)), SizeBucket::Large);
        assert_eq!(size_bucket(&b(0.0, 0.0, 32.0, 32.0)), SizeBucket::Middle);
        assert_eq!(size_bucket(&b(0.0, 0.0, 96.0, 96.0)), SizeBucket::Middle);
    }

    #[test]
    fn acc50_examples() {
        let gts = vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 50.0, 50.0), b(0.0, 0.0, 120.0, 120.0)];
        let r = acc50(&gts, &gts).unwrap();
        assert_eq!((r.acc50, r.small_acc, r.middle_acc, r.large_acc), (100.0, 100.0, 100.0, 100.0));

        // IoU of exactly one half is a hit
        let half = b(0.0, 0.0, 10.0, 20.0);
        let gt = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&half, &gt), 0.5);
        assert_eq!(acc50(&[half], &[gt]).unwrap().acc50, 100.0);

        let preds = vec![gts[0], b(500.0, 500.0, 510.0, 510.0), b(500.0, 500.0, 510.0, 510.0)];
        let r = acc50(&preds, &gts).unwrap();
        assert!((r.acc50 - 100.0 / 3.0).abs() < 1e-12);
        assert!(matches!(acc50(&preds[..1], &gts), Err(Error::Input(_))));
    }

    #[test]
    fn recall_examples() {
        let t = vec![b(0.0, 0.0, 10.0, 10.0)];
        let good = b(0.0, 0.0, 10.0, 12.0);
        let bad = b(50.0, 50.0, 60.0, 60.0);
        let r = recall_at_k(&[vec![good]], &[t.clone()]).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (100.0, 100.0, 100.0));
        let r = recall_at_k(&[vec![bad, bad, good]], &[t.clone()]).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (0.0, 100.0, 100.0));
        let r = recall_at_k(&[vec![good], vec![bad]], &[t, vec![]]).unwrap();
        assert_eq!(r.phrases, 1);
        assert_eq!(r.r1, 100.0);
    }

    #[test]
    fn report_serializes_flat() {
        let r = acc50(&[b(0.0, 0.0, 1.0, 1.0)], &[b(0.0, 0.0, 1.0, 1.0)]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 15);
        assert!(obj.values().all(|x| !x.is_object() && !x.is_array()));
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn overall_is_count_weighted_bucket_mean(seed in 0u64..300, n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let preds: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let r = acc50(&preds, &gts).unwrap();
            prop_assert_eq!(r.small_count + r.middle_count + r.large_count, n);
            let weighted = SizeBucket::ALL
                .iter()
                .map(|&bk| { let (a, c) = r.bucket(bk); a * c as f64 })
                .sum::<f64>() / n as f64;
            prop_assert!((weighted - r.acc50).abs() < 1e-9);
        }

        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..12);
            let ranked: Vec<Vec<BBox>> = (0..n)
                .map(|_| (0..rng.random_range(0..12)).map(|_| random_box(&mut rng)).collect())
                .collect();
            let targets: Vec<Vec<BBox>> = (0..n)
                .map(|_| (0..rng.random_range(0..3)).map(|_| random_box(&mut rng)).collect())
                .collect();
            let r = recall_at_k(&ranked, &targets).unwrap();
            prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
        }
    }
}
