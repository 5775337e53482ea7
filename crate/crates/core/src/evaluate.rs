//! Instance-segmentation metrics: greedy prediction/GT matching by mask
//! IoU and average precision via the exact area under the monotone
//! precision envelope, pooled across scenes and reported per class.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::mask_iou;
use crate::pipeline::InstanceCandidate;

/// One ground-truth instance mask; `scene` keeps masks from different
/// scenes from ever matching each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthInstance {
    pub scene: usize,
    pub class_id: usize,
    pub points: Vec<usize>,
}

impl GroundTruthInstance {
    pub fn new(scene: usize, class_id: usize, points: Vec<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Evaluation("empty ground-truth instance".into()));
        }
        Ok(Self {
            scene,
            class_id,
            points,
        })
    }
}

/// A scored prediction pooled across scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scene: usize,
    pub proposal_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub points: Vec<usize>,
}

impl Prediction {
    pub fn from_candidate(scene: usize, candidate: &InstanceCandidate) -> Self {
        Self {
            scene,
            proposal_id: candidate.proposal_id,
            class_id: candidate.class_id,
            confidence: candidate.confidence,
            points: candidate.points.clone(),
        }
    }
}

/// Sort predictions by confidence descending, ties by scene then lower
/// proposal id.
pub fn sort_by_confidence(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then(a.scene.cmp(&b.scene))
            .then(a.proposal_id.cmp(&b.proposal_id))
    });
}

/// Greedy matching for one class: walk predictions in confidence order,
/// match each to the unmatched same-scene GT with the highest mask IoU and
/// flag it TP when that IoU reaches the threshold, FP otherwise. Each GT
/// matches at most once. Predictions must already be confidence-sorted.
pub fn match_predictions(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for pred in preds {
        debug_assert!(gts.iter().all(|g| g.class_id == pred.class_id));
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.scene != pred.scene {
                continue;
            }
            let iou = mask_iou(&pred.points, &gt.points).unwrap_or(0.0);
            let better = match best {
                None => true,
                Some((best_iou, _)) => iou > best_iou,
            };
            if better {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((iou, gi)) if iou >= iou_threshold => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// The precision/recall staircase and its exact envelope area.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each prediction, recall nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision of a TP/FP sequence (already confidence-ordered)
/// against `num_gt` ground-truth instances: rectangle integration under
/// the monotone precision envelope.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<PrCurve> {
    if num_gt == 0 {
        return Err(Error::Evaluation(
            "average precision needs at least one ground-truth instance".into(),
        ));
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }
    // Envelope: precision at recall r is the max precision at recall >= r.
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Ok(PrCurve { points, ap })
}

/// AP of one class at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

/// Per-class APs and their unweighted mean at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEval {
    pub threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

/// Evaluation across thresholds; classes with zero GT are excluded from
/// the mean and listed in `skipped_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdEval>,
    pub skipped_classes: Vec<usize>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| t.threshold == threshold)
            .map(|t| t.map)
    }

    /// Aligned text tables, one per threshold.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for t in &self.thresholds {
            out.push_str(&format!("AP at IoU >= {}\n", t.threshold));
            out.push_str(&format!(
                "{:>6} {:>10} {:>10} {:>10}\n",
                "class", "gt", "preds", "ap"
            ));
            for c in &t.per_class {
                out.push_str(&format!(
                    "{:>6} {:>10} {:>10} {:>10.4}\n",
                    c.class_id, c.num_gt, c.num_pred, c.ap
                ));
            }
            out.push_str(&format!("{:>6} {:>10} {:>10} {:>10.4}\n", "mAP", "", "", t.map));
        }
        if !self.skipped_classes.is_empty() {
            out.push_str(&format!(
                "skipped classes without ground truth: {:?}\n",
                self.skipped_classes
            ));
        }
        out
    }

    /// CSV rows `threshold,class,ap,num_gt,num_pred`, plus a `mean` row
    /// per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,class,ap,num_gt,num_pred\n");
        for t in &self.thresholds {
            for c in &t.per_class {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t.threshold, c.class_id, c.ap, c.num_gt, c.num_pred
                ));
            }
            out.push_str(&format!("{},mean,{},,\n", t.threshold, t.map));
        }
        out
    }
}

/// Mean average precision over classes with at least one GT instance, at
/// each requested IoU threshold. Errors when there is no ground truth at
/// all.
pub fn map_at(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Evaluation("no ground-truth instances".into()));
    }
    let mut gt_by_class: BTreeMap<usize, Vec<GroundTruthInstance>> = BTreeMap::new();
    for gt in gts {
        gt_by_class.entry(gt.class_id).or_default().push(gt.clone());
    }
    let mut pred_by_class: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        pred_by_class.entry(p.class_id).or_default().push(p.clone());
    }
    let skipped_classes: Vec<usize> = pred_by_class
        .keys()
        .filter(|c| !gt_by_class.contains_key(c))
        .copied()
        .collect();

    let mut evals = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut per_class = Vec::with_capacity(gt_by_class.len());
        let mut sum = 0.0;
        for (&class_id, class_gts) in &gt_by_class {
            let mut class_preds = pred_by_class.get(&class_id).cloned().unwrap_or_default();
            sort_by_confidence(&mut class_preds);
            let flags = match_predictions(&class_preds, class_gts, threshold);
            let ap = if class_preds.is_empty() {
                0.0
            } else {
                average_precision(&flags, class_gts.len())?.ap
            };
            sum += ap;
            per_class.push(ClassAp {
                class_id,
                ap,
                num_gt: class_gts.len(),
                num_pred: class_preds.len(),
            });
        }
        evals.push(ThresholdEval {
            threshold,
            per_class,
            map: sum / gt_by_class.len() as f64,
        });
    }
    Ok(EvalReport {
        thresholds: evals,
        skipped_classes,
    })
}
