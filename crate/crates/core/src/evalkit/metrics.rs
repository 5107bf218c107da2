use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::losses::box_iou;
use crate::raster::bilinear_resize;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub bbox: [f64; 4],
    /// Binary mask at ground-truth resolution.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub bbox: [f64; 4],
    pub mask: Option<Vec<bool>>,
}

/// Predictions and ground truths of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub preds: Vec<Scored>,
    pub gts: Vec<Truth>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou(p: &Scored, g: &Truth, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => box_iou(&p.bbox, &g.bbox),
        IouKind::Mask => match (&p.mask, &g.mask) {
            (Some(a), Some(b)) => mask_iou(a, b),
            _ => 0.0,
        },
    }
}

/// Bilinear upsampling of one query's mask logits to `(h, w)` followed by
/// a 0.5 probability cut, which is logit 0.
pub fn upsample_mask(logits: &[f64], grid: (usize, usize), h: usize, w: usize) -> Vec<bool> {
    bilinear_resize(logits, grid.0, grid.1, h, w).into_iter().map(|v| v >= 0.0).collect()
}

/// Every query of a prediction as a scored detection with a full-size mask.
pub fn scored_from_prediction(p: &Prediction, h: usize, w: usize) -> Vec<Scored> {
    (0..p.n_pred())
        .map(|i| Scored {
            score: p.scores[i],
            bbox: p.boxes[i],
            mask: Some(upsample_mask(p.mask_logits.row(i), p.mask_grid, h, w)),
        })
        .collect()
}

/// Greedy matching in descending score order across all images. Returns
/// `(score, is_tp)` per prediction, sorted, and the total gt count. Ties in
/// score keep image then query order.
pub fn match_detections(images: &[ImageEval], kind: IouKind) -> (Vec<(f64, bool)>, usize) {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.preds.len()).map(move |k| (i, k)))
        .collect();
    order.sort_by(|a, b| {
        let (sa, sb) = (images[a.0].preds[a.1].score, images[b.0].preds[b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (i, k) in order {
        let p = &images[i].preds[k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in images[i].gts.iter().enumerate() {
            if taken[i][j] {
                continue;
            }
            let v = iou(p, g, kind);
            if v >= IOU_THRESHOLD && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[i][j] = true;
        }
        out.push((p.score, best.is_some()));
    }
    (out, images.iter().map(|im| im.gts.len()).sum())
}

/// AP at IoU 0.5 with all-point interpolation. No gts and no predictions
/// gives 1, no gts with predictions gives 0.
pub fn ap50(images: &[ImageEval], kind: IouKind) -> f64 {
    let (ranked, n_gt) = match_detections(images, kind);
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for k in 0..rec.len() {
        if rec[k] > last_r {
            ap += (rec[k] - last_r) * prec[k];
            last_r = rec[k];
        }
    }
    ap
}

/// Arithmetic mean; `None` for no tasks.
pub fn map_over_tasks(aps: &[f64]) -> Option<f64> {
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub retained: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Keeps predictions with score at or above each threshold. Precision is
/// 1 when nothing is retained, and F1 is 0 when precision and recall are
/// both 0 or recall is 0.
pub fn threshold_sweep(images: &[ImageEval], thresholds: &[f64], kind: IouKind) -> Vec<SweepRow> {
    let (ranked, n_gt) = match_detections(images, kind);
    thresholds
        .iter()
        .map(|&t| {
            // the retained set is a score prefix, so greedy matches agree
            let kept: Vec<&(f64, bool)> = ranked.iter().filter(|(s, _)| *s >= t).collect();
            let tp = kept.iter().filter(|(_, h)| *h).count() as f64;
            let precision = if kept.is_empty() { 1.0 } else { tp / kept.len() as f64 };
            let recall = if n_gt == 0 { 0.0 } else { tp / n_gt as f64 };
            let f1 = if precision + recall > 0.0 && recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            SweepRow {
                threshold: t,
                retained: kept.len(),
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(score: f64, x: f64) -> Scored {
        Scored {
            score,
            bbox: [x, 0.5, 0.1, 0.1],
            mask: None,
        }
    }

    fn gt(x: f64) -> Truth {
        Truth {
            bbox: [x, 0.5, 0.1, 0.1],
            mask: None,
        }
    }

    /// Area under the interpolated PR curve, integrated over the recall
    /// breakpoints of every cutoff k.
    fn oracle(images: &[ImageEval]) -> f64 {
        let (ranked, n_gt) = match_detections(images, IouKind::Box);
        if n_gt == 0 {
            return if ranked.is_empty() { 1.0 } else { 0.0 };
        }
        let points: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = ranked[..k].iter().filter(|r| r.1).count() as f64;
                (tp / n_gt as f64, tp / k as f64)
            })
            .collect();
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.insert(0, 0.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut area = 0.0;
        for w in levels.windows(2) {
            let mid = (w[0] + w[1]) / 2.0;
            let p = points.iter().filter(|(r, _)| *r >= mid).map(|(_, p)| *p).fold(0.0, f64::max);
            area += (w[1] - w[0]) * p;
        }
        area
    }

    #[test]
    fn perfect_and_empty_cases() {
        let im = ImageEval {
            preds: vec![pred(0.9, 0.2), pred(0.8, 0.6)],
            gts: vec![gt(0.2), gt(0.6)],
        };
        assert_eq!(ap50(&[im.clone()], IouKind::Box), 1.0);
        let none = ImageEval {
            preds: vec![],
            gts: vec![gt(0.2)],
        };
        assert_eq!(ap50(&[none], IouKind::Box), 0.0);
        assert_eq!(ap50(&[ImageEval::default()], IouKind::Box), 1.0);
        let fp = ImageEval {
            preds: vec![pred(0.5, 0.2)],
            gts: vec![],
        };
        assert_eq!(ap50(&[fp], IouKind::Box), 0.0);
    }

    #[test]
    fn three_predictions_two_gts() {
        // TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        let im = ImageEval {
            preds: vec![pred(0.9, 0.2), pred(0.8, 0.9), pred(0.7, 0.6)],
            gts: vec![gt(0.2), gt(0.6)],
        };
        let ap = ap50(std::slice::from_ref(&im), IouKind::Box);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - oracle(&[im])).abs() < 1e-12);
    }

    #[test]
    fn duplicate_hits_count_once() {
        let im = ImageEval {
            preds: vec![pred(0.9, 0.2), pred(0.8, 0.2)],
            gts: vec![gt(0.2)],
        };
        let (r, _) = match_detections(&[im], IouKind::Box);
        assert_eq!(r, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn mask_kind_uses_masks() {
        let m = vec![true, true, false, false];
        let im = ImageEval {
            preds: vec![Scored {
                score: 0.5,
                bbox: [0.0; 4],
                mask: Some(m.clone()),
            }],
            gts: vec![Truth {
                bbox: [0.9, 0.9, 0.1, 0.1],
                mask: Some(m),
            }],
        };
        assert_eq!(ap50(std::slice::from_ref(&im), IouKind::Mask), 1.0);
        assert_eq!(ap50(&[im], IouKind::Box), 0.0);
    }

    #[test]
    fn map_cases() {
        assert_eq!(map_over_tasks(&[0.7]), Some(0.7));
        assert_eq!(map_over_tasks(&[1.0, 0.0]), Some(0.5));
        assert_eq!(map_over_tasks(&[]), None);
    }

    #[test]
    fn sweep_endpoints() {
        let im = ImageEval {
            preds: vec![pred(0.9, 0.2), pred(0.3, 0.6), pred(0.1, 0.9)],
            gts: vec![gt(0.2), gt(0.6)],
        };
        let rows = threshold_sweep(&[im], &[0.0, 0.5, 1.0 + 1e-9], IouKind::Box);
        assert_eq!(rows[0].retained, 3);
        assert_eq!(rows[0].recall, 1.0);
        assert_eq!(rows[1].retained, 1);
        assert_eq!(rows[2].retained, 0);
        assert_eq!((rows[2].precision, rows[2].recall, rows[2].f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn upsampling_thresholds_at_logit_zero() {
        let m = upsample_mask(&[5.0, -5.0, 5.0, -5.0], (2, 2), 4, 4);
        assert_eq!(&m[..4], &[true, true, false, false]);
    }

    fn arb_images() -> impl Strategy<Value = Vec<ImageEval>> {
        let slots = [0.1, 0.3, 0.5, 0.7, 0.9];
        proptest::collection::vec(
            (
                proptest::collection::vec((0.0f64..1.0, 0usize..5), 0..4),
                proptest::collection::vec(0usize..5, 0..3),
            ),
            1..3,
        )
        .prop_map(move |ims| {
            ims.into_iter()
                .map(|(p, g)| ImageEval {
                    preds: p.into_iter().map(|(s, k)| pred(s, slots[k])).collect(),
                    gts: g.into_iter().map(|k| gt(slots[k])).collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ap_matches_the_pr_oracle(images in arb_images()) {
            prop_assume!(images.iter().map(|i| i.preds.len()).sum::<usize>() <= 5);
            let ap = ap50(&images, IouKind::Box);
            prop_assert!((ap - oracle(&images)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn sweep_is_monotone(images in arb_images(), mut ts in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            ts.sort_by(f64::total_cmp);
            let rows = threshold_sweep(&images, &ts, IouKind::Box);
            for w in rows.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
                prop_assert!(w[1].retained <= w[0].retained);
            }
            // order-statistics check: retained equals the count of scores >= t
            let scores: Vec<f64> = images.iter().flat_map(|i| i.preds.iter().map(|p| p.score)).collect();
            for r in &rows {
                prop_assert_eq!(r.retained, scores.iter().filter(|s| **s >= r.threshold).count());
                prop_assert!((0.0..=1.0).contains(&r.precision) && (0.0..=1.0).contains(&r.recall));
            }
        }

        #[test]
        fn map_is_stable_under_duplication(aps in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let mut twice = aps.clone();
            twice.extend_from_slice(&aps);
            prop_assert!((map_over_tasks(&aps).unwrap() - map_over_tasks(&twice).unwrap()).abs() < 1e-12);
        }
    }
}
