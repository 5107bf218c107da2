//! AP@0.5 and mAP for boxes and masks, threshold sweeps, iterative
//! elimination and report formatting.

mod elimination;
mod metrics;

pub use elimination::{elimination_run, EliminationRound, ObjectScorer, PredictionScorer};
pub use metrics::{
    ap50, map_over_tasks, mask_iou, match_detections, scored_from_prediction, threshold_sweep, upsample_mask, ImageEval,
    IouKind, Scored, SweepRow, Truth, IOU_THRESHOLD,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataforge::{write_png, DataError};
use crate::detector::{Object, Prediction};
use crate::distill::Sample;
use crate::lang_vision::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub verb: String,
    pub n_images: usize,
    pub n_gt: usize,
    pub ap_box: f64,
    pub ap_mask: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationTranscript {
    pub scene: u64,
    pub verb: String,
    pub rounds: Vec<EliminationRound>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Effective run configuration, one `key=value` per line.
    pub config: String,
    pub dataset_hash: String,
    pub tasks: Vec<TaskEval>,
    pub map_box: f64,
    pub map_mask: f64,
    pub sweep: Vec<SweepRow>,
    pub elimination: Vec<EliminationTranscript>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        serde_json::from_str(s).map_err(|e| DataError::Invalid(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Per-task AP table followed by the means, in percent.
    pub fn task_table(&self) -> String {
        let mut s = String::from("| Task | images | AP50 box | AP50 mask |\n|---|---|---|---|\n");
        for t in &self.tasks {
            s.push_str(&format!("| {} | {} | {:.1} | {:.1} |\n", t.verb, t.n_images, 100.0 * t.ap_box, 100.0 * t.ap_mask));
        }
        s.push_str(&format!("| mean | | {:.1} | {:.1} |\n", 100.0 * self.map_box, 100.0 * self.map_mask));
        s
    }
}

/// Method comparison table in the usual `mAP^box / mAP^mask` layout.
pub fn format_comparison(rows: &[(String, f64, f64)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut s = format!("| {:<w$} | mAP^box | mAP^mask |\n|{}|---------|----------|\n", "Method", "-".repeat(w + 2));
    for (name, b, m) in rows {
        s.push_str(&format!("| {name:<w$} | {:>7.1} | {:>8.1} |\n", 100.0 * b, 100.0 * m));
    }
    s
}

pub fn image_eval(pred: &Prediction, targets: &[Object], h: usize, w: usize) -> ImageEval {
    ImageEval {
        preds: scored_from_prediction(pred, h, w),
        gts: targets
            .iter()
            .map(|o| Truth {
                bbox: o.bbox,
                mask: Some(o.mask.clone()),
            })
            .collect(),
    }
}

/// Runs `predict` on every sample and computes per-task AP. Tasks without
/// samples are left out of the means.
pub fn evaluate<E>(
    samples: &[Sample],
    predict: &mut dyn FnMut(&Sample) -> Result<Prediction, E>,
) -> Result<(Vec<TaskEval>, Vec<Vec<ImageEval>>), E> {
    let n_tasks = samples.iter().map(|s| s.task + 1).max().unwrap_or(0);
    let mut per_task: Vec<Vec<ImageEval>> = vec![Vec::new(); n_tasks];
    let mut verbs = vec![String::new(); n_tasks];
    for s in samples {
        let p = predict(s)?;
        per_task[s.task].push(image_eval(&p, &s.targets, s.image.height, s.image.width));
        verbs[s.task] = s.verb.clone();
    }
    let tasks = per_task
        .iter()
        .enumerate()
        .filter(|(_, ims)| !ims.is_empty())
        .map(|(t, ims)| TaskEval {
            task: t,
            verb: verbs[t].clone(),
            n_images: ims.len(),
            n_gt: ims.iter().map(|i| i.gts.len()).sum(),
            ap_box: ap50(ims, IouKind::Box),
            ap_mask: ap50(ims, IouKind::Mask),
        })
        .collect();
    Ok((tasks, per_task))
}

/// Means of per-task AP; 0 when there are no tasks.
pub fn means(tasks: &[TaskEval]) -> (f64, f64) {
    let b: Vec<f64> = tasks.iter().map(|t| t.ap_box).collect();
    let m: Vec<f64> = tasks.iter().map(|t| t.ap_mask).collect();
    (map_over_tasks(&b).unwrap_or(0.0), map_over_tasks(&m).unwrap_or(0.0))
}

/// Draws ground-truth boxes in green and retained predictions in red.
pub fn write_overlay(path: &Path, image: &Image, eval: &ImageEval, threshold: f64) -> Result<(), DataError> {
    let mut img = image.clone();
    let (h, w) = (img.height, img.width);
    let mut draw = |b: &[f64; 4], c: [f64; 3]| {
        let x0 = (((b[0] - b[2] / 2.0) * w as f64).floor().max(0.0) as usize).min(w - 1);
        let x1 = (((b[0] + b[2] / 2.0) * w as f64).ceil() as usize).clamp(1, w) - 1;
        let y0 = (((b[1] - b[3] / 2.0) * h as f64).floor().max(0.0) as usize).min(h - 1);
        let y1 = (((b[1] + b[3] / 2.0) * h as f64).ceil() as usize).clamp(1, h) - 1;
        for x in x0..=x1.max(x0) {
            img.set_pixel(y0, x, c);
            img.set_pixel(y1.max(y0), x, c);
        }
        for y in y0..=y1.max(y0) {
            img.set_pixel(y, x0, c);
            img.set_pixel(y, x1.max(x0), c);
        }
    };
    for g in &eval.gts {
        draw(&g.bbox, [0.0, 0.8, 0.0]);
    }
    for p in eval.preds.iter().filter(|p| p.score >= threshold) {
        draw(&p.bbox, [0.9, 0.0, 0.0]);
    }
    write_png(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_table_layout() {
        let t = format_comparison(&[("teacher".into(), 0.453, 0.401), ("student".into(), 0.5, 0.25)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("mAP^box") && lines[0].contains("mAP^mask"));
        assert!(lines[2].contains("45.3") && lines[2].contains("40.1"));
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            model: "m".into(),
            tasks: vec![TaskEval {
                task: 0,
                verb: "drink water with".into(),
                n_images: 2,
                n_gt: 3,
                ap_box: 0.5,
                ap_mask: 0.25,
            }],
            map_box: 0.5,
            map_mask: 0.25,
            ..EvalReport::default()
        };
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.task_table().contains("| drink water with | 2 | 50.0 | 25.0 |"));
    }
}
