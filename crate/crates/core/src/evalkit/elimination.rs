use serde::{Deserialize, Serialize};

use crate::dataforge::{render_scene, MicroWorldSpec, Scene};
use crate::detector::Prediction;
use crate::lang_vision::Image;
use crate::losses::box_iou;

use super::metrics::IOU_THRESHOLD;

/// Scores every object of a scene for the task at hand.
pub trait ObjectScorer {
    fn score(&mut self, scene: &Scene) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminationRound {
    pub round: usize,
    /// Indices into the original scene's objects.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected: Option<usize>,
}

/// Repeatedly picks the best-scoring object and removes it from the scene.
/// A round whose best score is below `accept`, or with no objects left,
/// selects nothing.
pub fn elimination_run(scorer: &mut dyn ObjectScorer, scene: &Scene, rounds: usize, accept: f64) -> Vec<EliminationRound> {
    let mut remaining: Vec<usize> = (0..scene.objects.len()).collect();
    let mut out = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let current = Scene {
            objects: remaining.iter().map(|&i| scene.objects[i].clone()).collect(),
            ..scene.clone()
        };
        let scores = if remaining.is_empty() { Vec::new() } else { scorer.score(&current) };
        let best = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s >= accept)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k);
        out.push(EliminationRound {
            round,
            candidates: remaining.clone(),
            scores,
            selected: best.map(|k| remaining[k]),
        });
        if let Some(k) = best {
            remaining.remove(k);
        }
    }
    out
}

/// Scores objects by rendering the scene and running a detector: an
/// object takes the best score among queries whose box overlaps it with
/// IoU at least 0.5, and 0 otherwise.
pub struct PredictionScorer<'a, F: FnMut(&Image) -> Prediction> {
    pub spec: &'a MicroWorldSpec,
    pub predict: F,
}

impl<F: FnMut(&Image) -> Prediction> ObjectScorer for PredictionScorer<'_, F> {
    fn score(&mut self, scene: &Scene) -> Vec<f64> {
        let (img, objects) = render_scene(scene, self.spec);
        let p = (self.predict)(&img);
        objects
            .iter()
            .map(|o| {
                p.boxes
                    .iter()
                    .zip(&p.scores)
                    .filter(|(b, _)| box_iou(b, &o.bbox) >= IOU_THRESHOLD)
                    .map(|(_, s)| *s)
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::Placed;

    /// Utility is a fixed value per shape size.
    struct Oracle;

    impl ObjectScorer for Oracle {
        fn score(&mut self, scene: &Scene) -> Vec<f64> {
            scene.objects.iter().map(|p| p.size).collect()
        }
    }

    fn scene(sizes: &[f64]) -> Scene {
        Scene {
            id: 0,
            canvas: 64,
            objects: sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| Placed {
                    shape: 0,
                    cx: 10.0 + 20.0 * i as f64,
                    cy: 32.0,
                    size: s,
                    color: [0.5; 3],
                })
                .collect(),
            noise_seed: 0,
        }
    }

    #[test]
    fn oracle_order_is_descending() {
        let r = elimination_run(&mut Oracle, &scene(&[2.0, 3.0, 1.0]), 3, 0.0);
        let picked: Vec<usize> = r.iter().map(|x| x.selected.unwrap()).collect();
        assert_eq!(picked, vec![1, 0, 2]);
        for w in r.windows(2) {
            assert!(w[1].candidates.len() < w[0].candidates.len());
        }
    }

    #[test]
    fn single_candidate_then_empty() {
        let r = elimination_run(&mut Oracle, &scene(&[3.0]), 3, 0.0);
        assert_eq!(r[0].selected, Some(0));
        assert!(r[1].selected.is_none() && r[2].selected.is_none());
        let low = elimination_run(&mut Oracle, &scene(&[1.0]), 1, 2.0);
        assert_eq!(low[0].selected, None);
    }
}
