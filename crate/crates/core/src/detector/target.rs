use std::ops::Range;

use crate::lang_vision::{Prompt, PromptForm};
use crate::raster::downsample_mask;

use super::ModelError;

/// One annotated instance: normalized `(cx, cy, w, h)` box and a full-size
/// binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub bbox: [f64; 4],
    pub mask: Vec<bool>,
    pub category: usize,
}

/// Targets of one (image, task) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub boxes: Vec<[f64; 4]>,
    pub masks: Vec<Vec<bool>>,
    /// `(H, W)` of the masks.
    pub mask_size: (usize, usize),
    /// One distribution over the `n_max` token slots per object.
    pub p_span: Vec<Vec<f64>>,
    pub categories: Vec<usize>,
    pub n_max: usize,
}

/// Uniform distribution over `span` in an `n_max`-slot row.
pub fn uniform_span(span: &Range<usize>, n_max: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_max];
    let w = span.len() as f64;
    for j in span.clone() {
        row[j] = 1.0 / w;
    }
    row
}

impl GroundTruthSet {
    pub fn new(
        objects: &[Object],
        spans: &[Range<usize>],
        mask_size: (usize, usize),
        n_max: usize,
    ) -> Result<Self, ModelError> {
        if objects.len() != spans.len() {
            return Err(ModelError::Config(format!("{} objects but {} spans", objects.len(), spans.len())));
        }
        for s in spans {
            // the no-object slot is never part of a text span
            if s.is_empty() || s.end > n_max - 1 {
                return Err(ModelError::Config(format!("span {s:?} invalid for n_max {n_max}")));
            }
        }
        Ok(Self {
            boxes: objects.iter().map(|o| o.bbox).collect(),
            masks: objects.iter().map(|o| o.mask.clone()).collect(),
            mask_size,
            p_span: spans.iter().map(|s| uniform_span(s, n_max)).collect(),
            categories: objects.iter().map(|o| o.category).collect(),
            n_max,
        })
    }

    /// Targets whose spans come from `prompt`: the object's own "verb noun"
    /// phrase in the noun form, the whole "verb pronoun" text otherwise.
    pub fn for_prompt(
        objects: &[Object],
        category_names: &[String],
        prompt: &Prompt,
        mask_size: (usize, usize),
    ) -> Result<Self, ModelError> {
        let mut spans = Vec::with_capacity(objects.len());
        for o in objects {
            let span = match &prompt.form {
                PromptForm::VerbNoun => prompt.phrase_of(&category_names[o.category]).cloned(),
                PromptForm::VerbPronoun(_) => prompt.phrase_spans.first().cloned(),
                PromptForm::Empty => None,
            };
            spans.push(span.ok_or_else(|| {
                ModelError::Config(format!("prompt `{}` has no span for an object", prompt.text))
            })?);
        }
        Self::new(objects, &spans, mask_size, prompt.n_max())
    }

    pub fn n_gt(&self) -> usize {
        self.boxes.len()
    }

    /// Rows for the real objects followed by ∅ rows, one-hot at the
    /// no-object slot, up to `n_pred`.
    pub fn padded_span(&self, n_pred: usize) -> Vec<Vec<f64>> {
        let mut rows = self.p_span.clone();
        while rows.len() < n_pred {
            let mut r = vec![0.0; self.n_max];
            r[self.n_max - 1] = 1.0;
            rows.push(r);
        }
        rows
    }

    /// Masks block-downsampled to the prediction grid, as 0/1 reals.
    pub fn masks_at(&self, grid: (usize, usize)) -> Vec<Vec<f64>> {
        let (h, w) = self.mask_size;
        let f = h / grid.0;
        debug_assert_eq!(w / grid.1, f);
        self.masks
            .iter()
            .map(|m| {
                let d = if f == 1 { m.clone() } else { downsample_mask(m, h, w, f) };
                d.into_iter().map(|b| b as u8 as f64).collect()
            })
            .collect()
    }
}
