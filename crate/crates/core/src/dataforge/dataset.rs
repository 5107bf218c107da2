use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::Object;
use crate::distill::Sample;
use crate::lang_vision::{Image, Vocabulary};

use super::compose::{classify, PoolImage, PoolInstance, SplitEntry, StratumReport, TaskRanks, TaskSplit};
use super::{DataError, Rle};

pub const FORMAT: &str = "afford-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub category_id: u64,
    pub rank: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub verb: String,
    pub ranks: Vec<RankEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSection {
    pub fractions: [f64; 4],
    pub reports: Vec<StratumReport>,
}

/// The dataset file. Field order is the on-disk section order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceDataset {
    pub format: String,
    pub version: u32,
    pub provenance: String,
    pub tasks: Vec<TaskRecord>,
    pub categories: Vec<CategoryRecord>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub splits: Vec<TaskSplit>,
    pub composition: CompositionSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl AffordanceDataset {
    pub fn empty(provenance: &str, fractions: [f64; 4]) -> Self {
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            provenance: provenance.into(),
            tasks: Vec::new(),
            categories: Vec::new(),
            images: Vec::new(),
            annotations: Vec::new(),
            splits: Vec::new(),
            composition: CompositionSection {
                fractions,
                reports: Vec::new(),
            },
        }
    }

    pub fn task_ranks(&self) -> Vec<TaskRanks> {
        self.tasks
            .iter()
            .map(|t| TaskRanks {
                verb: t.verb.clone(),
                ranks: t.ranks.iter().map(|r| (r.category_id, r.rank)).collect(),
            })
            .collect()
    }

    /// Instances per image, in annotation order.
    pub fn pool(&self) -> Vec<PoolImage> {
        let mut by_image: BTreeMap<u64, Vec<PoolInstance>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            by_image.entry(a.image_id).or_default().push(PoolInstance {
                annotation_id: a.id,
                category_id: a.category_id,
            });
        }
        by_image.into_iter().map(|(id, instances)| PoolImage { id, instances }).collect()
    }

    /// Checks references, split disjointness, composition tags and the
    /// best-rank target rule.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(DataError::Invalid(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let cats = unique_ids(self.categories.iter().map(|c| c.id), "category")?;
        let imgs = unique_ids(self.images.iter().map(|i| i.id), "image")?;
        unique_ids(self.tasks.iter().map(|t| t.id), "task")?;
        unique_ids(self.annotations.iter().map(|a| a.id), "annotation")?;
        for t in &self.tasks {
            let mut ranks: Vec<u32> = t.ranks.iter().map(|r| r.rank).collect();
            ranks.sort_unstable();
            if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                return Err(DataError::Invalid(format!("task {} ranks are not 1..m", t.id)));
            }
            if let Some(r) = t.ranks.iter().find(|r| !cats.contains(&r.category_id)) {
                return Err(DataError::Invalid(format!("task {} ranks unknown category {}", t.id, r.category_id)));
            }
        }
        for a in &self.annotations {
            if !imgs.contains(&a.image_id) || !cats.contains(&a.category_id) {
                return Err(DataError::Invalid(format!("annotation {} has dangling references", a.id)));
            }
        }
        let pool: BTreeMap<u64, PoolImage> = self.pool().into_iter().map(|p| (p.id, p)).collect();
        let ranks = self.task_ranks();
        for s in &self.splits {
            let task = self
                .tasks
                .iter()
                .position(|t| t.id == s.task_id)
                .ok_or_else(|| DataError::Invalid(format!("split for unknown task {}", s.task_id)))?;
            let train: BTreeSet<u64> = s.train.iter().map(|e| e.image_id).collect();
            if let Some(e) = s.test.iter().find(|e| train.contains(&e.image_id)) {
                return Err(DataError::Invalid(format!("image {} in both splits of task {}", e.image_id, s.task_id)));
            }
            for e in s.train.iter().chain(&s.test) {
                let img = pool
                    .get(&e.image_id)
                    .ok_or_else(|| DataError::Invalid(format!("split references unknown image {}", e.image_id)))?;
                let (tag, targets) = classify(img, &ranks[task]);
                if tag != e.composition || targets != e.targets {
                    return Err(DataError::Invalid(format!(
                        "task {} image {}: stored {:?}/{:?}, rule gives {:?}/{:?}",
                        s.task_id, e.image_id, e.composition, e.targets, tag, targets
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let d: Self = serde_json::from_str(text).map_err(|e| DataError::Invalid(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn hash(&self) -> String {
        crate::checkpoint::hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    /// Vocabulary over every task verb and category name.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_phrases(
            self.tasks
                .iter()
                .map(|t| t.verb.as_str())
                .chain(self.categories.iter().map(|c| c.name.as_str())),
        )
    }

    pub fn split(&self, task_id: u64, split: Split) -> &[SplitEntry] {
        self.splits.iter().find(|s| s.task_id == task_id).map_or(&[], |s| match split {
            Split::Train => &s.train,
            Split::Test => &s.test,
        })
    }

    pub fn annotation(&self, id: u64) -> Option<&AnnotationRecord> {
        self.annotations.iter().find(|a| a.id == id)
    }

    /// Training pairs of one split over all tasks, in task then image
    /// order. `image` resolves image ids to pixels.
    pub fn samples(&self, split: Split, image: &mut dyn FnMut(&ImageRecord) -> Result<Image, DataError>) -> Result<Vec<Sample>, DataError> {
        let ann: BTreeMap<u64, &AnnotationRecord> = self.annotations.iter().map(|a| (a.id, a)).collect();
        let img: BTreeMap<u64, &ImageRecord> = self.images.iter().map(|i| (i.id, i)).collect();
        let cat_index: BTreeMap<u64, usize> = self.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let mut cache: BTreeMap<u64, Image> = BTreeMap::new();
        let mut out = Vec::new();
        for (t_idx, task) in self.tasks.iter().enumerate() {
            for e in self.split(task.id, split) {
                let rec = img[&e.image_id];
                if !cache.contains_key(&rec.id) {
                    cache.insert(rec.id, image(rec)?);
                }
                let targets = e
                    .targets
                    .iter()
                    .map(|id| {
                        let a = ann[id];
                        let mask = a
                            .mask
                            .decode()
                            .ok_or_else(|| DataError::Invalid(format!("annotation {id} has a bad mask")))?;
                        Ok(Object {
                            bbox: a.bbox,
                            mask,
                            category: cat_index[&a.category_id],
                        })
                    })
                    .collect::<Result<Vec<_>, DataError>>()?;
                out.push(Sample {
                    image: cache[&rec.id].clone(),
                    task: t_idx,
                    verb: task.verb.clone(),
                    targets,
                });
            }
        }
        Ok(out)
    }
}

fn unique_ids(ids: impl Iterator<Item = u64>, what: &str) -> Result<BTreeSet<u64>, DataError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(DataError::Invalid(format!("duplicate {what} id {id}")));
        }
    }
    Ok(seen)
}

/// Tight normalized box of a row-major mask, `None` when empty.
pub fn mask_bbox(mask: &[bool], height: usize, width: usize) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let (w, h) = (width as f64, height as f64);
    Some([
        (x0 + x1) as f64 / 2.0 / w,
        (y0 + y1) as f64 / 2.0 / h,
        (x1 - x0) as f64 / w,
        (y1 - y0) as f64 / h,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{gen_microworld, Composition, MicroWorldSpec};

    fn world() -> AffordanceDataset {
        gen_microworld(&MicroWorldSpec {
            train_per_task: 5,
            test_per_task: 2,
            ..MicroWorldSpec::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = world();
        let back = AffordanceDataset::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());
    }

    #[test]
    fn validation_catches_rule_breaks() {
        let d = world();
        let mut dup = d.clone();
        let a = dup.annotations[0].clone();
        dup.annotations.push(a);
        assert!(dup.validate().is_err());

        let mut leak = d.clone();
        let e = leak.splits[0].train[0].clone();
        leak.splits[0].test.push(e);
        assert!(leak.validate().is_err());

        let mut tag = d.clone();
        let e = &mut tag.splits[0].train[0];
        e.composition = if e.composition == Composition::Others { Composition::Scso } else { Composition::Others };
        assert!(tag.validate().is_err());

        let mut tgt = d.clone();
        let e = tgt.splits[0].train.iter_mut().find(|e| !e.targets.is_empty()).unwrap();
        e.targets.pop();
        assert!(tgt.validate().is_err());
    }

    #[test]
    fn mask_bbox_is_tight() {
        let mut m = vec![false; 4 * 5];
        m[1 * 5 + 2] = true;
        m[2 * 5 + 3] = true;
        assert_eq!(mask_bbox(&m, 4, 5), Some([0.6, 0.5, 0.4, 0.5]));
        assert_eq!(mask_bbox(&[false; 4], 2, 2), None);
    }
}
