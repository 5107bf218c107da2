use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::compose::{PoolImage, PoolInstance};
use super::{DataError, Rle};

#[derive(Clone, Debug, PartialEq)]
pub struct DetImage {
    pub id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub mask: Rle,
}

/// Detection annotations indexed by image and by category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionDb {
    pub images: Vec<DetImage>,
    pub categories: Vec<DetCategory>,
    pub annotations: Vec<DetAnnotation>,
    pub by_image: BTreeMap<u64, Vec<usize>>,
    pub by_category: BTreeMap<u64, Vec<usize>>,
}

impl DetectionDb {
    pub fn image(&self, id: u64) -> Option<&DetImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_by_name(&self, name: &str) -> Option<&DetCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Rebuilds both indexes from `annotations`.
    pub fn reindex(&mut self) {
        self.by_image = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        self.by_category = self.categories.iter().map(|c| (c.id, Vec::new())).collect();
        for (k, a) in self.annotations.iter().enumerate() {
            self.by_image.entry(a.image_id).or_default().push(k);
            self.by_category.entry(a.category_id).or_default().push(k);
        }
    }

    pub fn pool(&self) -> Vec<PoolImage> {
        self.by_image
            .iter()
            .map(|(&id, idx)| PoolImage {
                id,
                instances: idx
                    .iter()
                    .map(|&k| PoolInstance {
                        annotation_id: self.annotations[k].id,
                        category_id: self.annotations[k].category_id,
                    })
                    .collect(),
            })
            .collect()
    }
}

pub fn load_detection_db(path: &Path) -> Result<DetectionDb, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_detection_db(&text)
}

/// Parses a COCO-style document. Records are numbered from 0 within their
/// section; annotation errors carry the annotation index.
pub fn parse_detection_db(text: &str) -> Result<DetectionDb, DataError> {
    let root: Value = serde_json::from_str(text).map_err(|e| DataError::Invalid(format!("not JSON: {e}")))?;
    let section = |name: &str| -> Result<&Vec<Value>, DataError> {
        root.get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| DataError::Invalid(format!("missing `{name}` array")))
    };
    let mut db = DetectionDb::default();
    let mut image_ids = BTreeSet::new();
    for (index, r) in section("images")?.iter().enumerate() {
        let bad = |reason: &str| DataError::Record {
            index,
            reason: format!("image: {reason}"),
        };
        let id = r.get("id").and_then(Value::as_u64).ok_or_else(|| bad("missing id"))?;
        let width = r.get("width").and_then(Value::as_u64).filter(|w| *w > 0).ok_or_else(|| bad("bad width"))?;
        let height = r.get("height").and_then(Value::as_u64).filter(|h| *h > 0).ok_or_else(|| bad("bad height"))?;
        let file = r.get("file_name").and_then(Value::as_str).unwrap_or_default().to_string();
        if !image_ids.insert(id) {
            return Err(bad(&format!("duplicate id {id}")));
        }
        db.images.push(DetImage {
            id,
            file,
            height: height as usize,
            width: width as usize,
        });
    }
    let mut cat_ids = BTreeSet::new();
    for (index, r) in section("categories")?.iter().enumerate() {
        let bad = |reason: &str| DataError::Record {
            index,
            reason: format!("category: {reason}"),
        };
        let id = r.get("id").and_then(Value::as_u64).ok_or_else(|| bad("missing id"))?;
        let name = r.get("name").and_then(Value::as_str).ok_or_else(|| bad("missing name"))?;
        if !cat_ids.insert(id) {
            return Err(bad(&format!("duplicate id {id}")));
        }
        db.categories.push(DetCategory { id, name: name.into() });
    }
    let sizes: BTreeMap<u64, (usize, usize)> = db.images.iter().map(|i| (i.id, (i.height, i.width))).collect();
    let mut ann_ids = BTreeSet::new();
    for (index, r) in section("annotations")?.iter().enumerate() {
        let bad = |reason: String| DataError::Record { index, reason };
        let id = r.get("id").and_then(Value::as_u64).ok_or_else(|| bad("missing id".into()))?;
        if !ann_ids.insert(id) {
            return Err(bad(format!("duplicate annotation id {id}")));
        }
        let image_id = r.get("image_id").and_then(Value::as_u64).ok_or_else(|| bad("missing image_id".into()))?;
        let &(h, w) = sizes.get(&image_id).ok_or_else(|| bad(format!("unknown image id {image_id}")))?;
        let category_id = r
            .get("category_id")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing category_id".into()))?;
        if !cat_ids.contains(&category_id) {
            return Err(DataError::UnknownCategory {
                index,
                category: category_id,
            });
        }
        let b = number_list(r.get("bbox")).filter(|b| b.len() == 4).ok_or_else(|| bad("bbox must be [x,y,w,h]".into()))?;
        if b.iter().any(|v| !v.is_finite()) || b[2] < 0.0 || b[3] < 0.0 {
            return Err(bad("bbox has negative or non-finite extent".into()));
        }
        let (fw, fh) = (w as f64, h as f64);
        let bbox = [(b[0] + b[2] / 2.0) / fw, (b[1] + b[3] / 2.0) / fh, b[2] / fw, b[3] / fh];
        let mask = match r.get("segmentation") {
            None | Some(Value::Null) => rect_mask(&b, h, w),
            Some(Value::Array(polys)) => {
                let mut rings = Vec::with_capacity(polys.len());
                for p in polys {
                    let pts = number_list(Some(p))
                        .filter(|v| v.len() >= 6 && v.len() % 2 == 0)
                        .ok_or_else(|| bad("polygon needs at least three x,y pairs".into()))?;
                    rings.push(pts);
                }
                polygon_mask(&rings, h, w)
            }
            Some(obj @ Value::Object(_)) => {
                let rle = parse_rle(obj).map_err(|e| bad(format!("segmentation: {e}")))?;
                if rle.size != [h, w] {
                    return Err(bad(format!("mask size {:?} differs from image {h}x{w}", rle.size)));
                }
                rle
            }
            Some(_) => return Err(bad("segmentation must be polygons or RLE".into())),
        };
        db.annotations.push(DetAnnotation {
            id,
            image_id,
            category_id,
            bbox,
            mask,
        });
    }
    db.reindex();
    Ok(db)
}

fn number_list(v: Option<&Value>) -> Option<Vec<f64>> {
    v?.as_array()?.iter().map(Value::as_f64).collect()
}

fn parse_rle(v: &Value) -> Result<Rle, String> {
    let size = number_list(v.get("size")).filter(|s| s.len() == 2).ok_or("size must be [h,w]")?;
    let size = [size[0] as usize, size[1] as usize];
    let counts = match v.get("counts") {
        Some(Value::String(s)) => decode_compressed_counts(s)?,
        Some(Value::Array(a)) => a.iter().map(|c| c.as_u64().map(|c| c as usize)).collect::<Option<Vec<_>>>().ok_or("counts must be non-negative integers")?,
        _ => return Err("missing counts".into()),
    };
    let rle = Rle { size, counts };
    rle.decode().ok_or("runs do not cover the image")?;
    Ok(rle)
}

/// The COCO compressed counts string: 5-bit groups offset by 48, with runs
/// after the second stored as differences from two runs back.
fn decode_compressed_counts(s: &str) -> Result<Vec<usize>, String> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = *bytes.get(p).ok_or("truncated counts string")? as i64 - 48;
            if !(0..64).contains(&c) {
                return Err("bad character in counts string".into());
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| usize::try_from(c).map_err(|_| "negative run".to_string()))
        .collect()
}

fn rect_mask(b: &[f64], h: usize, w: usize) -> Rle {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            m[y * w + x] = px >= b[0] && px < b[0] + b[2] && py >= b[1] && py < b[1] + b[3];
        }
    }
    Rle::encode(&m, h, w)
}

/// Even-odd fill over all rings, sampled at pixel centers.
fn polygon_mask(rings: &[Vec<f64>], h: usize, w: usize) -> Rle {
    let mut m = vec![false; h * w];
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut inside = false;
            for r in rings {
                let n = r.len() / 2;
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi, xj, yj) = (r[2 * i], r[2 * i + 1], r[2 * j], r[2 * j + 1]);
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
            }
            m[y * w + x] = inside;
        }
    }
    Rle::encode(&m, h, w)
}
