use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Object;
use crate::lang_vision::Image;

use super::coco::{DetAnnotation, DetCategory, DetImage, DetectionDb};
use super::compose::{compose_affordance_dataset, stratum_counts, ComposeConfig, Composition, TaskRanks, STRATA};
use super::dataset::{mask_bbox, AffordanceDataset, AnnotationRecord, CategoryRecord, ImageRecord, RankEntry, TaskRecord};
use super::{read_png, write_png, DataError, Rle};

pub const DEFAULT_RANK_TABLE: &str = include_str!("../../assets/microworld_ranks.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    TallRect,
    Triangle,
    Square,
    LShape,
    WideRect,
    Bar,
    Diamond,
}

impl ShapeKind {
    /// Half extents in x and y for size `s`.
    fn half_extents(self, s: f64) -> (f64, f64) {
        match self {
            Self::TallRect => (s / 4.0, s / 2.0),
            Self::WideRect => (0.75 * s, s / 4.0),
            Self::Bar => (s / 2.0, s / 10.0),
            _ => (s / 2.0, s / 2.0),
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside the shape.
    fn contains(self, s: f64, dx: f64, dy: f64) -> bool {
        let h = s / 2.0;
        match self {
            Self::Disk => dx * dx + dy * dy <= h * h,
            Self::TallRect | Self::WideRect | Self::Bar | Self::Square => {
                let (hx, hy) = self.half_extents(s);
                dx.abs() <= hx && dy.abs() <= hy
            }
            // apex up, base of width s at the bottom
            Self::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
            Self::LShape => dx.abs() <= h && dy.abs() <= h && (dx <= -h + s / 3.0 || dy >= h - s / 3.0),
            Self::Diamond => dx.abs() + dy.abs() <= h,
        }
    }

    /// Exact area of the continuous shape.
    pub fn area(self, s: f64) -> f64 {
        match self {
            Self::Disk => std::f64::consts::PI * s * s / 4.0,
            Self::TallRect | Self::WideRect | Self::Bar | Self::Square => {
                let (hx, hy) = self.half_extents(s);
                4.0 * hx * hy
            }
            Self::Triangle | Self::Diamond => s * s / 2.0,
            Self::LShape => s * s * 5.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub category: String,
    pub kind: ShapeKind,
    pub color: [f64; 3],
}

/// One line of the rank table.
#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub task: String,
    pub category: String,
    pub rank: u32,
    pub provenance: String,
}

/// Tab-separated `task, category, rank, provenance`; `#` starts a comment.
pub fn parse_rank_table(text: &str) -> Result<Vec<RankRow>, DataError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(DataError::Record {
                index: i,
                reason: format!("rank table line has {} fields, expected 4", f.len()),
            });
        }
        let rank = f[2].parse().map_err(|_| DataError::Record {
            index: i,
            reason: format!("bad rank `{}`", f[2]),
        })?;
        rows.push(RankRow {
            task: f[0].into(),
            category: f[1].into(),
            rank,
            provenance: f[3].into(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroWorldSpec {
    pub canvas: usize,
    pub shapes: Vec<ShapeSpec>,
    pub ranks: Vec<RankRow>,
    /// Inclusive shape size range in pixels.
    pub size_range: (usize, usize),
    /// Minimum gap between shape extents and to the border.
    pub margin: usize,
    pub max_objects: usize,
    /// Placement attempts per scene before it is skipped.
    pub retries: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub fractions: [f64; 4],
    pub seed: u64,
}

impl Default for MicroWorldSpec {
    fn default() -> Self {
        use ShapeKind::*;
        let s = |c: &str, kind, color| ShapeSpec {
            category: c.into(),
            kind,
            color,
        };
        Self {
            canvas: 64,
            shapes: vec![
                s("cup", Disk, [0.85, 0.15, 0.15]),
                s("bottle", TallRect, [0.15, 0.7, 0.2]),
                s("wine glass", Triangle, [0.6, 0.2, 0.75]),
                s("blender", Square, [0.5, 0.5, 0.5]),
                s("chair", LShape, [0.55, 0.35, 0.15]),
                s("couch", WideRect, [0.15, 0.3, 0.85]),
                s("knife", Bar, [0.9, 0.85, 0.1]),
                s("book", Diamond, [0.95, 0.55, 0.1]),
            ],
            ranks: parse_rank_table(DEFAULT_RANK_TABLE).expect("bundled table parses"),
            size_range: (10, 18),
            margin: 2,
            max_objects: 4,
            retries: 50,
            train_per_task: 60,
            test_per_task: 15,
            fractions: super::DEFAULT_FRACTIONS,
            seed: 0,
        }
    }
}

impl MicroWorldSpec {
    /// Task verbs in first-appearance order with `(category index, rank)`.
    pub fn tasks(&self) -> Vec<(String, Vec<(usize, u32)>)> {
        let mut out: Vec<(String, Vec<(usize, u32)>)> = Vec::new();
        for r in &self.ranks {
            let c = self.shapes.iter().position(|s| s.category == r.category).unwrap_or(usize::MAX);
            match out.iter_mut().find(|(t, _)| *t == r.task) {
                Some((_, v)) => v.push((c, r.rank)),
                None => out.push((r.task.clone(), vec![(c, r.rank)])),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.shapes.is_empty() {
            return bad("no shapes".into());
        }
        let names: BTreeSet<&str> = self.shapes.iter().map(|s| s.category.as_str()).collect();
        if names.len() != self.shapes.len() {
            return bad("duplicate category names".into());
        }
        let (lo, hi) = self.size_range;
        if lo < 4 || lo > hi {
            return bad(format!("size range {lo}..={hi} invalid"));
        }
        if (1.5 * hi as f64) + 2.0 * self.margin as f64 > self.canvas as f64 {
            return bad("largest shape does not fit the canvas".into());
        }
        if self.max_objects < 3 {
            return bad("max_objects must allow a multi-category scene with a distractor".into());
        }
        let tasks = self.tasks();
        if tasks.is_empty() {
            return bad("empty rank table".into());
        }
        for r in &self.ranks {
            if !names.contains(r.category.as_str()) {
                return bad(format!("rank table names unknown category `{}`", r.category));
            }
        }
        let mut uses: BTreeMap<usize, usize> = BTreeMap::new();
        for (t, cats) in &tasks {
            let mut ranks: Vec<u32> = cats.iter().map(|c| c.1).collect();
            ranks.sort_unstable();
            if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                return bad(format!("task `{t}` ranks are not 1..m"));
            }
            for (c, _) in cats {
                *uses.entry(*c).or_default() += 1;
            }
        }
        if !tasks.iter().any(|(_, c)| c.len() >= 2) || !uses.values().any(|&n| n >= 2) {
            return bad("affordance map must be many-to-many".into());
        }
        Ok(())
    }
}

/// A shape instance in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placed {
    pub shape: usize,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub canvas: usize,
    pub objects: Vec<Placed>,
    pub noise_seed: u64,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes a scene at pixel centers. Masks are disjoint by
/// construction; boxes are the tight boxes of the masks.
pub fn render_scene(scene: &Scene, spec: &MicroWorldSpec) -> (Image, Vec<Object>) {
    let n = scene.canvas;
    let mut img = Image::new(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    for y in 0..n {
        for x in 0..n {
            let g = quantize(0.92 + rng.random_range(-0.02..0.02));
            img.set_pixel(y, x, [g, g, g]);
        }
    }
    let mut objects = Vec::with_capacity(scene.objects.len());
    for p in &scene.objects {
        let kind = spec.shapes[p.shape].kind;
        let mut mask = vec![false; n * n];
        let color = p.color.map(quantize);
        for y in 0..n {
            for x in 0..n {
                if kind.contains(p.size, x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy) {
                    mask[y * n + x] = true;
                    img.set_pixel(y, x, color);
                }
            }
        }
        let bbox = mask_bbox(&mask, n, n).unwrap_or([p.cx / n as f64, p.cy / n as f64, 0.0, 0.0]);
        objects.push(Object {
            bbox,
            mask,
            category: p.shape,
        });
    }
    (img, objects)
}

/// Picks shape indices for a scene meant to land in `stratum` for a task
/// with ranked shapes `ranked`.
fn scene_shapes(rng: &mut ChaCha8Rng, stratum: Composition, ranked: &[usize], others: &[usize], max: usize) -> Vec<usize> {
    let pick = |rng: &mut ChaCha8Rng, from: &[usize]| from[rng.random_range(0..from.len())];
    let mut out = Vec::new();
    let distractors = |rng: &mut ChaCha8Rng, room: usize| if others.is_empty() || room == 0 { 0 } else { rng.random_range(0..=room.min(1)) };
    match stratum {
        Composition::Mcmo => {
            let k = rng.random_range(2..=ranked.len().min(3).min(max));
            let mut pool = ranked.to_vec();
            for _ in 0..k {
                out.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            if out.len() < max && rng.random_bool(0.3) {
                out.push(out[0]);
            }
        }
        Composition::Scmo => {
            let c = pick(rng, ranked);
            let k = rng.random_range(2..=3.min(max));
            out.extend(std::iter::repeat_n(c, k));
        }
        Composition::Scso => out.push(pick(rng, ranked)),
        Composition::Others => {
            if !others.is_empty() {
                for _ in 0..rng.random_range(0..=3.min(max)) {
                    out.push(pick(rng, others));
                }
            }
            return out;
        }
    }
    for _ in 0..distractors(rng, max - out.len()) {
        out.push(pick(rng, others));
    }
    out
}

/// Places shapes without overlap; `None` when the attempt budget runs out.
fn place(rng: &mut ChaCha8Rng, shapes: &[usize], spec: &MicroWorldSpec) -> Option<Vec<Placed>> {
    let n = spec.canvas as f64;
    let m = spec.margin as f64;
    'attempt: for _ in 0..spec.retries.max(1) {
        let mut placed: Vec<(Placed, (f64, f64))> = Vec::new();
        for &sh in shapes {
            let size = rng.random_range(spec.size_range.0..=spec.size_range.1) as f64;
            let (hx, hy) = spec.shapes[sh].kind.half_extents(size);
            let (lo_x, hi_x, lo_y, hi_y) = (hx + m, n - hx - m, hy + m, n - hy - m);
            if lo_x > hi_x || lo_y > hi_y {
                continue 'attempt;
            }
            let cx = rng.random_range(lo_x..=hi_x).round();
            let cy = rng.random_range(lo_y..=hi_y).round();
            let clash = placed
                .iter()
                .any(|(q, (qx, qy))| (cx - q.cx).abs() < hx + qx + m && (cy - q.cy).abs() < hy + qy + m);
            if clash {
                continue 'attempt;
            }
            let base = spec.shapes[sh].color;
            let color = base.map(|c| c + rng.random_range(-0.05..0.05));
            placed.push((Placed { shape: sh, cx, cy, size, color }, (hx, hy)));
        }
        return Some(placed.into_iter().map(|(p, _)| p).collect());
    }
    None
}

/// A generated dataset with its rendered images.
#[derive(Clone, Debug)]
pub struct MicroWorld {
    pub dataset: AffordanceDataset,
    pub scenes: Vec<Scene>,
    pub images: BTreeMap<u64, Image>,
    pub skipped: usize,
}

impl MicroWorld {
    /// Writes `dataset.json`, `scenes.json` and one PNG per image under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| DataError::io(&img_dir, e))?;
        for rec in &self.dataset.images {
            write_png(&dir.join(&rec.file), &self.images[&rec.id])?;
        }
        let used: Vec<&Scene> = self.scenes.iter().filter(|s| self.images.contains_key(&s.id)).collect();
        let mut json = serde_json::to_string(&used).expect("serializable");
        json.push('\n');
        let path = dir.join("scenes.json");
        fs::write(&path, json).map_err(|e| DataError::io(&path, e))?;
        self.dataset.save(&dir.join("dataset.json"))
    }

    /// Scene descriptions of a directory written by [`MicroWorld::write`].
    pub fn read_scenes(dir: &Path) -> Result<Vec<Scene>, DataError> {
        let path = dir.join("scenes.json");
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Loads a dataset directory written by [`MicroWorld::write`].
    pub fn read(dir: &Path) -> Result<(AffordanceDataset, BTreeMap<u64, Image>), DataError> {
        let ds = AffordanceDataset::load(&dir.join("dataset.json"))?;
        let mut images = BTreeMap::new();
        for rec in &ds.images {
            let img = read_png(&dir.join(&rec.file))?;
            if (img.height, img.width) != (rec.height, rec.width) {
                return Err(DataError::Invalid(format!("image {} has the wrong size", rec.id)));
            }
            images.insert(rec.id, img);
        }
        Ok((ds, images))
    }
}

/// Generates scenes for every (task, stratum) quota, renders them and
/// samples the per-task splits from the shared pool.
pub fn gen_microworld(spec: &MicroWorldSpec) -> Result<MicroWorld, DataError> {
    spec.validate()?;
    let tasks = spec.tasks();
    let quota = stratum_counts(spec.train_per_task + spec.test_per_task, &spec.fractions);
    let mut scenes = Vec::new();
    let mut skipped = 0;
    let mut index = 0u64;
    for (_, ranked) in &tasks {
        let ranked_ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        let others: Vec<usize> = (0..spec.shapes.len()).filter(|c| !ranked_ids.contains(c)).collect();
        for (s, &stratum) in STRATA.iter().enumerate() {
            for _ in 0..quota[s] {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                index += 1;
                let shapes = scene_shapes(&mut rng, stratum, &ranked_ids, &others, spec.max_objects);
                match place(&mut rng, &shapes, spec) {
                    Some(objects) => scenes.push(Scene {
                        id: scenes.len() as u64,
                        canvas: spec.canvas,
                        objects,
                        noise_seed: rng.random(),
                    }),
                    None => skipped += 1,
                }
            }
        }
    }
    let mut db = DetectionDb {
        categories: spec
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| DetCategory {
                id: i as u64,
                name: s.category.clone(),
            })
            .collect(),
        ..DetectionDb::default()
    };
    let mut images = BTreeMap::new();
    for sc in &scenes {
        let (img, objects) = render_scene(sc, spec);
        db.images.push(DetImage {
            id: sc.id,
            file: format!("images/{:06}.png", sc.id),
            height: spec.canvas,
            width: spec.canvas,
        });
        for o in objects {
            db.annotations.push(DetAnnotation {
                id: db.annotations.len() as u64,
                image_id: sc.id,
                category_id: o.category as u64,
                bbox: o.bbox,
                mask: Rle::encode(&o.mask, spec.canvas, spec.canvas),
            });
        }
        images.insert(sc.id, img);
    }
    db.reindex();
    let task_ranks: Vec<TaskRanks> = tasks
        .iter()
        .map(|(v, r)| TaskRanks {
            verb: v.clone(),
            ranks: r.iter().map(|&(c, k)| (c as u64, k)).collect(),
        })
        .collect();
    let cfg = ComposeConfig {
        train_per_task: spec.train_per_task,
        test_per_task: spec.test_per_task,
        fractions: spec.fractions,
        seed: spec.seed,
    };
    let dataset = assemble(&db, &task_ranks, &cfg, "micro-world fixture")?;
    Ok(MicroWorld {
        dataset,
        scenes,
        images,
        skipped,
    })
}

/// Builds a validated dataset from a detection database and a ranked
/// task table. Only images used by some split are kept.
pub fn assemble(
    db: &DetectionDb,
    tasks: &[TaskRanks],
    cfg: &ComposeConfig,
    provenance: &str,
) -> Result<AffordanceDataset, DataError> {
    let (splits, reports) = compose_affordance_dataset(&db.pool(), tasks, cfg);
    let used: BTreeSet<u64> = splits
        .iter()
        .flat_map(|s| s.train.iter().chain(&s.test).map(|e| e.image_id))
        .collect();
    let mut ds = AffordanceDataset::empty(provenance, cfg.fractions);
    ds.tasks = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskRecord {
            id: i as u64,
            verb: t.verb.clone(),
            ranks: t.ranks.iter().map(|&(c, r)| RankEntry { category_id: c, rank: r }).collect(),
        })
        .collect();
    ds.categories = db
        .categories
        .iter()
        .map(|c| CategoryRecord {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    ds.images = db
        .images
        .iter()
        .filter(|i| used.contains(&i.id))
        .map(|i| ImageRecord {
            id: i.id,
            file: i.file.clone(),
            height: i.height,
            width: i.width,
        })
        .collect();
    ds.annotations = db
        .annotations
        .iter()
        .filter(|a| used.contains(&a.image_id))
        .map(|a| AnnotationRecord {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            mask: a.mask.clone(),
        })
        .collect();
    ds.splits = splits;
    ds.composition.reports = reports;
    ds.validate()?;
    Ok(ds)
}
