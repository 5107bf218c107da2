use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::numerics::DiffArray;

use super::DistillError;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row to `x`; ties go to the lowest index.
pub fn nearest(x: &[f64], rows: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        let d = sq_dist(x, r);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after initialization and after every iteration.
    pub inertia: Vec<f64>,
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let idx = points
        .iter()
        .map(|p| {
            let (i, d) = nearest(p, centers).expect("k >= 1");
            total += d;
            i
        })
        .collect();
    (idx, total)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            // all remaining points coincide with chosen centers
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd iterations from a k-means++ start. Stops after
/// [`KMEANS_MAX_ITER`] iterations or when inertia drops by less than
/// [`KMEANS_TOL`]. An emptied cluster is re-seeded with the point farthest
/// from its center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans, DistillError> {
    if k == 0 || k > points.len() {
        return Err(DistillError::BadClusterCount { k, points: points.len() });
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let (mut assignment, mut inertia) = assign(points, &centers);
    let mut trace = vec![inertia];
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                next[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .fold(None::<(usize, f64)>, |best, i| {
                        let dist = sq_dist(&points[i], &next[assignment[i]]);
                        if best.is_none_or(|(_, b)| dist > b) {
                            Some((i, dist))
                        } else {
                            best
                        }
                    })
                    .expect("k <= n")
                    .0;
                taken.push(far);
                next[c] = points[far].clone();
            }
        }
        let (next_assignment, next_inertia) = assign(points, &next);
        if next_inertia > inertia {
            // rounding in the mean update; keep the previous state
            break;
        }
        let delta = inertia - next_inertia;
        centers = next;
        assignment = next_assignment;
        inertia = next_inertia;
        trace.push(inertia);
        if delta < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignment,
        inertia: trace,
    })
}

/// Euclidean-nearest center; ties go to the lowest index.
pub fn select_prototype<'c>(pron: &[f64], centers: &'c [Vec<f64>]) -> Result<(usize, &'c [f64]), DistillError> {
    let (i, _) = nearest(pron, centers).ok_or(DistillError::NoCenters)?;
    Ok((i, &centers[i]))
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TaskSlot {
    queue: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    stale: bool,
}

/// Per-task queues of teacher noun features and their cluster centers.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub n_mem: usize,
    pub d: usize,
    pub k: usize,
    tasks: BTreeMap<usize, TaskSlot>,
}

impl MemoryBank {
    pub fn new(n_mem: usize, d: usize, k: usize) -> Result<Self, DistillError> {
        if n_mem == 0 || d == 0 || k == 0 {
            return Err(DistillError::BadBank(format!("n_mem={n_mem} d={d} k={k}")));
        }
        Ok(Self {
            n_mem,
            d,
            k,
            tasks: BTreeMap::new(),
        })
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn queue(&self, task: usize) -> &[Vec<f64>] {
        self.tasks.get(&task).map_or(&[], |s| &s.queue)
    }

    pub fn is_full(&self, task: usize) -> bool {
        self.queue(task).len() == self.n_mem
    }

    pub fn is_stale(&self, task: usize) -> bool {
        self.tasks.get(&task).is_some_and(|s| s.stale)
    }

    /// Appends `f` to the task queue. Once the queue is full, the entry
    /// nearest to `f` is evicted first. Returns the evicted index.
    pub fn update(&mut self, task: usize, f: Vec<f64>) -> Result<Option<usize>, DistillError> {
        if f.len() != self.d {
            return Err(DistillError::Dimension { expected: self.d, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(DistillError::NonFinite("noun feature"));
        }
        let n_mem = self.n_mem;
        let slot = self.tasks.entry(task).or_default();
        let evicted = if slot.queue.len() == n_mem {
            let (i, _) = nearest(&f, &slot.queue).expect("full queue");
            slot.queue.remove(i);
            Some(i)
        } else {
            None
        };
        slot.queue.push(f);
        slot.stale = true;
        Ok(evicted)
    }

    /// Re-clusters one task with `K' = min(K, queue length)`.
    pub fn recluster(&mut self, task: usize, seed: u64) -> Result<(), DistillError> {
        let k = self.k;
        let slot = self.tasks.get_mut(&task).ok_or(DistillError::UnknownTask(task))?;
        let km = kmeans(&slot.queue, k.min(slot.queue.len()), seed)?;
        slot.centers = km.centers;
        slot.stale = false;
        Ok(())
    }

    pub fn recluster_all(&mut self, seed: u64) -> Result<(), DistillError> {
        let ids: Vec<usize> = self.tasks().collect();
        for t in ids {
            if self.is_stale(t) {
                self.recluster(t, seed ^ t as u64)?;
            }
        }
        Ok(())
    }

    /// Fresh centers of a task.
    pub fn centers(&self, task: usize) -> Result<&[Vec<f64>], DistillError> {
        let slot = self.tasks.get(&task).ok_or(DistillError::UnknownTask(task))?;
        if slot.stale {
            return Err(DistillError::StaleCenters(task));
        }
        Ok(&slot.centers)
    }

    pub fn select(&self, task: usize, pron: &[f64]) -> Result<(usize, &[f64]), DistillError> {
        select_prototype(pron, self.centers(task)?)
    }

    /// Stores queues and centers as `bank.task.{id}.queue|centers`.
    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<(), DistillError> {
        ck.push("bank.meta", DiffArray::vector(vec![self.n_mem as f64, self.d as f64, self.k as f64]));
        for (t, slot) in &self.tasks {
            if slot.stale {
                return Err(DistillError::StaleCenters(*t));
            }
            ck.push(format!("bank.task.{t}.queue"), rows_to_array(&slot.queue, self.d));
            ck.push(format!("bank.task.{t}.centers"), rows_to_array(&slot.centers, self.d));
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self, DistillError> {
        let meta = ck.get("bank.meta").ok_or_else(|| DistillError::BadBank("missing bank.meta".into()))?;
        let m = meta.values();
        if m.len() != 3 {
            return Err(DistillError::BadBank("bank.meta must hold 3 values".into()));
        }
        let mut bank = Self::new(m[0] as usize, m[1] as usize, m[2] as usize)?;
        for (name, arr) in &ck.arrays {
            let Some(rest) = name.strip_prefix("bank.task.") else { continue };
            let Some(id) = rest.strip_suffix(".queue") else { continue };
            let t: usize = id.parse().map_err(|_| DistillError::BadBank(format!("bad task key `{name}`")))?;
            let centers = ck
                .get(&format!("bank.task.{t}.centers"))
                .ok_or_else(|| DistillError::BadBank(format!("task {t} has no centers")))?;
            let slot = TaskSlot {
                queue: array_to_rows(arr, bank.d)?,
                centers: array_to_rows(centers, bank.d)?,
                stale: false,
            };
            bank.tasks.insert(t, slot);
        }
        Ok(bank)
    }
}

fn rows_to_array(rows: &[Vec<f64>], d: usize) -> DiffArray {
    DiffArray::matrix(rows.len(), d, rows.concat()).expect("rows of width d")
}

fn array_to_rows(a: &DiffArray, d: usize) -> Result<Vec<Vec<f64>>, DistillError> {
    if a.shape().len() != 2 || a.cols() != d {
        return Err(DistillError::BadBank(format!("array of shape {:?} for d={d}", a.shape())));
    }
    Ok((0..a.rows()).map(|r| a.row(r).to_vec()).collect())
}
