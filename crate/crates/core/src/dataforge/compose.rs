use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Scene composition of one (task, image) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Composition {
    /// Several task-relevant categories present.
    #[serde(rename = "MCMO")]
    Mcmo,
    /// One relevant category with several instances.
    #[serde(rename = "SCMO")]
    Scmo,
    /// One relevant category, one instance.
    #[serde(rename = "SCSO")]
    Scso,
    /// No relevant category.
    #[serde(rename = "Others")]
    Others,
}

pub const STRATA: [Composition; 4] = [Composition::Mcmo, Composition::Scmo, Composition::Scso, Composition::Others];
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.4, 0.4, 0.1, 0.1];

impl Composition {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["MCMO", "SCMO", "SCSO", "Others"][self.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolInstance {
    pub annotation_id: u64,
    pub category_id: u64,
}

/// An image of the candidate pool with its annotated instances.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolImage {
    pub id: u64,
    pub instances: Vec<PoolInstance>,
}

/// Ranked categories of one task; rank 1 is preferred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRanks {
    pub verb: String,
    pub ranks: Vec<(u64, u32)>,
}

impl TaskRanks {
    pub fn rank_of(&self, category: u64) -> Option<u32> {
        self.ranks.iter().find(|(c, _)| *c == category).map(|(_, r)| *r)
    }
}

/// Composition tag and target annotation ids of an image for a task. The
/// targets are every instance of the best-ranked category present; equal
/// ranks go to the smaller category id.
pub fn classify(image: &PoolImage, task: &TaskRanks) -> (Composition, Vec<u64>) {
    let mut present: Vec<(u32, u64)> = Vec::new();
    for inst in &image.instances {
        if let Some(r) = task.rank_of(inst.category_id) {
            if !present.iter().any(|(_, c)| *c == inst.category_id) {
                present.push((r, inst.category_id));
            }
        }
    }
    let Some(&(_, best)) = present.iter().min() else {
        return (Composition::Others, Vec::new());
    };
    let targets: Vec<u64> = image
        .instances
        .iter()
        .filter(|i| i.category_id == best)
        .map(|i| i.annotation_id)
        .collect();
    let tag = if present.len() >= 2 {
        Composition::Mcmo
    } else if targets.len() >= 2 {
        Composition::Scmo
    } else {
        Composition::Scso
    };
    (tag, targets)
}

/// Largest-remainder split of `n` by `fractions`; ties go to the earlier
/// stratum.
pub fn stratum_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / total * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub image_id: u64,
    pub composition: Composition,
    pub targets: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_id: u64,
    pub train: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
}

/// Requested and achieved stratum counts, in [`STRATA`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub task_id: u64,
    pub split: String,
    pub requested: [usize; 4],
    pub filled: [usize; 4],
}

impl StratumReport {
    pub fn is_complete(&self) -> bool {
        self.requested == self.filled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub fractions: [f64; 4],
    pub seed: u64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            train_per_task: 600,
            test_per_task: 150,
            fractions: DEFAULT_FRACTIONS,
            seed: 0,
        }
    }
}

/// Samples per-task train and test images from `pool` by composition
/// stratum. Train and test are disjoint within a task; an image may serve
/// several tasks. Short strata are filled partially and reported.
pub fn compose_affordance_dataset(
    pool: &[PoolImage],
    tasks: &[TaskRanks],
    cfg: &ComposeConfig,
) -> (Vec<TaskSplit>, Vec<StratumReport>) {
    let want_train = stratum_counts(cfg.train_per_task, &cfg.fractions);
    let want_test = stratum_counts(cfg.test_per_task, &cfg.fractions);
    let mut splits = Vec::with_capacity(tasks.len());
    let mut reports = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut buckets: [Vec<SplitEntry>; 4] = Default::default();
        for img in pool {
            let (composition, targets) = classify(img, task);
            buckets[composition.index()].push(SplitEntry {
                image_id: img.id,
                composition,
                targets,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut split = TaskSplit {
            task_id: t as u64,
            ..TaskSplit::default()
        };
        let mut filled_train = [0; 4];
        let mut filled_test = [0; 4];
        for (s, bucket) in buckets.iter_mut().enumerate() {
            bucket.shuffle(&mut rng);
            let n_train = want_train[s].min(bucket.len());
            let n_test = want_test[s].min(bucket.len() - n_train);
            let mut rest = bucket.split_off(n_train);
            rest.truncate(n_test);
            filled_train[s] = n_train;
            filled_test[s] = n_test;
            split.train.append(bucket);
            split.test.append(&mut rest);
        }
        split.train.sort_by_key(|e| e.image_id);
        split.test.sort_by_key(|e| e.image_id);
        reports.push(StratumReport {
            task_id: t as u64,
            split: "train".into(),
            requested: want_train,
            filled: filled_train,
        });
        reports.push(StratumReport {
            task_id: t as u64,
            split: "test".into(),
            requested: want_test,
            filled: filled_test,
        });
        splits.push(split);
    }
    (splits, reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: u64, cats: &[u64]) -> PoolImage {
        PoolImage {
            id,
            instances: cats
                .iter()
                .enumerate()
                .map(|(i, &c)| PoolInstance {
                    annotation_id: id * 100 + i as u64,
                    category_id: c,
                })
                .collect(),
        }
    }

    fn drink() -> TaskRanks {
        TaskRanks {
            verb: "drink water with".into(),
            ranks: vec![(0, 1), (1, 2), (2, 3)],
        }
    }

    #[test]
    fn classification_rules() {
        let t = drink();
        assert_eq!(classify(&img(1, &[]), &t), (Composition::Others, vec![]));
        assert_eq!(classify(&img(1, &[7, 7]), &t), (Composition::Others, vec![]));
        assert_eq!(classify(&img(1, &[1]), &t), (Composition::Scso, vec![100]));
        assert_eq!(classify(&img(1, &[1, 5, 1]), &t), (Composition::Scmo, vec![100, 102]));
        // rank-1 and rank-2 present: only rank-1 instances are targets
        assert_eq!(classify(&img(1, &[1, 0, 1]), &t), (Composition::Mcmo, vec![101]));
    }

    #[test]
    fn counts_use_largest_remainder() {
        assert_eq!(stratum_counts(100, &DEFAULT_FRACTIONS), [40, 40, 10, 10]);
        assert_eq!(stratum_counts(60, &DEFAULT_FRACTIONS), [24, 24, 6, 6]);
        assert_eq!(stratum_counts(15, &DEFAULT_FRACTIONS), [6, 6, 2, 1]);
        for n in 0..300 {
            assert_eq!(stratum_counts(n, &DEFAULT_FRACTIONS).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn short_strata_are_reported() {
        let pool: Vec<PoolImage> = (0..20).map(|i| img(i, &[0])).collect();
        let cfg = ComposeConfig {
            train_per_task: 10,
            test_per_task: 0,
            ..ComposeConfig::default()
        };
        let (splits, rep) = compose_affordance_dataset(&pool, &[drink()], &cfg);
        assert_eq!(rep[0].requested, [4, 4, 1, 1]);
        assert_eq!(rep[0].filled, [0, 0, 1, 0]);
        assert!(!rep[0].is_complete());
        assert_eq!(splits[0].train.len(), 1);
    }

    fn random_pool(n: usize, seed: u64) -> Vec<PoolImage> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|i| {
                let k = rng.random_range(0..5);
                let cats: Vec<u64> = (0..k).map(|_| rng.random_range(0..6)).collect();
                img(i, &cats)
            })
            .collect()
    }

    #[test]
    fn fractions_hold_on_a_large_pool() {
        let pool = random_pool(10_000, 1);
        let cfg = ComposeConfig {
            seed: 4,
            ..ComposeConfig::default()
        };
        let (splits, rep) = compose_affordance_dataset(&pool, &[drink()], &cfg);
        assert!(rep.iter().all(StratumReport::is_complete));
        for (entries, n) in [(&splits[0].train, 600.0), (&splits[0].test, 150.0)] {
            for (s, f) in STRATA.iter().zip(DEFAULT_FRACTIONS) {
                let got = entries.iter().filter(|e| e.composition == *s).count() as f64 / n;
                assert!((got - f).abs() <= 0.02, "{s:?}: {got}");
            }
        }
        let train: std::collections::BTreeSet<u64> = splits[0].train.iter().map(|e| e.image_id).collect();
        assert!(splits[0].test.iter().all(|e| !train.contains(&e.image_id)));
        let again = compose_affordance_dataset(&pool, &[drink()], &cfg);
        assert_eq!(again.0, splits);
    }

    proptest::proptest! {
        #[test]
        fn targets_are_the_best_ranked_instances(cats in proptest::collection::vec(0u64..6, 0..8)) {
            let t = drink();
            let im = img(3, &cats);
            let (tag, targets) = classify(&im, &t);
            let best = cats.iter().filter_map(|&c| t.rank_of(c)).min();
            let want: Vec<u64> = match best {
                None => vec![],
                Some(r) => im.instances.iter().filter(|i| t.rank_of(i.category_id) == Some(r)).map(|i| i.annotation_id).collect(),
            };
            proptest::prop_assert_eq!(&targets, &want);
            let distinct: std::collections::BTreeSet<u64> = cats.iter().copied().filter(|&c| t.rank_of(c).is_some()).collect();
            let expect = match (distinct.len(), want.len()) {
                (0, _) => Composition::Others,
                (1, 1) => Composition::Scso,
                (1, _) => Composition::Scmo,
                _ => Composition::Mcmo,
            };
            proptest::prop_assert_eq!(tag, expect);
        }
    }
}
