//! Hungarian assignment and the two matching-cost assemblies.

use thiserror::Error;

use crate::detector::{binary_probs, GroundTruthSet, Prediction};
use crate::losses::{giou_loss, kl_binary, l1_box, token_m_cost, LossWeights};
use crate::numerics::DiffArray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix must be square and non-empty, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
}

/// `perm[i]` is the column assigned to row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Row assigned to each column.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (r, &c) in self.perm.iter().enumerate() {
            inv[c] = r;
        }
        inv
    }
}

/// Minimum-cost perfect assignment of a square matrix. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn hungarian(cost: &DiffArray) -> Result<Assignment, MatchError> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || n != m || cost.shape().len() != 2 {
        return Err(MatchError::Shape { rows: n, cols: m });
    }
    for r in 0..n {
        for c in 0..n {
            if !cost.get(r, c).is_finite() {
                return Err(MatchError::NonFinite { row: r, col: c });
            }
        }
    }
    let (u, v) = potentials(cost);
    let scale = cost.values().iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|r| (0..n).map(|c| (cost.get(r, c) - u[r] - v[c]).abs() <= tol).collect())
        .collect();
    let perm = lexicographic_perfect_matching(&tight).expect("optimal duals admit a tight perfect matching");
    let total = perm.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
    Ok(Assignment { perm, cost: total })
}

/// Optimal dual potentials via the shortest-augmenting-path method;
/// `cost[r][c] − u[r] − v[c] ≥ 0` with equality on an optimal matching.
fn potentials(cost: &DiffArray) -> (Vec<f64>, Vec<f64>) {
    let n = cost.rows();
    // 1-based arrays with sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

fn lexicographic_perfect_matching(allowed: &[Vec<bool>]) -> Option<Vec<usize>> {
    let n = allowed.len();
    let mut perm = Vec::with_capacity(n);
    let mut col_used = vec![false; n];
    for r in 0..n {
        let pick = (0..n).find(|&c| {
            if col_used[c] || !allowed[r][c] {
                return false;
            }
            col_used[c] = true;
            let ok = has_perfect_matching(allowed, r + 1, &col_used);
            col_used[c] = false;
            ok
        })?;
        col_used[pick] = true;
        perm.push(pick);
    }
    Some(perm)
}

/// Kuhn's augmenting paths on rows `from..n` against the free columns.
fn has_perfect_matching(allowed: &[Vec<bool>], from: usize, col_used: &[bool]) -> bool {
    let n = allowed.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    fn augment(r: usize, allowed: &[Vec<bool>], col_used: &[bool], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for c in 0..allowed.len() {
            if allowed[r][c] && !col_used[c] && !seen[c] {
                seen[c] = true;
                if owner[c].is_none_or(|o| augment(o, allowed, col_used, seen, owner)) {
                    owner[c] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    (from..n).all(|r| {
        let mut seen = vec![false; n];
        augment(r, allowed, col_used, &mut seen, &mut owner)
    })
}

/// Ground truth (rows, padded with ∅ to `n_pred`) against predictions
/// (columns). ∅ rows cost nothing.
pub fn gt_match_cost(pred: &Prediction, gt: &GroundTruthSet, token_log: bool) -> DiffArray {
    let n = pred.n_pred();
    let mut c = vec![0.0; n * n];
    for i in 0..gt.n_gt().min(n) {
        for j in 0..n {
            let b = &gt.boxes[i];
            let bh = &pred.boxes[j];
            c[i * n + j] = l1_box(b, bh) + giou_loss(b, bh) + token_m_cost(&gt.p_span[i], pred.logits.row(j), token_log);
        }
    }
    DiffArray::matrix(n, n, c).expect("sized above")
}

/// `σ₀`: ground-truth row `i` is supervised by prediction `perm[i]`.
pub fn match_to_gt(pred: &Prediction, gt: &GroundTruthSet, token_log: bool) -> Result<Assignment, MatchError> {
    hungarian(&gt_match_cost(pred, gt, token_log))
}

/// Teacher (rows) against student (columns):
/// `λ1·L1 + λ2·GIoU + λ_kl·KL(p_t ‖ p_s)`.
pub fn teacher_student_cost(teacher: &Prediction, student: &Prediction, w: &LossWeights) -> DiffArray {
    let n = teacher.n_pred();
    let pt = binary_probs(&teacher.logits);
    let pst = binary_probs(&student.logits);
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (bt, bs) = (&teacher.boxes[i], &student.boxes[j]);
            c[i * n + j] = w.l1 * l1_box(bt, bs) + w.giou * giou_loss(bt, bs) + w.match_kl * kl_binary(pt[i], pst[j]).0;
        }
    }
    DiffArray::matrix(n, n, c).expect("sized above")
}

/// `σ̂`: teacher query `i` is paired with student query `perm[i]`.
pub fn match_teacher_student(
    teacher: &Prediction,
    student: &Prediction,
    w: &LossWeights,
) -> Result<Assignment, MatchError> {
    if teacher.n_pred() != student.n_pred() {
        return Err(MatchError::Shape {
            rows: teacher.n_pred(),
            cols: student.n_pred(),
        });
    }
    hungarian(&teacher_student_cost(teacher, student, w))
}

/// Exhaustive minimum over all permutations in lexicographic order; the
/// first strictly-better permutation wins ties. For tests and tiny `n`.
pub fn brute_force_assignment(cost: &DiffArray) -> Assignment {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment {
        perm: perm.clone(),
        cost: f64::INFINITY,
    };
    loop {
        let c: f64 = perm.iter().enumerate().map(|(r, &k)| cost.get(r, k)).sum();
        if c < best.cost {
            best = Assignment { perm: perm.clone(), cost: c };
        }
        if !next_permutation(&mut perm) {
            return best;
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
