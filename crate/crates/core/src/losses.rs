//! Box, mask, token, alignment and distillation losses.
//!
//! Each loss has a value-level form on plain slices (used by the matching
//! costs and as reference values) and a graph form used for training.

use std::fmt::Write as _;

use thiserror::Error;

use crate::detector::{ForwardNodes, GroundTruthSet};
use crate::matching::Assignment;
use crate::numerics::{DiffArray, Graph, NodeId, NumericsError};

/// Floor applied to student probabilities inside the binary KL term.
pub const KL_FLOOR: f64 = 1e-12;
/// Lower bound on GIoU denominators.
pub const GIOU_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weight `{0}` must be non-negative and finite")]
    NegativeWeight(&'static str),
    #[error("alignment temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("focal alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `λ1..λ8` plus the focal and alignment hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub token: f64,
    pub align: f64,
    pub cluster: f64,
    pub binary: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub tau: f64,
    /// Weight of the KL term inside the teacher-student matching cost.
    pub match_kl: f64,
    /// Use `−Σ p·log softmax` instead of the printed `−Σ p·softmax` in the
    /// ground-truth matching cost.
    pub token_m_log: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            dice: 1.0,
            focal: 1.0,
            token: 1.0,
            align: 1.0,
            cluster: 1.0,
            binary: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            tau: 0.07,
            match_kl: 1.0,
            token_m_log: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("l1", self.l1),
            ("giou", self.giou),
            ("dice", self.dice),
            ("focal", self.focal),
            ("token", self.token),
            ("align", self.align),
            ("cluster", self.cluster),
            ("binary", self.binary),
            ("focal_gamma", self.focal_gamma),
            ("match_kl", self.match_kl),
        ];
        for (n, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::NegativeWeight(n));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::BadTemperature(self.tau));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(LossError::BadAlpha(self.focal_alpha));
        }
        Ok(())
    }
}

// ---- value-level forms ----------------------------------------------------

pub fn l1_box(b: &[f64; 4], bh: &[f64; 4]) -> f64 {
    b.iter().zip(bh).map(|(x, y)| (x - y).abs()).sum()
}

fn corners(b: &[f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two `(cx, cy, w, h)` boxes; 0 when the union
/// is empty.
pub fn box_iou(b: &[f64; 4], bh: &[f64; 4]) -> f64 {
    let (a, c) = (corners(b), corners(bh));
    let iw = (a[2].min(c[2]) - a[0].max(c[0])).max(0.0);
    let ih = (a[3].min(c[3]) - a[1].max(c[1])).max(0.0);
    let inter = iw * ih;
    let union = b[2] * b[3] + bh[2] * bh[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `1 − GIoU`, in `[0, 2]`. Two zero-area boxes give exactly 1.
pub fn giou_loss(b: &[f64; 4], bh: &[f64; 4]) -> f64 {
    let (a1, a2) = (b[2] * b[3], bh[2] * bh[3]);
    if a1 == 0.0 && a2 == 0.0 {
        return 1.0;
    }
    let (a, c) = (corners(b), corners(bh));
    let iw = (a[2].min(c[2]) - a[0].max(c[0])).max(0.0);
    let ih = (a[3].min(c[3]) - a[1].max(c[1])).max(0.0);
    let inter = iw * ih;
    let union = a1 + a2 - inter;
    let cw = a[2].max(c[2]) - a[0].min(c[0]);
    let ch = a[3].max(c[3]) - a[1].min(c[1]);
    let area_c = cw * ch;
    1.0 - inter / union.max(GIOU_EPS) + (area_c - union).max(0.0) / area_c.max(GIOU_EPS)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - lz).collect()
}

/// Matching-cost token term `−Σ_j p_j·softmax(ĝ)_j`, or the log form.
pub fn token_m_cost(p_span: &[f64], logits: &[f64], log_form: bool) -> f64 {
    if log_form {
        return soft_token_loss(p_span, logits);
    }
    -p_span.iter().zip(softmax(logits)).map(|(p, s)| p * s).sum::<f64>()
}

/// Cross-entropy `−Σ_j p_j·log softmax(ĝ)_j`.
pub fn soft_token_loss(p_span: &[f64], logits: &[f64]) -> f64 {
    -p_span
        .iter()
        .zip(log_softmax(logits))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 − (2Σ m·σ(m̂) + 1) / (Σσ(m̂) + Σm + 1)`.
pub fn dice_loss(mask: &[f64], logits: &[f64]) -> f64 {
    let s: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let inter: f64 = mask.iter().zip(&s).map(|(m, p)| m * p).sum();
    let sp: f64 = s.iter().sum();
    let sm: f64 = mask.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + sm + 1.0)
}

/// Per-pixel `−α_t (1 − p_t)^γ log p_t`, averaged over pixels.
pub fn focal_loss(mask: &[f64], logits: &[f64], alpha: f64, gamma: f64) -> f64 {
    let n = mask.len() as f64;
    mask.iter()
        .zip(logits)
        .map(|(&m, &x)| {
            let p = sigmoid(x);
            let pt = m * p + (1.0 - m) * (1.0 - p);
            let at = alpha * m + (1.0 - alpha) * (1.0 - m);
            // log p_t from the logit directly for stability
            let log_pt = m * log_sigmoid(x) + (1.0 - m) * log_sigmoid(-x);
            -at * (1.0 - pt).powf(gamma) * log_pt
        })
        .sum::<f64>()
        / n
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `‖a − b‖₂`.
pub fn cluster_loss(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `KL(p_t ‖ p_s)` over (pos, neg) pairs; the flag reports that a student
/// probability hit the floor where the teacher has mass.
pub fn kl_binary(pt: (f64, f64), ps: (f64, f64)) -> (f64, bool) {
    let mut flagged = false;
    let mut term = |t: f64, s: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        if s < KL_FLOOR {
            flagged = true;
        }
        t * (t / s.max(KL_FLOOR)).ln()
    };
    let v = term(pt.0, ps.0) + term(pt.1, ps.1);
    (v.max(0.0), flagged)
}

/// `Σ_i KL(P_t[i] ‖ P_s[σ̂(i)])`.
pub fn soft_binary_target_loss(pt: &[(f64, f64)], ps: &[(f64, f64)], sigma: &[usize]) -> (f64, usize) {
    let mut flagged = 0;
    let mut total = 0.0;
    for (i, &j) in sigma.iter().enumerate() {
        let (v, f) = kl_binary(pt[i], ps[j]);
        total += v;
        flagged += f as usize;
    }
    (total, flagged)
}

// ---- graph forms ----------------------------------------------------------

/// Sum of L1 distances between matching rows of two `k × 4` box nodes.
pub fn graph_l1(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, NumericsError> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.sum(a)
}

fn graph_corners(g: &mut Graph, b: NodeId) -> Result<[NodeId; 4], NumericsError> {
    let cx = g.slice_cols(b, 0, 1)?;
    let cy = g.slice_cols(b, 1, 2)?;
    let w = g.slice_cols(b, 2, 3)?;
    let h = g.slice_cols(b, 3, 4)?;
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// Sum over rows of `1 − GIoU` for `k × 4` box nodes. Rows where both boxes
/// have zero area contribute the constant 1.
pub fn graph_giou(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, NumericsError> {
    let (pv, tv) = (g.value(pred).clone(), g.value(target).clone());
    let k = pv.rows();
    let degenerate: Vec<bool> = (0..k)
        .map(|r| pv.get(r, 2) * pv.get(r, 3) == 0.0 && tv.get(r, 2) * tv.get(r, 3) == 0.0)
        .collect();
    let keep: Vec<usize> = (0..k).filter(|&r| !degenerate[r]).collect();
    let n_degenerate = (k - keep.len()) as f64;
    if keep.is_empty() {
        return Ok(g.scalar(n_degenerate));
    }
    let (pred, target) = if keep.len() == k {
        (pred, target)
    } else {
        (g.gather(pred, &keep)?, g.gather(target, &keep)?)
    };
    let a = graph_corners(g, pred)?;
    let b = graph_corners(g, target)?;
    let ix0 = g.maximum(a[0], b[0])?;
    let iy0 = g.maximum(a[1], b[1])?;
    let ix1 = g.minimum(a[2], b[2])?;
    let iy1 = g.minimum(a[3], b[3])?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let area = |g: &mut Graph, c: &[NodeId; 4]| -> Result<NodeId, NumericsError> {
        let w = g.sub(c[2], c[0])?;
        let h = g.sub(c[3], c[1])?;
        g.mul(w, h)
    };
    let a1 = area(g, &a)?;
    let a2 = area(g, &b)?;
    let s = g.add(a1, a2)?;
    let union = g.sub(s, inter)?;
    let cx0 = g.minimum(a[0], b[0])?;
    let cy0 = g.minimum(a[1], b[1])?;
    let cx1 = g.maximum(a[2], b[2])?;
    let cy1 = g.maximum(a[3], b[3])?;
    let area_c = area(g, &[cx0, cy0, cx1, cy1])?;
    let floor = g.scalar(GIOU_EPS);
    let ue = g.maximum(union, floor)?;
    let iou = g.div(inter, ue)?;
    let gap = g.sub(area_c, union)?;
    let gap = g.relu(gap)?;
    let ce = g.maximum(area_c, floor)?;
    let pen = g.div(gap, ce)?;
    let per = g.sub(pen, iou)?;
    let per = g.offset(per, 1.0)?;
    let total = g.sum(per)?;
    if n_degenerate > 0.0 {
        g.offset(total, n_degenerate)
    } else {
        Ok(total)
    }
}

/// `Σ_rows −Σ_j p·softmax(ĝ)` (matching-cost form, no logarithm).
pub fn graph_token_m(g: &mut Graph, logits: NodeId, p_span: NodeId) -> Result<NodeId, NumericsError> {
    let s = g.softmax(logits)?;
    let m = g.mul(s, p_span)?;
    let t = g.sum(m)?;
    g.neg(t)
}

/// `Σ_rows −Σ_j p·log softmax(ĝ)`.
pub fn graph_soft_token(g: &mut Graph, logits: NodeId, p_span: NodeId) -> Result<NodeId, NumericsError> {
    let l = g.log_softmax(logits)?;
    let m = g.mul(l, p_span)?;
    let t = g.sum(m)?;
    g.neg(t)
}

/// Sum over rows of the Dice loss for `k × P` logits and 0/1 targets.
pub fn graph_dice(g: &mut Graph, logits: NodeId, masks: NodeId) -> Result<NodeId, NumericsError> {
    let s = g.sigmoid(logits)?;
    let inter = g.mul(s, masks)?;
    let inter = g.sum_axis(inter, 1)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.offset(num, 1.0)?;
    let sp = g.sum_axis(s, 1)?;
    let sm = g.sum_axis(masks, 1)?;
    let den = g.add(sp, sm)?;
    let den = g.offset(den, 1.0)?;
    let r = g.div(num, den)?;
    let rs = g.sum(r)?;
    let k = g.shape(logits)[0] as f64;
    let neg = g.neg(rs)?;
    g.offset(neg, k)
}

/// Sum over rows of the pixel-mean focal loss.
pub fn graph_focal(g: &mut Graph, logits: NodeId, masks: NodeId, alpha: f64, gamma: f64) -> Result<NodeId, NumericsError> {
    let mv = g.value(masks).clone();
    let pixels = mv.cols() as f64;
    // with binary targets, p_t = σ(s·x) for s = 2m − 1
    let sign = DiffArray::new(mv.shape().to_vec(), mv.values().iter().map(|m| 2.0 * m - 1.0).collect())?;
    let at = DiffArray::new(
        mv.shape().to_vec(),
        mv.values().iter().map(|m| alpha * m + (1.0 - alpha) * (1.0 - m)).collect(),
    )?;
    let sign = g.constant(sign);
    let at = g.constant(at);
    let sx = g.mul(logits, sign)?;
    let pt = g.sigmoid(sx)?;
    let floor = g.scalar(1e-300);
    let pt_f = g.maximum(pt, floor)?;
    let log_pt = g.log(pt_f)?;
    let nsx = g.neg(sx)?;
    let q = g.sigmoid(nsx)?;
    let modulator = if gamma == 0.0 {
        None
    } else if gamma.fract() == 0.0 && gamma <= 8.0 {
        let mut acc = q;
        for _ in 1..gamma as usize {
            acc = g.mul(acc, q)?;
        }
        Some(acc)
    } else {
        let qf = g.maximum(q, floor)?;
        let lq = g.log(qf)?;
        let e = g.scale(lq, gamma)?;
        Some(g.exp(e)?)
    };
    let mut t = g.mul(at, log_pt)?;
    if let Some(m) = modulator {
        t = g.mul(t, m)?;
    }
    let s = g.sum(t)?;
    g.scale(s, -1.0 / pixels)
}

/// Symmetric contrastive alignment between object and token embeddings.
///
/// `positives[i]` lists the tokens aligned with object `i`. Objects without
/// positives are excluded from the object-side term, tokens without
/// positives from the token-side term; the second return value counts the
/// excluded objects. Returns `½·(object term + token term)`.
pub fn contrastive_alignment(
    g: &mut Graph,
    obj: NodeId,
    tok: NodeId,
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<(NodeId, usize), NumericsError> {
    let (n_o, n_t) = (g.shape(obj)[0], g.shape(tok)[0]);
    let skipped = positives.iter().filter(|p| p.is_empty()).count();
    if n_t == 0 || skipped == positives.len() {
        return Ok((g.scalar(0.0), skipped));
    }
    let mut w_obj = vec![0.0; n_o * n_t];
    let mut tok_pos: Vec<Vec<usize>> = vec![Vec::new(); n_t];
    for (i, p) in positives.iter().enumerate() {
        for &j in p {
            w_obj[i * n_t + j] = 1.0 / p.len() as f64;
            tok_pos[j].push(i);
        }
    }
    let mut w_tok = vec![0.0; n_t * n_o];
    for (j, p) in tok_pos.iter().enumerate() {
        for &i in p {
            w_tok[j * n_o + i] = 1.0 / p.len() as f64;
        }
    }
    let inv_tau = 1.0 / tau;
    let s = g.matmul_nt(obj, tok)?;
    let s = g.scale(s, inv_tau)?;
    let lo = g.log_softmax(s)?;
    let wo = g.constant(DiffArray::matrix(n_o, n_t, w_obj)?);
    let a = g.mul(lo, wo)?;
    let a = g.sum(a)?;
    let st = g.matmul_nt(tok, obj)?;
    let st = g.scale(st, inv_tau)?;
    let lt = g.log_softmax(st)?;
    let wt = g.constant(DiffArray::matrix(n_t, n_o, w_tok)?);
    let b = g.mul(lt, wt)?;
    let b = g.sum(b)?;
    let ab = g.add(a, b)?;
    Ok((g.scale(ab, -0.5)?, skipped))
}

/// `‖a − b‖₂` with `b` constant; exactly 0 (and no gradient) when equal.
pub fn graph_cluster(g: &mut Graph, a: NodeId, center: &[f64]) -> Result<NodeId, NumericsError> {
    let av = g.values(a).to_vec();
    if av.iter().zip(center).all(|(x, y)| x == y) {
        return Ok(g.scalar(0.0));
    }
    let c = g.constant(DiffArray::new(g.shape(a).to_vec(), center.to_vec())?);
    let d = g.sub(a, c)?;
    g.l2_norm(d, 0.0)
}

/// `Σ_i KL(p_t[i] ‖ p_s[σ̂(i)])` against student logits in the graph. The
/// teacher side is a constant, so only the student receives gradients.
/// Returns the loss node and the number of floored student probabilities.
pub fn graph_binary_kl(
    g: &mut Graph,
    teacher: &[(f64, f64)],
    student_logits: NodeId,
    sigma: &[usize],
) -> Result<(NodeId, usize), NumericsError> {
    let n_max = *g.shape(student_logits).last().expect("matrix");
    let rows = g.gather(student_logits, sigma)?;
    let sm = g.softmax(rows)?;
    let tokens = g.slice_cols(sm, 0, n_max - 1)?;
    let pos = g.sum_axis(tokens, 1)?;
    let neg = g.slice_cols(sm, n_max - 1, n_max)?;
    let ps = g.concat(&[pos, neg], 1)?;
    let flagged = g
        .value(ps)
        .values()
        .chunks(2)
        .zip(teacher)
        .map(|(s, t)| (s[0] < KL_FLOOR && t.0 > 0.0) as usize + (s[1] < KL_FLOOR && t.1 > 0.0) as usize)
        .sum();
    let floor = g.scalar(KL_FLOOR);
    let ps = g.maximum(ps, floor)?;
    let log_ps = g.log(ps)?;
    let tv: Vec<f64> = teacher.iter().flat_map(|t| [t.0, t.1]).collect();
    let entropy_part: f64 = tv.iter().filter(|&&t| t > 0.0).map(|t| t * t.ln()).sum();
    let tn = g.constant(DiffArray::matrix(teacher.len(), 2, tv)?);
    let cross = g.mul(tn, log_ps)?;
    let cross = g.sum(cross)?;
    let neg_cross = g.neg(cross)?;
    Ok((g.offset(neg_cross, entropy_part)?, flagged))
}

// ---- totals ---------------------------------------------------------------

/// Weighted components of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub token: f64,
    pub align: f64,
    pub cluster: f64,
    pub binary: f64,
    pub total: f64,
    pub align_skipped: usize,
    pub kl_floored: usize,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.l1 += o.l1;
        self.giou += o.giou;
        self.dice += o.dice;
        self.focal += o.focal;
        self.token += o.token;
        self.align += o.align;
        self.cluster += o.cluster;
        self.binary += o.binary;
        self.total += o.total;
        self.align_skipped += o.align_skipped;
        self.kl_floored += o.kl_floored;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1 * s,
            giou: self.giou * s,
            dice: self.dice * s,
            focal: self.focal * s,
            token: self.token * s,
            align: self.align * s,
            cluster: self.cluster * s,
            binary: self.binary * s,
            total: self.total * s,
            align_skipped: self.align_skipped,
            kl_floored: self.kl_floored,
        }
    }

    /// One `key=value` line for the training log.
    pub fn log_line(&self, prefix: &str) -> String {
        let mut s = String::new();
        if !prefix.is_empty() {
            s.push_str(prefix);
            s.push(' ');
        }
        let _ = write!(
            s,
            "l1={:.6} giou={:.6} dice={:.6} focal={:.6} token={:.6} align={:.6} cluster={:.6} binary={:.6} total={:.6} align_skipped={} kl_floored={}",
            self.l1,
            self.giou,
            self.dice,
            self.focal,
            self.token,
            self.align,
            self.cluster,
            self.binary,
            self.total,
            self.align_skipped,
            self.kl_floored
        );
        s
    }
}

/// A scalar loss node and its weighted breakdown.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Plain objective for one (image, task) sample under `σ₀`.
///
/// Box and mask terms cover real targets only. The token term covers every
/// query, with ∅-matched queries pushed toward the no-object slot. All terms
/// are divided by `max(n_gt, 1)`. `content_len` restricts alignment tokens
/// to non-PAD positions.
pub fn total_plain(
    g: &mut Graph,
    nodes: &ForwardNodes,
    gt: &GroundTruthSet,
    sigma: &Assignment,
    content_len: usize,
    w: &LossWeights,
) -> Result<LossTerms, NumericsError> {
    let n_pred = g.shape(nodes.logits)[0];
    let n_gt = gt.n_gt();
    let norm = 1.0 / n_gt.max(1) as f64;
    let mut bd = LossBreakdown::default();
    let mut parts: Vec<NodeId> = Vec::new();
    let mut push = |g: &mut Graph, node: NodeId, weight: f64, slot: &mut f64| -> Result<(), NumericsError> {
        let s = g.scale(node, weight * norm)?;
        *slot = g.value(s).item();
        parts.push(s);
        Ok(())
    };

    let matched: Vec<usize> = sigma.perm[..n_gt].to_vec();
    if n_gt > 0 {
        let pb = g.gather(nodes.boxes, &matched)?;
        let tb = g.constant(DiffArray::new(vec![n_gt, 4], gt.boxes.iter().flatten().copied().collect())?);
        let l1 = graph_l1(g, pb, tb)?;
        push(g, l1, w.l1, &mut bd.l1)?;
        let gi = graph_giou(g, pb, tb)?;
        push(g, gi, w.giou, &mut bd.giou)?;

        let pm = g.gather(nodes.mask_logits, &matched)?;
        let targets = gt.masks_at(nodes.mask_grid);
        let pixels = targets[0].len();
        let tm = g.constant(DiffArray::new(vec![n_gt, pixels], targets.concat())?);
        let dice = graph_dice(g, pm, tm)?;
        push(g, dice, w.dice, &mut bd.dice)?;
        let focal = graph_focal(g, pm, tm, w.focal_alpha, w.focal_gamma)?;
        push(g, focal, w.focal, &mut bd.focal)?;
    }

    let rows = gt.padded_span(n_pred);
    let inv = sigma.inverse();
    let mut p = Vec::with_capacity(n_pred * gt.n_max);
    for j in 0..n_pred {
        p.extend_from_slice(&rows[inv[j]]);
    }
    let p = g.constant(DiffArray::matrix(n_pred, gt.n_max, p)?);
    let tok = graph_soft_token(g, nodes.logits, p)?;
    push(g, tok, w.token, &mut bd.token)?;

    if content_len > 0 {
        let positives: Vec<Vec<usize>> = (0..n_pred)
            .map(|j| {
                let r = inv[j];
                if r < n_gt {
                    (0..content_len).filter(|&t| gt.p_span[r][t] > 0.0).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let content: Vec<usize> = (0..content_len).collect();
        let toks = g.gather(nodes.tok_emb, &content)?;
        let (al, skipped) = contrastive_alignment(g, nodes.obj_emb, toks, &positives, w.tau)?;
        bd.align_skipped = skipped;
        push(g, al, w.align, &mut bd.align)?;
    }

    let total = sum_nodes(g, &parts)?;
    bd.total = g.value(total).item();
    Ok(LossTerms { total, breakdown: bd })
}

fn sum_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
    let mut it = parts.iter();
    let Some(&first) = it.next() else {
        return Ok(g.scalar(0.0));
    };
    let mut acc = first;
    for &p in it {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `L^t + L^s + λ7·L_cluster + λ8·L_binary`. `cluster` and `binary` must be
/// built from student nodes only.
pub fn total_distill(
    g: &mut Graph,
    teacher: Option<&LossTerms>,
    student: &LossTerms,
    cluster: Option<NodeId>,
    binary: Option<(NodeId, usize)>,
    w: &LossWeights,
) -> Result<LossTerms, NumericsError> {
    let mut bd = student.breakdown.clone();
    let mut parts = vec![student.total];
    if let Some(t) = teacher {
        parts.push(t.total);
    }
    if let Some(c) = cluster {
        let s = g.scale(c, w.cluster)?;
        bd.cluster = g.value(s).item();
        parts.push(s);
    }
    if let Some((b, floored)) = binary {
        let s = g.scale(b, w.binary)?;
        bd.binary = g.value(s).item();
        bd.kl_floored = floored;
        parts.push(s);
    }
    let total = sum_nodes(g, &parts)?;
    bd.total = g.value(total).item();
    Ok(LossTerms { total, breakdown: bd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_unit_values() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert_eq!(l1_box(&a, &a), 0.0);
        assert!((l1_box(&a, &[0.5, 0.5, 0.4, 0.2]) - 0.2).abs() < 1e-15);
        assert!(giou_loss(&a, &a).abs() < 1e-9);
        let l = giou_loss(&[0.25, 0.25, 0.5, 0.5], &[0.75, 0.75, 0.5, 0.5]);
        assert!((l - 1.5).abs() < 1e-9, "{l}");
        assert_eq!(giou_loss(&[0.2, 0.2, 0.0, 0.0], &[0.7, 0.7, 0.0, 0.3]), 1.0);
    }

    #[test]
    fn token_unit_values() {
        let p = [0.5, 0.5, 0.0, 0.0];
        let u = [0.0; 4];
        assert!((token_m_cost(&p, &u, false) + 0.25).abs() < 1e-15);
        assert!((soft_token_loss(&p, &u) - 4f64.ln()).abs() < 1e-9);
        assert!((soft_token_loss(&p, &[30.0, 30.0, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-9);
        assert!(soft_token_loss(&[0.0, 1.0, 0.0], &[0.0, 40.0, 0.0]) < 1e-9);
        assert!((token_m_cost(&p, &[80.0, 80.0, 0.0, 0.0], false) + 0.5).abs() < 1e-15);
        assert!((token_m_cost(&[1.0, 0.0], &[80.0, 0.0], false) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_unit_values() {
        assert!(dice_loss(&[1.0; 9], &[30.0; 9]) < 1e-6);
        assert!(dice_loss(&[0.0; 9], &[-30.0; 9]) < 1e-6);
        assert!((dice_loss(&[1.0, 0.0], &[0.0, 0.0]) - 1.0 / 3.0).abs() < 1e-15);
        let f = focal_loss(&[1.0], &[0.0], 0.25, 2.0);
        assert!((f - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(&[1.0, 0.0], &[40.0, -40.0], 0.25, 2.0) < 1e-12);
        let m = [1.0, 0.0, 1.0];
        let x = [0.3, -1.2, 2.0];
        let bce: f64 = m
            .iter()
            .zip(&x)
            .map(|(m, x)| -(m * sigmoid(*x).ln() + (1.0 - m) * (1.0 - sigmoid(*x)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((focal_loss(&m, &x, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn kl_and_cluster_unit_values() {
        assert!((kl_binary((1.0, 0.0), (0.5, 0.5)).0 - 2f64.ln()).abs() < 1e-9);
        assert_eq!(kl_binary((0.3, 0.7), (0.3, 0.7)), (0.0, false));
        assert!(kl_binary((0.5, 0.5), (1.0, 0.0)).1);
        assert_eq!(cluster_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(cluster_loss(&[1.0, 2.0], &[1.0, 3.0]), 1.0);
    }

    #[test]
    fn graph_forms_agree_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b: [f64; 4] = [rng.random(), rng.random(), rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)];
            let c: [f64; 4] = [rng.random(), rng.random(), rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)];
            let mut g = Graph::new();
            let pb = g.constant(DiffArray::matrix(1, 4, b.to_vec()).unwrap());
            let tb = g.constant(DiffArray::matrix(1, 4, c.to_vec()).unwrap());
            let gi = graph_giou(&mut g, pb, tb).unwrap();
            assert!((g.value(gi).item() - giou_loss(&c, &b)).abs() < 1e-12);
            let l1 = graph_l1(&mut g, pb, tb).unwrap();
            assert!((g.value(l1).item() - l1_box(&b, &c)).abs() < 1e-12);
            let m: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let lm = g.constant(DiffArray::matrix(1, 6, x.clone()).unwrap());
            let tm = g.constant(DiffArray::matrix(1, 6, m.clone()).unwrap());
            let d = graph_dice(&mut g, lm, tm).unwrap();
            assert!((g.value(d).item() - dice_loss(&m, &x)).abs() < 1e-12);
            let f = graph_focal(&mut g, lm, tm, 0.25, 2.0).unwrap();
            assert!((g.value(f).item() - focal_loss(&m, &x, 0.25, 2.0)).abs() < 1e-12);
            let f = graph_focal(&mut g, lm, tm, 0.4, 1.5).unwrap();
            assert!((g.value(f).item() - focal_loss(&m, &x, 0.4, 1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_range_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let mut bx = || [rng.random(), rng.random(), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let l = giou_loss(&bx(), &bx());
            assert!((0.0..=2.0).contains(&l), "{l}");
        }
    }

    #[test]
    fn alignment_single_pair_and_hand_case() {
        let mut g = Graph::new();
        let o = g.constant(DiffArray::matrix(1, 2, vec![0.6, 0.8]).unwrap());
        let t = g.constant(DiffArray::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let (l, _) = contrastive_alignment(&mut g, o, t, &[vec![0]], 1.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        // two objects, two tokens, object i aligned with token i, τ = 1
        let ov = [[1.0, 0.0], [0.0, 1.0]];
        let tv = [[0.8, 0.6], [0.6, 0.8]];
        let o = g.constant(DiffArray::from_rows(&ov.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        let t = g.constant(DiffArray::from_rows(&tv.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        let (l, _) = contrastive_alignment(&mut g, o, t, &[vec![0], vec![1]], 1.0).unwrap();
        // every row of both score matrices is (0.8, 0.6) up to order, positive 0.8
        let nll = -(0.8f64.exp() / (0.8f64.exp() + 0.6f64.exp())).ln();
        assert!((g.value(l).item() - 0.5 * (2.0 * nll + 2.0 * nll)).abs() < 1e-12);
    }

    #[test]
    fn alignment_improves_with_positive_logit() {
        let run = |x: f64| {
            let mut g = Graph::new();
            let o = g.constant(DiffArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            let t = g.constant(DiffArray::matrix(2, 2, vec![x, 0.3, 0.2, 0.5]).unwrap());
            let (l, _) = contrastive_alignment(&mut g, o, t, &[vec![0], vec![]], 0.5).unwrap();
            g.value(l).item()
        };
        assert!(run(1.0) < run(0.5));
        assert!(run(0.5) < run(0.0));
    }

    #[test]
    fn binary_kl_graph_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = DiffArray::matrix(3, 5, (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let ps = crate::detector::binary_probs(&logits);
        let pt = vec![(0.9, 0.1), (0.2, 0.8), (1.0, 0.0)];
        let sigma = [2, 0, 1];
        let mut g = Graph::new();
        let l = g.constant(logits);
        let (k, _) = graph_binary_kl(&mut g, &pt, l, &sigma).unwrap();
        let (v, _) = soft_binary_target_loss(&pt, &ps, &sigma);
        assert!((g.value(k).item() - v).abs() < 1e-12);
    }

    fn check(name: &str, f: impl Fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>, x: &DiffArray) {
        let r = finite_difference_check(f, x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: {}", r.max_rel_error);
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let boxes = DiffArray::matrix(
                2,
                4,
                (0..8)
                    .map(|i| if i % 4 < 2 { rng.random_range(0.2..0.8) } else { rng.random_range(0.1..0.5) })
                    .collect(),
            )
            .unwrap();
            let target = DiffArray::matrix(2, 4, vec![0.45, 0.5, 0.3, 0.2, 0.6, 0.4, 0.25, 0.35]).unwrap();
            check(
                "giou",
                |g, x| {
                    let t = g.constant(target.clone());
                    graph_giou(g, x, t)
                },
                &boxes,
            );
            let logits = DiffArray::matrix(2, 5, (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let span = DiffArray::matrix(2, 5, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
            check(
                "token_m",
                |g, x| {
                    let p = g.constant(span.clone());
                    graph_token_m(g, x, p)
                },
                &logits,
            );
            let masks = DiffArray::matrix(2, 5, (0..10).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
            check(
                "focal",
                |g, x| {
                    let m = g.constant(masks.clone());
                    graph_focal(g, x, m, 0.25, 2.0)
                },
                &logits,
            );
            check(
                "kl",
                |g, x| Ok(graph_binary_kl(g, &[(0.7, 0.3), (0.1, 0.9)], x, &[1, 0])?.0),
                &logits,
            );
        }
    }
}
