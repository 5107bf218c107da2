//! Finite-difference suites over every differentiable loss and both fusion
//! modules.

use afford_core::fusion::{bi_fusion, verb_attention, FusionError, FusionParams};
use afford_core::losses::{
    contrastive_alignment, graph_binary_kl, graph_cluster, graph_dice, graph_focal, graph_giou, graph_l1,
    graph_soft_token, graph_token_m,
};
use afford_core::nn::{ParamStore, Params};
use afford_core::numerics::{finite_difference_check, DiffArray, Graph, NodeId, NumericsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }

    pub fn line(&self) -> String {
        format!(
            "gradcheck suite={} points={} max_rel_error={:.3e} {}",
            self.name,
            self.points,
            self.max_rel_error,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn check(f: impl Fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>, x: &DiffArray) -> Result<f64, NumericsError> {
    Ok(finite_difference_check(f, x, STEP)?.max_rel_error)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DiffArray {
    DiffArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> DiffArray {
    let v = (0..n * 4)
        .map(|i| if i % 4 < 2 { rng.random_range(0.2..0.8) } else { rng.random_range(0.1..0.5) })
        .collect();
    DiffArray::matrix(n, 4, v).expect("sized")
}

/// Rows that are uniform over a random contiguous span.
fn distributions(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffArray {
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let len = rng.random_range(1..=cols);
        let start = rng.random_range(0..=cols - len);
        let w = 1.0 / len as f64;
        v.extend((0..cols).map(|j| if (start..start + len).contains(&j) { w } else { 0.0 }));
    }
    DiffArray::matrix(rows, cols, v).expect("sized")
}

fn binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffArray {
    DiffArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0..2) as f64).collect()).expect("sized")
}

fn lift(e: FusionError) -> NumericsError {
    match e {
        FusionError::Numerics(n) => n,
        other => NumericsError::ShapeMismatch {
            node: 0,
            op: "fusion",
            detail: other.to_string(),
        },
    }
}

fn suite(name: &'static str, points: usize, mut one: impl FnMut() -> Result<f64, NumericsError>) -> Result<SuiteResult, NumericsError> {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        worst = worst.max(one()?);
    }
    Ok(SuiteResult {
        name,
        points,
        max_rel_error: worst,
    })
}

/// Runs every suite with `points` random double-precision points each.
pub fn run_gradcheck(points: usize, seed: u64) -> Result<Vec<SuiteResult>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(suite("l1", points, || {
        let (x, t) = (boxes(&mut rng, 3), boxes(&mut rng, 3));
        check(move |g, x| { let t = g.constant(t.clone()); graph_l1(g, x, t) }, &x)
    })?);
    out.push(suite("giou", points, || {
        let (x, t) = (boxes(&mut rng, 3), boxes(&mut rng, 3));
        check(move |g, x| { let t = g.constant(t.clone()); graph_giou(g, x, t) }, &x)
    })?);
    out.push(suite("dice", points, || {
        let (x, m) = (uniform(&mut rng, 2, 12, -3.0, 3.0), binary(&mut rng, 2, 12));
        check(move |g, x| { let m = g.constant(m.clone()); graph_dice(g, x, m) }, &x)
    })?);
    out.push(suite("focal", points, || {
        let (x, m) = (uniform(&mut rng, 2, 12, -3.0, 3.0), binary(&mut rng, 2, 12));
        let gamma = rng.random_range(0.5..3.0);
        check(move |g, x| { let m = g.constant(m.clone()); graph_focal(g, x, m, 0.25, gamma) }, &x)
    })?);
    out.push(suite("soft_token", points, || {
        let (x, p) = (uniform(&mut rng, 3, 6, -3.0, 3.0), distributions(&mut rng, 3, 6));
        check(move |g, x| { let p = g.constant(p.clone()); graph_soft_token(g, x, p) }, &x)
    })?);
    out.push(suite("token_m", points, || {
        let (x, p) = (uniform(&mut rng, 3, 6, -3.0, 3.0), distributions(&mut rng, 3, 6));
        check(move |g, x| { let p = g.constant(p.clone()); graph_token_m(g, x, p) }, &x)
    })?);
    out.push(suite("alignment", points, || {
        let (o, t) = (uniform(&mut rng, 3, 4, -1.0, 1.0), uniform(&mut rng, 5, 4, -1.0, 1.0));
        let positives: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..5).filter(|_| rng.random_bool(0.4)).collect())
            .collect();
        let tau = rng.random_range(0.2..1.0);
        let (pc, tc) = (positives.clone(), t.clone());
        let a = check(move |g, x| { let t = g.constant(tc.clone()); Ok(contrastive_alignment(g, x, t, &pc, tau)?.0) }, &o)?;
        let oc = o.clone();
        let b = check(move |g, x| { let o = g.constant(oc.clone()); Ok(contrastive_alignment(g, o, x, &positives, tau)?.0) }, &t)?;
        Ok(a.max(b))
    })?);
    out.push(suite("cluster", points, || {
        let x = uniform(&mut rng, 1, 6, -1.0, 1.0);
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(move |g, x| graph_cluster(g, x, &c), &x)
    })?);
    out.push(suite("kl", points, || {
        let x = uniform(&mut rng, 3, 5, -3.0, 3.0);
        let teacher: Vec<(f64, f64)> = (0..2)
            .map(|_| {
                let p = rng.random_range(0.05..0.95);
                (p, 1.0 - p)
            })
            .collect();
        let sigma = if rng.random_bool(0.5) { vec![0, 2] } else { vec![2, 1] };
        check(move |g, x| Ok(graph_binary_kl(g, &teacher, x, &sigma)?.0), &x)
    })?);

    const D: usize = 8;
    let fp = FusionParams { d: D, heads: 2 };
    out.push(suite("fusion_bf", points, || {
        let mut ps = ParamStore::new();
        fp.init(&mut ps, &mut rng);
        ps.insert(FusionParams::GAMMA_V, DiffArray::vector(vec![rng.random_range(-1.0..1.0)]));
        ps.insert(FusionParams::GAMMA_T, DiffArray::vector(vec![rng.random_range(-1.0..1.0)]));
        let v = uniform(&mut rng, 4, D, -1.5, 1.5);
        let t = uniform(&mut rng, 3, D, -1.5, 1.5);
        let mask = [true, true, rng.random_bool(0.5)];
        let p = Params::new(&ps, "", false);
        let fp2 = fp.clone();
        let tc = t.clone();
        let a = check(
            move |g, x| {
                let ft = g.constant(tc.clone());
                let (a, b) = bi_fusion(g, p, &fp2, x, ft, Some(&mask)).map_err(lift)?;
                let a2 = g.mul(a, a)?;
                let s1 = g.sum(a2)?;
                let b = g.sigmoid(b)?;
                let s2 = g.sum(b)?;
                g.add(s1, s2)
            },
            &v,
        )?;
        let fp2 = fp.clone();
        let b = check(
            move |g, x| {
                let fv = g.constant(v.clone());
                let (a, b) = bi_fusion(g, p, &fp2, fv, x, Some(&mask)).map_err(lift)?;
                let a = g.sigmoid(a)?;
                let s1 = g.sum(a)?;
                let b2 = g.mul(b, b)?;
                let s2 = g.sum(b2)?;
                g.add(s1, s2)
            },
            &t,
        )?;
        Ok(a.max(b))
    })?);
    out.push(suite("fusion_va", points, || {
        let mut ps = ParamStore::new();
        fp.init(&mut ps, &mut rng);
        let t = uniform(&mut rng, 4, D, -1.5, 1.5);
        let content = rng.random_range(1..=4);
        let verb = rng.random_range(0..content);
        let p = Params::new(&ps, "", false);
        let fp2 = fp.clone();
        check(
            move |g, x| {
                let y = verb_attention(g, p, &fp2, x, content, verb).map_err(lift)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            &t,
        )
    })?);
    Ok(out)
}
