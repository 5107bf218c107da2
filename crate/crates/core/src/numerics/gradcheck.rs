use super::{DiffArray, Graph, NodeId, NumericsError};

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifferenceReport {
    /// `max_k |analytic_k − numeric_k| / max(1, |analytic_k|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurs.
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F>(f: &F, x: &DiffArray, coordinate: usize) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let input = g.input("x", x.clone(), false);
    let out = f(&mut g, input)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarOutput {
            shape: v.shape().to_vec(),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { coordinate });
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of the scalar function built by `f`
/// at `x` with central differences of step `eps`.
///
/// `f` receives a fresh graph and the node bound to `x`; it is rebuilt for
/// every probe so value-dependent branches are re-taken at the probe point.
pub fn finite_difference_check<F>(
    f: F,
    x: &DiffArray,
    eps: f64,
) -> Result<FiniteDifferenceReport, NumericsError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::BadStep(eps));
    }
    let mut g = Graph::new();
    let input = g.input("x", x.clone(), true);
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let analytic = g
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.values()[k];
        probe.values_mut()[k] = orig + eps;
        let plus = eval_scalar(&f, &probe, k)?;
        probe.values_mut()[k] = orig - eps;
        let minus = eval_scalar(&f, &probe, k)?;
        probe.values_mut()[k] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let mut max_rel_error = 0.0;
    let mut worst_coordinate = 0;
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_coordinate = k;
        }
    }
    Ok(FiniteDifferenceReport {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> DiffArray {
        let n = shape.iter().product();
        DiffArray::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = random(&mut rng, vec![5], -3.0, 3.0);
            let r = finite_difference_check(
                |g, x| {
                    let sq = g.mul(x, x)?;
                    let s = g.scale(sq, 1.5)?;
                    let lin = g.scale(x, -0.5)?;
                    let t = g.add(s, lin)?;
                    g.sum(t)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = DiffArray::scalar(1.0);
        assert!(matches!(
            finite_difference_check(|g, x| g.sum(x), &x, 0.0),
            Err(NumericsError::BadStep(_))
        ));
    }

    #[test]
    fn reports_non_finite_probe() {
        // log(x) at x = 1e-6 with eps 1e-5 probes a negative argument
        let x = DiffArray::vector(vec![1.0, 1e-6]);
        match finite_difference_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &x,
            1e-5,
        ) {
            Err(NumericsError::NonFinite { coordinate }) => assert_eq!(coordinate, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    /// Per-primitive sweep: every differentiable op at 100 random points.
    #[test]
    fn every_primitive_matches_central_differences() {
        type Build = fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>;
        let cases: Vec<(&str, Vec<usize>, f64, f64, Build)> = vec![
            ("matmul", vec![3, 4], -1.0, 1.0, |g, x| {
                let w = g.constant(DiffArray::matrix(4, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, 0.9]).unwrap());
                let y = g.matmul(x, w)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            }),
            ("matmul_nt", vec![3, 4], -1.0, 1.0, |g, x| {
                let y = g.matmul_nt(x, x)?;
                let s = g.sigmoid(y)?;
                g.sum(s)
            }),
            ("add_sub_broadcast", vec![3, 4], -1.0, 1.0, |g, x| {
                let r = g.sum_axis(x, 0)?;
                let a = g.add(x, r)?;
                let b = g.sub(a, x)?;
                let c = g.mul(b, x)?;
                g.sum(c)
            }),
            ("mul_div", vec![6], 0.5, 2.0, |g, x| {
                let y = g.mul(x, x)?;
                let z = g.div(y, x)?;
                let w = g.div(x, y)?;
                let s = g.add(z, w)?;
                g.sum(s)
            }),
            ("min_max", vec![6], -1.0, 1.0, |g, x| {
                let c = g.constant(DiffArray::vector(vec![0.05, -0.05, 0.5, -0.5, 0.95, -0.95]));
                let a = g.minimum(x, c)?;
                let b = g.maximum(x, c)?;
                let a2 = g.mul(a, a)?;
                let s = g.add(a2, b)?;
                g.sum(s)
            }),
            ("exp_log", vec![5], 0.2, 2.0, |g, x| {
                let e = g.exp(x)?;
                let l = g.log(x)?;
                let s = g.add(e, l)?;
                g.sum(s)
            }),
            ("sqrt_neg_scale_offset", vec![5], 0.2, 2.0, |g, x| {
                let s = g.sqrt(x)?;
                let n = g.neg(s)?;
                let k = g.scale(n, 3.0)?;
                let o = g.offset(k, 2.0)?;
                let o2 = g.mul(o, o)?;
                g.sum(o2)
            }),
            ("abs_relu", vec![6], -1.0, 1.0, |g, x| {
                let a = g.abs(x)?;
                let r = g.relu(x)?;
                let r2 = g.mul(r, r)?;
                let s = g.add(a, r2)?;
                g.sum(s)
            }),
            ("sigmoid_gelu", vec![6], -3.0, 3.0, |g, x| {
                let a = g.sigmoid(x)?;
                let b = g.gelu(x)?;
                let s = g.mul(a, b)?;
                g.sum(s)
            }),
            ("softmax", vec![2, 5], -2.0, 2.0, |g, x| {
                let w = g.constant(DiffArray::matrix(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap());
                let s = g.softmax(x)?;
                let m = g.mul(s, w)?;
                g.sum(m)
            }),
            ("log_softmax", vec![2, 5], -2.0, 2.0, |g, x| {
                let w = g.constant(DiffArray::matrix(2, 5, (0..10).map(|i| (i % 3) as f64 * 0.4).collect()).unwrap());
                let s = g.log_softmax(x)?;
                let m = g.mul(s, w)?;
                g.sum(m)
            }),
            ("layer_norm", vec![3, 4], -2.0, 2.0, |g, x| {
                let w = g.constant(DiffArray::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
                let y = g.layer_norm(x)?;
                let m = g.mul(y, w)?;
                g.sum(m)
            }),
            ("mean_sum_axis", vec![3, 4], -1.0, 1.0, |g, x| {
                let a = g.sum_axis(x, 1)?;
                let a2 = g.mul(a, a)?;
                let m = g.mean(a2)?;
                let x2 = g.mul(x, x)?;
                let b = g.mean(x2)?;
                g.add(m, b)
            }),
            ("concat_gather", vec![3, 2], -1.0, 1.0, |g, x| {
                let c = g.concat(&[x, x], 0)?;
                let d = g.concat(&[c, c], 1)?;
                let r = g.gather(d, &[0, 5, 5, 2])?;
                let r2 = g.mul(r, r)?;
                let w = g.sigmoid(r2)?;
                g.sum(w)
            }),
            ("transpose_reshape_slice", vec![3, 4], -1.0, 1.0, |g, x| {
                let t = g.transpose(x)?;
                let r = g.reshape(t, vec![2, 6])?;
                let s = g.slice_cols(r, 1, 4)?;
                let e = g.exp(s)?;
                g.sum(e)
            }),
            ("broadcast", vec![1, 3], -1.0, 1.0, |g, x| {
                let b = g.broadcast(x, vec![4, 3])?;
                let w = g.constant(DiffArray::matrix(4, 3, (0..12).map(|i| i as f64 * 0.2).collect()).unwrap());
                let m = g.mul(b, w)?;
                let m2 = g.mul(m, m)?;
                g.sum(m2)
            }),
            ("replace_rows", vec![3, 2], -1.0, 1.0, |g, x| {
                let r = g.replace_rows(x, &[1], &[0.5, -0.5])?;
                let m = g.mul(r, x)?;
                g.sum(m)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, shape, lo, hi, f) in cases {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let x = random(&mut rng, shape.clone(), lo, hi);
                let r = finite_difference_check(f, &x, 1e-5).unwrap();
                worst = worst.max(r.max_rel_error);
            }
            assert!(worst < 1e-3, "{name}: max rel error {worst}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = random(&mut rng, vec![4, 7], -20.0, 20.0);
            let mut g = Graph::new();
            let n = g.input("x", x, false);
            let s = g.softmax(n).unwrap();
            let v = g.value(s);
            for r in 0..4 {
                let row = v.row(r);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
