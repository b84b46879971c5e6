//! Uniform B-splines on a padded grid.
//!
//! A [`SplineSpec`] with `G` intervals on `[lo, hi]` and order `K` produces
//! `G + 2K + 1` uniformly spaced knots (`K` extra on each side), which carry
//! `G + K` degree-`K` basis functions. [`basis_eval`] is the reference
//! Cox–de Boor recursion over the whole knot vector; [`basis_local`] and
//! [`basis_local_with_grad`] evaluate only the `K + 1` functions that are
//! non-zero at `x` and are what the layers use.
//!
//! Order-0 indicators are half-open, `t_i <= x < t_{i+1}`, except that
//! `x == hi` belongs to the last interior interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineSpec {
    /// Number of intervals on `range` before padding.
    pub grid: usize,
    /// Polynomial order of the basis.
    pub order: usize,
    pub range: (f64, f64),
}

impl SplineSpec {
    pub fn new(grid: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        let spec = SplineSpec {
            grid,
            order,
            range: (lo, hi),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if self.grid == 0 {
            return Err(Error::Config("spline grid count must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("spline range [{lo}, {hi}] must satisfy lo < hi")));
        }
        Ok(())
    }

    /// Number of degree-`K` basis functions, `G + K`.
    #[inline]
    pub fn num_basis(&self) -> usize {
        self.grid + self.order
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.range.1 - self.range.0) / self.grid as f64
    }
}

/// Padded uniform knot sequence `t_0 ..= t_{G+2K}` with `t_K = lo`, `t_{G+K} = hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    spec: SplineSpec,
    knots: Vec<f64>,
}

pub fn make_knots(spec: &SplineSpec) -> KnotVector {
    let (lo, hi) = spec.range;
    let g = spec.grid as f64;
    let k = spec.order as isize;
    let knots = (0..(spec.grid + 2 * spec.order + 1) as isize)
        .map(|j| {
            let u = (j - k) as f64 / g;
            lo * (1.0 - u) + hi * u
        })
        .collect();
    KnotVector { spec: *spec, knots }
}

impl KnotVector {
    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn num_basis(&self) -> usize {
        self.spec.num_basis()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.knots
    }

    /// Index of the order-0 interval containing `x`, honoring the closed right end at `hi`.
    fn interval(&self, x: f64) -> Option<usize> {
        let t = &self.knots;
        let last_interior = self.spec.grid + self.spec.order - 1;
        if x == self.spec.range.1 {
            return Some(last_interior);
        }
        if !(x >= t[0] && x < t[t.len() - 1]) {
            return None;
        }
        let h = self.spec.spacing();
        let mut mu = ((x - t[0]) / h).floor() as isize;
        mu = mu.clamp(0, t.len() as isize - 2);
        let mut mu = mu as usize;
        while mu + 1 < t.len() - 1 && x >= t[mu + 1] {
            mu += 1;
        }
        while mu > 0 && x < t[mu] {
            mu -= 1;
        }
        Some(mu)
    }
}

/// Sink for arithmetic-operation counts; `()` discards them.
///
/// [`crate::accounting::flops_measured`] threads a real counter through the
/// reference recursion so the count reflects exactly what is executed.
pub trait OpCounter {
    fn tick(&mut self, ops: u64);
}

impl OpCounter for () {
    #[inline(always)]
    fn tick(&mut self, _ops: u64) {}
}

impl OpCounter for u64 {
    #[inline(always)]
    fn tick(&mut self, ops: u64) {
        *self += ops;
    }
}

/// Dense Cox–de Boor recursion up to `order`, returning all degree-`order`
/// functions defined on the knot vector.
pub(crate) fn cox_de_boor(knots: &KnotVector, order: usize, x: f64, ops: &mut impl OpCounter) -> Vec<f64> {
    let t = &knots.knots;
    // Order 0: boolean interval indicators, no arithmetic.
    let mut b = vec![0.0; t.len() - 1];
    if let Some(mu) = knots.interval(x) {
        b[mu] = 1.0;
    }
    for k in 1..=order {
        let n = t.len() - 1 - k;
        let mut next = vec![0.0; n];
        for (i, out) in next.iter_mut().enumerate() {
            let mut left = 0.0;
            let den_l = t[i + k] - t[i];
            ops.tick(1);
            if den_l != 0.0 {
                left = (x - t[i]) / den_l * b[i];
                ops.tick(3);
            }
            let mut right = 0.0;
            let den_r = t[i + k + 1] - t[i + 1];
            ops.tick(1);
            if den_r != 0.0 {
                right = (t[i + k + 1] - x) / den_r * b[i + 1];
                ops.tick(3);
            }
            *out = left + right;
            ops.tick(1);
        }
        b = next;
    }
    b
}

/// The `G + K` degree-`K` basis values at `x`.
pub fn basis_eval(knots: &KnotVector, x: f64) -> Vec<f64> {
    cox_de_boor(knots, knots.order(), x, &mut ())
}

/// Derivatives of the `G + K` basis values with respect to `x`.
pub fn basis_grad(knots: &KnotVector, x: f64) -> Result<Vec<f64>> {
    let k = knots.order();
    if k == 0 {
        return Err(Error::UnsupportedOrder(0));
    }
    let t = &knots.knots;
    let lower = cox_de_boor(knots, k - 1, x, &mut ());
    let kf = k as f64;
    let grad = (0..knots.num_basis())
        .map(|i| {
            let dl = t[i + k] - t[i];
            let dr = t[i + k + 1] - t[i + 1];
            let a = if dl != 0.0 { lower[i] / dl } else { 0.0 };
            let b = if dr != 0.0 { lower[i + 1] / dr } else { 0.0 };
            kf * (a - b)
        })
        .collect();
    Ok(grad)
}

/// Evaluates the `K + 1` possibly non-zero basis functions at `x` into
/// `values[..=K]`.
///
/// Returns the global index of `values[0]`, which may be negative or run past
/// `G + K - 1` near the padded ends; callers skip those entries. `None` when
/// `x` lies outside the knot span.
pub fn basis_local(knots: &KnotVector, x: f64, values: &mut [f64]) -> Option<isize> {
    let k = knots.order();
    let mu = knots.interval(x)?;
    let frac = (x - knots.knots[mu]) / knots.spec.spacing();
    uniform_triangle(frac, k, values);
    Some(mu as isize - k as isize)
}

/// Like [`basis_local`], also writing `d/dx` of each value into `grads[..=K]`.
pub fn basis_local_with_grad(knots: &KnotVector, x: f64, values: &mut [f64], grads: &mut [f64]) -> Option<isize> {
    let k = knots.order();
    let mu = knots.interval(x)?;
    let frac = (x - knots.knots[mu]) / knots.spec.spacing();
    if k == 0 {
        values[0] = 1.0;
        grads[0] = 0.0;
        return Some(mu as isize);
    }
    uniform_triangle(frac, k - 1, values);
    let inv_h = 1.0 / knots.spec.spacing();
    for r in 0..=k {
        let a = if r >= 1 { values[r - 1] } else { 0.0 };
        let b = if r < k { values[r] } else { 0.0 };
        grads[r] = inv_h * (a - b);
    }
    raise_order(frac, k, values);
    Some(mu as isize - k as isize)
}

/// Uniform-knot specialization of the triangular de Boor scheme: after the
/// call, `n[0..=order]` holds the order-`order` functions supported on the
/// interval, given the position `frac ∈ [0, 1]` inside it.
fn uniform_triangle(frac: f64, order: usize, n: &mut [f64]) {
    n[0] = 1.0;
    for j in 1..=order {
        raise_order(frac, j, n);
    }
}

fn raise_order(frac: f64, j: usize, n: &mut [f64]) {
    let inv_j = 1.0 / j as f64;
    let mut saved = 0.0;
    for r in 0..j {
        let temp = n[r] * inv_j;
        let right = (r + 1) as f64 - frac;
        let left = frac + (j - r) as f64 - 1.0;
        n[r] = saved + right * temp;
        saved = left * temp;
    }
    n[j] = saved;
}

/// `Σ_i coef_i · B_{i,K}(x)`.
pub fn spline_eval(coef: &[f64], knots: &KnotVector, x: f64) -> Result<f64> {
    if coef.len() != knots.num_basis() {
        return Err(Error::shape("spline_eval", knots.num_basis(), coef.len()));
    }
    Ok(dot_local(coef, knots, x))
}

/// Sum of the local basis values against a coefficient row.
#[inline]
pub(crate) fn dot_local(coef: &[f64], knots: &KnotVector, x: f64) -> f64 {
    let mut vals = [0.0; MAX_LOCAL];
    let k = knots.order();
    let mut heap;
    let vals: &mut [f64] = if k < MAX_LOCAL {
        &mut vals
    } else {
        heap = vec![0.0; k + 1];
        &mut heap
    };
    match basis_local(knots, x, vals) {
        Some(start) => local_dot(coef, start, &vals[..=k]),
        None => 0.0,
    }
}

/// Size of stack buffers for local basis values; orders up to 15 avoid allocation.
pub(crate) const MAX_LOCAL: usize = 16;

#[inline]
pub(crate) fn local_dot(coef: &[f64], start: isize, local: &[f64]) -> f64 {
    let mut s = 0.0;
    for (r, &v) in local.iter().enumerate() {
        let idx = start + r as isize;
        if idx >= 0 && (idx as usize) < coef.len() {
            s += coef[idx as usize] * v;
        }
    }
    s
}

/// Per-edge spline coefficients, laid out `[d_out][d_in][G + K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCoefs {
    pub d_out: usize,
    pub d_in: usize,
    pub num_basis: usize,
    pub data: Vec<f64>,
}

impl SplineCoefs {
    pub fn zeros(d_out: usize, d_in: usize, num_basis: usize) -> Self {
        SplineCoefs {
            d_out,
            d_in,
            num_basis,
            data: vec![0.0; d_out * d_in * num_basis],
        }
    }

    #[inline]
    pub fn edge(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.d_in + i) * self.num_basis;
        &self.data[o..o + self.num_basis]
    }

    #[inline]
    pub fn edge_mut(&mut self, j: usize, i: usize) -> &mut [f64] {
        let o = (j * self.d_in + i) * self.num_basis;
        &mut self.data[o..o + self.num_basis]
    }
}

/// Evaluates every edge spline `(j, i)` at `x[i]`; the basis for each input is
/// computed once and shared across outputs.
pub fn spline_eval_batch(coef: &SplineCoefs, knots: &KnotVector, x: &[f64]) -> Result<Matrix> {
    if coef.d_in != x.len() || coef.num_basis != knots.num_basis() {
        return Err(Error::shape(
            "spline_eval_batch",
            format!("d_in={} basis={}", coef.d_in, coef.num_basis),
            format!("d_in={} basis={}", x.len(), knots.num_basis()),
        ));
    }
    let k = knots.order();
    let mut out = Matrix::zeros(coef.d_out, coef.d_in);
    let mut local = vec![0.0; k + 1];
    for (i, &xi) in x.iter().enumerate() {
        let Some(start) = basis_local(knots, xi, &mut local) else {
            continue;
        };
        for j in 0..coef.d_out {
            out.set(j, i, local_dot(coef.edge(j, i), start, &local));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;
    use proptest::prelude::*;

    fn knots(g: usize, k: usize, lo: f64, hi: f64) -> KnotVector {
        make_knots(&SplineSpec::new(g, k, lo, hi).unwrap())
    }

    fn dense_from_local(kv: &KnotVector, x: f64) -> Vec<f64> {
        let mut vals = vec![0.0; kv.order() + 1];
        let mut out = vec![0.0; kv.num_basis()];
        if let Some(start) = basis_local(kv, x, &mut vals) {
            for (r, v) in vals.iter().enumerate() {
                let idx = start + r as isize;
                if idx >= 0 && (idx as usize) < out.len() {
                    out[idx as usize] = *v;
                }
            }
        }
        out
    }

    #[test]
    fn knot_examples() {
        assert_eq!(knots(2, 1, 0.0, 2.0).as_slice(), &[-1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(knots(1, 0, 0.0, 1.0).as_slice(), &[0.0, 1.0]);
        let kv = knots(3, 2, -1.0, 1.0);
        assert_eq!(kv.as_slice().len(), 8);
        for w in kv.as_slice().windows(2) {
            assert!((w[1] - w[0] - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(kv.as_slice()[2], -1.0);
        assert_eq!(kv.as_slice()[5], 1.0);
    }

    #[test]
    fn spec_validation() {
        assert!(SplineSpec::new(0, 3, -1.0, 1.0).is_err());
        assert!(SplineSpec::new(3, 3, 1.0, 1.0).is_err());
        assert!(SplineSpec::new(3, 0, -1.0, 1.0).is_ok());
    }

    #[test]
    fn linear_hat_example() {
        let kv = knots(2, 1, 0.0, 2.0);
        assert_eq!(basis_eval(&kv, 0.5), vec![0.5, 0.5, 0.0]);
        assert_eq!(basis_grad(&kv, 0.5).unwrap(), vec![-1.0, 1.0, 0.0]);
        assert_eq!(spline_eval(&[1.0, 2.0, 3.0], &kv, 0.5).unwrap(), 1.5);
        assert!(matches!(spline_eval(&[1.0, 2.0], &kv, 0.5), Err(Error::Shape { .. })));
    }

    #[test]
    fn order_zero_is_an_indicator_partition() {
        for g in 1..=20 {
            let kv = knots(g, 0, -1.0, 1.0);
            let mut rng = Rng::new(g as u64);
            for _ in 0..200 {
                let x = rng.uniform(-1.0, 1.0);
                let b = basis_eval(&kv, x);
                assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), g - 1);
            }
            assert_eq!(basis_eval(&kv, 1.0).iter().sum::<f64>(), 1.0);
        }
        assert!(matches!(
            basis_grad(&knots(3, 0, 0.0, 1.0), 0.5),
            Err(Error::UnsupportedOrder(0))
        ));
    }

    #[test]
    fn partition_of_unity_grid() {
        for g in 1..=20 {
            for k in [0, 2, 3, 5] {
                let kv = knots(g, k, -1.0, 1.0);
                let mut rng = Rng::new((g * 10 + k) as u64);
                let mut xs: Vec<f64> = (0..200).map(|_| rng.uniform(-1.0, 1.0)).collect();
                xs.extend([-1.0, 1.0, 0.0]);
                for x in xs {
                    let b = basis_eval(&kv, x);
                    assert_eq!(b.len(), g + k);
                    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "G={g} K={k} x={x}");
                    assert!(b.iter().all(|&v| (0.0..=1.0 + 1e-15).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn local_support() {
        let kv = knots(5, 3, -1.0, 1.0);
        let t = kv.as_slice();
        let mut rng = Rng::new(1);
        for _ in 0..500 {
            let x = rng.uniform(-2.5, 2.5);
            let b = basis_eval(&kv, x);
            for (i, &v) in b.iter().enumerate() {
                if x <= t[i] || x >= t[i + 4] {
                    assert_eq!(v, 0.0, "B_{i} at {x}");
                }
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn local_evaluation_matches_dense_recursion() {
        let mut rng = Rng::new(2);
        for g in [1, 3, 5, 10, 20] {
            for k in [0, 1, 2, 3, 5] {
                let kv = knots(g, k, -2.0, 2.0);
                for _ in 0..100 {
                    let x = rng.uniform(-4.0, 4.0);
                    let dense = basis_eval(&kv, x);
                    let local = dense_from_local(&kv, x);
                    for (a, b) in dense.iter().zip(&local) {
                        assert!((a - b).abs() < 1e-13, "G={g} K={k} x={x}: {dense:?} vs {local:?}");
                    }
                    if k >= 1 {
                        let dg = basis_grad(&kv, x).unwrap();
                        let mut v = vec![0.0; k + 1];
                        let mut d = vec![0.0; k + 1];
                        let mut lg = vec![0.0; kv.num_basis()];
                        let mut lv = vec![0.0; kv.num_basis()];
                        if let Some(start) = basis_local_with_grad(&kv, x, &mut v, &mut d) {
                            for r in 0..=k {
                                let idx = start + r as isize;
                                if idx >= 0 && (idx as usize) < lg.len() {
                                    lg[idx as usize] = d[r];
                                    lv[idx as usize] = v[r];
                                }
                            }
                        }
                        for i in 0..kv.num_basis() {
                            assert!((dg[i] - lg[i]).abs() < 1e-12);
                            assert!((dense[i] - lv[i]).abs() < 1e-13);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_knots() {
        let mut rng = Rng::new(3);
        let h = 1e-5;
        for g in [2, 5, 10] {
            for k in [1, 2, 3, 5] {
                let kv = knots(g, k, -1.0, 1.0);
                let spacing = kv.spec().spacing();
                let mut tested = 0;
                while tested < 100 {
                    let x = rng.uniform(-1.0, 1.0);
                    let off = kv
                        .as_slice()
                        .iter()
                        .map(|t| (x - t).abs())
                        .fold(f64::INFINITY, f64::min);
                    if off < spacing / 100.0 {
                        continue;
                    }
                    tested += 1;
                    let an = basis_grad(&kv, x).unwrap();
                    assert!(an.iter().sum::<f64>().abs() < 1e-10);
                    let p = basis_eval(&kv, x + h);
                    let m = basis_eval(&kv, x - h);
                    for i in 0..an.len() {
                        let fd = (p[i] - m[i]) / (2.0 * h);
                        let err = (fd - an[i]).abs();
                        let rel = err / an[i].abs().max(fd.abs()).max(1e-300);
                        assert!(rel < 1e-6 || err < 1e-8, "G={g} K={k} x={x} i={i}: {} vs {fd}", an[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_coefficients_reproduce_the_constant() {
        let kv = knots(7, 3, -1.0, 1.0);
        let coef = vec![2.5; kv.num_basis()];
        for x in [-1.0, -0.3, 0.0, 0.77, 0.999] {
            assert!((spline_eval(&coef, &kv, x).unwrap() - 2.5).abs() < 1e-12);
        }
        assert_eq!(spline_eval(&coef, &kv, 100.0).unwrap(), 0.0);
        assert_eq!(spline_eval(&coef, &kv, -100.0).unwrap(), 0.0);
    }

    #[test]
    fn higher_orders_are_c1_across_interior_knots() {
        let mut rng = Rng::new(4);
        for k in [2, 3, 5] {
            let kv = knots(6, k, -1.0, 1.0);
            let coef: Vec<f64> = (0..kv.num_basis()).map(|_| rng.normal(0.0, 1.0)).collect();
            let f = |x: f64| spline_eval(&coef, &kv, x).unwrap();
            let eps = 1e-7;
            for &t in &kv.as_slice()[k + 1..kv.as_slice().len() - k - 1] {
                let left = (f(t) - f(t - eps)) / eps;
                let right = (f(t + eps) - f(t)) / eps;
                assert!((left - right).abs() < 1e-5, "K={k} knot {t}: {left} vs {right}");
                assert!((f(t - eps) - f(t + eps)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batch_matches_looped_scalar_oracle() {
        let mut rng = Rng::new(5);
        let kv = knots(4, 3, -1.0, 1.0);
        let mut coef = SplineCoefs::zeros(2, 3, kv.num_basis());
        coef.data.iter_mut().for_each(|c| *c = rng.normal(0.0, 1.0));
        let x = [-0.7, 0.1, 0.95];
        let out = spline_eval_batch(&coef, &kv, &x).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                let b = basis_eval(&kv, x[i]);
                let oracle: f64 = coef.edge(j, i).iter().zip(&b).map(|(c, b)| c * b).sum();
                assert!((out.get(j, i) - oracle).abs() < 1e-14);
            }
        }

        let mut same = SplineCoefs::zeros(3, 2, kv.num_basis());
        let row: Vec<f64> = (0..2 * kv.num_basis()).map(|_| rng.normal(0.0, 1.0)).collect();
        for j in 0..3 {
            same.data[j * row.len()..(j + 1) * row.len()].copy_from_slice(&row);
        }
        let out = spline_eval_batch(&same, &kv, &[0.2, -0.4]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));

        let single = SplineCoefs {
            d_out: 1,
            d_in: 2,
            num_basis: kv.num_basis(),
            data: row.clone(),
        };
        let out = spline_eval_batch(&single, &kv, &[0.2, -0.4]).unwrap();
        assert_eq!(out.get(0, 0), spline_eval(single.edge(0, 0), &kv, 0.2).unwrap());
        assert!(spline_eval_batch(&single, &kv, &[0.2]).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity_holds_everywhere_in_range(
            g in 1usize..25, k in 0usize..7, lo in -5.0f64..0.0, width in 0.1f64..10.0, u in 0.0f64..1.0
        ) {
            let kv = knots(g, k, lo, lo + width);
            let x = lo + u * width;
            let s: f64 = basis_eval(&kv, x).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
