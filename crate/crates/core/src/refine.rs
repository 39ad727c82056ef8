//! Gradient refinement of a band's prediction filter against a dry estimate.
//!
//! For a wet window `y` (newest first, width `m + D + L − 1`) and dry estimate
//! `x̄` (length `m`) the objective is `‖x̄ − (Ĩ − G(g)) y‖² + λ‖g‖²`. Writing
//! `Ỹ[i, l] = y[i + D + l]`, `d = y[..m] − x̄`, `M = conj(ỸᴴỸ)` and
//! `b = conj(Ỹᴴ d)`, it equals `‖d‖² − 2 Re(bᴴg) + gᴴ(M + λI)g`, and its gradient
//! with respect to `g` (`∂/∂Re g + i ∂/∂Im g`) is `2((M + λI)g − b)`.

use faer::{Mat, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    pub alpha: f64,
    pub lambda: f64,
    pub n_refine: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            alpha: 1e-6,
            lambda: 1.0,
            n_refine: 10_000,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size {} must be positive", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularizer {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Consecutive objective increases that trigger a step-size halving.
pub const DIVERGENCE_PATIENCE: usize = 10;

fn check_shapes(g: &[Complex64], y: &[Complex64], xbar: &[Complex64], delay: usize) -> Result<()> {
    if g.is_empty() || delay == 0 {
        return Err(Error::InvalidArgument("refinement needs L >= 1 and D >= 1".into()));
    }
    let width = xbar.len() + delay + g.len() - 1;
    if y.len() != width || xbar.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "wet window has {} frames, expected {width} for {} outputs",
            y.len(),
            xbar.len()
        )));
    }
    Ok(())
}

fn residual(g: &[Complex64], y: &[Complex64], xbar: &[Complex64], delay: usize) -> Vec<Complex64> {
    (0..xbar.len())
        .map(|i| {
            let pred: Complex64 = g
                .iter()
                .enumerate()
                .map(|(l, gl)| gl.conj() * y[i + delay + l])
                .sum();
            xbar[i] - (y[i] - pred)
        })
        .collect()
}

pub fn refine_objective(
    g: &[Complex64],
    y: &[Complex64],
    xbar: &[Complex64],
    delay: usize,
    lambda: f64,
) -> Result<f64> {
    check_shapes(g, y, xbar, delay)?;
    let r: f64 = residual(g, y, xbar, delay).iter().map(|v| v.norm_sqr()).sum();
    let reg: f64 = g.iter().map(|v| v.norm_sqr()).sum();
    Ok(r + lambda * reg)
}

/// Closed-form gradient `2 conj(Ỹᴴ r) + 2λg` with `r = x̄ − (Ĩ − G) y`.
pub fn refine_gradient(
    g: &[Complex64],
    y: &[Complex64],
    xbar: &[Complex64],
    delay: usize,
    lambda: f64,
) -> Result<Vec<Complex64>> {
    check_shapes(g, y, xbar, delay)?;
    let r = residual(g, y, xbar, delay);
    Ok((0..g.len())
        .map(|l| {
            let corr: Complex64 = r
                .iter()
                .enumerate()
                .map(|(i, ri)| y[i + delay + l].conj() * ri)
                .sum();
            corr.conj() * 2.0 + g[l] * (2.0 * lambda)
        })
        .collect())
}

/// Quadratic form of the objective: `M`, `b` and `‖d‖²`.
pub struct Quadratic {
    pub m: Mat<Complex64>,
    pub b: Vec<Complex64>,
    pub offset: f64,
}

pub fn quadratic(y: &[Complex64], xbar: &[Complex64], taps: usize, delay: usize) -> Result<Quadratic> {
    let probe = vec![Complex64::new(0.0, 0.0); taps];
    check_shapes(&probe, y, xbar, delay)?;
    let rows = xbar.len();
    let delayed = Mat::from_fn(rows, taps, |i, l| y[i + delay + l]);
    let d = Mat::from_fn(rows, 1, |i, _| y[i] - xbar[i]);
    let m = (delayed.adjoint() * &delayed).as_ref().conjugate().to_owned();
    let bm = delayed.adjoint() * &d;
    let b = (0..taps).map(|l| bm.read(l, 0).conj()).collect();
    let offset = (0..rows).map(|i| d.read(i, 0).norm_sqr()).sum();
    Ok(Quadratic { m, b, offset })
}

/// Result of [`refine_filter`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineOutcome {
    pub filter: Vec<Complex64>,
    /// Objective before the first step and after every step.
    pub objectives: Vec<f64>,
    pub halvings: usize,
    /// Indices into `objectives` of the entries recorded right after each halving.
    pub halved_at: Vec<usize>,
    pub final_alpha: f64,
}

/// `n_refine` fixed-step gradient-descent iterations on [`refine_objective`].
///
/// Iterates are propagated in the eigenbasis of the (constant) Hessian, which
/// yields the same sequence as stepping along the closed-form gradient at a
/// cost of `O(L)` per step. When the objective rises for
/// [`DIVERGENCE_PATIENCE`] consecutive steps the step size is halved and the
/// iterate returns to the best one seen.
pub fn refine_filter(
    g: &[Complex64],
    y: &[Complex64],
    xbar: &[Complex64],
    delay: usize,
    params: &RefineParams,
) -> Result<RefineOutcome> {
    params.validate()?;
    check_shapes(g, y, xbar, delay)?;
    let q = quadratic(y, xbar, g.len(), delay)?;
    refine_quadratic(g, &q, params)
}

pub fn refine_quadratic(g: &[Complex64], q: &Quadratic, params: &RefineParams) -> Result<RefineOutcome> {
    params.validate()?;
    let taps = g.len();
    if q.b.len() != taps {
        return Err(Error::ShapeMismatch("filter and quadratic differ in length".into()));
    }
    let objective0 = {
        let mg = Mat::from_fn(taps, 1, |i, _| g[i]);
        let hg = &q.m * &mg;
        let mut acc = q.offset;
        for i in 0..taps {
            acc += (g[i].conj() * hg.read(i, 0)).re + params.lambda * g[i].norm_sqr()
                - 2.0 * (q.b[i].conj() * g[i]).re;
        }
        acc
    };
    if params.n_refine == 0 {
        return Ok(RefineOutcome {
            filter: g.to_vec(),
            objectives: vec![objective0],
            halvings: 0,
            halved_at: Vec::new(),
            final_alpha: params.alpha,
        });
    }
    let mut h = q.m.clone();
    for i in 0..taps {
        h.write(i, i, h.read(i, i) + params.lambda);
    }
    let eig = h.selfadjoint_eigendecomposition(Side::Lower);
    let mu: Vec<f64> = (0..taps).map(|i| eig.s().column_vector().read(i).re).collect();
    let basis = eig.u();
    let to_eig = |v: &[Complex64]| -> Vec<Complex64> {
        let vm = Mat::from_fn(taps, 1, |i, _| v[i]);
        let z = basis.adjoint() * &vm;
        (0..taps).map(|i| z.read(i, 0)).collect()
    };
    let beta = to_eig(&q.b);
    let mut z = to_eig(g);
    let quad = |z: &[Complex64]| -> f64 {
        q.offset
            + z.iter()
                .zip(&mu)
                .zip(&beta)
                .map(|((zi, m), bi)| m * zi.norm_sqr() - 2.0 * (bi.conj() * zi).re)
                .sum::<f64>()
    };
    let mut alpha = params.alpha;
    let mut objectives = Vec::with_capacity(params.n_refine + 1);
    let mut current = quad(&z);
    objectives.push(current);
    let mut best = (current, z.clone());
    let mut rises = 0;
    let mut halvings = 0;
    let mut halved_at = Vec::new();
    for _ in 0..params.n_refine {
        for ((zi, m), bi) in z.iter_mut().zip(&mu).zip(&beta) {
            *zi -= (*zi * *m - bi) * (2.0 * alpha);
        }
        let next = quad(&z);
        if !next.is_finite() {
            return Err(Error::Numerical("refinement objective is not finite".into()));
        }
        rises = if next > current { rises + 1 } else { 0 };
        current = next;
        if current < best.0 {
            best = (current, z.clone());
        }
        if rises >= DIVERGENCE_PATIENCE {
            alpha *= 0.5;
            halvings += 1;
            halved_at.push(objectives.len());
            rises = 0;
            log::warn!("refinement objective rose {DIVERGENCE_PATIENCE} times in a row; step size halved to {alpha:e}");
            z = best.1.clone();
            current = best.0;
        }
        objectives.push(current);
    }
    let zm = Mat::from_fn(taps, 1, |i, _| z[i]);
    let gm = basis * &zm;
    let filter: Vec<Complex64> = (0..taps).map(|i| gm.read(i, 0)).collect();
    Ok(RefineOutcome {
        filter,
        objectives,
        halvings,
        halved_at,
        final_alpha: alpha,
    })
}

/// Unique minimizer `(M + λI)⁻¹ b` of the objective (requires a positive definite Hessian).
pub fn closed_form_minimizer(q: &Quadratic, lambda: f64) -> Result<Vec<Complex64>> {
    let mut h = q.m.clone();
    for i in 0..h.nrows() {
        h.write(i, i, h.read(i, i) + lambda);
    }
    let b = Mat::from_fn(q.b.len(), 1, |i, _| q.b[i]);
    let chol = h
        .cholesky(Side::Lower)
        .map_err(|_| Error::Numerical("refinement Hessian is not positive definite".into()))?;
    use faer::prelude::SpSolver;
    let g = chol.solve(&b);
    Ok((0..q.b.len()).map(|i| g.read(i, 0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::build_band_operator;
    use crate::testutil::{crandn_vec, norm, rng};

    fn dense_objective(g: &[Complex64], y: &[Complex64], xbar: &[Complex64], delay: usize, lambda: f64) -> f64 {
        let a = build_band_operator(g, delay, xbar.len()).unwrap().dense();
        let mut acc = 0.0;
        for i in 0..xbar.len() {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..y.len() {
                row += a.read(i, j) * y[j];
            }
            acc += (xbar[i] - row).norm_sqr();
        }
        acc + lambda * g.iter().map(|v| v.norm_sqr()).sum::<f64>()
    }

    #[test]
    fn defaults() {
        let p = RefineParams::default();
        assert_eq!((p.alpha, p.lambda, p.n_refine), (1e-6, 1.0, 10_000));
    }

    #[test]
    fn objective_examples() {
        let mut r = rng(1);
        let (m, l, d) = (4, 2, 1);
        let y = crandn_vec(&mut r, m + d + l - 1);
        let zero = vec![Complex64::new(0.0, 0.0); l];
        assert_eq!(refine_objective(&zero, &y, &y[..m], d, 3.0).unwrap(), 0.0);
        let head: f64 = y[..m].iter().map(|v| v.norm_sqr()).sum();
        let v = refine_objective(&zero, &y, &vec![Complex64::new(0.0, 0.0); m], d, 0.0).unwrap();
        assert!((v - head).abs() < 1e-14);
        let g = crandn_vec(&mut r, l);
        let xb = crandn_vec(&mut r, m);
        let fast = refine_objective(&g, &y, &xb, d, 0.7).unwrap();
        let dense = dense_objective(&g, &y, &xb, d, 0.7);
        assert!((fast - dense).abs() <= 1e-12 * dense.max(1.0));
        assert!(refine_objective(&g, &y[1..], &xb, d, 0.7).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(2);
        let (m, l, d) = (6, 3, 2);
        let h = 1e-6;
        for _ in 0..10 {
            let g = crandn_vec(&mut r, l);
            let y = crandn_vec(&mut r, m + d + l - 1);
            let xb = crandn_vec(&mut r, m);
            let lambda = 0.5;
            let grad = refine_gradient(&g, &y, &xb, d, lambda).unwrap();
            for k in 0..l {
                let f = |delta: Complex64| {
                    let mut gp = g.clone();
                    gp[k] += delta;
                    refine_objective(&gp, &y, &xb, d, lambda).unwrap()
                };
                let dre = (f(Complex64::new(h, 0.0)) - f(Complex64::new(-h, 0.0))) / (2.0 * h);
                let dim = (f(Complex64::new(0.0, h)) - f(Complex64::new(0.0, -h))) / (2.0 * h);
                let fd = Complex64::new(dre, dim);
                assert!((fd - grad[k]).norm() <= 1e-4 * grad[k].norm().max(1e-3));
            }
            // Gram form agrees with the direct form.
            let q = quadratic(&y, &xb, l, d).unwrap();
            let gm = Mat::from_fn(l, 1, |i, _| g[i]);
            let mg = &q.m * &gm;
            for k in 0..l {
                let alt = (mg.read(k, 0) + g[k] * lambda - q.b[k]) * 2.0;
                assert!((alt - grad[k]).norm() < 1e-10 * grad[k].norm().max(1.0));
            }
        }
    }

    #[test]
    fn zero_iterations_leave_filter_untouched() {
        let mut r = rng(3);
        let g = crandn_vec(&mut r, 3);
        let y = crandn_vec(&mut r, 10);
        let xb = crandn_vec(&mut r, 7);
        let p = RefineParams { alpha: 123.0, lambda: 1.0, n_refine: 0 };
        assert_eq!(refine_filter(&g, &y, &xb, 1, &p).unwrap().filter, g);
    }

    #[test]
    fn iterates_match_plain_gradient_descent() {
        let mut r = rng(4);
        let (m, l, d) = (12, 3, 2);
        let g0 = crandn_vec(&mut r, l);
        let y = crandn_vec(&mut r, m + d + l - 1);
        let xb = crandn_vec(&mut r, m);
        let p = RefineParams { alpha: 1e-3, lambda: 0.3, n_refine: 50 };
        let fast = refine_filter(&g0, &y, &xb, d, &p).unwrap();
        let mut g = g0.clone();
        for _ in 0..50 {
            let grad = refine_gradient(&g, &y, &xb, d, p.lambda).unwrap();
            for (gi, di) in g.iter_mut().zip(&grad) {
                *gi -= di * p.alpha;
            }
        }
        for k in 0..l {
            assert!((fast.filter[k] - g[k]).norm() < 1e-10);
        }
        let want = refine_objective(&g, &y, &xb, d, p.lambda).unwrap();
        assert!((fast.objectives[50] - want).abs() < 1e-9 * want);
    }

    #[test]
    fn recovers_generating_filter() {
        let mut r = rng(5);
        let (frames, l, d) = (400, 3, 2);
        let g_true = vec![Complex64::new(0.3, 0.2), Complex64::new(-0.2, 0.1), Complex64::new(0.1, 0.0)];
        let x = crandn_vec(&mut r, frames);
        // y_n = x_n + Σ conj(g_l) y_{n-D-l+1}
        let mut y = x.clone();
        for n in 0..frames {
            for (li, gl) in g_true.iter().enumerate() {
                if n >= d + li {
                    let past = y[n - d - li];
                    y[n] += gl.conj() * past;
                }
            }
        }
        let m = frames - (d + l - 1);
        let window: Vec<Complex64> = (0..frames).rev().map(|n| y[n]).collect();
        let xbar: Vec<Complex64> = (0..m).map(|i| x[frames - 1 - i]).collect();
        let q = quadratic(&window, &xbar, l, d).unwrap();
        let mu_max = q.m.selfadjoint_eigendecomposition(Side::Lower).s().column_vector().iter().map(|c| c.re).fold(0.0, |a: f64, b| a.max(*b));
        let p = RefineParams { alpha: 0.4 / mu_max, lambda: 0.0, n_refine: 3000 };
        let out = refine_filter(&vec![Complex64::new(0.0, 0.0); l], &window, &xbar, d, &p).unwrap();
        let err: Vec<Complex64> = out.filter.iter().zip(&g_true).map(|(a, b)| a - b).collect();
        assert!(norm(&err) < 0.1 * norm(&g_true), "{:?}", out.filter);
        let tol = 1e-10 * out.objectives[0];
        assert!(out.objectives.windows(2).all(|w| w[1] <= w[0] + tol));
    }

    #[test]
    fn stabilizer_recovers_from_divergence() {
        let mut r = rng(6);
        let (m, l, d) = (40, 4, 1);
        let y = crandn_vec(&mut r, m + d + l - 1);
        let xb = crandn_vec(&mut r, m);
        let g0 = crandn_vec(&mut r, l);
        let p = RefineParams { alpha: 0.5, lambda: 1.0, n_refine: 400 };
        let out = refine_filter(&g0, &y, &xb, d, &p).unwrap();
        assert!(out.halvings > 0);
        assert!(out.final_alpha < p.alpha);
        assert_eq!(out.halved_at.len(), out.halvings);
        let tail = &out.objectives[*out.halved_at.last().unwrap()..];
        let tol = 1e-10 * out.objectives[0];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + tol));
        assert!(tail[tail.len() - 1] < out.objectives[0]);
        let q = quadratic(&y, &xb, l, d).unwrap();
        let star = closed_form_minimizer(&q, p.lambda).unwrap();
        assert!(norm(&out.filter) <= norm(&g0) + norm(&star) + 1e-9);
    }

    #[test]
    fn bounded_iterates_at_stable_steps() {
        let mut r = rng(7);
        for _ in 0..10 {
            let (m, l, d) = (30, 3, 2);
            let y = crandn_vec(&mut r, m + d + l - 1);
            let xb = crandn_vec(&mut r, m);
            let g0 = crandn_vec(&mut r, l);
            let p = RefineParams { alpha: 1e-3, lambda: 0.5, n_refine: 500 };
            let out = refine_filter(&g0, &y, &xb, d, &p).unwrap();
            let star = closed_form_minimizer(&quadratic(&y, &xb, l, d).unwrap(), p.lambda).unwrap();
            assert!(norm(&out.filter) <= norm(&g0) + norm(&star) + 1e-12);
            let tol = 1e-10 * out.objectives[0];
        assert!(out.objectives.windows(2).all(|w| w[1] <= w[0] + tol));
        }
    }
}
