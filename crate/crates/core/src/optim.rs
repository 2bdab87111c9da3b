//! Box-constrained limited-memory quasi-Newton minimization and an
//! augmented-Lagrangian wrapper for smooth inequality constraints.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the infinity norm of the projected gradient falls below this.
    pub pg_tol: f64,
    /// Stop after this many consecutive iterations with relative decrease below `f_tol`.
    pub f_tol: f64,
    pub stall_iters: usize,
    pub max_backtracks: usize,
    /// The objective is convex: a step may also be accepted when the new
    /// gradient certifies sufficient decrease, which stays reliable after
    /// function differences fall below rounding.
    pub convex: bool,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            pg_tol: 1e-6,
            f_tol: 1e-15,
            stall_iters: 5,
            max_backtracks: 40,
            convex: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub pg_norm: f64,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Infinity norm of `P(x - g) - x`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&x, &g), (&l, &h))| ((x - g).clamp(l, h) - x).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box `[lo, hi]`. `f` writes the gradient into its
/// second argument and returns the value.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &LbfgsOptions,
) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evals = 1;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut stall = 0;
    let mut iter = 0;
    let mut pg = projected_gradient_norm(&x, &g, lo, hi);
    let mut d = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];

    while iter < opts.max_iter && pg > opts.pg_tol {
        iter += 1;
        // free variables: not pinned at a bound by the gradient
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let masked =
            |v: &[f64]| -> Vec<f64> { (0..n).map(|i| if free[i] { v[i] } else { 0.0 }).collect() };
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, _) in mem.iter().rev() {
            let (s, y) = (masked(s), masked(y));
            let sy = dot(&s, &y);
            if sy <= 1e-300 {
                alphas.push((0.0, s, y, 0.0));
                continue;
            }
            let rho = 1.0 / sy;
            let a = rho * dot(&s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push((a, s, y, rho));
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => {
                let (s, y) = (masked(s), masked(y));
                let yy = dot(&y, &y);
                let sy = dot(&s, &y);
                if yy > 0.0 && sy > 0.0 {
                    sy / yy
                } else {
                    1.0
                }
            }
            None => 1.0 / dot(&q, &q).sqrt().max(1.0),
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for (a, s, y, rho) in alphas.into_iter().rev() {
            if rho == 0.0 {
                continue;
            }
            let b = rho * dot(&y, &q);
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        // drop components that push into an active bound
        let blocked = |i: usize, v: f64| (x[i] <= lo[i] && v < 0.0) || (x[i] >= hi[i] && v > 0.0);
        for i in 0..n {
            d[i] = if free[i] && !blocked(i, -q[i]) {
                -q[i]
            } else {
                0.0
            };
        }
        if dot(&d, &g) >= 0.0 || !d.iter().all(|v| v.is_finite()) {
            mem.clear();
            let scale = 1.0 / dot(&g, &g).sqrt().max(1.0);
            for i in 0..n {
                d[i] = if free[i] { -g[i] * scale } else { 0.0 };
            }
        }

        // projected backtracking
        let mut t = 1.0;
        let mut accepted = false;
        let mut fnew = fx;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                xn[i] = (x[i] + t * d[i]).clamp(lo[i], hi[i]);
            }
            fnew = f(&xn, &mut gn);
            evals += 1;
            let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
            // for convex f, f(xn) <= f(x) + gn·(xn - x)
            let certified = opts.convex
                && (0..n).map(|i| gn[i] * (xn[i] - x[i])).sum::<f64>() <= 1e-4 * decrease;
            if fnew.is_finite() && decrease < 0.0 && (fnew <= fx + 1e-4 * decrease || certified) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        }
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, sy));
        }
        let rel = (fx - fnew).abs() / fx.abs().max(fnew.abs()).max(1e-300);
        stall = if rel < opts.f_tol { stall + 1 } else { 0 };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        fx = fnew;
        pg = projected_gradient_norm(&x, &g, lo, hi);
        if stall >= opts.stall_iters {
            break;
        }
    }
    LbfgsResult {
        converged: pg <= opts.pg_tol,
        x,
        f: fx,
        grad: g,
        iterations: iter,
        evaluations: evals,
        pg_norm: pg,
    }
}

/// Value, gradient, constraint values `c(x) <= 0` and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    /// One gradient row per constraint.
    pub jac: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlOptions {
    pub inner: LbfgsOptions,
    pub max_outer: usize,
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub rho0: f64,
    pub rho_max: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        Self {
            inner: LbfgsOptions::default(),
            max_outer: 30,
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            rho0: 10.0,
            rho_max: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub max_violation: f64,
    pub multipliers: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
}

/// Powell-Hestenes-Rockafellar augmented Lagrangian over inequality
/// constraints, with box-constrained inner solves.
///
/// Tracks the iterate with the smallest max violation (ties broken by
/// objective) and returns it when the outer loop runs out.
pub fn minimize_al<F>(mut eval: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &AlOptions) -> AlResult
where
    F: FnMut(&[f64]) -> ConstrainedEval,
{
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let first = eval(&x);
    let m = first.c.len();
    let mut mu = vec![0.0; m];
    let mut rho = opts.rho0;
    let mut inner_total = 0;
    let max_viol = |c: &[f64]| c.iter().cloned().fold(0.0f64, f64::max);
    let mut best = (max_viol(&first.c), first.f, x.clone());
    let mut prev_viol = best.0;

    for outer in 1..=opts.max_outer {
        let (mu_ref, rho_now) = (mu.clone(), rho);
        let res = minimize_box(
            |x, g| {
                let e = eval(x);
                g.copy_from_slice(&e.grad);
                let mut val = e.f;
                for i in 0..e.c.len() {
                    let t = mu_ref[i] + rho_now * e.c[i];
                    if t > 0.0 {
                        val += (t * t - mu_ref[i] * mu_ref[i]) / (2.0 * rho_now);
                        for (gk, jk) in g.iter_mut().zip(&e.jac[i]) {
                            *gk += t * jk;
                        }
                    } else {
                        val -= mu_ref[i] * mu_ref[i] / (2.0 * rho_now);
                    }
                }
                val
            },
            &x,
            lo,
            hi,
            &opts.inner,
        );
        inner_total += res.iterations;
        x = res.x;
        let e = eval(&x);
        let viol = max_viol(&e.c);
        if viol < best.0 - 1e-15 || (viol <= best.0 + 1e-15 && e.f < best.1) {
            best = (viol, e.f, x.clone());
        }
        for i in 0..m {
            mu[i] = (mu[i] + rho * e.c[i]).max(0.0);
        }
        // complementarity: inactive constraints should carry no multiplier
        let comp = (0..m).map(|i| (mu[i] * e.c[i]).abs()).fold(0.0, f64::max);
        if viol <= opts.feas_tol
            && res.pg_norm <= opts.opt_tol.max(opts.inner.pg_tol)
            && comp <= opts.opt_tol
        {
            return AlResult {
                f: e.f,
                max_violation: viol,
                x,
                multipliers: mu,
                outer_iterations: outer,
                inner_iterations: inner_total,
                converged: true,
            };
        }
        if viol > 0.25 * prev_viol && viol > opts.feas_tol {
            rho = (rho * 10.0).min(opts.rho_max);
        }
        prev_viol = viol;
    }
    AlResult {
        x: best.2,
        f: best.1,
        max_violation: best.0,
        multipliers: mu,
        outer_iterations: opts.max_outer,
        inner_iterations: inner_total,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let opts = LbfgsOptions {
            max_iter: 2000,
            pg_tol: 1e-9,
            ..Default::default()
        };
        let r = minimize_box(rosen, &[-1.2, 1.0], &[-10.0, -10.0], &[10.0, 10.0], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn active_bound_is_respected() {
        // min (x-2)^2 + (y+1)^2 on [0,1]^2 -> (1, 0)
        let r = minimize_box(
            |x, g| {
                g[0] = 2.0 * (x[0] - 2.0);
                g[1] = 2.0 * (x[1] + 1.0);
                (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2)
            },
            &[0.5, 0.5],
            &[0.0, 0.0],
            &[1.0, 1.0],
            &LbfgsOptions::default(),
        );
        assert_eq!(r.x, vec![1.0, 0.0]);
        assert!(r.converged);
    }

    #[test]
    fn al_solves_small_qp() {
        // min x^2 + y^2  s.t. 1 - x - y <= 0  -> (0.5, 0.5)
        let opts = AlOptions {
            inner: LbfgsOptions {
                pg_tol: 1e-10,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = minimize_al(
            |x| ConstrainedEval {
                f: x[0] * x[0] + x[1] * x[1],
                grad: vec![2.0 * x[0], 2.0 * x[1]],
                c: vec![1.0 - x[0] - x[1]],
                jac: vec![vec![-1.0, -1.0]],
            },
            &[3.0, -2.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &opts,
        );
        assert!(r.converged);
        assert!((r.x[0] - 0.5).abs() < 1e-5 && (r.x[1] - 0.5).abs() < 1e-5);
        assert!((r.multipliers[0] - 1.0).abs() < 1e-4);
    }
}
