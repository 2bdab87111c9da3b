use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{Evaluator, GravityError, GravityParams, ParamBounds};
use crate::ingest::{FirmPopulation, IOTable};
use crate::optim::{minimize_al, AlOptions, ConstrainedEval, LbfgsOptions};

/// Small tie-break terms added to the fit objective. The link and band
/// moments alone leave `κ` and the `λ` level unidentified, since any
/// `λ_kl S_kl^κ` product can be rewritten with another `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Penalties {
    /// Weight on `Σ_l r_l^2`, `r_l` the relative inflow error.
    pub centering: f64,
    /// Weight on the mean of `(log λ)^2`.
    pub lambda_ridge: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            centering: 1e-2,
            lambda_ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub target_links: f64,
    pub sector_tol: f64,
    /// Size bins per sector; `None` or zero evaluates exactly.
    pub bins: Option<usize>,
    pub max_iterations: usize,
    pub max_inner_iterations: usize,
    pub opt_tol: f64,
    pub feas_tol: f64,
    pub seed: u64,
    pub bounds: ParamBounds,
    pub penalties: Penalties,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            target_links: 0.0,
            sector_tol: 0.05,
            bins: None,
            max_iterations: 30,
            max_inner_iterations: 400,
            opt_tol: 1e-6,
            feas_tol: 1e-6,
            seed: 0,
            bounds: ParamBounds::default(),
            penalties: Penalties::default(),
        }
    }
}

impl FitConfig {
    pub fn new(target_links: f64) -> Self {
        Self {
            target_links,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), GravityError> {
        if !(self.target_links > 0.0) {
            return Err(GravityError::BadTarget(self.target_links));
        }
        if !(self.sector_tol > 0.0) {
            return Err(GravityError::BadConfig(format!(
                "sector_tol must be positive, got {}",
                self.sector_tol
            )));
        }
        let b = &self.bounds;
        let ok = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !(ok(b.z)
            && ok(b.alpha)
            && ok(b.kappa)
            && ok(b.lambda)
            && b.z.0 > 0.0
            && b.lambda.0 > 0.0)
        {
            return Err(GravityError::BadConfig(
                "parameter bounds must be finite, ordered and positive".into(),
            ));
        }
        if !(b.alpha.0 > 0.0 && b.alpha.1 < 1.0 && b.kappa.0 > 0.0 && b.kappa.1 < 1.0) {
            return Err(GravityError::BadConfig(
                "alpha and kappa bounds must lie inside (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub status: FitStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// `(Σp - n_d)^2`
    pub objective: f64,
    pub expected_links: f64,
    pub target_links: f64,
    pub max_violation: f64,
    pub worst_sector: usize,
    pub violations: Vec<f64>,
    pub binned: bool,
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn bisect_z(ev: &Evaluator, params: &mut GravityParams, target: f64) -> Result<(), GravityError> {
    let (zlo, zhi) = params.bounds.z;
    let at = |p: &mut GravityParams, z: f64| -> Result<f64, GravityError> {
        p.z = z;
        ev.links(p)
    };
    let f_lo = at(params, zlo)?;
    let f_hi = at(params, zhi)?;
    if !(f_lo <= target && f_hi >= target) {
        return Err(GravityError::BisectionFailed {
            lo: zlo,
            hi: zhi,
            target,
            at_lo: f_lo,
            at_hi: f_hi,
        });
    }
    let (mut a, mut b) = (zlo.ln(), zhi.ln());
    let mut z = zlo;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        z = mid.exp();
        let f = at(params, z)?;
        if (f - target).abs() <= 1e-12 * target || b - a < 1e-15 {
            break;
        }
        if f < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    params.z = z;
    Ok(())
}

fn warm_start_with(
    ev: &Evaluator,
    io: &IOTable,
    cfg: &FitConfig,
) -> Result<GravityParams, GravityError> {
    cfg.validate()?;
    let mut params = GravityParams::uniform(io, 1.0, 0.5, 0.5);
    params.bounds = cfg.bounds;
    params.clamp_to_bounds();
    let s = ev.sector_sizes();
    let s_total: f64 = s.iter().sum();
    for _ in 0..50 {
        bisect_z(ev, &mut params, cfg.target_links)?;
        let mo = ev.moments(&params)?;
        let total: f64 = mo.inflow.iter().sum();
        if total <= 0.0 {
            break;
        }
        let ratio: Vec<f64> = (0..s.len())
            .map(|l| {
                let cur = mo.inflow[l] / total;
                let tgt = s[l] / s_total;
                if cur > 0.0 && tgt > 0.0 {
                    tgt / cur
                } else {
                    1.0
                }
            })
            .collect();
        if ratio.iter().all(|r| (r - 1.0).abs() < 1e-4) {
            break;
        }
        for (p, &(_, l)) in params.pairs.iter().enumerate() {
            params.lambda[p] *= ratio[l];
        }
        params.clamp_to_bounds();
    }
    bisect_z(ev, &mut params, cfg.target_links)?;
    Ok(params)
}

/// Starting point: `α = κ = 0.5`, `λ` raked column by column until the
/// implied inflow shares match the sector-size shares, `z` bisected so the
/// expected link count hits the target.
pub fn warm_start(
    pop: &FirmPopulation,
    io: &IOTable,
    cfg: &FitConfig,
) -> Result<GravityParams, GravityError> {
    if pop.len() < 2 {
        return Err(GravityError::TooFewFirms(pop.len()));
    }
    warm_start_with(&Evaluator::new(pop, io, cfg.bins), io, cfg)
}

/// Sectors with firms that no active sector pair can ever feed.
fn structurally_infeasible(ev: &Evaluator, pop: &FirmPopulation) -> Option<usize> {
    let mut fed = vec![false; ev.n_sectors()];
    let mut present = vec![false; ev.n_sectors()];
    for f in pop.firms() {
        present[f.sector] = true;
    }
    for &(k, l) in ev.pairs() {
        if present[k]
            && (k != l
                || pop
                    .firms()
                    .iter()
                    .filter(|f| f.sector == k)
                    .nth(1)
                    .is_some())
        {
            fed[l] = true;
        }
    }
    (0..ev.n_sectors()).find(|&l| ev.sector_sizes()[l] > 0.0 && !fed[l])
}

pub fn fit(
    pop: &FirmPopulation,
    io: &IOTable,
    cfg: &FitConfig,
) -> Result<(GravityParams, FitReport), GravityError> {
    let start = Instant::now();
    cfg.validate()?;
    if pop.len() < 2 {
        return Err(GravityError::TooFewFirms(pop.len()));
    }
    let ev = Evaluator::new(pop, io, cfg.bins);
    if let Some(sector) = structurally_infeasible(&ev, pop) {
        return Err(GravityError::Infeasible {
            sector,
            violation: 1.0,
        });
    }
    let init = warm_start_with(&ev, io, cfg)?;
    fit_from(&ev, init, cfg, start)
}

pub(crate) fn fit_from(
    ev: &Evaluator,
    init: GravityParams,
    cfg: &FitConfig,
    start: Instant,
) -> Result<(GravityParams, FitReport), GravityError> {
    let s = ev.sector_sizes().to_vec();
    let live: Vec<usize> = (0..s.len()).filter(|&l| s[l] > 0.0).collect();
    let nd = cfg.target_links;
    let eps = cfg.sector_tol;
    let pen = cfg.penalties;
    let n_lambda = init.lambda.len().max(1) as f64;
    let (lo, hi) = init.theta_bounds();
    let mut failure: Option<GravityError> = None;

    let eval = |theta: &[f64]| -> ConstrainedEval {
        let params = init.with_theta(theta);
        let mo = match ev.moments(&params) {
            Ok(m) => m,
            Err(e) => {
                failure.get_or_insert(e);
                return ConstrainedEval {
                    f: f64::NAN,
                    grad: vec![0.0; theta.len()],
                    c: vec![0.0; 2 * live.len()],
                    jac: vec![vec![0.0; theta.len()]; 2 * live.len()],
                };
            }
        };
        let gap = (mo.links - nd) / nd;
        let mut f = gap * gap;
        let mut grad: Vec<f64> = mo.d_links.iter().map(|g| 2.0 * gap * g / nd).collect();
        let mut c = Vec::with_capacity(2 * live.len());
        let mut jac = Vec::with_capacity(2 * live.len());
        for &l in &live {
            let r = (mo.inflow[l] - s[l]) / s[l];
            let dr: Vec<f64> = mo.d_inflow[l].iter().map(|g| g / s[l]).collect();
            f += pen.centering * r * r;
            for (g, d) in grad.iter_mut().zip(&dr) {
                *g += 2.0 * pen.centering * r * d;
            }
            c.push(r - eps);
            c.push(-r - eps);
            jac.push(dr.clone());
            jac.push(dr.iter().map(|d| -d).collect());
        }
        for (t, g) in theta[3..].iter().zip(&mut grad[3..]) {
            f += pen.lambda_ridge * t * t / n_lambda;
            *g += 2.0 * pen.lambda_ridge * t / n_lambda;
        }
        ConstrainedEval { f, grad, c, jac }
    };
    let opts = AlOptions {
        inner: LbfgsOptions {
            max_iter: cfg.max_inner_iterations,
            pg_tol: cfg.opt_tol,
            ..Default::default()
        },
        max_outer: cfg.max_iterations.max(1),
        feas_tol: cfg.feas_tol,
        opt_tol: cfg.opt_tol,
        ..Default::default()
    };
    let res = minimize_al(eval, &init.to_theta(), &lo, &hi, &opts);
    if let Some(e) = failure {
        return Err(e);
    }
    let params = init.with_theta(&res.x);
    let e = evaluate(ev, &params, nd)?;
    let (worst_sector, max_violation) = e.violations.iter().enumerate().fold(
        (0, 0.0),
        |acc, (l, &v)| if v > acc.1 { (l, v) } else { acc },
    );
    if max_violation > eps * (1.0 + 1e-6) + cfg.feas_tol {
        return Err(GravityError::Infeasible {
            sector: worst_sector,
            violation: max_violation,
        });
    }
    let report = FitReport {
        status: if res.converged {
            FitStatus::Converged
        } else {
            FitStatus::MaxIterations
        },
        outer_iterations: res.outer_iterations,
        inner_iterations: res.inner_iterations,
        objective: e.objective,
        expected_links: e.moments.links,
        target_links: nd,
        max_violation,
        worst_sector,
        violations: e.violations,
        binned: ev.is_binned(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
