//! Logistic-gravity link model: `x_ij = z λ_kl S_kl^κ (m_i m_j)^α`,
//! `p_ij = x_ij / (1 + x_ij)`, fitted to a target link count under
//! sector-inflow bands.

mod bins;
mod bootstrap;
mod eval;
mod fit;

pub use bins::{Bin, BinSummary, SectorIndex};
pub use bootstrap::{bootstrap_fit, BootstrapSummary};
pub use eval::{objective_and_constraints, BlockSums, Evaluation, Evaluator, Moments};
pub use fit::{fit, warm_start, FitConfig, FitReport, FitStatus, Penalties};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::IOTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GravityError {
    #[error("no lambda for active sector pair ({k}, {l})")]
    MissingLambda { k: usize, l: usize },
    #[error("target link count must be positive, got {0}")]
    BadTarget(f64),
    #[error("no z in [{lo}, {hi}] brackets the target of {target} links (range gives {at_lo} to {at_hi})")]
    BisectionFailed {
        lo: f64,
        hi: f64,
        target: f64,
        at_lo: f64,
        at_hi: f64,
    },
    #[error("sector bands cannot be met; worst sector {sector} off by {violation} relative")]
    Infeasible { sector: usize, violation: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("population has {0} firms; need at least 2")]
    TooFewFirms(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub z: (f64, f64),
    pub alpha: (f64, f64),
    pub kappa: (f64, f64),
    pub lambda: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            z: (1e-8, 1e4),
            alpha: (0.05, 0.95),
            kappa: (0.01, 0.99),
            lambda: (1e-6, 1e3),
        }
    }
}

/// Gravity parameters. `lambda[p]` belongs to `pairs[p]`, the sector pairs
/// with positive flow in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub z: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub pairs: Vec<(usize, usize)>,
    pub lambda: Vec<f64>,
    pub bounds: ParamBounds,
}

impl GravityParams {
    /// All-ones lambda over the active pairs of `io`.
    pub fn uniform(io: &IOTable, z: f64, alpha: f64, kappa: f64) -> Self {
        let pairs = io.active_pairs();
        let lambda = vec![1.0; pairs.len()];
        Self {
            z,
            alpha,
            kappa,
            pairs,
            lambda,
            bounds: ParamBounds::default(),
        }
    }

    pub fn lambda_of(&self, k: usize, l: usize) -> Option<f64> {
        self.pairs
            .binary_search(&(k, l))
            .ok()
            .map(|p| self.lambda[p])
    }

    pub fn dim(&self) -> usize {
        3 + self.lambda.len()
    }

    /// Optimization coordinates `[log z, α, κ, log λ...]`.
    pub fn to_theta(&self) -> Vec<f64> {
        let mut t = vec![self.z.ln(), self.alpha, self.kappa];
        t.extend(self.lambda.iter().map(|l| l.ln()));
        t
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        Self {
            z: theta[0].exp(),
            alpha: theta[1],
            kappa: theta[2],
            pairs: self.pairs.clone(),
            lambda: theta[3..].iter().map(|l| l.exp()).collect(),
            bounds: self.bounds,
        }
    }

    /// Box for the optimization coordinates.
    pub fn theta_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = &self.bounds;
        let mut lo = vec![b.z.0.ln(), b.alpha.0, b.kappa.0];
        let mut hi = vec![b.z.1.ln(), b.alpha.1, b.kappa.1];
        lo.extend(std::iter::repeat_n(b.lambda.0.ln(), self.lambda.len()));
        hi.extend(std::iter::repeat_n(b.lambda.1.ln(), self.lambda.len()));
        (lo, hi)
    }

    pub fn clamp_to_bounds(&mut self) {
        let b = self.bounds;
        self.z = self.z.clamp(b.z.0, b.z.1);
        self.alpha = self.alpha.clamp(b.alpha.0, b.alpha.1);
        self.kappa = self.kappa.clamp(b.kappa.0, b.kappa.1);
        for l in &mut self.lambda {
            *l = l.clamp(b.lambda.0, b.lambda.1);
        }
    }
}

/// Gravity intensity for a firm pair in sectors `(k, l)`.
pub fn intensity(
    m_i: f64,
    m_j: f64,
    k: usize,
    l: usize,
    params: &GravityParams,
    io: &IOTable,
) -> Result<f64, GravityError> {
    let s = io.s(k, l);
    if s == 0.0 {
        return Ok(0.0);
    }
    let lambda = params
        .lambda_of(k, l)
        .ok_or(GravityError::MissingLambda { k, l })?;
    Ok(params.z * lambda * s.powf(params.kappa) * (m_i * m_j).powf(params.alpha))
}

pub fn link_probability(x: f64) -> f64 {
    x / (1.0 + x)
}

/// `p_ij` for every ordered firm pair (zero diagonal), row-major. Quadratic
/// in the number of firms; meant for small fixtures and oracles.
pub fn probability_matrix(
    pop: &crate::ingest::FirmPopulation,
    io: &IOTable,
    params: &GravityParams,
) -> Result<Vec<f64>, GravityError> {
    let f = pop.firms();
    let n = f.len();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = intensity(f[i].size, f[j].size, f[i].sector, f[j].sector, params, io)?;
                p[i * n + j] = link_probability(x);
            }
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn io2() -> IOTable {
        IOTable::new(
            vec!["a".into(), "b".into()],
            vec![vec![4.0, 2.0], vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn forbidden_pair_has_zero_intensity() {
        let io = io2();
        let p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        assert_eq!(intensity(1.0, 1.0, 1, 0, &p, &io).unwrap(), 0.0);
    }

    #[test]
    fn unit_case() {
        let io = io2();
        let p = GravityParams::uniform(&io, 1.0, 0.5, 0.7);
        let x = intensity(1.0, 1.0, 0, 0, &p, &io).unwrap();
        assert_eq!(x, 1.0);
        assert_eq!(link_probability(x), 0.5);
    }

    #[test]
    fn table_point_values() {
        let io = io2();
        let p = GravityParams::uniform(&io, 0.30, 0.44, 0.32);
        let x = intensity(1.0, 1.0, 0, 0, &p, &io).unwrap();
        assert!((x - 0.30).abs() < 1e-15);
        assert!((link_probability(x) - 0.30 / 1.30).abs() < 1e-15);
        assert!((link_probability(x) - 0.230769).abs() < 1e-6);
    }

    #[test]
    fn link_probability_values() {
        assert_eq!(link_probability(0.0), 0.0);
        assert_eq!(link_probability(1.0), 0.5);
        assert_eq!(link_probability(3.0), 0.75);
    }

    #[test]
    fn missing_lambda_reported() {
        let io = io2();
        let mut p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        p.pairs.remove(0);
        p.lambda.remove(0);
        assert_eq!(
            intensity(1.0, 1.0, 0, 0, &p, &io),
            Err(GravityError::MissingLambda { k: 0, l: 0 })
        );
    }

    #[test]
    fn theta_round_trip() {
        let io = io2();
        let mut p = GravityParams::uniform(&io, 0.3, 0.44, 0.32);
        p.lambda = vec![0.5, 2.0, 1e-3];
        let q = p.with_theta(&p.to_theta());
        assert!((q.z - p.z).abs() < 1e-15);
        for (a, b) in q.lambda.iter().zip(&p.lambda) {
            assert!((a - b).abs() < 1e-15 * b.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn probability_is_monotone(
            z in 1e-3f64..10.0, lam in 1e-3f64..10.0, mi in 1e-4f64..1.0, mj in 1e-4f64..1.0,
            alpha in 0.05f64..0.95, kappa in 0.01f64..0.99, bump in 1.01f64..2.0,
        ) {
            let io = io2();
            let mut p = GravityParams::uniform(&io, z, alpha, kappa);
            p.lambda[1] = lam;
            let base = link_probability(intensity(mi, mj, 0, 1, &p, &io).unwrap());
            let mut pz = p.clone();
            pz.z *= bump;
            prop_assert!(link_probability(intensity(mi, mj, 0, 1, &pz, &io).unwrap()) > base);
            let mut pl = p.clone();
            pl.lambda[1] *= bump;
            prop_assert!(link_probability(intensity(mi, mj, 0, 1, &pl, &io).unwrap()) > base);
            prop_assert!(link_probability(intensity(mi * bump, mj, 0, 1, &p, &io).unwrap()) > base);
            prop_assert!(base < 1.0);
        }

        #[test]
        fn theta_never_maps_to_nonpositive(theta in proptest::collection::vec(-30.0f64..8.0, 6)) {
            let io = io2();
            let p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
            let mut t = theta.clone();
            t[1] = 0.5;
            t[2] = 0.5;
            let q = p.with_theta(&t);
            prop_assert!(q.z > 0.0);
            prop_assert!(q.lambda.iter().all(|&l| l > 0.0));
        }
    }
}
