use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{fit, FitConfig, GravityError, GravityParams};
use crate::ingest::{FirmPopulation, IOTable};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: Vec<Option<GravityParams>>,
    pub failures: Vec<(usize, String)>,
    pub mean: [f64; 3],
    /// Sample standard deviations of `(z, α, κ)`.
    pub std: [f64; 3],
    pub lambda_mean: Vec<f64>,
    pub lambda_std: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Refits on `n_replicates` firm subsamples of size `subsample` drawn
/// without replacement. Sizes are renormalized per replicate and the link
/// target is scaled to keep the mean degree.
pub fn bootstrap_fit(
    pop: &FirmPopulation,
    io: &IOTable,
    cfg: &FitConfig,
    n_replicates: usize,
    subsample: usize,
    seed: u64,
) -> Result<BootstrapSummary, GravityError> {
    if n_replicates < 2 {
        return Err(GravityError::BadConfig(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let n = pop.len();
    let take = subsample.clamp(2, n);
    let outcomes: Vec<Result<GravityParams, GravityError>> = par::map_range(n_replicates, |r| {
        let mut rng = rng::stream(seed, &[rng::tag("bootstrap"), r as u64]);
        let mut picked = index::sample(&mut rng, n, take).into_vec();
        picked.sort_unstable();
        let sub = pop
            .select(&picked)
            .and_then(|p| p.renormalized())
            .map_err(|e| GravityError::BadConfig(e.to_string()))?;
        let mut c = cfg.clone();
        c.target_links = cfg.target_links * take as f64 / n as f64;
        fit(&sub, io, &c).map(|(p, _)| p)
    });
    let mut failures = Vec::new();
    let replicates: Vec<Option<GravityParams>> = outcomes
        .into_iter()
        .enumerate()
        .map(|(r, o)| match o {
            Ok(p) => Some(p),
            Err(e) => {
                failures.push((r, e.to_string()));
                None
            }
        })
        .collect();
    let ok: Vec<&GravityParams> = replicates.iter().flatten().collect();
    if ok.is_empty() {
        return Err(GravityError::BadConfig(format!(
            "all {n_replicates} bootstrap replicates failed"
        )));
    }
    let col =
        |f: &dyn Fn(&GravityParams) -> f64| mean_std(&ok.iter().map(|p| f(p)).collect::<Vec<_>>());
    let (zm, zs) = col(&|p| p.z);
    let (am, as_) = col(&|p| p.alpha);
    let (km, ks) = col(&|p| p.kappa);
    let n_lambda = ok[0].lambda.len();
    let (lambda_mean, lambda_std) = (0..n_lambda).map(|q| col(&|p| p.lambda[q])).unzip();
    Ok(BootstrapSummary {
        replicates,
        failures,
        mean: [zm, am, km],
        std: [zs, as_, ks],
        lambda_mean,
        lambda_std,
    })
}
