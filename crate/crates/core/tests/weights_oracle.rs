//! Dense log-barrier solve of the weighting program on tiny instances,
//! compared against the dual solver.

mod common;

use common::{frobenius, DenseOracle};
use netrecon::synth::stationary_fixture;
use netrecon::weights::{
    audit_constraints, solve_weights, SolveOptions, Tolerances, WeightProgram,
};

fn compare(seed: u64, tol: Tolerances) -> (f64, netrecon::weights::ConstraintAudit) {
    let w0 = stationary_fixture(6, 2, 2, 0.05, seed);
    let oracle = DenseOracle::new(&w0, &tol).solve(&w0.weights);
    let prog = WeightProgram::new(w0.graph.clone(), tol).unwrap();
    let (w, _) = solve_weights(&prog, &SolveOptions::default()).unwrap();
    (frobenius(&w.weights, &oracle), audit_constraints(&w, &tol))
}

#[test]
fn matches_dense_barrier_at_table_values() {
    for seed in 0..5 {
        let (d, _) = compare(seed, Tolerances::default());
        assert!(d < 1e-6, "seed {seed}: distance {d:.3e}");
    }
}

#[test]
fn matches_dense_barrier_with_binding_caps() {
    // tight firm bands and a binding squared self-weight cap
    let tol = Tolerances {
        delta: 0.02,
        epsilon: 0.05,
        eta1: 0.08,
        eta2: 0.004,
        eps0: 1e-6,
    };
    for seed in 0..5 {
        let (d, audit) = compare(seed, tol);
        assert!(d < 1e-6, "seed {seed}: distance {d:.3e}");
        assert!(
            audit.self_square > -1e-6 && audit.firm > -1e-6,
            "seed {seed}: caps not active {audit:?}"
        );
    }
}
