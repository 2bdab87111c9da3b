mod common;

use common::factory_fixture as fixture;
use netrecon::factory::{allocate, FactoryGraph};
use netrecon::WeightedNetwork;

fn sector_totals_from(w: &WeightedNetwork, fg: &FactoryGraph) -> Vec<f64> {
    let agg = WeightedNetwork::new(w.graph.clone(), fg.aggregate(w));
    agg.sector_totals()
}

#[test]
fn aggregation_is_exact_over_seeds() {
    for seed in 0..100 {
        let (w, table) = fixture(seed);
        let fg = allocate(&w, &table, 500.0, seed).unwrap();
        let agg = fg.aggregate(&w);
        for (k, (a, b)) in agg.iter().zip(&w.weights).enumerate() {
            assert!((a - b).abs() <= 1e-12, "seed {seed} edge {k}: {a} vs {b}");
        }
        for e in &fg.edges {
            let (i, j) = (fg.layout.firm_of[e.src], fg.layout.firm_of[e.dst]);
            assert_ne!(i, j, "intra-firm factory edge");
            assert!(w.graph.has_edge(i, j), "edge between unlinked firms");
            assert_eq!(w.graph.edges()[e.firm_edge], (i, j));
        }
        // every factory of a firm with outgoing links sends something
        let out = fg.out_degrees();
        for (a, &d) in out.iter().enumerate() {
            assert!(d >= 1, "seed {seed}: factory {a} idle");
        }
        for (x, y) in sector_totals_from(&w, &fg).iter().zip(w.sector_totals()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn allocation_is_deterministic_per_seed() {
    let (w, table) = fixture(4);
    assert_eq!(
        allocate(&w, &table, 300.0, 11).unwrap(),
        allocate(&w, &table, 300.0, 11).unwrap()
    );
}

#[test]
fn smaller_tau_gives_more_local_links() {
    let taus = [50.0, 200.0, 1000.0];
    let mut means = [0.0; 3];
    for seed in 0..100 {
        let (w, table) = fixture(seed);
        for (m, &tau) in means.iter_mut().zip(&taus) {
            *m += allocate(&w, &table, tau, seed).unwrap().mean_distance() / 100.0;
        }
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}
