use ntil::oracle::{enumerate_optimal_plan, sinkhorn_emd, transport_emd, OracleError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(i: usize, j: usize) -> f64 {
    (i as f64 - j as f64).abs()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

#[test]
fn sinkhorn_converges_to_the_exact_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let p = random_distribution(&mut rng, 10);
        let q = random_distribution(&mut rng, 10);
        let exact = transport_emd(&p, &q).unwrap();
        let approx = match sinkhorn_emd(&p, &q, dist, 1e-3, 20_000) {
            Ok(outcome) => outcome.cost,
            // marginals not yet at 1e-9, but the rounded plan's cost has settled
            Err(OracleError::NotConverged { cost, .. }) => cost,
            Err(other) => panic!("{other}"),
        };
        assert!((approx - exact).abs() <= 1e-2, "{approx} vs {exact}");
    }
}

#[test]
fn sinkhorn_approaches_exact_as_regularization_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_distribution(&mut rng, 10);
    let q = random_distribution(&mut rng, 10);
    let exact = transport_emd(&p, &q).unwrap();
    let mut previous = f64::INFINITY;
    for reg in [1.0, 0.3, 0.1, 0.03] {
        let outcome = sinkhorn_emd(&p, &q, dist, reg, 20_000).unwrap();
        let gap = outcome.cost - exact;
        // row marginals are within 1e-9 and costs are at most 9
        assert!(gap >= -1e-8, "entropic plan beat the optimum by {gap} at reg {reg}");
        assert!(gap < previous, "gap {gap} did not shrink at reg {reg}");
        previous = gap;
    }
}

#[test]
fn sinkhorn_plan_has_the_requested_marginals() {
    let p = [0.1, 0.2, 0.3, 0.4];
    let q = [0.25; 4];
    let outcome = sinkhorn_emd(&p, &q, dist, 0.1, 10_000).unwrap();
    for (got, want) in outcome.plan.row_sums().iter().zip(p) {
        assert!((got - want).abs() <= 1e-9);
    }
    for (got, want) in outcome.plan.col_sums().iter().zip(q) {
        assert!((got - want).abs() <= 1e-8);
    }
}

#[test]
fn enumeration_agrees_with_the_cumulative_formula() {
    let cases: [(&[u32], &[u32]); 3] = [
        (&[8, 0, 0, 0], &[0, 0, 0, 8]),
        (&[2, 2, 2, 2], &[0, 4, 4, 0]),
        (&[1, 3, 0, 4], &[5, 0, 3, 0]),
    ];
    for (p, q) in cases {
        let plan = enumerate_optimal_plan(p, q, 8, dist).unwrap();
        let pf: Vec<f64> = p.iter().map(|&u| u as f64 / 8.0).collect();
        let qf: Vec<f64> = q.iter().map(|&u| u as f64 / 8.0).collect();
        assert!((plan.cost - transport_emd(&pf, &qf).unwrap()).abs() <= 1e-12);
    }
}
