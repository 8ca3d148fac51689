mod common;

use learnpanel::likelihood::{complete_loglik, loglik_matrix, observed_loglik};
use learnpanel::model::{posterior_closed_form, posterior_path, ModelParams};
use learnpanel::simulate::{simulate_panel, DgpConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dgp_for(params: &ModelParams, seed: u64) -> DgpConfig {
    DgpConfig { outcome: params.outcome.clone(), choice: params.choice, seed, ..DgpConfig::default() }
}

#[test]
fn closed_form_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..8 {
        let params = common::random_params(&mut rng);
        let sim = simulate_panel(&dgp_for(&params, 70 + i), 1).unwrap();
        let h = &sim.data.individuals[0];
        let xk: f64 = rng.random_range(-2.0..2.0);
        let oracle = common::complete_loglik_quadrature(h, xk, &params);
        let lib = complete_loglik(h, xk, &params.outcome, &params.choice).unwrap();
        assert!((oracle - lib).abs() < 1e-9, "instance {i}: {oracle} vs {lib}");
    }
}

#[test]
fn beliefs_match_grid_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10 {
        let params = common::random_params(&mut rng);
        let o = &params.outcome;
        let sim = simulate_panel(&dgp_for(&params, 80 + i), 1).unwrap();
        let h = &sim.data.individuals[0];
        let xk: f64 = rng.random_range(-2.0..2.0);
        let path = posterior_path(h, xk, o).unwrap();
        let mut seen = Vec::new();
        for t in 0..=h.len() {
            let (m, v) = common::grid_bayes(0.0, o.sigma_u[0][0], &seen);
            assert!((path[t].mu[0] - m).abs() < 1e-8, "mean at {t}");
            assert!((path[t].sigma[(0, 0)] - v).abs() < 1e-8, "variance at {t}");
            if t < h.len() {
                let ob = &h[t];
                let a = o.known_mean(&ob.x, t, ob.d, xk);
                seen.push((ob.y, a, o.lambda_u[t][ob.d][0], o.sigma2[t][ob.d]));
            }
        }
        let direct = posterior_closed_form(h, xk, o).unwrap();
        assert!((direct.mu[0] - path[h.len()].mu[0]).abs() < 1e-12);
    }
}

#[test]
fn matrix_rows_agree_with_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = common::random_params(&mut rng);
    let sim = simulate_panel(&dgp_for(&params, 90), 25).unwrap();
    let grid = [-1.7, -0.3, 0.0, 0.8, 2.2];
    let l = loglik_matrix(&sim.data, &grid, &params.outcome, &params.choice).unwrap();
    for (i, h) in sim.data.individuals.iter().enumerate() {
        for (s, &x) in grid.iter().enumerate() {
            let direct = complete_loglik(h, x, &params.outcome, &params.choice).unwrap();
            assert!((l.row_shift[i] + l.row(i)[s] - direct).abs() < 1e-10);
        }
    }
    // A point mass reproduces the complete likelihood summed over people.
    let mut w = vec![0.0; grid.len()];
    w[3] = 1.0;
    let total: f64 = sim.data.individuals.iter().map(|h| complete_loglik(h, 0.8, &params.outcome, &params.choice).unwrap()).sum();
    let obs = observed_loglik(&sim.data, &grid, &w, &params.outcome, &params.choice).unwrap();
    assert!((obs - total).abs() < 1e-8);
}

#[test]
fn choice_free_part_is_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = common::random_params(&mut rng);
    params.choice.rho = 0.0;
    let o = &params.outcome;
    let sim = simulate_panel(&dgp_for(&params, 100), 5).unwrap();
    for h in &sim.data.individuals {
        let xk = 0.4;
        let y: Vec<f64> = h.iter().map(|ob| ob.y).collect();
        let m: Vec<f64> = h.iter().enumerate().map(|(t, ob)| o.known_mean(&ob.x, t, ob.d, xk)).collect();
        let v: Vec<Vec<f64>> = (0..h.len())
            .map(|a| {
                (0..h.len())
                    .map(|b| {
                        let cov = o.lambda_u[a][h[a].d][0] * o.lambda_u[b][h[b].d][0] * o.sigma_u[0][0];
                        if a == b { cov + o.sigma2[a][h[a].d] } else { cov }
                    })
                    .collect()
            })
            .collect();
        let oracle = common::gaussian_logpdf(&y, &m, &v).unwrap() + h.len() as f64 * 0.5f64.ln();
        let lib = complete_loglik(h, xk, o, &params.choice).unwrap();
        assert!((oracle - lib).abs() < 1e-10);
    }
}
