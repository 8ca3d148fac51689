mod common;

use learnpanel::functionals::{decompose_t1, structural_functions, WeightedSumSpec, XkDistribution};
use learnpanel::model::ModelParams;
use learnpanel::simulate::MixtureSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Rejection draw from the truncated mixture, independent of the library sampler.
fn draw_xk<R: Rng>(m: &MixtureSpec, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut c = 0;
    let mut acc = m.weights[0];
    while u > acc && c + 1 < m.weights.len() {
        c += 1;
        acc += m.weights[c];
    }
    let sd = m.variances[c].sqrt();
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= m.truncation {
            return m.means[c] + sd * z;
        }
    }
}

#[test]
fn first_period_decomposition_matches_simulation() {
    let mix = MixtureSpec::default();
    let xk = XkDistribution::Truncated(mix.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..6 {
        let params = common::random_params(&mut rng);
        let o = &params.outcome;
        let path: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let spec = WeightedSumSpec::discounted(path.clone(), 0.9);
        let r = decompose_t1(&spec, o, &xk).unwrap();
        let draws = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let u_dist = Normal::new(0.0, o.sigma_u[0][0].sqrt()).unwrap();
        for _ in 0..draws {
            let x = draw_xk(&mix, &mut rng);
            let u = u_dist.sample(&mut rng);
            let s: f64 = (0..3)
                .map(|t| {
                    let d = path[t];
                    let e: f64 = StandardNormal.sample(&mut rng);
                    spec.weights[t] * (o.lambda_k[t][d] * x + o.lambda_u[t][d][0] * u + o.sigma2[t][d].sqrt() * e)
                })
                .sum();
            s1 += s;
            s2 += s * s;
        }
        let mean = s1 / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        let se = var * (2.0 / draws as f64).sqrt() * 1.5;
        assert!((var - r.total).abs() < 4.0 * se, "{var} vs {}", r.total);
        let load: f64 = (0..3).map(|t| spec.weights[t] * o.lambda_k[t][path[t]]).sum();
        let vx = common::truncated_mixture_variance(&mix.means, &mix.variances, &mix.weights, mix.truncation);
        assert!((r.v_known - load * load * vx).abs() < 1e-8);
    }
}

#[test]
fn quantile_function_matches_simulation() {
    let mix = MixtureSpec::default();
    let xk = XkDistribution::Truncated(mix.clone());
    let p = ModelParams::mc_design();
    let x = [1.0, 0.5, 1.0];
    let (t, d) = (1, 1);
    let sf = structural_functions(&x, t, d, &p.outcome, &xk).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let o = &p.outcome;
    let xb: f64 = x.iter().zip(&o.beta[t][d]).map(|(a, b)| a * b).sum();
    let su = (o.lambda_u[t][d][0].powi(2) * o.sigma_u[0][0]).sqrt();
    let mut draws: Vec<f64> = (0..400_000)
        .map(|_| {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            xb + o.lambda_k[t][d] * draw_xk(&mix, &mut rng) + su * z1 + o.sigma2[t][d].sqrt() * z2
        })
        .collect();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for alpha in [0.1, 0.5, 0.9] {
        let emp = draws[(alpha * draws.len() as f64) as usize];
        assert!((sf.s1(alpha).unwrap() - emp).abs() < 0.02, "alpha {alpha}: {} vs {emp}", sf.s1(alpha).unwrap());
    }
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((sf.s3() - mean).abs() < 0.01);
}

#[test]
fn truncated_quantiles_match_direct_cdf() {
    let mix = MixtureSpec::default();
    let xk = XkDistribution::Truncated(mix.clone());
    for alpha in [0.05, 0.25, 0.5, 0.75, 0.95] {
        let oracle = common::truncated_mixture_quantile(&mix.means, &mix.variances, &mix.weights, mix.truncation, alpha);
        assert!((xk.quantile(alpha).unwrap() - oracle).abs() < 1e-9);
    }
}
