//! Monte-Carlo and closed-form oracles for stochastic components.

mod common;

use std::collections::BTreeSet;

use ccd_core::evaluation::infer_task_edges;
use ccd_core::losses::{elbo_terms, GaussianStats};
use ccd_core::scm::{concepts, ConceptHeads, Nonlinearity};
use ccd_core::vae::Variant;
use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[test]
fn latent_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mu = array![[0.4, -1.0, 0.0]];
    let logvar = array![[-0.5, 0.3, -2.0]];
    let prior = array![[0.1, -0.2, 0.5]];
    let post = GaussianStats {
        mu: mu.clone(),
        logvar: logvar.clone(),
    };
    let x = Array2::zeros((1, 2));
    let (_, _, kl) = elbo_terms(&post, Some(&prior), &Array2::zeros((1, 1)), 1.0, &x, &x).unwrap();

    // E_q[log q(z) - log p(z)] with p = N(prior, I).
    let n = 400_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut s = 0.0;
        for j in 0..3 {
            let sd = (0.5 * logvar[[0, j]]).exp();
            let e = normal(&mut rng);
            let z = mu[[0, j]] + sd * e;
            let log_q = -0.5 * e * e - sd.ln();
            let log_p = -0.5 * (z - prior[[0, j]]).powi(2);
            s += log_q - log_p;
        }
        sum += s;
        sq += s * s;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((kl - mean).abs() < 4.0 * se, "closed form {kl}, monte carlo {mean} ± {se}");
}

#[test]
fn concept_noise_kl_matches_closed_form() {
    let post = GaussianStats {
        mu: Array2::zeros((1, 1)),
        logvar: Array2::zeros((1, 1)),
    };
    let eps_mean = array![[0.3, -0.1]];
    let x = Array2::zeros((1, 1));
    let (_, kl_eps, _) = elbo_terms(&post, None, &eps_mean, 0.5, &x, &x).unwrap();
    let expect: f64 = [0.3f64, -0.1]
        .iter()
        .map(|m| 0.5 * (m * m + 0.25 - 1.0 - 0.25f64.ln()))
        .sum();
    assert!((kl_eps - expect).abs() < 1e-12);
}

#[test]
fn encoder_sample_variance_includes_latent_noise() {
    let model = common::toy_model(Variant::NoisyBetaVae, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn((1, model.config.image.pixels()), |(_, j)| j as f64 / 6.0);
    let zeta = model.config.noise.zeta_std;
    let rows = 40_000;
    let xs = Array2::from_shape_fn((rows, x.ncols()), |(_, j)| x[[0, j]]);
    let enc = model.encode(&xs, None, &mut rng).unwrap();
    for d in 0..model.config.z_dim {
        let col = enc.z.column(d);
        let mean = col.mean().unwrap();
        let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let expect = enc.logvar[[0, d]].exp() + zeta * zeta;
        assert!((mean - enc.mu[[0, d]]).abs() < 4.0 * (expect / rows as f64).sqrt());
        assert!((var - expect).abs() < 0.04 * expect, "dim {d}: variance {var} vs {expect}");
    }

    let mut noiseless = common::toy_model(Variant::BetaVae, 3);
    noiseless.config.noise.zeta_std = 0.5;
    let enc = noiseless.encode(&xs, None, &mut rng).unwrap();
    let col = enc.z.column(0);
    let mean = col.mean().unwrap();
    let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
    let expect = enc.logvar[[0, 0]].exp();
    assert!((var - expect).abs() < 0.04 * expect, "noiseless variant added latent noise");
}

#[test]
fn concept_noise_has_configured_mean_and_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = array![[0.5, -1.0], [0.2, 0.3], [0.0, 0.7]];
    let heads = ConceptHeads {
        kind: Nonlinearity::Tanh,
        eta_a: array![1.2, 0.8],
        eta_b: array![0.1, -0.2],
        eps_mean: array![0.25, -0.4],
        eps_std: 0.3,
    };
    let z = array![0.3, -0.6, 1.1];
    let clean = concepts(a.view(), &heads, z.view(), &mut rng, false).unwrap();
    let s = z.dot(&a);
    for i in 0..2 {
        let expect = (heads.eta_a[i] * s[i] + heads.eta_b[i]).tanh() + heads.eps_mean[i];
        assert!((clean[i] - expect).abs() < 1e-12);
    }
    let n = 50_000;
    let draws: Vec<Array1<f64>> = (0..n)
        .map(|_| concepts(a.view(), &heads, z.view(), &mut rng, true).unwrap())
        .collect();
    for i in 0..2 {
        let mean = draws.iter().map(|c| c[i]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - clean[i]).abs() < 4.0 * 0.3 / (n as f64).sqrt());
        assert!((var.sqrt() - 0.3).abs() < 0.01);
    }
}

#[test]
fn random_causal_column_recovers_k_over_m_on_average() {
    // With exchangeable weights the top-k set is a uniform k-subset, so the
    // expected fraction of true factors recovered is k/m.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = 6;
    for k in [2usize, 3] {
        let trials = 20_000;
        let mut recovered = 0.0;
        for _ in 0..trials {
            let a = Array2::from_shape_fn((m, 1), |_| rng.gen_range(-1.0..1.0));
            let mut f: Vec<usize> = (0..m).collect();
            f.shuffle(&mut rng);
            let truth: BTreeSet<usize> = f[..k].iter().copied().collect();
            // margin 0 disables the extra false-positive rule
            let r = infer_task_edges("r", array![1.0].view(), &a, &truth, None, 0.0).unwrap();
            recovered += r.tp as f64 / k as f64;
        }
        let mean = recovered / trials as f64;
        let expect = k as f64 / m as f64;
        assert!((mean - expect).abs() < 0.01, "k={k}: {mean} vs {expect}");
    }
}
