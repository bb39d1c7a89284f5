//! Helpers shared by the integration and acceptance test targets.
#![allow(dead_code)]

use ccd_core::datasets::ImageShape;
use ccd_core::losses::SupervisionKind;
use ccd_core::model::{ForwardVars, ModelConfig, ModelState, NoiseDraws};
use ccd_core::nn::{Activation, Tape, Var};
use ccd_core::scm::{AInit, Nonlinearity};
use ccd_core::vae::{Architecture, NoiseConfig, Variant};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TERMS: [&str; 6] = ["recon", "kl_eps", "kl_zc", "l_u", "l_clf", "l_diversity"];

/// Small dense model (well under 500 parameters) with every parameter
/// perturbed away from its structured initial value.
pub fn toy_model(variant: Variant, seed: u64) -> ModelState {
    let config = ModelConfig {
        image: ImageShape { height: 2, width: 3, channels: 1 },
        architecture: Architecture::Mlp { encoder: vec![6], decoder: vec![5], activation: Activation::Elu },
        z_dim: 4,
        m: 3,
        concepts: 3,
        nonlinearity: Nonlinearity::Tanh,
        supervision: SupervisionKind::Elementwise,
        a_init: AInit::Uniform { bound: 1.0 },
        variant,
        noise: NoiseConfig { zeta_std: 0.1, xi_std: 0.05, eps_std: 0.2 },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::new(config, &mut rng).unwrap();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = model.store.get_mut(id);
        p.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    model
}

pub struct ToyBatch {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
    pub y: Array2<f64>,
    pub draws: NoiseDraws,
}

pub fn toy_batch(model: &ModelState, rows: usize, seed: u64) -> ToyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = model.config.image.pixels();
    ToyBatch {
        x: Array2::from_shape_simple_fn((rows, px), || rng.gen_range(0.0..1.0)),
        u: Array2::from_shape_simple_fn((rows, model.config.m), || rng.gen_range(0.0..1.0)),
        y: Array2::from_shape_fn((rows, 1), |(i, _)| (i % 2) as f64),
        draws: NoiseDraws::sample(&model.config, rows, &mut rng),
    }
}

fn pick(f: &ForwardVars, term: &str) -> Var {
    match term {
        "recon" => Some(f.recon),
        "kl_eps" => f.kl_eps,
        "kl_zc" => Some(f.kl_zc),
        "l_u" => f.l_u,
        "l_clf" => f.l_clf,
        "l_diversity" => f.l_diversity,
        _ => None,
    }
    .unwrap_or_else(|| panic!("term {term} not produced"))
}

fn term_value(model: &ModelState, b: &ToyBatch, term: &str) -> f64 {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.leaf(b.x.clone());
    let u = tape.leaf(b.u.clone());
    let y = tape.leaf(b.y.clone());
    let f = model.forward(&mut tape, &p, x, Some(u), Some(y), &b.draws);
    tape.scalar(pick(&f, term))
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the tape gradient
/// of `term` over every parameter and central differences with step `h`.
pub fn gradient_error(model: &mut ModelState, b: &ToyBatch, term: &str, h: f64) -> f64 {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.leaf(b.x.clone());
    let u = tape.leaf(b.u.clone());
    let y = tape.leaf(b.y.clone());
    let f = model.forward(&mut tape, &p, x, Some(u), Some(y), &b.draws);
    let grads = tape.backward(pick(&f, term));

    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for id in ids {
        let shape = model.store.get(id).dim();
        let analytic = grads.get(p.var(id)).cloned().unwrap_or_else(|| Array2::zeros(shape));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id)[[r, c]];
                model.store.get_mut(id)[[r, c]] = orig + h;
                let up = term_value(model, b, term);
                model.store.get_mut(id)[[r, c]] = orig - h;
                let down = term_value(model, b, term);
                model.store.get_mut(id)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = analytic[[r, c]];
                diff += (g - fd) * (g - fd);
                na += g * g;
                nf += fd * fd;
            }
        }
    }
    let scale = na.sqrt().max(nf.sqrt());
    assert!(scale > 0.0, "{term} has an identically zero gradient");
    diff.sqrt() / scale
}
