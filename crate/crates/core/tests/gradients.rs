mod common;

use ccd_core::vae::Variant;
use common::{gradient_error, toy_batch, toy_model, TERMS};

#[test]
fn toy_model_is_small() {
    assert!(toy_model(Variant::Ours, 0).store.count() <= 500);
}

#[test]
fn every_loss_term_matches_central_differences() {
    for seed in 0..3 {
        let mut model = toy_model(Variant::Ours, seed);
        let batch = toy_batch(&model, 5, 100 + seed);
        for term in TERMS {
            let err = gradient_error(&mut model, &batch, term, 1e-5);
            assert!(err < 1e-4, "seed {seed}, {term}: relative error {err:e}");
        }
    }
}

#[test]
fn supervised_alignment_and_linear_heads_match_central_differences() {
    let mut model = toy_model(Variant::SupNoisyBetaVae, 7);
    let batch = toy_batch(&model, 4, 9);
    for term in ["recon", "kl_zc", "l_u"] {
        let err = gradient_error(&mut model, &batch, term, 1e-5);
        assert!(err < 1e-4, "{term}: relative error {err:e}");
    }
    let mut model = toy_model(Variant::Ours, 11);
    model.config.nonlinearity = ccd_core::scm::Nonlinearity::Linear;
    model.config.supervision = ccd_core::losses::SupervisionKind::InnerProduct;
    let batch = toy_batch(&model, 4, 12);
    for term in ["l_u", "l_clf"] {
        let err = gradient_error(&mut model, &batch, term, 1e-5);
        assert!(err < 1e-4, "{term}: relative error {err:e}");
    }
}
