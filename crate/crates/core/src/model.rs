//! Complete model state: VAE, conditional prior, causal layer, predictor.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::losses::{self, SupervisionKind};
use crate::nn::{Bound, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::scm::{AInit, ConceptHeads, Nonlinearity, ScmParams};
use crate::vae::{build_networks, Architecture, Decoder, Encoder, LatentLayout, NoiseConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub architecture: Architecture,
    pub z_dim: usize,
    /// Number of generative factors (supervised latent slots).
    pub m: usize,
    /// Number of concepts.
    pub concepts: usize,
    pub nonlinearity: Nonlinearity,
    pub supervision: SupervisionKind,
    pub a_init: AInit,
    pub variant: Variant,
    pub noise: NoiseConfig,
}

impl ModelConfig {
    pub fn layout(&self) -> Result<LatentLayout> {
        LatentLayout::new(self.z_dim, self.m)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        self.architecture.validate(self.image)?;
        self.noise.validate()?;
        if self.concepts == 0 || self.concepts > self.m {
            return Err(Error::config(format!(
                "concept count must be in 1..={} (the factor count), got {}",
                self.m, self.concepts
            )));
        }
        if self.variant.uses_scm() && self.noise.eps_std <= 0.0 {
            return Err(Error::config("the causal layer needs eps_std > 0"));
        }
        Ok(())
    }

    /// Noise actually used by this model's variant.
    pub fn effective_noise(&self) -> NoiseConfig {
        self.noise.effective(self.variant)
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Conditional prior `p(z_j | u) = N(prior_a_j·u_j + prior_b_j, 1)` on the
    /// first `m` slots, each `1 × m`.
    pub prior_a: ParamId,
    pub prior_b: ParamId,
    pub scm: ScmParams,
}

/// Pre-drawn noise for one batch, already scaled by the configured stds.
/// `posterior` is standard normal and gets scaled by the posterior std.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub posterior: Array2<f64>,
    pub zeta: Array2<f64>,
    pub xi: Array2<f64>,
    pub eps: Array2<f64>,
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros(shape);
    }
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

impl NoiseDraws {
    pub fn sample(config: &ModelConfig, batch: usize, rng: &mut impl Rng) -> Self {
        let noise = config.effective_noise();
        let eps_std = if config.variant.uses_scm() { noise.eps_std } else { 0.0 };
        Self {
            posterior: normal(rng, (batch, config.z_dim), 1.0),
            zeta: normal(rng, (batch, config.z_dim), noise.zeta_std),
            xi: normal(rng, (batch, config.image.pixels()), noise.xi_std),
            eps: normal(rng, (batch, config.concepts), eps_std),
        }
    }

    /// All-zero draws: the deterministic (mean) path.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        Self {
            posterior: Array2::zeros((batch, config.z_dim)),
            zeta: Array2::zeros((batch, config.z_dim)),
            xi: Array2::zeros((batch, config.image.pixels())),
            eps: Array2::zeros((batch, config.concepts)),
        }
    }
}

/// Tape handles produced by [`ModelState::forward`]. Loss terms that do not
/// apply to the variant or lack their inputs are `None`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub x_hat: Var,
    pub concepts: Option<Var>,
    pub probs: Option<Var>,
    pub recon: Var,
    pub kl_zc: Var,
    pub kl_eps: Option<Var>,
    pub l_u: Option<Var>,
    pub l_clf: Option<Var>,
    pub l_diversity: Option<Var>,
}

/// Result of [`ModelState::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: Array2<f64>,
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    /// Conditional prior mean on all `z_dim` slots, when labels were given to
    /// a label-conditioned variant.
    pub prior_mu: Option<Array2<f64>>,
}

const EVAL_CHUNK: usize = 256;

impl ModelState {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let mut store = ParamStore::new();
        let (encoder, decoder) = build_networks(&mut store, &config.architecture, config.image, layout, rng)?;
        let prior_a = store.add("prior.a", ParamGroup::Vae, Array2::ones((1, config.m)));
        let prior_b = store.add("prior.b", ParamGroup::Vae, Array2::zeros((1, config.m)));
        let a = config.a_init.matrix(config.m, config.concepts, rng)?;
        let scm = ScmParams::new(&mut store, config.m, config.concepts, a);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            prior_a,
            prior_b,
            scm,
        })
    }

    pub fn a(&self) -> &Array2<f64> {
        self.store.get(self.scm.a)
    }

    pub fn w(&self) -> Array1<f64> {
        self.store.get(self.scm.w).column(0).to_owned()
    }

    pub fn w0(&self) -> f64 {
        self.store.get(self.scm.w0)[[0, 0]]
    }

    pub fn heads(&self) -> ConceptHeads {
        let row = |id| self.store.get(id).row(0).to_owned();
        ConceptHeads {
            kind: self.config.nonlinearity,
            eta_a: row(self.scm.eta_a),
            eta_b: row(self.scm.eta_b),
            eps_mean: row(self.scm.eps_mean),
            eps_std: self.config.noise.eps_std,
        }
    }

    fn check_x(&self, x: &Array2<f64>) -> Result<()> {
        let px = self.config.image.pixels();
        if x.ncols() != px {
            return Err(Error::contract(format!("expected {px} pixels per image, got {}", x.ncols())));
        }
        Ok(())
    }

    fn check_u(&self, u: &Array2<f64>, rows: usize) -> Result<()> {
        if u.dim() != (rows, self.config.m) {
            return Err(Error::contract(format!(
                "labels must be {rows}x{}, got {:?}",
                self.config.m,
                u.dim()
            )));
        }
        Ok(())
    }

    /// Full forward pass on the tape. `u` (`batch × m`) and `y` (`batch × 1`)
    /// enable the terms that need them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        u: Option<Var>,
        y: Option<Var>,
        draws: &NoiseDraws,
    ) -> ForwardVars {
        let cfg = &self.config;
        let (m, zd) = (cfg.m, cfg.z_dim);
        let (mu, logvar) = self.encoder.forward(tape, p, x, zd);

        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let e = tape.leaf(draws.posterior.clone());
        let spread = tape.mul(std, e);
        let z = tape.add(mu, spread);
        let zeta = tape.leaf(draws.zeta.clone());
        let z = tape.add(z, zeta);

        let mean_img = self.decoder.forward(tape, p, z);
        let xi = tape.leaf(draws.xi.clone());
        let x_hat = tape.add(mean_img, xi);
        let recon = losses::recon(tape, x_hat, x);

        let label_u = if cfg.variant.uses_labels() { u } else { None };
        let prior_mu = label_u.map(|u| self.prior_mean(tape, p, u));
        let kl_zc = losses::kl_unit_var(tape, mu, logvar, prior_mu);

        let mut out = ForwardVars {
            mu,
            logvar,
            z,
            x_hat: mean_img,
            concepts: None,
            probs: None,
            recon,
            kl_zc,
            kl_eps: None,
            l_u: None,
            l_clf: None,
            l_diversity: None,
        };

        if cfg.variant.supervised() {
            if let Some(u) = u {
                let mu_m = tape.slice_cols(mu, 0, m);
                out.l_u = Some(losses::alignment(tape, mu_m, u));
            }
        }
        if cfg.variant.uses_scm() {
            let z_m = tape.slice_cols(z, 0, m);
            let eps = tape.leaf(draws.eps.clone());
            let c = self.scm.concepts(tape, p, cfg.nonlinearity, z_m, Some(eps));
            let logits = self.scm.logits(tape, p, c);
            let probs = tape.sigmoid(logits);
            let a = p.var(self.scm.a);
            out.concepts = Some(c);
            out.probs = Some(probs);
            out.kl_eps = Some(losses::kl_eps(tape, p.var(self.scm.eps_mean), cfg.noise.eps_std));
            out.l_diversity = Some(losses::diversity(tape, a));
            if let Some(u) = u {
                out.l_u = Some(losses::supervision(tape, a, c, z_m, u, cfg.supervision));
            }
            if let Some(y) = y {
                out.l_clf = Some(losses::classification(tape, probs, y));
            }
        }
        out
    }

    /// Conditional prior mean over all `z_dim` slots; free slots are zero.
    fn prior_mean(&self, tape: &mut Tape, p: &Bound, u: Var) -> Var {
        let rows = tape.value(u).nrows();
        let pm = tape.mul(u, p.var(self.prior_a));
        let pm = tape.add(pm, p.var(self.prior_b));
        let free = self.config.z_dim - self.config.m;
        if free == 0 {
            return pm;
        }
        let zeros = tape.leaf(Array2::zeros((rows, free)));
        tape.concat_cols(&[pm, zeros])
    }

    /// Posterior sample `z = mu + std·N(0,1) + zeta` for a batch of images.
    /// Labels only affect the returned prior statistics.
    pub fn encode(&self, x: &Array2<f64>, u: Option<&Array2<f64>>, rng: &mut impl Rng) -> Result<Encoded> {
        self.check_x(x)?;
        if let Some(u) = u {
            self.check_u(u, x.nrows())?;
        }
        let b = x.nrows();
        let noise = self.config.effective_noise();
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (mu, lv) = self.encoder.forward(&mut tape, &p, xv, self.config.z_dim);
        let mu = tape.value(mu).clone();
        let logvar = tape.value(lv).clone();
        let e = normal(rng, (b, self.config.z_dim), 1.0);
        let zeta = normal(rng, (b, self.config.z_dim), noise.zeta_std);
        let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * e) + zeta;
        let prior_mu = match u {
            Some(u) if self.config.variant.uses_labels() => {
                let uv = tape.leaf(u.clone());
                let pm = self.prior_mean(&mut tape, &p, uv);
                Some(tape.value(pm).clone())
            }
            _ => None,
        };
        Ok(Encoded {
            z,
            mu,
            logvar,
            prior_mu,
        })
    }

    /// Reconstruction `clamp(g(z) + xi, 0, 1)`.
    pub fn decode(&self, z: &Array2<f64>, rng: &mut impl Rng) -> Result<Array2<f64>> {
        if z.ncols() != self.config.z_dim {
            return Err(Error::contract(format!(
                "latent vectors must have {} entries, got {}",
                self.config.z_dim,
                z.ncols()
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let xh = self.decoder.forward(&mut tape, &p, zv);
        let xi = normal(rng, (z.nrows(), self.config.image.pixels()), self.config.effective_noise().xi_std);
        Ok((tape.value(xh) + &xi).mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Posterior means for many images, evaluated in chunks.
    pub fn posterior_means(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_x(x)?;
        let mut out = Array2::zeros((x.nrows(), self.config.z_dim));
        for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.nrows());
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let xv = tape.leaf(x.slice(s![start..end, ..]).to_owned());
            let (mu, _) = self.encoder.forward(&mut tape, &p, xv, self.config.z_dim);
            out.slice_mut(s![start..end, ..]).assign(tape.value(mu));
        }
        Ok(out)
    }

    /// Task probabilities from posterior means with the concept noise off.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let mu = self.posterior_means(x)?;
        Ok(self.predict_from_latents(&mu))
    }

    /// Task probabilities from latent vectors (`rows × z_dim`).
    pub fn predict_from_latents(&self, z: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let zm = tape.leaf(z.slice(s![.., ..self.config.m]).to_owned());
        let c = self.scm.concepts(&mut tape, &p, self.config.nonlinearity, zm, None);
        let logits = self.scm.logits(&mut tape, &p, c);
        let probs = tape.sigmoid(logits);
        tape.value(probs).index_axis(Axis(1), 0).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Activation;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            image: ImageShape {
                height: 2,
                width: 3,
                channels: 1,
            },
            architecture: Architecture::Mlp {
                encoder: vec![5],
                decoder: vec![5],
                activation: Activation::Elu,
            },
            z_dim: 4,
            m: 3,
            concepts: 3,
            nonlinearity: Nonlinearity::Tanh,
            supervision: SupervisionKind::Elementwise,
            a_init: AInit::default(),
            variant,
            noise: NoiseConfig::default(),
        }
    }

    #[test]
    fn encode_is_seeded_and_ignores_labels_for_unsupervised_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelState::new(tiny(Variant::NoisyBetaVae), &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 6), |(i, j)| ((i + j) % 3) as f64 / 2.0);
        let u = Array2::from_elem((3, 3), 0.5);
        let a = model.encode(&x, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = model.encode(&x, Some(&u), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        let sup = ModelState::new(tiny(Variant::Ours), &mut rng).unwrap();
        let e = sup.encode(&x, Some(&u), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let pm = e.prior_mu.unwrap();
        assert_eq!(pm.dim(), (3, 4));
        assert_eq!(pm[[0, 0]], 0.5);
        assert_eq!(pm[[0, 3]], 0.0);
    }

    #[test]
    fn shape_errors_are_contract_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelState::new(tiny(Variant::Ours), &mut rng).unwrap();
        assert!(matches!(model.encode(&Array2::zeros((1, 5)), None, &mut rng), Err(Error::Contract(_))));
        assert!(matches!(model.decode(&Array2::zeros((1, 3)), &mut rng), Err(Error::Contract(_))));
        let x = Array2::zeros((2, 6));
        assert!(matches!(model.encode(&x, Some(&Array2::zeros((2, 2))), &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn decode_is_clamped_and_deterministic_without_xi() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelState::new(tiny(Variant::BetaVae), &mut rng).unwrap();
        let z = Array2::from_shape_fn((4, 4), |(i, j)| i as f64 - j as f64);
        let a = model.decode(&z, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.decode(&z, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn causal_layer_requires_concept_noise() {
        let mut cfg = tiny(Variant::Ours);
        cfg.noise.eps_std = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny(Variant::Ours);
        cfg.concepts = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_controls_which_terms_exist() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::ALL {
            let model = ModelState::new(tiny(v), &mut rng).unwrap();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let x = tape.leaf(Array2::from_elem((2, 6), 0.3));
            let u = tape.leaf(Array2::from_elem((2, 3), 0.5));
            let y = tape.leaf(Array2::from_elem((2, 1), 1.0));
            let draws = NoiseDraws::sample(&model.config, 2, &mut rng);
            let f = model.forward(&mut tape, &p, x, Some(u), Some(y), &draws);
            assert_eq!(f.l_clf.is_some(), v.uses_scm(), "{v}");
            assert_eq!(f.l_u.is_some(), v.uses_labels(), "{v}");
            assert_eq!(f.kl_eps.is_some(), v.uses_scm(), "{v}");
        }
    }
}
