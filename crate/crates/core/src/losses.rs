//! Training objectives.
//!
//! Every term is built on a [`Tape`] so the training step and the plain-array
//! helpers below share one implementation. Batch terms are averaged over the
//! batch rows.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Tape, Var};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        alpha: 0.0,
        beta1: 0.0,
        beta2: 0.0,
        delta: 0.0,
        gamma: 0.0,
    };

    pub fn dsprites() -> Self {
        Self {
            alpha: 0.5,
            beta1: 1.0,
            beta2: 0.6,
            delta: 0.5,
            gamma: 0.5,
        }
    }

    pub fn shapes3d() -> Self {
        Self {
            alpha: 0.5,
            beta1: 0.8,
            beta2: 0.8,
            delta: 0.8,
            gamma: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta1, self.beta2, self.delta, self.gamma];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Unweighted loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl_eps: f64,
    pub kl_zc: f64,
    pub l_u: f64,
    pub l_clf: f64,
    pub l_diversity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_eps: f64,
    pub kl_zc: f64,
    pub l_u: f64,
    pub l_clf: f64,
    pub l_diversity: f64,
    pub total: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("kl_eps", self.kl_eps),
            ("kl_zc", self.kl_zc),
            ("l_u", self.l_u),
            ("l_clf", self.l_clf),
            ("l_diversity", self.l_diversity),
        ]
    }
}

/// Weighted combination of `terms`. Fails with [`Error::Numerical`] naming the
/// first non-finite term, or `total` if only the sum overflows.
pub fn total_loss(terms: LossTerms, w: LossWeights) -> Result<LossBreakdown> {
    if let Some((name, _)) = terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical { term: name.into() });
    }
    let total = terms.recon
        + w.beta1 * terms.kl_eps
        + w.beta2 * terms.kl_zc
        + w.alpha * terms.l_u
        + w.delta * terms.l_clf
        + w.gamma * terms.l_diversity;
    if !total.is_finite() {
        return Err(Error::Numerical { term: "total".into() });
    }
    Ok(LossBreakdown {
        recon: terms.recon,
        kl_eps: terms.kl_eps,
        kl_zc: terms.kl_zc,
        l_u: terms.l_u,
        l_clf: terms.l_clf,
        l_diversity: terms.l_diversity,
        total,
    })
}

/// How the supervision loss compares the back-mapped concepts with `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionKind {
    /// `Σ_j (σ(u_j·b_j) − σ(u_j·z_j))²`.
    #[default]
    Elementwise,
    /// `(σ(u·b) − σ(u·z))²` with inner products.
    InnerProduct,
}

fn batch_mean(tape: &mut Tape, per_elem: Var) -> Var {
    let rows = tape.value(per_elem).nrows();
    let s = tape.sum_all(per_elem);
    tape.scale(s, 1.0 / rows as f64)
}

/// Squared error summed over pixels, averaged over the batch.
pub fn recon(tape: &mut Tape, x_hat: Var, x: Var) -> Var {
    let d = tape.sub(x_hat, x);
    let sq = tape.square(d);
    batch_mean(tape, sq)
}

/// `KL(N(mu, exp(logvar)) ‖ N(prior_mu, 1))` summed over dimensions and
/// averaged over the batch. `prior_mu = None` means a zero-mean prior.
pub fn kl_unit_var(tape: &mut Tape, mu: Var, logvar: Var, prior_mu: Option<Var>) -> Var {
    let var = tape.exp(logvar);
    let d = match prior_mu {
        Some(p) => tape.sub(mu, p),
        None => mu,
    };
    let d2 = tape.square(d);
    let t = tape.add(var, d2);
    let t = tape.sub(t, logvar);
    let t = tape.add_scalar(t, -1.0);
    let s = batch_mean(tape, t);
    tape.scale(s, 0.5)
}

/// KL of the concept-noise posterior `N(eps_mean, eps_std²)` against
/// `N(0, 1)`, summed over concepts.
pub fn kl_eps(tape: &mut Tape, eps_mean: Var, eps_std: f64) -> Var {
    let n = tape.value(eps_mean).len() as f64;
    let var = eps_std * eps_std;
    let sq = tape.square(eps_mean);
    let s = tape.sum_all(sq);
    let s = tape.add_scalar(s, n * (var - 1.0 - var.ln()));
    tape.scale(s, 0.5)
}

/// Label-consistency loss. `c` is `batch × n`, `z_m` and `u` are `batch × m`,
/// `a` is `m × n`; concepts are mapped back with the pseudo-inverse of `a`.
pub fn supervision(tape: &mut Tape, a: Var, c: Var, z_m: Var, u: Var, kind: SupervisionKind) -> Var {
    let ap = tape.pinv(a);
    let back = tape.matmul(c, ap);
    let ub = tape.mul(back, u);
    let uz = tape.mul(z_m, u);
    let (ub, uz) = match kind {
        SupervisionKind::Elementwise => (ub, uz),
        SupervisionKind::InnerProduct => (tape.sum_cols(ub), tape.sum_cols(uz)),
    };
    let sb = tape.sigmoid(ub);
    let sz = tape.sigmoid(uz);
    let d = tape.sub(sb, sz);
    let sq = tape.square(d);
    batch_mean(tape, sq)
}

/// Condition number used for the supervision back-map warning.
pub fn back_map_condition(a: &Array2<f64>) -> f64 {
    linalg::pinv(a).condition
}

/// Mean binary cross-entropy of `probs` (`batch × 1`) against 0/1 `labels`.
pub fn classification(tape: &mut Tape, probs: Var, labels: Var) -> Var {
    let p = tape.clamp(probs, P_CLAMP, 1.0 - P_CLAMP);
    let lp = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.ln(q);
    let y = labels;
    let ny = tape.scale(y, -1.0);
    let ny = tape.add_scalar(ny, 1.0);
    let a = tape.mul(lp, y);
    let b = tape.mul(lq, ny);
    let s = tape.add(a, b);
    let m = batch_mean(tape, s);
    tape.scale(m, -1.0)
}

/// Frobenius norm of `a`.
pub fn diversity(tape: &mut Tape, a: Var) -> Var {
    let sq = tape.square(a);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Squared error between the supervised slots and the labels, summed over
/// slots and averaged over the batch.
pub fn alignment(tape: &mut Tape, mu_m: Var, u: Var) -> Var {
    recon(tape, mu_m, u)
}

fn check(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical { term: term.into() })
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::contract(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())))
    }
}

/// Diagonal-Gaussian posterior statistics, `batch × dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

/// `(recon, kl_eps, kl_zc)` for plain arrays. `prior_mu = None` is the
/// standard-normal prior.
pub fn elbo_terms(
    posterior: &GaussianStats,
    prior_mu: Option<&Array2<f64>>,
    eps_mean: &Array2<f64>,
    eps_std: f64,
    x: &Array2<f64>,
    x_hat: &Array2<f64>,
) -> Result<(f64, f64, f64)> {
    same_shape(x, x_hat, "reconstruction")?;
    same_shape(&posterior.mu, &posterior.logvar, "posterior")?;
    if let Some(p) = prior_mu {
        same_shape(&posterior.mu, p, "prior")?;
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let xh = tape.leaf(x_hat.clone());
    let r = recon(&mut tape, xh, xv);
    let em = tape.leaf(eps_mean.clone());
    let ke = kl_eps(&mut tape, em, eps_std);
    let mu = tape.leaf(posterior.mu.clone());
    let lv = tape.leaf(posterior.logvar.clone());
    let pm = prior_mu.map(|p| tape.leaf(p.clone()));
    let kz = kl_unit_var(&mut tape, mu, lv, pm);
    Ok((
        check(tape.scalar(r), "recon")?,
        check(tape.scalar(ke), "kl_eps")?,
        check(tape.scalar(kz), "kl_zc")?,
    ))
}

/// Plain-array supervision loss; see [`supervision`].
pub fn supervision_loss(
    a: &Array2<f64>,
    c: &Array2<f64>,
    z: &Array2<f64>,
    u: &Array2<f64>,
    kind: SupervisionKind,
) -> Result<f64> {
    let (m, n) = a.dim();
    if c.ncols() != n || z.ncols() != m || u.dim() != z.dim() || c.nrows() != z.nrows() {
        return Err(Error::contract(format!(
            "supervision: A {m}x{n}, c {:?}, z {:?}, u {:?}",
            c.dim(),
            z.dim(),
            u.dim()
        )));
    }
    let cond = back_map_condition(a);
    if cond > 1e6 {
        log::warn!("causal matrix condition number {cond:.3e} exceeds 1e6");
    }
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let cv = tape.leaf(c.clone());
    let zv = tape.leaf(z.clone());
    let uv = tape.leaf(u.clone());
    let l = supervision(&mut tape, av, cv, zv, uv, kind);
    check(tape.scalar(l), "l_u")
}

/// Plain-array binary cross-entropy; see [`classification`].
pub fn classification_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::contract("classification: probabilities and labels differ in length"));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(Array2::from_shape_vec((probs.len(), 1), probs.to_vec()).unwrap());
    let y = tape.leaf(Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64));
    let l = classification(&mut tape, p, y);
    check(tape.scalar(l), "l_clf")
}

/// Plain-array Frobenius norm; see [`diversity`].
pub fn diversity_loss(a: &Array2<f64>) -> f64 {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let d = diversity(&mut tape, av);
    tape.scalar(d)
}
