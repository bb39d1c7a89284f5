//! Bipartite structural-causal layer from factor slots to concepts, and the
//! linear task predictor on top of it.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{logistic, Bound, ParamGroup, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `h(s) = tanh(a·s + b)`.
    #[default]
    Tanh,
    /// `h(s) = a·s + b`.
    Linear,
}

/// How the causal matrix starts out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AInit {
    /// Entries drawn from `U(-bound, bound)`.
    Uniform { bound: f64 },
    /// Rows in `relevant` set to 1 in every column, all other entries 0;
    /// the matrix is then kept frozen.
    GroundTruth { relevant: Vec<usize> },
}

impl Default for AInit {
    fn default() -> Self {
        AInit::Uniform { bound: 0.1 }
    }
}

impl AInit {
    pub fn frozen(&self) -> bool {
        matches!(self, AInit::GroundTruth { .. })
    }

    pub fn matrix(&self, m: usize, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        match self {
            AInit::Uniform { bound } => {
                if !(bound.is_finite() && *bound > 0.0) {
                    return Err(Error::config(format!("A init bound must be positive, got {bound}")));
                }
                Ok(Array2::from_shape_fn((m, n), |_| rng.gen_range(-bound..*bound)))
            }
            AInit::GroundTruth { relevant } => {
                let mut a = Array2::zeros((m, n));
                for &r in relevant {
                    if r >= m {
                        return Err(Error::config(format!("relevant factor {r} outside 0..{m}")));
                    }
                    a.row_mut(r).fill(1.0);
                }
                Ok(a)
            }
        }
    }
}

/// Parameter handles of the causal layer and predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScmParams {
    /// `m × n` causal matrix.
    pub a: ParamId,
    /// Per-concept slope and offset of `h`, each `1 × n`.
    pub eta_a: ParamId,
    pub eta_b: ParamId,
    /// Mean of the concept noise, `1 × n`.
    pub eps_mean: ParamId,
    /// Predictor weights `n × 1` and bias `1 × 1`.
    pub w: ParamId,
    pub w0: ParamId,
}

impl ScmParams {
    pub fn new(store: &mut ParamStore, m: usize, n: usize, a: Array2<f64>) -> Self {
        assert_eq!(a.dim(), (m, n));
        let g = ParamGroup::Scm;
        Self {
            a: store.add("scm.A", g, a),
            eta_a: store.add("scm.eta_a", g, Array2::ones((1, n))),
            eta_b: store.add("scm.eta_b", g, Array2::zeros((1, n))),
            eps_mean: store.add("scm.eps_mean", g, Array2::zeros((1, n))),
            w: store.add("pred.W", g, Array2::ones((n, 1))),
            w0: store.add("pred.w0", g, Array2::zeros((1, 1))),
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.a, self.eta_a, self.eta_b, self.eps_mean, self.w, self.w0]
    }

    /// Concepts `batch × n` from the factor slots `z_m` (`batch × m`).
    /// `eps_noise` holds standard-normal draws already scaled by the noise
    /// std; pass `None` at inference.
    pub fn concepts(&self, tape: &mut Tape, p: &Bound, kind: Nonlinearity, z_m: Var, eps_noise: Option<Var>) -> Var {
        let s = tape.matmul(z_m, p.var(self.a));
        let s = tape.mul(s, p.var(self.eta_a));
        let s = tape.add(s, p.var(self.eta_b));
        let h = match kind {
            Nonlinearity::Tanh => tape.tanh(s),
            Nonlinearity::Linear => s,
        };
        let c = tape.add(h, p.var(self.eps_mean));
        match eps_noise {
            Some(e) => tape.add(c, e),
            None => c,
        }
    }

    /// Predictor logits `batch × 1`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, c: Var) -> Var {
        let y = tape.matmul(c, p.var(self.w));
        tape.add(y, p.var(self.w0))
    }
}

/// Plain-array view of the concept heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHeads {
    pub kind: Nonlinearity,
    pub eta_a: Array1<f64>,
    pub eta_b: Array1<f64>,
    pub eps_mean: Array1<f64>,
    pub eps_std: f64,
}

impl ConceptHeads {
    /// Heads with `h` the identity (linear, unit slope, zero offset) and no
    /// noise offset.
    pub fn identity(n: usize, eps_std: f64) -> Self {
        Self {
            kind: Nonlinearity::Linear,
            eta_a: Array1::ones(n),
            eta_b: Array1::zeros(n),
            eps_mean: Array1::zeros(n),
            eps_std,
        }
    }

    pub fn n(&self) -> usize {
        self.eta_a.len()
    }

    fn head(&self, i: usize, s: f64) -> f64 {
        let v = self.eta_a[i] * s + self.eta_b[i];
        match self.kind {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Linear => v,
        }
    }
}

/// Concepts for one factor-slot vector `z` (length m). Concept noise is
/// drawn only in `train_mode`.
pub fn concepts(
    a: ArrayView2<f64>,
    heads: &ConceptHeads,
    z: ArrayView1<f64>,
    rng: &mut impl Rng,
    train_mode: bool,
) -> Result<Array1<f64>> {
    let (m, n) = a.dim();
    if z.len() != m || heads.n() != n || heads.eps_mean.len() != n || heads.eta_b.len() != n {
        return Err(Error::contract(format!(
            "concepts: A is {m}x{n}, z has {} entries, heads cover {}",
            z.len(),
            heads.n()
        )));
    }
    let s = z.dot(&a);
    Ok(Array1::from_shape_fn(n, |i| {
        let noise = if train_mode {
            heads.eps_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        heads.head(i, s[i]) + heads.eps_mean[i] + noise
    }))
}

/// Logistic predictor output for one concept vector.
pub fn predict(w: ArrayView1<f64>, w0: f64, c: ArrayView1<f64>) -> Result<(f64, u8)> {
    if w.len() != c.len() {
        return Err(Error::contract(format!("predict: {} weights for {} concepts", w.len(), c.len())));
    }
    let p = logistic(w0 + w.dot(&c));
    Ok((p, (p >= 0.5) as u8))
}

/// Scale `a` by its largest magnitude and clamp into `[-1, 1]`. Returns
/// `None` (and logs a warning) when `a` is all zero.
pub fn clip_a(a: &Array2<f64>) -> Option<Array2<f64>> {
    let max = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        warn!("clip_A skipped: causal matrix is all zero");
        return None;
    }
    Some(a.mapv(|v| (v / max).clamp(-1.0, 1.0)))
}
