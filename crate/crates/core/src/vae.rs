//! Encoder/decoder networks, latent layout and variant switches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Conv2d, ConvGeometry, ConvTranspose2d, Linear, ParamGroup, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BetaVae,
    NoisyBetaVae,
    Ours,
    SupBetaVae,
    SupNoisyBetaVae,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BetaVae,
        Variant::NoisyBetaVae,
        Variant::Ours,
        Variant::SupBetaVae,
        Variant::SupNoisyBetaVae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BetaVae => "beta_vae",
            Variant::NoisyBetaVae => "noisy_beta_vae",
            Variant::Ours => "ours",
            Variant::SupBetaVae => "sup_beta_vae",
            Variant::SupNoisyBetaVae => "sup_noisy_beta_vae",
        }
    }

    /// Direct MSE alignment of the supervised slots to `u`.
    pub fn supervised(self) -> bool {
        matches!(self, Variant::SupBetaVae | Variant::SupNoisyBetaVae)
    }

    /// Whether labels condition the latent prior.
    pub fn uses_labels(self) -> bool {
        self.supervised() || self == Variant::Ours
    }

    pub fn uses_scm(self) -> bool {
        self == Variant::Ours
    }

    /// Variants that must run with zero encoder and decoder noise.
    pub fn noiseless(self) -> bool {
        matches!(self, Variant::BetaVae | Variant::SupBetaVae)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub zeta_std: f64,
    pub xi_std: f64,
    pub eps_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            zeta_std: 0.05,
            xi_std: 0.01,
            eps_std: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("zeta_std", self.zeta_std), ("xi_std", self.xi_std), ("eps_std", self.eps_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    /// The noise actually applied for `variant`.
    pub fn effective(self, variant: Variant) -> Self {
        if variant.noiseless() {
            Self {
                zeta_std: 0.0,
                xi_std: 0.0,
                ..self
            }
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub z_dim: usize,
    /// Leading latent slots tied to the generative factors.
    pub m: usize,
}

impl LatentLayout {
    pub fn new(z_dim: usize, m: usize) -> Result<Self> {
        if m == 0 || m > z_dim {
            return Err(Error::config(format!("latent layout needs z_dim >= m >= 1, got z_dim={z_dim}, m={m}")));
        }
        Ok(Self { z_dim, m })
    }

    pub fn free_dims(&self) -> usize {
        self.z_dim - self.m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense encoder `pixels -> encoder... -> 2·z_dim` and decoder
    /// `z_dim -> decoder... -> pixels`.
    Mlp {
        encoder: Vec<usize>,
        decoder: Vec<usize>,
        activation: Activation,
    },
    /// Stride-2 convolutions over `encoder_channels` (first entry is the
    /// image channel count) then a dense head; the decoder is a dense layer
    /// followed by one stride-2 transposed convolution per entry of
    /// `decoder_channels` (last entry is the image channel count).
    Conv {
        encoder_channels: Vec<usize>,
        decoder_channels: Vec<usize>,
        kernel: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn dsprites_default() -> Self {
        Architecture::Mlp {
            encoder: vec![900, 600, 300],
            decoder: vec![300, 300, 1024],
            activation: Activation::Elu,
        }
    }

    pub fn shapes3d_default() -> Self {
        Architecture::Conv {
            encoder_channels: vec![3, 32, 64, 64, 64, 16],
            decoder_channels: vec![64, 64, 3],
            kernel: 4,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self, image: ImageShape) -> Result<()> {
        match self {
            Architecture::Mlp { encoder, decoder, .. } => {
                if encoder.contains(&0) || decoder.contains(&0) {
                    return Err(Error::config("layer widths must be positive"));
                }
            }
            Architecture::Conv {
                encoder_channels,
                decoder_channels,
                kernel,
                ..
            } => {
                if encoder_channels.len() < 2 || decoder_channels.is_empty() || encoder_channels.contains(&0) {
                    return Err(Error::config("conv architecture needs at least one encoder and decoder stage"));
                }
                if encoder_channels[0] != image.channels || *decoder_channels.last().unwrap() != image.channels {
                    return Err(Error::config(format!(
                        "conv channel plan must start and end with {} image channels",
                        image.channels
                    )));
                }
                let down = 1usize << (encoder_channels.len() - 1);
                let up = 1usize << decoder_channels.len();
                if image.height != image.width || image.height % down != 0 || image.height % up != 0 {
                    return Err(Error::config(format!(
                        "conv architecture needs a square image divisible by {}",
                        down.max(up)
                    )));
                }
                if *kernel != 4 {
                    return Err(Error::config("stride-2 stages use kernel 4 with padding 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Mlp {
        layers: Vec<Linear>,
        head: Linear,
        activation: Activation,
    },
    Conv {
        convs: Vec<Conv2d>,
        head: Linear,
        activation: Activation,
    },
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Mlp {
        layers: Vec<Linear>,
        activation: Activation,
    },
    Conv {
        stem: Linear,
        deconvs: Vec<ConvTranspose2d>,
        activation: Activation,
    },
}

fn mlp_chain(
    store: &mut ParamStore,
    prefix: &str,
    widths: &[usize],
    rng: &mut impl Rng,
) -> Vec<Linear> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), ParamGroup::Vae, w[0], w[1], rng))
        .collect()
}

/// Build both networks, registering their parameters in `store`.
pub fn build_networks(
    store: &mut ParamStore,
    arch: &Architecture,
    image: ImageShape,
    layout: LatentLayout,
    rng: &mut impl Rng,
) -> Result<(Encoder, Decoder)> {
    arch.validate(image)?;
    let pixels = image.pixels();
    let z = layout.z_dim;
    Ok(match arch {
        Architecture::Mlp {
            encoder,
            decoder,
            activation,
        } => {
            let widths: Vec<usize> = std::iter::once(pixels).chain(encoder.iter().copied()).collect();
            let layers = mlp_chain(store, "enc", &widths, rng);
            let head = Linear::new(store, "enc.head", ParamGroup::Vae, *widths.last().unwrap(), 2 * z, rng);
            let widths: Vec<usize> = std::iter::once(z)
                .chain(decoder.iter().copied())
                .chain(std::iter::once(pixels))
                .collect();
            let dec = mlp_chain(store, "dec", &widths, rng);
            (
                Encoder::Mlp {
                    layers,
                    head,
                    activation: *activation,
                },
                Decoder::Mlp {
                    layers: dec,
                    activation: *activation,
                },
            )
        }
        Architecture::Conv {
            encoder_channels,
            decoder_channels,
            kernel,
            activation,
        } => {
            let mut side = image.height;
            let mut convs = Vec::new();
            for (i, ch) in encoder_channels.windows(2).enumerate() {
                let geom = ConvGeometry {
                    in_c: ch[0],
                    in_h: side,
                    in_w: side,
                    out_c: ch[1],
                    kernel: *kernel,
                    stride: 2,
                    padding: 1,
                };
                side = geom.out_h();
                convs.push(Conv2d::new(store, &format!("enc.conv{i}"), geom, rng));
            }
            let flat = convs.last().unwrap().geom.out_len();
            let head = Linear::new(store, "enc.head", ParamGroup::Vae, flat, 2 * z, rng);

            let stages = decoder_channels.len();
            let mut side = image.height >> stages;
            let mut channels = decoder_channels[0];
            let stem = Linear::new(store, "dec.stem", ParamGroup::Vae, z, channels * side * side, rng);
            let mut deconvs = Vec::new();
            for (i, &out) in decoder_channels.iter().enumerate() {
                // The transposed stage is the adjoint of a conv from the
                // larger grid (`in_*`) down to the current one (`out_*`).
                let geom = ConvGeometry {
                    in_c: out,
                    in_h: side * 2,
                    in_w: side * 2,
                    out_c: channels,
                    kernel: *kernel,
                    stride: 2,
                    padding: 1,
                };
                deconvs.push(ConvTranspose2d::new(store, &format!("dec.deconv{i}"), geom, rng));
                side *= 2;
                channels = out;
            }
            (
                Encoder::Conv {
                    convs,
                    head,
                    activation: *activation,
                },
                Decoder::Conv {
                    stem,
                    deconvs,
                    activation: *activation,
                },
            )
        }
    })
}

/// Clamp applied to the encoder's log-variance head.
pub const LOGVAR_LIMIT: f64 = 10.0;

impl Encoder {
    /// Returns `(mu, logvar)`, each `batch × z_dim`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, z_dim: usize) -> (Var, Var) {
        let h = match self {
            Encoder::Mlp {
                layers,
                head,
                activation,
            } => {
                let mut h = x;
                for l in layers {
                    let y = l.forward(tape, p, h);
                    h = activation.apply(tape, y);
                }
                head.forward(tape, p, h)
            }
            Encoder::Conv {
                convs,
                head,
                activation,
            } => {
                let mut h = x;
                for c in convs {
                    let y = c.forward(tape, p, h);
                    h = activation.apply(tape, y);
                }
                head.forward(tape, p, h)
            }
        };
        let mu = tape.slice_cols(h, 0, z_dim);
        let lv = tape.slice_cols(h, z_dim, 2 * z_dim);
        let lv = tape.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        (mu, lv)
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Mlp { layers, head, .. } => layers.iter().map(Linear::param_count).sum::<usize>() + head.param_count(),
            Encoder::Conv { convs, head, .. } => convs.iter().map(Conv2d::param_count).sum::<usize>() + head.param_count(),
        }
    }
}

impl Decoder {
    /// Mean image in `(0, 1)` before observation noise, `batch × pixels`
    /// (channel-major).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Var {
        let logits = match self {
            Decoder::Mlp { layers, activation } => {
                let mut h = z;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(tape, p, h);
                    if i + 1 < layers.len() {
                        h = activation.apply(tape, h);
                    }
                }
                h
            }
            Decoder::Conv {
                stem,
                deconvs,
                activation,
            } => {
                let y = stem.forward(tape, p, z);
                let mut h = activation.apply(tape, y);
                for (i, d) in deconvs.iter().enumerate() {
                    h = d.forward(tape, p, h);
                    if i + 1 < deconvs.len() {
                        h = activation.apply(tape, h);
                    }
                }
                h
            }
        };
        tape.sigmoid(logits)
    }

    pub fn param_count(&self) -> usize {
        match self {
            Decoder::Mlp { layers, .. } => layers.iter().map(Linear::param_count).sum(),
            Decoder::Conv { stem, deconvs, .. } => {
                stem.param_count() + deconvs.iter().map(ConvTranspose2d::param_count).sum::<usize>()
            }
        }
    }
}
