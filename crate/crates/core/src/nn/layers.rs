use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::ConvGeometry;
use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense and
/// convolutional layers.
fn uniform_init(rng: &mut impl Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Dense layer `y = x W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, uniform_init(rng, (inputs, outputs), inputs));
        let bias = store.add(format!("{name}.bias"), group, uniform_init(rng, (1, outputs), inputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.weight));
        tape.add(h, p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = geom.in_c * geom.kernel * geom.kernel;
        let weight = store.add(format!("{name}.weight"), ParamGroup::Vae, uniform_init(rng, geom.weight_shape(), fan_in));
        let bias = store.add(format!("{name}.bias"), ParamGroup::Vae, uniform_init(rng, (1, geom.out_c), fan_in));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.conv2d(x, p.var(self.weight), self.geom);
        tape.channel_bias(y, p.var(self.bias), self.geom.out_h() * self.geom.out_w())
    }

    pub fn param_count(&self) -> usize {
        let (r, c) = self.geom.weight_shape();
        r * c + self.geom.out_c
    }
}

/// Transposed convolution from the `out_*` side of `geom` to its `in_*` side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = geom.out_c * geom.kernel * geom.kernel;
        let weight = store.add(format!("{name}.weight"), ParamGroup::Vae, uniform_init(rng, geom.weight_shape(), fan_in));
        let bias = store.add(format!("{name}.bias"), ParamGroup::Vae, uniform_init(rng, (1, geom.in_c), fan_in));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.conv_transpose2d(x, p.var(self.weight), self.geom);
        tape.channel_bias(y, p.var(self.bias), self.geom.in_h * self.geom.in_w)
    }

    pub fn param_count(&self) -> usize {
        let (r, c) = self.geom.weight_shape();
        r * c + self.geom.in_c
    }
}
