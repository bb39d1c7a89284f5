//! A small reverse-mode automatic differentiation tape over 2-D `f64` arrays.
//!
//! Every value is a matrix; batches are rows, features are columns, scalars
//! are `1×1`. Images flow through convolutions as `(batch, C·H·W)` rows in
//! channel-major order. Binary elementwise ops broadcast the right operand
//! when it is `1×1`, `1×cols` or `rows×1`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::conv::{self, ConvGeometry};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Pinv(Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeometry },
    ConvTranspose2d { input: Var, weight: Var, geom: ConvGeometry },
    ChannelBias { input: Var, bias: Var, spatial: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
}

/// Records a computation so gradients can be pulled back through it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn bshape(a: &Array2<f64>, b: &Array2<f64>) {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let ok = (br == ar || br == 1) && (bc == ac || bc == 1);
    assert!(ok, "cannot broadcast {br}x{bc} onto {ar}x{ac}");
}

fn broadcast_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    bshape(a, b);
    let bv = b.broadcast(a.dim()).expect("broadcast");
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out).and(a).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `grad` down to `shape`, undoing a broadcast.
fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn leaf_shared(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(v, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(logistic);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Column means over the batch: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty batch")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Mean over all entries, as a `1×1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Moore–Penrose pseudo-inverse (the ordinary inverse for invertible
    /// square inputs). Gradients assume the rank is locally constant.
    pub fn pinv(&mut self, a: Var) -> Var {
        let v = crate::linalg::pinv(self.value(a)).pinv;
        self.push(v, Op::Pinv(a))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Var {
        let v = conv::conv2d_forward(self.value(input), self.value(weight), &geom);
        self.push(v, Op::Conv2d { input, weight, geom })
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Var {
        let v = conv::conv_transpose2d_forward(self.value(input), self.value(weight), &geom);
        self.push(v, Op::ConvTranspose2d { input, weight, geom })
    }

    /// Add a per-channel bias (`1×channels`) to `(batch, channels·spatial)`.
    pub fn channel_bias(&mut self, input: Var, bias: Var, spatial: usize) -> Var {
        let v = conv::add_channel_bias(self.value(input), self.value(bias), spatial);
        self.push(v, Op::ChannelBias { input, bias, spatial })
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    let bs = self.value(*b).dim();
                    accumulate(&mut grads[b.0], reduce_to(g.clone(), bs));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    let bs = self.value(*b).dim();
                    accumulate(&mut grads[b.0], reduce_to(-&g, bs));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = broadcast_zip(&g, bv, |x, y| x * y);
                    let gb = reduce_to(&g * av, bv.dim());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).and(&**out).for_each(|g, &x, &y| {
                        if x <= 0.0 {
                            *g *= y + 1.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], g * &**out),
                Op::Ln(a) => accumulate(&mut grads[a.0], g / self.value(*a)),
                Op::Square(a) => accumulate(&mut grads[a.0], g * self.value(*a) * 2.0),
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|g, &y| {
                        *g = if y > 0.0 { *g * 0.5 / y } else { 0.0 };
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads[a.0], Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumCols(a) => {
                    let shape = self.value(*a).dim();
                    let ga = g.broadcast(shape).expect("row broadcast").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let shape = self.value(*a).dim();
                    let ga = g.broadcast(shape).expect("col broadcast").to_owned() / shape.0 as f64;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let shape = self.value(*a).dim();
                    let mut ga = Array2::zeros(shape);
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        offset += w;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Pinv(a) => {
                    let av = self.value(*a);
                    let p = &**out;
                    let pt = p.t();
                    let (m, n) = av.dim();
                    let mut ga = -pt.dot(&g).dot(&pt);
                    // Rank-deficient directions; vanish for invertible inputs.
                    let left = Array2::<f64>::eye(m) - av.dot(p);
                    let right = Array2::<f64>::eye(n) - p.dot(av);
                    ga += &left.dot(&g.t()).dot(p).dot(&pt);
                    ga += &pt.dot(p).dot(&g.t()).dot(&right);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Conv2d { input, weight, geom } => {
                    let (gi, gw) = conv::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        geom,
                    );
                    accumulate(&mut grads[input.0], gi);
                    accumulate(&mut grads[weight.0], gw);
                }
                Op::ConvTranspose2d { input, weight, geom } => {
                    let (gi, gw) = conv::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        geom,
                    );
                    accumulate(&mut grads[input.0], gi);
                    accumulate(&mut grads[weight.0], gw);
                }
                Op::ChannelBias { input, bias, spatial } => {
                    let channels = self.value(*bias).ncols();
                    let gb = conv::channel_bias_grad(&g, channels, *spatial);
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[input.0], g);
                }
            }
        }
        Gradients { grads }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
