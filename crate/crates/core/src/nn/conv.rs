//! im2col convolution kernels on channel-major flattened images.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Shape of a square-kernel 2-D convolution from `(in_c, in_h, in_w)` to
/// `(out_c, out_h, out_w)`.
///
/// A transposed convolution is described by the geometry of its adjoint
/// convolution: the transposed layer maps the `out_*` side back to the
/// `in_*` side. Weights are `out_c × (in_c·k·k)` in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.out_c, self.in_c * self.kernel * self.kernel)
    }

    fn patch_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold one image (`in_c·in_h·in_w`) into a `(in_c·k·k) × (out_h·out_w)`
/// patch matrix.
fn im2col(image: &[f64], g: &ConvGeometry) -> Array2<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut col = Array2::zeros((g.patch_rows(), oh * ow));
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut out_row = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = image[base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
fn col2im(col: ArrayView2<f64>, g: &ConvGeometry, image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = col.row((c * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        image[base + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn row_slice(a: &Array2<f64>, b: usize) -> Vec<f64> {
    a.row(b).to_vec()
}

pub fn conv2d_forward(input: &Array2<f64>, weight: &Array2<f64>, g: &ConvGeometry) -> Array2<f64> {
    assert_eq!(input.ncols(), g.in_len(), "conv input width");
    assert_eq!(weight.dim(), g.weight_shape(), "conv weight shape");
    let batch = input.nrows();
    let mut out = Array2::zeros((batch, g.out_len()));
    for b in 0..batch {
        let col = im2col(&row_slice(input, b), g);
        let y = weight.dot(&col);
        out.row_mut(b)
            .assign(&y.into_shape_with_order(g.out_len()).expect("contiguous"));
    }
    out
}

pub fn conv2d_backward(
    input: &Array2<f64>,
    weight: &Array2<f64>,
    grad_out: &Array2<f64>,
    g: &ConvGeometry,
) -> (Array2<f64>, Array2<f64>) {
    let batch = input.nrows();
    let mut grad_in = Array2::zeros(input.dim());
    let mut grad_w = Array2::zeros(weight.dim());
    let wt = weight.t();
    for b in 0..batch {
        let col = im2col(&row_slice(input, b), g);
        let gy = grad_out
            .row(b)
            .to_owned()
            .into_shape_with_order((g.out_c, g.positions()))
            .expect("contiguous");
        grad_w += &gy.dot(&col.t());
        let gcol = wt.dot(&gy);
        let mut img = vec![0.0; g.in_len()];
        col2im(gcol.view(), g, &mut img);
        grad_in
            .row_mut(b)
            .assign(&ndarray::ArrayView1::from(&img[..]));
    }
    (grad_in, grad_w)
}

/// Transposed convolution: maps `(batch, out_c·out_h·out_w)` to
/// `(batch, in_c·in_h·in_w)` of the adjoint geometry.
pub fn conv_transpose2d_forward(
    input: &Array2<f64>,
    weight: &Array2<f64>,
    g: &ConvGeometry,
) -> Array2<f64> {
    assert_eq!(input.ncols(), g.out_len(), "transposed conv input width");
    assert_eq!(weight.dim(), g.weight_shape(), "transposed conv weight shape");
    let batch = input.nrows();
    let mut out = Array2::zeros((batch, g.in_len()));
    let wt = weight.t();
    for b in 0..batch {
        let x = input
            .row(b)
            .to_owned()
            .into_shape_with_order((g.out_c, g.positions()))
            .expect("contiguous");
        let col = wt.dot(&x);
        let mut img = vec![0.0; g.in_len()];
        col2im(col.view(), g, &mut img);
        out.row_mut(b).assign(&ndarray::ArrayView1::from(&img[..]));
    }
    out
}

pub fn conv_transpose2d_backward(
    input: &Array2<f64>,
    weight: &Array2<f64>,
    grad_out: &Array2<f64>,
    g: &ConvGeometry,
) -> (Array2<f64>, Array2<f64>) {
    let batch = input.nrows();
    let mut grad_in = Array2::zeros(input.dim());
    let mut grad_w = Array2::zeros(weight.dim());
    for b in 0..batch {
        let gcol = im2col(&row_slice(grad_out, b), g);
        let gx = weight.dot(&gcol);
        grad_in
            .row_mut(b)
            .assign(&gx.into_shape_with_order(g.out_len()).expect("contiguous"));
        let x = input
            .row(b)
            .to_owned()
            .into_shape_with_order((g.out_c, g.positions()))
            .expect("contiguous");
        grad_w += &x.dot(&gcol.t());
    }
    (grad_in, grad_w)
}

/// Broadcast a `1×channels` bias over `(batch, channels·spatial)`.
pub fn add_channel_bias(input: &Array2<f64>, bias: &Array2<f64>, spatial: usize) -> Array2<f64> {
    let mut out = input.clone();
    for (c, &bv) in bias.iter().enumerate() {
        out.slice_mut(s![.., c * spatial..(c + 1) * spatial])
            .mapv_inplace(|x| x + bv);
    }
    out
}

pub fn channel_bias_grad(grad_out: &Array2<f64>, channels: usize, spatial: usize) -> Array2<f64> {
    let per_col = grad_out.sum_axis(Axis(0));
    let mut gb = Array2::zeros((1, channels));
    for c in 0..channels {
        gb[[0, c]] = per_col.slice(s![c * spatial..(c + 1) * spatial]).sum();
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], w: &Array2<f64>, g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                let xi = (c * g.in_h + iy as usize) * g.in_w + ix as usize;
                                acc += w[[o, (c * g.kernel + ky) * g.kernel + kx]] * input[xi];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn geom() -> ConvGeometry {
        ConvGeometry { in_c: 2, in_h: 5, in_w: 6, out_c: 3, kernel: 3, stride: 2, padding: 1 }
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * k).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = geom();
        let x = ramp(2 * g.in_len(), 0.37);
        let input = Array2::from_shape_vec((2, g.in_len()), x.clone()).unwrap();
        let (wr, wc) = g.weight_shape();
        let w = Array2::from_shape_vec((wr, wc), ramp(wr * wc, 0.91)).unwrap();
        let out = conv2d_forward(&input, &w, &g);
        for b in 0..2 {
            let expect = naive_conv(&x[b * g.in_len()..(b + 1) * g.in_len()], &w, &g);
            for (a, e) in out.row(b).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint() {
        // <conv(x), y> == <x, conv_t(y)>
        let g = geom();
        let x = Array2::from_shape_vec((1, g.in_len()), ramp(g.in_len(), 0.21)).unwrap();
        let y = Array2::from_shape_vec((1, g.out_len()), ramp(g.out_len(), 0.53)).unwrap();
        let (wr, wc) = g.weight_shape();
        let w = Array2::from_shape_vec((wr, wc), ramp(wr * wc, 0.77)).unwrap();
        let lhs = (&conv2d_forward(&x, &w, &g) * &y).sum();
        let rhs = (&x * &conv_transpose2d_forward(&y, &w, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
