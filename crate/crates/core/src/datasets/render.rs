//! Binary-mask rasterizers for the two built-in factor spaces.
//!
//! Inside tests are evaluated at pixel centers with no anti-aliasing, so a
//! render is a pure function of the factor index.

use super::{DatasetKind, FactorSpace, Sample};
use crate::error::Result;

/// Sprite outline in local coordinates normalized by the sprite radius,
/// `y` pointing up.
#[derive(Debug, Clone, Copy)]
enum Outline {
    Square,
    Ellipse,
    Heart,
    Cylinder,
    Sphere,
    Capsule,
}

impl Outline {
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Outline::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            Outline::Ellipse => x * x + (y / 0.5) * (y / 0.5) <= 1.0,
            Outline::Heart => {
                let hx = x * 1.2;
                let hy = y * 1.2 + 0.15;
                let q = hx * hx + hy * hy - 1.0;
                q * q * q - hx * hx * hy * hy * hy <= 0.0
            }
            Outline::Cylinder => x.abs() <= 0.55 && y.abs() <= 0.95,
            Outline::Sphere => x * x + y * y <= 0.81,
            Outline::Capsule => {
                let r = 0.45;
                let cy = (y.abs() - 0.5).max(0.0);
                x * x + cy * cy <= r * r
            }
        }
    }
}

/// Rotate the offset `(dx, dy)` by `-angle` and scale by `1/radius`.
fn to_local(dx: f64, dy: f64, angle: f64, radius: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    ((c * dx + s * dy) / radius, (-s * dx + c * dy) / radius)
}

fn hue_to_rgb(hue: f64, value: f64) -> [f64; 3] {
    let h = (hue.rem_euclid(1.0)) * 6.0;
    let sector = h.floor() as i32;
    let f = h - sector as f64;
    let (p, q, t) = (0.0, value * (1.0 - f), value * f);
    match sector {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    }
}

/// Render the sample at `factor_index`.
pub fn render(space: &FactorSpace, factor_index: &[usize]) -> Result<Sample> {
    space.check_index(factor_index)?;
    let image = match space.dataset {
        DatasetKind::DspritesLike => render_sprite(space, factor_index),
        DatasetKind::Shapes3dLike => render_scene(space, factor_index),
    };
    Ok(Sample {
        image,
        u: space.normalized_labels(factor_index),
        factor_index: factor_index.to_vec(),
    })
}

fn native(space: &FactorSpace, idx: &[usize], name: &str) -> f64 {
    let pos = space.factor_position(name).expect("built-in factor");
    space.factors[pos].values[idx[pos]]
}

fn render_sprite(space: &FactorSpace, idx: &[usize]) -> Vec<f32> {
    let size = space.image.width as f64;
    let color_pos = space.factor_position("color").expect("color");
    let colors = space.factors[color_pos].len();
    let intensity = if colors > 1 {
        1.0 - 0.5 * idx[color_pos] as f64 / (colors - 1) as f64
    } else {
        1.0
    };
    let outline = match native(space, idx, "shape") as usize {
        0 => Outline::Square,
        1 => Outline::Ellipse,
        _ => Outline::Heart,
    };
    let radius = native(space, idx, "scale") * 0.16 * size;
    let angle = native(space, idx, "orientation");
    let margin = 0.19 * size;
    // The quarter-pixel offset keeps the two edges of a symmetric sprite off
    // the same sampling phase, so small scale steps stay visible.
    let cx = margin + native(space, idx, "posX") * (size - 2.0 * margin) + 0.25;
    // posY = 1 is the top of the image.
    let cy = size - margin - native(space, idx, "posY") * (size - 2.0 * margin) + 0.25;

    let (h, w) = (space.image.height, space.image.width);
    let mut img = vec![0.0f32; h * w];
    for py in 0..h {
        for px in 0..w {
            let dx = px as f64 + 0.5 - cx;
            let dy = cy - (py as f64 + 0.5);
            let (lx, ly) = to_local(dx, dy, angle, radius);
            if outline.contains(lx, ly) {
                img[py * w + px] = intensity as f32;
            }
        }
    }
    img
}

fn render_scene(space: &FactorSpace, idx: &[usize]) -> Vec<f32> {
    let (h, w) = (space.image.height, space.image.width);
    let size = w as f64;
    let floor = hue_to_rgb(native(space, idx, "floor_hue"), 0.75);
    let wall = hue_to_rgb(native(space, idx, "wall_hue"), 0.95);
    let object = hue_to_rgb(native(space, idx, "object_hue"), 1.0);
    let outline = match native(space, idx, "shape") as usize {
        0 => Outline::Square,
        1 => Outline::Cylinder,
        2 => Outline::Sphere,
        _ => Outline::Capsule,
    };
    let radius = native(space, idx, "scale") * 0.18 * size;
    let orient_pos = space.factor_position("orientation").expect("orientation");
    let orient_factor = &space.factors[orient_pos];
    // Categories span -30..30 degrees; the camera turn tilts the horizon and
    // the object together.
    let k = orient_factor.len();
    let degrees = if k > 1 {
        -30.0 + 60.0 * idx[orient_pos] as f64 / (k - 1) as f64
    } else {
        0.0
    };
    let angle = degrees.to_radians();
    let horizon_slope = angle.tan() * 0.35;
    let (cx, cy) = (0.5 * size, 0.6 * size);

    let mut img = vec![0.0f32; h * w * 3];
    for py in 0..h {
        for px in 0..w {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let horizon = 0.62 * size + horizon_slope * (x - 0.5 * size);
            let mut rgb = if y > horizon { floor } else { wall };
            let (lx, ly) = to_local(x - cx, cy - y, angle, radius);
            if outline.contains(lx, ly) {
                rgb = object;
            }
            let base = (py * w + px) * 3;
            for c in 0..3 {
                img[base + c] = rgb[c] as f32;
            }
        }
    }
    img
}
