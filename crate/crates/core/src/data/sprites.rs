//! Procedural 64×64 binary sprites: square, ellipse and heart under random
//! scale, orientation and position.

use std::f64::consts::TAU;

use rand::Rng as _;

use crate::rng;

pub const SIZE: usize = 64;
pub const SHAPES: [&str; 3] = ["square", "ellipse", "heart"];
/// Pixels per shape unit at scale 1.
const UNIT_PX: f64 = 12.0;
const SQUARE_HALF: f64 = 0.8;
const ELLIPSE_MINOR: f64 = 0.55;
/// Margin, in pixels, kept between the shape's bounding circle and the border.
const MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteLatents {
    pub shape: usize,
    pub scale: f64,
    /// Orientation in radians, `[0, 2π)`.
    pub orientation: f64,
    pub x: f64,
    pub y: f64,
}

/// Heart curve `(x² + y² − 1)³ − x²y³ ≤ 0`, y pointing up.
fn in_heart(x: f64, y: f64) -> bool {
    let a = x * x + y * y - 1.0;
    a * a * a - x * x * y * y * y <= 0.0
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= SQUARE_HALF && v.abs() <= SQUARE_HALF,
        1 => u * u + (v / ELLIPSE_MINOR).powi(2) <= 1.0,
        _ => in_heart(u, v),
    }
}

/// Radius, in shape units, of a circle about the origin containing the shape.
fn bounding_radius(shape: usize) -> f64 {
    match shape {
        0 => SQUARE_HALF * std::f64::consts::SQRT_2,
        1 => 1.0,
        // the lobes reach radius ≈ 1.425
        _ => 1.45,
    }
}

/// Draws latents for sample `index` of a generator keyed by `seed`.
pub fn draw_latents(seed: u64, index: u64) -> SpriteLatents {
    let mut r = rng::keyed(seed, "sprites", index);
    let shape = r.gen_range(0..SHAPES.len());
    let scale = r.gen_range(0.5..=1.0);
    let orientation = r.gen_range(0.0..TAU);
    let reach = bounding_radius(shape) * UNIT_PX * scale + MARGIN;
    let x = r.gen_range(reach..=SIZE as f64 - reach);
    let y = r.gen_range(reach..=SIZE as f64 - reach);
    SpriteLatents {
        shape,
        scale,
        orientation,
        x,
        y,
    }
}

/// Renders latents to a row-major 64×64 image of 0/1 values, testing each
/// pixel center against the shape.
pub fn render(l: &SpriteLatents) -> Vec<f64> {
    let (sin, cos) = l.orientation.sin_cos();
    let k = 1.0 / (UNIT_PX * l.scale);
    let mut out = vec![0.0; SIZE * SIZE];
    for py in 0..SIZE {
        let dy = py as f64 + 0.5 - l.y;
        for px in 0..SIZE {
            let dx = px as f64 + 0.5 - l.x;
            // undo the orientation, then flip rows so v points up
            let u = (cos * dx + sin * dy) * k;
            let v = -(-sin * dx + cos * dy) * k;
            if inside(l.shape, u, v) {
                out[py * SIZE + px] = 1.0;
            }
        }
    }
    out
}
