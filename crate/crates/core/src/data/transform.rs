//! Rotation and scaling about the image center with bilinear resampling.
//!
//! Output pixel `(x, y)` samples the source at
//! `c + R(−θ)·(p − c) / s`, where `c = ((W−1)/2, (H−1)/2)` and positive `θ`
//! turns content counter-clockwise as displayed (rows grow downward).
//! Samples outside the source read as 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear lookup with zero fill outside the image.
fn bilinear(src: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates by `angle_deg` and scales by `scale` in one resampling pass.
pub fn affine(src: &[f64], h: usize, w: usize, angle_deg: f64, scale: f64) -> Vec<f64> {
    if angle_deg == 0.0 && scale == 1.0 {
        return src.to_vec();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let inv = 1.0 / scale;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sx = cx + (cos * dx - sin * dy) * inv;
            let sy = cy + (sin * dx + cos * dy) * inv;
            out[y * w + x] = bilinear(src, h, w, sx, sy);
        }
    }
    out
}

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::dim(format!("expected a [1, H, W] image, got {s:?}"))),
    }
}

/// Rotation about the center; same canvas size.
pub fn rotate(image: &Tensor, angle_deg: f64) -> Result<Tensor> {
    if !(-90.0..=90.0).contains(&angle_deg) {
        return Err(Error::Contract(format!("rotation {angle_deg}° outside [−90°, 90°]")));
    }
    let (h, w) = plane_dims(image)?;
    Tensor::new(vec![1, h, w], affine(image.data(), h, w, angle_deg, 1.0))
}

/// Shrinks content about the center by `scale ∈ [0.5, 1]`; same canvas size.
pub fn rescale(image: &Tensor, scale: f64) -> Result<Tensor> {
    if !(0.5..=1.0).contains(&scale) {
        return Err(Error::Contract(format!("scale {scale} outside [0.5, 1]")));
    }
    let (h, w) = plane_dims(image)?;
    Tensor::new(vec![1, h, w], affine(image.data(), h, w, 0.0, scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob() -> Tensor {
        // a filled 10×6 rectangle centred in a 28×28 canvas
        let mut d = vec![0.0; 28 * 28];
        for y in 9..19 {
            for x in 11..17 {
                d[y * 28 + x] = 1.0;
            }
        }
        Tensor::new(vec![1, 28, 28], d).unwrap()
    }

    #[test]
    fn zero_angle_and_unit_scale_are_identity() {
        let x = blob();
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
        assert_eq!(rescale(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn single_pixel_moves_to_rotated_coordinate() {
        // Independent coordinate map: a counter-clockwise quarter turn about
        // (13.5, 13.5) sends column c, row r to column r, row 27 − c.
        let mut d = vec![0.0; 28 * 28];
        let (r, c) = (6usize, 20usize);
        d[r * 28 + c] = 1.0;
        let x = Tensor::new(vec![1, 28, 28], d).unwrap();
        let y = rotate(&x, 90.0).unwrap();
        let (mut wy, mut wx, mut mass) = (0.0, 0.0, 0.0);
        for yy in 0..28 {
            for xx in 0..28 {
                let v = y.data()[yy * 28 + xx];
                mass += v;
                wy += v * yy as f64;
                wx += v * xx as f64;
            }
        }
        let (ey, ex) = ((27 - c) as f64, r as f64);
        assert!((mass - 1.0).abs() < 1e-9);
        assert!((wy / mass - ey).abs() <= 1.0 && (wx / mass - ex).abs() <= 1.0);
    }

    #[test]
    fn half_scale_halves_extent_and_quarters_mass() {
        let x = blob();
        let y = rescale(&x, 0.5).unwrap();
        let bbox = |t: &Tensor| {
            let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
            for yy in 0..28 {
                for xx in 0..28 {
                    if t.data()[yy * 28 + xx] > 0.5 {
                        x0 = x0.min(xx);
                        x1 = x1.max(xx);
                        y0 = y0.min(yy);
                        y1 = y1.max(yy);
                    }
                }
            }
            ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64)
        };
        let (w0, h0) = bbox(&x);
        let (w1, h1) = bbox(&y);
        assert!((w1 - w0 / 2.0).abs() <= 1.0, "{w0} -> {w1}");
        assert!((h1 - h0 / 2.0).abs() <= 1.0, "{h0} -> {h1}");
        let m0: f64 = x.data().iter().sum();
        let m1: f64 = y.data().iter().sum();
        assert!((m1 / m0 - 0.25).abs() <= 0.025, "{}", m1 / m0);
    }

    #[test]
    fn out_of_range_parameters() {
        assert!(rotate(&blob(), 91.0).is_err());
        assert!(rescale(&blob(), 0.4).is_err());
    }
}
