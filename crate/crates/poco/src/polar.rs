//! Cartesian-to-polar resampling of annular images.
//!
//! The transform reads a square image along rays from its center: output
//! row i holds radius `i * d`, output column j holds angle `j * omega`,
//! with `d = r_max / rows`, `omega = 360 / cols` degrees and
//! `r_max = side / 2`. A rotation of the input about its center by `k *
//! omega` becomes a cyclic shift of the output by `k` columns, which is
//! what lets the downstream augmentations treat rotation as a cheap
//! column roll.

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;

#[derive(Debug, Clone)]
pub struct PolarGrid {
    side: usize,
    rows: usize,
    cols: usize,
    radial_spacing: f64,
    angular_spacing_deg: f64,
    /// (x, y) source coordinates, row-major rows x cols
    samples: Vec<(f64, f64)>,
}

impl PolarGrid {
    /// Grid for a `side`-pixel square input, resampled to `rows` radial
    /// steps by `cols` angular steps. The outermost radius is the
    /// inscribed circle, `side / 2`.
    pub fn new(side: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::with_rmax(side, rows, cols, side as f64 / 2.0)
    }

    /// Same grid with an explicit outer radius in pixels; radii beyond
    /// the image read the zero padding, smaller values zoom into the
    /// center.
    pub fn with_rmax(side: usize, rows: usize, cols: usize, r_max: f64) -> Result<Self> {
        if side < 2 || rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "polar grid: side {side}, {rows}x{cols} output is degenerate"
            )));
        }
        if !(r_max > 0.0 && r_max <= side as f64) {
            return Err(Error::invalid(format!(
                "polar grid: r_max {r_max} outside (0, {side}]"
            )));
        }
        let d = r_max / rows as f64;
        let omega = 360.0 / cols as f64;
        let cx = (side as f64 - 1.0) / 2.0;
        let cy = cx;
        let mut samples = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let r = i as f64 * d;
            for j in 0..cols {
                let theta = (j as f64 * omega).to_radians();
                samples.push((cx + r * theta.cos(), cy + r * theta.sin()));
            }
        }
        Ok(PolarGrid {
            side,
            rows,
            cols,
            radial_spacing: d,
            angular_spacing_deg: omega,
            samples,
        })
    }

    /// Square grid with as many radial and angular steps as input pixels.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side, side)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn radial_spacing(&self) -> f64 {
        self.radial_spacing
    }

    pub fn angular_spacing_deg(&self) -> f64 {
        self.angular_spacing_deg
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }
}

/// Resample `img` onto the polar grid. The image must be square with the
/// grid's side length.
pub fn warp_to_polar(grid: &PolarGrid, img: &ImageBuf) -> Result<ImageBuf> {
    if img.width() != grid.side || img.height() != grid.side {
        return Err(Error::shape(format!(
            "warp_to_polar: image {}x{} does not match grid side {}",
            img.width(),
            img.height(),
            grid.side
        )));
    }
    let mut out = ImageBuf::zeros(grid.cols, grid.rows, img.channels())?;
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let (x, y) = grid.samples[i * grid.cols + j];
            for ch in 0..img.channels() {
                out.set(j, i, ch, img.sample_bilinear(x, y, ch) as f32);
            }
        }
    }
    Ok(out)
}

/// Rotate image content counter-clockwise (in the x-right, y-down frame)
/// by `degrees` about the image center, bilinear, zero fill outside.
pub fn rotate_image(img: &ImageBuf, degrees: f64) -> ImageBuf {
    let (w, h) = (img.width(), img.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut out = ImageBuf::zeros(w, h, img.channels()).expect("same geometry as input");
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // inverse rotation of the output coordinate
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            for ch in 0..img.channels() {
                out.set(x, y, ch, img.sample_bilinear(sx, sy, ch) as f32);
            }
        }
    }
    out
}

/// Roll columns right by `columns` (negative rolls left):
/// `out[row][col] = in[row][(col - columns) mod width]`.
pub fn cyclic_shift(img: &ImageBuf, columns: i64) -> ImageBuf {
    let w = img.width() as i64;
    let mut out = img.clone();
    let shift = columns.rem_euclid(w);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let src = ((x as i64 - shift).rem_euclid(w)) as usize;
            for ch in 0..img.channels() {
                out.set(x, y, ch, img.get(src, y, ch));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(side: usize) -> ImageBuf {
        let mut img = ImageBuf::zeros(side, side, 1).unwrap();
        for y in 0..side {
            for x in 0..side {
                let v = 0.5
                    + 0.2 * ((x as f64) * 0.17).sin()
                    + 0.2 * ((y as f64) * 0.13).cos()
                    + 0.05 * (((x + y) as f64) * 0.05).sin();
                img.set(x, y, 0, v as f32);
            }
        }
        img
    }

    #[test]
    fn grid_constants_for_canonical_size() {
        let g = PolarGrid::square(224).unwrap();
        assert_eq!(g.radial_spacing(), 0.5);
        assert_eq!(g.angular_spacing_deg(), 360.0 / 224.0);
        assert_eq!(g.samples().len(), 224 * 224);
        let c = (224.0 - 1.0) / 2.0;
        for &(x, y) in &g.samples()[..224] {
            assert_eq!((x, y), (c, c), "row 0 sits on the center");
        }
    }

    #[test]
    fn explicit_rmax_scales_the_radii() {
        // the default is exactly with_rmax(side/2)
        let default = PolarGrid::square(64).unwrap();
        let explicit = PolarGrid::with_rmax(64, 64, 64, 32.0).unwrap();
        assert_eq!(default.samples(), explicit.samples());

        // half the radius → half the spacing, same center row
        let zoomed = PolarGrid::with_rmax(64, 64, 64, 16.0).unwrap();
        assert_eq!(zoomed.radial_spacing(), 0.25);
        assert_eq!(zoomed.samples()[0], default.samples()[0]);

        for bad in [0.0, -1.0, 65.0, f64::NAN] {
            assert!(PolarGrid::with_rmax(64, 64, 64, bad).is_err(), "r_max {bad}");
        }
    }

    #[test]
    fn all_samples_stay_inside_the_image() {
        for side in [16usize, 64, 224] {
            let g = PolarGrid::square(side).unwrap();
            let hi = side as f64 - 1.0;
            for &(x, y) in g.samples() {
                assert!((0.0..=hi).contains(&x) && (0.0..=hi).contains(&y), "({x}, {y})");
            }
        }
    }

    #[test]
    fn constant_image_warps_to_the_same_constant() {
        let img = ImageBuf::new(64, 64, 3, vec![0.7; 64 * 64 * 3]).unwrap();
        let g = PolarGrid::square(64).unwrap();
        let warped = warp_to_polar(&g, &img).unwrap();
        for &v in warped.data() {
            assert!((f64::from(v) - 0.7).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn rotation_becomes_a_column_shift() {
        let side = 64;
        let img = smooth(side);
        let g = PolarGrid::square(side).unwrap();
        let base = warp_to_polar(&g, &img).unwrap();
        for k in [1i64, 16, 32] {
            let rotated = rotate_image(&img, k as f64 * g.angular_spacing_deg());
            let via_rotation = warp_to_polar(&g, &rotated).unwrap();
            let via_shift = cyclic_shift(&base, k);
            // skip two rows at each radial extreme: the center rows alias
            // heavily and the outermost touch the zero padding
            let mut total = 0.0f64;
            let mut count = 0usize;
            for row in 2..side - 2 {
                for col in 0..side {
                    let a = via_rotation.get(col, row, 0);
                    let b = via_shift.get(col, row, 0);
                    total += f64::from((a - b).abs());
                    count += 1;
                }
            }
            let mean = total / count as f64;
            assert!(mean <= 0.02, "k = {k}: mean abs diff {mean}");
        }
    }

    #[test]
    fn corners_are_never_sampled() {
        let side = 64;
        let clean = smooth(side);
        let mut poisoned = clean.clone();
        for (x, y) in [(0, 0), (side - 1, 0), (0, side - 1), (side - 1, side - 1)] {
            poisoned.set(x, y, 0, 1000.0);
        }
        let g = PolarGrid::square(side).unwrap();
        let a = warp_to_polar(&g, &clean).unwrap();
        let b = warp_to_polar(&g, &poisoned).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn warp_is_linear_in_the_image() {
        let side = 32;
        let a = smooth(side);
        let mut b = smooth(side);
        for v in b.data_mut() {
            *v = 1.0 - *v;
        }
        let mut mixed = a.clone();
        for (m, (&av, &bv)) in mixed
            .data_mut()
            .iter_mut()
            .zip(a.data().iter().zip(b.data()))
        {
            *m = 0.3 * av + 0.6 * bv;
        }
        let g = PolarGrid::square(side).unwrap();
        let wa = warp_to_polar(&g, &a).unwrap();
        let wb = warp_to_polar(&g, &b).unwrap();
        let wm = warp_to_polar(&g, &mixed).unwrap();
        for ((&m, &x), &y) in wm.data().iter().zip(wa.data()).zip(wb.data()) {
            assert!((m - (0.3 * x + 0.6 * y)).abs() < 1e-5);
        }
    }

    #[test]
    fn blob_radius_maps_to_a_stable_row() {
        let side = 64;
        let g = PolarGrid::square(side).unwrap();
        let c = (side as f64 - 1.0) / 2.0;
        let radius = 10.0;
        for angle_deg in [0.0f64, 37.0, 190.0] {
            let (s, co) = angle_deg.to_radians().sin_cos();
            let (bx, by) = (c + radius * co, c + radius * s);
            let mut img = ImageBuf::zeros(side, side, 1).unwrap();
            for y in 0..side {
                for x in 0..side {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    img.set(x, y, 0, (-d2 / 8.0).exp() as f32);
                }
            }
            let warped = warp_to_polar(&g, &img).unwrap();
            let mut best_row = 0;
            let mut best_sum = -1.0f64;
            for row in 0..side {
                let sum: f64 = (0..side)
                    .map(|col| f64::from(warped.get(col, row, 0)))
                    .sum();
                if sum > best_sum {
                    best_sum = sum;
                    best_row = row;
                }
            }
            let expect = (radius / g.radial_spacing()).round() as i64;
            assert!(
                (best_row as i64 - expect).abs() <= 1,
                "angle {angle_deg}: row {best_row}, expected ~{expect}"
            );
        }
    }

    #[test]
    fn cyclic_shift_wraps_and_inverts() {
        let img = smooth(16);
        assert_eq!(cyclic_shift(&img, 0), img);
        assert_eq!(cyclic_shift(&img, 16), img);
        assert_eq!(cyclic_shift(&cyclic_shift(&img, 5), -5), img);
        let one = cyclic_shift(&img, 1);
        assert_eq!(one.get(1, 3, 0), img.get(0, 3, 0));
        assert_eq!(one.get(0, 3, 0), img.get(15, 3, 0));
    }
}
