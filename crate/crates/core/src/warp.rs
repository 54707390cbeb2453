//! Inverse-mapped pixel warping from a posed input image to the frontal
//! grid, plus mirror-symmetry hole filling.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::geometry::SimilarityTransform;
use crate::image::{DepthMap, Image};

/// Pixel sampling mode for [`warp`]. Nearest keeps integer-part sampling
/// and bit-exact identity warps; bilinear trades that for smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Nearest,
    Bilinear,
}

/// Depth slack under which two frontal pixels claiming the same input pixel
/// are both considered visible.
const DEPTH_TIE_TOL: f64 = 1e-9;

/// Integer part with an epsilon guard: coordinates within 1e-9 of an integer
/// snap to it, absorbing rounding noise from upstream pose estimates that
/// would otherwise flip `floor` right at pixel boundaries.
fn int_part(v: f64) -> i64 {
    let r = libm::round(v);
    if libm::fabs(v - r) <= 1e-9 * (1.0 + libm::fabs(r)) {
        r as i64
    } else {
        libm::floor(v) as i64
    }
}

/// Warps the input image onto the frontal grid.
///
/// Every occupied frontal pixel `(A1, A2, A3)` maps to input coordinates
/// through the top two rows of the inverse pose,
/// `B = scale' R'[0..2] A + t'[0..2]`, and copies the input pixel at the
/// integer part of `B`. Frontal pixels mapping out of bounds are masked.
/// When several frontal pixels land on the same input pixel, only those
/// within a hair of the smallest frontal depth stay visible; the rest are
/// masked as self-occluded.
pub fn warp(input: &Image, depth: &DepthMap, t_inv: &SimilarityTransform, sampling: Sampling) -> Image {
    let w = depth.width();
    let h = depth.height();
    let mut out = Image::blank(w, h, input.channels()).expect("depth grid is nonempty");

    let r = t_inv.rotation_matrix();
    let scale = t_inv.scale();
    let t = t_inv.translation();

    // Forward-map every occupied frontal pixel and keep, per claimed input
    // pixel, the smallest frontal depth (source-coverage buffer).
    let in_w = input.width() as usize;
    let in_h = input.height() as usize;
    let mut nearest = alloc::vec![f64::INFINITY; in_w * in_h];
    let mut mapped: Vec<Option<(i64, i64, f64, f64, f64)>> =
        alloc::vec![None; w as usize * h as usize];

    for row in 0..h {
        for col in 0..w {
            if !depth.is_occupied(col, row) {
                continue;
            }
            let a = Vector3::new(
                depth.origin[0] + col as f64,
                depth.origin[1] + row as f64,
                depth.depth(col, row),
            );
            let b1 = scale * (r[(0, 0)] * a.x + r[(0, 1)] * a.y + r[(0, 2)] * a.z) + t.x;
            let b2 = scale * (r[(1, 0)] * a.x + r[(1, 1)] * a.y + r[(1, 2)] * a.z) + t.y;
            let bi = int_part(b1);
            let bj = int_part(b2);
            if !input.in_bounds(bi, bj) {
                continue;
            }
            let key = bj as usize * in_w + bi as usize;
            if a.z < nearest[key] {
                nearest[key] = a.z;
            }
            mapped[row as usize * w as usize + col as usize] = Some((bi, bj, a.z, b1, b2));
        }
    }

    for row in 0..h {
        for col in 0..w {
            let Some((bi, bj, z, b1, b2)) = mapped[row as usize * w as usize + col as usize]
            else {
                continue;
            };
            let key = bj as usize * in_w + bi as usize;
            if z > nearest[key] + DEPTH_TIE_TOL * (1.0 + libm::fabs(nearest[key])) {
                continue; // occluded: a nearer surface claims this input pixel
            }
            match sampling {
                Sampling::Nearest => {
                    if input.is_valid(bi as u32, bj as u32) {
                        let px: Vec<u8> = input.pixel(bi as u32, bj as u32).to_vec();
                        out.set_pixel(col, row, &px);
                    }
                }
                Sampling::Bilinear => {
                    if let Some(px) = bilinear_sample(input, b1, b2) {
                        out.set_pixel(col, row, &px);
                    }
                }
            }
        }
    }
    let _ = in_h;
    out
}

fn bilinear_sample(input: &Image, x: f64, y: f64) -> Option<Vec<u8>> {
    let x0 = libm::floor(x) as i64;
    let y0 = libm::floor(y) as i64;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut acc = alloc::vec![0.0f64; input.channels() as usize];
    for (dx, dy, wgt) in [
        (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let (sx, sy) = (x0 + dx, y0 + dy);
        if !input.in_bounds(sx, sy) || !input.is_valid(sx as u32, sy as u32) {
            return None;
        }
        for (a, &v) in acc.iter_mut().zip(input.pixel(sx as u32, sy as u32)) {
            *a += wgt * v as f64;
        }
    }
    Some(acc.iter().map(|v| libm::round(*v).clamp(0.0, 255.0) as u8).collect())
}

/// Fills masked pixels from their mirror across the vertical axis at
/// `axis_x`, judged against the input mask so the pass is idempotent. The
/// mirror column is `round(2 * axis_x) - col`, an exact integer involution.
pub fn soft_symmetry_fill(image: &Image, axis_x: f64) -> Image {
    let mut out = image.clone();
    let m = libm::round(2.0 * axis_x) as i64;
    for row in 0..image.height() {
        for col in 0..image.width() {
            if image.is_valid(col, row) {
                continue;
            }
            let mirror = m - col as i64;
            if mirror >= 0
                && (mirror as u64) < image.width() as u64
                && image.is_valid(mirror as u32, row)
            {
                let px: Vec<u8> = image.pixel(mirror as u32, row).to_vec();
                out.set_pixel(col, row, &px);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use nalgebra::Vector3 as V3;

    fn gradient_image(w: u32, h: u32) -> Image {
        let px: Vec<u8> = (0..w * h).map(|i| (i * 7 % 251) as u8).collect();
        Image::new(w, h, 1, px).unwrap()
    }

    fn constant_depth(origin: [f64; 2], w: u32, h: u32, z: f64) -> DepthMap {
        let mut d = DepthMap::unoccupied(origin, w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                d.merge(x, y, z);
            }
        }
        d
    }

    #[test]
    fn identity_warp_is_bit_exact() -> Result<()> {
        let img = gradient_image(16, 12);
        let depth = constant_depth([0.0, 0.0], 16, 12, 3.5);
        let out = warp(&img, &depth, &SimilarityTransform::identity(), Sampling::Nearest);
        assert_eq!(out.pixels(), img.pixels());
        assert!(out.mask().iter().all(|&m| m));
        Ok(())
    }

    #[test]
    fn translation_warp_shifts_pixels() -> Result<()> {
        // Inverse pose translating by (3, 5): output (x, y) reads input
        // (x + 3, y + 5).
        let img = gradient_image(20, 20);
        let depth = constant_depth([0.0, 0.0], 10, 10, 0.0);
        let t_inv =
            SimilarityTransform::new(1.0, [1.0, 0.0, 0.0, 0.0], V3::new(3.0, 5.0, 0.0))?;
        let out = warp(&img, &depth, &t_inv, Sampling::Nearest);
        for y in 0..10u32 {
            for x in 0..10u32 {
                assert!(out.is_valid(x, y));
                assert_eq!(out.pixel(x, y)[0], img.pixel(x + 3, y + 5)[0]);
            }
        }
        Ok(())
    }

    #[test]
    fn out_of_bounds_pixels_masked() -> Result<()> {
        let img = gradient_image(8, 8);
        let depth = constant_depth([0.0, 0.0], 8, 8, 0.0);
        let t_inv =
            SimilarityTransform::new(1.0, [1.0, 0.0, 0.0, 0.0], V3::new(5.0, 0.0, 0.0))?;
        let out = warp(&img, &depth, &t_inv, Sampling::Nearest);
        for y in 0..8u32 {
            for x in 0..8u32 {
                if x < 3 {
                    assert!(out.is_valid(x, y));
                } else {
                    assert!(!out.is_valid(x, y));
                    assert_eq!(out.pixel(x, y)[0], 255);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn unoccupied_pixels_masked() {
        let img = gradient_image(8, 8);
        let mut depth = DepthMap::unoccupied([0.0, 0.0], 8, 8).unwrap();
        depth.merge(2, 2, 0.0);
        let out = warp(&img, &depth, &SimilarityTransform::identity(), Sampling::Nearest);
        assert!(out.is_valid(2, 2));
        assert!(!out.is_valid(0, 0));
        assert_eq!(out.pixel(0, 0)[0], 255);
    }

    #[test]
    fn occlusion_masks_farther_of_two_claimants() -> Result<()> {
        // Two frontal columns collapse onto one input column under a 0.5x
        // shrink; the nearer-depth pixel wins, the farther is masked.
        let img = gradient_image(8, 4);
        let mut depth = DepthMap::unoccupied([0.0, 0.0], 2, 1).unwrap();
        depth.merge(0, 0, 1.0);
        depth.merge(1, 0, 5.0); // farther
        let t_inv = SimilarityTransform::new(0.5, [1.0, 0.0, 0.0, 0.0], V3::zeros())?;
        let out = warp(&img, &depth, &t_inv, Sampling::Nearest);
        assert!(out.is_valid(0, 0));
        assert!(!out.is_valid(1, 0));
        Ok(())
    }

    #[test]
    fn bilinear_interpolates_between_pixels() -> Result<()> {
        let img = Image::new(2, 1, 1, alloc::vec![0, 100]).unwrap();
        let depth = constant_depth([0.5, 0.0], 1, 1, 0.0);
        let out = warp(&img, &depth, &SimilarityTransform::identity(), Sampling::Bilinear);
        assert_eq!(out.pixel(0, 0)[0], 50);
        Ok(())
    }

    #[test]
    fn soft_symmetry_no_op_on_valid_image() {
        let img = gradient_image(9, 5);
        let filled = soft_symmetry_fill(&img, 4.0);
        assert_eq!(filled, img);
    }

    #[test]
    fn soft_symmetry_fills_masked_left_half() {
        let mut img = gradient_image(10, 4);
        for y in 0..4 {
            for x in 0..5 {
                img.set_masked(x, y);
            }
        }
        let filled = soft_symmetry_fill(&img, 4.5);
        for y in 0..4u32 {
            for x in 0..5u32 {
                let mirror = 9 - x;
                assert!(filled.is_valid(x, y));
                assert_eq!(filled.pixel(x, y)[0], img.pixel(mirror, y)[0]);
            }
        }
    }

    #[test]
    fn soft_symmetry_leaves_pixel_without_donor() {
        let mut img = gradient_image(10, 1);
        img.set_masked(2, 0);
        img.set_masked(7, 0); // its mirror across 4.5
        let filled = soft_symmetry_fill(&img, 4.5);
        assert!(!filled.is_valid(2, 0));
        assert!(!filled.is_valid(7, 0));
    }

    #[test]
    fn soft_symmetry_idempotent() {
        let mut img = gradient_image(11, 3);
        img.set_masked(1, 0);
        img.set_masked(2, 1);
        img.set_masked(8, 1); // mirror pair of (2, 1) across 5.0
        img.set_masked(10, 2);
        let once = soft_symmetry_fill(&img, 5.0);
        let twice = soft_symmetry_fill(&once, 5.0);
        assert_eq!(once, twice);
    }
}
