//! Zero-mean normalized cross-correlation scoring: region extraction,
//! exhaustive shift search, and landmark-based scale normalization.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::PointSet3;
use crate::image::Image;

/// An axis-aligned pixel region described by its center and half extents;
/// the covered range is `[center - half, center + half]` inclusive per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub center: (i64, i64),
    pub half: (i64, i64),
}

impl Region {
    pub fn new(center: (i64, i64), half: (i64, i64)) -> Result<Self> {
        if half.0 < 1 || half.1 < 1 {
            return Err(Error::InvalidParameter("region half extents must be at least 1"));
        }
        Ok(Self { center, half })
    }

    pub fn x_min(&self) -> i64 {
        self.center.0 - self.half.0
    }

    pub fn x_max(&self) -> i64 {
        self.center.0 + self.half.0
    }

    pub fn y_min(&self) -> i64 {
        self.center.1 - self.half.1
    }

    pub fn y_max(&self) -> i64 {
        self.center.1 + self.half.1
    }

    pub fn width(&self) -> i64 {
        2 * self.half.0 + 1
    }

    pub fn height(&self) -> i64 {
        2 * self.half.1 + 1
    }

    /// Shrinks and shifts the region so it fits inside a `w x h` image,
    /// keeping the half extents at least 1.
    pub fn clamped(&self, w: u32, h: u32) -> Result<Region> {
        let clamp_axis = |c: i64, half: i64, size: i64| -> Result<(i64, i64)> {
            if size < 3 {
                return Err(Error::InvalidParameter("image too small for a region"));
            }
            let mut half = half.min((size - 1) / 2);
            if half < 1 {
                half = 1;
            }
            let c = c.clamp(half, size - 1 - half);
            Ok((c, half))
        };
        let (cx, hx) = clamp_axis(self.center.0, self.half.0, w as i64)?;
        let (cy, hy) = clamp_axis(self.center.1, self.half.1, h as i64)?;
        Region::new((cx, cy), (hx, hy))
    }
}

/// Result of a shift search: the maximizing coefficient, the shift, and the
/// matched center `(h + dh, v + dv)` in the target image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZnccResult {
    pub coefficient: f64,
    pub shift: (i32, i32),
    pub matched_center: (i64, i64),
}

/// ZNCC between two equal-length sample blocks: centered covariance over the
/// product of centered standard deviations. Errors when either block has
/// zero variance.
pub fn zncc(rf: &[f64], rt: &[f64]) -> Result<f64> {
    if rf.len() != rt.len() {
        return Err(Error::LengthMismatch { expected: rf.len(), got: rt.len() });
    }
    if rf.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    let n = rf.len() as f64;
    let mf = rf.iter().sum::<f64>() / n;
    let mt = rt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vf = 0.0;
    let mut vt = 0.0;
    for (&a, &b) in rf.iter().zip(rt.iter()) {
        let da = a - mf;
        let db = b - mt;
        cov += da * db;
        vf += da * da;
        vt += db * db;
    }
    if vf <= 0.0 || vt <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(cov / libm::sqrt(vf * vt))
}

/// Exhaustive ZNCC search over integer shifts `(dh, dv)` in
/// `[-max_shift, max_shift]^2`: the fixed region is read from `pred`, the
/// shifted window from `truth`.
///
/// Masked pixels in the prediction region are excluded from the correlation
/// (the same positions for every shift); a shift whose target window leaves
/// the image or covers a masked target pixel at a needed position is
/// inadmissible. Ties break toward the smallest `|dh| + |dv|`, then
/// lexicographically.
pub fn zncc_search(
    pred: &Image,
    truth: &Image,
    region: &Region,
    max_shift: i32,
) -> Result<ZnccResult> {
    if region.x_min() < 0
        || region.y_min() < 0
        || region.x_max() >= pred.width() as i64
        || region.y_max() >= pred.height() as i64
    {
        return Err(Error::InvalidParameter("region exceeds prediction bounds"));
    }

    // Fixed prediction samples with their in-region offsets; masked
    // prediction pixels drop out of every shift alike.
    let mut offsets = Vec::new();
    let mut rf = Vec::new();
    for dy in 0..region.height() {
        for dx in 0..region.width() {
            let x = (region.x_min() + dx) as u32;
            let y = (region.y_min() + dy) as u32;
            if pred.is_valid(x, y) {
                offsets.push((dx, dy));
                rf.push(pred.luma(x, y));
            }
        }
    }
    if rf.len() < 2 {
        return Err(Error::ZeroVariance);
    }

    let mut best: Option<ZnccResult> = None;
    let mut rt = Vec::with_capacity(rf.len());
    for dv in -max_shift..=max_shift {
        'shift: for dh in -max_shift..=max_shift {
            let x0 = region.x_min() + dh as i64;
            let y0 = region.y_min() + dv as i64;
            if x0 < 0
                || y0 < 0
                || x0 + region.width() > truth.width() as i64
                || y0 + region.height() > truth.height() as i64
            {
                continue;
            }
            rt.clear();
            for &(dx, dy) in &offsets {
                let x = (x0 + dx) as u32;
                let y = (y0 + dy) as u32;
                if !truth.is_valid(x, y) {
                    continue 'shift;
                }
                rt.push(truth.luma(x, y));
            }
            let Ok(c) = zncc(&rf, &rt) else { continue };
            let cand = ZnccResult {
                coefficient: c,
                shift: (dh, dv),
                matched_center: (region.center.0 + dh as i64, region.center.1 + dv as i64),
            };
            best = Some(match best {
                None => cand,
                Some(cur) => {
                    if c > cur.coefficient
                        || (c == cur.coefficient && shift_rank(cand.shift) < shift_rank(cur.shift))
                    {
                        cand
                    } else {
                        cur
                    }
                }
            });
        }
    }
    best.ok_or(Error::NoAdmissibleShift)
}

fn shift_rank(s: (i32, i32)) -> (i32, i32, i32) {
    (s.0.abs() + s.1.abs(), s.0, s.1)
}

/// Scale factor between two landmark sets: the ratio of mean pairwise
/// image-plane distances, target over source.
pub fn landmark_scale_factor(lm_f: &PointSet3, lm_t: &PointSet3) -> Result<f64> {
    if lm_f.len() < 2 || lm_t.len() < 2 {
        return Err(Error::DegenerateScale);
    }
    let mean_pairwise = |set: &PointSet3| -> f64 {
        let n = set.len();
        let mut acc = 0.0;
        let mut cnt = 0u64;
        for i in 0..n {
            for j in i + 1..n {
                let d = set[i] - set[j];
                acc += libm::sqrt(d.x * d.x + d.y * d.y);
                cnt += 1;
            }
        }
        acc / cnt as f64
    };
    let df = mean_pairwise(lm_f);
    let dt = mean_pairwise(lm_t);
    if !(df > 0.0 && dt > 0.0) {
        return Err(Error::DegenerateScale);
    }
    Ok(dt / df)
}

/// Resamples the prediction image by the landmark scale factor
/// (nearest-pixel); a factor of 1 is the identity map.
pub fn scale_normalize(i_f: &Image, lm_f: &PointSet3, lm_t: &PointSet3) -> Result<Image> {
    let factor = landmark_scale_factor(lm_f, lm_t)?;
    Ok(resample_nearest(i_f, factor))
}

/// Nearest-pixel resampling by a positive scale factor.
pub fn resample_nearest(image: &Image, factor: f64) -> Image {
    let w = libm::round(image.width() as f64 * factor).max(1.0) as u32;
    let h = libm::round(image.height() as f64 * factor).max(1.0) as u32;
    let c = image.channels();
    let mut out = Image::blank(w, h, c).expect("positive dimensions");
    for y in 0..h {
        for x in 0..w {
            let sx = (libm::floor(x as f64 / factor) as i64).clamp(0, image.width() as i64 - 1);
            let sy = (libm::floor(y as f64 / factor) as i64).clamp(0, image.height() as i64 - 1);
            if image.is_valid(sx as u32, sy as u32) {
                let px: Vec<u8> = image.pixel(sx as u32, sy as u32).to_vec();
                out.set_pixel(x, y, &px);
            }
        }
    }
    out
}

/// Scales landmark coordinates by the same factor used to resample their
/// image.
pub fn scale_landmarks(lm: &PointSet3, factor: f64) -> PointSet3 {
    PointSet3::new(lm.iter().map(|p| p * factor).collect()).expect("scaling keeps finiteness")
}

/// Indices of the mouth landmarks in the 68-point annotation convention.
pub const MOUTH_RANGE: core::ops::Range<usize> = 48..68;

/// Axis-aligned mouth bounding box from a 68-point landmark set, expanded by
/// `margin` pixels per side. Callers clamp to their image via
/// [`Region::clamped`].
pub fn mouth_region(landmarks: &PointSet3, margin: i64) -> Result<Region> {
    if landmarks.len() < 68 {
        return Err(Error::LandmarkConvention { got: landmarks.len() });
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for i in MOUTH_RANGE {
        let p = landmarks[i];
        x_min = x_min.min(p.x);
        x_max = x_max.max(p.x);
        y_min = y_min.min(p.y);
        y_max = y_max.max(p.y);
    }
    let mut lo_x = libm::floor(x_min) as i64 - margin;
    let mut hi_x = libm::ceil(x_max) as i64 + margin;
    let mut lo_y = libm::floor(y_min) as i64 - margin;
    let mut hi_y = libm::ceil(y_max) as i64 + margin;
    // Make spans even so the center is integral.
    if (hi_x - lo_x) % 2 != 0 {
        hi_x += 1;
    }
    if (hi_y - lo_y) % 2 != 0 {
        hi_y += 1;
    }
    if hi_x - lo_x < 2 {
        hi_x = lo_x + 2;
    }
    if hi_y - lo_y < 2 {
        hi_y = lo_y + 2;
    }
    let _ = (&mut lo_x, &mut lo_y);
    Region::new(
        ((lo_x + hi_x) / 2, (lo_y + hi_y) / 2),
        ((hi_x - lo_x) / 2, (hi_y - lo_y) / 2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..w * h).map(|_| rng.gen::<u8>()).collect();
        Image::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn zncc_self_correlation() {
        let a: Vec<f64> = (0..25).map(|i| (i * i % 17) as f64).collect();
        assert_abs_diff_eq!(zncc(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zncc_affine_invariance() {
        let a: Vec<f64> = (0..30).map(|i| (i * 13 % 23) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 17.0).collect();
        assert_abs_diff_eq!(zncc(&a, &b).unwrap(), 1.0, epsilon = 1e-9);
        let c: Vec<f64> = a.iter().map(|v| 0.01 * v - 4.0).collect();
        assert_abs_diff_eq!(zncc(&c, &b).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn zncc_negation() {
        let a: Vec<f64> = (0..30).map(|i| (i * 7 % 31) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 255.0 - v).collect();
        assert_abs_diff_eq!(zncc(&a, &b).unwrap(), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn zncc_zero_variance_rejected() {
        let a = [5.0; 10];
        let b: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(zncc(&a, &b), Err(Error::ZeroVariance)));
    }

    #[test]
    fn zncc_symmetry() {
        let a: Vec<f64> = (0..40).map(|i| ((i * 11) % 37) as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| ((i * 5 + 3) % 29) as f64).collect();
        assert_abs_diff_eq!(zncc(&a, &b).unwrap(), zncc(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn search_identity_images() {
        let img = textured_image(40, 40, 1);
        let region = Region::new((20, 20), (6, 5)).unwrap();
        let res = zncc_search(&img, &img, &region, 10).unwrap();
        assert_eq!(res.shift, (0, 0));
        assert_abs_diff_eq!(res.coefficient, 1.0, epsilon = 1e-12);
        assert_eq!(res.matched_center, (20, 20));
    }

    #[test]
    fn search_recovers_constructed_translation() {
        // truth = pred translated by (4, -3).
        let pred = textured_image(48, 48, 2);
        let mut truth_px = alloc::vec![0u8; 48 * 48];
        for y in 0..48i64 {
            for x in 0..48i64 {
                let sx = (x - 4).rem_euclid(48);
                let sy = (y + 3).rem_euclid(48);
                truth_px[(y * 48 + x) as usize] = pred.pixel(sx as u32, sy as u32)[0];
            }
        }
        let truth = Image::new(48, 48, 1, truth_px).unwrap();
        let region = Region::new((24, 24), (8, 8)).unwrap();
        let res = zncc_search(&pred, &truth, &region, 10).unwrap();
        assert_eq!(res.shift, (4, -3));
        assert_abs_diff_eq!(res.coefficient, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn search_equals_brute_force_enumeration() {
        let pred = textured_image(36, 30, 3);
        let truth = textured_image(36, 30, 4);
        let region = Region::new((17, 14), (5, 4)).unwrap();
        let max_shift = 6;
        let res = zncc_search(&pred, &truth, &region, max_shift).unwrap();

        // Brute force re-enumeration with plain loops.
        let mut best = f64::NEG_INFINITY;
        for dv in -max_shift..=max_shift {
            for dh in -max_shift..=max_shift {
                let x0 = region.x_min() + dh as i64;
                let y0 = region.y_min() + dv as i64;
                if x0 < 0
                    || y0 < 0
                    || x0 + region.width() > 36
                    || y0 + region.height() > 30
                {
                    continue;
                }
                let mut rf = Vec::new();
                let mut rt = Vec::new();
                for dy in 0..region.height() {
                    for dx in 0..region.width() {
                        rf.push(pred.luma((region.x_min() + dx) as u32, (region.y_min() + dy) as u32));
                        rt.push(truth.luma((x0 + dx) as u32, (y0 + dy) as u32));
                    }
                }
                let c = zncc(&rf, &rt).unwrap();
                if c > best {
                    best = c;
                }
            }
        }
        assert_eq!(res.coefficient, best);
        assert!(res.coefficient <= 1.0 + 1e-12);
    }

    #[test]
    fn search_skips_shifts_out_of_bounds() {
        let pred = textured_image(20, 20, 5);
        let truth = textured_image(20, 20, 6);
        // Region flush against the left edge: negative dh falls outside.
        let region = Region::new((3, 10), (3, 3)).unwrap();
        let res = zncc_search(&pred, &truth, &region, 5).unwrap();
        assert!(res.shift.0 >= -0); // left shifts were inadmissible
    }

    #[test]
    fn search_excludes_masked_pred_pixels() {
        let mut pred = textured_image(30, 30, 7);
        let truth = pred.clone();
        for y in 12..16 {
            for x in 12..16 {
                pred.set_masked(x, y);
            }
        }
        let region = Region::new((14, 14), (5, 5)).unwrap();
        let res = zncc_search(&pred, &truth, &region, 3).unwrap();
        assert_eq!(res.shift, (0, 0));
        assert_abs_diff_eq!(res.coefficient, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn search_disqualifies_masked_truth_window() {
        let pred = textured_image(30, 30, 8);
        let mut truth = pred.clone();
        // Mask the whole neighborhood of the zero-shift window.
        for y in 5..25 {
            for x in 5..25 {
                truth.set_masked(x, y);
            }
        }
        let region = Region::new((14, 14), (3, 3)).unwrap();
        assert!(matches!(
            zncc_search(&pred, &truth, &region, 2),
            Err(Error::NoAdmissibleShift)
        ));
    }

    #[test]
    fn scale_factor_identity_and_double() {
        let lm = PointSet3::from_rows(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 8.0, 0.0]])
            .unwrap();
        assert_abs_diff_eq!(landmark_scale_factor(&lm, &lm).unwrap(), 1.0, epsilon = 1e-12);
        let doubled = PointSet3::new(lm.iter().map(|p| p * 2.0).collect()).unwrap();
        assert_abs_diff_eq!(landmark_scale_factor(&lm, &doubled).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn scale_normalize_identity_is_exact() {
        let img = textured_image(24, 18, 9);
        let lm = PointSet3::from_rows(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [3.0, 8.0, 0.0]])
            .unwrap();
        let out = scale_normalize(&img, &lm, &lm).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn scale_normalize_upsamples_two_x() {
        let img = textured_image(10, 8, 10);
        let lm = PointSet3::from_rows(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
            .unwrap();
        let doubled = PointSet3::new(lm.iter().map(|p| p * 2.0).collect()).unwrap();
        let out = scale_normalize(&img, &lm, &doubled).unwrap();
        assert_eq!(out.width(), 20);
        assert_eq!(out.height(), 16);
        for y in 0..16u32 {
            for x in 0..20u32 {
                assert_eq!(out.pixel(x, y)[0], img.pixel(x / 2, y / 2)[0]);
            }
        }
    }

    #[test]
    fn scale_factor_coincident_landmarks_rejected() {
        let lm = PointSet3::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        let other = PointSet3::from_rows(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            landmark_scale_factor(&lm, &other),
            Err(Error::DegenerateScale)
        ));
        let single = PointSet3::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            landmark_scale_factor(&single, &other),
            Err(Error::DegenerateScale)
        ));
    }

    #[test]
    fn mouth_region_bounding_box() {
        // 68 landmarks; the mouth block spans x in [40, 60], y in [80, 90].
        let mut rows = alloc::vec![[0.0f64, 0.0, 0.0]; 68];
        for (i, row) in rows.iter_mut().enumerate().take(48) {
            *row = [i as f64, i as f64, 0.0];
        }
        for (k, row) in rows.iter_mut().enumerate().skip(48) {
            let t = (k - 48) as f64 / 19.0;
            *row = [40.0 + 20.0 * t, 80.0 + 10.0 * t, 0.0];
        }
        let lm = PointSet3::from_rows(&rows).unwrap();
        let region = mouth_region(&lm, 5).unwrap();
        assert_eq!(region.x_min(), 35);
        assert_eq!(region.x_max(), 65);
        assert_eq!(region.y_min(), 75);
        assert_eq!(region.y_max(), 95);

        let tight = mouth_region(&lm, 0).unwrap();
        assert_eq!(tight.x_min(), 40);
        assert_eq!(tight.x_max(), 60);
        assert_eq!(tight.y_min(), 80);
        assert_eq!(tight.y_max(), 90);
    }

    #[test]
    fn mouth_region_needs_68_landmarks() {
        let lm = PointSet3::new((0..50).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect())
            .unwrap();
        assert!(matches!(
            mouth_region(&lm, 5),
            Err(Error::LandmarkConvention { got: 50 })
        ));
    }

    #[test]
    fn region_clamping() {
        let r = Region::new((2, 2), (5, 5)).unwrap();
        let c = r.clamped(20, 20).unwrap();
        assert!(c.x_min() >= 0 && c.y_min() >= 0);
        assert!(c.x_max() < 20 && c.y_max() < 20);
        assert_eq!(c.half, (5, 5));
    }
}
