//! Software rasterization of a triangulated vertex set into a dense depth
//! map, with optional per-vertex attribute interpolation.

use alloc::vec::Vec;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::PointSet3;
use crate::image::DepthMap;

/// Barycentric weights of a point with respect to a triangle. Inside the
/// triangle iff all three weights lie in `[0, 1]` (they always sum to 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Barycentric {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Barycentric {
    pub fn is_inside(&self) -> bool {
        self.a1 >= 0.0 && self.a2 >= 0.0 && self.a3 >= 0.0
    }
}

/// Pixel grid of the output depth map: pixel `(col, row)` samples the plane
/// point `origin + (col, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub width: u32,
    pub height: u32,
}

const DEGENERATE_DET: f64 = 1e-12;

/// Solves for the barycentric coordinates of `p` in the triangle `tri`.
/// Errors on degenerate (near-zero-area) triangles.
pub fn barycentric_coords(p: Vector2<f64>, tri: &[Vector2<f64>; 3]) -> Result<Barycentric> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let det = e1.x * e2.y - e1.y * e2.x;
    if libm::fabs(det) <= DEGENERATE_DET {
        return Err(Error::DegenerateTriangle);
    }
    let d = p - tri[0];
    let a2 = (d.x * e2.y - d.y * e2.x) / det;
    let a3 = (e1.x * d.y - e1.y * d.x) / det;
    Ok(Barycentric { a1: 1.0 - a2 - a3, a2, a3 })
}

/// Rasterization output: the depth buffer plus, per covered pixel, the
/// triangle index and barycentric weights of the nearest surface sample.
#[derive(Debug, Clone)]
pub struct RasterOutput {
    pub depth: DepthMap,
    /// Winning triangle index per pixel (`u32::MAX` when unoccupied).
    pub triangle: Vec<u32>,
    /// Barycentric weights of the winning sample per pixel.
    pub bary: Vec<[f64; 3]>,
}

/// Rasterizes the projected mesh onto the grid. Each covered pixel receives
/// the depth interpolated from the triangle's vertex depths; overlapping
/// triangles resolve to the smallest (nearest) depth, ties keeping the
/// earlier triangle. Errors if every triangle is degenerate in projection.
pub fn rasterize_mesh(
    verts: &PointSet3,
    triangles: &[[u32; 3]],
    grid: &GridSpec,
) -> Result<RasterOutput> {
    let mut depth = DepthMap::unoccupied(grid.origin, grid.width, grid.height)?;
    let npix = grid.width as usize * grid.height as usize;
    let mut tri_buf = alloc::vec![u32::MAX; npix];
    let mut bary_buf = alloc::vec![[0.0f64; 3]; npix];

    let mut any = false;
    for (tidx, tri) in triangles.iter().enumerate() {
        if tri.iter().any(|&i| i as usize >= verts.len()) {
            return Err(Error::InvalidParameter("triangle index out of range"));
        }
        let v1 = verts[tri[0] as usize];
        let v2 = verts[tri[1] as usize];
        let v3 = verts[tri[2] as usize];
        let p1 = Vector2::new(v1.x, v1.y);
        let p2 = Vector2::new(v2.x, v2.y);
        let p3 = Vector2::new(v3.x, v3.y);

        let e1 = p2 - p1;
        let e2 = p3 - p1;
        let det = e1.x * e2.y - e1.y * e2.x;
        if libm::fabs(det) <= DEGENERATE_DET {
            continue;
        }
        any = true;

        // Grid-aligned bounding box of the projected triangle.
        let min_x = p1.x.min(p2.x).min(p3.x) - grid.origin[0];
        let max_x = p1.x.max(p2.x).max(p3.x) - grid.origin[0];
        let min_y = p1.y.min(p2.y).min(p3.y) - grid.origin[1];
        let max_y = p1.y.max(p2.y).max(p3.y) - grid.origin[1];
        let col_lo = libm::ceil(min_x).max(0.0) as i64;
        let col_hi = libm::floor(max_x).min((grid.width - 1) as f64) as i64;
        let row_lo = libm::ceil(min_y).max(0.0) as i64;
        let row_hi = libm::floor(max_y).min((grid.height - 1) as f64) as i64;
        if col_lo > col_hi || row_lo > row_hi || max_x < 0.0 || max_y < 0.0 {
            continue;
        }

        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let px = grid.origin[0] + col as f64;
                let py = grid.origin[1] + row as f64;
                let d = Vector2::new(px, py) - p1;
                let a2 = (d.x * e2.y - d.y * e2.x) / det;
                let a3 = (e1.x * d.y - e1.y * d.x) / det;
                let a1 = 1.0 - a2 - a3;
                if a1 < 0.0 || a2 < 0.0 || a3 < 0.0 {
                    continue;
                }
                let z = a1 * v1.z + a2 * v2.z + a3 * v3.z;
                let (cx, cy) = (col as u32, row as u32);
                let i = cy as usize * grid.width as usize + cx as usize;
                if !depth.is_occupied(cx, cy) || z < depth.depth(cx, cy) {
                    depth.merge(cx, cy, z);
                    tri_buf[i] = tidx as u32;
                    bary_buf[i] = [a1, a2, a3];
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyProjection);
    }
    Ok(RasterOutput { depth, triangle: tri_buf, bary: bary_buf })
}

/// Depth-only rasterization of the frontalized mesh.
pub fn rasterize_depth(
    verts: &PointSet3,
    triangles: &[[u32; 3]],
    grid: &GridSpec,
) -> Result<DepthMap> {
    Ok(rasterize_mesh(verts, triangles, grid)?.depth)
}

/// Interpolates a per-vertex attribute over the covered pixels of a raster
/// output; unoccupied pixels yield `None`.
pub fn interpolate_attribute(
    out: &RasterOutput,
    triangles: &[[u32; 3]],
    attr: &[f64],
) -> Vec<Option<f64>> {
    let w = out.depth.width() as usize;
    let h = out.depth.height() as usize;
    let mut values = Vec::with_capacity(w * h);
    for i in 0..w * h {
        if out.triangle[i] == u32::MAX {
            values.push(None);
            continue;
        }
        let tri = triangles[out.triangle[i] as usize];
        let b = out.bary[i];
        values.push(Some(
            b[0] * attr[tri[0] as usize] + b[1] * attr[tri[1] as usize] + b[2] * attr[tri[2] as usize],
        ));
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tri2(ax: f64, ay: f64, bx: f64, by: f64, cx: f64, cy: f64) -> [Vector2<f64>; 3] {
        [Vector2::new(ax, ay), Vector2::new(bx, by), Vector2::new(cx, cy)]
    }

    #[test]
    fn barycentric_at_vertex() {
        let tri = tri2(0.0, 0.0, 4.0, 0.0, 0.0, 4.0);
        let b = barycentric_coords(Vector2::new(0.0, 0.0), &tri).unwrap();
        assert_abs_diff_eq!(b.a1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.a2, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.a3, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn barycentric_at_centroid() {
        let tri = tri2(0.0, 0.0, 3.0, 0.0, 0.0, 3.0);
        let b = barycentric_coords(Vector2::new(1.0, 1.0), &tri).unwrap();
        assert_abs_diff_eq!(b.a1, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.a2, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.a3, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn barycentric_outside_has_negative_weight() {
        let tri = tri2(0.0, 0.0, 2.0, 0.0, 0.0, 2.0);
        // Half-plane check: the point is on the outer side of edge (v2, v3).
        let b = barycentric_coords(Vector2::new(2.0, 2.0), &tri).unwrap();
        assert!(!b.is_inside());
        assert!(b.a1 < 0.0);
    }

    #[test]
    fn barycentric_reconstructs_query_point() {
        let tri = tri2(0.3, -1.0, 4.7, 0.4, 1.2, 3.9);
        for p in [
            Vector2::new(2.0, 1.0),
            Vector2::new(1.1, 0.2),
            Vector2::new(3.0, 0.9),
        ] {
            let b = barycentric_coords(p, &tri).unwrap();
            let rec = b.a1 * tri[0] + b.a2 * tri[1] + b.a3 * tri[2];
            assert_abs_diff_eq!(rec, p, epsilon = 1e-9);
            assert_abs_diff_eq!(b.a1 + b.a2 + b.a3, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn barycentric_degenerate_triangle() {
        let tri = tri2(0.0, 0.0, 1.0, 1.0, 2.0, 2.0);
        assert!(matches!(
            barycentric_coords(Vector2::new(1.0, 0.0), &tri),
            Err(Error::DegenerateTriangle)
        ));
    }

    #[test]
    fn rasterize_constant_plane() {
        let verts = PointSet3::from_rows(&[
            [0.0, 0.0, 0.0],
            [8.0, 0.0, 0.0],
            [0.0, 8.0, 0.0],
        ])
        .unwrap();
        let grid = GridSpec { origin: [0.0, 0.0], width: 10, height: 10 };
        let depth = rasterize_depth(&verts, &[[0, 1, 2]], &grid).unwrap();
        assert!(depth.occupied_count() > 0);
        for y in 0..10 {
            for x in 0..10 {
                if depth.is_occupied(x, y) {
                    assert_eq!(depth.depth(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn rasterize_reproduces_linear_depth() {
        // Vertex depths follow z = x exactly; every covered pixel's depth
        // equals its plane x-coordinate.
        let verts = PointSet3::from_rows(&[
            [0.0, 0.0, 0.0],
            [9.0, 0.0, 9.0],
            [0.0, 9.0, 0.0],
            [9.0, 9.0, 9.0],
        ])
        .unwrap();
        let tris = [[0u32, 1, 2], [1, 3, 2]];
        let grid = GridSpec { origin: [0.0, 0.0], width: 12, height: 12 };
        let depth = rasterize_depth(&verts, &tris, &grid).unwrap();
        let mut covered = 0;
        for y in 0..12u32 {
            for x in 0..12u32 {
                if depth.is_occupied(x, y) {
                    covered += 1;
                    assert_abs_diff_eq!(depth.depth(x, y), x as f64, epsilon = 1e-9);
                }
            }
        }
        assert!(covered >= 80, "covered {covered}");
    }

    #[test]
    fn rasterize_overlap_keeps_nearest() {
        let verts = PointSet3::from_rows(&[
            // Triangle at depth 2.
            [0.0, 0.0, 2.0],
            [6.0, 0.0, 2.0],
            [0.0, 6.0, 2.0],
            // Overlapping triangle at depth 1.
            [0.0, 0.0, 1.0],
            [6.0, 0.0, 1.0],
            [0.0, 6.0, 1.0],
        ])
        .unwrap();
        let tris = [[0u32, 1, 2], [3, 4, 5]];
        let grid = GridSpec { origin: [0.0, 0.0], width: 8, height: 8 };
        let depth = rasterize_depth(&verts, &tris, &grid).unwrap();
        for y in 0..8u32 {
            for x in 0..8u32 {
                if depth.is_occupied(x, y) {
                    assert_abs_diff_eq!(depth.depth(x, y), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rasterize_all_degenerate_rejected() {
        let verts = PointSet3::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, 2.0, 0.0],
        ])
        .unwrap();
        let grid = GridSpec { origin: [0.0, 0.0], width: 4, height: 4 };
        assert!(matches!(
            rasterize_depth(&verts, &[[0, 1, 2]], &grid),
            Err(Error::EmptyProjection)
        ));
    }

    #[test]
    fn rasterize_affine_function_reproduction() {
        // Random-ish mesh over the grid; depth = 0.37 x - 1.21 y + 4.5.
        let f = |x: f64, y: f64| 0.37 * x - 1.21 * y + 4.5;
        let mut rows = alloc::vec::Vec::new();
        let n = 6;
        for gy in 0..n {
            for gx in 0..n {
                let x = gx as f64 * 10.0 + (((gx * 7 + gy * 3) % 5) as f64) * 0.3;
                let y = gy as f64 * 10.0 + (((gx * 3 + gy * 11) % 7) as f64) * 0.2;
                rows.push([x, y, f(x, y)]);
            }
        }
        let verts = PointSet3::from_rows(&rows).unwrap();
        let mut tris = alloc::vec::Vec::new();
        for gy in 0..n - 1 {
            for gx in 0..n - 1 {
                let i = (gy * n + gx) as u32;
                tris.push([i, i + 1, i + n as u32]);
                tris.push([i + 1, i + 1 + n as u32, i + n as u32]);
            }
        }
        let grid = GridSpec { origin: [0.0, 0.0], width: 52, height: 52 };
        let depth = rasterize_depth(&verts, &tris, &grid).unwrap();
        for y in 0..52u32 {
            for x in 0..52u32 {
                if depth.is_occupied(x, y) {
                    assert_abs_diff_eq!(
                        depth.depth(x, y),
                        f(x as f64, y as f64),
                        epsilon = 1e-9
                    );
                }
            }
        }
    }
}
