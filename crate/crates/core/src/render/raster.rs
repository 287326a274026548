use nalgebra::Vector3;

use super::{project, sh_shade, SHLighting, WeakPerspectiveCamera};
use crate::error::{check_dim, Result};
use crate::flame::Mesh;
use crate::imaging::RgbImage;

/// Rendered physical condition: shaded image, coverage and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTexture {
    pub image: RgbImage,
    pub coverage: Vec<bool>,
    /// `−Z` of the visible surface; `+∞` where nothing was drawn.
    pub depth: Vec<f64>,
}

impl RenderedTexture {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn covered_pixels(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

/// Normalized coordinate sampled by pixel `(i, j)`.
#[inline]
pub fn pixel_center(i: usize, j: usize, height: usize, width: usize) -> (f64, f64) {
    (
        (j as f64 + 0.5) / width as f64 * 2.0 - 1.0,
        (i as f64 + 0.5) / height as f64 * 2.0 - 1.0,
    )
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: (f64, f64)) -> f64 {
    (b[0] - a[0]) * (p.1 - a[1]) - (b[1] - a[1]) * (p.0 - a[0])
}

/// Z-buffered rasterization with back-face culling. Per pixel the albedo and
/// normal are interpolated barycentrically and the color is
/// `albedo ⊙ sh_shade(normal)` clamped to [0, 1].
pub fn rasterize(
    mesh: &Mesh,
    albedo: &[Vector3<f64>],
    light: &SHLighting,
    cam: &WeakPerspectiveCamera,
    height: usize,
    width: usize,
) -> Result<RenderedTexture> {
    check_dim("albedo per vertex", mesh.vertices.len(), albedo.len())?;
    check_dim("normals per vertex", mesh.vertices.len(), mesh.normals.len())?;
    let (xy, depth_v) = project(&mesh.vertices, cam)?;
    let mut image = RgbImage::new(height, width);
    let mut coverage = vec![false; height * width];
    let mut depth = vec![f64::INFINITY; height * width];
    // (face, barycentrics) of the winning surface per pixel; shading runs once per pixel
    let mut winner: Vec<Option<(usize, [f64; 3])>> = vec![None; height * width];

    let to_col = |x: f64| (x + 1.0) * 0.5 * width as f64 - 0.5;
    let to_row = |y: f64| (y + 1.0) * 0.5 * height as f64 - 0.5;

    for (f, &[a, b, c]) in mesh.faces.iter().enumerate() {
        let (pa, pb, pc) = (xy[a], xy[b], xy[c]);
        let area = edge(pa, pb, (pc[0], pc[1]));
        // front faces wind positively in (x right, y down) screen space
        if area <= 0.0 || !area.is_finite() {
            continue;
        }
        let min_x = pa[0].min(pb[0]).min(pc[0]);
        let max_x = pa[0].max(pb[0]).max(pc[0]);
        let min_y = pa[1].min(pb[1]).min(pc[1]);
        let max_y = pa[1].max(pb[1]).max(pc[1]);
        let j0 = to_col(min_x).ceil().max(0.0) as usize;
        let j1 = to_col(max_x).floor().min(width as f64 - 1.0);
        let i0 = to_row(min_y).ceil().max(0.0) as usize;
        let i1 = to_row(max_y).floor().min(height as f64 - 1.0);
        if j1 < 0.0 || i1 < 0.0 {
            continue;
        }
        for i in i0..=(i1 as usize) {
            for j in j0..=(j1 as usize) {
                let p = pixel_center(i, j, height, width);
                let w0 = edge(pb, pc, p);
                let w1 = edge(pc, pa, p);
                let w2 = edge(pa, pb, p);
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let bary = [w0 / area, w1 / area, w2 / area];
                let d = bary[0] * depth_v[a] + bary[1] * depth_v[b] + bary[2] * depth_v[c];
                let k = i * width + j;
                if d < depth[k] {
                    depth[k] = d;
                    coverage[k] = true;
                    winner[k] = Some((f, bary));
                }
            }
        }
    }

    for (k, w) in winner.iter().enumerate() {
        let Some((f, bary)) = *w else { continue };
        let [a, b, c] = mesh.faces[f];
        let n = mesh.normals[a] * bary[0] + mesh.normals[b] * bary[1] + mesh.normals[c] * bary[2];
        let len = n.norm();
        let n = if len > 0.0 { n / len } else { Vector3::z() };
        let alb = albedo[a] * bary[0] + albedo[b] * bary[1] + albedo[c] * bary[2];
        let shade = sh_shade(&n, light)?;
        let rgb = [
            (alb.x * shade[0]).clamp(0.0, 1.0) as f32,
            (alb.y * shade[1]).clamp(0.0, 1.0) as f32,
            (alb.z * shade[2]).clamp(0.0, 1.0) as f32,
        ];
        image.set(k / width, k % width, rgb);
    }

    Ok(RenderedTexture {
        image,
        coverage,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flame::vertex_normals;

    fn flat_mesh(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Mesh {
        let normals = vertex_normals(&vertices, &faces);
        Mesh {
            vertices,
            faces,
            normals,
        }
    }

    fn unit_albedo(n: usize) -> Vec<Vector3<f64>> {
        vec![Vector3::new(1.0, 1.0, 1.0); n]
    }

    /// Independent coverage oracle: a point is inside when it lies on the
    /// inner side of all three edges, tested with explicit 2-D cross products.
    fn oracle_inside(tri: [[f64; 2]; 3], p: (f64, f64)) -> bool {
        let cross = |o: [f64; 2], a: [f64; 2], q: (f64, f64)| (a[0] - o[0]) * (q.1 - o[1]) - (a[1] - o[1]) * (q.0 - o[0]);
        let s = [cross(tri[0], tri[1], p), cross(tri[1], tri[2], p), cross(tri[2], tri[0], p)];
        s.iter().all(|&v| v >= 0.0)
    }

    #[test]
    fn axis_aligned_triangle_coverage_matches_point_in_triangle_oracle() {
        // right triangle with legs along x and y, front-facing (normal +Z)
        let tri = [[-0.6, -0.5], [0.7, -0.5], [-0.6, 0.55]];
        let v = tri.iter().map(|p| Vector3::new(p[0], p[1], 0.0)).collect::<Vec<_>>();
        let mesh = flat_mesh(v, vec![[0, 1, 2]]);
        let (h, w) = (32, 40);
        let r = rasterize(&mesh, &unit_albedo(3), &SHLighting::ambient(3.0), &WeakPerspectiveCamera::identity(), h, w).unwrap();
        let screen = tri;
        let mut count = 0;
        for i in 0..h {
            for j in 0..w {
                let expected = oracle_inside(screen, pixel_center(i, j, h, w));
                assert_eq!(r.coverage[i * w + j], expected, "pixel ({i},{j})");
                count += expected as usize;
            }
        }
        assert!(count > 100);
    }

    #[test]
    fn back_faces_are_culled() {
        let v = vec![Vector3::new(-0.5, -0.5, 0.0), Vector3::new(0.5, -0.5, 0.0), Vector3::new(-0.5, 0.5, 0.0)];
        let mesh = flat_mesh(v, vec![[0, 2, 1]]);
        let r = rasterize(&mesh, &unit_albedo(3), &SHLighting::ambient(3.0), &WeakPerspectiveCamera::identity(), 16, 16).unwrap();
        assert_eq!(r.covered_pixels(), 0);
    }

    #[test]
    fn nearer_surface_wins() {
        // two overlapping squares; the red one sits closer to the viewer (larger Z)
        let mut v = Vec::new();
        for z in [0.2, -0.3] {
            v.extend([
                Vector3::new(-0.8, -0.8, z),
                Vector3::new(0.8, -0.8, z),
                Vector3::new(0.8, 0.8, z),
                Vector3::new(-0.8, 0.8, z),
            ]);
        }
        let faces = vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]];
        let mesh = flat_mesh(v, faces);
        let mut albedo = vec![Vector3::new(1.0, 0.0, 0.0); 4];
        albedo.extend(vec![Vector3::new(0.0, 0.0, 1.0); 4]);
        for far_first in [false, true] {
            let mut m = mesh.clone();
            if far_first {
                m.faces.reverse();
            }
            let r = rasterize(&m, &albedo, &SHLighting::ambient(3.0), &WeakPerspectiveCamera::identity(), 16, 16).unwrap();
            for k in 0..256 {
                if r.coverage[k] {
                    let px = r.image.get(k / 16, k % 16);
                    assert!(px[0] > 0.5 && px[2] == 0.0);
                    assert!((r.depth[k] + 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uncovered_pixels_are_zero() {
        let v = vec![Vector3::new(-0.2, -0.2, 0.0), Vector3::new(0.2, -0.2, 0.0), Vector3::new(-0.2, 0.2, 0.0)];
        let mesh = flat_mesh(v, vec![[0, 1, 2]]);
        let r = rasterize(&mesh, &unit_albedo(3), &SHLighting::ambient(3.0), &WeakPerspectiveCamera::identity(), 16, 16).unwrap();
        for k in 0..256 {
            if !r.coverage[k] {
                assert_eq!(r.image.get(k / 16, k % 16), [0.0; 3]);
                assert!(r.depth[k].is_infinite());
            } else {
                assert!(r.depth[k].is_finite());
            }
        }
    }
}
