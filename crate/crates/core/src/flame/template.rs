//! Procedural head template: a deformed icosphere with marked jaw, neck and
//! eye regions, orthogonal shape/expression bases, pose correctives, a joint
//! regressor and convex skinning weights.
//!
//! Model space: +X is image right, +Y is image down (chin at +Y, crown at -Y),
//! +Z points toward the viewer.

use std::collections::HashMap;

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Joint, NUM_JOINTS};
use crate::container::Container;
use crate::error::{Error, Result};

pub const DEFAULT_VERTICES: usize = 642;
pub const DEFAULT_SHAPE_DIM: usize = 10;
pub const DEFAULT_EXPR_DIM: usize = 10;
pub const DEFAULT_ALBEDO_DIM: usize = 5;

/// Largest displacement any single basis column may cause, as a fraction of
/// head radius, per unit coefficient. A coefficient of 3 therefore moves no
/// vertex more than 15% of the radius.
const BASIS_UNIT_DISPLACEMENT: f64 = 0.05;
const CORRECTIVE_UNIT_DISPLACEMENT: f64 = 0.02;
const ALBEDO_UNIT_CHANGE: f64 = 0.08;

/// Index lists of semantically marked vertex groups.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexGroups {
    pub jaw: Vec<usize>,
    pub neck: Vec<usize>,
    pub eye_left: Vec<usize>,
    pub eye_right: Vec<usize>,
    pub mouth: Vec<usize>,
}

/// The miniature morphable head model.
///
/// All bases are stored flattened with row index `3 * vertex + axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTemplate {
    pub seed: u64,
    pub vertices_rest: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// 3n × d_shape
    pub shape_basis: DMatrix<f64>,
    /// 3n × d_expr
    pub expr_basis: DMatrix<f64>,
    /// 3n × 9k, driven by `vec(R_j - I)` of the k non-root joints.
    pub pose_corrective_basis: DMatrix<f64>,
    /// (k+1) × n, rows are convex combinations of vertices.
    pub joint_regressor: DMatrix<f64>,
    /// (k+1) × n, columns are convex per vertex.
    pub blendweights: DMatrix<f64>,
    /// Per-vertex RGB multiplier applied to the base skin tone (eyes, brows, lips).
    pub albedo_pattern: Vec<Vector3<f64>>,
    /// 3n × d_albedo additive per-vertex RGB basis.
    pub albedo_basis: DMatrix<f64>,
    pub groups: VertexGroups,
    /// Largest rest-vertex distance from the origin.
    pub radius: f64,
}

impl HeadTemplate {
    pub fn n_vertices(&self) -> usize {
        self.vertices_rest.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn albedo_dim(&self) -> usize {
        self.albedo_basis.ncols()
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.n_vertices();
        let mut c = Container::new("template");
        c.set_meta("seed", self.seed.to_string());
        c.put_f64("vertices_rest", &[n, 3], &flatten(&self.vertices_rest))?;
        let faces: Vec<i64> = self.faces.iter().flatten().map(|&i| i as i64).collect();
        c.put_i64("faces", &[self.faces.len(), 3], &faces)?;
        put_matrix(&mut c, "shape_basis", &self.shape_basis)?;
        put_matrix(&mut c, "expr_basis", &self.expr_basis)?;
        put_matrix(&mut c, "pose_corrective_basis", &self.pose_corrective_basis)?;
        put_matrix(&mut c, "joint_regressor", &self.joint_regressor)?;
        put_matrix(&mut c, "blendweights", &self.blendweights)?;
        c.put_f64("albedo_pattern", &[n, 3], &flatten(&self.albedo_pattern))?;
        put_matrix(&mut c, "albedo_basis", &self.albedo_basis)?;
        for (name, g) in [
            ("group.jaw", &self.groups.jaw),
            ("group.neck", &self.groups.neck),
            ("group.eye_left", &self.groups.eye_left),
            ("group.eye_right", &self.groups.eye_right),
            ("group.mouth", &self.groups.mouth),
        ] {
            let v: Vec<i64> = g.iter().map(|&i| i as i64).collect();
            c.put_i64(name, &[v.len()], &v)?;
        }
        c.put_f64("radius", &[1], &[self.radius])?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != "template" {
            return Err(Error::Container(format!("expected template, found `{}`", c.kind())));
        }
        let seed = c
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Container("template seed missing".into()))?;
        let (_, v) = c.get_f64("vertices_rest")?;
        let vertices_rest = unflatten(&v);
        let n = vertices_rest.len();
        let (_, f) = c.get_i64("faces")?;
        let faces: Vec<[usize; 3]> = f
            .chunks_exact(3)
            .map(|t| [t[0] as usize, t[1] as usize, t[2] as usize])
            .collect();
        if faces.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Container("face index out of range".into()));
        }
        let group = |name: &str| -> Result<Vec<usize>> {
            Ok(c.get_i64(name)?.1.into_iter().map(|i| i as usize).collect())
        };
        Ok(Self {
            seed,
            vertices_rest,
            faces,
            shape_basis: get_matrix(c, "shape_basis")?,
            expr_basis: get_matrix(c, "expr_basis")?,
            pose_corrective_basis: get_matrix(c, "pose_corrective_basis")?,
            joint_regressor: get_matrix(c, "joint_regressor")?,
            blendweights: get_matrix(c, "blendweights")?,
            albedo_pattern: unflatten(&c.get_f64("albedo_pattern")?.1),
            albedo_basis: get_matrix(c, "albedo_basis")?,
            groups: VertexGroups {
                jaw: group("group.jaw")?,
                neck: group("group.neck")?,
                eye_left: group("group.eye_left")?,
                eye_right: group("group.eye_right")?,
                mouth: group("group.mouth")?,
            },
            radius: c.get_f64_vec("radius")?[0],
        })
    }
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vector3<f64>> {
    v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn put_matrix(c: &mut Container, name: &str, m: &DMatrix<f64>) -> Result<()> {
    // row-major on disk
    let values: Vec<f64> = m.transpose().iter().copied().collect();
    c.put_f64(name, &[m.nrows(), m.ncols()], &values)
}

fn get_matrix(c: &Container, name: &str) -> Result<DMatrix<f64>> {
    let (shape, values) = c.get_f64(name)?;
    if shape.len() != 2 {
        return Err(Error::Container(format!("`{name}` must be 2-D")));
    }
    Ok(DMatrix::from_row_slice(shape[0], shape[1], &values))
}

/// Subdivision level for an icosphere with `n` vertices (`n = 10·4^L + 2`).
pub fn icosphere_level(n: usize) -> Option<u32> {
    (1..8).find(|&l| 10 * 4usize.pow(l) + 2 == n)
}

/// Unit icosphere with outward (counter-clockwise seen from outside) winding.
pub fn icosphere(level: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Vertices within `max_angle` of `dir`, or the single nearest vertex when
/// the mesh is too coarse for any to fall inside.
fn cone_group(dirs: &[Vector3<f64>], dir: Vector3<f64>, max_angle: f64) -> Vec<usize> {
    let dir = dir.normalize();
    let cos_min = max_angle.cos();
    let mut g: Vec<usize> = (0..dirs.len()).filter(|&i| dirs[i].dot(&dir) >= cos_min).collect();
    if g.is_empty() {
        let best = (0..dirs.len())
            .max_by(|&a, &b| dirs[a].dot(&dir).total_cmp(&dirs[b].dot(&dir)))
            .expect("non-empty mesh");
        g.push(best);
    }
    g
}

const EYE_LEFT_DIR: [f64; 3] = [-0.36, -0.18, 0.92];
const EYE_RIGHT_DIR: [f64; 3] = [0.36, -0.18, 0.92];
const MOUTH_DIR: [f64; 3] = [0.0, 0.42, 0.9];

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Builds a template with the default albedo basis size.
pub fn make_toy_template(seed: u64, n_vertices: usize, d_shape: usize, d_expr: usize) -> Result<HeadTemplate> {
    make_toy_template_with_albedo(seed, n_vertices, d_shape, d_expr, DEFAULT_ALBEDO_DIM)
}

pub fn make_toy_template_with_albedo(
    seed: u64,
    n_vertices: usize,
    d_shape: usize,
    d_expr: usize,
    d_albedo: usize,
) -> Result<HeadTemplate> {
    let level = icosphere_level(n_vertices).ok_or_else(|| {
        Error::invalid(format!(
            "n_vertices={n_vertices} is not an icosphere size (10·4^L+2 with L ≥ 1: 42, 162, 642, 2562, ...)"
        ))
    })?;
    if d_shape == 0 || d_expr == 0 {
        return Err(Error::invalid("shape and expression dimensions must be at least 1"));
    }
    if d_shape + d_expr > 3 * n_vertices {
        return Err(Error::invalid("more basis columns than vertex coordinates"));
    }
    let (dirs, faces) = icosphere(level);
    let n = dirs.len();

    // Seed-independent rest geometry: every seed shares topology and rest shape.
    let vertices_rest: Vec<Vector3<f64>> = dirs
        .iter()
        .map(|u| {
            let mut p = Vector3::new(0.82 * u.x, 1.0 * u.y, 0.9 * u.z);
            let front = smoothstep(0.1, 0.6, u.z);
            // jaw and chin protrude forward
            p.z += 0.12 * smoothstep(0.25, 0.6, u.y) * front;
            // nose bump
            let nose = (-((u.x / 0.12).powi(2) + ((u.y - 0.12) / 0.18).powi(2))).exp();
            p.z += 0.14 * nose * front;
            // eye sockets
            for e in [EYE_LEFT_DIR, EYE_RIGHT_DIR] {
                let d = (u - v3(e).normalize()).norm();
                p -= 0.05 * (-(d / 0.15).powi(2)).exp() * u;
            }
            p
        })
        .collect();
    let radius = vertices_rest.iter().map(|p| p.norm()).fold(0.0, f64::max);

    let groups = VertexGroups {
        jaw: (0..n)
            .filter(|&i| dirs[i].y > 0.3 && dirs[i].z > 0.1)
            .collect::<Vec<_>>()
            .into_iter()
            .chain(cone_group(&dirs, Vector3::new(0.0, 0.6, 0.8), 0.01))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
        neck: cone_group(&dirs, Vector3::new(0.0, 1.0, 0.0), 0.75),
        eye_left: cone_group(&dirs, v3(EYE_LEFT_DIR), 0.16),
        eye_right: cone_group(&dirs, v3(EYE_RIGHT_DIR), 0.16),
        mouth: cone_group(&dirs, v3(MOUTH_DIR), 0.2),
    };

    let blendweights = build_blendweights(&dirs, &groups);
    let joint_regressor = build_joint_regressor(&dirs, &groups, n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    // Raw shape columns: smooth global fields (radial polynomial + anisotropic scaling).
    let mut raw = DMatrix::<f64>::zeros(3 * n, d_shape + d_expr);
    for c in 0..d_shape {
        let poly: Vec<f64> = (0..10).map(|_| gauss()).collect();
        let aniso = Vector3::new(gauss(), gauss(), gauss());
        for (i, u) in dirs.iter().enumerate() {
            let f = poly[0]
                + poly[1] * u.x
                + poly[2] * u.y
                + poly[3] * u.z
                + poly[4] * u.x * u.y
                + poly[5] * u.x * u.z
                + poly[6] * u.y * u.z
                + poly[7] * u.x * u.x
                + poly[8] * u.y * u.y
                + poly[9] * u.z * u.z;
            let d = u * f + aniso.component_mul(u);
            raw.fixed_view_mut::<3, 1>(3 * i, c).copy_from(&d);
        }
    }
    // Raw expression columns: localized bumps around the mouth, jaw, brows and cheeks.
    let centers = [
        v3(MOUTH_DIR),
        Vector3::new(0.0, 0.6, 0.8),
        Vector3::new(-0.35, -0.4, 0.85),
        Vector3::new(0.35, -0.4, 0.85),
        Vector3::new(-0.5, 0.2, 0.85),
        Vector3::new(0.5, 0.2, 0.85),
    ];
    for c in 0..d_expr {
        let center = centers[c % centers.len()].normalize();
        let dir = Vector3::new(gauss(), gauss(), gauss()).normalize();
        let width = 0.25 + 0.1 * (c / centers.len()) as f64;
        for (i, u) in dirs.iter().enumerate() {
            let w = (-((u - center).norm() / width).powi(2)).exp();
            let d = dir * w + u * (0.5 * w * gauss());
            raw.fixed_view_mut::<3, 1>(3 * i, d_shape + c).copy_from(&d);
        }
    }
    let q = raw.qr().q();
    let mut shape_basis = q.columns(0, d_shape).into_owned();
    let mut expr_basis = q.columns(d_shape, d_expr).into_owned();
    scale_columns(&mut shape_basis, BASIS_UNIT_DISPLACEMENT * radius);
    scale_columns(&mut expr_basis, BASIS_UNIT_DISPLACEMENT * radius);

    // Pose correctives: each non-root joint drives a field localized on its region.
    let mut pose_corrective_basis = DMatrix::<f64>::zeros(3 * n, 9 * NUM_JOINTS);
    for j in 1..=NUM_JOINTS {
        let region: &[usize] = match Joint::from_index(j) {
            Joint::Neck => &groups.neck,
            Joint::Jaw => &groups.jaw,
            Joint::EyeLeft => &groups.eye_left,
            Joint::EyeRight => &groups.eye_right,
            Joint::Root => unreachable!(),
        };
        let center = region.iter().map(|&i| dirs[i]).sum::<Vector3<f64>>().normalize();
        for f in 0..9 {
            let dir = Vector3::new(gauss(), gauss(), gauss()).normalize();
            for (i, u) in dirs.iter().enumerate() {
                let w = (-((u - center).norm() / 0.35).powi(2)).exp();
                let d = dir * w;
                pose_corrective_basis
                    .fixed_view_mut::<3, 1>(3 * i, 9 * (j - 1) + f)
                    .copy_from(&d);
            }
        }
    }
    scale_columns(&mut pose_corrective_basis, CORRECTIVE_UNIT_DISPLACEMENT * radius);

    // Albedo: multiplicative pattern for facial features plus a smooth additive basis.
    let mut albedo_pattern = vec![Vector3::new(1.0, 1.0, 1.0); n];
    for (i, u) in dirs.iter().enumerate() {
        for e in [EYE_LEFT_DIR, EYE_RIGHT_DIR] {
            let w = (-((u - v3(e).normalize()).norm() / 0.12).powi(2)).exp();
            albedo_pattern[i] = albedo_pattern[i] * (1.0 - 0.75 * w);
            let brow = Vector3::new(e[0], e[1] - 0.22, e[2]).normalize();
            let wb = (-((u - brow).norm() / 0.1).powi(2)).exp();
            albedo_pattern[i] = albedo_pattern[i] * (1.0 - 0.5 * wb);
        }
        let wm = (-((u - v3(MOUTH_DIR).normalize()).norm() / 0.13).powi(2)).exp();
        albedo_pattern[i] = albedo_pattern[i].component_mul(&Vector3::new(1.0 - 0.05 * wm, 1.0 - 0.45 * wm, 1.0 - 0.4 * wm));
    }
    let mut albedo_basis = DMatrix::<f64>::zeros(3 * n, d_albedo);
    for c in 0..d_albedo {
        let grad = Vector3::new(gauss(), gauss(), gauss());
        let tint = Vector3::new(gauss(), gauss(), gauss());
        for (i, u) in dirs.iter().enumerate() {
            let d = tint * (0.5 + 0.5 * grad.normalize().dot(u));
            albedo_basis.fixed_view_mut::<3, 1>(3 * i, c).copy_from(&d);
        }
    }
    scale_columns(&mut albedo_basis, ALBEDO_UNIT_CHANGE);

    Ok(HeadTemplate {
        seed,
        vertices_rest,
        faces,
        shape_basis,
        expr_basis,
        pose_corrective_basis,
        joint_regressor,
        blendweights,
        albedo_pattern,
        albedo_basis,
        groups,
        radius,
    })
}

/// Rescales each column so its largest per-vertex 3-vector has norm `target`.
fn scale_columns(m: &mut DMatrix<f64>, target: f64) {
    let n = m.nrows() / 3;
    for c in 0..m.ncols() {
        let peak = (0..n)
            .map(|i| m.fixed_view::<3, 1>(3 * i, c).norm())
            .fold(0.0, f64::max);
        if peak > 0.0 {
            let s = target / peak;
            m.column_mut(c).scale_mut(s);
        }
    }
}

fn build_blendweights(dirs: &[Vector3<f64>], g: &VertexGroups) -> DMatrix<f64> {
    let n = dirs.len();
    let mut w = DMatrix::<f64>::zeros(NUM_JOINTS + 1, n);
    for (i, u) in dirs.iter().enumerate() {
        let neck = 0.9 * smoothstep(0.55, 0.9, u.y);
        let jaw = if g.jaw.contains(&i) {
            smoothstep(0.3, 0.5, u.y) * smoothstep(0.1, 0.4, u.z)
        } else {
            0.0
        };
        let mut col = [0.0; NUM_JOINTS + 1];
        col[Joint::Neck as usize] = neck * (1.0 - jaw);
        col[Joint::Jaw as usize] = jaw;
        if g.eye_left.contains(&i) {
            col = [0.0; NUM_JOINTS + 1];
            col[Joint::EyeLeft as usize] = 1.0;
        } else if g.eye_right.contains(&i) {
            col = [0.0; NUM_JOINTS + 1];
            col[Joint::EyeRight as usize] = 1.0;
        }
        let rest: f64 = col.iter().sum();
        col[Joint::Root as usize] += (1.0 - rest).max(0.0);
        let total: f64 = col.iter().sum();
        for (j, v) in col.iter().enumerate() {
            w[(j, i)] = v / total;
        }
    }
    w
}

fn build_joint_regressor(dirs: &[Vector3<f64>], g: &VertexGroups, n: usize) -> DMatrix<f64> {
    let mut r = DMatrix::<f64>::zeros(NUM_JOINTS + 1, n);
    let mut set_row = |j: Joint, weights: Vec<(usize, f64)>| {
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        for (i, w) in weights {
            r[(j as usize, i)] += w / total;
        }
    };
    // head pivots about a point behind the face, as on a neck
    set_row(
        Joint::Root,
        (0..n).filter(|&i| dirs[i].z < -0.3).map(|i| (i, 1.0)).collect(),
    );
    set_row(Joint::Neck, g.neck.iter().map(|&i| (i, 1.0)).collect());
    // hinge sits toward the back of the jaw region
    set_row(
        Joint::Jaw,
        g.jaw.iter().map(|&i| (i, (1.05 - dirs[i].z).max(0.05))).collect(),
    );
    set_row(Joint::EyeLeft, g.eye_left.iter().map(|&i| (i, 1.0)).collect());
    set_row(Joint::EyeRight, g.eye_right.iter().map(|&i| (i, 1.0)).collect());
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t7() -> HeadTemplate {
        make_toy_template(7, 642, 10, 10).unwrap()
    }

    #[test]
    fn default_template_counts() {
        let t = t7();
        assert_eq!(t.n_vertices(), 642);
        assert_eq!(t.faces.len(), 1280);
        assert_eq!(t.shape_dim(), 10);
        assert_eq!(t.expr_dim(), 10);
        assert_eq!(t.pose_corrective_basis.ncols(), 36);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        assert_eq!(t7(), t7());
    }

    #[test]
    fn different_seeds_share_topology_but_not_bases() {
        let a = t7();
        let b = make_toy_template(8, 642, 10, 10).unwrap();
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.vertices_rest, b.vertices_rest);
        assert_ne!(a.shape_basis, b.shape_basis);
        assert_ne!(a.expr_basis, b.expr_basis);
    }

    #[test]
    fn rejects_unrealizable_vertex_counts() {
        for n in [0, 12, 41, 100, 643] {
            assert!(make_toy_template(1, n, 4, 4).is_err(), "n={n}");
        }
        assert!(make_toy_template(1, 42, 0, 4).is_err());
        assert!(make_toy_template(1, 42, 4, 4).is_ok());
    }

    #[test]
    fn blendweights_are_convex() {
        let t = t7();
        for col in t.blendweights.column_iter() {
            assert!(col.iter().all(|&w| w >= 0.0));
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
        for row in t.joint_regressor.row_iter() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bases_are_mutually_orthogonal() {
        let t = t7();
        let all = DMatrix::from_columns(
            &t.shape_basis
                .column_iter()
                .chain(t.expr_basis.column_iter())
                .map(|c| c.into_owned())
                .collect::<Vec<_>>(),
        );
        let gram = all.transpose() * &all;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                if i != j {
                    let cos = gram[(i, j)] / (gram[(i, i)] * gram[(j, j)]).sqrt();
                    assert!(cos.abs() < 1e-10, "columns {i},{j} cos={cos}");
                }
            }
        }
    }

    #[test]
    fn coefficient_three_moves_at_most_fifteen_percent() {
        let t = t7();
        for basis in [&t.shape_basis, &t.expr_basis] {
            for c in 0..basis.ncols() {
                for i in 0..t.n_vertices() {
                    let d = 3.0 * basis.fixed_view::<3, 1>(3 * i, c).norm();
                    assert!(d <= 0.15 * t.radius + 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_vertex_is_referenced() {
        let t = t7();
        let mut seen = vec![false; t.n_vertices()];
        for f in &t.faces {
            for &i in f {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn groups_are_nonempty_even_on_the_coarsest_mesh() {
        let t = make_toy_template(3, 42, 2, 2).unwrap();
        for g in [&t.groups.jaw, &t.groups.neck, &t.groups.eye_left, &t.groups.eye_right] {
            assert!(!g.is_empty());
        }
    }

    #[test]
    fn container_roundtrip() {
        let t = make_toy_template(5, 162, 4, 3).unwrap();
        let c = t.to_container().unwrap();
        let back = HeadTemplate::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
