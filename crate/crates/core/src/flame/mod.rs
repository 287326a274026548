//! Miniature morphable head model.
//!
//! `forward_flame` evaluates `M(β, ρ, ψ) = W(T_P(β, ρ, ψ), J(β), ρ, 𝒲)`: the
//! template plus shape, expression and pose-corrective offsets, skinned by
//! linear blend skinning around shape-dependent joints.

mod rotation;
mod skinning;
pub mod template;

use nalgebra::{DVector, Vector3};

pub use rotation::axis_angle_to_matrix;
pub use skinning::blend_skin;
pub use template::{make_toy_template, make_toy_template_with_albedo, HeadTemplate, VertexGroups};

use crate::error::{check_dim, Error, Result};

/// Number of non-root joints (neck, jaw, two eyeballs).
pub const NUM_JOINTS: usize = 4;
/// Length of the pose vector: global rotation plus one axis-angle per joint.
pub const POSE_DIM: usize = 3 * NUM_JOINTS + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Joint {
    Root = 0,
    Neck = 1,
    Jaw = 2,
    EyeLeft = 3,
    EyeRight = 4,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS + 1] = [Joint::Root, Joint::Neck, Joint::Jaw, Joint::EyeLeft, Joint::EyeRight];

    pub fn from_index(i: usize) -> Joint {
        Self::ALL[i]
    }

    /// Fixed kinematic chain: root → neck → jaw, root → each eyeball.
    pub fn parent(self) -> Option<Joint> {
        match self {
            Joint::Root => None,
            Joint::Neck | Joint::EyeLeft | Joint::EyeRight => Some(Joint::Root),
            Joint::Jaw => Some(Joint::Neck),
        }
    }
}

/// Shape coefficients β.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeVector(pub Vec<f64>);

/// Expression coefficients ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprVector(pub Vec<f64>);

impl ShapeVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }
}

impl ExprVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }
}

/// Axis-angle pose: global rotation followed by neck, jaw, left eye, right eye.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector {
    axis_angle: [f64; POSE_DIM],
}

impl Default for PoseVector {
    fn default() -> Self {
        Self::zero()
    }
}

impl PoseVector {
    pub fn zero() -> Self {
        Self {
            axis_angle: [0.0; POSE_DIM],
        }
    }

    /// Validates length, finiteness and that every axis-angle has norm below π.
    pub fn new(values: &[f64]) -> Result<Self> {
        check_dim("pose vector", POSE_DIM, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose vector contains non-finite values"));
        }
        for (j, r) in values.chunks_exact(3).enumerate() {
            let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if norm >= std::f64::consts::PI {
                return Err(Error::invalid(format!("joint {j} rotation norm {norm} ≥ π")));
            }
        }
        let mut axis_angle = [0.0; POSE_DIM];
        axis_angle.copy_from_slice(values);
        Ok(Self { axis_angle })
    }

    pub fn values(&self) -> &[f64; POSE_DIM] {
        &self.axis_angle
    }

    pub fn joint(&self, j: Joint) -> Vector3<f64> {
        let i = 3 * j as usize;
        Vector3::new(self.axis_angle[i], self.axis_angle[i + 1], self.axis_angle[i + 2])
    }

    pub fn with_joint(mut self, j: Joint, r: Vector3<f64>) -> Result<Self> {
        let i = 3 * j as usize;
        self.axis_angle[i..i + 3].copy_from_slice(r.as_slice());
        Self::new(&self.axis_angle)
    }
}

/// Posed geometry with per-vertex unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

fn check_coeffs(what: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    check_dim(what, expected, v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn add_basis(out: &mut [Vector3<f64>], basis: &nalgebra::DMatrix<f64>, coeffs: &[f64]) {
    if coeffs.iter().all(|&c| c == 0.0) {
        return;
    }
    let offsets = basis * DVector::from_column_slice(coeffs);
    for (i, p) in out.iter_mut().enumerate() {
        *p += Vector3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]);
    }
}

fn shaped_vertices(template: &HeadTemplate, beta: &ShapeVector) -> Result<Vec<Vector3<f64>>> {
    check_coeffs("shape vector", template.shape_dim(), &beta.0)?;
    let mut v = template.vertices_rest.clone();
    add_basis(&mut v, &template.shape_basis, &beta.0);
    Ok(v)
}

/// Joint positions `J(β)` of the shaped (unposed) template, root first.
pub fn shaped_joints(template: &HeadTemplate, beta: &ShapeVector) -> Result<Vec<Vector3<f64>>> {
    let v = shaped_vertices(template, beta)?;
    Ok(regress_joints(template, &v))
}

fn regress_joints(template: &HeadTemplate, v: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    template
        .joint_regressor
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(v)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, p)| p * *w)
                .sum()
        })
        .collect()
}

/// Flattened `vec(R_j − I)` for the non-root joints.
pub fn pose_corrective_features(rho: &PoseVector) -> Vec<f64> {
    let mut f = Vec::with_capacity(9 * NUM_JOINTS);
    for &j in &Joint::ALL[1..] {
        let r = axis_angle_to_matrix(&rho.joint(j)) - nalgebra::Matrix3::identity();
        // row-major flattening
        for a in 0..3 {
            for b in 0..3 {
                f.push(r[(a, b)]);
            }
        }
    }
    f
}

/// `T_P(β, ρ, ψ)`: rest vertices plus shape, expression and pose-corrective offsets.
pub fn pose_rest_vertices(
    template: &HeadTemplate,
    beta: &ShapeVector,
    rho: &PoseVector,
    psi: &ExprVector,
) -> Result<Vec<Vector3<f64>>> {
    check_coeffs("expression vector", template.expr_dim(), &psi.0)?;
    let mut v = shaped_vertices(template, beta)?;
    add_basis(&mut v, &template.expr_basis, &psi.0);
    add_basis(&mut v, &template.pose_corrective_basis, &pose_corrective_features(rho));
    Ok(v)
}

/// Area-weighted vertex normals, unit length.
pub fn vertex_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::z()
            }
        })
        .collect()
}

/// The full forward model `M(β, ρ, ψ)`.
pub fn forward_flame(template: &HeadTemplate, beta: &ShapeVector, rho: &PoseVector, psi: &ExprVector) -> Result<Mesh> {
    let t_p = pose_rest_vertices(template, beta, rho, psi)?;
    let joints = shaped_joints(template, beta)?;
    let vertices = blend_skin(&t_p, &joints, rho, &template.blendweights)?;
    let normals = vertex_normals(&vertices, &template.faces);
    Ok(Mesh {
        vertices,
        faces: template.faces.clone(),
        normals,
    })
}
