//! Physical-condition renderer: mesh + albedo + SH light + weak-perspective
//! camera → shaded texture image.

mod raster;
mod sh;

use nalgebra::{DVector, Vector3};

pub use raster::{pixel_center, rasterize, RenderedTexture};
pub use sh::{sh_basis, sh_irradiance, sh_shade, SHLighting, SH_COEFFS, Y00};

use crate::container::Container;
use crate::error::{check_dim, Error, Result};
use crate::flame::{forward_flame, ExprVector, HeadTemplate, PoseVector, ShapeVector, POSE_DIM};

/// Orthographic projection with isotropic scale and 2-D translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl WeakPerspectiveCamera {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid(format!("camera scale must be positive and finite, got {scale}")));
        }
        Ok(Self { scale, translation })
    }
}

/// `(x, y) = s·(X, Y) + t` in normalized image coordinates, depth `= −Z`.
pub fn project(vertices: &[Vector3<f64>], cam: &WeakPerspectiveCamera) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    if !(cam.scale > 0.0) {
        return Err(Error::invalid("camera scale must be positive"));
    }
    let xy = vertices
        .iter()
        .map(|p| [cam.scale * p.x + cam.translation[0], cam.scale * p.y + cam.translation[1]])
        .collect();
    let depth = vertices.iter().map(|p| -p.z).collect();
    Ok((xy, depth))
}

/// Albedo coefficients plus a base skin tone.
#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoParams {
    pub coefficients: Vec<f64>,
    pub base_tone: [f64; 3],
}

impl AlbedoParams {
    pub fn neutral(d: usize) -> Self {
        Self {
            coefficients: vec![0.0; d],
            base_tone: [0.75, 0.6, 0.5],
        }
    }
}

/// Per-vertex RGB albedo `clamp(tone ⊙ pattern + B·α, 0, 1)`.
pub fn expand_albedo(template: &HeadTemplate, albedo: &AlbedoParams) -> Result<Vec<Vector3<f64>>> {
    check_dim("albedo coefficients", template.albedo_dim(), albedo.coefficients.len())?;
    if albedo.coefficients.iter().chain(&albedo.base_tone).any(|v| !v.is_finite()) {
        return Err(Error::invalid("albedo parameters must be finite"));
    }
    let tone = Vector3::from(albedo.base_tone);
    let offsets = &template.albedo_basis * DVector::from_column_slice(&albedo.coefficients);
    Ok(template
        .albedo_pattern
        .iter()
        .enumerate()
        .map(|(i, pat)| {
            let v = tone.component_mul(pat) + Vector3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]);
            v.map(|c| c.clamp(0.0, 1.0))
        })
        .collect())
}

/// Everything needed to render one face instance: β, ρ, ψ, α, l, c.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalCoefficients {
    pub shape: ShapeVector,
    pub pose: PoseVector,
    pub expr: ExprVector,
    pub albedo: AlbedoParams,
    pub light: SHLighting,
    pub camera: WeakPerspectiveCamera,
}

/// Which query attributes an edit takes over from the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeSelection {
    /// Pose ρ together with the camera c (head placement follows the pose).
    pub pose: bool,
    pub expression: bool,
    pub lighting: bool,
}

impl AttributeSelection {
    pub const ALL: Self = Self {
        pose: true,
        expression: true,
        lighting: true,
    };
    pub const POSE: Self = Self {
        pose: true,
        expression: false,
        lighting: false,
    };
    pub const EXPRESSION: Self = Self {
        pose: false,
        expression: true,
        lighting: false,
    };
    pub const LIGHTING: Self = Self {
        pose: false,
        expression: false,
        lighting: true,
    };
}

impl PhysicalCoefficients {
    pub fn neutral(template: &HeadTemplate) -> Self {
        Self {
            shape: ShapeVector::zeros(template.shape_dim()),
            pose: PoseVector::zero(),
            expr: ExprVector::zeros(template.expr_dim()),
            albedo: AlbedoParams::neutral(template.albedo_dim()),
            light: SHLighting::ambient(3.0),
            camera: WeakPerspectiveCamera::new(0.55, [0.0, -0.05]).expect("valid camera"),
        }
    }

    /// Field substitution used at edit time: identity fields (α, β) always
    /// come from `self` (the source), the selected attributes from `query`.
    pub fn recombine(&self, query: &PhysicalCoefficients, select: AttributeSelection) -> PhysicalCoefficients {
        let mut out = self.clone();
        if select.pose {
            out.pose = query.pose;
            out.camera = query.camera;
        }
        if select.expression {
            out.expr = query.expr.clone();
        }
        if select.lighting {
            out.light = query.light;
        }
        out
    }

    /// Names of the fields that differ between two records.
    pub fn diff_fields(&self, other: &PhysicalCoefficients) -> Vec<&'static str> {
        let mut d = Vec::new();
        if self.shape != other.shape {
            d.push("shape");
        }
        if self.pose != other.pose {
            d.push("pose");
        }
        if self.expr != other.expr {
            d.push("expression");
        }
        if self.albedo != other.albedo {
            d.push("albedo");
        }
        if self.light != other.light {
            d.push("lighting");
        }
        if self.camera != other.camera {
            d.push("camera");
        }
        d
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        c.put_f64(&key("shape"), &[self.shape.0.len()], &self.shape.0)?;
        c.put_f64(&key("pose"), &[POSE_DIM], self.pose.values())?;
        c.put_f64(&key("expr"), &[self.expr.0.len()], &self.expr.0)?;
        c.put_f64(&key("albedo.coefficients"), &[self.albedo.coefficients.len()], &self.albedo.coefficients)?;
        c.put_f64(&key("albedo.base_tone"), &[3], &self.albedo.base_tone)?;
        c.put_f64(&key("light"), &[SH_COEFFS, 3], &self.light.to_flat())?;
        c.put_f64(&key("camera.scale"), &[1], &[self.camera.scale])?;
        c.put_f64(&key("camera.translation"), &[2], &self.camera.translation)?;
        Ok(())
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let tone = c.get_f64_vec(&key("albedo.base_tone"))?;
        let tr = c.get_f64_vec(&key("camera.translation"))?;
        check_dim("base tone", 3, tone.len())?;
        check_dim("camera translation", 2, tr.len())?;
        Ok(Self {
            shape: ShapeVector(c.get_f64_vec(&key("shape"))?),
            pose: PoseVector::new(&c.get_f64_vec(&key("pose"))?)?,
            expr: ExprVector(c.get_f64_vec(&key("expr"))?),
            albedo: AlbedoParams {
                coefficients: c.get_f64_vec(&key("albedo.coefficients"))?,
                base_tone: [tone[0], tone[1], tone[2]],
            },
            light: SHLighting::from_flat(&c.get_f64_vec(&key("light"))?)?,
            camera: WeakPerspectiveCamera::new(c.get_f64_vec(&key("camera.scale"))?[0], [tr[0], tr[1]])?,
        })
    }
}

/// Renders the physical condition image for a coefficient record.
pub fn render_condition(
    template: &HeadTemplate,
    coeffs: &PhysicalCoefficients,
    height: usize,
    width: usize,
) -> Result<RenderedTexture> {
    let mesh = forward_flame(template, &coeffs.shape, &coeffs.pose, &coeffs.expr)?;
    let albedo = expand_albedo(template, &coeffs.albedo)?;
    rasterize(&mesh, &albedo, &coeffs.light, &coeffs.camera, height, width)
}

/// Mean (column, row) of covered pixels, `None` if nothing was drawn.
pub fn coverage_centroid(r: &RenderedTexture) -> Option<(f64, f64)> {
    let w = r.width();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (k, &c) in r.coverage.iter().enumerate() {
        if c {
            sx += (k % w) as f64;
            sy += (k / w) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}
