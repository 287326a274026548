use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{axis_angle_to_matrix, Joint, PoseVector, NUM_JOINTS};
use crate::error::{check_dim, Error, Result};

/// Per-joint world transforms `(R, t)` mapping a rest-space point `p` near
/// joint `j` to `R (p − J_j) + t`.
fn joint_transforms(joints: &[Vector3<f64>], rho: &PoseVector) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let mut out: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(NUM_JOINTS + 1);
    for &j in &Joint::ALL {
        let local = axis_angle_to_matrix(&rho.joint(j));
        let idx = j as usize;
        let world = match j.parent() {
            None => (local, joints[idx]),
            Some(p) => {
                let (rp, tp) = out[p as usize];
                (rp * local, rp * (joints[idx] - joints[p as usize]) + tp)
            }
        };
        out.push(world);
    }
    out
}

/// Linear blend skinning of `t_p` around `joints` (root first) with the
/// `(k+1) × n` convex weight matrix.
pub fn blend_skin(
    t_p: &[Vector3<f64>],
    joints: &[Vector3<f64>],
    rho: &PoseVector,
    weights: &DMatrix<f64>,
) -> Result<Vec<Vector3<f64>>> {
    check_dim("joint count", NUM_JOINTS + 1, joints.len())?;
    check_dim("blendweight rows", NUM_JOINTS + 1, weights.nrows())?;
    check_dim("blendweight columns", t_p.len(), weights.ncols())?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("blendweights must be finite and nonnegative"));
    }
    let transforms = joint_transforms(joints, rho);
    Ok(t_p
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc = Vector3::zeros();
            for (j, (r, t)) in transforms.iter().enumerate() {
                let w = weights[(j, i)];
                if w != 0.0 {
                    acc += w * (r * (p - joints[j]) + t);
                }
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flame::POSE_DIM;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn joints() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.8, -0.1),
            Vector3::new(0.0, 0.5, 0.3),
            Vector3::new(-0.3, -0.15, 0.8),
            Vector3::new(0.3, -0.15, 0.8),
        ]
    }

    fn points() -> Vec<Vector3<f64>> {
        (0..20)
            .map(|i| {
                let f = i as f64;
                Vector3::new((0.7 * f).sin(), (1.3 * f).cos(), 0.1 * f - 1.0)
            })
            .collect()
    }

    fn weights_on(joint: Joint, n: usize) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(NUM_JOINTS + 1, n);
        for i in 0..n {
            w[(joint as usize, i)] = 1.0;
        }
        w
    }

    fn mixed_weights(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(NUM_JOINTS + 1, n, |j, i| ((i + 3 * j) % 5) as f64 + 0.5)
    }

    fn normalized_columns(mut w: DMatrix<f64>) -> DMatrix<f64> {
        for mut c in w.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        w
    }

    #[test]
    fn zero_pose_is_identity() {
        let p = points();
        let w = normalized_columns(mixed_weights(p.len()));
        let out = blend_skin(&p, &joints(), &PoseVector::zero(), &w).unwrap();
        for (a, b) in out.iter().zip(&p) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_rotation_is_rigid_about_root() {
        let p = points();
        let w = normalized_columns(mixed_weights(p.len()));
        let g = Vector3::new(0.3, -0.5, 0.2);
        let rho = PoseVector::zero().with_joint(Joint::Root, g).unwrap();
        let out = blend_skin(&p, &joints(), &rho, &w).unwrap();
        let r = axis_angle_to_matrix(&g);
        let root = joints()[0];
        for (a, b) in out.iter().zip(&p) {
            assert_relative_eq!(*a, r * (b - root) + root, epsilon = 1e-12);
        }
    }

    #[test]
    fn jaw_weighted_vertex_rotates_about_jaw_joint() {
        let p = vec![Vector3::new(0.1, 0.9, 0.6)];
        let theta = 0.35;
        let rho = PoseVector::zero().with_joint(Joint::Jaw, Vector3::new(theta, 0.0, 0.0)).unwrap();
        let out = blend_skin(&p, &joints(), &rho, &weights_on(Joint::Jaw, 1)).unwrap();
        // closed-form rotation about the x axis through the jaw joint
        let j = joints()[Joint::Jaw as usize];
        let d = p[0] - j;
        let (s, c) = theta.sin_cos();
        let expected = j + Vector3::new(d.x, c * d.y - s * d.z, s * d.y + c * d.z);
        assert_relative_eq!(out[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn dimension_checks() {
        let p = points();
        assert!(blend_skin(&p, &joints()[..3], &PoseVector::zero(), &weights_on(Joint::Root, p.len())).is_err());
        assert!(blend_skin(&p, &joints(), &PoseVector::zero(), &weights_on(Joint::Root, 3)).is_err());
    }

    proptest! {
        #[test]
        fn single_joint_skinning_preserves_distances(
            vals in proptest::collection::vec(-0.9f64..0.9, POSE_DIM),
            joint in 0usize..=NUM_JOINTS,
        ) {
            let rho = PoseVector::new(&vals).unwrap();
            let p = points();
            let out = blend_skin(&p, &joints(), &rho, &weights_on(Joint::from_index(joint), p.len())).unwrap();
            for i in 0..p.len() {
                for k in (i + 1)..p.len() {
                    let d0 = (p[i] - p[k]).norm();
                    let d1 = (out[i] - out[k]).norm();
                    prop_assert!(((d1 - d0) / d0).abs() <= 1e-5);
                }
            }
        }
    }
}
