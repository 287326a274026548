use nalgebra::{Matrix3, Vector3};

const SMALL_ANGLE: f64 = 1e-8;

fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Exponential map from an axis-angle vector to a rotation matrix.
///
/// Below `1e-8` radians the closed form `sin θ / θ` is numerically 0/0, so the
/// second-order Taylor expansion `I + K + K²/2` is used instead.
pub fn axis_angle_to_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(r);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(axis_angle_to_matrix(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let x = r * Vector3::x();
        assert_relative_eq!(x, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let tiny = Vector3::new(3e-9, -2e-9, 1e-9);
        let just_above = tiny * (1.01 * SMALL_ANGLE / tiny.norm());
        let a = axis_angle_to_matrix(&tiny);
        let b = axis_angle_to_matrix(&just_above);
        assert_relative_eq!(a, b, epsilon = 1e-7);
        assert!((a.transpose() * a - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn result_is_orthonormal_with_unit_determinant() {
        let r = axis_angle_to_matrix(&Vector3::new(0.4, -1.1, 2.0));
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }
}
