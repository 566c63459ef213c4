use nalgebra::{Matrix3, Vector3, SVD};

use crate::Vec3;

use super::{centroid, dist2, GeometryError, PointFilter, PointSet, RigidTransform};

/// Least-squares rigid transform taking `source[i]` onto `warped[i]`.
///
/// Kabsch: SVD of the cross-covariance, with the left singular vector of the
/// smallest singular value negated when the raw product is a reflection.
pub fn procrustes(source: &[Vec3], warped: &[Vec3]) -> Result<RigidTransform, GeometryError> {
    if source.len() != warped.len() {
        return Err(GeometryError::Mismatch(source.len(), warped.len()));
    }
    if source.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "{} points, need at least 3",
            source.len()
        )));
    }
    let cs = Vector3::from(centroid(source));
    let cw = Vector3::from(centroid(warped));
    // H = Σ (w - c_w)(s - c_s)ᵀ, so R = U·Vᵀ maps source onto warped.
    let mut h = Matrix3::zeros();
    for (s, w) in source.iter().zip(warped) {
        h += (Vector3::from(*w) - cw) * (Vector3::from(*s) - cs).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(GeometryError::Degenerate("SVD did not converge".into()));
    };
    let sv = svd.singular_values;
    let max = sv.max();
    let rank = sv.iter().filter(|&&v| v > 1e-12 * max).count();
    if max <= 0.0 || rank < 2 {
        return Err(GeometryError::Degenerate(format!(
            "cross-covariance rank {rank} (singular values {:?})",
            sv.as_slice()
        )));
    }
    if (u * v_t).determinant() < 0.0 {
        let smallest = sv.imin();
        u.column_mut(smallest).neg_mut();
    }
    let r = u * v_t;
    let t = cw - r * cs;
    Ok(RigidTransform::from_matrix(&r, [t.x, t.y, t.z]))
}

/// Mean residual `‖R·p + t − T(p)‖` over the filtered subset, with `(R, t)`
/// fitted on the full point set.
pub fn deformation_magnitude(
    source: &PointSet,
    warped: &[Vec3],
    filter: PointFilter,
) -> Result<f64, GeometryError> {
    let transform = procrustes(&source.points, warped)?;
    deformation_magnitude_with(source, warped, &transform, filter)
}

/// As [`deformation_magnitude`], reusing an already fitted transform.
pub fn deformation_magnitude_with(
    source: &PointSet,
    warped: &[Vec3],
    transform: &RigidTransform,
    filter: PointFilter,
) -> Result<f64, GeometryError> {
    if warped.len() != source.len() {
        return Err(GeometryError::Mismatch(source.len(), warped.len()));
    }
    let idx = source.indices(filter);
    if idx.is_empty() {
        return Err(GeometryError::Empty("deformation-magnitude subset"));
    }
    let total: f64 = idx
        .iter()
        .map(|&i| dist2(transform.apply(source.points[i]), warped[i]).sqrt())
        .sum();
    Ok(total / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Compartment, Region};

    fn cloud() -> Vec<Vec3> {
        vec![
            [0.0, 0.0, 0.0],
            [4.0, 0.0, 0.0],
            [0.0, 3.0, 0.0],
            [0.0, 0.0, 2.0],
            [1.0, 1.0, 1.0],
            [-2.0, 1.0, 0.5],
        ]
    }

    #[test]
    fn recovers_quarter_turn_and_shift() {
        let truth = RigidTransform::from_axis_angle(
            [0.0, 0.0, 1.0],
            std::f64::consts::FRAC_PI_2,
            [1.0, 2.0, 3.0],
        );
        let src = cloud();
        let dst: Vec<Vec3> = src.iter().map(|&p| truth.apply(p)).collect();
        let est = procrustes(&src, &dst).unwrap();
        assert!(est.is_proper(1e-9));
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.rotation[i][j] - truth.rotation[i][j]).abs() < 1e-9);
            }
            assert!((est.translation[i] - truth.translation[i]).abs() < 1e-9);
        }
        let resid: f64 = src
            .iter()
            .zip(&dst)
            .map(|(&s, &d)| dist2(est.apply(s), d))
            .sum();
        assert!(resid.sqrt() < 1e-9);
    }

    #[test]
    fn no_motion_gives_identity() {
        let src = cloud();
        let est = procrustes(&src, &src).unwrap();
        let id = RigidTransform::identity();
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.rotation[i][j] - id.rotation[i][j]).abs() < 1e-12);
            }
            assert!(est.translation[i].abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_is_corrected() {
        let src = cloud();
        let mirrored: Vec<Vec3> = src.iter().map(|p| [p[0], p[1], -p[2]]).collect();
        let est = procrustes(&src, &mirrored).unwrap();
        assert!(est.is_proper(1e-9));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            procrustes(&cloud()[..2], &cloud()[..2]),
            Err(GeometryError::Degenerate(_))
        ));
        let line: Vec<Vec3> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(matches!(
            procrustes(&line, &line),
            Err(GeometryError::Degenerate(_))
        ));
        assert!(matches!(
            procrustes(&cloud(), &cloud()[..4]),
            Err(GeometryError::Mismatch(6, 4))
        ));
    }

    #[test]
    fn rigid_motion_has_zero_deformation() {
        let src = cloud();
        let n = src.len();
        let region = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    Region::Internal
                } else {
                    Region::Surface
                }
            })
            .collect();
        let comp = (0..n)
            .map(|i| {
                if i < 3 {
                    Compartment::Rigid
                } else {
                    Compartment::Soft
                }
            })
            .collect();
        let ps = PointSet::new(src.clone(), region, comp, "s").unwrap();
        let t = RigidTransform::from_axis_angle([1.0, -1.0, 0.3], 1.1, [5.0, -2.0, 0.0]);
        let warped: Vec<Vec3> = src.iter().map(|&p| t.apply(p)).collect();
        for f in [
            PointFilter::ALL,
            PointFilter::region(Region::Internal),
            PointFilter::internal(Compartment::Rigid),
            PointFilter::internal(Compartment::Soft),
        ] {
            assert!(deformation_magnitude(&ps, &warped, f).unwrap() < 1e-9);
        }
    }
}
