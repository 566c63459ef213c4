use crate::Vec3;

use super::{add, centroid, dist2, norm, sub, GeometryError, LandmarkPair, NearestNeighbors};

/// Nearest-neighbour assignments in both directions between two subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamferMatch {
    /// For each warped point: `(target index, squared distance)`.
    pub warped_to_target: Vec<(usize, f64)>,
    /// For each target point: `(warped index, squared distance)`.
    pub target_to_warped: Vec<(usize, f64)>,
}

impl ChamferMatch {
    /// Mean-of-min squared distances, target→warped plus warped→target.
    pub fn loss(&self) -> f64 {
        mean(self.target_to_warped.iter().map(|m| m.1))
            + mean(self.warped_to_target.iter().map(|m| m.1))
    }

    pub fn distance(&self) -> f64 {
        0.5 * (mean(self.target_to_warped.iter().map(|m| m.1.sqrt()))
            + mean(self.warped_to_target.iter().map(|m| m.1.sqrt())))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len() as f64;
    it.sum::<f64>() / n
}

pub fn chamfer_match(warped: &[Vec3], target: &[Vec3]) -> Result<ChamferMatch, GeometryError> {
    if warped.is_empty() {
        return Err(GeometryError::Empty("warped subset"));
    }
    if target.is_empty() {
        return Err(GeometryError::Empty("target subset"));
    }
    let to_target = NearestNeighbors::new(target);
    let to_warped = NearestNeighbors::new(warped);
    Ok(ChamferMatch {
        warped_to_target: warped.iter().map(|&w| to_target.nearest(w)).collect(),
        target_to_warped: target.iter().map(|&t| to_warped.nearest(t)).collect(),
    })
}

/// Bidirectional mean nearest-neighbour squared distance (mm²).
pub fn chamfer_loss(warped: &[Vec3], target: &[Vec3]) -> Result<f64, GeometryError> {
    Ok(chamfer_match(warped, target)?.loss())
}

/// Half the sum of the two mean nearest-neighbour distances (mm).
pub fn chamfer_distance_metric(warped: &[Vec3], target: &[Vec3]) -> Result<f64, GeometryError> {
    Ok(chamfer_match(warped, target)?.distance())
}

/// Mean distance between warped-source and target landmark centroids.
///
/// `source_displacements[i]` holds one displacement per point of
/// `landmarks[i].source_cluster`.
pub fn tre(
    landmarks: &[LandmarkPair],
    source_displacements: &[Vec<Vec3>],
) -> Result<f64, GeometryError> {
    if landmarks.is_empty() {
        return Err(GeometryError::Empty("landmark list"));
    }
    if landmarks.len() != source_displacements.len() {
        return Err(GeometryError::Mismatch(
            landmarks.len(),
            source_displacements.len(),
        ));
    }
    let mut total = 0.0;
    for (pair, disp) in landmarks.iter().zip(source_displacements) {
        if disp.len() != pair.source_cluster.len() {
            return Err(GeometryError::Mismatch(
                pair.source_cluster.len(),
                disp.len(),
            ));
        }
        let warped: Vec<Vec3> = pair
            .source_cluster
            .iter()
            .zip(disp)
            .map(|(&p, &d)| add(p, d))
            .collect();
        total += dist2(centroid(&warped), centroid(&pair.target_cluster)).sqrt();
    }
    Ok(total / landmarks.len() as f64)
}

/// Root-mean-square 3-D displacement error (mm).
pub fn rmse(predicted: &[Vec3], ground_truth: &[Vec3]) -> Result<f64, GeometryError> {
    if predicted.len() != ground_truth.len() {
        return Err(GeometryError::Mismatch(predicted.len(), ground_truth.len()));
    }
    if predicted.is_empty() {
        return Err(GeometryError::Empty("displacement field"));
    }
    let sum: f64 = predicted
        .iter()
        .zip(ground_truth)
        .map(|(&a, &b)| {
            let e = norm(sub(a, b));
            e * e
        })
        .sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chamfer_loss_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer_loss(&a, &a).unwrap(), 0.0);
        let w = vec![[0.0, 0.0, 0.0]];
        let t = vec![[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(chamfer_loss(&w, &t).unwrap(), 6.0);
        assert_eq!(chamfer_loss(&t, &w).unwrap(), 6.0);
    }

    #[test]
    fn chamfer_loss_translation_invariant() {
        let w = vec![[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]];
        let t = vec![[1.0, 0.0, 0.0], [3.0, 0.0, 0.5], [0.0, 4.0, 0.0]];
        let shift = |v: &[Vec3]| {
            v.iter()
                .map(|p| add(*p, [10.0, -3.0, 7.0]))
                .collect::<Vec<_>>()
        };
        let base = chamfer_loss(&w, &t).unwrap();
        let moved = chamfer_loss(&shift(&w), &shift(&t)).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn empty_subsets_are_rejected() {
        assert_eq!(
            chamfer_loss(&[], &[[0.0; 3]]),
            Err(GeometryError::Empty("warped subset"))
        );
        assert_eq!(
            chamfer_distance_metric(&[[0.0; 3]], &[]),
            Err(GeometryError::Empty("target subset"))
        );
    }

    #[test]
    fn chamfer_distance_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer_distance_metric(&a, &a).unwrap(), 0.0);
        assert_eq!(
            chamfer_distance_metric(&[[0.0, 0.0, 0.0]], &[[2.0, 0.0, 0.0]]).unwrap(),
            2.0
        );
    }

    #[test]
    fn tre_examples() {
        let single = LandmarkPair::new("a", vec![[0.0; 3]], vec![[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(
            tre(std::slice::from_ref(&single), &[vec![[0.0; 3]]]).unwrap(),
            5.0
        );
        // Displacing the source cluster onto the target centroid.
        assert_eq!(
            tre(std::slice::from_ref(&single), &[vec![[3.0, 4.0, 0.0]]]).unwrap(),
            0.0
        );
        let p1 = LandmarkPair::new("a", vec![[0.0; 3]], vec![[2.0, 0.0, 0.0]]).unwrap();
        let p2 = LandmarkPair::new(
            "b",
            vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            vec![[0.0, 4.0, 0.0]],
        )
        .unwrap();
        let d = vec![vec![[0.0; 3]], vec![[0.0; 3], [0.0; 3]]];
        assert_eq!(tre(&[p1, p2], &d).unwrap(), 3.0);
        assert_eq!(tre(&[], &[]), Err(GeometryError::Empty("landmark list")));
    }

    #[test]
    fn rmse_examples() {
        let a = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&[[1.0, 2.0, 2.0]], &[[0.0; 3]]).unwrap(), 3.0);
        let b = [0.5, -1.0, 2.0];
        let biased: Vec<Vec3> = a.iter().map(|&p| add(p, b)).collect();
        assert!((rmse(&biased, &a).unwrap() - norm(b)).abs() < 1e-15);
        assert_eq!(rmse(&a, &a[..1]), Err(GeometryError::Mismatch(2, 1)));
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_nonnegative_and_order_free(
            a in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..40),
            b in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..40),
        ) {
            let ab = chamfer_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer_loss(&b, &a).unwrap());
            let mut rev = a.clone();
            rev.reverse();
            let cd = chamfer_distance_metric(&a, &b).unwrap();
            prop_assert!((cd - chamfer_distance_metric(&rev, &b).unwrap()).abs() < 1e-12);
        }
    }
}
