//! Point sets, nearest-neighbour search, rigid alignment and registration metrics.

mod metrics;
mod nn;
mod procrustes;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::Vec3;

pub use metrics::{chamfer_distance_metric, chamfer_loss, chamfer_match, rmse, tre, ChamferMatch};
pub use nn::{nearest_brute_force, NearestNeighbors, Strategy, BRUTE_FORCE_LIMIT};
pub use procrustes::{deformation_magnitude, deformation_magnitude_with, procrustes};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("empty point subset: {0}")]
    Empty(&'static str),
    #[error("cardinality mismatch: {0} vs {1}")]
    Mismatch(usize, usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid point set: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Surface,
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compartment {
    Rigid,
    Soft,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Surface => "surface",
            Region::Internal => "internal",
        }
    }
}

impl Compartment {
    pub fn as_str(self) -> &'static str {
        match self {
            Compartment::Rigid => "rigid",
            Compartment::Soft => "soft",
        }
    }
}

/// Selects points by label; `None` matches anything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PointFilter {
    pub region: Option<Region>,
    pub compartment: Option<Compartment>,
}

impl PointFilter {
    pub const ALL: PointFilter = PointFilter {
        region: None,
        compartment: None,
    };

    pub fn region(region: Region) -> Self {
        Self {
            region: Some(region),
            compartment: None,
        }
    }

    pub fn internal(compartment: Compartment) -> Self {
        Self {
            region: Some(Region::Internal),
            compartment: Some(compartment),
        }
    }

    pub fn matches(&self, region: Region, compartment: Compartment) -> bool {
        self.region.is_none_or(|r| r == region) && self.compartment.is_none_or(|c| c == compartment)
    }
}

/// A labelled 3-D point cloud in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub region: Vec<Region>,
    pub compartment: Vec<Compartment>,
    pub subject_id: String,
}

impl PointSet {
    /// Validated constructor: labels must align with points and the cloud
    /// must span three dimensions.
    pub fn new(
        points: Vec<Vec3>,
        region: Vec<Region>,
        compartment: Vec<Compartment>,
        subject_id: impl Into<String>,
    ) -> Result<Self, GeometryError> {
        if region.len() != points.len() || compartment.len() != points.len() {
            return Err(GeometryError::Invalid(format!(
                "{} points but {} region and {} compartment labels",
                points.len(),
                region.len(),
                compartment.len()
            )));
        }
        if points.len() < 4 {
            return Err(GeometryError::Invalid(format!(
                "need at least 4 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite coordinate".into()));
        }
        if is_coplanar(&points) {
            return Err(GeometryError::Invalid("points are coplanar".into()));
        }
        Ok(Self {
            points,
            region,
            compartment,
            subject_id: subject_id.into(),
        })
    }

    /// Same labels and id, new coordinates (e.g. a warped copy).
    pub fn with_points(&self, points: Vec<Vec3>) -> Result<Self, GeometryError> {
        Self::new(
            points,
            self.region.clone(),
            self.compartment.clone(),
            self.subject_id.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    pub fn indices(&self, filter: PointFilter) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| filter.matches(self.region[i], self.compartment[i]))
            .collect()
    }

    pub fn subset(&self, filter: PointFilter) -> Vec<Vec3> {
        self.indices(filter)
            .into_iter()
            .map(|i| self.points[i])
            .collect()
    }
}

/// Named landmark observed as a small cluster in both clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPair {
    pub name: String,
    pub source_cluster: Vec<Vec3>,
    pub target_cluster: Vec<Vec3>,
}

impl LandmarkPair {
    pub fn new(
        name: impl Into<String>,
        source_cluster: Vec<Vec3>,
        target_cluster: Vec<Vec3>,
    ) -> Result<Self, GeometryError> {
        if source_cluster.is_empty() {
            return Err(GeometryError::Empty("landmark source cluster"));
        }
        if target_cluster.is_empty() {
            return Err(GeometryError::Empty("landmark target cluster"));
        }
        Ok(Self {
            name: name.into(),
            source_cluster,
            target_cluster,
        })
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angle` radians about `axis` (normalised internally), then translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(nalgebra::Vector3::from(axis));
        let r = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        Self::from_matrix(r.matrix(), translation)
    }

    pub(crate) fn from_matrix(m: &Matrix3<f64>, translation: Vec3) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Self {
            rotation,
            translation,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Orthonormal with determinant +1, both within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let m = self.matrix();
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        ortho <= tol && (m.determinant() - 1.0).abs() <= tol
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

pub(crate) fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn is_coplanar(points: &[Vec3]) -> bool {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = nalgebra::Vector3::from(sub(*p, c));
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    max <= 0.0 || min <= 1e-12 * max
}
