//! Synthetic gland pairs with analytic deformation fields.
//!
//! A scenario describes an ellipsoidal gland, how densely to sample it, and a
//! manufactured displacement field. Generation samples the source cloud,
//! labels compartments along the axial (y) direction, pushes every point
//! through the field to get the target, and carries four landmark clusters
//! along.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::elasticity::MaterialConfig;
use crate::geometry::{
    add, deformation_magnitude, sub, Compartment, GeometryError, LandmarkPair, PointFilter,
    PointSet, Region, RigidTransform,
};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unattainable deformation magnitude: {0}")]
    Unattainable(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A rotation (degrees about `axis`) followed by a translation (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidMotion {
    pub axis: Vec3,
    pub angle_deg: f64,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_axis_angle(self.axis, self.angle_deg.to_radians(), self.translation)
    }
}

/// Manufactured displacement field, applied before any rigid motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Deformation {
    /// No deformation; only the scenario's rigid motion.
    Rigid,
    /// `d = G·p` for a general matrix `G`.
    Affine { gradient: [[f64; 3]; 3] },
    /// `d = A·p` with symmetric `A`, so the strain equals `A` everywhere.
    UniformStrain { gradient: [[f64; 3]; 3] },
    /// Gaussian bump pushed in from a contact point; see [`probe_indentation_field`].
    ProbeIndentation {
        amplitude: f64,
        /// Defaults to the soft pole of the axial axis.
        #[serde(default)]
        contact: Option<Vec3>,
        falloff: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Ellipsoid semi-axes (mm).
    #[serde(default = "default_radii")]
    pub radii: Vec3,
    #[serde(default = "default_count")]
    pub n_surface: usize,
    #[serde(default = "default_count")]
    pub n_internal: usize,
    /// Fraction of the axial extent, from the top, labelled rigid.
    #[serde(default = "default_rigid_fraction")]
    pub rigid_fraction: f64,
    pub deformation: Deformation,
    /// Target deformation magnitude (mm). When set, the field is rescaled
    /// until the realised value matches.
    #[serde(default)]
    pub magnitude: Option<f64>,
    #[serde(default)]
    pub rigid_motion: Option<RigidMotion>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub material: MaterialConfig,
}

fn default_radii() -> Vec3 {
    [22.0, 18.0, 16.0]
}

fn default_count() -> usize {
    512
}

fn default_rigid_fraction() -> f64 {
    2.0 / 3.0
}

/// Known answer for a generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Target minus source at every source point (mm).
    pub displacement_field: Vec<Vec3>,
    pub landmark_pairs: Vec<LandmarkPair>,
    /// Multiplier applied to the nominal field.
    pub field_scale: f64,
    /// Deformation magnitude of the generated pair (mm).
    pub realized_dm: f64,
}

/// Gaussian indentation: `a·n̂·exp(−‖p − c‖²/(2f²))`, where `n̂` points from
/// the contact centre `c` towards the gland centre (the origin).
pub fn probe_indentation_field(
    point: Vec3,
    amplitude: f64,
    contact_center: Vec3,
    falloff: f64,
) -> Vec3 {
    let (n, g) = probe_parts(point, contact_center, falloff);
    n.map(|v| amplitude * g * v)
}

/// `∂d_i/∂p_j` of [`probe_indentation_field`], stored `[i][j]`.
pub fn probe_indentation_gradient(
    point: Vec3,
    amplitude: f64,
    contact_center: Vec3,
    falloff: f64,
) -> [[f64; 3]; 3] {
    let (n, g) = probe_parts(point, contact_center, falloff);
    let r = sub(point, contact_center);
    let f2 = falloff * falloff;
    std::array::from_fn(|i| std::array::from_fn(|j| -amplitude * n[i] * g * r[j] / f2))
}

fn probe_parts(point: Vec3, contact: Vec3, falloff: f64) -> (Vec3, f64) {
    let len = (contact[0] * contact[0] + contact[1] * contact[1] + contact[2] * contact[2]).sqrt();
    let n = if len > 0.0 {
        contact.map(|v| -v / len)
    } else {
        [0.0; 3]
    };
    let r = sub(point, contact);
    let g = (-(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) / (2.0 * falloff * falloff)).exp();
    (n, g)
}

fn mat_vec(m: &[[f64; 3]; 3], p: Vec3) -> Vec3 {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad(format!("radii must be positive, got {:?}", self.radii));
        }
        if self.n_surface < 4 || self.n_internal < 4 {
            return bad(format!(
                "need at least 4 surface and 4 internal points, got {} and {}",
                self.n_surface, self.n_internal
            ));
        }
        if !(self.rigid_fraction > 0.0 && self.rigid_fraction < 1.0) {
            return bad(format!(
                "rigid_fraction must lie in (0, 1), got {}",
                self.rigid_fraction
            ));
        }
        match &self.deformation {
            Deformation::Rigid => {
                if self.magnitude.is_some_and(|m| m != 0.0) {
                    return Err(ScenarioError::Unattainable(
                        "a rigid field has zero deformation magnitude".into(),
                    ));
                }
            }
            Deformation::Affine { gradient } | Deformation::UniformStrain { gradient } => {
                if gradient.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("non-finite gradient".into());
                }
                if matches!(self.deformation, Deformation::UniformStrain { .. }) {
                    for i in 0..3 {
                        for j in 0..i {
                            if gradient[i][j] != gradient[j][i] {
                                return bad("uniform-strain gradient must be symmetric".into());
                            }
                        }
                    }
                }
            }
            Deformation::ProbeIndentation {
                amplitude,
                contact,
                falloff,
                ..
            } => {
                if !(*falloff > 0.0 && falloff.is_finite()) {
                    return bad(format!("falloff must be positive, got {falloff}"));
                }
                if !amplitude.is_finite() {
                    return bad("non-finite amplitude".into());
                }
                if contact.is_some_and(|c| c == [0.0; 3]) {
                    return bad("contact centre must differ from the gland centre".into());
                }
            }
        }
        if let Some(m) = self.magnitude {
            if !(m >= 0.0 && m.is_finite()) {
                return bad(format!("magnitude must be non-negative, got {m}"));
            }
        }
        self.material
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Lower boundary of the rigid compartment along y.
    pub fn axial_split(&self) -> f64 {
        let b = self.radii[1];
        -b + (1.0 - self.rigid_fraction) * 2.0 * b
    }

    pub fn compartment_of(&self, p: Vec3) -> Compartment {
        if p[1] >= self.axial_split() {
            Compartment::Rigid
        } else {
            Compartment::Soft
        }
    }

    fn contact(&self) -> Vec3 {
        match &self.deformation {
            Deformation::ProbeIndentation {
                contact: Some(c), ..
            } => *c,
            _ => [0.0, -self.radii[1], 0.0],
        }
    }

    /// Nominal field multiplied by `scale`, before rigid motion.
    pub fn field(&self, p: Vec3, scale: f64) -> Vec3 {
        match &self.deformation {
            Deformation::Rigid => [0.0; 3],
            Deformation::Affine { gradient } | Deformation::UniformStrain { gradient } => {
                mat_vec(gradient, p).map(|v| scale * v)
            }
            Deformation::ProbeIndentation {
                amplitude, falloff, ..
            } => probe_indentation_field(p, scale * amplitude, self.contact(), *falloff),
        }
    }

    /// Spatial gradient of [`Scenario::field`], stored `[i][j] = ∂d_i/∂p_j`.
    pub fn field_gradient(&self, p: Vec3, scale: f64) -> [[f64; 3]; 3] {
        match &self.deformation {
            Deformation::Rigid => [[0.0; 3]; 3],
            Deformation::Affine { gradient } | Deformation::UniformStrain { gradient } => {
                gradient.map(|row| row.map(|v| scale * v))
            }
            Deformation::ProbeIndentation {
                amplitude, falloff, ..
            } => probe_indentation_gradient(p, scale * amplitude, self.contact(), *falloff),
        }
    }

    fn map_point(&self, p: Vec3, scale: f64, rigid: &RigidTransform) -> Vec3 {
        rigid.apply(add(p, self.field(p, scale)))
    }

    /// Named presets used throughout the tests and examples.
    pub fn preset(name: &str) -> Option<Self> {
        let base = |name: &str, deformation: Deformation, magnitude: Option<f64>, seed: u64| Self {
            name: name.into(),
            radii: default_radii(),
            n_surface: 256,
            n_internal: 256,
            rigid_fraction: default_rigid_fraction(),
            deformation,
            magnitude,
            rigid_motion: None,
            seed,
            material: MaterialConfig::default(),
        };
        let s = match name {
            "S1" => base(
                "S1",
                Deformation::UniformStrain {
                    gradient: [[0.05, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
                },
                None,
                1,
            ),
            "S2" => base(
                "S2",
                Deformation::ProbeIndentation {
                    amplitude: 1.0,
                    contact: None,
                    falloff: 14.0,
                },
                Some(6.0),
                7,
            ),
            "S3" => base(
                "S3",
                Deformation::Affine {
                    gradient: [[0.04, 0.02, 0.0], [-0.01, -0.03, 0.01], [0.0, 0.02, 0.02]],
                },
                Some(4.0),
                3,
            ),
            "S4" => {
                let mut s = base(
                    "S4",
                    Deformation::ProbeIndentation {
                        amplitude: 1.0,
                        contact: Some([15.0, -12.0, 4.0]),
                        falloff: 12.0,
                    },
                    Some(6.0),
                    11,
                );
                s.rigid_motion = Some(RigidMotion {
                    axis: [0.2, 0.3, 1.0],
                    angle_deg: 6.0,
                    translation: [1.5, -2.0, 0.5],
                });
                s
            }
            "S5" => {
                let mut s = base("S5", Deformation::Rigid, None, 5);
                s.rigid_motion = Some(RigidMotion {
                    axis: [0.0, 0.0, 1.0],
                    angle_deg: 10.0,
                    translation: [2.0, 1.0, -1.0],
                });
                s
            }
            _ => return None,
        };
        Some(s)
    }

    /// Probe-indentation subject with geometry and contact varied by `index`,
    /// for population experiments.
    pub fn population_subject(index: usize, base_seed: u64, points_per_region: usize) -> Self {
        let seed = base_seed.wrapping_mul(1000).wrapping_add(index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let radii = [
            22.0 * jitter(0.85, 1.15),
            18.0 * jitter(0.85, 1.15),
            16.0 * jitter(0.85, 1.15),
        ];
        let theta = jitter(-0.6, 0.6);
        let b = radii[1];
        let contact = [b * theta.sin(), -b * theta.cos(), jitter(-3.0, 3.0)];
        Self {
            name: format!("P{index:02}"),
            radii,
            n_surface: points_per_region,
            n_internal: points_per_region,
            rigid_fraction: default_rigid_fraction(),
            deformation: Deformation::ProbeIndentation {
                amplitude: 1.0,
                contact: Some(contact),
                falloff: jitter(12.0, 16.0),
            },
            magnitude: Some(jitter(5.5, 8.5)),
            rigid_motion: None,
            seed,
            material: MaterialConfig::default(),
        }
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn sample_source(s: &Scenario, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let [a, b, c] = s.radii;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let n = s.n_surface;
    let mut pts = Vec::with_capacity(n + s.n_internal);
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = phase + GOLDEN_ANGLE * i as f64;
        pts.push([a * r * phi.cos(), b * r * phi.sin(), c * z]);
    }
    while pts.len() < n + s.n_internal {
        let u: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] < 1.0 {
            pts.push([a * u[0], b * u[1], c * u[2]]);
        }
    }
    pts
}

fn landmark_centres(radii: Vec3) -> [(&'static str, Vec3); 4] {
    let [a, b, c] = radii;
    [
        ("apex", [0.0, 0.0, 0.75 * c]),
        ("base", [0.0, 0.0, -0.75 * c]),
        ("cyst", [0.35 * a, 0.4 * b, 0.1 * c]),
        ("calcification", [-0.3 * a, -0.55 * b, -0.1 * c]),
    ]
}

const LANDMARK_POINTS: usize = 8;
const LANDMARK_SIGMA: f64 = 1.0;

/// Builds the source/target pair and its ground truth. Deterministic in the scenario.
pub fn generate(scenario: &Scenario) -> Result<(PointSet, PointSet, GroundTruth), ScenarioError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let points = sample_source(scenario, &mut rng);
    let n_surface = scenario.n_surface;
    let region = (0..points.len())
        .map(|i| {
            if i < n_surface {
                Region::Surface
            } else {
                Region::Internal
            }
        })
        .collect::<Vec<_>>();
    let compartment = points
        .iter()
        .map(|&p| scenario.compartment_of(p))
        .collect::<Vec<_>>();
    let source = PointSet::new(points, region, compartment, scenario.name.clone())?;

    let rigid = scenario
        .rigid_motion
        .map(|m| m.transform())
        .unwrap_or_else(RigidTransform::identity);
    let dm_at = |scale: f64| -> Result<f64, ScenarioError> {
        let warped: Vec<Vec3> = source
            .points
            .iter()
            .map(|&p| scenario.map_point(p, scale, &rigid))
            .collect();
        Ok(deformation_magnitude(&source, &warped, PointFilter::ALL)?)
    };
    let scale = match (scenario.magnitude, &scenario.deformation) {
        (None, _) | (_, Deformation::Rigid) => 1.0,
        (Some(target), _) => fit_scale(target, &dm_at)?,
    };

    let target_pts: Vec<Vec3> = source
        .points
        .iter()
        .map(|&p| scenario.map_point(p, scale, &rigid))
        .collect();
    let displacement_field = source
        .points
        .iter()
        .zip(&target_pts)
        .map(|(&p, &q)| sub(q, p))
        .collect();
    let realized_dm = deformation_magnitude(&source, &target_pts, PointFilter::ALL)?;
    let target = source.with_points(target_pts)?;

    let normal = Normal::new(0.0, LANDMARK_SIGMA).expect("positive sigma");
    let landmark_pairs = landmark_centres(scenario.radii)
        .into_iter()
        .map(|(name, centre)| {
            let src: Vec<Vec3> = (0..LANDMARK_POINTS)
                .map(|_| add(centre, std::array::from_fn(|_| normal.sample(&mut rng))))
                .collect();
            let dst = src
                .iter()
                .map(|&p| scenario.map_point(p, scale, &rigid))
                .collect();
            LandmarkPair::new(name, src, dst)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok((
        source,
        target,
        GroundTruth {
            displacement_field,
            landmark_pairs,
            field_scale: scale,
            realized_dm,
        },
    ))
}

/// Finds the field scale whose deformation magnitude matches `target`:
/// bracket by doubling, then bisect.
fn fit_scale(
    target: f64,
    dm_at: &dyn Fn(f64) -> Result<f64, ScenarioError>,
) -> Result<f64, ScenarioError> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut dm_hi = dm_at(hi)?;
    let mut doublings = 0;
    while dm_hi < target {
        hi *= 2.0;
        dm_hi = dm_at(hi)?;
        doublings += 1;
        if doublings > 60 || !dm_hi.is_finite() {
            return Err(ScenarioError::Unattainable(format!(
                "field never reaches {target} mm (last {dm_hi} at scale {hi})"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let dm = dm_at(mid)?;
        if (dm - target).abs() < 1e-9 * target {
            return Ok(mid);
        }
        if dm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elasticity::strain_from_grad;
    use crate::geometry::rmse;

    #[test]
    fn probe_peak_and_tail() {
        let c = [0.0, -10.0, 0.0];
        let d = probe_indentation_field(c, 3.0, c, 4.0);
        assert!((d[1] - 3.0).abs() < 1e-15 && d[0] == 0.0 && d[2] == 0.0);
        let far = probe_indentation_field([20.0, -10.0, 0.0], 3.0, c, 4.0);
        let mag = (far[0] * far[0] + far[1] * far[1] + far[2] * far[2]).sqrt();
        assert!(mag <= 3.0 * (-12.5f64).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn probe_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let c = [4.0, -15.0, 2.0];
        for _ in 0..50 {
            let p: Vec3 = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
            let g = probe_indentation_gradient(p, 7.0, c, 9.0);
            let h = 1e-5;
            for j in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[j] += h;
                pm[j] -= h;
                let fp = probe_indentation_field(pp, 7.0, c, 9.0);
                let fm = probe_indentation_field(pm, 7.0, c, 9.0);
                for i in 0..3 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let scale = g[i][j].abs().max(1e-6);
                    assert!((fd - g[i][j]).abs() / scale < 1e-6, "{fd} vs {}", g[i][j]);
                }
            }
        }
    }

    #[test]
    fn rigid_scenario_has_no_deformation() {
        let (src, tgt, truth) = generate(&Scenario::preset("S5").unwrap()).unwrap();
        assert!(deformation_magnitude(&src, &tgt.points, PointFilter::ALL).unwrap() < 1e-9);
        assert!(truth.realized_dm < 1e-9);
    }

    #[test]
    fn rigid_with_magnitude_is_unattainable() {
        let mut s = Scenario::preset("S5").unwrap();
        s.magnitude = Some(3.0);
        assert!(matches!(generate(&s), Err(ScenarioError::Unattainable(_))));
    }

    #[test]
    fn uniform_strain_gives_constant_strain() {
        let s = Scenario::preset("S1").unwrap();
        let (src, _, _) = generate(&s).unwrap();
        for &p in &src.points {
            let e = strain_from_grad(&s.field_gradient(p, 1.0));
            assert_eq!(e.components, [0.05, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn s2_hits_requested_magnitude() {
        let (_, _, truth) = generate(&Scenario::preset("S2").unwrap()).unwrap();
        assert!(
            (truth.realized_dm - 6.0).abs() < 0.5,
            "{}",
            truth.realized_dm
        );
    }

    #[test]
    fn generation_is_deterministic_and_labels_follow_rule() {
        for name in ["S1", "S2", "S3", "S4", "S5"] {
            let s = Scenario::preset(name).unwrap();
            let a = generate(&s).unwrap();
            let b = generate(&s).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert_eq!(a.2, b.2);
            for (p, c) in a.0.points.iter().zip(&a.0.compartment) {
                assert_eq!(*c, s.compartment_of(*p));
            }
            let reeval: Vec<Vec3> =
                a.0.points
                    .iter()
                    .map(|&p| {
                        let rigid = s
                            .rigid_motion
                            .map(|m| m.transform())
                            .unwrap_or_else(RigidTransform::identity);
                        sub(s.map_point(p, a.2.field_scale, &rigid), p)
                    })
                    .collect();
            assert_eq!(rmse(&a.2.displacement_field, &reeval).unwrap(), 0.0);
        }
    }

    #[test]
    fn both_compartments_are_populated() {
        let (src, _, truth) = generate(&Scenario::preset("S2").unwrap()).unwrap();
        let rigid = src
            .compartment
            .iter()
            .filter(|&&c| c == Compartment::Rigid)
            .count();
        assert!(rigid > src.len() / 2 && rigid < src.len());
        assert_eq!(truth.landmark_pairs.len(), 4);
        assert!(truth
            .landmark_pairs
            .iter()
            .all(|l| l.source_cluster.len() == 8));
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = Scenario::preset("S2").unwrap();
        s.radii[0] = 0.0;
        assert!(generate(&s).is_err());
        let mut s = Scenario::preset("S2").unwrap();
        s.rigid_fraction = 1.0;
        assert!(generate(&s).is_err());
        let mut s = Scenario::preset("S1").unwrap();
        s.deformation = Deformation::UniformStrain {
            gradient: [[0.0, 0.1, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
        };
        assert!(generate(&s).is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = Scenario::preset("S4").unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&text).unwrap(), s);
        let minimal: Scenario = serde_json::from_str(
            r#"{"name":"m","deformation":{"kind":"probe-indentation","amplitude":2.0,"falloff":10.0}}"#,
        )
        .unwrap();
        assert_eq!(minimal.n_surface, 512);
    }
}
