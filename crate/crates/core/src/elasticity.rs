//! Isotropic linear elasticity in Voigt form and the three per-point PDE
//! residuals: static equilibrium (`f1`), Hooke's law (`f2`) and elastic
//! energy (`f3`).
//!
//! Units are millimetres and kilopascals throughout. Voigt ordering is
//! `(xx, yy, zz, xy, xz, yz)`; shear strain components are tensor (not
//! engineering) strains. Absolute values use a zero subgradient at zero.

use serde::{Deserialize, Serialize};

use crate::geometry::Compartment;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ElasticityError {
    #[error("Poisson ratio {0} is at or beyond the incompressible limit 0.5")]
    IncompressibleLimit(f64),
    #[error("invalid material argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Strain,
    Stress,
}

/// Symmetric second-order tensor stored as `(xx, yy, zz, xy, xz, yz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoigtTensor6 {
    pub components: [f64; 6],
    pub kind: TensorKind,
}

impl VoigtTensor6 {
    pub fn strain(components: [f64; 6]) -> Self {
        Self {
            components,
            kind: TensorKind::Strain,
        }
    }

    pub fn stress(components: [f64; 6]) -> Self {
        Self {
            components,
            kind: TensorKind::Stress,
        }
    }

    /// Full 3×3 form.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let c = &self.components;
        [[c[0], c[3], c[4]], [c[3], c[1], c[5]], [c[4], c[5], c[2]]]
    }
}

/// `∂d_i/∂p_j` stored as `[i][j]`.
pub type DispGrad = [[f64; 3]; 3];
/// `∂σ_r/∂p_j` stored as `[r][j]`, rows in Voigt order.
pub type StressGrad = [[f64; 3]; 6];

/// Spatial derivatives of the predicted fields at each source point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpatialGradients {
    pub disp_grad: Vec<DispGrad>,
    pub stress_grad: Vec<StressGrad>,
}

/// Lamé `(λ, μ)` from Young's modulus and Poisson ratio.
pub fn lame_from_e_nu(young: f64, nu: f64) -> Result<(f64, f64), ElasticityError> {
    if !(young > 0.0) {
        return Err(ElasticityError::Argument(format!(
            "Young's modulus must be positive, got {young}"
        )));
    }
    if nu >= 0.5 {
        return Err(ElasticityError::IncompressibleLimit(nu));
    }
    if !(nu > 0.0) {
        return Err(ElasticityError::Argument(format!(
            "Poisson ratio must be in (0, 0.5), got {nu}"
        )));
    }
    let lambda = young * nu / ((1.0 - 2.0 * nu) * (1.0 + nu));
    let mu = young / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

/// Inverse of [`lame_from_e_nu`] for Young's modulus.
pub fn young_from_lame(lambda: f64, mu: f64) -> f64 {
    mu * (3.0 * lambda + 2.0 * mu) / (lambda + mu)
}

/// Infinitesimal strain `½(∇d + ∇dᵀ)`.
pub fn strain_from_grad(g: &DispGrad) -> VoigtTensor6 {
    VoigtTensor6::strain([
        g[0][0],
        g[1][1],
        g[2][2],
        0.5 * (g[0][1] + g[1][0]),
        0.5 * (g[0][2] + g[2][0]),
        0.5 * (g[1][2] + g[2][1]),
    ])
}

/// Adjoint of [`strain_from_grad`].
pub fn strain_from_grad_vjp(d_strain: &[f64; 6]) -> DispGrad {
    let h = |v: f64| 0.5 * v;
    [
        [d_strain[0], h(d_strain[3]), h(d_strain[4])],
        [h(d_strain[3]), d_strain[1], h(d_strain[5])],
        [h(d_strain[4]), h(d_strain[5]), d_strain[2]],
    ]
}

/// Hooke's law acting on `(ε_xx, ε_yy, ε_zz, 2ε_xy, 2ε_xz, 2ε_yz)`.
pub fn constitutive_stress(strain: &VoigtTensor6, lambda: f64, mu: f64) -> VoigtTensor6 {
    VoigtTensor6::stress(hooke(&strain.components, lambda, mu))
}

fn hooke(e: &[f64; 6], lambda: f64, mu: f64) -> [f64; 6] {
    let tr = e[0] + e[1] + e[2];
    [
        lambda * tr + 2.0 * mu * e[0],
        lambda * tr + 2.0 * mu * e[1],
        lambda * tr + 2.0 * mu * e[2],
        2.0 * mu * e[3],
        2.0 * mu * e[4],
        2.0 * mu * e[5],
    ]
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Divergence components `(σ_xj,j, σ_yj,j, σ_zj,j)` using stress symmetry.
fn divergence(g: &StressGrad) -> [f64; 3] {
    [
        g[0][0] + g[3][1] + g[4][2],
        g[3][0] + g[1][1] + g[5][2],
        g[4][0] + g[5][1] + g[2][2],
    ]
}

// (voigt row, derivative column) entries feeding each divergence component.
const DIV_TERMS: [[(usize, usize); 3]; 3] = [
    [(0, 0), (3, 1), (4, 2)],
    [(3, 0), (1, 1), (5, 2)],
    [(4, 0), (5, 1), (2, 2)],
];

/// Equilibrium residual `Σ_i |σ_ij,j|` with zero body force (kPa/mm).
pub fn f1_equilibrium(stress_grad: &StressGrad) -> f64 {
    divergence(stress_grad).iter().map(|v| v.abs()).sum()
}

pub fn f1_equilibrium_grad(stress_grad: &StressGrad) -> StressGrad {
    let div = divergence(stress_grad);
    let mut out = [[0.0; 3]; 6];
    for (i, terms) in DIV_TERMS.iter().enumerate() {
        for &(r, j) in terms {
            out[r][j] += sign(div[i]);
        }
    }
    out
}

/// Constitutive residual: L1 norm of `C:ε − σ` over the six components (kPa).
pub fn f2_constitutive(strain: &VoigtTensor6, stress: &VoigtTensor6, lambda: f64, mu: f64) -> f64 {
    let c = hooke(&strain.components, lambda, mu);
    c.iter()
        .zip(&stress.components)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// `(∂f2/∂ε, ∂f2/∂σ)`.
pub fn f2_constitutive_grad(
    strain: &VoigtTensor6,
    stress: &VoigtTensor6,
    lambda: f64,
    mu: f64,
) -> ([f64; 6], [f64; 6]) {
    let c = hooke(&strain.components, lambda, mu);
    let s: [f64; 6] = std::array::from_fn(|k| sign(c[k] - stress.components[k]));
    let d_stress = s.map(|v| -v);
    // Hooke is symmetric, so its transpose applied to s is the same map
    // with the shear rows carrying 2μ.
    let normal = lambda * (s[0] + s[1] + s[2]);
    let d_strain = [
        normal + 2.0 * mu * s[0],
        normal + 2.0 * mu * s[1],
        normal + 2.0 * mu * s[2],
        2.0 * mu * s[3],
        2.0 * mu * s[4],
        2.0 * mu * s[5],
    ];
    (d_strain, d_stress)
}

const ENERGY_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];

/// Strain energy density `½ ε_ij σ_ij`, shear terms counted twice (kPa).
pub fn f3_energy(strain: &VoigtTensor6, stress: &VoigtTensor6) -> f64 {
    0.5 * (0..6)
        .map(|k| ENERGY_WEIGHTS[k] * strain.components[k] * stress.components[k])
        .sum::<f64>()
}

/// `(∂f3/∂ε, ∂f3/∂σ)`.
pub fn f3_energy_grad(strain: &VoigtTensor6, stress: &VoigtTensor6) -> ([f64; 6], [f64; 6]) {
    let d_strain = std::array::from_fn(|k| 0.5 * ENERGY_WEIGHTS[k] * stress.components[k]);
    let d_stress = std::array::from_fn(|k| 0.5 * ENERGY_WEIGHTS[k] * strain.components[k]);
    (d_strain, d_stress)
}

/// Residuals at one point, from the raw network derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointResiduals {
    pub equilibrium: f64,
    pub constitutive: f64,
    /// Signed strain energy; the loss uses its magnitude.
    pub energy: f64,
}

pub fn point_residuals(
    disp_grad: &DispGrad,
    stress: &[f64; 6],
    stress_grad: &StressGrad,
    lambda: f64,
    mu: f64,
) -> PointResiduals {
    let strain = strain_from_grad(disp_grad);
    let stress = VoigtTensor6::stress(*stress);
    PointResiduals {
        equilibrium: f1_equilibrium(stress_grad),
        constitutive: f2_constitutive(&strain, &stress, lambda, mu),
        energy: f3_energy(&strain, &stress),
    }
}

/// Material constants per source point.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    pub young_modulus: Vec<f64>,
    pub poisson_ratio: Vec<f64>,
    pub lame_lambda: Vec<f64>,
    pub lame_mu: Vec<f64>,
}

impl MaterialField {
    /// Piecewise-constant assignment from compartment labels.
    pub fn from_compartments(
        compartments: &[Compartment],
        config: &MaterialConfig,
    ) -> Result<Self, ElasticityError> {
        let rigid = lame_from_e_nu(config.young_rigid, config.nu)?;
        let soft = lame_from_e_nu(config.young_soft, config.nu)?;
        let mut field = Self {
            young_modulus: Vec::with_capacity(compartments.len()),
            poisson_ratio: vec![config.nu; compartments.len()],
            lame_lambda: Vec::with_capacity(compartments.len()),
            lame_mu: Vec::with_capacity(compartments.len()),
        };
        for c in compartments {
            let (e, (l, m)) = match c {
                Compartment::Rigid => (config.young_rigid, rigid),
                Compartment::Soft => (config.young_soft, soft),
            };
            field.young_modulus.push(e);
            field.lame_lambda.push(l);
            field.lame_mu.push(m);
        }
        Ok(field)
    }

    pub fn len(&self) -> usize {
        self.lame_lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lame_lambda.is_empty()
    }
}

/// Two-compartment material definition (JSON keys as in config files).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialConfig {
    #[serde(rename = "E_rigid_kPa")]
    pub young_rigid: f64,
    #[serde(rename = "E_soft_kPa")]
    pub young_soft: f64,
    pub nu: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            young_rigid: 500.0,
            young_soft: 5.0,
            nu: 0.49,
        }
    }
}

impl MaterialConfig {
    pub fn validate(&self) -> Result<(), ElasticityError> {
        lame_from_e_nu(self.young_rigid, self.nu)?;
        lame_from_e_nu(self.young_soft, self.nu)?;
        Ok(())
    }
}
