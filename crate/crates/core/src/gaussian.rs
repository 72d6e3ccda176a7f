//! Gaussian primitive types and the covariance ↔ (rotation, scale) bridge.
//!
//! A primitive's world-space covariance is parameterized as Σ = R S Sᵀ Rᵀ
//! where R is the rotation matrix of a unit quaternion and S = diag(scale).
//! The inverse direction recovers (q, s) from a covariance by eigenvalue
//! decomposition, sorting eigenvalues descending and fixing handedness.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Floor applied to every scale component; keeps Σ⁻¹ well-conditioned.
pub const EPS_SCALE: f64 = 1e-7;
/// Floor applied to covariance eigenvalues on construction.
pub const EPS_PD: f64 = 1e-12;
/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("degenerate covariance")]
    DegenerateCovariance,
}

/// Symmetric positive-definite 3×3 covariance, meters².
///
/// Construction symmetrizes the input and clamps eigenvalues to [`EPS_PD`],
/// so a held value always satisfies both invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceMatrix(Matrix3<f64>);

impl CovarianceMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("covariance"));
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        if eig.eigenvalues.min() >= EPS_PD {
            return Ok(Self(sym));
        }
        let clamped = Vector3::from_iterator(eig.eigenvalues.iter().map(|&l| l.max(EPS_PD)));
        let rebuilt = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        // rebuild can reintroduce asymmetry at rounding level
        Ok(Self((rebuilt + rebuilt.transpose()) * 0.5))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// One splat: an anisotropic 3D Gaussian with appearance attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    /// World-space mean, meters.
    pub mean: Vector3<f64>,
    /// Orientation of the principal axes.
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations, meters; each ≥ [`EPS_SCALE`].
    pub scale: Vector3<f64>,
    /// Opacity in [0, 1]; also the density used in alpha blending.
    pub opacity: f64,
    /// Degree-0 spherical-harmonic color coefficients.
    pub color: Vector3<f64>,
    /// Higher-order SH coefficients carried through I/O opaquely; usually empty.
    pub sh_rest: Vec<f32>,
    /// Average loss-gradient magnitude, ≥ 0. Ingested as metadata.
    pub grad_stat: f64,
    /// Unique, monotone index assigned when the primitive enters a map.
    pub insertion_index: u64,
    /// Position in the keyframe list this primitive was spawned from.
    pub keyframe_index: u32,
}

impl GaussianPrimitive {
    /// Builds a primitive, normalizing the quaternion, flooring scales at
    /// [`EPS_SCALE`], clamping opacity to [0, 1] and grad_stat to ≥ 0.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mean: Vector3<f64>,
        rotation: Quaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
        grad_stat: f64,
        keyframe_index: u32,
    ) -> Result<Self, GeometryError> {
        let finite = mean.iter().chain(scale.iter()).chain(color.iter()).all(|v| v.is_finite())
            && rotation.coords.iter().all(|v| v.is_finite())
            && opacity.is_finite()
            && grad_stat.is_finite();
        if !finite {
            return Err(GeometryError::NonFinite("primitive"));
        }
        if rotation.norm() < 1e-12 {
            return Err(GeometryError::InvalidArgument("zero quaternion"));
        }
        Ok(Self {
            mean,
            rotation: UnitQuaternion::from_quaternion(rotation),
            scale: scale.map(|s| s.max(EPS_SCALE)),
            opacity: opacity.clamp(0.0, 1.0),
            color,
            sh_rest: Vec::new(),
            grad_stat: grad_stat.max(0.0),
            insertion_index: 0,
            keyframe_index,
        })
    }

    /// World-space covariance R S Sᵀ Rᵀ of this primitive.
    pub fn covariance(&self) -> CovarianceMatrix {
        covariance_from_qs(self.rotation.into_inner(), self.scale)
            .expect("primitive invariants guarantee a valid covariance")
    }
}

/// Ordered collection of primitives with unique insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatMap {
    primitives: Vec<GaussianPrimitive>,
    next_insertion_index: u64,
}

impl SplatMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adopts primitives in the given order, assigning indices 0..n.
    pub fn from_ordered(mut primitives: Vec<GaussianPrimitive>) -> Self {
        for (i, p) in primitives.iter_mut().enumerate() {
            p.insertion_index = i as u64;
        }
        let next = primitives.len() as u64;
        Self { primitives, next_insertion_index: next }
    }

    /// Assembles a map from already-indexed parts. Indices must be unique
    /// and below `next_insertion_index`; intended for merge-pass output.
    pub fn from_parts(primitives: Vec<GaussianPrimitive>, next_insertion_index: u64) -> Self {
        debug_assert!(primitives.iter().all(|p| p.insertion_index < next_insertion_index));
        Self { primitives, next_insertion_index }
    }

    /// Appends a primitive, stamping it with the next insertion index.
    pub fn insert(&mut self, mut p: GaussianPrimitive) -> u64 {
        let idx = self.next_insertion_index;
        p.insertion_index = idx;
        self.next_insertion_index += 1;
        self.primitives.push(p);
        idx
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn next_insertion_index(&self) -> u64 {
        self.next_insertion_index
    }
}

/// Rotation matrix of a (renormalized) quaternion.
fn rotation_matrix(q: Quaternion<f64>) -> Matrix3<f64> {
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

/// Σ = R S Sᵀ Rᵀ with R the rotation of `rotation` and S = diag(scale).
///
/// The quaternion is renormalized internally; scales must be positive.
pub fn covariance_from_qs(
    rotation: Quaternion<f64>,
    scale: Vector3<f64>,
) -> Result<CovarianceMatrix, GeometryError> {
    if !rotation.coords.iter().all(|v| v.is_finite()) || !scale.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("covariance_from_qs"));
    }
    if rotation.norm() < 1e-12 {
        return Err(GeometryError::InvalidArgument("zero quaternion"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(GeometryError::InvalidArgument("non-positive scale"));
    }
    let r = rotation_matrix(rotation);
    let d = Matrix3::from_diagonal(&scale.component_mul(&scale));
    CovarianceMatrix::new(r * d * r.transpose())
}

/// Recovers (q, s) from a covariance via eigenvalue decomposition.
///
/// Eigenvalues are sorted descending; the eigenvector basis is made
/// right-handed by flipping the first column when det < 0; s = √λ floored
/// at [`EPS_SCALE`]. The returned pair reproduces the input covariance under
/// [`covariance_from_qs`] although q itself is unique only up to the usual
/// eigenvector sign/ordering ambiguities.
pub fn qs_from_covariance(
    cov: &CovarianceMatrix,
) -> Result<(UnitQuaternion<f64>, Vector3<f64>), GeometryError> {
    let eig = cov.matrix().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegenerateCovariance);
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut basis = Matrix3::zeros();
    let mut scale = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
        let lambda = eig.eigenvalues[src];
        if lambda <= 0.0 && lambda < EPS_PD * 0.5 {
            return Err(GeometryError::DegenerateCovariance);
        }
        scale[dst] = lambda.max(0.0).sqrt().max(EPS_SCALE);
    }
    if basis.determinant() < 0.0 {
        let flipped = -basis.column(0).into_owned();
        basis.set_column(0, &flipped);
    }
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(basis));
    Ok((q, scale))
}

/// Converts degree-0 SH coefficients to an RGB color in [0, 1]³.
pub fn sh_to_color(coeffs: Vector3<f64>) -> Vector3<f64> {
    coeffs.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0))
}

/// Inverse of [`sh_to_color`] for colors strictly inside [0, 1].
pub fn color_to_sh(rgb: Vector3<f64>) -> Vector3<f64> {
    rgb.map(|v| (v - 0.5) / SH_C0)
}
