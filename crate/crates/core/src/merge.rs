//! Voxel-space merging of geometrically similar Gaussian primitives.
//!
//! The pass selects stable primitives (small average loss gradient inside a
//! keyframe window), bins them into voxels by floor-dividing their means, and
//! gates same-voxel pairs by the squared Mahalanobis distance
//! d² = (μ_j − μ_i)ᵀ Σ_i⁻¹ (μ_j − μ_i) against a χ² critical value. A gated
//! pair is fused into one primitive:
//!
//! - mean: precision-weighted μ_k = (Σ_i⁻¹ + Σ_j⁻¹)⁻¹ (Σ_i⁻¹ μ_i + Σ_j⁻¹ μ_j),
//!   the maximizer of the joint Gaussian log-likelihood;
//! - covariance: minimizer of W₂²(Σ_k, Σ_i) + W₂²(Σ_k, Σ_j) over the
//!   (quaternion, scale) parameterization, solved with L-BFGS from a
//!   slerp/average initialization;
//! - color and opacity: inherited from the older primitive.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::gaussian::{
    covariance_from_qs, CovarianceMatrix, GaussianPrimitive, SplatMap, EPS_SCALE,
};
use crate::optim::{minimize, slerp, MinimizerConfig};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("numerical failure in eigenvalue decomposition")]
    Eigendecomposition,
}

/// Tuning knobs of a merge pass. Defaults follow the reference constants:
/// gradient threshold τ = 0.001, χ²(0.05, 3 dof) = 7.815, slerp t = 0.5 and
/// scale offsets (0.001, 0.002, 0.003).
#[derive(Debug, Clone)]
pub struct MergeConfig {
    /// Voxel edge length, meters.
    pub voxel_size: f64,
    /// Gradient threshold τ; primitives at or above it are left alone.
    pub grad_tau: f64,
    /// Squared-Mahalanobis gate; pairs must be strictly below it.
    pub chi2_threshold: f64,
    /// Interpolation parameter of the rotation initialization, in (0, 1).
    pub slerp_t: f64,
    /// Offsets added to the averaged scales to keep the EVD away from
    /// degenerate starting points.
    pub evd_offsets: [f64; 3],
    /// Inclusive keyframe-index window (K_min, K_max) of the stability mask.
    pub kf_window: (u32, u32),
    /// Gate on min(d²(j; i), d²(i; j)) instead of the older-primitive
    /// direction only. Off by default.
    pub symmetric_gate: bool,
    pub minimizer: MinimizerConfig,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            grad_tau: 0.001,
            chi2_threshold: 7.815,
            slerp_t: 0.5,
            evd_offsets: [0.001, 0.002, 0.003],
            kf_window: (0, u32::MAX),
            symmetric_gate: false,
            minimizer: MinimizerConfig::default(),
        }
    }
}

impl MergeConfig {
    fn assert_valid(&self) {
        assert!(self.voxel_size > 0.0, "voxel_size must be positive");
        assert!(self.chi2_threshold > 0.0, "chi2_threshold must be positive");
        assert!(
            self.slerp_t > 0.0 && self.slerp_t < 1.0,
            "slerp_t must lie in (0, 1)"
        );
        assert!(self.kf_window.0 <= self.kf_window.1, "empty keyframe window");
    }
}

/// Integer voxel cell; each axis is floor(mean / voxel_size).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelIndex {
    pub fn of(mean: &Vector3<f64>, voxel_size: f64) -> Self {
        Self {
            ix: (mean.x / voxel_size).floor() as i64,
            iy: (mean.y / voxel_size).floor() as i64,
            iz: (mean.z / voxel_size).floor() as i64,
        }
    }
}

/// A same-voxel pair: `index_i` was inserted earlier than `index_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeCandidate {
    pub index_i: u64,
    pub index_j: u64,
    pub d2: f64,
}

/// Instrumentation of one merge pass.
#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub primitives_before: usize,
    pub primitives_after: usize,
    pub merges_performed: usize,
    pub pairs_examined: usize,
    pub pairs_gated_out: usize,
    pub degenerate_skips: usize,
    pub optimizer_fallbacks: usize,
    /// Mean squared Mahalanobis distance over merged pairs.
    pub mean_merged_d2: f64,
    /// Largest d² that was actually merged; must stay below the gate.
    pub max_merged_d2: f64,
    /// Mean of the optimized W₂ objective over merged pairs.
    pub mean_w2_objective: f64,
    pub wall_time_seconds: f64,
}

/// Per-primitive stability mask: grad_stat < τ and keyframe index inside the
/// configured window.
pub fn stability_mask(map: &SplatMap, cfg: &MergeConfig) -> Vec<bool> {
    map.primitives()
        .iter()
        .map(|p| {
            p.grad_stat < cfg.grad_tau
                && p.keyframe_index >= cfg.kf_window.0
                && p.keyframe_index <= cfg.kf_window.1
        })
        .collect()
}

/// Bins masked primitives into voxels. Values are positions into
/// `map.primitives()`, ordered by insertion index within each voxel.
pub fn bin_voxels(
    map: &SplatMap,
    mask: &[bool],
    voxel_size: f64,
) -> HashMap<VoxelIndex, Vec<usize>> {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let mut voxels: HashMap<VoxelIndex, Vec<usize>> = HashMap::new();
    for (pos, p) in map.primitives().iter().enumerate() {
        if mask.get(pos).copied().unwrap_or(false) {
            voxels.entry(VoxelIndex::of(&p.mean, voxel_size)).or_default().push(pos);
        }
    }
    for members in voxels.values_mut() {
        members.sort_by_key(|&pos| map.primitives()[pos].insertion_index);
    }
    voxels
}

/// Squared Mahalanobis distance (μ_j − μ_i)ᵀ Σ_i⁻¹ (μ_j − μ_i), via a
/// symmetric positive-definite solve.
pub fn mahalanobis_sq(
    mu_j: &Vector3<f64>,
    mu_i: &Vector3<f64>,
    cov_i: &CovarianceMatrix,
) -> Result<f64, MergeError> {
    let delta = mu_j - mu_i;
    let chol = cov_i.matrix().cholesky().ok_or(MergeError::DegenerateCovariance)?;
    let solved = chol.solve(&delta);
    let d2 = delta.dot(&solved);
    if !d2.is_finite() {
        return Err(MergeError::DegenerateCovariance);
    }
    Ok(d2.max(0.0))
}

/// All n·(n−1)/2 pairs of a voxel's members with their gate distances.
/// `members` must be sorted by insertion index. Pairs whose distance cannot
/// be computed are dropped and counted in the second return value.
pub fn enumerate_candidates(
    members: &[&GaussianPrimitive],
    symmetric_gate: bool,
) -> (Vec<MergeCandidate>, usize) {
    let mut candidates = Vec::with_capacity(members.len() * members.len().saturating_sub(1) / 2);
    let mut skipped = 0usize;
    for a in 0..members.len() {
        for b in (a + 1)..members.len() {
            let (g_i, g_j) = (members[a], members[b]);
            debug_assert!(g_i.insertion_index < g_j.insertion_index);
            let forward = mahalanobis_sq(&g_j.mean, &g_i.mean, &g_i.covariance());
            let d2 = if symmetric_gate {
                let backward = mahalanobis_sq(&g_i.mean, &g_j.mean, &g_j.covariance());
                match (forward, backward) {
                    (Ok(f), Ok(b)) => Ok(f.min(b)),
                    (Ok(f), Err(_)) => Ok(f),
                    (Err(_), Ok(b)) => Ok(b),
                    (Err(e), Err(_)) => Err(e),
                }
            } else {
                forward
            };
            match d2 {
                Ok(d2) => candidates.push(MergeCandidate {
                    index_i: g_i.insertion_index,
                    index_j: g_j.insertion_index,
                    d2,
                }),
                Err(_) => skipped += 1,
            }
        }
    }
    (candidates, skipped)
}

/// True iff the candidate passes the χ² gate (strict inequality).
pub fn gate(candidate: &MergeCandidate, chi2_threshold: f64) -> bool {
    candidate.d2 < chi2_threshold
}

/// Precision-weighted mean (Σ_i⁻¹ + Σ_j⁻¹)⁻¹ (Σ_i⁻¹ μ_i + Σ_j⁻¹ μ_j).
pub fn merge_mean(
    mu_i: &Vector3<f64>,
    cov_i: &CovarianceMatrix,
    mu_j: &Vector3<f64>,
    cov_j: &CovarianceMatrix,
) -> Result<Vector3<f64>, MergeError> {
    let prec_i = cov_i
        .matrix()
        .cholesky()
        .ok_or(MergeError::DegenerateCovariance)?
        .inverse();
    let prec_j = cov_j
        .matrix()
        .cholesky()
        .ok_or(MergeError::DegenerateCovariance)?
        .inverse();
    let rhs = prec_i * mu_i + prec_j * mu_j;
    let sum = prec_i + prec_j;
    let mean = sum
        .cholesky()
        .ok_or(MergeError::DegenerateCovariance)?
        .solve(&rhs);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(MergeError::DegenerateCovariance);
    }
    Ok(mean)
}

/// Symmetric square root via eigenvalue decomposition, eigenvalues floored
/// at zero.
fn sqrt_sym(m: &Matrix3<f64>) -> Result<Matrix3<f64>, MergeError> {
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MergeError::Eigendecomposition);
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Squared Wasserstein-2 distance between zero-mean Gaussians:
/// tr(Σ_k + Σ_i − 2 (Σ_k^{1/2} Σ_i Σ_k^{1/2})^{1/2}), clamped at zero.
pub fn w2_sq(cov_k: &CovarianceMatrix, cov_i: &CovarianceMatrix) -> Result<f64, MergeError> {
    let root_k = sqrt_sym(cov_k.matrix())?;
    let inner = root_k * cov_i.matrix() * root_k;
    let cross = sqrt_sym(&((inner + inner.transpose()) * 0.5))?;
    let d2 = cov_k.matrix().trace() + cov_i.matrix().trace() - 2.0 * cross.trace();
    if !d2.is_finite() {
        return Err(MergeError::Eigendecomposition);
    }
    Ok(d2.max(0.0))
}

/// Rotation matrix of a unit quaternion (w, x, y, z), written out so the
/// analytic partials below differentiate exactly this expression.
fn rotation_from_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z),       2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),       1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),       2.0 * (y * z + w * x),       1.0 - 2.0 * (x * x + y * y),
    )
}

/// ∂R/∂(w, x, y, z) of `rotation_from_unit` at a unit quaternion.
fn rotation_partials(w: f64, x: f64, y: f64, z: f64) -> [Matrix3<f64>; 4] {
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Objective F(q, s) = W₂²(Σ(q,s), Σ_i) + W₂²(Σ(q,s), Σ_j) over the
/// 7-vector [w, x, y, z, s₀, s₁, s₂], with analytic gradient.
///
/// The quaternion part is normalized and the scales clamped to [`EPS_SCALE`]
/// before Σ is formed, so the function is defined for any finite input. When
/// the analytic gradient degenerates (singular eigenvalues), it is replaced
/// by central differences with per-coordinate step 1e-6·(1 + |xᵢ|).
pub fn w2_barycenter_objective(
    cov_i: &CovarianceMatrix,
    cov_j: &CovarianceMatrix,
) -> impl Fn(&[f64], &mut [f64]) -> f64 {
    let targets = [*cov_i.matrix(), *cov_j.matrix()];
    // square roots of the fixed targets; failure here means the inputs were
    // already degenerate, which CovarianceMatrix construction rules out
    let roots = [
        sqrt_sym(&targets[0]).expect("target covariance has a square root"),
        sqrt_sym(&targets[1]).expect("target covariance has a square root"),
    ];
    let traces = [targets[0].trace(), targets[1].trace()];

    move |params: &[f64], grad_out: &mut [f64]| {
        let (value, grad) = eval_w2_objective(params, &roots, &traces);
        match grad {
            Some(g) => grad_out.copy_from_slice(&g),
            None => {
                // central-difference fallback near EVD non-smooth points
                let mut point = params.to_vec();
                for i in 0..7 {
                    let h = 1e-6 * (1.0 + params[i].abs());
                    point[i] = params[i] + h;
                    let (fp, _) = eval_w2_value_only(&point, &roots, &traces);
                    point[i] = params[i] - h;
                    let (fm, _) = eval_w2_value_only(&point, &roots, &traces);
                    point[i] = params[i];
                    grad_out[i] = (fp - fm) / (2.0 * h);
                }
            }
        }
        value
    }
}

fn unpack_params(params: &[f64]) -> Option<([f64; 4], Vector3<f64>, f64)> {
    let q = [params[0], params[1], params[2], params[3]];
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return None;
    }
    let unit = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let scale = Vector3::new(
        params[4].max(EPS_SCALE),
        params[5].max(EPS_SCALE),
        params[6].max(EPS_SCALE),
    );
    Some((unit, scale, norm))
}

fn eval_w2_value_only(params: &[f64], roots: &[Matrix3<f64>; 2], traces: &[f64; 2]) -> (f64, Matrix3<f64>) {
    let Some((unit, scale, _)) = unpack_params(params) else {
        return (f64::INFINITY, Matrix3::zeros());
    };
    let r = rotation_from_unit(unit[0], unit[1], unit[2], unit[3]);
    let sigma = r * Matrix3::from_diagonal(&scale.component_mul(&scale)) * r.transpose();
    let mut value = 2.0 * sigma.trace();
    for (root, trace) in roots.iter().zip(traces) {
        let m = root * sigma * root;
        let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
        let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
        value += trace - 2.0 * cross;
    }
    (value, sigma)
}

fn eval_w2_objective(
    params: &[f64],
    roots: &[Matrix3<f64>; 2],
    traces: &[f64; 2],
) -> (f64, Option<[f64; 7]>) {
    let Some((unit, scale, norm)) = unpack_params(params) else {
        return (f64::INFINITY, Some([0.0; 7]));
    };
    let [w, x, y, z] = unit;
    let r = rotation_from_unit(w, x, y, z);
    let d = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let sigma = r * d * r.transpose();

    let mut value = 2.0 * sigma.trace();
    // ∇_Σ F = 2I − Σ_t root_t (root_t Σ root_t)^{-1/2} root_t
    let mut sigma_grad = Matrix3::identity() * 2.0;
    let mut grad_ok = true;
    for (root, trace) in roots.iter().zip(traces) {
        let m = root * sigma * root;
        let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, Some([f64::NAN; 7]));
        }
        let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
        value += trace - 2.0 * cross;

        let inv_roots = eig.eigenvalues.map(|l| {
            if l <= 1e-300 {
                grad_ok = false;
                0.0
            } else {
                1.0 / l.sqrt()
            }
        });
        let m_inv_half =
            eig.eigenvectors * Matrix3::from_diagonal(&inv_roots) * eig.eigenvectors.transpose();
        sigma_grad -= root * m_inv_half * root;
    }
    if !grad_ok || sigma_grad.iter().any(|v| !v.is_finite()) {
        return (value, None);
    }

    // chain rule to scales: ∂Σ/∂s_a = 2 s_a r_a r_aᵀ
    let mut grad = [0.0; 7];
    for a in 0..3 {
        let col = r.column(a);
        let quad = col.dot(&(sigma_grad * col));
        grad[4 + a] = if params[4 + a] < EPS_SCALE { 0.0 } else { 2.0 * scale[a] * quad };
    }

    // chain rule to the quaternion: ∇_R = 2 G R D, then through normalization
    let r_grad = 2.0 * sigma_grad * r * d;
    let partials = rotation_partials(w, x, y, z);
    let mut g_unit = [0.0; 4];
    for (m, part) in g_unit.iter_mut().zip(partials.iter()) {
        *m = r_grad.component_mul(part).sum();
    }
    for k in 0..4 {
        let mut acc = 0.0;
        for (m, g) in g_unit.iter().enumerate() {
            let proj = if m == k { 1.0 } else { 0.0 } - unit[m] * unit[k];
            acc += g * proj;
        }
        grad[k] = acc / norm;
    }
    (value, Some(grad))
}

/// Result of fusing two covariances.
#[derive(Debug, Clone)]
pub struct CovarianceFusion {
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub covariance: CovarianceMatrix,
    pub objective_initial: f64,
    pub objective_final: f64,
    /// True when the optimizer failed and the initialization was kept.
    pub fallback: bool,
}

/// Fuses two covariances into the W₂ barycenter over the (q, s)
/// parameterization, initialized at slerp(q_i, q_j, t) and
/// (s_i + s_j)/2 + (δ₁, δ₂, δ₃).
pub fn merge_covariance(
    cov_i: &CovarianceMatrix,
    cov_j: &CovarianceMatrix,
    q_i: &UnitQuaternion<f64>,
    s_i: &Vector3<f64>,
    q_j: &UnitQuaternion<f64>,
    s_j: &Vector3<f64>,
    cfg: &MergeConfig,
) -> Result<CovarianceFusion, MergeError> {
    let q0 = slerp(q_i.into_inner(), q_j.into_inner(), cfg.slerp_t)
        .map_err(|_| MergeError::DegenerateCovariance)?;
    let s0 = Vector3::new(
        (s_i.x + s_j.x) * 0.5 + cfg.evd_offsets[0],
        (s_i.y + s_j.y) * 0.5 + cfg.evd_offsets[1],
        (s_i.z + s_j.z) * 0.5 + cfg.evd_offsets[2],
    );
    let x0 = [q0.w, q0.i, q0.j, q0.k, s0.x, s0.y, s0.z];

    let objective = w2_barycenter_objective(cov_i, cov_j);
    let mut scratch = [0.0; 7];
    let objective_initial = objective(&x0, &mut scratch);

    let (params, objective_final, fallback) = match minimize(&objective, &x0, &cfg.minimizer) {
        Ok(min) if min.value.is_finite() => (min.x, min.value, false),
        _ => (x0.to_vec(), objective_initial, true),
    };

    let quat = Quaternion::new(params[0], params[1], params[2], params[3]);
    let rotation = UnitQuaternion::from_quaternion(quat);
    let scale = Vector3::new(
        params[4].max(EPS_SCALE),
        params[5].max(EPS_SCALE),
        params[6].max(EPS_SCALE),
    );
    let covariance = covariance_from_qs(rotation.into_inner(), scale)
        .map_err(|_| MergeError::DegenerateCovariance)?;
    Ok(CovarianceFusion {
        rotation,
        scale,
        covariance,
        objective_initial,
        objective_final,
        fallback,
    })
}

/// Attributes inherited by a merged primitive: color and opacity of the
/// older parent, the more pessimistic gradient statistic, and the earlier
/// keyframe index.
#[derive(Debug, Clone)]
pub struct MergedAttributes {
    pub color: Vector3<f64>,
    pub sh_rest: Vec<f32>,
    pub opacity: f64,
    pub grad_stat: f64,
    pub keyframe_index: u32,
}

pub fn merge_attributes(g_i: &GaussianPrimitive, g_j: &GaussianPrimitive) -> MergedAttributes {
    debug_assert!(g_i.insertion_index < g_j.insertion_index);
    MergedAttributes {
        color: g_i.color,
        sh_rest: g_i.sh_rest.clone(),
        opacity: g_i.opacity,
        grad_stat: g_i.grad_stat.max(g_j.grad_stat),
        keyframe_index: g_i.keyframe_index.min(g_j.keyframe_index),
    }
}

struct VoxelOutcome {
    consumed: Vec<usize>,
    merged: Vec<GaussianPrimitive>,
    pairs_examined: usize,
    pairs_gated_out: usize,
    degenerate_skips: usize,
    optimizer_fallbacks: usize,
    merged_d2_sum: f64,
    merged_d2_max: f64,
    objective_sum: f64,
}

fn process_voxel(map: &SplatMap, members: &[usize], cfg: &MergeConfig) -> VoxelOutcome {
    let prims: Vec<&GaussianPrimitive> = members.iter().map(|&p| &map.primitives()[p]).collect();
    let (mut candidates, skipped) = enumerate_candidates(&prims, cfg.symmetric_gate);
    let pairs_examined = candidates.len() + skipped;
    let pairs_gated_out = candidates.iter().filter(|c| !gate(c, cfg.chi2_threshold)).count();

    // greedy min-d² matching: sorted ascending, each primitive used once
    candidates.sort_by(|a, b| {
        (a.d2, a.index_i, a.index_j)
            .partial_cmp(&(b.d2, b.index_i, b.index_j))
            .unwrap()
    });
    let by_insertion: HashMap<u64, usize> =
        prims.iter().enumerate().map(|(k, p)| (p.insertion_index, k)).collect();

    let mut used = vec![false; prims.len()];
    let mut outcome = VoxelOutcome {
        consumed: Vec::new(),
        merged: Vec::new(),
        pairs_examined,
        pairs_gated_out,
        degenerate_skips: skipped,
        optimizer_fallbacks: 0,
        merged_d2_sum: 0.0,
        merged_d2_max: 0.0,
        objective_sum: 0.0,
    };

    for cand in &candidates {
        if !gate(cand, cfg.chi2_threshold) {
            break; // sorted: everything after fails the gate too
        }
        let (a, b) = (by_insertion[&cand.index_i], by_insertion[&cand.index_j]);
        if used[a] || used[b] {
            continue;
        }
        let (g_i, g_j) = (prims[a], prims[b]);
        let fused = merge_mean(&g_i.mean, &g_i.covariance(), &g_j.mean, &g_j.covariance())
            .and_then(|mean| {
                merge_covariance(
                    &g_i.covariance(),
                    &g_j.covariance(),
                    &g_i.rotation,
                    &g_i.scale,
                    &g_j.rotation,
                    &g_j.scale,
                    cfg,
                )
                .map(|fusion| (mean, fusion))
            });
        match fused {
            Ok((mean, fusion)) => {
                let attrs = merge_attributes(g_i, g_j);
                used[a] = true;
                used[b] = true;
                outcome.consumed.push(members[a]);
                outcome.consumed.push(members[b]);
                if fusion.fallback {
                    outcome.optimizer_fallbacks += 1;
                }
                outcome.merged_d2_sum += cand.d2;
                outcome.merged_d2_max = outcome.merged_d2_max.max(cand.d2);
                outcome.objective_sum += fusion.objective_final;
                outcome.merged.push(GaussianPrimitive {
                    mean,
                    rotation: fusion.rotation,
                    scale: fusion.scale,
                    opacity: attrs.opacity,
                    color: attrs.color,
                    sh_rest: attrs.sh_rest,
                    grad_stat: attrs.grad_stat,
                    insertion_index: 0, // assigned during assembly
                    keyframe_index: attrs.keyframe_index,
                });
            }
            Err(_) => outcome.degenerate_skips += 1,
        }
    }
    outcome
}

/// One merge pass over the whole map.
///
/// Per voxel, the minimum-d² gated pair is merged greedily until none
/// remains; merged primitives receive fresh insertion indices and are not
/// re-binned within the pass. Output order: survivors in original order,
/// then merged primitives in creation order (voxels sorted by key).
pub fn merge_pass(map: &SplatMap, cfg: &MergeConfig) -> (SplatMap, MergeReport) {
    cfg.assert_valid();
    let started = Instant::now();

    let mask = stability_mask(map, cfg);
    let voxels = bin_voxels(map, &mask, cfg.voxel_size);
    let mut voxel_entries: Vec<(VoxelIndex, Vec<usize>)> =
        voxels.into_iter().filter(|(_, m)| m.len() >= 2).collect();
    voxel_entries.sort_by_key(|(key, _)| *key);

    let outcomes: Vec<VoxelOutcome> = voxel_entries
        .par_iter()
        .map(|(_, members)| process_voxel(map, members, cfg))
        .collect();

    let mut consumed = vec![false; map.len()];
    let mut report = MergeReport {
        primitives_before: map.len(),
        primitives_after: 0,
        merges_performed: 0,
        pairs_examined: 0,
        pairs_gated_out: 0,
        degenerate_skips: 0,
        optimizer_fallbacks: 0,
        mean_merged_d2: 0.0,
        max_merged_d2: 0.0,
        mean_w2_objective: 0.0,
        wall_time_seconds: 0.0,
    };

    let mut merged = Vec::new();
    for outcome in outcomes {
        for pos in outcome.consumed {
            consumed[pos] = true;
        }
        report.pairs_examined += outcome.pairs_examined;
        report.pairs_gated_out += outcome.pairs_gated_out;
        report.degenerate_skips += outcome.degenerate_skips;
        report.optimizer_fallbacks += outcome.optimizer_fallbacks;
        report.merges_performed += outcome.merged.len();
        report.mean_merged_d2 += outcome.merged_d2_sum;
        report.max_merged_d2 = report.max_merged_d2.max(outcome.merged_d2_max);
        report.mean_w2_objective += outcome.objective_sum;
        merged.extend(outcome.merged);
    }
    if report.merges_performed > 0 {
        report.mean_merged_d2 /= report.merges_performed as f64;
        report.mean_w2_objective /= report.merges_performed as f64;
    }

    let mut next_index = map.next_insertion_index();
    let mut primitives: Vec<GaussianPrimitive> = map
        .primitives()
        .iter()
        .zip(consumed.iter())
        .filter(|(_, &c)| !c)
        .map(|(p, _)| p.clone())
        .collect();
    for mut p in merged {
        p.insertion_index = next_index;
        next_index += 1;
        primitives.push(p);
    }
    report.primitives_after = primitives.len();
    debug_assert_eq!(
        report.primitives_after,
        report.primitives_before - report.merges_performed
    );
    report.wall_time_seconds = started.elapsed().as_secs_f64();
    (SplatMap::from_parts(primitives, next_index), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradient;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prim(
        mean: [f64; 3],
        scale: [f64; 3],
        grad: f64,
        kf: u32,
    ) -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vector3::from(mean),
            Quaternion::new(1.0, 0.0, 0.0, 0.0),
            Vector3::from(scale),
            0.8,
            Vector3::new(0.5, 0.0, 0.0),
            grad,
            kf,
        )
        .unwrap()
    }

    fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
        loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return q / q.norm();
            }
        }
    }

    fn random_covariance(rng: &mut ChaCha8Rng) -> (CovarianceMatrix, UnitQuaternion<f64>, Vector3<f64>) {
        let q = random_unit_quaternion(rng);
        let s = Vector3::new(
            rng.gen_range(0.05..1.0),
            rng.gen_range(0.05..1.0),
            rng.gen_range(0.05..1.0),
        );
        let cov = covariance_from_qs(q, s).unwrap();
        let (uq, sorted) = crate::gaussian::qs_from_covariance(&cov).unwrap();
        (cov, uq, sorted)
    }

    #[test]
    fn stability_mask_follows_threshold_and_window() {
        let cfg = MergeConfig { kf_window: (0, 10), ..Default::default() };
        let map = SplatMap::from_ordered(vec![
            prim([0.0; 3], [0.1; 3], 0.0005, 3),
            prim([0.0; 3], [0.1; 3], 0.001, 3), // equal to τ: strict inequality fails
            prim([0.0; 3], [0.1; 3], 0.0005, 11), // outside window
        ]);
        assert_eq!(stability_mask(&map, &cfg), vec![true, false, false]);
    }

    #[test]
    fn voxel_binning_uses_floor() {
        let cfg = MergeConfig::default();
        let map = SplatMap::from_ordered(vec![
            prim([0.01, 0.0, 0.0], [0.01; 3], 0.0, 0),
            prim([0.04, 0.0, 0.0], [0.01; 3], 0.0, 0),
            prim([0.06, 0.0, 0.0], [0.01; 3], 0.0, 0),
            prim([-0.01, 0.0, 0.0], [0.01; 3], 0.0, 0),
        ]);
        let mask = vec![true; 4];
        let voxels = bin_voxels(&map, &mask, cfg.voxel_size);
        assert_eq!(voxels[&VoxelIndex { ix: 0, iy: 0, iz: 0 }], vec![0, 1]);
        assert_eq!(voxels[&VoxelIndex { ix: 1, iy: 0, iz: 0 }], vec![2]);
        assert_eq!(voxels[&VoxelIndex { ix: -1, iy: 0, iz: 0 }], vec![3]);
    }

    #[test]
    fn candidate_counts_follow_pair_formula() {
        let mk = |n: usize| {
            let prims: Vec<GaussianPrimitive> = (0..n)
                .map(|k| {
                    let mut p = prim([k as f64 * 0.001, 0.0, 0.0], [0.05; 3], 0.0, 0);
                    p.insertion_index = k as u64;
                    p
                })
                .collect();
            prims
        };
        for (n, expected) in [(1usize, 0usize), (2, 1), (4, 6)] {
            let prims = mk(n);
            let refs: Vec<&GaussianPrimitive> = prims.iter().collect();
            let (cands, skipped) = enumerate_candidates(&refs, false);
            assert_eq!(cands.len(), expected);
            assert_eq!(skipped, 0);
        }
    }

    #[test]
    fn mahalanobis_known_values() {
        let identity = CovarianceMatrix::new(Matrix3::identity()).unwrap();
        let mu = Vector3::zeros();
        assert_relative_eq!(mahalanobis_sq(&mu, &mu, &identity).unwrap(), 0.0);
        let d2 = mahalanobis_sq(&Vector3::new(1.0, 2.0, 2.0), &mu, &identity).unwrap();
        assert_relative_eq!(d2, 9.0, epsilon = 1e-12);
        let stretched =
            CovarianceMatrix::new(Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).unwrap();
        let d2 = mahalanobis_sq(&Vector3::new(2.0, 0.0, 0.0), &mu, &stretched).unwrap();
        assert_relative_eq!(d2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gate_is_strict() {
        let mk = |d2| MergeCandidate { index_i: 0, index_j: 1, d2 };
        assert!(gate(&mk(3.0), 7.815));
        assert!(!gate(&mk(7.815), 7.815));
        assert!(!gate(&mk(9.0), 7.815));
    }

    #[test]
    fn merge_mean_equal_covariances_is_midpoint() {
        let cov = CovarianceMatrix::new(Matrix3::identity() * 0.3).unwrap();
        let a = Vector3::new(1.0, 2.0, 3.0);
        let b = Vector3::new(3.0, 0.0, 1.0);
        let m = merge_mean(&a, &cov, &b, &cov).unwrap();
        assert_relative_eq!(m, (a + b) * 0.5, epsilon = 1e-10);
        let same = merge_mean(&a, &cov, &a, &cov).unwrap();
        assert_relative_eq!(same, a, epsilon = 1e-12);
    }

    #[test]
    fn merge_mean_precision_weighting() {
        let cov_i = CovarianceMatrix::new(Matrix3::identity()).unwrap();
        let cov_j = CovarianceMatrix::new(Matrix3::identity() * 4.0).unwrap();
        let m = merge_mean(&Vector3::zeros(), &cov_i, &Vector3::new(5.0, 0.0, 0.0), &cov_j).unwrap();
        assert_relative_eq!(m, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-10);
    }

    #[test]
    fn merge_mean_matches_grid_search_oracle() {
        // brute-force maximizer of the joint log-likelihood, with its own
        // cofactor-based inverse
        fn inverse_3x3(m: &Matrix3<f64>) -> Matrix3<f64> {
            let det = m.determinant();
            let mut cof = Matrix3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    let mut sub = [0.0; 4];
                    let mut k = 0;
                    for rr in 0..3 {
                        for cc in 0..3 {
                            if rr != r && cc != c {
                                sub[k] = m[(rr, cc)];
                                k += 1;
                            }
                        }
                    }
                    let minor = sub[0] * sub[3] - sub[1] * sub[2];
                    cof[(c, r)] = if (r + c) % 2 == 0 { minor } else { -minor } / det;
                }
            }
            cof
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (cov_i, ..) = random_covariance(&mut rng);
            let (cov_j, ..) = random_covariance(&mut rng);
            let mu_i = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mu_j = mu_i + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));

            let prec_i = inverse_3x3(cov_i.matrix());
            let prec_j = inverse_3x3(cov_j.matrix());
            let loglik = |mu: &Vector3<f64>| {
                let di = mu - mu_i;
                let dj = mu - mu_j;
                -0.5 * (di.dot(&(prec_i * di)) + dj.dot(&(prec_j * dj)))
            };

            let mut center = (mu_i + mu_j) * 0.5;
            let mut half_width = 1.5 * (mu_i - mu_j).norm() + 0.5;
            for _ in 0..25 {
                let mut best = (f64::NEG_INFINITY, center);
                for ax in -4..=4 {
                    for ay in -4..=4 {
                        for az in -4..=4 {
                            let cand = center
                                + Vector3::new(ax as f64, ay as f64, az as f64) * (half_width / 4.0);
                            let v = loglik(&cand);
                            if v > best.0 {
                                best = (v, cand);
                            }
                        }
                    }
                }
                center = best.1;
                half_width /= 2.0;
            }

            let analytic = merge_mean(&mu_i, &cov_i, &mu_j, &cov_j).unwrap();
            for axis in 0..3 {
                assert!(
                    (analytic[axis] - center[axis]).abs() < 1e-6,
                    "component {axis}: {} vs oracle {}",
                    analytic[axis],
                    center[axis]
                );
            }
        }
    }

    #[test]
    fn w2_known_values() {
        let a = CovarianceMatrix::new(Matrix3::identity()).unwrap();
        assert_relative_eq!(w2_sq(&a, &a).unwrap(), 0.0, epsilon = 1e-12);
        let b = CovarianceMatrix::new(Matrix3::identity() * 4.0).unwrap();
        assert_relative_eq!(w2_sq(&b, &a).unwrap(), 3.0, epsilon = 1e-10);
    }

    #[test]
    fn w2_diagonal_closed_form_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let la = Vector3::new(rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0));
            let lb = Vector3::new(rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0));
            let a = CovarianceMatrix::new(Matrix3::from_diagonal(&la)).unwrap();
            let b = CovarianceMatrix::new(Matrix3::from_diagonal(&lb)).unwrap();
            let expected: f64 = (0..3).map(|k| (la[k].sqrt() - lb[k].sqrt()).powi(2)).sum();
            assert_relative_eq!(w2_sq(&a, &b).unwrap(), expected, epsilon = 1e-8);
            assert!((w2_sq(&a, &b).unwrap() - w2_sq(&b, &a).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn w2_identity_of_indiscernibles() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (cov, ..) = random_covariance(&mut rng);
            assert!(w2_sq(&cov, &cov).unwrap() < 1e-10);
        }
    }

    #[test]
    fn w2_objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (cov_i, ..) = random_covariance(&mut rng);
            let (cov_j, ..) = random_covariance(&mut rng);
            let q = random_unit_quaternion(&mut rng);
            let x = [
                q.w,
                q.i,
                q.j,
                q.k,
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
            ];
            let objective = w2_barycenter_objective(&cov_i, &cov_j);
            let err = check_gradient(&objective, &x, 1e-6);
            assert!(err < 1e-4, "gradient relative error {err}");
        }
    }

    #[test]
    fn merge_covariance_recovers_coincident_input() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4);
        let s = Vector3::new(0.4, 0.2, 0.1);
        let cov = covariance_from_qs(q.into_inner(), s).unwrap();
        let cfg = MergeConfig::default();
        let fusion = merge_covariance(&cov, &cov, &q, &s, &q, &s, &cfg).unwrap();
        assert!(!fusion.fallback);
        let diff = (fusion.covariance.matrix() - cov.matrix()).norm() / cov.matrix().norm();
        assert!(diff < 1e-3, "relative Frobenius error {diff}");
    }

    #[test]
    fn merge_covariance_diagonal_barycenter() {
        let q = UnitQuaternion::identity();
        let s_i = Vector3::new(1.0, 1.0, 1.0);
        let s_j = Vector3::new(3.0, 1.0, 1.0);
        let cov_i = covariance_from_qs(q.into_inner(), s_i).unwrap();
        let cov_j = covariance_from_qs(q.into_inner(), s_j).unwrap();
        let cfg = MergeConfig::default();
        let fusion = merge_covariance(&cov_i, &cov_j, &q, &s_i, &q, &s_j, &cfg).unwrap();
        // commuting case: ((√1 + √9)/2)² = 4 on the stretched axis
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let diff = (fusion.covariance.matrix() - expected).norm() / expected.norm();
        assert!(diff < 1e-3, "relative Frobenius error {diff}");
    }

    #[test]
    fn merge_covariance_never_degrades_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = MergeConfig::default();
        for _ in 0..30 {
            let (cov_i, q_i, s_i) = random_covariance(&mut rng);
            let (cov_j, q_j, s_j) = random_covariance(&mut rng);
            let fusion = merge_covariance(&cov_i, &cov_j, &q_i, &s_i, &q_j, &s_j, &cfg).unwrap();
            assert!(fusion.objective_final <= fusion.objective_initial + 1e-12);
        }
    }

    #[test]
    fn merge_covariance_is_symmetric_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = MergeConfig::default();
        let (cov_i, q_i, s_i) = random_covariance(&mut rng);
        let (cov_j, q_j, s_j) = random_covariance(&mut rng);
        let ab = merge_covariance(&cov_i, &cov_j, &q_i, &s_i, &q_j, &s_j, &cfg).unwrap();
        let ba = merge_covariance(&cov_j, &cov_i, &q_j, &s_j, &q_i, &s_i, &cfg).unwrap();
        assert!((ab.objective_final - ba.objective_final).abs() < 1e-4);
    }

    #[test]
    fn merge_attributes_prefers_older_parent() {
        let mut g_i = prim([0.0; 3], [0.1; 3], 0.0002, 5);
        g_i.color = Vector3::new(1.0, 0.0, 0.0);
        g_i.opacity = 0.9;
        g_i.insertion_index = 0;
        let mut g_j = prim([0.0; 3], [0.1; 3], 0.0009, 2);
        g_j.color = Vector3::new(0.0, 0.0, 1.0);
        g_j.opacity = 0.1;
        g_j.insertion_index = 1;
        let attrs = merge_attributes(&g_i, &g_j);
        assert_eq!(attrs.color, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(attrs.opacity, 0.9);
        assert_eq!(attrs.grad_stat, 0.0009);
        assert_eq!(attrs.keyframe_index, 2);

        let identical = merge_attributes(&g_i, &{
            let mut c = g_i.clone();
            c.insertion_index = 1;
            c
        });
        assert_eq!(identical.color, g_i.color);
        assert_eq!(identical.opacity, g_i.opacity);
    }

    #[test]
    fn merge_pass_collapses_identical_pair() {
        let cfg = MergeConfig::default();
        let map = SplatMap::from_ordered(vec![
            prim([0.01, 0.01, 0.01], [0.01; 3], 0.0, 0),
            prim([0.01, 0.01, 0.01], [0.01; 3], 0.0, 0),
        ]);
        let original_cov = map.primitives()[0].covariance();
        let (out, report) = merge_pass(&map, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(report.merges_performed, 1);
        let merged_cov = out.primitives()[0].covariance();
        let diff = (merged_cov.matrix() - original_cov.matrix()).norm() / original_cov.matrix().norm();
        assert!(diff < 1e-3);
        assert_relative_eq!(out.primitives()[0].mean, map.primitives()[0].mean, epsilon = 1e-9);
    }

    #[test]
    fn merge_pass_leaves_distant_primitives_alone() {
        let cfg = MergeConfig::default();
        let map = SplatMap::from_ordered(vec![
            prim([0.0, 0.0, 0.0], [0.01; 3], 0.0, 0),
            prim([0.5, 0.0, 0.0], [0.01; 3], 0.0, 0), // 10 voxels away
        ]);
        let (out, report) = merge_pass(&map, &cfg);
        assert_eq!(out.len(), 2);
        assert_eq!(report.merges_performed, 0);
        assert_eq!(out.primitives(), map.primitives());
    }

    #[test]
    fn merge_pass_synthetic_duplicates() {
        // 100 base primitives on a sparse grid plus 100 jittered duplicates
        // constructed so every pair gates in
        let cfg = MergeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut prims = Vec::new();
        for k in 0..100 {
            let base = Vector3::new(
                (k % 10) as f64 * 0.3 + 0.01,
                (k / 10) as f64 * 0.3 + 0.01,
                0.02,
            );
            prims.push(prim([base.x, base.y, base.z], [0.01; 3], 0.0, 0));
        }
        for k in 0..100 {
            let mut dup = prims[k].clone();
            // jitter well under one sigma so d² < 7.815 by construction
            let jitter = Vector3::new(
                rng.gen_range(-0.002..0.002),
                rng.gen_range(-0.002..0.002),
                rng.gen_range(-0.002..0.002),
            );
            dup.mean += jitter;
            let d2 = mahalanobis_sq(&dup.mean, &prims[k].mean, &prims[k].covariance()).unwrap();
            assert!(d2 < 7.815);
            prims.push(dup);
        }
        let map = SplatMap::from_ordered(prims);
        let (out, report) = merge_pass(&map, &cfg);
        assert!(out.len() <= 110, "expected heavy collapse, got {}", out.len());
        assert_eq!(report.primitives_after, report.primitives_before - report.merges_performed);
        assert!(report.max_merged_d2 < cfg.chi2_threshold);

        // permutation stability: shuffled input order gives the same count
        let mut shuffled: Vec<GaussianPrimitive> = map.primitives().to_vec();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let shuffled_map = SplatMap::from_ordered(shuffled);
        let (out2, _) = merge_pass(&shuffled_map, &cfg);
        assert_eq!(out2.len(), out.len());
    }

    #[test]
    fn merge_pass_respects_mask_and_orders_output() {
        let cfg = MergeConfig::default();
        let mut unstable = prim([0.012, 0.01, 0.01], [0.01; 3], 0.5, 0);
        unstable.color = Vector3::new(0.0, 1.0, 0.0);
        let map = SplatMap::from_ordered(vec![
            prim([0.01, 0.01, 0.01], [0.01; 3], 0.0, 0),
            unstable.clone(),
            prim([0.011, 0.01, 0.01], [0.01; 3], 0.0, 0),
        ]);
        let (out, report) = merge_pass(&map, &cfg);
        // the two stable ones merge; the unstable one passes through untouched
        assert_eq!(out.len(), 2);
        assert_eq!(report.merges_performed, 1);
        assert_eq!(out.primitives()[0].insertion_index, 1);
        assert_eq!(out.primitives()[0].color, unstable.color);
        assert_eq!(out.primitives()[1].insertion_index, 3);
        assert_eq!(out.next_insertion_index(), 4);
    }
}
