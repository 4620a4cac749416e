//! Absolute pose from predicted 2D-3D correspondences: P3P hypotheses in
//! RANSAC, Levenberg-Marquardt refinement and ensemble selection.

use std::cmp::Ordering;

use nalgebra::{Complex, DMatrix, Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Pose, ScenePoint, Z_MIN};
use crate::observation::{mix_keys, CellGrid, Descriptor};
use crate::scr_head::{HeadError, ScrHead};

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("degenerate minimal sample")]
    DegenerateSample,
    #[error("need at least 4 correspondences, got {0}")]
    NotEnoughCorrespondences(usize),
    #[error("localization failed: best hypothesis has {inliers} inliers (< {required})")]
    LocalizationFailed { inliers: usize, required: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel: Pixel,
    pub scene: ScenePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_hypotheses: usize,
    /// Inlier threshold on the L2 reprojection error, pixels.
    pub inlier_threshold: f64,
    pub refinement_rounds: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_hypotheses: 256,
            inlier_threshold: 10.0,
            refinement_rounds: 8,
            min_inliers: 6,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), LocalizerError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(LocalizerError::InvalidConfig("inlier threshold must be positive".into()));
        }
        if self.max_hypotheses == 0 {
            return Err(LocalizerError::InvalidConfig("need at least one hypothesis".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Camera-to-world.
    pub pose: Pose,
    pub inlier_count: usize,
    pub mean_inlier_error: f64,
    pub hypothesis_index: usize,
}

fn bearing(y: &Pixel, k: &CameraIntrinsics) -> Vector3<f64> {
    k.ray(y).normalize()
}

/// Real roots of `c[0] x^n + ... + c[n]`, via companion-matrix eigenvalues.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs.iter().position(|c| c.abs() > 1e-12 * scale);
    let Some(lead) = lead else { return Vec::new() };
    let c = &coeffs[lead..];
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    let eig: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    let eval = |x: f64| c.iter().fold(0.0, |acc, ci| acc * x + ci);
    let deriv = |x: f64| {
        c[..n]
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, ci)| acc * x + ci * (n - i) as f64)
    };
    let mut roots = Vec::new();
    for z in eig {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..20 {
            let d = deriv(x);
            if d == 0.0 {
                break;
            }
            let step = eval(x) / d;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Rigid transform taking the triangle `p` (camera frame) onto `x` (world).
fn align_triangles(p: &[Vector3<f64>; 3], x: &[Vector3<f64>; 3]) -> Option<Pose> {
    let frame = |a: &[Vector3<f64>; 3]| -> Option<Matrix3<f64>> {
        let e1 = (a[1] - a[0]).try_normalize(1e-12)?;
        let e3 = e1.cross(&(a[2] - a[0])).try_normalize(1e-12)?;
        let e2 = e3.cross(&e1);
        Some(Matrix3::from_columns(&[e1, e2, e3]))
    };
    let mc = frame(p)?;
    let mw = frame(x)?;
    let r = mw * mc.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = x[0] - rot * p[0];
    Some(Pose::from_parts(rot, t))
}

/// Gauss-Newton polish of the depths on the three distance equations.
fn polish_depths(s: &mut [f64; 3], f: &[Vector3<f64>; 3], d2: &[f64; 3]) {
    // pairs (i, j) opposite distances: 0 -> (1,2), 1 -> (0,2), 2 -> (0,1)
    let pairs = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..10 {
        let mut jm = Matrix3::zeros();
        let mut r = Vector3::zeros();
        for (row, &(i, j)) in pairs.iter().enumerate() {
            let diff = f[i] * s[i] - f[j] * s[j];
            r[row] = diff.norm_squared() - d2[row];
            jm[(row, i)] = 2.0 * diff.dot(&f[i]);
            jm[(row, j)] = -2.0 * diff.dot(&f[j]);
        }
        let Some(step) = jm.lu().solve(&r) else { return };
        for (si, di) in s.iter_mut().zip(step.iter()) {
            *si -= di;
        }
        if step.norm() < 1e-15 * (1.0 + s[0].abs()) {
            return;
        }
    }
}

/// Up to four camera-to-world poses consistent with three correspondences,
/// ordered lexicographically by quaternion `(w, x, y, z)`.
pub fn p3p_minimal(
    c1: &Correspondence,
    c2: &Correspondence,
    c3: &Correspondence,
    k: &CameraIntrinsics,
) -> Result<Vec<Pose>, LocalizerError> {
    let cs = [c1, c2, c3];
    let xw = [c1.scene.coords, c2.scene.coords, c3.scene.coords];
    let area = 0.5 * (xw[1] - xw[0]).cross(&(xw[2] - xw[0])).norm();
    if !(area > 1e-9) {
        return Err(LocalizerError::DegenerateSample);
    }
    for i in 0..3 {
        for j in i + 1..3 {
            if cs[i].pixel.distance(&cs[j].pixel) < 1e-9 {
                return Err(LocalizerError::DegenerateSample);
            }
        }
    }
    let f = [bearing(&c1.pixel, k), bearing(&c2.pixel, k), bearing(&c3.pixel, k)];
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);
    let a2 = (xw[1] - xw[2]).norm_squared();
    let b2 = (xw[0] - xw[2]).norm_squared();
    let c2_ = (xw[0] - xw[1]).norm_squared();

    // Grunert's quartic in v = s3 / s1
    let amc = (a2 - c2_) / b2;
    let apc = (a2 + c2_) / b2;
    let bmc = (b2 - c2_) / b2;
    let bma = (b2 - a2) / b2;
    let q4 = (amc - 1.0).powi(2) - 4.0 * c2_ / b2 * cos_a * cos_a;
    let q3 = 4.0
        * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2_ / b2 * cos_a * cos_a * cos_b);
    let q2 = 2.0
        * (amc * amc - 1.0
            + 2.0 * amc * amc * cos_b * cos_b
            + 2.0 * bmc * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cos_g * cos_g);
    let q1 = 4.0
        * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let q0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let d2 = [a2, b2, c2_];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&[q4, q3, q2, q1, q0]) {
        if v <= 0.0 {
            continue;
        }
        let den = 2.0 * (cos_g - v * cos_a);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / den;
        if u <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let mut s = [s1, u * s1, v * s1];
        polish_depths(&mut s, &f, &d2);
        if s.iter().any(|x| !(*x > Z_MIN)) {
            continue;
        }
        let p = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
        if let Some(pose) = align_triangles(&p, &xw) {
            if poses.iter().all(|q| !poses_close(q, &pose)) {
                poses.push(pose);
            }
        }
    }
    poses.sort_by(cmp_quaternion);
    Ok(poses)
}

fn poses_close(a: &Pose, b: &Pose) -> bool {
    a.rotation.angle_to(&b.rotation) < 1e-9 && (a.translation - b.translation).norm() < 1e-9
}

fn cmp_quaternion(a: &Pose, b: &Pose) -> Ordering {
    let (qa, qb) = (a.wxyz(), b.wxyz());
    qa.iter()
        .zip(qb.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// L2 reprojection error of one correspondence, `None` behind the camera.
pub fn reprojection_error_l2(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> Option<f64> {
    let pc = pose.world_to_camera(&c.scene);
    if pc.z <= Z_MIN {
        return None;
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    Some((u - c.pixel.u).hypot(v - c.pixel.v))
}

/// Inlier count and mean inlier error under `pose`.
pub fn count_inliers(
    pose: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    threshold: f64,
) -> (usize, f64) {
    let mut n = 0;
    let mut sum = 0.0;
    for c in corrs {
        if let Some(e) = reprojection_error_l2(pose, c, k) {
            if e < threshold {
                n += 1;
                sum += e;
            }
        }
    }
    (n, if n > 0 { sum / n as f64 } else { f64::INFINITY })
}

fn inlier_set(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, t: f64) -> Vec<Correspondence> {
    corrs
        .iter()
        .filter(|c| reprojection_error_l2(pose, c, k).is_some_and(|e| e < t))
        .copied()
        .collect()
}

/// Sum of squared reprojection errors; `None` if any point is behind.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<f64> {
    corrs
        .iter()
        .map(|c| reprojection_error_l2(pose, c, k).map(|e| e * e))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the step size vanished.
    pub converged: bool,
}

/// Levenberg-Marquardt on the summed squared reprojection error over a
/// 6-dof perturbation of the world-to-camera transform. Only steps that
/// lower the cost are taken, so the result is never worse than `pose`.
pub fn refine_pose_detailed(
    pose: &Pose,
    inliers: &[Correspondence],
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> Refinement {
    let initial = reprojection_cost(pose, inliers, k).unwrap_or(f64::INFINITY);
    let mut out = Refinement {
        pose: *pose,
        initial_cost: initial,
        final_cost: initial,
        iterations: 0,
        converged: false,
    };
    if inliers.len() < 4 || !initial.is_finite() {
        return out;
    }
    // world-to-camera as (rotation, translation)
    let mut rot = pose.rotation.inverse();
    let mut trans = -(rot * pose.translation);
    let mut cost = initial;
    let mut lambda = 1e-3;
    for it in 0..max_iterations {
        out.iterations = it + 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in inliers {
            let pc = rot * c.scene.coords + trans;
            let iz = 1.0 / pc.z;
            let ru = k.fx * pc.x * iz + k.cx - c.pixel.u;
            let rv = k.fy * pc.y * iz + k.cy - c.pixel.v;
            let du = Vector3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz * iz);
            let dv = Vector3::new(0.0, k.fy * iz, -k.fy * pc.y * iz * iz);
            // d pc / d omega = -[pc]x, d pc / d t = I
            let ju_w = pc.cross(&du);
            let jv_w = pc.cross(&dv);
            let ju = Vector6::new(ju_w.x, ju_w.y, ju_w.z, du.x, du.y, du.z);
            let jv = Vector6::new(jv_w.x, jv_w.y, jv_w.z, dv.x, dv.y, dv.z);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        let mut small_step = false;
        for _ in 0..12 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let dr = UnitQuaternion::from_scaled_axis(w);
            let rot2 = dr * rot;
            let trans2 = dr * trans + dt;
            let cand = Pose::from_parts(rot2.inverse(), -(rot2.inverse() * trans2));
            small_step = delta.norm() < 1e-14 * (1.0 + trans.norm());
            match reprojection_cost(&cand, inliers, k) {
                Some(c2) if c2 < cost => {
                    rot = rot2;
                    trans = trans2;
                    let rel = (cost - c2) / cost.max(1e-300);
                    cost = c2;
                    out.pose = cand;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    small_step |= rel < 1e-14;
                    break;
                }
                _ => {
                    if small_step {
                        break;
                    }
                    lambda *= 10.0;
                }
            }
        }
        out.final_cost = cost;
        if !improved || small_step || cost == 0.0 {
            out.converged = true;
            break;
        }
    }
    out
}

/// Refined pose, at most 100 iterations.
pub fn refine_pose(pose: &Pose, inliers: &[Correspondence], k: &CameraIntrinsics) -> Pose {
    refine_pose_detailed(pose, inliers, k, 100).pose
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    pose: Pose,
    inliers: usize,
    mean_error: f64,
    hypothesis: usize,
    candidate: usize,
}

fn rank(a: &Scored, b: &Scored) -> Ordering {
    b.inliers
        .cmp(&a.inliers)
        .then(a.mean_error.total_cmp(&b.mean_error))
        .then(a.hypothesis.cmp(&b.hypothesis))
        .then(a.candidate.cmp(&b.candidate))
}

/// Three distinct indices drawn for hypothesis `h`.
fn minimal_sample(seed: u64, h: usize, n: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[seed, 0x9a5, h as u64]));
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (lo, hi) = (i.min(j), i.max(j));
    let mut l = rng.gen_range(0..n - 2);
    if l >= lo {
        l += 1;
    }
    if l >= hi {
        l += 1;
    }
    [i, j, l]
}

/// RANSAC over P3P hypotheses followed by iterated refinement on inliers.
///
/// Hypotheses are ranked by (inlier count desc, mean inlier error asc,
/// hypothesis index asc), which makes the result independent of scheduling.
pub fn ransac_localize(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, LocalizerError> {
    cfg.validate()?;
    if corrs.len() < 4 {
        return Err(LocalizerError::NotEnoughCorrespondences(corrs.len()));
    }
    let tau = cfg.inlier_threshold;
    let best = (0..cfg.max_hypotheses)
        .into_par_iter()
        .filter_map(|h| {
            let [i, j, l] = minimal_sample(cfg.rng_seed, h, corrs.len());
            let cands = p3p_minimal(&corrs[i], &corrs[j], &corrs[l], k).ok()?;
            cands
                .into_iter()
                .enumerate()
                .map(|(ci, pose)| {
                    let (n, e) = count_inliers(&pose, corrs, k, tau);
                    Scored {
                        pose,
                        inliers: n,
                        mean_error: e,
                        hypothesis: h,
                        candidate: ci,
                    }
                })
                .min_by(rank)
        })
        .min_by(rank);
    let Some(best) = best else {
        return Err(LocalizerError::LocalizationFailed {
            inliers: 0,
            required: cfg.min_inliers,
        });
    };
    if best.inliers < cfg.min_inliers {
        return Err(LocalizerError::LocalizationFailed {
            inliers: best.inliers,
            required: cfg.min_inliers,
        });
    }
    let mut pose = best.pose;
    let mut inliers = inlier_set(&pose, corrs, k, tau);
    for _ in 0..cfg.refinement_rounds {
        if inliers.len() < 4 {
            break;
        }
        let refined = refine_pose(&pose, &inliers, k);
        let next = inlier_set(&refined, corrs, k, tau);
        let unchanged = next == inliers;
        pose = refined;
        inliers = next;
        if unchanged {
            break;
        }
    }
    let (n, e) = count_inliers(&pose, corrs, k, tau);
    Ok(LocalizationResult {
        pose,
        inlier_count: n,
        mean_inlier_error: e,
        hypothesis_index: best.hypothesis,
    })
}

/// Localizes with every head on the same query pixels and keeps the result
/// with the most inliers (ties: lower mean error, then lower head index).
pub fn ensemble_localize(
    heads: &[ScrHead],
    descriptors: &[Descriptor],
    pixels: &[Pixel],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(LocalizationResult, usize), LocalizerError> {
    assert!(!heads.is_empty(), "ensemble needs at least one head");
    assert_eq!(descriptors.len(), pixels.len(), "one descriptor per query pixel");
    let mut results = Vec::with_capacity(heads.len());
    for head in heads {
        let scene = head.predict_batch(descriptors)?;
        let corrs: Vec<Correspondence> = pixels
            .iter()
            .zip(scene)
            .map(|(p, x)| Correspondence { pixel: *p, scene: x })
            .collect();
        results.push(ransac_localize(&corrs, k, cfg));
    }
    select_best(results)
}

/// Index-ordered selection over per-head results.
pub fn select_best(
    results: Vec<Result<LocalizationResult, LocalizerError>>,
) -> Result<(LocalizationResult, usize), LocalizerError> {
    let mut best: Option<(LocalizationResult, usize)> = None;
    let mut first_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                let replace = match &best {
                    None => true,
                    Some((b, _)) => {
                        r.inlier_count > b.inlier_count
                            || (r.inlier_count == b.inlier_count
                                && r.mean_inlier_error < b.mean_inlier_error)
                    }
                };
                if replace {
                    best = Some((r, i));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| {
        first_err.unwrap_or(LocalizerError::LocalizationFailed {
            inliers: 0,
            required: 0,
        })
    })
}

/// Query pixels of a frame: every grid cell centre, or a seeded uniform
/// subset of `cap` cells (in grid order) when the grid is larger.
pub fn query_pixels(grid: &CellGrid, cap: usize, seed: u64) -> Vec<Pixel> {
    let n = grid.len();
    if n <= cap {
        return (0..n).map(|i| grid.center_of_index(i)).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_keys(&[seed, 0x9e7]));
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| grid.center_of_index(i)).collect()
}

pub const QUERY_CAP: usize = 4096;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Point3;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let eye = Point3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-4.0..-2.5),
        );
        let target = Point3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0);
        let up = Vector3::new(rng.gen_range(-0.3..0.3), 1.0, 0.0);
        Pose::look_at(&eye, &target, &up)
    }

    fn exact_corrs(pose: &Pose, n: usize, rng: &mut impl Rng) -> Vec<Correspondence> {
        let k = cam();
        let mut out = Vec::new();
        while out.len() < n {
            let x = Point3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.3..0.3),
            );
            if let Some(y) = project(&x, &k, pose).filter(|y| k.contains(y)) {
                out.push(Correspondence { pixel: y, scene: x });
            }
        }
        out
    }

    fn pose_gap(a: &Pose, b: &Pose) -> (f64, f64) {
        (
            a.rotation.angle_to(&b.rotation),
            (a.translation - b.translation).norm(),
        )
    }

    #[test]
    fn polynomial_roots() {
        // (x-1)(x-2)(x+3)(x-0.5)
        let mut r = real_roots(&[1.0, -0.5, -7.0, 9.5, -3.0]);
        r.sort_by(f64::total_cmp);
        let want = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // x^2 + 1 has no real roots
        assert!(real_roots(&[0.0, 0.0, 1.0, 0.0, 1.0]).is_empty());
    }

    #[test]
    fn p3p_recovers_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = cam();
        let mut trials = 0;
        while trials < 500 {
            let pose = random_pose(&mut rng);
            let c = exact_corrs(&pose, 3, &mut rng);
            let Ok(cands) = p3p_minimal(&c[0], &c[1], &c[2], &k) else { continue };
            trials += 1;
            assert!(!cands.is_empty() && cands.len() <= 4);
            let found = cands.iter().any(|q| {
                let (r, t) = pose_gap(q, &pose);
                r < 1e-6 && t < 1e-6
            });
            assert!(found, "trial {trials}: pose not among {} candidates", cands.len());
            for q in &cands {
                for ci in &c {
                    let e = reprojection_error_l2(q, ci, &k).unwrap();
                    assert!(e < 1e-6, "reprojection identity violated: {e}");
                }
            }
            for w in cands.windows(2) {
                assert_ne!(cmp_quaternion(&w[0], &w[1]), Ordering::Greater);
            }
        }
    }

    #[test]
    fn p3p_rejects_degenerate_samples() {
        let k = cam();
        let c = |u: f64, x: f64| Correspondence {
            pixel: Pixel::new(u, 50.0),
            scene: Point3::new(x, 0.0, 0.0),
        };
        assert!(matches!(
            p3p_minimal(&c(10.0, 0.0), &c(20.0, 1.0), &c(30.0, 2.0), &k),
            Err(LocalizerError::DegenerateSample)
        ));
        let a = Correspondence {
            pixel: Pixel::new(5.0, 5.0),
            scene: Point3::new(0.0, 1.0, 0.0),
        };
        assert!(matches!(
            p3p_minimal(&a, &a, &c(30.0, 2.0), &k),
            Err(LocalizerError::DegenerateSample)
        ));
    }

    #[test]
    fn refinement_fixed_point_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = cam();
        let truth = random_pose(&mut rng);
        let corrs = exact_corrs(&truth, 20, &mut rng);
        let same = refine_pose(&truth, &corrs, &k);
        let (r, t) = pose_gap(&same, &truth);
        assert!(r < 1e-9 && t < 1e-9);

        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let start = Pose::from_parts(
            truth.rotation * UnitQuaternion::from_scaled_axis(axis * 1f64.to_radians()),
            truth.translation + Vector3::new(0.03, -0.04, 0.0),
        );
        let out = refine_pose_detailed(&start, &corrs, &k, 100);
        assert!(out.final_cost <= out.initial_cost);
        let (r, t) = pose_gap(&out.pose, &truth);
        assert!(r < 1e-6 && t < 1e-6, "rot {r} trans {t}");
    }

    #[test]
    fn refinement_cost_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = cam();
        let truth = random_pose(&mut rng);
        let mut corrs = exact_corrs(&truth, 30, &mut rng);
        for c in &mut corrs {
            c.pixel.u += rng.gen_range(-1.0..1.0);
        }
        let start = Pose::from_parts(
            truth.rotation * UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.02, 0.0)),
            truth.translation,
        );
        let mut prev = reprojection_cost(&start, &corrs, &k).unwrap();
        for iters in 1..15 {
            let out = refine_pose_detailed(&start, &corrs, &k, iters);
            assert!(out.final_cost <= prev + 1e-12);
            prev = out.final_cost;
        }
    }

    #[test]
    fn ransac_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = cam();
        let truth = random_pose(&mut rng);
        let corrs = exact_corrs(&truth, 100, &mut rng);
        let res = ransac_localize(&corrs, &k, &RansacConfig::default()).unwrap();
        assert_eq!(res.inlier_count, 100);
        let (r, t) = pose_gap(&res.pose, &truth);
        assert!(r < 1e-6 && t < 1e-6);
        let four = ransac_localize(&corrs[..4], &k, &RansacConfig { min_inliers: 4, ..RansacConfig::default() })
            .unwrap();
        let (r, t) = pose_gap(&four.pose, &truth);
        assert!(r < 1e-6 && t < 1e-6);
        assert!(matches!(
            ransac_localize(&corrs[..3], &k, &RansacConfig::default()),
            Err(LocalizerError::NotEnoughCorrespondences(3))
        ));
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = cam();
        let truth = random_pose(&mut rng);
        let mut corrs = exact_corrs(&truth, 60, &mut rng);
        for c in corrs.iter_mut().step_by(2) {
            c.pixel = Pixel::new(rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0));
        }
        let cfg = RansacConfig {
            rng_seed: 77,
            ..RansacConfig::default()
        };
        let a = ransac_localize(&corrs, &k, &cfg).unwrap();
        let b = ransac_localize(&corrs, &k, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inlier_count_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = cam();
        let truth = random_pose(&mut rng);
        let mut corrs = exact_corrs(&truth, 80, &mut rng);
        for c in &mut corrs {
            c.pixel.u += rng.gen_range(-20.0..20.0);
        }
        let mut prev = usize::MAX;
        for t in [40.0, 20.0, 10.0, 5.0, 1.0, 0.1] {
            let (n, _) = count_inliers(&truth, &corrs, &k, t);
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn query_pixels_cap() {
        let g = CellGrid::new(160, 120, 1);
        let q = query_pixels(&g, 4096, 3);
        assert_eq!(q.len(), 4096);
        assert_eq!(q, query_pixels(&g, 4096, 3));
        let small = CellGrid::new(64, 48, 8);
        assert_eq!(query_pixels(&small, 4096, 3).len(), 48);
    }

    #[test]
    fn selection_prefers_inliers_then_error_then_index() {
        let r = |n: usize, e: f64| {
            Ok(LocalizationResult {
                pose: Pose::identity(),
                inlier_count: n,
                mean_inlier_error: e,
                hypothesis_index: 0,
            })
        };
        assert_eq!(select_best(vec![r(5, 1.0), r(7, 2.0)]).unwrap().1, 1);
        assert_eq!(select_best(vec![r(7, 1.0), r(7, 0.5)]).unwrap().1, 1);
        assert_eq!(select_best(vec![r(7, 1.0), r(7, 1.0)]).unwrap().1, 0);
        assert!(select_best(vec![Err(LocalizerError::DegenerateSample)]).is_err());
    }
}
