//! Template-to-cluster pose estimation: PCA frame alignment followed by
//! point-to-point ICP.

use rayon::prelude::*;

use crate::cloud::{PointCloud, NOISE_LABEL};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{mean_and_covariance, symmetric_eigen, symmetric_eigen3, Mat3, Point3, Vec3};
use crate::octree::Octree;
use crate::scalar::Real;
use crate::segment::Segmentation;
use crate::transform::RigidTransform;

/// Mean and principal axes of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalFrame<T> {
    pub origin: Point3<T>,
    /// Orthonormal, right-handed, by descending eigenvalue.
    pub axes: [Vec3<T>; 3],
    /// Descending.
    pub eigenvalues: [T; 3],
}

impl<T: Real> PrincipalFrame<T> {
    /// Rotation whose columns are the axes (frame → world).
    pub fn rotation(&self) -> Mat3<T> {
        Mat3::from_columns(self.axes[0], self.axes[1], self.axes[2])
    }

    /// True when all three variances are nearly equal, so the axes carry
    /// no orientation information.
    pub fn is_isotropic(&self) -> bool {
        self.eigenvalues[0] - self.eigenvalues[2] <= T::lit(1e-3) * self.eigenvalues[0]
    }
}

pub fn principal_frame<T: Real>(cloud: &PointCloud<T>) -> Result<PrincipalFrame<T>> {
    principal_frame_of(cloud.points())
}

pub fn principal_frame_of<T: Real>(points: &[Point3<T>]) -> Result<PrincipalFrame<T>> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let (origin, cov) = mean_and_covariance(points.iter().copied()).expect("non-empty");
    let (vals, vecs) = symmetric_eigen3(&cov);
    let eigenvalues = [vals[2].max(T::zero()), vals[1].max(T::zero()), vals[0].max(T::zero())];
    if !(eigenvalues[1] > T::lit(1e-12) * eigenvalues[0]) {
        return Err(Error::DegenerateGeometry("points are collinear".into()));
    }
    let a0 = vecs[2];
    let a1 = vecs[1];
    let a2 = a0.cross(a1);
    Ok(PrincipalFrame {
        origin,
        axes: [a0, a1, a2],
        eigenvalues,
    })
}

/// Mean distance from each transformed model point to its nearest cluster point.
fn mean_nn_distance<T: Real>(model: &[Point3<T>], tree: &Octree<T>, t: &RigidTransform<T>) -> T {
    let sum: T = model.iter().map(|&q| tree.nearest(t.apply_point(q)).1).sum();
    sum / T::from_count(model.len())
}

/// The four right-handed frame-to-frame transforms, in the order
/// `(+,+)`, `(−,+)`, `(+,−)`, `(−,−)` of the first two axis signs.
pub fn frame_candidates<T: Real>(model: &PrincipalFrame<T>, cluster: &PrincipalFrame<T>) -> [RigidTransform<T>; 4] {
    let rm_t = model.rotation().transpose();
    let signs = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
    signs.map(|(s0, s1)| {
        let (s0, s1) = (T::lit(s0), T::lit(s1));
        let rc = Mat3::from_columns(cluster.axes[0] * s0, cluster.axes[1] * s1, cluster.axes[2] * (s0 * s1));
        let r = rc.mul_mat(&rm_t);
        RigidTransform::from_parts(r, cluster.origin - r.mul_vec(model.origin))
    })
}

/// PCA coarse alignment of `model` onto `cluster`.
pub fn coarse_align<T: Real>(model: &PointCloud<T>, cluster: &PointCloud<T>) -> Result<RigidTransform<T>> {
    let tree = Octree::build(cluster, DEFAULT_TREE_DEPTH)?;
    coarse_align_with(model.points(), cluster.points(), &tree)
}

const DEFAULT_TREE_DEPTH: usize = 8;

fn coarse_align_with<T: Real>(model: &[Point3<T>], cluster: &[Point3<T>], tree: &Octree<T>) -> Result<RigidTransform<T>> {
    let fm = principal_frame_of(model)?;
    let fc = principal_frame_of(cluster)?;
    if fm.is_isotropic() || fc.is_isotropic() {
        return Err(Error::DegenerateGeometry("principal axes are undefined for an isotropic cloud".into()));
    }
    let mut best: Option<(T, RigidTransform<T>)> = None;
    for cand in frame_candidates(&fm, &fc) {
        let score = mean_nn_distance(model, tree, &cand);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, cand));
        }
    }
    Ok(best.expect("four candidates").1)
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]` (Horn's
/// quaternion method; always a proper rotation). `None` for empty input.
pub fn solve_rigid<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Option<RigidTransform<T>> {
    assert_eq!(src.len(), dst.len(), "correspondence lists differ in length");
    if src.is_empty() {
        return None;
    }
    let inv = T::one() / T::from_count(src.len());
    let cs = src.iter().fold(Vec3::zero(), |a, p| a + *p) * inv;
    let cd = dst.iter().fold(Vec3::zero(), |a, p| a + *p) * inv;
    let mut s = [[T::zero(); 3]; 3];
    for (a, b) in src.iter().zip(dst) {
        let a = (*a - cs).to_array();
        let b = (*b - cd).to_array();
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (_, vecs) = symmetric_eigen(n);
    let rot = RigidTransform::from_quaternion(vecs[3], Vec3::zero());
    let t = cd - rot.apply_vector(cs);
    Some(RigidTransform::from_parts(*rot.rotation(), t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams<T> {
    pub max_iter: usize,
    /// Stop when the rmse improves by less than this (meters).
    pub eps_converge: T,
    /// Correspondences farther than this multiple of the median distance are
    /// ignored.
    pub reject_factor: T,
    /// When set and the model carries normals, only model points whose posed
    /// normal faces this position take part.
    pub visible_from: Option<Point3<T>>,
}

impl<T: Real> Default for IcpParams<T> {
    fn default() -> Self {
        Self {
            max_iter: 60,
            eps_converge: T::lit(1e-7),
            reject_factor: T::lit(5.0),
            visible_from: None,
        }
    }
}

impl<T: Real> IcpParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(invalid_param("max_iter", "must be at least 1"));
        }
        if !(self.eps_converge >= T::zero()) {
            return Err(invalid_param("eps_converge", "must be non-negative"));
        }
        if !(self.reject_factor > T::zero()) {
            return Err(invalid_param("reject_factor", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult<T> {
    /// Model → cluster.
    pub transform: RigidTransform<T>,
    pub rmse: T,
    pub iterations_used: usize,
    pub converged: bool,
    /// rmse of the initial guess followed by every accepted iterate.
    pub rmse_history: Vec<T>,
}

struct Correspondences<T> {
    src: Vec<Point3<T>>,
    dst: Vec<Point3<T>>,
    rmse: T,
}

fn correspondences<T: Real>(
    model: &PointCloud<T>,
    tree: &Octree<T>,
    cluster: &[Point3<T>],
    t: &RigidTransform<T>,
    params: &IcpParams<T>,
) -> Correspondences<T> {
    let normals = model.normals();
    let pairs: Vec<(T, Point3<T>, Point3<T>)> = (0..model.len())
        .into_par_iter()
        .filter_map(|i| {
            let q = t.apply_point(model.point(i));
            if let (Some(view), Some(ns)) = (params.visible_from, normals) {
                match ns[i] {
                    Some(n) if t.apply_vector(n).dot(view - q) > T::zero() => {}
                    _ => return None,
                }
            }
            let (j, d) = tree.nearest(q);
            Some((d, q, cluster[j]))
        })
        .collect();
    if pairs.is_empty() {
        return Correspondences {
            src: Vec::new(),
            dst: Vec::new(),
            rmse: T::infinity(),
        };
    }
    let mut ds: Vec<T> = pairs.iter().map(|p| p.0).collect();
    let mid = ds.len() / 2;
    let (_, median, _) = ds.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
    let cut = *median * params.reject_factor;
    let mut src = Vec::with_capacity(pairs.len());
    let mut dst = Vec::with_capacity(pairs.len());
    let mut sse = T::zero();
    for (d, q, p) in pairs {
        if d <= cut {
            src.push(q);
            dst.push(p);
            sse += d * d;
        }
    }
    let rmse = (sse / T::from_count(src.len())).sqrt();
    Correspondences { src, dst, rmse }
}

/// Refines `init` (model → cluster) by point-to-point ICP. A step that would
/// raise the rmse is not taken, so `rmse_history` never increases.
pub fn icp_refine<T: Real>(
    model: &PointCloud<T>,
    cluster: &PointCloud<T>,
    init: RigidTransform<T>,
    params: &IcpParams<T>,
) -> Result<RegistrationResult<T>> {
    if model.is_empty() || cluster.is_empty() {
        return Err(Error::EmptyInput);
    }
    params.validate()?;
    let tree = Octree::build(cluster, DEFAULT_TREE_DEPTH)?;
    icp_with(model, cluster.points(), &tree, init, params)
}

fn icp_with<T: Real>(
    model: &PointCloud<T>,
    cluster: &[Point3<T>],
    tree: &Octree<T>,
    init: RigidTransform<T>,
    params: &IcpParams<T>,
) -> Result<RegistrationResult<T>> {
    let mut t = init;
    let mut corr = correspondences(model, tree, cluster, &t, params);
    if corr.src.is_empty() {
        return Err(Error::DegenerateGeometry("no model point faces the viewpoint".into()));
    }
    let mut history = vec![corr.rmse];
    let mut iterations_used = 0;
    let mut converged = false;
    while iterations_used < params.max_iter {
        iterations_used += 1;
        let step = solve_rigid(&corr.src, &corr.dst).expect("non-empty correspondences");
        let next_t = step.compose(&t);
        let next = correspondences(model, tree, cluster, &next_t, params);
        if !(next.rmse <= corr.rmse) {
            converged = true;
            break;
        }
        let gain = corr.rmse - next.rmse;
        t = next_t;
        corr = next;
        history.push(corr.rmse);
        if gain < params.eps_converge {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform: t,
        rmse: corr.rmse,
        iterations_used,
        converged,
        rmse_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterParams<T> {
    pub icp: IcpParams<T>,
    pub octree_depth: usize,
}

impl<T: Real> Default for RegisterParams<T> {
    fn default() -> Self {
        Self {
            icp: IcpParams::default(),
            octree_depth: DEFAULT_TREE_DEPTH,
        }
    }
}

/// Coarse alignment then ICP for one cluster.
pub fn register<T: Real>(
    model: &PointCloud<T>,
    cluster: &PointCloud<T>,
    params: &RegisterParams<T>,
) -> Result<RegistrationResult<T>> {
    if model.is_empty() || cluster.is_empty() {
        return Err(Error::EmptyInput);
    }
    params.icp.validate()?;
    let tree = Octree::build(cluster, params.octree_depth)?;
    let init = coarse_align_with(model.points(), cluster.points(), &tree)?;
    icp_with(model, cluster.points(), &tree, init, &params.icp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRegistration<T> {
    pub cluster_id: usize,
    /// The failure message when the cluster could not be registered.
    pub result: std::result::Result<RegistrationResult<T>, String>,
}

/// Registers `model` against every cluster independently and in parallel.
pub fn register_all<T: Real>(
    cloud: &PointCloud<T>,
    segmentation: &Segmentation<T>,
    model: &PointCloud<T>,
    params: &RegisterParams<T>,
) -> Vec<ClusterRegistration<T>> {
    segmentation
        .clusters
        .par_iter()
        .map(|c| ClusterRegistration {
            cluster_id: c.id,
            result: register(model, &cloud.select(&c.indices).without_labels(), params).map_err(|e| e.to_string()),
        })
        .collect()
}

/// Splits a labeled cloud into per-label clusters (noise excluded).
pub fn clusters_from_labels<T: Real>(cloud: &PointCloud<T>) -> Result<Segmentation<T>> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::InvalidCloud("cloud has no labels".into()))?;
    let labels: Vec<i64> = labels.iter().map(|&l| if l < 0 { NOISE_LABEL } else { l }).collect();
    Segmentation::from_labels(cloud, &labels)
}
