//! Density-based segmentation of piled objects.
//!
//! Points are classified as core, border or noise from their `eps`
//! neighborhoods (the point itself counts). Core points connected through
//! core-core adjacency form the clusters. Border points are then assigned in
//! a separate pass: among the clusters of the core points that reach a
//! border point, the one whose best core shares the most neighbors with it
//! wins, and the point joins only when its normal and curvature agree with
//! that core. Points that fail the check become noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{centroid_of, PointCloud, NOISE_LABEL};
use crate::error::{invalid_param, Error, Result};
use crate::features::{estimate_features_from, SurfaceFeatures};
use crate::geometry::{Point3, Vec3};
use crate::octree::{NeighborSearch, Octree};
use crate::scalar::Real;

/// How the curvature threshold is applied to a border point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureRule {
    /// Border curvature itself must not exceed `c_th`.
    #[default]
    Absolute,
    /// Border and core curvature may differ by at most `c_th`.
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams<T> {
    pub eps: T,
    pub min_pts: usize,
    /// Largest normal angle (radians) between a border point and its core.
    pub theta_th: T,
    pub c_th: T,
    pub curvature_rule: CurvatureRule,
}

impl<T: Real> DbscanParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > T::zero() && self.eps.is_finite()) {
            return Err(invalid_param("eps", "must be positive"));
        }
        if self.min_pts < 1 {
            return Err(invalid_param("min_pts", "must be at least 1"));
        }
        if !(self.theta_th > T::zero() && self.theta_th <= T::FRAC_PI_2()) {
            return Err(invalid_param("theta_th", "must lie in (0, π/2]"));
        }
        if !(self.c_th > T::zero()) {
            return Err(invalid_param("c_th", "must be positive"));
        }
        Ok(())
    }
}

/// Full segmentation configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams<T> {
    pub dbscan: DbscanParams<T>,
    pub octree_depth: usize,
    /// Neighborhood radius for normal estimation.
    pub feature_radius: T,
    pub min_feature_neighbors: usize,
    /// Clusters with fewer points are demoted to noise.
    pub min_cluster_size: usize,
    /// Sensor position used to orient normals.
    pub viewpoint: Point3<T>,
}

impl<T: Real> Default for SegmentParams<T> {
    fn default() -> Self {
        let eps = T::lit(0.005);
        Self {
            dbscan: DbscanParams {
                eps,
                min_pts: 7,
                theta_th: T::lit(20f64.to_radians()),
                c_th: T::lit(0.1),
                curvature_rule: CurvatureRule::Absolute,
            },
            octree_depth: 7,
            feature_radius: eps * T::lit(2.0),
            min_feature_neighbors: 5,
            min_cluster_size: 50,
            viewpoint: Vec3::zero(),
        }
    }
}

impl<T: Real> SegmentParams<T> {
    pub fn validate(&self) -> Result<()> {
        self.dbscan.validate()?;
        if !(1..=crate::octree::MAX_SUPPORTED_DEPTH).contains(&self.octree_depth) {
            return Err(invalid_param("octree_depth", "must lie in [1, 21]"));
        }
        if !(self.feature_radius > T::zero()) {
            return Err(invalid_param("feature_radius", "must be positive"));
        }
        if self.min_feature_neighbors < 3 {
            return Err(invalid_param("min_feature_neighbors", "must be at least 3"));
        }
        if !self.viewpoint.is_finite() {
            return Err(invalid_param("viewpoint", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointRole {
    Core,
    Border,
    Noise,
}

/// `eps` neighborhoods of every point in compressed-row form; each row is
/// sorted ascending and includes the point itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Neighborhoods {
    pub fn compute<T: Real, S: NeighborSearch<T>>(points: &[Point3<T>], search: &S, eps: T) -> Self {
        let rows: Vec<Vec<u32>> = points
            .par_iter()
            .map_init(Vec::new, |buf, p| {
                search.radius_search_into(*p, eps, buf);
                buf.iter().map(|&i| i as u32).collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let total = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(total);
        for r in rows {
            indices.extend_from_slice(&r);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn of(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn count(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T> {
    /// Smallest core index of the cluster at formation time.
    pub id: usize,
    /// Member indices, ascending.
    pub indices: Vec<usize>,
    pub centroid: Point3<T>,
}

impl<T> Cluster<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Disjoint clusters plus noise, together covering every point index.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<T> {
    pub clusters: Vec<Cluster<T>>,
    pub noise: Vec<usize>,
    point_count: usize,
}

impl<T: Real> Segmentation<T> {
    pub fn point_count(&self) -> usize {
        self.point_count
    }

    /// Per-point label: the owning cluster's id, or [`NOISE_LABEL`].
    pub fn labels(&self) -> Vec<i64> {
        let mut labels = vec![NOISE_LABEL; self.point_count];
        for c in &self.clusters {
            for &i in &c.indices {
                labels[i] = c.id as i64;
            }
        }
        labels
    }

    pub fn centroids(&self) -> Vec<Point3<T>> {
        self.clusters.iter().map(|c| c.centroid).collect()
    }

    /// Rebuilds a segmentation from per-point labels (negative = noise),
    /// e.g. a labeled cloud read back from disk. Cluster ids are the labels.
    pub fn from_labels(cloud: &PointCloud<T>, labels: &[i64]) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::InvalidCloud("label count differs from point count".into()));
        }
        let mut groups: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
        let mut noise = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 {
                noise.push(i);
            } else {
                groups.entry(l).or_default().push(i);
            }
        }
        let clusters = groups
            .into_iter()
            .map(|(id, indices)| Cluster {
                id: id as usize,
                centroid: centroid_of(&cloud.select(&indices).into_points()).expect("non-empty group"),
                indices,
            })
            .collect();
        Ok(Self {
            clusters,
            noise,
            point_count: cloud.len(),
        })
    }

    /// Checks that clusters and noise partition `0..point_count`.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.point_count];
        for &i in self.clusters.iter().flat_map(|c| c.indices.iter()).chain(self.noise.iter()) {
            if i >= self.point_count || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Core iff the neighborhood (self included) holds at least `min_pts`
/// points; border iff reached by a core; noise otherwise.
pub fn classify_points(neighborhoods: &Neighborhoods, min_pts: usize) -> Vec<PointRole> {
    let n = neighborhoods.len();
    let core: Vec<bool> = (0..n).map(|i| neighborhoods.count(i) >= min_pts).collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            if core[i] {
                PointRole::Core
            } else if neighborhoods.of(i).iter().any(|&j| core[j as usize]) {
                PointRole::Border
            } else {
                PointRole::Noise
            }
        })
        .collect()
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Connected components of the core-core adjacency. Non-core points are
/// placed in `noise` until [`merge_borders`] runs.
pub fn form_core_clusters<T: Real>(
    cloud: &PointCloud<T>,
    neighborhoods: &Neighborhoods,
    roles: &[PointRole],
) -> Segmentation<T> {
    let n = roles.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for i in 0..n {
        if roles[i] != PointRole::Core {
            continue;
        }
        for &j in neighborhoods.of(i) {
            if j as usize <= i || roles[j as usize] != PointRole::Core {
                continue;
            }
            let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j));
            if a != b {
                // The smaller index becomes the root, so roots are cluster ids.
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent[hi as usize] = lo;
            }
        }
    }
    let mut slot = vec![usize::MAX; n];
    let mut clusters: Vec<Cluster<T>> = Vec::new();
    let mut noise = Vec::new();
    for i in 0..n {
        if roles[i] != PointRole::Core {
            noise.push(i);
            continue;
        }
        let root = find(&mut parent, i as u32) as usize;
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Cluster {
                id: root,
                indices: Vec::new(),
                centroid: Vec3::zero(),
            });
        }
        clusters[slot[root]].indices.push(i);
    }
    for c in &mut clusters {
        c.centroid = centroid_of(&c.indices.iter().map(|&i| cloud.point(i)).collect::<Vec<_>>()).expect("non-empty");
    }
    Segmentation {
        clusters,
        noise,
        point_count: n,
    }
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn lex_less<T: Real>(a: Point3<T>, b: Point3<T>) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// The cluster and core chosen for border point `b`, before the surface
/// check. Candidates are ranked by shared-neighbor count; ties go to the core
/// with the lexicographically smallest coordinates, which keeps the choice
/// independent of point order.
fn best_candidate<T: Real>(
    b: usize,
    points: &[Point3<T>],
    neighborhoods: &Neighborhoods,
    core_cluster: &[u32],
) -> Option<(u32, usize)> {
    let nb = neighborhoods.of(b);
    let mut best: Option<(usize, usize, u32)> = None; // (shared, core, cluster)
    for &c in nb {
        let c = c as usize;
        let cluster = core_cluster[c];
        if cluster == u32::MAX {
            continue;
        }
        let shared = sorted_intersection_len(nb, neighborhoods.of(c));
        let better = match best {
            None => true,
            Some((s, bc, _)) => shared > s || (shared == s && lex_less(points[c], points[bc])),
        };
        if better {
            best = Some((shared, c, cluster));
        }
    }
    best.map(|(_, c, cluster)| (cluster, c))
}

fn surface_agrees<T: Real>(b: usize, core: usize, features: &SurfaceFeatures<T>, params: &DbscanParams<T>) -> bool {
    let (Some(nb), Some(nc)) = (features.normals[b], features.normals[core]) else {
        return false;
    };
    if nb.angle_to(nc) > params.theta_th {
        return false;
    }
    let Some(cb) = features.curvatures[b] else {
        return false;
    };
    match params.curvature_rule {
        CurvatureRule::Absolute => cb <= params.c_th,
        CurvatureRule::Difference => match features.curvatures[core] {
            Some(cc) => (cb - cc).abs() <= params.c_th,
            None => false,
        },
    }
}

/// Assigns border points to core clusters by shared-neighborhood size and
/// surface agreement; the rest of the non-core points become noise.
pub fn merge_borders<T: Real>(
    cloud: &PointCloud<T>,
    neighborhoods: &Neighborhoods,
    roles: &[PointRole],
    features: &SurfaceFeatures<T>,
    params: &DbscanParams<T>,
    core_seg: &Segmentation<T>,
) -> Segmentation<T> {
    let n = roles.len();
    let mut core_cluster = vec![u32::MAX; n];
    for (k, c) in core_seg.clusters.iter().enumerate() {
        for &i in &c.indices {
            if roles[i] == PointRole::Core {
                core_cluster[i] = k as u32;
            }
        }
    }
    let points = cloud.points();
    let borders: Vec<usize> = (0..n).filter(|&i| roles[i] == PointRole::Border).collect();
    let decisions: Vec<Option<u32>> = borders
        .par_iter()
        .map(|&b| {
            let (cluster, core) = best_candidate(b, points, neighborhoods, &core_cluster)?;
            surface_agrees(b, core, features, params).then_some(cluster)
        })
        .collect();

    let mut clusters: Vec<Cluster<T>> = core_seg
        .clusters
        .iter()
        .map(|c| Cluster {
            id: c.id,
            indices: c.indices.iter().copied().filter(|&i| roles[i] == PointRole::Core).collect(),
            centroid: c.centroid,
        })
        .collect();
    let mut assigned = vec![false; n];
    for (&b, d) in borders.iter().zip(&decisions) {
        if let Some(k) = d {
            clusters[*k as usize].indices.push(b);
            assigned[b] = true;
        }
    }
    for c in &mut clusters {
        c.indices.sort_unstable();
        c.centroid = centroid_of(&c.indices.iter().map(|&i| points[i]).collect::<Vec<_>>()).expect("non-empty");
        for &i in &c.indices {
            assigned[i] = true;
        }
    }
    let noise = (0..n).filter(|&i| !assigned[i]).collect();
    Segmentation {
        clusters,
        noise,
        point_count: n,
    }
}

/// Moves clusters smaller than `min_size` into noise.
pub fn drop_small_clusters<T: Real>(mut seg: Segmentation<T>, min_size: usize) -> Segmentation<T> {
    let (keep, drop): (Vec<_>, Vec<_>) = seg.clusters.into_iter().partition(|c| c.len() >= min_size);
    for c in drop {
        seg.noise.extend(c.indices);
    }
    seg.noise.sort_unstable();
    seg.clusters = keep;
    seg
}

/// Intermediate products of a segmentation run, for inspection and tests.
#[derive(Debug, Clone)]
pub struct SegmentationTrace<T> {
    pub roles: Vec<PointRole>,
    pub features: SurfaceFeatures<T>,
    pub core_clusters: Segmentation<T>,
    pub segmentation: Segmentation<T>,
}

/// Octree-accelerated segmentation.
pub fn segment_cloud<T: Real>(cloud: &PointCloud<T>, params: &SegmentParams<T>) -> Result<Segmentation<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    params.validate()?;
    let tree = Octree::build(cloud, params.octree_depth)?;
    Ok(segment_with_search(cloud, &tree, params)?.segmentation)
}

/// Segmentation over any neighbor-search backend.
pub fn segment_with_search<T: Real, S: NeighborSearch<T>>(
    cloud: &PointCloud<T>,
    search: &S,
    params: &SegmentParams<T>,
) -> Result<SegmentationTrace<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    params.validate()?;
    let neighborhoods = Neighborhoods::compute(cloud.points(), search, params.dbscan.eps);
    let features = estimate_features_from(
        cloud,
        search,
        params.feature_radius,
        params.min_feature_neighbors,
        params.viewpoint,
    )?;
    let roles = classify_points(&neighborhoods, params.dbscan.min_pts);
    let core_clusters = form_core_clusters(cloud, &neighborhoods, &roles);
    let merged = merge_borders(cloud, &neighborhoods, &roles, &features, &params.dbscan, &core_clusters);
    let segmentation = drop_small_clusters(merged, params.min_cluster_size);
    Ok(SegmentationTrace {
        roles,
        features,
        core_clusters,
        segmentation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::Octree;

    fn blob(center: [f64; 3], n: usize, step: f64) -> Vec<Point3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(Vec3::new(center[0] + i as f64 * step, center[1] + j as f64 * step, center[2]));
            }
        }
        v
    }

    fn setup(points: Vec<Point3<f64>>, eps: f64) -> (PointCloud<f64>, Neighborhoods) {
        let cloud = PointCloud::new(points).unwrap();
        let tree = Octree::build(&cloud, 8).unwrap();
        let nb = Neighborhoods::compute(cloud.points(), &tree, eps);
        (cloud, nb)
    }

    #[test]
    fn self_counting_roles() {
        let (_, nb) = setup(vec![Vec3::zero()], 0.1);
        assert_eq!(classify_points(&nb, 1), vec![PointRole::Core]);
        let (_, nb) = setup(vec![Vec3::zero(), Vec3::splat(10.0)], 0.1);
        assert_eq!(classify_points(&nb, 5), vec![PointRole::Noise; 2]);
    }

    #[test]
    fn separated_blobs_form_two_clusters() {
        let mut pts = blob([0.0; 3], 6, 0.01);
        pts.extend(blob([1.0, 0.0, 0.0], 6, 0.01));
        let (cloud, nb) = setup(pts, 0.015);
        let roles = classify_points(&nb, 3);
        let seg = form_core_clusters(&cloud, &nb, &roles);
        assert_eq!(seg.clusters.len(), 2);
        assert_eq!(seg.clusters[0].id, 0);
        assert_eq!(seg.clusters[1].id, 36);
        assert!(seg.is_partition());
    }

    #[test]
    fn one_blob_one_cluster() {
        let (cloud, nb) = setup(blob([0.0; 3], 8, 0.01), 0.015);
        let roles = classify_points(&nb, 3);
        let seg = form_core_clusters(&cloud, &nb, &roles);
        assert_eq!(seg.clusters.len(), 1);
        assert_eq!(seg.clusters[0].len(), roles.iter().filter(|r| **r == PointRole::Core).count());
    }

    #[test]
    fn no_borders_leaves_segmentation_unchanged() {
        let (cloud, nb) = setup(blob([0.0; 3], 5, 0.01), 0.05);
        let roles = classify_points(&nb, 1);
        assert!(roles.iter().all(|r| *r == PointRole::Core));
        let core = form_core_clusters(&cloud, &nb, &roles);
        let tree = Octree::build(&cloud, 8).unwrap();
        let f = crate::features::estimate_features(&cloud, &tree, 0.02, 3).unwrap();
        let params = SegmentParams::<f64>::default().dbscan;
        assert_eq!(merge_borders(&cloud, &nb, &roles, &f, &params, &core), core);
    }

    #[test]
    fn aligned_border_joins_single_candidate() {
        // A 5x5 planar patch; its corner points have fewer neighbors.
        let (cloud, nb) = setup(blob([0.0, 0.0, -1.0], 5, 0.01), 0.0101);
        let roles = classify_points(&nb, 4);
        assert_eq!(roles[0], PointRole::Border);
        let core = form_core_clusters(&cloud, &nb, &roles);
        let tree = Octree::build(&cloud, 8).unwrap();
        let f = crate::features::estimate_features(&cloud, &tree, 0.03, 3).unwrap();
        let params = DbscanParams {
            eps: 0.0101,
            min_pts: 4,
            theta_th: 0.2,
            c_th: 0.05,
            curvature_rule: CurvatureRule::Absolute,
        };
        let merged = merge_borders(&cloud, &nb, &roles, &f, &params, &core);
        assert_eq!(merged.clusters.len(), 1);
        assert_eq!(merged.clusters[0].len(), 25);
        assert!(merged.noise.is_empty());
    }

    #[test]
    fn sparse_noise_yields_no_clusters() {
        let pts: Vec<_> = (0..50).map(|i| Vec3::new(i as f64, (i * 7 % 13) as f64, 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let seg = segment_cloud(&cloud, &SegmentParams::default()).unwrap();
        assert!(seg.clusters.is_empty());
        assert_eq!(seg.noise.len(), 50);
    }

    #[test]
    fn params_validation() {
        let mut p = SegmentParams::<f64>::default();
        p.dbscan.theta_th = 2.0;
        assert!(p.validate().is_err());
        let mut p = SegmentParams::<f64>::default();
        p.dbscan.min_pts = 0;
        assert!(p.validate().is_err());
        assert!(matches!(
            segment_cloud(&PointCloud::<f64>::default(), &SegmentParams::default()),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn labels_round_trip() {
        let mut pts = blob([0.0; 3], 6, 0.01);
        pts.push(Vec3::splat(5.0));
        let (cloud, nb) = setup(pts, 0.015);
        let roles = classify_points(&nb, 3);
        let seg = form_core_clusters(&cloud, &nb, &roles);
        let back = Segmentation::from_labels(&cloud, &seg.labels()).unwrap();
        assert_eq!(back, seg);
    }
}
