//! Per-point surface normals and curvature from local plane fits.

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{invalid_param, Result};
use crate::geometry::{mean_and_covariance, symmetric_eigen3, Point3, Vec3};
use crate::octree::NeighborSearch;
use crate::scalar::Real;

/// Normals and curvatures; `None` marks a point whose neighborhood was too
/// small (or degenerate) to fit a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFeatures<T> {
    pub normals: Vec<Option<Vec3<T>>>,
    /// `λ₀ / (λ₀ + λ₁ + λ₂)` of the neighborhood covariance, in `[0, 1/3]`.
    pub curvatures: Vec<Option<T>>,
}

impl<T: Real> SurfaceFeatures<T> {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }

    /// Copies the features into the cloud's normal and curvature channels.
    pub fn attach(&self, cloud: PointCloud<T>) -> Result<PointCloud<T>> {
        cloud.with_normals(self.normals.clone())?.with_curvatures(self.curvatures.clone())
    }
}

/// Features with the sensor at the origin.
pub fn estimate_features<T: Real, S: NeighborSearch<T>>(
    cloud: &PointCloud<T>,
    search: &S,
    radius: T,
    min_neighbors: usize,
) -> Result<SurfaceFeatures<T>> {
    estimate_features_from(cloud, search, radius, min_neighbors, Vec3::zero())
}

/// Fits a plane to each point's `radius` neighborhood (the point included).
///
/// The normal is the covariance eigenvector of the smallest eigenvalue,
/// flipped to face `viewpoint`; curvature is the smallest eigenvalue over the
/// eigenvalue sum.
pub fn estimate_features_from<T: Real, S: NeighborSearch<T>>(
    cloud: &PointCloud<T>,
    search: &S,
    radius: T,
    min_neighbors: usize,
    viewpoint: Point3<T>,
) -> Result<SurfaceFeatures<T>> {
    if !(radius > T::zero()) {
        return Err(invalid_param("radius", "must be positive"));
    }
    if min_neighbors < 3 {
        return Err(invalid_param("min_neighbors", "must be at least 3"));
    }
    let pts = cloud.points();
    let fitted: Vec<Option<(Vec3<T>, T)>> = (0..pts.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            search.radius_search_into(pts[i], radius, buf);
            if buf.len() < min_neighbors {
                return None;
            }
            fit_plane(pts[i], buf.iter().map(|&j| pts[j]), viewpoint)
        })
        .collect();
    Ok(SurfaceFeatures {
        normals: fitted.iter().map(|f| f.map(|(n, _)| n)).collect(),
        curvatures: fitted.iter().map(|f| f.map(|(_, c)| c)).collect(),
    })
}

/// Normal (facing `viewpoint` from `at`) and curvature of a neighborhood.
pub fn fit_plane<T: Real>(
    at: Point3<T>,
    neighbors: impl Iterator<Item = Point3<T>> + Clone,
    viewpoint: Point3<T>,
) -> Option<(Vec3<T>, T)> {
    let (_, cov) = mean_and_covariance(neighbors)?;
    let (vals, vecs) = symmetric_eigen3(&cov);
    let vals = vals.map(|v| v.max(T::zero()));
    let total = vals[0] + vals[1] + vals[2];
    if !(total > T::zero()) {
        return None;
    }
    let mut n = vecs[0].try_normalize()?;
    if n.dot(viewpoint - at) < T::zero() {
        n = -n;
    }
    Some((n, vals[0] / total))
}
