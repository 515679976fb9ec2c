//! The point-cloud container and the axis-aligned box used for cropping and
//! spatial bounds.

use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::scalar::Real;
use crate::transform::RigidTransform;

/// Label written for points that belong to no cluster.
pub const NOISE_LABEL: i64 = -1;

/// Axis-aligned box with `min ≤ max` componentwise. Containment is inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    min: Point3<T>,
    max: Point3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Point3<T>, max: Point3<T>) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::InvalidCloud("box corners must be finite".into()));
        }
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::InvalidCloud("box min exceeds max".into()));
        }
        Ok(Self { min, max })
    }

    /// Tight bounds of a point set; `None` when empty.
    pub fn from_points(points: &[Point3<T>]) -> Option<Self> {
        let first = *points.first()?;
        let (min, max) = points
            .iter()
            .fold((first, first), |(lo, hi), p| (lo.component_min(*p), hi.component_max(*p)));
        Some(Self { min, max })
    }

    pub fn min(&self) -> Point3<T> {
        self.min
    }

    pub fn max(&self) -> Point3<T> {
        self.max
    }

    pub fn center(&self) -> Point3<T> {
        (self.min + self.max) * T::lit(0.5)
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    #[inline]
    pub fn contains(&self, p: Point3<T>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y && p.z >= self.min.z && p.z <= self.max.z
    }

    /// Squared distance from `p` to the closest point of the box (0 inside).
    #[inline]
    pub fn distance_squared(&self, p: Point3<T>) -> T {
        let c = p.component_max(self.min).component_min(self.max);
        (p - c).norm_squared()
    }

    /// Squared distance from `p` to the farthest corner of the box.
    #[inline]
    pub fn max_distance_squared(&self, p: Point3<T>) -> T {
        let dx = (p.x - self.min.x).abs().max((p.x - self.max.x).abs());
        let dy = (p.y - self.min.y).abs().max((p.y - self.max.y).abs());
        let dz = (p.z - self.min.z).abs().max((p.z - self.max.z).abs());
        dx * dx + dy * dy + dz * dz
    }
}

/// An ordered set of points with optional parallel channels.
///
/// Normals and curvatures carry an explicit validity flag (`None` = not
/// estimable) instead of NaN. Labels use [`NOISE_LABEL`] for unclustered
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point3<T>>,
    normals: Option<Vec<Option<Vec3<T>>>>,
    curvatures: Option<Vec<Option<T>>>,
    labels: Option<Vec<i64>>,
}

impl<T: Real> Default for PointCloud<T> {
    fn default() -> Self {
        Self::from_trusted(Vec::new())
    }
}

impl<T: Real> PointCloud<T> {
    /// Rejects any non-finite coordinate.
    pub fn new(points: Vec<Point3<T>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self::from_trusted(points))
    }

    /// For points produced by finite arithmetic on an already validated cloud.
    pub(crate) fn from_trusted(points: Vec<Point3<T>>) -> Self {
        debug_assert!(points.iter().all(|p| p.is_finite()));
        Self {
            points,
            normals: None,
            curvatures: None,
            labels: None,
        }
    }

    pub fn with_normals(mut self, normals: Vec<Option<Vec3<T>>>) -> Result<Self> {
        self.check_len("normals", normals.len())?;
        let tol = T::lit(1e-6).max(T::epsilon() * T::lit(16.0));
        for (i, n) in normals.iter().enumerate() {
            if let Some(n) = n {
                if !n.is_finite() || (n.norm() - T::one()).abs() > tol {
                    return Err(Error::InvalidCloud(format!("normal {i} is not unit length")));
                }
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_curvatures(mut self, curvatures: Vec<Option<T>>) -> Result<Self> {
        self.check_len("curvatures", curvatures.len())?;
        for (i, c) in curvatures.iter().enumerate() {
            if let Some(c) = c {
                if !(*c >= T::zero() && *c <= T::one()) {
                    return Err(Error::InvalidCloud(format!("curvature {i} outside [0, 1]")));
                }
            }
        }
        self.curvatures = Some(curvatures);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        self.check_len("labels", labels.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{what} channel has {len} entries for {} points",
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> Point3<T> {
        self.points[i]
    }

    pub fn normals(&self) -> Option<&[Option<Vec3<T>>]> {
        self.normals.as_deref()
    }

    pub fn curvatures(&self) -> Option<&[Option<T>]> {
        self.curvatures.as_deref()
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub fn bounds(&self) -> Option<Aabb<T>> {
        Aabb::from_points(&self.points)
    }

    /// Sub-cloud of the given indices, in the given order, carrying every
    /// present channel.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            curvatures: self.curvatures.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.cast()).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| n.and_then(|n| n.cast::<U>().try_normalize())).collect()),
            curvatures: self
                .curvatures
                .as_ref()
                .map(|cs| cs.iter().map(|c| c.map(|c| U::lit(c.to_f64_lossy()))).collect()),
            labels: self.labels.clone(),
        }
    }
}

/// Arithmetic mean of a non-empty point slice.
pub fn centroid_of<T: Real>(points: &[Point3<T>]) -> Option<Point3<T>> {
    if points.is_empty() {
        return None;
    }
    let mut sum = Vec3::zero();
    for p in points {
        sum += *p;
    }
    Some(sum / T::from_count(points.len()))
}

/// Componentwise mean of the cloud's points.
pub fn centroid<T: Real>(cloud: &PointCloud<T>) -> Result<Point3<T>> {
    centroid_of(cloud.points()).ok_or(Error::EmptyInput)
}

/// Applies `t` to every point and rotates normals; other channels are
/// carried over unchanged.
pub fn apply_transform<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(*p)).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| n.map(|n| t.apply_vector(n))).collect()),
        curvatures: cloud.curvatures.clone(),
        labels: cloud.labels.clone(),
    }
}
