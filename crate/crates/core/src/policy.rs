//! Grasp ordering by Grasp Risk Score, grasp point and gripper pose
//! selection, and the scene-change check between frames.
//!
//! The score is maximized: high, tilted objects with open surroundings and
//! no load-bearing contact are picked first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{apply_transform, PointCloud};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::octree::Octree;
use crate::register::principal_frame_of;
use crate::scalar::Real;
use crate::transform::RigidTransform;

const TREE_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams<T> {
    pub alpha: T,
    pub beta: T,
    pub k1: T,
    pub k2: T,
    pub k3: T,
    /// Weight of the clearance term in the grasp-point objective; negative
    /// values favor points far from other objects.
    pub k4: T,
    /// Number of neighboring objects in the clearance score.
    pub k_neighbors: usize,
    /// Overlap point count above which an object counts as load-bearing.
    pub overlap_threshold: usize,
    pub overlap_delta: T,
    pub change_tau: T,
    /// Clearance score of an object with no neighbors (m²).
    pub clearance_cap: T,
    pub grasp_samples: usize,
    pub gripper_margin: T,
    pub gripper_max: T,
    /// Unit vector pointing away from gravity in the cloud's frame. The
    /// default suits a camera looking straight down (optical frame, +z into
    /// the bin).
    pub up: Vec3<T>,
}

impl<T: Real> Default for PolicyParams<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            beta: T::one(),
            k1: T::one(),
            k2: T::lit(0.5),
            k3: T::one(),
            k4: T::lit(-0.5),
            k_neighbors: 3,
            overlap_threshold: 30,
            overlap_delta: T::lit(0.003),
            change_tau: T::lit(0.005),
            clearance_cap: T::one(),
            grasp_samples: 101,
            gripper_margin: T::lit(0.01),
            gripper_max: T::lit(0.12),
            up: -Vec3::unit_z(),
        }
    }
}

impl<T: Real> PolicyParams<T> {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
            ("clearance_cap", self.clearance_cap),
            ("gripper_margin", self.gripper_margin),
        ];
        for (name, w) in weights {
            if !w.is_finite() {
                return Err(invalid_param(name, "must be finite"));
            }
        }
        if self.k_neighbors < 1 {
            return Err(invalid_param("k_neighbors", "must be at least 1"));
        }
        for (name, v) in [
            ("overlap_delta", self.overlap_delta),
            ("change_tau", self.change_tau),
            ("gripper_max", self.gripper_max),
        ] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(invalid_param(name, "must be positive"));
            }
        }
        if self.grasp_samples < 2 {
            return Err(invalid_param("grasp_samples", "must be at least 2"));
        }
        if !((self.up.norm() - T::one()).abs() < T::lit(1e-6)) {
            return Err(invalid_param("up", "must be a unit vector"));
        }
        Ok(())
    }
}

/// Principal axis as a segment through the centroid; `start` is the lower end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAxis<T> {
    pub direction: Vec3<T>,
    pub start: Point3<T>,
    pub end: Point3<T>,
}

impl<T: Real> PrincipalAxis<T> {
    pub fn length(&self) -> T {
        self.start.distance(self.end)
    }

    pub fn at(&self, t: T) -> Point3<T> {
        self.start + (self.end - self.start) * t
    }
}

/// One object as seen by the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState<T> {
    pub id: usize,
    /// Barycenter of `template_posed`.
    pub centroid: Point3<T>,
    /// Template → scene; `None` when registration failed.
    pub pose: Option<RigidTransform<T>>,
    /// The posed template, or the raw cluster when `degraded`.
    pub template_posed: PointCloud<T>,
    pub axis: PrincipalAxis<T>,
    /// Angle of the axis above the horizontal plane, in `[0, π/2]`.
    pub theta: T,
    /// Extent along the second principal axis.
    pub width_extent: T,
    pub degraded: bool,
}

impl<T: Real> ObjectState<T> {
    pub fn from_registration(id: usize, template: &PointCloud<T>, pose: RigidTransform<T>, up: Vec3<T>) -> Result<Self> {
        let posed = apply_transform(template, &pose);
        let mut s = Self::from_cloud(id, posed, up)?;
        s.pose = Some(pose);
        Ok(s)
    }

    /// Builds the state straight from observed cluster points.
    pub fn from_cluster(id: usize, cluster: PointCloud<T>, up: Vec3<T>) -> Result<Self> {
        let mut s = Self::from_cloud(id, cluster, up)?;
        s.degraded = true;
        Ok(s)
    }

    fn from_cloud(id: usize, cloud: PointCloud<T>, up: Vec3<T>) -> Result<Self> {
        let frame = principal_frame_of(cloud.points())?;
        let c = frame.origin;
        let mut d = frame.axes[0];
        let h = d.dot(up);
        if h < T::zero() || (h == T::zero() && (d.x, d.y, d.z) < (T::zero(), T::zero(), T::zero())) {
            d = -d;
        }
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        let (mut lo2, mut hi2) = (T::infinity(), T::neg_infinity());
        for p in cloud.points() {
            let r = *p - c;
            let t = r.dot(d);
            lo = lo.min(t);
            hi = hi.max(t);
            let s = r.dot(frame.axes[1]);
            lo2 = lo2.min(s);
            hi2 = hi2.max(s);
        }
        let theta = d.dot(up).abs().min(T::one()).asin();
        Ok(Self {
            id,
            centroid: c,
            pose: None,
            template_posed: cloud,
            axis: PrincipalAxis {
                direction: d,
                start: c + d * lo,
                end: c + d * hi,
            },
            theta,
            width_extent: hi2 - lo2,
            degraded: false,
        })
    }
}

/// Objects with spatial indexes over their centroids and posed templates.
pub struct PolicyScene<T> {
    objects: Vec<ObjectState<T>>,
    centroid_tree: Option<Octree<T>>,
    template_trees: Vec<Octree<T>>,
}

impl<T: Real> PolicyScene<T> {
    pub fn new(objects: Vec<ObjectState<T>>) -> Result<Self> {
        let centroids: Vec<_> = objects.iter().map(|o| o.centroid).collect();
        let centroid_tree = if centroids.is_empty() {
            None
        } else {
            Some(Octree::from_points(&centroids, TREE_DEPTH)?)
        };
        let template_trees = objects
            .par_iter()
            .map(|o| Octree::build(&o.template_posed, TREE_DEPTH))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            objects,
            centroid_tree,
            template_trees,
        })
    }

    pub fn objects(&self) -> &[ObjectState<T>] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Lowest and highest centroid height.
    pub fn height_range(&self, up: Vec3<T>) -> (T, T) {
        self.objects.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), o| {
            let z = o.centroid.dot(up);
            (lo.min(z), hi.max(z))
        })
    }

    /// Distance from `p` to the nearest template point of any object other
    /// than `skip`; `None` when there is no other object.
    pub fn clearance(&self, p: Point3<T>, skip: usize) -> Option<T> {
        self.template_trees
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != skip)
            .map(|(_, t)| t.nearest(p).1)
            .reduce(T::min)
    }

    /// Template points of object `i` within `overlap_delta` of another
    /// object's template.
    pub fn overlap_count(&self, i: usize, delta: T) -> usize {
        self.objects[i]
            .template_posed
            .points()
            .iter()
            .filter(|&&p| {
                self.template_trees
                    .iter()
                    .enumerate()
                    .any(|(j, t)| j != i && t.any_within(p, delta))
            })
            .count()
    }
}

/// Stability term: normalized height plus tilt.
pub fn p_self<T: Real>(obj: &ObjectState<T>, height_range: (T, T), params: &PolicyParams<T>) -> T {
    let (lo, hi) = height_range;
    let z_hat = if hi > lo {
        (obj.centroid.dot(params.up) - lo) / (hi - lo)
    } else {
        T::one()
    };
    params.k1 * z_hat + params.k2 * obj.theta.sin()
}

/// Clearance term: mean squared distance to the nearest other centroids.
pub fn p_grasp<T: Real>(scene: &PolicyScene<T>, i: usize, params: &PolicyParams<T>) -> T {
    let n = scene.len();
    if n < 2 {
        return params.clearance_cap;
    }
    let k = params.k_neighbors.min(n - 1);
    let tree = scene.centroid_tree.as_ref().expect("non-empty scene");
    let near: Vec<T> = tree
        .knn_with_distances(scene.objects[i].centroid, k + 1)
        .into_iter()
        .filter(|&(_, j)| j != i)
        .take(k)
        .map(|(d2, _)| d2)
        .collect();
    near.iter().copied().sum::<T>() / T::from_count(k)
}

/// 0 when the object's template overlaps others in more than
/// `overlap_threshold` points, else 1.
pub fn p_system<T: Real>(scene: &PolicyScene<T>, i: usize, params: &PolicyParams<T>) -> T {
    if scene.overlap_count(i, params.overlap_delta) > params.overlap_threshold {
        T::zero()
    } else {
        T::one()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredObject<T> {
    pub id: usize,
    pub p_self: T,
    pub p_grasp: T,
    pub p_system: T,
    pub grs: T,
    pub overlap_count: usize,
    pub degraded: bool,
}

impl<T: Real> ScoredObject<T> {
    pub fn base_score(&self, params: &PolicyParams<T>) -> T {
        params.alpha * self.p_self + params.beta * self.p_grasp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<T> {
    /// Best first.
    pub entries: Vec<ScoredObject<T>>,
    /// Position of each entry's object in the scene.
    pub scene_index: Vec<usize>,
    /// Every object was load-bearing, so the order ignores that factor.
    pub forced: bool,
}

impl<T> Ranking<T> {
    pub fn selected_id(&self) -> usize {
        self.entries[0].id
    }
}

fn desc<T: Real>(a: T, b: T) -> std::cmp::Ordering {
    b.partial_cmp(&a).unwrap_or(std::cmp::Ordering::Equal)
}

/// Scores every object and orders them by descending score, ties by id.
pub fn grs_rank<T: Real>(scene: &PolicyScene<T>, params: &PolicyParams<T>) -> Result<Ranking<T>> {
    if scene.is_empty() {
        return Err(Error::EmptyScene);
    }
    let range = scene.height_range(params.up);
    let scored: Vec<ScoredObject<T>> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let o = &scene.objects[i];
            let overlap_count = scene.overlap_count(i, params.overlap_delta);
            let p_system = if overlap_count > params.overlap_threshold {
                T::zero()
            } else {
                T::one()
            };
            let ps = p_self(o, range, params);
            let pg = p_grasp(scene, i, params);
            ScoredObject {
                id: o.id,
                p_self: ps,
                p_grasp: pg,
                p_system,
                grs: (params.alpha * ps + params.beta * pg) * p_system,
                overlap_count,
                degraded: o.degraded,
            }
        })
        .collect();
    let forced = scored.iter().all(|s| s.p_system == T::zero());
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scored[a], &scored[b]);
        let primary = if forced {
            desc(x.base_score(params), y.base_score(params))
        } else {
            desc(x.grs, y.grs)
                .then(desc(x.p_system, y.p_system))
                .then(desc(x.base_score(params), y.base_score(params)))
        };
        primary.then(x.id.cmp(&y.id))
    });
    Ok(Ranking {
        entries: order.iter().map(|&i| scored[i].clone()).collect(),
        scene_index: order,
        forced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint<T> {
    pub point: Point3<T>,
    /// Position along the axis segment, in `[0, 1]`.
    pub axis_param: T,
}

/// Minimizes `k3·de + k4·dn` over uniform samples of the object's axis,
/// where `de` is the distance to the centroid and `dn` the clearance to the
/// other objects' templates.
pub fn grasp_point<T: Real>(scene: &PolicyScene<T>, i: usize, params: &PolicyParams<T>) -> GraspPoint<T> {
    let o = &scene.objects[i];
    if !(o.axis.length() > T::zero()) {
        let t = T::lit(0.5);
        return GraspPoint {
            point: o.centroid,
            axis_param: t,
        };
    }
    let denom = T::from_count(params.grasp_samples - 1);
    let mut best: Option<(T, usize)> = None;
    for k in 0..params.grasp_samples {
        let x = o.axis.at(T::from_count(k) / denom);
        let mut f = params.k3 * x.distance(o.centroid);
        if let Some(dn) = scene.clearance(x, i) {
            f += params.k4 * dn;
        }
        if best.is_none_or(|(b, _)| f < b) {
            best = Some((f, k));
        }
    }
    let k = best.expect("at least two samples").1;
    let t = T::from_count(k) / denom;
    GraspPoint {
        point: o.axis.at(t),
        axis_param: t,
    }
}

/// Orthonormal pair spanning the plane perpendicular to `up`.
pub fn horizontal_basis<T: Real>(up: Vec3<T>) -> (Vec3<T>, Vec3<T>) {
    let seed = if up.x.abs() < T::lit(0.9) { Vec3::unit_x() } else { Vec3::unit_y() };
    let e1 = (seed - up * seed.dot(up)).try_normalize().expect("non-parallel seed");
    (e1, up.cross(e1))
}

/// Approach yaw in `[0, π)` perpendicular to the horizontal projection of the
/// axis, and gripper opening.
pub fn grasp_pose<T: Real>(obj: &ObjectState<T>, params: &PolicyParams<T>) -> (T, T) {
    let up = params.up;
    let d = obj.axis.direction;
    let h = d - up * d.dot(up);
    let yaw = if h.norm() < T::lit(1e-9) {
        T::zero()
    } else {
        let (e1, e2) = horizontal_basis(up);
        let perp = up.cross(h);
        let mut a = perp.dot(e2).atan2(perp.dot(e1));
        if a < T::zero() {
            a += T::PI();
        }
        if a >= T::PI() {
            a -= T::PI();
        }
        a
    };
    let width = (obj.width_extent + params.gripper_margin).min(params.gripper_max);
    (yaw, width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneChange<T> {
    pub changed: bool,
    pub max_displacement: T,
    /// Matched `(previous, current)` index pairs.
    pub matches: Vec<(usize, usize)>,
}

/// Compares centroid sets by greedy one-to-one matching in ascending
/// distance.
pub fn scene_changed<T: Real>(prev: &[Point3<T>], curr: &[Point3<T>], change_tau: T) -> SceneChange<T> {
    let mut pairs: Vec<(T, usize, usize)> = Vec::with_capacity(prev.len() * curr.len());
    for (i, p) in prev.iter().enumerate() {
        for (j, c) in curr.iter().enumerate() {
            pairs.push((p.distance(*c), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; prev.len()];
    let mut used_c = vec![false; curr.len()];
    let mut max_d = T::zero();
    let mut matches = Vec::with_capacity(prev.len().min(curr.len()));
    for (d, i, j) in pairs {
        if !used_p[i] && !used_c[j] {
            used_p[i] = true;
            used_c[j] = true;
            max_d = max_d.max(d);
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    SceneChange {
        changed: prev.len() != curr.len() || max_d > change_tau,
        max_displacement: max_d,
        matches,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspPlan<T> {
    pub ranking: Ranking<T>,
    pub selected_id: usize,
    pub grasp: GraspPoint<T>,
    pub yaw: T,
    pub width: T,
}

/// Ranks the objects and computes the grasp for the best one.
pub fn plan_grasp<T: Real>(scene: &PolicyScene<T>, params: &PolicyParams<T>) -> Result<GraspPlan<T>> {
    params.validate()?;
    let ranking = grs_rank(scene, params)?;
    let i = ranking.scene_index[0];
    let grasp = grasp_point(scene, i, params);
    let (yaw, width) = grasp_pose(&scene.objects[i], params);
    Ok(GraspPlan {
        selected_id: ranking.selected_id(),
        ranking,
        grasp,
        yaw,
        width,
    })
}
