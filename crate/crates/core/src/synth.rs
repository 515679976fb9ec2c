//! Synthetic bin scenes with ground truth.
//!
//! Primitive objects are dropped into a bin, then rendered by a single
//! pinhole camera looking straight down. Everything lives in the camera's
//! optical frame: the camera sits at the origin, +z points into the bin and
//! the floor is the plane `z = floor_distance`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, NOISE_LABEL};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{Mat3, Point3, Vec3};
use crate::preprocess::{DepthImage, Intrinsics};
use crate::transform::RigidTransform;

type V = Vec3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cylinder,
    Box,
    ThreeWayPipe,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cylinder => "cylinder",
            Self::Box => "box",
            Self::ThreeWayPipe => "three_way_pipe",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cylinder" => Ok(Self::Cylinder),
            "box" => Ok(Self::Box),
            "three_way_pipe" | "pipe" => Ok(Self::ThreeWayPipe),
            _ => Err(invalid_param("kind", format!("unknown shape `{s}`"))),
        }
    }
}

/// Solid primitives in their own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis along local x, centered at the origin.
    Cylinder { radius: f64, half_length: f64 },
    Box { half_extents: [f64; 3] },
    /// A tee: one pipe along x from `-arm_neg_x` to `arm_pos_x` and a branch
    /// from the origin to `arm_y` along +y, all of the same radius.
    ThreeWayPipe {
        radius: f64,
        arm_pos_x: f64,
        arm_neg_x: f64,
        arm_y: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct CappedCylinder {
    center: V,
    axis: V,
    half_length: f64,
    radius: f64,
}

impl CappedCylinder {
    fn sdf(&self, p: V) -> f64 {
        let r = p - self.center;
        let x = r.dot(self.axis);
        let radial = (r - self.axis * x).norm();
        let q0 = radial - self.radius;
        let q1 = x.abs() - self.half_length;
        q0.max(q1).min(0.0) + (q0.max(0.0).powi(2) + q1.max(0.0).powi(2)).sqrt()
    }

    fn ray(&self, o: V, d: V) -> Option<f64> {
        let oc = o - self.center;
        let (dpar, opar) = (d.dot(self.axis), oc.dot(self.axis));
        let dperp = d - self.axis * dpar;
        let operp = oc - self.axis * opar;
        let a = dperp.norm_squared();
        let b = 2.0 * operp.dot(dperp);
        let c = operp.norm_squared() - self.radius * self.radius;
        let mut best = f64::INFINITY;
        if a > 1e-300 {
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let s = disc.sqrt();
                for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                    if t > 0.0 && (opar + t * dpar).abs() <= self.half_length {
                        best = best.min(t);
                    }
                }
            }
        }
        if dpar != 0.0 {
            for cap in [self.half_length, -self.half_length] {
                let t = (cap - opar) / dpar;
                if t > 0.0 && (operp + dperp * t).norm_squared() <= self.radius * self.radius {
                    best = best.min(t);
                }
            }
        }
        best.is_finite().then_some(best)
    }

    /// Grid samples of the closed surface with outward normals.
    fn sample(&self, spacing: f64, out: &mut Vec<(V, V)>) {
        let a = self.axis;
        let u = a.any_orthogonal().try_normalize().expect("unit axis");
        let w = a.cross(u);
        let (r, h) = (self.radius, self.half_length);
        let n_t = ((std::f64::consts::TAU * r / spacing).ceil() as usize).max(3);
        let n_x = ((2.0 * h / spacing).ceil() as usize).max(1);
        for j in 0..n_x {
            let x = -h + (j as f64 + 0.5) * 2.0 * h / n_x as f64;
            for k in 0..n_t {
                let phi = (k as f64 + 0.5) * std::f64::consts::TAU / n_t as f64;
                let n = u * phi.cos() + w * phi.sin();
                out.push((self.center + a * x + n * r, n));
            }
        }
        let n_r = ((r / spacing).ceil() as usize).max(1);
        for side in [1.0, -1.0] {
            let c = self.center + a * (side * h);
            out.push((c, a * side));
            for m in 1..=n_r {
                let rho = r * m as f64 / n_r as f64;
                let n_p = ((std::f64::consts::TAU * rho / spacing).ceil() as usize).max(3);
                for k in 0..n_p {
                    let phi = (k as f64 + 0.5) * std::f64::consts::TAU / n_p as f64;
                    out.push((c + (u * phi.cos() + w * phi.sin()) * rho, a * side));
                }
            }
        }
    }
}

fn box_sdf(e: [f64; 3], p: V) -> f64 {
    let q = V::new(p.x.abs() - e[0], p.y.abs() - e[1], p.z.abs() - e[2]);
    V::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm() + q.x.max(q.y).max(q.z).min(0.0)
}

fn box_ray(e: [f64; 3], o: V, d: V) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > e[i] {
                return None;
            }
            continue;
        }
        let a = (-e[i] - o[i]) / d[i];
        let b = (e[i] - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 || t1 <= 0.0 {
        return None;
    }
    Some(if t0 > 0.0 { t0 } else { t1 })
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::ThreeWayPipe { .. } => ShapeKind::ThreeWayPipe,
        }
    }

    /// Default-sized instance of `kind` scaled by `scale`.
    pub fn standard(kind: ShapeKind, scale: f64) -> Self {
        match kind {
            ShapeKind::Cylinder => Shape::Cylinder {
                radius: 0.02 * scale,
                half_length: 0.06 * scale,
            },
            ShapeKind::Box => Shape::Box {
                half_extents: [0.05 * scale, 0.03 * scale, 0.02 * scale],
            },
            ShapeKind::ThreeWayPipe => Shape::ThreeWayPipe {
                radius: 0.015 * scale,
                arm_pos_x: 0.065 * scale,
                arm_neg_x: 0.04 * scale,
                arm_y: 0.055 * scale,
            },
        }
    }

    fn pipe_parts(radius: f64, arm_pos_x: f64, arm_neg_x: f64, arm_y: f64) -> [CappedCylinder; 2] {
        [
            CappedCylinder {
                center: V::new((arm_pos_x - arm_neg_x) / 2.0, 0.0, 0.0),
                axis: V::unit_x(),
                half_length: (arm_pos_x + arm_neg_x) / 2.0,
                radius,
            },
            CappedCylinder {
                center: V::new(0.0, arm_y / 2.0, 0.0),
                axis: V::unit_y(),
                half_length: arm_y / 2.0,
                radius,
            },
        ]
    }

    /// Signed distance in the shape frame (negative inside).
    pub fn sdf(&self, p: Point3<f64>) -> f64 {
        match *self {
            Shape::Cylinder { radius, half_length } => CappedCylinder {
                center: V::zero(),
                axis: V::unit_x(),
                half_length,
                radius,
            }
            .sdf(p),
            Shape::Box { half_extents } => box_sdf(half_extents, p),
            Shape::ThreeWayPipe {
                radius,
                arm_pos_x,
                arm_neg_x,
                arm_y,
            } => Self::pipe_parts(radius, arm_pos_x, arm_neg_x, arm_y)
                .iter()
                .map(|c| c.sdf(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// First hit parameter `t > 0` of the ray `o + t·d` in the shape frame.
    pub fn ray(&self, o: Point3<f64>, d: Vec3<f64>) -> Option<f64> {
        match *self {
            Shape::Cylinder { radius, half_length } => CappedCylinder {
                center: V::zero(),
                axis: V::unit_x(),
                half_length,
                radius,
            }
            .ray(o, d),
            Shape::Box { half_extents } => box_ray(half_extents, o, d),
            Shape::ThreeWayPipe {
                radius,
                arm_pos_x,
                arm_neg_x,
                arm_y,
            } => Self::pipe_parts(radius, arm_pos_x, arm_neg_x, arm_y)
                .iter()
                .filter_map(|c| c.ray(o, d))
                .reduce(f64::min),
        }
    }

    /// Outward unit normal at a surface point (central differences of the
    /// distance field).
    pub fn normal(&self, p: Point3<f64>) -> Vec3<f64> {
        let h = 1e-7;
        let g = |d: V| self.sdf(p + d) - self.sdf(p - d);
        V::new(g(V::unit_x() * h), g(V::unit_y() * h), g(V::unit_z() * h))
            .try_normalize()
            .unwrap_or(V::unit_z())
    }

    /// Radius of a sphere about the shape origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Cylinder { radius, half_length } => radius.hypot(half_length),
            Shape::Box { half_extents: [a, b, c] } => (a * a + b * b + c * c).sqrt(),
            Shape::ThreeWayPipe {
                radius,
                arm_pos_x,
                arm_neg_x,
                arm_y,
            } => arm_pos_x.max(arm_neg_x).max(arm_y).hypot(radius),
        }
    }

    /// Deterministic surface samples with outward unit normals, roughly
    /// `spacing` apart.
    pub fn surface_samples(&self, spacing: f64) -> Vec<(Point3<f64>, Vec3<f64>)> {
        let mut out = Vec::new();
        match *self {
            Shape::Cylinder { radius, half_length } => CappedCylinder {
                center: V::zero(),
                axis: V::unit_x(),
                half_length,
                radius,
            }
            .sample(spacing, &mut out),
            Shape::Box { half_extents: e } => {
                for axis in 0..3 {
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let nu = ((2.0 * e[u] / spacing).ceil() as usize).max(1);
                    let nv = ((2.0 * e[v] / spacing).ceil() as usize).max(1);
                    for side in [1.0, -1.0] {
                        let mut n = [0.0; 3];
                        n[axis] = side;
                        for i in 0..nu {
                            for j in 0..nv {
                                let mut p = [0.0; 3];
                                p[axis] = side * e[axis];
                                p[u] = -e[u] + (i as f64 + 0.5) * 2.0 * e[u] / nu as f64;
                                p[v] = -e[v] + (j as f64 + 0.5) * 2.0 * e[v] / nv as f64;
                                out.push((V::from_array(p), V::from_array(n)));
                            }
                        }
                    }
                }
            }
            Shape::ThreeWayPipe {
                radius,
                arm_pos_x,
                arm_neg_x,
                arm_y,
            } => {
                let parts = Self::pipe_parts(radius, arm_pos_x, arm_neg_x, arm_y);
                for (k, part) in parts.iter().enumerate() {
                    let mut own = Vec::new();
                    part.sample(spacing, &mut own);
                    let other = &parts[1 - k];
                    out.extend(own.into_iter().filter(|(p, _)| other.sdf(*p) >= -1e-9));
                }
            }
        }
        out
    }

    /// The surface samples as a cloud with normals.
    pub fn template(&self, spacing: f64) -> PointCloud<f64> {
        let (pts, normals): (Vec<_>, Vec<_>) = self.surface_samples(spacing).into_iter().unzip();
        PointCloud::new(pts)
            .and_then(|c| c.with_normals(normals.into_iter().map(Some).collect()))
            .expect("finite unit samples")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Distance from the camera to the bin floor along the optical axis.
    pub floor_distance: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            width: 640,
            height: 640,
            fx: 1000.0,
            fy: 1000.0,
            cx: 319.5,
            cy: 319.5,
            floor_distance: 1.0,
        }
    }
}

impl Camera {
    pub fn intrinsics(&self) -> Intrinsics<f64> {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// Ray through pixel `(u, v)`, scaled so that its z component is 1.
    pub fn ray(&self, u: usize, v: usize) -> Vec3<f64> {
        V::new((u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Objects dropped over a disk whose radius shrinks as `tightness` goes
    /// from 0 to 1, so they land on each other.
    Pile { tightness: f64 },
    /// Objects lying on the floor anywhere in view, at least `gap` apart.
    Separated { gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub count: usize,
    /// Shape of each object is drawn uniformly from this list.
    pub kinds: Vec<ShapeKind>,
    pub layout: Layout,
    /// Standard deviation of depth noise, meters.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Objects are scaled by a factor drawn from `[1 - j, 1 + j]`.
    pub size_jitter: f64,
    /// Largest tilt away from lying flat, radians.
    pub max_tilt: f64,
    /// Surfaces seen at a larger angle from their normal give no return
    /// (radians).
    pub max_incidence: f64,
    pub camera: Camera,
    /// Placement attempts per object before giving up.
    pub retry_budget: usize,
    /// Sample spacing of the templates used for collision checks.
    pub template_spacing: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            count: 6,
            kinds: vec![ShapeKind::Cylinder, ShapeKind::Box, ShapeKind::ThreeWayPipe],
            layout: Layout::Pile { tightness: 0.5 },
            noise_sigma: 0.0005,
            seed: 0,
            size_jitter: 0.0,
            max_tilt: 0.35,
            max_incidence: 75f64.to_radians(),
            camera: Camera::default(),
            retry_budget: 200,
            template_spacing: 0.002,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(invalid_param("count", "must be at least 1"));
        }
        if self.kinds.is_empty() {
            return Err(invalid_param("kinds", "must not be empty"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid_param("noise_sigma", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(invalid_param("size_jitter", "must lie in [0, 1)"));
        }
        if !(self.max_incidence > 0.0 && self.max_incidence <= std::f64::consts::FRAC_PI_2) {
            return Err(invalid_param("max_incidence", "must lie in (0, π/2]"));
        }
        if !(self.template_spacing > 0.0) {
            return Err(invalid_param("template_spacing", "must be positive"));
        }
        match self.layout {
            Layout::Pile { tightness } if !(0.0..=1.0).contains(&tightness) => {
                return Err(invalid_param("layout.tightness", "must lie in [0, 1]"))
            }
            Layout::Separated { gap } if !(gap > 0.0) => return Err(invalid_param("layout.gap", "must be positive")),
            _ => {}
        }
        let c = &self.camera;
        if c.width == 0 || c.height == 0 || !(c.fx > 0.0 && c.fy > 0.0 && c.floor_distance > 0.0) {
            return Err(invalid_param("camera", "needs a positive size, focal length and floor distance"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Shape frame → camera frame.
    pub pose: RigidTransform<f64>,
}

impl SceneObject {
    /// Signed distance of a camera-frame point.
    pub fn sdf(&self, p: Point3<f64>) -> f64 {
        self.shape.sdf(self.pose.inverse().apply_point(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Visible points labeled by object index, floor points by
    /// [`NOISE_LABEL`].
    pub cloud: PointCloud<f64>,
    pub objects: Vec<SceneObject>,
    /// Per-pixel depth (0 = no return), row-major.
    pub depths: Vec<f64>,
    pub spec: SceneSpec,
}

impl SyntheticScene {
    pub fn depth_image(&self) -> DepthImage<f64> {
        DepthImage::new(
            self.spec.camera.width,
            self.spec.camera.height,
            self.depths.clone(),
            self.spec.camera.intrinsics(),
        )
        .expect("rendered depths are valid")
    }

    pub fn labels(&self) -> &[i64] {
        self.cloud.labels().expect("synthetic clouds are labeled")
    }
}

/// Objects must stay at least this far in front of the camera.
const NEAR_PLANE: f64 = 0.05;

struct Placed {
    object: SceneObject,
    inverse: RigidTransform<f64>,
    samples: Vec<V>,
    center: V,
    radius: f64,
}

fn collides(shape: &Shape, pose: &RigidTransform<f64>, local: &[V], floor: f64, placed: &[Placed]) -> bool {
    let center = pose.translation();
    let radius = shape.bounding_radius();
    let inverse = pose.inverse();
    for p in local.iter().map(|q| pose.apply_point(*q)) {
        if p.z > floor {
            return true;
        }
    }
    for other in placed {
        if center.distance(other.center) > radius + other.radius {
            continue;
        }
        for q in local {
            let p = pose.apply_point(*q);
            if p.distance(other.center) <= other.radius && other.object.shape.sdf(other.inverse.apply_point(p)) < 0.0 {
                return true;
            }
        }
        for p in &other.samples {
            if p.distance(center) <= radius && shape.sdf(inverse.apply_point(*p)) < 0.0 {
                return true;
            }
        }
    }
    false
}

/// Whether `p` projects inside the image with a small margin.
fn in_view(cam: &Camera, p: V) -> bool {
    const MARGIN: f64 = 4.0;
    if p.z <= 0.0 {
        return false;
    }
    let u = cam.fx * p.x / p.z + cam.cx;
    let v = cam.fy * p.y / p.z + cam.cy;
    (MARGIN..=cam.width as f64 - 1.0 - MARGIN).contains(&u) && (MARGIN..=cam.height as f64 - 1.0 - MARGIN).contains(&v)
}

/// Lowers the object along +z from its start pose until the next step would
/// collide. `None` if it collides immediately.
fn drop_object(
    shape: &Shape,
    rotation: Mat3<f64>,
    xy: (f64, f64),
    start_z: f64,
    local: &[V],
    floor: f64,
    placed: &[Placed],
) -> Option<RigidTransform<f64>> {
    let pose_at = |z: f64| RigidTransform::from_parts(rotation, V::new(xy.0, xy.1, z));
    if collides(shape, &pose_at(start_z), local, floor, placed) {
        return None;
    }
    let mut z = start_z;
    for step in [0.005, 0.0005] {
        while !collides(shape, &pose_at(z + step), local, floor, placed) {
            z += step;
            if z > floor {
                return None;
            }
        }
    }
    Some(pose_at(z))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_tilt: f64) -> Mat3<f64> {
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = if max_tilt > 0.0 { rng.random_range(-max_tilt..=max_tilt) } else { 0.0 };
    let flip = rng.random_bool(0.5);
    let base = if flip {
        Mat3::from_axis_angle(V::unit_x(), std::f64::consts::PI)
    } else {
        Mat3::identity()
    };
    let tilt_axis = V::new(tilt_dir.cos(), tilt_dir.sin(), 0.0);
    Mat3::from_axis_angle(tilt_axis, tilt)
        .mul_mat(&Mat3::from_axis_angle(V::unit_z(), yaw))
        .mul_mat(&base)
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let floor = spec.camera.floor_distance;
    let shapes: Vec<Shape> = (0..spec.count)
        .map(|_| {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            let scale = if spec.size_jitter > 0.0 {
                rng.random_range(1.0 - spec.size_jitter..=1.0 + spec.size_jitter)
            } else {
                1.0
            };
            Shape::standard(kind, scale)
        })
        .collect();
    let mut placed: Vec<Placed> = Vec::with_capacity(spec.count);
    let cam = &spec.camera;
    let floor_half = (
        floor * cam.cx.min(cam.width as f64 - 1.0 - cam.cx) / cam.fx,
        floor * cam.cy.min(cam.height as f64 - 1.0 - cam.cy) / cam.fy,
    );
    for (i, shape) in shapes.iter().enumerate() {
        let local: Vec<V> = shape.surface_samples(spec.template_spacing).into_iter().map(|(p, _)| p).collect();
        let mut pose = None;
        for _ in 0..spec.retry_budget {
            let (rotation, xy) = match spec.layout {
                Layout::Pile { tightness } => {
                    let r_max = 0.16 + (0.06 - 0.16) * tightness;
                    let r = r_max * rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    (random_rotation(rng, spec.max_tilt), (r * a.cos(), r * a.sin()))
                }
                Layout::Separated { .. } => {
                    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
                    let x = rng.random_range(-floor_half.0..=floor_half.0);
                    let y = rng.random_range(-floor_half.1..=floor_half.1);
                    (Mat3::from_axis_angle(V::unit_z(), yaw), (x, y))
                }
            };
            let top = placed
                .iter()
                .map(|p| p.center.z - p.radius)
                .fold(floor, f64::min);
            let start_z = top - shape.bounding_radius() - 0.01;
            if start_z - shape.bounding_radius() < NEAR_PLANE {
                continue;
            }
            let Some(candidate) = drop_object(shape, rotation, xy, start_z, &local, floor, &placed) else {
                continue;
            };
            let posed: Vec<V> = local.iter().map(|q| candidate.apply_point(*q)).collect();
            if !posed.iter().all(|p| in_view(cam, *p)) {
                continue;
            }
            if let Layout::Separated { gap } = spec.layout {
                let too_close = placed.iter().any(|o| {
                    candidate.translation().distance(o.center) <= shape.bounding_radius() + o.radius + gap
                        && posed.iter().any(|p| o.object.shape.sdf(o.inverse.apply_point(*p)) < gap)
                });
                if too_close {
                    continue;
                }
            }
            pose = Some(candidate);
            break;
        }
        let pose = pose.ok_or(Error::PlacementFailure {
            object: i,
            attempts: spec.retry_budget,
        })?;
        placed.push(Placed {
            inverse: pose.inverse(),
            samples: local.iter().map(|q| pose.apply_point(*q)).collect(),
            center: pose.translation(),
            radius: shape.bounding_radius(),
            object: SceneObject { shape: *shape, pose },
        });
    }
    Ok(placed.into_iter().map(|p| p.object).collect())
}

/// Depth and object index of the first surface hit through each pixel.
/// `None` where the surface is seen at more than `max_incidence` from its
/// normal, as real sensors lose such returns.
fn render(camera: &Camera, objects: &[SceneObject], max_incidence: f64) -> Vec<Option<(f64, i64)>> {
    let cos_max = max_incidence.cos();
    let inverses: Vec<_> = objects.iter().map(|o| o.pose.inverse()).collect();
    let spheres: Vec<_> = objects.iter().map(|o| (o.pose.translation(), o.shape.bounding_radius())).collect();
    (0..camera.width * camera.height)
        .into_par_iter()
        .map(|px| {
            let (u, v) = (px % camera.width, px / camera.width);
            let d = camera.ray(u, v);
            let dn = d.norm();
            let mut best = (camera.floor_distance, NOISE_LABEL);
            let mut hit_normal = -V::unit_z();
            for (k, obj) in objects.iter().enumerate() {
                let (c, r) = spheres[k];
                // Skip objects whose bounding sphere misses the ray.
                let along = c.dot(d) / dn;
                if c.norm_squared() - along * along > r * r {
                    continue;
                }
                let inv = &inverses[k];
                let (o, dl) = (inv.apply_point(V::zero()), inv.apply_vector(d));
                if let Some(t) = obj.shape.ray(o, dl) {
                    if t < best.0 {
                        best = (t, k as i64);
                        hit_normal = obj.pose.apply_vector(obj.shape.normal(o + dl * t));
                    }
                }
            }
            (hit_normal.dot(-d) / dn >= cos_max).then_some(best)
        })
        .collect()
}

/// Generates a scene; identical specs give bit-identical scenes.
pub fn synth_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng)?;
    let hits = render(&spec.camera, &objects, spec.max_incidence);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_d397);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut points = Vec::with_capacity(hits.len());
    let mut labels = Vec::with_capacity(hits.len());
    let mut depths = Vec::with_capacity(hits.len());
    for (px, hit) in hits.into_iter().enumerate() {
        let Some((t, label)) = hit else {
            depths.push(0.0);
            continue;
        };
        let z = if spec.noise_sigma > 0.0 { t + normal.sample(&mut noise_rng) } else { t };
        let (u, v) = (px % spec.camera.width, px / spec.camera.width);
        points.push(spec.camera.ray(u, v) * z);
        labels.push(label);
        depths.push(z);
    }
    let cloud = PointCloud::new(points)?.with_labels(labels)?;
    Ok(SyntheticScene {
        cloud,
        objects,
        depths,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_lie_on_surface() {
        for kind in [ShapeKind::Cylinder, ShapeKind::Box, ShapeKind::ThreeWayPipe] {
            let s = Shape::standard(kind, 1.0);
            let samples = s.surface_samples(0.003);
            assert!(samples.len() > 500, "{kind:?}");
            for (p, n) in samples {
                assert!(s.sdf(p).abs() < 1e-9, "{kind:?} {p:?}");
                assert!((n.norm() - 1.0).abs() < 1e-12);
                assert!(p.norm() <= s.bounding_radius() + 1e-12);
            }
        }
    }

    #[test]
    fn ray_hits_agree_with_sdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ShapeKind::Cylinder, ShapeKind::Box, ShapeKind::ThreeWayPipe] {
            let s = Shape::standard(kind, 1.0);
            let mut hits = 0;
            for _ in 0..2000 {
                let o = V::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), -0.3);
                let d = V::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0);
                if let Some(t) = s.ray(o, d) {
                    hits += 1;
                    let p = o + d * t;
                    assert!(s.sdf(p).abs() < 1e-9, "{kind:?}");
                    // Nothing of the solid lies earlier along the ray.
                    for k in 1..50 {
                        assert!(s.sdf(o + d * (t * k as f64 / 50.0)) > -1e-9);
                    }
                }
            }
            assert!(hits > 100, "{kind:?}");
        }
    }

    #[test]
    fn single_object_visible_surface() {
        let spec = SceneSpec {
            count: 1,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let scene = synth_scene(&spec).unwrap();
        let obj = &scene.objects[0];
        let labels = scene.labels();
        let mut n_obj = 0;
        for (p, &l) in scene.cloud.points().iter().zip(labels) {
            if l == 0 {
                n_obj += 1;
                let local = obj.pose.inverse().apply_point(*p);
                assert!(obj.shape.sdf(local).abs() < 1e-9);
                let n = obj.pose.apply_vector(obj.shape.normal(local));
                let cos = n.dot(-*p) / p.norm();
                assert!(cos >= spec.max_incidence.cos() - 1e-6, "grazing or back-facing point");
            } else {
                assert_eq!(l, NOISE_LABEL);
                assert!((p.z - spec.camera.floor_distance).abs() < 1e-12);
            }
        }
        assert!(n_obj > 500);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            count: 4,
            seed: 9,
            ..Default::default()
        };
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&SceneSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn placement_failure_reported() {
        let spec = SceneSpec {
            count: 2,
            retry_budget: 1,
            camera: Camera {
                floor_distance: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(synth_scene(&spec), Err(Error::PlacementFailure { object: 0, .. })));
    }
}
