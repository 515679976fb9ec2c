//! End-to-end pipeline: configuration, the staged run with its scene-change
//! skip path, the plan file and the segmentation benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cloud::{Aabb, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::io::{load_cloud, CloudFormat};
use crate::metrics::adjusted_rand_index;
use crate::octree::{LinearScan, Octree};
use crate::policy::{
    grasp_point, grasp_pose, grs_rank, scene_changed, ObjectState, PolicyParams, PolicyScene, PrincipalAxis,
};
use crate::preprocess::{
    depth_to_cloud, passthrough_filter, ransac_remove_plane, read_pgm_depth, voxel_downsample, Intrinsics,
};
use crate::register::{register_all, IcpParams, RegisterParams};
use crate::segment::{segment_cloud, segment_with_search, CurvatureRule, DbscanParams, SegmentParams, Segmentation};
use crate::synth::{synth_scene, Camera, Layout, SceneSpec, ShapeKind};
use crate::transform::RigidTransform;

/// Version tag written into every plan file.
pub const PLAN_SCHEMA: &str = "binpick-plan/1";

/// Per-stage seed derived from the top-level seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // splitmix64 over the seed mixed with an FNV-1a hash of the stage name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let c = Camera::default();
        Self {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics<f64> {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(config_err("camera.width", "image size must be positive"));
        }
        for (name, v) in [("camera.fx", self.fx), ("camera.fy", self.fy)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(name, "must be positive"));
            }
        }
        for (name, v) in [("camera.cx", self.cx), ("camera.cy", self.cy)] {
            if !v.is_finite() {
                return Err(config_err(name, "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Passthrough box in the camera frame; infinite bounds disable a side.
    pub passthrough_min: [f64; 3],
    pub passthrough_max: [f64; 3],
    pub voxel_leaf: f64,
    pub plane_distance: f64,
    pub plane_iterations: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            passthrough_min: [f64::NEG_INFINITY; 3],
            passthrough_max: [f64::INFINITY; 3],
            voxel_leaf: 0.003,
            plane_distance: 0.005,
            plane_iterations: 200,
        }
    }
}

impl PreprocessConfig {
    fn bounds(&self) -> Option<Aabb<f64>> {
        let open = self.passthrough_min.iter().all(|v| *v == f64::NEG_INFINITY)
            && self.passthrough_max.iter().all(|v| *v == f64::INFINITY);
        if open {
            None
        } else {
            Aabb::new(Vec3::from_array(self.passthrough_min), Vec3::from_array(self.passthrough_max)).ok()
        }
    }

    fn validate(&self) -> Result<()> {
        for i in 0..3 {
            let (lo, hi) = (self.passthrough_min[i], self.passthrough_max[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(config_err("preprocess.passthrough_min", "must not exceed passthrough_max"));
            }
        }
        if !(self.voxel_leaf > 0.0 && self.voxel_leaf.is_finite()) {
            return Err(config_err("preprocess.voxel_leaf", "must be positive"));
        }
        if !(self.plane_distance >= 0.0 && self.plane_distance.is_finite()) {
            return Err(config_err("preprocess.plane_distance", "must be non-negative"));
        }
        if self.plane_iterations < 1 {
            return Err(config_err("preprocess.plane_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub octree_depth: usize,
    pub eps: f64,
    pub min_pts: usize,
    /// Normal angle threshold for border merging, degrees.
    pub theta_th_deg: f64,
    pub c_th: f64,
    pub curvature_rule: CurvatureRule,
    pub feature_radius: f64,
    pub min_feature_neighbors: usize,
    pub min_cluster_size: usize,
    /// Sensor position used to orient normals.
    pub viewpoint: [f64; 3],
}

impl Default for SegmentConfig {
    fn default() -> Self {
        let p = SegmentParams::<f64>::default();
        Self {
            octree_depth: p.octree_depth,
            eps: p.dbscan.eps,
            min_pts: p.dbscan.min_pts,
            theta_th_deg: p.dbscan.theta_th.to_degrees().round(),
            c_th: p.dbscan.c_th,
            curvature_rule: p.dbscan.curvature_rule,
            feature_radius: p.feature_radius,
            min_feature_neighbors: p.min_feature_neighbors,
            min_cluster_size: p.min_cluster_size,
            viewpoint: p.viewpoint.to_array(),
        }
    }
}

impl SegmentConfig {
    pub fn params(&self) -> SegmentParams<f64> {
        SegmentParams {
            dbscan: DbscanParams {
                eps: self.eps,
                min_pts: self.min_pts,
                theta_th: self.theta_th_deg.to_radians(),
                c_th: self.c_th,
                curvature_rule: self.curvature_rule,
            },
            octree_depth: self.octree_depth,
            feature_radius: self.feature_radius,
            min_feature_neighbors: self.min_feature_neighbors,
            min_cluster_size: self.min_cluster_size,
            viewpoint: Vec3::from_array(self.viewpoint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub max_iter: usize,
    pub eps_converge: f64,
    pub reject_factor: f64,
    /// Match only the template points facing `visible_from` (needs template
    /// normals).
    pub cull_hidden: bool,
    pub visible_from: [f64; 3],
    pub octree_depth: usize,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        let p = RegisterParams::<f64>::default();
        Self {
            max_iter: p.icp.max_iter,
            eps_converge: p.icp.eps_converge,
            reject_factor: p.icp.reject_factor,
            cull_hidden: true,
            visible_from: [0.0; 3],
            octree_depth: p.octree_depth,
        }
    }
}

impl RegisterConfig {
    pub fn params(&self) -> RegisterParams<f64> {
        RegisterParams {
            icp: IcpParams {
                max_iter: self.max_iter,
                eps_converge: self.eps_converge,
                reject_factor: self.reject_factor,
                visible_from: self.cull_hidden.then(|| Vec3::from_array(self.visible_from)),
            },
            octree_depth: self.octree_depth,
        }
    }

    fn validate(&self) -> Result<()> {
        self.params().icp.validate().map_err(|e| e.in_section("register"))?;
        if !(1..=crate::octree::MAX_SUPPORTED_DEPTH).contains(&self.octree_depth) {
            return Err(config_err("register.octree_depth", "must lie in [1, 21]"));
        }
        if !Vec3::from_array(self.visible_from).is_finite() {
            return Err(config_err("register.visible_from", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k_neighbors: usize,
    pub overlap_threshold: usize,
    pub overlap_delta: f64,
    pub change_tau: f64,
    pub clearance_cap: f64,
    pub grasp_samples: usize,
    pub gripper_margin: f64,
    pub gripper_max: f64,
    pub up: [f64; 3],
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let p = PolicyParams::<f64>::default();
        Self {
            alpha: p.alpha,
            beta: p.beta,
            k1: p.k1,
            k2: p.k2,
            k3: p.k3,
            k4: p.k4,
            k_neighbors: p.k_neighbors,
            overlap_threshold: p.overlap_threshold,
            overlap_delta: p.overlap_delta,
            change_tau: p.change_tau,
            clearance_cap: p.clearance_cap,
            grasp_samples: p.grasp_samples,
            gripper_margin: p.gripper_margin,
            gripper_max: p.gripper_max,
            up: p.up.to_array(),
        }
    }
}

impl PolicyConfig {
    pub fn params(&self) -> PolicyParams<f64> {
        PolicyParams {
            alpha: self.alpha,
            beta: self.beta,
            k1: self.k1,
            k2: self.k2,
            k3: self.k3,
            k4: self.k4,
            k_neighbors: self.k_neighbors,
            overlap_threshold: self.overlap_threshold,
            overlap_delta: self.overlap_delta,
            change_tau: self.change_tau,
            clearance_cap: self.clearance_cap,
            grasp_samples: self.grasp_samples,
            gripper_margin: self.gripper_margin,
            gripper_max: self.gripper_max,
            up: Vec3::from_array(self.up),
        }
    }
}

/// Scene generator settings; the seed comes from the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub kinds: Vec<ShapeKind>,
    pub layout: Layout,
    pub noise_sigma: f64,
    pub size_jitter: f64,
    pub max_tilt: f64,
    pub max_incidence_deg: f64,
    pub floor_distance: f64,
    pub retry_budget: usize,
    pub template_spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            count: s.count,
            kinds: s.kinds,
            layout: s.layout,
            noise_sigma: s.noise_sigma,
            size_jitter: s.size_jitter,
            max_tilt: s.max_tilt,
            max_incidence_deg: s.max_incidence.to_degrees().round(),
            floor_distance: s.camera.floor_distance,
            retry_budget: s.retry_budget,
            template_spacing: s.template_spacing,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, camera: &CameraConfig, seed: u64) -> SceneSpec {
        SceneSpec {
            count: self.count,
            kinds: self.kinds.clone(),
            layout: self.layout,
            noise_sigma: self.noise_sigma,
            seed,
            size_jitter: self.size_jitter,
            max_tilt: self.max_tilt,
            max_incidence: self.max_incidence_deg.to_radians(),
            camera: Camera {
                width: camera.width,
                height: camera.height,
                fx: camera.fx,
                fy: camera.fy,
                cx: camera.cx,
                cy: camera.cy,
                floor_distance: self.floor_distance,
            },
            retry_budget: self.retry_budget,
            template_spacing: self.template_spacing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Target object point counts.
    pub sizes: Vec<usize>,
    pub count: usize,
    pub tightness: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 50_000],
            count: 10,
            tightness: 0.8,
        }
    }
}

/// Every tunable of every stage. A file holding only some keys takes the
/// defaults for the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Template cloud (PLY with normals); relative paths resolve against the
    /// config file's directory. Empty means none.
    pub template: PathBuf,
    pub camera: CameraConfig,
    pub preprocess: PreprocessConfig,
    pub segment: SegmentConfig,
    pub register: RegisterConfig,
    pub policy: PolicyConfig,
    pub synth: SynthConfig,
    pub bench: BenchConfig,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl PipelineConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.to_string().trim_end()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().message().to_string();
            config_err(&path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative template path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if !cfg.template.as_os_str().is_empty() && cfg.template.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.template = dir.join(&cfg.template);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.preprocess.validate()?;
        self.segment.params().validate().map_err(|e| e.in_section("segment"))?;
        self.register.validate()?;
        self.policy.params().validate().map_err(|e| e.in_section("policy"))?;
        self.synth
            .spec(&self.camera, 0)
            .validate()
            .map_err(|e| e.in_section("synth"))?;
        if self.bench.count < 1 {
            return Err(config_err("bench.count", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.bench.tightness) {
            return Err(config_err("bench.tightness", "must lie in [0, 1]"));
        }
        if self.bench.sizes.contains(&0) {
            return Err(config_err("bench.sizes", "must be positive"));
        }
        Ok(())
    }

    /// The generator spec for this config's seed.
    pub fn scene_spec(&self) -> SceneSpec {
        self.synth.spec(&self.camera, stage_seed(self.seed, "synth"))
    }

    pub fn template_path(&self) -> Option<&Path> {
        (!self.template.as_os_str().is_empty()).then_some(self.template.as_path())
    }
}

/// Reads a cloud file, or a 16-bit millimeter PGM depth image using the
/// configured intrinsics.
pub fn load_input(path: impl AsRef<Path>, camera: &CameraConfig) -> Result<PointCloud<f64>> {
    let path = path.as_ref();
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let img = read_pgm_depth(reader, camera.intrinsics())?;
        Ok(depth_to_cloud(&img))
    } else {
        load_cloud(path, CloudFormat::from_path(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Planned,
    EmptyBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub pose: RigidTransform<f64>,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectGrasp {
    pub point: Point3<f64>,
    /// Position of `point` along the axis segment, 0 at the lower end.
    pub axis_param: f64,
    pub yaw: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedObject {
    pub rank: usize,
    pub id: usize,
    pub cluster_size: usize,
    /// Centroid of the segmented points.
    pub cluster_centroid: Point3<f64>,
    /// Centroid of the posed template (or of the cluster when degraded).
    pub centroid: Point3<f64>,
    pub p_self: f64,
    pub p_grasp: f64,
    pub p_system: f64,
    pub grs: f64,
    pub overlap_count: usize,
    /// Registration failed and the cluster points stand in for the template.
    pub degraded: bool,
    pub registration: Option<RegistrationSummary>,
    pub registration_error: Option<String>,
    pub axis: PrincipalAxis<f64>,
    /// Axis angle above the horizontal plane, radians.
    pub theta: f64,
    pub grasp: ObjectGrasp,
}

/// A cluster left out of the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCluster {
    pub id: usize,
    pub cluster_size: usize,
    pub cluster_centroid: Point3<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedGrasp {
    pub id: usize,
    pub point: Point3<f64>,
    pub axis_param: f64,
    pub yaw: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneCheck {
    pub changed: bool,
    pub max_displacement: f64,
}

/// Machine-readable result of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema: String,
    pub status: PlanStatus,
    pub seed: u64,
    pub stages_run: Vec<String>,
    /// Registration and scoring were skipped because the scene was unchanged.
    pub reused_previous: bool,
    pub scene_check: Option<SceneCheck>,
    /// Every object was load-bearing; the order ignores that factor.
    pub forced: bool,
    pub selected: Option<SelectedGrasp>,
    /// Best first.
    pub objects: Vec<PlannedObject>,
    pub excluded: Vec<ExcludedCluster>,
}

impl PlanFile {
    pub fn empty(seed: u64, stages: &[&str]) -> Self {
        Self {
            schema: PLAN_SCHEMA.to_string(),
            status: PlanStatus::EmptyBin,
            seed,
            stages_run: stages.iter().map(|s| s.to_string()).collect(),
            reused_previous: false,
            scene_check: None,
            forced: false,
            selected: None,
            objects: Vec::new(),
            excluded: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if plan.schema != PLAN_SCHEMA {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported plan schema `{}`", plan.schema),
            });
        }
        Ok(plan)
    }

    /// Text table of the ranking.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        if self.status == PlanStatus::EmptyBin {
            s.push_str("no objects\n");
            return s;
        }
        let _ = writeln!(
            s,
            "{:>4} {:>6} {:>8} {:>10} {:>10} {:>8} {:>10}  flags",
            "rank", "id", "points", "p_self", "p_grasp", "p_system", "grs"
        );
        for o in &self.objects {
            let _ = writeln!(
                s,
                "{:>4} {:>6} {:>8} {:>10.4} {:>10.6} {:>8} {:>10.6}  {}",
                o.rank,
                o.id,
                o.cluster_size,
                o.p_self,
                o.p_grasp,
                o.p_system,
                o.grs,
                if o.degraded { "degraded" } else { "" }
            );
        }
        if let Some(g) = &self.selected {
            let _ = writeln!(
                s,
                "selected {} at ({:.4}, {:.4}, {:.4}) yaw {:.4} rad width {:.4} m{}{}",
                g.id,
                g.point.x,
                g.point.y,
                g.point.z,
                g.yaw,
                g.width,
                if self.forced { " (forced)" } else { "" },
                if self.reused_previous { " (reused)" } else { "" },
            );
        }
        s
    }
}

/// Wall time per stage in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub segment: f64,
    pub register: f64,
    pub plan: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub plan: PlanFile,
    pub timings: StageTimings,
    /// The preprocessed cloud labeled by cluster id (noise -1).
    pub labeled: PointCloud<f64>,
}

/// Passthrough, voxel grid and floor removal.
pub fn preprocess(cloud: &PointCloud<f64>, config: &PipelineConfig) -> Result<PointCloud<f64>> {
    let pc = &config.preprocess;
    let cropped = match pc.bounds() {
        Some(b) => passthrough_filter(cloud, &b).0,
        None => cloud.clone(),
    };
    if cropped.is_empty() {
        return Ok(cropped);
    }
    let down = voxel_downsample(&cropped, pc.voxel_leaf)?;
    if down.len() < 3 {
        return Ok(down.select(&[]));
    }
    let seed = stage_seed(config.seed, "ransac");
    match ransac_remove_plane(&down, pc.plane_distance, pc.plane_iterations, seed) {
        Ok(r) => Ok(r.remaining),
        // nothing but collinear points: no floor and nothing to pick
        Err(Error::DegenerateInput(_)) => Ok(down.select(&[])),
        Err(e) => Err(e),
    }
}

fn with_labels(cloud: &PointCloud<f64>, seg: &Segmentation<f64>) -> Result<PointCloud<f64>> {
    cloud.clone().with_labels(seg.labels())
}

/// Registers the template against every cluster and ranks the objects.
/// Clusters that fail registration fall back to their observed points.
pub fn plan_segmentation(
    cloud: &PointCloud<f64>,
    seg: &Segmentation<f64>,
    template: &PointCloud<f64>,
    config: &PipelineConfig,
) -> Result<(PlanFile, f64, f64)> {
    let t = Instant::now();
    let regs = register_all(cloud, seg, template, &config.register.params());
    let register_time = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let params = config.policy.params();
    let mut states = Vec::new();
    let mut info = Vec::new();
    let mut excluded = Vec::new();
    for (cluster, reg) in seg.clusters.iter().zip(&regs) {
        let (state, summary, error) = match &reg.result {
            Ok(r) => (
                ObjectState::from_registration(cluster.id, template, r.transform, params.up),
                Some(RegistrationSummary {
                    pose: r.transform,
                    rmse: r.rmse,
                    iterations: r.iterations_used,
                    converged: r.converged,
                }),
                None,
            ),
            Err(msg) => (
                ObjectState::from_cluster(cluster.id, cloud.select(&cluster.indices).without_labels(), params.up),
                None,
                Some(msg.clone()),
            ),
        };
        match state {
            Ok(s) => {
                states.push(s);
                info.push((cluster, summary, error));
            }
            Err(e) => excluded.push(ExcludedCluster {
                id: cluster.id,
                cluster_size: cluster.indices.len(),
                cluster_centroid: cluster.centroid,
                reason: e.to_string(),
            }),
        }
    }
    let scene = PolicyScene::new(states)?;
    if scene.is_empty() {
        let mut plan = PlanFile::empty(config.seed, &["preprocess", "segment", "register", "plan"]);
        plan.excluded = excluded;
        return Ok((plan, register_time, t.elapsed().as_secs_f64()));
    }
    let ranking = grs_rank(&scene, &params)?;
    let objects: Vec<PlannedObject> = ranking
        .entries
        .iter()
        .zip(&ranking.scene_index)
        .enumerate()
        .map(|(rank, (e, &i))| {
            let o = &scene.objects()[i];
            let g = grasp_point(&scene, i, &params);
            let (yaw, width) = grasp_pose(o, &params);
            let (cluster, summary, error) = &info[i];
            PlannedObject {
                rank,
                id: e.id,
                cluster_size: cluster.indices.len(),
                cluster_centroid: cluster.centroid,
                centroid: o.centroid,
                p_self: e.p_self,
                p_grasp: e.p_grasp,
                p_system: e.p_system,
                grs: e.grs,
                overlap_count: e.overlap_count,
                degraded: e.degraded,
                registration: summary.clone(),
                registration_error: error.clone(),
                axis: o.axis,
                theta: o.theta,
                grasp: ObjectGrasp {
                    point: g.point,
                    axis_param: g.axis_param,
                    yaw,
                    width,
                },
            }
        })
        .collect();
    let selected = objects.first().map(select);
    let plan = PlanFile {
        schema: PLAN_SCHEMA.to_string(),
        status: PlanStatus::Planned,
        seed: config.seed,
        stages_run: ["preprocess", "segment", "register", "plan"].map(String::from).to_vec(),
        reused_previous: false,
        scene_check: None,
        forced: ranking.forced,
        selected,
        objects,
        excluded,
    };
    Ok((plan, register_time, t.elapsed().as_secs_f64()))
}

fn select(o: &PlannedObject) -> SelectedGrasp {
    SelectedGrasp {
        id: o.id,
        point: o.grasp.point,
        axis_param: o.grasp.axis_param,
        yaw: o.grasp.yaw,
        width: o.grasp.width,
    }
}

/// Re-emits `previous` without the grasped objects when the new frame's
/// clusters match the remaining ones within `change_tau`; `None` when the
/// scene changed.
fn reuse_previous(
    previous: &PlanFile,
    grasped: &[usize],
    seg: &Segmentation<f64>,
    config: &PipelineConfig,
) -> (Option<PlanFile>, SceneCheck) {
    let keep = |id: &usize| !grasped.contains(id);
    let remaining: Vec<&PlannedObject> = previous.objects.iter().filter(|o| keep(&o.id)).collect();
    let excluded: Vec<&ExcludedCluster> = previous.excluded.iter().filter(|o| keep(&o.id)).collect();
    let mut prev: Vec<Point3<f64>> = remaining.iter().map(|o| o.cluster_centroid).collect();
    prev.extend(excluded.iter().map(|o| o.cluster_centroid));
    let curr = seg.centroids();
    let change = scene_changed(&prev, &curr, config.policy.change_tau);
    let check = SceneCheck {
        changed: change.changed,
        max_displacement: change.max_displacement,
    };
    if change.changed || previous.status != PlanStatus::Planned || remaining.is_empty() {
        return (None, check);
    }
    let matched = |k: usize| {
        let j = change.matches.iter().find(|(i, _)| *i == k).map(|&(_, j)| j).expect("counts agree");
        &seg.clusters[j]
    };
    let objects: Vec<PlannedObject> = remaining
        .iter()
        .enumerate()
        .map(|(rank, o)| {
            let c = matched(rank);
            PlannedObject {
                rank,
                id: c.id,
                cluster_size: c.indices.len(),
                cluster_centroid: c.centroid,
                ..(*o).clone()
            }
        })
        .collect();
    let excluded = excluded
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let c = matched(remaining.len() + k);
            ExcludedCluster {
                id: c.id,
                cluster_size: c.indices.len(),
                cluster_centroid: c.centroid,
                reason: e.reason.clone(),
            }
        })
        .collect();
    let plan = PlanFile {
        schema: PLAN_SCHEMA.to_string(),
        status: PlanStatus::Planned,
        seed: config.seed,
        stages_run: ["preprocess", "segment", "scene_check"].map(String::from).to_vec(),
        reused_previous: true,
        scene_check: Some(check),
        forced: previous.forced,
        selected: objects.first().map(select),
        objects,
        excluded,
    };
    (Some(plan), check)
}

/// Runs preprocess → segment → register → plan on one frame.
///
/// With a previous plan, registration and scoring are skipped when the
/// segmented centroids match the previous ones (minus the `grasped` ids)
/// within `policy.change_tau`; the previous ranking is then re-emitted
/// without the grasped objects.
pub fn run_pipeline(
    config: &PipelineConfig,
    input: &PointCloud<f64>,
    template: Option<&PointCloud<f64>>,
    previous: Option<&PlanFile>,
    grasped: &[usize],
) -> Result<PipelineOutput> {
    config.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let cloud = preprocess(input, config).map_err(|e| e.in_stage("preprocess"))?;
    timings.preprocess = t.elapsed().as_secs_f64();

    let finish = |plan: PlanFile, labeled: PointCloud<f64>, mut timings: StageTimings| {
        timings.total = start.elapsed().as_secs_f64();
        Ok(PipelineOutput { plan, timings, labeled })
    };

    if cloud.is_empty() {
        return finish(PlanFile::empty(config.seed, &["preprocess"]), cloud, timings);
    }

    let t = Instant::now();
    let seg = segment_cloud(&cloud, &config.segment.params()).map_err(|e| e.in_stage("segment"))?;
    timings.segment = t.elapsed().as_secs_f64();
    let labeled = with_labels(&cloud, &seg).map_err(|e| e.in_stage("segment"))?;
    if seg.clusters.is_empty() {
        return finish(PlanFile::empty(config.seed, &["preprocess", "segment"]), labeled, timings);
    }

    let mut check = None;
    if let Some(prev) = previous {
        let (reused, c) = reuse_previous(prev, grasped, &seg, config);
        if let Some(plan) = reused {
            return finish(plan, labeled, timings);
        }
        check = Some(c);
    }

    let template = template.ok_or_else(|| {
        Error::InvalidParameter {
            name: "template".into(),
            reason: "a template cloud is required for registration".into(),
        }
        .in_stage("register")
    })?;
    let (mut plan, reg_time, plan_time) =
        plan_segmentation(&cloud, &seg, template, config).map_err(|e| e.in_stage("plan"))?;
    plan.scene_check = check;
    timings.register = reg_time;
    timings.plan = plan_time;
    finish(plan, labeled, timings)
}

/// One row of the segmentation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub target_points: usize,
    pub points: usize,
    pub octree_seconds: f64,
    pub linear_seconds: f64,
    pub speedup: f64,
    pub octree_clusters: usize,
    pub linear_clusters: usize,
    pub identical: bool,
    pub ari: f64,
}

/// A synthetic pile rendered at a resolution giving roughly `target` object
/// points, its floor removed, with segmentation lengths scaled to the
/// pixel footprint. Returns the cloud (ground-truth labels attached) and the
/// matching parameters.
pub fn bench_scene(config: &PipelineConfig, target: usize) -> Result<(PointCloud<f64>, SegmentParams<f64>)> {
    let mut spec = config.scene_spec();
    spec.seed = stage_seed(config.seed, "bench");
    spec.count = config.bench.count;
    spec.layout = Layout::Pile {
        tightness: config.bench.tightness,
    };
    let seed = stage_seed(config.seed, "ransac");
    let pc = &config.preprocess;
    let objects_only = |spec: &SceneSpec| -> Result<PointCloud<f64>> {
        let scene = synth_scene(spec)?;
        Ok(ransac_remove_plane(&scene.cloud, pc.plane_distance, pc.plane_iterations, seed)?.remaining)
    };
    let probe = objects_only(&spec)?;
    let scale = (target as f64 / probe.len().max(1) as f64).sqrt();
    let cam = &mut spec.camera;
    cam.width = ((cam.width as f64) * scale).round().max(1.0) as usize;
    cam.height = ((cam.height as f64) * scale).round().max(1.0) as usize;
    cam.fx *= scale;
    cam.fy *= scale;
    cam.cx = (cam.width as f64 - 1.0) / 2.0;
    cam.cy = (cam.height as f64 - 1.0) / 2.0;
    let cloud = objects_only(&spec)?;

    // raw pixel footprint on the floor versus the configured voxel leaf
    let k = spec.camera.floor_distance / spec.camera.fx / pc.voxel_leaf;
    let mut params = config.segment.params();
    params.dbscan.eps *= k;
    params.feature_radius *= k;
    params.min_cluster_size = ((params.min_cluster_size as f64) / (k * k)).round() as usize;
    Ok((cloud, params))
}

/// Times segmentation with octree and linear-scan neighbor search on
/// identical scenes.
pub fn bench(config: &PipelineConfig, sizes: &[usize]) -> Result<Vec<BenchRow>> {
    config.validate()?;
    sizes
        .iter()
        .map(|&target| {
            let (cloud, params) = bench_scene(config, target)?;
            let truth = cloud.labels().expect("synthetic labels").to_vec();
            let cloud = cloud.without_labels();

            let t = Instant::now();
            let tree = Octree::build(&cloud, params.octree_depth)?;
            let a = segment_with_search(&cloud, &tree, &params)?.segmentation;
            let octree_seconds = t.elapsed().as_secs_f64();

            let t = Instant::now();
            let b = segment_with_search(&cloud, &LinearScan::new(cloud.points()), &params)?.segmentation;
            let linear_seconds = t.elapsed().as_secs_f64();

            Ok(BenchRow {
                target_points: target,
                points: cloud.len(),
                octree_seconds,
                linear_seconds,
                speedup: linear_seconds / octree_seconds,
                octree_clusters: a.clusters.len(),
                linear_clusters: b.clusters.len(),
                identical: a == b,
                ari: adjusted_rand_index(&truth, &a.labels()),
            })
        })
        .collect()
}

/// Text table of benchmark rows.
pub fn bench_table(rows: &[BenchRow]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>10} {:>10} {:>8} {:>9} {:>9} {:>9} {:>7}",
        "points", "octree_s", "linear_s", "speedup", "clusters", "linear_cl", "identical", "ari"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>10.4} {:>10.4} {:>8.1} {:>9} {:>9} {:>9} {:>7.3}",
            r.points, r.octree_seconds, r.linear_seconds, r.speedup, r.octree_clusters, r.linear_clusters, r.identical, r.ari
        );
    }
    s
}
