//! Acceptance suite: one pass/fail line per criterion.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use binpick_core::geometry::mean_and_covariance;
use binpick_core::metrics::adjusted_rand_index;
use binpick_core::octree::{LinearScan, NeighborSearch, Octree};
use binpick_core::preprocess::voxel_downsample;
use binpick_core::pipeline::{bench_scene, preprocess, PipelineConfig, PlanFile, StageTimings};
use binpick_core::policy::{grasp_point, grs_rank, ObjectState, PolicyParams, PolicyScene};
use binpick_core::register::{coarse_align, icp_refine, principal_frame, IcpParams};
use binpick_core::segment::{classify_points, form_core_clusters, segment_cloud, segment_with_search, Neighborhoods};
use binpick_core::synth::{synth_scene, Layout, SceneSpec, Shape, ShapeKind};
use binpick_core::{apply_transform, PointCloud, RigidTransform, Vec3};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3<f64> {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.try_normalize().unwrap();
        }
    }
}

fn octree_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut queries = 0;
    for cloud_i in 0..20 {
        let n = r.random_range(1..=5000);
        let spread = r.random_range(0.05..2.0);
        let pts: Vec<_> = (0..n)
            .map(|_| Vec3::new(r.random_range(0.0..spread), r.random_range(0.0..spread), r.random_range(0.0..spread) * 0.5))
            .collect();
        let depth = 1 + cloud_i % 10;
        let tree = Octree::from_points(&pts, depth).map_err(|e| e.to_string())?;
        let lin = LinearScan::new(&pts);
        for q in 0..100 {
            let query = if q % 3 == 0 {
                pts[r.random_range(0..n)]
            } else {
                Vec3::new(
                    r.random_range(-0.2..1.2) * spread,
                    r.random_range(-0.2..1.2) * spread,
                    r.random_range(-0.2..1.2) * spread,
                )
            };
            let radius = spread * r.random_range(0.0..0.3);
            let a = tree.radius_search(query, radius);
            let b = lin.radius_search(query, radius);
            check(a == b, format!("cloud {cloud_i} query {q}: {} vs {} hits", a.len(), b.len()))?;
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("{queries} queries on 20 clouds identical to linear scan, {secs:.2} s"))
}

fn dbscan_oracle() -> Outcome {
    let start = Instant::now();
    let settings = [(0.004, 1), (0.006, 4), (0.008, 6), (0.01, 10), (0.015, 20)];
    let mut r = rng(2);
    for scene in 0..20 {
        let n = r.random_range(50..=2000);
        let cloud = blob_cloud(&mut r, n);
        let tree = Octree::build(&cloud, 6).map_err(|e| e.to_string())?;
        for &(eps, min_pts) in &settings {
            let nb = Neighborhoods::compute(cloud.points(), &tree, eps);
            let roles = classify_points(&nb, min_pts);
            let core = form_core_clusters(&cloud, &nb, &roles);

            let naive = naive_neighbors(cloud.points(), eps);
            let oracle_roles = naive_roles(&naive, min_pts);
            check(roles == oracle_roles, format!("scene {scene} eps {eps} min_pts {min_pts}: roles differ"))?;
            let parts = set_of_sets(core.clusters.iter().map(|c| &c.indices));
            check(
                parts == naive_core_partition(&naive, &oracle_roles),
                format!("scene {scene} eps {eps} min_pts {min_pts}: core partition differs"),
            )?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("20 scenes x 5 settings match the naive oracle, {secs:.2} s"))
}

/// Number of objects touching at least one other (surface gap under 2 mm).
fn touching_objects(scene: &binpick_core::synth::SyntheticScene) -> usize {
    let samples: Vec<Vec<_>> = scene
        .objects
        .iter()
        .map(|o| {
            o.shape
                .surface_samples(0.004)
                .into_iter()
                .map(|(p, _)| o.pose.apply_point(p))
                .collect()
        })
        .collect();
    (0..scene.objects.len())
        .filter(|&i| {
            (0..scene.objects.len())
                .filter(|&j| j != i)
                .any(|j| samples[i].iter().any(|&p| scene.objects[j].sdf(p) < 0.002))
        })
        .count()
}

fn segmentation_quality() -> Outcome {
    let start = Instant::now();
    let config = PipelineConfig::default();
    let params = config.segment.params();
    let run = |spec: &SceneSpec| -> Result<(f64, usize, usize, usize), String> {
        let scene = synth_scene(spec).map_err(|e| e.to_string())?;
        let down = voxel_downsample(&scene.cloud, config.preprocess.voxel_leaf).map_err(|e| e.to_string())?;
        let cloud = preprocess(&scene.cloud, &config).map_err(|e| e.to_string())?;
        let seg = segment_cloud(&cloud, &params).map_err(|e| e.to_string())?;
        let ari = adjusted_rand_index(cloud.labels().unwrap(), &seg.labels());
        Ok((ari, down.len(), cloud.len(), touching_objects(&scene)))
    };
    let (mut pile, mut control) = (Vec::new(), Vec::new());
    let (mut sizes, mut segmented, mut touching, mut objects) = (Vec::new(), Vec::new(), 0, 0);
    for seed in 0..25u64 {
        let count = 6 + (seed % 5) as usize;
        let spec = SceneSpec {
            count,
            seed,
            size_jitter: 0.15,
            layout: Layout::Pile { tightness: 0.5 },
            ..Default::default()
        };
        let (ari, n, m, t) = run(&spec)?;
        pile.push(ari);
        sizes.push(n);
        segmented.push(m);
        touching += t;
        objects += count;
        let spec = SceneSpec {
            layout: Layout::Separated { gap: 0.02 },
            seed: 1000 + seed,
            ..spec
        };
        control.push(run(&spec)?.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mp, mc) = (mean(&pile), mean(&control));
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "pile ARI mean {mp:.3} (min {:.3}), control mean {mc:.3} (min {:.3}), {}-{} points after downsampling ({}-{} after floor removal), {touching}/{objects} objects touching, {secs:.1} s",
        min(&pile),
        min(&control),
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap(),
        segmented.iter().min().unwrap(),
        segmented.iter().max().unwrap()
    );
    check(mp >= 0.80, format!("pile ARI below 0.80: {detail}"))?;
    check(mc >= 0.99, format!("control ARI below 0.99: {detail}"))?;
    check(secs < 180.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn octree_speedup() -> Outcome {
    let config = PipelineConfig::default();
    let (cloud, params) = bench_scene(&config, 50_000).map_err(|e| e.to_string())?;
    let cloud = cloud.without_labels();
    let timed = |f: &dyn Fn() -> binpick_core::segment::Segmentation<f64>| {
        let t = Instant::now();
        let s = f();
        (s, t.elapsed().as_secs_f64())
    };
    let (a, ta) = timed(&|| {
        let tree = Octree::build(&cloud, params.octree_depth).unwrap();
        segment_with_search(&cloud, &tree, &params).unwrap().segmentation
    });
    let (b, tb) = timed(&|| {
        segment_with_search(&cloud, &LinearScan::new(cloud.points()), &params)
            .unwrap()
            .segmentation
    });
    let detail = format!(
        "{} points, octree {ta:.3} s, linear {tb:.3} s, speedup {:.1}x, {} clusters",
        cloud.len(),
        tb / ta,
        a.clusters.len()
    );
    check(a == b, format!("partitions differ: {detail}"))?;
    check(tb / ta >= 5.0, format!("speedup below 5x: {detail}"))?;
    check(ta < 0.5, format!("octree segmentation over 0.5 s: {detail}"))?;
    Ok(detail)
}

fn registration_recovery() -> Outcome {
    let start = Instant::now();
    let template = Shape::standard(ShapeKind::ThreeWayPipe, 1.0).template(0.003);
    let mut r = rng(5);
    let mut recovered = 0;
    let (mut worst_rot, mut worst_tr) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let angle = r.random_range(0.0..30f64.to_radians());
        let shift = random_unit(&mut r) * r.random_range(0.0..0.03);
        let truth = RigidTransform::from_axis_angle(random_unit(&mut r), angle, shift);
        let keep: Vec<usize> = (0..template.len()).filter(|_| r.random_bool(0.8)).collect();
        let cluster = apply_transform(&template.select(&keep), &truth);
        let init = coarse_align(&template, &cluster).map_err(|e| e.to_string())?;
        let res = icp_refine(&template, &cluster, init, &IcpParams::default()).map_err(|e| e.to_string())?;
        let monotone = res.rmse_history.windows(2).all(|w| w[1] <= w[0]);
        check(monotone, format!("trial {trial}: rmse increased: {:?}", res.rmse_history))?;
        let (re, te) = (res.transform.rotation_error(&truth), res.transform.translation_error(&truth));
        worst_rot = worst_rot.max(re);
        worst_tr = worst_tr.max(te);
        if re <= 1e-3 && te <= 1e-3 {
            recovered += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{recovered}/50 recovered, worst {worst_rot:.2e} rad / {:.3} mm, rmse monotone in all trials, {secs:.1} s",
        worst_tr * 1e3
    );
    check(recovered >= 48, detail.clone())?;
    check(secs < 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn pca_equations() -> Outcome {
    let mut r = rng(6);
    let (mut worst_cov, mut worst_mean) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(3..600);
        let scale = Vec3::new(r.random_range(0.01..1.0), r.random_range(0.01..1.0), r.random_range(0.01..1.0));
        let pts: Vec<_> = (0..n)
            .map(|_| {
                Vec3::new(
                    r.random_range(-1.0..1.0) * scale.x + 0.3,
                    r.random_range(-1.0..1.0) * scale.y - 0.2,
                    r.random_range(-1.0..1.0) * scale.z + 1.0,
                )
            })
            .collect();
        let mut mean = [0.0; 3];
        for p in &pts {
            let a = p.to_array();
            for k in 0..3 {
                mean[k] += a[k];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for p in &pts {
                    let a = p.to_array();
                    cov[i][j] += (a[i] - mean[i]) * (a[j] - mean[j]);
                }
                cov[i][j] /= n as f64;
            }
        }
        let (m, c) = mean_and_covariance(pts.iter().copied()).unwrap();
        let cloud = PointCloud::new(pts).unwrap();
        let frame = principal_frame(&cloud).map_err(|e| e.to_string())?;
        for k in 0..3 {
            worst_mean = worst_mean.max((m.to_array()[k] - mean[k]).abs());
            worst_mean = worst_mean.max((frame.origin.to_array()[k] - mean[k]).abs());
            for l in 0..3 {
                worst_cov = worst_cov.max((c.m[k][l] - cov[k][l]).abs());
                // the frame's eigen decomposition reproduces the same matrix
                let rebuilt: f64 = (0..3)
                    .map(|e| frame.eigenvalues[e] * frame.axes[e].to_array()[k] * frame.axes[e].to_array()[l])
                    .sum();
                worst_cov = worst_cov.max((rebuilt - cov[k][l]).abs());
            }
        }
    }
    let detail = format!("100 clouds, worst covariance error {worst_cov:.1e}, worst mean error {worst_mean:.1e}");
    check(worst_cov <= 1e-12 && worst_mean <= 1e-12, detail.clone())?;
    Ok(detail)
}

fn policy_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let params = PolicyParams::<f64>::default();
    let mut compared = 0;
    for seed in 0..20u64 {
        let spec = SceneSpec {
            count: 5 + (seed % 5) as usize,
            seed: 700 + seed,
            layout: Layout::Pile {
                tightness: 0.3 + 0.035 * seed as f64,
            },
            ..Default::default()
        };
        let scene = synth_scene(&spec).map_err(|e| e.to_string())?;
        let states = true_states(&scene, 0.005, params.up);
        let oracle = policy_oracle(&states, &params);
        let ps = PolicyScene::new(states.clone()).map_err(|e| e.to_string())?;
        let ranking = grs_rank(&ps, &params).map_err(|e| e.to_string())?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        for (e, &i) in ranking.entries.iter().zip(&ranking.scene_index) {
            check(
                close(e.p_self, oracle.p_self[i])
                    && close(e.p_grasp, oracle.p_grasp[i])
                    && e.p_system == oracle.p_system[i]
                    && e.overlap_count == oracle.overlap[i]
                    && close(e.grs, oracle.grs[i]),
                format!("scene {seed} object {i}: scores differ from the oracle"),
            )?;
            let g = grasp_point(&ps, i, &params);
            check(
                g.point.distance(oracle.grasp[i]) <= 1e-9,
                format!("scene {seed} object {i}: grasp point differs"),
            )?;
            compared += 1;
        }
        check(ranking.scene_index == oracle.order, format!("scene {seed}: ranking differs"))?;
        check(ranking.forced == oracle.forced, format!("scene {seed}: forced flag differs"))?;

        let scaled = PolicyParams {
            alpha: params.alpha * 3.7,
            beta: params.beta * 3.7,
            ..params
        };
        let r2 = grs_rank(&ps, &scaled).map_err(|e| e.to_string())?;
        check(r2.scene_index == ranking.scene_index, format!("scene {seed}: (alpha, beta) scaling changed the order"))?;

        // a copy of the first object far away, at the same height
        let far = RigidTransform::from_translation(Vec3::new(10.0, 10.0, 0.0));
        let o = &scene.objects[0];
        let moved = ObjectState::from_registration(999, &o.shape.template(0.005), far.compose(&o.pose), params.up)
            .map_err(|e| e.to_string())?;
        let mut grown = states.clone();
        grown.push(moved);
        let ps2 = PolicyScene::new(grown).map_err(|e| e.to_string())?;
        let r3 = grs_rank(&ps2, &params).map_err(|e| e.to_string())?;
        for (e, &i) in r3.entries.iter().zip(&r3.scene_index) {
            if i < states.len() {
                check(
                    e.p_grasp == oracle.p_grasp[i] && e.p_system == oracle.p_system[i],
                    format!("scene {seed}: a distant object changed object {i}"),
                )?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(format!("20 scenes, {compared} objects match the brute-force scorer, invariances hold, {secs:.1} s"))
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_binpick")
}

fn binpick(dir: &Path, args: &[&str]) -> Result<i32, String> {
    let out = Command::new(binary())
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !matches!(out.status.code(), Some(0) | Some(2)) {
        return Err(format!(
            "binpick {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.status.code().unwrap())
}

const PIPE_CONFIG: &str = r#"
template = "scene/template_three_way_pipe.ply"

[synth]
count = 8
kinds = ["three_way_pipe"]
"#;

fn pile_dir(seed: &str) -> Result<tempfile::TempDir, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(dir.path().join("pile.toml"), PIPE_CONFIG).map_err(|e| e.to_string())?;
    binpick(dir.path(), &["synth", "--config", "pile.toml", "--seed", seed, "--output", "scene"])?;
    Ok(dir)
}

fn read_plan(path: &Path) -> Result<PlanFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    PlanFile::from_json(&text).map_err(|e| e.to_string())
}

fn determinism_and_skip() -> Outcome {
    let dir = pile_dir("11")?;
    let d = dir.path();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["run", "--config", "pile.toml", "--seed", "11", "--input", "scene/depth.pgm", "--output", out];
        args.extend_from_slice(extra);
        binpick(d, &args)
    };
    run("a", &[])?;
    run("b", &[])?;
    let a = std::fs::read(d.join("a/plan.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(d.join("b/plan.json")).map_err(|e| e.to_string())?;
    check(a == b, "plan files differ between identical runs")?;
    run("c", &["--previous", "a/plan.json"])?;
    let timings: StageTimings = serde_json::from_str(
        &std::fs::read_to_string(d.join("c/timings.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let plan_c = read_plan(&d.join("c/plan.json"))?;
    let plan_a = read_plan(&d.join("a/plan.json"))?;
    check(timings.register == 0.0, format!("registration time {} on a repeated frame", timings.register))?;
    check(plan_c.reused_previous, "repeated frame was not reused")?;
    check(plan_c.selected == plan_a.selected, "reused plan selects a different grasp")?;
    Ok(format!(
        "{} byte plan identical across runs; repeated frame skipped registration (register 0 s, segment {:.3} s)",
        a.len(),
        timings.segment
    ))
}

fn end_to_end() -> Outcome {
    let dir = pile_dir("8")?;
    let d = dir.path();
    let code = binpick(
        d,
        &["run", "--config", "pile.toml", "--seed", "8", "--input", "scene/depth.pgm", "--output", "out"],
    )?;
    check(code == 0, format!("exit code {code}"))?;
    let plan = read_plan(&d.join("out/plan.json"))?;
    let stages: BTreeSet<&str> = plan.stages_run.iter().map(String::as_str).collect();
    for s in ["preprocess", "segment", "register", "plan"] {
        check(stages.contains(s), format!("stage {s} missing"))?;
    }
    let sel = plan.selected.as_ref().ok_or("no selection")?;
    let obj = plan.objects.iter().find(|o| o.id == sel.id).ok_or("selected id not ranked")?;
    let any_free = plan.objects.iter().any(|o| o.p_system == 1.0);
    check(!any_free || obj.p_system == 1.0, "a non-load-bearing object existed but was not selected")?;
    let res = line_residual(sel.point, obj.axis.start, obj.axis.end);
    check(res < 1e-9, format!("grasp point off the axis by {res:.2e}"))?;
    check((0.0..=1.0).contains(&sel.axis_param), "grasp point outside the axis segment")?;
    Ok(format!(
        "{} objects ranked, selected {} (P_system {}), axis residual {res:.1e}",
        plan.objects.len(),
        sel.id,
        obj.p_system
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 octree exactness", octree_exactness),
        ("2 DBSCAN oracle equivalence", dbscan_oracle),
        ("3 segmentation quality", segmentation_quality),
        ("4 octree speedup", octree_speedup),
        ("5 registration recovery", registration_recovery),
        ("6 PCA equations", pca_equations),
        ("7 policy oracle equivalence", policy_oracle_equivalence),
        ("8 pipeline determinism and skip path", determinism_and_skip),
        ("9 end-to-end run", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
