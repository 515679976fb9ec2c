//! Brute-force oracles and scene builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use binpick_core::policy::{ObjectState, PolicyParams};
use binpick_core::segment::PointRole;
use binpick_core::synth::SyntheticScene;
use binpick_core::{Point3, PointCloud, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn d2(a: Point3<f64>, b: Point3<f64>) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

/// Gaussian-ish blobs plus uniform background noise inside a 0.3 m cube.
pub fn blob_cloud(rng: &mut impl Rng, n: usize) -> PointCloud<f64> {
    let blobs = rng.random_range(1..5);
    let centers: Vec<[f64; 3]> = (0..blobs)
        .map(|_| [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)])
        .collect();
    let pts = (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                Vec3::new(rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3))
            } else {
                let c = centers[rng.random_range(0..blobs)];
                let s = 0.02;
                let mut g = || (0..4).map(|_| rng.random_range(-s..s)).sum::<f64>() / 2.0;
                Vec3::new(c[0] + g(), c[1] + g(), c[2] + g())
            }
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

/// Sorted neighbor lists by exhaustive comparison (self included).
pub fn naive_neighbors(points: &[Point3<f64>], eps: f64) -> Vec<Vec<usize>> {
    let e2 = eps * eps;
    points
        .iter()
        .map(|&p| (0..points.len()).filter(|&j| d2(p, points[j]) <= e2).collect())
        .collect()
}

pub fn naive_roles(neigh: &[Vec<usize>], min_pts: usize) -> Vec<PointRole> {
    let core: Vec<bool> = neigh.iter().map(|n| n.len() >= min_pts).collect();
    neigh
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if core[i] {
                PointRole::Core
            } else if n.iter().any(|&j| core[j]) {
                PointRole::Border
            } else {
                PointRole::Noise
            }
        })
        .collect()
}

/// Connected components of core points by breadth-first search.
pub fn naive_core_partition(neigh: &[Vec<usize>], roles: &[PointRole]) -> BTreeSet<BTreeSet<usize>> {
    let n = roles.len();
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] || roles[s] != PointRole::Core {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = vec![s];
        seen[s] = true;
        while let Some(i) = queue.pop() {
            comp.insert(i);
            for &j in &neigh[i] {
                if !seen[j] && roles[j] == PointRole::Core {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
        out.insert(comp);
    }
    out
}

pub fn set_of_sets<'a>(sets: impl IntoIterator<Item = &'a Vec<usize>>) -> BTreeSet<BTreeSet<usize>> {
    sets.into_iter().map(|s| s.iter().copied().collect()).collect()
}

/// Adjusted Rand index by explicit pair counting (quadratic).
pub fn pair_count_ari(a: &[i64], b: &[i64]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u64;
            in_a += sa as u64;
            in_b += sb as u64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = in_a as f64 * in_b as f64 / pairs;
    let max = (in_a + in_b) as f64 / 2.0;
    if max == expected {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}

/// Ground-truth object states of a synthetic scene: each object's own
/// template posed by its true pose.
pub fn true_states(scene: &SyntheticScene, spacing: f64, up: Vec3<f64>) -> Vec<ObjectState<f64>> {
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectState::from_registration(i, &o.shape.template(spacing), o.pose, up).unwrap())
        .collect()
}

/// Everything the policy computes, recomputed by brute force.
#[derive(Debug)]
pub struct PolicyOracle {
    pub p_self: Vec<f64>,
    pub p_grasp: Vec<f64>,
    pub overlap: Vec<usize>,
    pub p_system: Vec<f64>,
    pub grs: Vec<f64>,
    /// Object positions, best first.
    pub order: Vec<usize>,
    pub forced: bool,
    pub grasp: Vec<Point3<f64>>,
}

pub fn policy_oracle(objs: &[ObjectState<f64>], p: &PolicyParams<f64>) -> PolicyOracle {
    let n = objs.len();
    let up = p.up;
    let height = |o: &ObjectState<f64>| o.centroid.x * up.x + o.centroid.y * up.y + o.centroid.z * up.z;
    let hs: Vec<f64> = objs.iter().map(height).collect();
    let lo = hs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p_self: Vec<f64> = (0..n)
        .map(|i| {
            let z = if hi > lo { (hs[i] - lo) / (hi - lo) } else { 1.0 };
            p.k1 * z + p.k2 * objs[i].theta.sin()
        })
        .collect();

    let p_grasp: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                return p.clearance_cap;
            }
            let mut ds: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| d2(objs[i].centroid, objs[j].centroid)).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = p.k_neighbors.min(n - 1);
            ds[..k].iter().sum::<f64>() / k as f64
        })
        .collect();

    let delta2 = p.overlap_delta * p.overlap_delta;
    let overlap: Vec<usize> = (0..n)
        .map(|i| {
            objs[i]
                .template_posed
                .points()
                .iter()
                .filter(|&&q| {
                    (0..n)
                        .filter(|&j| j != i)
                        .any(|j| objs[j].template_posed.points().iter().any(|&r| d2(q, r) <= delta2))
                })
                .count()
        })
        .collect();
    let p_system: Vec<f64> = overlap.iter().map(|&c| if c > p.overlap_threshold { 0.0 } else { 1.0 }).collect();
    let base: Vec<f64> = (0..n).map(|i| p.alpha * p_self[i] + p.beta * p_grasp[i]).collect();
    let grs: Vec<f64> = (0..n).map(|i| base[i] * p_system[i]).collect();

    let forced = p_system.iter().all(|&s| s == 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| {
            if forced {
                (base[i], 0.0, 0.0)
            } else {
                (grs[i], p_system[i], base[i])
            }
        };
        let (ka, kb) = (key(a), key(b));
        kb.0.partial_cmp(&ka.0)
            .unwrap()
            .then(kb.1.partial_cmp(&ka.1).unwrap())
            .then(kb.2.partial_cmp(&ka.2).unwrap())
            .then(objs[a].id.cmp(&objs[b].id))
    });

    let grasp = (0..n)
        .map(|i| {
            let o = &objs[i];
            let (s, e) = (o.axis.start, o.axis.end);
            if d2(s, e) == 0.0 {
                return o.centroid;
            }
            let m = p.grasp_samples;
            let mut best = (f64::INFINITY, o.centroid);
            for k in 0..m {
                let t = k as f64 / (m - 1) as f64;
                let x = s + (e - s) * t;
                let de = d2(x, o.centroid).sqrt();
                let dn = (0..n)
                    .filter(|&j| j != i)
                    .flat_map(|j| objs[j].template_posed.points().iter().map(move |&r| d2(x, r)))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                let f = if n > 1 { p.k3 * de + p.k4 * dn } else { p.k3 * de };
                if f < best.0 {
                    best = (f, x);
                }
            }
            best.1
        })
        .collect();

    PolicyOracle {
        p_self,
        p_grasp,
        overlap,
        p_system,
        grs,
        order,
        forced,
        grasp,
    }
}

/// Distance from `x` to the line through `a` and `b`.
pub fn line_residual(x: Point3<f64>, a: Point3<f64>, b: Point3<f64>) -> f64 {
    let d = b - a;
    (x - a).cross(d).norm() / d.norm()
}
