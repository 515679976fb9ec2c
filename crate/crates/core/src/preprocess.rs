//! Filter chain applied to a raw capture before segmentation: depth image
//! back-projection, passthrough crop, voxel-grid downsampling and removal of
//! the dominant plane (the bin floor) by RANSAC.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{Aabb, PointCloud};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::scalar::Real;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

/// Row-major depth map in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T> {
    width: usize,
    height: usize,
    depths: Vec<T>,
    intrinsics: Intrinsics<T>,
}

impl<T: Real> DepthImage<T> {
    pub fn new(width: usize, height: usize, depths: Vec<T>, intrinsics: Intrinsics<T>) -> Result<Self> {
        if depths.len() != width * height {
            return Err(invalid_param(
                "depths",
                format!("{} values for a {width}x{height} image", depths.len()),
            ));
        }
        if !(intrinsics.fx > T::zero() && intrinsics.fy > T::zero()) {
            return Err(invalid_param("intrinsics", "fx and fy must be positive"));
        }
        if !(intrinsics.cx.is_finite() && intrinsics.cy.is_finite()) {
            return Err(invalid_param("intrinsics", "cx and cy must be finite"));
        }
        Ok(Self {
            width,
            height,
            depths,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self, u: usize, v: usize) -> T {
        self.depths[v * self.width + u]
    }

    pub fn intrinsics(&self) -> &Intrinsics<T> {
        &self.intrinsics
    }
}

/// Back-projects every pixel with positive finite depth.
pub fn depth_to_cloud<T: Real>(img: &DepthImage<T>) -> PointCloud<T> {
    let k = img.intrinsics;
    let mut points = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            let z = img.depths[v * img.width + u];
            if !(z > T::zero()) || !z.is_finite() {
                continue;
            }
            let x = (T::from_count(u) - k.cx) * z / k.fx;
            let y = (T::from_count(v) - k.cy) * z / k.fy;
            points.push(Vec3::new(x, y, z));
        }
    }
    PointCloud::from_trusted(points)
}

/// Reads a PGM depth map (binary `P5` or ASCII `P2`, up to 16 bits) whose
/// samples are millimeters.
pub fn read_pgm_depth<T: Real, R: BufRead>(mut reader: R, intrinsics: Intrinsics<T>) -> Result<DepthImage<T>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut line = 1usize;
    let mut token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                if bytes[*pos] == b'\n' {
                    line += 1;
                }
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse {
                line,
                message: "unexpected end of PGM data".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let mut num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse().map_err(|_| Error::Parse {
            line: 0,
            message: format!("bad PGM {what} `{t}`"),
        })
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            line: 0,
            message: format!("PGM maxval {maxval} out of range"),
        });
    }
    let n = width * height;
    let mut raw = Vec::with_capacity(n);
    match magic.as_str() {
        "P5" => {
            pos += 1; // single whitespace after maxval
            let bpp = if maxval > 255 { 2 } else { 1 };
            let body = bytes.get(pos..pos + n * bpp).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("PGM body shorter than {width}x{height} samples"),
            })?;
            for chunk in body.chunks_exact(bpp) {
                raw.push(if bpp == 2 {
                    u16::from_be_bytes([chunk[0], chunk[1]]) as u32
                } else {
                    chunk[0] as u32
                });
            }
        }
        "P2" => {
            for _ in 0..n {
                raw.push(num(&mut pos, "sample")? as u32);
            }
        }
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported PGM magic `{other}`"),
            })
        }
    }
    let mm = T::lit(1e-3);
    let depths = raw.into_iter().map(|d| T::from_u32(d).unwrap_or_else(T::zero) * mm).collect();
    DepthImage::new(width, height, depths, intrinsics)
}

/// Writes a binary 16-bit PGM in millimeters (rounded, clamped to 65535).
pub fn write_pgm_depth<T: Real, W: Write>(img: &DepthImage<T>, w: &mut W) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", img.width, img.height)?;
    let mut body = Vec::with_capacity(img.depths.len() * 2);
    for &d in &img.depths {
        let mm = (d.to_f64_lossy() * 1000.0).round().clamp(0.0, 65535.0) as u16;
        body.extend_from_slice(&mm.to_be_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

/// Keeps the points inside or on `bounds`; also returns their original
/// indices.
pub fn passthrough_filter<T: Real>(cloud: &PointCloud<T>, bounds: &Aabb<T>) -> (PointCloud<T>, Vec<usize>) {
    let kept: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| bounds.contains(**p))
        .map(|(i, _)| i)
        .collect();
    (cloud.select(&kept), kept)
}

/// Replaces the points of every occupied voxel by their centroid.
///
/// Voxels are cubes of side `leaf` anchored at the cloud's minimum corner;
/// output is ordered by ascending `(ix, iy, iz)`. When the cloud carries
/// labels each voxel takes the most frequent one (smallest on ties). Normals
/// and curvatures are dropped.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, leaf: T) -> Result<PointCloud<T>> {
    if !(leaf > T::zero()) || !leaf.is_finite() {
        return Err(invalid_param("leaf", "must be positive"));
    }
    let Some(bounds) = cloud.bounds() else {
        return Ok(PointCloud::default());
    };
    let origin = bounds.min();
    // point sum, member count, label votes
    type Voxel<T> = (Vec3<T>, usize, BTreeMap<i64, usize>);
    let mut voxels: BTreeMap<(i64, i64, i64), Voxel<T>> = BTreeMap::new();
    let labels = cloud.labels();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = voxel_key(*p, origin, leaf);
        let e = voxels.entry(key).or_insert_with(|| (Vec3::zero(), 0, BTreeMap::new()));
        e.0 += *p;
        e.1 += 1;
        if let Some(l) = labels {
            *e.2.entry(l[i]).or_insert(0) += 1;
        }
    }
    let mut points = Vec::with_capacity(voxels.len());
    let mut out_labels = Vec::with_capacity(if labels.is_some() { voxels.len() } else { 0 });
    for (sum, count, votes) in voxels.into_values() {
        points.push(sum / T::from_count(count));
        if labels.is_some() {
            let (label, _) = votes
                .iter()
                .fold((0i64, 0usize), |best, (&l, &c)| if c > best.1 { (l, c) } else { best });
            out_labels.push(label);
        }
    }
    let out = PointCloud::from_trusted(points);
    if labels.is_some() {
        out.with_labels(out_labels)
    } else {
        Ok(out)
    }
}

/// Integer voxel coordinates of `p` in a grid anchored at `origin`.
pub fn voxel_key<T: Real>(p: Point3<T>, origin: Point3<T>, leaf: T) -> (i64, i64, i64) {
    let f = |v: T, o: T| ((v - o) / leaf).floor().to_i64().unwrap_or(0);
    (f(p.x, origin.x), f(p.y, origin.y), f(p.z, origin.z))
}

/// Plane `{ p : n·p + d = 0 }` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel<T> {
    pub normal: Vec3<T>,
    pub offset: T,
}

impl<T: Real> PlaneModel<T> {
    /// Plane through three points; `None` when they are (nearly) collinear.
    pub fn through(a: Point3<T>, b: Point3<T>, c: Point3<T>) -> Option<Self> {
        let ab = b - a;
        let ac = c - a;
        let n = ab.cross(ac);
        let scale = ab.norm_squared() * ac.norm_squared();
        if !(scale > T::zero()) || n.norm_squared() <= T::lit(1e-12) * scale {
            return None;
        }
        let normal = n.try_normalize()?;
        Some(Self {
            normal,
            offset: -normal.dot(a),
        })
    }

    #[inline]
    pub fn signed_distance(&self, p: Point3<T>) -> T {
        self.normal.dot(p) + self.offset
    }
}

/// Outcome of [`ransac_remove_plane`].
#[derive(Debug, Clone)]
pub struct PlaneRemoval<T> {
    pub plane: PlaneModel<T>,
    /// The input cloud without the plane's inliers.
    pub remaining: PointCloud<T>,
    /// Original indices of `remaining`.
    pub kept: Vec<usize>,
    /// Original indices of the deleted inliers.
    pub removed: Vec<usize>,
}

/// Finds the plane with the largest consensus among `iterations` seeded
/// three-point hypotheses and deletes its inliers (`|n·p + d| ≤ dist_thresh`).
///
/// Hypotheses are drawn up front from a ChaCha8 stream seeded with `seed`, so
/// the result depends only on the inputs even though scoring runs in
/// parallel. Ties keep the earliest hypothesis.
pub fn ransac_remove_plane<T: Real>(
    cloud: &PointCloud<T>,
    dist_thresh: T,
    iterations: usize,
    seed: u64,
) -> Result<PlaneRemoval<T>> {
    let n = cloud.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    if iterations == 0 {
        return Err(invalid_param("iterations", "must be at least 1"));
    }
    if !(dist_thresh >= T::zero()) {
        return Err(invalid_param("dist_thresh", "must be non-negative"));
    }
    let pts = cloud.points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hypotheses: Vec<Option<PlaneModel<T>>> = (0..iterations)
        .map(|_| {
            let s = rand::seq::index::sample(&mut rng, n, 3);
            PlaneModel::through(pts[s.index(0)], pts[s.index(1)], pts[s.index(2)])
        })
        .collect();

    let best = hypotheses
        .par_iter()
        .enumerate()
        .filter_map(|(it, h)| {
            h.map(|plane| {
                let count = pts
                    .iter()
                    .filter(|p| plane.signed_distance(**p).abs() <= dist_thresh)
                    .count();
                (count, it, plane)
            })
        })
        .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let Some((_, _, plane)) = best else {
        return Err(Error::DegenerateInput(format!(
            "all {iterations} RANSAC samples were collinear"
        )));
    };

    let (removed, kept): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| plane.signed_distance(pts[i]).abs() <= dist_thresh);
    Ok(PlaneRemoval {
        plane,
        remaining: cloud.select(&kept),
        kept,
        removed,
    })
}
