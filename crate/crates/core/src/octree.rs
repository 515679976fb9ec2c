//! Fixed-max-depth octree over a point set.
//!
//! Nodes split into the eight octants of their cube only while they hold two
//! or more points and depth remains. A point lying exactly on a splitting
//! plane goes to the child on the larger-coordinate side. Queries are exact:
//! radius search returns precisely `{ i : |p_i - q|² ≤ r² }`, evaluated with
//! the same floating-point expression a linear scan would use.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::{Aabb, PointCloud};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::scalar::Real;

pub const MAX_SUPPORTED_DEPTH: usize = 21;
const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node<T> {
    bounds: Aabb<T>,
    start: u32,
    end: u32,
    depth: u8,
    children: [u32; 8],
}

impl<T> Node<T> {
    fn is_leaf(&self) -> bool {
        self.children.iter().all(|&c| c == NO_CHILD)
    }
}

/// Index-addressed octree. Point indices refer to the slice it was built
/// from.
#[derive(Debug, Clone)]
pub struct Octree<T> {
    nodes: Vec<Node<T>>,
    /// Point indices, grouped so that every node owns a contiguous range.
    order: Vec<u32>,
    /// Points in `order` sequence.
    sorted: Vec<Point3<T>>,
    max_depth: usize,
}

/// Neighbor queries shared by the octree and the brute-force baseline.
pub trait NeighborSearch<T: Real>: Sync {
    /// Appends `{ i : |p_i - query| ≤ radius }` to `out` in ascending index
    /// order. `out` is cleared first.
    fn radius_search_into(&self, query: Point3<T>, radius: T, out: &mut Vec<usize>);

    /// The `min(k, n)` nearest indices, ascending by distance, ties by index.
    fn knn_search(&self, query: Point3<T>, k: usize) -> Vec<usize>;

    fn radius_search(&self, query: Point3<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_search_into(query, radius, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF<T>(T);

impl<T: PartialOrd> Eq for OrdF<T> {}

impl<T: PartialOrd> PartialOrd for OrdF<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: PartialOrd> Ord for OrdF<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal)
    }
}

impl<T: Real> Octree<T> {
    pub fn build(cloud: &PointCloud<T>, max_depth: usize) -> Result<Self> {
        Self::from_points(cloud.points(), max_depth)
    }

    pub fn from_points(points: &[Point3<T>], max_depth: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(1..=MAX_SUPPORTED_DEPTH).contains(&max_depth) {
            return Err(invalid_param(
                "max_depth",
                format!("{max_depth} outside [1, {MAX_SUPPORTED_DEPTH}]"),
            ));
        }
        if points.len() >= u32::MAX as usize {
            return Err(invalid_param("points", "too many points for a u32 index"));
        }

        let root = root_cube(points);
        let mut tree = Octree {
            nodes: Vec::new(),
            order: (0..points.len() as u32).collect(),
            sorted: Vec::new(),
            max_depth,
        };
        tree.nodes.push(Node {
            bounds: root,
            start: 0,
            end: points.len() as u32,
            depth: 0,
            children: [NO_CHILD; 8],
        });
        let mut scratch = Vec::with_capacity(points.len());
        tree.subdivide(0, points, &mut scratch);
        tree.sorted = tree.order.iter().map(|&i| points[i as usize]).collect();
        Ok(tree)
    }

    fn subdivide(&mut self, node_id: usize, points: &[Point3<T>], scratch: &mut Vec<u32>) {
        let (start, end, depth, bounds) = {
            let n = &self.nodes[node_id];
            (n.start as usize, n.end as usize, n.depth as usize, n.bounds)
        };
        if end - start < 2 || depth >= self.max_depth {
            return;
        }
        let lo = bounds.min();
        let hi = bounds.max();
        let c = bounds.center();
        let octant = |p: Point3<T>| -> usize {
            (p.x >= c.x) as usize | (((p.y >= c.y) as usize) << 1) | (((p.z >= c.z) as usize) << 2)
        };

        // Stable counting sort of the node's range by octant.
        let mut counts = [0usize; 8];
        for &i in &self.order[start..end] {
            counts[octant(points[i as usize])] += 1;
        }
        let mut offsets = [0usize; 8];
        for o in 1..8 {
            offsets[o] = offsets[o - 1] + counts[o - 1];
        }
        scratch.clear();
        scratch.resize(end - start, 0);
        let mut cursor = offsets;
        for &i in &self.order[start..end] {
            let o = octant(points[i as usize]);
            scratch[cursor[o]] = i;
            cursor[o] += 1;
        }
        self.order[start..end].copy_from_slice(scratch);

        let mut children = [NO_CHILD; 8];
        for o in 0..8 {
            if counts[o] == 0 {
                continue;
            }
            let pick = |bit: usize, l: T, m: T, h: T| if o & bit != 0 { (m, h) } else { (l, m) };
            let (x0, x1) = pick(1, lo.x, c.x, hi.x);
            let (y0, y1) = pick(2, lo.y, c.y, hi.y);
            let (z0, z1) = pick(4, lo.z, c.z, hi.z);
            let child_bounds = Aabb::new(Vec3::new(x0, y0, z0), Vec3::new(x1, y1, z1)).expect("octant of a valid box");
            children[o] = self.nodes.len() as u32;
            self.nodes.push(Node {
                bounds: child_bounds,
                start: (start + offsets[o]) as u32,
                end: (start + offsets[o] + counts[o]) as u32,
                depth: (depth + 1) as u8,
                children: [NO_CHILD; 8],
            });
        }
        self.nodes[node_id].children = children;
        for child in children.into_iter().filter(|&c| c != NO_CHILD) {
            self.subdivide(child as usize, points, scratch);
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn bounds(&self) -> Aabb<T> {
        self.nodes[0].bounds
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Depth of the deepest node actually created.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    /// Each leaf's cube and the indices it holds, in depth-first order.
    pub fn leaves(&self) -> Vec<(Aabb<T>, Vec<usize>)> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if n.is_leaf() {
                let idx = self.order[n.start as usize..n.end as usize].iter().map(|&i| i as usize).collect();
                out.push((n.bounds, idx));
            } else {
                stack.extend(n.children.iter().rev().copied().filter(|&c| c != NO_CHILD));
            }
        }
        out
    }

    /// One point per occupied leaf: the mean of its members.
    pub fn voxel_centroids(&self) -> Vec<Point3<T>> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| {
                let members = &self.sorted[n.start as usize..n.end as usize];
                let mut s = Vec3::zero();
                for p in members {
                    s += *p;
                }
                s / T::from_count(members.len())
            })
            .collect()
    }

    /// Calls `f` for every index within `radius` of `query` (unordered).
    pub fn for_each_within(&self, query: Point3<T>, radius: T, mut f: impl FnMut(usize)) {
        let r2 = radius * radius;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if n.bounds.distance_squared(query) > r2 {
                continue;
            }
            let (s, e) = (n.start as usize, n.end as usize);
            if n.bounds.max_distance_squared(query) <= r2 {
                for &i in &self.order[s..e] {
                    f(i as usize);
                }
                continue;
            }
            if n.is_leaf() {
                for k in s..e {
                    if self.sorted[k].distance_squared(query) <= r2 {
                        f(self.order[k] as usize);
                    }
                }
            } else {
                stack.extend(n.children.iter().copied().filter(|&c| c != NO_CHILD));
            }
        }
    }

    /// Whether any point lies within `radius` of `query`.
    pub fn any_within(&self, query: Point3<T>, radius: T) -> bool {
        let r2 = radius * radius;
        let mut stack: Vec<u32> = vec![0];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if n.bounds.distance_squared(query) > r2 {
                continue;
            }
            if n.is_leaf() {
                if self.sorted[n.start as usize..n.end as usize]
                    .iter()
                    .any(|p| p.distance_squared(query) <= r2)
                {
                    return true;
                }
            } else {
                stack.extend(n.children.iter().copied().filter(|&c| c != NO_CHILD));
            }
        }
        false
    }

    /// Index and distance of the nearest point (ties by lower index).
    pub fn nearest(&self, query: Point3<T>) -> (usize, T) {
        let (d2, i) = self.knn_with_distances(query, 1)[0];
        (i, d2.sqrt())
    }

    /// `(squared distance, index)` of the `min(k, n)` nearest points.
    pub fn knn_with_distances(&self, query: Point3<T>, k: usize) -> Vec<(T, usize)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        // Sorted ascending by (d², index); the last entry is the current worst.
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        let mut heap = BinaryHeap::new();
        heap.push(std::cmp::Reverse((OrdF(self.nodes[0].bounds.distance_squared(query)), 0u32)));
        while let Some(std::cmp::Reverse((OrdF(box_d2), id))) = heap.pop() {
            if best.len() == k && box_d2 > best[k - 1].0 {
                break;
            }
            let n = &self.nodes[id as usize];
            if n.is_leaf() {
                for pos in n.start as usize..n.end as usize {
                    let cand = (self.sorted[pos].distance_squared(query), self.order[pos] as usize);
                    if best.len() == k && !less(cand, best[k - 1]) {
                        continue;
                    }
                    let at = best.partition_point(|b| less(*b, cand));
                    best.insert(at, cand);
                    best.truncate(k);
                }
            } else {
                for &c in n.children.iter().filter(|&&c| c != NO_CHILD) {
                    let d2 = self.nodes[c as usize].bounds.distance_squared(query);
                    if best.len() < k || d2 <= best[k - 1].0 {
                        heap.push(std::cmp::Reverse((OrdF(d2), c)));
                    }
                }
            }
        }
        best
    }
}

#[inline]
fn less<T: Real>(a: (T, usize), b: (T, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl<T: Real> NeighborSearch<T> for Octree<T> {
    fn radius_search_into(&self, query: Point3<T>, radius: T, out: &mut Vec<usize>) {
        out.clear();
        self.for_each_within(query, radius, |i| out.push(i));
        out.sort_unstable();
    }

    fn knn_search(&self, query: Point3<T>, k: usize) -> Vec<usize> {
        self.knn_with_distances(query, k).into_iter().map(|(_, i)| i).collect()
    }
}

/// Brute-force neighbor search over a borrowed point slice.
#[derive(Debug, Clone, Copy)]
pub struct LinearScan<'a, T> {
    points: &'a [Point3<T>],
}

impl<'a, T: Real> LinearScan<'a, T> {
    pub fn new(points: &'a [Point3<T>]) -> Self {
        Self { points }
    }
}

impl<T: Real> NeighborSearch<T> for LinearScan<'_, T> {
    fn radius_search_into(&self, query: Point3<T>, radius: T, out: &mut Vec<usize>) {
        let r2 = radius * radius;
        out.clear();
        out.extend(
            self.points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.distance_squared(query) <= r2)
                .map(|(i, _)| i),
        );
    }

    fn knn_search(&self, query: Point3<T>, k: usize) -> Vec<usize> {
        let mut all: Vec<(T, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.distance_squared(query), i))
            .collect();
        all.sort_by(|a, b| OrdF(a.0).cmp(&OrdF(b.0)).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

/// Cube around the points' bounds, grown slightly so that every point is
/// strictly representable inside it.
fn root_cube<T: Real>(points: &[Point3<T>]) -> Aabb<T> {
    let bb = Aabb::from_points(points).expect("non-empty");
    let c = bb.center();
    let half = bb.extent().max_component() * T::lit(0.5);
    let scale = T::one().max(c.x.abs()).max(c.y.abs()).max(c.z.abs());
    let mut pad = T::epsilon() * T::lit(4.0) * scale;
    loop {
        let h = half * (T::one() + T::lit(1e-9)) + pad;
        let cube = Aabb::new(c - Vec3::splat(h), c + Vec3::splat(h)).expect("finite cube");
        if cube.contains(bb.min()) && cube.contains(bb.max()) {
            return cube;
        }
        pad *= T::lit(2.0);
    }
}
