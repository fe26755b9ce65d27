//! Exact k-nearest-neighbour search and PCA surface normals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::eigen::SymmetricEigen3;
use crate::error::{CalibError, Result};
use crate::geometry::PointCloud;
use crate::scalar::Real;

/// Neighbour count used for PCA normals.
pub const DEFAULT_NORMAL_K: usize = 40;

const LEAF_SIZE: usize = 8;

/// One k-NN hit: index into the indexed cloud and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T: Real> {
    pub index: usize,
    pub dist_sq: T,
}

#[derive(Debug, Clone)]
enum Node<T: Real> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: T, left: usize, right: usize },
}

/// Static k-d tree over a point cloud.
///
/// Queries are exact: results match a linear scan, ordered by ascending
/// distance with ties broken by the smaller point index.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

#[inline]
pub(crate) fn dist_sq<T: Real>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Copy)]
struct HeapItem<T: Real>(T, usize);

impl<T: Real> PartialEq for HeapItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for HeapItem<T> {}
impl<T: Real> PartialOrd for HeapItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for HeapItem<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&other.1))
    }
}

impl<T: Real> NeighborIndex<T> {
    pub fn build(cloud: &PointCloud<T>) -> Result<Self> {
        Self::from_points(cloud.points().to_vec())
    }

    pub fn from_points(points: Vec<Point3<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(CalibError::invalid("cannot index an empty cloud"));
        }
        let mut index = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) =
            (Point3::from(Vector3::repeat(T::max_value().unwrap())), Point3::from(Vector3::repeat(T::min_value().unwrap())));
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let spread = hi - lo;
        let axis = spread.iamax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
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

    pub fn point(&self, index: usize) -> &Point3<T> {
        &self.points[index]
    }

    /// The `k` nearest points to `query`, closest first. Returns every point
    /// when `k` exceeds the cloud size.
    pub fn knn(&self, query: &Point3<T>, k: usize) -> Vec<Neighbor<T>> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, query, k, &mut heap);
        heap.into_sorted_vec().into_iter().map(|HeapItem(dist_sq, index)| Neighbor { index, dist_sq }).collect()
    }

    fn knn_node(&self, node: usize, q: &Point3<T>, k: usize, heap: &mut BinaryHeap<HeapItem<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let item = HeapItem(dist_sq(q, &self.points[i]), i);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_node(far, q, k, heap);
                }
            }
        }
    }

    /// Nearest point within squared radius `max_dist_sq`, if any.
    pub fn nearest_within(&self, query: &Point3<T>, max_dist_sq: T) -> Option<Neighbor<T>> {
        let mut best = HeapItem(max_dist_sq, usize::MAX);
        self.nearest_node(0, query, &mut best);
        (best.1 != usize::MAX).then_some(Neighbor { index: best.1, dist_sq: best.0 })
    }

    pub fn nearest(&self, query: &Point3<T>) -> Neighbor<T> {
        self.nearest_within(query, T::max_value().unwrap()).expect("index is non-empty")
    }

    fn nearest_node(&self, node: usize, q: &Point3<T>, best: &mut HeapItem<T>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist_sq(q, &self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = HeapItem(d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.nearest_node(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_node(far, q, best);
                }
            }
        }
    }
}

/// A point with a unit surface normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedPoint<T: Real> {
    pub position: Point3<T>,
    pub normal: Vector3<T>,
}

/// PCA normals from the `k` nearest neighbours (the point itself included),
/// each flipped to face `viewpoint`.
pub fn estimate_normals<T: Real>(cloud: &PointCloud<T>, k: usize, viewpoint: &Point3<T>) -> Result<Vec<OrientedPoint<T>>> {
    if k < 3 {
        return Err(CalibError::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    if cloud.len() < k {
        return Err(CalibError::invalid(format!("normal estimation needs at least k = {k} points, cloud has {}", cloud.len())));
    }
    let index = NeighborIndex::build(cloud)?;
    Ok(estimate_normals_indexed(&index, k, viewpoint))
}

pub fn estimate_normals_indexed<T: Real>(index: &NeighborIndex<T>, k: usize, viewpoint: &Point3<T>) -> Vec<OrientedPoint<T>> {
    let inv_k = T::one() / T::count(k.min(index.len()));
    index
        .points()
        .iter()
        .map(|p| {
            let hits = index.knn(p, k);
            let centroid = hits.iter().fold(Vector3::zeros(), |acc, h| acc + index.point(h.index).coords) * inv_k;
            let cov = hits.iter().fold(Matrix3::zeros(), |acc, h| {
                let d = index.point(h.index).coords - centroid;
                acc + d * d.transpose()
            });
            let mut normal = SymmetricEigen3::new(&cov).min_vector();
            if normal.dot(&(viewpoint - p)) < T::zero() {
                normal = -normal;
            }
            OrientedPoint { position: *p, normal }
        })
        .collect()
}
