//! Spatial primitives: point clouds, axis-aligned boxes, a uniform-grid
//! point index with exact radius queries, box membership, and the two IoU
//! flavors (point-mask IoU and box-volume IoU).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};

/// Tolerance for the unit-normal invariant.
const NORMAL_TOL: f64 = 1e-6;

/// A point cloud of N points with positions (meters), colors in `[0,1]^3`
/// and unit normals. All three arrays share the same length N >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl PointCloud {
    /// Validating constructor: equal lengths, N >= 1, finite positions,
    /// colors in `[0,1]`, normals unit within 1e-6.
    pub fn new(positions: Vec<Vec3>, colors: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::RejectedInput("empty point cloud".into()));
        }
        if positions.len() != colors.len() || positions.len() != normals.len() {
            return Err(Error::RejectedInput(format!(
                "array lengths differ: {} positions, {} colors, {} normals",
                positions.len(),
                colors.len(),
                normals.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !linalg::is_finite(*p) {
                return Err(Error::RejectedInput(format!(
                    "non-finite position at index {i}"
                )));
            }
        }
        for (i, c) in colors.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::RejectedInput(format!(
                    "color out of [0,1] at index {i}"
                )));
            }
        }
        for (i, n) in normals.iter().enumerate() {
            if !linalg::is_finite(*n) || (linalg::norm(*n) - 1.0).abs() > NORMAL_TOL {
                return Err(Error::RejectedInput(format!(
                    "normal at index {i} is not unit length"
                )));
            }
        }
        Ok(Self {
            positions,
            colors,
            normals,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Axis-aligned box stored as two corners, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !linalg::is_finite(min) || !linalg::is_finite(max) {
            return Err(Error::RejectedInput("non-finite box corner".into()));
        }
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::RejectedInput(format!(
                "box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// Tight box of a nonempty set of points.
    pub fn tight(points: impl IntoIterator<Item = Vec3>) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::RejectedInput("tight box of empty point set".into()))?;
        let mut min = first;
        let mut max = first;
        for p in it {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        Aabb::new(min, max)
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    /// Closed-box membership: faces count as inside.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    /// The 8 corner vertices.
    pub fn vertices(&self) -> [Vec3; 8] {
        let (lo, hi) = (self.min, self.max);
        [
            [lo[0], lo[1], lo[2]],
            [hi[0], lo[1], lo[2]],
            [lo[0], hi[1], lo[2]],
            [hi[0], hi[1], lo[2]],
            [lo[0], lo[1], hi[2]],
            [hi[0], lo[1], hi[2]],
            [lo[0], hi[1], hi[2]],
            [hi[0], hi[1], hi[2]],
        ]
    }

    pub fn volume(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1]) * (self.max[2] - self.min[2])
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        let mut v = 1.0;
        for i in 0..3 {
            let lo = self.min[i].max(other.min[i]);
            let hi = self.max[i].min(other.max[i]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }

    /// Grow the box by `pad` on every face.
    pub fn inflated(&self, pad: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - pad, self.min[1] - pad, self.min[2] - pad],
            max: [self.max[0] + pad, self.max[1] + pad, self.max[2] + pad],
        }
    }
}

/// Uniform-grid spatial hash over a point cloud. Immutable after
/// construction; every point index lives in exactly one cell.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl GridIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, coord: [i64; 3]) -> &[usize] {
        self.cells.get(&coord).map(Vec::as_slice).unwrap_or(&[])
    }

    fn key(&self, p: Vec3) -> [i64; 3] {
        [
            (p[0] / self.cell_size).floor() as i64,
            (p[1] / self.cell_size).floor() as i64,
            (p[2] / self.cell_size).floor() as i64,
        ]
    }
}

/// Build a uniform-grid index; query correctness is independent of
/// `cell_size` (a sensible default is the intended query radius).
pub fn build_grid(cloud: &PointCloud, cell_size: f64) -> Result<GridIndex> {
    let valid = cell_size.is_finite() && cell_size > 0.0;
    if !valid {
        return Err(Error::Config(format!(
            "grid cell_size must be positive and finite, got {cell_size}"
        )));
    }
    let mut index = GridIndex {
        cell_size,
        cells: HashMap::new(),
    };
    for (i, &p) in cloud.positions.iter().enumerate() {
        let key = index.key(p);
        index.cells.entry(key).or_default().push(i);
    }
    Ok(index)
}

/// All points strictly within `r` of point `center_idx` (the center itself
/// excluded), as ascending global indices. Exact: matches brute force.
pub fn radius_neighbors(
    index: &GridIndex,
    cloud: &PointCloud,
    center_idx: usize,
    r: f64,
) -> Result<Vec<usize>> {
    if center_idx >= cloud.len() {
        return Err(Error::IndexOutOfRange {
            index: center_idx,
            len: cloud.len(),
        });
    }
    let valid = r.is_finite() && r > 0.0;
    if !valid {
        return Err(Error::Config(format!("radius must be positive, got {r}")));
    }
    let center = cloud.positions[center_idx];
    let r_sq = r * r;
    let cs = index.cell_size;
    let lo = [
        ((center[0] - r) / cs).floor() as i64,
        ((center[1] - r) / cs).floor() as i64,
        ((center[2] - r) / cs).floor() as i64,
    ];
    let hi = [
        ((center[0] + r) / cs).floor() as i64,
        ((center[1] + r) / cs).floor() as i64,
        ((center[2] + r) / cs).floor() as i64,
    ];
    let mut out = Vec::new();
    for cx in lo[0]..=hi[0] {
        for cy in lo[1]..=hi[1] {
            for cz in lo[2]..=hi[2] {
                for &j in index.cell([cx, cy, cz]) {
                    if j != center_idx
                        && linalg::dist_sq(cloud.positions[j], center) < r_sq
                    {
                        out.push(j);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Indices of cloud points inside the closed box, ascending.
pub fn points_in_box(cloud: &PointCloud, aabb: &Aabb) -> Vec<usize> {
    cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| aabb.contains(**p))
        .map(|(i, _)| i)
        .collect()
}

/// IoU of two point-index masks given as sorted, deduplicated slices.
/// Errors when both are empty (the ratio is undefined, not zero).
pub fn mask_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::UndefinedIou);
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Volume IoU of two boxes; errors when the union has zero volume.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> Result<f64> {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return Err(Error::UndefinedIou);
    }
    Ok(inter / union)
}
