//! Depth, normal and point-to-plane errors against ground truth, and the
//! bilateral filter used as a classical baseline.
//!
//! Depth and normal errors compare maps on the same pixel grid. Values are
//! kept in meters internally and reported in millimeters.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::Serialize;

use crate::frame::Mask;
use crate::geometry::{compute_normals, deproject, DepthMap, Intrinsics};

pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [10.0, 20.0, 30.0];
/// Neighborhood radius of the point-to-plane error, meters.
pub const PLANE_RADIUS: f64 = 0.005;
/// Fewest neighbors (the point included) a plane is fitted to.
const MIN_PLANE_POINTS: usize = 3;

fn both_valid(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>, i: usize) -> bool {
    pred.data[i] > 0.0 && gt.data[i] > 0.0 && mask.is_none_or(|m| m.data[i])
}

/// Running sums of per-pixel depth errors; merge to aggregate over maps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DepthErrors {
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub count: usize,
}

impl DepthErrors {
    pub fn merge(&mut self, other: &Self) {
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    /// NaN when nothing overlapped.
    pub fn mae_mm(&self) -> f64 {
        1000.0 * self.sum_abs / self.count as f64
    }

    pub fn rmse_mm(&self) -> f64 {
        1000.0 * (self.sum_sq / self.count as f64).sqrt()
    }
}

/// Errors over pixels valid in both maps (and in `mask`, if given).
pub fn depth_errors(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>) -> DepthErrors {
    let mut e = DepthErrors::default();
    for i in 0..gt.data.len() {
        if both_valid(pred, gt, mask, i) {
            let r = pred.data[i] - gt.data[i];
            e.sum_abs += r.abs();
            e.sum_sq += r * r;
            e.count += 1;
        }
    }
    e
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalErrors {
    pub sum_deg: f64,
    /// Pixels under each of [`NORMAL_THRESHOLDS_DEG`].
    pub under: [usize; 3],
    pub count: usize,
}

impl NormalErrors {
    pub fn merge(&mut self, other: &Self) {
        self.sum_deg += other.sum_deg;
        for k in 0..3 {
            self.under[k] += other.under[k];
        }
        self.count += other.count;
    }

    pub fn mean_deg(&self) -> f64 {
        self.sum_deg / self.count as f64
    }

    pub fn pct_under(&self) -> [f64; 3] {
        self.under.map(|u| 100.0 * u as f64 / self.count as f64)
    }
}

/// Angle `acos |⟨n_pred, n_gt⟩|` between normals computed with the same
/// stencil on both maps.
pub fn normal_errors(pred: &DepthMap, gt: &DepthMap, intr: &Intrinsics, mask: Option<&Mask>) -> NormalErrors {
    let np = compute_normals(pred, intr);
    let ng = compute_normals(gt, intr);
    let mut e = NormalErrors::default();
    for i in 0..gt.data.len() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        if let (Some(a), Some(b)) = (np.normals[i], ng.normals[i]) {
            let deg = a.dot(&b).abs().min(1.0).acos().to_degrees();
            e.sum_deg += deg;
            for (k, t) in NORMAL_THRESHOLDS_DEG.iter().enumerate() {
                if deg < *t {
                    e.under[k] += 1;
                }
            }
            e.count += 1;
        }
    }
    e
}

/// Camera-frame points of valid pixels.
pub fn point_cloud(depth: &DepthMap, intr: &Intrinsics, mask: Option<&Mask>) -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            let d = depth.data[i];
            if d > 0.0 && mask.is_none_or(|m| m.data[i]) {
                if let Ok(p) = deproject(Vector2::new(x as f64, y as f64), d, intr) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

type Cell = (i64, i64, i64);

/// Uniform voxel hash over a point set.
pub struct VoxelGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> VoxelGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "voxel size must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key_of(p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn key_of(p: &Vector3<f64>, cell: f64) -> Cell {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices of points with `|q − p| ≤ r`, ascending.
    pub fn within(&self, p: &Vector3<f64>, r: f64) -> Vec<usize> {
        let a = Self::key_of(&(p - Vector3::repeat(r)), self.cell);
        let b = Self::key_of(&(p + Vector3::repeat(r)), self.cell);
        let mut out = Vec::new();
        for x in a.0..=b.0 {
            for y in a.1..=b.1 {
                for z in a.2..=b.2 {
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        out.extend(ids.iter().copied().filter(|&i| (self.points[i] - p).norm_squared() <= r * r));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Closest point; ties go to the lower index.
    pub fn nearest(&self, p: &Vector3<f64>) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::key_of(p, self.cell);
        let reach = [
            (c.0 - self.lo.0).abs(),
            (c.0 - self.hi.0).abs(),
            (c.1 - self.lo.1).abs(),
            (c.1 - self.hi.1).abs(),
            (c.2 - self.lo.2).abs(),
            (c.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap();
        let mut best: Option<(f64, usize)> = None;
        for k in 0..=reach {
            for x in c.0 - k..=c.0 + k {
                for y in c.1 - k..=c.1 + k {
                    for z in c.2 - k..=c.2 + k {
                        let shell = (x - c.0).abs() == k || (y - c.1).abs() == k || (z - c.2).abs() == k;
                        if !shell {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&(x, y, z)) else { continue };
                        for &i in ids {
                            let d = (self.points[i] - p).norm_squared();
                            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                                best = Some((d, i));
                            }
                        }
                    }
                }
            }
            // Anything in a later shell is at least k·cell away.
            if let Some((bd, _)) = best {
                let bound = k as f64 * self.cell;
                if bd < bound * bound {
                    break;
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

/// Least-squares plane through `pts`: `(centroid, unit normal)`.
pub fn fit_plane(pts: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    (c, eig.eigenvectors.column(k).into_owned())
}

/// Running sums of point-to-plane residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlaneErrors {
    pub sum_sq: f64,
    pub count: usize,
}

impl PlaneErrors {
    pub fn merge(&mut self, other: &Self) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn rmse_mm(&self) -> f64 {
        1000.0 * (self.sum_sq / self.count as f64).sqrt()
    }
}

/// Distance from `q` to the plane through `anchor` whose normal is fitted
/// to the neighbors.
fn plane_residual(gt: &[Vector3<f64>], nbrs: &[usize], anchor: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    let local: Vec<Vector3<f64>> = nbrs.iter().map(|&j| gt[j]).collect();
    let (_, n) = fit_plane(&local);
    (q - anchor).dot(&n)
}

/// For every ground-truth point with at least three neighbors within
/// `radius`, fits a normal to them and measures the distance from the
/// closest predicted point to the plane through the ground-truth point.
pub fn point_to_plane(pred: &[Vector3<f64>], gt: &[Vector3<f64>], radius: f64) -> PlaneErrors {
    let mut e = PlaneErrors::default();
    if pred.is_empty() || gt.is_empty() {
        return e;
    }
    let gt_grid = VoxelGrid::new(gt, radius);
    let pred_grid = VoxelGrid::new(pred, radius);
    for p in gt {
        let nbrs = gt_grid.within(p, radius);
        if nbrs.len() < MIN_PLANE_POINTS {
            continue;
        }
        let q = pred[pred_grid.nearest(p).expect("pred is nonempty")];
        let r = plane_residual(gt, &nbrs, p, &q);
        e.sum_sq += r * r;
        e.count += 1;
    }
    e
}

/// All-pairs reference for [`point_to_plane`].
pub fn point_to_plane_brute_force(pred: &[Vector3<f64>], gt: &[Vector3<f64>], radius: f64) -> PlaneErrors {
    let mut e = PlaneErrors::default();
    if pred.is_empty() {
        return e;
    }
    for p in gt {
        let nbrs: Vec<usize> = (0..gt.len())
            .filter(|&j| (gt[j] - p).norm_squared() <= radius * radius)
            .collect();
        if nbrs.len() < MIN_PLANE_POINTS {
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (i, q) in pred.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        let r = plane_residual(gt, &nbrs, p, &pred[best.1]);
        e.sum_sq += r * r;
        e.count += 1;
    }
    e
}

/// Bilateral filter over valid pixels; invalid pixels stay 0.
/// `sigma_spatial` is in pixels, `sigma_range` in meters.
pub fn bilateral_filter(depth: &DepthMap, sigma_spatial: f64, sigma_range: f64) -> DepthMap {
    assert!(sigma_spatial > 0.0 && sigma_range > 0.0, "bilateral sigmas must be positive");
    let (w, h) = (depth.width as isize, depth.height as isize);
    let rad = (3.0 * sigma_spatial).ceil() as isize;
    let ss = 2.0 * sigma_spatial * sigma_spatial;
    let sr = 2.0 * sigma_range * sigma_range;
    let mut out = DepthMap::zeros(depth.width, depth.height);
    for y in 0..h {
        for x in 0..w {
            let c = depth.data[(y * w + x) as usize];
            if c <= 0.0 {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -rad..=rad {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -rad..=rad {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let d = depth.data[(yy * w + xx) as usize];
                    if d <= 0.0 {
                        continue;
                    }
                    let wgt = (-((dx * dx + dy * dy) as f64) / ss - (d - c) * (d - c) / sr).exp();
                    num += wgt * d;
                    den += wgt;
                }
            }
            out.data[(y * w + x) as usize] = num / den;
        }
    }
    out
}

/// Table-style summary of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub normal_mean_deg: f64,
    pub pct_under_10: f64,
    pub pct_under_20: f64,
    pub pct_under_30: f64,
    pub point_to_plane_rmse_mm: f64,
    pub valid_pixel_count: usize,
}

/// Accumulates errors over many maps.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    pub depth: DepthErrors,
    pub normals: NormalErrors,
    pub plane: PlaneErrors,
    pub plane_radius: f64,
}

impl Evaluator {
    pub fn new(plane_radius: f64) -> Self {
        Self {
            plane_radius,
            ..Self::default()
        }
    }

    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap, intr: &Intrinsics, mask: Option<&Mask>) {
        self.depth.merge(&depth_errors(pred, gt, mask));
        self.normals.merge(&normal_errors(pred, gt, intr, mask));
        let pc = point_cloud(pred, intr, mask);
        let gc = point_cloud(gt, intr, mask);
        self.plane.merge(&point_to_plane(&pc, &gc, self.plane_radius));
    }

    pub fn report(&self) -> EvalReport {
        let pct = self.normals.pct_under();
        EvalReport {
            mae_mm: self.depth.mae_mm(),
            rmse_mm: self.depth.rmse_mm(),
            normal_mean_deg: self.normals.mean_deg(),
            pct_under_10: pct[0],
            pct_under_20: pct[1],
            pct_under_30: pct[2],
            point_to_plane_rmse_mm: self.plane.rmse_mm(),
            valid_pixel_count: self.depth.count,
        }
    }
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "method,mae_mm,rmse_mm,normal_mean_deg,pct_under_10,pct_under_20,pct_under_30,point_to_plane_rmse_mm,valid_pixel_count";

    pub fn csv_row(&self, method: &str) -> String {
        format!(
            "{method},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            self.mae_mm,
            self.rmse_mm,
            self.normal_mean_deg,
            self.pct_under_10,
            self.pct_under_20,
            self.pct_under_30,
            self.point_to_plane_rmse_mm,
            self.valid_pixel_count
        )
    }

    /// Fixed-width table with one row per method.
    pub fn table(rows: &[(&str, EvalReport)]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7} {:>9}",
            "method", "MAE mm", "RMSE mm", "mean deg", "<10%", "<20%", "<30%", "P2P mm"
        );
        for (name, r) in rows {
            let _ = writeln!(
                s,
                "{:<16} {:>9.2} {:>9.2} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>9.2}",
                name,
                r.mae_mm,
                r.rmse_mm,
                r.normal_mean_deg,
                r.pct_under_10,
                r.pct_under_20,
                r.pct_under_30,
                r.point_to_plane_rmse_mm
            );
        }
        s
    }
}
