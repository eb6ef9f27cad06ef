//! Geometry-aware extraction of surface points from the radiance field's
//! density, used to seed Gaussian primitives densely and evenly.
//!
//! The scan walks the three axis-aligned edge families of a uniform lattice
//! over the field bounds; an edge crossing the density threshold emits a
//! linearly interpolated surface point.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::field::RadianceField;
use crate::geometry::{backproject, CameraIntrinsics, Pose, RGBDFrame};
use crate::{Error, Result};

/// Surface extraction parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    /// Density threshold for surface transitions.
    pub tau_grid: f64,
    /// Edge length of the scan lattice, meters.
    pub grid_size: f64,
    /// Deduplication spacing, meters.
    pub min_point_spacing: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            tau_grid: 0.001,
            grid_size: 0.01,
            min_point_spacing: 0.01,
        }
    }
}

impl SamplingConfig {
    pub fn with_grid_size(grid_size: f64) -> Self {
        SamplingConfig {
            tau_grid: 0.001,
            grid_size,
            min_point_spacing: grid_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_grid <= 0.0 && self.tau_grid != 0.0 {
            return Err(Error::InvalidInput("tau_grid must be non-negative".into()));
        }
        if self.grid_size <= 0.0 {
            return Err(Error::InvalidInput("grid_size must be positive".into()));
        }
        Ok(())
    }
}

/// Surface points with field-sampled colors.
#[derive(Debug, Clone, Default)]
pub struct SurfacePointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl SurfacePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Linear interpolation of the threshold crossing on edge `(x1, x2)`:
/// `x1 + (tau - s1)/(s2 - s1) * (x2 - x1)`.
pub fn crossing_point(
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
    s1: f64,
    s2: f64,
    tau: f64,
) -> Result<Vector3<f64>> {
    if s1 == s2 {
        return Err(Error::DegenerateEdge(s1));
    }
    let above1 = s1 > tau;
    let above2 = s2 > tau;
    if above1 == above2 {
        return Err(Error::NotACrossing { s1, s2, tau });
    }
    let t = (tau - s1) / (s2 - s1);
    Ok(x1 + (x2 - x1) * t)
}

/// Deduplicating collector: keeps the first point per voxel cell of edge
/// `spacing`, in insertion order.
struct VoxelDedup {
    spacing: f64,
    seen: HashSet<(i64, i64, i64)>,
    cloud: SurfacePointCloud,
}

impl VoxelDedup {
    fn new(spacing: f64) -> Self {
        VoxelDedup {
            spacing,
            seen: HashSet::new(),
            cloud: SurfacePointCloud::default(),
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p[0] / self.spacing).floor() as i64,
            (p[1] / self.spacing).floor() as i64,
            (p[2] / self.spacing).floor() as i64,
        )
    }

    fn push(&mut self, p: Vector3<f64>, color: [f64; 3]) {
        if self.seen.insert(self.key(&p)) {
            self.cloud.points.push(p);
            self.cloud.colors.push(color);
        }
    }
}

fn lattice_dims(field: &RadianceField, grid_size: f64) -> [usize; 3] {
    let ext = field.bounds.extent();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((ext[a] / grid_size).floor() as usize + 1).max(2);
    }
    dims
}

fn lattice_point(field: &RadianceField, grid_size: f64, i: usize, j: usize, k: usize) -> Vector3<f64> {
    field.bounds.min + Vector3::new(i as f64, j as f64, k as f64) * grid_size
}

/// Evaluates one z-plane of lattice densities, rows in parallel.
fn eval_plane(field: &RadianceField, grid_size: f64, dims: &[usize; 3], k: usize) -> Vec<f64> {
    (0..dims[1])
        .into_par_iter()
        .flat_map_iter(|j| {
            let field = &field;
            (0..dims[0]).map(move |i| {
                field.query_density(&lattice_point(field, grid_size, i, j, k))
            })
        })
        .collect()
}

/// Scans every axis-aligned lattice edge for density threshold crossings
/// and emits interpolated surface points with field-sampled colors,
/// deduplicated by voxel hashing at `min_point_spacing`.
pub fn extract_surface_points(field: &RadianceField, cfg: &SamplingConfig) -> Result<SurfacePointCloud> {
    cfg.validate()?;
    if !field.bounds.extent().iter().all(|e| e.is_finite() && *e > 0.0) {
        return Err(Error::InvalidInput("field bounds must be finite".into()));
    }
    let dims = lattice_dims(field, cfg.grid_size);
    let mut dedup = VoxelDedup::new(cfg.min_point_spacing);

    let emit = |dedup: &mut VoxelDedup, x1: Vector3<f64>, x2: Vector3<f64>, s1: f64, s2: f64| {
        if (s1 > cfg.tau_grid) != (s2 > cfg.tau_grid) && s1 != s2 {
            if let Ok(x) = crossing_point(&x1, &x2, s1, s2, cfg.tau_grid) {
                let (_, color) = field.query(&x);
                dedup.push(x, color);
            }
        }
    };

    let mut plane = eval_plane(field, cfg.grid_size, &dims, 0);
    for k in 0..dims[2] {
        // In-plane x edges, then y edges, scanned in (y, x) order.
        for j in 0..dims[1] {
            for i in 0..dims[0] - 1 {
                let s1 = plane[j * dims[0] + i];
                let s2 = plane[j * dims[0] + i + 1];
                emit(
                    &mut dedup,
                    lattice_point(field, cfg.grid_size, i, j, k),
                    lattice_point(field, cfg.grid_size, i + 1, j, k),
                    s1,
                    s2,
                );
            }
        }
        for j in 0..dims[1] - 1 {
            for i in 0..dims[0] {
                let s1 = plane[j * dims[0] + i];
                let s2 = plane[(j + 1) * dims[0] + i];
                emit(
                    &mut dedup,
                    lattice_point(field, cfg.grid_size, i, j, k),
                    lattice_point(field, cfg.grid_size, i, j + 1, k),
                    s1,
                    s2,
                );
            }
        }
        // z edges to the next plane.
        if k + 1 < dims[2] {
            let next = eval_plane(field, cfg.grid_size, &dims, k + 1);
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let s1 = plane[j * dims[0] + i];
                    let s2 = next[j * dims[0] + i];
                    emit(
                        &mut dedup,
                        lattice_point(field, cfg.grid_size, i, j, k),
                        lattice_point(field, cfg.grid_size, i, j, k + 1),
                        s1,
                        s2,
                    );
                }
            }
            plane = next;
        }
    }
    Ok(dedup.cloud)
}

/// Uniform occupancy sampling without surface selection: every lattice
/// point whose density exceeds both `tau_grid` and twice the field's
/// untrained baseline becomes a point. With `tau_grid = 0` this is the
/// naive initialization baseline the sampling ablation compares against.
pub fn naive_density_points(field: &RadianceField, cfg: &SamplingConfig) -> Result<SurfacePointCloud> {
    cfg.validate()?;
    let dims = lattice_dims(field, cfg.grid_size);
    let floor = cfg.tau_grid.max(2.0 * field.baseline_density());
    let mut dedup = VoxelDedup::new(cfg.min_point_spacing);
    for k in 0..dims[2] {
        let plane = eval_plane(field, cfg.grid_size, &dims, k);
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let s = plane[j * dims[0] + i];
                if s > floor {
                    let p = lattice_point(field, cfg.grid_size, i, j, k);
                    let (_, color) = field.query(&p);
                    dedup.push(p, color);
                }
            }
        }
    }
    Ok(dedup.cloud)
}

/// Backprojects every `downsample`-th valid-depth pixel of every frame,
/// with colors from the RGB image, deduplicated like the lattice scan.
pub fn backproject_init(
    frames: &[(RGBDFrame, Pose)],
    intr: &CameraIntrinsics,
    downsample: usize,
    min_point_spacing: f64,
) -> SurfacePointCloud {
    let step = downsample.max(1);
    let mut dedup = VoxelDedup::new(min_point_spacing);
    for (frame, pose) in frames {
        for v in (0..frame.height()).step_by(step) {
            for u in (0..frame.width()).step_by(step) {
                let d = frame.depth.get(u, v);
                if d <= 0.0 {
                    continue;
                }
                if let Ok(p) = backproject((u as f64 + 0.5, v as f64 + 0.5), d, intr, pose) {
                    dedup.push(p, frame.color.get(u, v));
                }
            }
        }
    }
    dedup.cloud
}

/// Writes the cloud as ASCII PLY: `x y z red green blue` per vertex with
/// 0-255 integer colors.
pub fn export_ply(cloud: &SurfacePointCloud, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for (p, c) in cloud.points.iter().zip(cloud.colors.iter()) {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0],
            p[1],
            p[2],
            (c[0] * 255.0).round().clamp(0.0, 255.0) as u8,
            (c[1] * 255.0).round().clamp(0.0, 255.0) as u8,
            (c[2] * 255.0).round().clamp(0.0, 255.0) as u8,
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
