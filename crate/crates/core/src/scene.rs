//! Synthetic test scenes, a ray-traced oracle renderer producing
//! ground-truth RGB-D, trajectory generation with an odometry drift model,
//! and TUM-format dataset ingestion.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, ColorImage, DepthImage, Pose, RGBDFrame, Trajectory};
use crate::{Error, Result};

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box(Aabb),
    Sphere { center: Vector3<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Marks the primitive placed deliberately to shadow a wall region from
    /// the camera path (the hole-filling test bed).
    pub occluder: bool,
}

impl ScenePrimitive {
    pub fn bounds(&self) -> Aabb {
        match &self.shape {
            Shape::Box(b) => *b,
            Shape::Sphere { center, radius } => Aabb::new(
                center - Vector3::repeat(*radius),
                center + Vector3::repeat(*radius),
            ),
        }
    }
}

/// A closed room with colored walls and a handful of boxes and spheres.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub room: Aabb,
    pub primitives: Vec<ScenePrimitive>,
    pub background: [f64; 3],
    /// Per-face wall colors, ordered -x, +x, -y, +y, -z, +z.
    pub wall_colors: [[f64; 3]; 6],
    pub light_dir: Vector3<f64>,
}

const AMBIENT: f64 = 0.45;
const DIFFUSE: f64 = 0.55;

impl SyntheticScene {
    pub fn shade(color: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>) -> [f64; 3] {
        let lambert = normal.dot(light).max(0.0);
        let k = AMBIENT + DIFFUSE * lambert;
        [color[0] * k, color[1] * k, color[2] * k]
    }

    pub fn has_occluder(&self) -> bool {
        self.primitives.iter().any(|p| p.occluder)
    }
}

/// Deterministic scene for a given seed: a room with 3-8 colored
/// boxes/spheres including at least one wall occluder.
pub fn generate_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let half_xy = 1.7 + rng.gen::<f64>() * 0.4;
    let half_z = 1.2 + rng.gen::<f64>() * 0.2;
    let room = Aabb::new(
        Vector3::new(-half_xy, -half_xy, -half_z),
        Vector3::new(half_xy, half_xy, half_z),
    );

    let palette: [[f64; 3]; 8] = [
        [0.85, 0.25, 0.20],
        [0.20, 0.65, 0.85],
        [0.25, 0.75, 0.30],
        [0.90, 0.75, 0.20],
        [0.70, 0.30, 0.80],
        [0.90, 0.50, 0.25],
        [0.25, 0.30, 0.85],
        [0.80, 0.80, 0.78],
    ];
    let wall_colors = [
        [0.75, 0.55, 0.45],
        [0.45, 0.65, 0.75],
        [0.60, 0.72, 0.50],
        [0.72, 0.60, 0.68],
        [0.50, 0.50, 0.55],
        [0.82, 0.80, 0.72],
    ];

    let mut primitives = Vec::new();

    // One guaranteed occluder: a box floating in front of the +x wall,
    // shadowing a wall patch from the central camera path.
    let occ_half = Vector3::new(0.10 + rng.gen::<f64>() * 0.05, 0.28, 0.28);
    let occ_center = Vector3::new(half_xy - 0.55, (rng.gen::<f64>() - 0.5) * 0.8, 0.0);
    primitives.push(ScenePrimitive {
        shape: Shape::Box(Aabb::new(occ_center - occ_half, occ_center + occ_half)),
        color: palette[0],
        occluder: true,
    });

    // Remaining props hug the walls so the central orbit stays free.
    let extra = 2 + (rng.gen::<u32>() % 6) as usize; // total 3..=8
    for k in 0..extra {
        let color = palette[(k + 1) % palette.len()];
        let wall = rng.gen::<u32>() % 4;
        let along = (rng.gen::<f64>() - 0.5) * (half_xy * 1.2);
        let size = 0.18 + rng.gen::<f64>() * 0.22;
        let gap = 0.02 + rng.gen::<f64>() * 0.08;
        let dist = half_xy - size - gap;
        let (cx, cy) = match wall {
            0 => (dist, along),
            1 => (-dist, along),
            2 => (along, dist),
            _ => (along, -dist),
        };
        let cz = -half_z + size + rng.gen::<f64>() * 0.7;
        let center = Vector3::new(cx, cy, cz);
        let shape = if rng.gen::<bool>() {
            Shape::Box(Aabb::new(
                center - Vector3::repeat(size),
                center + Vector3::repeat(size),
            ))
        } else {
            Shape::Sphere {
                center,
                radius: size,
            }
        };
        primitives.push(ScenePrimitive {
            shape,
            color,
            occluder: false,
        });
    }

    SyntheticScene {
        room,
        primitives,
        background: [0.02, 0.02, 0.03],
        wall_colors,
        light_dir: Vector3::new(0.35, -0.45, 0.82).normalize(),
    }
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

fn intersect_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    b: &Aabb,
) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let mut t0 = (b.min[axis] - origin[axis]) * inv;
        let mut t1 = (b.max[axis] - origin[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-9 {
        return None;
    }
    let hit = origin + dir * t_near;
    let mut normal = Vector3::zeros();
    normal[near_axis] =
        if hit[near_axis] - b.min[near_axis] < (b.max[near_axis] - b.min[near_axis]) * 0.5 {
            -1.0
        } else {
            1.0
        };
    Some((t_near, normal))
}

fn intersect_sphere(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<(f64, Vector3<f64>)> {
    let oc = origin - center;
    let a = dir.dot(dir);
    let b = 2.0 * oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    let t = if t0 > 1e-9 {
        t0
    } else if t1 > 1e-9 {
        t1
    } else {
        return None;
    };
    let normal = (origin + dir * t - center).normalize();
    Some((t, normal))
}

/// Exit intersection with the room interior; walls are hit from inside.
fn intersect_room(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    room: &Aabb,
) -> Option<(f64, usize, Vector3<f64>)> {
    let mut t_exit = f64::INFINITY;
    let mut face = 0usize;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            continue;
        }
        let inv = 1.0 / dir[axis];
        let t0 = (room.min[axis] - origin[axis]) * inv;
        let t1 = (room.max[axis] - origin[axis]) * inv;
        let (t_hi, hi_is_max) = if t0 > t1 { (t0, false) } else { (t1, true) };
        if t_hi < t_exit {
            t_exit = t_hi;
            face = axis * 2 + usize::from(hi_is_max);
        }
    }
    if !t_exit.is_finite() || t_exit <= 1e-9 {
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[face / 2] = if face % 2 == 1 { -1.0 } else { 1.0 };
    Some((t_exit, face, normal))
}

fn trace(scene: &SyntheticScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, [f64; 3], Vector3<f64>)> = None;
    for prim in &scene.primitives {
        let hit = match &prim.shape {
            Shape::Box(b) => intersect_box(origin, dir, b),
            Shape::Sphere { center, radius } => intersect_sphere(origin, dir, center, *radius),
        };
        if let Some((t, normal)) = hit {
            if best.map_or(true, |(bt, _, _)| t < bt) {
                best = Some((t, prim.color, normal));
            }
        }
    }
    if let Some((t, face, normal)) = intersect_room(origin, dir, &scene.room) {
        if best.map_or(true, |(bt, _, _)| t < bt) {
            best = Some((t, scene.wall_colors[face], normal));
        }
    }
    best.map(|(t, color, normal)| Hit {
        t,
        color: SyntheticScene::shade(color, &normal, &scene.light_dir),
    })
}

/// Per-pixel ray cast against the analytic primitives. Nearest hit gives
/// z-depth and flat Lambertian color; a miss gives background and depth 0.
pub fn oracle_render(
    scene: &SyntheticScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<RGBDFrame> {
    if !scene.room.contains(&pose.translation) {
        return Err(Error::PoseOutsideRoom);
    }
    let (w, h) = (intr.width, intr.height);
    let mut color = ColorImage::new(w, h);
    let mut depth = DepthImage::new(w, h);
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut crow = vec![[0.0; 3]; w];
            let mut drow = vec![0.0; w];
            for u in 0..w {
                // Unnormalized camera-frame direction with z = 1, so the ray
                // parameter t is exactly the camera-frame depth.
                let dir_cam = Vector3::new(
                    (u as f64 + 0.5 - intr.cx) / intr.fx,
                    (v as f64 + 0.5 - intr.cy) / intr.fy,
                    1.0,
                );
                let dir = pose.rotate_vector(&dir_cam);
                match trace(scene, &pose.translation, &dir) {
                    Some(hit) => {
                        crow[u] = [
                            hit.color[0].clamp(0.0, 1.0),
                            hit.color[1].clamp(0.0, 1.0),
                            hit.color[2].clamp(0.0, 1.0),
                        ];
                        drow[u] = hit.t;
                    }
                    None => {
                        crow[u] = scene.background;
                        drow[u] = 0.0;
                    }
                }
            }
            (crow, drow)
        })
        .collect();
    for (v, (crow, drow)) in rows.into_iter().enumerate() {
        for u in 0..w {
            color.set(u, v, crow[u]);
            depth.set(u, v, drow[u]);
        }
    }
    Ok(RGBDFrame {
        color,
        depth,
        index: 0,
    })
}

/// Camera path kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Orbit,
    Lawnmower,
    Loop,
}

/// Camera path specification plus a per-step odometry drift model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub n_frames: usize,
    /// Look-at target.
    pub target: [f64; 3],
    /// Orbit radius or lawnmower extent in meters.
    pub radius: f64,
    /// Per-step odometry noise, radians.
    pub sigma_rot: f64,
    /// Per-step odometry noise, meters.
    pub sigma_trans: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Loop,
            n_frames: 200,
            target: [0.0, 0.0, 0.0],
            radius: 0.85,
            sigma_rot: 0.0,
            sigma_trans: 0.0,
        }
    }
}

/// Camera-to-world look-at pose, OpenCV convention (x right, y down,
/// z forward), world z up.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let world_up = Vector3::new(0.0, 0.0, 1.0);
    let mut x = z.cross(&world_up);
    if x.norm() < 1e-9 {
        x = Vector3::new(1.0, 0.0, 0.0);
    } else {
        x = x.normalize();
    }
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    Pose::new(rotation, eye)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ground-truth poses per the spec kind, plus an odometry trajectory
/// corrupted by integrated per-step noise. Drift grows with path length.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    scene: &SyntheticScene,
    seed: u64,
) -> (Trajectory, Trajectory) {
    let _ = scene;
    let target = Vector3::new(spec.target[0], spec.target[1], spec.target[2]);
    let n = spec.n_frames.max(2);
    let mut gt = Trajectory::new();
    let mut poses = Vec::with_capacity(n);
    let z_base = 0.15;
    for i in 0..n {
        let s = i as f64 / n as f64;
        let eye = match spec.kind {
            TrajectoryKind::Loop | TrajectoryKind::Orbit => {
                let theta = 2.0 * std::f64::consts::PI * s;
                Vector3::new(
                    target[0] + spec.radius * theta.cos(),
                    target[1] + spec.radius * theta.sin(),
                    z_base + 0.08 * (2.0 * theta).sin(),
                )
            }
            TrajectoryKind::Lawnmower => {
                let rows = 4usize;
                let row_f = s * rows as f64;
                let row = (row_f as usize).min(rows - 1);
                let along = row_f - row as f64;
                let x = -spec.radius
                    + 2.0 * spec.radius * if row % 2 == 0 { along } else { 1.0 - along };
                let y = -spec.radius + 2.0 * spec.radius * (row as f64 / (rows - 1) as f64);
                Vector3::new(target[0] + x, target[1] + y, z_base)
            }
        };
        // Look across the target at the scene beyond it.
        let look_target = match spec.kind {
            TrajectoryKind::Lawnmower => target + Vector3::new(0.0, 0.0, -0.2),
            _ => target + (target - eye).normalize() * 0.5 + Vector3::new(0.0, 0.0, -0.1),
        };
        poses.push(look_at(eye, look_target));
    }
    for (i, pose) in poses.iter().enumerate() {
        gt.push(i, *pose).unwrap();
    }

    // Odometry: integrate relative GT motion with additive twist noise.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0d0_u64);
    let mut odom = Trajectory::new();
    let mut current = poses[0];
    odom.push(0, current).unwrap();
    for i in 1..n {
        let rel = poses[i - 1].inverse().compose(&poses[i]);
        let noise = [
            gaussian(&mut rng) * spec.sigma_trans,
            gaussian(&mut rng) * spec.sigma_trans,
            gaussian(&mut rng) * spec.sigma_trans,
            gaussian(&mut rng) * spec.sigma_rot,
            gaussian(&mut rng) * spec.sigma_rot,
            gaussian(&mut rng) * spec.sigma_rot,
        ];
        current = current.compose(&rel).compose(&Pose::exp(&noise));
        current.renormalize();
        odom.push(i, current).unwrap();
    }
    (gt, odom)
}

// --- scene text format ---------------------------------------------------

/// Serializes a scene to the line-based text format used for fixture
/// pinning.
pub fn scene_to_text(scene: &SyntheticScene) -> String {
    let mut out = String::new();
    let r = &scene.room;
    out.push_str(&format!(
        "room {} {} {} {} {} {}\n",
        r.min[0], r.min[1], r.min[2], r.max[0], r.max[1], r.max[2]
    ));
    out.push_str(&format!(
        "background {} {} {}\n",
        scene.background[0], scene.background[1], scene.background[2]
    ));
    out.push_str(&format!(
        "light {} {} {}\n",
        scene.light_dir[0], scene.light_dir[1], scene.light_dir[2]
    ));
    for (i, wc) in scene.wall_colors.iter().enumerate() {
        out.push_str(&format!("wall {} {} {} {}\n", i, wc[0], wc[1], wc[2]));
    }
    for p in &scene.primitives {
        let occ = if p.occluder { " occluder" } else { "" };
        match &p.shape {
            Shape::Box(b) => out.push_str(&format!(
                "box {} {} {} {} {} {} {} {} {}{}\n",
                b.min[0],
                b.min[1],
                b.min[2],
                b.max[0],
                b.max[1],
                b.max[2],
                p.color[0],
                p.color[1],
                p.color[2],
                occ
            )),
            Shape::Sphere { center, radius } => out.push_str(&format!(
                "sphere {} {} {} {} {} {} {}{}\n",
                center[0], center[1], center[2], radius, p.color[0], p.color[1], p.color[2], occ
            )),
        }
    }
    out
}

pub fn scene_from_text(text: &str) -> Result<SyntheticScene> {
    let mut room = None;
    let mut background = [0.0; 3];
    let mut light = Vector3::new(0.0, 0.0, 1.0);
    let mut wall_colors = [[0.5; 3]; 6];
    let mut primitives = Vec::new();
    let parse_err = |line: usize, reason: String| Error::Parse {
        what: format!("scene line {line}"),
        reason,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        let nums = |count: usize| -> Result<Vec<f64>> {
            if rest.len() < count {
                return Err(parse_err(lineno + 1, "too few fields".into()));
            }
            rest[..count]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| parse_err(lineno + 1, e.to_string()))
                })
                .collect()
        };
        match tag {
            "room" => {
                let v = nums(6)?;
                room = Some(Aabb::new(
                    Vector3::new(v[0], v[1], v[2]),
                    Vector3::new(v[3], v[4], v[5]),
                ));
            }
            "background" => {
                let v = nums(3)?;
                background = [v[0], v[1], v[2]];
            }
            "light" => {
                let v = nums(3)?;
                light = Vector3::new(v[0], v[1], v[2]).normalize();
            }
            "wall" => {
                let v = nums(4)?;
                let idx = v[0] as usize;
                if idx >= 6 {
                    return Err(parse_err(lineno + 1, "wall index out of range".into()));
                }
                wall_colors[idx] = [v[1], v[2], v[3]];
            }
            "box" => {
                let v = nums(9)?;
                primitives.push(ScenePrimitive {
                    shape: Shape::Box(Aabb::new(
                        Vector3::new(v[0], v[1], v[2]),
                        Vector3::new(v[3], v[4], v[5]),
                    )),
                    color: [v[6], v[7], v[8]],
                    occluder: rest.last() == Some(&"occluder"),
                });
            }
            "sphere" => {
                let v = nums(7)?;
                primitives.push(ScenePrimitive {
                    shape: Shape::Sphere {
                        center: Vector3::new(v[0], v[1], v[2]),
                        radius: v[3],
                    },
                    color: [v[4], v[5], v[6]],
                    occluder: rest.last() == Some(&"occluder"),
                });
            }
            _ => return Err(parse_err(lineno + 1, format!("unknown tag {tag}"))),
        }
    }
    let room = room.ok_or_else(|| Error::Parse {
        what: "scene".into(),
        reason: "missing room line".into(),
    })?;
    Ok(SyntheticScene {
        room,
        primitives,
        background,
        wall_colors,
        light_dir: light,
    })
}

// --- TUM loader ------------------------------------------------------------

/// TUM depth PNGs store 5000 units per meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Association tolerance between rgb/depth/groundtruth timestamps.
pub const TUM_ASSOC_TOLERANCE: f64 = 0.02;

fn read_stamped_lines(path: &Path) -> Result<Vec<(f64, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::DatasetFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let stamp: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::DatasetFormat {
                path: path.to_path_buf(),
                reason: format!("bad timestamp in line {line:?}"),
            })?;
        out.push((stamp, it.map(str::to_string).collect()));
    }
    Ok(out)
}

fn nearest_within(stamps: &[(f64, Vec<String>)], t: f64, tol: f64) -> Option<usize> {
    let mut best = None;
    let mut best_dt = tol;
    for (i, (s, _)) in stamps.iter().enumerate() {
        let dt = (s - t).abs();
        if dt <= best_dt {
            best_dt = dt;
            best = Some(i);
        }
    }
    best
}

/// Result of [`load_tum`].
pub struct TumDataset {
    pub frames: Vec<RGBDFrame>,
    pub gt: Trajectory,
    pub intr: CameraIntrinsics,
    pub dropped: usize,
}

/// Loads a TUM-layout directory (rgb.txt, depth.txt, groundtruth.txt plus
/// referenced images), associating entries by nearest timestamp within
/// 0.02 s. Unassociated entries are dropped and counted.
pub fn load_tum(dir: &Path) -> Result<TumDataset> {
    let rgb_list = read_stamped_lines(&dir.join("rgb.txt"))?;
    let depth_list = read_stamped_lines(&dir.join("depth.txt"))?;
    let gt_list = read_stamped_lines(&dir.join("groundtruth.txt"))?;

    let mut frames = Vec::new();
    let mut gt = Trajectory::new();
    let mut dropped = 0usize;
    let mut intr: Option<CameraIntrinsics> = None;
    let mut index = 0usize;

    for (stamp, fields) in &rgb_list {
        let Some(di) = nearest_within(&depth_list, *stamp, TUM_ASSOC_TOLERANCE) else {
            dropped += 1;
            continue;
        };
        let Some(gi) = nearest_within(&gt_list, *stamp, TUM_ASSOC_TOLERANCE) else {
            dropped += 1;
            continue;
        };
        let rgb_path = dir.join(fields.first().ok_or_else(|| Error::DatasetFormat {
            path: dir.join("rgb.txt"),
            reason: "missing filename".into(),
        })?);
        let depth_path = dir.join(depth_list[di].1.first().ok_or_else(|| Error::DatasetFormat {
            path: dir.join("depth.txt"),
            reason: "missing filename".into(),
        })?);

        let rgb_img = match image::open(&rgb_path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                eprintln!(
                    "warning: skipping undecodable rgb {}: {e}",
                    rgb_path.display()
                );
                dropped += 1;
                continue;
            }
        };
        let depth_img = match image::open(&depth_path) {
            Ok(img) => img.to_luma16(),
            Err(e) => {
                eprintln!(
                    "warning: skipping undecodable depth {}: {e}",
                    depth_path.display()
                );
                dropped += 1;
                continue;
            }
        };

        let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
        if intr.is_none() {
            // TUM Kinect defaults scaled to the actual frame size; the
            // benchmark ships no intrinsics file.
            intr = Some(CameraIntrinsics::new(
                525.0 * w as f64 / 640.0,
                525.0 * h as f64 / 480.0,
                w as f64 / 2.0 - 0.5,
                h as f64 / 2.0 - 0.5,
                w,
                h,
            )?);
        }
        let mut color = ColorImage::new(w, h);
        for (x, y, p) in rgb_img.enumerate_pixels() {
            color.set(
                x as usize,
                y as usize,
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ],
            );
        }
        let mut depth = DepthImage::new(w, h);
        if depth_img.width() as usize == w && depth_img.height() as usize == h {
            for (x, y, p) in depth_img.enumerate_pixels() {
                depth.set(x as usize, y as usize, p[0] as f64 / TUM_DEPTH_SCALE);
            }
        }

        let g = &gt_list[gi].1;
        let vals: Vec<f64> = g.iter().filter_map(|s| s.parse().ok()).collect();
        if vals.len() < 7 {
            dropped += 1;
            continue;
        }
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            vals[6], vals[3], vals[4], vals[5],
        ));
        let pose = Pose::from_quaternion(q, Vector3::new(vals[0], vals[1], vals[2]));

        frames.push(RGBDFrame {
            color,
            depth,
            index,
        });
        gt.push(index, pose)?;
        index += 1;
    }

    if dropped > 0 {
        eprintln!("load_tum: dropped {dropped} unassociated entries");
    }
    let intr = intr.ok_or_else(|| Error::DatasetFormat {
        path: dir.to_path_buf(),
        reason: "no frames could be associated".into(),
    })?;
    Ok(TumDataset {
        frames,
        gt,
        intr,
        dropped,
    })
}

/// Loads a scene text file when a path is given, otherwise generates one
/// from the seed.
pub fn load_or_generate_scene(path: Option<&PathBuf>, seed: u64) -> Result<SyntheticScene> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.clone(), e))?;
            scene_from_text(&text)
        }
        None => Ok(generate_scene(seed)),
    }
}

/// Deterministic map from (run seed, purpose label, counter) to a child
/// seed, so independent RNG streams never alias.
pub fn derive_seed(seed: u64, label: &str, counter: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h = (h ^ counter).wrapping_mul(0x100000001b3);
    h ^ (h >> 31)
}
