//! The radiance prior: a trainable multi-resolution voxel field rendered by
//! ray marching, trained by photometric (plus depth) loss, and used for
//! two-stage camera tracking.
//!
//! Grids store raw, pre-activation values; density goes through a scaled
//! softplus, color through a sigmoid. Features are trilinearly interpolated
//! per level and summed across levels before activation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, Pose, RGBDFrame, Ray};
use crate::optim::Adam;
use crate::scene::{derive_seed, Aabb};
use crate::{Error, Result};

/// Scales the softplus so a few raw units of headroom cover the full useful
/// density range.
pub const DENSITY_SCALE: f64 = 30.0;
/// Raw density at initialization. Activated value stays below the surface
/// extraction threshold until training raises it.
pub const DENSITY_INIT_RAW: f64 = -11.0;
const RAW_CLAMP: f64 = 30.0;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DSFLD1";

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One dense voxel level. `resolution` counts grid nodes per axis.
#[derive(Debug, Clone)]
pub struct GridLevel {
    pub resolution: usize,
    /// Raw density, one value per node, z-major.
    pub density: Vec<f64>,
    /// Raw color, three values per node.
    pub color: Vec<f64>,
}

impl GridLevel {
    fn new(resolution: usize) -> Self {
        let n = resolution * resolution * resolution;
        GridLevel {
            resolution,
            density: vec![DENSITY_INIT_RAW; n],
            color: vec![0.0; n * 3],
        }
    }

    #[inline]
    fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }
}

/// Trilinear interpolation footprint: 8 node indices and weights, plus the
/// per-axis weight derivatives needed for spatial gradients.
struct Footprint {
    nodes: [usize; 8],
    weights: [f64; 8],
    /// d(weight)/d(normalized axis coordinate) premultiplied by (res-1).
    dweights: [[f64; 3]; 8],
}

/// The multi-resolution radiance field.
#[derive(Debug, Clone)]
pub struct RadianceField {
    pub levels: Vec<GridLevel>,
    pub bounds: Aabb,
}

impl RadianceField {
    pub fn new(bounds: Aabb, resolutions: &[usize]) -> Self {
        RadianceField {
            levels: resolutions.iter().map(|r| GridLevel::new(*r)).collect(),
            bounds,
        }
    }

    /// Activated density of an untrained region.
    pub fn baseline_density(&self) -> f64 {
        DENSITY_SCALE * softplus(DENSITY_INIT_RAW * self.levels.len() as f64)
    }

    #[inline]
    fn normalized(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let ext = self.bounds.extent();
        let mut t = Vector3::zeros();
        for a in 0..3 {
            let v = (x[a] - self.bounds.min[a]) / ext[a];
            if !(0.0..=1.0).contains(&v) {
                return None;
            }
            t[a] = v;
        }
        Some(t)
    }

    fn footprint(level: &GridLevel, t: &Vector3<f64>) -> Footprint {
        let r = level.resolution;
        let scale = (r - 1) as f64;
        let mut i = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            let u = t[a] * scale;
            let idx = (u.floor() as usize).min(r - 2);
            i[a] = idx;
            f[a] = u - idx as f64;
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0f64; 8];
        let mut dweights = [[0f64; 3]; 8];
        let mut c = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    nodes[c] = level.node_index(i[0] + dx, i[1] + dy, i[2] + dz);
                    let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
                    let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
                    let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
                    weights[c] = wx * wy * wz;
                    let sx = if dx == 1 { 1.0 } else { -1.0 };
                    let sy = if dy == 1 { 1.0 } else { -1.0 };
                    let sz = if dz == 1 { 1.0 } else { -1.0 };
                    dweights[c] = [
                        sx * wy * wz * scale,
                        wx * sy * wz * scale,
                        wx * wy * sz * scale,
                    ];
                    c += 1;
                }
            }
        }
        Footprint {
            nodes,
            weights,
            dweights,
        }
    }

    /// Raw multi-level features at a point already known to be in bounds.
    fn raw_at(&self, t: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut raw_sigma = 0.0;
        let mut raw_color = [0.0; 3];
        for level in &self.levels {
            let fp = Self::footprint(level, t);
            for c in 0..8 {
                let w = fp.weights[c];
                let n = fp.nodes[c];
                raw_sigma += w * level.density[n];
                raw_color[0] += w * level.color[n * 3];
                raw_color[1] += w * level.color[n * 3 + 1];
                raw_color[2] += w * level.color[n * 3 + 2];
            }
        }
        (raw_sigma, raw_color)
    }

    /// Activated density and color. Outside the bounds returns zero density
    /// and black.
    pub fn query(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        match self.normalized(x) {
            None => (0.0, [0.0; 3]),
            Some(t) => {
                let (raw_sigma, raw_color) = self.raw_at(&t);
                (
                    DENSITY_SCALE * softplus(raw_sigma),
                    [
                        sigmoid(raw_color[0]),
                        sigmoid(raw_color[1]),
                        sigmoid(raw_color[2]),
                    ],
                )
            }
        }
    }

    /// Density only; used by the lattice scan during surface extraction.
    pub fn query_density(&self, x: &Vector3<f64>) -> f64 {
        match self.normalized(x) {
            None => 0.0,
            Some(t) => {
                let mut raw_sigma = 0.0;
                for level in &self.levels {
                    let fp = Self::footprint(level, &t);
                    for c in 0..8 {
                        raw_sigma += fp.weights[c] * level.density[fp.nodes[c]];
                    }
                }
                DENSITY_SCALE * softplus(raw_sigma)
            }
        }
    }

    /// Writes the checkpoint blob: little-endian header
    /// `{magic "DSFLD1", level_count, per-level resolution}`, bounds, then
    /// the raw grid arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&(level.resolution as u32).to_le_bytes());
        }
        for a in 0..3 {
            out.extend_from_slice(&self.bounds.min[a].to_le_bytes());
        }
        for a in 0..3 {
            out.extend_from_slice(&self.bounds.max[a].to_le_bytes());
        }
        for level in &self.levels {
            for v in &level.density {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &level.color {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > bytes.len() {
                return Err(Error::Parse {
                    what: format!("field checkpoint {}", path.display()),
                    reason: "truncated".into(),
                });
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 6)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                what: format!("field checkpoint {}", path.display()),
                reason: "bad magic".into(),
            });
        }
        let read_u32 =
            |at: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
        let read_f64 =
            |at: &mut usize| -> Result<f64> { Ok(f64::from_le_bytes(take(at, 8)?.try_into().unwrap())) };
        let level_count = read_u32(&mut at)? as usize;
        let mut resolutions = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            resolutions.push(read_u32(&mut at)? as usize);
        }
        let min = Vector3::new(read_f64(&mut at)?, read_f64(&mut at)?, read_f64(&mut at)?);
        let max = Vector3::new(read_f64(&mut at)?, read_f64(&mut at)?, read_f64(&mut at)?);
        let mut levels = Vec::with_capacity(level_count);
        for r in resolutions {
            let n = r * r * r;
            let mut level = GridLevel::new(r);
            for v in level.density.iter_mut() {
                *v = read_f64(&mut at)?;
            }
            for _ in 0..n * 3 {}
            for v in level.color.iter_mut() {
                *v = read_f64(&mut at)?;
            }
            levels.push(level);
        }
        Ok(RadianceField {
            levels,
            bounds: Aabb::new(min, max),
        })
    }
}

/// Samples along one ray, with everything needed to composite and to test
/// the telescoping invariants.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub points: Vec<Vector3<f64>>,
    /// Distance of each sample along the (unit-direction) ray.
    pub depths: Vec<f64>,
    pub spacings: Vec<f64>,
    /// Activated density at each sample.
    pub densities: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Transmittance before each sample; starts at exactly 1.
    pub transmittances: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl RaySamples {
    /// Builds samples from raw per-sample values, computing alphas and the
    /// telescoping transmittance.
    pub fn from_raw(
        points: Vec<Vector3<f64>>,
        depths: Vec<f64>,
        spacings: Vec<f64>,
        densities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Self {
        let n = depths.len();
        let mut alphas = Vec::with_capacity(n);
        let mut transmittances = Vec::with_capacity(n);
        let mut t = 1.0;
        for j in 0..n {
            let alpha = 1.0 - (-densities[j] * spacings[j]).exp();
            alphas.push(alpha);
            transmittances.push(t);
            t *= 1.0 - alpha;
        }
        RaySamples {
            points,
            depths,
            spacings,
            densities,
            alphas,
            transmittances,
            colors,
        }
    }

    /// Alpha-composites color, depth and opacity.
    pub fn composite(&self) -> ([f64; 3], f64, f64) {
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut opacity = 0.0;
        for j in 0..self.depths.len() {
            let w = self.alphas[j] * self.transmittances[j];
            for ch in 0..3 {
                color[ch] += self.colors[j][ch] * w;
            }
            depth += self.depths[j] * w;
            opacity += w;
        }
        (color, depth, opacity)
    }
}

/// Marches the field along `ray` with deterministic mid-stratum samples.
pub fn sample_ray(field: &RadianceField, ray: &Ray, n: usize, near: f64, far: f64) -> RaySamples {
    let step = (far - near) / n as f64;
    let mut points = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut spacings = Vec::with_capacity(n);
    let mut densities = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for j in 0..n {
        let d = near + (j as f64 + 0.5) * step;
        let p = ray.origin + ray.direction * d;
        let (sigma, c) = field.query(&p);
        points.push(p);
        depths.push(d);
        spacings.push(step);
        densities.push(sigma);
        colors.push(c);
    }
    RaySamples::from_raw(points, depths, spacings, densities, colors)
}

/// Renders one ray: uniform stratified sampling of depths in `[near, far]`,
/// then alpha compositing. Returns (color, depth, opacity); depth is the
/// distance along the ray.
pub fn render_ray(
    field: &RadianceField,
    ray: &Ray,
    n_samples: usize,
    near: f64,
    far: f64,
) -> ([f64; 3], f64, f64) {
    assert!(near < far, "render_ray requires near < far");
    assert!(n_samples >= 2, "render_ray requires n_samples >= 2");
    sample_ray(field, ray, n_samples, near, far).composite()
}

/// One supervised ray: where it goes, what color it saw, and the valid
/// ground-truth depth as distance along the ray.
#[derive(Debug, Clone)]
pub struct TrainingRay {
    pub ray: Ray,
    pub gt_color: [f64; 3],
    pub gt_depth: f64,
    /// Stratified sample offset in [0, 1); 0.5 is the deterministic
    /// midpoint comb. Training draws it per ray per step so sample
    /// quantization averages out.
    pub strat_offset: f64,
}

impl TrainingRay {
    pub fn new(ray: Ray, gt_color: [f64; 3], gt_depth: f64) -> Self {
        TrainingRay {
            ray,
            gt_color,
            gt_depth,
            strat_offset: 0.5,
        }
    }
}

/// A batch of rays with valid depth.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub rays: Vec<TrainingRay>,
}

impl TrainingBatch {
    pub fn new(rays: Vec<TrainingRay>) -> Result<Self> {
        if rays.iter().any(|r| r.gt_depth <= 0.0) {
            return Err(Error::InvalidInput(
                "training batch contains a ray without valid depth".into(),
            ));
        }
        Ok(TrainingBatch { rays })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Draws up to `count` rays at valid-depth pixels of `frame`, viewed from
/// `pose`. Ground-truth z-depth is converted to distance along the unit ray.
pub fn sample_batch(
    frame: &RGBDFrame,
    pose: &Pose,
    intr: &CameraIntrinsics,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingBatch {
    let mut rays = Vec::with_capacity(count);
    let (w, h) = (frame.width(), frame.height());
    let mut attempts = 0;
    while rays.len() < count && attempts < count * 20 {
        attempts += 1;
        let u = rng.gen_range(0..w);
        let v = rng.gen_range(0..h);
        let z = frame.depth.get(u, v);
        if z <= 0.0 {
            continue;
        }
        let (uc, vc) = (u as f64 + 0.5, v as f64 + 0.5);
        let dir_cam = Vector3::new((uc - intr.cx) / intr.fx, (vc - intr.cy) / intr.fy, 1.0);
        let ray_len = z * dir_cam.norm();
        let ray = Ray::new(pose.translation, pose.rotate_vector(&dir_cam));
        rays.push(TrainingRay {
            ray,
            gt_color: frame.color.get(u, v),
            gt_depth: ray_len,
            strat_offset: rng.gen(),
        });
    }
    TrainingBatch { rays }
}

/// Rendering and optimization hyperparameters for the field.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FieldHyper {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Weight of the L2 depth term; 0 reproduces a photometric-only loss.
    pub lambda_depth: f64,
    /// Depth weight during pose optimization. Kept much smaller than
    /// `lambda_depth`: the rendered-depth ramp bias pulls poses, but a weak
    /// anchor still pins photometrically flat directions.
    pub lambda_depth_track: f64,
    pub lr_grid: f64,
    pub lr_pose: f64,
    /// Rays per tracking/training step.
    pub ray_budget: usize,
}

impl FieldHyper {
    pub fn for_bounds(bounds: &Aabb) -> Self {
        FieldHyper {
            n_samples: 32,
            near: 0.05,
            far: bounds.diagonal(),
            lambda_depth: 0.1,
            lr_grid: 0.05,
            lr_pose: 1e-3,
            ray_budget: 1024,
        }
    }
}

/// Gradients of a loss with respect to every raw grid value.
pub struct FieldGradients {
    /// One (density, color) pair of buffers per level.
    pub levels: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FieldGradients {
    pub fn zeros_like(field: &RadianceField) -> Self {
        FieldGradients {
            levels: field
                .levels
                .iter()
                .map(|l| (vec![0.0; l.density.len()], vec![0.0; l.color.len()]))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for (d, c) in &mut self.levels {
            d.iter_mut().for_each(|x| *x = 0.0);
            c.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Per-ray forward pass retaining what the backward pass needs.
struct RayForward {
    depths: Vec<f64>,
    spacings: Vec<f64>,
    raw_sigmas: Vec<f64>,
    raw_colors: Vec<[f64; 3]>,
    alphas: Vec<f64>,
    transmittances: Vec<f64>,
    /// Whether each sample was inside the field bounds.
    inside: Vec<bool>,
    color: [f64; 3],
    depth: f64,
}

fn forward_ray(field: &RadianceField, tr: &TrainingRay, hyper: &FieldHyper) -> RayForward {
    let ray = &tr.ray;
    let n = hyper.n_samples;
    let step = (hyper.far - hyper.near) / n as f64;
    let mut fwd = RayForward {
        depths: Vec::with_capacity(n),
        spacings: Vec::with_capacity(n),
        raw_sigmas: Vec::with_capacity(n),
        raw_colors: Vec::with_capacity(n),
        alphas: Vec::with_capacity(n),
        transmittances: Vec::with_capacity(n),
        inside: Vec::with_capacity(n),
        color: [0.0; 3],
        depth: 0.0,
    };
    let mut t = 1.0;
    for j in 0..n {
        let d = hyper.near + (j as f64 + tr.strat_offset) * step;
        let p = ray.origin + ray.direction * d;
        let (raw_sigma, raw_color, inside) = match field.normalized(&p) {
            Some(tn) => {
                let (rs, rc) = field.raw_at(&tn);
                (rs, rc, true)
            }
            None => (0.0, [0.0; 3], false),
        };
        let sigma = if inside {
            DENSITY_SCALE * softplus(raw_sigma)
        } else {
            0.0
        };
        let alpha = 1.0 - (-sigma * step).exp();
        let color = if inside {
            [
                sigmoid(raw_color[0]),
                sigmoid(raw_color[1]),
                sigmoid(raw_color[2]),
            ]
        } else {
            [0.0; 3]
        };
        let w = alpha * t;
        for ch in 0..3 {
            fwd.color[ch] += color[ch] * w;
        }
        fwd.depth += d * w;
        fwd.depths.push(d);
        fwd.spacings.push(step);
        fwd.raw_sigmas.push(raw_sigma);
        fwd.raw_colors.push(raw_color);
        fwd.alphas.push(alpha);
        fwd.transmittances.push(t);
        fwd.inside.push(inside);
        t *= 1.0 - alpha;
    }
    fwd
}

/// Photometric + depth loss of one forward ray against its supervision.
fn ray_loss(fwd: &RayForward, tr: &TrainingRay, lambda_depth: f64) -> f64 {
    let mut l = 0.0;
    for ch in 0..3 {
        let r = fwd.color[ch] - tr.gt_color[ch];
        l += r * r;
    }
    let rd = fwd.depth - tr.gt_depth;
    l + lambda_depth * rd * rd
}

/// Mean photometric loss plus weighted mean squared depth residual.
pub fn field_loss(field: &RadianceField, batch: &TrainingBatch, hyper: &FieldHyper) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("field_loss on an empty batch".into()));
    }
    let total: f64 = batch
        .rays
        .par_iter()
        .map(|tr| ray_loss(&forward_ray(field, tr, hyper), tr, hyper.lambda_depth))
        .sum::<f64>();
    Ok(total / batch.len() as f64)
}

/// Backward products of one ray: per-sample dL/d(raw sigma) and
/// dL/d(raw color).
struct RayBackward {
    dsigma_raw: Vec<f64>,
    dcolor_raw: Vec<[f64; 3]>,
}

fn backward_ray(fwd: &RayForward, tr: &TrainingRay, lambda_depth: f64, inv_batch: f64) -> RayBackward {
    let n = fwd.depths.len();
    let mut dloss_dcolor = [0.0; 3];
    for ch in 0..3 {
        dloss_dcolor[ch] = 2.0 * (fwd.color[ch] - tr.gt_color[ch]) * inv_batch;
    }
    let dloss_ddepth = 2.0 * lambda_depth * (fwd.depth - tr.gt_depth) * inv_batch;

    // g_j = dL/dw_j where w_j = alpha_j * T_j.
    let mut g = vec![0.0; n];
    for j in 0..n {
        let c = if fwd.inside[j] {
            [
                sigmoid(fwd.raw_colors[j][0]),
                sigmoid(fwd.raw_colors[j][1]),
                sigmoid(fwd.raw_colors[j][2]),
            ]
        } else {
            [0.0; 3]
        };
        g[j] = dloss_dcolor[0] * c[0]
            + dloss_dcolor[1] * c[1]
            + dloss_dcolor[2] * c[2]
            + dloss_ddepth * fwd.depths[j];
    }

    // Reverse sweep: dL/dalpha_j = T_j * (g_j - suffix_j) with
    // suffix_j = sum_{t>j} g_t alpha_t prod_{j<s<t}(1-alpha_s).
    let mut dsigma_raw = vec![0.0; n];
    let mut dcolor_raw = vec![[0.0; 3]; n];
    let mut suffix = 0.0;
    let mut dalpha = vec![0.0; n];
    for j in (0..n).rev() {
        dalpha[j] = fwd.transmittances[j] * (g[j] - suffix);
        suffix = g[j] * fwd.alphas[j] + (1.0 - fwd.alphas[j]) * suffix;
    }
    for j in 0..n {
        if !fwd.inside[j] {
            continue;
        }
        let w = fwd.alphas[j] * fwd.transmittances[j];
        // d alpha / d sigma = delta * exp(-sigma delta) = delta * (1-alpha).
        let dalpha_dsigma = fwd.spacings[j] * (1.0 - fwd.alphas[j]);
        let dsigma = dalpha[j] * dalpha_dsigma;
        dsigma_raw[j] = dsigma * DENSITY_SCALE * sigmoid(fwd.raw_sigmas[j]);
        for ch in 0..3 {
            let c = sigmoid(fwd.raw_colors[j][ch]);
            dcolor_raw[j][ch] = dloss_dcolor[ch] * w * c * (1.0 - c);
        }
    }
    RayBackward {
        dsigma_raw,
        dcolor_raw,
    }
}

/// Accumulates grid gradients for a batch into `grads`. Returns the loss.
pub fn field_gradients(
    field: &RadianceField,
    batch: &TrainingBatch,
    hyper: &FieldHyper,
    grads: &mut FieldGradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput(
            "field_gradients on an empty batch".into(),
        ));
    }
    grads.clear();
    let inv_batch = 1.0 / batch.len() as f64;

    let forwards: Vec<RayForward> = batch
        .rays
        .par_iter()
        .map(|tr| forward_ray(field, tr, hyper))
        .collect();

    let mut loss = 0.0;
    for (tr, fwd) in batch.rays.iter().zip(forwards.iter()) {
        loss += ray_loss(fwd, tr, hyper.lambda_depth) * inv_batch;
        let bwd = backward_ray(fwd, tr, hyper.lambda_depth, inv_batch);
        for j in 0..fwd.depths.len() {
            if !fwd.inside[j] {
                continue;
            }
            if bwd.dsigma_raw[j] == 0.0 && bwd.dcolor_raw[j] == [0.0; 3] {
                continue;
            }
            let p = tr.ray.origin + tr.ray.direction * fwd.depths[j];
            let t = field.normalized(&p).expect("sample inside bounds");
            for (level, (gd, gc)) in field.levels.iter().zip(grads.levels.iter_mut()) {
                let fp = RadianceField::footprint(level, &t);
                for c in 0..8 {
                    let w = fp.weights[c];
                    gd[fp.nodes[c]] += w * bwd.dsigma_raw[j];
                    for ch in 0..3 {
                        gc[fp.nodes[c] * 3 + ch] += w * bwd.dcolor_raw[j][ch];
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Gradient of the batch loss with respect to a left-multiplied SE(3)
/// increment of the camera pose, `[rho, omega]`, evaluated at zero
/// increment. Rays in the batch must have been built from `pose`.
pub fn pose_gradient(
    field: &RadianceField,
    batch: &TrainingBatch,
    hyper: &FieldHyper,
) -> Result<([f64; 6], f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("pose_gradient on an empty batch".into()));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let partials: Vec<([f64; 6], f64)> = batch
        .rays
        .par_iter()
        .map(|tr| {
            let fwd = forward_ray(field, tr, hyper);
            let loss = ray_loss(&fwd, tr, hyper.lambda_depth) * inv_batch;
            let bwd = backward_ray(&fwd, tr, hyper.lambda_depth, inv_batch);
            let mut rho = Vector3::zeros();
            let mut omega = Vector3::zeros();
            for j in 0..fwd.depths.len() {
                if !fwd.inside[j] {
                    continue;
                }
                let p = tr.ray.origin + tr.ray.direction * fwd.depths[j];
                let t = field.normalized(&p).expect("inside");
                // Spatial gradients of the raw features via the interpolant.
                let ext = field.bounds.extent();
                let mut grad_raw_sigma = Vector3::zeros();
                let mut grad_raw_color = [Vector3::zeros(); 3];
                for level in &field.levels {
                    let fp = RadianceField::footprint(level, &t);
                    for c in 0..8 {
                        let n = fp.nodes[c];
                        let dv = level.density[n];
                        for a in 0..3 {
                            let dw = fp.dweights[c][a] / ext[a];
                            grad_raw_sigma[a] += dw * dv;
                            for ch in 0..3 {
                                grad_raw_color[ch][a] += dw * level.color[n * 3 + ch];
                            }
                        }
                    }
                }
                // Chain activations: the backward pass produced gradients
                // w.r.t. raw values; spatial derivative of the raw value is
                // grad_raw. dL/dx_j = dL/draw_sigma * grad_raw_sigma + ...
                let mut dldx = grad_raw_sigma * bwd.dsigma_raw[j];
                for ch in 0..3 {
                    dldx += grad_raw_color[ch] * bwd.dcolor_raw[j][ch];
                }
                rho += dldx;
                omega += p.cross(&dldx);
            }
            let loss_grad = [rho[0], rho[1], rho[2], omega[0], omega[1], omega[2]];
            (loss_grad, loss)
        })
        .collect();
    let mut grad = [0.0; 6];
    let mut loss = 0.0;
    for (g, l) in partials {
        for k in 0..6 {
            grad[k] += g[k];
        }
        loss += l;
    }
    Ok((grad, loss))
}

/// Adam trainer over all grid parameters of one field.
pub struct FieldTrainer {
    adam_density: Vec<Adam>,
    adam_color: Vec<Adam>,
    grads: FieldGradients,
    pub hyper: FieldHyper,
}

impl FieldTrainer {
    pub fn new(field: &RadianceField, hyper: FieldHyper) -> Self {
        FieldTrainer {
            adam_density: field
                .levels
                .iter()
                .map(|l| Adam::with_small_eps(l.density.len(), hyper.lr_grid))
                .collect(),
            adam_color: field
                .levels
                .iter()
                .map(|l| Adam::with_small_eps(l.color.len(), hyper.lr_grid))
                .collect(),
            grads: FieldGradients::zeros_like(field),
            hyper,
        }
    }

    /// One Adam update of the grid parameters against the batch loss.
    /// Returns the pre-step loss.
    pub fn step(&mut self, field: &mut RadianceField, batch: &TrainingBatch) -> Result<f64> {
        let loss = field_gradients(field, batch, &self.hyper, &mut self.grads)?;
        if !loss.is_finite() {
            return Err(Error::MappingDiverged(format!(
                "field loss became {loss}"
            )));
        }
        for (i, level) in field.levels.iter_mut().enumerate() {
            self.adam_density[i].step(&mut level.density, &self.grads.levels[i].0);
            self.adam_color[i].step(&mut level.color, &self.grads.levels[i].1);
            level
                .density
                .par_iter_mut()
                .for_each(|v| *v = v.clamp(-RAW_CLAMP, RAW_CLAMP));
            level
                .color
                .par_iter_mut()
                .for_each(|v| *v = v.clamp(-15.0, 15.0));
        }
        Ok(loss)
    }
}

/// One Adam update of grid parameters against the batch loss, with fresh
/// optimizer state. Training loops should hold a [`FieldTrainer`] instead.
pub fn field_step(
    field: &mut RadianceField,
    batch: &TrainingBatch,
    lr: f64,
    hyper: &FieldHyper,
) -> Result<f64> {
    let mut hyper = hyper.clone();
    hyper.lr_grid = lr;
    FieldTrainer::new(field, hyper).step(field, batch)
}

/// Tracking configuration shared by [`track_frame`] and [`bootstrap`].
pub struct Tracker {
    pub hyper: FieldHyper,
    /// Photometric-only variant used for pose gradients. The depth
    /// extension supervises geometry during mapping, but its rendered-depth
    /// bias would pull poses off the photometric optimum.
    pose_hyper: FieldHyper,
    pub seed: u64,
}

impl Tracker {
    pub fn new(hyper: FieldHyper, seed: u64) -> Self {
        let pose_hyper = FieldHyper {
            lambda_depth: 0.0,
            ..hyper.clone()
        };
        Tracker {
            hyper,
            pose_hyper,
            seed,
        }
    }

    fn pose_step(
        &self,
        field: &RadianceField,
        frame: &RGBDFrame,
        intr: &CameraIntrinsics,
        pose: &Pose,
        adam: &mut Adam,
        z: &mut [f64; 6],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Pose, f64)> {
        let batch = sample_batch(frame, pose, intr, self.hyper.ray_budget, rng);
        if batch.is_empty() {
            return Err(Error::InsufficientData(
                "frame has no valid-depth pixels to track against".into(),
            ));
        }
        let (grad, loss) = pose_gradient(field, &batch, &self.pose_hyper)?;
        if !loss.is_finite() {
            return Err(Error::TrackingDiverged {
                frame: frame.index,
                reason: format!("loss became {loss}"),
            });
        }
        let before = *z;
        adam.step(z, &grad);
        let delta = [
            z[0] - before[0],
            z[1] - before[1],
            z[2] - before[2],
            z[3] - before[3],
            z[4] - before[4],
            z[5] - before[5],
        ];
        let mut next = Pose::exp(&delta).compose(pose);
        next.renormalize();
        Ok((next, loss))
    }

    /// Pose-only refinement against a frozen field.
    pub fn refine_pose(
        &self,
        field: &RadianceField,
        frame: &RGBDFrame,
        intr: &CameraIntrinsics,
        init: &Pose,
        iters: usize,
        seed_salt: u64,
    ) -> Result<Pose> {
        let mut pose = *init;
        let mut adam = Adam::new(6, self.hyper.lr_pose);
        let mut z = [0.0; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            "track-pose",
            frame.index as u64 ^ seed_salt,
        ));
        for _ in 0..iters {
            let (next, _) = self.pose_step(field, frame, intr, &pose, &mut adam, &mut z, &mut rng)?;
            pose = next;
        }
        Ok(pose)
    }

    /// Two-stage tracking: `iters` pose-only steps with the field frozen,
    /// then `iters / 2` joint steps that also update the field. Joint-stage
    /// pose updates run at a reduced rate so the field does not chase a
    /// moving target.
    pub fn track_frame(
        &self,
        field: &mut RadianceField,
        trainer: &mut FieldTrainer,
        frame: &RGBDFrame,
        intr: &CameraIntrinsics,
        init: &Pose,
        iters: usize,
    ) -> Result<Pose> {
        let mut pose = self.refine_pose(field, frame, intr, init, iters, 0)?;
        let mut adam = Adam::new(6, self.hyper.lr_pose * 0.3);
        let mut z = [0.0; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "track", frame.index as u64));
        for _ in 0..iters / 2 {
            let (next, _) = self.pose_step(field, frame, intr, &pose, &mut adam, &mut z, &mut rng)?;
            pose = next;
            let batch = sample_batch(frame, &pose, intr, self.hyper.ray_budget, &mut rng);
            if !batch.is_empty() {
                trainer.step(field, &batch)?;
            }
        }
        Ok(pose)
    }
}

/// Result of [`bootstrap`].
pub struct Bootstrap {
    pub field: RadianceField,
    pub trainer: FieldTrainer,
    pub poses: Vec<Pose>,
}

/// Bootstraps a fresh field from a handful of initial frames. The first
/// pose is the identity; later frames start from constant velocity, are
/// tracked pose-only, then join the training set.
pub fn bootstrap(
    frames: &[RGBDFrame],
    intr: &CameraIntrinsics,
    bounds: Aabb,
    resolutions: &[usize],
    hyper: FieldHyper,
    iters: usize,
    seed: u64,
) -> Result<Bootstrap> {
    bootstrap_from(frames, intr, bounds, resolutions, hyper, iters, seed, Pose::identity())
}

/// Same as [`bootstrap`] but anchored at an arbitrary first pose, which the
/// pipeline uses when a later submap starts mid-trajectory.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_from(
    frames: &[RGBDFrame],
    intr: &CameraIntrinsics,
    bounds: Aabb,
    resolutions: &[usize],
    hyper: FieldHyper,
    iters: usize,
    seed: u64,
    first_pose: Pose,
) -> Result<Bootstrap> {
    if frames.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "bootstrap needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let mut field = RadianceField::new(bounds, resolutions);
    let mut trainer = FieldTrainer::new(&field, hyper.clone());
    let tracker = Tracker::new(hyper.clone(), derive_seed(seed, "bootstrap-track", 0));
    let mut poses: Vec<Pose> = vec![first_pose];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bootstrap", 0));

    // Phase A: fit the field to the first frame alone.
    let warmup = (iters * 2) / 5;
    for _ in 0..warmup {
        let batch = sample_batch(&frames[0], &poses[0], intr, hyper.ray_budget, &mut rng);
        if batch.is_empty() {
            return Err(Error::InsufficientData(
                "bootstrap frame 0 has no valid depth".into(),
            ));
        }
        trainer.step(&mut field, &batch)?;
    }

    // Phase B: track each following frame in, then train jointly on all
    // frames admitted so far.
    let per_frame = (iters - warmup) / (frames.len() - 1).max(1);
    for i in 1..frames.len() {
        let init = if i >= 2 {
            crate::geometry::constant_velocity_init(&poses[i - 1], &poses[i - 2])
        } else {
            poses[0]
        };
        let mut pose = init;
        let mut adam = Adam::new(6, hyper.lr_pose);
        let mut z = [0.0; 6];
        let mut pose_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "bootstrap-pose", i as u64));
        for _ in 0..40 {
            let (next, _) = tracker.pose_step(
                &field,
                &frames[i],
                intr,
                &pose,
                &mut adam,
                &mut z,
                &mut pose_rng,
            )?;
            pose = next;
        }
        poses.push(pose);
        for _ in 0..per_frame {
            let pick = rng.gen_range(0..=i);
            let batch = sample_batch(&frames[pick], &poses[pick], intr, hyper.ray_budget, &mut rng);
            if !batch.is_empty() {
                trainer.step(&mut field, &batch)?;
            }
        }
    }
    Ok(Bootstrap {
        field,
        trainer,
        poses,
    })
}

/// Renders a full frame from the field (color, ray-length depth, opacity).
pub fn render_field_image(
    field: &RadianceField,
    pose: &Pose,
    intr: &CameraIntrinsics,
    hyper: &FieldHyper,
) -> (crate::geometry::ColorImage, crate::geometry::DepthImage) {
    let (w, h) = (intr.width, intr.height);
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut crow = vec![[0.0; 3]; w];
            let mut drow = vec![0.0; w];
            for u in 0..w {
                let ray = intr.pixel_ray(u as f64 + 0.5, v as f64 + 0.5, pose);
                let (c, d, _) = render_ray(field, &ray, hyper.n_samples, hyper.near, hyper.far);
                crow[u] = c;
                drow[u] = d;
            }
            (crow, drow)
        })
        .collect();
    let mut color = crate::geometry::ColorImage::new(w, h);
    let mut depth = crate::geometry::DepthImage::new(w, h);
    for (v, (crow, drow)) in rows.into_iter().enumerate() {
        for u in 0..w {
            color.set(u, v, crow[u]);
            depth.set(u, v, drow[u]);
        }
    }
    (color, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, generate_trajectory, oracle_render, TrajectorySpec};
    use approx::assert_relative_eq;

    fn small_bounds() -> Aabb {
        Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
    }

    fn test_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn query_outside_bounds_is_empty() {
        let field = RadianceField::new(small_bounds(), &[8]);
        let (sigma, color) = field.query(&Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(sigma, 0.0);
        assert_eq!(color, [0.0; 3]);
    }

    #[test]
    fn constant_field_queries_activated_constant() {
        let mut field = RadianceField::new(small_bounds(), &[8]);
        field.levels[0].density.iter_mut().for_each(|v| *v = -2.0);
        field.levels[0].color.iter_mut().for_each(|v| *v = 0.3);
        let expect_sigma = DENSITY_SCALE * softplus(-2.0);
        let expect_color = sigmoid(0.3);
        for p in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.21, -0.73, 0.5),
            Vector3::new(-0.99, 0.99, -0.37),
        ] {
            let (sigma, color) = field.query(&p);
            assert_relative_eq!(sigma, expect_sigma, epsilon = 1e-12);
            for ch in 0..3 {
                assert_relative_eq!(color[ch], expect_color, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn corner_query_is_exact() {
        let mut field = RadianceField::new(small_bounds(), &[4]);
        let idx = field.levels[0].node_index(1, 2, 3);
        field.levels[0].density[idx] = 1.5;
        field.levels[0].color[idx * 3] = 0.8;
        // Node (1,2,3) of a 4-node grid over [-1,1]: spacing 2/3.
        let p = Vector3::new(-1.0 + 2.0 / 3.0, -1.0 + 4.0 / 3.0, 1.0);
        let (sigma, color) = field.query(&p);
        assert_relative_eq!(sigma, DENSITY_SCALE * softplus(1.5), epsilon = 1e-9);
        assert_relative_eq!(color[0], sigmoid(0.8), epsilon = 1e-9);
    }

    #[test]
    fn render_zero_density_field_is_black() {
        let mut field = RadianceField::new(small_bounds(), &[8]);
        // Deep negative raw values underflow softplus to exactly zero.
        field.levels[0].density.iter_mut().for_each(|v| *v = -1000.0);
        let ray = Ray::new(Vector3::new(0.0, 0.0, -0.9), Vector3::new(0.0, 0.0, 1.0));
        let (color, _depth, opacity) = render_ray(&field, &ray, 16, 0.05, 2.0);
        assert_eq!(color, [0.0; 3]);
        assert_eq!(opacity, 0.0);
    }

    #[test]
    fn render_opaque_slab() {
        let mut field = RadianceField::new(small_bounds(), &[16]);
        // Opaque red slab: nodes with x index 8 and beyond.
        for z in 0..16 {
            for y in 0..16 {
                for x in 8..16 {
                    let n = field.levels[0].node_index(x, y, z);
                    field.levels[0].density[n] = 25.0;
                    field.levels[0].color[n * 3] = 8.0;
                    field.levels[0].color[n * 3 + 1] = -8.0;
                    field.levels[0].color[n * 3 + 2] = -8.0;
                }
            }
        }
        // Slab face sits at node x=8 of 16 nodes over [-1,1]: x = 1/15.
        let ray = Ray::new(Vector3::new(-0.9, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0));
        let (color, depth, opacity) = render_ray(&field, &ray, 256, 0.05, 1.9);
        assert!(opacity > 0.99, "opacity {opacity}");
        assert!(color[0] > 0.9, "red {}", color[0]);
        assert!(color[1] < 0.1 && color[2] < 0.1);
        let slab_distance = (1.0 / 15.0) - (-0.9);
        assert!(
            (depth - slab_distance).abs() < 0.1,
            "depth {depth} vs slab {slab_distance}"
        );
    }

    #[test]
    fn two_sample_blend_by_hand() {
        // Hand-set sigma/delta/color for two samples.
        let sigmas = vec![2.0, 5.0];
        let deltas = vec![0.3, 0.4];
        let colors = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let depths = vec![0.5, 0.9];
        let samples = RaySamples::from_raw(
            vec![Vector3::zeros(); 2],
            depths.clone(),
            deltas.clone(),
            sigmas.clone(),
            colors.clone(),
        );
        let a1 = 1.0 - (-2.0f64 * 0.3).exp();
        let a2 = 1.0 - (-5.0f64 * 0.4).exp();
        let t2 = 1.0 - a1;
        assert_relative_eq!(samples.alphas[0], a1, epsilon = 1e-15);
        assert_relative_eq!(samples.transmittances[1], t2, epsilon = 1e-15);
        let (color, depth, opacity) = samples.composite();
        assert_relative_eq!(color[0], a1, epsilon = 1e-12);
        assert_relative_eq!(color[1], a2 * t2, epsilon = 1e-12);
        assert_relative_eq!(depth, 0.5 * a1 + 0.9 * a2 * t2, epsilon = 1e-12);
        assert_relative_eq!(opacity, a1 + a2 * t2, epsilon = 1e-12);
    }

    #[test]
    fn transmittance_telescoping() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 12;
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 40.0).collect();
            let deltas: Vec<f64> = (0..n).map(|_| 0.01 + rng.gen::<f64>() * 0.3).collect();
            let colors = vec![[0.5; 3]; n];
            let depths: Vec<f64> = (0..n).map(|j| j as f64 * 0.1).collect();
            let s = RaySamples::from_raw(vec![Vector3::zeros(); n], depths, deltas, sigmas, colors);
            assert_eq!(s.transmittances[0], 1.0);
            for j in 0..n - 1 {
                let expect = s.transmittances[j] * (1.0 - s.alphas[j]);
                assert!((expect - s.transmittances[j + 1]).abs() < 1e-12);
            }
            let (_, _, opacity) = s.composite();
            assert!((0.0..=1.0 + 1e-12).contains(&opacity));
        }
    }

    #[test]
    fn rendered_depth_within_range_times_opacity() {
        let mut field = RadianceField::new(small_bounds(), &[16]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        field.levels[0]
            .density
            .iter_mut()
            .for_each(|v| *v = rng.gen::<f64>() * 4.0 - 6.0);
        for _ in 0..30 {
            let origin = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let dir = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            if dir.norm() < 1e-6 {
                continue;
            }
            let (near, far) = (0.05, 2.0);
            let (color, depth, opacity) = render_ray(&field, &Ray::new(origin, dir), 32, near, far);
            assert!(opacity >= 0.0 && opacity <= 1.0 + 1e-12);
            assert!(color.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
            if opacity > 0.0 {
                assert!(depth >= near * opacity - 1e-12 && depth <= far * opacity + 1e-12);
            }
        }
    }

    #[test]
    fn field_loss_zero_when_rendered_matches_gt() {
        let mut field = RadianceField::new(small_bounds(), &[8]);
        field.levels[0].density.iter_mut().for_each(|v| *v = -1000.0);
        let hyper = FieldHyper {
            lambda_depth: 0.0,
            ..FieldHyper::for_bounds(&small_bounds())
        };
        // Black render vs black ground truth.
        let ray = Ray::new(Vector3::new(0.0, 0.0, -0.9), Vector3::new(0.0, 0.0, 1.0));
        let batch = TrainingBatch::new(vec![TrainingRay::new(ray, [0.0; 3], 1.0)])
        .unwrap();
        assert_relative_eq!(field_loss(&field, &batch, &hyper).unwrap(), 0.0);
    }

    #[test]
    fn field_loss_single_ray_unit_residual() {
        // A field rendering (1,0,0) against gt black: squared norm 1.
        let mut field = RadianceField::new(small_bounds(), &[8]);
        field.levels[0].density.iter_mut().for_each(|v| *v = 30.0);
        for n in 0..field.levels[0].density.len() {
            field.levels[0].color[n * 3] = 15.0;
            field.levels[0].color[n * 3 + 1] = -15.0;
            field.levels[0].color[n * 3 + 2] = -15.0;
        }
        let hyper = FieldHyper {
            lambda_depth: 0.0,
            n_samples: 64,
            ..FieldHyper::for_bounds(&small_bounds())
        };
        let ray = Ray::new(Vector3::new(0.0, 0.0, -0.99), Vector3::new(0.0, 0.0, 1.0));
        let batch = TrainingBatch::new(vec![TrainingRay::new(ray, [0.0; 3], 1.0)])
        .unwrap();
        let loss = field_loss(&field, &batch, &hyper).unwrap();
        assert_relative_eq!(loss, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn field_loss_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut field = RadianceField::new(small_bounds(), &[8]);
        field.levels[0]
            .density
            .iter_mut()
            .for_each(|v| *v = rng.gen::<f64>() * 6.0 - 8.0);
        let hyper = FieldHyper::for_bounds(&small_bounds());
        for _ in 0..100 {
            let ray = Ray::new(
                Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, -0.9),
                Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() + 0.2,
                ),
            );
            let batch = TrainingBatch::new(vec![TrainingRay::new(ray, [rng.gen(), rng.gen(), rng.gen()], 0.5 + rng.gen::<f64>())])
            .unwrap();
            assert!(field_loss(&field, &batch, &hyper).unwrap() >= 0.0);
        }
    }

    #[test]
    fn empty_batch_errors() {
        let field = RadianceField::new(small_bounds(), &[8]);
        let hyper = FieldHyper::for_bounds(&small_bounds());
        let batch = TrainingBatch { rays: vec![] };
        assert!(field_loss(&field, &batch, &hyper).is_err());
    }

    #[test]
    fn batch_invariant_rejects_invalid_depth() {
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        assert!(TrainingBatch::new(vec![TrainingRay::new(ray, [0.0; 3], 0.0)])
        .is_err());
    }

    fn grad_check_batch(rng: &mut ChaCha8Rng) -> TrainingBatch {
        let mut rays = Vec::new();
        for _ in 0..8 {
            let origin = Vector3::new(
                (rng.gen::<f64>() - 0.5) * 0.8,
                (rng.gen::<f64>() - 0.5) * 0.8,
                -0.9,
            );
            let dir = Vector3::new(
                (rng.gen::<f64>() - 0.5) * 0.4,
                (rng.gen::<f64>() - 0.5) * 0.4,
                1.0,
            );
            rays.push(TrainingRay::new(
                Ray::new(origin, dir),
                [rng.gen(), rng.gen(), rng.gen()],
                0.5 + rng.gen::<f64>(),
            ));
        }
        TrainingBatch::new(rays).unwrap()
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut field = RadianceField::new(small_bounds(), &[6, 10]);
        for level in &mut field.levels {
            level
                .density
                .iter_mut()
                .for_each(|v| *v = rng.gen::<f64>() * 3.0 - 2.0);
            level
                .color
                .iter_mut()
                .for_each(|v| *v = rng.gen::<f64>() * 2.0 - 1.0);
        }
        let hyper = FieldHyper {
            n_samples: 16,
            far: 2.2,
            ..FieldHyper::for_bounds(&small_bounds())
        };
        let batch = grad_check_batch(&mut rng);
        let mut grads = FieldGradients::zeros_like(&field);
        field_gradients(&field, &batch, &hyper, &mut grads).unwrap();

        let h = 1e-4;
        let mut checked = 0;
        for li in 0..field.levels.len() {
            // Entries with gradients far below the loss's f64 resolution are
            // skipped: central differences are pure rounding noise there.
            for _ in 0..30 {
                let n = rng.gen_range(0..field.levels[li].density.len());
                let analytic = grads.levels[li].0[n];
                if analytic.abs() < 1e-7 {
                    continue;
                }
                let orig = field.levels[li].density[n];
                field.levels[li].density[n] = orig + h;
                let lp = field_loss(&field, &batch, &hyper).unwrap();
                field.levels[li].density[n] = orig - h;
                let lm = field_loss(&field, &batch, &hyper).unwrap();
                field.levels[li].density[n] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                assert!(
                    rel < 1e-4,
                    "density grad mismatch: analytic {analytic} numeric {numeric} rel {rel}"
                );
                checked += 1;
            }
            for _ in 0..30 {
                let n = rng.gen_range(0..field.levels[li].color.len());
                let analytic = grads.levels[li].1[n];
                if analytic.abs() < 1e-7 {
                    continue;
                }
                let orig = field.levels[li].color[n];
                field.levels[li].color[n] = orig + h;
                let lp = field_loss(&field, &batch, &hyper).unwrap();
                field.levels[li].color[n] = orig - h;
                let lm = field_loss(&field, &batch, &hyper).unwrap();
                field.levels[li].color[n] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                assert!(
                    rel < 1e-4,
                    "color grad mismatch: analytic {analytic} numeric {numeric} rel {rel}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "too few informative entries checked: {checked}");
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut field = RadianceField::new(small_bounds(), &[6, 10]);
        for level in &mut field.levels {
            level
                .density
                .iter_mut()
                .for_each(|v| *v = rng.gen::<f64>() * 3.0 - 2.0);
            level
                .color
                .iter_mut()
                .for_each(|v| *v = rng.gen::<f64>() * 2.0 - 1.0);
        }
        let hyper = FieldHyper {
            n_samples: 16,
            far: 2.2,
            ..FieldHyper::for_bounds(&small_bounds())
        };
        let intr = test_intr();
        let pose = crate::scene::look_at(Vector3::new(0.0, 0.0, -0.9), Vector3::new(0.0, 0.0, 1.0));

        // Fixed pixel set; rebuild the batch at each perturbed pose the same way.
        let pixels: Vec<(f64, f64, [f64; 3], f64)> = (0..12)
            .map(|_| {
                (
                    rng.gen::<f64>() * 64.0,
                    rng.gen::<f64>() * 64.0,
                    [rng.gen(), rng.gen(), rng.gen()],
                    0.5 + rng.gen::<f64>(),
                )
            })
            .collect();
        let make_batch = |p: &Pose| {
            TrainingBatch::new(
                pixels
                    .iter()
                    .map(|(u, v, c, d)| TrainingRay::new(intr.pixel_ray(*u, *v, p), *c, *d))
                    .collect(),
            )
            .unwrap()
        };

        let (analytic, _) = pose_gradient(&field, &make_batch(&pose), &hyper).unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let mut xi = [0.0; 6];
            xi[k] = h;
            let lp = field_loss(&field, &make_batch(&Pose::exp(&xi).compose(&pose)), &hyper).unwrap();
            xi[k] = -h;
            let lm = field_loss(&field, &make_batch(&Pose::exp(&xi).compose(&pose)), &hyper).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / numeric.abs().max(1e-9);
            assert!(
                rel < 1e-3,
                "pose grad {k}: analytic {} numeric {numeric} rel {rel}",
                analytic[k]
            );
        }
    }

    #[test]
    fn zero_lr_leaves_field_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut field = RadianceField::new(small_bounds(), &[8]);
        let before = field.levels[0].density.clone();
        let hyper = FieldHyper::for_bounds(&small_bounds());
        let batch = grad_check_batch(&mut rng);
        field_step(&mut field, &batch, 0.0, &hyper).unwrap();
        assert_eq!(field.levels[0].density, before);
    }

    #[test]
    fn training_reduces_loss_tenfold_on_fixed_batch() {
        let scene = generate_scene(0);
        let intr = test_intr();
        let (gt, _) = generate_trajectory(&TrajectorySpec::default(), &scene, 0);
        let pose = gt.entries()[0].1;
        let frame = oracle_render(&scene, &pose, &intr).unwrap();
        let bounds = scene.room;
        let mut field = RadianceField::new(bounds, &[16, 32]);
        let hyper = FieldHyper::for_bounds(&bounds);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&frame, &pose, &intr, 1024, &mut rng);
        let mut trainer = FieldTrainer::new(&field, hyper.clone());
        let initial = field_loss(&field, &batch, &hyper).unwrap();
        for _ in 0..200 {
            trainer.step(&mut field, &batch).unwrap();
        }
        let final_loss = field_loss(&field, &batch, &hyper).unwrap();
        assert!(
            final_loss * 10.0 <= initial,
            "loss went {initial} -> {final_loss}, less than 10x"
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut field = RadianceField::new(small_bounds(), &[4, 6]);
        for level in &mut field.levels {
            level.density.iter_mut().for_each(|v| *v = rng.gen());
            level.color.iter_mut().for_each(|v| *v = rng.gen());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        field.save(&path).unwrap();
        let back = RadianceField::load(&path).unwrap();
        assert_eq!(back.levels.len(), 2);
        for (a, b) in field.levels.iter().zip(back.levels.iter()) {
            assert_eq!(a.resolution, b.resolution);
            assert_eq!(a.density, b.density);
            assert_eq!(a.color, b.color);
        }
        assert_eq!(back.bounds.min, field.bounds.min);
    }

    #[test]
    fn bootstrap_rejects_single_frame() {
        let intr = test_intr();
        let scene = generate_scene(0);
        let frame = oracle_render(&scene, &Pose::identity(), &intr);
        // Even if the render fails the API contract check happens first.
        let frames = vec![frame.unwrap()];
        let hyper = FieldHyper::for_bounds(&scene.room);
        assert!(matches!(
            bootstrap(&frames, &intr, scene.room, &[16], hyper, 10, 0),
            Err(Error::InsufficientData(_))
        ));
    }
}
