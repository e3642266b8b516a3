//! Procedurally generated multi-view toy scenes with analytic ground truth
//! for all six tasks: RGB, surface normals (SN), shading (SH), edges (ED),
//! keypoints (KP) and semantic labels (SL), plus auxiliary depth.
//!
//! Scenes are a handful of Lambertian spheres over an optional ground plane
//! under one directional light. Every annotation is derived analytically
//! from the ray-traced geometry; edges come from gradient magnitudes of the
//! label/depth maps and keypoints from a Harris-style corner response on RGB.

pub mod io;

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{generate_rays, CameraIntrinsics, CameraPose, CameraView, Ray};
use io::{PosesFile, SplitFile};

/// Number of semantic classes including background class 0.
pub const NUM_CLASSES: usize = 5;

/// Ambient light added to the Lambertian term.
pub const AMBIENT: f64 = 0.12;

/// Depth substituted for rays that hit nothing when a finite value is
/// required (reprojection baseline).
pub const BACKGROUND_DEPTH: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ToySceneError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("dataset needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub albedo: [f64; 3],
    pub class_id: u8,
}

#[derive(Debug, Clone)]
pub struct GroundPlane {
    pub y: f64,
    pub albedo: [f64; 3],
    pub class_id: u8,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub spheres: Vec<Sphere>,
    pub ground: Option<GroundPlane>,
    /// Unit vector pointing toward the light.
    pub light_direction: Vector3<f64>,
    pub background_color: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ToySceneError> {
        for s in &self.spheres {
            if s.radius <= 0.0 {
                return Err(ToySceneError::InvalidScene("sphere radius must be > 0".into()));
            }
            if s.class_id as usize >= NUM_CLASSES {
                return Err(ToySceneError::InvalidScene(format!(
                    "class id {} >= {NUM_CLASSES}",
                    s.class_id
                )));
            }
        }
        if let Some(g) = &self.ground {
            if g.class_id as usize >= NUM_CLASSES {
                return Err(ToySceneError::InvalidScene(format!(
                    "ground class id {} >= {NUM_CLASSES}",
                    g.class_id
                )));
            }
        }
        if (self.light_direction.norm() - 1.0).abs() > 1e-6 {
            return Err(ToySceneError::InvalidScene(
                "light direction must be unit length".into(),
            ));
        }
        Ok(())
    }

    /// Random desk-scale scene: 2-4 spheres near the origin over a ground
    /// plane, light from above. Deterministic in the seed.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_spheres = rng.random_range(2..=4usize);
        let ground_y = -0.8;
        let mut spheres = Vec::with_capacity(n_spheres);
        for i in 0..n_spheres {
            let radius = rng.random_range(0.35..0.65);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.0..0.9);
            let center = Vector3::new(
                dist * angle.cos(),
                ground_y + radius + rng.random_range(0.0..0.5),
                dist * angle.sin(),
            );
            let albedo = [
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.2..1.0),
            ];
            spheres.push(Sphere {
                center,
                radius,
                albedo,
                class_id: (i % 3 + 1) as u8,
            });
        }
        let light = Vector3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(0.5..1.0),
            rng.random_range(-0.6..0.6),
        )
        .normalize();
        SceneSpec {
            spheres,
            ground: Some(GroundPlane {
                y: ground_y,
                albedo: [
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                ],
                class_id: 4,
            }),
            light_direction: light,
            background_color: [
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
            ],
            seed,
        }
    }
}

/// Per-view stack of RGB and the five property maps, plus auxiliary depth.
/// Row-major `H x W (x channels)` storage; all float maps are exactly
/// representable in f32 so the PFM round trip is lossless.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub sn: Vec<f64>,
    pub sh: Vec<f64>,
    pub ed: Vec<f64>,
    pub kp: Vec<f64>,
    pub sl: Vec<u8>,
    /// Camera-frame z of the nearest hit; 0 marks a miss.
    pub depth: Vec<f64>,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

impl TaskBundle {
    pub fn view(&self) -> CameraView {
        CameraView {
            intrinsics: self.intrinsics,
            pose: self.pose,
        }
    }

    pub fn validate(&self) -> Result<(), ToySceneError> {
        let n = self.width * self.height;
        if self.rgb.len() != n * 3
            || self.sn.len() != n * 3
            || self.sh.len() != n
            || self.ed.len() != n
            || self.kp.len() != n
            || self.sl.len() != n
            || self.depth.len() != n
        {
            return Err(ToySceneError::InvalidScene("bundle shape mismatch".into()));
        }
        for i in 0..n {
            if self.sl[i] as usize >= NUM_CLASSES {
                return Err(ToySceneError::InvalidScene(format!(
                    "label {} out of range at pixel {i}",
                    self.sl[i]
                )));
            }
            if self.depth[i] > 0.0 {
                let nx = self.sn[i * 3];
                let ny = self.sn[i * 3 + 1];
                let nz = self.sn[i * 3 + 2];
                let norm = (nx * nx + ny * ny + nz * nz).sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(ToySceneError::InvalidScene(format!(
                        "normal at pixel {i} has norm {norm}"
                    )));
                }
            }
        }
        for v in self
            .rgb
            .iter()
            .chain(&self.sn)
            .chain(&self.sh)
            .chain(&self.ed)
            .chain(&self.kp)
            .chain(&self.depth)
        {
            if !v.is_finite() {
                return Err(ToySceneError::InvalidScene("non-finite map value".into()));
            }
        }
        Ok(())
    }
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    albedo: [f64; 3],
    class_id: u8,
}

fn intersect_sphere(ray: &Ray, s: &Sphere) -> Option<f64> {
    let oc = ray.origin - s.center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 1e-9 {
        return Some(t0);
    }
    let t1 = -b + sq;
    (t1 > 1e-9).then_some(t1)
}

fn intersect_plane(ray: &Ray, g: &GroundPlane) -> Option<f64> {
    if ray.direction.y.abs() < 1e-12 {
        return None;
    }
    let t = (g.y - ray.origin.y) / ray.direction.y;
    (t > 1e-9).then_some(t)
}

fn trace(spec: &SceneSpec, ray: &Ray) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for s in &spec.spheres {
        if let Some(t) = intersect_sphere(ray, s) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                let point = ray.point_at(t);
                best = Some(Hit {
                    t,
                    point,
                    normal: (point - s.center).normalize(),
                    albedo: s.albedo,
                    class_id: s.class_id,
                });
            }
        }
    }
    if let Some(g) = &spec.ground {
        if let Some(t) = intersect_plane(ray, g) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                let normal = if ray.origin.y >= g.y {
                    Vector3::new(0.0, 1.0, 0.0)
                } else {
                    Vector3::new(0.0, -1.0, 0.0)
                };
                best = Some(Hit {
                    t,
                    point: ray.point_at(t),
                    normal,
                    albedo: g.albedo,
                    class_id: g.class_id,
                });
            }
        }
    }
    best
}

/// Analytic surface normal of the primitive nearest to a world point.
pub fn analytic_normal_at(spec: &SceneSpec, p: Vector3<f64>) -> Vector3<f64> {
    let mut best_dist = f64::INFINITY;
    let mut normal = Vector3::zeros();
    for s in &spec.spheres {
        let d = ((p - s.center).norm() - s.radius).abs();
        if d < best_dist {
            best_dist = d;
            normal = (p - s.center).normalize();
        }
    }
    if let Some(g) = &spec.ground {
        let d = (p.y - g.y).abs();
        if d < best_dist {
            normal = Vector3::new(0.0, 1.0, 0.0);
        }
    }
    normal
}

/// Ray-trace one view of the scene and derive every task annotation.
pub fn render_ground_truth(spec: &SceneSpec, view: &CameraView) -> TaskBundle {
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    let n = w * h;
    let mut rgb = vec![0.0; n * 3];
    let mut sn = vec![0.0; n * 3];
    let mut sh = vec![0.0; n];
    let mut sl = vec![0u8; n];
    let mut depth = vec![0.0; n];

    let rot_t = view.pose.rotation().transpose();
    let center = view.pose.center();
    let pixels: Vec<(f64, f64)> = (0..n).map(|i| ((i % w) as f64, (i / w) as f64)).collect();
    let rays = generate_rays(view, &pixels).expect("pixel grid is in bounds");

    for (i, ray) in rays.iter().enumerate() {
        match trace(spec, ray) {
            Some(hit) => {
                let lambert = hit.normal.dot(&spec.light_direction).max(0.0);
                for c in 0..3 {
                    rgb[i * 3 + c] = (hit.albedo[c] * lambert + AMBIENT).clamp(0.0, 1.0);
                }
                sn[i * 3] = hit.normal.x;
                sn[i * 3 + 1] = hit.normal.y;
                sn[i * 3 + 2] = hit.normal.z;
                sh[i] = lambert;
                sl[i] = hit.class_id;
                depth[i] = (rot_t * (hit.point - center)).z;
            }
            None => {
                rgb[i * 3..i * 3 + 3].copy_from_slice(&spec.background_color);
                // sn stays zero, sh 0, sl background 0, depth 0
            }
        }
    }

    // ED: gradient magnitude of the label map and the normalized depth map
    let sl_f: Vec<f64> = sl.iter().map(|&c| c as f64).collect();
    let max_depth = depth.iter().cloned().fold(0.0f64, f64::max);
    let depth_n: Vec<f64> = if max_depth > 0.0 {
        depth.iter().map(|&d| d / max_depth).collect()
    } else {
        vec![0.0; n]
    };
    let mut ed_raw = sobel_magnitude(&sl_f, w, h);
    let sl_diff = neighbor_diff_magnitude(&sl_f, w, h);
    let depth_grad = sobel_magnitude(&depth_n, w, h);
    for i in 0..n {
        ed_raw[i] += sl_diff[i] + depth_grad[i];
    }
    let ed = minmax_normalize(&ed_raw);

    // KP: Harris-style corner response on the luma of the rendered RGB
    let gray: Vec<f64> = (0..n)
        .map(|i| 0.299 * rgb[i * 3] + 0.587 * rgb[i * 3 + 1] + 0.114 * rgb[i * 3 + 2])
        .collect();
    let kp = minmax_normalize(&harris_response(&gray, w, h));

    let mut bundle = TaskBundle {
        width: w,
        height: h,
        rgb,
        sn,
        sh,
        ed,
        kp,
        sl,
        depth,
        pose: view.pose,
        intrinsics: view.intrinsics,
    };
    for map in [
        &mut bundle.rgb,
        &mut bundle.sn,
        &mut bundle.sh,
        &mut bundle.ed,
        &mut bundle.kp,
        &mut bundle.depth,
    ] {
        for v in map.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    bundle
}

fn at(field: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, w as isize - 1) as usize;
    let yc = y.clamp(0, h as isize - 1) as usize;
    field[yc * w + xc]
}

fn sobel_magnitude(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(field, w, h, x + 1, y - 1) - at(field, w, h, x - 1, y - 1)
                + 2.0 * (at(field, w, h, x + 1, y) - at(field, w, h, x - 1, y))
                + at(field, w, h, x + 1, y + 1)
                - at(field, w, h, x - 1, y + 1);
            let gy = at(field, w, h, x - 1, y + 1) - at(field, w, h, x - 1, y - 1)
                + 2.0 * (at(field, w, h, x, y + 1) - at(field, w, h, x, y - 1))
                + at(field, w, h, x + 1, y + 1)
                - at(field, w, h, x + 1, y - 1);
            out[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Sum of absolute 4-neighbour differences; strictly positive exactly at
/// label boundaries.
fn neighbor_diff_magnitude(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(field, w, h, x, y);
            let mut acc = 0.0;
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                acc += (at(field, w, h, x + dx, y + dy) - c).abs();
            }
            out[(y as usize) * w + x as usize] = acc;
        }
    }
    out
}

fn box3(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(field, w, h, x + dx, y + dy);
                }
            }
            out[(y as usize) * w + x as usize] = acc / 9.0;
        }
    }
    out
}

fn harris_response(gray: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(gray, w, h, x + 1, y - 1) - at(gray, w, h, x - 1, y - 1)
                + 2.0 * (at(gray, w, h, x + 1, y) - at(gray, w, h, x - 1, y))
                + at(gray, w, h, x + 1, y + 1)
                - at(gray, w, h, x - 1, y + 1);
            let gy = at(gray, w, h, x - 1, y + 1) - at(gray, w, h, x - 1, y - 1)
                + 2.0 * (at(gray, w, h, x, y + 1) - at(gray, w, h, x, y - 1))
                + at(gray, w, h, x + 1, y + 1)
                - at(gray, w, h, x + 1, y - 1);
            let i = (y as usize) * w + x as usize;
            ix[i] = gx;
            iy[i] = gy;
        }
    }
    let ixx: Vec<f64> = ix.iter().map(|v| v * v).collect();
    let iyy: Vec<f64> = iy.iter().map(|v| v * v).collect();
    let ixy: Vec<f64> = ix.iter().zip(&iy).map(|(a, b)| a * b).collect();
    let sxx = box3(&ixx, w, h);
    let syy = box3(&iyy, w, h);
    let sxy = box3(&ixy, w, h);
    const K: f64 = 0.05;
    (0..n)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            (det - K * tr * tr).max(0.0)
        })
        .collect()
}

fn minmax_normalize(field: &[f64]) -> Vec<f64> {
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.0; field.len()];
    }
    field.iter().map(|&v| (v - min) / (max - min)).collect()
}

/// Camera orbit around a target point.
#[derive(Debug, Clone)]
pub struct OrbitParams {
    pub radius: f64,
    pub height: f64,
    pub target: Vector3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub near: f64,
    pub far: f64,
}

impl OrbitParams {
    pub fn pose(&self, frame: usize, n_frames: usize) -> CameraPose {
        let phi = std::f64::consts::TAU * frame as f64 / n_frames as f64;
        let eye = self.target + Vector3::new(self.radius * phi.cos(), self.height, self.radius * phi.sin());
        CameraPose::look_at(eye, self.target, Vector3::new(0.0, 1.0, 0.0))
    }
}

/// Frame indices held out for evaluation: every 8th frame.
pub fn held_out_frames(n_frames: usize) -> Vec<usize> {
    (0..n_frames).step_by(8).collect()
}

/// Render `n_frames` orbit views and write one scene directory.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_frames: usize,
    orbit: &OrbitParams,
    dir: &Path,
) -> Result<(), ToySceneError> {
    spec.validate()?;
    if n_frames < 2 {
        return Err(ToySceneError::TooFewFrames {
            needed: 2,
            got: n_frames,
        });
    }
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| ToySceneError::Io {
        path: frames_dir.display().to_string(),
        source: e,
    })?;

    let mut poses = PosesFile {
        fx: orbit.intrinsics.fx,
        fy: orbit.intrinsics.fy,
        cx: orbit.intrinsics.cx,
        cy: orbit.intrinsics.cy,
        width: orbit.intrinsics.width,
        height: orbit.intrinsics.height,
        near: orbit.near,
        far: orbit.far,
        frames: Vec::with_capacity(n_frames),
    };

    for f in 0..n_frames {
        let pose = orbit.pose(f, n_frames);
        let view = CameraView {
            intrinsics: orbit.intrinsics,
            pose,
        };
        let bundle = render_ground_truth(spec, &view);
        poses.frames.push(PosesFile::matrix_rows(&pose));
        write_frame(&frames_dir, f, &bundle)?;
    }

    io::write_json(&dir.join("poses.json"), &poses)?;
    io::write_json(
        &dir.join("split.json"),
        &SplitFile {
            held_out: held_out_frames(n_frames),
        },
    )?;
    Ok(())
}

fn write_frame(frames_dir: &Path, index: usize, bundle: &TaskBundle) -> Result<(), ToySceneError> {
    let (w, h) = (bundle.width, bundle.height);
    io::write_rgb_png(&frames_dir.join(format!("rgb_{index:04}.png")), w, h, &bundle.rgb)?;
    io::write_gray_png(&frames_dir.join(format!("sl_{index:04}.png")), w, h, &bundle.sl)?;
    io::write_pfm(&frames_dir.join(format!("sn_{index:04}.pfm")), w, h, 3, &bundle.sn)?;
    io::write_pfm(&frames_dir.join(format!("sh_{index:04}.pfm")), w, h, 1, &bundle.sh)?;
    io::write_pfm(&frames_dir.join(format!("ed_{index:04}.pfm")), w, h, 1, &bundle.ed)?;
    io::write_pfm(&frames_dir.join(format!("kp_{index:04}.pfm")), w, h, 1, &bundle.kp)?;
    io::write_pfm(
        &frames_dir.join(format!("depth_{index:04}.pfm")),
        w,
        h,
        1,
        &bundle.depth,
    )?;
    Ok(())
}

/// One scene loaded back from disk.
#[derive(Debug)]
pub struct SceneData {
    pub bundles: Vec<TaskBundle>,
    pub held_out: Vec<usize>,
    pub near: f64,
    pub far: f64,
}

impl SceneData {
    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.bundles.len())
            .filter(|i| !self.held_out.contains(i))
            .collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<SceneData, ToySceneError> {
    let poses: PosesFile = io::read_json(&dir.join("poses.json"))?;
    let split: SplitFile = io::read_json(&dir.join("split.json"))?;
    let intrinsics = poses.intrinsics()?;
    let frames_dir = dir.join("frames");
    let mut bundles = Vec::with_capacity(poses.frames.len());
    for f in 0..poses.frames.len() {
        let pose = poses.pose(f)?;
        let (w, h) = (intrinsics.width, intrinsics.height);
        let check = |name: &str, gw: usize, gh: usize| -> Result<(), ToySceneError> {
            if gw != w || gh != h {
                return Err(ToySceneError::Malformed {
                    path: frames_dir.join(name).display().to_string(),
                    reason: format!("map is {gw}x{gh}, poses.json says {w}x{h}"),
                });
            }
            Ok(())
        };
        let (rw, rh, rgb) = io::read_rgb_png(&frames_dir.join(format!("rgb_{f:04}.png")))?;
        check(&format!("rgb_{f:04}.png"), rw, rh)?;
        let (lw, lh, sl) = io::read_gray_png(&frames_dir.join(format!("sl_{f:04}.png")))?;
        check(&format!("sl_{f:04}.png"), lw, lh)?;
        let read_map = |name: &str, channels: usize| -> Result<Vec<f64>, ToySceneError> {
            let path = frames_dir.join(name);
            let (pw, ph, pc, data) = io::read_pfm(&path)?;
            if pw != w || ph != h || pc != channels {
                return Err(ToySceneError::Malformed {
                    path: path.display().to_string(),
                    reason: format!(
                        "map is {pw}x{ph}x{pc}, expected {w}x{h}x{channels}"
                    ),
                });
            }
            Ok(data)
        };
        let bundle = TaskBundle {
            width: w,
            height: h,
            rgb,
            sn: read_map(&format!("sn_{f:04}.pfm"), 3)?,
            sh: read_map(&format!("sh_{f:04}.pfm"), 1)?,
            ed: read_map(&format!("ed_{f:04}.pfm"), 1)?,
            kp: read_map(&format!("kp_{f:04}.pfm"), 1)?,
            sl,
            depth: read_map(&format!("depth_{f:04}.pfm"), 1)?,
            pose,
            intrinsics,
        };
        bundle.validate()?;
        bundles.push(bundle);
    }
    Ok(SceneData {
        bundles,
        held_out: split.held_out,
        near: poses.near,
        far: poses.far,
    })
}

/// Write a full dataset root: `train/scene_XXX` and `test/scene_XXX`
/// directories, scene specs drawn deterministically from the base seed.
pub fn generate_dataset_root(
    root: &Path,
    n_train: usize,
    n_test: usize,
    n_frames: usize,
    orbit: &OrbitParams,
    seed: u64,
) -> Result<(), ToySceneError> {
    for (split, count, offset) in [("train", n_train, 0u64), ("test", n_test, n_train as u64)] {
        for i in 0..count {
            let dir = root.join(split).join(format!("scene_{i:03}"));
            let spec = SceneSpec::random(seed.wrapping_mul(1000).wrapping_add(offset + i as u64));
            generate_dataset(&spec, n_frames, orbit, &dir)?;
        }
    }
    Ok(())
}

/// Load every scene under `root/train` and `root/test`, sorted by name.
pub type NamedScenes = Vec<(String, SceneData)>;

pub fn load_dataset_root(root: &Path) -> Result<(NamedScenes, NamedScenes), ToySceneError> {
    let mut out = Vec::new();
    for split in ["train", "test"] {
        let dir = root.join(split);
        let mut scenes = Vec::new();
        if dir.is_dir() {
            let mut names: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|e| ToySceneError::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for name in names {
                let data = load_dataset(&dir.join(&name))?;
                scenes.push((name, data));
            }
        }
        out.push(scenes);
    }
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, test))
}

/// Default orbit used by the dataset generator.
pub fn default_orbit(width: usize, height: usize) -> OrbitParams {
    let f = width as f64;
    OrbitParams {
        radius: 3.2,
        height: 1.2,
        target: Vector3::zeros(),
        intrinsics: CameraIntrinsics::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
        .expect("valid default intrinsics"),
        near: 1.6,
        far: 5.6,
    }
}
