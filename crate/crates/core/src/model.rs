//! Full pipeline wiring: task definitions, source-view selection, the
//! per-batch rendering graph (encode, gather, decode, compose, composite)
//! and whole-image rendering used by training, evaluation and the CLI.

use nalgebra::Vector3;
use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::{compose_prediction, Ablation, Decoder, DecoderConfig, DecoderError, EmptyPointPolicy};
use crate::encoder::{
    gather_scene_features, project_points, stack_images, ConvEncoder, EncoderConfig, EncoderError,
    Projection,
};
use crate::geometry::{generate_rays, view_angle, CameraView, GeometryError, Ray};
use crate::nn::{ParamStore, Session};
use crate::renderer::{composite_on_tape, sample_gaps, stratified_sample, RenderError};
use crate::tape::{Arr, Tape, Var};
use crate::toyscenes::{SceneData, TaskBundle, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{0}")]
    Invalid(String),
}

/// The six supported tasks; RGB always comes first in a task set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rgb,
    Sn,
    Sh,
    Ed,
    Kp,
    Sl,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Rgb, Task::Sn, Task::Sh, Task::Ed, Task::Kp, Task::Sl];

    pub fn channels(self) -> usize {
        match self {
            Task::Rgb | Task::Sn => 3,
            Task::Sh | Task::Ed | Task::Kp => 1,
            Task::Sl => NUM_CLASSES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Rgb => "rgb",
            Task::Sn => "sn",
            Task::Sh => "sh",
            Task::Ed => "ed",
            Task::Kp => "kp",
            Task::Sl => "sl",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.iter().copied().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub tasks: Vec<Task>,
    pub d_scene: usize,
    pub d_task: usize,
    pub d_prompt: usize,
    pub heads: usize,
    pub hidden: usize,
    pub cva_depth: usize,
    pub cta_depth: usize,
    pub angle_frequencies: usize,
    pub samples_per_ray: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            d_scene: 32,
            d_task: 32,
            d_prompt: 16,
            heads: 4,
            hidden: 64,
            cva_depth: 4,
            cta_depth: 2,
            angle_frequencies: 6,
            samples_per_ray: 12,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tasks.first() != Some(&Task::Rgb) {
            return Err(ModelError::Invalid("task set must start with rgb".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(ModelError::Invalid(format!("duplicate task {}", t.name())));
            }
        }
        Ok(())
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            n_tasks: self.tasks.len(),
            d_scene: self.d_scene,
            d_task: self.d_task,
            d_prompt: self.d_prompt,
            heads: self.heads,
            hidden: self.hidden,
            cva_depth: self.cva_depth,
            cta_depth: self.cta_depth,
            angle_frequencies: self.angle_frequencies,
            ablation: self.ablation,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: ConvEncoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ConvEncoder::new(
            &mut store,
            &mut rng,
            EncoderConfig {
                d_scene: cfg.d_scene,
            },
        );
        let decoder = Decoder::new(&mut store, &mut rng, cfg.decoder_config());
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
        })
    }
}

/// Indices of the `v` source frames nearest to a target pose by camera
/// center distance, excluding the target itself.
pub fn nearest_source_frames(
    scene: &SceneData,
    candidates: &[usize],
    target_center: Vector3<f64>,
    v: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut by_dist: Vec<(f64, usize)> = candidates
        .iter()
        .copied()
        .filter(|&f| Some(f) != exclude)
        .map(|f| {
            let c = scene.bundles[f].pose.center();
            ((c - target_center).norm(), f)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    by_dist.into_iter().take(v).map(|(_, f)| f).collect()
}

/// Where the per-point source annotation values come from.
pub enum ValueSource<'a> {
    /// Ground-truth bundles (training and inference Setting I).
    Ground,
    /// Predicted per-view maps (inference Setting II); RGB still comes from
    /// the raw source images.
    Predicted(&'a [crate::setting2::PredictedBundle]),
}

/// Bilinear sample of a row-major `H x W x C` map at continuous pixel
/// coordinates.
pub fn sample_map(map: &[f64], w: usize, h: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let x0 = x.floor().clamp(0.0, (w - 1) as f64);
    let y0 = y.floor().clamp(0.0, (h - 1) as f64);
    let fx = (x - x0).clamp(0.0, 1.0);
    let fy = (y - y0).clamp(0.0, 1.0);
    let (x0u, y0u) = (x0 as usize, y0 as usize);
    let x1 = (x0u + 1).min(w - 1);
    let y1 = (y0u + 1).min(h - 1);
    let mut out = vec![0.0; c];
    for (xi, yi, wgt) in [
        (x0u, y0u, (1.0 - fx) * (1.0 - fy)),
        (x1, y0u, fx * (1.0 - fy)),
        (x0u, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        for ch in 0..c {
            out[ch] += wgt * map[(yi * w + xi) * c + ch];
        }
    }
    out
}

/// Gather per-point per-view annotation values for every task, as tape
/// constants shaped `[P, V, C_task]`. Invalid projections contribute zero
/// rows (their view weight is exactly zero).
fn gather_source_values(
    tape: &Tape,
    tasks: &[Task],
    bundles: &[&TaskBundle],
    projections: &[Vec<Projection>],
    source: &ValueSource,
) -> Vec<Var> {
    let v = bundles.len();
    let p = projections[0].len();
    tasks
        .iter()
        .map(|&task| {
            let c = task.channels();
            let mut arr = Arr::zeros(IxDyn(&[p, v, c]));
            for (vi, bundle) in bundles.iter().enumerate() {
                let (w, h) = (bundle.width, bundle.height);
                for (pi, pr) in projections[vi].iter().enumerate() {
                    if !pr.valid {
                        continue;
                    }
                    let vals: Vec<f64> = match (&source, task) {
                        (ValueSource::Ground, Task::Rgb) => {
                            sample_map(&bundle.rgb, w, h, 3, pr.u, pr.v)
                        }
                        (ValueSource::Ground, Task::Sn) => {
                            sample_map(&bundle.sn, w, h, 3, pr.u, pr.v)
                        }
                        (ValueSource::Ground, Task::Sh) => {
                            sample_map(&bundle.sh, w, h, 1, pr.u, pr.v)
                        }
                        (ValueSource::Ground, Task::Ed) => {
                            sample_map(&bundle.ed, w, h, 1, pr.u, pr.v)
                        }
                        (ValueSource::Ground, Task::Kp) => {
                            sample_map(&bundle.kp, w, h, 1, pr.u, pr.v)
                        }
                        (ValueSource::Ground, Task::Sl) => {
                            // hard labels: nearest pixel, one-hot
                            let x = pr.u.round().clamp(0.0, (w - 1) as f64) as usize;
                            let y = pr.v.round().clamp(0.0, (h - 1) as f64) as usize;
                            let mut one_hot = vec![0.0; NUM_CLASSES];
                            one_hot[bundle.sl[y * w + x] as usize] = 1.0;
                            one_hot
                        }
                        (ValueSource::Predicted(pred), task) => {
                            let pb = &pred[vi];
                            match task {
                                // Setting II keeps compositing RGB from the
                                // raw source images
                                Task::Rgb => sample_map(&bundle.rgb, w, h, 3, pr.u, pr.v),
                                other => pb.sample(other, pr.u, pr.v),
                            }
                        }
                    };
                    for (ch, val) in vals.iter().enumerate() {
                        arr[[pi, vi, ch]] = *val;
                    }
                }
            }
            tape.constant(arr)
        })
        .collect()
}

/// A batch of target rays with stratified samples.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    /// `[R, M]` sample positions.
    pub t: Array2<f64>,
    /// `[R, M]` gaps, last gap filled to the far bound.
    pub delta: Array2<f64>,
}

impl RayBatch {
    pub fn build(
        view: &CameraView,
        pixels: &[(f64, f64)],
        near: f64,
        far: f64,
        m: usize,
        jitter: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let rays = generate_rays(view, pixels)?;
        let r = rays.len();
        let mut t = Array2::zeros((r, m));
        let mut delta = Array2::zeros((r, m));
        for ri in 0..r {
            let samples = stratified_sample(near, far, m, jitter, rng)?;
            let gaps = sample_gaps(&samples, far);
            for mi in 0..m {
                t[[ri, mi]] = samples[mi];
                delta[[ri, mi]] = gaps[mi];
            }
        }
        Ok(Self { rays, t, delta })
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        let m = self.t.ncols();
        let mut pts = Vec::with_capacity(self.rays.len() * m);
        for (ri, ray) in self.rays.iter().enumerate() {
            for mi in 0..m {
                pts.push(ray.point_at(self.t[[ri, mi]]));
            }
        }
        pts
    }
}

/// Rendered per-ray outputs on the tape.
pub struct RenderedRays {
    /// One `[R, C_task]` var per task, ordered as the model's task set.
    pub rendered: Vec<Var>,
    /// `[R, M]` compositing weights.
    pub weights: Var,
    /// `[R]` accumulated opacity.
    pub opacity: Var,
    /// `[R*M]` per-point densities.
    pub sigma: Var,
}

impl Model {
    /// Run the encoder over the stacked source images; the result feeds
    /// `render_rays_with_volumes`.
    pub fn encode_sources(&self, s: &Session, bundles: &[&TaskBundle]) -> Result<Var, ModelError> {
        let images: Vec<(&[f64], usize, usize)> = bundles
            .iter()
            .map(|b| (b.rgb.as_slice(), b.width, b.height))
            .collect();
        let stacked = stack_images(s.tape, &images)?;
        Ok(self.encoder.extract_features(s, stacked)?)
    }

    /// Full conditional rendering of a ray batch given precomputed feature
    /// volumes (`[V,d_scene,H,W]`, tape var or constant).
    pub fn render_rays_with_volumes(
        &self,
        s: &Session,
        volumes: Var,
        source_bundles: &[&TaskBundle],
        batch: &RayBatch,
        values: &ValueSource,
        empty_policy: EmptyPointPolicy,
    ) -> Result<RenderedRays, ModelError> {
        let tape = s.tape;
        let views: Vec<CameraView> = source_bundles.iter().map(|b| b.view()).collect();
        let points = batch.points();
        let (r, m) = (batch.rays.len(), batch.t.ncols());
        let p = points.len();
        let v = views.len();

        let projections = project_points(&views, &points);
        let (scene_feat, mask) = gather_scene_features(tape, volumes, &projections);

        // view angles per point
        let mut angles = Array2::zeros((p, v));
        for (vi, view) in views.iter().enumerate() {
            let center = view.pose.center();
            for (pi, q) in points.iter().enumerate() {
                if !mask[pi][vi] {
                    continue;
                }
                let ray = &batch.rays[pi / m];
                angles[[pi, vi]] = view_angle(ray, center, *q).unwrap_or(0.0);
            }
        }

        let out = self
            .decoder
            .forward(s, scene_feat, &angles, &mask, empty_policy)?;

        let source_values =
            gather_source_values(tape, &self.cfg.tasks, source_bundles, &projections, values);
        let per_point = compose_prediction(tape, out.weights, &source_values)?;

        let sigma_rm = tape.reshape(out.sigma, &[r, m]);
        let values_rm: Vec<Var> = per_point
            .iter()
            .zip(&self.cfg.tasks)
            .map(|(&vp, t)| tape.reshape(vp, &[r, m, t.channels()]))
            .collect();
        let (rendered, weights, opacity) =
            composite_on_tape(tape, sigma_rm, batch.delta.clone().into_dyn(), &values_rm);

        Ok(RenderedRays {
            rendered,
            weights,
            opacity,
            sigma: out.sigma,
        })
    }
}

/// Dense per-task maps rendered for one full target view.
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    /// `(task, H*W*C)` rows in model task order; SL holds class probabilities.
    pub maps: Vec<(Task, Vec<f64>)>,
    pub opacity: Vec<f64>,
}

impl RenderedMaps {
    pub fn map(&self, task: Task) -> Option<&[f64]> {
        self.maps
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, m)| m.as_slice())
    }

    /// Argmax class map from the composited SL probabilities.
    pub fn sl_labels(&self) -> Option<Vec<u8>> {
        self.map(Task::Sl).map(|probs| {
            probs
                .chunks(NUM_CLASSES)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i as u8)
                        .unwrap_or(0)
                })
                .collect()
        })
    }
}

/// Render every pixel of a target view in chunks, feature volumes computed
/// once and reused as constants (no gradients).
pub fn render_view(
    model: &Model,
    source_bundles: &[&TaskBundle],
    target: &CameraView,
    near: f64,
    far: f64,
    values: &ValueSource,
    chunk: usize,
) -> Result<RenderedMaps, ModelError> {
    let (w, h) = (target.intrinsics.width, target.intrinsics.height);
    let volumes_value = {
        let tape = Tape::new();
        let s = Session::new(&tape, &model.store);
        let vols = model.encode_sources(&s, source_bundles)?;
        tape.to_owned_value(vols)
    };

    let m = model.cfg.samples_per_ray;
    let mut maps: Vec<(Task, Vec<f64>)> = model
        .cfg
        .tasks
        .iter()
        .map(|&t| (t, vec![0.0; w * h * t.channels()]))
        .collect();
    let mut opacity = vec![0.0; w * h];

    let all_pixels: Vec<(f64, f64)> = (0..w * h).map(|i| ((i % w) as f64, (i / w) as f64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: jitter off at render time
    for chunk_start in (0..all_pixels.len()).step_by(chunk) {
        let chunk_px = &all_pixels[chunk_start..(chunk_start + chunk).min(all_pixels.len())];
        let tape = Tape::new();
        let s = Session::new(&tape, &model.store);
        let vols = tape.constant(volumes_value.clone());
        let batch = RayBatch::build(target, chunk_px, near, far, m, false, &mut rng)?;
        let out = model.render_rays_with_volumes(
            &s,
            vols,
            source_bundles,
            &batch,
            values,
            EmptyPointPolicy::ZeroDensity,
        )?;
        for (ti, (task, map)) in maps.iter_mut().enumerate() {
            let vals = tape.to_owned_value(out.rendered[ti]);
            let c = task.channels();
            for (ri, _) in chunk_px.iter().enumerate() {
                let px = chunk_start + ri;
                for ch in 0..c {
                    map[px * c + ch] = vals[[ri, ch]];
                }
            }
        }
        let op = tape.to_owned_value(out.opacity);
        for (ri, _) in chunk_px.iter().enumerate() {
            opacity[chunk_start + ri] = op[[ri]];
        }
    }

    Ok(RenderedMaps {
        width: w,
        height: h,
        maps,
        opacity,
    })
}
