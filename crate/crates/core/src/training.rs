//! Multi-task losses, Adam optimisation with the two-stage schedule (stage 1
//! freezes the cross-task stage-2 self-attention parameters), ray-batch
//! sampling over the training scenes and binary checkpointing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::EmptyPointPolicy;
use crate::model::{nearest_source_frames, Model, ModelError, RayBatch, Task, ValueSource};
use crate::nn::{ParamGroup, ParamStore, Session};
use crate::setting2::{gather_predictions_at_pixels, Setting2Error, UNet};
use crate::tape::{Arr, Tape, Var};
use crate::toyscenes::{SceneData, TaskBundle, NUM_CLASSES};

/// Floor for the log inside cross-entropy; far below any probability the
/// closed-form loss examples exercise.
pub const CE_PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Setting2(#[from] Setting2Error),
    #[error("non-finite loss at iteration {iter}: {details}")]
    NonFiniteLoss { iter: usize, details: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("dataset has no training scenes")]
    EmptyDataset,
    #[error("unknown task {0}")]
    UnknownTask(String),
}

/// Per-task loss weights; defaults follow the published training setup.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub sn: f64,
    pub sl: f64,
    pub sh: f64,
    pub kp: f64,
    pub ed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            sn: 1.0,
            sl: 0.04,
            sh: 0.1,
            kp: 2.0,
            ed: 0.4,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::Rgb => self.rgb,
            Task::Sn => self.sn,
            Task::Sl => self.sl,
            Task::Sh => self.sh,
            Task::Kp => self.kp,
            Task::Ed => self.ed,
        }
    }
}

/// Pixel-space task loss between a prediction `[N,C]` on the tape and
/// ground-truth rows: MSE for RGB, L1 for the regression tasks, and
/// cross-entropy of composited class probabilities against integer labels
/// for SL.
pub fn task_loss(tape: &Tape, task: Task, pred: Var, gt: &Arr) -> Var {
    let shape = tape.shape(pred);
    assert_eq!(shape.as_slice(), gt.shape(), "task_loss: shape mismatch");
    match task {
        Task::Rgb => {
            let diff = tape.sub(pred, tape.constant(gt.clone()));
            tape.mean_all(tape.mul(diff, diff))
        }
        Task::Sn | Task::Sh | Task::Ed | Task::Kp => {
            let diff = tape.sub(pred, tape.constant(gt.clone()));
            tape.mean_all(tape.abs(diff))
        }
        Task::Sl => {
            // gt rows are one-hot class indicators; pick the hit probability
            let picked = tape.sum_last(tape.mul(pred, tape.constant(gt.clone())));
            tape.neg(tape.mean_all(tape.ln_clamped(picked, CE_PROB_FLOOR)))
        }
    }
}

/// Weighted sum of per-task losses.
pub fn multitask_loss(tape: &Tape, losses: &[(Task, Var)], weights: &LossWeights) -> Var {
    assert!(!losses.is_empty());
    let mut acc: Option<Var> = None;
    for &(task, l) in losses {
        let scaled = tape.affine(l, weights.weight(task), 0.0);
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled),
            None => scaled,
        });
    }
    acc.unwrap()
}

/// One-hot rows for integer labels.
pub fn one_hot_rows(labels: &[u8]) -> Arr {
    let mut out = Arr::zeros(IxDyn(&[labels.len(), NUM_CLASSES]));
    for (i, &c) in labels.iter().enumerate() {
        out[[i, c as usize]] = 1.0;
    }
    out
}

/// Adam with per-parameter step counts; moments and parameters are rounded
/// to f32 after every update so checkpoints round-trip exactly.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Arr::zeros(e.value.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        let t = vec![0; store.len()];
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m,
            v,
            t,
        }
    }

    /// Apply one update from collected parameter gradients, skipping
    /// parameters in frozen groups.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        param_grads: &[(crate::nn::ParamId, Arr)],
        frozen: &dyn Fn(ParamGroup) -> bool,
    ) {
        for (id, g) in param_grads {
            let id = *id;
            if frozen(store.group(id)) {
                continue;
            }
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let b1 = self.beta1;
            let b2 = self.beta2;
            self.m[i].zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            let mut new_val = store.value(id).clone();
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut new_val)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            // keep optimizer state f32-exact alongside the parameters
            crate::nn::round_to_f32(&mut self.m[i]);
            crate::nn::round_to_f32(&mut self.v[i]);
            store.set_value(id, new_val);
        }
    }
}

/// Pull per-parameter gradient arrays out of a finished backward pass.
pub fn collect_gradients(
    session: &Session,
    store: &ParamStore,
    grads: &crate::tape::Gradients,
) -> Vec<(crate::nn::ParamId, Arr)> {
    store
        .ids()
        .filter_map(|id| {
            let var = session.bound_var(id)?;
            let g = grads.get(var)?;
            Some((id, g.clone()))
        })
        .collect()
}

/// Training schedule: stage 1 trains everything except the cross-task
/// stage-2 self-attention parameters, stage 2 unfreezes them.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TwoStageSchedule {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
}

impl TwoStageSchedule {
    pub fn total(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    /// Whether a parameter group is frozen at a given iteration (0-based).
    pub fn frozen(&self, iter: usize, group: ParamGroup) -> bool {
        iter < self.stage1_iters && group == ParamGroup::CtaSelfAttention
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub schedule: TwoStageSchedule,
    pub rays_per_iter: usize,
    pub source_views: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub setting2: bool,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: TwoStageSchedule {
                stage1_iters: 5000,
                stage2_iters: 1000,
            },
            rays_per_iter: 1024,
            source_views: 5,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            loss_weights: LossWeights::default(),
            seed: 0,
            setting2: false,
            log_every: 100,
        }
    }
}

/// Per-iteration loss record.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub per_task: Vec<(Task, f64)>,
    pub unet_per_task: Vec<(Task, f64)>,
}

/// A fixed description of one training batch: which scene/frame and pixels.
#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub scene: usize,
    pub target_frame: usize,
    pub pixels: Vec<(usize, usize)>,
    pub jitter_seed: u64,
}

impl BatchSpec {
    /// Sample a batch uniformly over training scenes, frames and pixels.
    pub fn sample(scenes: &[SceneData], rays: usize, rng: &mut ChaCha8Rng) -> Self {
        let scene = rng.random_range(0..scenes.len());
        let frames = scenes[scene].train_frames();
        let target_frame = frames[rng.random_range(0..frames.len())];
        let b = &scenes[scene].bundles[target_frame];
        let pixels = (0..rays)
            .map(|_| {
                (
                    rng.random_range(0..b.width),
                    rng.random_range(0..b.height),
                )
            })
            .collect();
        BatchSpec {
            scene,
            target_frame,
            pixels,
            jitter_seed: rng.random(),
        }
    }
}

/// Ground-truth rows for the batch pixels of one frame.
fn gt_rows(bundle: &TaskBundle, task: Task, pixels: &[(usize, usize)]) -> Arr {
    let c = task.channels();
    let w = bundle.width;
    let mut out = Arr::zeros(IxDyn(&[pixels.len(), c]));
    for (i, &(x, y)) in pixels.iter().enumerate() {
        let px = y * w + x;
        match task {
            Task::Rgb => {
                for ch in 0..3 {
                    out[[i, ch]] = bundle.rgb[px * 3 + ch];
                }
            }
            Task::Sn => {
                for ch in 0..3 {
                    out[[i, ch]] = bundle.sn[px * 3 + ch];
                }
            }
            Task::Sh => out[[i, 0]] = bundle.sh[px],
            Task::Ed => out[[i, 0]] = bundle.ed[px],
            Task::Kp => out[[i, 0]] = bundle.kp[px],
            Task::Sl => out[[i, bundle.sl[px] as usize]] = 1.0,
        }
    }
    out
}

/// Everything trainable in one place: the radiance-field model and, when
/// Setting II is enabled, the U-Net annotation predictor sharing the same
/// parameter store.
pub struct Trainable {
    pub model: Model,
    pub unet: Option<UNet>,
}

impl Trainable {
    pub fn new(model: Model, setting2: bool, seed: u64) -> Result<Self, TrainError> {
        let mut model = model;
        let unet = if setting2 {
            let tasks: Vec<Task> = model
                .cfg
                .tasks
                .iter()
                .copied()
                .filter(|&t| t != Task::Rgb)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_u64);
            Some(UNet::new(&mut model.store, &mut rng, &tasks)?)
        } else {
            None
        };
        Ok(Self { model, unet })
    }
}

/// One optimisation step over one ray batch. Returns the loss record.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    trainable: &mut Trainable,
    adam: &mut Adam,
    scenes: &[SceneData],
    batch: &BatchSpec,
    opts: &TrainOptions,
    iter: usize,
) -> Result<LossRecord, TrainError> {
    let scene = &scenes[batch.scene];
    let target = &scene.bundles[batch.target_frame];
    let sources_idx = nearest_source_frames(
        scene,
        &scene.train_frames(),
        target.pose.center(),
        opts.source_views,
        Some(batch.target_frame),
    );
    let sources: Vec<&TaskBundle> = sources_idx.iter().map(|&i| &scene.bundles[i]).collect();

    let tape = Tape::new();
    let session = Session::new(&tape, &trainable.model.store);

    let pixels_f: Vec<(f64, f64)> = batch
        .pixels
        .iter()
        .map(|&(x, y)| (x as f64, y as f64))
        .collect();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(batch.jitter_seed);
    let ray_batch = RayBatch::build(
        &target.view(),
        &pixels_f,
        scene.near,
        scene.far,
        trainable.model.cfg.samples_per_ray,
        true,
        &mut jitter_rng,
    )?;

    let volumes = trainable.model.encode_sources(&session, &sources)?;
    let out = trainable.model.render_rays_with_volumes(
        &session,
        volumes,
        &sources,
        &ray_batch,
        &ValueSource::Ground,
        EmptyPointPolicy::ZeroDensity,
    )?;

    let tasks = trainable.model.cfg.tasks.clone();
    let mut per_task_losses = Vec::with_capacity(tasks.len());
    for (ti, &task) in tasks.iter().enumerate() {
        let gt = gt_rows(target, task, &batch.pixels);
        per_task_losses.push((task, task_loss(&tape, task, out.rendered[ti], &gt)));
    }

    // Setting II: pixel-wise supervision of the U-Net on the source views
    let mut unet_losses: Vec<(Task, Var)> = Vec::new();
    if let Some(unet) = &trainable.unet {
        let images: Vec<(&[f64], usize, usize)> = sources
            .iter()
            .map(|b| (b.rgb.as_slice(), b.width, b.height))
            .collect();
        let stacked = crate::encoder::stack_images(&tape, &images)?;
        let predictions = unet.forward(&session, stacked)?;
        for (task, maps) in predictions {
            let mut view_losses = Vec::new();
            for (vi, bundle) in sources.iter().enumerate() {
                let c = task.channels();
                let (w, h) = (bundle.width, bundle.height);
                let view_map = tape.reshape(tape.narrow(maps, 0, vi, 1), &[c, h, w]);
                let rows = gather_predictions_at_pixels(&tape, view_map, &batch.pixels);
                let gt = gt_rows(bundle, task, &batch.pixels);
                view_losses.push(task_loss(&tape, task, rows, &gt));
            }
            let mut acc = view_losses[0];
            for &l in &view_losses[1..] {
                acc = tape.add(acc, l);
            }
            let mean = tape.affine(acc, 1.0 / view_losses.len() as f64, 0.0);
            unet_losses.push((task, mean));
        }
    }

    let mut combined: Vec<(Task, Var)> = per_task_losses.clone();
    combined.extend(unet_losses.iter().copied());
    let total = multitask_loss(&tape, &combined, &opts.loss_weights);

    let total_value = *tape.to_owned_value(total).first().unwrap();
    let record = LossRecord {
        iter,
        total: total_value,
        per_task: per_task_losses
            .iter()
            .map(|&(t, v)| (t, *tape.to_owned_value(v).first().unwrap()))
            .collect(),
        unet_per_task: unet_losses
            .iter()
            .map(|&(t, v)| (t, *tape.to_owned_value(v).first().unwrap()))
            .collect(),
    };
    if !total_value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            iter,
            details: format!("{:?}", record.per_task),
        });
    }

    let grads = tape.backward(total);
    let param_grads = collect_gradients(&session, &trainable.model.store, &grads);
    drop(session);
    drop(tape);
    let schedule = opts.schedule;
    adam.step(&mut trainable.model.store, &param_grads, &|group| {
        schedule.frozen(iter, group)
    });
    Ok(record)
}

/// Full training loop over preloaded scenes. `on_record` sees every
/// iteration's losses (for CSV logging).
pub fn train(
    trainable: &mut Trainable,
    scenes: &[SceneData],
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&LossRecord),
) -> Result<(), TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    crate::tune_allocator();
    let mut adam = Adam::new(&trainable.model.store, opts.lr, opts.beta1, opts.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for iter in 0..opts.schedule.total() {
        let batch = BatchSpec::sample(scenes, opts.rays_per_iter, &mut rng);
        let record = train_step(trainable, &mut adam, scenes, &batch, opts, iter)?;
        on_record(&record);
    }
    Ok(())
}

// ---- checkpoint format ----
//
// Binary container: magic "MVCP", u32 version, u64 iteration, u32 entry
// count, then per entry: u16 name length, name bytes, u8 ndim, u32 dims,
// f32 little-endian data. Parameters are stored under their names,
// optimizer moments under "<name>#m" / "<name>#v", per-parameter step
// counts under "<name>#t".

const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCP";
const CHECKPOINT_VERSION: u32 = 1;

fn write_entry<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    iteration: u64,
) -> Result<(), TrainError> {
    let err = |e: std::io::Error| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(CHECKPOINT_MAGIC).map_err(err)?;
    buf.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(err)?;
    buf.write_all(&iteration.to_le_bytes()).map_err(err)?;
    let n_entries = store.len() * if adam.is_some() { 4 } else { 1 };
    buf.write_all(&(n_entries as u32).to_le_bytes()).map_err(err)?;
    for (i, e) in store.entries().iter().enumerate() {
        let data: Vec<f64> = e.value.iter().copied().collect();
        write_entry(&mut buf, &e.name, e.value.shape(), &data).map_err(err)?;
        if let Some(adam) = adam {
            let m: Vec<f64> = adam.m[i].iter().copied().collect();
            let v: Vec<f64> = adam.v[i].iter().copied().collect();
            write_entry(&mut buf, &format!("{}#m", e.name), e.value.shape(), &m).map_err(err)?;
            write_entry(&mut buf, &format!("{}#v", e.name), e.value.shape(), &v).map_err(err)?;
            write_entry(&mut buf, &format!("{}#t", e.name), &[1], &[adam.t[i] as f64])
                .map_err(err)?;
        }
    }
    std::fs::write(path, buf).map_err(err)
}

pub struct Checkpoint {
    pub iteration: u64,
    pub entries: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let fail = |reason: String| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| fail(e.to_string()))?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|e| fail(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let mut u32b = [0u8; 4];
    cur.read_exact(&mut u32b).map_err(|e| fail(e.to_string()))?;
    if u32::from_le_bytes(u32b) != CHECKPOINT_VERSION {
        return Err(fail("unsupported version".into()));
    }
    let mut u64b = [0u8; 8];
    cur.read_exact(&mut u64b).map_err(|e| fail(e.to_string()))?;
    let iteration = u64::from_le_bytes(u64b);
    cur.read_exact(&mut u32b).map_err(|e| fail(e.to_string()))?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut entries = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        cur.read_exact(&mut u16b).map_err(|e| fail(e.to_string()))?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|e| fail(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| fail(e.to_string()))?;
        let mut ndim = [0u8; 1];
        cur.read_exact(&mut ndim).map_err(|e| fail(e.to_string()))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            cur.read_exact(&mut u32b).map_err(|e| fail(e.to_string()))?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            cur.read_exact(&mut u32b).map_err(|e| fail(e.to_string()))?;
            data.push(f32::from_le_bytes(u32b) as f64);
        }
        entries.insert(name, (shape, data));
    }
    Ok(Checkpoint { iteration, entries })
}

/// Restore parameter values (and optionally optimizer state) from a
/// checkpoint into an existing store built from the same config.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    adam: Option<&mut Adam>,
) -> Result<u64, TrainError> {
    let ck = read_checkpoint(path)?;
    let fail = |reason: String| TrainError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (shape, data) = ck
            .entries
            .get(&name)
            .ok_or_else(|| fail(format!("missing parameter '{name}'")))?;
        if shape.as_slice() != store.value(id).shape() {
            return Err(fail(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                shape,
                store.value(id).shape()
            )));
        }
        let arr = Arr::from_shape_vec(IxDyn(shape), data.clone()).unwrap();
        store.set_value(id, arr);
    }
    if let Some(adam) = adam {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let i = id.0;
            if let Some((shape, data)) = ck.entries.get(&format!("{name}#m")) {
                adam.m[i] = Arr::from_shape_vec(IxDyn(shape), data.clone()).unwrap();
            }
            if let Some((shape, data)) = ck.entries.get(&format!("{name}#v")) {
                adam.v[i] = Arr::from_shape_vec(IxDyn(shape), data.clone()).unwrap();
            }
            if let Some((_, data)) = ck.entries.get(&format!("{name}#t")) {
                adam.t[i] = data[0] as u64;
            }
        }
    }
    Ok(ck.iteration)
}
