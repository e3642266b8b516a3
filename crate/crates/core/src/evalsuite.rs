//! Metrics (PSNR, mIoU, L1), the depth-reprojection heuristic baseline and
//! dataset-wide evaluation with machine- and human-readable reports.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::CameraView;
use crate::model::{nearest_source_frames, render_view, Model, ModelError, Task, ValueSource};
use crate::setting2::{PredictedBundle, Setting2Error, UNet};
use crate::toyscenes::{SceneData, TaskBundle, ToySceneError, BACKGROUND_DEPTH, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Setting2(#[from] Setting2Error),
    #[error(transparent)]
    Io(#[from] ToySceneError),
    #[error("empty input")]
    EmptyInput,
    #[error("metric is not finite: {0}")]
    NonFinite(String),
}

/// PSNR between two `[0,1]` images, capped at 99 dB for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(EvalError::EmptyInput);
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean IoU over the classes present in `gt` or `pred` (nonzero union).
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..classes {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn l1_error(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(EvalError::EmptyInput);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Dense per-task prediction for one view, in ground-truth layout.
#[derive(Debug, Clone)]
pub struct PredictedView {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub sn: Vec<f64>,
    pub sh: Vec<f64>,
    pub ed: Vec<f64>,
    pub kp: Vec<f64>,
    pub sl: Vec<u8>,
    /// Pixels nothing projected into (heuristic baseline only).
    pub hole_mask: Option<Vec<bool>>,
}

impl PredictedView {
    fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: vec![0.0; n * 3],
            sn: vec![0.0; n * 3],
            sh: vec![0.0; n],
            ed: vec![0.0; n],
            kp: vec![0.0; n],
            sl: vec![0u8; n],
            hole_mask: None,
        }
    }

    pub fn from_ground_truth(bundle: &TaskBundle) -> Self {
        Self {
            width: bundle.width,
            height: bundle.height,
            rgb: bundle.rgb.clone(),
            sn: bundle.sn.clone(),
            sh: bundle.sh.clone(),
            ed: bundle.ed.clone(),
            kp: bundle.kp.clone(),
            sl: bundle.sl.clone(),
            hole_mask: None,
        }
    }
}

/// Anything that can predict the maps of a held-out view of a scene.
pub trait ViewPredictor {
    fn name(&self) -> &str;
    fn predict(&self, scene: &SceneData, frame: usize) -> Result<PredictedView, EvalError>;
}

/// The trained conditional model under inference Setting I (ground-truth
/// source annotations) or Setting II (U-Net predicted annotations).
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub source_views: usize,
    pub chunk: usize,
    pub unet: Option<&'a UNet>,
}

impl ViewPredictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        if self.unet.is_some() {
            "model-setting2"
        } else {
            "model"
        }
    }

    fn predict(&self, scene: &SceneData, frame: usize) -> Result<PredictedView, EvalError> {
        let target = &scene.bundles[frame];
        let sources_idx = nearest_source_frames(
            scene,
            &scene.train_frames(),
            target.pose.center(),
            self.source_views,
            Some(frame),
        );
        let sources: Vec<&TaskBundle> = sources_idx.iter().map(|&i| &scene.bundles[i]).collect();

        let predicted_bundles: Option<Vec<PredictedBundle>> = match self.unet {
            Some(unet) => {
                let images: Vec<(&[f64], usize, usize)> = sources
                    .iter()
                    .map(|b| (b.rgb.as_slice(), b.width, b.height))
                    .collect();
                Some(unet.predict_bundles(&self.model.store, &images)?)
            }
            None => None,
        };
        let value_source = match &predicted_bundles {
            Some(pb) => ValueSource::Predicted(pb),
            None => ValueSource::Ground,
        };

        let maps = render_view(
            self.model,
            &sources,
            &target.view(),
            scene.near,
            scene.far,
            &value_source,
            self.chunk,
        )?;

        let mut out = PredictedView::zeros(target.width, target.height);
        for (task, data) in &maps.maps {
            match task {
                Task::Rgb => out.rgb = data.clone(),
                Task::Sn => out.sn = data.clone(),
                Task::Sh => out.sh = data.clone(),
                Task::Ed => out.ed = data.clone(),
                Task::Kp => out.kp = data.clone(),
                Task::Sl => {}
            }
        }
        if let Some(labels) = maps.sl_labels() {
            out.sl = labels;
        }
        Ok(out)
    }
}

/// Reprojection baseline: warp the nearest source view into the target pose
/// using its depth, z-buffered, holes filled by nearest neighbour.
pub struct HeuristicPredictor;

impl ViewPredictor for HeuristicPredictor {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn predict(&self, scene: &SceneData, frame: usize) -> Result<PredictedView, EvalError> {
        let target = &scene.bundles[frame];
        let nearest = nearest_source_frames(
            scene,
            &scene.train_frames(),
            target.pose.center(),
            1,
            Some(frame),
        );
        let source = &scene.bundles[*nearest.first().ok_or(EvalError::EmptyInput)?];
        Ok(heuristic_baseline(source, &target.view()))
    }
}

/// Warp one source bundle into a target view. Rays that missed all geometry
/// reproject with a fixed large depth so the background transfers too.
pub fn heuristic_baseline(source: &TaskBundle, target: &CameraView) -> PredictedView {
    let (w, h) = (target.intrinsics.width, target.intrinsics.height);
    let (sw, sh_px) = (source.width, source.height);
    let mut out = PredictedView::zeros(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut filled = vec![false; w * h];

    let src_rot = source.pose.rotation();
    let src_center = source.pose.center();
    let k = &source.intrinsics;
    let tgt_rot_t = target.pose.rotation().transpose();
    let tgt_center = target.pose.center();
    let tk = &target.intrinsics;

    for sy in 0..sh_px {
        for sx in 0..sw {
            let i = sy * sw + sx;
            let depth = if source.depth[i] > 0.0 {
                source.depth[i]
            } else {
                BACKGROUND_DEPTH
            };
            let p_cam = Vector3::new(
                (sx as f64 - k.cx) / k.fx * depth,
                (sy as f64 - k.cy) / k.fy * depth,
                depth,
            );
            let p_world = src_rot * p_cam + src_center;
            let q_cam = tgt_rot_t * (p_world - tgt_center);
            if q_cam.z <= 0.0 {
                continue;
            }
            let u = tk.fx * q_cam.x / q_cam.z + tk.cx;
            let v = tk.fy * q_cam.y / q_cam.z + tk.cy;
            let (ui, vi) = (u.round() as i64, v.round() as i64);
            if ui < 0 || vi < 0 || ui >= w as i64 || vi >= h as i64 {
                continue;
            }
            let ti = vi as usize * w + ui as usize;
            if q_cam.z >= zbuf[ti] {
                continue;
            }
            zbuf[ti] = q_cam.z;
            filled[ti] = true;
            for c in 0..3 {
                out.rgb[ti * 3 + c] = source.rgb[i * 3 + c];
                out.sn[ti * 3 + c] = source.sn[i * 3 + c];
            }
            out.sh[ti] = source.sh[i];
            out.ed[ti] = source.ed[i];
            out.kp[ti] = source.kp[i];
            out.sl[ti] = source.sl[i];
        }
    }

    // nearest-neighbour infill of the holes (multi-source BFS)
    let mut queue: VecDeque<usize> = filled
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i)
        .collect();
    let mut source_of: Vec<usize> = (0..w * h).map(|i| if filled[i] { i } else { usize::MAX }).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let ni = ny as usize * w + nx as usize;
            if source_of[ni] != usize::MAX {
                continue;
            }
            let si = source_of[i];
            source_of[ni] = si;
            for c in 0..3 {
                out.rgb[ni * 3 + c] = out.rgb[si * 3 + c];
                out.sn[ni * 3 + c] = out.sn[si * 3 + c];
            }
            out.sh[ni] = out.sh[si];
            out.ed[ni] = out.ed[si];
            out.kp[ni] = out.kp[si];
            out.sl[ni] = out.sl[si];
            queue.push_back(ni);
        }
    }

    out.hole_mask = Some(filled.iter().map(|&f| !f).collect());
    out
}

/// Per-task metrics of one prediction against ground truth.
pub fn score_view(pred: &PredictedView, gt: &TaskBundle, tasks: &[Task]) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut out = BTreeMap::new();
    for &task in tasks {
        let value = match task {
            Task::Rgb => psnr(&pred.rgb, &gt.rgb)?,
            Task::Sl => miou(&pred.sl, &gt.sl, NUM_CLASSES),
            Task::Sn => l1_error(&pred.sn, &gt.sn)?,
            Task::Sh => l1_error(&pred.sh, &gt.sh)?,
            Task::Ed => l1_error(&pred.ed, &gt.ed)?,
            Task::Kp => l1_error(&pred.kp, &gt.kp)?,
        };
        if !value.is_finite() {
            return Err(EvalError::NonFinite(format!("{} on {}", metric_name(task), task.name())));
        }
        out.insert(task.name().to_string(), value);
    }
    Ok(out)
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Rgb => "psnr",
        Task::Sl => "miou",
        _ => "l1",
    }
}

/// Whether higher is better for a task's metric.
pub fn higher_is_better(task: Task) -> bool {
    matches!(task, Task::Rgb | Task::Sl)
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    /// split -> scene -> predictor -> task -> metric value
    pub splits: BTreeMap<String, BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>>,
}

impl Report {
    pub fn new() -> Self {
        Self {
            splits: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, split: &str, scene: &str, predictor: &str, metrics: BTreeMap<String, f64>) {
        self.splits
            .entry(split.to_string())
            .or_default()
            .entry(scene.to_string())
            .or_default()
            .insert(predictor.to_string(), metrics);
    }

    /// Mean metric per predictor/task across a split's scenes.
    pub fn split_mean(&self, split: &str) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        if let Some(scenes) = self.splits.get(split) {
            for preds in scenes.values() {
                for (pname, metrics) in preds {
                    let slot = sums.entry(pname.clone()).or_default();
                    for (task, &v) in metrics {
                        let e = slot.entry(task.clone()).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    }
                }
            }
        }
        sums.into_iter()
            .map(|(p, tasks)| {
                (
                    p,
                    tasks
                        .into_iter()
                        .map(|(t, (s, n))| (t, s / n as f64))
                        .collect(),
                )
            })
            .collect()
    }

    pub fn any_nan(&self) -> bool {
        self.splits.values().any(|scenes| {
            scenes.values().any(|preds| {
                preds
                    .values()
                    .any(|metrics| metrics.values().any(|v| !v.is_finite()))
            })
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| {
            EvalError::Io(ToySceneError::Io {
                path: path.display().to_string(),
                source: e,
            })
        })
    }

    pub fn to_markdown(&self, tasks: &[Task]) -> String {
        let mut md = String::new();
        for (split, _) in &self.splits {
            md.push_str(&format!("## {split}\n\n"));
            md.push_str("| predictor |");
            for t in tasks {
                let arrow = if higher_is_better(*t) { "^" } else { "v" };
                md.push_str(&format!(" {} ({}, {arrow}) |", t.name(), metric_name(*t)));
            }
            md.push('\n');
            md.push_str("|---|");
            for _ in tasks {
                md.push_str("---|");
            }
            md.push('\n');
            for (pname, metrics) in self.split_mean(split) {
                md.push_str(&format!("| {pname} |"));
                for t in tasks {
                    match metrics.get(t.name()) {
                        Some(v) => md.push_str(&format!(" {v:.4} |")),
                        None => md.push_str(" - |"),
                    }
                }
                md.push('\n');
            }
            md.push('\n');
        }
        md
    }

    pub fn write_markdown(&self, path: &Path, tasks: &[Task]) -> Result<(), EvalError> {
        std::fs::write(path, self.to_markdown(tasks)).map_err(|e| {
            EvalError::Io(ToySceneError::Io {
                path: path.display().to_string(),
                source: e,
            })
        })
    }
}

impl Default for Report {
    fn default() -> Self {
        Self::new()
    }
}

/// Evaluate predictors over the held-out frames of every scene in both
/// splits; optionally dump rendered maps next to the report.
pub fn evaluate_model(
    predictors: &[&dyn ViewPredictor],
    train_scenes: &[(String, SceneData)],
    test_scenes: &[(String, SceneData)],
    tasks: &[Task],
    dump_dir: Option<&Path>,
) -> Result<Report, EvalError> {
    let mut report = Report::new();
    for (split, scenes) in [("train_scenes", train_scenes), ("test_scenes", test_scenes)] {
        for (scene_name, scene) in scenes {
            for predictor in predictors {
                let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for &frame in &scene.held_out {
                    let pred = predictor.predict(scene, frame)?;
                    let gt = &scene.bundles[frame];
                    let metrics = score_view(&pred, gt, tasks)?;
                    for (k, v) in metrics {
                        let e = acc.entry(k).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    }
                    if let Some(dir) = dump_dir {
                        dump_prediction(dir, split, scene_name, predictor.name(), frame, &pred)?;
                    }
                }
                let metrics: BTreeMap<String, f64> = acc
                    .into_iter()
                    .map(|(k, (s, n))| (k, s / n as f64))
                    .collect();
                report.insert(split, scene_name, predictor.name(), metrics);
            }
        }
    }
    Ok(report)
}

fn dump_prediction(
    dir: &Path,
    split: &str,
    scene: &str,
    predictor: &str,
    frame: usize,
    pred: &PredictedView,
) -> Result<(), EvalError> {
    use crate::toyscenes::io;
    let out = dir.join(split).join(scene).join(predictor);
    std::fs::create_dir_all(&out).map_err(|e| {
        EvalError::Io(ToySceneError::Io {
            path: out.display().to_string(),
            source: e,
        })
    })?;
    let (w, h) = (pred.width, pred.height);
    io::write_rgb_png(&out.join(format!("rgb_{frame:04}.png")), w, h, &pred.rgb)?;
    io::write_gray_png(&out.join(format!("sl_{frame:04}.png")), w, h, &pred.sl)?;
    io::write_pfm(&out.join(format!("sn_{frame:04}.pfm")), w, h, 3, &pred.sn)?;
    io::write_pfm(&out.join(format!("sh_{frame:04}.pfm")), w, h, 1, &pred.sh)?;
    io::write_pfm(&out.join(format!("ed_{frame:04}.pfm")), w, h, 1, &pred.ed)?;
    io::write_pfm(&out.join(format!("kp_{frame:04}.pfm")), w, h, 1, &pred.kp)?;
    Ok(())
}
