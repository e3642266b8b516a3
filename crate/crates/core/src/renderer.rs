//! Stratified ray sampling and volume rendering of density-weighted
//! properties.
//!
//! `composite` renders a value along one ray as
//! `sum_m T(t_m) * (1 - exp(-delta_m sigma_m)) * y(t_m)` with accumulated
//! transmittance `T(t_m) = exp(-sum_{j<m} delta_j sigma_j)`. The same math is
//! also available as a tape graph (`composite_on_tape`) for training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Arr, Tape, Var};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid sampling bounds: t_near {t_near} must be >= 0 and < t_far {t_far}")]
    InvalidBounds { t_near: f64, t_far: f64 },
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error("negative density or gap at index {index}")]
    NegativeInput { index: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Per-ray samples: positions, gaps, densities and per-task property values.
///
/// `t` is strictly increasing within `[t_near, t_far]`; the last gap is
/// filled with `t_far - t_M` so opacity stays finite.
#[derive(Debug, Clone)]
pub struct RaySampleBatch {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    /// One entry per task: `M x channels`, flattened row-major.
    pub values: Vec<TaskSamples>,
}

#[derive(Debug, Clone)]
pub struct TaskSamples {
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Gaps between consecutive samples, last gap filled to the far bound.
pub fn sample_gaps(t: &[f64], t_far: f64) -> Vec<f64> {
    let m = t.len();
    let mut delta = Vec::with_capacity(m);
    for i in 0..m {
        let d = if i + 1 < m { t[i + 1] - t[i] } else { t_far - t[i] };
        delta.push(d.max(0.0));
    }
    delta
}

/// One sample per equal-width bin over `[t_near, t_far]`; without jitter the
/// bin midpoints, with jitter a uniform draw inside each bin.
pub fn stratified_sample(
    t_near: f64,
    t_far: f64,
    m: usize,
    jitter: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, RenderError> {
    if m == 0 {
        return Err(RenderError::NoSamples);
    }
    if !(t_far > t_near && t_near >= 0.0) {
        return Err(RenderError::InvalidBounds { t_near, t_far });
    }
    let width = (t_far - t_near) / m as f64;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let u = if jitter { rng.random::<f64>() } else { 0.5 };
        out.push(t_near + (i as f64 + u) * width);
    }
    Ok(out)
}

/// Accumulated transmittance per sample; the first entry is always 1.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>, RenderError> {
    if sigma.len() != delta.len() {
        return Err(RenderError::LengthMismatch(format!(
            "sigma has {} entries, delta has {}",
            sigma.len(),
            delta.len()
        )));
    }
    for (i, (&s, &d)) in sigma.iter().zip(delta).enumerate() {
        if s < 0.0 || d < 0.0 {
            return Err(RenderError::NegativeInput { index: i });
        }
    }
    let mut out = Vec::with_capacity(sigma.len());
    let mut acc = 0.0f64;
    for (&s, &d) in sigma.iter().zip(delta) {
        out.push((-acc).exp());
        acc += s * d;
    }
    Ok(out)
}

/// Rendered value per task plus per-sample weights and accumulated opacity.
#[derive(Debug, Clone)]
pub struct Composited {
    /// One rendered row per task (length = task channel count).
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub opacity: f64,
}

/// Volume-render every task in the batch.
pub fn composite(batch: &RaySampleBatch) -> Result<Composited, RenderError> {
    let m = batch.t.len();
    if batch.delta.len() != m || batch.sigma.len() != m {
        return Err(RenderError::LengthMismatch(format!(
            "t/delta/sigma lengths {}/{}/{} differ",
            m,
            batch.delta.len(),
            batch.sigma.len()
        )));
    }
    let trans = transmittance(&batch.sigma, &batch.delta)?;
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        let alpha = 1.0 - (-batch.delta[i] * batch.sigma[i]).exp();
        weights.push(trans[i] * alpha);
    }
    let opacity = weights.iter().sum();
    let mut values = Vec::with_capacity(batch.values.len());
    for task in &batch.values {
        if task.data.len() != m * task.channels {
            return Err(RenderError::LengthMismatch(format!(
                "task samples have {} entries, expected {}",
                task.data.len(),
                m * task.channels
            )));
        }
        let mut row = vec![0.0; task.channels];
        for (i, &w) in weights.iter().enumerate() {
            for c in 0..task.channels {
                row[c] += w * task.data[i * task.channels + c];
            }
        }
        values.push(row);
    }
    Ok(Composited {
        values,
        weights,
        opacity,
    })
}

/// Tape-side compositing for a batch of rays.
///
/// `sigma`: `[R, M]`, `delta`: constant `[R, M]`, each entry of `values`:
/// `[R, M, C_task]`. Returns per-task rendered `[R, C_task]`, the weights
/// `[R, M]` and opacity `[R]`.
pub fn composite_on_tape(
    tape: &Tape,
    sigma: Var,
    delta: Arr,
    values: &[Var],
) -> (Vec<Var>, Var, Var) {
    let shape = tape.shape(sigma);
    assert_eq!(shape.len(), 2, "sigma must be [R,M]");
    let (r, m) = (shape[0], shape[1]);
    assert_eq!(delta.shape(), &[r, m]);
    let delta_c = tape.constant(delta);
    let a = tape.mul(sigma, delta_c); // delta * sigma
    let accum = tape.exclusive_cumsum_last(a);
    let trans = tape.exp(tape.neg(accum)); // T(t_m)
    let alpha = tape.affine(tape.exp(tape.neg(a)), -1.0, 1.0); // 1 - exp(-a)
    let weights = tape.mul(trans, alpha); // [R, M]
    let opacity = tape.sum_last(weights); // [R]
    let w_row = tape.reshape(weights, &[r, 1, m]);
    let rendered = values
        .iter()
        .map(|&v| {
            let vshape = tape.shape(v);
            assert_eq!(vshape.len(), 3);
            assert_eq!(vshape[0], r);
            assert_eq!(vshape[1], m);
            let out = tape.bmm_nn(w_row, v); // [R, 1, C]
            tape.reshape(out, &[r, vshape[2]])
        })
        .collect();
    (rendered, weights, opacity)
}
