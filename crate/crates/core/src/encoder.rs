//! Conditional scene encoder: a small residual convolutional pyramid turns
//! each source view into a feature volume at input resolution; per-point
//! features are then gathered by projecting the query point into every view
//! and sampling bilinearly.
//!
//! The encoder sits behind the pair (`ConvEncoder::extract_features`,
//! `gather_scene_features`) so alternative backbones can be swapped in.

use nalgebra::Vector3;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{project_point, CameraView};
use crate::nn::{Conv2d, ParamGroup, ParamStore, Session};
use crate::tape::{Arr, Tape, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("source views have mismatched resolutions: {0}x{1} vs {2}x{3}")]
    MismatchedResolutions(usize, usize, usize, usize),
    #[error("image dimensions {0}x{1} must be divisible by 4")]
    BadResolution(usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub d_scene: usize,
}

impl EncoderConfig {
    fn channels(&self) -> (usize, usize, usize) {
        let c1 = (self.d_scene / 2).max(4);
        let c2 = (3 * self.d_scene / 4).max(4);
        let c3 = self.d_scene.max(4);
        (c1, c2, c3)
    }
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            a: Conv2d::new(store, rng, &format!("{name}.a"), c, c, 3, 1, ParamGroup::Main),
            b: Conv2d::new(store, rng, &format!("{name}.b"), c, c, 3, 1, ParamGroup::Main),
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        let t = s.tape;
        let h = t.relu(self.a.forward(s, x));
        t.relu(t.add(x, self.b.forward(s, h)))
    }
}

/// Three residual branches at strides 1/2/4, upsampled and fused to a
/// `d_scene`-channel volume at input resolution.
pub struct ConvEncoder {
    pub cfg: EncoderConfig,
    stem: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    down2: Conv2d,
    res3: ResBlock,
    fuse: Conv2d,
}

impl ConvEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Self {
        let (c1, c2, c3) = cfg.channels();
        Self {
            stem: Conv2d::new(store, rng, "enc.stem", 3, c1, 3, 1, ParamGroup::Main),
            res1: ResBlock::new(store, rng, "enc.res1", c1),
            down1: Conv2d::new(store, rng, "enc.down1", c1, c2, 3, 2, ParamGroup::Main),
            res2: ResBlock::new(store, rng, "enc.res2", c2),
            down2: Conv2d::new(store, rng, "enc.down2", c2, c3, 3, 2, ParamGroup::Main),
            res3: ResBlock::new(store, rng, "enc.res3", c3),
            fuse: Conv2d::new(
                store,
                rng,
                "enc.fuse",
                c1 + c2 + c3,
                cfg.d_scene,
                1,
                1,
                ParamGroup::Main,
            ),
            cfg,
        }
    }

    /// `[V,3,H,W]` images in `[0,1]` to `[V,d_scene,H,W]` feature volumes.
    pub fn extract_features(&self, s: &Session, images: Var) -> Result<Var, EncoderError> {
        let t = s.tape;
        let shape = t.shape(images);
        assert_eq!(shape.len(), 4, "images must be [V,3,H,W]");
        let (h, w) = (shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(EncoderError::BadResolution(w, h));
        }
        let f1 = self.res1.forward(s, t.relu(self.stem.forward(s, images)));
        let f2 = self.res2.forward(s, t.relu(self.down1.forward(s, f1)));
        let f3 = self.res3.forward(s, t.relu(self.down2.forward(s, f2)));
        let u2 = t.upsample_nearest(f2, 2);
        let u4 = t.upsample_nearest(f3, 4);
        let cat = t.concat(1, &[f1, u2, u4]);
        Ok(self.fuse.forward(s, cat))
    }
}

/// Stack per-view `H x W x 3` images (row-major, RGB in `[0,1]`) into the
/// `[V,3,H,W]` constant the encoder consumes.
pub fn stack_images(tape: &Tape, images: &[(&[f64], usize, usize)]) -> Result<Var, EncoderError> {
    assert!(!images.is_empty());
    let (w0, h0) = (images[0].1, images[0].2);
    for &(_, w, h) in images {
        if w != w0 || h != h0 {
            return Err(EncoderError::MismatchedResolutions(w0, h0, w, h));
        }
    }
    let v = images.len();
    let mut out = Arr::zeros(IxDyn(&[v, 3, h0, w0]));
    for (vi, &(data, w, h)) in images.iter().enumerate() {
        assert_eq!(data.len(), w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[vi, c, y, x]] = data[(y * w + x) * 3 + c];
                }
            }
        }
    }
    Ok(tape.constant(out))
}

/// Projection of one point into one view, if visible.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Project `points` into each view; behind-camera or out-of-image points are
/// flagged invalid.
pub fn project_points(views: &[CameraView], points: &[Vector3<f64>]) -> Vec<Vec<Projection>> {
    views
        .iter()
        .map(|view| {
            let k = &view.intrinsics;
            points
                .iter()
                .map(|&q| match project_point(q, view) {
                    Ok((u, v, depth)) => {
                        let valid = u >= 0.0
                            && u <= (k.width - 1) as f64
                            && v >= 0.0
                            && v <= (k.height - 1) as f64;
                        Projection { u, v, depth, valid }
                    }
                    Err(_) => Projection {
                        u: 0.0,
                        v: 0.0,
                        depth: -1.0,
                        valid: false,
                    },
                })
                .collect()
        })
        .collect()
}

/// Bilinearly gather per-point rows from every view's feature volume.
///
/// `volumes` is `[V,C,H,W]`; output is `[P,V,C]` with all-zero rows and
/// `false` mask entries where a view does not see the point.
pub fn gather_scene_features(
    tape: &Tape,
    volumes: Var,
    projections: &[Vec<Projection>],
) -> (Var, Vec<Vec<bool>>) {
    let shape = tape.shape(volumes);
    assert_eq!(shape.len(), 4, "volumes must be [V,C,H,W]");
    let (v, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(projections.len(), v, "one projection set per view");
    let p = projections.first().map_or(0, Vec::len);

    let mut per_view = Vec::with_capacity(v);
    let mut mask = vec![vec![false; v]; p];
    for (vi, projs) in projections.iter().enumerate() {
        assert_eq!(projs.len(), p);
        let vol = tape.reshape(tape.narrow(volumes, 0, vi, 1), &[c, h, w]);
        let samples: Vec<(f64, f64, bool)> = projs
            .iter()
            .enumerate()
            .map(|(pi, pr)| {
                mask[pi][vi] = pr.valid;
                (pr.u, pr.v, pr.valid)
            })
            .collect();
        let rows = tape.bilinear_gather(vol, samples); // [P,C]
        per_view.push(tape.reshape(rows, &[p, 1, c]));
    }
    let features = tape.concat(1, &per_view); // [P,V,C]
    (features, mask)
}

/// One query point's `V x d_scene` feature rows plus validity mask.
#[derive(Debug, Clone)]
pub struct SceneFeature {
    pub rows: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

/// Convenience single-point gather used by op-level tests.
pub fn gather_single_point(
    tape: &Tape,
    volumes: Var,
    views: &[CameraView],
    q: Vector3<f64>,
) -> SceneFeature {
    let projections = project_points(views, &[q]);
    let (feat, mask) = gather_scene_features(tape, volumes, &projections);
    let a = tape.to_owned_value(feat);
    let c = a.shape()[2];
    let rows = (0..views.len())
        .map(|vi| (0..c).map(|ci| a[[0, vi, ci]]).collect())
        .collect();
    SceneFeature {
        rows,
        mask: mask.into_iter().next().unwrap(),
    }
}
