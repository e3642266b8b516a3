//! Inference without source-view annotations: a U-Net-shaped predictor turns
//! source RGB images into per-view annotation maps, trained alongside the
//! radiance field with pixel-wise task losses; at inference time the
//! weighted-sum composition consumes these predictions instead of ground
//! truth (RGB keeps coming from the raw source images).

use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{sample_map, Task};
use crate::nn::{Conv2d, ParamGroup, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::toyscenes::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum Setting2Error {
    #[error("image dimensions {0}x{1} must be divisible by 8")]
    BadResolution(usize, usize),
    #[error("RGB has no predictor head; it is composited from source images")]
    RgbHasNoHead,
}

/// Per-view predicted annotation maps in task ranges; SL holds per-pixel
/// class probabilities summing to one.
#[derive(Debug, Clone)]
pub struct PredictedBundle {
    pub width: usize,
    pub height: usize,
    /// `(task, H*W*C)` rows for every predicted task.
    pub maps: Vec<(Task, Vec<f64>)>,
}

impl PredictedBundle {
    pub fn map(&self, task: Task) -> Option<&[f64]> {
        self.maps
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, m)| m.as_slice())
    }

    /// Bilinear sample of one task's map at continuous pixel coordinates.
    pub fn sample(&self, task: Task, u: f64, v: f64) -> Vec<f64> {
        let map = self
            .map(task)
            .unwrap_or_else(|| panic!("task {} missing from predicted bundle", task.name()));
        sample_map(map, self.width, self.height, task.channels(), u, v)
    }

    /// Build a "prediction" that is exactly the ground truth (substitution
    /// identity checks).
    pub fn from_ground_truth(bundle: &crate::toyscenes::TaskBundle, tasks: &[Task]) -> Self {
        let maps = tasks
            .iter()
            .filter(|&&t| t != Task::Rgb)
            .map(|&t| {
                let data = match t {
                    Task::Sn => bundle.sn.clone(),
                    Task::Sh => bundle.sh.clone(),
                    Task::Ed => bundle.ed.clone(),
                    Task::Kp => bundle.kp.clone(),
                    Task::Sl => {
                        let mut probs = vec![0.0; bundle.sl.len() * NUM_CLASSES];
                        for (i, &c) in bundle.sl.iter().enumerate() {
                            probs[i * NUM_CLASSES + c as usize] = 1.0;
                        }
                        probs
                    }
                    Task::Rgb => unreachable!(),
                };
                (t, data)
            })
            .collect();
        Self {
            width: bundle.width,
            height: bundle.height,
            maps,
        }
    }
}

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            a: Conv2d::new(store, rng, &format!("{name}.a"), cin, cout, 3, stride, ParamGroup::Main),
            b: Conv2d::new(store, rng, &format!("{name}.b"), cout, cout, 3, 1, ParamGroup::Main),
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        let t = s.tape;
        t.relu(self.b.forward(s, t.relu(self.a.forward(s, x))))
    }
}

struct TaskHead {
    task: Task,
    conv: Conv2d,
    out: Conv2d,
}

/// Shared encoder/decoder U-Net with three down/up levels (16 to 64
/// channels), skip connections and one lightweight head per task.
pub struct UNet {
    pub tasks: Vec<Task>,
    e0: DoubleConv,
    e1: DoubleConv,
    e2: DoubleConv,
    bottleneck: DoubleConv,
    d2: DoubleConv,
    d1: DoubleConv,
    d0: DoubleConv,
    heads: Vec<TaskHead>,
}

impl UNet {
    /// `tasks` excludes RGB (which is never predicted).
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, tasks: &[Task]) -> Result<Self, Setting2Error> {
        if tasks.contains(&Task::Rgb) {
            return Err(Setting2Error::RgbHasNoHead);
        }
        let heads = tasks
            .iter()
            .map(|&task| TaskHead {
                task,
                conv: Conv2d::new(
                    store,
                    rng,
                    &format!("unet.head.{}.conv", task.name()),
                    16,
                    16,
                    3,
                    1,
                    ParamGroup::Main,
                ),
                out: Conv2d::new(
                    store,
                    rng,
                    &format!("unet.head.{}.out", task.name()),
                    16,
                    task.channels(),
                    1,
                    1,
                    ParamGroup::Main,
                ),
            })
            .collect();
        Ok(Self {
            tasks: tasks.to_vec(),
            e0: DoubleConv::new(store, rng, "unet.e0", 3, 16, 1),
            e1: DoubleConv::new(store, rng, "unet.e1", 16, 32, 2),
            e2: DoubleConv::new(store, rng, "unet.e2", 32, 64, 2),
            bottleneck: DoubleConv::new(store, rng, "unet.bott", 64, 64, 2),
            d2: DoubleConv::new(store, rng, "unet.d2", 64 + 64, 32, 1),
            d1: DoubleConv::new(store, rng, "unet.d1", 32 + 32, 16, 1),
            d0: DoubleConv::new(store, rng, "unet.d0", 16 + 16, 16, 1),
            heads,
        })
    }

    /// `[V,3,H,W]` images to per-task prediction maps `[V,C,H,W]` (on tape).
    pub fn forward(&self, s: &Session, images: Var) -> Result<Vec<(Task, Var)>, Setting2Error> {
        let t = s.tape;
        let shape = t.shape(images);
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Setting2Error::BadResolution(w, h));
        }
        let f0 = self.e0.forward(s, images); // [V,16,H,W]
        let f1 = self.e1.forward(s, f0); // [V,32,H/2,W/2]
        let f2 = self.e2.forward(s, f1); // [V,64,H/4,W/4]
        let fb = self.bottleneck.forward(s, f2); // [V,64,H/8,W/8]
        let u2 = self.d2.forward(s, t.concat(1, &[t.upsample_nearest(fb, 2), f2])); // [V,32,H/4,W/4]
        let u1 = self.d1.forward(s, t.concat(1, &[t.upsample_nearest(u2, 2), f1])); // [V,16,H/2,W/2]
        let u0 = self.d0.forward(s, t.concat(1, &[t.upsample_nearest(u1, 2), f0])); // [V,16,H,W]

        let out = self
            .heads
            .iter()
            .map(|head| {
                let x = t.relu(head.conv.forward(s, u0));
                let raw = head.out.forward(s, x); // [V,C,H,W]
                let act = match head.task {
                    Task::Sn => t.tanh(raw),
                    Task::Sh | Task::Ed | Task::Kp => t.sigmoid(raw),
                    Task::Sl => {
                        let v = t.shape(raw)[0];
                        let flat = t.reshape(raw, &[v, NUM_CLASSES, h * w]);
                        let sm = t.softmax_channels(flat);
                        t.reshape(sm, &[v, NUM_CLASSES, h, w])
                    }
                    Task::Rgb => unreachable!(),
                };
                (head.task, act)
            })
            .collect();
        Ok(out)
    }

    /// Run the predictor and pull the maps off the tape as plain buffers.
    pub fn predict_bundles(
        &self,
        store: &ParamStore,
        images: &[(&[f64], usize, usize)],
    ) -> Result<Vec<PredictedBundle>, Setting2Error> {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        let stacked = crate::encoder::stack_images(&tape, images)
            .map_err(|_| Setting2Error::BadResolution(0, 0))?;
        let outputs = self.forward(&s, stacked)?;
        let v = images.len();
        let (w, h) = (images[0].1, images[0].2);
        let mut bundles: Vec<PredictedBundle> = (0..v)
            .map(|_| PredictedBundle {
                width: w,
                height: h,
                maps: Vec::new(),
            })
            .collect();
        for (task, var) in outputs {
            let a = tape.to_owned_value(var); // [V,C,H,W]
            let c = task.channels();
            for (vi, bundle) in bundles.iter_mut().enumerate() {
                let mut flat = vec![0.0; w * h * c];
                let slab = a.index_axis(Axis(0), vi);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            flat[(y * w + x) * c + ch] = slab[[ch, y, x]];
                        }
                    }
                }
                bundle.maps.push((task, flat));
            }
        }
        Ok(bundles)
    }
}

/// Differentiable gather of predicted maps at integer pixel positions for
/// the per-view pixel-wise losses: returns `[N, C]` rows for one view.
pub fn gather_predictions_at_pixels(
    tape: &Tape,
    view_map: Var,
    pixels: &[(usize, usize)],
) -> Var {
    let shape = tape.shape(view_map);
    assert_eq!(shape.len(), 3, "expected [C,H,W] map");
    let samples: Vec<(f64, f64, bool)> = pixels
        .iter()
        .map(|&(x, y)| (x as f64, y as f64, true))
        .collect();
    tape.bilinear_gather(view_map, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Arr;
    use crate::toyscenes::{render_ground_truth, SceneSpec};
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn unet(tasks: &[Task]) -> (ParamStore, UNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UNet::new(&mut store, &mut rng, tasks).unwrap();
        (store, net)
    }

    #[test]
    fn output_shapes_and_probability_normalisation() {
        let (store, net) = unet(&[Task::Sn, Task::Ed, Task::Sl]);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let imgs = tape.constant(Arr::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |ix| {
            ((ix[0] + ix[1] * 3 + ix[2] + ix[3]) % 7) as f64 / 7.0
        }));
        let out = net.forward(&s, imgs).unwrap();
        assert_eq!(out.len(), 3);
        for (task, var) in &out {
            let shape = tape.shape(*var);
            assert_eq!(shape, vec![2, task.channels(), 16, 16]);
        }
        // SL probabilities sum to one per pixel
        let sl = out.iter().find(|(t, _)| *t == Task::Sl).unwrap().1;
        let a = tape.to_owned_value(sl);
        for vi in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    let sum: f64 = (0..NUM_CLASSES).map(|c| a[[vi, c, y, x]]).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
        // sigmoid head stays in [0,1]
        let ed = out.iter().find(|(t, _)| *t == Task::Ed).unwrap().1;
        assert!(tape
            .to_owned_value(ed)
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_resolution() {
        let (store, net) = unet(&[Task::Sn]);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let imgs = tape.constant(Arr::zeros(IxDyn(&[1, 3, 12, 12])));
        assert!(matches!(
            net.forward(&s, imgs),
            Err(Setting2Error::BadResolution(12, 12))
        ));
    }

    #[test]
    fn rejects_rgb_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            UNet::new(&mut store, &mut rng, &[Task::Rgb, Task::Sn]),
            Err(Setting2Error::RgbHasNoHead)
        ));
    }

    #[test]
    fn identical_inputs_identical_bundles() {
        let (store, net) = unet(&[Task::Sn, Task::Kp]);
        let img = vec![0.25; 16 * 16 * 3];
        let run = || {
            net.predict_bundles(&store, &[(&img, 16, 16), (&img, 16, 16)])
                .unwrap()
        };
        let a = run();
        let b = run();
        for (ba, bb) in a.iter().zip(&b) {
            for ((ta, ma), (tb, mb)) in ba.maps.iter().zip(&bb.maps) {
                assert_eq!(ta, tb);
                assert_eq!(ma, mb);
            }
        }
        // both views identical input => identical maps
        for ((_, m0), (_, m1)) in a[0].maps.iter().zip(&a[1].maps) {
            assert_eq!(m0, m1);
        }
    }

    #[test]
    fn ground_truth_bundle_substitution() {
        let spec = SceneSpec::random(3);
        let orbit = crate::toyscenes::default_orbit(16, 16);
        let view = crate::geometry::CameraView {
            intrinsics: orbit.intrinsics,
            pose: orbit.pose(2, 8),
        };
        let gt = render_ground_truth(&spec, &view);
        let pb = PredictedBundle::from_ground_truth(&gt, &[Task::Rgb, Task::Sn, Task::Sl]);
        assert!(pb.map(Task::Rgb).is_none());
        assert_eq!(pb.map(Task::Sn).unwrap(), gt.sn.as_slice());
        let probs = pb.map(Task::Sl).unwrap();
        for (i, &c) in gt.sl.iter().enumerate() {
            assert_eq!(probs[i * NUM_CLASSES + c as usize], 1.0);
        }
    }
}
