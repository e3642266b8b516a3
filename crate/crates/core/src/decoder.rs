//! The prediction decoder: cross-view attention (CVA) over per-view feature
//! rows, per-task broadcast MLPs, cross-task attention (CTA) with shared
//! learnable task prompts, a density head and per-task view-weight heads
//! whose convex weights blend source-view annotation values into the
//! per-point prediction.
//!
//! Ablation variants replace either attention stage by per-token MLPs of the
//! same width, keeping the rest of the pipeline untouched.

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::positional_encoding;
use crate::nn::{Mlp, MultiHeadAttention, ParamGroup, ParamId, ParamStore, Session};
use crate::tape::{Arr, Tape, Var};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("point {0} is visible in no source view")]
    AllViewsMasked(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Cross-view attention replaced by per-row MLPs.
    NoCva,
    /// Cross-task attention (both stages and prompts) replaced by per-token MLPs.
    NoCta,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// K+1 task branches including RGB.
    pub n_tasks: usize,
    pub d_scene: usize,
    pub d_task: usize,
    pub d_prompt: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Number of stacked CVA blocks (alpha).
    pub cva_depth: usize,
    /// Number of stacked CTA stage-2 blocks (beta).
    pub cta_depth: usize,
    /// Frequencies L in the view-angle positional encoding.
    pub angle_frequencies: usize,
    pub ablation: Ablation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_tasks: 6,
            d_scene: 32,
            d_task: 32,
            d_prompt: 16,
            heads: 4,
            hidden: 64,
            cva_depth: 4,
            cta_depth: 2,
            angle_frequencies: 6,
            ablation: Ablation::Full,
        }
    }
}

impl DecoderConfig {
    pub fn d_pos(&self) -> usize {
        self.d_scene + 2 * self.angle_frequencies
    }
}

/// One CVA block: residual self-attention over the V view tokens followed by
/// a pointwise MLP. In the no-CVA ablation only the MLP remains.
struct CvaBlock {
    attn: Option<MultiHeadAttention>,
    mlp: Mlp,
}

impl CvaBlock {
    fn forward(&self, s: &Session, x: Var, mask: &[Vec<bool>]) -> Var {
        let h = match &self.attn {
            Some(attn) => s.tape.add(x, attn.forward(s, x, x, Some(mask))),
            None => x,
        };
        self.mlp.forward(s, h)
    }
}

/// One CTA stage-2 block: residual self-attention over all (K+1)*V tokens
/// jointly, then a pointwise MLP.
struct CtaBlock {
    attn: MultiHeadAttention,
    mlp: Mlp,
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    cva_blocks: Vec<CvaBlock>,
    broadcast: Vec<Mlp>,
    prompts: Option<ParamId>,
    stage1_attn: Option<MultiHeadAttention>,
    stage2_blocks: Vec<CtaBlock>,
    no_cta_blocks: Vec<Mlp>,
    density: Mlp,
    weight: Mlp,
}

/// Batched decoder outputs for P points.
pub struct DecoderOutputBatch {
    /// `[P]` densities, zero where no view sees the point.
    pub sigma: Var,
    /// `[P, K+1, V]` convex view weights per task.
    pub weights: Var,
    /// `[P, V, d_task]` cross-view features (exposed for the density path
    /// and tests).
    pub f_cva: Var,
    /// `[P, (K+1)*V, d_task]` post-CTA token features, task-major.
    pub f_stage2: Var,
}

/// How to treat points visible in no source view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyPointPolicy {
    /// Return an error.
    Error,
    /// Force the density of such points to zero.
    ZeroDensity,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DecoderConfig) -> Self {
        let d = cfg.d_task;
        let dp = cfg.d_pos();
        let mut cva_blocks = Vec::with_capacity(cfg.cva_depth);
        for i in 0..cfg.cva_depth {
            let din = if i == 0 { dp } else { d };
            let attn = (cfg.ablation != Ablation::NoCva).then(|| {
                MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("dec.cva.{i}.attn"),
                    din,
                    din,
                    pick_head_dim(din, cfg.heads),
                    din,
                    heads_for(din, cfg.heads),
                    ParamGroup::Main,
                )
            });
            let mlp = Mlp::new(
                store,
                rng,
                &format!("dec.cva.{i}.mlp"),
                &[din, cfg.hidden, d],
                ParamGroup::Main,
            );
            cva_blocks.push(CvaBlock { attn, mlp });
        }

        let broadcast = (0..cfg.n_tasks)
            .map(|j| {
                Mlp::new(
                    store,
                    rng,
                    &format!("dec.broadcast.{j}"),
                    &[d, cfg.hidden, d],
                    ParamGroup::Main,
                )
            })
            .collect();

        let (prompts, stage1_attn, stage2_blocks, no_cta_blocks) =
            if cfg.ablation == Ablation::NoCta {
                let blocks = (0..cfg.cta_depth)
                    .map(|i| {
                        Mlp::new(
                            store,
                            rng,
                            &format!("dec.nocta.{i}"),
                            &[d, cfg.hidden, d],
                            ParamGroup::Main,
                        )
                    })
                    .collect();
                (None, None, Vec::new(), blocks)
            } else {
                let prompts = store.add(
                    "dec.prompts",
                    crate::nn::xavier(rng, &[cfg.n_tasks, cfg.d_prompt], cfg.d_prompt, cfg.d_prompt),
                    ParamGroup::Main,
                );
                let stage1 = MultiHeadAttention::new(
                    store,
                    rng,
                    "dec.cta.stage1",
                    d,
                    cfg.d_prompt,
                    pick_head_dim(d, cfg.heads),
                    d,
                    heads_for(d, cfg.heads),
                    ParamGroup::Main,
                );
                let wide = d + cfg.d_prompt;
                let blocks = (0..cfg.cta_depth)
                    .map(|i| {
                        let dout = if i + 1 == cfg.cta_depth { d } else { wide };
                        CtaBlock {
                            attn: MultiHeadAttention::new(
                                store,
                                rng,
                                &format!("dec.cta.stage2.{i}.attn"),
                                wide,
                                wide,
                                pick_head_dim(wide, cfg.heads),
                                wide,
                                heads_for(wide, cfg.heads),
                                ParamGroup::CtaSelfAttention,
                            ),
                            mlp: Mlp::new(
                                store,
                                rng,
                                &format!("dec.cta.stage2.{i}.mlp"),
                                &[wide, cfg.hidden, dout],
                                ParamGroup::Main,
                            ),
                        }
                    })
                    .collect();
                (Some(prompts), Some(stage1), blocks, Vec::new())
            };

        let density = Mlp::new(
            store,
            rng,
            "dec.density",
            &[d, cfg.hidden, 1],
            ParamGroup::Main,
        );
        let weight = Mlp::new(
            store,
            rng,
            "dec.weight",
            &[d, cfg.hidden, 1],
            ParamGroup::Main,
        );

        Self {
            cfg,
            cva_blocks,
            broadcast,
            prompts,
            stage1_attn,
            stage2_blocks,
            no_cta_blocks,
            density,
            weight,
        }
    }

    /// Full decoder pass over a batch of P query points.
    ///
    /// `scene_feat` is `[P, V, d_scene]` (masked rows all-zero), `angles` the
    /// per-point per-view angles in radians, `mask` the view validity.
    pub fn forward(
        &self,
        s: &Session,
        scene_feat: Var,
        angles: &Array2<f64>,
        mask: &[Vec<bool>],
        empty_policy: EmptyPointPolicy,
    ) -> Result<DecoderOutputBatch, DecoderError> {
        let t = s.tape;
        let shape = t.shape(scene_feat);
        if shape.len() != 3 || shape[2] != self.cfg.d_scene {
            return Err(DecoderError::ShapeMismatch(format!(
                "scene features must be [P,V,{}], got {shape:?}",
                self.cfg.d_scene
            )));
        }
        let (p, v) = (shape[0], shape[1]);
        if angles.dim() != (p, v) || mask.len() != p {
            return Err(DecoderError::ShapeMismatch(
                "angles/mask do not match scene features".into(),
            ));
        }

        let mut point_valid = vec![false; p];
        for (pi, row) in mask.iter().enumerate() {
            point_valid[pi] = row.iter().any(|&m| m);
            if !point_valid[pi] && empty_policy == EmptyPointPolicy::Error {
                return Err(DecoderError::AllViewsMasked(pi));
            }
        }

        // positional term: gamma(theta) per view row, zeroed where masked
        let freqs = self.cfg.angle_frequencies;
        let mut pos = Arr::zeros(IxDyn(&[p, v, 2 * freqs]));
        for pi in 0..p {
            for vi in 0..v {
                if !mask[pi][vi] {
                    continue;
                }
                let enc = positional_encoding(&[angles[[pi, vi]]], freqs);
                for (k, &e) in enc.iter().enumerate() {
                    pos[[pi, vi, k]] = e;
                }
            }
        }
        let x0 = t.concat(2, &[scene_feat, t.constant(pos)]);

        // CVA stack
        let mut x = x0;
        for block in &self.cva_blocks {
            x = block.forward(s, x, mask);
        }
        // zero masked rows so downstream consumers see clean features
        let row_mask = {
            let mut m = Arr::zeros(IxDyn(&[p, v, self.cfg.d_task]));
            for pi in 0..p {
                for vi in 0..v {
                    if mask[pi][vi] {
                        for k in 0..self.cfg.d_task {
                            m[[pi, vi, k]] = 1.0;
                        }
                    }
                }
            }
            t.constant(m)
        };
        let f_cva = t.mul(x, row_mask);

        // density: softplus over the mean of unmasked rows
        let mean_mask = {
            let mut m = Arr::zeros(IxDyn(&[p, 1, v]));
            for pi in 0..p {
                let count = mask[pi].iter().filter(|&&b| b).count();
                if count > 0 {
                    for vi in 0..v {
                        if mask[pi][vi] {
                            m[[pi, 0, vi]] = 1.0 / count as f64;
                        }
                    }
                }
            }
            t.constant(m)
        };
        let pooled = t.reshape(t.bmm_nn(mean_mask, f_cva), &[p, self.cfg.d_task]);
        let mut sigma = t.reshape(t.softplus(self.density.forward(s, pooled)), &[p]);
        if point_valid.iter().any(|&b| !b) {
            let gate: Vec<f64> = point_valid.iter().map(|&b| f64::from(b)).collect();
            sigma = t.mul(sigma, t.constant(Arr::from_shape_vec(IxDyn(&[p]), gate).unwrap()));
        }

        // task broadcast: K+1 per-task MLPs, tokens ordered task-major
        let k1 = self.cfg.n_tasks;
        let d = self.cfg.d_task;
        let slabs: Vec<Var> = self
            .broadcast
            .iter()
            .map(|mlp| t.reshape(mlp.forward(s, f_cva), &[p, v * d]))
            .collect();
        let f_task = t.reshape(t.concat(1, &slabs), &[p, k1 * v, d]);

        // token (j, i) is valid iff view i is valid
        let token_mask: Vec<Vec<bool>> = mask
            .iter()
            .map(|row| {
                let mut tm = Vec::with_capacity(k1 * v);
                for _ in 0..k1 {
                    tm.extend_from_slice(row);
                }
                tm
            })
            .collect();

        let f_stage2 = match self.cfg.ablation {
            Ablation::NoCta => {
                let mut h = f_task;
                for mlp in &self.no_cta_blocks {
                    h = mlp.forward(s, h);
                }
                h
            }
            _ => {
                // stage 1: cross-attention from every task token to the
                // shared prompts, residual added
                let prompts = s.p(self.prompts.expect("prompts exist unless no-cta"));
                let kv = t.tile_axis(
                    t.reshape(prompts, &[1, k1, self.cfg.d_prompt]),
                    0,
                    p,
                );
                let attn = self
                    .stage1_attn
                    .as_ref()
                    .expect("stage1 exists unless no-cta")
                    .forward(s, f_task, kv, None);
                let f_stage1 = t.add(f_task, attn);

                // concatenate each branch's prompt row onto its tokens
                let prom_tok = t.reshape(
                    t.tile_axis(
                        t.tile_axis(t.reshape(prompts, &[1, k1, 1, self.cfg.d_prompt]), 2, v),
                        0,
                        p,
                    ),
                    &[p, k1 * v, self.cfg.d_prompt],
                );
                let mut h = t.concat(2, &[f_stage1, prom_tok]);

                // stage 2: joint self-attention over all branches
                for block in &self.stage2_blocks {
                    let a = block.attn.forward(s, h, h, Some(&token_mask));
                    h = block.mlp.forward(s, t.add(h, a));
                }
                h
            }
        };

        // per-task view weights: shared MLP logits, masked softmax over views
        let logits = t.reshape(self.weight.forward(s, f_stage2), &[p, k1, v]);
        let bias = {
            let mut b = Arr::zeros(IxDyn(&[p, k1, v]));
            for pi in 0..p {
                for vi in 0..v {
                    if !mask[pi][vi] {
                        for j in 0..k1 {
                            b[[pi, j, vi]] = -1e30;
                        }
                    }
                }
            }
            t.constant(b)
        };
        let weights = t.softmax_last(t.add(logits, bias));

        Ok(DecoderOutputBatch {
            sigma,
            weights,
            f_cva,
            f_stage2,
        })
    }
}

fn heads_for(dim: usize, preferred: usize) -> usize {
    let mut h = preferred.min(dim);
    while dim % h != 0 {
        h -= 1;
    }
    h.max(1)
}

fn pick_head_dim(dim: usize, preferred_heads: usize) -> usize {
    // keep d_model equal to the token width, heads chosen to divide it
    let _ = preferred_heads;
    dim
}

/// Per-task weighted sum of source-view values: `y_hat_j = sum_i w[j,i] y[j,i]`.
///
/// `weights` is `[P, K+1, V]`, each `values[j]` is `[P, V, C_j]`; returns one
/// `[P, C_j]` prediction per task.
pub fn compose_prediction(
    tape: &Tape,
    weights: Var,
    values: &[Var],
) -> Result<Vec<Var>, DecoderError> {
    let wshape = tape.shape(weights);
    if wshape.len() != 3 {
        return Err(DecoderError::ShapeMismatch("weights must be [P,K+1,V]".into()));
    }
    let (p, k1, v) = (wshape[0], wshape[1], wshape[2]);
    if values.len() != k1 {
        return Err(DecoderError::ShapeMismatch(format!(
            "expected {k1} task value arrays, got {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(k1);
    for (j, &val) in values.iter().enumerate() {
        let vshape = tape.shape(val);
        if vshape.len() != 3 || vshape[0] != p || vshape[1] != v {
            return Err(DecoderError::ShapeMismatch(format!(
                "task {j} values must be [{p},{v},C], got {vshape:?}"
            )));
        }
        let wj = tape.narrow(weights, 1, j, 1); // [P,1,V]
        let yj = tape.bmm_nn(wj, val); // [P,1,C]
        out.push(tape.reshape(yj, &[p, vshape[2]]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::round_to_f32;
    use rand::prelude::*;

    fn tiny_cfg(n_tasks: usize, d: usize, heads: usize) -> DecoderConfig {
        DecoderConfig {
            n_tasks,
            d_scene: d,
            d_task: d,
            d_prompt: d / 2,
            heads,
            hidden: d * 2,
            cva_depth: 2,
            cta_depth: 2,
            angle_frequencies: 2,
            ablation: Ablation::Full,
        }
    }

    fn build(cfg: DecoderConfig, seed: u64) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(&mut store, &mut rng, cfg);
        (store, dec)
    }

    fn rand_inputs(
        rng: &mut ChaCha8Rng,
        p: usize,
        v: usize,
        d: usize,
    ) -> (Arr, Array2<f64>, Vec<Vec<bool>>) {
        let mut feat = Arr::zeros(IxDyn(&[p, v, d]));
        for x in feat.iter_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        round_to_f32(&mut feat);
        let mut angles = Array2::zeros((p, v));
        for x in angles.iter_mut() {
            *x = rng.random::<f64>() * std::f64::consts::PI;
        }
        let mask = vec![vec![true; v]; p];
        (feat, angles, mask)
    }

    #[test]
    fn output_shapes() {
        let cfg = DecoderConfig {
            n_tasks: 6,
            ..tiny_cfg(6, 32, 4)
        };
        let (store, dec) = build(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (feat, angles, mask) = rand_inputs(&mut rng, 5, 3, 32);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        assert_eq!(tape.shape(out.sigma), vec![5]);
        assert_eq!(tape.shape(out.weights), vec![5, 6, 3]);
        assert_eq!(tape.shape(out.f_cva), vec![5, 3, 32]);
        // finite outputs
        assert!(tape.to_owned_value(out.weights).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn weights_rows_are_convex() {
        let (store, dec) = build(tiny_cfg(3, 8, 2), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (feat, angles, mut mask) = rand_inputs(&mut rng, 4, 4, 8);
        mask[1][2] = false; // one masked view
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let w = tape.to_owned_value(out.weights);
        for pi in 0..4 {
            for j in 0..3 {
                let mut sum = 0.0;
                for vi in 0..4 {
                    let x = w[[pi, j, vi]];
                    assert!(x >= 0.0);
                    sum += x;
                    if !mask[pi][vi] {
                        assert_eq!(x, 0.0, "masked view must get zero weight");
                    }
                }
                assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            }
        }
    }

    #[test]
    fn single_view_weight_is_one() {
        let (store, dec) = build(tiny_cfg(2, 8, 2), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (feat, angles, mask) = rand_inputs(&mut rng, 3, 1, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let w = tape.to_owned_value(out.weights);
        for x in w.iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_views_masked_is_an_error() {
        let (store, dec) = build(tiny_cfg(2, 8, 2), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (feat, angles, mut mask) = rand_inputs(&mut rng, 2, 2, 8);
        mask[1] = vec![false, false];
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let err = dec.forward(&s, tape.constant(feat.clone()), &angles, &mask, EmptyPointPolicy::Error);
        assert!(matches!(err, Err(DecoderError::AllViewsMasked(1))));

        // zero-density policy silences the point instead
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::ZeroDensity)
            .unwrap();
        let sigma = tape.to_owned_value(out.sigma);
        assert_eq!(sigma[[1]], 0.0);
        assert!(sigma[[0]] > 0.0);
    }

    #[test]
    fn density_softplus_zero_mlp() {
        // zero all density-head parameters: sigma = softplus(0) = ln 2
        let (mut store, dec) = build(tiny_cfg(2, 8, 2), 8);
        for name in ["dec.density.0.w", "dec.density.0.b", "dec.density.1.w", "dec.density.1.b"] {
            let id = store.id_by_name(name).unwrap();
            let z = Arr::zeros(store.value(id).raw_dim());
            store.set_value(id, z);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (feat, angles, mask) = rand_inputs(&mut rng, 2, 3, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let sigma = tape.to_owned_value(out.sigma);
        for x in sigma.iter() {
            assert!((x - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn density_mean_invariant_to_duplicated_views() {
        let (store, dec) = build(tiny_cfg(2, 8, 2), 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (feat1, angles1, _mask1) = rand_inputs(&mut rng, 1, 1, 8);
        // duplicate the single view
        let mut feat2 = Arr::zeros(IxDyn(&[1, 2, 8]));
        for d in 0..8 {
            feat2[[0, 0, d]] = feat1[[0, 0, d]];
            feat2[[0, 1, d]] = feat1[[0, 0, d]];
        }
        let mut angles2 = Array2::zeros((1, 2));
        angles2[[0, 0]] = angles1[[0, 0]];
        angles2[[0, 1]] = angles1[[0, 0]];

        let run = |feat: Arr, angles: Array2<f64>, v: usize| {
            let tape = Tape::new();
            let s = Session::new(&tape, &store);
            let out = dec
                .forward(
                    &s,
                    tape.constant(feat),
                    &angles,
                    &vec![vec![true; v]; 1],
                    EmptyPointPolicy::Error,
                )
                .unwrap();
            tape.to_owned_value(out.sigma)[[0]]
        };
        let s1 = run(feat1, angles1, 1);
        let s2 = run(feat2, angles2, 2);
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
    }

    #[test]
    fn compose_selection_mean_and_dot() {
        let tape = Tape::new();
        // one point, 2 tasks, 4 views
        let mut w = Arr::zeros(IxDyn(&[1, 2, 4]));
        // task 0: one-hot on view 2; task 1: uniform
        w[[0, 0, 2]] = 1.0;
        for vi in 0..4 {
            w[[0, 1, vi]] = 0.25;
        }
        let weights = tape.constant(w);
        let vals0 = tape.constant(
            Arr::from_shape_vec(IxDyn(&[1, 4, 1]), vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
        );
        let vals1 = tape.constant(
            Arr::from_shape_vec(IxDyn(&[1, 4, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let out = compose_prediction(&tape, weights, &[vals0, vals1]).unwrap();
        assert_eq!(tape.to_owned_value(out[0])[[0, 0]], 30.0);
        assert_eq!(tape.to_owned_value(out[1])[[0, 0]], 2.5);

        // w=(0.2,0.8) over (10,0) -> 2.0
        let tape2 = Tape::new();
        let w2 = tape2.constant(Arr::from_shape_vec(IxDyn(&[1, 1, 2]), vec![0.2, 0.8]).unwrap());
        let v2 = tape2.constant(Arr::from_shape_vec(IxDyn(&[1, 2, 1]), vec![10.0, 0.0]).unwrap());
        let out2 = compose_prediction(&tape2, w2, &[v2]).unwrap();
        assert!((tape2.to_owned_value(out2[0])[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn compose_stays_in_convex_hull_and_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (p, k1, v, c) = (3usize, 2usize, 4usize, 2usize);
        // random convex weight rows
        let mut w = Arr::zeros(IxDyn(&[p, k1, v]));
        for pi in 0..p {
            for j in 0..k1 {
                let mut row: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = row.iter().sum();
                for x in row.iter_mut() {
                    *x /= z;
                }
                for (vi, x) in row.iter().enumerate() {
                    w[[pi, j, vi]] = *x;
                }
            }
        }
        let vals = Arr::from_shape_fn(IxDyn(&[p, v, c]), |_| rng.random::<f64>() * 4.0 - 2.0);
        let tape = Tape::new();
        let wv = tape.constant(w.clone());
        let val_vars: Vec<Var> = (0..k1).map(|_| tape.constant(vals.clone())).collect();
        let out = compose_prediction(&tape, wv, &val_vars).unwrap();
        for j in 0..k1 {
            let o = tape.to_owned_value(out[j]);
            for pi in 0..p {
                for ch in 0..c {
                    let column: Vec<f64> = (0..v).map(|vi| vals[[pi, vi, ch]]).collect();
                    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(o[[pi, ch]] >= lo - 1e-12 && o[[pi, ch]] <= hi + 1e-12);
                }
            }
        }

        // perturbing one view's value by eps moves the output by <= eps
        let eps = 0.37;
        let mut vals2 = vals.clone();
        vals2[[1, 2, 0]] += eps;
        let tape2 = Tape::new();
        let wv2 = tape2.constant(w);
        let out2 = compose_prediction(
            &tape2,
            wv2,
            &(0..k1).map(|_| tape2.constant(vals2.clone())).collect::<Vec<_>>(),
        )
        .unwrap();
        for j in 0..k1 {
            let a = tape.to_owned_value(out[j]);
            let b = tape2.to_owned_value(out2[j]);
            for pi in 0..p {
                for ch in 0..c {
                    assert!((a[[pi, ch]] - b[[pi, ch]]).abs() <= eps + 1e-12);
                }
            }
        }
    }

    #[test]
    fn compose_shape_mismatch_errors() {
        let tape = Tape::new();
        let w = tape.constant(Arr::zeros(IxDyn(&[1, 2, 3])));
        let v = tape.constant(Arr::zeros(IxDyn(&[1, 4, 1]))); // wrong V
        assert!(matches!(
            compose_prediction(&tape, w, &[v, v]),
            Err(DecoderError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn broadcast_identical_parameters_give_identical_slabs() {
        let (mut store, dec) = build(tiny_cfg(3, 8, 2), 20);
        // copy task 0's broadcast MLP parameters onto task 1
        for layer in 0..2 {
            for part in ["w", "b"] {
                let src = store
                    .id_by_name(&format!("dec.broadcast.0.{layer}.{part}"))
                    .unwrap();
                let dst = store
                    .id_by_name(&format!("dec.broadcast.1.{layer}.{part}"))
                    .unwrap();
                let v = store.value(src).clone();
                store.set_value(dst, v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (feat, _angles, mask) = rand_inputs(&mut rng, 2, 2, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let fc = tape.constant(feat);
        let slab0 = dec.broadcast[0].forward(&s, fc);
        let slab1 = dec.broadcast[1].forward(&s, fc);
        let a = tape.to_owned_value(slab0);
        let b = tape.to_owned_value(slab1);
        assert_eq!(a, b);
        let _ = mask;
    }

    #[test]
    fn view_permutation_equivariance() {
        let (store, dec) = build(tiny_cfg(4, 8, 2), 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = 3;
        let (feat, angles, _) = rand_inputs(&mut rng, 2, v, 8);
        let mut mask = vec![vec![true; v]; 2];
        mask[0][1] = false;

        let perm = [2usize, 0, 1];
        let mut feat_p = Arr::zeros(IxDyn(&[2, v, 8]));
        let mut angles_p = Array2::zeros((2, v));
        let mut mask_p = vec![vec![true; v]; 2];
        for pi in 0..2 {
            for vi in 0..v {
                for d in 0..8 {
                    feat_p[[pi, vi, d]] = feat[[pi, perm[vi], d]];
                }
                angles_p[[pi, vi]] = angles[[pi, perm[vi]]];
                mask_p[pi][vi] = mask[pi][perm[vi]];
            }
        }

        let run = |f: Arr, a: Array2<f64>, m: &[Vec<bool>]| {
            let tape = Tape::new();
            let s = Session::new(&tape, &store);
            let out = dec
                .forward(&s, tape.constant(f), &a, m, EmptyPointPolicy::Error)
                .unwrap();
            (
                tape.to_owned_value(out.sigma),
                tape.to_owned_value(out.weights),
            )
        };
        let (sig_a, w_a) = run(feat, angles, &mask);
        let (sig_b, w_b) = run(feat_p, angles_p, &mask_p);

        for pi in 0..2 {
            assert!((sig_a[[pi]] - sig_b[[pi]]).abs() < 1e-9, "sigma changed");
            for j in 0..4 {
                for vi in 0..v {
                    let a = w_a[[pi, j, perm[vi]]];
                    let b = w_b[[pi, j, vi]];
                    assert!((a - b).abs() < 1e-9, "weights not permuted");
                }
            }
        }
    }

    #[test]
    fn task_exchange_symmetry_under_equal_prompts() {
        let (mut store, dec) = build(tiny_cfg(3, 8, 2), 40);
        // equal prompt rows
        let pid = store.id_by_name("dec.prompts").unwrap();
        let mut pv = store.value(pid).clone();
        let k1 = 3;
        for j in 1..k1 {
            for d in 0..pv.shape()[1] {
                let v0 = pv[[0, d]];
                pv[[j, d]] = v0;
            }
        }
        store.set_value(pid, pv);
        // equal broadcast MLPs => equal task slabs
        for j in 1..k1 {
            for layer in 0..2 {
                for part in ["w", "b"] {
                    let src = store
                        .id_by_name(&format!("dec.broadcast.0.{layer}.{part}"))
                        .unwrap();
                    let dst = store
                        .id_by_name(&format!("dec.broadcast.{j}.{layer}.{part}"))
                        .unwrap();
                    let v = store.value(src).clone();
                    store.set_value(dst, v);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (feat, angles, mask) = rand_inputs(&mut rng, 2, 2, 8);
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let w = tape.to_owned_value(out.weights);
        for pi in 0..2 {
            for j in 1..k1 {
                for vi in 0..2 {
                    assert!(
                        (w[[pi, 0, vi]] - w[[pi, j, vi]]).abs() < 1e-9,
                        "task branches must be exchangeable"
                    );
                }
            }
        }
    }

    #[test]
    fn ablations_have_different_parameter_sets() {
        let full = build(tiny_cfg(3, 8, 2), 50).0;
        let no_cva = build(
            DecoderConfig {
                ablation: Ablation::NoCva,
                ..tiny_cfg(3, 8, 2)
            },
            50,
        )
        .0;
        let no_cta = build(
            DecoderConfig {
                ablation: Ablation::NoCta,
                ..tiny_cfg(3, 8, 2)
            },
            50,
        )
        .0;
        assert!(no_cva.scalar_count() < full.scalar_count());
        assert!(no_cta.scalar_count() < full.scalar_count());
        assert!(no_cva.id_by_name("dec.cva.0.attn.wq.w").is_none());
        assert!(no_cta.id_by_name("dec.prompts").is_none());
        assert!(no_cta.id_by_name("dec.nocta.0.0.w").is_some());
    }

    // ---- hand-executed attention oracle ----
    //
    // Scalar reimplementation of one attention union + MLP, used to verify
    // the production path at tiny dimensions with hand-set parameters.

    fn get2(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
        let a = store.value(store.id_by_name(name).unwrap());
        let (r, c) = (a.shape()[0], a.shape()[1]);
        (0..r)
            .map(|i| (0..c).map(|j| a[[i, j]]).collect())
            .collect()
    }

    fn get1(store: &ParamStore, name: &str) -> Vec<f64> {
        let a = store.value(store.id_by_name(name).unwrap());
        a.iter().copied().collect()
    }

    fn mat_rows(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| {
                        let mut acc = b[j];
                        for (i, &xi) in row.iter().enumerate() {
                            acc += xi * w[i][j];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn softmax_row(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// softmax(Q K^T / sqrt(d)) V with an output projection, one head.
    fn attention_oracle(
        store: &ParamStore,
        prefix: &str,
        queries: &[Vec<f64>],
        keyvals: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let q = mat_rows(queries, &get2(store, &format!("{prefix}.wq.w")), &get1(store, &format!("{prefix}.wq.b")));
        let k = mat_rows(keyvals, &get2(store, &format!("{prefix}.wk.w")), &get1(store, &format!("{prefix}.wk.b")));
        let v = mat_rows(keyvals, &get2(store, &format!("{prefix}.wv.w")), &get1(store, &format!("{prefix}.wv.b")));
        let scale = 1.0 / (q[0].len() as f64).sqrt();
        let ctx: Vec<Vec<f64>> = q
            .iter()
            .map(|qrow| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|krow| scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let attn = softmax_row(&scores);
                (0..v[0].len())
                    .map(|d| attn.iter().zip(&v).map(|(a, vr)| a * vr[d]).sum())
                    .collect()
            })
            .collect();
        mat_rows(&ctx, &get2(store, &format!("{prefix}.wo.w")), &get1(store, &format!("{prefix}.wo.b")))
    }

    fn mlp_oracle(store: &ParamStore, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = mat_rows(x, &get2(store, &format!("{prefix}.0.w")), &get1(store, &format!("{prefix}.0.b")));
        let h: Vec<Vec<f64>> = h
            .iter()
            .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
            .collect();
        mat_rows(&h, &get2(store, &format!("{prefix}.1.w")), &get1(store, &format!("{prefix}.1.b")))
    }

    fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    /// Deterministic small parameter pattern, hand-reproducible.
    fn pattern_fill(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let mut v = store.value(id).clone();
            for (k, x) in v.iter_mut().enumerate() {
                *x = ((k * 37 + 11) % 19) as f64 * 0.04 - 0.36;
            }
            store.set_value(id, v);
        }
    }

    #[test]
    fn cva_matches_hand_oracle() {
        // V=2, one head, d_scene=2, tiny everything; one CVA block
        let cfg = DecoderConfig {
            n_tasks: 2,
            d_scene: 2,
            d_task: 2,
            d_prompt: 2,
            heads: 1,
            hidden: 2,
            cva_depth: 1,
            cta_depth: 1,
            angle_frequencies: 1,
            ablation: Ablation::Full,
        };
        let (mut store, dec) = build(cfg, 0);
        pattern_fill(&mut store);

        let feat = Arr::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.5, -0.25, 0.125, 0.75]).unwrap();
        let mut angles = Array2::zeros((1, 2));
        angles[[0, 0]] = 0.25;
        angles[[0, 1]] = 1.0;
        let mask = vec![vec![true, true]];

        // oracle: concat positional encoding, one self-attention union + MLP
        let gamma = |a: f64| {
            let arg = std::f64::consts::PI * a;
            vec![arg.sin(), arg.cos()]
        };
        let x: Vec<Vec<f64>> = (0..2)
            .map(|vi| {
                let mut row = vec![feat[[0, vi, 0]], feat[[0, vi, 1]]];
                row.extend(gamma(angles[[0, vi]]));
                row
            })
            .collect();
        let attn_out = attention_oracle(&store, "dec.cva.0.attn", &x, &x);
        let resid = add_rows(&x, &attn_out);
        let expect = mlp_oracle(&store, "dec.cva.0.mlp", &resid);

        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let got = tape.to_owned_value(out.f_cva);
        for vi in 0..2 {
            for d in 0..2 {
                assert!(
                    (got[[0, vi, d]] - expect[vi][d]).abs() < 1e-12,
                    "row {vi} dim {d}: {} vs {}",
                    got[[0, vi, d]],
                    expect[vi][d]
                );
            }
        }
        // frozen oracle value, computed once with this parameter pattern
        assert!(
            (expect[0][0] - 0.07999999821186066).abs() < 1e-12,
            "oracle drifted: {}",
            expect[0][0]
        );
    }

    #[test]
    fn cta_matches_hand_oracle() {
        // K=1 (two branches), V=1, one head, d=2; checks both CTA stages
        let cfg = DecoderConfig {
            n_tasks: 2,
            d_scene: 2,
            d_task: 2,
            d_prompt: 2,
            heads: 1,
            hidden: 2,
            cva_depth: 1,
            cta_depth: 1,
            angle_frequencies: 1,
            ablation: Ablation::Full,
        };
        let (mut store, dec) = build(cfg, 0);
        pattern_fill(&mut store);

        let feat = Arr::from_shape_vec(IxDyn(&[1, 1, 2]), vec![0.3, -0.6]).unwrap();
        let mut angles = Array2::zeros((1, 1));
        angles[[0, 0]] = 0.5;
        let mask = vec![vec![true]];

        // oracle: replay the full forward path with scalar math
        let gamma = |a: f64| {
            let arg = std::f64::consts::PI * a;
            vec![arg.sin(), arg.cos()]
        };
        let mut x = vec![vec![feat[[0, 0, 0]], feat[[0, 0, 1]]]];
        x[0].extend(gamma(angles[[0, 0]]));
        let attn_out = attention_oracle(&store, "dec.cva.0.attn", &x, &x);
        let f_cva = mlp_oracle(&store, "dec.cva.0.mlp", &add_rows(&x, &attn_out));

        // broadcast: one token per branch
        let tokens = vec![
            mlp_oracle(&store, "dec.broadcast.0", &f_cva)[0].clone(),
            mlp_oracle(&store, "dec.broadcast.1", &f_cva)[0].clone(),
        ];
        // stage 1: cross-attention from each token to both prompt rows
        let prompts = get2(&store, "dec.prompts");
        let s1 = attention_oracle(&store, "dec.cta.stage1", &tokens, &prompts);
        let f_stage1 = add_rows(&tokens, &s1);
        // concat each branch's own prompt row
        let wide: Vec<Vec<f64>> = f_stage1
            .iter()
            .enumerate()
            .map(|(j, row)| {
                let mut r = row.clone();
                r.extend(prompts[j].clone());
                r
            })
            .collect();
        // stage 2: joint self-attention over both tokens + MLP
        let s2 = attention_oracle(&store, "dec.cta.stage2.0.attn", &wide, &wide);
        let expect = mlp_oracle(&store, "dec.cta.stage2.0.mlp", &add_rows(&wide, &s2));

        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let out = dec
            .forward(&s, tape.constant(feat), &angles, &mask, EmptyPointPolicy::Error)
            .unwrap();
        let got = tape.to_owned_value(out.f_stage2);
        assert_eq!(tape.shape(out.f_stage2), vec![1, 2, 2]);
        for tok in 0..2 {
            for d in 0..2 {
                assert!(
                    (got[[0, tok, d]] - expect[tok][d]).abs() < 1e-12,
                    "token {tok} dim {d}: {} vs {}",
                    got[[0, tok, d]],
                    expect[tok][d]
                );
            }
        }
        // frozen oracle value, computed once with this parameter pattern
        assert!(
            (expect[0][0] - 0.08773529234735601).abs() < 1e-12,
            "oracle drifted: {}",
            expect[0][0]
        );
    }

    #[test]
    fn full_decoder_gradients_match_finite_differences() {
        // tiny dims: V=2, K=2 (3 branches), d=4, 1 head
        let cfg = DecoderConfig {
            n_tasks: 3,
            d_scene: 4,
            d_task: 4,
            d_prompt: 2,
            heads: 1,
            hidden: 8,
            cva_depth: 2,
            cta_depth: 2,
            angle_frequencies: 2,
            ablation: Ablation::Full,
        };
        let (store, dec) = build(cfg, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (feat, angles, mask) = rand_inputs(&mut rng, 2, 2, 4);

        let err = crate::tape::check_gradients(
            &|t, vs| {
                let s = Session::new(t, &store);
                let out = dec
                    .forward(&s, vs[0], &angles, &mask, EmptyPointPolicy::Error)
                    .unwrap();
                let a = t.sum_all(out.sigma);
                let b = t.sum_all(out.weights);
                t.add(a, t.affine(b, 0.37, 0.0))
            },
            &[feat],
            1e-5,
        );
        assert!(err < 1e-6, "decoder input grad rel err {err}");
    }
}
