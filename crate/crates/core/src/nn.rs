//! Parameter storage and the small set of neural layers used by the model:
//! linear, MLP, multi-head attention and 2-D convolution.
//!
//! Parameters live outside any tape in a [`ParamStore`]; a [`Session`] binds
//! them lazily onto one tape for a forward/backward pass. All parameter
//! values are kept exactly representable in f32 so that the float32
//! checkpoint format round-trips bit-for-bit.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Arr, Tape, Var};

/// Optimizer grouping: the cross-task stage-2 self-attention parameters are
/// frozen during stage 1 of the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    CtaSelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub group: ParamGroup,
}

/// Named parameter arrays, listed in creation order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr, group: ParamGroup) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let mut value = value;
        round_to_f32(&mut value);
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            group,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        let mut value = value;
        round_to_f32(&mut value);
        self.entries[id.0].value = value;
    }

    /// Set a value without f32 rounding. Verification harnesses use this to
    /// perturb parameters at full f64 precision; normal code paths must go
    /// through `set_value`.
    pub fn set_value_exact(&mut self, id: ParamId, value: Arr) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Round every element to the nearest f32 value.
pub fn round_to_f32(a: &mut Arr) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// Binds [`ParamStore`] entries onto a tape on first use, so each parameter
/// appears exactly once per pass.
pub struct Session<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let v = self.tape.var(self.store.value(id).clone());
        bound[id.0] = Some(v);
        v
    }

    /// Tape var for a parameter if it was used in this pass.
    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.borrow()[id.0]
    }
}

/// Xavier-uniform initialisation.
pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            xavier(rng, &[din, dout], din, dout),
            group,
        );
        let b = store.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[dout])), group);
        Self { w, b, din, dout }
    }

    /// Apply to the last axis of `x` (any leading shape).
    pub fn forward(&self, s: &Session, x: Var) -> Var {
        s.tape.linear(x, s.p(self.w), s.p(self.b), false)
    }

    /// Apply with a fused ReLU.
    pub fn forward_relu(&self, s: &Session, x: Var) -> Var {
        s.tape.linear(x, s.p(self.w), s.p(self.b), true)
    }
}

/// `Linear -> ReLU -> ... -> Linear` with ReLU between layers only.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], group))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let inner = i + 1 < self.layers.len();
            h = if inner {
                layer.forward_relu(s, h)
            } else {
                layer.forward(s, h)
            };
        }
        h
    }
}

/// Multi-head attention `MHA(q, kv)` with softmax over keys.
///
/// Query tokens `[B,T,dq]`, key/value tokens `[B,S,dkv]`, output `[B,T,dout]`.
/// An optional key validity mask (`true` = usable) removes masked keys from
/// every softmax; rows whose keys are all masked degrade to uniform attention
/// and are the caller's responsibility to zero out downstream.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dq: usize,
        dkv: usize,
        d_model: usize,
        dout: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dq, d_model, group),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dkv, d_model, group),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dkv, d_model, group),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d_model, dout, group),
            heads,
            d_model,
        }
    }

    pub fn forward(
        &self,
        s: &Session,
        query: Var,
        keyval: Var,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Var {
        let t = s.tape;
        assert_eq!(t.shape(query).len(), 3, "attention expects [B,T,D] query");
        assert_eq!(t.shape(keyval).len(), 3, "attention expects [B,S,D] key/value");
        let q = self.wq.forward(s, query);
        let k = self.wk.forward(s, keyval);
        let v = self.wv.forward(s, keyval);
        let ctx = t.multi_head_attention(q, k, v, self.heads, key_mask);
        self.wo.forward(s, ctx)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = store.add(
            &format!("{name}.w"),
            xavier(rng, &[cout, cin, k, k], fan_in, fan_out),
            group,
        );
        let b = store.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout])), group);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        s.tape
            .conv2d(x, s.p(self.w), Some(s.p(self.b)), self.stride, self.pad)
    }
}
