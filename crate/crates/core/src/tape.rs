//! Tape-based reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A `Tape` records every operation of one forward pass; `backward` replays
//! the tape in reverse and accumulates gradients for the leaf variables.
//! One tape per training iteration, rebuilt from scratch each time. The op
//! set is exactly what the pipeline needs: dense linear algebra, batched
//! attention primitives, pointwise nonlinearities, im2col convolution,
//! bilinear feature gathering and the cumulative sums used by volume
//! rendering.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn, Slice};

/// Dense dynamic-shape f64 array, the only tensor type on the tape.
pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct BackCtx<'a> {
    out: &'a Arr,
    grad: &'a Arr,
    parents: &'a [&'a Arr],
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Arr>>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    needs_grad: bool,
    is_leaf_var: bool,
}

/// Gradients of one scalar output with respect to the tape's leaf variables.
pub struct Gradients {
    by_id: HashMap<usize, Arr>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_id.get(&v.id)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 array")
}

fn mat_mul(a: &ndarray::ArrayView2<f64>, b: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    standardize2(a.dot(b))
}

/// `dot` may return column-major output for transposed operands; the tape
/// stores everything row-major.
fn standardize2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Arr,
        parents: Vec<usize>,
        backward: Option<BackFn>,
        is_leaf_var: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = is_leaf_var || parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
            is_leaf_var,
        });
        Var { id }
    }

    /// Leaf with gradient tracking (parameters, differentiable inputs).
    pub fn var(&self, value: Arr) -> Var {
        self.push(value, vec![], None, true)
    }

    /// Leaf without gradient tracking (data, masks, precomputed geometry).
    pub fn constant(&self, value: Arr) -> Var {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Arr> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn to_owned_value(&self, v: Var) -> Arr {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.id].value.shape(), n[b.id].value.shape(), "add: shape mismatch");
            &n[a.id].value + &n[b.id].value
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
            })),
            false,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.id].value.shape(), n[b.id].value.shape(), "sub: shape mismatch");
            &n[a.id].value - &n[b.id].value
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                vec![Some(ctx.grad.clone()), Some(-ctx.grad)]
            })),
            false,
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.id].value.shape(), n[b.id].value.shape(), "mul: shape mismatch");
            &n[a.id].value * &n[b.id].value
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                vec![
                    Some(ctx.grad * ctx.parents[1]),
                    Some(ctx.grad * ctx.parents[0]),
                ]
            })),
            false,
        )
    }

    /// `k * a + c` with scalar constants.
    pub fn affine(&self, a: Var, k: f64, c: f64) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(|x| k * x + c);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(move |ctx| vec![Some(ctx.grad * k)])),
            false,
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let b = &n[bias.id].value;
            assert_eq!(b.ndim(), 1, "add_bias: bias must be rank 1");
            let d = b.shape()[0];
            let av = &n[a.id].value;
            assert_eq!(*av.shape().last().unwrap(), d, "add_bias: last dim mismatch");
            let mut out = av.clone();
            let bs = b.as_slice().unwrap().to_vec();
            for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                for (x, y) in row.iter_mut().zip(&bs) {
                    *x += *y;
                }
            }
            out
        };
        self.push(
            v,
            vec![a.id, bias.id],
            Some(Box::new(|ctx| {
                let d = ctx.parents[1].shape()[0];
                let mut db = vec![0.0; d];
                for row in ctx.grad.as_slice().unwrap().chunks(d) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += *g;
                    }
                }
                vec![
                    Some(ctx.grad.clone()),
                    Some(ArrayD::from_shape_vec(IxDyn(&[d]), db).unwrap()),
                ]
            })),
            false,
        )
    }

    // ---- matrix products ----

    /// `[N,K] x [K,M] -> [N,M]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            mat_mul(&as2(&n[a.id].value), &as2(&n[b.id].value)).into_dyn()
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                let g = as2(ctx.grad);
                let a = as2(ctx.parents[0]);
                let b = as2(ctx.parents[1]);
                vec![
                    Some(mat_mul(&g, &b.t()).into_dyn()),
                    Some(mat_mul(&a.t(), &g).into_dyn()),
                ]
            })),
            false,
        )
    }

    /// Batched `A_b . B_b^T`: `[B,T,D] x [B,S,D] -> [B,T,S]`.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            let bv = &n[b.id].value;
            assert_eq!(av.ndim(), 3);
            assert_eq!(bv.ndim(), 3);
            assert_eq!(av.shape()[0], bv.shape()[0], "bmm_nt: batch mismatch");
            assert_eq!(av.shape()[2], bv.shape()[2], "bmm_nt: inner dim mismatch");
            let (bs, t, s) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, t, s]));
            for i in 0..bs {
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                let prod = mat_mul(
                    &ai.into_dimensionality().unwrap(),
                    &bi.into_dimensionality::<ndarray::Ix2>().unwrap().t(),
                );
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                let g = ctx.grad;
                let a = ctx.parents[0];
                let b = ctx.parents[1];
                let bs = a.shape()[0];
                let mut da = ArrayD::<f64>::zeros(a.raw_dim());
                let mut db = ArrayD::<f64>::zeros(b.raw_dim());
                for i in 0..bs {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let ai = a
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let bi = b
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi));
                    db.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&ai));
                }
                vec![Some(da), Some(db)]
            })),
            false,
        )
    }

    /// Batched `A_b . B_b`: `[B,T,S] x [B,S,D] -> [B,T,D]`.
    pub fn bmm_nn(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            let bv = &n[b.id].value;
            assert_eq!(av.ndim(), 3);
            assert_eq!(bv.ndim(), 3);
            assert_eq!(av.shape()[0], bv.shape()[0], "bmm_nn: batch mismatch");
            assert_eq!(av.shape()[2], bv.shape()[1], "bmm_nn: inner dim mismatch");
            let (bs, t, d) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, t, d]));
            for i in 0..bs {
                let ai = av
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let bi = bv
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
            }
            out
        };
        self.push(
            v,
            vec![a.id, b.id],
            Some(Box::new(|ctx| {
                let g = ctx.grad;
                let a = ctx.parents[0];
                let b = ctx.parents[1];
                let bs = a.shape()[0];
                let mut da = ArrayD::<f64>::zeros(a.raw_dim());
                let mut db = ArrayD::<f64>::zeros(b.raw_dim());
                for i in 0..bs {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let ai = a
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let bi = b
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![Some(da), Some(db)]
            })),
            false,
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gg, &x| {
                    if x <= 0.0 {
                        *gg = 0.0;
                    }
                });
                vec![Some(g)]
            })),
            false,
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gg, &y| *gg *= y * (1.0 - y));
                vec![Some(g)]
            })),
            false,
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(f64::tanh);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gg, &y| *gg *= 1.0 - y * y);
                vec![Some(g)]
            })),
            false,
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(stable_softplus);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gg, &x| *gg *= 1.0 / (1.0 + (-x).exp()));
                vec![Some(g)]
            })),
            false,
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(f64::exp);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gg, &y| *gg *= y);
                vec![Some(g)]
            })),
            false,
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.id].value.mapv(f64::abs);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gg, &x| *gg *= x.signum() * f64::from(x != 0.0));
                vec![Some(g)]
            })),
            false,
        )
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0);
        let v = self.nodes.borrow()[a.id].value.mapv(|x| x.max(floor).ln());
        self.push(
            v,
            vec![a.id],
            Some(Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gg, &x| {
                    *gg = if x > floor { *gg / x } else { 0.0 };
                });
                vec![Some(g)]
            })),
            false,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            let d = *av.shape().last().expect("softmax on 0-d array");
            let mut out = av.clone();
            for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            out
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let d = *ctx.out.shape().last().unwrap();
                let mut g = ctx.grad.clone();
                let y = ctx.out.as_slice().unwrap();
                for (row_g, row_y) in g.as_slice_mut().unwrap().chunks_mut(d).zip(y.chunks(d)) {
                    let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for (gg, yy) in row_g.iter_mut().zip(row_y) {
                        *gg = yy * (*gg - dot);
                    }
                }
                vec![Some(g)]
            })),
            false,
        )
    }

    /// Softmax over axis 1 of a `[B,C,N]` array (per batch item and column).
    pub fn softmax_channels(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            assert_eq!(av.ndim(), 3, "softmax_channels expects [B,C,N]");
            let (b, c, cols) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let mut out = av.clone();
            for bi in 0..b {
                for col in 0..cols {
                    let mut m = f64::NEG_INFINITY;
                    for ci in 0..c {
                        m = m.max(out[[bi, ci, col]]);
                    }
                    let mut z = 0.0;
                    for ci in 0..c {
                        let e = (out[[bi, ci, col]] - m).exp();
                        out[[bi, ci, col]] = e;
                        z += e;
                    }
                    for ci in 0..c {
                        out[[bi, ci, col]] /= z;
                    }
                }
            }
            out
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let y = ctx.out;
                let (b, c, cols) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let mut g = ctx.grad.clone();
                for bi in 0..b {
                    for col in 0..cols {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += g[[bi, ci, col]] * y[[bi, ci, col]];
                        }
                        for ci in 0..c {
                            g[[bi, ci, col]] = y[[bi, ci, col]] * (g[[bi, ci, col]] - dot);
                        }
                    }
                }
                vec![Some(g)]
            })),
            false,
        )
    }

    // ---- reductions / shape ----

    pub fn sum_all(&self, a: Var) -> Var {
        let v = scalar(self.nodes.borrow()[a.id].value.sum());
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let g = ctx.grad.first().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(ctx.parents[0].raw_dim(), g))]
            })),
            false,
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (s, cnt) = {
            let n = self.nodes.borrow();
            (n[a.id].value.sum(), n[a.id].value.len())
        };
        assert!(cnt > 0, "mean of empty array");
        let v = scalar(s / cnt as f64);
        self.push(
            v,
            vec![a.id],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.first().copied().unwrap_or(0.0) / cnt as f64;
                vec![Some(ArrayD::from_elem(ctx.parents[0].raw_dim(), g))]
            })),
            false,
        )
    }

    /// Sum over the last axis: `[.., D] -> [..]`.
    pub fn sum_last(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            av.sum_axis(Axis(av.ndim() - 1))
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let d = *ctx.parents[0].shape().last().unwrap();
                let mut out = ArrayD::<f64>::zeros(ctx.parents[0].raw_dim());
                for (row, &g) in out
                    .as_slice_mut()
                    .unwrap()
                    .chunks_mut(d)
                    .zip(ctx.grad.as_slice().unwrap())
                {
                    row.fill(g);
                }
                vec![Some(out)]
            })),
            false,
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            assert_eq!(av.len(), shape.iter().product::<usize>(), "reshape: size mismatch");
            av.clone().into_shape_with_order(IxDyn(shape)).unwrap()
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .clone()
                        .into_shape_with_order(ctx.parents[0].raw_dim())
                        .unwrap(),
                )]
            })),
            false,
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let (v, sizes) = {
            let n = self.nodes.borrow();
            let views: Vec<_> = vars.iter().map(|v| n[v.id].value.view()).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            (
                ndarray::concatenate(Axis(axis), &views)
                    .expect("concat: incompatible shapes")
                    .as_standard_layout()
                    .to_owned(),
                sizes,
            )
        };
        self.push(
            v,
            vars.iter().map(|v| v.id).collect(),
            Some(Box::new(move |ctx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let piece = ctx
                        .grad
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + s as isize), 1))
                        .as_standard_layout()
                        .to_owned();
                    out.push(Some(piece));
                    start += s as isize;
                }
                out
            })),
            false,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            n[a.id]
                .value
                .slice_axis(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .as_standard_layout()
                .to_owned()
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(move |ctx| {
                let mut out = ArrayD::<f64>::zeros(ctx.parents[0].raw_dim());
                out.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(ctx.grad);
                vec![Some(out)]
            })),
            false,
        )
    }

    /// Repeat the whole array `k` times along `axis` (the axis usually has
    /// size 1, giving a broadcast). Backward sums the `k` copies.
    pub fn tile_axis(&self, a: Var, axis: usize, k: usize) -> Var {
        assert!(k >= 1);
        let v = {
            let n = self.nodes.borrow();
            let views: Vec<_> = (0..k).map(|_| n[a.id].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views)
                .unwrap()
                .as_standard_layout()
                .to_owned()
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(move |ctx| {
                let s = ctx.parents[0].shape()[axis];
                let mut acc = ArrayD::<f64>::zeros(ctx.parents[0].raw_dim());
                for i in 0..k {
                    let piece = ctx.grad.slice_axis(
                        Axis(axis),
                        Slice::new((i * s) as isize, Some(((i + 1) * s) as isize), 1),
                    );
                    acc += &piece;
                }
                vec![Some(acc)]
            })),
            false,
        )
    }

    /// Exclusive prefix sum along the last axis: `y_i = sum_{j<i} x_j`.
    pub fn exclusive_cumsum_last(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let av = &n[a.id].value;
            let d = *av.shape().last().unwrap();
            let mut out = av.clone();
            for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                let mut acc = 0.0;
                for x in row.iter_mut() {
                    let cur = *x;
                    *x = acc;
                    acc += cur;
                }
            }
            out
        };
        self.push(
            v,
            vec![a.id],
            Some(Box::new(|ctx| {
                let d = *ctx.grad.shape().last().unwrap();
                let mut out = ctx.grad.clone();
                for row in out.as_slice_mut().unwrap().chunks_mut(d) {
                    // dx_j = sum_{i>j} g_i  (reverse exclusive suffix sum)
                    let mut acc = 0.0;
                    for x in row.iter_mut().rev() {
                        let cur = *x;
                        *x = acc;
                        acc += cur;
                    }
                }
                vec![Some(out)]
            })),
            false,
        )
    }

    /// Fused affine layer over the last axis: `y = x @ w + b`, optionally
    /// followed by ReLU. `x` may have any leading shape.
    pub fn linear(&self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let xv = &n[x.id].value;
            let wv = as2(&n[w.id].value);
            let bv = &n[b.id].value;
            let din = wv.shape()[0];
            let dout = wv.shape()[1];
            assert_eq!(*xv.shape().last().unwrap(), din, "linear: input dim mismatch");
            assert_eq!(bv.shape(), [dout]);
            let lead: usize = xv.len() / din;
            let x2 = xv
                .view()
                .into_shape_with_order((lead, din))
                .expect("linear: input must be contiguous");
            let mut y = standardize2(x2.dot(&wv));
            let bs = bv.as_slice().unwrap();
            for mut row in y.rows_mut() {
                for (o, add) in row.iter_mut().zip(bs) {
                    *o += *add;
                    if relu && *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = dout;
            y.into_shape_with_order(IxDyn(&shape)).unwrap()
        };
        self.push(
            v,
            vec![x.id, w.id, b.id],
            Some(Box::new(move |ctx| {
                let xv = ctx.parents[0];
                let wv = as2(ctx.parents[1]);
                let din = wv.shape()[0];
                let dout = wv.shape()[1];
                let lead = xv.len() / din;
                let x2 = xv.view().into_shape_with_order((lead, din)).unwrap();
                let mut g = ctx
                    .grad
                    .view()
                    .into_shape_with_order((lead, dout))
                    .unwrap()
                    .to_owned();
                if relu {
                    let y = ctx.out.view().into_shape_with_order((lead, dout)).unwrap();
                    g.zip_mut_with(&y, |gg, &yy| {
                        if yy <= 0.0 {
                            *gg = 0.0;
                        }
                    });
                }
                let dx = standardize2(g.dot(&wv.t()))
                    .into_shape_with_order(xv.raw_dim())
                    .unwrap();
                let dw = standardize2(x2.t().dot(&g)).into_dyn();
                let mut db = vec![0.0; dout];
                for row in g.rows() {
                    for (acc, &gg) in db.iter_mut().zip(row) {
                        *acc += gg;
                    }
                }
                vec![
                    Some(dx),
                    Some(dw),
                    Some(ArrayD::from_shape_vec(IxDyn(&[dout]), db).unwrap()),
                ]
            })),
            false,
        )
    }

    /// Fused multi-head attention over already-projected tokens:
    /// `softmax(scale * q_h k_h^T + mask) v_h` per head, heads split along the
    /// channel axis. `q` is `[B,T,D]`, `k`/`v` are `[B,S,D]`; the optional
    /// mask marks valid keys per `[B][S]` (invalid keys are excluded from
    /// every softmax).
    pub fn multi_head_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[Vec<bool>]>,
    ) -> Var {
        let (out, attn, dims) = {
            let n = self.nodes.borrow();
            let qv = &n[q.id].value;
            let kv = &n[k.id].value;
            let vv = &n[v.id].value;
            assert_eq!(qv.ndim(), 3);
            assert_eq!(kv.ndim(), 3);
            assert_eq!(vv.ndim(), 3);
            let (b, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
            let s = kv.shape()[1];
            assert_eq!(kv.shape(), [b, s, d]);
            assert_eq!(vv.shape(), [b, s, d]);
            assert_eq!(d % heads, 0, "head count must divide width");
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            if let Some(m) = mask {
                assert_eq!(m.len(), b);
            }

            let qs = qv.as_slice().unwrap();
            let ks = kv.as_slice().unwrap();
            let vs = vv.as_slice().unwrap();
            let mut out = vec![0.0; b * t * d];
            let mut attn = vec![0.0; b * heads * t * s];
            for bi in 0..b {
                let mrow = mask.map(|m| &m[bi]);
                for h in 0..heads {
                    let off = h * dh;
                    for ti in 0..t {
                        let qrow = &qs[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                        let arow =
                            &mut attn[((bi * heads + h) * t + ti) * s..((bi * heads + h) * t + ti) * s + s];
                        let mut maxv = f64::NEG_INFINITY;
                        for si in 0..s {
                            let krow = &ks[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                            let mut dot = 0.0;
                            for e in 0..dh {
                                dot += qrow[e] * krow[e];
                            }
                            let score = if mrow.is_some_and(|m| !m[si]) {
                                f64::NEG_INFINITY
                            } else {
                                dot * scale
                            };
                            arow[si] = score;
                            maxv = maxv.max(score);
                        }
                        // all-masked rows degrade to uniform attention
                        if maxv == f64::NEG_INFINITY {
                            for x in arow.iter_mut() {
                                *x = 1.0 / s as f64;
                            }
                        } else {
                            let mut z = 0.0;
                            for x in arow.iter_mut() {
                                *x = (*x - maxv).exp();
                                z += *x;
                            }
                            for x in arow.iter_mut() {
                                *x /= z;
                            }
                        }
                        let orow = &mut out[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                        for si in 0..s {
                            let a = arow[si];
                            if a == 0.0 {
                                continue;
                            }
                            let vrow = &vs[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                            for e in 0..dh {
                                orow[e] += a * vrow[e];
                            }
                        }
                    }
                }
            }
            (
                ArrayD::from_shape_vec(IxDyn(&[b, t, d]), out).unwrap(),
                attn,
                (b, t, s, d, heads),
            )
        };
        let (b, t, s, d, heads) = dims;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        self.push(
            out,
            vec![q.id, k.id, v.id],
            Some(Box::new(move |ctx| {
                let qs = ctx.parents[0].as_slice().unwrap();
                let ks = ctx.parents[1].as_slice().unwrap();
                let vs = ctx.parents[2].as_slice().unwrap();
                let gs = ctx.grad.as_slice().unwrap();
                let mut dq = vec![0.0; b * t * d];
                let mut dk = vec![0.0; b * s * d];
                let mut dv = vec![0.0; b * s * d];
                let mut da = vec![0.0; s];
                for bi in 0..b {
                    for h in 0..heads {
                        let off = h * dh;
                        for ti in 0..t {
                            let arow =
                                &attn[((bi * heads + h) * t + ti) * s..((bi * heads + h) * t + ti) * s + s];
                            let grow = &gs[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                            // dV += a * g ; da = g . v
                            for si in 0..s {
                                let a = arow[si];
                                let vrow = &vs[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                                let dvrow =
                                    &mut dv[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                                let mut dot = 0.0;
                                for e in 0..dh {
                                    dvrow[e] += a * grow[e];
                                    dot += grow[e] * vrow[e];
                                }
                                da[si] = dot;
                            }
                            // softmax backward: ds = a .* (da - sum(da .* a))
                            let mut inner = 0.0;
                            for si in 0..s {
                                inner += da[si] * arow[si];
                            }
                            let qrow = &qs[(bi * t + ti) * d + off..(bi * t + ti) * d + off + dh];
                            let dqrow_base = (bi * t + ti) * d + off;
                            for si in 0..s {
                                let ds = arow[si] * (da[si] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &ks[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                                let dkrow =
                                    &mut dk[(bi * s + si) * d + off..(bi * s + si) * d + off + dh];
                                for e in 0..dh {
                                    dq[dqrow_base + e] += ds * krow[e];
                                    dkrow[e] += ds * qrow[e];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(ArrayD::from_shape_vec(IxDyn(&[b, t, d]), dq).unwrap()),
                    Some(ArrayD::from_shape_vec(IxDyn(&[b, s, d]), dk).unwrap()),
                    Some(ArrayD::from_shape_vec(IxDyn(&[b, s, d]), dv).unwrap()),
                ]
            })),
            false,
        )
    }

    // ---- gathering / convolution / resampling ----

    /// Bilinearly sample a `[C,H,W]` volume at continuous pixel positions.
    ///
    /// `samples` holds `(x, y, valid)` per output row; invalid rows come back
    /// all-zero and receive no gradient. Coordinates use integer pixel
    /// centers, `x` along width, `y` along height.
    pub fn bilinear_gather(&self, volume: Var, samples: Vec<(f64, f64, bool)>) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let vol = &n[volume.id].value;
            assert_eq!(vol.ndim(), 3, "bilinear_gather: volume must be [C,H,W]");
            let (c, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
            let data = vol.as_slice().unwrap();
            let mut out = ArrayD::<f64>::zeros(IxDyn(&[samples.len(), c]));
            let os = out.as_slice_mut().unwrap();
            for (i, &(x, y, valid)) in samples.iter().enumerate() {
                if !valid {
                    continue;
                }
                for (x0, y0, wgt) in bilinear_corners(x, y, w, h) {
                    let base = y0 * w + x0;
                    for ch in 0..c {
                        os[i * c + ch] += wgt * data[ch * h * w + base];
                    }
                }
            }
            out
        };
        self.push(
            v,
            vec![volume.id],
            Some(Box::new(move |ctx| {
                let vol = ctx.parents[0];
                let (c, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
                let mut dv = ArrayD::<f64>::zeros(vol.raw_dim());
                let ds = dv.as_slice_mut().unwrap();
                let gs = ctx.grad.as_slice().unwrap();
                for (i, &(x, y, valid)) in samples.iter().enumerate() {
                    if !valid {
                        continue;
                    }
                    for (x0, y0, wgt) in bilinear_corners(x, y, w, h) {
                        let base = y0 * w + x0;
                        for ch in 0..c {
                            ds[ch * h * w + base] += wgt * gs[i * c + ch];
                        }
                    }
                }
                vec![Some(dv)]
            })),
            false,
        )
    }

    /// 2-D convolution, `[B,C,H,W] x [O,C,kh,kw] -> [B,O,H',W']` with zero
    /// padding. The unrolled input patches are kept for the backward pass.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (v, geom, cols_cache) = {
            let n = self.nodes.borrow();
            let xv = n[x.id]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("conv2d: input must be [B,C,H,W]");
            let wv = n[weight.id]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("conv2d: weight must be [O,C,kh,kw]");
            let bv = bias.map(|b| n[b.id].value.as_slice().unwrap().to_vec());
            let (out, geom, cols) = conv2d_forward(&xv, &wv, bv.as_deref(), stride, pad);
            (out.into_dyn(), geom, cols)
        };
        let mut parents = vec![x.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.push(
            v,
            parents,
            Some(Box::new(move |ctx| {
                let xv = ctx.parents[0]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let wv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let gv = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let (dx, dw, db) = conv2d_backward(&xv, &wv, &gv, &geom, &cols_cache);
                let mut grads = vec![Some(dx.into_dyn()), Some(dw.into_dyn())];
                if has_bias {
                    grads.push(Some(ArrayD::from_shape_vec(IxDyn(&[db.len()]), db).unwrap()));
                }
                grads
            })),
            false,
        )
    }

    /// Nearest-neighbour upsampling of `[B,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let v = {
            let n = self.nodes.borrow();
            let xv = n[x.id]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("upsample: input must be [B,C,H,W]");
            let (b, c, h, w) = xv.dim();
            let mut out = Array4::<f64>::zeros((b, c, h * factor, w * factor));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h * factor {
                        for xx in 0..w * factor {
                            out[[bi, ci, y, xx]] = xv[[bi, ci, y / factor, xx / factor]];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(
            v,
            vec![x.id],
            Some(Box::new(move |ctx| {
                let gv = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let (b, c, hh, ww) = gv.dim();
                let (h, w) = (hh / factor, ww / factor);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..hh {
                            for xx in 0..ww {
                                dx[[bi, ci, y / factor, xx / factor]] += gv[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
            false,
        )
    }

    // ---- backward ----

    /// Reverse sweep from `root` (any shape; seeded with ones). Returns the
    /// gradients of all leaf `var`s that influence `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));
        let mut result = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            // backward closures index flat slices; keep gradients contiguous
            let g = if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().to_owned()
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if node.is_leaf_var {
                result.insert(id, g);
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let parent_vals: Vec<&Arr> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let ctx = BackCtx {
                out: &node.value,
                grad: &g,
                parents: &parent_vals,
            };
            let pgrads = back(&ctx);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { by_id: result }
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// The up-to-four corner taps of a bilinear sample, with weights.
fn bilinear_corners(x: f64, y: f64, w: usize, h: usize) -> Vec<(usize, usize, f64)> {
    let x0 = x.floor().clamp(0.0, (w - 1) as f64);
    let y0 = y.floor().clamp(0.0, (h - 1) as f64);
    let fx = (x - x0).clamp(0.0, 1.0);
    let fy = (y - y0).clamp(0.0, 1.0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let mut taps = Vec::with_capacity(4);
    for (xi, yi, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wgt != 0.0 {
            taps.push((xi, yi, wgt));
        }
    }
    taps
}

struct ConvGeom {
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView4<f64>,
    b: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let (kh, kw) = k;
    let (oh, ow) = out;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[b, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    dx: &mut Array4<f64>,
    b: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) {
    let (_, c, h, w) = dx.dim();
    let (kh, kw) = k;
    let (oh, ow) = out;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[b, ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, ConvGeom, Vec<Array2<f64>>) {
    let (bs, c, h, ww) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(ww, kw, stride, pad);
    let wmat = w
        .to_shape((o, c * kh * kw))
        .unwrap()
        .as_standard_layout()
        .to_owned();
    let mut out = Array4::<f64>::zeros((bs, o, oh, ow));
    let mut cols_cache = Vec::with_capacity(bs);
    for b in 0..bs {
        let cols = im2col(x, b, (kh, kw), stride, pad, (oh, ow));
        let prod = wmat.dot(&cols); // [O, oh*ow]
        cols_cache.push(cols);
        let mut slab = out.index_axis_mut(Axis(0), b);
        for oi in 0..o {
            let add = bias.map_or(0.0, |bv| bv[oi]);
            for oy in 0..oh {
                for ox in 0..ow {
                    slab[[oi, oy, ox]] = prod[[oi, oy * ow + ox]] + add;
                }
            }
        }
    }
    (
        out,
        ConvGeom {
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        },
        cols_cache,
    )
}

fn conv2d_backward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    grad: &ndarray::ArrayView4<f64>,
    geom: &ConvGeom,
    cols_cache: &[Array2<f64>],
) -> (Array4<f64>, Array4<f64>, Vec<f64>) {
    let (bs, c, _, _) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (oh, ow) = (geom.out_h, geom.out_w);
    let wmat = w
        .to_shape((o, c * kh * kw))
        .unwrap()
        .as_standard_layout()
        .to_owned();
    let mut dx = Array4::<f64>::zeros(x.raw_dim());
    let mut dwmat = Array2::<f64>::zeros((o, c * kh * kw));
    let mut db = vec![0.0; o];
    for b in 0..bs {
        let mut gmat = Array2::<f64>::zeros((o, oh * ow));
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad[[b, oi, oy, ox]];
                    gmat[[oi, oy * ow + ox]] = g;
                    db[oi] += g;
                }
            }
        }
        dwmat += &standardize2(gmat.dot(&cols_cache[b].t()));
        let dcols = standardize2(wmat.t().dot(&gmat)); // [c*kh*kw, oh*ow]
        col2im(&dcols, &mut dx, b, (kh, kw), geom.stride, geom.pad, (oh, ow));
    }
    let dw = dwmat
        .into_shape_with_order((o, c, kh, kw))
        .unwrap();
    (dx, dw, db)
}

// ---- finite-difference verification ----

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad(f: &mut dyn FnMut(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Worst-case relative error between two gradient arrays
/// (`|a-b| / max(|a|,|b|,1e-6)` elementwise).
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Check the tape gradient of `build` (a scalar-valued graph over `inputs`)
/// against central finite differences. Returns the worst relative error.
pub fn check_gradients(build: &dyn Fn(&Tape, &[Var]) -> Var, inputs: &[Arr], eps: f64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = build(&tape, &vars);
    assert_eq!(tape.shape(out).iter().product::<usize>(), 1, "objective must be scalar");
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let mut f = |probe: &Arr| {
            let t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| t.var(if j == k { probe.clone() } else { a.clone() }))
                .collect();
            let o = t.build_scalar(build, &vs);
            o
        };
        let num = numeric_grad(&mut f, x, eps);
        let ana = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(x.raw_dim()));
        worst = worst.max(max_rel_err(&ana, &num));
    }
    worst
}

impl Tape {
    fn build_scalar(&self, build: &dyn Fn(&Tape, &[Var]) -> Var, vars: &[Var]) -> f64 {
        let out = build(self, vars);
        let v = self.to_owned_value(out);
        *v.first().unwrap()
    }
}
