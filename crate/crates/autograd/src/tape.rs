//! The operation tape: eager forward evaluation plus recorded structure
//! for a single reverse sweep.
//!
//! Every builder method validates shapes up front and panics on
//! mismatch; shape errors are wiring bugs in the caller, not runtime
//! conditions. Gradients for all nodes are retained after
//! [`Tape::backward`] so callers can inspect any intermediate.

use std::cell::RefCell;

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::conv;
use crate::params::{ParamId, ParamStore};
use crate::resample;

/// Handle to a node on a specific [`Tape`]. Only meaningful on the tape
/// that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Abs(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    SumSpatial(usize),
    BroadcastSpatial(usize),
    MulChan(usize, usize),
    DivRow(usize, usize),
    ConcatChan(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Array2<f64>,
        invstd: Array2<f64>,
    },
    Bilinear(usize),
    AvgPool2(usize),
}

struct Inner {
    vals: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    params: Vec<Option<ParamId>>,
    grads: Vec<Option<ArrayD<f64>>>,
    swept: bool,
}

/// Single-use computation record. Build the graph with the methods
/// below, call [`Tape::backward`] once, then read gradients.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        None => *slot = Some(g),
        Some(s) => *s += &g,
    }
}

fn dims4(shape: &[usize], what: &str) -> (usize, usize, usize, usize) {
    assert!(shape.len() == 4, "{what}: expected 4-d [n,c,h,w], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                vals: Vec::new(),
                ops: Vec::new(),
                params: Vec::new(),
                grads: Vec::new(),
                swept: false,
            }),
        }
    }

    fn push(&self, op: Op, val: ArrayD<f64>, param: Option<ParamId>) -> Var {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.swept, "tape already swept; build a new tape");
        inner.vals.push(val);
        inner.ops.push(op);
        inner.params.push(param);
        Var(inner.vals.len() - 1)
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    /// Records a constant (non-parameter) leaf.
    pub fn input(&self, value: ArrayD<f64>) -> Var {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value fed to tape input"
        );
        self.push(Op::Leaf, value, None)
    }

    /// Records a parameter leaf; its gradient is retrievable via
    /// [`Tape::param_grads`] after the sweep.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Leaf, store.value(id).clone(), Some(id))
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.inner.borrow().vals[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.0].shape().to_vec()
    }

    /// Extracts a zero-dimensional node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let a = &inner.vals[v.0];
        assert!(a.len() == 1, "scalar() on node of {} elements", a.len());
        *a.iter().next().expect("non-empty")
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.vals[a.0].shape(),
            inner.vals[b.0].shape(),
            "{name}: operand shapes differ"
        );
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let val = {
            let inner = self.inner.borrow();
            &inner.vals[a.0] + &inner.vals[b.0]
        };
        self.push(Op::Add(a.0, b.0), val, None)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let val = {
            let inner = self.inner.borrow();
            &inner.vals[a.0] - &inner.vals[b.0]
        };
        self.push(Op::Sub(a.0, b.0), val, None)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let val = {
            let inner = self.inner.borrow();
            &inner.vals[a.0] * &inner.vals[b.0]
        };
        self.push(Op::Mul(a.0, b.0), val, None)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(|v| v * c);
        self.push(Op::Scale(x.0, c), val, None)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(|v| v + c);
        self.push(Op::AddScalar(x.0), val, None)
    }

    /// max(x, slope*x). `slope = 0` is plain ReLU.
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(x.0, slope), val, None)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid(x.0), val, None)
    }

    pub fn abs(&self, x: Var) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(f64::abs);
        self.push(Op::Abs(x.0), val, None)
    }

    /// Natural log; inputs must already be strictly positive (clamp first).
    pub fn ln(&self, x: Var) -> Var {
        let val = self.inner.borrow().vals[x.0].mapv(|v| {
            assert!(v > 0.0, "ln of non-positive value {v}");
            v.ln()
        });
        self.push(Op::Ln(x.0), val, None)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi, "clamp bounds inverted");
        let val = self.inner.borrow().vals[x.0].mapv(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x.0, lo, hi), val, None)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.inner.borrow().vals[x.0].sum();
        self.push(Op::SumAll(x.0), ndarray::arr0(s).into_dyn(), None)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let inner = self.inner.borrow();
        let a = &inner.vals[x.0];
        assert!(!a.is_empty(), "mean of empty tensor");
        let m = a.sum() / a.len() as f64;
        drop(inner);
        self.push(Op::MeanAll(x.0), ndarray::arr0(m).into_dyn(), None)
    }

    /// `[n, c, h, w]` -> `[n, c]`, summing over the spatial axes.
    pub fn sum_spatial(&self, x: Var) -> Var {
        let val = {
            let inner = self.inner.borrow();
            dims4(inner.vals[x.0].shape(), "sum_spatial");
            inner.vals[x.0].sum_axis(Axis(3)).sum_axis(Axis(2))
        };
        self.push(Op::SumSpatial(x.0), val, None)
    }

    /// `[n, c]` -> `[n, c, h, w]`, replicating each value spatially.
    pub fn broadcast_spatial(&self, x: Var, h: usize, w: usize) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let a = &inner.vals[x.0];
            assert!(a.ndim() == 2, "broadcast_spatial: expected [n,c]");
            let (n, c) = (a.shape()[0], a.shape()[1]);
            ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |ix| a[[ix[0], ix[1]]])
        };
        self.push(Op::BroadcastSpatial(x.0), val, None)
    }

    /// `[n, c, h, w] * [n, 1, h, w]` with the single-channel factor
    /// broadcast across channels.
    pub fn mul_chan(&self, x: Var, m: Var) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let (n, _, h, w) = dims4(inner.vals[x.0].shape(), "mul_chan x");
            let (mn, mc, mh, mw) = dims4(inner.vals[m.0].shape(), "mul_chan m");
            assert!(
                (mn, mc, mh, mw) == (n, 1, h, w),
                "mul_chan: factor must be [n,1,h,w] matching x"
            );
            let xb = &inner.vals[x.0];
            let mb = inner.vals[m.0].broadcast(xb.raw_dim()).expect("broadcast");
            xb * &mb
        };
        self.push(Op::MulChan(x.0, m.0), val, None)
    }

    /// `[n, c] / [n, 1]` row-wise division.
    pub fn div_row(&self, num: Var, den: Var) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let a = &inner.vals[num.0];
            let d = &inner.vals[den.0];
            assert!(a.ndim() == 2 && d.ndim() == 2, "div_row: expected 2-d");
            assert!(
                d.shape() == [a.shape()[0], 1],
                "div_row: denominator must be [n,1]"
            );
            assert!(d.iter().all(|v| *v != 0.0), "div_row: zero denominator");
            a / &d.broadcast(a.raw_dim()).expect("broadcast")
        };
        self.push(Op::DivRow(num.0, den.0), val, None)
    }

    /// Concatenates along the channel axis.
    pub fn concat_chan(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let val = {
            let inner = self.inner.borrow();
            let first = dims4(inner.vals[xs[0].0].shape(), "concat_chan");
            for v in xs {
                let d = dims4(inner.vals[v.0].shape(), "concat_chan");
                assert!(
                    (d.0, d.2, d.3) == (first.0, first.2, first.3),
                    "concat_chan: batch/spatial dims differ"
                );
            }
            let views: Vec<_> = xs.iter().map(|v| inner.vals[v.0].view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat")
        };
        self.push(Op::ConcatChan(xs.iter().map(|v| v.0).collect()), val, None)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let xv = inner.vals[x.0].view().into_dimensionality::<Ix4>().expect("conv x 4-d");
            let wv = inner.vals[w.0].view().into_dimensionality::<Ix4>().expect("conv w 4-d");
            let bias_store;
            let bias = match b {
                Some(bv) => {
                    let ba = &inner.vals[bv.0];
                    assert!(ba.ndim() == 1 && ba.len() == wv.dim().0, "conv bias shape");
                    bias_store = ba.as_slice().expect("bias contiguous").to_vec();
                    Some(bias_store.as_slice())
                }
                None => None,
            };
            conv::conv2d_forward(xv, wv, bias, stride, pad).into_dyn()
        };
        self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            val,
            None,
        )
    }

    /// `x [n, in] * w [out, in]^T + b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let xv = inner.vals[x.0].view().into_dimensionality::<Ix2>().expect("linear x 2-d");
            let wv = inner.vals[w.0].view().into_dimensionality::<Ix2>().expect("linear w 2-d");
            assert_eq!(xv.dim().1, wv.dim().1, "linear: feature dims differ");
            let mut y = xv.dot(&wv.t());
            if let Some(bv) = b {
                let ba = &inner.vals[bv.0];
                assert!(ba.ndim() == 1 && ba.len() == wv.dim().0, "linear bias shape");
                let b1 = ba.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1-d");
                y += &b1;
            }
            y.into_dyn()
        };
        self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
            val,
            None,
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes with
    /// learned affine (`gamma [c]`, `beta [c]`).
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (val, mean, invstd) = {
            let inner = self.inner.borrow();
            let a = &inner.vals[x.0];
            let (n, c, h, w) = dims4(a.shape(), "instance_norm");
            let g = &inner.vals[gamma.0];
            let bt = &inner.vals[beta.0];
            assert!(g.ndim() == 1 && g.len() == c, "instance_norm gamma shape");
            assert!(bt.ndim() == 1 && bt.len() == c, "instance_norm beta shape");
            let m = (h * w) as f64;
            let mut mean = Array2::<f64>::zeros((n, c));
            let mut invstd = Array2::<f64>::zeros((n, c));
            let mut y = ArrayD::<f64>::zeros(a.raw_dim());
            for ni in 0..n {
                for ci in 0..c {
                    let mut s = 0.0;
                    for hi in 0..h {
                        for wi in 0..w {
                            s += a[[ni, ci, hi, wi]];
                        }
                    }
                    let mu = s / m;
                    let mut var = 0.0;
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = a[[ni, ci, hi, wi]] - mu;
                            var += d * d;
                        }
                    }
                    var /= m;
                    let is = 1.0 / (var + eps).sqrt();
                    mean[[ni, ci]] = mu;
                    invstd[[ni, ci]] = is;
                    let gc = g[ci];
                    let bc = bt[ci];
                    for hi in 0..h {
                        for wi in 0..w {
                            y[[ni, ci, hi, wi]] = gc * (a[[ni, ci, hi, wi]] - mu) * is + bc;
                        }
                    }
                }
            }
            (y, mean, invstd)
        };
        self.push(
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
            },
            val,
            None,
        )
    }

    /// Half-pixel bilinear resize to `(out_h, out_w)`.
    pub fn bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let xv = inner.vals[x.0].view().into_dimensionality::<Ix4>().expect("bilinear x 4-d");
            resample::bilinear_forward(xv, out_h, out_w).into_dyn()
        };
        self.push(Op::Bilinear(x.0), val, None)
    }

    pub fn avgpool2(&self, x: Var) -> Var {
        let val = {
            let inner = self.inner.borrow();
            let xv = inner.vals[x.0].view().into_dimensionality::<Ix4>().expect("avgpool x 4-d");
            resample::avgpool2_forward(xv).into_dyn()
        };
        self.push(Op::AvgPool2(x.0), val, None)
    }

    /// Reverse sweep from a scalar root. May be called once per tape.
    pub fn backward(&self, root: Var) {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.swept, "backward called twice");
        inner.swept = true;
        assert!(
            inner.vals[root.0].len() == 1,
            "backward root must be scalar"
        );
        let n = inner.vals.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(inner.vals[root.0].raw_dim(), 1.0));

        let Inner { vals, ops, .. } = &*inner;
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut lower[*a], g.clone());
                    acc(&mut lower[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut lower[*a], g.clone());
                    acc(&mut lower[*b], g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut lower[a], g * &vals[b]);
                    acc(&mut lower[b], g * &vals[a]);
                }
                Op::Scale(x, c) => acc(&mut lower[*x], g.mapv(|v| v * c)),
                Op::AddScalar(x) => acc(&mut lower[*x], g.clone()),
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    let gx = ndarray::Zip::from(g)
                        .and(&vals[*x])
                        .map_collect(|gv, xv| if *xv > 0.0 { *gv } else { gv * slope });
                    acc(&mut lower[*x], gx);
                }
                Op::Sigmoid(x) => {
                    let y = &vals[i];
                    let gx = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|gv, yv| gv * yv * (1.0 - yv));
                    acc(&mut lower[*x], gx);
                }
                Op::Abs(x) => {
                    let gx = ndarray::Zip::from(g)
                        .and(&vals[*x])
                        .map_collect(|gv, xv| gv * xv.signum() * f64::from(*xv != 0.0));
                    acc(&mut lower[*x], gx);
                }
                Op::Ln(x) => {
                    let gx = ndarray::Zip::from(g)
                        .and(&vals[*x])
                        .map_collect(|gv, xv| gv / xv);
                    acc(&mut lower[*x], gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = ndarray::Zip::from(g)
                        .and(&vals[*x])
                        .map_collect(|gv, xv| if *xv > lo && *xv < hi { *gv } else { 0.0 });
                    acc(&mut lower[*x], gx);
                }
                Op::SumAll(x) => {
                    let gv = *g.iter().next().expect("scalar grad");
                    acc(&mut lower[*x], ArrayD::from_elem(vals[*x].raw_dim(), gv));
                }
                Op::MeanAll(x) => {
                    let gv = *g.iter().next().expect("scalar grad");
                    let nel = vals[*x].len() as f64;
                    acc(&mut lower[*x], ArrayD::from_elem(vals[*x].raw_dim(), gv / nel));
                }
                Op::SumSpatial(x) => {
                    let xs = vals[*x].shape();
                    let gx = ArrayD::from_shape_fn(vals[*x].raw_dim(), |ix| g[[ix[0], ix[1]]]);
                    let _ = xs;
                    acc(&mut lower[*x], gx);
                }
                Op::BroadcastSpatial(x) => {
                    let gx = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                    acc(&mut lower[*x], gx);
                }
                Op::MulChan(x, m) => {
                    let (x, m) = (*x, *m);
                    let mb = vals[m].broadcast(vals[x].raw_dim()).expect("broadcast");
                    acc(&mut lower[x], g * &mb);
                    let gm = (g * &vals[x])
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut lower[m], gm);
                }
                Op::DivRow(num, den) => {
                    let (num, den) = (*num, *den);
                    let db = vals[den].broadcast(vals[num].raw_dim()).expect("broadcast");
                    acc(&mut lower[num], g / &db);
                    let gden = -(g * &vals[num] / &db / &db)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut lower[den], gden);
                }
                Op::ConcatChan(xs) => {
                    let mut off = 0;
                    for xi in xs {
                        let cw = vals[*xi].shape()[1];
                        let piece = g
                            .slice_axis(Axis(1), ndarray::Slice::from(off..off + cw))
                            .to_owned();
                        acc(&mut lower[*xi], piece);
                        off += cw;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = vals[*x].view().into_dimensionality::<Ix4>().expect("4-d");
                    let wv = vals[*w].view().into_dimensionality::<Ix4>().expect("4-d");
                    let gv = g.view().into_dimensionality::<Ix4>().expect("4-d");
                    let (gx, gw, gb) = conv::conv2d_backward(xv, wv, gv, *stride, *pad, true);
                    acc(&mut lower[*x], gx.expect("requested gx").into_dyn());
                    acc(&mut lower[*w], gw.into_dyn());
                    if let Some(bi) = b {
                        acc(&mut lower[*bi], ndarray::Array1::from_vec(gb).into_dyn());
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = vals[*x].view().into_dimensionality::<Ix2>().expect("2-d");
                    let wv = vals[*w].view().into_dimensionality::<Ix2>().expect("2-d");
                    let gv = g.view().into_dimensionality::<Ix2>().expect("2-d");
                    acc(&mut lower[*x], gv.dot(&wv).into_dyn());
                    acc(&mut lower[*w], gv.t().dot(&xv).into_dyn());
                    if let Some(bi) = b {
                        acc(&mut lower[*bi], gv.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::InstanceNorm { x, gamma, beta, mean, invstd } => {
                    let a = &vals[*x];
                    let (n, c, h, w) = dims4(a.shape(), "instance_norm backward");
                    let m = (h * w) as f64;
                    let gm = &vals[*gamma];
                    let mut gx = ArrayD::<f64>::zeros(a.raw_dim());
                    let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                    let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let mu = mean[[ni, ci]];
                            let is = invstd[[ni, ci]];
                            let gc = gm[ci];
                            let mut sum_gh = 0.0;
                            let mut sum_ghx = 0.0;
                            for hi in 0..h {
                                for wi in 0..w {
                                    let xh = (a[[ni, ci, hi, wi]] - mu) * is;
                                    let gh = g[[ni, ci, hi, wi]] * gc;
                                    sum_gh += gh;
                                    sum_ghx += gh * xh;
                                    ggamma[ci] += g[[ni, ci, hi, wi]] * xh;
                                    gbeta[ci] += g[[ni, ci, hi, wi]];
                                }
                            }
                            for hi in 0..h {
                                for wi in 0..w {
                                    let xh = (a[[ni, ci, hi, wi]] - mu) * is;
                                    let gh = g[[ni, ci, hi, wi]] * gc;
                                    gx[[ni, ci, hi, wi]] =
                                        is * (gh - sum_gh / m - xh * sum_ghx / m);
                                }
                            }
                        }
                    }
                    acc(&mut lower[*x], gx);
                    acc(&mut lower[*gamma], ggamma.into_dyn());
                    acc(&mut lower[*beta], gbeta.into_dyn());
                }
                Op::Bilinear(x) => {
                    let xs = vals[*x].shape().to_vec();
                    let gv = g.view().into_dimensionality::<Ix4>().expect("4-d");
                    let gx = resample::bilinear_backward(gv, xs[2], xs[3]);
                    acc(&mut lower[*x], gx.into_dyn());
                }
                Op::AvgPool2(x) => {
                    let gv = g.view().into_dimensionality::<Ix4>().expect("4-d");
                    acc(&mut lower[*x], resample::avgpool2_backward(gv).into_dyn());
                }
            }
        }
        inner.grads = grads;
    }

    /// Gradient of the swept root with respect to node `v`, if any path
    /// connected them.
    pub fn grad(&self, v: Var) -> Option<ArrayD<f64>> {
        let inner = self.inner.borrow();
        assert!(inner.swept, "grad() before backward()");
        inner.grads[v.0].clone()
    }

    /// Per-parameter gradients aligned with `store` ids. A parameter
    /// inserted several times has its leaf gradients summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<ArrayD<f64>>> {
        let inner = self.inner.borrow();
        assert!(inner.swept, "param_grads() before backward()");
        let mut out: Vec<Option<ArrayD<f64>>> = (0..store.len()).map(|_| None).collect();
        for (node, pid) in inner.params.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, &inner.grads[node]) {
                acc(&mut out[pid.0], g.clone());
            }
        }
        out
    }
}
