//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough cached state to run its backward rule. Nodes are appended in
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Gradients are accumulated in a fixed order, which keeps repeated runs
//! bitwise identical.
//!
//! Batched layouts follow the NCHW convention. Per-channel operations treat any
//! tensor of rank >= 2 as `[N, C, S]` where `S` is the product of the trailing
//! dimensions (so a `[N, C]` dense activation has `S = 1`).

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use crate::error::{shape_err, Result};

pub type Tensor = ArrayD<f64>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Sum(usize),
    LogSoftmax(usize),
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    CwMargin {
        x: usize,
        labels: Vec<usize>,
        other: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    ChannelAffine {
        x: usize,
        scale: usize,
        shift: usize,
    },
    BatchNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    InstanceNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    FixedNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Sws {
        w: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        scale: f64,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    Slice0 {
        x: usize,
        start: usize,
    },
    Concat0(Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by [`Graph::batch_norm`], biased (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap_or(f64::NAN)
    }
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

/// `[N, C, S]` factorization of a tensor of rank >= 2.
fn ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!(
            "per-channel op needs rank >= 2, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(standard(value)),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(standard(value), Op::Leaf, requires_grad)
    }

    /// Leaf that shares an existing buffer (no copy).
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(standard((*value).clone()))
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    pub fn add<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (va, vb) = (self.val(a.id), self.val(b.id));
        Self::check_same(&va, &vb, "add")?;
        let out = &*va + &*vb;
        Ok(self.push(out, Op::Add(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    pub fn sub<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (va, vb) = (self.val(a.id), self.val(b.id));
        Self::check_same(&va, &vb, "sub")?;
        let out = &*va - &*vb;
        Ok(self.push(out, Op::Sub(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    pub fn mul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        let (va, vb) = (self.val(a.id), self.val(b.id));
        Self::check_same(&va, &vb, "mul")?;
        let out = &*va * &*vb;
        Ok(self.push(out, Op::Mul(a.id, b.id), self.rg(&[a.id, b.id])))
    }

    pub fn scale<'g>(&'g self, a: Var<'g>, c: f64) -> Var<'g> {
        let out = self.val(a.id).mapv(|v| v * c);
        self.push(out, Op::Scale(a.id, c), self.rg(&[a.id]))
    }

    /// `(1 - t) * a + t * b`.
    pub fn lerp<'g>(&'g self, a: Var<'g>, b: Var<'g>, t: f64) -> Result<Var<'g>> {
        let sa = self.scale(a, 1.0 - t);
        let sb = self.scale(b, t);
        self.add(sa, sb)
    }

    pub fn relu<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let out = self.val(a.id).mapv(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a.id), self.rg(&[a.id]))
    }

    pub fn exp<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let out = self.val(a.id).mapv(f64::exp);
        self.push(out, Op::Exp(a.id), self.rg(&[a.id]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let s = self.val(a.id).iter().sum::<f64>();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::Sum(a.id),
            self.rg(&[a.id]),
        )
    }

    pub fn mean<'g>(&'g self, a: Var<'g>) -> Var<'g> {
        let n = self.val(a.id).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise log-softmax of a `[N, K]` tensor.
    pub fn log_softmax<'g>(&'g self, a: Var<'g>) -> Result<Var<'g>> {
        let v = self.val(a.id);
        if v.ndim() != 2 {
            return Err(shape_err(format!("log_softmax expects [N, K], got {:?}", v.shape())));
        }
        let (n, k) = (v.shape()[0], v.shape()[1]);
        let src = v.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for c in 0..k {
                out[r * k + c] = row[c] - lse;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, k]), out).expect("shape");
        Ok(self.push(out, Op::LogSoftmax(a.id), self.rg(&[a.id])))
    }

    /// Gathers `a[n, idx[n]]` from a `[N, K]` tensor into a `[N]` tensor.
    pub fn pick<'g>(&'g self, a: Var<'g>, idx: &[usize]) -> Result<Var<'g>> {
        let v = self.val(a.id);
        if v.ndim() != 2 || v.shape()[0] != idx.len() {
            return Err(shape_err(format!(
                "pick: tensor {:?} with {} indices",
                v.shape(),
                idx.len()
            )));
        }
        let k = v.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(crate::error::arg_err(format!(
                "pick: index {bad} out of range for {k} classes"
            )));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| v[[r, c]]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), out).expect("shape");
        Ok(self.push(
            out,
            Op::Pick {
                x: a.id,
                idx: idx.to_vec(),
            },
            self.rg(&[a.id]),
        ))
    }

    /// Per-row `max_{i != y} z_i - z_y` on `[N, K]` logits.
    pub fn cw_margin<'g>(&'g self, a: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
        let v = self.val(a.id);
        if v.ndim() != 2 || v.shape()[0] != labels.len() || v.shape()[1] < 2 {
            return Err(shape_err(format!(
                "cw_margin: logits {:?} with {} labels",
                v.shape(),
                labels.len()
            )));
        }
        let k = v.shape()[1];
        let mut out = Vec::with_capacity(labels.len());
        let mut other = Vec::with_capacity(labels.len());
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(crate::error::arg_err(format!(
                    "cw_margin: label {y} out of range for {k} classes"
                )));
            }
            let mut best = usize::MAX;
            for c in 0..k {
                if c != y && (best == usize::MAX || v[[r, c]] > v[[r, best]]) {
                    best = c;
                }
            }
            out.push(v[[r, best]] - v[[r, y]]);
            other.push(best);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[labels.len()]), out).expect("shape");
        Ok(self.push(
            out,
            Op::CwMargin {
                x: a.id,
                labels: labels.to_vec(),
                other,
            },
            self.rg(&[a.id]),
        ))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, zero padding, no bias.
    pub fn conv2d<'g>(
        &'g self,
        x: Var<'g>,
        w: Var<'g>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let (vx, vw) = (self.val(x.id), self.val(w.id));
        if vx.ndim() != 4 || vw.ndim() != 4 || vx.shape()[1] != vw.shape()[1] || stride == 0 {
            return Err(shape_err(format!(
                "conv2d: input {:?}, weight {:?}, stride {stride}",
                vx.shape(),
                vw.shape()
            )));
        }
        let g = ConvGeom::new(vx.shape(), vw.shape(), stride, pad)?;
        let cols = im2col(vx.as_slice().expect("standard"), &g);
        let w_mat = vw
            .view()
            .into_shape_with_order((g.o, g.ckk()))
            .expect("weight reshape");
        let out_mat = cols.dot(&w_mat.t());
        let out = rows_to_nchw(out_mat.view(), &g);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                stride,
                pad,
                cols,
            },
            self.rg(&[x.id, w.id]),
        ))
    }

    /// Dense layer: `x: [N, D]`, `w: [O, D]`, optional bias `[O]`.
    pub fn linear<'g>(&'g self, x: Var<'g>, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let (vx, vw) = (self.val(x.id), self.val(w.id));
        if vx.ndim() != 2 || vw.ndim() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(shape_err(format!(
                "linear: input {:?}, weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let xm = vx.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let wm = vw.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let mut out = xm.dot(&wm.t());
        let mut ids = vec![x.id, w.id];
        if let Some(b) = b {
            let vb = self.val(b.id);
            if vb.shape() != [vw.shape()[0]] {
                return Err(shape_err(format!("linear: bias {:?}", vb.shape())));
            }
            for mut row in out.rows_mut() {
                row.iter_mut().zip(vb.iter()).for_each(|(o, &bb)| *o += bb);
            }
            ids.push(b.id);
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            self.rg(&ids),
        ))
    }

    /// `x * scale[c] + shift[c]` along axis 1.
    pub fn channel_affine<'g>(
        &'g self,
        x: Var<'g>,
        scale: Var<'g>,
        shift: Var<'g>,
    ) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        let (n, c, s) = ncs(vx.shape())?;
        let (vs, vt) = (self.val(scale.id), self.val(shift.id));
        if vs.shape() != [c] || vt.shape() != [c] {
            return Err(shape_err(format!(
                "channel_affine: {c} channels, scale {:?}, shift {:?}",
                vs.shape(),
                vt.shape()
            )));
        }
        let src = vx.as_slice().expect("standard");
        let (sc, sh) = (vs.as_slice().expect("1d"), vt.as_slice().expect("1d"));
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    out[k] = src[k] * sc[ci] + sh[ci];
                }
            }
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).expect("shape");
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x: x.id,
                scale: scale.id,
                shift: shift.id,
            },
            self.rg(&[x.id, scale.id, shift.id]),
        ))
    }

    /// Normalizes each channel with statistics of the batch (over N and spatial
    /// positions). Returns the normalized tensor and the biased batch moments.
    pub fn batch_norm<'g>(&'g self, x: Var<'g>, eps: f64) -> Result<(Var<'g>, BatchMoments)> {
        let vx = self.val(x.id);
        let (n, c, s) = ncs(vx.shape())?;
        let m = n * s;
        if m == 0 {
            return Err(shape_err("batch_norm on an empty batch"));
        }
        let src = vx.as_slice().expect("standard");
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                acc += src[base..base + s].iter().sum::<f64>();
            }
            mean[ci] = acc / m as f64;
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                acc += src[base..base + s]
                    .iter()
                    .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
            var[ci] = acc / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    out[k] = (src[k] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).expect("shape");
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x: x.id,
                inv_std,
            },
            self.rg(&[x.id]),
        );
        Ok((var_out, BatchMoments { mean, var, count: m }))
    }

    /// Normalizes each `(sample, channel)` slice over its spatial positions.
    pub fn instance_norm<'g>(&'g self, x: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        let (n, c, s) = ncs(vx.shape())?;
        if s < 2 {
            return Err(shape_err(format!(
                "instance_norm needs spatial extent, got shape {:?}",
                vx.shape()
            )));
        }
        let src = vx.as_slice().expect("standard");
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let sl = &src[base..base + s];
                let mean = sl.iter().sum::<f64>() / s as f64;
                let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[ni * c + ci] = is;
                for (k, &v) in sl.iter().enumerate() {
                    out[base + k] = (v - mean) * is;
                }
            }
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).expect("shape");
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x: x.id,
                inv_std,
            },
            self.rg(&[x.id]),
        ))
    }

    /// `(x - mean[c]) / sqrt(var[c] + eps)` with constant statistics.
    pub fn fixed_norm<'g>(
        &'g self,
        x: Var<'g>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        let (n, c, s) = ncs(vx.shape())?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(format!(
                "fixed_norm: {c} channels but statistics of length {}/{}",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let src = vx.as_slice().expect("standard");
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    out[k] = (src[k] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).expect("shape");
        Ok(self.push(
            out,
            Op::FixedNorm {
                x: x.id,
                inv_std,
            },
            self.rg(&[x.id]),
        ))
    }

    /// Scaled weight standardization of a weight tensor whose first axis indexes
    /// output units: every row is centred, divided by `sqrt(var + eps)` and by
    /// `sqrt(fan_in)`, then multiplied by `gain`.
    pub fn sws<'g>(&'g self, w: Var<'g>, gain: f64, eps: f64) -> Result<Var<'g>> {
        let vw = self.val(w.id);
        if vw.ndim() < 2 || vw.is_empty() {
            return Err(shape_err(format!("sws: weight shape {:?}", vw.shape())));
        }
        let rows = vw.shape()[0];
        let fan_in = vw.len() / rows;
        let scale = gain / (fan_in as f64).sqrt();
        let src = vw.as_slice().expect("standard");
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * fan_in..(r + 1) * fan_in];
            let mean = row.iter().sum::<f64>() / fan_in as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / fan_in as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (k, &v) in row.iter().enumerate() {
                xhat[r * fan_in + k] = (v - mean) * is;
            }
        }
        let xhat = ArrayD::from_shape_vec(vw.raw_dim(), xhat).expect("shape");
        let out = xhat.mapv(|v| v * scale);
        Ok(self.push(
            out,
            Op::Sws {
                w: w.id,
                xhat,
                inv_std,
                scale,
            },
            self.rg(&[w.id]),
        ))
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        let (n, c, s) = ncs(vx.shape())?;
        let src = vx.as_slice().expect("standard");
        let out: Vec<f64> = (0..n * c)
            .map(|k| src[k * s..(k + 1) * s].iter().sum::<f64>() / s as f64)
            .collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).expect("shape");
        Ok(self.push(out, Op::GlobalAvgPool(x.id), self.rg(&[x.id])))
    }

    pub fn reshape<'g>(&'g self, x: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", vx.shape())));
        }
        let out = ArrayD::from_shape_vec(IxDyn(shape), vx.iter().copied().collect()).expect("shape");
        Ok(self.push(out, Op::Reshape(x.id), self.rg(&[x.id])))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice0<'g>(&'g self, x: Var<'g>, start: usize, len: usize) -> Result<Var<'g>> {
        let vx = self.val(x.id);
        if vx.ndim() == 0 || start + len > vx.shape()[0] {
            return Err(shape_err(format!(
                "slice0 [{start}, {}) of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let out = vx
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        Ok(self.push(
            standard(out),
            Op::Slice0 { x: x.id, start },
            self.rg(&[x.id]),
        ))
    }

    pub fn concat0<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(shape_err("concat0 of nothing"));
        }
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| self.val(p.id)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| shape_err(format!("concat0: {e}")))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(standard(out), Op::Concat0(ids), rg))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n_nodes = nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        let rv = &nodes[root.id].value;
        if rv.len() != 1 {
            return Err(shape_err(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        grads[root.id] = Some(ArrayD::from_elem(rv.raw_dim(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, gout.clone());
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(&mut grads, *b, gout.mapv(|v| -v));
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, &gout * &*nodes[*b].value);
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, &gout * &*nodes[*a].value);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, gout.mapv(|v| v * c));
                }
                Op::Relu(a) => {
                    let mut g = gout;
                    g.zip_mut_with(&nodes[*a].value, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, &gout * &*node.value);
                }
                Op::Sum(a) => {
                    let g = gout.iter().next().copied().unwrap_or(0.0);
                    acc(&mut grads, *a, ArrayD::from_elem(nodes[*a].value.raw_dim(), g));
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_slice().expect("standard");
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let (n, k) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut gx = vec![0.0; n * k];
                    for r in 0..n {
                        let tot: f64 = gs[r * k..(r + 1) * k].iter().sum();
                        for c in 0..k {
                            gx[r * k + c] = gs[r * k + c] - y[r * k + c].exp() * tot;
                        }
                    }
                    acc(
                        &mut grads,
                        *a,
                        ArrayD::from_shape_vec(node.value.raw_dim(), gx).expect("shape"),
                    );
                }
                Op::Pick { x, idx } => {
                    let mut g = ArrayD::zeros(nodes[*x].value.raw_dim());
                    for (r, &c) in idx.iter().enumerate() {
                        g[[r, c]] = gout[[r]];
                    }
                    acc(&mut grads, *x, g);
                }
                Op::CwMargin { x, labels, other } => {
                    let mut g = ArrayD::zeros(nodes[*x].value.raw_dim());
                    for (r, (&y, &o)) in labels.iter().zip(other).enumerate() {
                        g[[r, o]] += gout[[r]];
                        g[[r, y]] -= gout[[r]];
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    pad,
                    cols,
                } => {
                    let g = ConvGeom::new(nodes[*x].value.shape(), nodes[*w].value.shape(), *stride, *pad)?;
                    let go = standard(gout);
                    let gmat = nchw_to_rows(go.as_slice().expect("standard"), &g);
                    if needs(*w) {
                        let dw = gmat.t().dot(cols);
                        let dw = ArrayD::from_shape_vec(
                            nodes[*w].value.raw_dim(),
                            dw.as_standard_layout().iter().copied().collect(),
                        )
                        .expect("shape");
                        acc(&mut grads, *w, dw);
                    }
                    if needs(*x) {
                        let wv = &nodes[*w].value;
                        let w_mat = wv
                            .view()
                            .into_shape_with_order((g.o, g.ckk()))
                            .expect("weight reshape");
                        let dcols = gmat.dot(&w_mat);
                        let dx = col2im(&dcols, &g);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let go = gout.into_dimensionality::<ndarray::Ix2>().expect("2d");
                    if needs(*w) {
                        let xv = nodes[*x].value.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                        acc(&mut grads, *w, go.t().dot(&xv).into_dyn());
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            acc(&mut grads, *b, go.sum_axis(ndarray::Axis(0)).into_dyn());
                        }
                    }
                    if needs(*x) {
                        let wv = nodes[*w].value.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                        acc(&mut grads, *x, go.dot(&wv).into_dyn());
                    }
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = &nodes[*x].value;
                    let (n, c, s) = ncs(xv.shape())?;
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let xs = xv.as_slice().expect("standard");
                    let sc = nodes[*scale].value.as_slice().expect("1d").to_vec();
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    let mut dx = vec![0.0; gs.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            for k in base..base + s {
                                dscale[ci] += gs[k] * xs[k];
                                dshift[ci] += gs[k];
                                dx[k] = gs[k] * sc[ci];
                            }
                        }
                    }
                    if needs(*shift) {
                        acc(&mut grads, *shift, ArrayD::from_shape_vec(IxDyn(&[c]), dshift).expect("shape"));
                    }
                    if needs(*scale) {
                        acc(&mut grads, *scale, ArrayD::from_shape_vec(IxDyn(&[c]), dscale).expect("shape"));
                    }
                    if needs(*x) {
                        acc(&mut grads, *x, ArrayD::from_shape_vec(xv.raw_dim(), dx).expect("shape"));
                    }
                }
                Op::BatchNorm { x, inv_std } => {
                    let (n, c, s) = ncs(node.value.shape())?;
                    let xhat = node.value.as_slice().expect("standard");
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let m = (n * s) as f64;
                    let mut dx = vec![0.0; gs.len()];
                    for ci in 0..c {
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for ni in 0..n {
                            let base = (ni * c + ci) * s;
                            for k in base..base + s {
                                sg += gs[k];
                                sgx += gs[k] * xhat[k];
                            }
                        }
                        let (mg, mgx) = (sg / m, sgx / m);
                        for ni in 0..n {
                            let base = (ni * c + ci) * s;
                            for k in base..base + s {
                                dx[k] = inv_std[ci] * (gs[k] - mg - xhat[k] * mgx);
                            }
                        }
                    }
                    acc(&mut grads, *x, ArrayD::from_shape_vec(node.value.raw_dim(), dx).expect("shape"));
                }
                Op::InstanceNorm { x, inv_std } => {
                    let (n, c, s) = ncs(node.value.shape())?;
                    let xhat = node.value.as_slice().expect("standard");
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let mut dx = vec![0.0; gs.len()];
                    for k in 0..n * c {
                        let base = k * s;
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for i in base..base + s {
                            sg += gs[i];
                            sgx += gs[i] * xhat[i];
                        }
                        let (mg, mgx) = (sg / s as f64, sgx / s as f64);
                        for i in base..base + s {
                            dx[i] = inv_std[k] * (gs[i] - mg - xhat[i] * mgx);
                        }
                    }
                    acc(&mut grads, *x, ArrayD::from_shape_vec(node.value.raw_dim(), dx).expect("shape"));
                }
                Op::FixedNorm { x, inv_std } => {
                    let (n, c, s) = ncs(node.value.shape())?;
                    let mut g = standard(gout);
                    let gs = g.as_slice_mut().expect("standard");
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            for k in base..base + s {
                                gs[k] *= inv_std[ci];
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Sws {
                    w,
                    xhat,
                    inv_std,
                    scale,
                } => {
                    let rows = xhat.shape()[0];
                    let fan = xhat.len() / rows;
                    let xs = xhat.as_slice().expect("standard");
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let mut dw = vec![0.0; gs.len()];
                    for r in 0..rows {
                        let base = r * fan;
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for k in base..base + fan {
                            sg += gs[k] * scale;
                            sgx += gs[k] * scale * xs[k];
                        }
                        let (mg, mgx) = (sg / fan as f64, sgx / fan as f64);
                        for k in base..base + fan {
                            dw[k] = inv_std[r] * (gs[k] * scale - mg - xs[k] * mgx);
                        }
                    }
                    acc(&mut grads, *w, ArrayD::from_shape_vec(xhat.raw_dim(), dw).expect("shape"));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = &nodes[*x].value;
                    let (n, c, s) = ncs(xv.shape())?;
                    let go = standard(gout);
                    let gs = go.as_slice().expect("standard");
                    let mut dx = vec![0.0; n * c * s];
                    for k in 0..n * c {
                        let v = gs[k] / s as f64;
                        dx[k * s..(k + 1) * s].iter_mut().for_each(|d| *d = v);
                    }
                    acc(&mut grads, *x, ArrayD::from_shape_vec(xv.raw_dim(), dx).expect("shape"));
                }
                Op::Reshape(x) => {
                    let xv = &nodes[*x].value;
                    let go = standard(gout);
                    let g = ArrayD::from_shape_vec(xv.raw_dim(), go.iter().copied().collect()).expect("shape");
                    acc(&mut grads, *x, g);
                }
                Op::Slice0 { x, start } => {
                    let xv = &nodes[*x].value;
                    let mut g = ArrayD::zeros(xv.raw_dim());
                    let len = gout.shape()[0];
                    g.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(*start..*start + len))
                        .assign(&gout);
                    acc(&mut grads, *x, g);
                }
                Op::Concat0(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[0];
                        if needs(p) {
                            let g = gout
                                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(off..off + len))
                                .to_owned();
                            acc(&mut grads, p, standard(g));
                        }
                        off += len;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if it was reached.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let ckk = g.ckk();
    let mut cols = vec![0.0; g.rows() * ckk];
    let (h, w) = (g.h as isize, g.w as isize);
    for n in 0..g.n {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * ckk;
                let h0 = (oh * g.stride) as isize - g.pad as isize;
                let w0 = (ow * g.stride) as isize - g.pad as isize;
                let mut k = row;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for i in 0..g.kh as isize {
                        let ih = h0 + i;
                        for j in 0..g.kw as isize {
                            let iw = w0 + j;
                            if ih >= 0 && ih < h && iw >= 0 && iw < w {
                                cols[k] = x[plane + ih as usize * g.w + iw as usize];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ckk), cols).expect("im2col shape")
}

fn col2im(dcols: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let dc = dcols.as_standard_layout();
    let src = dc.as_slice().expect("standard");
    let ckk = g.ckk();
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    let (h, w) = (g.h as isize, g.w as isize);
    for n in 0..g.n {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * ckk;
                let h0 = (oh * g.stride) as isize - g.pad as isize;
                let w0 = (ow * g.stride) as isize - g.pad as isize;
                let mut k = row;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for i in 0..g.kh as isize {
                        let ih = h0 + i;
                        for j in 0..g.kw as isize {
                            let iw = w0 + j;
                            if ih >= 0 && ih < h && iw >= 0 && iw < w {
                                dx[plane + ih as usize * g.w + iw as usize] += src[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.c, g.h, g.w]), dx).expect("col2im shape")
}

fn rows_to_nchw(m: ArrayView2<'_, f64>, g: &ConvGeom) -> Tensor {
    let hw = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.o * hw];
    for n in 0..g.n {
        for p in 0..hw {
            let row = m.row(n * hw + p);
            for (o, &v) in row.iter().enumerate() {
                out[(n * g.o + o) * hw + p] = v;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.o, g.oh, g.ow]), out).expect("shape")
}

fn nchw_to_rows(src: &[f64], g: &ConvGeom) -> Array2<f64> {
    let hw = g.oh * g.ow;
    let mut m = vec![0.0; g.n * hw * g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = (n * g.o + o) * hw;
            for p in 0..hw {
                m[(n * hw + p) * g.o + o] = src[plane + p];
            }
        }
    }
    Array2::from_shape_vec((g.n * hw, g.o), m).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`, compared with `analytic`.
    fn check_grad(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64, tol: f64) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
            assert!(err < tol, "coord {i}: fd {fd} vs analytic {an}");
        }
    }

    /// Builds a scalar from `x` through `build`, weighting outputs by a fixed
    /// random tensor so every output element contributes.
    fn scalar_of(
        x: &Tensor,
        weights_seed: u64,
        build: &dyn for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
    ) -> (f64, Tensor) {
        let g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = build(&g, xv);
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let wt = rand_tensor(&y.shape(), &mut rng);
        let wv = g.constant(wt);
        let prod = g.mul(y, wv).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        (s.item(), grads.get_or_zeros(xv))
    }

    fn fd_case(shape: &[usize], build: &dyn for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(shape, &mut rng);
        let (_, an) = scalar_of(&x, 11, build);
        check_grad(&x, &an, |t| scalar_of(t, 11, build).0, 1e-5);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let wc = w.clone();
        fd_case(&[2, 2, 5, 4], &move |g, x| {
            let wv = g.constant(wc.clone());
            g.conv2d(x, wv, 2, 1).unwrap()
        });
        let x = rand_tensor(&[2, 2, 5, 4], &mut rng);
        fd_case(&[3, 2, 3, 3], &move |g, w| {
            let xv = g.constant(x.clone());
            g.conv2d(xv, w, 1, 1).unwrap()
        });
        let _ = w;
    }

    #[test]
    fn normalization_gradients_match_finite_differences() {
        fd_case(&[3, 2, 2, 2], &|g, x| g.batch_norm(x, 1e-5).unwrap().0);
        fd_case(&[4, 3], &|g, x| g.batch_norm(x, 1e-5).unwrap().0);
        fd_case(&[2, 2, 3, 3], &|g, x| g.instance_norm(x, 1e-5).unwrap());
        fd_case(&[4, 6], &|g, x| g.sws(x, 1.7, 1e-5).unwrap());
        fd_case(&[2, 3, 2, 2], &|g, x| g.fixed_norm(x, &[0.1, -0.2, 0.3], &[1.0, 2.0, 0.5], 1e-5).unwrap());
    }

    #[test]
    fn dense_and_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        fd_case(&[5, 4], &move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            g.linear(x, wv, Some(bv)).unwrap()
        });
        fd_case(&[4, 5], &|g, x| g.log_softmax(x).unwrap());
        fd_case(&[3, 4], &|g, x| g.pick(x, &[0, 3, 1]).unwrap());
        fd_case(&[3, 4], &|g, x| g.cw_margin(x, &[0, 3, 1]).unwrap());
        fd_case(&[2, 3, 2, 2], &|g, x| g.global_avg_pool(x).unwrap());
        fd_case(&[2, 3], &|g, x| g.exp(x));
        fd_case(&[2, 3], &|g, x| {
            let s = g.slice0(x, 1, 1).unwrap();
            let t = g.slice0(x, 0, 1).unwrap();
            let c = g.concat0(&[s, t, s]).unwrap();
            g.reshape(c, &[9]).unwrap()
        });
        let sc = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -1.5]).unwrap();
        let sh = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2, 0.1]).unwrap();
        fd_case(&[3, 2, 2, 1], &move |g, x| {
            let a = g.constant(sc.clone());
            let b = g.constant(sh.clone());
            g.channel_affine(x, a, b).unwrap()
        });
    }

    #[test]
    fn relu_and_arithmetic() {
        let g = Graph::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![-1.0, 0.5, 2.0]).unwrap(), true);
        let r = g.relu(x);
        let y = g.mul(r, r).unwrap();
        let z = g.sub(y, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[-1.0, 0.0, 3.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(ArrayD::ones(IxDyn(&[1, 1, 3, 3])), true);
        let w = g.constant(ArrayD::ones(IxDyn(&[1, 1, 3, 3])));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn shape_errors_are_reported() {
        let g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[3, 2])));
        assert!(g.add(a, b).is_err());
        assert!(g.sws(g.constant(ArrayD::zeros(IxDyn(&[0, 3]))), 1.0, 1e-5).is_err());
        assert!(g.backward(a).is_err());
    }
}
