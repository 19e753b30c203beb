//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Every value is an f64 tensor. Operations append nodes to a [`Graph`];
//! node ids are strictly increasing, so the reverse sweep is a single
//! descending pass. The op set is exactly what the forecasting model and
//! its composite objective need; each backward rule is checked against
//! central finite differences in the tests below.

use std::sync::Arc;

use crate::error::{GemError, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no shape")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type NodeId = usize;

/// Constant matrix shared by linear-operator nodes (e.g. spherical
/// transforms).
#[derive(Debug)]
pub struct ConstMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ConstMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        ConstMatrix { rows, cols, data }
    }
}

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    /// y = x w^T + b with x:[N,K], w:[M,K], b:[M].
    Linear,
    /// Batched y = a b, a:[B,M,K], b:[B,K,N].
    Bmm,
    /// Batched y = a b^T, a:[B,M,K], b:[B,N,K].
    BmmNt,
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale(f64),
    /// x:[N,D] + s:[D] broadcast over rows.
    AddBcastRow,
    /// x:[N,D] * s:[D] broadcast over rows.
    MulBcastRow,
    /// y = x * g where g has a single element.
    ScaleByScalarVar,
    /// Row-wise normalization over the last dim, no affine part.
    LayerNorm { inv_std: Vec<f64> },
    Gelu,
    /// Softmax over the last dim; `false` mask entries get probability 0.
    /// Fully masked rows produce all-zero rows.
    SoftmaxMasked,
    /// out[i] = map[i] >= 0 ? in[map[i] as usize] : 0.
    GatherPad { map: Arc<Vec<i64>> },
    /// Channel-pair rotation by fixed angles; tables have numel/2 entries.
    Rope { cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
    Abs,
    /// ln(max(x, floor)); zero gradient below the floor.
    LnClamped { floor: f64 },
    /// y = A x for a constant matrix A.
    MatvecConst { a: Arc<ConstMatrix> },
    /// scalar = w . x for a constant vector w.
    DotConst { w: Arc<Vec<f64>> },
    Sum,
    Mean,
    Concat,
    /// Fair CRPS of S member vectors against a constant observation,
    /// aggregated with constant nonnegative weights. `normalize` divides
    /// by the weight total (area mean); otherwise a plain weighted sum.
    FairCrpsVec {
        obs: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        normalize: bool,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node id after a backward sweep.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            vec![],
            t,
        )
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                requires_grad: true,
            },
            vec![],
            t,
        )
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws, bs) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        assert_eq!(xs.shape.len(), 2, "linear input must be 2-D");
        let (n, k) = (xs.shape[0], xs.shape[1]);
        let m = ws.shape[0];
        assert_eq!(ws.shape[1], k, "linear weight K mismatch");
        assert_eq!(bs.numel(), m, "linear bias length mismatch");
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            1.0,
            &xs.data,
            k as isize,
            1,
            &ws.data,
            1,
            k as isize,
            0.0,
            &mut out,
            m as isize,
            1,
        );
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] += bs.data[c];
            }
        }
        self.push(Op::Linear, vec![x, w, b], Tensor::new(vec![n, m], out))
    }

    fn bmm_dims(a: &Tensor, b: &Tensor) -> (usize, usize, usize, usize) {
        assert_eq!(a.shape.len(), 3);
        assert_eq!(b.shape.len(), 3);
        assert_eq!(a.shape[0], b.shape[0], "bmm batch mismatch");
        (a.shape[0], a.shape[1], a.shape[2], b.shape[2])
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let (bt, m, k, n) = Self::bmm_dims(av, bv);
        assert_eq!(bv.shape[1], k, "bmm inner mismatch");
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data[i * m * k..],
                k as isize,
                1,
                &bv.data[i * k * n..],
                n as isize,
                1,
                0.0,
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        self.push(Op::Bmm, vec![a, b], Tensor::new(vec![bt, m, n], out))
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape.len(), 3);
        assert_eq!(bv.shape.len(), 3);
        assert_eq!(av.shape[0], bv.shape[0], "bmm_nt batch mismatch");
        let (bt, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
        let n = bv.shape[1];
        assert_eq!(bv.shape[2], k, "bmm_nt inner mismatch");
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data[i * m * k..],
                k as isize,
                1,
                &bv.data[i * n * k..],
                1,
                k as isize,
                0.0,
                &mut out[i * m * n..],
                n as isize,
                1,
            );
        }
        self.push(Op::BmmNt, vec![a, b], Tensor::new(vec![bt, m, n], out))
    }

    fn zip_ew(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.numel(), bv.numel(), "elementwise shape mismatch");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape.clone();
        self.push(op, vec![a, b], Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_ew(Op::Mul, a, b, |x, y| x * y)
    }

    fn map_ew(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let av = &self.nodes[a].value;
        let data = av.data.iter().map(|&x| f(x)).collect();
        let shape = av.shape.clone();
        self.push(op, vec![a], Tensor::new(shape, data))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_ew(Op::AddScalar, a, |x| x + c)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_ew(Op::Scale(c), a, |x| x * c)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map_ew(Op::Abs, a, f64::abs)
    }

    pub fn ln_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.map_ew(Op::LnClamped { floor }, a, |x| x.max(floor).ln())
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map_ew(Op::Gelu, a, gelu_f)
    }

    pub fn add_bcast_row(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (xv, sv) = (&self.nodes[x].value, &self.nodes[s].value);
        let d = xv.last_dim();
        assert_eq!(sv.numel(), d, "row-broadcast length mismatch");
        let mut data = xv.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += sv.data[i % d];
        }
        let shape = xv.shape.clone();
        self.push(Op::AddBcastRow, vec![x, s], Tensor::new(shape, data))
    }

    pub fn mul_bcast_row(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (xv, sv) = (&self.nodes[x].value, &self.nodes[s].value);
        let d = xv.last_dim();
        assert_eq!(sv.numel(), d, "row-broadcast length mismatch");
        let mut data = xv.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= sv.data[i % d];
        }
        let shape = xv.shape.clone();
        self.push(Op::MulBcastRow, vec![x, s], Tensor::new(shape, data))
    }

    pub fn scale_by_scalar_var(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let gv = self.nodes[g].value.data[0];
        assert_eq!(self.nodes[g].value.numel(), 1);
        let xv = &self.nodes[x].value;
        let data = xv.data.iter().map(|&v| v * gv).collect();
        let shape = xv.shape.clone();
        self.push(Op::ScaleByScalarVar, vec![x, g], Tensor::new(shape, data))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let d = xv.last_dim();
        let rows = xv.numel() / d;
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * inv;
            }
        }
        let shape = xv.shape.clone();
        self.push(
            Op::LayerNorm { inv_std },
            vec![x],
            Tensor::new(shape, out),
        )
    }

    pub fn softmax_masked(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(mask.len(), xv.numel(), "softmax mask length mismatch");
        let d = xv.last_dim();
        let rows = xv.numel() / d;
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let base = r * d;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..d {
                if mask[base + c] {
                    mx = mx.max(xv.data[base + c]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for c in 0..d {
                if mask[base + c] {
                    let e = (xv.data[base + c] - mx).exp();
                    out[base + c] = e;
                    z += e;
                }
            }
            for c in 0..d {
                out[base + c] /= z;
            }
        }
        let shape = xv.shape.clone();
        self.push(Op::SoftmaxMasked, vec![x], Tensor::new(shape, out))
    }

    pub fn gather_pad(&mut self, x: NodeId, map: Arc<Vec<i64>>, shape: Vec<usize>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(shape.iter().product::<usize>(), map.len());
        let data = map
            .iter()
            .map(|&i| if i >= 0 { xv.data[i as usize] } else { 0.0 })
            .collect();
        self.push(Op::GatherPad { map }, vec![x], Tensor::new(shape, data))
    }

    pub fn rope(&mut self, x: NodeId, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.numel() % 2, 0);
        assert_eq!(cos.len(), xv.numel() / 2, "rope table length mismatch");
        let mut out = vec![0.0; xv.numel()];
        for p in 0..cos.len() {
            let (a, b) = (xv.data[2 * p], xv.data[2 * p + 1]);
            out[2 * p] = cos[p] * a - sin[p] * b;
            out[2 * p + 1] = sin[p] * a + cos[p] * b;
        }
        let shape = xv.shape.clone();
        self.push(Op::Rope { cos, sin }, vec![x], Tensor::new(shape, out))
    }

    pub fn matvec_const(&mut self, a: Arc<ConstMatrix>, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.numel(), a.cols, "matvec dimension mismatch");
        let mut out = vec![0.0; a.rows];
        gemm(
            a.rows,
            a.cols,
            1,
            1.0,
            &a.data,
            a.cols as isize,
            1,
            &xv.data,
            1,
            1,
            0.0,
            &mut out,
            1,
            1,
        );
        let rows = a.rows;
        self.push(Op::MatvecConst { a }, vec![x], Tensor::new(vec![rows], out))
    }

    pub fn dot_const(&mut self, w: Arc<Vec<f64>>, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(w.len(), xv.numel());
        let v = w.iter().zip(&xv.data).map(|(&a, &b)| a * b).sum();
        self.push(Op::DotConst { w }, vec![x], Tensor::scalar(v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data.iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(v))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let v = xv.data.iter().sum::<f64>() / xv.numel() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(v))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let n = data.len();
        self.push(Op::Concat, vec![a, b], Tensor::new(vec![n], data))
    }

    /// Fair CRPS of `members` against `obs`, aggregated with `weights`.
    pub fn fair_crps_vec(
        &mut self,
        members: &[NodeId],
        obs: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        normalize: bool,
    ) -> Result<NodeId> {
        if members.len() < 2 {
            return Err(GemError::EnsembleTooSmall {
                s: members.len(),
                min: 2,
            });
        }
        let k = obs.len();
        for &m in members {
            assert_eq!(self.nodes[m].value.numel(), k, "member length mismatch");
        }
        assert_eq!(weights.len(), k);
        let member_vals: Vec<&[f64]> = members
            .iter()
            .map(|&m| self.nodes[m].value.data.as_slice())
            .collect();
        let value = fair_crps_weighted(&member_vals, &obs, &weights, normalize);
        Ok(self.push(
            Op::FairCrpsVec {
                obs,
                weights,
                normalize,
            },
            members.to_vec(),
            Tensor::scalar(value),
        ))
    }

    /// Reverse sweep from a scalar node. Returns per-node gradients;
    /// only leaves with `requires_grad` keep theirs.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf { requires_grad } = node.op {
                if requires_grad {
                    grads[id] = Some(g);
                }
                continue;
            }
            let contribs = self.op_backward(node, &g);
            for (input, grad) in contribs {
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&grad.data) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        Grads(grads)
    }

    fn op_backward(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let inp = |i: usize| &self.nodes[node.inputs[i]].value;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Linear => {
                let (x, w) = (inp(0), inp(1));
                let (n, k) = (x.shape[0], x.shape[1]);
                let m = w.shape[0];
                let mut dx = vec![0.0; n * k];
                gemm(
                    n,
                    m,
                    k,
                    1.0,
                    &g.data,
                    m as isize,
                    1,
                    &w.data,
                    k as isize,
                    1,
                    0.0,
                    &mut dx,
                    k as isize,
                    1,
                );
                let mut dw = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    &g.data,
                    1,
                    m as isize,
                    &x.data,
                    k as isize,
                    1,
                    0.0,
                    &mut dw,
                    k as isize,
                    1,
                );
                let mut db = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        db[c] += g.data[r * m + c];
                    }
                }
                vec![
                    (node.inputs[0], Tensor::new(vec![n, k], dx)),
                    (node.inputs[1], Tensor::new(vec![m, k], dw)),
                    (node.inputs[2], Tensor::new(vec![m], db)),
                ]
            }
            Op::Bmm => {
                let (a, b) = (inp(0), inp(1));
                let (bt, m, k, n) = Self::bmm_dims(a, b);
                let mut da = vec![0.0; bt * m * k];
                let mut db = vec![0.0; bt * k * n];
                for i in 0..bt {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g.data[i * m * n..],
                        n as isize,
                        1,
                        &b.data[i * k * n..],
                        1,
                        n as isize,
                        0.0,
                        &mut da[i * m * k..],
                        k as isize,
                        1,
                    );
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &a.data[i * m * k..],
                        1,
                        k as isize,
                        &g.data[i * m * n..],
                        n as isize,
                        1,
                        0.0,
                        &mut db[i * k * n..],
                        n as isize,
                        1,
                    );
                }
                vec![
                    (node.inputs[0], Tensor::new(a.shape.clone(), da)),
                    (node.inputs[1], Tensor::new(b.shape.clone(), db)),
                ]
            }
            Op::BmmNt => {
                let (a, b) = (inp(0), inp(1));
                let (bt, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
                let n = b.shape[1];
                let mut da = vec![0.0; bt * m * k];
                let mut db = vec![0.0; bt * n * k];
                for i in 0..bt {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g.data[i * m * n..],
                        n as isize,
                        1,
                        &b.data[i * n * k..],
                        k as isize,
                        1,
                        0.0,
                        &mut da[i * m * k..],
                        k as isize,
                        1,
                    );
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        &g.data[i * m * n..],
                        1,
                        n as isize,
                        &a.data[i * m * k..],
                        k as isize,
                        1,
                        0.0,
                        &mut db[i * n * k..],
                        k as isize,
                        1,
                    );
                }
                vec![
                    (node.inputs[0], Tensor::new(a.shape.clone(), da)),
                    (node.inputs[1], Tensor::new(b.shape.clone(), db)),
                ]
            }
            Op::Add => vec![
                (node.inputs[0], g.clone()),
                (node.inputs[1], g.clone()),
            ],
            Op::Sub => {
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                vec![(node.inputs[0], g.clone()), (node.inputs[1], neg)]
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let da = g.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
                let db = g.data.iter().zip(&a.data).map(|(&x, &y)| x * y).collect();
                vec![
                    (node.inputs[0], Tensor::new(a.shape.clone(), da)),
                    (node.inputs[1], Tensor::new(b.shape.clone(), db)),
                ]
            }
            Op::AddScalar => vec![(node.inputs[0], g.clone())],
            Op::Scale(c) => {
                let d = g.data.iter().map(|&v| v * c).collect();
                vec![(node.inputs[0], Tensor::new(g.shape.clone(), d))]
            }
            Op::AddBcastRow => {
                let d = inp(1).numel();
                let mut ds = vec![0.0; d];
                for (i, &v) in g.data.iter().enumerate() {
                    ds[i % d] += v;
                }
                vec![
                    (node.inputs[0], g.clone()),
                    (node.inputs[1], Tensor::new(inp(1).shape.clone(), ds)),
                ]
            }
            Op::MulBcastRow => {
                let (x, s) = (inp(0), inp(1));
                let d = s.numel();
                let mut dx = vec![0.0; x.numel()];
                let mut ds = vec![0.0; d];
                for i in 0..x.numel() {
                    dx[i] = g.data[i] * s.data[i % d];
                    ds[i % d] += g.data[i] * x.data[i];
                }
                vec![
                    (node.inputs[0], Tensor::new(x.shape.clone(), dx)),
                    (node.inputs[1], Tensor::new(s.shape.clone(), ds)),
                ]
            }
            Op::ScaleByScalarVar => {
                let (x, s) = (inp(0), inp(1));
                let sv = s.data[0];
                let dx = g.data.iter().map(|&v| v * sv).collect();
                let ds = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| gv * xv)
                    .sum::<f64>();
                vec![
                    (node.inputs[0], Tensor::new(x.shape.clone(), dx)),
                    (node.inputs[1], Tensor::scalar(ds)),
                ]
            }
            Op::LayerNorm { inv_std, .. } => {
                let y = &node.value;
                let d = y.last_dim();
                let rows = y.numel() / d;
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let base = r * d;
                    let gr = &g.data[base..base + d];
                    let yr = &y.data[base..base + d];
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[base + c] = inv_std[r] * (gr[c] - gm - yr[c] * gym);
                    }
                }
                vec![(node.inputs[0], Tensor::new(y.shape.clone(), dx))]
            }
            Op::Gelu => {
                let x = inp(0);
                let dx = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| gv * gelu_df(xv))
                    .collect();
                vec![(node.inputs[0], Tensor::new(x.shape.clone(), dx))]
            }
            Op::SoftmaxMasked => {
                let y = &node.value;
                let d = y.last_dim();
                let rows = y.numel() / d;
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let base = r * d;
                    let dot = (0..d)
                        .map(|c| g.data[base + c] * y.data[base + c])
                        .sum::<f64>();
                    for c in 0..d {
                        dx[base + c] = y.data[base + c] * (g.data[base + c] - dot);
                    }
                }
                vec![(node.inputs[0], Tensor::new(y.shape.clone(), dx))]
            }
            Op::GatherPad { map } => {
                let x = inp(0);
                let mut dx = vec![0.0; x.numel()];
                for (i, &src) in map.iter().enumerate() {
                    if src >= 0 {
                        dx[src as usize] += g.data[i];
                    }
                }
                vec![(node.inputs[0], Tensor::new(x.shape.clone(), dx))]
            }
            Op::Rope { cos, sin } => {
                // Inverse rotation applied to the upstream gradient.
                let mut dx = vec![0.0; g.numel()];
                for p in 0..cos.len() {
                    let (ga, gb) = (g.data[2 * p], g.data[2 * p + 1]);
                    dx[2 * p] = cos[p] * ga + sin[p] * gb;
                    dx[2 * p + 1] = -sin[p] * ga + cos[p] * gb;
                }
                vec![(node.inputs[0], Tensor::new(g.shape.clone(), dx))]
            }
            Op::Abs => {
                let x = inp(0);
                let dx = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| gv * sign0(xv))
                    .collect();
                vec![(node.inputs[0], Tensor::new(x.shape.clone(), dx))]
            }
            Op::LnClamped { floor } => {
                let x = inp(0);
                let dx = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                    .collect();
                vec![(node.inputs[0], Tensor::new(x.shape.clone(), dx))]
            }
            Op::MatvecConst { a } => {
                let mut dx = vec![0.0; a.cols];
                gemm(
                    a.cols,
                    a.rows,
                    1,
                    1.0,
                    &a.data,
                    1,
                    a.cols as isize,
                    &g.data,
                    1,
                    1,
                    0.0,
                    &mut dx,
                    1,
                    1,
                );
                vec![(node.inputs[0], Tensor::new(inp(0).shape.clone(), dx))]
            }
            Op::DotConst { w } => {
                let gs = g.data[0];
                let dx = w.iter().map(|&v| v * gs).collect();
                vec![(node.inputs[0], Tensor::new(inp(0).shape.clone(), dx))]
            }
            Op::Sum => {
                let x = inp(0);
                let gs = g.data[0];
                vec![(
                    node.inputs[0],
                    Tensor::new(x.shape.clone(), vec![gs; x.numel()]),
                )]
            }
            Op::Mean => {
                let x = inp(0);
                let gs = g.data[0] / x.numel() as f64;
                vec![(
                    node.inputs[0],
                    Tensor::new(x.shape.clone(), vec![gs; x.numel()]),
                )]
            }
            Op::Concat => {
                let (a, b) = (inp(0), inp(1));
                let da = Tensor::new(a.shape.clone(), g.data[..a.numel()].to_vec());
                let db = Tensor::new(b.shape.clone(), g.data[a.numel()..].to_vec());
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            Op::FairCrpsVec {
                obs,
                weights,
                normalize,
            } => {
                let s = node.inputs.len();
                let gs = g.data[0];
                let wsum: f64 = if *normalize {
                    weights.iter().sum()
                } else {
                    1.0
                };
                let members: Vec<&[f64]> = node
                    .inputs
                    .iter()
                    .map(|&m| self.nodes[m].value.data.as_slice())
                    .collect();
                let mut out = Vec::with_capacity(s);
                for n in 0..s {
                    let mut d = vec![0.0; obs.len()];
                    for k in 0..obs.len() {
                        if weights[k] == 0.0 {
                            continue;
                        }
                        let xn = members[n][k];
                        let mut pair = 0.0;
                        for (np, m) in members.iter().enumerate() {
                            if np != n {
                                pair += sign0(xn - m[k]);
                            }
                        }
                        let inner = sign0(xn - obs[k]) / s as f64
                            - pair / (s as f64 * (s as f64 - 1.0));
                        d[k] = gs * weights[k] / wsum * inner;
                    }
                    out.push((
                        node.inputs[n],
                        Tensor::new(self.nodes[node.inputs[n]].value.shape.clone(), d),
                    ));
                }
                out
            }
        }
    }
}

/// Fair-CRPS subgradient convention: sign(0) = 0.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_df(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

/// Weighted fair CRPS over a vector of points. Shared by the tape op and
/// the plain scoring path.
pub fn fair_crps_weighted(
    members: &[&[f64]],
    obs: &[f64],
    weights: &[f64],
    normalize: bool,
) -> f64 {
    let s = members.len();
    let mut total = 0.0;
    let mut wsum = 0.0;
    for k in 0..obs.len() {
        let w = weights[k];
        if w == 0.0 {
            continue;
        }
        wsum += w;
        let mut term1 = 0.0;
        for m in members {
            term1 += (m[k] - obs[k]).abs();
        }
        term1 /= s as f64;
        let mut term2 = 0.0;
        for a in 0..s {
            for b in 0..s {
                if a != b {
                    term2 += (members[a][k] - members[b][k]).abs();
                }
            }
        }
        term2 /= 2.0 * s as f64 * (s as f64 - 1.0);
        total += w * (term1 - term2);
    }
    if normalize {
        total / wsum
    } else {
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference of a scalar function of a flat vector.
    fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if (a - n).abs() < 1e-9 {
                continue; // below FD truncation noise
            }
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                ((a - n) / denom).abs() < tol,
                "grad mismatch at {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rng_vals(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic LCG; keeps tests free of RNG crates.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Builds a scalar readout of an op applied to a parameter vector and
    /// compares backward against finite differences.
    fn check_grad(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x0: &[f64],
        shape: Vec<usize>,
        tol: f64,
    ) {
        let eval = |xs: &[f64]| {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(shape.clone(), xs.to_vec()));
            let out = build(&mut g, x);
            let n = g.value(out).numel();
            let w: Vec<f64> = rng_vals(n, 999);
            let r = g.dot_const(Arc::new(w), out);
            g.value(r).data[0]
        };
        let mut g = Graph::new();
        let x = g.param(Tensor::new(shape.clone(), x0.to_vec()));
        let out = build(&mut g, x);
        let n = g.value(out).numel();
        let w: Vec<f64> = rng_vals(n, 999);
        let r = g.dot_const(Arc::new(w), out);
        let grads = g.backward(r);
        let analytic = &grads.get(x).unwrap().data;
        let numeric = numeric_grad(eval, x0, 1e-6);
        assert_close(analytic, &numeric, tol);
    }

    #[test]
    fn linear_grad_matches_fd() {
        let x0 = rng_vals(6, 1);
        check_grad(
            |g, x| {
                let w = g.param(Tensor::new(vec![4, 3], rng_vals(12, 2)));
                let b = g.param(Tensor::new(vec![4], rng_vals(4, 3)));
                g.linear(x, w, b)
            },
            &x0,
            vec![2, 3],
            1e-6,
        );
    }

    #[test]
    fn linear_weight_and_bias_grads_match_fd() {
        let w0 = rng_vals(12, 7);
        let b0 = rng_vals(4, 8);
        let x0 = rng_vals(6, 9);
        let eval_w = |ws: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![2, 3], x0.clone()));
            let w = g.param(Tensor::new(vec![4, 3], ws.to_vec()));
            let b = g.constant(Tensor::new(vec![4], b0.clone()));
            let y = g.linear(x, w, b);
            let r = g.sum(y);
            g.value(r).data[0]
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], x0.clone()));
        let w = g.param(Tensor::new(vec![4, 3], w0.clone()));
        let b = g.param(Tensor::new(vec![4], b0.clone()));
        let y = g.linear(x, w, b);
        let r = g.sum(y);
        let grads = g.backward(r);
        assert_close(
            &grads.get(w).unwrap().data,
            &numeric_grad(eval_w, &w0, 1e-6),
            1e-6,
        );
        // Bias gradient is the column sum of an all-ones upstream.
        assert_eq!(grads.get(b).unwrap().data, vec![2.0; 4]);
    }

    #[test]
    fn bmm_grads_match_fd() {
        let a0 = rng_vals(2 * 3 * 4, 11);
        check_grad(
            |g, a| {
                let b = g.param(Tensor::new(vec![2, 4, 2], rng_vals(16, 12)));
                g.bmm(a, b)
            },
            &a0,
            vec![2, 3, 4],
            1e-6,
        );
    }

    #[test]
    fn bmm_nt_grads_match_fd() {
        let a0 = rng_vals(2 * 3 * 4, 13);
        check_grad(
            |g, a| {
                let b = g.param(Tensor::new(vec![2, 5, 4], rng_vals(40, 14)));
                g.bmm_nt(a, b)
            },
            &a0,
            vec![2, 3, 4],
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_broadcast_grads_match_fd() {
        let x0 = rng_vals(8, 21);
        check_grad(
            |g, x| {
                let y = g.param(Tensor::new(vec![2, 4], rng_vals(8, 22)));
                let m = g.mul(x, y);
                let s = g.param(Tensor::new(vec![4], rng_vals(4, 23)));
                let a = g.mul_bcast_row(m, s);
                let t = g.param(Tensor::new(vec![4], rng_vals(4, 24)));
                let b = g.add_bcast_row(a, t);
                let sc = g.param(Tensor::new(vec![1], vec![0.7]));
                g.scale_by_scalar_var(b, sc)
            },
            &x0,
            vec![2, 4],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grad_matches_fd() {
        let x0 = rng_vals(12, 31);
        check_grad(|g, x| g.layer_norm(x, 1e-6), &x0, vec![3, 4], 1e-5);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        let x0 = rng_vals(10, 41);
        check_grad(|g, x| g.gelu(x), &x0, vec![10], 1e-6);
    }

    #[test]
    fn softmax_masked_grad_matches_fd() {
        let x0 = rng_vals(12, 51);
        let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
        let mask = Arc::new(mask);
        check_grad(
            |g, x| {
                let m = Arc::clone(&mask);
                g.softmax_masked(x, m)
            },
            &x0,
            vec![3, 4],
            1e-5,
        );
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mask = Arc::new(vec![true, true, true, false, false, false]);
        let y = g.softmax_masked(x, mask);
        let v = &g.value(y).data;
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_pad_and_rope_grads_match_fd() {
        let x0 = rng_vals(8, 61);
        let map = Arc::new(vec![3i64, -1, 0, 5, 2, 2, -1, 7, 1, 4]);
        check_grad(
            |g, x| {
                let m = Arc::clone(&map);
                g.gather_pad(x, m, vec![10])
            },
            &x0,
            vec![8],
            1e-6,
        );

        let angles: Vec<f64> = rng_vals(4, 62).iter().map(|v| v * 3.0).collect();
        let cos = Arc::new(angles.iter().map(|a| a.cos()).collect::<Vec<_>>());
        let sin = Arc::new(angles.iter().map(|a| a.sin()).collect::<Vec<_>>());
        check_grad(
            |g, x| {
                let c = Arc::clone(&cos);
                let s = Arc::clone(&sin);
                g.rope(x, c, s)
            },
            &x0,
            vec![2, 4],
            1e-6,
        );
    }

    #[test]
    fn scalar_reductions_and_maps_match_fd() {
        let x0: Vec<f64> = rng_vals(6, 71).iter().map(|v| v + 2.5).collect();
        check_grad(
            |g, x| {
                let l = g.ln_clamped(x, 1e-20);
                let a = g.abs(l);
                let s = g.scale(a, 1.7);
                let t = g.add_scalar(s, 0.3);
                g.mean(t)
            },
            &x0,
            vec![6],
            1e-5,
        );
    }

    #[test]
    fn matvec_const_grad_matches_fd() {
        let x0 = rng_vals(5, 81);
        let a = Arc::new(ConstMatrix::new(3, 5, rng_vals(15, 82)));
        check_grad(
            |g, x| {
                let m = Arc::clone(&a);
                g.matvec_const(m, x)
            },
            &x0,
            vec![5],
            1e-6,
        );
    }

    #[test]
    fn fair_crps_vec_grad_matches_fd_away_from_kinks() {
        // Values spaced away from ties so FD never crosses a kink.
        let m0 = vec![0.4, -1.3, 2.2, 0.9];
        let m1 = vec![-0.8, 0.6, 1.1, -0.2];
        let obs = Arc::new(vec![0.1, -0.4, 1.6, 0.5]);
        let weights = Arc::new(vec![0.1, 0.2, 0.3, 0.4]);
        let eval = |xs: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![4], xs.to_vec()));
            let b = g.constant(Tensor::new(vec![4], m1.clone()));
            let c = g
                .fair_crps_vec(&[a, b], Arc::clone(&obs), Arc::clone(&weights), true)
                .unwrap();
            g.value(c).data[0]
        };
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![4], m0.clone()));
        let b = g.constant(Tensor::new(vec![4], m1.clone()));
        let c = g
            .fair_crps_vec(&[a, b], Arc::clone(&obs), Arc::clone(&weights), true)
            .unwrap();
        let grads = g.backward(c);
        assert_close(
            &grads.get(a).unwrap().data,
            &numeric_grad(eval, &m0, 1e-7),
            1e-5,
        );
    }

    #[test]
    fn repeated_input_accumulates_gradient() {
        // d(x*x)/dx = 2x via two accumulated contributions.
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let y = g.mul(x, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn chained_graph_grad_matches_fd() {
        // A mini two-layer network with layer norm and gelu.
        let x0 = rng_vals(6, 91);
        check_grad(
            |g, x| {
                let w1 = g.param(Tensor::new(vec![5, 3], rng_vals(15, 92)));
                let b1 = g.param(Tensor::new(vec![5], rng_vals(5, 93)));
                let h = g.linear(x, w1, b1);
                let n = g.layer_norm(h, 1e-6);
                let a = g.gelu(n);
                let w2 = g.param(Tensor::new(vec![2, 5], rng_vals(10, 94)));
                let b2 = g.param(Tensor::new(vec![2], rng_vals(2, 95)));
                g.linear(a, w2, b2)
            },
            &x0,
            vec![2, 3],
            1e-5,
        );
    }
}
