//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. Tensors enter
//! either as tracked leaves ([`Graph::leaf`], gradients accumulated) or as
//! constants ([`Graph::constant`], no gradient ever computed — this is how
//! teacher networks and frozen modules are kept outside the gradient flow
//! structurally rather than by masking). [`Graph::backward`] walks the tape
//! in reverse and returns per-node gradients.
//!
//! Shapes are validated with assertions: all public entry points of the
//! crate check dimensions before building a graph, so a shape panic here is
//! a bug, not a user error.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Tensor>>;

/// Everything a backward rule may look at: upstream gradient, parent
/// values, and the node's own forward value.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if any gradient reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. a node, zeros if the node did not influence the loss.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
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
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Tracked input: gradients will be accumulated for this node.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), vec![], true, None)
    }

    /// Untracked input: treated as a constant of the computation.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), vec![], false, None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(&Tensor::scalar(v))
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record `value = op(parents)`. The backward closure is only stored if
    /// some parent is differentiable.
    fn op(&mut self, value: Tensor, parents: Vec<NodeId>, backward: BackwardFn) -> NodeId {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires { Some(backward) } else { None };
        self.push(value, parents, requires, backward)
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.op(
            v,
            vec![a, b],
            Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.clone()]),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.op(
            v,
            vec![a, b],
            Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.scale(-1.0)]),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul_elem(self.value(b));
        self.op(
            v,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.grad.mul_elem(ctx.inputs[1]),
                    ctx.grad.mul_elem(ctx.inputs[0]),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.op(
            v,
            vec![a, b],
            Box::new(|ctx| {
                let da = ctx.grad.zip_map(ctx.inputs[1], |g, y| g / y);
                let db = ctx
                    .grad
                    .zip_map(ctx.inputs[0], |g, x| g * x)
                    .zip_map(ctx.inputs[1], |gx, y| -gx / (y * y));
                vec![da, db]
            }),
        )
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.op(v, vec![a], Box::new(|ctx| vec![ctx.grad.scale(-1.0)]))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.op(v, vec![a], Box::new(|ctx| vec![ctx.grad.clone()]))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.op(v, vec![a], Box::new(move |ctx| vec![ctx.grad.scale(s)]))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.op(
            v,
            vec![a],
            Box::new(|ctx| vec![ctx.grad.zip_map(ctx.output, |g, y| g * y * (1.0 - y))]),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.op(
            v,
            vec![a],
            Box::new(|ctx| vec![ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y))]),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.op(
            v,
            vec![a],
            Box::new(|ctx| vec![ctx.grad.mul_elem(ctx.output)]),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.op(
            v,
            vec![a],
            Box::new(|ctx| vec![ctx.grad.zip_map(ctx.inputs[0], |g, x| g / x)]),
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.op(
            v,
            vec![a],
            Box::new(|ctx| vec![ctx.grad.zip_map(ctx.output, |g, y| g / (2.0 * y))]),
        )
    }

    // ---- matrix ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.op(
            v,
            vec![a, b],
            Box::new(|ctx| {
                let da = ctx.grad.matmul(&ctx.inputs[1].transpose());
                let db = ctx.inputs[0].transpose().matmul(ctx.grad);
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.op(v, vec![a], Box::new(|ctx| vec![ctx.grad.transpose()]))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.op(
            v,
            vec![a],
            Box::new(|ctx| {
                let (r, c) = ctx.inputs[0].shape();
                vec![Tensor::filled(r, c, ctx.grad.scalar_value())]
            }),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Column sums: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        self.op(
            Tensor::from_vec(1, c, out),
            vec![a],
            Box::new(|ctx| {
                let (r, c) = ctx.inputs[0].shape();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    g.row_mut(i).copy_from_slice(ctx.grad.row(0));
                }
                vec![g]
            }),
        )
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.mul_scalar(s, 1.0 / r)
    }

    // ---- broadcasts ------------------------------------------------------------

    /// Repeat a `[1, c]` row `r` times -> `[r, c]`.
    pub fn broadcast_rows(&mut self, a: NodeId, r: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a [1, c] tensor");
        let c = t.cols();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(t.row(0));
        }
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                let c = ctx.inputs[0].cols();
                let mut g = vec![0.0; c];
                for i in 0..ctx.grad.rows() {
                    for (o, &x) in g.iter_mut().zip(ctx.grad.row(i)) {
                        *o += x;
                    }
                }
                vec![Tensor::from_vec(1, c, g)]
            }),
        )
    }

    /// `[r, c] + [1, c]` with the row broadcast down the rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(a).rows();
        let b = self.broadcast_rows(row, r);
        self.add(a, b)
    }

    /// `[r, c] * [1, c]` elementwise with broadcast.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(a).rows();
        let b = self.broadcast_rows(row, r);
        self.mul(a, b)
    }

    /// `[r, c] / [1, c]` elementwise with broadcast.
    pub fn div_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(a).rows();
        let b = self.broadcast_rows(row, r);
        self.div(a, b)
    }

    /// `[r, c] * [r, 1]` with the column broadcast across the columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (r, c) = self.value(a).shape();
        let cv = self.value(col);
        assert_eq!(cv.shape(), (r, 1), "mul_col expects [r, 1]");
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let s = cv.get(i, 0);
            let src = self.value(a).row(i);
            for (o, &x) in out.row_mut(i).iter_mut().zip(src) {
                *o = x * s;
            }
        }
        self.op(
            out,
            vec![a, col],
            Box::new(|ctx| {
                let (r, c) = ctx.inputs[0].shape();
                let mut da = Tensor::zeros(r, c);
                let mut dcol = Tensor::zeros(r, 1);
                for i in 0..r {
                    let s = ctx.inputs[1].get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..c {
                        da.set(i, j, ctx.grad.get(i, j) * s);
                        acc += ctx.grad.get(i, j) * ctx.inputs[0].get(i, j);
                    }
                    dcol.set(i, 0, acc);
                }
                vec![da, dcol]
            }),
        )
    }

    // ---- softmax family ----------------------------------------------------------

    /// Row-wise softmax (stabilized by the row max).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.row_mut(i) {
                *o /= z;
            }
        }
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                // dx = y ⊙ (g − <g, y> per row)
                let (r, c) = ctx.output.shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let y = ctx.output.row(i);
                    let g = ctx.grad.row(i);
                    let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx.set(i, j, y[j] * (g[j] - dot));
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                // dx = g − softmax(x) · rowsum(g)
                let (r, c) = ctx.output.shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let gsum: f64 = ctx.grad.row(i).iter().sum();
                    for j in 0..c {
                        let sm = ctx.output.get(i, j).exp();
                        dx.set(i, j, ctx.grad.get(i, j) - sm * gsum);
                    }
                }
                vec![dx]
            }),
        )
    }

    // ---- slicing and concatenation --------------------------------------------------

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        assert!(lo < hi && hi <= c, "slice_cols range out of bounds");
        let mut out = Tensor::zeros(r, hi - lo);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&t.row(i)[lo..hi]);
        }
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let (r, c) = ctx.inputs[0].shape();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    g.row_mut(i)[lo..hi].copy_from_slice(ctx.grad.row(i));
                }
                vec![g]
            }),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        assert!(lo < hi && hi <= r, "slice_rows range out of bounds");
        let mut out = Tensor::zeros(hi - lo, c);
        for i in lo..hi {
            out.row_mut(i - lo).copy_from_slice(t.row(i));
        }
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let (r, c) = ctx.inputs[0].shape();
                let mut g = Tensor::zeros(r, c);
                for i in lo..hi {
                    g.row_mut(i).copy_from_slice(ctx.grad.row(i - lo));
                }
                vec![g]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        self.op(
            out,
            parts.to_vec(),
            Box::new(move |ctx| {
                let r = ctx.grad.rows();
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut g = Tensor::zeros(r, w);
                    for i in 0..r {
                        g.row_mut(i).copy_from_slice(&ctx.grad.row(i)[off..off + w]);
                    }
                    grads.push(g);
                    off += w;
                }
                grads
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let heights: Vec<usize> = parts.iter().map(|&p| self.value(p).rows()).collect();
        let total: usize = heights.iter().sum();
        let mut out = Tensor::zeros(total, c);
        let mut off = 0;
        for (&p, &h) in parts.iter().zip(&heights) {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows col mismatch");
            for i in 0..h {
                out.row_mut(off + i).copy_from_slice(t.row(i));
            }
            off += h;
        }
        self.op(
            out,
            parts.to_vec(),
            Box::new(move |ctx| {
                let c = ctx.grad.cols();
                let mut grads = Vec::with_capacity(heights.len());
                let mut off = 0;
                for &h in &heights {
                    let mut g = Tensor::zeros(h, c);
                    for i in 0..h {
                        g.row_mut(i).copy_from_slice(ctx.grad.row(off + i));
                    }
                    grads.push(g);
                    off += h;
                }
                grads
            }),
        )
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse pass from a scalar `[1, 1]` root. Returns gradients for every
    /// node that both influenced the root and had `requires_grad` ancestry.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].clone() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_scaled(&pg, 1.0),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}
