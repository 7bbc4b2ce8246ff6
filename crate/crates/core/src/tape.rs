//! Reverse-mode differentiation over ndarray tensors.
//!
//! A [`Tape`] is an append-only record of forward operations. Every op stores
//! its output value, its parent node ids, and a closure implementing the
//! adjoint rule. [`Tape::backward`] walks the record once in reverse
//! topological order (which is simply reverse insertion order) and
//! accumulates gradients into every node; leaves created with [`Tape::leaf`]
//! are where parameter gradients are read back from. Nodes created with
//! [`Tape::constant`] take part in forward values but block gradient flow.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct BackwardCtx<'a> {
    grad: &'a ArrayD<f64>,
    out: &'a ArrayD<f64>,
    parents: Vec<&'a ArrayD<f64>>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, or `None` if the node is not on
    /// any path to the loss (its gradient is identically zero).
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "expected scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> TensorId {
        self.nodes.push(Node {
            // Keep node values in standard layout so reshapes and slice
            // reads never trip over transposed/broadcast strides.
            value: standard_layout(value),
            parents,
            backward,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, vec![], None)
    }

    /// Non-differentiable input (data, geometry). Gradient flow stops here.
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, vec![], None)
    }

    pub fn constant_2d(&mut self, value: ndarray::Array2<f64>) -> TensorId {
        self.constant(value.into_dyn())
    }

    pub fn leaf_2d(&mut self, value: ndarray::Array2<f64>) -> TensorId {
        self.leaf(value.into_dyn())
    }

    // ----- elementwise unary -------------------------------------------------

    fn unary<F, G>(&mut self, a: TensorId, f: F, df: G) -> TensorId
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + 'static, // (input, output) -> d out/d in
    {
        let value = self.nodes[a.0].value.mapv(&f);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gv, &x| {
                    *gv *= df(x, 0.0);
                });
                // df may need the output; recompute via second zip when used.
                vec![g]
            })),
        )
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= y);
                vec![g]
            })),
        )
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= 0.5 / y);
                vec![g]
            })),
        )
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(f64::recip);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= -y * y);
                vec![g]
            })),
        )
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::cos, |x, _| -x.sin())
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.out, |gv, &y| *gv *= 1.0 - y * y);
                vec![g]
            })),
        )
    }

    /// Numerically stable ln(1 + e^x); derivative is the logistic sigmoid.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.unary(
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamp with pass-through gradient inside [lo, hi] and zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    // ----- elementwise binary ------------------------------------------------

    fn same_shape(&self, a: TensorId, b: TensorId) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "shape mismatch"
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b);
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.clone()])),
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b);
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.mapv(|g| -g)])),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b);
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx| {
                vec![ctx.grad * ctx.parents[1], ctx.grad * ctx.parents[0]]
            })),
        )
    }

    // ----- matrix ops ---------------------------------------------------------

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose needs 2-D")
            .t()
            .to_owned()
            .into_dyn();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.t().to_owned().into_dyn()]
            })),
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|ctx| {
                let shape = ctx.parents[0].raw_dim();
                vec![ctx.grad.clone().into_shape_with_order(shape).unwrap()]
            })),
        )
    }

    /// Adds a row vector [n] to every row of [m,n].
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let rv = self.nodes[row.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.ncols(), rv.len());
        let value = (&av + &rv).into_dyn();
        self.push(
            value,
            vec![a.0, row.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                vec![ctx.grad.clone(), g.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Scales row i of [m,n] by v[i].
    pub fn scale_rows(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.nrows(), vv.len());
        let value = (&av * &vv.view().insert_axis(Axis(1))).into_dyn();
        self.push(
            value,
            vec![a.0, v.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let v = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let ga = (&g * &v.insert_axis(Axis(1))).into_dyn();
                let gv = (&g * &a).sum_axis(Axis(1)).into_dyn();
                vec![ga, gv]
            })),
        )
    }

    /// Scales column j of [m,n] by v[j].
    pub fn scale_cols(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.ncols(), vv.len());
        let value = (&av * &vv).into_dyn();
        self.push(
            value,
            vec![a.0, v.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let v = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let ga = (&g * &v).into_dyn();
                let gv = (&g * &a).sum_axis(Axis(0)).into_dyn();
                vec![ga, gv]
            })),
        )
    }

    /// Sums over one axis, dropping it.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let value = self.nodes[a.0].value.sum_axis(Axis(axis));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let shape = ctx.parents[0].raw_dim();
                let expanded = ctx.grad.clone().insert_axis(Axis(axis));
                vec![expanded.broadcast(shape).unwrap().to_owned()]
            })),
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].value.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad[[0]];
                vec![ArrayD::from_elem(ctx.parents[0].raw_dim(), g)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Concatenates 2-D blocks along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                self.nodes[p.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
            })
            .collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let value = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    out.push(g.slice(ndarray::s![.., start..start + w]).to_owned().into_dyn());
                    start += w;
                }
                out
            })),
        )
    }

    /// Column slice [start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let value = av.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let shape = ctx.parents[0].raw_dim();
                let mut out = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                out.slice_mut(ndarray::s![.., start..end]).assign(&g);
                vec![out.into_dyn()]
            })),
        )
    }

    /// Exclusive prefix sum along axis 1 of [m,n]: out[i,j] = sum_{k<j} a[i,k].
    pub fn cumsum_exclusive(&mut self, a: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (m, n) = av.dim();
        let mut value = ndarray::Array2::<f64>::zeros((m, n));
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                value[[i, j]] = acc;
                acc += av[[i, j]];
            }
        }
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(|ctx| {
                // Adjoint: g_a[i,j] = sum_{k>j} g[i,k].
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let (m, n) = g.dim();
                let mut out = ndarray::Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        out[[i, j]] = acc;
                        acc += g[[i, j]];
                    }
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Row lookup: out[s, :] = table[idx[s], :]. Adjoint scatter-adds.
    pub fn gather_rows(&mut self, table: TensorId, idx: Vec<usize>) -> TensorId {
        let tv = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((idx.len(), tv.ncols()));
        for (s, &i) in idx.iter().enumerate() {
            value.row_mut(s).assign(&tv.row(i));
        }
        self.push(
            value.into_dyn(),
            vec![table.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let shape = ctx.parents[0].raw_dim();
                let mut out = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                for (s, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g.row(s);
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Trilinear corner blend: out[s,:] = sum_c weights[s][c] * table[rows[s][c],:].
    /// The corner weights come from the sample geometry and are constant.
    pub fn trilinear_gather(
        &mut self,
        table: TensorId,
        rows: Vec<[usize; 8]>,
        weights: Vec<[f64; 8]>,
    ) -> TensorId {
        assert_eq!(rows.len(), weights.len());
        let tv = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((rows.len(), tv.ncols()));
        for s in 0..rows.len() {
            let mut out_row = value.row_mut(s);
            for c in 0..8 {
                out_row.scaled_add(weights[s][c], &tv.row(rows[s][c]));
            }
        }
        self.push(
            value.into_dyn(),
            vec![table.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let shape = ctx.parents[0].raw_dim();
                let mut out = ndarray::Array2::<f64>::zeros((shape[0], shape[1]));
                for s in 0..rows.len() {
                    let grow = g.row(s);
                    for c in 0..8 {
                        let mut trow = out.row_mut(rows[s][c]);
                        trow.scaled_add(weights[s][c], &grow);
                    }
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Scatters rows of [s,k] into a [total,k] tensor at the given row
    /// indices; unassigned rows are filled with `default` (a constant, so no
    /// gradient flows to them).
    pub fn scatter_rows(
        &mut self,
        src: TensorId,
        idx: Vec<usize>,
        total: usize,
        default: f64,
    ) -> TensorId {
        let sv = self.nodes[src.0].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(sv.nrows(), idx.len());
        let mut value = ndarray::Array2::<f64>::from_elem((total, sv.ncols()), default);
        for (s, &i) in idx.iter().enumerate() {
            value.row_mut(i).assign(&sv.row(s));
        }
        self.push(
            value.into_dyn(),
            vec![src.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = ndarray::Array2::<f64>::zeros((idx.len(), g.ncols()));
                for (s, &i) in idx.iter().enumerate() {
                    out.row_mut(s).assign(&g.row(i));
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Stride-1 2-D convolution with symmetric zero padding:
    /// input [c_in, h, w], kernel [c_out, c_in, kh, kw] -> [c_out, h, w].
    /// Kernel sides must be odd.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId) -> TensorId {
        let x = self.nodes[input.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let k = self.nodes[kernel.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let value = conv2d_forward(&x, &k).into_dyn();
        self.push(
            value,
            vec![input.0, kernel.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let x = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let k = ctx.parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let (gx, gk) = conv2d_backward(&x, &k, &g);
                vec![gx.into_dyn(), gk.into_dyn()]
            })),
        )
    }

    /// Scales channel c of [c,h,w] by v[c].
    pub fn scale_chan(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.dim().0, vv.len());
        let mut value = av.to_owned();
        for (mut chan, &s) in value.outer_iter_mut().zip(vv.iter()) {
            chan *= s;
        }
        self.push(
            value.into_dyn(),
            vec![a.0, v.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let a = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let v = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let mut ga = g.to_owned();
                for (mut chan, &s) in ga.outer_iter_mut().zip(v.iter()) {
                    chan *= s;
                }
                let mut gv = ndarray::Array1::<f64>::zeros(v.len());
                for (c, (gc, ac)) in g.outer_iter().zip(a.outer_iter()).enumerate() {
                    gv[c] = (&gc * &ac).sum();
                }
                vec![ga.into_dyn(), gv.into_dyn()]
            })),
        )
    }

    /// Adds v[c] to every element of channel c of [c,h,w].
    pub fn add_chan(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.dim().0, vv.len());
        let mut value = av.to_owned();
        for (mut chan, &s) in value.outer_iter_mut().zip(vv.iter()) {
            chan += s;
        }
        self.push(
            value.into_dyn(),
            vec![a.0, v.0],
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut gv = ndarray::Array1::<f64>::zeros(g.dim().0);
                for (c, gc) in g.outer_iter().enumerate() {
                    gv[c] = gc.sum();
                }
                vec![ctx.grad.clone(), gv.into_dyn()]
            })),
        )
    }

    // ----- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Nodes off the active path keep a
    /// `None` gradient (identically zero).
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let ctx = BackwardCtx {
                    grad: &grad,
                    out: &node.value,
                    parents: node
                        .parents
                        .iter()
                        .map(|&p| &self.nodes[p].value)
                        .collect(),
                };
                let parent_grads = backward(&ctx);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let pg = standard_layout(pg);
                    match &mut grads[p] {
                        Some(existing) => *existing += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }
}

fn standard_layout(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn conv2d_forward(
    x: &ndarray::ArrayView3<'_, f64>,
    k: &ndarray::ArrayView4<'_, f64>,
) -> ndarray::Array3<f64> {
    let (c_in, h, w) = x.dim();
    let (c_out, kc_in, kh, kw) = k.dim();
    assert_eq!(c_in, kc_in, "conv2d channel mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernels must be odd");
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = ndarray::Array3::<f64>::zeros((c_out, h, w));
    for co in 0..c_out {
        for ci in 0..c_in {
            let xi = x.index_axis(Axis(0), ci);
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = k[[co, ci, dy, dx]];
                    if kv == 0.0 {
                        continue;
                    }
                    let oy = dy as isize - ph;
                    let ox = dx as isize - pw;
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xpos in 0..w as isize {
                            let sx = xpos + ox;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[[co, y as usize, xpos as usize]] +=
                                kv * xi[[sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &ndarray::ArrayView3<'_, f64>,
    k: &ndarray::ArrayView4<'_, f64>,
    g: &ndarray::ArrayView3<'_, f64>,
) -> (ndarray::Array3<f64>, ndarray::Array4<f64>) {
    let (c_in, h, w) = x.dim();
    let (c_out, _, kh, kw) = k.dim();
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut gx = ndarray::Array3::<f64>::zeros((c_in, h, w));
    let mut gk = ndarray::Array4::<f64>::zeros(k.raw_dim());
    for co in 0..c_out {
        let gc = g.index_axis(Axis(0), co);
        for ci in 0..c_in {
            let xi = x.index_axis(Axis(0), ci);
            for dy in 0..kh {
                for dx in 0..kw {
                    let oy = dy as isize - ph;
                    let ox = dx as isize - pw;
                    let kv = k[[co, ci, dy, dx]];
                    let mut kgrad = 0.0;
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xpos in 0..w as isize {
                            let sx = xpos + ox;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let gval = gc[[y as usize, xpos as usize]];
                            kgrad += gval * xi[[sy as usize, sx as usize]];
                            gx[[ci, sy as usize, sx as usize]] += gval * kv;
                        }
                    }
                    gk[[co, ci, dy, dx]] += kgrad;
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d loss / d leaf for every entry of
    /// the leaf, where the graph is rebuilt from scratch for each evaluation.
    fn fd_check<F>(leaf_value: ArrayD<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, TensorId) -> TensorId,
    {
        let h = 1e-6;
        let analytic = {
            let mut tape = Tape::new();
            let leaf = tape.leaf(leaf_value.clone());
            let out = build(&mut tape, leaf);
            let loss = tape.sum_all(out);
            let grads = tape.backward(loss);
            grads.get(leaf).cloned().unwrap_or_else(|| {
                ArrayD::zeros(leaf_value.raw_dim())
            })
        };
        let eval = |v: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(v.clone());
            let out = build(&mut tape, leaf);
            let loss = tape.sum_all(out);
            tape.scalar_value(loss)
        };
        let mut v = leaf_value.clone();
        for idx in 0..v.len() {
            let orig = v.as_slice_mut().unwrap()[idx];
            v.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = eval(&v);
            v.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = eval(&v);
            v.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let scale = an.abs().max(fd.abs()).max(1.0);
            assert!(
                (fd - an).abs() / scale < tol,
                "index {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unary_op_adjoints() {
        let x = rand_arr(&[3, 4], 1).mapv(|v| v * 0.8 + 1.5); // keep away from kinks/zeros
        fd_check(x.clone(), |t, a| t.exp(a), 1e-6);
        fd_check(x.clone(), |t, a| t.sqrt(a), 1e-6);
        fd_check(x.clone(), |t, a| t.recip(a), 1e-6);
        fd_check(x.clone(), |t, a| t.square(a), 1e-6);
        fd_check(x.clone(), |t, a| t.sin(a), 1e-6);
        fd_check(x.clone(), |t, a| t.cos(a), 1e-6);
        fd_check(x.clone(), |t, a| t.tanh(a), 1e-6);
        fd_check(x.clone(), |t, a| t.softplus(a), 1e-6);
        fd_check(x.clone(), |t, a| t.neg(a), 1e-6);
        fd_check(x.clone(), |t, a| t.mul_scalar(a, -2.5), 1e-6);
        fd_check(x, |t, a| t.add_scalar(a, 0.7), 1e-6);
    }

    #[test]
    fn kinked_op_adjoints_away_from_kinks() {
        let x = rand_arr(&[3, 4], 2).mapv(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        fd_check(x.clone(), |t, a| t.leaky_relu(a, 0.2), 1e-6);
        fd_check(x.clone(), |t, a| t.abs(a), 1e-6);
        fd_check(x, |t, a| t.clamp(a, -0.5, 0.5), 1e-6);
    }

    #[test]
    fn clamp_subgradient_convention() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(arr1(&[2.0, -3.0, 0.5]).into_dyn());
        let clamped = tape.clamp(leaf, -1.0, 1.0);
        assert_eq!(
            tape.value(clamped).as_slice().unwrap(),
            &[1.0, -1.0, 0.5]
        );
        let loss = tape.sum_all(clamped);
        let grads = tape.backward(loss);
        assert_eq!(
            grads.get(leaf).unwrap().as_slice().unwrap(),
            &[0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn binary_op_adjoints() {
        let x = rand_arr(&[3, 4], 3);
        let y = rand_arr(&[3, 4], 4);
        for op in 0..3usize {
            let yc = y.clone();
            fd_check(
                x.clone(),
                move |t, a| {
                    let b = t.constant(yc.clone());
                    match op {
                        0 => t.add(a, b),
                        1 => t.sub(a, b),
                        _ => t.mul(a, b),
                    }
                },
                1e-6,
            );
        }
        // Gradient through the second operand of mul.
        let xc = x.clone();
        fd_check(
            y,
            move |t, b| {
                let a = t.constant(xc.clone());
                t.mul(a, b)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_adjoints_both_sides() {
        let a = rand_arr(&[3, 5], 5);
        let b = rand_arr(&[5, 2], 6);
        let bc = b.clone();
        fd_check(
            a.clone(),
            move |t, l| {
                let r = t.constant(bc.clone());
                t.matmul(l, r)
            },
            1e-6,
        );
        let ac = a;
        fd_check(
            b,
            move |t, r| {
                let l = t.constant(ac.clone());
                t.matmul(l, r)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_op_adjoints() {
        let x = rand_arr(&[4, 6], 7);
        fd_check(x.clone(), |t, a| t.transpose(a), 1e-6);
        fd_check(x.clone(), |t, a| t.reshape(a, &[2, 12]), 1e-6);
        fd_check(x.clone(), |t, a| t.slice_cols(a, 1, 4), 1e-6);
        fd_check(x.clone(), |t, a| t.sum_axis(a, 0), 1e-6);
        fd_check(x.clone(), |t, a| t.sum_axis(a, 1), 1e-6);
        fd_check(x.clone(), |t, a| t.cumsum_exclusive(a), 1e-6);
        fd_check(
            x.clone(),
            |t, a| {
                let b = t.slice_cols(a, 0, 2);
                let c = t.slice_cols(a, 2, 6);
                t.concat_cols(&[b, c])
            },
            1e-6,
        );
        let v = rand_arr(&[6], 8);
        let vc = v.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let row = t.constant(vc.clone());
                t.add_row(a, row)
            },
            1e-6,
        );
        let xc = x.clone();
        fd_check(
            v,
            move |t, row| {
                let a = t.constant(xc.clone());
                t.add_row(a, row)
            },
            1e-6,
        );
    }

    #[test]
    fn scaling_op_adjoints() {
        let x = rand_arr(&[4, 6], 9);
        let vr = rand_arr(&[4], 10);
        let vcx = rand_arr(&[6], 11);
        let v1 = vr.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let v = t.constant(v1.clone());
                t.scale_rows(a, v)
            },
            1e-6,
        );
        let xc = x.clone();
        fd_check(
            vr,
            move |t, v| {
                let a = t.constant(xc.clone());
                t.scale_rows(a, v)
            },
            1e-6,
        );
        let v2 = vcx.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let v = t.constant(v2.clone());
                t.scale_cols(a, v)
            },
            1e-6,
        );
        let xc2 = x;
        fd_check(
            vcx,
            move |t, v| {
                let a = t.constant(xc2.clone());
                t.scale_cols(a, v)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_adjoints() {
        let table = rand_arr(&[5, 3], 12);
        fd_check(
            table.clone(),
            |t, tab| t.gather_rows(tab, vec![0, 2, 2, 4]),
            1e-6,
        );
        let rows = vec![[0usize, 1, 2, 3, 4, 0, 1, 2], [4, 4, 3, 3, 2, 2, 1, 1]];
        let weights = vec![
            [0.1, 0.2, 0.05, 0.15, 0.1, 0.1, 0.2, 0.1],
            [0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
        ];
        fd_check(
            table,
            move |t, tab| t.trilinear_gather(tab, rows.clone(), weights.clone()),
            1e-6,
        );
        let src = rand_arr(&[3, 2], 13);
        fd_check(
            src,
            |t, s| t.scatter_rows(s, vec![1, 3, 4], 6, 0.5),
            1e-6,
        );
    }

    #[test]
    fn channel_op_adjoints() {
        let x = rand_arr(&[3, 4, 5], 14);
        let v = rand_arr(&[3], 15);
        let v1 = v.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let s = t.constant(v1.clone());
                t.scale_chan(a, s)
            },
            1e-6,
        );
        let xc = x.clone();
        fd_check(
            v.clone(),
            move |t, s| {
                let a = t.constant(xc.clone());
                t.scale_chan(a, s)
            },
            1e-6,
        );
        let v2 = v.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let s = t.constant(v2.clone());
                t.add_chan(a, s)
            },
            1e-6,
        );
        let xc2 = x;
        fd_check(
            v,
            move |t, s| {
                let a = t.constant(xc2.clone());
                t.add_chan(a, s)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_adjoints() {
        let x = rand_arr(&[2, 5, 6], 16);
        let k = rand_arr(&[3, 2, 3, 3], 17);
        let kc = k.clone();
        fd_check(
            x.clone(),
            move |t, a| {
                let kern = t.constant(kc.clone());
                t.conv2d(a, kern)
            },
            1e-6,
        );
        let xc = x;
        fd_check(
            k,
            move |t, kern| {
                let a = t.constant(xc.clone());
                t.conv2d(a, kern)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xp)| (y * 4 + xp) as f64);
        let mut k = Array4::<f64>::zeros((1, 1, 3, 3));
        k[[0, 0, 1, 1]] = 1.0;
        let out = conv2d_forward(&x.view(), &k.view());
        assert_eq!(out, x);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, -2.0], [3.0, 0.5]]).into_dyn());
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let unused = tape.leaf(arr1(&[5.0]).into_dyn());
        let sq = tape.square(x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x + 3x) -> grad = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(arr1(&[2.0, -1.0]).into_dyn());
        let sq = tape.mul(x, x);
        let three_x = tape.mul_scalar(x, 3.0);
        let sum = tape.add(sq, three_x);
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[7.0, 1.0]);
    }
}
