//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass in execution order;
//! [`Tape::backward`] replays the records in reverse, accumulating gradients
//! additively into every leaf created with [`Tape::var`] or [`Tape::param`].
//! Repeated backward calls keep accumulating until the tape is dropped;
//! parameter stores are zeroed explicitly by the caller between steps.
//!
//! A tape and its tensors belong to one thread for the duration of a
//! forward/backward pass; independent tapes may run on different threads.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Scalar, Tensor};

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value that drives attention logits to zero probability
/// without producing non-finite intermediates.
pub const MASKED_LOGIT: f64 = -1e30;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorRef(usize);

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    tracked: bool,
    leaf_grad: bool,
}

pub(crate) struct GradSink<S> {
    bufs: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradSink<S> {
    fn accum(&mut self, idx: usize, len: usize) -> &mut [S] {
        self.bufs[idx]
            .get_or_insert_with(|| vec![S::zero(); len])
            .as_mut_slice()
    }
}

type BackFn<S> = Box<dyn Fn(&[Node<S>], &[S], &mut GradSink<S>)>;

struct Rec<S> {
    out: usize,
    back: BackFn<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    recs: Vec<Rec<S>>,
    accum: Vec<Option<Vec<S>>>,
    param_links: Vec<(ParamId, usize)>,
    staged: Vec<Option<TensorRef>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recs: Vec::new(),
            accum: Vec::new(),
            param_links: Vec::new(),
            staged: Vec::new(),
        }
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<S>, tracked: bool) -> usize {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, tracked, leaf_grad: false });
        self.nodes.len() - 1
    }

    fn push_rec(&mut self, out: usize, back: BackFn<S>) {
        self.recs.push(Rec { out, back });
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn value(&mut self, t: Tensor<S>) -> TensorRef {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        TensorRef(self.push_node(shape, data, false))
    }

    /// Differentiable leaf; its gradient is queryable via [`Tape::grad_of`].
    pub fn var(&mut self, t: Tensor<S>) -> TensorRef {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        let idx = self.push_node(shape, data, true);
        self.nodes[idx].leaf_grad = true;
        TensorRef(idx)
    }

    /// Stage a stored parameter. Staging the same id twice on one tape
    /// returns the same leaf, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> TensorRef {
        if self.staged.len() <= id.0 {
            self.staged.resize(id.0 + 1, None);
        }
        if let Some(r) = self.staged[id.0] {
            return r;
        }
        let item = store.get(id);
        let r = self.var(item.value.clone());
        self.staged[id.0] = Some(r);
        self.param_links.push((id, r.0));
        r
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn data(&self, r: TensorRef) -> &[S] {
        &self.nodes[r.0].data
    }

    pub fn tensor(&self, r: TensorRef) -> Tensor<S> {
        Tensor::from_vec(self.nodes[r.0].shape.clone(), self.nodes[r.0].data.clone())
            .expect("node is well-formed")
    }

    pub fn scalar_value(&self, r: TensorRef) -> S {
        debug_assert_eq!(numel(&self.nodes[r.0].shape), 1);
        self.nodes[r.0].data[0]
    }

    fn tracked(&self, r: TensorRef) -> bool {
        self.nodes[r.0].tracked
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Accumulated gradient of a differentiable leaf, if any backward pass
    /// has reached it.
    pub fn grad_of(&self, r: TensorRef) -> Option<&[S]> {
        self.accum.get(r.0).and_then(|g| g.as_deref())
    }

    /// Add every accumulated parameter gradient into the store.
    pub fn apply_param_grads(&self, store: &mut ParamStore<S>) {
        for &(id, idx) in &self.param_links {
            if let Some(g) = self.accum.get(idx).and_then(|g| g.as_ref()) {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }

    /// Reverse pass from a scalar root. Gradients of leaves accumulate
    /// additively across calls.
    pub fn backward(&mut self, root: TensorRef) -> Result<()> {
        if numel(&self.nodes[root.0].shape) != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut sink = GradSink { bufs: vec![None; self.nodes.len()] };
        sink.bufs[root.0] = Some(vec![S::one()]);
        for rec in self.recs.iter().rev() {
            let Some(gout) = sink.bufs[rec.out].take() else { continue };
            (rec.back)(&self.nodes, &gout, &mut sink);
            sink.bufs[rec.out] = Some(gout);
        }
        if self.accum.len() < self.nodes.len() {
            self.accum.resize(self.nodes.len(), None);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.leaf_grad {
                continue;
            }
            if let Some(g) = &sink.bufs[i] {
                let acc = self.accum[i].get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    // ── Elementwise and broadcast arithmetic ────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("add", a, b, |x, y| x + y, |_x, _y| (S::one(), S::one()))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("sub", a, b, |x, y| x - y, |_x, _y| (S::one(), -S::one()))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip_op("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn zip_op(
        &mut self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(S, S) -> S,
        df: impl Fn(S, S) -> (S, S) + 'static,
    ) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<S> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let out = self.push_node(self.nodes[a.0].shape.clone(), data, tracked);
        if tracked {
            let (ai, bi) = (a.0, b.0);
            let (ta, tb) = (self.tracked(a), self.tracked(b));
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    if ta {
                        let bv = nodes[bi].data.clone();
                        let av = &nodes[ai].data;
                        let da = sink.accum(ai, gout.len());
                        for i in 0..gout.len() {
                            da[i] += gout[i] * df(av[i], bv[i]).0;
                        }
                    }
                    if tb {
                        let av = nodes[ai].data.clone();
                        let bv = &nodes[bi].data;
                        let db = sink.accum(bi, gout.len());
                        for i in 0..gout.len() {
                            db[i] += gout[i] * df(av[i], bv[i]).1;
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorRef, c: S) -> TensorRef {
        let data: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        let tracked = self.tracked(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let dx = sink.accum(xi, nodes[xi].data.len());
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d += g * c;
                    }
                }),
            );
        }
        TensorRef(out)
    }

    /// Broadcast-add a length-C row vector over every row of an R×C matrix.
    pub fn add_row(&mut self, mat: TensorRef, row: TensorRef) -> Result<TensorRef> {
        let (ms, rs) = (self.shape(mat), self.shape(row));
        if ms.len() != 2 || rs.len() != 1 || ms[1] != rs[0] {
            return Err(Error::shape("add_row", format!("{ms:?} vs {rs:?}")));
        }
        let (r, c) = (ms[0], ms[1]);
        let mut data = self.data(mat).to_vec();
        let rowd = self.data(row);
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowd[j];
            }
        }
        let tracked = self.tracked(mat) || self.tracked(row);
        let out = self.push_node(vec![r, c], data, tracked);
        if tracked {
            let (mi, ri) = (mat.0, row.0);
            let (tm, tr) = (self.tracked(mat), self.tracked(row));
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    if tm {
                        let dm = sink.accum(mi, r * c);
                        for (d, &g) in dm.iter_mut().zip(gout) {
                            *d += g;
                        }
                    }
                    if tr {
                        let dr = sink.accum(ri, c);
                        for i in 0..r {
                            for j in 0..c {
                                dr[j] += gout[i * c + j];
                            }
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        mm_nn_acc(self.data(a), self.data(b), m, k, n, &mut data);
        let tracked = self.tracked(a) || self.tracked(b);
        let out = self.push_node(vec![m, n], data, tracked);
        if tracked {
            let (ai, bi) = (a.0, b.0);
            let (ta, tb) = (self.tracked(a), self.tracked(b));
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    if ta {
                        // dA = dC · Bᵀ
                        let bd = &nodes[bi].data;
                        let gslice = gout;
                        let da = sink.accum(ai, m * k);
                        mm_nt_acc(gslice, bd, m, n, k, da);
                    }
                    if tb {
                        // dB = Aᵀ · dC
                        let ad = &nodes[ai].data;
                        let db = sink.accum(bi, k * n);
                        mm_tn_acc(ad, gout, k, m, n, db);
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![c, r], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gout[j * r + i];
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Concatenate two matrices along the last (column) dimension.
    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", format!("{sa:?} vs {sb:?}")));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        let out = self.push_node(vec![r, ca + cb], data, tracked);
        if tracked {
            let (ai, bi) = (a.0, b.0);
            let (ta, tb) = (self.tracked(a), self.tracked(b));
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let c = ca + cb;
                    if ta {
                        let da = sink.accum(ai, r * ca);
                        for i in 0..r {
                            for j in 0..ca {
                                da[i * ca + j] += gout[i * c + j];
                            }
                        }
                    }
                    if tb {
                        let db = sink.accum(bi, r * cb);
                        for i in 0..r {
                            for j in 0..cb {
                                db[i * cb + j] += gout[i * c + ca + j];
                            }
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Row slice `[start, start+len)` of an R×C matrix.
    pub fn slice_rows(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(x);
        let out = self.push_node(vec![len, c], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, r * c);
                    for (d, &g) in dx[start * c..(start + len) * c].iter_mut().zip(gout) {
                        *d += g;
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Column slice `[start, start+len)` of an R×C matrix.
    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {s:?}", start + len),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![r, len], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, r * c);
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += gout[i * len + j];
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        if numel(&shape) != self.data(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        let tracked = self.tracked(x);
        let out = self.push_node(shape, data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let dx = sink.accum(xi, nodes[xi].data.len());
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d += g;
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// View a C×H×W map as an (H·W)×C matrix of per-position feature rows.
    pub fn flatten_chw(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("flatten_chw", format!("expected 3-d, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let m = h * w;
        let xd = self.data(x);
        let mut data = vec![S::zero(); m * c];
        for ci in 0..c {
            for p in 0..m {
                data[p * c + ci] = xd[ci * m + p];
            }
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![m, c], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, c * m);
                    for ci in 0..c {
                        for p in 0..m {
                            dx[ci * m + p] += gout[p * c + ci];
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Inverse of [`Tape::flatten_chw`]: (H·W)×C rows back to a C×H×W map.
    pub fn rows_to_chw(&mut self, x: TensorRef, h: usize, w: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::shape("rows_to_chw", format!("{s:?} vs {h}x{w} positions")));
        }
        let (m, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut data = vec![S::zero(); c * m];
        for p in 0..m {
            for ci in 0..c {
                data[ci * m + p] = xd[p * c + ci];
            }
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![c, h, w], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, m * c);
                    for p in 0..m {
                        for ci in 0..c {
                            dx[p * c + ci] += gout[ci * m + p];
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// Direct 2-d cross-correlation with per-output-channel bias.
    ///
    /// `x`: C_in×H×W, `kernels`: C_out×C_in×K×K (K odd), `bias`: C_out.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        kernels: TensorRef,
        bias: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernels), self.shape(bias));
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, kernels {ks:?}, bias {bs:?}"),
            ));
        }
        if ks[1] != xs[0] || ks[2] != ks[3] || bs[0] != ks[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernels {ks:?} incompatible with input {xs:?} / bias {bs:?}"),
            ));
        }
        let d = ConvDims {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            k: ks[2],
            stride,
            pad,
            oh: 0,
            ow: 0,
        };
        if d.k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {} must be odd", d.k)));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let oh = (d.h + 2 * pad).checked_sub(d.k).map(|v| v / stride + 1);
        let ow = (d.w + 2 * pad).checked_sub(d.k).map(|v| v / stride + 1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Config(format!(
                "conv2d output collapses below 1x1 for input {}x{}, kernel {}, stride {}, pad {}",
                d.h, d.w, d.k, stride, pad
            )));
        };
        let d = ConvDims { oh, ow, ..d };

        let mut data = vec![S::zero(); d.c_out * oh * ow];
        conv2d_fwd(self.data(x), self.data(kernels), self.data(bias), &d, &mut data);
        let tracked = self.tracked(x) || self.tracked(kernels) || self.tracked(bias);
        let out = self.push_node(vec![d.c_out, oh, ow], data, tracked);
        if tracked {
            let (xi, ki, bi) = (x.0, kernels.0, bias.0);
            let (tx, tk, tb) = (self.tracked(x), self.tracked(kernels), self.tracked(bias));
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    if tx {
                        let kd = nodes[ki].data.clone();
                        let dx = sink.accum(xi, d.c_in * d.h * d.w);
                        conv2d_bwd_input(&kd, gout, &d, dx);
                    }
                    if tk {
                        let xd = nodes[xi].data.clone();
                        let dk = sink.accum(ki, d.c_out * d.c_in * d.k * d.k);
                        conv2d_bwd_kernel(&xd, gout, &d, dk);
                    }
                    if tb {
                        let db = sink.accum(bi, d.c_out);
                        let plane = d.oh * d.ow;
                        for co in 0..d.c_out {
                            let mut acc = S::zero();
                            for &g in &gout[co * plane..(co + 1) * plane] {
                                acc += g;
                            }
                            db[co] += acc;
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Mean over the spatial extent of each channel: C×H×W → C.
    pub fn global_avg_pool(&mut self, x: TensorRef) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("expected 3-d, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let m = h * w;
        let inv = S::from_f64(1.0 / m as f64);
        let xd = self.data(x);
        let data: Vec<S> = (0..c)
            .map(|ci| {
                let mut acc = S::zero();
                for &v in &xd[ci * m..(ci + 1) * m] {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let tracked = self.tracked(x);
        let out = self.push_node(vec![c], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, c * m);
                    for ci in 0..c {
                        let g = gout[ci] * inv;
                        for v in &mut dx[ci * m..(ci + 1) * m] {
                            *v += g;
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: TensorRef, factor: usize) -> Result<TensorRef> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("upsample_nearest", format!("expected 3-d, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (fh, fw) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut data = vec![S::zero(); c * fh * fw];
        for ci in 0..c {
            for y in 0..fh {
                let src_row = ci * h * w + (y / factor) * w;
                let dst_row = ci * fh * fw + y * fw;
                for xo in 0..fw {
                    data[dst_row + xo] = xd[src_row + xo / factor];
                }
            }
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![c, fh, fw], data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(xi, c * h * w);
                    for ci in 0..c {
                        for y in 0..fh {
                            let src_row = ci * h * w + (y / factor) * w;
                            let dst_row = ci * fh * fw + y * fw;
                            for xo in 0..fw {
                                dx[src_row + xo / factor] += gout[dst_row + xo];
                            }
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    // ── Nonlinearities and normalization ────────────────────────────────

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        let data: Vec<S> = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let tracked = self.tracked(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, tracked);
        if tracked {
            let (xi, oi) = (x.0, out);
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let y = nodes[oi].data.clone();
                    let dx = sink.accum(xi, y.len());
                    for i in 0..y.len() {
                        dx[i] += gout[i] * y[i] * (S::one() - y[i]);
                    }
                }),
            );
        }
        TensorRef(out)
    }

    /// Swish activation `x * sigmoid(x)`, the network-wide nonlinearity.
    pub fn swish(&mut self, x: TensorRef) -> TensorRef {
        let data: Vec<S> = self.data(x).iter().map(|&v| v * sigmoid_scalar(v)).collect();
        let tracked = self.tracked(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let xv = nodes[xi].data.clone();
                    let dx = sink.accum(xi, xv.len());
                    for i in 0..xv.len() {
                        let s = sigmoid_scalar(xv[i]);
                        dx[i] += gout[i] * (s + xv[i] * s * (S::one() - s));
                    }
                }),
            );
        }
        TensorRef(out)
    }

    /// Row-wise softmax over the last dimension, max-subtracted for
    /// stability. Shift-invariant: softmax(x + c) = softmax(x).
    pub fn softmax_lastdim(&mut self, x: TensorRef) -> TensorRef {
        let shape = self.nodes[x.0].shape.clone();
        let k = *shape.last().expect("softmax needs at least one dim");
        let rows = numel(&shape) / k;
        let xd = self.data(x);
        let mut data = vec![S::zero(); rows * k];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let out = &mut data[r * k..(r + 1) * k];
            softmax_row(row, out);
        }
        let tracked = self.tracked(x);
        let out = self.push_node(shape, data, tracked);
        if tracked {
            let (xi, oi) = (x.0, out);
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let y = nodes[oi].data.clone();
                    let dx = sink.accum(xi, y.len());
                    for r in 0..rows {
                        let yr = &y[r * k..(r + 1) * k];
                        let gr = &gout[r * k..(r + 1) * k];
                        let mut dot = S::zero();
                        for i in 0..k {
                            dot += yr[i] * gr[i];
                        }
                        let dr = &mut dx[r * k..(r + 1) * k];
                        for i in 0..k {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }),
            );
        }
        TensorRef(out)
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: TensorRef, gain: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::shape("layer_norm", format!("last dim must be >= 2, got {shape:?}")));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs features {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = numel(&shape) / d;
        let eps = S::from_f64(LAYER_NORM_EPS);
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut data = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            let out = &mut data[r * d..(r + 1) * d];
            for i in 0..d {
                out[i] = gd[i] * ((row[i] - mean) * inv_std) + bd[i];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        let out = self.push_node(shape, data, tracked);
        if tracked {
            let (xi, gi, bi) = (x.0, gain.0, bias.0);
            let (tx, tg, tb) = (self.tracked(x), self.tracked(gain), self.tracked(bias));
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let xd = &nodes[xi].data;
                    let gd = &nodes[gi].data;
                    let inv_d = S::from_f64(1.0 / d as f64);
                    // per-row recomputation of the normalized values
                    let mut xhat = vec![S::zero(); d];
                    let mut dgain = vec![S::zero(); d];
                    let mut dbias = vec![S::zero(); d];
                    let mut dx_all = if tx { vec![S::zero(); rows * d] } else { Vec::new() };
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row, eps);
                        for i in 0..d {
                            xhat[i] = (row[i] - mean) * inv_std;
                        }
                        let gr = &gout[r * d..(r + 1) * d];
                        for i in 0..d {
                            dgain[i] += gr[i] * xhat[i];
                            dbias[i] += gr[i];
                        }
                        if tx {
                            let mut mean_gx = S::zero();
                            let mut mean_gxx = S::zero();
                            for i in 0..d {
                                let gx = gr[i] * gd[i];
                                mean_gx += gx;
                                mean_gxx += gx * xhat[i];
                            }
                            mean_gx *= inv_d;
                            mean_gxx *= inv_d;
                            let dst = &mut dx_all[r * d..(r + 1) * d];
                            for i in 0..d {
                                let gx = gr[i] * gd[i];
                                dst[i] = (gx - mean_gx - xhat[i] * mean_gxx) * inv_std;
                            }
                        }
                    }
                    if tx {
                        let dx = sink.accum(xi, rows * d);
                        for (a, &v) in dx.iter_mut().zip(&dx_all) {
                            *a += v;
                        }
                    }
                    if tg {
                        let dg = sink.accum(gi, d);
                        for (a, &v) in dg.iter_mut().zip(&dgain) {
                            *a += v;
                        }
                    }
                    if tb {
                        let db = sink.accum(bi, d);
                        for (a, &v) in db.iter_mut().zip(&dbias) {
                            *a += v;
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Per-channel spatial normalization of a C×H×W map with learned
    /// per-channel gain and bias. Statistics are per sample, so training
    /// and inference run identical arithmetic.
    pub fn channel_norm(&mut self, x: TensorRef, gain: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape("channel_norm", format!("expected 3-d, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let m = h * w;
        if m < 2 {
            return Err(Error::shape("channel_norm", format!("spatial extent {h}x{w} too small")));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "channel_norm",
                format!("gain {:?} / bias {:?} vs {c} channels", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut data = vec![S::zero(); c * m];
        for ch in 0..c {
            let row = &xd[ch * m..(ch + 1) * m];
            let (mean, inv_std) = row_moments(row, eps);
            let out = &mut data[ch * m..(ch + 1) * m];
            for i in 0..m {
                out[i] = gd[ch] * ((row[i] - mean) * inv_std) + bd[ch];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        let out = self.push_node(shape, data, tracked);
        if tracked {
            let (xi, gi, bi) = (x.0, gain.0, bias.0);
            let (tx, tg, tb) = (self.tracked(x), self.tracked(gain), self.tracked(bias));
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let xd = &nodes[xi].data;
                    let gd = &nodes[gi].data;
                    let inv_m = S::from_f64(1.0 / m as f64);
                    let mut xhat = vec![S::zero(); m];
                    let mut dgain = vec![S::zero(); c];
                    let mut dbias = vec![S::zero(); c];
                    let mut dx_all = if tx { vec![S::zero(); c * m] } else { Vec::new() };
                    for ch in 0..c {
                        let row = &xd[ch * m..(ch + 1) * m];
                        let (mean, inv_std) = row_moments(row, eps);
                        for i in 0..m {
                            xhat[i] = (row[i] - mean) * inv_std;
                        }
                        let gr = &gout[ch * m..(ch + 1) * m];
                        let mut mean_gx = S::zero();
                        let mut mean_gxx = S::zero();
                        for i in 0..m {
                            dgain[ch] += gr[i] * xhat[i];
                            dbias[ch] += gr[i];
                            let gx = gr[i] * gd[ch];
                            mean_gx += gx;
                            mean_gxx += gx * xhat[i];
                        }
                        if tx {
                            mean_gx *= inv_m;
                            mean_gxx *= inv_m;
                            let dst = &mut dx_all[ch * m..(ch + 1) * m];
                            for i in 0..m {
                                let gx = gr[i] * gd[ch];
                                dst[i] = (gx - mean_gx - xhat[i] * mean_gxx) * inv_std;
                            }
                        }
                    }
                    if tx {
                        let dx = sink.accum(xi, c * m);
                        for (a, &v) in dx.iter_mut().zip(&dx_all) {
                            *a += v;
                        }
                    }
                    if tg {
                        let dg = sink.accum(gi, c);
                        for (a, &v) in dg.iter_mut().zip(&dgain) {
                            *a += v;
                        }
                    }
                    if tb {
                        let db = sink.accum(bi, c);
                        for (a, &v) in db.iter_mut().zip(&dbias) {
                            *a += v;
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    // ── Sequence ops ────────────────────────────────────────────────────

    /// Gather rows of an embedding table: table V×D, ids len L → L×D.
    pub fn embed(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embed", format!("table must be 2-d, got {s:?}")));
        }
        let (v, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Usage(format!("embedding id {bad} out of range (table size {v})")));
        }
        if ids.is_empty() {
            return Err(Error::Usage("embed requires at least one id".into()));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let tracked = self.tracked(table);
        let out = self.push_node(vec![ids.len(), dim], data, tracked);
        if tracked {
            let ti = table.0;
            let ids = ids.to_vec();
            self.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dt = sink.accum(ti, v * dim);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += gout[row * dim + j];
                        }
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Summed negative log-likelihood over masked positions of an L×K
    /// logits matrix; positions with `mask[t] == false` contribute nothing
    /// to the value or the gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorRef> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("logits {s:?}, targets {}, mask {}", targets.len(), mask.len()),
            ));
        }
        let (l, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().enumerate().filter(|(t, _)| mask[*t]).map(|(_, v)| v).find(|&&v| v >= k) {
            return Err(Error::Usage(format!("target class {bad} out of range (K={k})")));
        }
        let xd = self.data(logits);
        let mut loss = S::zero();
        for t in 0..l {
            if !mask[t] {
                continue;
            }
            let row = &xd[t * k..(t + 1) * k];
            loss += log_sum_exp(row) - row[targets[t]];
        }
        let tracked = self.tracked(logits);
        let out = self.push_node(vec![1], vec![loss], tracked);
        if tracked {
            let li = logits.0;
            let targets = targets.to_vec();
            let mask = mask.to_vec();
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let xd = &nodes[li].data;
                    let g = gout[0];
                    let dx = sink.accum(li, l * k);
                    let mut prob = vec![S::zero(); k];
                    for t in 0..l {
                        if !mask[t] {
                            continue;
                        }
                        let row = &xd[t * k..(t + 1) * k];
                        softmax_row(row, &mut prob);
                        let dst = &mut dx[t * k..(t + 1) * k];
                        for j in 0..k {
                            dst[j] += g * prob[j];
                        }
                        dst[targets[t]] -= g;
                    }
                }),
            );
        }
        Ok(TensorRef(out))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let mut acc = S::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let tracked = self.tracked(x);
        let out = self.push_node(vec![1], vec![acc], tracked);
        if tracked {
            let xi = x.0;
            self.push_rec(
                out,
                Box::new(move |nodes, gout, sink| {
                    let n = nodes[xi].data.len();
                    let dx = sink.accum(xi, n);
                    for d in dx.iter_mut() {
                        *d += gout[0];
                    }
                }),
            );
        }
        TensorRef(out)
    }
}

// ── Scalar and kernel helpers ───────────────────────────────────────────

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter().skip(1) {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = S::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = row[0];
    for &v in row.iter().skip(1) {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let inv_d = S::from_f64(1.0 / row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean *= inv_d;
    let mut var = S::zero();
    for &v in row {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    (mean, S::one() / (var + eps).sqrt())
}

/// C[i,j] += Σ_p A[i,p]·B[p,j]
fn mm_nn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C[i,j] += Σ_p A[i,p]·B[j,p]  (A: m×k, B: n×k)
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// C[i,j] += Σ_p A[p,i]·B[p,j]  (A: k×m, B: k×n)
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Copy, Clone)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output columns `ox` with `0 <= ox*stride + kx - pad < in_extent`.
#[inline]
fn ox_range(kx: usize, stride: usize, pad: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let limit = in_extent + pad;
    let hi = if kx >= limit { 0 } else { ((limit - kx - 1) / stride + 1).min(out_extent) };
    (lo.min(hi), hi)
}

fn conv2d_fwd<S: Scalar>(x: &[S], ker: &[S], bias: &[S], d: &ConvDims, out: &mut [S]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for co in 0..d.c_out {
        let out_ch = &mut out[co * plane_out..(co + 1) * plane_out];
        let bv = bias[co];
        for o in out_ch.iter_mut() {
            *o = bv;
        }
        for ci in 0..d.c_in {
            let x_ch = &x[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = ker[kbase + ky * d.k + kx];
                    let (lo, hi) = ox_range(kx, d.stride, d.pad, d.w, d.ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &x_ch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut out_ch[oy * d.ow..(oy + 1) * d.ow];
                        if d.stride == 1 {
                            let ix0 = lo + kx - d.pad;
                            let xs = &xrow[ix0..ix0 + (hi - lo)];
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                *o += wgt * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wgt * xrow[ox * d.stride + kx - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input<S: Scalar>(ker: &[S], gout: &[S], d: &ConvDims, dx: &mut [S]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for co in 0..d.c_out {
        let g_ch = &gout[co * plane_out..(co + 1) * plane_out];
        for ci in 0..d.c_in {
            let dx_ch = &mut dx[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = ker[kbase + ky * d.k + kx];
                    let (lo, hi) = ox_range(kx, d.stride, d.pad, d.w, d.ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dxrow = &mut dx_ch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let grow = &g_ch[oy * d.ow..(oy + 1) * d.ow];
                        if d.stride == 1 {
                            let ix0 = lo + kx - d.pad;
                            for (xg, &g) in dxrow[ix0..ix0 + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                                *xg += wgt * g;
                            }
                        } else {
                            for ox in lo..hi {
                                dxrow[ox * d.stride + kx - d.pad] += wgt * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_kernel<S: Scalar>(x: &[S], gout: &[S], d: &ConvDims, dk: &mut [S]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for co in 0..d.c_out {
        let g_ch = &gout[co * plane_out..(co + 1) * plane_out];
        for ci in 0..d.c_in {
            let x_ch = &x[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let (lo, hi) = ox_range(kx, d.stride, d.pad, d.w, d.ow);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = S::zero();
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &x_ch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let grow = &g_ch[oy * d.ow..(oy + 1) * d.ow];
                        if d.stride == 1 {
                            let ix0 = lo + kx - d.pad;
                            for (&xv, &g) in xrow[ix0..ix0 + (hi - lo)].iter().zip(&grow[lo..hi]) {
                                acc += xv * g;
                            }
                        } else {
                            for ox in lo..hi {
                                acc += xrow[ox * d.stride + kx - d.pad] * grow[ox];
                            }
                        }
                    }
                    dk[kbase + ky * d.k + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.value(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.value(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.value(t2(1, 1, &[2.0]));
        let b = tape.value(t2(1, 1, &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.value(t2(2, 3, &[0.0; 6]));
        let b = tape.value(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::from_vec(vec![1, 2, 3], (1..=6).map(f64::from).collect()).unwrap());
        let k = tape.value(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.value(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv2d_ones_kernel_against_brute_force() {
        // 3x3 all-ones kernel, stride 1, pad 1 on a 3x3 map of ones:
        // center sees 9 inputs, corners see 4.
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::full(vec![1, 3, 3], 1.0));
        let k = tape.value(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.value(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let got = tape.data(y);
        assert_eq!(got[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(got[corner], 4.0);
        }
        // independent brute-force oracle over every output cell
        let oracle = brute_conv(&[1.0; 9], (3, 3), &[1.0; 9], 3, 1, 1);
        assert_eq!(got, &oracle[..]);
    }

    // Direct definition: out[oy][ox] = sum over kernel taps, zero padding.
    fn brute_conv(x: &[f64], hw: (usize, usize), k: &[f64], ksz: usize, stride: usize, pad: usize) -> Vec<f64> {
        let (h, w) = hw;
        let oh = (h + 2 * pad - ksz) / stride + 1;
        let ow = (w + 2 * pad - ksz) / stride + 1;
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..ksz {
                    for kx in 0..ksz {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += k[ky * ksz + kx] * x[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn conv2d_stride_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::zeros(vec![1, 8, 8]));
        let k = tape.value(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.value(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4]);
    }

    #[test]
    fn conv2d_collapse_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::zeros(vec![1, 1, 1]));
        let k = tape.value(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.value(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_values() {
        let mut tape = Tape::<f64>::new();
        let c = tape.value(Tensor::full(vec![3, 2, 2], 7.0));
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.data(y), &[7.0, 7.0, 7.0]);

        let x = tape.value(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::from_vec(vec![1, 3], vec![0.0; 3]).unwrap());
        let y = tape.softmax_lastdim(x);
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = tape.value(Tensor::from_vec(vec![1, 3], vec![1000.0; 3]).unwrap());
        let y = tape.softmax_lastdim(big);
        for &v in tape.data(y) {
            assert!(v.is_finite());
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::from_vec(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = tape.softmax_lastdim(x);
        assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn activations_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(s), &[0.5]);
        let w = tape.swish(x);
        assert_eq!(tape.data(w), &[0.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let root = tape.sum_all(y);
        tape.backward(root).unwrap();
        assert!((tape.grad_of(x).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::full(vec![1, 4], 3.0));
        let g = tape.value(Tensor::full(vec![4], 1.0));
        let b = tape.value(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let g = tape.value(Tensor::full(vec![2], 1.0));
        let b = tape.value(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!((tape.data(y)[0] - (-1.0)).abs() < 1e-4);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_mean_near_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.value(Tensor::from_vec(vec![5, 8], vals).unwrap());
        let g = tape.value(Tensor::full(vec![8], 1.0));
        let b = tape.value(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..5 {
            let mean: f64 = tape.data(y)[r * 8..(r + 1) * 8].iter().sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-7, "row {r} mean {mean}");
        }
    }

    #[test]
    fn upsample_identity_and_replication() {
        let mut tape = Tape::<f64>::new();
        let x = tape.value(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let same = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.data(same), tape.data(x));
        let up = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.shape(up), &[1, 2, 4]);
        assert_eq!(tape.data(up), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn upsample_backward_sums_replication_block() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_vec(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let up = tape.upsample_nearest(x, 2).unwrap();
        let root = tape.sum_all(up);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_identity_and_quadratic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(5.0));
        let y = tape.sum_all(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum_all(sq);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.var(Tensor::from_vec(vec![4], vec![0.3, -0.7, 1.1, 2.2]).unwrap());
            let s = tape.swish(x);
            let m = tape.mul(s, s).unwrap();
            let y = tape.sum_all(m);
            tape.backward(y).unwrap();
            tape.grad_of(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_positions_do_not_leak_into_loss() {
        let mut tape = Tape::<f64>::new();
        let base = vec![0.1, 0.4, -0.2, 0.9, 0.0, -1.0];
        let x1 = tape.var(t2(2, 3, &base));
        let mut bumped = base.clone();
        bumped[3] += 100.0; // masked row
        let x2 = tape.var(t2(2, 3, &bumped));
        let mask = [true, false];
        let l1 = tape.masked_cross_entropy(x1, &[1, 0], &mask).unwrap();
        let l2 = tape.masked_cross_entropy(x2, &[1, 0], &mask).unwrap();
        assert_eq!(tape.data(l1), tape.data(l2));
        tape.backward(l2).unwrap();
        let g = tape.grad_of(x2).unwrap();
        assert!(g[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let table = tape.var(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = tape.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let root = tape.sum_all(e);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad_of(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn param_staging_is_memoized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let m = tape.mul(a, b).unwrap(); // w^2
        let y = tape.sum_all(m);
        tape.backward(y).unwrap();
        store.zero_grads();
        tape.apply_param_grads(&mut store);
        assert_eq!(store.get(id).grad.data(), &[6.0]); // d(w^2)/dw = 2w
    }

    // Negative control: an op with a deliberately wrong backward rule must
    // be caught by finite differences.
    #[test]
    fn wrong_backward_rule_is_detected() {
        let mut tape = Tape::<f64>::new();
        let x0 = 1.3;
        let x = tape.var(Tensor::scalar(x0));
        // forward x^2, but backward pretends d/dx = 1
        let data = vec![x0 * x0];
        let xi = {
            let out = tape.push_node(vec![1], data, true);
            tape.push_rec(
                out,
                Box::new(move |_nodes, gout, sink| {
                    let dx = sink.accum(0, 1);
                    dx[0] += gout[0];
                }),
            );
            TensorRef(out)
        };
        let y = tape.sum_all(xi);
        tape.backward(y).unwrap();
        let analytic = tape.grad_of(x).unwrap()[0];
        let h = 1e-5;
        let numeric = (((x0 + h) * (x0 + h)) - ((x0 - h) * (x0 - h))) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel > 0.1, "wrong rule must produce a large error, got {rel}");
    }
}
