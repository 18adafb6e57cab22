use std::sync::Arc;

use super::tensor::gemm;
use super::{NeuralError, ParamSet, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Neighbour lists in compressed form; every node lists itself first.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    offsets: Vec<usize>,
    idx: Vec<usize>,
}

impl Csr {
    /// Builds from symmetric neighbour lists (self excluded); adds self-loops.
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self, NeuralError> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut idx = Vec::new();
        offsets.push(0);
        for (i, l) in lists.iter().enumerate() {
            idx.push(i);
            for &j in l {
                if j >= n {
                    return Err(NeuralError::Adjacency(format!("neighbour {j} of {i} out of range")));
                }
                if j == i {
                    return Err(NeuralError::Adjacency(format!("explicit self-loop at {i}")));
                }
                if !lists[j].contains(&i) {
                    return Err(NeuralError::Adjacency(format!("edge {i}-{j} not symmetric")));
                }
                idx.push(j);
            }
            offsets.push(idx.len());
        }
        Ok(Self { offsets, idx })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Self first, then neighbours.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.idx[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Several graphs packed block-diagonally into one node set.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub features: Tensor,
    pub adj: Arc<Csr>,
    /// Graph index of each node.
    pub segments: Arc<Vec<usize>>,
    pub n_graphs: usize,
    pub mask: Arc<Vec<bool>>,
}

impl GraphBatch {
    pub fn single(features: Tensor, neighbors: &[Vec<usize>]) -> Result<Self, NeuralError> {
        Self::pack(&[(features, neighbors.to_vec())])
    }

    pub fn pack(graphs: &[(Tensor, Vec<Vec<usize>>)]) -> Result<Self, NeuralError> {
        let cols = graphs.first().map(|g| g.0.cols).unwrap_or(0);
        let mut lists = Vec::new();
        let mut segments = Vec::new();
        let mut parts = Vec::with_capacity(graphs.len());
        for (gi, (f, nb)) in graphs.iter().enumerate() {
            if f.rows != nb.len() {
                return Err(NeuralError::Shape { op: "pack", a: f.shape(), b: [nb.len(), 0] });
            }
            if f.cols != cols {
                return Err(NeuralError::Shape { op: "pack", a: f.shape(), b: [f.rows, cols] });
            }
            let base = lists.len();
            for l in nb {
                lists.push(l.iter().map(|j| j + base).collect::<Vec<_>>());
                segments.push(gi);
            }
            parts.push(f);
        }
        let features = Tensor::vstack(&parts)?;
        let n = features.rows;
        Ok(Self {
            features,
            adj: Arc::new(Csr::from_lists(&lists)?),
            segments: Arc::new(segments),
            n_graphs: graphs.len(),
            mask: Arc::new(vec![true; n]),
        })
    }

    pub fn nodes(&self) -> usize {
        self.features.rows
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Param(String),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Concat(usize, usize),
    Gat { z: usize, a_src: usize, a_dst: usize, adj: Arc<Csr>, alpha: Vec<f64>, pre: Vec<f64> },
    SegMean { x: usize, seg: Arc<Vec<usize>>, mask: Arc<Vec<bool>>, counts: Vec<usize> },
    Softmax(usize),
    StraightThrough { x: usize, soft: Tensor },
    Blend { a: usize, b: usize, mask: Arc<Vec<bool>> },
    Sub(usize, usize),
    Square(usize),
    MeanAll(usize),
    Scale(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into `ps` for every name it holds; returns
    /// how many were applied.
    pub fn apply_to(&self, ps: &mut ParamSet) -> usize {
        let mut n = 0;
        for (name, i) in &self.params {
            if let Some(g) = &self.grads[*i] {
                if ps.accumulate(name, g) {
                    n += 1;
                }
            }
        }
        n
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NeuralError {
    NeuralError::Shape { op, a: a.shape(), b: b.shape() }
}

fn slot(grads: &mut [Option<Tensor>], i: usize, rows: usize, cols: usize) -> &mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(64) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NeuralError> {
        if !value.all_finite() {
            return Err(NeuralError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf | Op::Param(_) => true,
            Op::Constant => false,
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Concat(a, b) | Op::Sub(a, b) => self.needs(*a) || self.needs(*b),
            Op::Blend { a, b, .. } => self.needs(*a) || self.needs(*b),
            Op::Gat { z, a_src, a_dst, .. } => self.needs(*z) || self.needs(*a_src) || self.needs(*a_dst),
            Op::Relu(x) | Op::Softmax(x) | Op::Square(x) | Op::MeanAll(x) | Op::Scale(x, _) => self.needs(*x),
            Op::SegMean { x, .. } | Op::StraightThrough { x, .. } => self.needs(*x),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Var, NeuralError> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NeuralError> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, ps: &ParamSet, name: &str) -> Result<Var, NeuralError> {
        let v = ps.value(name)?.clone();
        self.push(v, Op::Param(name.to_string()), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let out = self.val(a).matmul(self.val(b))?;
        self.push(out, Op::MatMul(a.0, b.0), "matmul")
    }

    /// Adds a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NeuralError> {
        let (xv, bv) = (self.val(x), self.val(b));
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x.0, b.0), "add_row")
    }

    /// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var, NeuralError> {
        let w = self.param(ps, &format!("{prefix}.w"))?;
        let b = self.param(ps, &format!("{prefix}.b"))?;
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NeuralError> {
        let mut out = self.val(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x.0), "relu")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rows != bv.rows {
            return Err(shape_err("concat_cols", av, bv));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor { rows: av.rows, cols, data };
        self.push(out, Op::Concat(a.0, b.0), "concat_cols")
    }

    /// Single-head attention over each node's neighbourhood (self included):
    /// `out_i = sum_j alpha_ij z_j`, `alpha_i = softmax_j leaky(z_i a_dst + z_j a_src)`.
    pub fn gat_aggregate(&mut self, z: Var, a_src: Var, a_dst: Var, adj: &Arc<Csr>) -> Result<Var, NeuralError> {
        let zv = self.val(z);
        let (sv, dv) = (self.val(a_src), self.val(a_dst));
        let d = zv.cols;
        if sv.shape() != [d, 1] {
            return Err(shape_err("gat_aggregate", zv, sv));
        }
        if dv.shape() != [d, 1] {
            return Err(shape_err("gat_aggregate", zv, dv));
        }
        if adj.len() != zv.rows {
            return Err(NeuralError::Adjacency(format!("{} nodes, {} features", adj.len(), zv.rows)));
        }
        let n = zv.rows;
        let dot = |r: &[f64], a: &[f64]| r.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        let src: Vec<f64> = (0..n).map(|i| dot(zv.row(i), &sv.data)).collect();
        let dst: Vec<f64> = (0..n).map(|i| dot(zv.row(i), &dv.data)).collect();
        let mut alpha = vec![0.0; adj.idx.len()];
        let mut pre = vec![0.0; adj.idx.len()];
        let mut out = Tensor::zeros(n, d);
        let mut e = Vec::new();
        for i in 0..n {
            let nb = adj.neighbors(i);
            let off = adj.offsets[i];
            e.clear();
            for (k, &j) in nb.iter().enumerate() {
                let p = dst[i] + src[j];
                pre[off + k] = p;
                e.push(if p > 0.0 { p } else { LEAKY_SLOPE * p });
            }
            softmax_row(&e, &mut alpha[off..off + nb.len()]);
            let orow = &mut out.data[i * d..(i + 1) * d];
            for (k, &j) in nb.iter().enumerate() {
                let a = alpha[off + k];
                for (o, zj) in orow.iter_mut().zip(zv.row(j)) {
                    *o += a * zj;
                }
            }
        }
        self.push(out, Op::Gat { z: z.0, a_src: a_src.0, a_dst: a_dst.0, adj: adj.clone(), alpha, pre }, "gat_aggregate")
    }

    /// Per-segment mean over rows whose mask is set.
    pub fn segment_mean(
        &mut self,
        x: Var,
        seg: &Arc<Vec<usize>>,
        n_seg: usize,
        mask: &Arc<Vec<bool>>,
    ) -> Result<Var, NeuralError> {
        let xv = self.val(x);
        if seg.len() != xv.rows || mask.len() != xv.rows {
            return Err(NeuralError::Shape { op: "segment_mean", a: xv.shape(), b: [seg.len(), mask.len()] });
        }
        let mut counts = vec![0usize; n_seg];
        let mut out = Tensor::zeros(n_seg, xv.cols);
        for r in 0..xv.rows {
            if !mask[r] {
                continue;
            }
            let s = seg[r];
            if s >= n_seg {
                return Err(NeuralError::Adjacency(format!("segment {s} >= {n_seg}")));
            }
            counts[s] += 1;
            for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(NeuralError::EmptyMask);
            }
            out.row_mut(s).iter_mut().for_each(|o| *o /= c as f64);
        }
        self.push(out, Op::SegMean { x: x.0, seg: seg.clone(), mask: mask.clone(), counts }, "segment_mean")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.val(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            softmax_row(xv.row(r), &mut out.data[r * xv.cols..(r + 1) * xv.cols]);
        }
        self.push(out, Op::Softmax(x.0), "softmax_rows")
    }

    /// One-hot of each row's argmax going forward, softmax gradient going back.
    pub fn straight_through(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.val(x);
        let mut soft = Tensor::zeros(xv.rows, xv.cols);
        let mut hard = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            softmax_row(xv.row(r), &mut soft.data[r * xv.cols..(r + 1) * xv.cols]);
            let k = argmax(xv.row(r));
            hard.set(r, k, 1.0);
        }
        self.push(hard, Op::StraightThrough { x: x.0, soft }, "straight_through")
    }

    /// Row `r` from `b` where `mask[r]`, else from `a`.
    pub fn blend_rows(&mut self, a: Var, b: Var, mask: &Arc<Vec<bool>>) -> Result<Var, NeuralError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() || mask.len() != av.rows {
            return Err(shape_err("blend_rows", av, bv));
        }
        let mut out = av.clone();
        for r in 0..av.rows {
            if mask[r] {
                out.row_mut(r).copy_from_slice(bv.row(r));
            }
        }
        self.push(out, Op::Blend { a: a.0, b: b.0, mask: mask.clone() }, "blend_rows")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Tensor { rows: av.rows, cols: av.cols, data };
        self.push(out, Op::Sub(a.0, b.0), "sub")
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NeuralError> {
        let mut out = self.val(x).clone();
        out.data.iter_mut().for_each(|v| *v *= *v);
        self.push(out, Op::Square(x.0), "square")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NeuralError> {
        let xv = self.val(x);
        if xv.is_empty() {
            return Err(NeuralError::EmptyMask);
        }
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x.0), "mean_all")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, NeuralError> {
        let mut out = self.val(x).clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        self.push(out, Op::Scale(x.0, k), "scale")
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads, NeuralError> {
        let Some(ln) = self.nodes.get(loss.0) else {
            return Err(NeuralError::Detached);
        };
        if ln.value.shape() != [1, 1] {
            return Err(NeuralError::NotScalar(ln.value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let v = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Param(name) => params.push((name.clone(), i)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (v(*a), v(*b));
                    if self.needs(*a) {
                        gemm(false, true, &g, bv, slot(&mut grads, *a, av.rows, av.cols), 1.0);
                    }
                    if self.needs(*b) {
                        gemm(true, false, av, &g, slot(&mut grads, *b, bv.rows, bv.cols), 1.0);
                    }
                }
                Op::AddRow(x, b) => {
                    let xv = v(*x);
                    slot(&mut grads, *x, xv.rows, xv.cols).add_assign(&g);
                    let gb = slot(&mut grads, *b, 1, g.cols);
                    for r in 0..g.rows {
                        for (o, d) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = v(*x);
                    let gx = slot(&mut grads, *x, xv.rows, xv.cols);
                    for ((o, d), xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        if *xi > 0.0 {
                            *o += d;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let (ac, bc) = (v(*a).cols, v(*b).cols);
                    let ga = slot(&mut grads, *a, g.rows, ac);
                    for r in 0..g.rows {
                        for (o, d) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                            *o += d;
                        }
                    }
                    let gb = slot(&mut grads, *b, g.rows, bc);
                    for r in 0..g.rows {
                        for (o, d) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *o += d;
                        }
                    }
                }
                Op::Gat { z, a_src, a_dst, adj, alpha, pre } => {
                    let zv = v(*z);
                    let (n, d) = (zv.rows, zv.cols);
                    let (sv, dv) = (v(*a_src), v(*a_dst));
                    let mut gz = Tensor::zeros(n, d);
                    let mut ds = vec![0.0; n];
                    let mut dd = vec![0.0; n];
                    let mut da = Vec::new();
                    for i in 0..n {
                        let nb = adj.neighbors(i);
                        let off = adj.offsets[i];
                        let gi = g.row(i);
                        da.clear();
                        let mut s = 0.0;
                        for (k, &j) in nb.iter().enumerate() {
                            let a = alpha[off + k];
                            let dot: f64 = gi.iter().zip(zv.row(j)).map(|(x, y)| x * y).sum();
                            da.push(dot);
                            s += a * dot;
                            for (o, x) in gz.row_mut(j).iter_mut().zip(gi) {
                                *o += a * x;
                            }
                        }
                        for (k, &j) in nb.iter().enumerate() {
                            let a = alpha[off + k];
                            let de = a * (da[k] - s);
                            let dp = if pre[off + k] > 0.0 { de } else { LEAKY_SLOPE * de };
                            dd[i] += dp;
                            ds[j] += dp;
                        }
                    }
                    let mut gs = Tensor::zeros(d, 1);
                    let mut gd = Tensor::zeros(d, 1);
                    for i in 0..n {
                        let zi = zv.row(i);
                        let row = gz.row_mut(i);
                        for c in 0..d {
                            row[c] += ds[i] * sv.data[c] + dd[i] * dv.data[c];
                            gs.data[c] += ds[i] * zi[c];
                            gd.data[c] += dd[i] * zi[c];
                        }
                    }
                    slot(&mut grads, *z, n, d).add_assign(&gz);
                    slot(&mut grads, *a_src, d, 1).add_assign(&gs);
                    slot(&mut grads, *a_dst, d, 1).add_assign(&gd);
                }
                Op::SegMean { x, seg, mask, counts } => {
                    let xv = v(*x);
                    let gx = slot(&mut grads, *x, xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        if !mask[r] {
                            continue;
                        }
                        let s = seg[r];
                        let k = 1.0 / counts[s] as f64;
                        for (o, d) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o += k * d;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    softmax_back(y, &g, slot(&mut grads, *x, y.rows, y.cols));
                }
                Op::StraightThrough { x, soft } => {
                    softmax_back(soft, &g, slot(&mut grads, *x, soft.rows, soft.cols));
                }
                Op::Blend { a, b, mask } => {
                    let (rows, cols) = (g.rows, g.cols);
                    let ga = slot(&mut grads, *a, rows, cols);
                    for r in 0..rows {
                        if !mask[r] {
                            for (o, d) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += d;
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, rows, cols);
                    for r in 0..rows {
                        if mask[r] {
                            for (o, d) in gb.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, g.rows, g.cols).add_assign(&g);
                    let gb = slot(&mut grads, *b, g.rows, g.cols);
                    for (o, d) in gb.data.iter_mut().zip(&g.data) {
                        *o -= d;
                    }
                }
                Op::Square(x) => {
                    let xv = v(*x);
                    let gx = slot(&mut grads, *x, xv.rows, xv.cols);
                    for ((o, d), xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *o += 2.0 * xi * d;
                    }
                }
                Op::MeanAll(x) => {
                    let xv = v(*x);
                    let k = g.item() / xv.len() as f64;
                    slot(&mut grads, *x, xv.rows, xv.cols).data.iter_mut().for_each(|o| *o += k);
                }
                Op::Scale(x, k) => {
                    let gx = slot(&mut grads, *x, g.rows, g.cols);
                    for (o, d) in gx.data.iter_mut().zip(&g.data) {
                        *o += k * d;
                    }
                }
            }
            grads[i] = Some(g);
        }
        if params.is_empty() {
            return Err(NeuralError::Detached);
        }
        Ok(Grads { grads, params })
    }
}

fn softmax_back(y: &Tensor, g: &Tensor, gx: &mut Tensor) {
    for r in 0..y.rows {
        let (yr, gr) = (y.row(r), g.row(r));
        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, yi), gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o += yi * (gi - s);
        }
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn params(seed: u64, dims: &[(&str, usize, usize)]) -> ParamSet {
        let mut r = rng::stream(seed, "t");
        let mut p = ParamSet::new();
        for (n, a, b) in dims {
            p.add_uniform(n, *a, *b, &mut r).unwrap();
        }
        p
    }

    fn rand_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "x");
        Tensor { rows, cols, data: (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect() }
    }

    /// Central-difference check of every parameter gradient of `f`.
    fn check_grads(ps: &ParamSet, f: &dyn Fn(&mut Tape, &ParamSet) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, ps);
        let grads = tape.backward(loss).unwrap();
        let mut acc = ps.clone();
        acc.zero_grad();
        grads.apply_to(&mut acc);
        let h = 1e-6;
        let names: Vec<String> = ps.names().map(String::from).collect();
        for name in names {
            let n = ps.value(&name).unwrap().len();
            for k in 0..n {
                let mut p = ps.clone();
                p.value_mut(&name).unwrap().data[k] += h;
                let mut t = Tape::new();
                let lp = f(&mut t, &p);
                let up = t.value(lp).item();
                let mut p = ps.clone();
                p.value_mut(&name).unwrap().data[k] -= h;
                let mut t = Tape::new();
                let lm = f(&mut t, &p);
                let dn = t.value(lm).item();
                let num = (up - dn) / (2.0 * h);
                let ana = acc.grad(&name).unwrap().data[k];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < tol, "{name}[{k}]: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn identity_and_constant_linear() {
        let mut ps = ParamSet::new();
        ps.insert("l.w", Tensor::identity(3)).unwrap();
        ps.insert("l.b", Tensor::zeros(1, 3)).unwrap();
        let x = rand_tensor(1, 4, 3);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone()).unwrap();
        let y = t.linear(&ps, "l", xv).unwrap();
        assert_eq!(t.value(y), &x);

        let mut ps = ParamSet::new();
        ps.insert("l.w", Tensor::zeros(3, 2)).unwrap();
        ps.insert("l.b", Tensor::from_vec(1, 2, vec![2.5, -1.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(x).unwrap();
        let y = t.linear(&ps, "l", xv).unwrap();
        for r in 0..4 {
            assert_eq!(t.value(y).row(r), &[2.5, -1.0]);
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let ps = params(2, &[("l.w", 3, 4), ("l.b", 1, 4)]);
        let x = rand_tensor(3, 5, 3);
        check_grads(
            &ps,
            &|t, p| {
                let xv = t.leaf(x.clone()).unwrap();
                let y = t.linear(p, "l", xv).unwrap();
                t.mean_all(y).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn sum_wx_gradient_is_x_structure() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(2, 1, vec![0.3, -0.7]).unwrap()).unwrap();
        let x = Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(x).unwrap();
        let w = t.param(&ps, "w").unwrap();
        let y = t.matmul(xv, w).unwrap();
        let m = t.mean_all(y).unwrap();
        let l = t.scale(m, 3.0).unwrap();
        let g = t.backward(l).unwrap();
        let mut acc = ps.clone();
        g.apply_to(&mut acc);
        assert_eq!(acc.grad("w").unwrap().data, vec![9.0, 12.0]);
    }

    #[test]
    fn unused_param_has_zero_grad_and_detached_errors() {
        let ps = params(1, &[("a", 2, 2), ("b", 2, 2)]);
        let mut t = Tape::new();
        let a = t.param(&ps, "a").unwrap();
        let _b = t.param(&ps, "b").unwrap();
        let l = t.mean_all(a).unwrap();
        let g = t.backward(l).unwrap();
        let mut acc = ps.clone();
        assert_eq!(g.apply_to(&mut acc), 1);
        assert!(acc.grad("b").unwrap().data.iter().all(|v| *v == 0.0));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(2, 2, 1.0)).unwrap();
        let l = t.mean_all(x).unwrap();
        assert_eq!(t.backward(l).unwrap_err(), NeuralError::Detached);
        assert_eq!(t.backward(x).unwrap_err(), NeuralError::NotScalar([2, 2]));
    }

    fn ring(n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut v = vec![(i + 1) % n, (i + n - 1) % n];
                v.sort();
                v.dedup();
                v.retain(|j| *j != i);
                v
            })
            .collect()
    }

    fn gat_net(t: &mut Tape, p: &ParamSet, x: &Tensor, adj: &Arc<Csr>) -> Var {
        let xv = t.leaf(x.clone()).unwrap();
        let h = t.linear(p, "enc", xv).unwrap();
        let h = t.relu(h).unwrap();
        let w = t.param(p, "gat.w").unwrap();
        let z = t.matmul(h, w).unwrap();
        let s = t.param(p, "gat.src").unwrap();
        let d = t.param(p, "gat.dst").unwrap();
        let out = t.gat_aggregate(z, s, d, adj).unwrap();
        t.concat_cols(h, out).unwrap()
    }

    fn gat_params(seed: u64) -> ParamSet {
        params(seed, &[("enc.w", 3, 4), ("enc.b", 1, 4), ("gat.w", 4, 4), ("gat.src", 4, 1), ("gat.dst", 4, 1)])
    }

    #[test]
    fn gat_gradients() {
        let ps = gat_params(5);
        let x = rand_tensor(6, 5, 3);
        let adj = Arc::new(Csr::from_lists(&ring(5)).unwrap());
        let seg = Arc::new(vec![0, 0, 1, 1, 1]);
        let mask = Arc::new(vec![true; 5]);
        check_grads(
            &ps,
            &|t, p| {
                let e = gat_net(t, p, &x, &adj);
                let sq = t.square(e).unwrap();
                let pooled = t.segment_mean(sq, &seg, 2, &mask).unwrap();
                t.mean_all(pooled).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let ps = gat_params(1);
        let mut x = rand_tensor(2, 3, 3);
        let adj = Arc::new(Csr::from_lists(&[vec![1], vec![0], vec![]]).unwrap());
        let mut t = Tape::new();
        let e = gat_net(&mut t, &ps, &x, &adj);
        let before = t.value(e).row(2).to_vec();
        x.row_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let mut t = Tape::new();
        let e = gat_net(&mut t, &ps, &x, &adj);
        assert_eq!(t.value(e).row(2), &before[..]);
    }

    #[test]
    fn gat_permutation_equivariance() {
        let ps = gat_params(9);
        let x = rand_tensor(4, 6, 3);
        let lists = vec![vec![1, 2], vec![0, 3], vec![0], vec![1, 4, 5], vec![3], vec![3]];
        let perm = [3, 5, 0, 1, 4, 2];
        let mut inv = [0; 6];
        for (new, old) in perm.iter().enumerate() {
            inv[*old] = new;
        }
        let mut xp = Tensor::zeros(6, 3);
        let mut lp = vec![Vec::new(); 6];
        for new in 0..6 {
            xp.row_mut(new).copy_from_slice(x.row(perm[new]));
            lp[new] = lists[perm[new]].iter().map(|o| inv[*o]).collect();
        }
        let mut t = Tape::new();
        let e = gat_net(&mut t, &ps, &x, &Arc::new(Csr::from_lists(&lists).unwrap()));
        let mut t2 = Tape::new();
        let ep = gat_net(&mut t2, &ps, &xp, &Arc::new(Csr::from_lists(&lp).unwrap()));
        for new in 0..6 {
            for (a, b) in t2.value(ep).row(new).iter().zip(t.value(e).row(perm[new])) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // identical features on a swapped pair give identical embeddings
        let mut same = rand_tensor(5, 2, 3);
        let r0 = same.row(0).to_vec();
        same.row_mut(1).copy_from_slice(&r0);
        let mut t3 = Tape::new();
        let e3 = gat_net(&mut t3, &ps, &same, &Arc::new(Csr::from_lists(&[vec![1], vec![0]]).unwrap()));
        assert_eq!(t3.value(e3).row(0), t3.value(e3).row(1));
    }

    #[test]
    fn adjacency_validation() {
        assert!(Csr::from_lists(&[vec![1], vec![]]).is_err());
        assert!(Csr::from_lists(&[vec![5]]).is_err());
        assert!(Csr::from_lists(&[vec![0]]).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        let seg = Arc::new(vec![0, 0]);
        let m = t.segment_mean(x, &seg, 1, &Arc::new(vec![true, true])).unwrap();
        assert_eq!(t.value(m).item(), 1.0);
        let m2 = t.segment_mean(x, &seg, 1, &Arc::new(vec![false, true])).unwrap();
        assert_eq!(t.value(m2).item(), 2.0);
        assert_eq!(t.segment_mean(x, &seg, 1, &Arc::new(vec![false, false])).unwrap_err(), NeuralError::EmptyMask);
    }

    #[test]
    fn softmax_and_straight_through() {
        let ps = params(4, &[("w", 3, 4)]);
        let x = rand_tensor(1, 3, 3);
        check_grads(
            &ps,
            &|t, p| {
                let xv = t.leaf(x.clone()).unwrap();
                let w = t.param(p, "w").unwrap();
                let y = t.matmul(xv, w).unwrap();
                let s = t.softmax_rows(y).unwrap();
                let sq = t.square(s).unwrap();
                t.mean_all(sq).unwrap()
            },
            1e-6,
        );
        let mut t = Tape::new();
        let l = t.leaf(Tensor::from_vec(2, 3, vec![0.1, 0.9, 0.3, 2.0, 2.0, -1.0]).unwrap()).unwrap();
        let h = t.straight_through(l).unwrap();
        assert_eq!(t.value(h).data, vec![0., 1., 0., 1., 0., 0.]);
        let s = t.softmax_rows(l).unwrap();
        for r in 0..2 {
            assert!((t.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_routes_gradients_by_mask() {
        let ps = params(4, &[("a", 3, 2), ("b", 3, 2)]);
        let mask = Arc::new(vec![false, true, false]);
        let mut t = Tape::new();
        let a = t.param(&ps, "a").unwrap();
        let b = t.param(&ps, "b").unwrap();
        let y = t.blend_rows(a, b, &mask).unwrap();
        let l = t.mean_all(y).unwrap();
        let g = t.backward(l).unwrap();
        let mut acc = ps.clone();
        g.apply_to(&mut acc);
        let k = 1.0 / 6.0;
        assert_eq!(acc.grad("a").unwrap().data, vec![k, k, 0., 0., k, k]);
        assert_eq!(acc.grad("b").unwrap().data, vec![0., 0., k, k, 0., 0.]);
    }

    #[test]
    fn non_finite_trips() {
        let mut t = Tape::new();
        assert_eq!(t.leaf(Tensor::scalar(f64::NAN)).unwrap_err(), NeuralError::NonFinite("leaf"));
        let x = t.leaf(Tensor::scalar(1e200)).unwrap();
        assert_eq!(t.square(x).unwrap_err(), NeuralError::NonFinite("square"));
    }

    #[test]
    fn descent_reduces_quadratic() {
        let mut ps = params(7, &[("w", 2, 1)]);
        let x = Tensor::from_vec(2, 2, vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let target = Tensor::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let loss = |ps: &ParamSet| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone()).unwrap();
            let w = t.param(ps, "w").unwrap();
            let y = t.matmul(xv, w).unwrap();
            let tv = t.leaf(target.clone()).unwrap();
            let d = t.sub(y, tv).unwrap();
            let s = t.square(d).unwrap();
            let l = t.mean_all(s).unwrap();
            (t.value(l).item(), t.backward(l).unwrap())
        };
        let (l0, g) = loss(&ps);
        g.apply_to(&mut ps);
        ps.sgd_step(0.05);
        let (l1, _) = loss(&ps);
        assert!(l1 < l0);
    }
}
