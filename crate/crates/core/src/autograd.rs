//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameters live in
//! a [`ParamStore`] outside the tape so a forward pass never copies them.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            values: self
                .values
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }
}

/// Dense gradients laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.values.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.values {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|a| a.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (i, g) in self.values.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.names[i].clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MulConst(Var, Array2<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
    OffPath { score: Var, rows: Vec<(usize, Vec<usize>)> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct TapeGrads {
    pub params: Gradients,
    inputs: Vec<Option<Array2<f64>>>,
}

impl TapeGrads {
    /// Gradient with respect to an input created with `requires_grad`.
    pub fn input(&self, v: Var) -> Option<&Array2<f64>> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Array2::zeros((0, 0)), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Rows `ids` of a parameter table.
    pub fn gather(&mut self, param: ParamId, ids: &[usize]) -> Result<Var> {
        let table = self.store.get(param);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if id >= table.nrows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: table.nrows(),
                });
            }
            out.row_mut(r).assign(&table.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err("matmul_t", av.shape(), bv.shape()));
        }
        let out = av.dot(&bv.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let out = av + bv;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let out = xv + rv;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("mul_const", xv.shape(), c.shape()));
        }
        let out = xv * &c;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let d = xv.ncols();
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * gv + bv;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction. With `causal`, entries above
    /// the diagonal are excluded and come out exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, (src, mut dst)) in xv.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let width = if causal { (i + 1).min(src.len()) } else { src.len() };
            let max = src
                .iter()
                .take(width)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..width {
                let e = (src[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for j in 0..width {
                dst[j] /= total;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.ncols() {
            return Err(shape_err("slice_cols", xv.shape(), &[start, width]));
        }
        let out = xv.slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat_cols: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over non-`None` rows of `−log softmax(logits)[target]`. Returns
    /// a `1 × 1` node; zero when every row is padding.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let k = lv.ncols();
        let mut probs = Array2::zeros(lv.raw_dim());
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[[r, j]] = (row[j] - lse).exp();
            }
            if let Some(t) = *t {
                if t >= k {
                    return Err(Error::TokenOutOfRange { id: t, size: k });
                }
                total += lse - row[t];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `Σ_r (1 − Σ_{j∈cols_r} score[r, j])` over the given `(row, cols)`
    /// pairs, as a `1 × 1` node.
    pub fn off_path_sum(&mut self, score: Var, rows: Vec<(usize, Vec<usize>)>) -> Result<Var> {
        let sv = self.value(score);
        let mut total = 0.0;
        for (r, cols) in &rows {
            if *r >= sv.nrows() || cols.iter().any(|&c| c >= sv.ncols()) {
                return Err(shape_err("off_path_sum", sv.shape(), &[*r]));
            }
            total += 1.0 - cols.iter().map(|&c| sv[[*r, c]]).sum::<f64>();
        }
        let rg = self.rg(score);
        Ok(self.push(scalar(total), Op::OffPath { score, rows }, rg))
    }

    /// `Σ w_k x_k` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Shape("weighted_sum of nothing".into()))?;
        let mut out = Array2::zeros(self.value(first.0).raw_dim());
        for &(v, w) in terms {
            let val = self.value(v);
            if val.shape() != out.shape() {
                return Err(shape_err("weighted_sum", out.shape(), val.shape()));
            }
            out.scaled_add(w, val);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Back-propagates from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> TapeGrads {
        let mut params = self.store.zero_grads();
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Input => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(id) => *params.get_mut(*id) += &g,
                Op::Gather { param, ids } => {
                    let pg = params.get_mut(*param);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = pg.row_mut(id);
                        dst += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| {
                            if y <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    acc(&mut grads, *x, d);
                }
                Op::MulConst(x, c) => acc(&mut grads, *x, g * c),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*gain) {
                        acc(
                            &mut grads,
                            *gain,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if self.rg(*x) {
                        let gv = self.value(*gain);
                        let dxhat = &g * gv;
                        let d = xhat.ncols() as f64;
                        let mut dx = Array2::zeros(xhat.raw_dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let mean_dh = dh.sum() / d;
                            let mean_dh_xh = dh.dot(&xh) / d;
                            let inv = inv_std[r];
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let s = &node.value;
                    let mut d = &g * s;
                    for (mut drow, srow) in d.rows_mut().into_iter().zip(s.rows()) {
                        let dot: f64 = drow.sum();
                        Zip::from(&mut drow).and(&srow).for_each(|dv, &sv| *dv -= sv * dot);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut d = Array2::zeros(probs.raw_dim());
                    if *count > 0 {
                        let scale = g[[0, 0]] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let mut row = d.row_mut(r);
                                row.assign(&probs.row(r));
                                row[t] -= 1.0;
                                row.mapv_inplace(|v| v * scale);
                            }
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::OffPath { score, rows } => {
                    let mut d = Array2::zeros(self.value(*score).raw_dim());
                    let gs = g[[0, 0]];
                    for (r, cols) in rows {
                        for &c in cols {
                            d[[*r, c]] -= gs;
                        }
                    }
                    acc(&mut grads, *score, d);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, &g * w);
                        }
                    }
                }
            }
        }

        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Input if n.requires_grad => grads[i].take(),
                _ => None,
            })
            .collect();
        TapeGrads { params, inputs }
    }
}
