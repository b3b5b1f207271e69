//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Discrete inputs
//! (index lists, group ids, row weights, kernel radii) are stored as
//! constants of the tape; gradients flow only through [`Var`] operands.

use std::collections::HashMap;

use rayon::prelude::*;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Geometry of a 3D rotary embedding applied to multi-head rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotarySpec {
    pub heads: usize,
    pub head_dim: usize,
    /// Rotated dims per head; split equally across x, y, z.
    pub rotary_dim: usize,
    pub base: f64,
    /// Length mapped to one radian of phase at the lowest frequency.
    pub scale: f64,
}

impl RotarySpec {
    pub fn validate(&self) -> Result<()> {
        if !self.rotary_dim.is_multiple_of(6)
            || self.rotary_dim > self.head_dim
            || self.rotary_dim == 0
        {
            return Err(Error::invalid(
                "rotary config",
                format!(
                    "rotary dim {} must be a positive multiple of 6 and at most the head dim {}",
                    self.rotary_dim, self.head_dim
                ),
            ));
        }
        if !(self.scale > 0.0) || !(self.base > 0.0) {
            return Err(Error::invalid(
                "rotary config",
                "scale and base must be positive",
            ));
        }
        Ok(())
    }

    /// Angular frequency (radians per unit length) of pair `f` within an axis block.
    pub fn frequency(&self, f: usize) -> f64 {
        let axis_dim = (self.rotary_dim / 3) as f64;
        self.base.powf(-2.0 * f as f64 / axis_dim) / self.scale
    }
}

/// Cubic-spline SPH kernel with support `2h` and 3D normalization.
#[derive(Clone, Copy, Debug)]
pub struct CubicSpline {
    pub h: f64,
}

impl CubicSpline {
    fn sigma(&self) -> f64 {
        1.0 / (std::f64::consts::PI * self.h.powi(3))
    }

    pub fn w(&self, r: f64) -> f64 {
        let q = r / self.h;
        let s = self.sigma();
        if q < 1.0 {
            s * (1.0 - 1.5 * q * q + 0.75 * q * q * q)
        } else if q < 2.0 {
            s * 0.25 * (2.0 - q).powi(3)
        } else {
            0.0
        }
    }

    /// dW/dr.
    pub fn dw(&self, r: f64) -> f64 {
        let q = r / self.h;
        let s = self.sigma() / self.h;
        if q < 1.0 {
            s * (-3.0 * q + 2.25 * q * q)
        } else if q < 2.0 {
            s * (-0.75 * (2.0 - q).powi(2))
        } else {
            0.0
        }
    }

    /// d²W/dr².
    pub fn d2w(&self, r: f64) -> f64 {
        let q = r / self.h;
        let s = self.sigma() / (self.h * self.h);
        if q < 1.0 {
            s * (-3.0 + 4.5 * q)
        } else if q < 2.0 {
            s * 1.5 * (2.0 - q)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    RowScale(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Softmax(Var),
    Cosine(Var, Var),
    Lattice {
        lattice: Var,
        feats: Var,
        disp: Var,
        res: usize,
        radius: f64,
    },
    Rotary {
        x: Var,
        anchors: Var,
        spec: RotarySpec,
    },
    Attend {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    SumAll(Var),
    RowSum(Var),
    SphDiv {
        x: Var,
        v: Var,
        masses: Vec<f64>,
        pairs: Vec<(usize, usize)>,
        kernel: CubicSpline,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    bound: HashMap<String, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameters take part in differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
        }
    }

    /// Graph that binds parameters as constants; used for inference.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let t = store.tensor(path)?;
        let v = self.push(t, Op::Leaf, self.track_params);
        self.bound.insert(path.to_string(), v);
        self.params.push((path.to_string(), v));
        Ok(v)
    }

    /// Parameters bound to this graph, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(r, c, data).unwrap(), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.shape(a), self.shape(row));
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let b = self.data(row);
        let data = self
            .data(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(b).map(|(p, q)| p + q))
            .collect();
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(Tensor::new(r, c, data)?, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|x| x * s).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::new(r, c, data).unwrap(), Op::Scale(a, s), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} @ ({n}x{k2})^T")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulNT(a, b), tracked))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no operands"));
        };
        let rows = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat",
                format!("row counts {} vs {}", rows, self.shape(bad).0),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(rows, cols, out)?,
            Op::Concat(parts.to_vec()),
            tracked,
        ))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} of {c} columns"),
            ));
        }
        let v = self.value(a);
        let out = (0..r)
            .flat_map(|i| v.row(i)[start..start + len].iter().copied())
            .collect();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(r, len, out)?, Op::Slice(a, start), tracked))
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather", format!("index {bad} of {r} rows")));
        }
        let v = self.value(a);
        let out = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(idx.len(), c, out)?,
            Op::Gather(a, idx.to_vec()),
            tracked,
        ))
    }

    /// Sums rows sharing a group id; groups without members give zero rows.
    pub fn segment_sum(&mut self, a: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if groups.len() != r {
            return Err(Error::shape(
                "segment_sum",
                format!("{} group ids for {r} rows", groups.len()),
            ));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::shape(
                "segment_sum",
                format!("group {bad} of {n_groups}"),
            ));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n_groups * c];
        for (i, &g) in groups.iter().enumerate() {
            for (o, x) in out[g * c..(g + 1) * c].iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(n_groups, c, out)?,
            Op::SegmentSum(a, groups.to_vec()),
            tracked,
        ))
    }

    /// Multiplies row `i` by the constant `w[i]`.
    pub fn row_scale(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if w.len() != r {
            return Err(Error::shape(
                "row_scale",
                format!("{} weights for {r} rows", w.len()),
            ));
        }
        let v = self.value(a);
        let out = (0..r)
            .flat_map(|i| v.row(i).iter().map(move |x| x * w[i]))
            .collect();
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(r, c, out)?,
            Op::RowScale(a, w.to_vec()),
            tracked,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::new(r, c, out).unwrap(), Op::Relu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::new(r, c, out).unwrap(), Op::Sigmoid(a), tracked)
    }

    /// Row-wise layer normalization with learnable `1 x C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{r}x{c} input with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let (mean, rstd) = moments(row);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(k, &z)| (z - mean) * rstd * g[k] + b[k]),
            );
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::new(r, c, out)?,
            Op::LayerNorm { x, gain, bias },
            tracked,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &z in row {
                let e = (z - mx).exp();
                sum += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= sum;
            }
        }
        let tracked = self.tracked(a);
        self.push(Tensor::new(r, c, out).unwrap(), Op::Softmax(a), tracked)
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    /// Pairs involving a zero row are 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::shape("cosine", format!("{m}x{k} vs {n}x{k2}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let na: Vec<f64> = (0..m).map(|i| dot(av.row(i), av.row(i)).sqrt()).collect();
        let nb: Vec<f64> = (0..n).map(|j| dot(bv.row(j), bv.row(j)).sqrt()).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let d = na[i] * nb[j];
                if d > 0.0 {
                    out[i * n + j] = dot(av.row(i), bv.row(j)) / d;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::Cosine(a, b), tracked))
    }

    /// Continuous convolution with a trilinear lattice kernel.
    ///
    /// `lattice` is `(res^3 * C_in) x C_out` (vertex-major, each vertex a
    /// `C_in x C_out` block). Row `p` of the output is `u_p W(r_p)` where
    /// `u_p` is row `p` of `feats` and `r_p` row `p` of `disp`; rows with
    /// `|r_p| > radius` are zero.
    pub fn lattice_conv(
        &mut self,
        lattice: Var,
        feats: Var,
        disp: Var,
        res: usize,
        radius: f64,
    ) -> Result<Var> {
        let ((lr, cout), (p, cin), (dp, dc)) =
            (self.shape(lattice), self.shape(feats), self.shape(disp));
        if res < 2 || lr != res * res * res * cin || dp != p || dc != 3 {
            return Err(Error::shape(
                "lattice_conv",
                format!(
                    "lattice {lr}x{cout} (res {res}), features {p}x{cin}, displacements {dp}x{dc}"
                ),
            ));
        }
        let (lv, fv, dv) = (self.data(lattice), self.value(feats), self.value(disp));
        let mut out = vec![0.0; p * cout];
        for q in 0..p {
            let Some(cell) = LatticeCell::locate(dv.row(q), res, radius) else {
                continue;
            };
            let u = fv.row(q);
            let orow = &mut out[q * cout..(q + 1) * cout];
            for (vertex, w) in cell.corners() {
                let block = &lv[vertex * cin * cout..(vertex + 1) * cin * cout];
                for (c, &uc) in u.iter().enumerate() {
                    let s = w * uc;
                    if s == 0.0 {
                        continue;
                    }
                    for (o, &t) in orow.iter_mut().zip(&block[c * cout..(c + 1) * cout]) {
                        *o += s * t;
                    }
                }
            }
        }
        let tracked = self.tracked(lattice) || self.tracked(feats) || self.tracked(disp);
        Ok(self.push(
            Tensor::new(p, cout, out)?,
            Op::Lattice {
                lattice,
                feats,
                disp,
                res,
                radius,
            },
            tracked,
        ))
    }

    /// Rotates the leading `rotary_dim` entries of every head by angles
    /// proportional to the row's 3D anchor.
    pub fn rotary(&mut self, x: Var, anchors: Var, spec: RotarySpec) -> Result<Var> {
        spec.validate()?;
        let ((m, d), (am, ac)) = (self.shape(x), self.shape(anchors));
        if d != spec.heads * spec.head_dim || am != m || ac != 3 {
            return Err(Error::shape(
                "rotary",
                format!(
                    "{m}x{d} rows with {am}x{ac} anchors for {} heads of {}",
                    spec.heads, spec.head_dim
                ),
            ));
        }
        let mut out = self.data(x).to_vec();
        let av = self.value(anchors);
        for_each_rotation(&spec, m, |row, col, axis, freq| {
            let theta = av.get(row, axis) * freq;
            let (s, c) = theta.sin_cos();
            let k = row * d + col;
            let (x0, x1) = (out[k], out[k + 1]);
            out[k] = x0 * c - x1 * s;
            out[k + 1] = x0 * s + x1 * c;
        });
        let tracked = self.tracked(x) || self.tracked(anchors);
        Ok(self.push(
            Tensor::new(m, d, out)?,
            Op::Rotary { x, anchors, spec },
            tracked,
        ))
    }

    /// Multi-head scaled dot-product attention `softmax(q k^T / sqrt(dh)) v`
    /// without materializing the attention matrix on the tape.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let ((mq, dq), (mk, dk), (mv, dv)) = (self.shape(q), self.shape(k), self.shape(v));
        if dq != dk || mk != mv || mk == 0 || heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(Error::shape(
                "attend",
                format!("q {mq}x{dq}, k {mk}x{dk}, v {mv}x{dv}, {heads} heads"),
            ));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (hd, hv) = (dq / heads, dv / heads);
        let mut out = vec![0.0; mq * dv];
        out.par_chunks_mut(dv).enumerate().for_each(|(i, orow)| {
            let mut p = vec![0.0; mk];
            for h in 0..heads {
                attention_row(qv, kv, i, h, hd, &mut p);
                let o = &mut orow[h * hv..(h + 1) * hv];
                for (j, &pj) in p.iter().enumerate() {
                    for (x, &y) in o.iter_mut().zip(&vv.row(j)[h * hv..(h + 1) * hv]) {
                        *x += pj * y;
                    }
                }
            }
        });
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            Tensor::new(mq, dv, out)?,
            Op::Attend { q, k, v, heads },
            tracked,
        ))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `R x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .data(a)
            .chunks(c.max(1))
            .map(|row| row.iter().sum())
            .take(r)
            .collect();
        let tracked = self.tracked(a);
        self.push(Tensor::new(r, 1, out).unwrap(), Op::RowSum(a), tracked)
    }

    /// SPH velocity divergence estimate per particle (`N x 1`).
    ///
    /// `pairs` lists ordered `(i, j)`, `i != j`, within the kernel support;
    /// the density sum adds the self term analytically.
    pub fn sph_divergence(
        &mut self,
        x: Var,
        v: Var,
        masses: &[f64],
        pairs: &[(usize, usize)],
        kernel: CubicSpline,
    ) -> Result<Var> {
        let n = self.shape(x).0;
        if self.shape(x) != (n, 3) || self.shape(v) != (n, 3) || masses.len() != n {
            return Err(Error::shape(
                "sph_divergence",
                format!(
                    "positions {:?}, velocities {:?}, {} masses",
                    self.shape(x),
                    self.shape(v),
                    masses.len()
                ),
            ));
        }
        let (rho, s) = sph_sums(self.value(x), self.value(v), masses, pairs, kernel);
        if let Some(i) = rho.iter().position(|&r| r <= 0.0) {
            return Err(Error::invalid(
                "sph density",
                format!("particle {i} has zero density"),
            ));
        }
        let out = s.iter().zip(&rho).map(|(s, r)| -s / r).collect();
        let tracked = self.tracked(x) || self.tracked(v);
        Ok(self.push(
            Tensor::new(n, 1, out)?,
            Op::SphDiv {
                x,
                v,
                masses: masses.to_vec(),
                pairs: pairs.to_vec(),
                kernel,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar. Returns gradients for every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {r}x{c}"),
            ));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        if !self.tracked(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = vec![1.0];
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backprop(node, &g, &mut grads);
            // Keep interior gradients readable for inspection.
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.tracked(v) {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; self.data(v).len()];
            }
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(o, (x, y))| *o += x * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (x, y))| *o += x * y)
                });
            }
            Op::AddRow(a, row) => {
                let c = self.shape(*row).1;
                acc(*a, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for gr in g.chunks_exact(c.max(1)) {
                        add_into(s, gr);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(o, x)| *o += k * x)
            }),
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.shape(*a), self.shape(*b).1);
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            s[i * k + p] += dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in s[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let ((m, k), n) = (self.shape(*a), self.shape(*b).0);
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in s[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&bv[j * k..(j + 1) * k])
                            {
                                *o += x * y;
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in s[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&av[i * k..(i + 1) * k])
                            {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    acc(p, &mut |s| {
                        for (i, sr) in s.chunks_exact_mut(c.max(1)).enumerate() {
                            add_into(sr, &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Slice(a, start) => {
                let (c, len) = (self.shape(*a).1, node.value.cols());
                acc(*a, &mut |s| {
                    for (i, gr) in g.chunks_exact(len.max(1)).enumerate() {
                        add_into(&mut s[i * c + start..i * c + start + len], gr);
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SegmentSum(a, groups) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (i, &gi) in groups.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[gi * c..(gi + 1) * c]);
                    }
                });
            }
            Op::RowScale(a, w) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (i, sr) in s.chunks_exact_mut(c.max(1)).enumerate() {
                        for (o, x) in sr.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o += w[i] * x;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                acc(*a, &mut |s| {
                    for ((o, x), z) in s.iter_mut().zip(g).zip(av) {
                        if *z > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(y) {
                        *o += x * y * (1.0 - y);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.shape(*x);
                let (xv, gv) = (self.value(*x), self.data(*gain));
                let mut gx = vec![0.0; r * c];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for i in 0..r {
                    let row = xv.row(i);
                    let (mean, rstd) = moments(row);
                    let gr = &g[i * c..(i + 1) * c];
                    let xhat: Vec<f64> = row.iter().map(|z| (z - mean) * rstd).collect();
                    let gxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = gxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&gxhat, &xhat) / c as f64;
                    for k in 0..c {
                        gx[i * c + k] = rstd * (gxhat[k] - m1 - xhat[k] * m2);
                        ggain[k] += gr[k] * xhat[k];
                        gbias[k] += gr[k];
                    }
                }
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*gain, &mut |s| add_into(s, &ggain));
                acc(*bias, &mut |s| add_into(s, &gbias));
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((sr, gr), yr) in s
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let inner = dot(gr, yr);
                        for ((o, gx), yx) in sr.iter_mut().zip(gr).zip(yr) {
                            *o += yx * (gx - inner);
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.shape();
                let n = bv.rows();
                let na: Vec<f64> = (0..m).map(|i| dot(av.row(i), av.row(i)).sqrt()).collect();
                let nb: Vec<f64> = (0..n).map(|j| dot(bv.row(j), bv.row(j)).sqrt()).collect();
                let cv = node.value.data();
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = na[i] * nb[j];
                        let gij = g[i * n + j];
                        if d == 0.0 || gij == 0.0 {
                            continue;
                        }
                        let c = cv[i * n + j];
                        for t in 0..k {
                            let (x, y) = (av.get(i, t), bv.get(j, t));
                            ga[i * k + t] += gij * (y / d - c * x / (na[i] * na[i]));
                            gb[j * k + t] += gij * (x / d - c * y / (nb[j] * nb[j]));
                        }
                    }
                }
                acc(*a, &mut |s| add_into(s, &ga));
                acc(*b, &mut |s| add_into(s, &gb));
            }
            Op::Lattice {
                lattice,
                feats,
                disp,
                res,
                radius,
            } => {
                let (cin, cout) = (self.shape(*feats).1, self.shape(*lattice).1);
                let (lv, fv, dv) = (self.data(*lattice), self.value(*feats), self.value(*disp));
                let p = fv.rows();
                let want_l = self.tracked(*lattice);
                let want_f = self.tracked(*feats);
                let want_d = self.tracked(*disp);
                let mut gl = if want_l {
                    vec![0.0; lv.len()]
                } else {
                    Vec::new()
                };
                let mut gf = vec![0.0; if want_f { p * cin } else { 0 }];
                let mut gd = vec![0.0; if want_d { p * 3 } else { 0 }];
                let mut uw = vec![0.0; cout];
                for q in 0..p {
                    let Some(cell) = LatticeCell::locate(dv.row(q), *res, *radius) else {
                        continue;
                    };
                    let u = fv.row(q);
                    let gq = &g[q * cout..(q + 1) * cout];
                    for (corner, (vertex, w)) in cell.corners().enumerate() {
                        let block = &lv[vertex * cin * cout..(vertex + 1) * cin * cout];
                        if want_l {
                            let gblock = &mut gl[vertex * cin * cout..(vertex + 1) * cin * cout];
                            for (c, &uc) in u.iter().enumerate() {
                                let s = w * uc;
                                for (o, &x) in gblock[c * cout..(c + 1) * cout].iter_mut().zip(gq) {
                                    *o += s * x;
                                }
                            }
                        }
                        if want_f {
                            for c in 0..cin {
                                gf[q * cin + c] += w * dot(&block[c * cout..(c + 1) * cout], gq);
                            }
                        }
                        if want_d {
                            // g . (u Theta_vertex)
                            uw.iter_mut().for_each(|x| *x = 0.0);
                            for (c, &uc) in u.iter().enumerate() {
                                for (o, &t) in uw.iter_mut().zip(&block[c * cout..(c + 1) * cout]) {
                                    *o += uc * t;
                                }
                            }
                            let proj = dot(&uw, gq);
                            for d in 0..3 {
                                gd[q * 3 + d] += proj * cell.weight_derivative(corner, d);
                            }
                        }
                    }
                }
                acc(*lattice, &mut |s| add_into(s, &gl));
                acc(*feats, &mut |s| add_into(s, &gf));
                acc(*disp, &mut |s| add_into(s, &gd));
            }
            Op::Rotary { x, anchors, spec } => {
                let (m, d) = self.shape(*x);
                let av = self.value(*anchors);
                let y = node.value.data();
                let mut gx = g.to_vec();
                let mut ga = vec![0.0; m * 3];
                for_each_rotation(spec, m, |row, col, axis, freq| {
                    let theta = av.get(row, axis) * freq;
                    let (s, c) = theta.sin_cos();
                    let k = row * d + col;
                    let (g0, g1) = (g[k], g[k + 1]);
                    gx[k] = g0 * c + g1 * s;
                    gx[k + 1] = -g0 * s + g1 * c;
                    ga[row * 3 + axis] += (-g0 * y[k + 1] + g1 * y[k]) * freq;
                });
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*anchors, &mut |s| add_into(s, &ga));
            }
            Op::Attend { q, k, v, heads } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (mq, dq) = qv.shape();
                let (mk, dv) = vv.shape();
                let (hd, hv) = (dq / heads, dv / heads);
                let inv = 1.0 / (hd as f64).sqrt();
                let mut gq = vec![0.0; mq * dq];
                let mut gk = vec![0.0; mk * dq];
                let mut gv = vec![0.0; mk * dv];
                let mut p = vec![0.0; mk];
                let mut dp = vec![0.0; mk];
                for i in 0..mq {
                    for h in 0..*heads {
                        attention_row(qv, kv, i, h, hd, &mut p);
                        let go = &g[i * dv + h * hv..i * dv + (h + 1) * hv];
                        for j in 0..mk {
                            dp[j] = dot(go, &vv.row(j)[h * hv..(h + 1) * hv]);
                            for (o, &x) in gv[j * dv + h * hv..j * dv + (h + 1) * hv]
                                .iter_mut()
                                .zip(go)
                            {
                                *o += p[j] * x;
                            }
                        }
                        let inner = dot(&p, &dp);
                        let qi = &qv.row(i)[h * hd..(h + 1) * hd];
                        for j in 0..mk {
                            let ds = p[j] * (dp[j] - inner) * inv;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(j)[h * hd..(h + 1) * hd];
                            for t in 0..hd {
                                gq[i * dq + h * hd + t] += ds * kj[t];
                                gk[j * dq + h * hd + t] += ds * qi[t];
                            }
                        }
                    }
                }
                acc(*q, &mut |s| add_into(s, &gq));
                acc(*k, &mut |s| add_into(s, &gk));
                acc(*v, &mut |s| add_into(s, &gv));
            }
            Op::SumAll(a) => {
                let x = g[0];
                acc(*a, &mut |s| s.iter_mut().for_each(|o| *o += x));
            }
            Op::RowSum(a) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (sr, x) in s.chunks_exact_mut(c.max(1)).zip(g) {
                        sr.iter_mut().for_each(|o| *o += x);
                    }
                });
            }
            Op::SphDiv {
                x,
                v,
                masses,
                pairs,
                kernel,
            } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let n = xv.rows();
                let (rho, ssum) = sph_sums(xv, vv, masses, pairs, *kernel);
                let gs: Vec<f64> = (0..n).map(|i| -g[i] / rho[i]).collect();
                let grho: Vec<f64> = (0..n).map(|i| g[i] * ssum[i] / (rho[i] * rho[i])).collect();
                let mut gx = vec![0.0; n * 3];
                let mut gvv = vec![0.0; n * 3];
                for &(i, j) in pairs {
                    let d = [
                        xv.get(i, 0) - xv.get(j, 0),
                        xv.get(i, 1) - xv.get(j, 1),
                        xv.get(i, 2) - xv.get(j, 2),
                    ];
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if r == 0.0 || r >= 2.0 * kernel.h {
                        continue;
                    }
                    let w = [
                        vv.get(i, 0) - vv.get(j, 0),
                        vv.get(i, 1) - vv.get(j, 1),
                        vv.get(i, 2) - vv.get(j, 2),
                    ];
                    let (dw, d2w) = (kernel.dw(r), kernel.d2w(r));
                    let dot_dw = d[0] * w[0] + d[1] * w[1] + d[2] * w[2];
                    let mj = masses[j];
                    for k in 0..3 {
                        let grad_w = dw * d[k] / r;
                        gvv[i * 3 + k] += gs[i] * mj * grad_w;
                        gvv[j * 3 + k] -= gs[i] * mj * grad_w;
                        let ds = d2w * dot_dw * d[k] / (r * r)
                            + dw / r * (w[k] - dot_dw * d[k] / (r * r));
                        let drho = dw * d[k] / r;
                        let t = mj * (gs[i] * ds + grho[i] * drho);
                        gx[i * 3 + k] += t;
                        gx[j * 3 + k] -= t;
                    }
                }
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*v, &mut |s| add_into(s, &gvv));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Softmax-normalized attention weights of query row `i` over all keys for head `h`.
pub(crate) fn attention_row(q: &Tensor, k: &Tensor, i: usize, h: usize, hd: usize, p: &mut [f64]) {
    let inv = 1.0 / (hd as f64).sqrt();
    let qi = &q.row(i)[h * hd..(h + 1) * hd];
    let mut mx = f64::NEG_INFINITY;
    for (j, pj) in p.iter_mut().enumerate() {
        *pj = dot(qi, &k.row(j)[h * hd..(h + 1) * hd]) * inv;
        mx = mx.max(*pj);
    }
    let mut sum = 0.0;
    for pj in p.iter_mut() {
        *pj = (*pj - mx).exp();
        sum += *pj;
    }
    for pj in p.iter_mut() {
        *pj /= sum;
    }
}

/// Visits every rotated pair as `(row, first column, axis, angular frequency)`.
fn for_each_rotation(spec: &RotarySpec, rows: usize, mut f: impl FnMut(usize, usize, usize, f64)) {
    let axis_dim = spec.rotary_dim / 3;
    let freqs: Vec<f64> = (0..axis_dim / 2).map(|k| spec.frequency(k)).collect();
    for row in 0..rows {
        for h in 0..spec.heads {
            for axis in 0..3 {
                for (k, &freq) in freqs.iter().enumerate() {
                    f(row, h * spec.head_dim + axis * axis_dim + 2 * k, axis, freq);
                }
            }
        }
    }
}

/// Density and unnormalized divergence sums for the SPH estimator.
fn sph_sums(
    x: &Tensor,
    v: &Tensor,
    masses: &[f64],
    pairs: &[(usize, usize)],
    kernel: CubicSpline,
) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows();
    let mut rho: Vec<f64> = masses.iter().map(|m| m * kernel.w(0.0)).collect();
    let mut s = vec![0.0; n];
    for &(i, j) in pairs {
        let d = [
            x.get(i, 0) - x.get(j, 0),
            x.get(i, 1) - x.get(j, 1),
            x.get(i, 2) - x.get(j, 2),
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        rho[i] += masses[j] * kernel.w(r);
        if r == 0.0 {
            continue;
        }
        let dw = kernel.dw(r);
        let w = [
            v.get(i, 0) - v.get(j, 0),
            v.get(i, 1) - v.get(j, 1),
            v.get(i, 2) - v.get(j, 2),
        ];
        s[i] += masses[j] * dw / r * (w[0] * d[0] + w[1] * d[1] + w[2] * d[2]);
    }
    (rho, s)
}

/// Trilinear cell lookup for one displacement.
pub(crate) struct LatticeCell {
    base: [usize; 3],
    t: [f64; 3],
    res: usize,
    /// d t_d / d r_d
    slope: f64,
}

impl LatticeCell {
    /// `None` outside the support radius.
    pub(crate) fn locate(r: &[f64], res: usize, radius: f64) -> Option<Self> {
        if r[0] * r[0] + r[1] * r[1] + r[2] * r[2] > radius * radius {
            return None;
        }
        let top = (res - 1) as f64;
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let xi = (r[d] / radius + 1.0) * 0.5 * top;
            let n = xi.floor().clamp(0.0, top - 1.0);
            base[d] = n as usize;
            t[d] = (xi - n).clamp(0.0, 1.0);
        }
        Some(Self {
            base,
            t,
            res,
            slope: top / (2.0 * radius),
        })
    }

    /// The eight `(vertex index, weight)` corners, corner `k` having offset bits `(k&1, k>>1&1, k>>2&1)`.
    pub(crate) fn corners(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..8).map(move |k| {
            let delta = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let mut w = 1.0;
            for d in 0..3 {
                w *= if delta[d] == 1 {
                    self.t[d]
                } else {
                    1.0 - self.t[d]
                };
            }
            let (x, y, z) = (
                self.base[0] + delta[0],
                self.base[1] + delta[1],
                self.base[2] + delta[2],
            );
            ((x * self.res + y) * self.res + z, w)
        })
    }

    /// d(weight of corner k)/d r_d.
    fn weight_derivative(&self, k: usize, d: usize) -> f64 {
        let delta = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
        let mut w = 1.0;
        for e in 0..3 {
            if e == d {
                w *= if delta[e] == 1 { 1.0 } else { -1.0 };
            } else {
                w *= if delta[e] == 1 {
                    self.t[e]
                } else {
                    1.0 - self.t[e]
                };
            }
        }
        w * self.slope
    }
}
