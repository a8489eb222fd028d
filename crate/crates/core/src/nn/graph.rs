//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into nodes that
//! depend on a trainable leaf. Ops never return errors directly: a
//! non-finite result or a degenerate quaternion records the first fault,
//! which [`Graph::status`] reports.

use std::collections::HashMap;
use std::rc::Rc;

use super::matrix::{matmul, matmul_nt, matmul_tn, matmul_tn_acc, Mat};
use super::params::{ParamId, ParameterStore};
use crate::error::{DfnError, Result};
use crate::kinematics::MIN_QUAT_NORM;
use crate::kinematics::{mat_mul, mat_vec, quat_to_matrix, transpose, Mat3, Quaternion, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Bone structure consumed by the FK op.
#[derive(Debug, Clone)]
pub struct FkSpec {
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vec3>,
}

impl FkSpec {
    pub fn from_skeleton(skeleton: &crate::mocap::Skeleton) -> FkSpec {
        FkSpec {
            parents: skeleton.parents(),
            offsets: skeleton.joints().iter().map(|j| j.offset).collect(),
        }
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }
}

#[derive(Debug)]
struct FkCache {
    /// Per row, per joint: local and world rotation matrices.
    local: Vec<Vec<Mat3>>,
    world: Vec<Vec<Mat3>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PickRows(Vec<Var>, Vec<(usize, usize)>),
    SumAll(Var),
    ColScale(Var, Rc<Vec<f64>>),
    QuatNormalize(Var),
    AddToY(Var, Var),
    Fk(Var, Rc<FkSpec>, FkCache),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
    fault: Option<DfnError>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(DfnError::NonFinite {
                context: format!("op '{name}' (node {})", self.nodes.len()),
            });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First fault recorded while building the graph, if any.
    pub fn status(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(DfnError::NonFinite { context }) => Err(DfnError::NonFinite {
                context: context.clone(),
            }),
            Some(DfnError::DegenerateQuaternion { joint, norm }) => Err(DfnError::DegenerateQuaternion {
                joint: *joint,
                norm: *norm,
            }),
            Some(other) => Err(DfnError::InvalidInput(other.to_string())),
        }
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Input whose gradient is wanted (e.g. for sensitivity probes).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let value = store.tensor(id).to_mat();
        let v = self.push(value, Op::Leaf, !store.is_frozen(id), "param");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.cols, vb.rows,
            "matmul {}x{} * {}x{}",
            va.rows, va.cols, vb.rows, vb.cols
        );
        let out = matmul(va, vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert!(vb.rows == 1 && vb.cols == va.cols, "bias shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng, "add_bias")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.same_shape(vb),
            "elementwise shapes {}x{} vs {}x{}",
            va.rows,
            va.cols,
            vb.rows,
            vb.cols
        );
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng, "leaky_relu")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng, "exp")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng, "square")
    }

    /// Gradient passes only where the input lies inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng, "clamp")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice out of range");
        let mut out = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng, "slice_cols")
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn pick_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Var {
        let cols = self.value(sources[0]).cols;
        let mut out = Mat::zeros(picks.len(), cols);
        for (i, (s, r)) in picks.iter().enumerate() {
            let v = self.value(sources[*s]);
            assert_eq!(v.cols, cols, "pick_rows width mismatch");
            out.row_mut(i).copy_from_slice(v.row(*r));
        }
        let ng = sources.iter().any(|s| self.ng(*s));
        self.push(out, Op::PickRows(sources.to_vec(), picks.to_vec()), ng, "pick_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::SumAll(a), ng, "sum_all")
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn col_scale(&mut self, a: Var, scale: Rc<Vec<f64>>) -> Var {
        let v = self.value(a);
        assert_eq!(v.cols, scale.len(), "col_scale width");
        let mut out = v.clone();
        for r in 0..out.rows {
            for (x, s) in out.row_mut(r).iter_mut().zip(scale.iter()) {
                *x *= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ColScale(a, scale), ng, "col_scale")
    }

    /// Normalizes each consecutive group of four columns to unit length.
    pub fn quat_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.cols % 4, 0, "quaternion block width");
        let mut out = v.clone();
        let mut fault = None;
        for r in 0..out.rows {
            for (j, q) in out.row_mut(r).chunks_exact_mut(4).enumerate() {
                let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > MIN_QUAT_NORM) && fault.is_none() {
                    fault = Some(DfnError::DegenerateQuaternion { joint: j, norm: n });
                }
                let n = n.max(MIN_QUAT_NORM);
                q.iter_mut().for_each(|x| *x /= n);
            }
        }
        if self.fault.is_none() {
            self.fault = fault;
        }
        let ng = self.ng(a);
        self.push(out, Op::QuatNormalize(a), ng, "quat_normalize")
    }

    /// Adds the `B x 1` column `height` to the Y coordinate of every joint.
    pub fn add_to_y(&mut self, pos: Var, height: Var) -> Var {
        let (vp, vh) = (self.value(pos), self.value(height));
        assert!(
            vh.cols == 1 && vh.rows == vp.rows && vp.cols % 3 == 0,
            "add_to_y shapes"
        );
        let mut out = vp.clone();
        for r in 0..out.rows {
            let h = vh.data[r];
            for p in out.row_mut(r).chunks_exact_mut(3) {
                p[1] += h;
            }
        }
        let ng = self.ng(pos) || self.ng(height);
        self.push(out, Op::AddToY(pos, height), ng, "add_to_y")
    }

    /// Differentiable forward kinematics. Input rows hold `4 * joints` unit
    /// quaternions `(w, x, y, z)`; output rows hold `3 * joints` positions
    /// with the root at the origin.
    pub fn forward_kinematics(&mut self, quats: Var, spec: Rc<FkSpec>) -> Var {
        let v = self.value(quats);
        let nj = spec.joints();
        assert_eq!(v.cols, 4 * nj, "fk input width");
        let mut out = Mat::zeros(v.rows, 3 * nj);
        let mut cache = FkCache {
            local: Vec::with_capacity(v.rows),
            world: Vec::with_capacity(v.rows),
        };
        for r in 0..v.rows {
            let row = v.row(r);
            let mut local = Vec::with_capacity(nj);
            let mut world: Vec<Mat3> = Vec::with_capacity(nj);
            let mut pos: Vec<Vec3> = Vec::with_capacity(nj);
            for j in 0..nj {
                let m = quat_to_matrix(&Quaternion::from_slice(&row[4 * j..4 * j + 4]));
                match spec.parents[j] {
                    None => {
                        world.push(m);
                        pos.push([0.0; 3]);
                    }
                    Some(p) => {
                        let o = mat_vec(&world[p], spec.offsets[j]);
                        pos.push([pos[p][0] + o[0], pos[p][1] + o[1], pos[p][2] + o[2]]);
                        world.push(mat_mul(&world[p], &m));
                    }
                }
                local.push(m);
            }
            let dst = out.row_mut(r);
            for (j, p) in pos.iter().enumerate() {
                dst[3 * j..3 * j + 3].copy_from_slice(p);
            }
            cache.local.push(local);
            cache.world.push(world);
        }
        let ng = self.ng(quats);
        self.push(out, Op::Fk(quats, spec, cache), ng, "forward_kinematics")
    }

    // ---- composite helpers ----

    /// `x * w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squared_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.sum_all(sq)
    }

    // ---- backward ----

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).data.len(), 1, "backward needs a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Mat) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut pending: Vec<(Var, Mat)> = Vec::with_capacity(2);
        // weight gradients accumulate in place: a parameter reused across
        // many time steps would otherwise allocate one full copy per use
        let mut weight_grad = None;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    pending.push((*a, matmul_nt(g, self.value(*b))));
                }
                if self.ng(*b) {
                    weight_grad = Some((*a, *b));
                }
            }
            Op::AddBias(a, b) => {
                pending.push((*a, g.clone()));
                if self.ng(*b) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    pending.push((*a, g.zip_map(vb, |x, y| x * y)));
                }
                if self.ng(*b) {
                    pending.push((*b, g.zip_map(va, |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => pending.push((*a, g.map(|x| x * c))),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                pending.push((*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { slope * gv })));
            }
            Op::Tanh(a) => pending.push((*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)))),
            Op::Sigmoid(a) => pending.push((*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))),
            Op::Exp(a) => pending.push((*a, g.zip_map(y, |gv, yv| gv * yv))),
            Op::Square(a) => pending.push((*a, g.zip_map(self.value(*a), |gv, xv| 2.0 * gv * xv))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                pending.push((
                    *a,
                    g.zip_map(self.value(*a), |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                ));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.ng(*p) {
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        pending.push((*p, gp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                pending.push((*a, ga));
            }
            Op::PickRows(sources, picks) => {
                let mut gs: Vec<Option<Mat>> = sources.iter().map(|_| None).collect();
                for (i, (s, r)) in picks.iter().enumerate() {
                    if !self.ng(sources[*s]) {
                        continue;
                    }
                    let src = self.value(sources[*s]);
                    let slot = gs[*s].get_or_insert_with(|| Mat::zeros(src.rows, src.cols));
                    for (d, x) in slot.row_mut(*r).iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                for (s, gm) in sources.iter().zip(gs) {
                    if let Some(gm) = gm {
                        pending.push((*s, gm));
                    }
                }
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                pending.push((*a, Mat::from_vec(src.rows, src.cols, vec![g.data[0]; src.data.len()])));
            }
            Op::ColScale(a, scale) => {
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(scale.iter()) {
                        *x *= s;
                    }
                }
                pending.push((*a, ga));
            }
            Op::QuatNormalize(a) => {
                let x = self.value(*a);
                let mut ga = Mat::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for k in 0..x.cols / 4 {
                        let q = &x.row(r)[4 * k..4 * k + 4];
                        let n = &y.row(r)[4 * k..4 * k + 4];
                        let gn = &g.row(r)[4 * k..4 * k + 4];
                        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(MIN_QUAT_NORM);
                        let dot: f64 = n.iter().zip(gn).map(|(a, b)| a * b).sum();
                        let dst = &mut ga.row_mut(r)[4 * k..4 * k + 4];
                        for c in 0..4 {
                            dst[c] = (gn[c] - n[c] * dot) / norm;
                        }
                    }
                }
                pending.push((*a, ga));
            }
            Op::AddToY(pos, height) => {
                pending.push((*pos, g.clone()));
                if self.ng(*height) {
                    let gh: Vec<f64> = (0..g.rows)
                        .map(|r| g.row(r).chunks_exact(3).map(|p| p[1]).sum())
                        .collect();
                    pending.push((*height, Mat::from_vec(g.rows, 1, gh)));
                }
            }
            Op::Fk(a, spec, cache) => {
                let x = self.value(*a);
                pending.push((*a, fk_backward(x, g, spec, cache)));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
        if let Some((a, b)) = weight_grad {
            let va = &self.nodes[a.0].value;
            match &mut self.grads[b.0] {
                Some(existing) => matmul_tn_acc(va, g, existing),
                slot => *slot = Some(matmul_tn(va, g)),
            }
        }
    }

    /// Gradients of every trainable parameter used in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(id, v)| {
                let val = &self.nodes[v.0].value;
                let g = self.grad(*v).cloned().unwrap_or_else(|| Mat::zeros(val.rows, val.cols));
                (*id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Reverse pass of hierarchical FK. With `R_j = R_p r_j` and
/// `p_j = p_p + R_p o_j`, children are visited before parents so that each
/// joint's position and rotation adjoints are complete when used.
fn fk_backward(x: &Mat, g: &Mat, spec: &FkSpec, cache: &FkCache) -> Mat {
    let nj = spec.joints();
    let mut gx = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let world = &cache.world[r];
        let local = &cache.local[r];
        let mut gp: Vec<Vec3> = (0..nj)
            .map(|j| [g.get(r, 3 * j), g.get(r, 3 * j + 1), g.get(r, 3 * j + 2)])
            .collect();
        let mut gr: Vec<Mat3> = vec![[[0.0; 3]; 3]; nj];
        let mut glocal: Vec<Mat3> = vec![[[0.0; 3]; 3]; nj];
        for j in (0..nj).rev() {
            match spec.parents[j] {
                None => glocal[j] = gr[j],
                Some(p) => {
                    let o = spec.offsets[j];
                    for a in 0..3 {
                        gp[p][a] += gp[j][a];
                        for b in 0..3 {
                            gr[p][a][b] += gp[j][a] * o[b];
                        }
                    }
                    // R_j = R_p r_j
                    let gr_j = gr[j];
                    let to_parent = mat_mul(&gr_j, &transpose(&local[j]));
                    for a in 0..3 {
                        for b in 0..3 {
                            gr[p][a][b] += to_parent[a][b];
                        }
                    }
                    glocal[j] = mat_mul(&transpose(&world[p]), &gr_j);
                }
            }
        }
        let row = x.row(r).to_vec();
        let dst = gx.row_mut(r);
        for j in 0..nj {
            let q = &row[4 * j..4 * j + 4];
            let gq = quat_matrix_vjp(q, &glocal[j]);
            dst[4 * j..4 * j + 4].copy_from_slice(&gq);
        }
    }
    gx
}

/// Vector-Jacobian product of `quat_to_matrix` at `q = (w, x, y, z)`.
fn quat_matrix_vjp(q: &[f64], gm: &Mat3) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = gm;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let gy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let gz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [gw, gx, gy, gz]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Mat) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        g.backward(y);
        let analytic = g.grad(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut m = x0.clone();
                m.data[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(m);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (a - numeric).abs() < 1e-6 * (1.0 + a.abs()),
                "coord {i}: {a} vs {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64 + 1.0) * seed).sin()).collect(),
        )
    }

    #[test]
    fn elementwise_ops_have_exact_gradients() {
        let w = sample(3, 2, 0.7);
        fd_check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let a = g.matmul(x, wv);
                let t = g.tanh(a);
                let s = g.sigmoid(a);
                let m = g.mul(t, s);
                let e = g.exp(m);
                let l = g.leaky_relu(a, 0.01);
                let sum = g.add(e, l);
                let sq = g.square(sum);
                g.sum_all(sq)
            },
            sample(4, 3, 1.3),
        );
    }

    #[test]
    fn structural_ops_have_exact_gradients() {
        fd_check(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_cols(x, 0, 3);
                let c = g.concat_cols(&[a, b, x]);
                let p = g.pick_rows(&[c, c], &[(0, 2), (1, 0), (0, 2)]);
                let s = g.col_scale(p, Rc::new(vec![1.0, -2.0, 0.5, 3.0, 1.0, 1.0, 2.0, 0.1, 0.3, 0.7]));
                let sq = g.square(s);
                g.sum_all(sq)
            },
            sample(3, 5, 0.9),
        );
    }

    #[test]
    fn fk_gradient_matches_finite_differences() {
        let spec = Rc::new(FkSpec {
            parents: vec![None, Some(0), Some(1), Some(0)],
            offsets: vec![[0.0; 3], [0.0, 10.0, 0.0], [3.0, 5.0, -2.0], [-4.0, 0.0, 1.0]],
        });
        fd_check(
            move |g, x| {
                let q = g.quat_normalize(x);
                let p = g.forward_kinematics(q, spec.clone());
                let h = g.slice_cols(x, 0, 1);
                let p = g.add_to_y(p, h);
                let sq = g.square(p);
                let s = g.sum_all(sq);
                let lin = g.sum_all(p);
                g.add(s, lin)
            },
            sample(2, 16, 0.37),
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParameterStore::new(1);
        let w = store.weight("w", 2, 2).unwrap();
        let b = store.bias("b", 2).unwrap();
        store.set_frozen(w, true);
        let mut g = Graph::new();
        let x = g.constant(sample(3, 2, 0.5));
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let y = g.affine(x, wv, bv);
        let l = g.sum_all(y);
        g.backward(l);
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, b);
        assert_eq!(grads[0].1.data, vec![3.0, 3.0]);
    }

    #[test]
    fn non_finite_values_fault() {
        let mut g = Graph::new();
        let x = g.constant(Mat::scalar(1000.0));
        let e = g.exp(x);
        let _ = g.scale(e, 0.0);
        let err = g.status().unwrap_err();
        assert!(err.to_string().contains("exp"), "{err}");
    }

    #[test]
    fn zero_quaternion_faults_with_joint() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(1, 8, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let _ = g.quat_normalize(x);
        assert!(matches!(
            g.status(),
            Err(DfnError::DegenerateQuaternion { joint: 1, .. })
        ));
    }
}
