//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward pass as a list of nodes; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with respect
//! to every node.

use std::rc::Rc;

use crate::rope::{self, CoordGrid, RotationAngles, ThetaSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `c += a(m×k) · b(k×n)` with arbitrary strides; `t_a`/`t_b` transpose.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], t_a: bool, b: &[f64], t_b: bool, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if t_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if t_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n by construction of the callers.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut c.data);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Data a rotary node needs to replay its angles.
#[derive(Debug)]
pub struct RopeSpec {
    pub grid: Rc<CoordGrid>,
    pub schedule: Rc<ThetaSchedule>,
    /// `[θh, θw, θt]` nodes when the frequencies are being trained.
    pub thetas: Option<[Var; 3]>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<Vec<usize>>),
    Pool(Var, Rc<Vec<Vec<usize>>>),
    Rope(Var, RopeSpec, RotationAngles),
    CrossEntropy(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_t inner dims");
        let mut c = Mat::zeros(am.rows, bm.rows);
        gemm(am.rows, am.cols, bm.rows, &am.data, false, &bm.data, true, &mut c.data);
        self.push(c, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!((v.rows, v.cols), (self.value(b).rows, self.value(b).cols), "add shapes");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with `b` a `1×n` row broadcast over `a`'s rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let row = self.value(b);
        assert_eq!((row.rows, row.cols), (1, v.cols), "add_row shapes");
        v.data.chunks_exact_mut(row.cols).for_each(|r| r.iter_mut().zip(&row.data).for_each(|(x, b)| *x += b));
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let row = self.value(b);
        assert_eq!((row.rows, row.cols), (1, v.cols), "mul_row shapes");
        v.data.chunks_exact_mut(row.cols).for_each(|r| r.iter_mut().zip(&row.data).for_each(|(x, b)| *x *= b));
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= sigmoid(*x));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise normalisation to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let n = v.cols as f64;
        for r in v.data.chunks_exact_mut(v.cols) {
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            r.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        self.push(v, Op::LayerNorm(a))
    }

    /// Row-wise softmax; entries equal to `-inf` get probability zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in v.data.chunks_exact_mut(v.cols) {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            r.iter_mut().for_each(|x| {
                *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
                sum += *x;
            });
            r.iter_mut().for_each(|x| *x /= sum);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols rows");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows cols");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `a` picked by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * m.cols);
        rows.iter().for_each(|&r| data.extend_from_slice(m.row(r)));
        let v = Mat::from_vec(rows.len(), m.cols, data);
        self.push(v, Op::Gather(a, rows))
    }

    /// Output row `i` is the mean of the input rows in `bins[i]`.
    pub fn pool(&mut self, a: Var, bins: Rc<Vec<Vec<usize>>>) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(bins.len(), m.cols);
        for (i, bin) in bins.iter().enumerate() {
            let out = &mut v.data[i * m.cols..(i + 1) * m.cols];
            for &r in bin {
                out.iter_mut().zip(m.row(r)).for_each(|(o, x)| *o += x);
            }
            let inv = 1.0 / bin.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(v, Op::Pool(a, bins))
    }

    /// Rotary embedding on every head of `a`.
    pub fn rope(&mut self, a: Var, spec: RopeSpec) -> Var {
        let schedule = match spec.thetas {
            Some(th) => {
                let mut s = (*spec.schedule).clone();
                for (d, &v) in th.iter().enumerate() {
                    s.trainable[d] = self.value(v).data.clone();
                }
                s
            }
            None => (*spec.schedule).clone(),
        };
        let angles = rope::angles(&spec.grid, &schedule).expect("grid and schedule validated by caller");
        let m = self.value(a);
        let v = rope::rotate_values(&m.data, m.cols, &angles).expect("head width validated by caller");
        let v = Mat::from_vec(m.rows, m.cols, v);
        self.push(v, Op::Rope(a, spec, angles))
    }

    /// Softmax cross-entropy of a `1×C` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, 1, "cross_entropy takes one row");
        let max = l.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - l.data[label];
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy(logits, label))
    }

    /// Gradients of scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(out);
        grads[out.0] = Some(Mat::from_vec(seed.rows, seed.cols, vec![1.0; seed.data.len()]));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are consumed; leaves keep theirs for the caller
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    gemm(g.rows, g.cols, bm.rows, &g.data, false, &bm.data, true, &mut ga.data);
                    let mut gb = Mat::zeros(bm.rows, bm.cols);
                    gemm(am.cols, am.rows, g.cols, &am.data, true, &g.data, false, &mut gb.data);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    // y = a bᵀ: ga = g b, gb = gᵀ a
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    gemm(g.rows, g.cols, bm.cols, &g.data, false, &bm.data, false, &mut ga.data);
                    let mut gb = Mat::zeros(bm.rows, bm.cols);
                    gemm(g.cols, g.rows, am.cols, &g.data, true, &am.data, false, &mut gb.data);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    g.data.chunks_exact(g.cols).for_each(|r| gb.data.iter_mut().zip(r).for_each(|(s, x)| *s += x));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] *= bm.data[c];
                            gb.data[c] += g.at(r, c) * am.at(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.data.iter_mut().zip(&x.data).for_each(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        *gv *= s * (1.0 + xv * (1.0 - s));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let n = x.cols as f64;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let (yr, gr) = (y.row(r), g.row(r));
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.cols {
                            ga.data[r * x.cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for r in 0..g.rows {
                        ga.data[r * am.cols + start..r * am.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.data[r * cols..(r + 1) * cols].copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let gp = Mat::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec());
                        off += rows;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Gather(a, rows) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        ga.data[r * am.cols..(r + 1) * am.cols].iter_mut().zip(g.row(i)).for_each(|(s, x)| *s += x);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Pool(a, bins) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for (i, bin) in bins.iter().enumerate() {
                        let inv = 1.0 / bin.len() as f64;
                        for &r in bin {
                            ga.data[r * am.cols..(r + 1) * am.cols]
                                .iter_mut()
                                .zip(g.row(i))
                                .for_each(|(s, x)| *s += x * inv);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Rope(a, spec, angles) => {
                    let am = self.value(*a);
                    let (dq, da) = rope::rotate_backward(&am.data, am.cols, angles, &g.data).expect("shapes fixed at forward");
                    acc(&mut grads, *a, Mat::from_vec(am.rows, am.cols, dq));
                    if let Some(th) = spec.thetas {
                        let d_theta = rope::theta_gradients(&spec.grid, &spec.schedule, &da);
                        for (v, gt) in th.into_iter().zip(d_theta) {
                            let n = gt.len();
                            acc(&mut grads, v, Mat::from_vec(1, n, gt));
                        }
                    }
                }
                Op::CrossEntropy(logits, label) => {
                    let l = self.value(*logits);
                    let max = l.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = l.data.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let scale = g.data[0];
                    let mut gl = Mat::from_vec(1, l.cols, exps.iter().map(|e| e / sum * scale).collect());
                    gl.data[*label] -= scale;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let data = (0..rows * cols).map(|i| ((i as f64 + 1.0) * 0.7311 + seed as f64 * 1.37).sin()).collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Checks every input entry of `build` against central differences.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| tape.leaf(m)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().cloned().map(|m| t.leaf(m)).collect();
            let o = build(&mut t, &vs);
            t.value(o).data[0]
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            for i in 0..m.data.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[vars[k].0].as_ref().map_or(0.0, |g| g.data[i]);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Reduce a matrix to a scalar through a fixed random projection.
    fn project(t: &mut Tape, v: Var) -> Var {
        let m = t.value(v).clone();
        let w = t.leaf(mat(m.cols, 1, 99));
        let y = t.matmul(v, w);
        let ones = t.leaf(Mat::from_vec(1, m.rows, (0..m.rows).map(|i| 1.0 + i as f64 * 0.1).collect()));
        t.matmul(ones, y)
    }

    #[test]
    fn matmul_family() {
        check(vec![mat(3, 4, 1), mat(4, 2, 2)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            project(t, y)
        });
        check(vec![mat(3, 4, 1), mat(5, 4, 2)], |t, v| {
            let y = t.matmul_t(v[0], v[1]);
            project(t, y)
        });
    }

    #[test]
    fn elementwise_family() {
        check(vec![mat(3, 4, 3), mat(1, 4, 4), mat(3, 4, 5)], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(a, v[1]);
            let c = t.add(b, v[2]);
            let d = t.silu(c);
            let e = t.scale(d, -0.7);
            let f = t.layer_norm(e);
            project(t, f)
        });
    }

    #[test]
    fn softmax_and_masks() {
        check(vec![mat(3, 3, 6)], |t, v| {
            let mut masked = Mat::zeros(3, 3);
            masked.data[1] = f64::NEG_INFINITY;
            let m = t.leaf(masked);
            let s = t.add(v[0], m);
            let p = t.softmax(s);
            project(t, p)
        });
    }

    #[test]
    fn structural_ops() {
        check(vec![mat(4, 6, 7), mat(2, 6, 8)], |t, v| {
            let a = t.slice_cols(v[0], 2, 3);
            let b = t.slice_cols(v[0], 0, 2);
            let c = t.concat_cols(&[a, b]);
            let d = t.concat_rows(&[v[0], v[1]]);
            let e = t.gather(d, Rc::new(vec![5, 0, 0, 3]));
            let f = t.pool(e, Rc::new(vec![vec![0, 1], vec![2], vec![1, 2, 3]]));
            let g = t.slice_cols(f, 0, 5);
            let h = t.matmul_t(c, g);
            project(t, h)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check(vec![mat(1, 5, 9)], |t, v| t.cross_entropy(v[0], 3));
    }
}
