//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Only the operations the draft objective needs are provided. Each node
//! stores its forward value; `backward` walks the tape in reverse.

use std::rc::Rc;

use crate::numkernel::{smooth_l1_grad, BoolMatrix, Matrix, LOG_CLAMP};
use crate::target::NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * s` with `s` a 1x1 node.
    ScaleBy(Var, Var),
    /// `a * s` with `s` an r x 1 node scaling each row.
    RowScale(Var, Var),
    Column(Var, usize),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Per head, per query row: (key index, weight).
        weights: Vec<Vec<Vec<(usize, f64)>>>,
    },
    SmoothL1 {
        pred: Var,
        target: Rc<Matrix>,
        rows: Rc<Vec<f64>>,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        target: Rc<Matrix>,
        rows: Rc<Vec<f64>>,
        probs: Matrix,
    },
    Lin(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data).expect("finite")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * k);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (x, w) = (self.value(a), self.value(s));
        assert_eq!(w.shape(), (x.rows(), 1));
        let v = Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * w.get(r, 0));
        self.push(v, Op::RowScale(a, s))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), 1, |r, _| x.get(r, j));
        self.push(v, Op::Column(a, j))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), x.cols(), |r, c| crate::numkernel::silu(x.get(r, c)));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise RMS norm; `gain` is `1 x cols`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xv, g) = (self.value(x), self.value(gain));
        let n = xv.cols();
        let inv: Vec<f64> = (0..xv.rows())
            .map(|r| {
                let ms = xv.row(r).iter().fold(0.0, |a, v| a + v * v) / n as f64;
                1.0 / (ms + NORM_EPS).sqrt()
            })
            .collect();
        let v = Matrix::from_fn(xv.rows(), n, |r, c| xv.get(r, c) * inv[r] * g.get(0, c));
        self.push(v, Op::RmsNorm { x, gain, inv })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let p = crate::numkernel::softmax_unchecked(x.row(r), 1.0);
            out.row_mut(r).copy_from_slice(&p);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Multi-head scaled dot-product attention restricted by `mask`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &BoolMatrix) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows();
        let d = qv.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut weights = vec![Vec::with_capacity(n); heads];
        for (h, wh) in weights.iter_mut().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let allowed: Vec<usize> = mask.allowed(i).collect();
                let s: Vec<f64> = allowed
                    .iter()
                    .map(|&j| crate::numkernel::dot(qi, &kv.row(j)[cols.clone()]) * scale)
                    .collect();
                let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z = e.iter().fold(0.0, |a, b| a + b);
                let row: Vec<(usize, f64)> = allowed.iter().zip(&e).map(|(&j, w)| (j, w / z)).collect();
                let o = &mut out.row_mut(i)[cols.clone()];
                for &(j, w) in &row {
                    for (oc, vc) in o.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *oc += w * vc;
                    }
                }
                wh.push(row);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        )
    }

    /// Mean over rows with nonzero weight of the per-row mean Smooth L1.
    pub fn smooth_l1(&mut self, pred: Var, target: Rc<Matrix>, rows: Rc<Vec<f64>>, beta: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        let denom: f64 = rows.iter().sum();
        let mut total = 0.0;
        if denom > 0.0 {
            for (r, &w) in rows.iter().enumerate() {
                if w != 0.0 {
                    total += w * crate::numkernel::smooth_l1(p.row(r), target.row(r), beta)
                        .expect("shapes checked");
                }
            }
            total /= denom;
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]).expect("finite"),
            Op::SmoothL1 {
                pred,
                target,
                rows,
                beta,
            },
        )
    }

    /// Mean over weighted rows of `CE(target_row, softmax(logits_row))`.
    pub fn cross_entropy(&mut self, logits: Var, target: Rc<Matrix>, rows: Rc<Vec<f64>>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.shape(), target.shape());
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let denom: f64 = rows.iter().sum();
        let mut total = 0.0;
        for (r, &w) in rows.iter().enumerate() {
            let q = crate::numkernel::softmax_unchecked(l.row(r), 1.0);
            if w != 0.0 {
                total += w * crate::numkernel::cross_entropy_raw(target.row(r), &q);
            }
            probs.row_mut(r).copy_from_slice(&q);
        }
        if denom > 0.0 {
            total /= denom;
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]).expect("finite loss"),
            Op::CrossEntropy {
                logits,
                target,
                rows,
                probs,
            },
        )
    }

    /// `Σ c_i x_i` over 1x1 nodes.
    pub fn lin(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().fold(0.0, |acc, &(x, c)| acc + c * self.scalar(x));
        self.push(
            Matrix::from_vec(1, 1, vec![v]).unwrap_or_else(|_| Matrix::from_fn(1, 1, |_, _| v)),
            Op::Lin(terms.to_vec()),
        )
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::from_fn(1, 1, |_, _| 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(m) => m
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&bv.transpose()).expect("shape"));
                acc(*b, av.transpose().matmul(g).expect("shape"));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, Matrix::from_fn(g.rows(), g.cols(), |r, c| -g.get(r, c)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * bv.get(r, c)),
                );
                acc(
                    *b,
                    Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * av.get(r, c)),
                );
            }
            Op::ScaleBy(a, s) => {
                let (av, k) = (self.value(*a), self.scalar(*s));
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * k));
                let ds = g.data().iter().zip(av.data()).fold(0.0, |t, (x, y)| t + x * y);
                acc(*s, Matrix::from_fn(1, 1, |_, _| ds));
            }
            Op::RowScale(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * sv.get(r, 0)),
                );
                acc(
                    *s,
                    Matrix::from_fn(g.rows(), 1, |r, _| crate::numkernel::dot(g.row(r), av.row(r))),
                );
            }
            Op::Column(a, j) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    d.set(r, *j, g.get(r, 0));
                }
                acc(*a, d);
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let x = av.get(r, c);
                        let s = 1.0 / (1.0 + (-x).exp());
                        g.get(r, c) * (s + x * s * (1.0 - s))
                    }),
                );
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dg = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let iv = inv[r];
                    let mut dot = 0.0;
                    for c in 0..xv.cols() {
                        dot += gv.get(0, c) * g.get(r, c) * xv.get(r, c);
                        dg.data_mut()[c] += g.get(r, c) * xv.get(r, c) * iv;
                    }
                    for c in 0..xv.cols() {
                        let v = iv * gv.get(0, c) * g.get(r, c) - xv.get(r, c) * iv * iv * iv * dot / n;
                        dx.set(r, c, v);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = crate::numkernel::dot(y.row(r), g.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                    }
                }
                acc(*a, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(kv.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                for (h, wh) in weights.iter().enumerate() {
                    let cols = h * hd..(h + 1) * hd;
                    for (i, row) in wh.iter().enumerate() {
                        let go = &g.row(i)[cols.clone()];
                        let da: Vec<f64> = row
                            .iter()
                            .map(|&(j, _)| crate::numkernel::dot(go, &vv.row(j)[cols.clone()]))
                            .collect();
                        let mean = row.iter().zip(&da).fold(0.0, |t, (&(_, w), x)| t + w * x);
                        for (&(j, w), &daj) in row.iter().zip(&da) {
                            let ds = w * (daj - mean) * scale;
                            for c in cols.clone() {
                                dv.data_mut()[j * d + c] += w * g.get(i, c);
                                dq.data_mut()[i * d + c] += ds * kv.get(j, c);
                                dk.data_mut()[j * d + c] += ds * qv.get(i, c);
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::SmoothL1 {
                pred,
                target,
                rows,
                beta,
            } => {
                let p = self.value(*pred);
                let denom: f64 = rows.iter().sum();
                let mut d = Matrix::zeros(p.rows(), p.cols());
                if denom > 0.0 {
                    let k = g.get(0, 0) / (denom * p.cols() as f64);
                    for (r, &w) in rows.iter().enumerate() {
                        if w != 0.0 {
                            for c in 0..p.cols() {
                                let diff = p.get(r, c) - target.get(r, c);
                                d.set(r, c, k * w * smooth_l1_grad(diff, *beta));
                            }
                        }
                    }
                }
                acc(*pred, d);
            }
            Op::CrossEntropy {
                logits,
                target,
                rows,
                probs,
            } => {
                let denom: f64 = rows.iter().sum();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                if denom > 0.0 {
                    let k = g.get(0, 0) / denom;
                    for (r, &w) in rows.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let q = probs.row(r);
                        let p = target.row(r);
                        // dCE/dq_i = -p_i / q_i where the clamp is inactive
                        let gq: Vec<f64> = q
                            .iter()
                            .zip(p)
                            .map(|(&qi, &pi)| if qi > LOG_CLAMP { -pi / qi } else { 0.0 })
                            .collect();
                        let s = crate::numkernel::dot(q, &gq);
                        for c in 0..q.len() {
                            d.set(r, c, k * w * q[c] * (gq[c] - s));
                        }
                    }
                }
                acc(*logits, d);
            }
            Op::Lin(terms) => {
                let gv = g.get(0, 0);
                for &(x, c) in terms {
                    acc(x, Matrix::from_fn(1, 1, |_, _| gv * c));
                }
            }
        }
    }
}

pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    /// Gradient of `v`, zero-shaped like `like` when `v` did not contribute.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences against every input entry of `f`.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| tape.leaf(m)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            for e in 0..m.data().len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == i {
                                x.data_mut()[e] += delta;
                            }
                            t.leaf(x)
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.scalar(o)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads.get(vars[i]).map_or(0.0, |g| g.data()[e]);
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} entry {e}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn quadratic_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 4);
        let t = Rc::new(rand_mat(&mut rng, 3, 4));
        let rows = Rc::new(vec![1.0; 3]);
        // beta large keeps smooth L1 in its quadratic region
        check(vec![a], |tp, v| {
            tp.smooth_l1(v[0], t.clone(), rows.clone(), 100.0)
        });
    }

    #[test]
    fn composite_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 4, 6);
        let w = rand_mat(&mut rng, 6, 6);
        let gain = rand_mat(&mut rng, 1, 6);
        let s = rand_mat(&mut rng, 1, 1);
        let tgt = Rc::new(Matrix::from_fn(
            4,
            6,
            |r, c| if (r + c) % 6 == 0 { 1.0 } else { 0.0 },
        ));
        let rows = Rc::new(vec![1.0, 1.0, 0.0, 1.0]);
        let mask = BoolMatrix::lower_triangular(4);
        check(vec![x, w, gain, s], |tp, v| {
            let h = tp.matmul(v[0], v[1]);
            let n = tp.rms_norm(h, v[2]);
            let a = tp.attention(n, n, h, 2, &mask);
            let u = tp.add(a, h);
            let sm = tp.softmax_rows(u);
            let col = tp.column(sm, 1);
            let rs = tp.row_scale(u, col);
            let sc = tp.scale_by(rs, v[3]);
            let act = tp.silu(sc);
            let d = tp.sub(act, n);
            let m = tp.mul(d, u);
            let wt = tp.transpose(v[1]);
            let lg = tp.matmul(m, wt);
            let ce = tp.cross_entropy(lg, tgt.clone(), rows.clone());
            let l1 = tp.smooth_l1(m, tgt.clone(), rows.clone(), 0.5);
            tp.lin(&[(ce, 0.3), (l1, 1.0)])
        });
    }
}
