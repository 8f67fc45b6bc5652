//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are scalars or dense 1-D arrays; the largest object in this
//! workload is a weight matrix stored row-major inside a vector value.
//! Recording order is topological by construction (every operation consumes
//! already-recorded values) and `backward` visits nodes in exact reverse
//! recording order, accumulating gradients additively across fan-out.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::channel::logistic;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    tape: u64,
    id: usize,
}

#[derive(Debug, Clone)]
enum Data {
    S(f64),
    V(Vec<f64>),
}

impl Data {
    fn zero_like(&self) -> Data {
        match self {
            Data::S(_) => Data::S(0.0),
            Data::V(v) => Data::V(vec![0.0; v.len()]),
        }
    }

    fn s(&self) -> f64 {
        match self {
            Data::S(x) => *x,
            Data::V(_) => panic!("expected scalar, found vector"),
        }
    }

    fn v(&self) -> &[f64] {
        match self {
            Data::V(v) => v,
            Data::S(_) => panic!("expected vector, found scalar"),
        }
    }

    fn vm(&mut self) -> &mut Vec<f64> {
        match self {
            Data::V(v) => v,
            Data::S(_) => panic!("expected vector, found scalar"),
        }
    }

    fn sm(&mut self) -> &mut f64 {
        match self {
            Data::S(x) => x,
            Data::V(_) => panic!("expected scalar, found vector"),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Atan2(usize, usize),
    Logistic(usize),
    Relu(usize),
    Square(usize),
    AbsPow(usize, u32),
    ClampMin(usize, f64),
    AddConst(usize),
    MulConst(usize, f64),
    ReluVec(usize),
    LogisticVec(usize),
    ExpVec(usize),
    SqrtVec(usize),
    SquareVec(usize),
    AddConstVec(usize),
    MulConstVec(usize, f64),
    AddVec(usize, usize),
    MulVec(usize, usize),
    ScalarMinusVec(usize, usize),
    DivVecScalar(usize, usize),
    MatVec { w: usize, x: usize, rows: usize, cols: usize },
    SumVec(usize),
    Dot(usize, usize),
    Index(usize, usize),
    Pack(Vec<usize>),
    LogSumExp(usize),
    SoftmaxNorm(usize),
}

struct Node {
    op: Op,
    val: Data,
}

/// Ordered record of primitive operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Option<Vec<Data>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, val: Data) -> Value {
        self.grads = None; // recording invalidates previous gradients
        let id = self.nodes.len();
        self.nodes.push(Node { op, val });
        Value { tape: self.id, id }
    }

    fn check(&self, v: Value) -> usize {
        assert!(v.tape == self.id, "value belongs to a different tape");
        v.id
    }

    /// Records a scalar leaf.
    pub fn scalar(&mut self, x: f64) -> Value {
        self.push(Op::Leaf, Data::S(x))
    }

    /// Records a dense-array leaf.
    pub fn vector(&mut self, x: Vec<f64>) -> Value {
        self.push(Op::Leaf, Data::V(x))
    }

    pub fn val(&self, v: Value) -> f64 {
        self.nodes[self.check(v)].val.s()
    }

    pub fn vals(&self, v: Value) -> &[f64] {
        self.nodes[self.check(v)].val.v()
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let v = self.nodes[a].val.s() + self.nodes[b].val.s();
        self.push(Op::Add(a, b), Data::S(v))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let v = self.nodes[a].val.s() - self.nodes[b].val.s();
        self.push(Op::Sub(a, b), Data::S(v))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let v = self.nodes[a].val.s() * self.nodes[b].val.s();
        self.push(Op::Mul(a, b), Data::S(v))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let v = self.nodes[a].val.s() / self.nodes[b].val.s();
        self.push(Op::Div(a, b), Data::S(v))
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = -self.nodes[a].val.s();
        self.push(Op::Neg(a), Data::S(v))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().exp();
        self.push(Op::Exp(a), Data::S(v))
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().ln();
        self.push(Op::Ln(a), Data::S(v))
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().sqrt();
        self.push(Op::Sqrt(a), Data::S(v))
    }

    pub fn sin(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().sin();
        self.push(Op::Sin(a), Data::S(v))
    }

    pub fn cos(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().cos();
        self.push(Op::Cos(a), Data::S(v))
    }

    /// `atan2(y, x)` with `y` first, matching `f64::atan2`.
    pub fn atan2(&mut self, y: Value, x: Value) -> Value {
        let (y, x) = (self.check(y), self.check(x));
        let v = self.nodes[y].val.s().atan2(self.nodes[x].val.s());
        self.push(Op::Atan2(y, x), Data::S(v))
    }

    pub fn logistic(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = logistic(self.nodes[a].val.s());
        self.push(Op::Logistic(a), Data::S(v))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().max(0.0);
        self.push(Op::Relu(a), Data::S(v))
    }

    pub fn square(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let x = self.nodes[a].val.s();
        self.push(Op::Square(a), Data::S(x * x))
    }

    /// `|x|^n` for integer `n ≥ 1`; subgradient 0 at the origin.
    pub fn abs_pow(&mut self, a: Value, n: u32) -> Value {
        assert!(n >= 1);
        let a = self.check(a);
        let v = self.nodes[a].val.s().abs().powi(n as i32);
        self.push(Op::AbsPow(a, n), Data::S(v))
    }

    /// `max(x, c)`; gradient passes only when unclamped.
    pub fn clamp_min(&mut self, a: Value, c: f64) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s().max(c);
        self.push(Op::ClampMin(a, c), Data::S(v))
    }

    pub fn add_const(&mut self, a: Value, c: f64) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s() + c;
        self.push(Op::AddConst(a), Data::S(v))
    }

    pub fn mul_const(&mut self, a: Value, c: f64) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.s() * c;
        self.push(Op::MulConst(a, c), Data::S(v))
    }

    pub fn relu_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::ReluVec(a), Data::V(v))
    }

    pub fn logistic_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| logistic(x)).collect();
        self.push(Op::LogisticVec(a), Data::V(v))
    }

    pub fn exp_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x.exp()).collect();
        self.push(Op::ExpVec(a), Data::V(v))
    }

    pub fn sqrt_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x.sqrt()).collect();
        self.push(Op::SqrtVec(a), Data::V(v))
    }

    pub fn square_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x * x).collect();
        self.push(Op::SquareVec(a), Data::V(v))
    }

    pub fn add_const_vec(&mut self, a: Value, c: f64) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x + c).collect();
        self.push(Op::AddConstVec(a), Data::V(v))
    }

    pub fn mul_const_vec(&mut self, a: Value, c: f64) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().map(|&x| x * c).collect();
        self.push(Op::MulConstVec(a, c), Data::V(v))
    }

    /// Elementwise sum; also serves as the bias-add.
    pub fn add_vec(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let (xa, xb) = (self.nodes[a].val.v(), self.nodes[b].val.v());
        assert_eq!(xa.len(), xb.len(), "shape mismatch in add_vec");
        let v = xa.iter().zip(xb).map(|(x, y)| x + y).collect();
        self.push(Op::AddVec(a, b), Data::V(v))
    }

    pub fn mul_vec(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let (xa, xb) = (self.nodes[a].val.v(), self.nodes[b].val.v());
        assert_eq!(xa.len(), xb.len(), "shape mismatch in mul_vec");
        let v = xa.iter().zip(xb).map(|(x, y)| x * y).collect();
        self.push(Op::MulVec(a, b), Data::V(v))
    }

    /// `y_i = s − v_i` for scalar `s`.
    pub fn scalar_minus_vec(&mut self, s: Value, v: Value) -> Value {
        let (s, v) = (self.check(s), self.check(v));
        let sv = self.nodes[s].val.s();
        let out = self.nodes[v].val.v().iter().map(|&x| sv - x).collect();
        self.push(Op::ScalarMinusVec(s, v), Data::V(out))
    }

    pub fn div_vec_scalar(&mut self, v: Value, s: Value) -> Value {
        let (v, s) = (self.check(v), self.check(s));
        let sv = self.nodes[s].val.s();
        let out = self.nodes[v].val.v().iter().map(|&x| x / sv).collect();
        self.push(Op::DivVecScalar(v, s), Data::V(out))
    }

    /// `W·x` with `W` a row-major `rows × cols` matrix stored in a vector value.
    pub fn matvec(&mut self, w: Value, x: Value, rows: usize, cols: usize) -> Value {
        let (w, x) = (self.check(w), self.check(x));
        let wv = self.nodes[w].val.v();
        let xv = self.nodes[x].val.v();
        assert_eq!(wv.len(), rows * cols, "weight shape mismatch in matvec");
        assert_eq!(xv.len(), cols, "input shape mismatch in matvec");
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wv[r * cols..(r + 1) * cols];
            *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec { w, x, rows, cols }, Data::V(out))
    }

    pub fn sum_vec(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v().iter().sum();
        self.push(Op::SumVec(a), Data::S(v))
    }

    /// Inner product; also the weighted sum of values.
    pub fn dot(&mut self, a: Value, b: Value) -> Value {
        let (a, b) = (self.check(a), self.check(b));
        let (xa, xb) = (self.nodes[a].val.v(), self.nodes[b].val.v());
        assert_eq!(xa.len(), xb.len(), "shape mismatch in dot");
        let v = xa.iter().zip(xb).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Data::S(v))
    }

    pub fn index(&mut self, a: Value, i: usize) -> Value {
        let a = self.check(a);
        let v = self.nodes[a].val.v()[i];
        self.push(Op::Index(a, i), Data::S(v))
    }

    /// Gathers scalar values into a vector.
    pub fn pack(&mut self, parts: &[Value]) -> Value {
        let ids: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let v = ids.iter().map(|&i| self.nodes[i].val.s()).collect();
        self.push(Op::Pack(ids), Data::V(v))
    }

    /// Max-shifted `log Σ exp`, overflow-safe.
    pub fn log_sum_exp(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let xs = self.nodes[a].val.v();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        self.push(Op::LogSumExp(a), Data::S(v))
    }

    /// Normalized exponential of log-weights.
    pub fn softmax_normalize(&mut self, a: Value) -> Value {
        let a = self.check(a);
        let xs = self.nodes[a].val.v();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= z);
        self.push(Op::SoftmaxNorm(a), Data::V(out))
    }

    /// Backpropagates from a scalar root; gradients for every node become
    /// readable through [`Tape::grad`] / [`Tape::grad_vec`].
    pub fn backward(&mut self, root: Value) {
        let root = self.check(root);
        assert!(
            matches!(self.nodes[root].val, Data::S(_)),
            "backward root must be scalar"
        );
        let mut grads: Vec<Data> = self.nodes.iter().map(|n| n.val.zero_like()).collect();
        *grads[root].sm() = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let g = &hi[0];
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = g.s();
                    *lo[*a].sm() += g;
                    *lo[*b].sm() += g;
                }
                Op::Sub(a, b) => {
                    let g = g.s();
                    *lo[*a].sm() += g;
                    *lo[*b].sm() -= g;
                }
                Op::Mul(a, b) => {
                    let g = g.s();
                    let (xa, xb) = (self.nodes[*a].val.s(), self.nodes[*b].val.s());
                    *lo[*a].sm() += g * xb;
                    *lo[*b].sm() += g * xa;
                }
                Op::Div(a, b) => {
                    let g = g.s();
                    let (xa, xb) = (self.nodes[*a].val.s(), self.nodes[*b].val.s());
                    *lo[*a].sm() += g / xb;
                    *lo[*b].sm() -= g * xa / (xb * xb);
                }
                Op::Neg(a) => *lo[*a].sm() -= g.s(),
                Op::Exp(a) => *lo[*a].sm() += g.s() * node.val.s(),
                Op::Ln(a) => *lo[*a].sm() += g.s() / self.nodes[*a].val.s(),
                Op::Sqrt(a) => *lo[*a].sm() += g.s() / (2.0 * node.val.s()),
                Op::Sin(a) => *lo[*a].sm() += g.s() * self.nodes[*a].val.s().cos(),
                Op::Cos(a) => *lo[*a].sm() -= g.s() * self.nodes[*a].val.s().sin(),
                Op::Atan2(y, x) => {
                    let g = g.s();
                    let (yv, xv) = (self.nodes[*y].val.s(), self.nodes[*x].val.s());
                    let denom = xv * xv + yv * yv;
                    *lo[*y].sm() += g * xv / denom;
                    *lo[*x].sm() -= g * yv / denom;
                }
                Op::Logistic(a) => {
                    let s = node.val.s();
                    *lo[*a].sm() += g.s() * s * (1.0 - s);
                }
                Op::Relu(a) => {
                    if self.nodes[*a].val.s() > 0.0 {
                        *lo[*a].sm() += g.s();
                    }
                }
                Op::Square(a) => *lo[*a].sm() += g.s() * 2.0 * self.nodes[*a].val.s(),
                Op::AbsPow(a, n) => {
                    let x = self.nodes[*a].val.s();
                    let d = if x == 0.0 {
                        0.0
                    } else {
                        *n as f64 * x.abs().powi(*n as i32 - 1) * x.signum()
                    };
                    *lo[*a].sm() += g.s() * d;
                }
                Op::ClampMin(a, c) => {
                    if self.nodes[*a].val.s() > *c {
                        *lo[*a].sm() += g.s();
                    }
                }
                Op::AddConst(a) => *lo[*a].sm() += g.s(),
                Op::MulConst(a, c) => *lo[*a].sm() += g.s() * c,
                Op::ReluVec(a) => {
                    let gv = g.v();
                    let xa = self.nodes[*a].val.v();
                    let ga = lo[*a].vm();
                    for ((gi, &x), go) in ga.iter_mut().zip(xa).zip(gv) {
                        if x > 0.0 {
                            *gi += go;
                        }
                    }
                }
                Op::LogisticVec(a) => {
                    let gv = g.v();
                    let yv = node.val.v();
                    let ga = lo[*a].vm();
                    for ((gi, &y), go) in ga.iter_mut().zip(yv).zip(gv) {
                        *gi += go * y * (1.0 - y);
                    }
                }
                Op::ExpVec(a) => {
                    let gv = g.v();
                    let yv = node.val.v();
                    let ga = lo[*a].vm();
                    for ((gi, &y), go) in ga.iter_mut().zip(yv).zip(gv) {
                        *gi += go * y;
                    }
                }
                Op::SqrtVec(a) => {
                    let gv = g.v();
                    let yv = node.val.v();
                    let ga = lo[*a].vm();
                    for ((gi, &y), go) in ga.iter_mut().zip(yv).zip(gv) {
                        *gi += go / (2.0 * y);
                    }
                }
                Op::SquareVec(a) => {
                    let gv = g.v();
                    let xa = self.nodes[*a].val.v();
                    let ga = lo[*a].vm();
                    for ((gi, &x), go) in ga.iter_mut().zip(xa).zip(gv) {
                        *gi += go * 2.0 * x;
                    }
                }
                Op::AddConstVec(a) => {
                    let gv = g.v();
                    for (gi, go) in lo[*a].vm().iter_mut().zip(gv) {
                        *gi += go;
                    }
                }
                Op::MulConstVec(a, c) => {
                    let gv = g.v();
                    for (gi, go) in lo[*a].vm().iter_mut().zip(gv) {
                        *gi += go * c;
                    }
                }
                Op::AddVec(a, b) => {
                    let gv = g.v().to_vec();
                    for (gi, go) in lo[*a].vm().iter_mut().zip(&gv) {
                        *gi += go;
                    }
                    for (gi, go) in lo[*b].vm().iter_mut().zip(&gv) {
                        *gi += go;
                    }
                }
                Op::MulVec(a, b) => {
                    let gv = g.v().to_vec();
                    let xa = self.nodes[*a].val.v().to_vec();
                    let xb = self.nodes[*b].val.v().to_vec();
                    for ((gi, go), x) in lo[*a].vm().iter_mut().zip(&gv).zip(&xb) {
                        *gi += go * x;
                    }
                    for ((gi, go), x) in lo[*b].vm().iter_mut().zip(&gv).zip(&xa) {
                        *gi += go * x;
                    }
                }
                Op::ScalarMinusVec(s, v) => {
                    let gv = g.v().to_vec();
                    *lo[*s].sm() += gv.iter().sum::<f64>();
                    for (gi, go) in lo[*v].vm().iter_mut().zip(&gv) {
                        *gi -= go;
                    }
                }
                Op::DivVecScalar(v, s) => {
                    let gv = g.v().to_vec();
                    let sv = self.nodes[*s].val.s();
                    let yv = node.val.v();
                    let ds: f64 = gv.iter().zip(yv).map(|(go, y)| go * y).sum();
                    *lo[*s].sm() -= ds / sv;
                    for (gi, go) in lo[*v].vm().iter_mut().zip(&gv) {
                        *gi += go / sv;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let gv = g.v().to_vec();
                    let wv = self.nodes[*w].val.v().to_vec();
                    let xv = self.nodes[*x].val.v().to_vec();
                    {
                        let gw = lo[*w].vm();
                        for r in 0..*rows {
                            let go = gv[r];
                            if go != 0.0 {
                                let grow = &mut gw[r * cols..(r + 1) * cols];
                                for (gi, &xc) in grow.iter_mut().zip(&xv) {
                                    *gi += go * xc;
                                }
                            }
                        }
                    }
                    {
                        let gx = lo[*x].vm();
                        for r in 0..*rows {
                            let go = gv[r];
                            if go != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                for (gi, &wc) in gx.iter_mut().zip(row) {
                                    *gi += go * wc;
                                }
                            }
                        }
                    }
                }
                Op::SumVec(a) => {
                    let g = g.s();
                    for gi in lo[*a].vm().iter_mut() {
                        *gi += g;
                    }
                }
                Op::Dot(a, b) => {
                    let g = g.s();
                    let xa = self.nodes[*a].val.v().to_vec();
                    let xb = self.nodes[*b].val.v().to_vec();
                    for (gi, x) in lo[*a].vm().iter_mut().zip(&xb) {
                        *gi += g * x;
                    }
                    for (gi, x) in lo[*b].vm().iter_mut().zip(&xa) {
                        *gi += g * x;
                    }
                }
                Op::Index(a, idx) => lo[*a].vm()[*idx] += g.s(),
                Op::Pack(ids) => {
                    let gv = g.v().to_vec();
                    for (&src, go) in ids.iter().zip(&gv) {
                        *lo[src].sm() += go;
                    }
                }
                Op::LogSumExp(a) => {
                    let g = g.s();
                    let y = node.val.s();
                    let xa = self.nodes[*a].val.v();
                    let ga = lo[*a].vm();
                    for (gi, &x) in ga.iter_mut().zip(xa) {
                        *gi += g * (x - y).exp();
                    }
                }
                Op::SoftmaxNorm(a) => {
                    let gv = g.v();
                    let yv = node.val.v();
                    let inner: f64 = gv.iter().zip(yv).map(|(go, y)| go * y).sum();
                    let ga = lo[*a].vm();
                    for ((gi, &y), go) in ga.iter_mut().zip(yv).zip(gv) {
                        *gi += y * (go - inner);
                    }
                }
            }
        }
        self.grads = Some(grads);
    }

    pub fn grad(&self, v: Value) -> f64 {
        let id = self.check(v);
        self.grads.as_ref().expect("call backward first")[id].s()
    }

    pub fn grad_vec(&self, v: Value) -> &[f64] {
        let id = self.check(v);
        self.grads.as_ref().expect("call backward first")[id].v()
    }
}
