//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor lives on a [`Tape`] as a node with an f64 value buffer and an
//! optional backward closure. Ops run eagerly; calling [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients. Parameters are leaf
//! nodes registered by name so their gradients can be collected after the
//! pass.
//!
//! The engine is deliberately small: only the kernels this tracker needs,
//! all single-threaded and deterministic.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensorcore::{bilinear_corners, rotary_frequency};

/// Node shape. Values are stored flat; the shape exists for op validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Length-n vector. Scalars are `Vec(1)`.
    Vec(usize),
    /// Row-major rows x cols matrix.
    Mat(usize, usize),
    /// Height x width x channels map, channel-last.
    Map(usize, usize, usize),
    /// Convolution kernel kh x kw x cin x cout.
    Kernel(usize, usize, usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vec(n) => n,
            Shape::Mat(r, c) => r * c,
            Shape::Map(h, w, c) => h * w * c,
            Shape::Kernel(a, b, c, d) => a * b * c * d,
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: usize,
    pub shape: Shape,
}

impl Var {
    pub fn len(&self) -> usize {
        self.shape.len()
    }
}

type BackFn = Box<dyn Fn(&[f64], &[Vec<f64>], &mut [Vec<f64>])>;

#[derive(Default)]
struct Inner {
    vals: Vec<Vec<f64>>,
    backs: Vec<Option<BackFn>>,
    params: HashMap<String, (usize, Shape)>,
}

/// Flat computation tape. One tape per forward pass; dropped afterwards.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

thread_local! {
    // Fault-injection switch used by the gradient-check self test.
    static BILINEAR_GRAD_SIGN: std::cell::Cell<f64> = const { std::cell::Cell::new(1.0) };
}

/// Test hook: flip the sign of the bilinear-sampling backward kernel.
///
/// Exists so the gradient checker can prove it detects a corrupted backward
/// pass. Never enabled outside tests.
pub fn corrupt_bilinear_backward(enable: bool) {
    BILINEAR_GRAD_SIGN.with(|c| c.set(if enable { -1.0 } else { 1.0 }));
}

fn accumulate(grads: &mut [Vec<f64>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    if grads[id].is_empty() {
        grads[id] = vec![0.0; len];
    }
    f(&mut grads[id]);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, val: Vec<f64>, shape: Shape, back: Option<BackFn>) -> Var {
        debug_assert_eq!(val.len(), shape.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.vals.len();
        inner.vals.push(val);
        inner.backs.push(back);
        Var { id, shape }
    }

    /// Leaf with no gradient flow.
    pub fn constant(&self, val: Vec<f64>, shape: Shape) -> Var {
        self.push(val, shape, None)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(vec![v], Shape::Vec(1))
    }

    /// Named parameter leaf. Repeated requests for the same name within one
    /// tape return the same node, so gradients accumulate across uses.
    pub fn param(&self, name: &str, val: &[f64], shape: Shape) -> Var {
        if let Some(&(id, s)) = self.inner.borrow().params.get(name) {
            debug_assert_eq!(s, shape);
            return Var { id, shape: s };
        }
        let var = self.push(val.to_vec(), shape, None);
        self.inner
            .borrow_mut()
            .params
            .insert(name.to_string(), (var.id, shape));
        var
    }

    /// Clone of a node's value.
    pub fn value(&self, v: Var) -> Vec<f64> {
        self.inner.borrow().vals[v.id].clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(v.len(), 1);
        self.inner.borrow().vals[v.id][0]
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.inner.borrow().vals[v.id].iter().all(|x| x.is_finite())
    }

    /// Reverse pass from a scalar loss. Returns per-parameter gradients in
    /// deterministic (name-sorted) order; parameters never touched by the
    /// loss get zero gradients.
    pub fn backward(&self, loss: Var) -> Vec<(String, Vec<f64>)> {
        assert_eq!(loss.len(), 1, "backward expects a scalar loss");
        let mut inner = self.inner.borrow_mut();
        let n = inner.vals.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        grads[loss.id] = vec![1.0];
        let Inner { vals, backs, params } = &mut *inner;
        for id in (0..n).rev() {
            if grads[id].is_empty() {
                continue;
            }
            if let Some(back) = &backs[id] {
                let g = std::mem::take(&mut grads[id]);
                back(&g, vals, &mut grads);
            }
        }
        let mut out: Vec<(String, Vec<f64>)> = params
            .iter()
            .map(|(name, &(id, shape))| {
                let g = if grads[id].is_empty() {
                    vec![0.0; shape.len()]
                } else {
                    std::mem::take(&mut grads[id])
                };
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape.len(), b.shape.len(), "add shape mismatch");
        let inner = self.inner.borrow();
        let val: Vec<f64> = inner.vals[a.id]
            .iter()
            .zip(&inner.vals[b.id])
            .map(|(x, y)| x + y)
            .collect();
        drop(inner);
        let (ia, ib, n) = (a.id, b.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accumulate(grads, ib, n, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape.len(), b.shape.len(), "sub shape mismatch");
        let inner = self.inner.borrow();
        let val: Vec<f64> = inner.vals[a.id]
            .iter()
            .zip(&inner.vals[b.id])
            .map(|(x, y)| x - y)
            .collect();
        drop(inner);
        let (ia, ib, n) = (a.id, b.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accumulate(grads, ib, n, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape.len(), b.shape.len(), "mul shape mismatch");
        let inner = self.inner.borrow();
        let val: Vec<f64> = inner.vals[a.id]
            .iter()
            .zip(&inner.vals[b.id])
            .map(|(x, y)| x * y)
            .collect();
        drop(inner);
        let (ia, ib, n) = (a.id, b.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * v[ib][i];
                    }
                });
                accumulate(grads, ib, n, |gb| {
                    for i in 0..n {
                        gb[i] += g[i] * v[ia][i];
                    }
                });
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x * s).collect();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, gv) in ga.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                });
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x.max(0.0)).collect();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        if v[ia][i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id]
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let (ia, n) = (a.id, a.len());
        let saved = val.clone();
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * saved[i] * (1.0 - saved[i]);
                    }
                });
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x.tanh()).collect();
        let (ia, n) = (a.id, a.len());
        let saved = val.clone();
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * (1.0 - saved[i] * saved[i]);
                    }
                });
            })),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x.abs()).collect();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * v[ia][i].signum() * (v[ia][i] != 0.0) as i32 as f64;
                    }
                });
            })),
        )
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id]
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        if v[ia][i] > lo && v[ia][i] < hi {
                            ga[i] += g[i];
                        }
                    }
                });
            })),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x.ln()).collect();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] / v[ia][i];
                    }
                });
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.inner.borrow().vals[a.id].iter().sum();
        let (ia, n) = (a.id, a.len());
        self.push(
            vec![s],
            Shape::Vec(1),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                });
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.sum(a);
        self.scale(s, 1.0 / a.len() as f64)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.len(), b.len(), "dot shape mismatch");
        let inner = self.inner.borrow();
        let s: f64 = inner.vals[a.id]
            .iter()
            .zip(&inner.vals[b.id])
            .map(|(x, y)| x * y)
            .sum();
        drop(inner);
        let (ia, ib, n) = (a.id, b.id, a.len());
        self.push(
            vec![s],
            Shape::Vec(1),
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[0] * v[ib][i];
                    }
                });
                accumulate(grads, ib, n, |gb| {
                    for i in 0..n {
                        gb[i] += g[0] * v[ia][i];
                    }
                });
            })),
        )
    }

    // ---- linear algebra ----

    /// y = W x for row-major W (m x n).
    pub fn matvec(&self, w: Var, x: Var) -> Var {
        let (m, n) = match w.shape {
            Shape::Mat(m, n) => (m, n),
            _ => panic!("matvec expects a matrix"),
        };
        assert_eq!(x.len(), n, "matvec shape mismatch");
        let inner = self.inner.borrow();
        let wd = &inner.vals[w.id];
        let xd = &inner.vals[x.id];
        let mut y = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            y[i] = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        }
        drop(inner);
        let (iw, ix) = (w.id, x.id);
        self.push(
            y,
            Shape::Vec(m),
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, iw, m * n, |gw| {
                    for i in 0..m {
                        let gi = g[i];
                        let row = &mut gw[i * n..(i + 1) * n];
                        for (d, xv) in row.iter_mut().zip(&v[ix]) {
                            *d += gi * xv;
                        }
                    }
                });
                accumulate(grads, ix, n, |gx| {
                    for i in 0..m {
                        let gi = g[i];
                        let row = &v[iw][i * n..(i + 1) * n];
                        for (d, wv) in gx.iter_mut().zip(row) {
                            *d += gi * wv;
                        }
                    }
                });
            })),
        )
    }

    /// y = x^T W for row-major W (n x m): the dense-layer product with an
    /// (input, output) weight layout. Also computes M^T w when `x` holds row
    /// weights for a matrix `w`.
    pub fn vecmat(&self, x: Var, w: Var) -> Var {
        let (n, m) = match w.shape {
            Shape::Mat(n, m) => (n, m),
            _ => panic!("vecmat expects a matrix"),
        };
        assert_eq!(x.len(), n, "vecmat shape mismatch");
        let inner = self.inner.borrow();
        let wd = &inner.vals[w.id];
        let xd = &inner.vals[x.id];
        let mut y = vec![0.0; m];
        for i in 0..n {
            let xi = xd[i];
            if xi == 0.0 {
                continue;
            }
            let row = &wd[i * m..(i + 1) * m];
            for (d, wv) in y.iter_mut().zip(row) {
                *d += xi * wv;
            }
        }
        drop(inner);
        let (iw, ix) = (w.id, x.id);
        self.push(
            y,
            Shape::Vec(m),
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ix, n, |gx| {
                    for i in 0..n {
                        let row = &v[iw][i * m..(i + 1) * m];
                        gx[i] += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                accumulate(grads, iw, n * m, |gw| {
                    for i in 0..n {
                        let xi = v[ix][i];
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * m..(i + 1) * m];
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d += xi * gv;
                        }
                    }
                });
            })),
        )
    }

    /// C = A B for A (m x k), B (k x n).
    pub fn matmul_nn(&self, a: Var, b: Var) -> Var {
        let (m, k) = match a.shape {
            Shape::Mat(m, k) => (m, k),
            _ => panic!("matmul_nn expects matrices"),
        };
        let (k2, n) = match b.shape {
            Shape::Mat(k2, n) => (k2, n),
            _ => panic!("matmul_nn expects matrices"),
        };
        assert_eq!(k, k2, "matmul_nn inner dim mismatch");
        let inner = self.inner.borrow();
        let ad = &inner.vals[a.id];
        let bd = &inner.vals[b.id];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for (d, bv) in crow.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        drop(inner);
        let (ia, ib) = (a.id, b.id);
        self.push(
            c,
            Shape::Mat(m, n),
            Some(Box::new(move |g, v, grads| {
                // dA = G B^T, dB = A^T G
                accumulate(grads, ia, m * k, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &v[ib][p * n..(p + 1) * n];
                            ga[i * k + p] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                accumulate(grads, ib, k * n, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = v[ia][i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for (d, gv) in brow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            })),
        )
    }

    /// C = A B^T for A (m x k), B (n x k): contraction over the shared last
    /// axis, i.e. all pairwise row dot products.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (m, k) = match a.shape {
            Shape::Mat(m, k) => (m, k),
            _ => panic!("matmul_nt expects matrices"),
        };
        let (n, k2) = match b.shape {
            Shape::Mat(n, k2) => (n, k2),
            _ => panic!("matmul_nt expects matrices"),
        };
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let inner = self.inner.borrow();
        let ad = &inner.vals[a.id];
        let bd = &inner.vals[b.id];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        drop(inner);
        let (ia, ib) = (a.id, b.id);
        self.push(
            c,
            Shape::Mat(m, n),
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ia, m * k, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &v[ib][j * k..(j + 1) * k];
                            let arow = &mut ga[i * k..(i + 1) * k];
                            for (d, bv) in arow.iter_mut().zip(brow) {
                                *d += gij * bv;
                            }
                        }
                    }
                });
                accumulate(grads, ib, n * k, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let arow = &v[ia][i * k..(i + 1) * k];
                            let brow = &mut gb[j * k..(j + 1) * k];
                            for (d, av) in brow.iter_mut().zip(arow) {
                                *d += gij * av;
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Dense layer: x^T W + b with W (in x out).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.vecmat(x, w);
        self.add(y, b)
    }

    /// Adds `b` to every row of X (m x n).
    pub fn add_row_broadcast(&self, x: Var, b: Var) -> Var {
        let (m, n) = match x.shape {
            Shape::Mat(m, n) => (m, n),
            _ => panic!("add_row_broadcast expects a matrix"),
        };
        assert_eq!(b.len(), n);
        let inner = self.inner.borrow();
        let mut val = inner.vals[x.id].clone();
        let bd = &inner.vals[b.id];
        for i in 0..m {
            let row = &mut val[i * n..(i + 1) * n];
            for (d, bv) in row.iter_mut().zip(bd) {
                *d += bv;
            }
        }
        drop(inner);
        let (ix, ib) = (x.id, b.id);
        self.push(
            val,
            x.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ix, m * n, |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accumulate(grads, ib, n, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for (d, s) in gb.iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                });
            })),
        )
    }

    // ---- structure ----

    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of empty list");
        let n = rows[0].len();
        let t = rows.len();
        let mut val = Vec::with_capacity(t * n);
        {
            let inner = self.inner.borrow();
            for r in rows {
                assert_eq!(r.len(), n, "stack_rows row length mismatch");
                val.extend_from_slice(&inner.vals[r.id]);
            }
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.id).collect();
        self.push(
            val,
            Shape::Mat(t, n),
            Some(Box::new(move |g, _v, grads| {
                for (r, &id) in ids.iter().enumerate() {
                    accumulate(grads, id, n, |gr| {
                        for (d, s) in gr.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += s;
                        }
                    });
                }
            })),
        )
    }

    pub fn stack_scalars(&self, scalars: &[Var]) -> Var {
        assert!(!scalars.is_empty(), "stack_scalars of empty list");
        let mut val = Vec::with_capacity(scalars.len());
        {
            let inner = self.inner.borrow();
            for s in scalars {
                assert_eq!(s.len(), 1, "stack_scalars expects scalars");
                val.push(inner.vals[s.id][0]);
            }
        }
        let ids: Vec<usize> = scalars.iter().map(|s| s.id).collect();
        self.push(
            val,
            Shape::Vec(ids.len()),
            Some(Box::new(move |g, _v, grads| {
                for (i, &id) in ids.iter().enumerate() {
                    accumulate(grads, id, 1, |gs| gs[0] += g[i]);
                }
            })),
        )
    }

    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of empty list");
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut val = Vec::with_capacity(total);
        {
            let inner = self.inner.borrow();
            for p in parts {
                val.extend_from_slice(&inner.vals[p.id]);
            }
        }
        let meta: Vec<(usize, usize)> = parts.iter().map(|p| (p.id, p.len())).collect();
        self.push(
            val,
            Shape::Vec(total),
            Some(Box::new(move |g, _v, grads| {
                let mut off = 0;
                for &(id, len) in &meta {
                    accumulate(grads, id, len, |gp| {
                        for (d, s) in gp.iter_mut().zip(&g[off..off + len]) {
                            *d += s;
                        }
                    });
                    off += len;
                }
            })),
        )
    }

    /// Row i of a matrix as a vector.
    pub fn row(&self, m: Var, i: usize) -> Var {
        let (rows, cols) = match m.shape {
            Shape::Mat(r, c) => (r, c),
            _ => panic!("row expects a matrix"),
        };
        assert!(i < rows);
        let val = self.inner.borrow().vals[m.id][i * cols..(i + 1) * cols].to_vec();
        let im = m.id;
        self.push(
            val,
            Shape::Vec(cols),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, im, rows * cols, |gm| {
                    for (d, s) in gm[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    /// Contiguous sub-vector [start, start+len).
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Var {
        let n = a.len();
        assert!(start + len <= n, "slice out of range");
        let val = self.inner.borrow().vals[a.id][start..start + len].to_vec();
        let ia = a.id;
        self.push(
            val,
            Shape::Vec(len),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga[start..start + len].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    /// Column block [start, start+len) of a matrix.
    pub fn cols(&self, m: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = match m.shape {
            Shape::Mat(r, c) => (r, c),
            _ => panic!("cols expects a matrix"),
        };
        assert!(start + len <= cols, "cols out of range");
        let inner = self.inner.borrow();
        let md = &inner.vals[m.id];
        let mut val = Vec::with_capacity(rows * len);
        for r in 0..rows {
            val.extend_from_slice(&md[r * cols + start..r * cols + start + len]);
        }
        drop(inner);
        let im = m.id;
        self.push(
            val,
            Shape::Mat(rows, len),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, im, rows * cols, |gm| {
                    for r in 0..rows {
                        let src = &g[r * len..(r + 1) * len];
                        let dst = &mut gm[r * cols + start..r * cols + start + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            })),
        )
    }

    /// View a length-n vector as an n x 1 column matrix (copy).
    pub fn as_col(&self, a: Var) -> Var {
        let n = a.len();
        let val = self.inner.borrow().vals[a.id].clone();
        let ia = a.id;
        self.push(
            val,
            Shape::Mat(n, 1),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    /// Reshape to a flat vector (copy).
    pub fn flatten(&self, a: Var) -> Var {
        let val = self.inner.borrow().vals[a.id].clone();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            Shape::Vec(n),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    /// View an H x W x C map as an (H*W) x C matrix (copy).
    pub fn map_as_mat(&self, a: Var) -> Var {
        let (h, w, c) = match a.shape {
            Shape::Map(h, w, c) => (h, w, c),
            _ => panic!("map_as_mat expects a map"),
        };
        let val = self.inner.borrow().vals[a.id].clone();
        let (ia, n) = (a.id, a.len());
        self.push(
            val,
            Shape::Mat(h * w, c),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ia, n, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            })),
        )
    }

    pub fn div_by_scalar(&self, a: Var, s: Var) -> Var {
        assert_eq!(s.len(), 1);
        let sv = self.scalar(s);
        let val: Vec<f64> = self.inner.borrow().vals[a.id].iter().map(|x| x / sv).collect();
        let (ia, is, n) = (a.id, s.id, a.len());
        self.push(
            val,
            a.shape,
            Some(Box::new(move |g, v, grads| {
                let sv = v[is][0];
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] / sv;
                    }
                });
                accumulate(grads, is, 1, |gs| {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc -= g[i] * v[ia][i] / (sv * sv);
                    }
                    gs[0] += acc;
                });
            })),
        )
    }

    // ---- nonlinear blocks ----

    /// Numerically stable softmax over a vector.
    pub fn softmax(&self, a: Var) -> Var {
        let n = a.len();
        assert!(n >= 1, "softmax of empty vector");
        let inner = self.inner.borrow();
        let x = &inner.vals[a.id];
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        drop(inner);
        let ia = a.id;
        let saved = p.clone();
        self.push(
            p,
            a.shape,
            Some(Box::new(move |g, _v, grads| {
                let gp: f64 = g.iter().zip(&saved).map(|(x, y)| x * y).sum();
                accumulate(grads, ia, n, |ga| {
                    for i in 0..n {
                        ga[i] += saved[i] * (g[i] - gp);
                    }
                });
            })),
        )
    }

    /// LayerNorm with learnable gain and bias, epsilon 1e-5.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let n = x.len();
        assert_eq!(gamma.len(), n);
        assert_eq!(beta.len(), n);
        let inner = self.inner.borrow();
        let xv = &inner.vals[x.id];
        let mean: f64 = xv.iter().sum::<f64>() / n as f64;
        let var: f64 = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + EPS).sqrt();
        let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * inv_std).collect();
        let val: Vec<f64> = xhat
            .iter()
            .zip(&inner.vals[gamma.id])
            .zip(&inner.vals[beta.id])
            .map(|((h, g), b)| h * g + b)
            .collect();
        drop(inner);
        let (ix, ig, ib) = (x.id, gamma.id, beta.id);
        let saved = xhat;
        self.push(
            val,
            x.shape,
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ib, n, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                accumulate(grads, ig, n, |gg| {
                    for i in 0..n {
                        gg[i] += g[i] * saved[i];
                    }
                });
                // dxhat = g * gamma; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                let gamma_v = &v[ig];
                let dxhat: Vec<f64> = (0..n).map(|i| g[i] * gamma_v[i]).collect();
                let m1: f64 = dxhat.iter().sum::<f64>() / n as f64;
                let m2: f64 = dxhat.iter().zip(&saved).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                accumulate(grads, ix, n, |gx| {
                    for i in 0..n {
                        gx[i] += inv_std * (dxhat[i] - m1 - saved[i] * m2);
                    }
                });
            })),
        )
    }

    // ---- sampling / geometry ----

    /// Differentiable bilinear lookup of a map at a 2-vector position, with
    /// clamp-to-edge borders. Gradients flow to both the map values and the
    /// coordinates (zero coordinate gradient in the clamped region).
    pub fn bilinear(&self, map: Var, xy: Var) -> Var {
        let (h, w, c) = match map.shape {
            Shape::Map(h, w, c) => (h, w, c),
            _ => panic!("bilinear expects a map"),
        };
        assert_eq!(xy.len(), 2);
        let inner = self.inner.borrow();
        let pos = &inner.vals[xy.id];
        let (x, y) = (pos[0], pos[1]);
        assert!(
            x.is_finite() && y.is_finite(),
            "non-finite bilinear coordinate"
        );
        let (corners, weights) = bilinear_corners(h, w, x, y);
        let md = &inner.vals[map.id];
        let mut val = vec![0.0; c];
        for (corner, wt) in corners.iter().zip(weights.iter()) {
            let off = (corner.1 * w + corner.0) * c;
            for (d, f) in val.iter_mut().zip(&md[off..off + c]) {
                *d += wt * f;
            }
        }
        drop(inner);
        let (imap, ixy) = (map.id, xy.id);
        self.push(
            val,
            Shape::Vec(c),
            Some(Box::new(move |g, v, grads| {
                let sign = BILINEAR_GRAD_SIGN.with(|s| s.get());
                let pos = &v[ixy];
                let (x, y) = (pos[0], pos[1]);
                let (corners, weights) = bilinear_corners(h, w, x, y);
                accumulate(grads, imap, h * w * c, |gm| {
                    for (corner, wt) in corners.iter().zip(weights.iter()) {
                        let off = (corner.1 * w + corner.0) * c;
                        for (d, gv) in gm[off..off + c].iter_mut().zip(g) {
                            *d += sign * wt * gv;
                        }
                    }
                });
                // d(out)/dx and d(out)/dy from the interpolation weights;
                // zero once the coordinate is clamped.
                let in_x = x > 0.0 && x < (w - 1) as f64;
                let in_y = y > 0.0 && y < (h - 1) as f64;
                if in_x || in_y {
                    let md = &v[imap];
                    let fetch = |ci: usize, corner: (usize, usize)| -> f64 {
                        md[(corner.1 * w + corner.0) * c + ci]
                    };
                    let xc = x.clamp(0.0, (w - 1) as f64);
                    let yc = y.clamp(0.0, (h - 1) as f64);
                    let fx = xc - xc.floor().min((w - 1) as f64);
                    let fy = yc - yc.floor().min((h - 1) as f64);
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for (ci, gv) in g.iter().enumerate() {
                        let f00 = fetch(ci, corners[0]);
                        let f10 = fetch(ci, corners[1]);
                        let f01 = fetch(ci, corners[2]);
                        let f11 = fetch(ci, corners[3]);
                        gx += gv * ((1.0 - fy) * (f10 - f00) + fy * (f11 - f01));
                        gy += gv * ((1.0 - fx) * (f01 - f00) + fx * (f11 - f10));
                    }
                    accumulate(grads, ixy, 2, |gp| {
                        if in_x {
                            gp[0] += sign * gx;
                        }
                        if in_y {
                            gp[1] += sign * gy;
                        }
                    });
                }
            })),
        )
    }

    /// 2D convolution over a channel-last map; kernel kh x kw x cin x cout.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (h, w, cin) = match x.shape {
            Shape::Map(h, w, c) => (h, w, c),
            _ => panic!("conv2d expects a map input"),
        };
        let (kh, kw, kci, cout) = match kernel.shape {
            Shape::Kernel(a, b, c, d) => (a, b, c, d),
            _ => panic!("conv2d expects a kernel"),
        };
        assert_eq!(kci, cin, "conv2d channel mismatch");
        assert_eq!(bias.len(), cout);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let inner = self.inner.borrow();
        let xd = &inner.vals[x.id];
        let kd = &inner.vals[kernel.id];
        let bd = &inner.vals[bias.id];
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let o_off = (oy * wo + ox) * cout;
                out[o_off..o_off + cout].copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i_off = (iy as usize * w + ix as usize) * cin;
                        let k_off = ((ky * kw + kx) * cin) * cout;
                        for ci in 0..cin {
                            let xv = xd[i_off + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kd[k_off + ci * cout..k_off + (ci + 1) * cout];
                            let orow = &mut out[o_off..o_off + cout];
                            for (d, kv) in orow.iter_mut().zip(krow) {
                                *d += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        drop(inner);
        let (ix, ik, ib) = (x.id, kernel.id, bias.id);
        self.push(
            out,
            Shape::Map(ho, wo, cout),
            Some(Box::new(move |g, v, grads| {
                accumulate(grads, ib, cout, |gb| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let o_off = (oy * wo + ox) * cout;
                            for (d, s) in gb.iter_mut().zip(&g[o_off..o_off + cout]) {
                                *d += s;
                            }
                        }
                    }
                });
                accumulate(grads, ik, kh * kw * cin * cout, |gk| {
                    let xd = &v[ix];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let o_off = (oy * wo + ox) * cout;
                            let grow = &g[o_off..o_off + cout];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix2 = (ox * stride + kx) as isize - pad as isize;
                                    if ix2 < 0 || ix2 >= w as isize {
                                        continue;
                                    }
                                    let i_off = (iy as usize * w + ix2 as usize) * cin;
                                    let k_off = ((ky * kw + kx) * cin) * cout;
                                    for ci in 0..cin {
                                        let xv = xd[i_off + ci];
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let krow =
                                            &mut gk[k_off + ci * cout..k_off + (ci + 1) * cout];
                                        for (d, gv) in krow.iter_mut().zip(grow) {
                                            *d += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                accumulate(grads, ix, h * w * cin, |gx| {
                    let kd = &v[ik];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let o_off = (oy * wo + ox) * cout;
                            let grow = &g[o_off..o_off + cout];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix2 = (ox * stride + kx) as isize - pad as isize;
                                    if ix2 < 0 || ix2 >= w as isize {
                                        continue;
                                    }
                                    let i_off = (iy as usize * w + ix2 as usize) * cin;
                                    let k_off = ((ky * kw + kx) * cin) * cout;
                                    for ci in 0..cin {
                                        let krow =
                                            &kd[k_off + ci * cout..k_off + (ci + 1) * cout];
                                        gx[i_off + ci] += krow
                                            .iter()
                                            .zip(grow)
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Expected (x, y) under a probability vector laid out as an h x w map.
    pub fn soft_argmax(&self, p: Var, height: usize, width: usize) -> Var {
        assert_eq!(p.len(), height * width, "soft_argmax shape mismatch");
        let inner = self.inner.borrow();
        let pd = &inner.vals[p.id];
        let mut x = 0.0;
        let mut y = 0.0;
        for j in 0..height {
            for i in 0..width {
                let w = pd[j * width + i];
                x += w * i as f64;
                y += w * j as f64;
            }
        }
        drop(inner);
        let ip = p.id;
        self.push(
            vec![x, y],
            Shape::Vec(2),
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ip, height * width, |gp| {
                    for j in 0..height {
                        for i in 0..width {
                            gp[j * width + i] += g[0] * i as f64 + g[1] * j as f64;
                        }
                    }
                });
            })),
        )
    }

    /// Sinusoidal encoding of a 2-vector position into `channels` values.
    ///
    /// Frequencies are whole cycles per lattice cell (2pi * 2^(k mod 4)), so
    /// the encoding is exactly invariant under integer lattice shifts; it
    /// describes the sub-cell position only.
    pub fn posenc2d(&self, xy: Var, channels: usize) -> Var {
        assert_eq!(xy.len(), 2);
        assert!(channels % 4 == 0, "posenc2d needs channels divisible by 4");
        let quarter = channels / 4;
        let pos = self.value(xy);
        let mut val = Vec::with_capacity(channels);
        let mut freqs = Vec::with_capacity(quarter);
        for k in 0..quarter {
            freqs.push(2.0 * std::f64::consts::PI * f64::powi(2.0, (k % 4) as i32));
        }
        for &coord in &pos {
            for &w in &freqs {
                let a = w * coord;
                val.push(a.sin());
                val.push(a.cos());
            }
        }
        let ixy = xy.id;
        self.push(
            val,
            Shape::Vec(channels),
            Some(Box::new(move |g, v, grads| {
                let pos = &v[ixy];
                accumulate(grads, ixy, 2, |gp| {
                    for (c, &coord) in pos.iter().enumerate() {
                        let base = c * 2 * quarter;
                        let mut acc = 0.0;
                        for (k, &w) in freqs.iter().enumerate() {
                            let a = w * coord;
                            let (s, cs) = a.sin_cos();
                            acc += g[base + 2 * k] * cs * w;
                            acc -= g[base + 2 * k + 1] * s * w;
                        }
                        gp[c] += acc;
                    }
                });
            })),
        )
    }

    /// Rotate the (even, odd) channel pairs of a vector by `index` steps of
    /// the rotary frequency schedule.
    pub fn rope_rotate(&self, x: Var, index: usize) -> Var {
        let n = x.len();
        assert!(n % 2 == 0, "rope_rotate needs an even length");
        let half = n / 2;
        let xv = self.value(x);
        let mut val = vec![0.0; n];
        for k in 0..half {
            let angle = index as f64 * rotary_frequency(k, half);
            let (s, c) = angle.sin_cos();
            val[2 * k] = c * xv[2 * k] - s * xv[2 * k + 1];
            val[2 * k + 1] = s * xv[2 * k] + c * xv[2 * k + 1];
        }
        let ixv = x.id;
        self.push(
            val,
            x.shape,
            Some(Box::new(move |g, _v, grads| {
                accumulate(grads, ixv, n, |gx| {
                    for k in 0..half {
                        let angle = index as f64 * rotary_frequency(k, half);
                        let (s, c) = angle.sin_cos();
                        // transpose of the rotation = rotation by -angle
                        gx[2 * k] += c * g[2 * k] + s * g[2 * k + 1];
                        gx[2 * k + 1] += -s * g[2 * k] + c * g[2 * k + 1];
                    }
                });
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of one op's gradients w.r.t. one input.
    fn finite_diff_check(
        build: impl Fn(&Tape, &[f64]) -> (Var, Var),
        input: &[f64],
        tol: f64,
    ) {
        let eps = 1e-6;
        let tape = Tape::new();
        let (leaf, loss) = build(&tape, input);
        // Route the leaf through a named param so backward() reports it.
        let _ = (leaf, loss);
        // Re-run with param registration.
        let tape = Tape::new();
        let (_, loss) = build(&tape, input);
        let grads = tape.backward(loss);
        let g = &grads.iter().find(|(n, _)| n == "leaf").expect("leaf grad").1;
        for i in 0..input.len() {
            let mut plus = input.to_vec();
            plus[i] += eps;
            let mut minus = input.to_vec();
            minus[i] -= eps;
            let tp = Tape::new();
            let (_, lp) = build(&tp, &plus);
            let tm = Tape::new();
            let (_, lm) = build(&tm, &minus);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
            let denom = g[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (g[i] - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Vec(x.len()));
                let r = t.relu(v);
                let s = t.sigmoid(r);
                let m = t.mul(s, v);
                let h = t.tanh(m);
                (v, t.sum(h))
            },
            &[0.3, -0.7, 1.2, 0.01],
            1e-5,
        );
    }

    #[test]
    fn matvec_and_softmax_grads() {
        let x = pseudo_random(12, 3);
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Mat(3, 4));
                let q = t.constant(vec![0.5, -0.2, 0.8, 0.1], Shape::Vec(4));
                let logits = t.matvec(v, q);
                let p = t.softmax(logits);
                let target = t.constant(vec![0.2, 0.5, 0.3], Shape::Vec(3));
                let d = t.sub(p, target);
                let sq = t.mul(d, d);
                (v, t.sum(sq))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let x = pseudo_random(8, 11);
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Vec(8));
                let gamma = t.constant(vec![1.1; 8], Shape::Vec(8));
                let beta = t.constant(vec![0.05; 8], Shape::Vec(8));
                let y = t.layer_norm(v, gamma, beta);
                let w = t.constant(pseudo_random(8, 5), Shape::Vec(8));
                (v, t.dot(y, w))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn bilinear_grads_wrt_map_and_coords() {
        let map = pseudo_random(5 * 6 * 3, 7);
        finite_diff_check(
            |t, m| {
                let mv = t.param("leaf", m, Shape::Map(5, 6, 3));
                let xy = t.constant(vec![2.3, 1.7], Shape::Vec(2));
                let s = t.bilinear(mv, xy);
                (mv, t.sum(s))
            },
            &map,
            1e-5,
        );
        finite_diff_check(
            |t, xy| {
                let m = t.constant(pseudo_random(5 * 6 * 3, 7), Shape::Map(5, 6, 3));
                let p = t.param("leaf", xy, Shape::Vec(2));
                let s = t.bilinear(m, p);
                (p, t.sum(s))
            },
            &[2.3, 1.7],
            1e-4,
        );
    }

    #[test]
    fn conv2d_grads() {
        let x = pseudo_random(6 * 6 * 2, 13);
        finite_diff_check(
            |t, x| {
                let xv = t.param("leaf", x, Shape::Map(6, 6, 2));
                let k = t.constant(pseudo_random(3 * 3 * 2 * 4, 17), Shape::Kernel(3, 3, 2, 4));
                let b = t.constant(vec![0.02; 4], Shape::Vec(4));
                let y = t.conv2d(xv, k, b, 2, 1);
                let r = t.relu(y);
                (xv, t.sum(r))
            },
            &x,
            1e-5,
        );
        let k = pseudo_random(3 * 3 * 2 * 4, 19);
        finite_diff_check(
            |t, k| {
                let x = t.constant(pseudo_random(6 * 6 * 2, 13), Shape::Map(6, 6, 2));
                let kv = t.param("leaf", k, Shape::Kernel(3, 3, 2, 4));
                let b = t.constant(vec![0.02; 4], Shape::Vec(4));
                let y = t.conv2d(x, kv, b, 2, 1);
                let r = t.relu(y);
                (kv, t.sum(r))
            },
            &k,
            1e-5,
        );
    }

    #[test]
    fn matmul_variants_grads() {
        let a = pseudo_random(3 * 4, 23);
        finite_diff_check(
            |t, a| {
                let av = t.param("leaf", a, Shape::Mat(3, 4));
                let b = t.constant(pseudo_random(4 * 2, 29), Shape::Mat(4, 2));
                let c = t.matmul_nn(av, b);
                (av, t.sum(c))
            },
            &a,
            1e-5,
        );
        finite_diff_check(
            |t, a| {
                let av = t.param("leaf", a, Shape::Mat(3, 4));
                let b = t.constant(pseudo_random(5 * 4, 31), Shape::Mat(5, 4));
                let c = t.matmul_nt(av, b);
                let f = t.flatten(c);
                let w = t.constant(pseudo_random(15, 37), Shape::Vec(15));
                (av, t.dot(f, w))
            },
            &a,
            1e-5,
        );
    }

    #[test]
    fn soft_argmax_posenc_rope_grads() {
        let p = {
            let raw: Vec<f64> = pseudo_random(12, 41).iter().map(|v| v.abs() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        finite_diff_check(
            |t, p| {
                let pv = t.param("leaf", p, Shape::Vec(12));
                let xy = t.soft_argmax(pv, 3, 4);
                let w = t.constant(vec![0.7, -0.4], Shape::Vec(2));
                (pv, t.dot(xy, w))
            },
            &p,
            1e-5,
        );
        finite_diff_check(
            |t, xy| {
                let pv = t.param("leaf", xy, Shape::Vec(2));
                let e = t.posenc2d(pv, 8);
                let w = t.constant(pseudo_random(8, 43), Shape::Vec(8));
                (pv, t.dot(e, w))
            },
            &[0.37, 1.21],
            1e-4,
        );
        let x = pseudo_random(8, 47);
        finite_diff_check(
            |t, x| {
                let xv = t.param("leaf", x, Shape::Vec(8));
                let r = t.rope_rotate(xv, 5);
                let w = t.constant(pseudo_random(8, 53), Shape::Vec(8));
                (xv, t.dot(r, w))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn stack_concat_div_grads() {
        let x = pseudo_random(6, 59);
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Vec(6));
                let a = t.row(t.stack_rows(&[v, v]), 1);
                let s = t.sum(v);
                let d = t.div_by_scalar(a, s);
                let c = t.concat(&[d, v]);
                let w = t.constant(pseudo_random(12, 61), Shape::Vec(12));
                (v, t.dot(c, w))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn slice_and_cols_grads() {
        let x = pseudo_random(12, 67);
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Vec(12));
                let s = t.slice(v, 3, 5);
                let w = t.constant(pseudo_random(5, 71), Shape::Vec(5));
                (v, t.dot(s, w))
            },
            &x,
            1e-5,
        );
        finite_diff_check(
            |t, x| {
                let v = t.param("leaf", x, Shape::Mat(3, 4));
                let c = t.cols(v, 1, 2);
                let f = t.flatten(c);
                let w = t.constant(pseudo_random(6, 73), Shape::Vec(6));
                (v, t.dot(f, w))
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn param_nodes_are_cached_and_grads_accumulate() {
        let tape = Tape::new();
        let w = tape.param("w", &[2.0], Shape::Vec(1));
        let w2 = tape.param("w", &[2.0], Shape::Vec(1));
        assert_eq!(w.id, w2.id);
        // loss = w * w, dloss/dw = 2w = 4
        let loss = tape.mul(w, w2);
        let grads = tape.backward(loss);
        assert_eq!(grads[0].0, "w");
        assert!((grads[0].1[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn untouched_params_get_zero_grads() {
        let tape = Tape::new();
        let _unused = tape.param("unused", &[1.0, 2.0], Shape::Vec(2));
        let w = tape.param("w", &[3.0], Shape::Vec(1));
        let loss = tape.mul(w, w);
        let grads = tape.backward(loss);
        let unused = grads.iter().find(|(n, _)| n == "unused").unwrap();
        assert_eq!(unused.1, vec![0.0, 0.0]);
    }

    #[test]
    fn bilinear_corruption_hook_flips_gradient() {
        let run = || {
            let tape = Tape::new();
            let m = tape.param("m", &vec![1.0, 2.0, 3.0, 4.0], Shape::Map(2, 2, 1));
            let xy = tape.constant(vec![0.5, 0.5], Shape::Vec(2));
            let s = tape.bilinear(m, xy);
            let loss = tape.sum(s);
            tape.backward(loss)[0].1.clone()
        };
        let clean = run();
        corrupt_bilinear_backward(true);
        let corrupt = run();
        corrupt_bilinear_backward(false);
        for (a, b) in clean.iter().zip(&corrupt) {
            assert!((a + b).abs() < 1e-12, "corruption should flip signs");
        }
    }
}
