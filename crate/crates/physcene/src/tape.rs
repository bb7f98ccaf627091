//! Reverse-mode automatic differentiation over 2D tensors.
//!
//! A [`Tape`] records a computation as an append-only list of nodes, each
//! holding a matrix value and (for non-leaves) a vector-Jacobian-product
//! closure. [`Tape::backward`] walks the list once in reverse, accumulating
//! gradients in a fixed order, so results are deterministic.
//!
//! The op set is exactly what the denoiser needs: matrix multiply,
//! elementwise add/scale/ReLU, row broadcasts, parameter-free LayerNorm,
//! a fused scaled-dot-product attention, and a mean-squared-error head.
//! The attention op computes its two token-indexed reductions (softmax
//! normalizer and value mixing) by summing in sorted order, which makes the
//! forward pass exactly equivariant under permutation of the token rows.

use std::rc::Rc;

use ndarray::{s, Array2};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type VjpFn = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Rc<Array2<f64>>,
    parents: Vec<usize>,
    vjp: Option<VjpFn>,
}

/// Recorded computation graph; create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Sum floating-point addends in ascending `total_cmp` order. Because the
/// sorted sequence depends only on the multiset of values, the result is
/// exactly invariant under any reordering of the inputs.
pub fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Plain-value fused attention: per consecutive block of `block_rows` rows,
/// `softmax(scale * Q K^T)` applied to `V`. Shared by the tape op and the
/// no-tape inference path so both produce bit-identical outputs.
pub fn attend_values(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    block_rows: usize,
    scale: f64,
) -> Array2<f64> {
    let rows = q.nrows();
    let dv = v.ncols();
    let mut out = Array2::zeros((rows, dv));
    let mut buf: Vec<f64> = Vec::with_capacity(block_rows);
    for r0 in (0..rows).step_by(block_rows) {
        let n = block_rows.min(rows - r0);
        let qb = q.slice(s![r0..r0 + n, ..]);
        let kb = k.slice(s![r0..r0 + n, ..]);
        let vb = v.slice(s![r0..r0 + n, ..]);
        // Scores: rows of Q against rows of K (channel-ordered dot
        // products, unaffected by token order).
        let mut scores = qb.dot(&kb.t());
        scores.mapv_inplace(|x| x * scale);
        for i in 0..n {
            let row = scores.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            buf.clear();
            buf.extend(row.iter().map(|&x| (x - m).exp()));
            let mut weights = buf.clone();
            let denom = sorted_sum(&mut weights);
            // Attention-weighted value mix, summed in sorted order per
            // output element.
            for c in 0..dv {
                let mut terms: Vec<f64> =
                    (0..n).map(|j| buf[j] / denom * vb[(j, c)]).collect();
                out[(r0 + i, c)] = sorted_sum(&mut terms);
            }
        }
    }
    out
}

/// Gradients of [`attend_values`] with respect to q, k, v.
fn attend_vjp(
    upstream: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    block_rows: usize,
    scale: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let rows = q.nrows();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for r0 in (0..rows).step_by(block_rows) {
        let n = block_rows.min(rows - r0);
        let qb = q.slice(s![r0..r0 + n, ..]);
        let kb = k.slice(s![r0..r0 + n, ..]);
        let vb = v.slice(s![r0..r0 + n, ..]);
        let ub = upstream.slice(s![r0..r0 + n, ..]);
        // Recompute the attention weights (plain order; only the forward
        // needs the permutation-exact reduction).
        let mut a = qb.dot(&kb.t());
        a.mapv_inplace(|x| x * scale);
        for i in 0..n {
            let m = a.row(i).iter().fold(f64::NEG_INFINITY, |acc, &b| acc.max(b));
            let mut denom = 0.0;
            for j in 0..n {
                a[(i, j)] = (a[(i, j)] - m).exp();
                denom += a[(i, j)];
            }
            for j in 0..n {
                a[(i, j)] /= denom;
            }
        }
        dv.slice_mut(s![r0..r0 + n, ..]).assign(&a.t().dot(&ub));
        let da = ub.dot(&vb.t());
        // Softmax backward per row: ds = a * (da - sum(da * a)).
        let mut ds = da;
        for i in 0..n {
            let dot: f64 = (0..n).map(|j| ds[(i, j)] * a[(i, j)]).sum();
            for j in 0..n {
                ds[(i, j)] = a[(i, j)] * (ds[(i, j)] - dot);
            }
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(s![r0..r0 + n, ..]).assign(&ds.dot(&kb));
        dk.slice_mut(s![r0..r0 + n, ..]).assign(&ds.t().dot(&qb));
    }
    (dq, dk, dv)
}

/// Row-wise LayerNorm values (no learned gain/bias).
pub fn layer_norm_values(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<usize>, vjp: Option<VjpFn>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), parents, vjp });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Record an input (leaf) tensor.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Matrix product `a . b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Model(format!(
                "matmul shape mismatch: {:?} . {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let value = av.dot(&*bv);
        let vjp: VjpFn = Box::new(move |up| {
            vec![up.dot(&bv.t()), av.t().dot(up)]
        });
        Ok(self.push(value, vec![a.0, b.0], Some(vjp)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        if av.dim() != bv.dim() {
            return Err(Error::Model(format!(
                "add shape mismatch: {:?} + {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let value = &*av + &*bv;
        let vjp: VjpFn = Box::new(move |up| vec![up.clone(), up.clone()]);
        Ok(self.push(value, vec![a.0, b.0], Some(vjp)))
    }

    /// Broadcast-add a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.rc(a), self.rc(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::Model(format!(
                "add_row needs a 1x{} row, got {:?}",
                av.ncols(),
                rv.dim()
            )));
        }
        let value = &*av + &rv.row(0);
        let vjp: VjpFn = Box::new(move |up| {
            let col_sum = up.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            vec![up.clone(), col_sum]
        });
        Ok(self.push(value, vec![a.0, row.0], Some(vjp)))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.rc(a);
        let value = av.mapv(|v| v * c);
        let vjp: VjpFn = Box::new(move |up| vec![up.mapv(|v| v * c)]);
        self.push(value, vec![a.0], Some(vjp))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let value = av.mapv(|v| v.max(0.0));
        let vjp: VjpFn = Box::new(move |up| {
            let mut g = up.clone();
            ndarray::Zip::from(&mut g).and(&*av).for_each(|gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![g]
        });
        self.push(value, vec![a.0], Some(vjp))
    }

    /// Row-wise LayerNorm without learned parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.rc(a);
        let value = layer_norm_values(&av, eps);
        let vjp: VjpFn = Box::new(move |up| {
            let d = av.ncols() as f64;
            let mut g = Array2::zeros(av.raw_dim());
            for (i, row) in av.rows().into_iter().enumerate() {
                let mean = row.sum() / d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + eps).sqrt();
                let y: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                let dy = up.row(i);
                let mean_dy = dy.sum() / d;
                let mean_dy_y: f64 =
                    dy.iter().zip(&y).map(|(&a, &b)| a * b).sum::<f64>() / d;
                for j in 0..av.ncols() {
                    g[(i, j)] = inv * (dy[j] - mean_dy - y[j] * mean_dy_y);
                }
            }
            vec![g]
        });
        self.push(value, vec![a.0], Some(vjp))
    }

    /// Fused block-diagonal attention: `softmax(scale * Q K^T) V` applied
    /// independently to each consecutive block of `block_rows` rows.
    pub fn attend(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        block_rows: usize,
        scale: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.rc(q), self.rc(k), self.rc(v));
        if qv.dim() != kv.dim() || qv.nrows() != vv.nrows() {
            return Err(Error::Model(format!(
                "attend shape mismatch: q {:?}, k {:?}, v {:?}",
                qv.dim(),
                kv.dim(),
                vv.dim()
            )));
        }
        if block_rows == 0 || qv.nrows() % block_rows != 0 {
            return Err(Error::Model(format!(
                "attend: {} rows not divisible into blocks of {block_rows}",
                qv.nrows()
            )));
        }
        let value = attend_values(&qv, &kv, &vv, block_rows, scale);
        let vjp: VjpFn = Box::new(move |up| {
            let (dq, dk, dv) = attend_vjp(up, &qv, &kv, &vv, block_rows, scale);
            vec![dq, dk, dv]
        });
        Ok(self.push(value, vec![q.0, k.0, v.0], Some(vjp)))
    }

    /// Scalar node (1x1): mean of squared differences between two
    /// same-shape tensors.
    pub fn mean_sq_diff(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.rc(pred), self.rc(target));
        if pv.dim() != tv.dim() {
            return Err(Error::Model(format!(
                "mean_sq_diff shape mismatch: {:?} vs {:?}",
                pv.dim(),
                tv.dim()
            )));
        }
        let count = (pv.nrows() * pv.ncols()) as f64;
        let mse = ndarray::Zip::from(&*pv)
            .and(&*tv)
            .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t))
            / count;
        let value = Array2::from_elem((1, 1), mse);
        let vjp: VjpFn = Box::new(move |up| {
            let u = up[(0, 0)] * 2.0 / count;
            let dpred = ndarray::Zip::from(&*pv).and(&*tv).map_collect(|&p, &t| u * (p - t));
            let dtarget = dpred.mapv(|v| -v);
            vec![dpred, dtarget]
        });
        Ok(self.push(value, vec![pred.0, target.0], Some(vjp)))
    }

    /// Gradients of a scalar (1x1) root with respect to `wrt` nodes, in
    /// `wrt` order. Nodes that cannot influence the root get zeros.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        let root_val = self.value(root);
        if root_val.dim() != (1, 1) {
            return Err(Error::Model(format!(
                "backward root must be a 1x1 scalar, got {:?}",
                root_val.dim()
            )));
        }
        // Only propagate into subgraphs that can reach a requested node.
        let mut needed = vec![false; self.nodes.len()];
        for v in wrt {
            needed[v.0] = true;
        }
        for i in 0..self.nodes.len() {
            if !needed[i] && self.nodes[i].parents.iter().any(|&p| needed[p]) {
                needed[i] = true;
            }
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let Some(vjp) = &node.vjp else { continue };
            if !node.parents.iter().any(|&p| needed[p]) {
                continue;
            }
            let upstream = grads[id].as_ref().expect("checked above").clone();
            let parent_grads = vjp(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                if !needed[*p] {
                    continue;
                }
                match &mut grads[*p] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.nodes[v.0].value.raw_dim()))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randm(r: usize, c: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference of a scalar function of one leaf.
    fn fd_grad<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, f: F, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[(i, j)] += h;
            xm[(i, j)] -= h;
            g[(i, j)] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[5.0, 6.0], [7.0, 8.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
        let tgt = t.leaf(Array2::zeros((2, 2)));
        let loss = t.mean_sq_diff(c, tgt).unwrap();
        let grads = t.backward(loss, &[a, b]).unwrap();
        // d/dA mean((AB)^2) = (2/4) (AB) B^T.
        let expect_a = t.value(c).dot(&array![[5.0, 6.0], [7.0, 8.0]].t()) * 0.5;
        assert_relative_eq!(grads[0][(0, 0)], expect_a[(0, 0)], epsilon = 1e-12);
        assert_relative_eq!(grads[0][(1, 1)], expect_a[(1, 1)], epsilon = 1e-12);
        // Shape mismatch is an error.
        let bad = t.leaf(Array2::zeros((3, 3)));
        assert!(t.matmul(a, bad).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = mean((x + x)^2): gradient must count both uses of x.
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0]]);
        let y = t.add(x, x).unwrap();
        let tgt = t.leaf(Array2::zeros((1, 2)));
        let loss = t.mean_sq_diff(y, tgt).unwrap();
        let g = t.backward(loss, &[x]).unwrap();
        // d/dx mean((2x)^2) = 4x.
        assert_relative_eq!(g[0][(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(g[0][(0, 1)], -8.0, epsilon = 1e-12);
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let x0 = randm(6, 5, &mut rng);
        let w0 = randm(5, 8, &mut rng);
        let b0 = randm(1, 8, &mut rng);
        let w1 = randm(8, 4, &mut rng);
        let tgt0 = randm(6, 4, &mut rng);

        let run = |x: &Array2<f64>,
                   w_a: &Array2<f64>,
                   b_a: &Array2<f64>,
                   w_b: &Array2<f64>|
         -> (f64, Vec<Array2<f64>>) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wa = t.leaf(w_a.clone());
            let ba = t.leaf(b_a.clone());
            let wb = t.leaf(w_b.clone());
            let h = t.matmul(xv, wa).unwrap();
            let h = t.add_row(h, ba).unwrap();
            let h = t.layer_norm(h, 1e-5);
            let h = t.relu(h);
            let o = t.matmul(h, wb).unwrap();
            let o = t.scale(o, 1.7);
            let tv = t.leaf(tgt0.clone());
            let loss = t.mean_sq_diff(o, tv).unwrap();
            let grads = t.backward(loss, &[xv, wa, ba, wb]).unwrap();
            (t.value(loss)[(0, 0)], grads)
        };

        let (_, grads) = run(&x0, &w0, &b0, &w1);
        let h = 1e-6;
        let fd_x = fd_grad(&x0, |x| run(x, &w0, &b0, &w1).0, h);
        let fd_w0 = fd_grad(&w0, |w| run(&x0, w, &b0, &w1).0, h);
        let fd_b0 = fd_grad(&b0, |b| run(&x0, &w0, b, &w1).0, h);
        let fd_w1 = fd_grad(&w1, |w| run(&x0, &w0, &b0, w).0, h);
        assert!(max_rel_err(&grads[0], &fd_x) < 1e-5);
        assert!(max_rel_err(&grads[1], &fd_w0) < 1e-5);
        assert!(max_rel_err(&grads[2], &fd_b0) < 1e-5);
        assert!(max_rel_err(&grads[3], &fd_w1) < 1e-5);
    }

    #[test]
    fn attend_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let q0 = randm(6, 3, &mut rng);
        let k0 = randm(6, 3, &mut rng);
        let v0 = randm(6, 3, &mut rng);
        let tgt = randm(6, 3, &mut rng);
        let scale = 1.0 / (3.0f64).sqrt();

        let run = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| -> (f64, Vec<Array2<f64>>) {
            let mut t = Tape::new();
            let qv = t.leaf(q.clone());
            let kv = t.leaf(k.clone());
            let vv = t.leaf(v.clone());
            // Two blocks of 3 rows exercise the block-diagonal path.
            let o = t.attend(qv, kv, vv, 3, scale).unwrap();
            let tv = t.leaf(tgt.clone());
            let loss = t.mean_sq_diff(o, tv).unwrap();
            let g = t.backward(loss, &[qv, kv, vv]).unwrap();
            (t.value(loss)[(0, 0)], g)
        };

        let (_, grads) = run(&q0, &k0, &v0);
        let h = 1e-6;
        let fd_q = fd_grad(&q0, |q| run(q, &k0, &v0).0, h);
        let fd_k = fd_grad(&k0, |k| run(&q0, k, &v0).0, h);
        let fd_v = fd_grad(&v0, |v| run(&q0, &k0, v).0, h);
        assert!(max_rel_err(&grads[0], &fd_q) < 1e-5, "dq off: {}", max_rel_err(&grads[0], &fd_q));
        assert!(max_rel_err(&grads[1], &fd_k) < 1e-5);
        assert!(max_rel_err(&grads[2], &fd_v) < 1e-5);
    }

    #[test]
    fn attend_is_exactly_permutation_equivariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let q = randm(8, 4, &mut rng);
        let k = randm(8, 4, &mut rng);
        let v = randm(8, 4, &mut rng);
        let out = attend_values(&q, &k, &v, 8, 0.5);
        // Apply a permutation of the 8 token rows.
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let permute = |m: &Array2<f64>| {
            let mut p = Array2::zeros(m.raw_dim());
            for (dst, &src) in perm.iter().enumerate() {
                p.row_mut(dst).assign(&m.row(src));
            }
            p
        };
        let out_p = attend_values(&permute(&q), &permute(&k), &permute(&v), 8, 0.5);
        let expect = permute(&out);
        // Bitwise equality, not approximate: the sorted reductions make
        // the fp sums identical.
        assert_eq!(out_p, expect);
    }

    #[test]
    fn attend_blocks_do_not_mix() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let q = randm(4, 3, &mut rng);
        let k = randm(4, 3, &mut rng);
        let v = randm(4, 3, &mut rng);
        // Two blocks of two rows, computed jointly ...
        let joint = attend_values(&q, &k, &v, 2, 1.0);
        // ... must equal each block computed alone.
        let top = attend_values(
            &q.slice(s![0..2, ..]).to_owned(),
            &k.slice(s![0..2, ..]).to_owned(),
            &v.slice(s![0..2, ..]).to_owned(),
            2,
            1.0,
        );
        assert_eq!(joint.slice(s![0..2, ..]).to_owned(), top);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]];
        let y = layer_norm_values(&x, 1e-5);
        for i in 0..2 {
            let mean: f64 = y.row(i).sum() / 4.0;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        }
        // Constant row maps to zeros (variance floor keeps it finite).
        assert!(y.row(1).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn pruned_branches_get_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let unused = t.leaf(array![[5.0]]);
        let y = t.scale(x, 3.0);
        let tgt = t.leaf(array![[0.0]]);
        let loss = t.mean_sq_diff(y, tgt).unwrap();
        let g = t.backward(loss, &[x, unused]).unwrap();
        assert_relative_eq!(g[0][(0, 0)], 2.0 * 6.0 * 3.0 / 1.0, epsilon = 1e-12);
        assert_eq!(g[1], Array2::<f64>::zeros((1, 1)));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let y = t.scale(x, 2.0);
        assert!(t.backward(y, &[x]).is_err());
    }

    #[test]
    fn sorted_sum_invariant_under_order() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 0.25];
        let mut b = vec![0.25, -1e16, 3.5, 1e16, 1.0];
        assert_eq!(sorted_sum(&mut a), sorted_sum(&mut b));
    }
}
