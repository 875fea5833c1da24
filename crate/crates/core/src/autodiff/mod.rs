//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Only the operations needed by the registration network and
//! its losses are provided.

mod conv;
mod losses;

use crate::scalar::Real;
use crate::tensor::Tensor;

pub use conv::ConvGeometry;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(grad_out, parent values, output value, which parents need a gradient)`.
type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    /// Running hash of piecewise-branch decisions, when tracked.
    branches: Option<u64>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reduction across the group (leading) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Max,
    /// Biased (divide-by-m) variance.
    Var,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: None,
        }
    }

    /// Starts hashing the branch taken by every piecewise operation
    /// (activation sign, interpolation cell, clamping, argmax).
    pub fn track_branches(&mut self) {
        self.branches = Some(0);
    }

    /// Equal signatures mean two evaluations ran on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    fn note_branches(&mut self, bits: impl IntoIterator<Item = u64>) {
        if let Some(h) = self.branches.as_mut() {
            for b in bits {
                *h = crate::seed::mix(*h, b);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let pgs = bw(&g, &parents, &node.value, &needs);
            debug_assert_eq!(pgs.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(pgs).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
            // Keep gradients of leaves only.
            if !node.parents.is_empty() {
                grads[i] = None;
            } else {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            v,
            &[a, b],
            Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-T::one()))]
            }),
        )
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            &[a, b],
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, &[a], Box::new(move |g, _, _, _| vec![Some(g.scale(s))]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        if self.branches.is_some() {
            let signs: Vec<u64> = self.value(a).data().iter().map(|&x| (x > T::zero()) as u64).collect();
            self.note_branches(signs);
        }
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(
            v,
            &[a],
            Box::new(move |g, p, _, _| {
                vec![Some(p[0].zip_map(g, |x, g| if x > T::zero() { g } else { g * slope }))]
            }),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            &[a],
            Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    /// Weighted sum of scalars `Σ w_i a_i`.
    pub fn linear_combination(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1);
            total += w * self.value(v).data()[0];
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total),
            &vars,
            Box::new(move |g, p, _, _| {
                weights
                    .iter()
                    .zip(p)
                    .map(|(&w, pv)| Some(Tensor::full(pv.shape(), g.data()[0] * w)))
                    .collect()
            }),
        )
    }

    // ---- group / channel structure -----------------------------------------

    /// `x + s` with `s` of leading extent 1 broadcast over the group axis.
    pub fn add_broadcast(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(sv.dim(0), 1);
        assert_eq!(&xv.shape()[1..], &sv.shape()[1..], "add_broadcast shape mismatch");
        let mut out = xv.clone();
        for i in 0..xv.dim(0) {
            for (o, &b) in out.row_mut(i).iter_mut().zip(sv.data()) {
                *o += b;
            }
        }
        self.push(
            out,
            &[x, s],
            Box::new(|g, p, _, needs| {
                let gs = needs[1].then(|| {
                    let mut acc = Tensor::zeros(p[1].shape());
                    for i in 0..g.dim(0) {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    acc
                });
                vec![needs[0].then(|| g.clone()), gs]
            }),
        )
    }

    /// Reduces over the group axis to shape `[1, ...]`.
    pub fn group_reduce(&mut self, x: Var, stat: Statistic) -> Var {
        let xv = self.value(x);
        let m = xv.dim(0);
        let r = xv.row_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        // Accumulated in f64 so the result does not depend on member order.
        let mut acc = vec![0.0f64; r];
        for i in 0..m {
            for (a, &b) in acc.iter_mut().zip(xv.row(i)) {
                *a += b.to_f64_lossy();
            }
        }
        for a in acc.iter_mut() {
            *a /= m as f64;
        }
        let mean: Vec<T> = acc.iter().map(|&a| T::lit(a)).collect();
        match stat {
            Statistic::Mean => self.push(
                Tensor::from_vec(&shape, mean),
                &[x],
                Box::new(move |g, p, _, _| {
                    let m = p[0].dim(0);
                    let gi = g.scale(T::one() / T::from_usize_lossy(m));
                    let mut out = Tensor::zeros(p[0].shape());
                    for i in 0..m {
                        out.row_mut(i).copy_from_slice(gi.data());
                    }
                    vec![Some(out)]
                }),
            ),
            Statistic::Max => {
                let mut best = xv.row(0).to_vec();
                let mut arg = vec![0u64; r];
                for i in 1..m {
                    for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(xv.row(i)) {
                        if v > *b {
                            *b = v;
                            *a = i as u64;
                        }
                    }
                }
                self.note_branches(arg);
                self.push(
                    Tensor::from_vec(&shape, best),
                    &[x],
                    Box::new(|g, p, out, _| {
                        let m = p[0].dim(0);
                        let mut gx = Tensor::zeros(p[0].shape());
                        let r = p[0].row_len();
                        for j in 0..r {
                            // first member attaining the max receives the gradient
                            let target = out.data()[j];
                            let i = (0..m).find(|&i| p[0].row(i)[j] == target).unwrap_or(0);
                            gx.row_mut(i)[j] = g.data()[j];
                        }
                        vec![Some(gx)]
                    }),
                )
            }
            Statistic::Var => {
                let mut var = vec![0.0f64; r];
                for i in 0..m {
                    for ((a, &v), &mu) in var.iter_mut().zip(xv.row(i)).zip(&acc) {
                        let d = v.to_f64_lossy() - mu;
                        *a += d * d;
                    }
                }
                let var: Vec<T> = var.iter().map(|&a| T::lit(a / m as f64)).collect();
                self.push(
                    Tensor::from_vec(&shape, var),
                    &[x],
                    Box::new(move |g, p, _, _| {
                        let m = p[0].dim(0);
                        let two_over_m = T::lit(2.0) / T::from_usize_lossy(m);
                        let mut gx = Tensor::zeros(p[0].shape());
                        for i in 0..m {
                            let row = gx.row_mut(i);
                            for j in 0..row.len() {
                                row[j] = g.data()[j] * two_over_m * (p[0].row(i)[j] - mean[j]);
                            }
                        }
                        vec![Some(gx)]
                    }),
                )
            }
        }
    }

    /// `x_i - mean_j x_j` over the group axis.
    pub fn subtract_group_mean(&mut self, x: Var) -> Var {
        let mean = self.group_reduce(x, Statistic::Mean);
        let neg = self.scale(mean, -T::one());
        self.add_broadcast(x, neg)
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(0), bv.dim(0));
        assert_eq!(&av.shape()[2..], &bv.shape()[2..], "concat spatial mismatch");
        let (ra, rb) = (av.row_len(), bv.row_len());
        let mut shape = av.shape().to_vec();
        shape[1] += bv.dim(1);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.dim(0) {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(
            Tensor::from_vec(&shape, data),
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let n = g.dim(0);
                let ga = needs[0].then(|| {
                    let mut d = Vec::with_capacity(n * ra);
                    for i in 0..n {
                        d.extend_from_slice(&g.row(i)[..ra]);
                    }
                    Tensor::from_vec(p[0].shape(), d)
                });
                let gb = needs[1].then(|| {
                    let mut d = Vec::with_capacity(n * rb);
                    for i in 0..n {
                        d.extend_from_slice(&g.row(i)[ra..]);
                    }
                    Tensor::from_vec(p[1].shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Channels `start..start+len` along axis 1.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.dim(1);
        assert!(start + len <= c);
        let inner: usize = xv.shape()[2..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[1] = len;
        let mut data = Vec::with_capacity(xv.dim(0) * len * inner);
        for i in 0..xv.dim(0) {
            data.extend_from_slice(&xv.row(i)[start * inner..(start + len) * inner]);
        }
        self.push(
            Tensor::from_vec(&shape, data),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let rl = len * inner;
                for i in 0..g.dim(0) {
                    gx.row_mut(i)[start * inner..start * inner + rl].copy_from_slice(g.row(i));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Rows `idx` of the group axis.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * xv.row_len());
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            Tensor::from_vec(&shape, data),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[N, C, D, H, W]` by per-axis factors.
    pub fn upsample_nearest(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xv.data()[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((z / factor[0]) * h + y / factor[1]) * w;
                    let drow = (z * oh + y) * ow;
                    for x in 0..ow {
                        dst[drow + x] = src[srow + x / factor[2]];
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, od, oh, ow], out),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let gd = gx.data_mut();
                for nc in 0..n * c {
                    let src = &g.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                    let dst = &mut gd[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..od {
                        for y in 0..oh {
                            let drow = ((z / factor[0]) * h + y / factor[1]) * w;
                            let srow = (z * oh + y) * ow;
                            for x in 0..ow {
                                dst[drow + x / factor[2]] += src[srow + x];
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---- spatial transforms ------------------------------------------------

    /// Member-wise pullback `out_i = src_i ∘ (id + disp_i)`, clamp-to-edge.
    /// `disp` is `[N, dims, D, H, W]`.
    pub fn sample(&mut self, src: Var, disp: Var, dims: usize) -> Var {
        if self.branches.is_some() {
            let dv = self.value(disp);
            let shape = spatial(dv);
            let cells: Vec<u64> = (0..dv.dim(0))
                .flat_map(|i| crate::kernels::sample_cells(dv.row(i), shape, dims))
                .collect();
            self.note_branches(cells);
        }
        let (sv, dv) = (self.value(src), self.value(disp));
        assert_eq!(sv.dim(0), dv.dim(0), "sample group mismatch");
        assert_eq!(dv.dim(1), dims);
        let shape = spatial(sv);
        assert_eq!(shape, spatial(dv), "sample grid mismatch");
        let c = sv.dim(1);
        let mut out = Vec::with_capacity(sv.len());
        for i in 0..sv.dim(0) {
            out.extend(crate::kernels::sample(sv.row(i), c, dv.row(i), shape, dims));
        }
        let value = Tensor::from_vec(sv.shape(), out);
        self.push(
            value,
            &[src, disp],
            Box::new(move |g, p, _, needs| {
                let n = g.dim(0);
                let mut gs = needs[0].then(|| Vec::with_capacity(p[0].len()));
                let mut gd = needs[1].then(|| Vec::with_capacity(p[1].len()));
                for i in 0..n {
                    let (a, b) = crate::kernels::sample_backward(
                        p[0].row(i),
                        c,
                        p[1].row(i),
                        shape,
                        dims,
                        g.row(i),
                        needs[0],
                        needs[1],
                    );
                    if let (Some(acc), Some(a)) = (gs.as_mut(), a) {
                        acc.extend(a);
                    }
                    if let (Some(acc), Some(b)) = (gd.as_mut(), b) {
                        acc.extend(b);
                    }
                }
                vec![
                    gs.map(|d| Tensor::from_vec(p[0].shape(), d)),
                    gd.map(|d| Tensor::from_vec(p[1].shape(), d)),
                ]
            }),
        )
    }

    /// Scaling and squaring of velocities `[N, dims, ...]` into displacements.
    pub fn integrate(&mut self, v: Var, dims: usize, steps: usize) -> Var {
        let mut u = self.scale(v, T::lit(0.5f64.powi(steps as i32)));
        for _ in 0..steps {
            let moved = self.sample(u, u, dims);
            u = self.add(u, moved);
        }
        u
    }

    /// Divides every voxel's channels by their sum (floored at a tiny constant).
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let vox = xv.row_len() / c;
        let floor = T::lit(crate::fields::MIN_PROB_SUM);
        let mut out = xv.clone();
        for i in 0..n {
            let row = out.row_mut(i);
            for p in 0..vox {
                let mut s = T::zero();
                for k in 0..c {
                    s += row[k * vox + p];
                }
                let s = s.max(floor);
                for k in 0..c {
                    row[k * vox + p] /= s;
                }
            }
        }
        self.push(
            out,
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for i in 0..n {
                    let xr = p[0].row(i);
                    let gr = g.row(i);
                    let out = gx.row_mut(i);
                    for q in 0..vox {
                        let mut s = T::zero();
                        for k in 0..c {
                            s += xr[k * vox + q];
                        }
                        if s < floor {
                            // floored: y = x / floor
                            for k in 0..c {
                                out[k * vox + q] = gr[k * vox + q] / floor;
                            }
                            continue;
                        }
                        let mut dot = T::zero();
                        for k in 0..c {
                            dot += gr[k * vox + q] * xr[k * vox + q];
                        }
                        let s2 = s * s;
                        for k in 0..c {
                            out[k * vox + q] = gr[k * vox + q] / s - dot / s2;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// `[D, H, W]` of a 5-d tensor.
pub(crate) fn spatial<T: Real>(t: &Tensor<T>) -> [usize; 3] {
    let s = t.shape();
    assert_eq!(s.len(), 5, "expected [N, C, D, H, W], got {s:?}");
    [s[2], s[3], s[4]]
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite differences of `f` at `x` along every coordinate.
    pub fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < tol, "index {i}: {x} vs {y}");
        }
    }
}
