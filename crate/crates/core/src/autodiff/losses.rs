//! Tape wrappers around the per-member loss kernels.

use super::{spatial, Graph, Var};
use crate::losses::{
    grad_penalty_member, grad_penalty_member_backward, lncc_member, lncc_member_backward,
    soft_dice_member, soft_dice_member_backward,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Row of `b` paired with member `i` (`b` may broadcast a single row).
fn paired<T: Real>(b: &Tensor<T>, i: usize) -> &[T] {
    if b.dim(0) == 1 {
        b.row(0)
    } else {
        b.row(i)
    }
}

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) {
    assert!(b.dim(0) == 1 || b.dim(0) == a.dim(0), "pairing mismatch");
    assert_eq!(&a.shape()[1..], &b.shape()[1..], "pairing shape mismatch");
}

/// Accumulates per-member gradients for a possibly broadcast second operand.
fn reduce_pair<T: Real>(shape: &[usize], rows: Vec<Vec<T>>) -> Tensor<T> {
    if shape[0] == 1 && rows.len() > 1 {
        let mut acc = vec![T::zero(); rows[0].len()];
        for r in rows {
            for (a, b) in acc.iter_mut().zip(r) {
                *a += b;
            }
        }
        Tensor::from_vec(shape, acc)
    } else {
        Tensor::from_vec(shape, rows.concat())
    }
}

impl<T: Real> Graph<T> {
    /// Per-member local squared-NCC loss between single-channel `a: [N,1,...]`
    /// and `b: [1 or N,1,...]`. Output `[N]`.
    pub fn lncc(&mut self, a: Var, b: Var, dims: usize, window: usize, eps: T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        check_pair(av, bv);
        assert_eq!(av.dim(1), 1);
        let shape = spatial(av);
        let n = av.dim(0);
        let vals: Vec<T> = (0..n)
            .map(|i| lncc_member(av.row(i), paired(bv, i), shape, dims, window, eps))
            .collect();
        self.push(
            Tensor::from_vec(&[n], vals),
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let mut ga = Vec::with_capacity(n);
                let mut gb = Vec::with_capacity(n);
                for i in 0..n {
                    let (da, db) = lncc_member_backward(
                        p[0].row(i),
                        paired(p[1], i),
                        shape,
                        dims,
                        window,
                        eps,
                        g.data()[i],
                    );
                    ga.push(da);
                    gb.push(db);
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(p[0].shape(), ga.concat())),
                    needs[1].then(|| reduce_pair(p[1].shape(), gb)),
                ]
            }),
        )
    }

    /// Per-member smoothness penalty of displacements `[N, dims, ...]`. Output `[N]`.
    pub fn grad_penalty(&mut self, u: Var, dims: usize) -> Var {
        let uv = self.value(u);
        let shape = spatial(uv);
        let (n, c) = (uv.dim(0), uv.dim(1));
        let vals: Vec<T> = (0..n)
            .map(|i| grad_penalty_member(uv.row(i), c, shape, dims))
            .collect();
        self.push(
            Tensor::from_vec(&[n], vals),
            &[u],
            Box::new(move |g, p, _, _| {
                let rows: Vec<Vec<T>> = (0..n)
                    .map(|i| grad_penalty_member_backward(p[0].row(i), c, shape, dims, g.data()[i]))
                    .collect();
                vec![Some(Tensor::from_vec(p[0].shape(), rows.concat()))]
            }),
        )
    }

    /// Per-member foreground soft-Dice loss between `p: [N,K,...]` and
    /// `q: [1 or N,K,...]`. Output `[N]`.
    pub fn soft_dice(&mut self, p: Var, q: Var, eps: T) -> Var {
        let (pv, qv) = (self.value(p), self.value(q));
        check_pair(pv, qv);
        let (n, k) = (pv.dim(0), pv.dim(1));
        let vox = pv.row_len() / k;
        let vals: Vec<T> = (0..n)
            .map(|i| soft_dice_member(pv.row(i), paired(qv, i), k, vox, eps))
            .collect();
        self.push(
            Tensor::from_vec(&[n], vals),
            &[p, q],
            Box::new(move |g, pr, _, needs| {
                let mut gp = Vec::with_capacity(n);
                let mut gq = Vec::with_capacity(n);
                for i in 0..n {
                    let (a, b) =
                        soft_dice_member_backward(pr[0].row(i), paired(pr[1], i), k, vox, eps, g.data()[i]);
                    gp.push(a);
                    gq.push(b);
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(pr[0].shape(), gp.concat())),
                    needs[1].then(|| reduce_pair(pr[1].shape(), gq)),
                ]
            }),
        )
    }
}
