//! Registration objective: windowed squared NCC, displacement smoothness and
//! foreground soft-Dice, plus their aggregation over a group.
//!
//! Every term has a per-member kernel and a matching vector-Jacobian product;
//! the autodiff tape wraps the same kernels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields;
use crate::kernels::{self, active_axes};
use crate::scalar::Real;
use crate::volume::{DisplacementField, ImageVolume, ProbSeg};

pub const DEFAULT_WINDOW: usize = 9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub gamma_seg: f64,
    pub lncc_window: usize,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            gamma_seg: 0.5,
            lncc_window: DEFAULT_WINDOW,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lncc_window < 3 || self.lncc_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "lncc window must be odd and >= 3, got {}",
                self.lncc_window
            )));
        }
        if !(self.lambda_reg >= 0.0 && self.gamma_seg >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

// ---- local NCC ----------------------------------------------------------------

struct WindowStats<T> {
    sa: Vec<T>,
    sb: Vec<T>,
    saa: Vec<T>,
    sbb: Vec<T>,
    sab: Vec<T>,
    counts: Vec<usize>,
}

fn window_stats<T: Real>(a: &[T], b: &[T], shape: [usize; 3], dims: usize, window: usize) -> WindowStats<T> {
    let aa: Vec<T> = a.iter().map(|&x| x * x).collect();
    let bb: Vec<T> = b.iter().map(|&x| x * x).collect();
    let ab: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    WindowStats {
        sa: kernels::box_sum(a, shape, dims, window),
        sb: kernels::box_sum(b, shape, dims, window),
        saa: kernels::box_sum(&aa, shape, dims, window),
        sbb: kernels::box_sum(&bb, shape, dims, window),
        sab: kernels::box_sum(&ab, shape, dims, window),
        counts: kernels::window_counts(shape, dims, window),
    }
}

/// Per-voxel `(cross, var_a, var_b)` from window sums; variances floored at 0.
#[inline]
fn centered<T: Real>(s: &WindowStats<T>, p: usize) -> (T, T, T) {
    let n = T::from_usize_lossy(s.counts[p]);
    let cross = s.sab[p] - s.sa[p] * s.sb[p] / n;
    let va = (s.saa[p] - s.sa[p] * s.sa[p] / n).max(T::zero());
    let vb = (s.sbb[p] - s.sb[p] * s.sb[p] / n).max(T::zero());
    (cross, va, vb)
}

/// `1 - mean_p NCC²(p)` over clipped windows.
pub(crate) fn lncc_member<T: Real>(a: &[T], b: &[T], shape: [usize; 3], dims: usize, window: usize, eps: T) -> T {
    let s = window_stats(a, b, shape, dims, window);
    let n = a.len();
    let mut total = T::zero();
    for p in 0..n {
        let (c, va, vb) = centered(&s, p);
        total += c * c / (va * vb + eps);
    }
    T::one() - total / T::from_usize_lossy(n)
}

/// Gradient of `g * lncc_member` with respect to both images.
pub(crate) fn lncc_member_backward<T: Real>(
    a: &[T],
    b: &[T],
    shape: [usize; 3],
    dims: usize,
    window: usize,
    eps: T,
    g: T,
) -> (Vec<T>, Vec<T>) {
    let s = window_stats(a, b, shape, dims, window);
    let n = a.len();
    let dl_dcc = -g / T::from_usize_lossy(n);
    let two = T::lit(2.0);
    let mut g_a = vec![T::zero(); n];
    let mut g_b = vec![T::zero(); n];
    let mut g_aa = vec![T::zero(); n];
    let mut g_bb = vec![T::zero(); n];
    let mut g_ab = vec![T::zero(); n];
    for p in 0..n {
        let cnt = T::from_usize_lossy(s.counts[p]);
        let (c, va, vb) = centered(&s, p);
        let den = va * vb + eps;
        let cc = c * c / den;
        let d_c = dl_dcc * two * c / den;
        let raw_va = s.saa[p] - s.sa[p] * s.sa[p] / cnt;
        let raw_vb = s.sbb[p] - s.sb[p] * s.sb[p] / cnt;
        let d_va = if raw_va > T::zero() { -dl_dcc * cc * vb / den } else { T::zero() };
        let d_vb = if raw_vb > T::zero() { -dl_dcc * cc * va / den } else { T::zero() };
        g_ab[p] = d_c;
        g_aa[p] = d_va;
        g_bb[p] = d_vb;
        g_a[p] = -d_c * s.sb[p] / cnt - d_va * two * s.sa[p] / cnt;
        g_b[p] = -d_c * s.sa[p] / cnt - d_vb * two * s.sb[p] / cnt;
    }
    // The clipped box sum is self-adjoint.
    let h_a = kernels::box_sum(&g_a, shape, dims, window);
    let h_b = kernels::box_sum(&g_b, shape, dims, window);
    let h_aa = kernels::box_sum(&g_aa, shape, dims, window);
    let h_bb = kernels::box_sum(&g_bb, shape, dims, window);
    let h_ab = kernels::box_sum(&g_ab, shape, dims, window);
    let da = (0..n)
        .map(|q| h_a[q] + two * a[q] * h_aa[q] + b[q] * h_ab[q])
        .collect();
    let db = (0..n)
        .map(|q| h_b[q] + two * b[q] * h_bb[q] + a[q] * h_ab[q])
        .collect();
    (da, db)
}

fn check_window(grid: &crate::grid::Grid, window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "lncc window must be odd and >= 3, got {window}"
        )));
    }
    if grid.extent().iter().any(|&e| e < window) {
        return Err(Error::InvalidConfig(format!(
            "grid {:?} is smaller than the {window}-voxel window",
            grid.extent()
        )));
    }
    Ok(())
}

/// Local squared-NCC dissimilarity in `[0, 1]` (0 = perfectly correlated everywhere).
pub fn lncc_similarity<T: Real>(a: &ImageVolume<T>, b: &ImageVolume<T>, window: usize) -> Result<T> {
    lncc_similarity_eps(a, b, window, T::lit(DEFAULT_EPSILON))
}

pub fn lncc_similarity_eps<T: Real>(a: &ImageVolume<T>, b: &ImageVolume<T>, window: usize, eps: T) -> Result<T> {
    a.grid().check(b.grid(), "lncc")?;
    check_window(a.grid(), window)?;
    let g = a.grid();
    Ok(lncc_member(a.values(), b.values(), g.internal(), g.dims(), window, eps))
}

// ---- smoothness ---------------------------------------------------------------

/// Mean over axes of the mean squared forward difference (all channels).
pub(crate) fn grad_penalty_member<T: Real>(u: &[T], channels: usize, shape: [usize; 3], dims: usize) -> T {
    let n: usize = shape.iter().product();
    let mut total = T::zero();
    for axis in active_axes(dims) {
        let (len, stride) = axis_len_stride(shape, axis);
        let mut acc = T::zero();
        for c in 0..channels {
            let plane = &u[c * n..(c + 1) * n];
            for p in 0..n {
                if (p / stride) % len + 1 < len {
                    let d = plane[p + stride] - plane[p];
                    acc += d * d;
                }
            }
        }
        let count = channels * n / len * (len - 1);
        total += acc / T::from_usize_lossy(count);
    }
    total / T::from_usize_lossy(dims)
}

pub(crate) fn grad_penalty_member_backward<T: Real>(
    u: &[T],
    channels: usize,
    shape: [usize; 3],
    dims: usize,
    g: T,
) -> Vec<T> {
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); u.len()];
    for axis in active_axes(dims) {
        let (len, stride) = axis_len_stride(shape, axis);
        let count = channels * n / len * (len - 1);
        let k = T::lit(2.0) * g / (T::from_usize_lossy(count) * T::from_usize_lossy(dims));
        for c in 0..channels {
            let o = c * n;
            for p in 0..n {
                if (p / stride) % len + 1 < len {
                    let d = u[o + p + stride] - u[o + p];
                    out[o + p + stride] += k * d;
                    out[o + p] -= k * d;
                }
            }
        }
    }
    out
}

fn axis_len_stride(shape: [usize; 3], axis: usize) -> (usize, usize) {
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    (shape[axis], stride)
}

/// Smoothness penalty on the displacement (zero for any translation).
pub fn grad_penalty<T: Real>(u: &DisplacementField<T>) -> T {
    let g = u.grid();
    grad_penalty_member(u.data(), g.dims(), g.internal(), g.dims())
}

// ---- soft Dice ------------------------------------------------------------------

/// `1 - mean_{k >= 1} (2 Σ p q + ε) / (Σ p² + Σ q² + ε)`.
pub(crate) fn soft_dice_member<T: Real>(p: &[T], q: &[T], classes: usize, voxels: usize, eps: T) -> T {
    let mut acc = T::zero();
    for k in 1..classes {
        let (pk, qk) = (&p[k * voxels..(k + 1) * voxels], &q[k * voxels..(k + 1) * voxels]);
        let (mut i, mut sp, mut sq) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in pk.iter().zip(qk) {
            i += a * b;
            sp += a * a;
            sq += b * b;
        }
        acc += (T::lit(2.0) * i + eps) / (sp + sq + eps);
    }
    T::one() - acc / T::from_usize_lossy(classes - 1)
}

pub(crate) fn soft_dice_member_backward<T: Real>(
    p: &[T],
    q: &[T],
    classes: usize,
    voxels: usize,
    eps: T,
    g: T,
) -> (Vec<T>, Vec<T>) {
    let two = T::lit(2.0);
    let mut gp = vec![T::zero(); p.len()];
    let mut gq = vec![T::zero(); q.len()];
    let scale = -g / T::from_usize_lossy(classes - 1);
    for k in 1..classes {
        let r = k * voxels..(k + 1) * voxels;
        let (pk, qk) = (&p[r.clone()], &q[r.clone()]);
        let (mut i, mut sp, mut sq) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in pk.iter().zip(qk) {
            i += a * b;
            sp += a * a;
            sq += b * b;
        }
        let num = two * i + eps;
        let den = sp + sq + eps;
        let den2 = den * den;
        for v in 0..voxels {
            let (a, b) = (pk[v], qk[v]);
            gp[k * voxels + v] = scale * (two * b * den - num * two * a) / den2;
            gq[k * voxels + v] = scale * (two * a * den - num * two * b) / den2;
        }
    }
    (gp, gq)
}

pub fn soft_dice_loss<T: Real>(p: &ProbSeg<T>, q: &ProbSeg<T>) -> Result<T> {
    soft_dice_loss_eps(p, q, T::lit(DEFAULT_EPSILON))
}

pub fn soft_dice_loss_eps<T: Real>(p: &ProbSeg<T>, q: &ProbSeg<T>, eps: T) -> Result<T> {
    p.grid().check(q.grid(), "soft dice")?;
    if p.classes() != q.classes() {
        return Err(Error::ShapeMismatch(format!(
            "soft dice class count {} vs {}",
            p.classes(),
            q.classes()
        )));
    }
    Ok(soft_dice_member(p.data(), q.data(), p.classes(), p.grid().voxels(), eps))
}

// ---- group aggregation ------------------------------------------------------------

/// Mean per-term values of a group loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub sim: f64,
    pub reg: f64,
    pub seg: f64,
}

impl LossComponents {
    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([("sim", self.sim), ("reg", self.reg), ("seg", self.seg)])
    }
}

/// One group member's image and optional segmentation.
pub struct LossMember<'a, T> {
    pub image: &'a ImageVolume<T>,
    pub seg: Option<&'a ProbSeg<T>>,
}

/// `(1/m) Σ_i [sim(t, x_i∘φ_i) + λ reg(u_i) + γ dice(seg_t, seg_i∘φ_i)]` for a
/// fixed template. Dice terms are included only for members with a
/// segmentation, and only when `seg_t` is present.
pub fn group_loss<T: Real>(
    t: &ImageVolume<T>,
    seg_t: Option<&ProbSeg<T>>,
    group: &[LossMember<'_, T>],
    fields: &[DisplacementField<T>],
    w: &LossWeights,
) -> Result<LossComponents> {
    w.validate()?;
    if group.len() != fields.len() || group.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} members but {} fields",
            group.len(),
            fields.len()
        )));
    }
    check_window(t.grid(), w.lncc_window)?;
    let eps = T::lit(w.epsilon);
    let m = group.len() as f64;
    let (mut sim, mut reg, mut seg) = (0.0, 0.0, 0.0);
    for (member, u) in group.iter().zip(fields) {
        let warped = fields::warp_image(member.image, u)?;
        sim += lncc_similarity_eps(t, &warped, w.lncc_window, eps)?.to_f64_lossy();
        reg += grad_penalty(u).to_f64_lossy();
        if let (Some(st), Some(s)) = (seg_t, member.seg) {
            let ws = fields::warp_seg(s, u)?;
            seg += soft_dice_loss_eps(st, &ws, eps)?.to_f64_lossy();
        }
    }
    let (sim, reg, seg) = (sim / m, reg / m, seg / m);
    Ok(LossComponents {
        total: sim + w.lambda_reg * reg + w.gamma_seg * seg,
        sim,
        reg,
        seg,
    })
}
