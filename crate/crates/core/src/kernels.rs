//! Raw numeric kernels on channel-major buffers with internal shape
//! `[depth, height, width]`. Both the eager field operations and the autodiff
//! tape call into these, so forward values agree bit-for-bit between the two.

use crate::scalar::Real;

/// Internal axes touched by a `dims`-dimensional field.
#[inline]
pub(crate) fn active_axes(dims: usize) -> std::ops::Range<usize> {
    (3 - dims)..3
}

#[inline]
fn axis_stride(shape: [usize; 3], axis: usize) -> usize {
    match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    }
}

/// Linear-interpolation coordinate with clamp-to-edge.
/// Returns `(i0, i1, frac, inside)`; `inside` is false when the raw coordinate
/// was clamped, so its derivative vanishes.
#[inline]
fn lerp_coord<T: Real>(q: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_usize_lossy(n - 1);
    let inside = q >= T::zero() && q <= hi;
    let qc = q.max(T::zero()).min(hi);
    let f0 = qc.floor();
    let i0 = f0.to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, qc - f0, inside)
}

/// Pullback `out_c(p) = src_c(p + disp(p))` for one member.
///
/// `src` holds `channels` planes, `disp` holds `dims` planes; displacement
/// channel `k` moves along logical axis `k`.
pub(crate) fn sample<T: Real>(
    src: &[T],
    channels: usize,
    disp: &[T],
    shape: [usize; 3],
    dims: usize,
) -> Vec<T> {
    let n = shape.iter().product::<usize>();
    let mut out = vec![T::zero(); channels * n];
    for_each_sample(disp, shape, dims, |p, corners| {
        for c in 0..channels {
            let plane = &src[c * n..(c + 1) * n];
            let mut acc = T::zero();
            for &(idx, w) in corners.iter() {
                acc += w * plane[idx];
            }
            out[c * n + p] = acc;
        }
    });
    out
}

/// Interpolation cell and clamp state of every sample coordinate, packed
/// per voxel and axis; two displacements with equal codes interpolate on the
/// same linear pieces.
pub(crate) fn sample_cells<T: Real>(disp: &[T], shape: [usize; 3], dims: usize) -> Vec<u64> {
    let n = shape.iter().product::<usize>();
    let mut out = Vec::with_capacity(n * dims);
    let off = 3 - dims;
    for p in 0..n {
        let pos = [p / (shape[1] * shape[2]), (p / shape[2]) % shape[1], p % shape[2]];
        for k in 0..dims {
            let axis = off + k;
            let q = T::from_usize_lossy(pos[axis]) + disp[k * n + p];
            let (i0, _, _, inside) = lerp_coord(q, shape[axis]);
            out.push(((i0 as u64) << 1) | inside as u64);
        }
    }
    out
}

/// Interpolation stencil for one output voxel: up to 8 `(flat index, weight)` pairs.
type Corners<T> = arrayvec_like::Stencil<T>;

mod arrayvec_like {
    /// Fixed-capacity stencil without heap allocation.
    #[derive(Clone, Copy)]
    pub(crate) struct Stencil<T> {
        items: [(usize, T); 8],
        len: usize,
    }

    impl<T: Copy + Default> Stencil<T> {
        pub(crate) fn new() -> Self {
            Self {
                items: [(0, T::default()); 8],
                len: 0,
            }
        }
        #[inline]
        pub(crate) fn push(&mut self, idx: usize, w: T) {
            self.items[self.len] = (idx, w);
            self.len += 1;
        }
        #[inline]
        pub(crate) fn iter(&self) -> std::slice::Iter<'_, (usize, T)> {
            self.items[..self.len].iter()
        }
    }
}

/// Visits every voxel with its bilinear (2-D) or trilinear (3-D) stencil.
/// Corner order is fixed so results are reproducible.
fn for_each_sample<T: Real>(
    disp: &[T],
    shape: [usize; 3],
    dims: usize,
    mut visit: impl FnMut(usize, &Corners<T>),
) {
    let [nd, nh, nw] = shape;
    let n = nd * nh * nw;
    let one = T::one();
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                let p = (z * nh + y) * nw + x;
                let mut st = Corners::<T>::new();
                if dims == 2 {
                    let qy = T::from_usize_lossy(y) + disp[p];
                    let qx = T::from_usize_lossy(x) + disp[n + p];
                    let (y0, y1, fy, _) = lerp_coord(qy, nh);
                    let (x0, x1, fx, _) = lerp_coord(qx, nw);
                    let base = z * nh * nw;
                    st.push(base + y0 * nw + x0, (one - fy) * (one - fx));
                    st.push(base + y0 * nw + x1, (one - fy) * fx);
                    st.push(base + y1 * nw + x0, fy * (one - fx));
                    st.push(base + y1 * nw + x1, fy * fx);
                } else {
                    let qz = T::from_usize_lossy(z) + disp[p];
                    let qy = T::from_usize_lossy(y) + disp[n + p];
                    let qx = T::from_usize_lossy(x) + disp[2 * n + p];
                    let (z0, z1, fz, _) = lerp_coord(qz, nd);
                    let (y0, y1, fy, _) = lerp_coord(qy, nh);
                    let (x0, x1, fx, _) = lerp_coord(qx, nw);
                    for (zi, wz) in [(z0, one - fz), (z1, fz)] {
                        for (yi, wy) in [(y0, one - fy), (y1, fy)] {
                            for (xi, wx) in [(x0, one - fx), (x1, fx)] {
                                st.push((zi * nh + yi) * nw + xi, wz * wy * wx);
                            }
                        }
                    }
                }
                visit(p, &st);
            }
        }
    }
}

/// Vector-Jacobian product of [`sample`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward<T: Real>(
    src: &[T],
    channels: usize,
    disp: &[T],
    shape: [usize; 3],
    dims: usize,
    grad_out: &[T],
    need_src: bool,
    need_disp: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [nd, nh, nw] = shape;
    let n = nd * nh * nw;
    let mut g_src = need_src.then(|| vec![T::zero(); channels * n]);
    let mut g_disp = need_disp.then(|| vec![T::zero(); dims * n]);
    let one = T::one();
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                let p = (z * nh + y) * nw + x;
                if dims == 2 {
                    let qy = T::from_usize_lossy(y) + disp[p];
                    let qx = T::from_usize_lossy(x) + disp[n + p];
                    let (y0, y1, fy, in_y) = lerp_coord(qy, nh);
                    let (x0, x1, fx, in_x) = lerp_coord(qx, nw);
                    let base = z * nh * nw;
                    let i00 = base + y0 * nw + x0;
                    let i01 = base + y0 * nw + x1;
                    let i10 = base + y1 * nw + x0;
                    let i11 = base + y1 * nw + x1;
                    let mut dqy = T::zero();
                    let mut dqx = T::zero();
                    for c in 0..channels {
                        let g = grad_out[c * n + p];
                        if g == T::zero() {
                            continue;
                        }
                        let o = c * n;
                        if let Some(gs) = g_src.as_mut() {
                            gs[o + i00] += g * (one - fy) * (one - fx);
                            gs[o + i01] += g * (one - fy) * fx;
                            gs[o + i10] += g * fy * (one - fx);
                            gs[o + i11] += g * fy * fx;
                        }
                        if need_disp {
                            let (s00, s01, s10, s11) =
                                (src[o + i00], src[o + i01], src[o + i10], src[o + i11]);
                            if in_y {
                                dqy += g * ((one - fx) * (s10 - s00) + fx * (s11 - s01));
                            }
                            if in_x {
                                dqx += g * ((one - fy) * (s01 - s00) + fy * (s11 - s10));
                            }
                        }
                    }
                    if let Some(gd) = g_disp.as_mut() {
                        gd[p] += dqy;
                        gd[n + p] += dqx;
                    }
                } else {
                    let qz = T::from_usize_lossy(z) + disp[p];
                    let qy = T::from_usize_lossy(y) + disp[n + p];
                    let qx = T::from_usize_lossy(x) + disp[2 * n + p];
                    let (z0, z1, fz, in_z) = lerp_coord(qz, nd);
                    let (y0, y1, fy, in_y) = lerp_coord(qy, nh);
                    let (x0, x1, fx, in_x) = lerp_coord(qx, nw);
                    let zs = [(z0, one - fz, -one), (z1, fz, one)];
                    let ys = [(y0, one - fy, -one), (y1, fy, one)];
                    let xs = [(x0, one - fx, -one), (x1, fx, one)];
                    let mut dq = [T::zero(); 3];
                    for c in 0..channels {
                        let g = grad_out[c * n + p];
                        if g == T::zero() {
                            continue;
                        }
                        let o = c * n;
                        for &(zi, wz, sz) in &zs {
                            for &(yi, wy, sy) in &ys {
                                for &(xi, wx, sx) in &xs {
                                    let idx = (zi * nh + yi) * nw + xi;
                                    if let Some(gs) = g_src.as_mut() {
                                        gs[o + idx] += g * wz * wy * wx;
                                    }
                                    if need_disp {
                                        let s = g * src[o + idx];
                                        dq[0] += s * sz * wy * wx;
                                        dq[1] += s * wz * sy * wx;
                                        dq[2] += s * wz * wy * sx;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gd) = g_disp.as_mut() {
                        if in_z {
                            gd[p] += dq[0];
                        }
                        if in_y {
                            gd[n + p] += dq[1];
                        }
                        if in_x {
                            gd[2 * n + p] += dq[2];
                        }
                    }
                }
            }
        }
    }
    (g_src, g_disp)
}

/// Sum over a centered window of side `window` along every active axis,
/// clipped to the grid. Also usable as its own adjoint.
pub(crate) fn box_sum<T: Real>(x: &[T], shape: [usize; 3], dims: usize, window: usize) -> Vec<T> {
    let r = window / 2;
    let mut cur = x.to_vec();
    let mut tmp = vec![T::zero(); cur.len()];
    for axis in active_axes(dims) {
        let len = shape[axis];
        let stride = axis_stride(shape, axis);
        let outer = cur.len() / (len * stride);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                // Running window sum.
                let mut acc = T::zero();
                for i in 0..len.min(r + 1) {
                    acc += cur[base + i * stride];
                }
                for i in 0..len {
                    tmp[base + i * stride] = acc;
                    let add = i + r + 1;
                    if add < len {
                        acc += cur[base + add * stride];
                    }
                    if i >= r {
                        acc -= cur[base + (i - r) * stride];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut tmp);
    }
    cur
}

/// Number of in-grid voxels in each clipped window.
pub(crate) fn window_counts(shape: [usize; 3], dims: usize, window: usize) -> Vec<usize> {
    let r = window / 2;
    let count = |i: usize, len: usize| (i + r).min(len - 1) + 1 - i.saturating_sub(r);
    let [nd, nh, nw] = shape;
    let axes: Vec<usize> = active_axes(dims).collect();
    let mut out = Vec::with_capacity(nd * nh * nw);
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                let mut c = 1;
                for &a in &axes {
                    let (i, len) = match a {
                        0 => (z, nd),
                        1 => (y, nh),
                        _ => (x, nw),
                    };
                    c *= count(i, len);
                }
                out.push(c);
            }
        }
    }
    out
}

/// Truncated Gaussian smoothing (radius `ceil(3 sigma)`), weights renormalized
/// inside the grid. `sigma <= 0` is the identity.
pub(crate) fn gaussian_smooth<T: Real>(x: &[T], shape: [usize; 3], dims: usize, sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<T> = (-radius..=radius)
        .map(|k| T::lit((-(k * k) as f64 / (2.0 * sigma * sigma)).exp()))
        .collect();
    let mut cur = x.to_vec();
    let mut tmp = vec![T::zero(); cur.len()];
    for axis in active_axes(dims) {
        let len = shape[axis] as isize;
        let stride = axis_stride(shape, axis);
        let outer = cur.len() / (len as usize * stride);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len as usize * stride + s;
                for i in 0..len {
                    let mut acc = T::zero();
                    let mut wsum = T::zero();
                    for k in -radius..=radius {
                        let j = i + k;
                        if j < 0 || j >= len {
                            continue;
                        }
                        let w = weights[(k + radius) as usize];
                        acc += w * cur[base + j as usize * stride];
                        wsum += w;
                    }
                    tmp[base + i as usize * stride] = acc / wsum;
                }
            }
        }
        std::mem::swap(&mut cur, &mut tmp);
    }
    cur
}

/// Derivative of `plane` along internal `axis` at flat index `p`:
/// central differences inside, one-sided at the two ends.
#[inline]
pub(crate) fn finite_diff<T: Real>(plane: &[T], shape: [usize; 3], axis: usize, p: usize) -> T {
    let len = shape[axis];
    let stride = axis_stride(shape, axis);
    let i = (p / stride) % len;
    if i == 0 {
        plane[p + stride] - plane[p]
    } else if i == len - 1 {
        plane[p] - plane[p - stride]
    } else {
        (plane[p + stride] - plane[p - stride]) / T::lit(2.0)
    }
}
