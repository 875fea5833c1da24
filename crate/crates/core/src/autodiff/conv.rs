//! Zero-padded "same" convolution via im2col + GEMM.

use super::{spatial, Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Static shape information for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_shape: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeometry {
    pub fn pad(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }

    pub fn out_shape(&self) -> [usize; 3] {
        let p = self.pad();
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.in_shape[a] + 2 * p[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Unfolds one member `[cin, D, H, W]` into `[cin * kvol, P_out]`.
fn im2col<T: Real>(x: &[T], cin: usize, geo: &ConvGeometry) -> Vec<T> {
    let [id, ih, iw] = geo.in_shape;
    let [od, oh, ow] = geo.out_shape();
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad();
    let pout = od * oh * ow;
    let mut col = vec![T::zero(); cin * geo.kvol() * pout];
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * pout..(row + 1) * pout];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let src_row = (iz as usize * ih + iy as usize) * iw;
                            let dst_row = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dst[dst_row + ox] = plane[src_row + ix as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates `[cin * kvol, P_out]` into `[cin, D, H, W]`.
fn col2im<T: Real>(col: &[T], cin: usize, geo: &ConvGeometry, dx: &mut [T]) {
    let [id, ih, iw] = geo.in_shape;
    let [od, oh, ow] = geo.out_shape();
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad();
    let pout = od * oh * ow;
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * pout..(row + 1) * pout];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst_row = (iz as usize * ih + iy as usize) * iw;
                            let src_row = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    plane[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_pointwise(geo: &ConvGeometry) -> bool {
    geo.kernel == [1, 1, 1] && geo.stride == [1, 1, 1]
}

impl<T: Real> Graph<T> {
    /// Convolution of `x: [N, Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`,
    /// padding `k / 2`, optional bias `[Cout]`.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 3]) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin) = (xv.dim(0), xv.dim(1));
        let ws = wv.shape();
        assert_eq!(ws.len(), 5);
        assert_eq!(ws[1], cin, "conv input channels {cin} vs kernel {ws:?}");
        let cout = ws[0];
        let geo = ConvGeometry {
            in_shape: spatial(xv),
            kernel: [ws[2], ws[3], ws[4]],
            stride,
        };
        let os = geo.out_shape();
        let pout: usize = os.iter().product();
        let ck = cin * geo.kvol();
        let mut out = vec![T::zero(); n * cout * pout];
        let bias_v: Option<Vec<T>> = bias.map(|b| self.value(b).data().to_vec());
        for i in 0..n {
            let y = &mut out[i * cout * pout..(i + 1) * cout * pout];
            if let Some(b) = &bias_v {
                for (co, &bv) in b.iter().enumerate() {
                    y[co * pout..(co + 1) * pout].fill(bv);
                }
            }
            let beta = if bias_v.is_some() { T::one() } else { T::zero() };
            if is_pointwise(&geo) {
                T::gemm(cout, ck, pout, T::one(), wv.data(), false, xv.row(i), false, beta, y);
            } else {
                let col = im2col(xv.row(i), cin, &geo);
                T::gemm(cout, ck, pout, T::one(), wv.data(), false, &col, false, beta, y);
            }
        }
        let value = Tensor::from_vec(&[n, cout, os[0], os[1], os[2]], out);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push(
            value,
            &parents,
            Box::new(move |g, p, _, needs| {
                let (xv, wv) = (p[0], p[1]);
                let mut gx = needs[0].then(|| Tensor::zeros(xv.shape()));
                let mut gw = needs[1].then(|| Tensor::zeros(wv.shape()));
                let mut gb = (p.len() > 2 && needs[2]).then(|| Tensor::zeros(&[cout]));
                let mut dcol = vec![T::zero(); ck * pout];
                for i in 0..n {
                    let gy = g.row(i);
                    if let Some(gb) = gb.as_mut() {
                        for co in 0..cout {
                            gb.data_mut()[co] += gy[co * pout..(co + 1) * pout].iter().copied().sum();
                        }
                    }
                    let pointwise = is_pointwise(&geo);
                    let col_owned;
                    let col: &[T] = if pointwise {
                        xv.row(i)
                    } else if gw.is_some() {
                        col_owned = im2col(xv.row(i), cin, &geo);
                        &col_owned
                    } else {
                        &[]
                    };
                    if let Some(gw) = gw.as_mut() {
                        T::gemm(cout, pout, ck, T::one(), gy, false, col, true, T::one(), gw.data_mut());
                    }
                    if let Some(gx) = gx.as_mut() {
                        if pointwise {
                            T::gemm(ck, cout, pout, T::one(), wv.data(), true, gy, false, T::zero(), gx.row_mut(i));
                        } else {
                            T::gemm(ck, cout, pout, T::one(), wv.data(), true, gy, false, T::zero(), &mut dcol);
                            col2im(&dcol, cin, &geo, gx.row_mut(i));
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if p.len() > 2 {
                    res.push(gb);
                }
                res
            }),
        )
    }
}
