//! Deformation-field core: scaling-and-squaring integration, composition,
//! pullback warping, Jacobian analysis and the centrality metric.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Real;
use crate::volume::{DisplacementField, ImageVolume, ProbSeg, VelocityField, Volume};

/// Default number of squaring steps.
pub const DEFAULT_STEPS: usize = 7;

/// Smallest channel sum accepted before renormalizing a warped segmentation.
pub(crate) const MIN_PROB_SUM: f64 = 1e-6;

/// Flow of `v` for unit time: `u0 = v / 2^steps`, then `u <- u + u∘(id + u)`
/// `steps` times.
pub fn integrate_svf<T: Real>(v: &VelocityField<T>, steps: usize) -> Result<DisplacementField<T>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
    }
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let grid = v.grid();
    let shape = grid.internal();
    let dims = grid.dims();
    let scale = T::lit(0.5f64.powi(steps as i32));
    let mut u: Vec<T> = v.data().iter().map(|&x| x * scale).collect();
    for _ in 0..steps {
        u = compose_raw(&u, &u, shape, dims);
    }
    DisplacementField::new(grid.clone(), u)
}

/// `b + a∘(id + b)`: displacement of `(id + a) ∘ (id + b)`.
pub(crate) fn compose_raw<T: Real>(a: &[T], b: &[T], shape: [usize; 3], dims: usize) -> Vec<T> {
    let mut out = kernels::sample(a, dims, b, shape, dims);
    for (o, &bv) in out.iter_mut().zip(b) {
        *o = bv + *o;
    }
    out
}

pub fn compose<T: Real>(
    a: &DisplacementField<T>,
    b: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    a.grid().check(b.grid(), "compose")?;
    let g = a.grid();
    DisplacementField::new(
        g.clone(),
        compose_raw(a.data(), b.data(), g.internal(), g.dims()),
    )
}

/// Pullback of an arbitrary multi-channel volume.
pub fn warp_volume<T: Real>(x: &Volume<T>, phi: &DisplacementField<T>) -> Result<Volume<T>> {
    x.grid().check(phi.grid(), "warp")?;
    let g = x.grid();
    let out = kernels::sample(x.data(), x.channels(), phi.data(), g.internal(), g.dims());
    Volume::new(g.clone(), x.channels(), out)
}

/// `out(p) = x(p + u(p))`, multilinear, clamp-to-edge.
pub fn warp_image<T: Real>(x: &ImageVolume<T>, phi: &DisplacementField<T>) -> Result<ImageVolume<T>> {
    ImageVolume::from_volume(warp_volume(x, phi)?)
}

/// Per-channel pullback followed by per-voxel renormalization.
pub fn warp_seg<T: Real>(s: &ProbSeg<T>, phi: &DisplacementField<T>) -> Result<ProbSeg<T>> {
    let warped = warp_volume(s, phi)?;
    Ok(renormalize(warped))
}

/// Divides every voxel's channels by their sum.
pub(crate) fn renormalize<T: Real>(v: Volume<T>) -> ProbSeg<T> {
    let n = v.grid().voxels();
    let k = v.channels();
    let grid = v.grid().clone();
    let mut data = v.into_data();
    let floor = T::lit(MIN_PROB_SUM);
    for p in 0..n {
        let mut s = T::zero();
        for c in 0..k {
            s += data[c * n + p];
        }
        let s = s.max(floor);
        for c in 0..k {
            data[c * n + p] /= s;
        }
    }
    ProbSeg::from_volume_unchecked(Volume::new(grid, k, data).expect("finite renormalized data"))
}

/// Per-voxel `det(I + ∇u)` with central differences inside and one-sided at the borders.
pub fn jacobian_det<T: Real>(phi: &DisplacementField<T>) -> Result<Vec<T>> {
    let g = phi.grid();
    if g.extent().iter().any(|&e| e < 3) {
        return Err(Error::InvalidConfig(format!(
            "jacobian needs extents >= 3, got {:?}",
            g.extent()
        )));
    }
    let shape = g.internal();
    let d = g.dims();
    let off = g.axis_offset();
    let n = g.voxels();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        // j[r][c] = d phi_r / d x_c
        let mut j = [[T::zero(); 3]; 3];
        for (r, row) in j.iter_mut().enumerate().take(d) {
            let plane = phi.channel(r);
            for (c, cell) in row.iter_mut().enumerate().take(d) {
                *cell = kernels::finite_diff(plane, shape, off + c, p);
                if r == c {
                    *cell += T::one();
                }
            }
        }
        let det = if d == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        };
        out.push(det);
    }
    Ok(out)
}

/// Voxels whose Jacobian determinant is `<= 0`.
pub fn count_folds<T: Real>(phi: &DisplacementField<T>) -> Result<usize> {
    Ok(jacobian_det(phi)?
        .into_iter()
        .filter(|&d| d <= T::zero())
        .count())
}

/// Mean over voxels of the squared norm of the group-mean displacement.
pub fn centrality<T: Real>(us: &[DisplacementField<T>]) -> Result<T> {
    let first = us
        .first()
        .ok_or_else(|| Error::InvalidConfig("centrality needs at least one field".into()))?;
    for u in us {
        first.grid().check(u.grid(), "centrality")?;
    }
    Ok(centrality_raw(
        us.iter().map(|u| u.data()),
        first.grid().dims(),
        first.grid().voxels(),
    ))
}

/// Centrality of velocity fields (same metric, before integration).
pub fn velocity_centrality<T: Real>(vs: &[VelocityField<T>]) -> Result<T> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidConfig("centrality needs at least one field".into()))?;
    for v in vs {
        first.grid().check(v.grid(), "centrality")?;
    }
    Ok(centrality_raw(
        vs.iter().map(|v| v.data()),
        first.grid().dims(),
        first.grid().voxels(),
    ))
}

/// Same reduction over raw channel-major buffers (used for velocities too).
pub(crate) fn centrality_raw<'a, T: Real>(
    fields: impl Iterator<Item = &'a [T]>,
    dims: usize,
    voxels: usize,
) -> T {
    let mut mean = vec![T::zero(); dims * voxels];
    let mut m = 0usize;
    for f in fields {
        for (a, &b) in mean.iter_mut().zip(f) {
            *a += b;
        }
        m += 1;
    }
    let inv = T::one() / T::from_usize_lossy(m);
    let mut total = T::zero();
    for p in 0..voxels {
        let mut sq = T::zero();
        for c in 0..dims {
            let v = mean[c * voxels + p] * inv;
            sq += v * v;
        }
        total += sq;
    }
    total / T::from_usize_lossy(voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn ramp(n: usize) -> ImageVolume<f64> {
        ImageVolume::from_fn(Grid::new(&[n, n]).unwrap(), |i| i[0] as f64 / (n - 1) as f64).unwrap()
    }

    fn constant(grid: &Grid, c: &[f64]) -> DisplacementField<f64> {
        DisplacementField::from_fn(grid.clone(), |_| c.to_vec()).unwrap()
    }

    #[test]
    fn zero_velocity_integrates_to_identity() {
        let g = Grid::new(&[8, 8]).unwrap();
        let u = integrate_svf(&VelocityField::<f32>::zeros(g), 7).unwrap();
        assert!(u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_velocity_is_exact_away_from_boundary() {
        let g = Grid::new(&[16, 16]).unwrap();
        let v = VelocityField::from_fn(g, |_| vec![2.0f64, 0.0]).unwrap();
        let u = integrate_svf(&v, 7).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let p = i * 16 + j;
                if i + 3 < 16 {
                    assert!((u.channel(0)[p] - 2.0).abs() < 1e-12, "{i},{j}");
                }
                assert_eq!(u.channel(1)[p], 0.0);
            }
        }
    }

    #[test]
    fn integrate_rejects_bad_input() {
        let g = Grid::new(&[4, 4]).unwrap();
        let v = VelocityField::<f64>::zeros(g);
        assert!(integrate_svf(&v, 0).is_err());
    }

    #[test]
    fn compose_identity_units_and_translations() {
        let g = Grid::new(&[10, 10]).unwrap();
        let zero = DisplacementField::<f64>::zeros(g.clone());
        let b = DisplacementField::from_fn(g.clone(), |i| vec![(i[0] as f64 * 0.3).sin(), 0.2]).unwrap();
        assert_eq!(compose(&zero, &b).unwrap(), b);
        assert_eq!(compose(&b, &zero).unwrap(), b);
        let a = constant(&g, &[1.0, 0.0]);
        let c = constant(&g, &[0.0, 2.0]);
        let ac = compose(&a, &c).unwrap();
        for i in 1..9 {
            for j in 1..7 {
                let p = i * 10 + j;
                assert_eq!((ac.channel(0)[p], ac.channel(1)[p]), (1.0, 2.0));
            }
        }
        let other = DisplacementField::<f64>::zeros(Grid::new(&[10, 12]).unwrap());
        assert!(compose(&a, &other).is_err());
    }

    #[test]
    fn warp_identity_is_bitwise() {
        let x = ramp(9);
        let g = x.grid().clone();
        let out = warp_image(&x, &DisplacementField::zeros(g)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn warp_integer_and_half_shifts_on_ramp() {
        let n = 9;
        let x = ramp(n);
        let g = x.grid().clone();
        let one = warp_image(&x, &constant(&g, &[1.0, 0.0])).unwrap();
        let half = warp_image(&x, &constant(&g, &[0.5, 0.0])).unwrap();
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let want = (i + 1).min(n - 1) as f64 / (n - 1) as f64;
                assert!((one.values()[p] - want).abs() < 1e-15);
                if i + 1 < n {
                    let want = (i as f64 + 0.5) / (n - 1) as f64;
                    assert!((half.values()[p] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn warp_seg_shifts_and_softens_boundaries() {
        let g = Grid::new(&[6, 4]).unwrap();
        let labels: Vec<usize> = (0..24).map(|p| usize::from(p / 4 >= 3)).collect();
        let s = ProbSeg::<f64>::one_hot(g.clone(), 2, &labels).unwrap();
        let same = warp_seg(&s, &DisplacementField::zeros(g.clone())).unwrap();
        assert_eq!(same, s);
        let shifted = warp_seg(&s, &constant(&g, &[1.0, 0.0])).unwrap();
        assert_eq!(shifted.argmax(), (0..24).map(|p| usize::from(p / 4 >= 2)).collect::<Vec<_>>());
        assert_eq!(shifted.channel(1)[2 * 4], 1.0);
        let soft = warp_seg(&s, &constant(&g, &[0.5, 0.0])).unwrap();
        for j in 0..4 {
            let p = 2 * 4 + j;
            assert!((soft.channel(0)[p] - 0.5).abs() < 1e-15);
            assert!((soft.channel(1)[p] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_of_affine_maps() {
        let g = Grid::new(&[6, 6]).unwrap();
        let id = DisplacementField::<f64>::zeros(g.clone());
        assert!(jacobian_det(&id).unwrap().iter().all(|&d| d == 1.0));
        let double = DisplacementField::from_fn(g.clone(), |i| vec![i[0] as f64, i[1] as f64]).unwrap();
        assert!(jacobian_det(&double).unwrap().iter().all(|&d| (d - 4.0).abs() < 1e-12));
        let flip = DisplacementField::from_fn(g.clone(), |i| vec![-2.0 * i[0] as f64, 0.0]).unwrap();
        assert!(jacobian_det(&flip).unwrap().iter().all(|&d| (d + 1.0).abs() < 1e-12));
        let g3 = Grid::new(&[4, 4, 4]).unwrap();
        let d3 = DisplacementField::from_fn(g3, |i| i.iter().map(|&x| x as f64).collect()).unwrap();
        assert!(jacobian_det(&d3).unwrap().iter().all(|&d| (d - 8.0).abs() < 1e-12));
        let small = DisplacementField::<f64>::zeros(Grid::new(&[2, 5]).unwrap());
        assert!(jacobian_det(&small).is_err());
    }

    #[test]
    fn folds_counted_with_inclusive_threshold() {
        let g = Grid::new(&[8, 8]).unwrap();
        assert_eq!(count_folds(&DisplacementField::<f64>::zeros(g.clone())).unwrap(), 0);
        let double = DisplacementField::from_fn(g.clone(), |i| vec![i[0] as f64, i[1] as f64]).unwrap();
        assert_eq!(count_folds(&double).unwrap(), 0);
        // phi_x = 0 everywhere: degenerate, counted.
        let collapse = DisplacementField::from_fn(g, |i| vec![-(i[0] as f64), 0.0]).unwrap();
        assert_eq!(count_folds(&collapse).unwrap(), 64);
    }

    #[test]
    fn centrality_direct_values() {
        let g = Grid::new(&[4, 4]).unwrap();
        let z = DisplacementField::<f64>::zeros(g.clone());
        assert_eq!(centrality(&[z.clone(), z]).unwrap(), 0.0);
        let a = DisplacementField::from_fn(g.clone(), |i| vec![i[0] as f64, 1.0]).unwrap();
        let na = DisplacementField::from_fn(g.clone(), |i| vec![-(i[0] as f64), -1.0]).unwrap();
        assert_eq!(centrality(&[a, na]).unwrap(), 0.0);
        let u1 = constant(&g, &[1.0, 0.0]);
        let u2 = constant(&g, &[3.0, 0.0]);
        assert_eq!(centrality(&[u1, u2]).unwrap(), 4.0);
        assert!(centrality::<f64>(&[]).is_err());
    }
}
