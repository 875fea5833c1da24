//! Reference implementations shared by the integration tests. Everything here
//! is written directly against the definitions in `f64`, independent of the
//! library kernels.
#![allow(dead_code)]

use groupmorph::{Grid, ImageVolume, VelocityField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Separable Gaussian blur of one `h x w` plane with clamp-to-edge borders.
pub fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + clamp(x as i64 + d, w)])
                .sum::<f64>()
                / ks;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as i64 + d, h) * w + x])
                .sum::<f64>()
                / ks;
        }
    }
    out
}

/// Gaussian-smoothed white noise on an `n x n` grid, rescaled so the largest
/// component magnitude equals `amplitude`.
pub fn smooth_velocity(n: usize, sigma: f64, amplitude: f64, seed: u64) -> VelocityField<f64> {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(2 * n * n);
    for _ in 0..2 {
        let noise: Vec<f64> = (0..n * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        data.extend(blur(&noise, n, n, sigma));
    }
    let peak = data.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let data = data.into_iter().map(|x| x * amplitude / peak).collect();
    VelocityField::new(Grid::new(&[n, n]).unwrap(), data).unwrap()
}

/// Bilinear sample of a channel-major 2D field at `(y, x)`, coordinates
/// clamped to the grid.
pub fn bilinear(data: &[f64], c: usize, h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| data[c * h * w + yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Displacement of the unit-time flow of `dx/dt = v(x)` started at every
/// voxel, by classical fourth-order Runge-Kutta with `steps` uniform steps.
pub fn rk4_flow(v: &VelocityField<f64>, steps: usize) -> Vec<f64> {
    let e = v.grid().extent();
    let (h, w) = (e[0], e[1]);
    let d = v.data();
    let f = |p: [f64; 2]| [bilinear(d, 0, h, w, p[0], p[1]), bilinear(d, 1, h, w, p[0], p[1])];
    let dt = 1.0 / steps as f64;
    let mut out = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut p = [y as f64, x as f64];
            for _ in 0..steps {
                let k1 = f(p);
                let k2 = f([p[0] + 0.5 * dt * k1[0], p[1] + 0.5 * dt * k1[1]]);
                let k3 = f([p[0] + 0.5 * dt * k2[0], p[1] + 0.5 * dt * k2[1]]);
                let k4 = f([p[0] + dt * k3[0], p[1] + dt * k3[1]]);
                for a in 0..2 {
                    p[a] += dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
                }
            }
            out[y * w + x] = p[0] - y as f64;
            out[h * w + y * w + x] = p[1] - x as f64;
        }
    }
    out
}

/// Largest per-component difference over voxels at least `margin` from every
/// border of a 2D channel-major field.
pub fn max_interior_diff(a: &[f64], b: &[f64], h: usize, w: usize, margin: usize) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..2 {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = c * h * w + y * w + x;
                worst = worst.max((a[i] - b[i]).abs());
            }
        }
    }
    worst
}

/// Isotropic Gaussian bump of width `sigma` centred at `(cy, cx)`.
pub fn gaussian_blob(grid: &Grid, cy: f64, cx: f64, sigma: f64) -> ImageVolume<f64> {
    let w = grid.extent()[1];
    ImageVolume::new(
        grid.clone(),
        (0..grid.voxels())
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
    )
    .unwrap()
}

/// Direct Dice of two boolean masks; two empty masks score 1.
pub fn mask_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
