//! Domain-randomized synthetic groups: procedural labelmaps, per-group
//! structure intensities and acquisition artifacts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields;
use crate::grid::Grid;
use crate::groupnet::{GroupBatch, GroupMember, Metadata};
use crate::kernels;
use crate::scalar::Real;
use crate::seed::SeedPath;
use crate::volume::{DisplacementField, ImageVolume, ProbSeg, VelocityField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid: Grid,
    /// Structures including background.
    pub classes: usize,
    pub sigma_within: f64,
    pub bias_sigma: f64,
    pub bias_amplitude: f64,
    /// Half-width of the uniform range of `ln(gamma)`.
    pub gamma_log_range: f64,
    pub noise_sigma: f64,
    /// RMS velocity magnitude of the labelmap warp, in voxels.
    pub warp_amplitude: f64,
    pub warp_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: Grid::cube(2, 64).expect("valid grid"),
            classes: 6,
            sigma_within: 0.02,
            bias_sigma: 12.0,
            bias_amplitude: 0.3,
            gamma_log_range: 0.3,
            noise_sigma: 0.02,
            warp_amplitude: 3.0,
            warp_sigma: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 structures, got {}",
                self.classes
            )));
        }
        let sigmas = [
            ("sigma_within", self.sigma_within),
            ("bias_sigma", self.bias_sigma),
            ("bias_amplitude", self.bias_amplitude),
            ("gamma_log_range", self.gamma_log_range),
            ("noise_sigma", self.noise_sigma),
            ("warp_amplitude", self.warp_amplitude),
            ("warp_sigma", self.warp_sigma),
        ];
        for (name, v) in sigmas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Same corruption switched off entirely.
    pub fn clean(&self) -> Self {
        Self {
            sigma_within: 0.0,
            bias_amplitude: 0.0,
            gamma_log_range: 0.0,
            noise_sigma: 0.0,
            ..self.clone()
        }
    }
}

/// Centered coordinates in `(-0.5, 0.5)` per logical axis.
fn unit_coords(grid: &Grid, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .zip(grid.extent())
        .map(|(&i, &n)| (i as f64 + 0.5) / n as f64 - 0.5)
        .collect()
}

/// Undeformed template: a thin elliptical rim (1), a thin inner ring (2), a
/// central core (3) and small discs (4, 5, ...) between core and ring.
pub fn base_labels(grid: &Grid, classes: usize) -> Vec<usize> {
    let radii: &[f64] = if grid.dims() == 2 { &[0.40, 0.45] } else { &[0.38, 0.40, 0.45] };
    let discs = classes.saturating_sub(4);
    let ring = 0.42;
    let disc_r = if discs == 0 {
        0.0
    } else {
        let spacing = std::f64::consts::TAU * ring * radii[radii.len() - 2].min(radii[radii.len() - 1]) / discs as f64;
        0.1f64.min(0.4 * spacing)
    };
    let centers: Vec<(f64, f64)> = (0..discs)
        .map(|j| {
            let th = std::f64::consts::TAU * j as f64 / discs as f64 + std::f64::consts::FRAC_PI_4;
            (ring * radii[radii.len() - 2] * th.cos(), ring * radii[radii.len() - 1] * th.sin())
        })
        .collect();
    let extent = grid.extent();
    let mut labels = Vec::with_capacity(grid.voxels());
    let mut idx = vec![0usize; extent.len()];
    for _ in 0..grid.voxels() {
        let u = unit_coords(grid, &idx);
        let rho = u.iter().zip(radii).map(|(x, r)| (x / r).powi(2)).sum::<f64>().sqrt();
        let mid_plane = u.len() == 2 || u[0].abs() < disc_r;
        let (a, b) = (u[u.len() - 2], u[u.len() - 1]);
        let in_disc = centers.iter().position(|&(ca, cb)| {
            let depth = if u.len() == 3 { u[0] * u[0] } else { 0.0 };
            mid_plane && (a - ca).powi(2) + (b - cb).powi(2) + depth < disc_r * disc_r
        });
        let label = if rho > 1.0 || classes == 1 {
            0
        } else if rho > 0.86 {
            1
        } else if classes > 2 && rho > 0.58 && rho <= 0.72 {
            2
        } else if classes > 3 && rho < 0.18 {
            3
        } else if let Some(j) = in_disc {
            4 + j
        } else {
            0
        };
        labels.push(label);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < extent[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    labels
}

#[derive(Clone, Copy)]
enum Scale {
    Peak,
    Rms,
}

/// Smooth random vector noise with `channels` components whose peak or RMS
/// vector norm equals `amplitude`.
fn smooth_noise(grid: &Grid, channels: usize, sigma: f64, amplitude: f64, scale: Scale, path: &SeedPath) -> Vec<f64> {
    let mut rng = path.rng();
    let n = grid.voxels();
    let raw: Vec<f64> = (0..channels * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shape = grid.internal();
    let mut out = Vec::with_capacity(raw.len());
    for c in 0..channels {
        out.extend(kernels::gaussian_smooth(&raw[c * n..(c + 1) * n], shape, grid.dims(), sigma));
    }
    let norms = (0..n).map(|p| (0..channels).map(|c| out[c * n + p].powi(2)).sum::<f64>());
    let size = match scale {
        Scale::Peak => norms.fold(0.0, f64::max).sqrt(),
        Scale::Rms => (norms.sum::<f64>() / n as f64).sqrt(),
    };
    let s = if size > 0.0 { amplitude / size } else { 0.0 };
    out.iter_mut().for_each(|x| *x *= s);
    out
}

/// Diffeomorphic warp used to deform the base template for `seed`.
pub fn labelmap_warp<T: Real>(config: &SynthConfig, seed: u64) -> Result<DisplacementField<T>> {
    config.validate()?;
    let grid = &config.grid;
    let v = smooth_noise(
        grid,
        grid.dims(),
        config.warp_sigma,
        config.warp_amplitude,
        Scale::Rms,
        &SeedPath::new(seed).child(0x1ab),
    );
    let v = VelocityField::new(grid.clone(), v.into_iter().map(T::lit).collect())?;
    fields::integrate_svf(&v, fields::DEFAULT_STEPS)
}

/// One-hot labelmap: the base template deformed by a random smooth warp.
pub fn gen_labelmap<T: Real>(config: &SynthConfig, seed: u64) -> Result<ProbSeg<T>> {
    config.validate()?;
    let base = ProbSeg::one_hot(config.grid.clone(), config.classes, &base_labels(&config.grid, config.classes))?;
    if config.warp_amplitude == 0.0 {
        return Ok(base);
    }
    let phi = labelmap_warp(config, seed)?;
    let warped = fields::warp_seg(&base, &phi)?;
    ProbSeg::one_hot(config.grid.clone(), config.classes, &warped.argmax())
}

/// Pre-corruption intensities: `means[label] + N(0, sigma_within)` per voxel,
/// clamped to `[0, 1]`.
pub fn structure_intensities<T: Real>(
    labelmap: &ProbSeg<T>,
    means: &[f64],
    sigma_within: f64,
    seed: u64,
) -> Result<ImageVolume<T>> {
    if means.len() != labelmap.classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} intensities for {} structures",
            means.len(),
            labelmap.classes()
        )));
    }
    let mut rng = SeedPath::new(seed).rng();
    let data = labelmap
        .argmax()
        .into_iter()
        .map(|l| {
            let jitter: f64 = if sigma_within > 0.0 {
                sigma_within * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.0
            };
            T::lit((means[l] + jitter).clamp(0.0, 1.0))
        })
        .collect();
    ImageVolume::new(labelmap.grid().clone(), data)
}

/// Per-group structure means, uniform in `[0, 1]`.
pub fn group_means(classes: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedPath::new(seed).child(0).rng();
    (0..classes).map(|_| rng.random::<f64>()).collect()
}

/// Bias field `exp(B)`, then `x^gamma`, then additive noise, then clamping.
pub fn corrupt_image<T: Real>(x: &ImageVolume<T>, config: &SynthConfig, seed: u64) -> Result<ImageVolume<T>> {
    config.validate()?;
    let grid = x.grid();
    let root = SeedPath::new(seed);
    let mut v: Vec<f64> = x.values().iter().map(|t| t.to_f64_lossy()).collect();
    if config.bias_amplitude > 0.0 {
        let b = smooth_noise(grid, 1, config.bias_sigma, config.bias_amplitude, Scale::Peak, &root.child(1));
        v.iter_mut().zip(&b).for_each(|(x, b)| *x *= b.exp());
    }
    if config.gamma_log_range > 0.0 {
        let r = config.gamma_log_range;
        let log_gamma = root.child(2).rng().sample(Uniform::new_inclusive(-r, r).expect("finite range"));
        let gamma = log_gamma.exp();
        v.iter_mut().for_each(|x| *x = x.max(0.0).powf(gamma));
    }
    if config.noise_sigma > 0.0 {
        let mut rng = root.child(3).rng();
        v.iter_mut().for_each(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += config.noise_sigma * e;
        });
    }
    let changed = config.bias_amplitude > 0.0 || config.gamma_log_range > 0.0 || config.noise_sigma > 0.0;
    if !changed {
        return Ok(x.clone());
    }
    ImageVolume::new(grid.clone(), v.into_iter().map(|x| T::lit(x.clamp(0.0, 1.0))).collect())
}

/// One synthetic group over the given labelmaps: shared structure means,
/// per-member intensity jitter and independent corruption.
pub fn synth_group<T: Real>(labelmaps: &[ProbSeg<T>], config: &SynthConfig, seed: u64) -> Result<GroupBatch<T>> {
    config.validate()?;
    let first = labelmaps
        .first()
        .ok_or_else(|| Error::InvalidConfig("a synthetic group needs at least one labelmap".into()))?;
    for l in labelmaps {
        first.grid().check(l.grid(), "synthetic group")?;
    }
    let root = SeedPath::new(seed);
    let means = group_means(first.classes(), seed);
    let members = labelmaps
        .iter()
        .enumerate()
        .map(|(i, lm)| {
            let member = root.child(1 + i as u64);
            let clean = structure_intensities(lm, &means, config.sigma_within, member.child(0).seed())?;
            let image = corrupt_image(&clean, config, member.child(1).seed())?;
            let mut meta = Metadata::new();
            meta.insert("id".into(), format!("synth-{seed:016x}-{i}").into());
            meta.insert("modality".into(), "synthetic".into());
            meta.insert("synthetic".into(), true.into());
            Ok(GroupMember {
                image,
                seg: Some(lm.clone()),
                meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(members)
}

/// `m` fresh labelmaps and their synthetic group, all derived from `seed`.
pub fn sample_synth_group<T: Real>(config: &SynthConfig, m: usize, seed: u64) -> Result<GroupBatch<T>> {
    let root = SeedPath::new(seed);
    let labelmaps = (0..m)
        .map(|i| gen_labelmap(config, root.child(100 + i as u64).seed()))
        .collect::<Result<Vec<_>>>()?;
    synth_group(&labelmaps, config, root.child(1).seed())
}
