//! Classical iterative atlas construction: per-member velocity fields are
//! optimized directly against a template that is re-estimated as the mean of
//! the warped images.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::atlas::{self, AtlasResult};
use crate::autodiff::{Graph, Statistic};
use crate::error::{Error, Result};
use crate::fields;
use crate::groupnet::{self, GroupBatch};
use crate::kernels;
use crate::losses::{DEFAULT_EPSILON, DEFAULT_WINDOW};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterConfig {
    pub outer_iterations: usize,
    pub inner_steps: usize,
    /// Largest velocity update per inner step, in voxels.
    pub step_size: f64,
    pub lambda_reg: f64,
    pub smoothing_sigma: f64,
    pub center_fields: bool,
    pub lncc_window: usize,
    pub epsilon: f64,
    pub integration_steps: usize,
    /// Halvings tried before an inner loop gives up.
    pub max_halvings: usize,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 20,
            inner_steps: 50,
            step_size: 0.1,
            lambda_reg: 1.0,
            smoothing_sigma: 1.0,
            center_fields: true,
            lncc_window: DEFAULT_WINDOW,
            epsilon: DEFAULT_EPSILON,
            integration_steps: fields::DEFAULT_STEPS,
            max_halvings: 12,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be positive".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if !(self.smoothing_sigma.is_finite() && self.smoothing_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "smoothing_sigma must be >= 0, got {}",
                self.smoothing_sigma
            )));
        }
        if self.lncc_window < 3 || self.lncc_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "lncc window must be odd and >= 3, got {}",
                self.lncc_window
            )));
        }
        if self.integration_steps == 0 {
            return Err(Error::InvalidConfig("integration_steps must be positive".into()));
        }
        Ok(())
    }
}

struct Problem<'a, T: Real> {
    images: Tensor<T>,
    dims: usize,
    shape: [usize; 3],
    config: &'a IterConfig,
}

impl<T: Real> Problem<'_, T> {
    /// Objective `Σ_i lncc(x_i ∘ φ_i, t) + λ grad_penalty(u_i)` and optionally its
    /// gradient with respect to the stacked velocities.
    fn evaluate(&self, v: &Tensor<T>, t: &Tensor<T>, with_grad: bool) -> (f64, Option<Tensor<T>>) {
        let mut g = Graph::new();
        let vv = if with_grad { g.leaf(v.clone()) } else { g.constant(v.clone()) };
        let x = g.constant(self.images.clone());
        let tv = g.constant(t.clone());
        let u = g.integrate(vv, self.dims, self.config.integration_steps);
        let warped = g.sample(x, u, self.dims);
        let sim = g.lncc(warped, tv, self.dims, self.config.lncc_window, T::lit(self.config.epsilon));
        let sim = g.sum(sim);
        let reg = g.grad_penalty(u, self.dims);
        let reg = g.sum(reg);
        let total = g.linear_combination(&[(sim, T::one()), (reg, T::lit(self.config.lambda_reg))]);
        let value = g.value(total).data()[0].to_f64_lossy();
        let grad = with_grad.then(|| {
            g.backward(total)
                .take(vv)
                .unwrap_or_else(|| Tensor::zeros(v.shape()))
        });
        (value, grad)
    }

    fn template(&self, v: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let x = g.constant(self.images.clone());
        let u = g.integrate(vv, self.dims, self.config.integration_steps);
        let warped = g.sample(x, u, self.dims);
        let t = g.group_reduce(warped, Statistic::Mean);
        g.value(t).clone()
    }

    fn smooth(&self, v: &mut Tensor<T>) {
        let n = self.shape.iter().product::<usize>();
        let data = v.data_mut();
        for chunk in data.chunks_mut(n) {
            let s = kernels::gaussian_smooth(chunk, self.shape, self.dims, self.config.smoothing_sigma);
            chunk.copy_from_slice(&s);
        }
    }

    fn center(&self, v: &mut Tensor<T>) {
        let m = v.dim(0);
        let len = v.row_len();
        let mut mean = vec![T::zero(); len];
        for i in 0..m {
            for (a, &b) in mean.iter_mut().zip(v.row(i)) {
                *a += b;
            }
        }
        let inv = T::one() / T::from_usize_lossy(m);
        let data = v.data_mut();
        for i in 0..m {
            for (a, &b) in data[i * len..(i + 1) * len].iter_mut().zip(&mean) {
                *a -= b * inv;
            }
        }
    }

    /// Normalized-gradient descent on the velocities with the template fixed.
    /// A step is kept only if the smoothed update lowers the objective;
    /// otherwise the step size is halved and the update retried.
    fn register(&self, v: &mut Tensor<T>, t: &Tensor<T>, mut objective: f64, outer: usize) -> Result<f64> {
        let mut step = self.config.step_size;
        for _ in 0..self.config.inner_steps {
            let (_, grad) = self.evaluate(v, t, true);
            let grad = grad.expect("gradient requested");
            let peak = grad.data().iter().fold(0.0f64, |a, &b| a.max(b.to_f64_lossy().abs()));
            if !peak.is_finite() {
                return Err(Error::Diverged {
                    iteration: outer,
                    message: "non-finite velocity gradient".into(),
                });
            }
            if peak == 0.0 {
                break;
            }
            let mut accepted = false;
            for _ in 0..=self.config.max_halvings {
                let scale = T::lit(step / peak);
                let mut trial = v.clone();
                for (a, &b) in trial.data_mut().iter_mut().zip(grad.data()) {
                    *a -= scale * b;
                }
                self.smooth(&mut trial);
                let (value, _) = self.evaluate(&trial, t, false);
                if value <= objective {
                    *v = trial;
                    objective = value;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(objective)
    }
}

/// Alternates velocity optimization against a fixed template, mean-velocity
/// centering and template re-estimation. The trace holds the objective after
/// every re-estimation, starting with the initial one. An outer iteration
/// that would raise the objective is discarded and the run stops there.
pub fn iterative_atlas<T: Real>(group: &GroupBatch<T>, config: &IterConfig) -> Result<AtlasResult<T>> {
    config.validate()?;
    let m = group.len();
    if m < 2 {
        return Err(Error::NotEnoughData(format!("iterative atlas needs m >= 2, got {m}")));
    }
    let start = Instant::now();
    let grid = group.grid().clone();
    let problem = Problem {
        images: group.image_tensor(),
        dims: grid.dims(),
        shape: grid.internal(),
        config,
    };
    let mut v = Tensor::zeros(&[m, grid.dims(), problem.shape[0], problem.shape[1], problem.shape[2]]);
    let mut t = problem.template(&v);
    let (mut objective, _) = problem.evaluate(&v, &t, false);
    if !objective.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            message: "initial objective is not finite".into(),
        });
    }
    let mut trace = vec![(0usize, objective)];
    for outer in 1..=config.outer_iterations {
        let mut next = v.clone();
        let inner = problem.register(&mut next, &t, objective, outer)?;
        if !inner.is_finite() {
            return Err(Error::Diverged {
                iteration: outer,
                message: "objective is not finite".into(),
            });
        }
        if config.center_fields {
            problem.center(&mut next);
        }
        let next_t = problem.template(&next);
        let (value, _) = problem.evaluate(&next, &next_t, false);
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: outer,
                message: "objective is not finite".into(),
            });
        }
        if value > objective {
            break;
        }
        v = next;
        t = next_t;
        objective = value;
        trace.push((outer, objective));
    }
    let velocities = groupnet::split_fields(&grid, &v)?;
    let mut result = atlas::assemble(group, velocities, config.integration_steps)?;
    result.seconds = start.elapsed().as_secs_f64();
    result.trace = trace;
    Ok(result)
}

/// `(outer iteration, objective)` pairs recorded by [`iterative_atlas`].
pub fn objective_trace<T>(result: &AtlasResult<T>) -> &[(usize, f64)] {
    &result.trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::groupnet::GroupMember;
    use crate::volume::ImageVolume;

    fn blob(grid: &Grid, cx: f64) -> ImageVolume<f64> {
        let e = grid.extent();
        let data = (0..grid.voxels())
            .map(|p| {
                let (y, x) = ((p / e[1]) as f64, (p % e[1]) as f64);
                let r2 = (x - cx).powi(2) + (y - e[0] as f64 / 2.0).powi(2);
                (-r2 / 18.0).exp()
            })
            .collect();
        ImageVolume::new(grid.clone(), data).unwrap()
    }

    #[test]
    fn zero_outer_iterations_is_the_mean() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let group = GroupBatch::from_images(vec![blob(&grid, 6.0), blob(&grid, 9.0)]).unwrap();
        let config = IterConfig { outer_iterations: 0, ..Default::default() };
        let r = iterative_atlas(&group, &config).unwrap();
        assert_eq!(objective_trace(&r).len(), 1);
        assert!(r.velocities.iter().all(|v| v.max_abs() == 0.0));
        for (p, &a) in r.atlas.data().iter().enumerate() {
            let mean = 0.5 * (group.members()[0].image.data()[p] + group.members()[1].image.data()[p]);
            assert!((a - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_is_rejected() {
        let grid = Grid::new(&[8, 8]).unwrap();
        let group = GroupBatch::new(vec![GroupMember::new(blob(&grid, 4.0))]).unwrap();
        assert!(iterative_atlas(&group, &IterConfig::default()).is_err());
    }
}
