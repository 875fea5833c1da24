//! Training loop: group sampling with synthetic mixing, the group objective on
//! the tape, Adam updates, CSV logging, checkpoints and gradient checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::atlas;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::groupnet::{self, GroupBatch, GroupMember, ModelParams, NetConfig, ParamVars};
use crate::losses::{LossComponents, LossWeights};
use crate::scalar::Real;
use crate::seed::SeedPath;
use crate::synthgen::{self, SynthConfig};
use crate::tensor::Tensor;
use crate::tensorio::{self, Checkpoint, DatasetManifest, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Inclusive `[m_lo, m_hi]`.
    pub group_size: [usize; 2],
    pub synthetic_fraction: f64,
    pub loss: LossWeights,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        Self {
            iterations: 5_000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            group_size: [2, 6],
            synthetic_fraction: 0.5,
            loss: LossWeights::default(),
            checkpoint_interval: 1_000,
            seed: 0,
        }
    }

    /// Full-scale settings of the original training schedule.
    pub fn full_scale() -> Self {
        Self {
            iterations: 80_000,
            group_size: [2, 12],
            checkpoint_interval: 5_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.group_size;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("invalid group size range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.synthetic_fraction) {
            return Err(Error::InvalidConfig(format!(
                "synthetic fraction {} outside [0, 1]",
                self.synthetic_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("invalid optimizer settings".into()));
        }
        self.loss.validate()
    }
}

/// Train-split subjects available for real groups.
#[derive(Clone, Debug, Default)]
pub struct RealPool {
    members: Vec<GroupMember<f32>>,
}

impl RealPool {
    pub fn new(members: Vec<GroupMember<f32>>) -> Self {
        Self { members }
    }

    /// Loads every train-split record of a manifest.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let members = manifest
            .split(Split::Train)
            .map(atlas::load_member)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn modality(m: &GroupMember<f32>) -> String {
        m.meta
            .get("modality")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_owned()
    }
}

/// Group for `iteration`, drawn from `SeedPath(seed) / iteration`.
///
/// Returns the group and whether it is synthetic.
pub fn sample_group(
    pool: &RealPool,
    synth: &SynthConfig,
    train: &TrainConfig,
    seed: u64,
    iteration: u64,
) -> Result<(GroupBatch<f32>, bool)> {
    train.validate()?;
    let path = SeedPath::new(seed).child(iteration);
    let mut rng = path.child(0).rng();
    let [lo, hi] = train.group_size;
    let m = rng.random_range(lo..=hi);
    let synthetic = pool.is_empty() || rng.random::<f64>() < train.synthetic_fraction;
    if synthetic {
        return Ok((synthgen::sample_synth_group(synth, m, path.child(1).seed())?, true));
    }
    let anchor = &pool.members[rng.random_range(0..pool.len())];
    let modality = RealPool::modality(anchor);
    let same: Vec<&GroupMember<f32>> = pool
        .members
        .iter()
        .filter(|x| RealPool::modality(x) == modality)
        .collect();
    if same.len() < m {
        return Err(Error::NotEnoughData(format!(
            "group of {m} requested but only {} train subjects have modality {modality:?}",
            same.len()
        )));
    }
    let picks = index::sample(&mut rng, same.len(), m);
    let aug = path.child(2);
    let members = picks
        .iter()
        .enumerate()
        .map(|(k, i)| {
            let mut member = same[i].clone();
            member.image = synthgen::corrupt_image(&member.image, synth, aug.child(k as u64).seed())?;
            member.meta.insert("synthetic".into(), false.into());
            Ok(member)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((GroupBatch::new(members)?, false))
}

/// Tape handles of the four loss terms (scalars).
pub struct LossVars {
    pub total: Var,
    pub sim: Var,
    pub reg: Var,
    pub seg: Var,
}

/// Builds the group objective for `group` on the tape: forward, integrate,
/// warp, in-loop atlas and segmentation atlas, then the weighted terms.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    group: &GroupBatch<T>,
    net: &NetConfig,
    w: &LossWeights,
) -> Result<LossVars> {
    let dims = net.dims;
    let m = group.len();
    let x = g.constant(group.image_tensor());
    let v = groupnet::forward_graph(g, x, params, net);
    let u = g.integrate(v, dims, net.integration_steps);
    let warped = g.sample(x, u, dims);
    let t = g.group_reduce(warped, crate::autodiff::Statistic::Mean);
    let eps = T::lit(w.epsilon);
    let sim_i = g.lncc(warped, t, dims, w.lncc_window, eps);
    let sim = g.sum(sim_i);
    let reg_i = g.grad_penalty(u, dims);
    let reg = g.sum(reg_i);
    let with_seg: Vec<usize> = (0..m).filter(|&i| group.members()[i].seg.is_some()).collect();
    let seg = if with_seg.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let rows: Vec<Tensor<T>> = with_seg
            .iter()
            .map(|&i| group.members()[i].seg.as_ref().expect("filtered").to_tensor())
            .collect();
        let classes = rows[0].dim(1);
        if rows.iter().any(|r| r.dim(1) != classes) {
            return Err(Error::ShapeMismatch("members disagree on the number of structures".into()));
        }
        let segs = g.constant(Tensor::stack_rows(&rows.iter().collect::<Vec<_>>()));
        let us = g.select_rows(u, &with_seg);
        let ws = g.sample(segs, us, dims);
        let ws = g.normalize_channels(ws);
        let st = g.group_reduce(ws, crate::autodiff::Statistic::Mean);
        let st = g.normalize_channels(st);
        let d = g.soft_dice(ws, st, eps);
        g.sum(d)
    };
    let inv_m = T::one() / T::from_usize_lossy(m);
    let total = g.linear_combination(&[
        (sim, inv_m),
        (reg, inv_m * T::lit(w.lambda_reg)),
        (seg, inv_m * T::lit(w.gamma_seg)),
    ]);
    let sim = g.scale(sim, inv_m);
    let reg = g.scale(reg, inv_m);
    let seg = g.scale(seg, inv_m);
    Ok(LossVars { total, sim, reg, seg })
}

/// Loss components and parameter gradients (in parameter order).
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    group: &GroupBatch<T>,
    net: &NetConfig,
    w: &LossWeights,
) -> Result<(LossComponents, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, true);
    let lv = loss_graph(&mut g, &pv, group, net, w)?;
    let scalar = |v: Var| g.value(v).data()[0].to_f64_lossy();
    let comps = LossComponents {
        total: scalar(lv.total),
        sim: scalar(lv.sim),
        reg: scalar(lv.reg),
        seg: scalar(lv.seg),
    };
    let mut grads = g.backward(lv.total);
    let out = pv
        .vars
        .iter()
        .zip(params.entries())
        .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((comps, out))
}

/// Total loss plus the branch signature of the evaluation.
pub fn evaluate_loss_tracked<T: Real>(
    params: &ModelParams<T>,
    group: &GroupBatch<T>,
    net: &NetConfig,
    w: &LossWeights,
) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    g.track_branches();
    let pv = params.attach(&mut g, false);
    let lv = loss_graph(&mut g, &pv, group, net, w)?;
    let total = g.value(lv.total).data()[0].to_f64_lossy();
    Ok((total, g.branch_signature().expect("tracking enabled")))
}

/// Loss components only.
pub fn evaluate_loss<T: Real>(
    params: &ModelParams<T>,
    group: &GroupBatch<T>,
    net: &NetConfig,
    w: &LossWeights,
) -> Result<LossComponents> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let lv = loss_graph(&mut g, &pv, group, net, w)?;
    let scalar = |v: Var| g.value(v).data()[0].to_f64_lossy();
    Ok(LossComponents {
        total: scalar(lv.total),
        sim: scalar(lv.sim),
        reg: scalar(lv.reg),
        seg: scalar(lv.seg),
    })
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub total: f64,
    pub sim: f64,
    pub reg: f64,
    pub seg: f64,
    pub m: usize,
    pub synthetic_flag: u8,
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies update number `step` (1-based).
    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &[Tensor<f32>], cfg: &TrainConfig, step: u64) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let lr = (cfg.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (cfg.adam_epsilon * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((_, p), g), (m, v)) in params
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Mutable training state; everything random derives from `(seed, iteration)`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub synth: SynthConfig,
    pool: RealPool,
    params: ModelParams<f32>,
    adam: Adam,
    iteration: u64,
    log: Vec<LogRow>,
}

/// Serialized configuration document stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDocument {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Trainer {
    pub fn new(train: TrainConfig, net: NetConfig, synth: SynthConfig, pool: RealPool) -> Result<Self> {
        train.validate()?;
        net.validate()?;
        synth.validate()?;
        net.check_grid(&synth.grid)?;
        for m in &pool.members {
            synth.grid.check(m.image.grid(), "real training image")?;
        }
        let params = groupnet::init_params(&net, train.seed)?;
        let adam = Adam::new(&params);
        Ok(Self {
            train,
            net,
            synth,
            pool,
            params,
            adam,
            iteration: 0,
            log: Vec::new(),
        })
    }

    /// Restores a run from a checkpoint; the log continues from `log`.
    pub fn resume(ckpt: &Checkpoint, pool: RealPool, log: Vec<LogRow>) -> Result<Self> {
        let doc: TrainingDocument = serde_json::from_value(ckpt.config.clone())?;
        let mut t = Self::new(doc.train, doc.net, doc.synth, pool)?;
        ckpt.params.check_against(&t.net)?;
        t.params = ckpt.params.clone();
        let opt: BTreeMap<&str, &Tensor<f32>> = ckpt.optimizer.iter().map(|(n, x)| (n.as_str(), x)).collect();
        for (i, (name, p)) in t.params.entries().iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let x = opt.get(format!("{prefix}{name}").as_str()).ok_or_else(|| {
                    Error::ShapeMismatch(format!("checkpoint lacks optimizer state {prefix}{name}"))
                })?;
                if x.shape() != p.shape() {
                    return Err(Error::ShapeMismatch(format!("optimizer state {prefix}{name} has wrong shape")));
                }
                *slot = (*x).clone();
            }
        }
        t.iteration = ckpt.iteration;
        t.log = log.into_iter().filter(|r| r.iteration < ckpt.iteration).collect();
        Ok(t)
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Changes the total budget of a resumed run.
    pub fn set_iterations(&mut self, total: usize) -> Result<()> {
        if (total as u64) < self.iteration {
            return Err(Error::InvalidConfig(format!(
                "budget {total} is below the {} iterations already done",
                self.iteration
            )));
        }
        self.train.iterations = total;
        Ok(())
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn document(&self) -> TrainingDocument {
        TrainingDocument {
            net: self.net.clone(),
            train: self.train.clone(),
            synth: self.synth.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut optimizer = Vec::new();
        for (i, (name, _)) in self.params.entries().iter().enumerate() {
            optimizer.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            optimizer.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        Checkpoint {
            config: serde_json::to_value(self.document()).expect("config serializes"),
            params: self.params.clone(),
            optimizer,
            iteration: self.iteration,
        }
    }

    /// One optimization step. Parameters are left untouched on a non-finite loss.
    pub fn step(&mut self) -> Result<LogRow> {
        let (group, synthetic) = sample_group(&self.pool, &self.synth, &self.train, self.train.seed, self.iteration)?;
        let (comps, grads) = loss_and_grad(&self.params, &group, &self.net, &self.train.loss)?;
        let finite = comps.total.is_finite() && grads.iter().all(|g| g.all_finite());
        if !finite {
            return Err(Error::Diverged {
                iteration: self.iteration as usize,
                message: format!("non-finite loss or gradient (total = {})", comps.total),
            });
        }
        self.iteration += 1;
        self.adam.update(&mut self.params, &grads, &self.train, self.iteration);
        let row = LogRow {
            iteration: self.iteration - 1,
            total: comps.total,
            sim: comps.sim,
            reg: comps.reg,
            seg: comps.seg,
            m: group.len(),
            synthetic_flag: synthetic as u8,
        };
        self.log.push(row.clone());
        Ok(row)
    }
}

pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Plot(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Where [`train`] persists its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }
}

/// Runs `trainer` up to its configured iteration count. With an output
/// directory, checkpoints and the loss log are written at every interval and
/// at the end; a diverged step leaves the last checkpoint in place.
pub fn run(trainer: &mut Trainer, out: Option<&TrainOutput>, mut progress: impl FnMut(&LogRow)) -> Result<Checkpoint> {
    let total = trainer.train.iterations as u64;
    let interval = trainer.train.checkpoint_interval as u64;
    let persist = |t: &Trainer| -> Result<()> {
        if let Some(o) = out {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            tensorio::save_checkpoint(o.checkpoint_dir(), &t.checkpoint())?;
            write_log(o.log_path(), t.log())?;
        }
        Ok(())
    };
    while trainer.iteration < total {
        let row = trainer.step()?;
        progress(&row);
        if interval > 0 && trainer.iteration % interval == 0 && trainer.iteration < total {
            persist(trainer)?;
        }
    }
    persist(trainer)?;
    Ok(trainer.checkpoint())
}

/// Trains from scratch.
pub fn train(
    train: &TrainConfig,
    net: &NetConfig,
    synth: &SynthConfig,
    pool: RealPool,
    out: Option<&TrainOutput>,
) -> Result<Checkpoint> {
    let mut t = Trainer::new(train.clone(), net.clone(), synth.clone(), pool)?;
    run(&mut t, out, |_| {})
}

/// Parameters and configuration of a stored checkpoint.
pub fn load_model(dir: impl AsRef<Path>) -> Result<(ModelParams<f32>, TrainingDocument)> {
    let ckpt = tensorio::load_checkpoint(dir)?;
    let doc: TrainingDocument = serde_json::from_value(ckpt.config.clone())?;
    ckpt.params.check_against(&doc.net)?;
    Ok((ckpt.params, doc))
}

/// Setup of the finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSpec {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub extent: usize,
    pub m: usize,
    pub samples: usize,
    pub step: f64,
    /// Use `m` copies of one image (a zero-loss symmetric instance).
    pub identical: bool,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            net: NetConfig {
                enc_widths: vec![4],
                dec_widths: vec![4],
                post_widths: vec![4],
                svf_head_init_scale: 0.3,
                ..NetConfig::default()
            },
            loss: LossWeights {
                lncc_window: 5,
                ..LossWeights::default()
            },
            extent: 8,
            m: 2,
            samples: 64,
            step: 1e-3,
            identical: false,
        }
    }
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped because `θ ± h` crossed a non-differentiable point.
    pub skipped: usize,
    pub max_abs_gradient: f64,
}

/// Compares tape gradients of the group objective against central finite
/// differences in `f64` on randomly chosen parameters.
///
/// A central difference is only a valid reference when `θ - h`, `θ` and
/// `θ + h` lie on the same smooth piece of the objective, so coordinates whose
/// perturbations change any branch (activation sign, interpolation cell,
/// clamping, argmax) are skipped and another coordinate is drawn.
pub fn gradcheck(spec: &GradcheckSpec, seed: u64) -> Result<GradcheckReport> {
    let root = SeedPath::new(seed);
    let synth = SynthConfig {
        grid: crate::grid::Grid::cube(spec.net.dims, spec.extent)?,
        classes: 3,
        warp_amplitude: 1.0,
        warp_sigma: 1.5,
        bias_sigma: 2.0,
        ..SynthConfig::default()
    };
    let mut group: GroupBatch<f64> = synthgen::sample_synth_group(&synth, spec.m, root.child(1).seed())?;
    if spec.identical {
        let first = group.members()[0].clone();
        group = GroupBatch::new(vec![first; spec.m])?;
    }
    let params: ModelParams<f64> = groupnet::init_params(&spec.net, root.child(2).seed())?;
    let (_, grads) = loss_and_grad(&params, &group, &spec.net, &spec.loss)?;
    let (_, base_sig) = evaluate_loss_tracked(&params, &group, &spec.net, &spec.loss)?;
    let total: usize = params.scalar_count();
    let mut rng = root.child(3).rng();
    let order = index::sample(&mut rng, total, total);
    let offsets: Vec<usize> = params
        .entries()
        .iter()
        .scan(0, |acc, (_, t)| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let locate = |flat: usize| {
        let e = offsets.partition_point(|&o| o <= flat) - 1;
        (e, flat - offsets[e])
    };
    let eval = |e: usize, k: usize, delta: f64| {
        let mut p = params.clone();
        p.entries_mut()[e].1.data_mut()[k] += delta;
        evaluate_loss_tracked(&p, &group, &spec.net, &spec.loss)
    };
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        max_abs_gradient: 0.0,
    };
    for flat in order.iter() {
        if report.checked == spec.samples {
            break;
        }
        let (e, k) = locate(flat);
        let (fp, sp) = eval(e, k, spec.step)?;
        let (fm, sm) = eval(e, k, -spec.step)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * spec.step);
        let an = grads[e].data()[k];
        report.max_abs_gradient = report.max_abs_gradient.max(an.abs());
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Summary of a log tail, handy for progress reports.
pub fn mean_total(rows: &[LogRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
}

/// Stable 64-bit hex digest of the resolved configuration.
pub fn fingerprint(doc: &TrainingDocument) -> String {
    let text = json!(doc).to_string();
    let h = text
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| crate::seed::mix(h, b as u64));
    format!("{h:016x}")
}
