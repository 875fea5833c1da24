//! Metrics, the segmentation-transfer protocol, the ablation runner and the
//! hyperparameter sweep harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use plotters::prelude::*;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::atlas::{self, AtlasResult};
use crate::autodiff::Statistic;
use crate::error::{Error, Result};
use crate::fields;
use crate::groupnet::{self, GroupBatch, GroupMember, ModelParams, NetConfig};
use crate::scalar::Real;
use crate::seed::SeedPath;
use crate::synthgen::{self, SynthConfig};
use crate::tensorio::{DatasetManifest, Split};
use crate::trainer::{self, RealPool, TrainConfig, Trainer};
use crate::volume::ProbSeg;

/// Hard-label Dice per foreground structure and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    /// Structures `1..K`.
    pub per_structure: Vec<f64>,
    pub mean: f64,
}

/// Dice of the argmax labelings; structures absent from both maps score 1.
pub fn hard_dice<T: Real>(a: &ProbSeg<T>, b: &ProbSeg<T>) -> Result<DiceScores> {
    a.grid().check(b.grid(), "dice")?;
    if a.classes() != b.classes() {
        return Err(Error::ShapeMismatch(format!(
            "dice between {} and {} structures",
            a.classes(),
            b.classes()
        )));
    }
    let k = a.classes();
    let (la, lb) = (a.argmax(), b.argmax());
    let mut inter = vec![0usize; k];
    let mut ca = vec![0usize; k];
    let mut cb = vec![0usize; k];
    for (&x, &y) in la.iter().zip(&lb) {
        ca[x] += 1;
        cb[y] += 1;
        if x == y {
            inter[x] += 1;
        }
    }
    let per_structure: Vec<f64> = (1..k)
        .map(|s| {
            let denom = ca[s] + cb[s];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[s] as f64 / denom as f64
            }
        })
        .collect();
    let mean = per_structure.iter().sum::<f64>() / per_structure.len() as f64;
    Ok(DiceScores { per_structure, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_member: Vec<f64>,
    pub dice_mean: f64,
    /// Dice of the same protocol without registration (transfer only).
    pub baseline_dice_per_member: Option<Vec<f64>>,
    pub baseline_dice_mean: Option<f64>,
    pub folds_per_member: Vec<usize>,
    pub folds_total: usize,
    /// `folds_total / (m * voxels)`.
    pub fold_fraction: f64,
    pub centrality: f64,
    pub seconds: f64,
    pub m: usize,
    pub fingerprint: String,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn folds_of<T: Real>(us: &[crate::volume::DisplacementField<T>]) -> Result<(Vec<usize>, f64)> {
    let per: Vec<usize> = us.iter().map(fields::count_folds).collect::<Result<_>>()?;
    let voxels: usize = us.iter().map(|u| u.grid().voxels()).sum();
    let frac = per.iter().sum::<usize>() as f64 / voxels.max(1) as f64;
    Ok((per, frac))
}

/// Dice of every warped member segmentation against the atlas segmentation,
/// folds of every displacement and the group centrality.
pub fn evaluate_atlas<T: Real>(result: &AtlasResult<T>, group: &GroupBatch<T>) -> Result<MetricsReport> {
    if result.len() != group.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fields for {} members",
            result.len(),
            group.len()
        )));
    }
    let mut dice = Vec::new();
    if let Some(st) = &result.atlas_seg {
        for s in result.warped_segs.iter().flatten() {
            dice.push(hard_dice(s, st)?.mean);
        }
    }
    let (folds, frac) = folds_of(&result.displacements)?;
    Ok(MetricsReport {
        dice_mean: mean(&dice),
        dice_per_member: dice,
        baseline_dice_per_member: None,
        baseline_dice_mean: None,
        folds_total: folds.iter().sum(),
        folds_per_member: folds,
        fold_fraction: frac,
        centrality: fields::centrality(&result.displacements)?.to_f64_lossy(),
        seconds: result.seconds,
        m: group.len(),
        fingerprint: String::new(),
    })
}

/// Splits `0..m` into a seeded random half A (atlas) and the rest B (evaluation).
pub fn transfer_split(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut SeedPath::new(seed).child(0x5e9).rng());
    let half = m / 2;
    let mut a = idx[..half].to_vec();
    let mut b = idx[half..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Segmentation transfer: atlas and `seg[t]` from half A, B registered through
/// the `A ∪ B` forward pass, atlas labels pulled back through `exp(-v_b)` and
/// scored against B's ground truth. The baseline scores the unregistered mean
/// of A's segmentations against the same ground truth.
pub fn dice_transfer<T: Real>(
    params: &ModelParams<T>,
    config: &NetConfig,
    group: &GroupBatch<T>,
    seed: u64,
) -> Result<MetricsReport> {
    let m = group.len();
    if m < 2 {
        return Err(Error::NotEnoughData(format!("transfer needs m >= 2, got {m}")));
    }
    if group.members().iter().any(|x| x.seg.is_none()) {
        return Err(Error::NotEnoughData("every member needs a segmentation".into()));
    }
    let start = Instant::now();
    let (a_idx, b_idx) = transfer_split(m, seed);
    let a = group.subset(&a_idx)?;
    let atlas_a = atlas::build_atlas(params, config, &a)?;
    let seg_t = atlas_a.atlas_seg.clone().expect("members of A carry segmentations");

    // B's labels are withheld from everything the model sees.
    let mut blind: Vec<GroupMember<T>> = a.members().to_vec();
    for &i in &b_idx {
        let mut member = group.members()[i].clone();
        member.seg = None;
        blind.push(member);
    }
    let joint = GroupBatch::new(blind)?;
    let velocities = groupnet::forward(&joint, params, config)?;
    let displacements: Vec<_> = velocities
        .iter()
        .map(|v| fields::integrate_svf(v, config.integration_steps))
        .collect::<Result<_>>()?;

    let unregistered = atlas::build_atlas_seg(
        &a.members().iter().map(|x| x.seg.clone().expect("checked")).collect::<Vec<_>>(),
    )?;
    let mut dice = Vec::with_capacity(b_idx.len());
    let mut base = Vec::with_capacity(b_idx.len());
    for (k, &i) in b_idx.iter().enumerate() {
        let v = &velocities[a_idx.len() + k];
        let neg = crate::volume::VelocityField::new(v.grid().clone(), v.data().iter().map(|&x| -x).collect())?;
        let inverse = fields::integrate_svf(&neg, config.integration_steps)?;
        let moved = fields::warp_seg(&seg_t, &inverse)?;
        let truth = group.members()[i].seg.as_ref().expect("checked");
        dice.push(hard_dice(&moved, truth)?.mean);
        base.push(hard_dice(&unregistered, truth)?.mean);
    }
    let (folds, frac) = folds_of(&displacements)?;
    Ok(MetricsReport {
        dice_mean: mean(&dice),
        dice_per_member: dice,
        baseline_dice_mean: Some(mean(&base)),
        baseline_dice_per_member: Some(base),
        folds_total: folds.iter().sum(),
        folds_per_member: folds,
        fold_fraction: frac,
        centrality: fields::centrality(&displacements)?.to_f64_lossy(),
        seconds: start.elapsed().as_secs_f64(),
        m,
        fingerprint: String::new(),
    })
}

/// Training sources plus a fixed held-out evaluation set.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub synth: SynthConfig,
    pub pool: RealPool,
    pub heldout: Vec<GroupBatch<f32>>,
    pub transfer_seed: u64,
}

impl EvalSetup {
    /// Synthetic held-out groups drawn from streams disjoint from training.
    pub fn synthetic(synth: SynthConfig, groups: usize, m: usize, seed: u64) -> Result<Self> {
        let root = SeedPath::new(seed).child(0xe7a1);
        let heldout = (0..groups)
            .map(|g| synthgen::sample_synth_group(&synth, m, root.child(g as u64).seed()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            synth,
            pool: RealPool::default(),
            heldout,
            transfer_seed: seed,
        })
    }

    /// Training pool from the train split; held-out groups from the test
    /// split, one group per modality in manifest order, split into chunks of
    /// at most `max_group` members (chunks smaller than 2 are dropped).
    pub fn from_manifest(manifest: &DatasetManifest, synth: SynthConfig, max_group: usize, seed: u64) -> Result<Self> {
        if max_group < 2 {
            return Err(Error::InvalidConfig(format!("held-out groups need >= 2 members, got {max_group}")));
        }
        let pool = RealPool::from_manifest(manifest)?;
        let mut by_modality: Vec<(String, Vec<GroupMember<f32>>)> = Vec::new();
        for r in manifest.split(Split::Test).filter(|r| r.seg_path.is_some()) {
            let member = atlas::load_member(r)?;
            match by_modality.iter_mut().find(|(m, _)| *m == r.modality) {
                Some((_, ms)) => ms.push(member),
                None => by_modality.push((r.modality.clone(), vec![member])),
            }
        }
        let mut heldout = Vec::new();
        for (_, members) in by_modality {
            for chunk in members.chunks(max_group).filter(|c| c.len() >= 2) {
                heldout.push(GroupBatch::new(chunk.to_vec())?);
            }
        }
        if heldout.is_empty() {
            return Err(Error::NotEnoughData(
                "the test split holds no modality with two segmented subjects".into(),
            ));
        }
        Ok(Self {
            synth,
            pool,
            heldout,
            transfer_seed: seed,
        })
    }
}

/// Transfer metrics aggregated over the held-out groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutSummary {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub baseline_dice_mean: f64,
    pub folds_mean: f64,
    pub folds_std: f64,
    pub fold_fraction: f64,
    pub centrality_mean: f64,
    pub centrality_std: f64,
    pub reports: Vec<MetricsReport>,
}

pub fn evaluate_heldout(params: &ModelParams<f32>, net: &NetConfig, setup: &EvalSetup) -> Result<HeldoutSummary> {
    let reports = setup
        .heldout
        .iter()
        .enumerate()
        .map(|(g, group)| dice_transfer(params, net, group, mix_seed(setup.transfer_seed, g)))
        .collect::<Result<Vec<_>>>()?;
    let dice: Vec<f64> = reports.iter().map(|r| r.dice_mean).collect();
    let base: Vec<f64> = reports.iter().filter_map(|r| r.baseline_dice_mean).collect();
    let folds: Vec<f64> = reports.iter().map(|r| r.folds_total as f64).collect();
    let fracs: Vec<f64> = reports.iter().map(|r| r.fold_fraction).collect();
    let cent: Vec<f64> = reports.iter().map(|r| r.centrality).collect();
    Ok(HeldoutSummary {
        dice_mean: mean(&dice),
        dice_std: std_dev(&dice),
        baseline_dice_mean: mean(&base),
        folds_mean: mean(&folds),
        folds_std: std_dev(&folds),
        fold_fraction: mean(&fracs),
        centrality_mean: mean(&cent),
        centrality_std: std_dev(&cent),
        reports,
    })
}

fn mix_seed(seed: u64, i: usize) -> u64 {
    crate::seed::mix(seed, i as u64)
}

/// Model ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoclGbMean,
    ClNogb,
    ClGbVar,
    ClGbMax,
    ClGbMean,
    ClGbMeanDice,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoclGbMean,
        Variant::ClNogb,
        Variant::ClGbVar,
        Variant::ClGbMax,
        Variant::ClGbMean,
        Variant::ClGbMeanDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoclGbMean => "nocl_gb_mean",
            Variant::ClNogb => "cl_nogb",
            Variant::ClGbVar => "cl_gb_var",
            Variant::ClGbMax => "cl_gb_max",
            Variant::ClGbMean => "cl_gb_mean",
            Variant::ClGbMeanDice => "cl_gb_mean_dice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation variant {s:?}")))
    }

    /// Network and Dice weight of this variant on top of the given base.
    pub fn configure(self, net: &NetConfig, train: &TrainConfig) -> (NetConfig, TrainConfig) {
        let mut n = net.clone();
        let mut t = train.clone();
        t.loss.gamma_seg = 0.0;
        match self {
            Variant::NoclGbMean => {
                n.use_centrality = false;
                n.statistic = Statistic::Mean;
            }
            Variant::ClNogb => n.use_group_block = false,
            Variant::ClGbVar => n.statistic = Statistic::Var,
            Variant::ClGbMax => n.statistic = Statistic::Max,
            Variant::ClGbMean => n.statistic = Statistic::Mean,
            Variant::ClGbMeanDice => {
                n.statistic = Statistic::Mean;
                t.loss.gamma_seg = train.loss.gamma_seg;
            }
        }
        if self != Variant::NoclGbMean {
            n.use_centrality = true;
        }
        if self != Variant::ClNogb {
            n.use_group_block = true;
        }
        (n, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub baseline_dice: f64,
    pub folds_mean: f64,
    pub fold_fraction: f64,
    pub centrality_mean: f64,
    pub centrality_std: f64,
    pub train_seconds: f64,
}

fn train_and_evaluate(net: &NetConfig, train: &TrainConfig, setup: &EvalSetup, out: Option<&Path>) -> Result<(HeldoutSummary, f64)> {
    let start = Instant::now();
    let mut t = Trainer::new(train.clone(), net.clone(), setup.synth.clone(), setup.pool.clone())?;
    let output = out.map(|d| trainer::TrainOutput { dir: d.to_path_buf() });
    let ckpt = trainer::run(&mut t, output.as_ref(), |_| {})?;
    let secs = start.elapsed().as_secs_f64();
    Ok((evaluate_heldout(&ckpt.params, net, setup)?, secs))
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains every variant under the same seeds and budget and evaluates it on
/// the held-out set; writes `ablations.csv` under `out` when given.
pub fn run_ablations(
    variants: &[Variant],
    setup: &EvalSetup,
    net: &NetConfig,
    train: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let (n, t) = v.configure(net, train);
        let dir = out.map(|d| d.join(v.name()));
        let (s, secs) = train_and_evaluate(&n, &t, setup, dir.as_deref())?;
        rows.push(AblationRow {
            variant: v.name().into(),
            dice_mean: s.dice_mean,
            dice_std: s.dice_std,
            baseline_dice: s.baseline_dice_mean,
            folds_mean: s.folds_mean,
            fold_fraction: s.fold_fraction,
            centrality_mean: s.centrality_mean,
            centrality_std: s.centrality_std,
            train_seconds: secs,
        });
        if let Some(d) = out {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            write_rows(&d.join("ablations.csv"), &rows)?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaReg,
    GammaSeg,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaReg => "lambda_reg",
            SweepParam::GammaSeg => "gamma_seg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda_reg" | "lambda" => Ok(SweepParam::LambdaReg),
            "gamma_seg" | "gamma" => Ok(SweepParam::GammaSeg),
            _ => Err(Error::InvalidConfig(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl SweepSpec {
    /// `λ ∈ {0.25, 0.5, 1, 2, 4}` with `γ = 0`.
    pub fn lambda_preset(iterations: usize, seed: u64) -> Self {
        Self {
            param: SweepParam::LambdaReg,
            values: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            iterations,
            seed,
        }
    }

    /// `γ ∈ {0, 0.1, 0.3, 0.5, 0.7, 1}` with `λ = 1`.
    pub fn gamma_preset(iterations: usize, seed: u64) -> Self {
        Self {
            param: SweepParam::GammaSeg,
            values: vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
            iterations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::InvalidConfig("a sweep needs at least two values".into()));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid sweep values {:?}", self.values)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub folds_mean: f64,
    pub folds_std: f64,
    pub centrality_mean: f64,
    pub centrality_std: f64,
    /// Empty on success, otherwise the training/evaluation error.
    pub error: String,
}

/// Paths written by [`run_sweep`].
#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub rows: Vec<SweepRow>,
}

/// One training and held-out evaluation per value. The λ sweep fixes `γ = 0`
/// and the γ sweep fixes `λ = 1`. Failed points are recorded, not fatal.
pub fn run_sweep(
    spec: &SweepSpec,
    setup: &EvalSetup,
    net: &NetConfig,
    train: &TrainConfig,
    out: &Path,
) -> Result<SweepOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let mut t = train.clone();
        t.iterations = spec.iterations;
        t.seed = spec.seed;
        match spec.param {
            SweepParam::LambdaReg => {
                t.loss.lambda_reg = value;
                t.loss.gamma_seg = 0.0;
            }
            SweepParam::GammaSeg => {
                t.loss.gamma_seg = value;
                t.loss.lambda_reg = 1.0;
            }
        }
        let row = match train_and_evaluate(net, &t, setup, None) {
            Ok((s, _)) => SweepRow {
                value,
                dice_mean: s.dice_mean,
                dice_std: s.dice_std,
                folds_mean: s.folds_mean,
                folds_std: s.folds_std,
                centrality_mean: s.centrality_mean,
                centrality_std: s.centrality_std,
                error: String::new(),
            },
            Err(e) => SweepRow {
                value,
                dice_mean: f64::NAN,
                dice_std: f64::NAN,
                folds_mean: f64::NAN,
                folds_std: f64::NAN,
                centrality_mean: f64::NAN,
                centrality_std: f64::NAN,
                error: e.to_string(),
            },
        };
        rows.push(row);
    }
    let csv = out.join(format!("sweep_{}.csv", spec.param.name()));
    write_rows(&csv, &rows)?;
    let plots = plot_sweep(&csv, out)?;
    Ok(SweepOutput { csv, plots, rows })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Renders `<param>_{dice,folds,centrality}.svg` from a sweep CSV. The output
/// depends on the CSV contents only.
pub fn plot_sweep(csv_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows: Vec<SweepRow> = read_sweep_csv(csv_path)?
        .into_iter()
        .filter(|r| r.error.is_empty())
        .collect();
    let param = csv_path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("sweep_"))
        .unwrap_or("value")
        .to_owned();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics: [(&str, fn(&SweepRow) -> (f64, f64)); 3] = [
        ("dice", |r| (r.dice_mean, r.dice_std)),
        ("folds", |r| (r.folds_mean, r.folds_std)),
        ("centrality", |r| (r.centrality_mean, r.centrality_std)),
    ];
    let mut paths = Vec::new();
    for (name, get) in metrics {
        let path = out.join(format!("{param}_{name}.svg"));
        let pts: Vec<(f64, f64, f64)> = rows.iter().map(|r| {
            let (m, s) = get(r);
            (r.value, m, s)
        }).collect();
        draw_band_plot(&path, &param, name, &pts).map_err(|e| Error::Plot(e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).abs().max(1e-12);
    (lo - 0.08 * span, hi + 0.08 * span)
}

fn draw_band_plot(
    path: &Path,
    xlabel: &str,
    ylabel: &str,
    pts: &[(f64, f64, f64)],
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let xs = pts.iter().map(|p| p.0);
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let lo = pts.iter().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1 + p.2).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = padded(lo, hi);
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .caption(format!("{ylabel} vs {xlabel}"), ("sans-serif", 20))
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw()?;
    if !pts.is_empty() {
        let mut band: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1 + p.2)).collect();
        band.extend(pts.iter().rev().map(|p| (p.0, p.1 - p.2)));
        chart.draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2).filled())))?;
        chart.draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), &BLUE))?;
        chart.draw_series(pts.iter().map(|p| Circle::new((p.0, p.1), 3, BLUE.filled())))?;
    }
    root.present()?;
    Ok(())
}

/// Trains with `train` and evaluates on `setup` (convenience for callers that
/// only need the summary).
pub fn train_then_evaluate(net: &NetConfig, train: &TrainConfig, setup: &EvalSetup) -> Result<HeldoutSummary> {
    train_and_evaluate(net, train, setup, None).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn seg(labels: &[usize], k: usize) -> ProbSeg<f64> {
        ProbSeg::one_hot(Grid::new(&[4, 4]).unwrap(), k, labels).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = seg(&[0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 2);
        let b = seg(&[0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0], 2);
        assert_eq!(hard_dice(&a, &a).unwrap().mean, 1.0);
        assert_eq!(hard_dice(&a, &b).unwrap().mean, 0.5);
        let c = seg(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0], 2);
        assert_eq!(hard_dice(&a, &c).unwrap().mean, 0.0);
        // Structure 2 absent from both maps scores 1.
        let a3 = seg(&[0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 3);
        let b3 = seg(&[0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0], 3);
        assert_eq!(hard_dice(&a3, &b3).unwrap().per_structure, vec![0.5, 1.0]);
        assert!(hard_dice(&a, &a3).is_err());
    }

    #[test]
    fn split_halves() {
        let (a, b) = transfer_split(20, 3);
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        let mut all = [a.clone(), b].concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(transfer_split(20, 3).0, a);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("cl_gb_median").is_err());
        let (n, t) = Variant::NoclGbMean.configure(&NetConfig::default(), &TrainConfig::desk());
        assert!(!n.use_centrality);
        assert_eq!(t.loss.gamma_seg, 0.0);
        let (_, t) = Variant::ClGbMeanDice.configure(&NetConfig::default(), &TrainConfig::desk());
        assert_eq!(t.loss.gamma_seg, 0.5);
    }
}
