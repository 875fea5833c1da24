//! End-to-end acceptance checks. Runs every criterion in sequence (so the
//! timings are not distorted by other tests), prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,4,10` restricts the run to the listed criteria.

mod common;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{gaussian_blob, mask_dice, max_interior_diff, rk4_flow, smooth_velocity};
use groupmorph::atlas::build_atlas;
use groupmorph::autodiff::Statistic;
use groupmorph::baseline_iter::{iterative_atlas, objective_trace, IterConfig};
use groupmorph::evalkit::{evaluate_heldout, plot_sweep, run_ablations, run_sweep, EvalSetup, SweepSpec, Variant};
use groupmorph::fields::{centrality, compose, count_folds, integrate_svf, velocity_centrality};
use groupmorph::groupnet::{forward, init_params, GroupBatch, NetConfig};
use groupmorph::synthgen::{sample_synth_group, SynthConfig};
use groupmorph::tensorio::{decode_tensor, encode_tensor, load_manifest, read_tensor, save_checkpoint, write_tensor, write_volume, TensorMeta};
use groupmorph::trainer::{self, gradcheck, load_model, GradcheckSpec, RealPool, TrainConfig, Trainer};
use groupmorph::{Error, Grid, ImageVolume, Tensor, VelocityField};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn hot_net() -> NetConfig {
    // Large head initialization so untrained velocities are O(1) voxels.
    NetConfig {
        svf_head_init_scale: 1.0,
        ..NetConfig::default()
    }
}

fn heldout_setup() -> EvalSetup {
    EvalSetup::synthetic(SynthConfig::default(), 10, 20, 1).unwrap()
}

fn progress(label: &str) -> impl FnMut(&trainer::LogRow) + '_ {
    move |row| {
        if (row.iteration + 1) % 500 == 0 {
            println!("    [{label}] iteration {} loss {:.4}", row.iteration + 1, row.total);
            std::io::stdout().flush().ok();
        }
    }
}

fn c1_centrality() -> Outcome {
    let start = Instant::now();
    let net = hot_net();
    let synth = SynthConfig::default();
    let mut rng = common::rng(1);
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for trial in 0..100u64 {
        let m = rng.random_range(1..=12);
        let params = init_params::<f32>(&net, 1000 + trial).unwrap();
        let group: GroupBatch<f32> = sample_synth_group(&synth, m, 2000 + trial).unwrap();
        let vs = forward(&group, &params, &net).unwrap();
        let n = vs[0].data().len();
        for i in 0..n {
            let mean = vs.iter().map(|v| v.data()[i] as f64).sum::<f64>() / m as f64;
            worst = worst.max(mean.abs());
        }
        largest = largest.max(vs.iter().map(|v| v.max_abs() as f64).fold(0.0, f64::max));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 60.0,
        format!("max |mean v| = {worst:.2e} (largest |v| {largest:.2}), {secs:.1} s"),
    )
}

fn c2_permutation() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let mut rng = common::rng(2);
    let stats = [Statistic::Mean, Statistic::Var, Statistic::Max];
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let net = NetConfig {
            statistic: stats[trial as usize % 3],
            ..hot_net()
        };
        let m = rng.random_range(2..=8);
        let params = init_params::<f32>(&net, 3000 + trial).unwrap();
        let group: GroupBatch<f32> = sample_synth_group(&synth, m, 4000 + trial).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let base = forward(&group, &params, &net).unwrap();
        let permuted = forward(&group.permuted(&perm).unwrap(), &params, &net).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in permuted[i].data().iter().zip(base[p].data()) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-5 && secs < 60.0, format!("max deviation {worst:.2e}, {secs:.1} s"))
}

fn c3_group_size() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(TrainConfig::desk(), hot_net(), SynthConfig::default(), RealPool::default()).unwrap();
    save_checkpoint(dir.path().join("model"), &t.checkpoint()).unwrap();
    let (params, doc) = load_model(dir.path().join("model")).unwrap();
    let reference = doc.net.parameter_index();
    let synth = SynthConfig::default();
    let mut ok = params.index() == reference;
    for m in 1..=12usize {
        let group: GroupBatch<f32> = sample_synth_group(&synth, m, 5000 + m as u64).unwrap();
        match build_atlas(&params, &doc.net, &group) {
            Ok(r) => ok &= r.len() == m && r.atlas.data().iter().all(|x| x.is_finite()),
            Err(_) => ok = false,
        }
        ok &= params.index() == reference;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ok && secs < 60.0,
        format!("{} parameter tensors, m = 1..12 evaluated, {secs:.1} s", reference.len()),
    )
}

fn c4_integrator() -> Outcome {
    let start = Instant::now();
    let (mut err, mut res) = (0.0f64, 0.0f64);
    let mut over = Vec::new();
    for i in 0..20u64 {
        let amp = (i + 1) as f64 / 20.0;
        let v = smooth_velocity(16, 3.0, amp, i);
        let u = integrate_svf(&v, 7).unwrap();
        let e = max_interior_diff(u.data(), &rk4_flow(&v, 256), 16, 16, 2);
        if e >= 1e-3 {
            over.push(format!("{amp:.2}:{e:.1e}"));
        }
        err = err.max(e);
        let neg = VelocityField::new(v.grid().clone(), v.data().iter().map(|x| -x).collect()).unwrap();
        let r = compose(&integrate_svf(&neg, 7).unwrap(), &u).unwrap();
        res = res.max(max_interior_diff(r.data(), &vec![0.0; r.data().len()], 16, 16, 2));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err < 1e-3 && res < 1e-2 && secs < 120.0,
        format!(
            "max RK4 error {err:.2e} (fields over 1e-3 by amplitude: [{}]), max inverse residual {res:.2e}, {secs:.1} s",
            over.join(", ")
        ),
    )
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let spec = GradcheckSpec::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..5 {
        let r = gradcheck(&spec, seed).unwrap();
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && checked > 0 && secs < 300.0,
        format!("max relative error {worst:.2e} over {checked} coordinates, {secs:.1} s"),
    )
}

fn c6_training() -> Outcome {
    let net = NetConfig::default();
    let train = TrainConfig::desk();
    let start = Instant::now();
    let mut t = Trainer::new(train, net.clone(), SynthConfig::default(), RealPool::default()).unwrap();
    let ckpt = trainer::run(&mut t, None, progress("train")).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let s = evaluate_heldout(&ckpt.params, &net, &heldout_setup()).unwrap();
    let gain = s.dice_mean - s.baseline_dice_mean;
    outcome(
        train_secs <= 3600.0 && gain >= 0.15 && s.fold_fraction <= 1e-3 && s.centrality_mean <= 1e-4,
        format!(
            "training {:.1} min; transfer Dice {:.4} vs baseline {:.4} (gain {gain:+.4}); folds {:.2e} of voxels; centrality {:.2e}",
            train_secs / 60.0,
            s.dice_mean,
            s.baseline_dice_mean,
            s.fold_fraction,
            s.centrality_mean
        ),
    )
}

fn c7_ablations() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig {
        iterations: 1500,
        ..TrainConfig::desk()
    };
    let rows = run_ablations(&Variant::ALL, &heldout_setup(), &NetConfig::default(), &train, Some(dir.path())).unwrap();
    let row = |v: Variant| rows.iter().find(|r| r.variant == v.name()).unwrap();
    for r in &rows {
        println!(
            "    {:<16} dice {:.4} (base {:.4}) folds {:.2e} centrality {:.2e} train {:.0} s",
            r.variant, r.dice_mean, r.baseline_dice, r.fold_fraction, r.centrality_mean, r.train_seconds
        );
    }
    let (nocl, cl) = (row(Variant::NoclGbMean), row(Variant::ClGbMean));
    let a = nocl.centrality_mean >= 100.0 * cl.centrality_mean;
    let b = cl.dice_mean > row(Variant::ClNogb).dice_mean;
    let c = row(Variant::ClGbMeanDice).dice_mean > cl.dice_mean;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        a && b && c && secs <= 6.0 * 3600.0,
        format!(
            "(a) centrality ratio {:.1}x {}; (b) GB {:.4} vs no-GB {:.4} {}; (c) γ=0.5 {:.4} vs γ=0 {:.4} {}; {:.1} min",
            nocl.centrality_mean / cl.centrality_mean,
            pass_word(a),
            cl.dice_mean,
            row(Variant::ClNogb).dice_mean,
            pass_word(b),
            row(Variant::ClGbMeanDice).dice_mean,
            cl.dice_mean,
            pass_word(c),
            secs / 60.0
        ),
    )
}

fn same_files(a: &[std::path::PathBuf], b: &[std::path::PathBuf]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.file_name() == y.file_name() && std::fs::read(x).unwrap() == std::fs::read(y).unwrap()
        })
}

fn c8_sweep() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::lambda_preset(1500, 0);
    let out = run_sweep(&spec, &heldout_setup(), &NetConfig::default(), &TrainConfig::desk(), dir.path()).unwrap();
    let folds = |lambda: f64| out.rows.iter().find(|r| r.value == lambda).map(|r| r.folds_mean);
    for r in &out.rows {
        println!(
            "    λ={:<5} dice {:.4} folds {:.1} centrality {:.2e}",
            r.value, r.dice_mean, r.folds_mean, r.centrality_mean
        );
    }
    let complete = out.rows.len() == spec.values.len() && out.rows.iter().all(|r| r.error.is_empty());
    let trend = matches!((folds(4.0), folds(0.25)), (Some(hi), Some(lo)) if hi <= lo);
    let again = plot_sweep(&out.csv, &dir.path().join("replot")).unwrap();
    let identical = !again.is_empty() && same_files(&out.plots, &again);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        complete && trend && identical && secs <= 3.0 * 3600.0,
        format!(
            "{} rows; folds λ=4 {:?} vs λ=0.25 {:?}; {} plots regenerate identically: {identical}; {:.1} min",
            out.rows.len(),
            folds(4.0),
            folds(0.25),
            again.len(),
            secs / 60.0
        ),
    )
}

fn c9_iterative() -> Outcome {
    let start = Instant::now();
    let grid = Grid::new(&[64, 64]).unwrap();
    let images: Vec<ImageVolume<f32>> = [29.0, 35.0]
        .iter()
        .map(|&cx| gaussian_blob(&grid, 32.0, cx, 8.0).cast())
        .collect();
    let group = GroupBatch::from_images(images).unwrap();
    let r = iterative_atlas(&group, &IterConfig::default()).unwrap();
    let trace = objective_trace(&r);
    let monotone = trace.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-6);
    let masks: Vec<Vec<bool>> = r.warped.iter().map(|w| w.data().iter().map(|&x| x > 0.5).collect()).collect();
    let dice = mask_dice(&masks[0], &masks[1]);
    let folds: usize = r.displacements.iter().map(|u| count_folds(u).unwrap()).sum();
    let cent = centrality(&r.displacements).unwrap() as f64;
    let vcent = velocity_centrality(&r.velocities).unwrap() as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        monotone && dice >= 0.9 && folds == 0 && cent <= 1e-4 && secs < 300.0,
        format!(
            "trace non-increasing: {monotone} ({} entries, {:.4} -> {:.4}); Dice {dice:.4}; folds {folds}; centrality {cent:.2e} (velocity mean {vcent:.1e}); {secs:.1} s",
            trace.len(),
            trace.first().map_or(f64::NAN, |t| t.1),
            trace.last().map_or(f64::NAN, |t| t.1)
        ),
    )
}

fn c10_singleton() -> Outcome {
    let net = hot_net();
    let params = init_params::<f32>(&net, 10).unwrap();
    let group: GroupBatch<f32> = sample_synth_group(&SynthConfig::default(), 1, 10).unwrap();
    let start = Instant::now();
    let r = build_atlas(&params, &net, &group).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let input = group.members()[0].image.data();
    let bitwise = r.atlas.data().iter().zip(input).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(bitwise && secs < 1.0, format!("bitwise identical: {bitwise}, {:.1} ms", secs * 1e3))
}

fn random_tensor(rng: &mut impl Rng) -> Tensor<f32> {
    let rank = rng.random_range(1..=5);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = f32::from_bits(rng.random());
            if x.is_finite() {
                break x;
            }
        })
        .collect();
    Tensor::from_vec(&shape, data)
}

fn manifest_error(dir: &Path, name: &str, lines: &[&str]) -> Option<Error> {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n")).unwrap();
    load_manifest(&path).err()
}

fn c11_io() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(11);
    let mut exact = 0;
    for i in 0..1000 {
        let t = random_tensor(&mut rng);
        let meta = TensorMeta {
            channels: Some(t.dim(0)),
            ..TensorMeta::default()
        };
        let (back, back_meta) = if i % 10 == 0 {
            let path = dir.path().join(format!("t{i}.tensor"));
            write_tensor(&path, &t, &meta).unwrap();
            read_tensor(&path).unwrap()
        } else {
            decode_tensor(&encode_tensor(&t, &meta).unwrap(), Path::new("memory")).unwrap()
        };
        let same = back.shape() == t.shape()
            && back_meta == meta
            && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += same as usize;
    }

    let grid = Grid::new(&[4, 4]).unwrap();
    write_volume(dir.path().join("a.tensor"), &ImageVolume::<f32>::new(grid, vec![0.5; 16]).unwrap().into_volume(), Default::default())
        .unwrap();
    let rec = |id: &str, split: &str| {
        format!(r#"{{"id":"{id}","image_path":"a.tensor","modality":"t1","split":"{split}"}}"#)
    };
    let (good_a, good_b) = (rec("s1", "train"), rec("s2", "test"));
    let valid = load_manifest({
        let p = dir.path().join("ok.jsonl");
        std::fs::write(&p, format!("{good_a}\n{good_b}\n")).unwrap();
        p
    })
    .is_ok();
    let duplicate = manifest_error(dir.path(), "dup.jsonl", &[&good_a, &rec("s1", "val")]);
    let missing = manifest_error(
        dir.path(),
        "missing.jsonl",
        &[&good_a, r#"{"id":"s3","image_path":"a.tensor","split":"train"}"#],
    );
    let split = manifest_error(dir.path(), "split.jsonl", &[&good_a, &rec("s4", "holdout")]);
    let rejected = matches!(duplicate, Some(Error::DuplicateId(_)))
        && matches!(missing, Some(Error::MissingField { line: 2, field: "modality" }))
        && matches!(split, Some(Error::UnknownSplit { line: 2, .. }));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact == 1000 && valid && rejected && secs < 60.0,
        format!("{exact}/1000 bitwise round-trips; valid manifest accepted: {valid}; malformed cases rejected: {rejected}; {secs:.1} s"),
    )
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "centrality exactness", c1_centrality),
    (2, "permutation equivariance", c2_permutation),
    (3, "group-size flexibility", c3_group_size),
    (4, "integrator fidelity", c4_integrator),
    (5, "gradient correctness", c5_gradients),
    (6, "end-to-end toy training", c6_training),
    (7, "ablation trends", c7_ablations),
    (8, "sweep harness", c8_sweep),
    (9, "iterative baseline", c9_iterative),
    (10, "singleton identity", c10_singleton),
    (11, "I/O round-trips", c11_io),
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (n, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        println!("criterion {n:>2} ({name}) running");
        std::io::stdout().flush().ok();
        let line = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(o) => {
                if !o.pass {
                    failed.push(n);
                }
                format!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail)
            }
            Err(e) => {
                failed.push(n);
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("criterion {n:>2} FAIL: {name}: panicked: {msg}")
            }
        };
        println!("{line}");
        std::io::stdout().flush().ok();
        lines.push(line);
    }
    println!("\nsummary");
    for l in &lines {
        println!("{l}");
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
