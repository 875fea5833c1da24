use std::fs;

use groupmorph::atlas::{build_atlas, build_atlas_seg};
use groupmorph::autodiff::Statistic;
use groupmorph::baseline_iter::{iterative_atlas, IterConfig};
use groupmorph::evalkit::{
    dice_transfer, evaluate_atlas, hard_dice, plot_sweep, read_sweep_csv, run_ablations, run_sweep, transfer_split, EvalSetup, SweepSpec,
    Variant,
};
use groupmorph::fields::{centrality, count_folds, integrate_svf, warp_seg};
use groupmorph::groupnet::{forward, init_params, GroupBatch, GroupMember, NetConfig};
use groupmorph::losses::LossWeights;
use groupmorph::synthgen::{sample_synth_group, SynthConfig};
use groupmorph::trainer::TrainConfig;
use groupmorph::{Grid, VelocityField};

fn synth32() -> SynthConfig {
    SynthConfig { grid: Grid::new(&[32, 32]).unwrap(), ..SynthConfig::default() }
}

fn small_net(head: f64) -> NetConfig {
    NetConfig { enc_widths: vec![8, 8], dec_widths: vec![8, 8], post_widths: vec![8], svf_head_init_scale: head, ..NetConfig::default() }
}

#[test]
fn identical_group_transfers_perfectly() {
    let net = NetConfig::default();
    let params = init_params::<f32>(&net, 0).unwrap();
    let one: GroupBatch<f32> = sample_synth_group(&SynthConfig::default(), 1, 21).unwrap();
    let group = GroupBatch::new(vec![one.members()[0].clone(); 6]).unwrap();
    let r = dice_transfer(&params, &net, &group, 3).unwrap();
    assert!((r.dice_mean - 1.0).abs() < 1e-3, "{}", r.dice_mean);
}

#[test]
fn untrained_model_scores_like_no_registration() {
    let net = NetConfig::default();
    let params = init_params::<f32>(&net, 0).unwrap();
    for seed in 0..3 {
        let group: GroupBatch<f32> = sample_synth_group(&SynthConfig::default(), 8, 30 + seed).unwrap();
        let r = dice_transfer(&params, &net, &group, seed).unwrap();
        let base = r.baseline_dice_mean.unwrap();
        assert!((r.dice_mean - base).abs() < 0.02, "{} vs {base}", r.dice_mean);
    }
}

#[test]
fn transfer_matches_a_manual_recomputation() {
    let net = small_net(1.0);
    let params = init_params::<f32>(&net, 5).unwrap();
    let group: GroupBatch<f32> = sample_synth_group(&synth32(), 7, 40).unwrap();
    let report = dice_transfer(&params, &net, &group, 9).unwrap();

    let (a, b) = transfer_split(7, 9);
    assert_eq!((a.len(), b.len()), (3, 4));
    let seg_t = build_atlas(&params, &net, &group.subset(&a).unwrap()).unwrap().atlas_seg.unwrap();
    let mut joint: Vec<GroupMember<f32>> = a.iter().map(|&i| group.members()[i].clone()).collect();
    joint.extend(b.iter().map(|&i| GroupMember::new(group.members()[i].image.clone())));
    let vs = forward(&GroupBatch::new(joint).unwrap(), &params, &net).unwrap();
    let us: Vec<_> = vs.iter().map(|v| integrate_svf(v, 7).unwrap()).collect();
    for (k, &i) in b.iter().enumerate() {
        let v = &vs[a.len() + k];
        let inv = integrate_svf(&VelocityField::new(v.grid().clone(), v.data().iter().map(|x| -x).collect()).unwrap(), 7).unwrap();
        let d = hard_dice(&warp_seg(&seg_t, &inv).unwrap(), group.members()[i].seg.as_ref().unwrap()).unwrap();
        assert!((d.mean - report.dice_per_member[k]).abs() < 1e-6);
    }
    let folds: usize = us.iter().map(|u| count_folds(u).unwrap()).sum();
    assert_eq!(folds, report.folds_total);
    assert!((centrality(&us).unwrap() as f64 - report.centrality).abs() < 1e-6);
}

#[test]
fn atlas_report_examples() {
    let net = small_net(1.0);
    let params = init_params::<f32>(&net, 6).unwrap();
    let one: GroupBatch<f32> = sample_synth_group(&synth32(), 1, 50).unwrap();
    let same = GroupBatch::new(vec![one.members()[0].clone(); 4]).unwrap();
    let r = evaluate_atlas(&build_atlas(&params, &net, &same).unwrap(), &same).unwrap();
    assert!(r.dice_per_member.iter().all(|&d| d == 1.0));
    assert_eq!(r.folds_total, 0);
    assert!(r.centrality <= 1e-8);

    // Zero fields: Dice against the plain mean of the segmentations.
    let group: GroupBatch<f32> = sample_synth_group(&synth32(), 4, 51).unwrap();
    let zero = iterative_atlas(&group, &IterConfig { outer_iterations: 0, lncc_window: 5, ..IterConfig::default() }).unwrap();
    let rep = evaluate_atlas(&zero, &group).unwrap();
    let segs: Vec<_> = group.members().iter().map(|m| m.seg.clone().unwrap()).collect();
    let mean_seg = build_atlas_seg(&segs).unwrap();
    for (i, s) in segs.iter().enumerate() {
        assert!((rep.dice_per_member[i] - hard_dice(s, &mean_seg).unwrap().mean).abs() < 1e-12);
    }

    // Any model: metrics agree with direct recomputation.
    let res = build_atlas(&params, &net, &group).unwrap();
    let rep = evaluate_atlas(&res, &group).unwrap();
    let st = res.atlas_seg.as_ref().unwrap();
    for (i, s) in res.warped_segs.iter().enumerate() {
        assert!((rep.dice_per_member[i] - hard_dice(s.as_ref().unwrap(), st).unwrap().mean).abs() < 1e-6);
        assert_eq!(rep.folds_per_member[i], count_folds(&res.displacements[i]).unwrap());
    }
    assert!((rep.centrality - centrality(&res.displacements).unwrap() as f64).abs() < 1e-6);
}

#[test]
fn plots_depend_only_on_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep_lambda_reg.csv");
    fs::write(
        &csv,
        "value,dice_mean,dice_std,folds_mean,folds_std,centrality_mean,centrality_std,error\n\
         0.25,0.71,0.02,14.0,3.0,0.001,0.0002,\n\
         1.0,0.74,0.03,4.5,1.0,0.0008,0.0001,\n\
         4.0,0.69,0.02,0.0,0.0,0.0005,0.0001,\n\
         8.0,0.0,0.0,0.0,0.0,0.0,0.0,diverged\n",
    )
    .unwrap();
    assert_eq!(read_sweep_csv(&csv).unwrap().len(), 4);
    let a = plot_sweep(&csv, &dir.path().join("a")).unwrap();
    let b = plot_sweep(&csv, &dir.path().join("b")).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert!(a[0].ends_with("lambda_reg_dice.svg"));
}

#[test]
fn variant_switches() {
    let (net, train) = (NetConfig::default(), TrainConfig::desk());
    for v in Variant::ALL {
        let (n, t) = v.configure(&net, &train);
        assert_eq!(n.use_centrality, v != Variant::NoclGbMean);
        assert_eq!(n.use_group_block, v != Variant::ClNogb);
        assert_eq!(t.loss.gamma_seg, if v == Variant::ClGbMeanDice { 0.5 } else { 0.0 });
        let stat = match v {
            Variant::ClGbVar => Statistic::Var,
            Variant::ClGbMax => Statistic::Max,
            _ => Statistic::Mean,
        };
        if v != Variant::ClNogb {
            assert_eq!(n.statistic, stat);
        }
    }
}

fn tiny() -> (EvalSetup, NetConfig, TrainConfig) {
    let synth = SynthConfig { grid: Grid::new(&[16, 16]).unwrap(), warp_sigma: 3.0, warp_amplitude: 1.0, bias_sigma: 4.0, ..SynthConfig::default() };
    let setup = EvalSetup::synthetic(synth, 2, 4, 0).unwrap();
    let net = NetConfig { enc_widths: vec![4, 4], dec_widths: vec![4, 4], post_widths: vec![4], ..NetConfig::default() };
    let train = TrainConfig { iterations: 2, checkpoint_interval: 0, loss: LossWeights { lncc_window: 5, ..LossWeights::default() }, ..TrainConfig::desk() };
    (setup, net, train)
}

#[test]
fn single_variant_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let (setup, net, train) = tiny();
    let rows = run_ablations(&[Variant::ClGbMax], &setup, &net, &train, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].variant, "cl_gb_max");
    let text = fs::read_to_string(dir.path().join("ablations.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn lambda_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let (setup, net, train) = tiny();
    let out = run_sweep(&SweepSpec::lambda_preset(2, 0), &setup, &net, &train, dir.path()).unwrap();
    assert_eq!(read_sweep_csv(&out.csv).unwrap().len(), 5);
    assert_eq!(out.plots.len(), 3);
    assert!(out.plots.iter().all(|p| p.exists()));
    let bad = SweepSpec { values: vec![1.0], ..SweepSpec::lambda_preset(2, 0) };
    assert!(run_sweep(&bad, &setup, &net, &train, dir.path()).is_err());
}
