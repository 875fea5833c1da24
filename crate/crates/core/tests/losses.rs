mod common;

use groupmorph::losses::{grad_penalty, group_loss, lncc_similarity, lncc_similarity_eps, soft_dice_loss, LossMember, LossWeights};
use groupmorph::{fields, DisplacementField, Grid, ImageVolume, ProbSeg};
use proptest::prelude::*;
use rand::Rng;

fn random_image(n: usize, seed: u64) -> ImageVolume<f64> {
    let mut r = common::rng(seed);
    ImageVolume::new(Grid::new(&[n, n]).unwrap(), (0..n * n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn random_field(n: usize, scale: f64, seed: u64) -> DisplacementField<f64> {
    let mut r = common::rng(seed);
    DisplacementField::new(
        Grid::new(&[n, n]).unwrap(),
        (0..2 * n * n).map(|_| scale * (r.random::<f64>() - 0.5)).collect(),
    )
    .unwrap()
}

fn random_seg(n: usize, k: usize, seed: u64) -> ProbSeg<f64> {
    let mut r = common::rng(seed);
    let labels: Vec<usize> = (0..n * n).map(|_| r.random_range(0..k)).collect();
    ProbSeg::one_hot(Grid::new(&[n, n]).unwrap(), k, &labels).unwrap()
}

/// Squared correlation over every clipped window, straight from the definition.
fn brute_lncc(a: &[f64], b: &[f64], n: usize, window: usize, eps: f64) -> f64 {
    let r = (window / 2) as i64;
    let mut total = 0.0;
    for y in 0..n as i64 {
        for x in 0..n as i64 {
            let mut pts = Vec::new();
            for yy in (y - r).max(0)..=(y + r).min(n as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(n as i64 - 1) {
                    pts.push((yy * n as i64 + xx) as usize);
                }
            }
            let c = pts.len() as f64;
            let ma = pts.iter().map(|&p| a[p]).sum::<f64>() / c;
            let mb = pts.iter().map(|&p| b[p]).sum::<f64>() / c;
            let cov: f64 = pts.iter().map(|&p| (a[p] - ma) * (b[p] - mb)).sum();
            let va: f64 = pts.iter().map(|&p| (a[p] - ma).powi(2)).sum();
            let vb: f64 = pts.iter().map(|&p| (b[p] - mb).powi(2)).sum();
            total += cov * cov / (va * vb + eps);
        }
    }
    1.0 - total / (n * n) as f64
}

fn brute_grad_penalty(u: &DisplacementField<f64>) -> f64 {
    let e = u.grid().extent();
    let (h, w) = (e[0], e[1]);
    let d = u.data();
    let (mut sy, mut sx) = (0.0, 0.0);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let p = c * h * w + y * w + x;
                if y + 1 < h {
                    sy += (d[p + w] - d[p]).powi(2);
                }
                if x + 1 < w {
                    sx += (d[p + 1] - d[p]).powi(2);
                }
            }
        }
    }
    0.5 * (sy / (2 * (h - 1) * w) as f64 + sx / (2 * h * (w - 1)) as f64)
}

#[test]
fn lncc_matches_windowed_correlation() {
    for seed in 0..5 {
        let (a, b) = (random_image(12, seed), random_image(12, 100 + seed));
        let got: f64 = lncc_similarity(&a, &b, 5).unwrap();
        let want = brute_lncc(a.data(), b.data(), 12, 5, 1e-5);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        let got_eps: f64 = lncc_similarity_eps(&a, &b, 3, 0.1).unwrap();
        assert!((got_eps - brute_lncc(a.data(), b.data(), 12, 3, 0.1)).abs() < 1e-4);
    }
}

#[test]
fn grad_penalty_matches_forward_differences() {
    for seed in 0..5 {
        let u = random_field(9, 3.0, seed);
        let got: f64 = grad_penalty(&u);
        assert!((got - brute_grad_penalty(&u)).abs() < 1e-12);
    }
}

#[test]
fn identical_images_zero_fields_cost_nothing() {
    let img = random_image(12, 3);
    let members: Vec<LossMember<f64>> = (0..3).map(|_| LossMember { image: &img, seg: None }).collect();
    let zero = vec![DisplacementField::zeros(img.grid().clone()); 3];
    let w = LossWeights { gamma_seg: 0.0, lncc_window: 5, ..LossWeights::default() };
    let c = group_loss(&img, None, &members, &zero, &w).unwrap();
    assert!(c.total <= 1e-3, "{}", c.total);
}

#[test]
fn group_loss_recomposes_from_separate_terms() {
    let n = 12;
    let t = random_image(n, 1);
    let seg_t = random_seg(n, 3, 2);
    let images: Vec<_> = (0..3).map(|i| random_image(n, 10 + i)).collect();
    let segs: Vec<_> = (0..3).map(|i| random_seg(n, 3, 20 + i)).collect();
    let us: Vec<_> = (0..3).map(|i| random_field(n, 2.0, 30 + i)).collect();
    let w = LossWeights { lambda_reg: 0.7, gamma_seg: 0.3, lncc_window: 5, ..LossWeights::default() };
    // The last member has no segmentation and contributes no Dice term.
    let members: Vec<LossMember<f64>> = (0..3)
        .map(|i| LossMember { image: &images[i], seg: (i < 2).then(|| &segs[i]) })
        .collect();
    let c = group_loss(&t, Some(&seg_t), &members, &us, &w).unwrap();

    let mut sim = 0.0;
    let mut reg = 0.0;
    let mut dice = 0.0;
    for i in 0..3 {
        let warped = fields::warp_image(&images[i], &us[i]).unwrap();
        sim += lncc_similarity(&t, &warped, 5).unwrap() / 3.0;
        reg += brute_grad_penalty(&us[i]) / 3.0;
        if i < 2 {
            dice += soft_dice_loss(&seg_t, &fields::warp_seg(&segs[i], &us[i]).unwrap()).unwrap() / 3.0;
        }
    }
    let total = sim + 0.7 * reg + 0.3 * dice;
    assert!((c.total - total).abs() < 1e-6, "{} vs {total}", c.total);
    assert!((c.sim - sim).abs() < 1e-6);
    assert!((c.reg - reg).abs() < 1e-6);
    assert!((c.seg - dice).abs() < 1e-6);

    let plain = LossWeights { lambda_reg: 0.0, gamma_seg: 0.0, ..w };
    let c0 = group_loss(&t, Some(&seg_t), &members, &us, &plain).unwrap();
    assert_eq!(c0.total, c0.sim);
}

#[test]
fn soft_dice_half_overlap() {
    let grid = Grid::new(&[4, 4]).unwrap();
    let mut a = vec![0usize; 16];
    let mut b = vec![0usize; 16];
    for p in [0, 1, 2, 3] {
        a[p] = 1;
    }
    for p in [2, 3, 4, 5] {
        b[p] = 1;
    }
    let p = ProbSeg::<f64>::one_hot(grid.clone(), 2, &a).unwrap();
    let q = ProbSeg::<f64>::one_hot(grid, 2, &b).unwrap();
    assert!((soft_dice_loss(&p, &q).unwrap() - 0.5).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lncc_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_image(10, s1), random_image(10, s2));
        let ab: f64 = lncc_similarity(&a, &b, 3).unwrap();
        let ba: f64 = lncc_similarity(&b, &a, 3).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn group_loss_ignores_member_order(seed in any::<u64>(), rot in 1usize..3) {
        let t = random_image(10, seed);
        let images: Vec<_> = (0..3).map(|i| random_image(10, seed ^ (i + 1))).collect();
        let us: Vec<_> = (0..3).map(|i| random_field(10, 2.0, seed ^ (i + 7))).collect();
        let w = LossWeights { lncc_window: 3, ..LossWeights::default() };
        let order: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let m1: Vec<LossMember<f64>> = images.iter().map(|x| LossMember { image: x, seg: None }).collect();
        let m2: Vec<LossMember<f64>> = order.iter().map(|&i| LossMember { image: &images[i], seg: None }).collect();
        let u2: Vec<_> = order.iter().map(|&i| us[i].clone()).collect();
        let a = group_loss(&t, None, &m1, &us, &w).unwrap();
        let b = group_loss(&t, None, &m2, &u2, &w).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn regularization_component_grows_with_lambda(seed in any::<u64>(), l1 in 0.0f64..4.0, dl in 0.0f64..4.0) {
        let t = random_image(10, seed);
        let x = random_image(10, seed.wrapping_add(1));
        let u = vec![random_field(10, 2.0, seed.wrapping_add(2))];
        let m = [LossMember { image: &x, seg: None }];
        let lo = group_loss(&t, None, &m, &u, &LossWeights { lambda_reg: l1, lncc_window: 3, ..LossWeights::default() }).unwrap();
        let hi = group_loss(&t, None, &m, &u, &LossWeights { lambda_reg: l1 + dl, lncc_window: 3, ..LossWeights::default() }).unwrap();
        prop_assert!(hi.total >= lo.total);
        prop_assert_eq!(hi.reg, lo.reg);
    }
}
