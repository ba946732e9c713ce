use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check, Tape};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

#[test]
fn wta_examples() {
    assert_eq!(wta(&[3.0, 1.0, 2.0]).unwrap(), (1.0, 1));
    assert_eq!(wta(&[5.0]).unwrap(), (5.0, 0));
    assert_eq!(wta(&[2.0, 2.0]).unwrap(), (2.0, 0));
    assert!(wta(&[]).is_err());

    for (v, mask) in [(vec![3.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]), (vec![2.0, 2.0], vec![1.0, 0.0])] {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(v).unwrap());
        let g = tape.backward(tape::wta(x).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &mask[..]);
    }
}

#[test]
fn mask_loss_examples() {
    let w = LossWeights::default();
    let gt = Tensor::full(&[4, 4], 1.0).unwrap();
    assert_eq!(mask_loss(&gt, &gt, &gt, &w).unwrap(), 0.0);
    assert_eq!(mask_loss(&gt, &Tensor::zeros(&[4, 4]).unwrap(), &gt, &w).unwrap(), 1.0);
    assert!(mask_loss(&gt, &Tensor::zeros(&[4, 5]).unwrap(), &gt, &w).is_err());
}

#[test]
fn mask_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = LossWeights {
        lambda_s: 0.7,
        lambda_p: 1.3,
        ..LossWeights::default()
    };
    for _ in 0..20 {
        let (gt, s, p) = (random(&mut rng, &[9, 7], 0.0, 1.0), random(&mut rng, &[9, 7], 0.0, 1.0), random(&mut rng, &[9, 7], 0.0, 1.0));
        let (mut es, mut ep) = (0.0, 0.0);
        for r in 0..9 {
            for c in 0..7 {
                let i = r * 7 + c;
                es += (gt.data()[i] - s.data()[i]).powi(2);
                ep += (gt.data()[i] - p.data()[i]).powi(2);
            }
        }
        let expect = 0.7 * es / 63.0 + 1.3 * ep / 63.0;
        assert!((mask_loss(&gt, &s, &p, &w).unwrap() - expect).abs() < 1e-12);
        let tape = Tape::new();
        let v = tape::mask_loss(tape.constant(gt), tape.constant(s), Some(tape.constant(p)), &w).unwrap();
        assert!((v.item().unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn lsgan_examples() {
    assert_eq!(lsgan_discriminator_loss(&[1.0, 1.0], &[vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap(), 0.0);
    assert_eq!(lsgan_discriminator_loss(&[0.0], &[vec![1.0]]).unwrap(), 1.0);
    assert!((lsgan_discriminator_loss(&[1.0], &[vec![0.5, -0.1]]).unwrap() - 0.005).abs() < 1e-15);
    assert!(lsgan_discriminator_loss(&[], &[vec![1.0]]).is_err());
    assert!(lsgan_discriminator_loss(&[1.0], &[]).is_err());

    assert_eq!(lsgan_generator_wta_loss(&[vec![1.0, 1.0]]).unwrap(), 0.0);
    assert_eq!(lsgan_generator_wta_loss(&[vec![0.0, 2.0]]).unwrap(), 0.5);
    assert!((lsgan_generator_wta_loss(&[vec![0.9, 0.1]]).unwrap() - 0.005).abs() < 1e-15);
    assert!(lsgan_generator_wta_loss(&[]).is_err());
}

#[test]
fn lsgan_tape_matches_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let real = random(&mut rng, &[5], -1.0, 2.0);
        let fake = random(&mut rng, &[5, 3], -1.0, 2.0);
        let tape = Tape::new();
        let d = tape::lsgan_discriminator_loss(tape.constant(real.clone()), tape.constant(fake.clone())).unwrap();
        let g = tape::lsgan_generator_wta_loss(tape.constant(fake.clone())).unwrap();
        assert!((d.item().unwrap() - lsgan_discriminator_loss(real.data(), &rows(&fake)).unwrap()).abs() < 1e-12);
        assert!((g.item().unwrap() - lsgan_generator_wta_loss(&rows(&fake)).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn render_examples() {
    let target = vec![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]];
    assert_eq!(render_wta_loss(&target, &[target.clone()]).unwrap(), 0.0);
    let shifted: Vec<[f64; 3]> = target.iter().map(|p| [p[0] + 1.0, p[1], p[2] - 2.0]).collect();
    assert_eq!(render_wta_loss(&target, &[shifted.clone(), target.clone()]).unwrap(), 0.0);
    assert_eq!(render_wta_loss(&target, &[shifted]).unwrap(), 5.0);
    assert!(render_wta_loss(&target, &[vec![[0.0; 3]]]).is_err());
}

#[test]
fn render_tape_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, k, j) = (4, 3, 5);
    let coords = random(&mut rng, &[b * k * j, 3], -5.0, 5.0);
    let targets = random(&mut rng, &[b * j, 3], -5.0, 5.0);
    let mut expect = 0.0;
    for s in 0..b {
        let mut best = f64::INFINITY;
        for h in 0..k {
            let mut err = 0.0;
            for jj in 0..j {
                for c in 0..3 {
                    let d = coords.data()[((s * k + h) * j + jj) * 3 + c] - targets.data()[(s * j + jj) * 3 + c];
                    err += d * d;
                }
            }
            best = best.min(err / j as f64);
        }
        expect += best / b as f64;
    }
    let tape = Tape::new();
    let v = tape::render_wta_loss(tape.constant(coords.clone()), tape.constant(targets.clone()), k, j).unwrap();
    assert!((v.item().unwrap() - expect).abs() < 1e-12);

    let pose = |t: &Tensor, start: usize| -> Vec<[f64; 3]> { (0..j).map(|jj| [0, 1, 2].map(|c| t.data()[(start + jj) * 3 + c])).collect() };
    let plain: f64 = (0..b)
        .map(|s| render_wta_loss(&pose(&targets, s * j), &(0..k).map(|h| pose(&coords, (s * k + h) * j)).collect::<Vec<_>>()).unwrap())
        .sum::<f64>()
        / b as f64;
    assert!((plain - expect).abs() < 1e-12);
    assert!(tape::render_wta_loss(tape.constant(coords), tape.constant(targets), 2, j).is_err());
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert!((total_loss(1.0, 1.0, 1.0, &w) - 1.52).abs() < 1e-12);
    assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    let only_mask = LossWeights {
        lambda_g: 0.0,
        lambda_r: 0.0,
        ..w
    };
    assert_eq!(total_loss(3.0, 7.0, 11.0, &only_mask), 0.06);
    assert!(LossWeights { lambda_m: -1.0, ..w }.validate().is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    for _ in 0..10 {
        let gt = random(&mut rng, &[6, 6], 0.0, 1.0);
        let p = random(&mut rng, &[6, 6], 0.0, 1.0);
        let s = random(&mut rng, &[6, 6], 0.0, 1.0);
        let e = grad_check(|t, x| tape::mask_loss(t.constant(gt.clone()), x, Some(t.constant(p.clone())), &w), &s, 1e-5).unwrap();
        assert!(e < 1e-5, "mask {e}");

        // hypotheses spread far apart keep the argmin away from ties
        let fake = Tensor::new(&[4, 3], (0..12).map(|i| (i % 3) as f64 * 0.7 - 0.4 + rng.gen_range(-0.05..0.05)).collect()).unwrap();
        let real = random(&mut rng, &[4], -1.0, 2.0);
        let e = grad_check(|t, x| tape::lsgan_discriminator_loss(t.constant(real.clone()), x), &fake, 1e-5).unwrap();
        assert!(e < 1e-5, "disc fake {e}");
        let e = grad_check(|t, x| tape::lsgan_discriminator_loss(x, t.constant(fake.clone())), &real, 1e-5).unwrap();
        assert!(e < 1e-5, "disc real {e}");
        let e = grad_check(|_, x| tape::lsgan_generator_wta_loss(x), &fake, 1e-5).unwrap();
        assert!(e < 1e-5, "gen {e}");

        let targets = random(&mut rng, &[2 * 3, 3], -1.0, 1.0);
        let coords = Tensor::new(&[2 * 2 * 3, 3], (0..36).map(|i| if (i / 9) % 2 == 0 { 0.1 } else { 3.0 } + rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let e = grad_check(|t, x| tape::render_wta_loss(x, t.constant(targets.clone()), 2, 3), &coords, 1e-5).unwrap();
        assert!(e < 1e-5, "render {e}");
    }
}

proptest! {
    #[test]
    fn wta_bounds(v in prop::collection::vec(-100.0f64..100.0, 1..10)) {
        let (m, i) = wta(&v).unwrap();
        prop_assert!(m <= v.iter().sum::<f64>() / v.len() as f64 + 1e-9);
        prop_assert!(v.iter().all(|x| m <= *x));
        prop_assert_eq!(v[i], m);
        prop_assert!(v[..i].iter().all(|x| *x > m));
    }

    #[test]
    fn worse_hypotheses_never_increase_wta(
        scores in prop::collection::vec(-2.0f64..2.0, 1..6),
        extra in 0.0f64..5.0,
    ) {
        let mut worse = scores.clone();
        worse.push(1.0 + extra + 3.0);
        prop_assert!(lsgan_generator_wta_loss(&[worse.clone()]).unwrap() <= lsgan_generator_wta_loss(&[scores.clone()]).unwrap());
        let mut far = scores.clone();
        far.push(10.0 + extra);
        prop_assert!(lsgan_discriminator_loss(&[0.5], &[far]).unwrap() <= lsgan_discriminator_loss(&[0.5], &[scores.clone()]).unwrap());
        let target = vec![[0.0; 3]; 2];
        let hyps: Vec<Vec<[f64; 3]>> = scores.iter().map(|s| vec![[*s, 0.0, 0.0]; 2]).collect();
        let mut more = hyps.clone();
        more.push(vec![[10.0 + extra, 0.0, 0.0]; 2]);
        prop_assert!(render_wta_loss(&target, &more).unwrap() <= render_wta_loss(&target, &hyps).unwrap());
    }

    #[test]
    fn losses_are_non_negative(real in prop::collection::vec(-3.0f64..3.0, 1..4), fake in prop::collection::vec(-3.0f64..3.0, 1..4)) {
        prop_assert!(lsgan_discriminator_loss(&real, &[fake.clone()]).unwrap() >= 0.0);
        prop_assert!(lsgan_generator_wta_loss(&[fake]).unwrap() >= 0.0);
    }
}
