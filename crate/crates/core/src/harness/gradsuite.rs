//! Finite-difference checks of every trained objective, as run by the
//! `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{decode_batch_on_tape, DecoderConfig};
use crate::diffcore::{grad_check, ParamStore, Tape, Tensor, Var};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::Result;
use crate::losses::{tape as loss, LossWeights};
use crate::sampler::{render_skeleton_mask_on_tape, SkeletonRender};
use crate::skeleton::SkeletonTopology;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_relative_error: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Worst error over every tensor of `store`, each perturbed in turn.
fn check_store<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst: f64 = 0.0;
    for i in 0..store.len() {
        let e = grad_check(
            |t, x| {
                let mut p = store.bind_constant(t);
                p[i] = x;
                f(t, &p)
            },
            store.get(i),
            STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Runs the suite on random inputs drawn from `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| {
        out.push(GradCheckResult {
            name: name.to_string(),
            max_relative_error: e,
        })
    };
    let w = LossWeights::default();

    let gt = random(&mut rng, &[4, 16], 0.0, 1.0)?;
    let skel = random(&mut rng, &[4, 16], 0.0, 1.0)?;
    let phys = random(&mut rng, &[4, 16], 0.0, 1.0)?;
    let e1 = grad_check(|t, x| loss::mask_loss(t.constant(gt.clone()), x, Some(t.constant(phys.clone())), &w), &skel, STEP)?;
    let e2 = grad_check(|t, x| loss::mask_loss(t.constant(gt.clone()), t.constant(skel.clone()), Some(x), &w), &phys, STEP)?;
    push("mask_loss", e1.max(e2));

    let real = random(&mut rng, &[6], -1.0, 2.0)?;
    let fake = random(&mut rng, &[6, 3], -1.0, 2.0)?;
    let e1 = grad_check(|t, x| loss::lsgan_discriminator_loss(x, t.constant(fake.clone())), &real, STEP)?;
    let e2 = grad_check(|t, x| loss::lsgan_discriminator_loss(t.constant(real.clone()), x), &fake, STEP)?;
    push("lsgan_discriminator_loss", e1.max(e2));
    push("lsgan_generator_wta_loss", grad_check(|_, x| loss::lsgan_generator_wta_loss(x), &fake, STEP)?);

    let (k, j) = (3, 5);
    let targets = random(&mut rng, &[2 * j, 3], 0.0, 10.0)?;
    let coords = random(&mut rng, &[2 * k * j, 3], 0.0, 10.0)?;
    push(
        "render_wta_loss",
        grad_check(|t, x| loss::render_wta_loss(x, t.constant(targets.clone()), k, j), &coords, STEP)?,
    );

    let topo = SkeletonTopology::human18();
    let op = SkeletonRender {
        edges: topo.edges().to_vec(),
        joints: topo.joint_count(),
        thickness: 1.2,
        height: 16,
        width: 16,
    };
    let pts = random(&mut rng, &[2 * topo.joint_count(), 2], 1.0, 14.0)?;
    let weights = random(&mut rng, &[2, 256], -1.0, 1.0)?;
    push(
        "skeleton_mask_render",
        grad_check(|t, x| Ok(render_skeleton_mask_on_tape(x, &op)?.mul(t.constant(weights.clone()))?.sum()), &pts, STEP)?,
    );

    let cfg = DiscriminatorConfig {
        hidden: 16,
        n_blocks: 2,
        final_width: 8,
        header_width: 32,
        input_scale: 0.1,
    };
    let disc = Discriminator::init(&topo, cfg, rng.gen())?;
    let poses = random(&mut rng, &[2 * topo.joint_count(), 3], 0.0, 64.0)?;
    let e_in = grad_check(|t, x| Ok(disc.forward_poses(&disc.store.bind_constant(t), x)?.sum()), &poses, STEP)?;
    let e_par = check_store(&disc.store, |t, p| Ok(disc.forward_poses(p, t.constant(poses.clone()))?.sum()))?;
    push("discriminator_forward", e_in.max(e_par));

    let dcfg = DecoderConfig { n_hypo: 2, n_w: 3 };
    let (jd, d) = (2, 12);
    let rl = random(&mut rng, &[jd, 6], -1.0, 1.0)?;
    let cl = random(&mut rng, &[jd, 7], -1.0, 1.0)?;
    let dl = random(&mut rng, &[jd, d], -2.0, 2.0)?;
    let dt = random(&mut rng, &[jd, 3], 0.0, 6.0)?;
    push(
        "decode_render_wta",
        grad_check(
            |t, x| {
                let hyp = decode_batch_on_tape(x, t.constant(rl.clone()), t.constant(cl.clone()), jd, &dcfg)?;
                loss::render_wta_loss(hyp.coords, t.constant(dt.clone()), dcfg.n_hypo, jd)
            },
            &dl,
            STEP,
        )?,
    );
    Ok(out)
}
