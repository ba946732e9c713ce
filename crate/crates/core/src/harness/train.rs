use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::dataset::{Dataset, Record};
use super::detector::{downsample, PhysiqueNet, ToyDetector};
use super::evaluate::evaluate_records;
use crate::decoder::{decode_batch_on_tape, HypothesisSet};
use crate::diffcore::{collect_grads, ParamStore, Sgd, Tape, Tensor, Var};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::losses::tape as loss;
use crate::metrics::{MetricsReport, Protocol};
use crate::sampler::{derive_seed, render_skeleton_mask_on_tape, SkeletonRender};
use crate::skeleton::SkeletonTopology;

/// Trainable state of a run.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub topology: SkeletonTopology,
    pub detector: ToyDetector,
    pub physique: PhysiqueNet,
    pub disc: Discriminator,
    pub opt_detector: Sgd,
    pub opt_physique: Sgd,
    pub opt_disc: Sgd,
    pub stage: u32,
    pub epoch: u64,
}

/// Loss values of one detector update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub mask: f64,
    pub gen: f64,
    pub render: f64,
}

fn heatmap_targets(batch: &[&Record]) -> Result<Tensor> {
    let joints = batch[0].heatmap_coords.len();
    Tensor::new(&[batch.len() * joints, 3], batch.iter().flat_map(|r| r.heatmap_coords.iter().flatten().copied()).collect())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

impl Model {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (template, _) = cfg.data.load_skeleton()?;
        let topology = template.topology;
        let detector = ToyDetector::init(topology.joint_count(), cfg.grid, &cfg.detector, derive_seed(cfg.seed, 1))?;
        let physique = PhysiqueNet::init(&cfg.mask, derive_seed(cfg.seed, 2))?;
        let disc = Discriminator::init(&topology, cfg.discriminator, derive_seed(cfg.seed, 3))?;
        let o = &cfg.optimizer;
        Ok(Self {
            opt_detector: Sgd::new(&detector.store, o.lr, o.momentum),
            opt_physique: Sgd::new(&physique.store, o.lr, o.momentum),
            opt_disc: Sgd::new(&disc.store, o.d_lr.unwrap_or(o.lr), o.momentum),
            cfg: cfg.clone(),
            topology,
            detector,
            physique,
            disc,
            stage: 0,
            epoch: 0,
        })
    }

    fn stores(&self) -> [(&ParamStore, &Sgd); 3] {
        [
            (&self.detector.store, &self.opt_detector),
            (&self.physique.store, &self.opt_physique),
            (&self.disc.store, &self.opt_disc),
        ]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (store, opt) in self.stores() {
            for (name, t) in store.iter() {
                tensors.push((name.to_string(), t.clone()));
            }
            for (name, v) in store.names().iter().zip(opt.velocity()) {
                tensors.push((format!("momentum.{name}"), v.clone()));
            }
        }
        Ok(Checkpoint {
            config_hash: self.cfg.hash()?,
            stage: self.stage,
            epoch: self.epoch,
            tensors,
        })
    }

    /// Rebuilds a model from a checkpoint written under the same config.
    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.config_hash != cfg.hash()? {
            return Err(Error::Config("checkpoint was written under a different config".into()));
        }
        let mut m = Self::init(cfg)?;
        let lookup = |name: &str| ck.get(name).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")));
        let expected: usize = m.stores().iter().map(|(s, _)| 2 * s.len()).sum();
        if ck.tensors.len() != expected {
            return Err(Error::Format(format!("checkpoint holds {} tensors, model needs {expected}", ck.tensors.len())));
        }
        for (store, opt) in [
            (&mut m.detector.store, &mut m.opt_detector),
            (&mut m.physique.store, &mut m.opt_physique),
            (&mut m.disc.store, &mut m.opt_disc),
        ] {
            let mut loaded = ParamStore::new();
            let mut velocity = Vec::new();
            for name in store.names() {
                loaded.add(name.clone(), lookup(name)?);
                velocity.push(lookup(&format!("momentum.{name}"))?);
            }
            store.load_from(&loaded)?;
            opt.load_velocity(velocity)?;
        }
        m.stage = ck.stage;
        m.epoch = ck.epoch;
        Ok(m)
    }

    fn mask_renderer(&self) -> SkeletonRender {
        let s = self.cfg.mask.size;
        SkeletonRender {
            edges: self.topology.edges().to_vec(),
            joints: self.topology.joint_count(),
            thickness: self.cfg.data.synth.thickness * s as f64 / self.cfg.grid.width as f64,
            height: s,
            width: s,
        }
    }

    /// Decodes hypotheses for a batch with every parameter held constant.
    pub fn predict(&self, batch: &[&Record]) -> Result<Vec<HypothesisSet>> {
        let tape = Tape::new();
        let p = self.detector.store.bind_constant(&tape);
        let masks: Vec<&Tensor> = batch.iter().map(|r| &r.mask).collect();
        let feats = tape.constant(self.detector.features(&masks)?);
        let l = self.detector.forward(&p, feats)?;
        Ok(decode_batch_on_tape(l.depth, l.rows, l.cols, self.detector.joints, &self.cfg.decoder)?.sets)
    }

    fn fake_coords(&self, batch: &[&Record]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.detector.store.bind_constant(&tape);
        let masks: Vec<&Tensor> = batch.iter().map(|r| &r.mask).collect();
        let feats = tape.constant(self.detector.features(&masks)?);
        let l = self.detector.forward(&p, feats)?;
        let coords = decode_batch_on_tape(l.depth, l.rows, l.cols, self.detector.joints, &self.cfg.decoder)?.coords;
        Ok((*coords.value()).clone())
    }

    /// Builds the least-squares discriminator loss with `real` poses as
    /// positives and the detector's decoded hypotheses for `batch` as
    /// negatives.
    fn discriminator_loss<'t>(&self, tape: &'t Tape, p: &[Var<'t>], batch: &[&Record], real: &[&Record]) -> Result<Var<'t>> {
        let k = self.cfg.decoder.n_hypo;
        let j = self.detector.joints;
        let real_t = tape.constant(heatmap_targets(real)?);
        let fake_t = tape.constant(self.fake_coords(batch)?);
        let scores = self.disc.forward_poses(p, crate::diffcore::concat(&[real_t, fake_t], 0)?)?;
        let n_real = real.len();
        let real_s = scores.gather_rows(&(0..n_real).collect::<Vec<_>>())?.reshape(&[n_real])?;
        let fake_rows: Vec<usize> = (n_real..n_real + batch.len() * k).collect();
        let fake_s = scores.gather_rows(&fake_rows)?.reshape(&[batch.len(), k])?;
        debug_assert_eq!(fake_t.shape()[0], batch.len() * k * j);
        loss::lsgan_discriminator_loss(real_s, fake_s)
    }

    pub fn discriminator_step(&mut self, batch: &[&Record], real: &[&Record], lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let p = self.disc.store.bind(&tape);
        let l = self.discriminator_loss(&tape, &p, batch, real)?;
        let value = finite(l.item()?, "discriminator")?;
        let grads = collect_grads(&tape.backward(l)?, &p);
        self.opt_disc.lr = lr;
        self.opt_disc.step(&mut self.disc.store, &grads)?;
        Ok(value)
    }

    /// The detector objective on one batch. Returns the total loss variable
    /// and its parts.
    fn generator_objective<'t>(
        &self,
        tape: &'t Tape,
        pd: &[Var<'t>],
        pp: &[Var<'t>],
        batch: &[&Record],
    ) -> Result<(Var<'t>, StepLosses)> {
        let w = &self.cfg.weights;
        let (k, j, b) = (self.cfg.decoder.n_hypo, self.detector.joints, batch.len());
        let masks: Vec<&Tensor> = batch.iter().map(|r| &r.mask).collect();
        let feats = tape.constant(self.detector.features(&masks)?);
        let l = self.detector.forward(pd, feats)?;
        let hyp = decode_batch_on_tape(l.depth, l.rows, l.cols, j, &self.cfg.decoder)?;
        let zero = tape.constant(Tensor::scalar(0.0));

        let render = loss::render_wta_loss(hyp.coords, tape.constant(heatmap_targets(batch)?), k, j)?;

        let gen = if w.lambda_g > 0.0 {
            let pdisc = self.disc.store.bind_constant(tape);
            let scores = self.disc.forward_poses(&pdisc, hyp.coords)?.reshape(&[b, k])?;
            loss::lsgan_generator_wta_loss(scores)?
        } else {
            zero
        };

        let mask = if w.lambda_m > 0.0 {
            let size = self.cfg.mask.size;
            let f = size as f64 / self.cfg.grid.width as f64;
            // x, y of the first hypothesis (shared by all), mapped onto the coarse grid
            let rows: Vec<usize> = (0..b).flat_map(|s| (0..j).map(move |jj| s * k * j + jj)).collect();
            let pick = tape.constant(Tensor::matrix(3, 2, vec![f, 0.0, 0.0, f, 0.0, 0.0])?);
            let shift = tape.constant(Tensor::vector(vec![0.5 * f - 0.5; 2])?);
            let pts = hyp.coords.gather_rows(&rows)?.matmul(pick)?.add_row(shift)?;
            let skeleton = render_skeleton_mask_on_tape(pts, &self.mask_renderer())?;
            let gt: Vec<f64> = batch.iter().map(|r| downsample(&r.mask, size)).collect::<Result<Vec<_>>>()?.concat();
            let gt = tape.constant(Tensor::new(&[b, size * size], gt)?);
            let physique = if w.lambda_p > 0.0 {
                Some(self.physique.forward(pp, skeleton)?)
            } else {
                None
            };
            loss::mask_loss(gt, skeleton, physique, w)?
        } else {
            zero
        };

        let total = loss::total_loss(mask, gen, render, w)?;
        let parts = StepLosses {
            total: total.item()?,
            mask: mask.item()?,
            gen: gen.item()?,
            render: render.item()?,
        };
        Ok((total, parts))
    }

    /// Current detector objective on a batch, without updating anything.
    pub fn generator_losses(&self, batch: &[&Record]) -> Result<StepLosses> {
        let tape = Tape::new();
        let pd = self.detector.store.bind_constant(&tape);
        let pp = self.physique.store.bind_constant(&tape);
        Ok(self.generator_objective(&tape, &pd, &pp, batch)?.1)
    }

    pub fn generator_step(&mut self, batch: &[&Record], lr: f64) -> Result<StepLosses> {
        let tape = Tape::new();
        let pd = self.detector.store.bind(&tape);
        let pp = self.physique.store.bind(&tape);
        let (total, parts) = self.generator_objective(&tape, &pd, &pp, batch)?;
        finite(parts.total, "detector")?;
        let grads = tape.backward(total)?;
        self.opt_detector.lr = lr;
        self.opt_detector.step(&mut self.detector.store, &collect_grads(&grads, &pd))?;
        self.opt_physique.lr = lr;
        self.opt_physique.step(&mut self.physique.store, &collect_grads(&grads, &pp))?;
        Ok(parts)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub stage: u32,
    pub lr: f64,
    pub loss_d: f64,
    pub losses: StepLosses,
    /// Best-hypothesis MPJPE on the training records (mm).
    pub train_mpjpe: f64,
    /// MPJPE on the held-out records per protocol; empty without a hold-out.
    pub val_mpjpe: Vec<(Protocol, f64)>,
}

impl EpochLog {
    pub fn csv_header(protocols: &[Protocol]) -> String {
        let mut h = "epoch,stage,lr,loss_d,loss_total,loss_mask,loss_gen,loss_render,train_mpjpe".to_string();
        for p in protocols {
            h.push_str(&format!(",val_mpjpe_{p}"));
        }
        h
    }

    pub fn csv_row(&self, protocols: &[Protocol]) -> String {
        let l = &self.losses;
        let mut row = format!(
            "{},{},{:e},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.stage, self.lr, self.loss_d, l.total, l.mask, l.gen, l.render, self.train_mpjpe
        );
        for p in protocols {
            match self.val_mpjpe.iter().find(|(q, _)| q == p) {
                Some((_, v)) => row.push_str(&format!(",{v:.6}")),
                None => row.push(','),
            }
        }
        row
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Final held-out metrics per configured protocol; empty without a hold-out.
    pub val_reports: Vec<MetricsReport>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_GOOD: &str = "last_good.ckpt";

pub fn stage_checkpoint_name(stage: u32) -> String {
    format!("stage{stage}.ckpt")
}

/// Trains detector, physique network and discriminator on `data`.
///
/// The last `eval.val_samples` records are held out for validation when the
/// dataset is larger than that. Each batch runs `d_steps` discriminator
/// updates (skipped when the adversarial weight is zero) followed by one
/// detector update. With `out` set, the log, the stage checkpoints and, on
/// a non-finite loss, the state at the start of the failing epoch are
/// written there.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (train_set, val_set) = if data.len() > cfg.eval.val_samples {
        data.split_tail(cfg.eval.val_samples)
    } else {
        (data.clone(), data.head(0))
    };
    let mut model = Model::init(cfg)?;
    check_compatible(&model, &train_set)?;
    let protocols = &cfg.eval.protocols;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join(LOG_FILE))?;
            writeln!(f, "{}", EpochLog::csv_header(protocols))?;
            Some(f)
        }
        None => None,
    };
    let o = cfg.optimizer;
    let records: Vec<&Record> = train_set.records.iter().collect();
    let val_records: Vec<&Record> = val_set.records.iter().collect();
    let mut log = Vec::new();
    for (stage, epochs) in [(1u32, o.stage1_epochs), (2, o.stage2_epochs)] {
        if epochs == 0 {
            continue;
        }
        model.stage = stage;
        for e in 0..epochs {
            let lr = o.lr_at(stage as usize, e);
            let d_lr = o.d_lr.map_or(lr, |d| if stage == 1 && e >= o.decay_epoch { d * o.decay_factor } else { d });
            let snapshot = model.clone();
            match run_epoch(&mut model, &records, lr, d_lr) {
                Ok((loss_d, losses)) => {
                    model.epoch += 1;
                    let train_mpjpe = evaluate_records(&model, &records, &[Protocol::Best])?[0].mpjpe;
                    let val_mpjpe = if val_records.is_empty() {
                        Vec::new()
                    } else {
                        evaluate_records(&model, &val_records, protocols)?.iter().map(|r| (r.protocol, r.mpjpe)).collect()
                    };
                    let row = EpochLog {
                        epoch: model.epoch,
                        stage,
                        lr,
                        loss_d,
                        losses,
                        train_mpjpe,
                        val_mpjpe,
                    };
                    if let Some(f) = &mut log_file {
                        writeln!(f, "{}", row.csv_row(protocols))?;
                        f.flush()?;
                    }
                    log.push(row);
                }
                Err(err @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        snapshot.to_checkpoint()?.save(dir.join(LAST_GOOD))?;
                    }
                    return Err(err);
                }
                Err(err) => return Err(err),
            }
        }
        if let Some(dir) = out {
            model.to_checkpoint()?.save(dir.join(stage_checkpoint_name(stage)))?;
        }
    }
    let val_reports = if val_records.is_empty() {
        Vec::new()
    } else {
        evaluate_records(&model, &val_records, protocols)?
    };
    Ok(TrainOutcome { model, log, val_reports })
}

fn run_epoch(model: &mut Model, records: &[&Record], lr: f64, d_lr: f64) -> Result<(f64, StepLosses)> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1_000_000 + model.epoch));
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let mut real_order = order.clone();
    real_order.shuffle(&mut rng);
    let bs = cfg.optimizer.batch_size.min(records.len());
    let d_steps = cfg.optimizer.d_steps;
    let adversarial = cfg.weights.lambda_g > 0.0;
    let n_batches = order.len().div_ceil(bs);
    let (mut sum_d, mut sum) = (0.0, StepLosses::default());
    for (bi, chunk) in order.chunks(bs).enumerate() {
        let batch: Vec<&Record> = chunk.iter().map(|&i| records[i]).collect();
        if adversarial {
            for s in 0..d_steps {
                let start = ((bi * d_steps + s) * bs) % records.len();
                let real: Vec<&Record> = (0..bs).map(|t| records[real_order[(start + t) % records.len()]]).collect();
                sum_d += model.discriminator_step(&batch, &real, d_lr)? / d_steps as f64;
            }
        }
        let l = model.generator_step(&batch, lr)?;
        sum.total += l.total;
        sum.mask += l.mask;
        sum.gen += l.gen;
        sum.render += l.render;
    }
    let n = n_batches as f64;
    Ok((
        sum_d / n,
        StepLosses {
            total: sum.total / n,
            mask: sum.mask / n,
            gen: sum.gen / n,
            render: sum.render / n,
        },
    ))
}

/// Refuses datasets whose joints or grid disagree with the model.
pub fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let g = &model.cfg.grid;
    let i = &data.index;
    if i.joints != model.topology.joint_count() || i.image_size != g.width || i.image_size != g.height || i.depth_bins != g.depth {
        return Err(Error::Config(format!(
            "dataset ({} joints, {} px, {} bins) does not match the model ({} joints, {}×{} px, {} bins)",
            i.joints,
            i.image_size,
            i.depth_bins,
            model.topology.joint_count(),
            g.height,
            g.width,
            g.depth
        )));
    }
    Ok(())
}
