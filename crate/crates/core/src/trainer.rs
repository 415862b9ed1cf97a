//! Restoration pretraining, joint fine-tuning, weight averaging and
//! normalization-statistics recomputation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Phase};
use crate::data::{augment_flip, resize_sample, ShadowSample};
use crate::error::{R2dError, Result};
use crate::losses::{
    detection_loss, restoration_loss, DetectionMaps, LossConfig, Reduction, ScaleMaps,
};
use crate::model::{unet_fingerprint, ArchConfig, Model, RestorationModel, UNET_PREFIX};
use crate::nn::{apply_norm_updates, Graph, Mode, ParamStore, Sgd, StatsPolicy, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_iters: u64,
    pub swa_points: Vec<u64>,
    pub seed: u64,
    pub augment: bool,
    /// Running-statistics momentum of batch normalization during training.
    pub bn_momentum: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            pretrain_epochs: 50,
            finetune_iters: 2000,
            swa_points: vec![1333, 1666, 2000],
            seed: 0,
            augment: true,
            bn_momentum: 0.1,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(R2dError::Config(format!("train.{m}")));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return err("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be nonnegative".into());
        }
        if self.batch_size == 0 || self.finetune_iters == 0 {
            return err("batch_size and finetune_iters must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return err("bn_momentum must lie in (0, 1]".into());
        }
        if let Some(p) = self
            .swa_points
            .iter()
            .find(|&&p| p < 1 || p > self.finetune_iters)
        {
            return err(format!(
                "swa_points entry {p} lies outside [1, {}]",
                self.finetune_iters
            ));
        }
        Ok(())
    }

    /// The default 2/3, 5/6, 1 fractions of `iters`.
    pub fn proportional_swa_points(iters: u64) -> Vec<u64> {
        vec![iters * 2 / 3, iters * 5 / 6, iters]
    }

    pub fn sgd(&self) -> Sgd {
        Sgd::new(
            self.lr as f32,
            self.momentum as f32,
            self.weight_decay as f32,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub det: f64,
    pub res: Option<f64>,
}

/// Resizes every sample to `side` if needed.
pub fn prepare(samples: &[ShadowSample], side: usize) -> Result<Vec<ShadowSample>> {
    samples
        .iter()
        .map(|s| {
            if s.height() == side && s.width() == side {
                Ok(s.clone())
            } else {
                resize_sample(s, side)
            }
        })
        .collect()
}

/// Endless epoch-shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stack_images(batch: &[ShadowSample]) -> Tensor {
    Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Per-prediction seed gradients, one `[B, C, H, W]` tensor each.
struct Seeds {
    entries: Vec<(Var, Tensor)>,
}

impl Seeds {
    fn new() -> Self {
        Seeds {
            entries: Vec::new(),
        }
    }

    fn add(&mut self, g: &Graph, var: Var, n: usize, grad: &[f64], scale: f64) {
        let idx = match self.entries.iter().position(|(v, _)| *v == var) {
            Some(i) => i,
            None => {
                self.entries.push((var, Tensor::zeros(g.dims(var))));
                self.entries.len() - 1
            }
        };
        let t = &mut self.entries[idx].1;
        let len = t.sample(n).len();
        let start = n * len;
        for (d, &s) in t.data_mut()[start..start + len].iter_mut().zip(grad) {
            *d += (s * scale) as f32;
        }
    }
}

/// Mean restoration loss over samples that carry a clean image.
fn restoration_terms(
    g: &Graph,
    restored: Var,
    batch: &[ShadowSample],
    reduction: Reduction,
    seeds: &mut Seeds,
) -> Result<Option<f64>> {
    let with_clean: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].clean.is_some())
        .collect();
    if with_clean.is_empty() {
        return Ok(None);
    }
    let k = 1.0 / with_clean.len() as f64;
    let mut total = 0.0;
    for &i in &with_clean {
        let r = to_f64(g.value(restored).sample(i));
        let c = to_f64(batch[i].clean.as_ref().unwrap().data());
        let l = restoration_loss(&r, Some(&c), reduction)?;
        total += l.value;
        seeds.add(g, restored, i, &l.grad, k);
    }
    Ok(Some(total * k))
}

/// One optimization step of a detection model on `batch`.
pub fn finetune_step(
    model: &mut Model,
    batch: &[ShadowSample],
    loss_cfg: &LossConfig,
    sgd: &mut Sgd,
    bn_momentum: f64,
) -> Result<StepLoss> {
    let (grads, updates, loss) = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let x = g.input(stack_images(batch));
        let out = model.net.forward(&mut g, x)?;
        let b = batch.len();
        let k = 1.0 / b as f64;
        let mut seeds = Seeds::new();
        let mut det_total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let side: Vec<Vec<f64>> = out
                .det
                .scales
                .iter()
                .map(|p| to_f64(g.value(p.side).sample(i)))
                .collect();
            let fp: Vec<Option<Vec<f64>>> = out
                .det
                .scales
                .iter()
                .map(|p| p.fp.map(|v| to_f64(g.value(v).sample(i))))
                .collect();
            let fnp: Vec<Option<Vec<f64>>> = out
                .det
                .scales
                .iter()
                .map(|p| p.fn_.map(|v| to_f64(g.value(v).sample(i))))
                .collect();
            let fin = to_f64(g.value(out.det.final_pred).sample(i));
            let maps = DetectionMaps {
                scales: (0..side.len())
                    .map(|j| ScaleMaps {
                        side: &side[j],
                        fp: fp[j].as_deref(),
                        fn_: fnp[j].as_deref(),
                    })
                    .collect(),
                final_pred: &fin,
            };
            let y = to_f64(s.mask.data());
            let fpd = s.fp_map.as_ref().map(|m| to_f64(m.data()));
            let fnd = s.fn_map.as_ref().map(|m| to_f64(m.data()));
            let dl = detection_loss(&maps, &y, fpd.as_deref(), fnd.as_deref(), loss_cfg)?;
            det_total += dl.value;
            for (j, p) in out.det.scales.iter().enumerate() {
                seeds.add(&g, p.side, i, &dl.side[j], k);
                if let (Some(v), Some(gr)) = (p.fp, &dl.fp[j]) {
                    seeds.add(&g, v, i, gr, k);
                }
                if let (Some(v), Some(gr)) = (p.fn_, &dl.fn_[j]) {
                    seeds.add(&g, v, i, gr, k);
                }
            }
            seeds.add(&g, out.det.final_pred, i, &dl.final_pred, k);
        }
        let det = det_total * k;
        let res = match out.restored {
            Some(r) => restoration_terms(&g, r, batch, loss_cfg.reduction, &mut seeds)?,
            None => None,
        };
        let grads = g.backward(seeds.entries);
        let loss = StepLoss {
            total: det + res.unwrap_or(0.0),
            det,
            res,
        };
        (grads, g.into_norm_updates(), loss)
    };
    sgd.step(&mut model.store, &grads);
    apply_norm_updates(
        &mut model.store,
        &updates,
        StatsPolicy::Momentum(bn_momentum as f32),
    );
    Ok(loss)
}

/// One optimization step of the restoration network alone.
pub fn pretrain_step(
    model: &mut RestorationModel,
    batch: &[ShadowSample],
    sgd: &mut Sgd,
    bn_momentum: f64,
) -> Result<f64> {
    let (grads, updates, loss) = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let x = g.input(stack_images(batch));
        let out = model.unet.forward(&mut g, x)?;
        let mut seeds = Seeds::new();
        let loss = restoration_terms(&g, out.restored, batch, Reduction::Mean, &mut seeds)?
            .ok_or_else(|| {
                R2dError::Integrity("restoration pretraining needs clean images".into())
            })?;
        let grads = g.backward(seeds.entries);
        (grads, g.into_norm_updates(), loss)
    };
    sgd.step(&mut model.store, &grads);
    apply_norm_updates(
        &mut model.store,
        &updates,
        StatsPolicy::Momentum(bn_momentum as f32),
    );
    Ok(loss)
}

fn augmented(
    samples: &[ShadowSample],
    idx: &[usize],
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<ShadowSample> {
    idx.iter()
        .map(|&i| {
            if augment {
                augment_flip(&samples[i], rng)
            } else {
                samples[i].clone()
            }
        })
        .collect()
}

pub struct PretrainResult {
    pub model: RestorationModel,
    pub checkpoint: Checkpoint,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Optimizes the restoration network on `restoration_loss` for
/// `cfg.pretrain_epochs` epochs. Every sample must carry a clean image.
pub fn pretrain_restoration(
    train: &[ShadowSample],
    unet: &crate::restoration::UNetConfig,
    side: usize,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(R2dError::Integrity("empty training set".into()));
    }
    if let Some(s) = train.iter().find(|s| s.clean.is_none()) {
        return Err(R2dError::Integrity(format!(
            "restoration pretraining needs clean images; sample {} has none",
            s.id
        )));
    }
    let train = prepare(train, side)?;
    let mut model = RestorationModel::new(unet, cfg.seed)?;
    let mut sgd = cfg.sgd();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = augmented(&train, chunk, cfg.augment, &mut aug_rng);
            let l = pretrain_step(&mut model, &batch, &mut sgd, cfg.bn_momentum)?;
            step_losses.push(l);
            sum += l;
            count += 1;
        }
        let mean = sum / count as f64;
        log::info!("pretrain epoch {} loss {:.6}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    let checkpoint = Checkpoint::from_store(
        &model.store,
        CheckpointMeta {
            iteration: step_losses.len() as u64,
            fingerprint: model.fingerprint(),
            phase: Phase::Pretrain,
        },
    );
    if let Some(dir) = ckpt_dir {
        checkpoint.save(&dir.join("pretrain.safetensors"))?;
    }
    Ok(PretrainResult {
        model,
        checkpoint,
        epoch_losses,
        step_losses,
    })
}

pub struct FinetuneResult {
    pub model: Model,
    /// Snapshots at the averaging points, in iteration order.
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<StepLoss>,
}

/// Builds a detection model for `arch`, loading the restoration weights of
/// `pretrain` when the mode has a restoration branch.
pub fn build_model(arch: &ArchConfig, pretrain: Option<&Checkpoint>, seed: u64) -> Result<Model> {
    let mut model = Model::new(arch, seed)?;
    match (arch.mode.uses_restoration(), pretrain) {
        (true, Some(ck)) => {
            ck.check_fingerprint(&unet_fingerprint(&arch.unet))?;
            model
                .store
                .load_prefixed(&ck.tensors, &format!("{UNET_PREFIX}."))?;
        }
        (true, None) => {
            return Err(R2dError::Checkpoint(format!(
                "mode {} needs a pretrained restoration checkpoint",
                arch.mode
            )))
        }
        (false, Some(_)) => {
            return Err(R2dError::Checkpoint(format!(
                "mode {} has no restoration branch but a restoration checkpoint was given",
                arch.mode
            )))
        }
        (false, None) => {}
    }
    Ok(model)
}

/// Joint fine-tuning on the detection objective, plus the restoration
/// objective for samples that carry a clean image.
pub fn finetune_r2d(
    train: &[ShadowSample],
    arch: &ArchConfig,
    pretrain: Option<&Checkpoint>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ckpt_dir: Option<&Path>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    loss_cfg.weights.validate()?;
    if train.is_empty() {
        return Err(R2dError::Integrity("empty training set".into()));
    }
    let train = prepare(train, arch.side)?;
    let mut model = build_model(arch, pretrain, cfg.seed)?;
    let fingerprint = model.fingerprint();
    let mut sgd = cfg.sgd();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(3);
    let mut sampler = Sampler::new(train.len(), order_rng);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(4);
    let mut losses = Vec::with_capacity(cfg.finetune_iters as usize);
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.finetune_iters {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch = augmented(&train, &idx, cfg.augment, &mut aug_rng);
        let l = finetune_step(&mut model, &batch, loss_cfg, &mut sgd, cfg.bn_momentum)?;
        if !l.total.is_finite() {
            return Err(R2dError::Integrity(format!(
                "non-finite loss at iteration {it}"
            )));
        }
        losses.push(l);
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(cfg.log_every as usize)..];
            let mean = window.iter().map(|l| l.total).sum::<f64>() / window.len() as f64;
            log::info!("{} iter {it} loss {mean:.5}", arch.mode);
        }
        if cfg.swa_points.contains(&it) {
            let ck = Checkpoint::from_store(
                &model.store,
                CheckpointMeta {
                    iteration: it,
                    fingerprint: fingerprint.clone(),
                    phase: Phase::Finetune,
                },
            );
            if let Some(dir) = ckpt_dir {
                ck.save(&dir.join(format!("finetune_{it:06}.safetensors")))?;
            }
            checkpoints.push(ck);
        }
    }
    Ok(FinetuneResult {
        model,
        checkpoints,
        losses,
    })
}

/// Elementwise arithmetic mean of every tensor, accumulated in `f64`.
pub fn swa_average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    if ckpts.len() < 2 {
        return Err(R2dError::Checkpoint(
            "averaging needs at least two checkpoints".into(),
        ));
    }
    let first = &ckpts[0];
    for c in &ckpts[1..] {
        first.check_fingerprint(&c.meta.fingerprint)?;
        if c.tensors.len() != first.tensors.len() || c.tensors.keys().ne(first.tensors.keys()) {
            return Err(R2dError::Checkpoint(
                "checkpoints hold different tensor sets".into(),
            ));
        }
    }
    let n = ckpts.len() as f64;
    let mut tensors = std::collections::BTreeMap::new();
    for (name, t0) in &first.tensors {
        let mut acc: Vec<f64> = t0.data().iter().map(|&v| v as f64).collect();
        for c in &ckpts[1..] {
            let t = &c.tensors[name];
            if t.dims() != t0.dims() {
                return Err(R2dError::Checkpoint(format!("shape mismatch for {name}")));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += v as f64;
            }
        }
        tensors.insert(
            name.clone(),
            Tensor::from_vec(t0.dims(), acc.into_iter().map(|a| (a / n) as f32).collect()),
        );
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            iteration: ckpts.iter().map(|c| c.meta.iteration).max().unwrap_or(0),
            fingerprint: first.meta.fingerprint.clone(),
            phase: Phase::Swa,
        },
        tensors,
    })
}

/// Recomputes every running mean/variance as the cumulative average of batch
/// statistics over one pass of `samples`.
pub fn recompute_norm_stats<F>(
    store: &mut ParamStore,
    samples: &[ShadowSample],
    batch_size: usize,
    mut forward: F,
) -> Result<()>
where
    F: FnMut(&mut Graph, Var) -> Result<()>,
{
    for (count, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let updates = {
            let mut g = Graph::new(store, Mode::Train);
            let x = g.input(stack_images(chunk));
            forward(&mut g, x)?;
            g.into_norm_updates()
        };
        apply_norm_updates(store, &updates, StatsPolicy::Cumulative { count });
    }
    Ok(())
}

/// Averages `ckpts`, loads the result into `model` and refreshes its
/// normalization statistics on `train`.
pub fn swa_finalize(
    model: &mut Model,
    ckpts: &[Checkpoint],
    train: &[ShadowSample],
    batch_size: usize,
) -> Result<Checkpoint> {
    let avg = swa_average(ckpts)?;
    let fingerprint = model.fingerprint();
    avg.apply_to(&mut model.store, &fingerprint)?;
    let train = prepare(train, model.net.config.side)?;
    let net = model.net.clone();
    recompute_norm_stats(&mut model.store, &train, batch_size, |g, x| {
        net.forward(g, x).map(|_| ())
    })?;
    Ok(Checkpoint::from_store(&model.store, avg.meta))
}
