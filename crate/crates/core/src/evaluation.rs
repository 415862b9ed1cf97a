//! Balanced error rate, RMSE, batch inference and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{resize_bilinear, write_mask, write_rgb, ShadowSample};
use crate::error::{R2dError, Result};
use crate::model::{ArchConfig, Model, RestorationModel};
use crate::nn::{Graph, Mode, Tensor};
use crate::restoration::residual_predict;

/// Default threshold of the residual baseline.
pub const RESIDUAL_TAU: f32 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// Error percentages; a class with no pixels contributes zero error.
    pub fn ber(&self) -> Ber {
        let err = |hit: u64, miss: u64| {
            if hit + miss == 0 {
                0.0
            } else {
                100.0 * (1.0 - hit as f64 / (hit + miss) as f64)
            }
        };
        let ber_shadow = err(self.tp, self.fn_);
        let ber_nonshadow = err(self.tn, self.fp);
        Ber {
            ber_shadow,
            ber_nonshadow,
            ber_mean: (ber_shadow + ber_nonshadow) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ber {
    pub ber_shadow: f64,
    pub ber_nonshadow: f64,
    pub ber_mean: f64,
}

/// Pixel counts of `pred >= tau` against `gt > 0.5`.
pub fn count_pixels(pred: &[f32], gt: &[f32], tau: f32) -> Result<Counts> {
    if pred.len() != gt.len() {
        return Err(R2dError::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= tau, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn compute_ber(pred: &Tensor, gt: &Tensor, tau: f32) -> Result<(Ber, Counts)> {
    if pred.dims() != gt.dims() {
        return Err(R2dError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let c = count_pixels(pred.data(), gt.data(), tau)?;
    Ok((c.ber(), c))
}

/// Root-mean-square error on the 0-255 scale.
pub fn compute_rmse(restored: &Tensor, clean: &Tensor) -> Result<f64> {
    if restored.dims() != clean.dims() {
        return Err(R2dError::Shape(format!(
            "restored {:?} vs clean {:?}",
            restored.dims(),
            clean.dims()
        )));
    }
    let sse: f64 = restored
        .data()
        .iter()
        .zip(clean.data())
        .map(|(&a, &b)| {
            let d = 255.0 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    Ok((sse / restored.len().max(1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub id: String,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroSummary {
    #[serde(flatten)]
    pub ber: Ber,
    #[serde(flatten)]
    pub counts: Counts,
}

/// Dataset-level report. `micro` pools pixel counts over images (the
/// headline figure); `macro` averages per-image rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub threshold: f32,
    pub per_image: Vec<ImageCounts>,
    pub micro: MicroSummary,
    #[serde(rename = "macro")]
    pub macro_: Ber,
}

impl BerReport {
    pub fn from_counts(threshold: f32, per_image: Vec<ImageCounts>) -> Self {
        let mut total = Counts::default();
        let mut sums = [0.0f64; 3];
        for im in &per_image {
            total.add(&im.counts);
            let b = im.counts.ber();
            sums[0] += b.ber_shadow;
            sums[1] += b.ber_nonshadow;
            sums[2] += b.ber_mean;
        }
        let n = per_image.len().max(1) as f64;
        BerReport {
            threshold,
            micro: MicroSummary {
                ber: total.ber(),
                counts: total,
            },
            macro_: Ber {
                ber_shadow: sums[0] / n,
                ber_nonshadow: sums[1] / n,
                ber_mean: sums[2] / n,
            },
            per_image,
        }
    }

    /// Headline balanced error rate.
    pub fn ber_mean(&self) -> f64 {
        self.micro.ber.ber_mean
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "threshold {:.3}, {} images",
            self.threshold,
            self.per_image.len()
        );
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>10}",
            "", "BER", "Shadow", "Non-shad."
        );
        for (name, b) in [("micro", &self.micro.ber), ("macro", &self.macro_)] {
            let _ = writeln!(
                s,
                "{:<8} {:>8.2} {:>8.2} {:>10.2}",
                name, b.ber_mean, b.ber_shadow, b.ber_nonshadow
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| R2dError::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| R2dError::io(path, e))
    }
}

/// Scores native-resolution probability maps against the sample masks.
pub fn report_for(samples: &[ShadowSample], preds: &[Tensor], tau: f32) -> Result<BerReport> {
    if samples.len() != preds.len() {
        return Err(R2dError::Shape(format!(
            "{} samples but {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let per_image = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            Ok(ImageCounts {
                id: s.id.clone(),
                counts: compute_ber(p, &s.mask, tau)?.1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BerReport::from_counts(tau, per_image))
}

fn at_side(t: &Tensor, side: usize) -> Tensor {
    if t.height() == side && t.width() == side {
        t.clone()
    } else {
        resize_bilinear(t, side, side)
    }
}

fn back_to(t: Tensor, h: usize, w: usize) -> Tensor {
    if t.height() == h && t.width() == w {
        t
    } else {
        resize_bilinear(&t, h, w)
    }
}

/// Runs `f` over batches of images resized to `side`, returning every
/// per-sample output resized back to its sample's native size.
fn batched<F>(samples: &[ShadowSample], side: usize, batch: usize, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = Tensor::stack(
            &chunk
                .iter()
                .map(|s| at_side(&s.image, side))
                .collect::<Vec<_>>(),
        );
        let y = f(&x)?;
        for (i, s) in chunk.iter().enumerate() {
            out.push(back_to(y.select(i), s.height(), s.width()));
        }
    }
    Ok(out)
}

/// Fused shadow probability maps at native resolution.
pub fn predict(model: &Model, samples: &[ShadowSample], batch: usize) -> Result<Vec<Tensor>> {
    batched(samples, model.net.config.side, batch, |x| {
        let mut g = Graph::new(&model.store, Mode::Eval);
        let xv = g.input(x.clone());
        let out = model.net.forward(&mut g, xv)?;
        Ok(g.value(out.det.final_pred).clone())
    })
}

/// Restored images at native resolution.
pub fn restore(
    model: &RestorationModel,
    samples: &[ShadowSample],
    side: usize,
    batch: usize,
) -> Result<Vec<Tensor>> {
    batched(samples, side, batch, |x| {
        let mut g = Graph::new(&model.store, Mode::Eval);
        let xv = g.input(x.clone());
        let out = model.unet.forward(&mut g, xv)?;
        Ok(g.value(out.restored).clone())
    })
}

/// Where optional per-image artifacts go.
#[derive(Clone, Debug, Default)]
pub struct EvalOutputs<'a> {
    pub report: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
    pub overlays: Option<&'a Path>,
}

/// The image with the contour of the predicted mask drawn in red.
pub fn overlay(image: &Tensor, pred: &Tensor, tau: f32) -> Tensor {
    let (h, w) = (pred.height(), pred.width());
    let on = |y: usize, x: usize| pred.at(0, 0, y, x) >= tau;
    let edge = |y: usize, x: usize| {
        on(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !on(y - 1, x)
                || !on(y + 1, x)
                || !on(y, x - 1)
                || !on(y, x + 1))
    };
    Tensor::from_fn(image.dims(), |n, c, y, x| {
        if edge(y, x) {
            if c == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            image.at(n, c, y, x)
        }
    })
}

fn emit(
    samples: &[ShadowSample],
    preds: &[Tensor],
    report: &BerReport,
    out: &EvalOutputs<'_>,
) -> Result<()> {
    if let Some(p) = out.report {
        report.save(p)?;
    }
    for (s, p) in samples.iter().zip(preds) {
        if let Some(dir) = out.predictions {
            write_mask(&dir.join(format!("{}.png", s.id)), p)?;
        }
        if let Some(dir) = out.overlays {
            write_rgb(
                &dir.join(format!("{}.png", s.id)),
                &overlay(&s.image, p, report.threshold),
            )?;
        }
    }
    Ok(())
}

pub fn evaluate_model(
    model: &Model,
    samples: &[ShadowSample],
    tau: f32,
    batch: usize,
    out: &EvalOutputs<'_>,
) -> Result<BerReport> {
    let preds = predict(model, samples, batch)?;
    let report = report_for(samples, &preds, tau)?;
    emit(samples, &preds, &report, out)?;
    Ok(report)
}

/// Loads `ckpt` into a model for `arch`, checking its fingerprint first.
pub fn model_from_checkpoint(arch: &ArchConfig, ckpt: &Checkpoint) -> Result<Model> {
    ckpt.check_fingerprint(&arch.fingerprint())?;
    let mut model = Model::new(arch, 0)?;
    ckpt.apply_to(&mut model.store, &arch.fingerprint())?;
    Ok(model)
}

fn residual_masks(
    samples: &[ShadowSample],
    restored: &[Tensor],
    tau_r: f32,
) -> Result<Vec<Tensor>> {
    if samples.len() != restored.len() {
        return Err(R2dError::Shape(format!(
            "{} samples but {} restorations",
            samples.len(),
            restored.len()
        )));
    }
    samples
        .iter()
        .zip(restored)
        .map(|(s, r)| residual_predict(&s.image, r, tau_r))
        .collect()
}

/// Residual-baseline report for arbitrary restored images, e.g. the clean
/// images themselves.
pub fn evaluate_residual(
    samples: &[ShadowSample],
    restored: &[Tensor],
    tau_r: f32,
) -> Result<BerReport> {
    report_for(samples, &residual_masks(samples, restored, tau_r)?, 0.5)
}

/// Masks from thresholding the difference between input and restored image.
pub fn evaluate_residual_baseline(
    model: &RestorationModel,
    samples: &[ShadowSample],
    side: usize,
    tau_r: f32,
    batch: usize,
    out: &EvalOutputs<'_>,
) -> Result<BerReport> {
    let restored = restore(model, samples, side, batch)?;
    let preds = residual_masks(samples, &restored, tau_r)?;
    let report = report_for(samples, &preds, 0.5)?;
    emit(samples, &preds, &report, out)?;
    Ok(report)
}

/// Mean RMSE over samples with a clean image: `(restored, identity)`.
pub fn restoration_rmse(samples: &[ShadowSample], restored: &[Tensor]) -> Result<(f64, f64)> {
    let mut acc = (0.0, 0.0);
    let mut n = 0;
    for (s, r) in samples.iter().zip(restored) {
        if let Some(c) = &s.clean {
            acc.0 += compute_rmse(r, c)?;
            acc.1 += compute_rmse(&s.image, c)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(R2dError::Integrity(
            "no sample carries a clean image".into(),
        ));
    }
    Ok((acc.0 / n as f64, acc.1 / n as f64))
}
