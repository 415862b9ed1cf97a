//! Training objectives with closed-form gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each prediction map, so the caller can seed the network's reverse pass
//! directly. All functions are generic over the float type; training uses
//! `f64` and the finite-difference tests run in `f64` as well.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};

/// Weights of the detection objective: `alpha` scales the shadow term, `beta`
/// the false-positive head and `gamma` the false-negative head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eps_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 2.0,
            gamma: 2.0,
            eps_clamp: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(R2dError::Config("loss weights must be nonnegative".into()));
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 0.01) {
            return Err(R2dError::Config("eps_clamp must lie in (0, 0.01)".into()));
        }
        Ok(())
    }
}

/// How per-pixel terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// How the shadow loss combines the weighted BCE and the distraction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `s + s * d` on the reduced scalars.
    #[default]
    Scalar,
    /// `sum_i (w_i + w_i * d_i)` on per-pixel terms, then reduced.
    PerPixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub composition: Composition,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            composition: Composition::Scalar,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

fn check_len<T>(what: &str, a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(R2dError::Shape(format!(
            "{what}: length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(R2dError::Shape(format!("{what}: empty map")));
    }
    Ok(())
}

fn check_binary<T: Float>(what: &str, y: &[T]) -> Result<()> {
    if y.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(R2dError::Integrity(format!("{what} must be binary")));
    }
    Ok(())
}

/// Class-balancing weights `(a, b)` for positives and negatives of `y`.
///
/// `a = N_neg / N`, `b = N_pos / N`; a map with a single class falls back to
/// `a = b = 0.5`.
pub fn class_weights<T: Float>(y: &[T]) -> (T, T) {
    let pos = y.iter().filter(|&&v| v == T::one()).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        let half = c::<T>(0.5);
        return (half, half);
    }
    let n = c::<T>(y.len() as f64);
    (c::<T>(neg as f64) / n, c::<T>(pos as f64) / n)
}

fn norm<T: Float>(n: usize, reduction: Reduction) -> T {
    match reduction {
        Reduction::Mean => T::one() / c::<T>(n as f64),
        Reduction::Sum => T::one(),
    }
}

/// Per-pixel `(-log x_c, -log(1 - x_c), d/dx log x_c, d/dx log(1 - x_c))`
/// with `x_c` clamped to `[eps, 1 - eps]`; derivatives vanish where the clamp
/// is active.
#[inline]
fn log_terms<T: Float>(x: T, eps: T) -> (T, T, T, T) {
    let hi = T::one() - eps;
    let xc = x.max(eps).min(hi);
    let inside = x > eps && x < hi;
    let (dl, dm) = if inside {
        (T::one() / xc, -T::one() / (T::one() - xc))
    } else {
        (T::zero(), T::zero())
    };
    (-xc.ln(), -(T::one() - xc).ln(), dl, dm)
}

/// One half of [`log_terms`]: `(-log x_c, d/dx log x_c)` when `positive`,
/// else `(-log(1 - x_c), d/dx log(1 - x_c))`.
#[inline]
fn log_term<T: Float>(x: T, eps: T, positive: bool) -> (T, T) {
    let hi = T::one() - eps;
    let xc = x.max(eps).min(hi);
    let inside = x > eps && x < hi;
    if positive {
        (-xc.ln(), if inside { T::one() / xc } else { T::zero() })
    } else {
        (
            -(T::one() - xc).ln(),
            if inside {
                -T::one() / (T::one() - xc)
            } else {
                T::zero()
            },
        )
    }
}

/// Class-balanced binary cross entropy.
pub fn weighted_bce<T: Float>(
    x: &[T],
    y: &[T],
    eps: f64,
    reduction: Reduction,
) -> Result<LossGrad<T>> {
    check_len("weighted_bce", x, y)?;
    check_binary("weighted_bce target", y)?;
    let (a, b) = class_weights(y);
    let k = norm::<T>(x.len(), reduction);
    let eps = c::<T>(eps);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    // targets are binary, so exactly one of the two terms is active
    for (&xi, &yi) in x.iter().zip(y) {
        let pos = yi == T::one();
        let (nl, dl) = log_term(xi, eps, pos);
        let w = if pos { a } else { b };
        value = value + w * nl;
        grad.push(-k * (w * dl));
    }
    Ok(LossGrad {
        value: value * k,
        grad,
    })
}

/// Distraction-aware cross entropy: the positive term is restricted to
/// false-negative pixels and the negative term to false-positive pixels.
pub fn distraction_loss<T: Float>(
    x: &[T],
    y: &[T],
    y_fpd: &[T],
    y_fnd: &[T],
    eps: f64,
    reduction: Reduction,
) -> Result<LossGrad<T>> {
    check_len("distraction_loss", x, y)?;
    check_len("distraction_loss fp map", x, y_fpd)?;
    check_len("distraction_loss fn map", x, y_fnd)?;
    check_binary("distraction_loss target", y)?;
    check_binary("distraction_loss fp map", y_fpd)?;
    check_binary("distraction_loss fn map", y_fnd)?;
    let (a, b) = class_weights(y);
    let k = norm::<T>(x.len(), reduction);
    let eps = c::<T>(eps);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let wp = a * y_fnd[i] * y[i];
        let wn = b * y_fpd[i] * (T::one() - y[i]);
        if wp == T::zero() && wn == T::zero() {
            grad.push(T::zero());
            continue;
        }
        let pos = wp != T::zero();
        let (nl, dl) = log_term(x[i], eps, pos);
        let w = if pos { wp } else { wn };
        value = value + w * nl;
        grad.push(-k * (w * dl));
    }
    Ok(LossGrad {
        value: value * k,
        grad,
    })
}

/// `L_W + L_W * L_DS`.
pub fn shadow_loss<T: Float>(
    x: &[T],
    y: &[T],
    y_fpd: &[T],
    y_fnd: &[T],
    cfg: &LossConfig,
) -> Result<LossGrad<T>> {
    let eps = cfg.weights.eps_clamp;
    match cfg.composition {
        Composition::Scalar => {
            let s = weighted_bce(x, y, eps, cfg.reduction)?;
            let d = distraction_loss(x, y, y_fpd, y_fnd, eps, cfg.reduction)?;
            let grad = s
                .grad
                .iter()
                .zip(&d.grad)
                .map(|(&gs, &gd)| gs * (T::one() + d.value) + s.value * gd)
                .collect();
            Ok(LossGrad {
                value: s.value + s.value * d.value,
                grad,
            })
        }
        Composition::PerPixel => {
            // per-pixel terms are the Sum-reduced losses of single pixels
            check_len("shadow_loss", x, y)?;
            let s = weighted_bce(x, y, eps, Reduction::Sum)?;
            let d = distraction_loss(x, y, y_fpd, y_fnd, eps, Reduction::Sum)?;
            let (a, b) = class_weights(y);
            let k = norm::<T>(x.len(), cfg.reduction);
            let epsc = c::<T>(eps);
            let mut value = T::zero();
            let mut grad = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                let (nl, nm, _, _) = log_terms(x[i], epsc);
                let w = a * y[i] * nl + b * (T::one() - y[i]) * nm;
                let ds = a * y_fnd[i] * y[i] * nl + b * y_fpd[i] * (T::one() - y[i]) * nm;
                value = value + w + w * ds;
                // s.grad / d.grad hold d(w_i)/dx_i and d(ds_i)/dx_i
                grad.push(k * (s.grad[i] * (T::one() + ds) + w * d.grad[i]));
            }
            Ok(LossGrad {
                value: value * k,
                grad,
            })
        }
    }
}

/// Predictions of one scale of the detector for a single image.
#[derive(Clone, Copy, Debug)]
pub struct ScaleMaps<'a, T> {
    pub side: &'a [T],
    pub fp: Option<&'a [T]>,
    pub fn_: Option<&'a [T]>,
}

/// Detector predictions for a single image.
#[derive(Clone, Debug)]
pub struct DetectionMaps<'a, T> {
    pub scales: Vec<ScaleMaps<'a, T>>,
    pub final_pred: &'a [T],
}

/// Gradients of [`detection_loss`] in the layout of [`DetectionMaps`].
#[derive(Clone, Debug)]
pub struct DetectionGrad<T> {
    pub value: T,
    pub side: Vec<Vec<T>>,
    pub fp: Vec<Option<Vec<T>>>,
    pub fn_: Vec<Option<Vec<T>>>,
    pub final_pred: Vec<T>,
}

/// `sum_k alpha * L_shadow^k + beta * L_FP^k + gamma * L_FN^k` over every side
/// scale, plus `alpha * L_shadow` on the fused prediction.
///
/// Missing distraction ground truth is treated as all-zero maps.
pub fn detection_loss<T: Float>(
    maps: &DetectionMaps<'_, T>,
    y: &[T],
    y_fpd: Option<&[T]>,
    y_fnd: Option<&[T]>,
    cfg: &LossConfig,
) -> Result<DetectionGrad<T>> {
    let zeros = vec![T::zero(); y.len()];
    let fpd = y_fpd.unwrap_or(&zeros);
    let fnd = y_fnd.unwrap_or(&zeros);
    let w = &cfg.weights;
    let (alpha, beta, gamma) = (c::<T>(w.alpha), c::<T>(w.beta), c::<T>(w.gamma));
    let scaled = |g: Vec<T>, k: T| g.into_iter().map(|v| v * k).collect::<Vec<T>>();

    let mut value = T::zero();
    let mut out = DetectionGrad {
        value: T::zero(),
        side: Vec::with_capacity(maps.scales.len()),
        fp: Vec::with_capacity(maps.scales.len()),
        fn_: Vec::with_capacity(maps.scales.len()),
        final_pred: Vec::new(),
    };
    for s in &maps.scales {
        let sh = shadow_loss(s.side, y, fpd, fnd, cfg)?;
        value = value + alpha * sh.value;
        out.side.push(scaled(sh.grad, alpha));
        match s.fp {
            Some(fp) => {
                let l = weighted_bce(fp, fpd, w.eps_clamp, cfg.reduction)?;
                value = value + beta * l.value;
                out.fp.push(Some(scaled(l.grad, beta)));
            }
            None => out.fp.push(None),
        }
        match s.fn_ {
            Some(fnp) => {
                let l = weighted_bce(fnp, fnd, w.eps_clamp, cfg.reduction)?;
                value = value + gamma * l.value;
                out.fn_.push(Some(scaled(l.grad, gamma)));
            }
            None => out.fn_.push(None),
        }
    }
    let fin = shadow_loss(maps.final_pred, y, fpd, fnd, cfg)?;
    value = value + alpha * fin.value;
    out.final_pred = scaled(fin.grad, alpha);
    out.value = value;
    Ok(out)
}

/// Squared error between restored and clean images.
pub fn restoration_loss<T: Float>(
    restored: &[T],
    clean: Option<&[T]>,
    reduction: Reduction,
) -> Result<LossGrad<T>> {
    let clean =
        clean.ok_or_else(|| R2dError::Integrity("restoration loss needs a clean image".into()))?;
    check_len("restoration_loss", restored, clean)?;
    let k = norm::<T>(restored.len(), reduction);
    let two = c::<T>(2.0);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(restored.len());
    for (&r, &cl) in restored.iter().zip(clean) {
        let d = r - cl;
        value = value + d * d;
        grad.push(two * d * k);
    }
    Ok(LossGrad {
        value: value * k,
        grad,
    })
}

/// `L_det + L_res`.
pub fn r2d_loss<T: Float>(det: T, res: T) -> T {
    det + res
}
