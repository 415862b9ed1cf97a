//! Receptive-field arithmetic for conv/pool/upsample chains and its
//! empirical counterpart measured from input gradients.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};
use crate::fcsd::DetectorConfig;
use crate::nn::{Graph, Mode, ParamStore, Tensor};

/// Gradient magnitudes at or below this count as outside the field.
pub const GRAD_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv { k: usize, s: usize },
    Pool { factor: usize },
    Upsample { factor: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    pub fn new(layers: Vec<Layer>) -> Self {
        ArchSpec { layers }
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let ok = match *l {
                Layer::Conv { k, s } => k >= 1 && k % 2 == 1 && s >= 1,
                Layer::Pool { factor } => factor >= 1,
                Layer::Upsample { factor } => factor > 0.0 && factor.is_finite(),
            };
            if !ok {
                return Err(R2dError::Config(format!(
                    "invalid receptive-field layer {l:?}"
                )));
            }
        }
        Ok(())
    }

    /// `n` convolutions of kernel `k` separated by `sep`.
    pub fn alternating(n: usize, k: usize, sep: Layer) -> Self {
        let mut layers = Vec::new();
        for i in 0..n {
            if i > 0 {
                layers.push(sep);
            }
            layers.push(Layer::Conv { k, s: 1 });
        }
        ArchSpec { layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRf {
    pub layer: Layer,
    /// Side of the input region that can influence one output unit.
    pub extent: f64,
    /// Input pixels per output step.
    pub jump: f64,
    /// For convolutions, the kernel's footprint on the input: `k` times the
    /// incoming jump.
    pub footprint: Option<f64>,
}

impl LayerRf {
    pub fn footprint_area(&self) -> Option<f64> {
        self.footprint.map(|f| f * f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfResult {
    pub layers: Vec<LayerRf>,
}

impl RfResult {
    pub fn extent(&self) -> f64 {
        self.layers.last().map_or(1.0, |l| l.extent)
    }

    pub fn jump(&self) -> f64 {
        self.layers.last().map_or(1.0, |l| l.jump)
    }

    /// Footprint of the last convolution.
    pub fn last_footprint(&self) -> Option<f64> {
        self.layers.iter().rev().find_map(|l| l.footprint)
    }
}

/// Bilinear interpolation reads two neighbours per axis, so an upsample
/// smears the field like a 2-tap kernel before dividing the jump.
pub fn theoretical_rf(spec: &ArchSpec) -> RfResult {
    let (mut rf, mut jump) = (1.0f64, 1.0f64);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for &layer in &spec.layers {
        let mut footprint = None;
        match layer {
            Layer::Conv { k, s } => {
                footprint = Some(k as f64 * jump);
                rf += (k as f64 - 1.0) * jump;
                jump *= s as f64;
            }
            Layer::Pool { factor } => jump *= factor as f64,
            Layer::Upsample { factor } => {
                rf += jump;
                jump /= factor;
            }
        }
        layers.push(LayerRf {
            layer,
            extent: rf,
            jump,
            footprint,
        });
    }
    RfResult { layers }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRf {
    /// Bounding-box sides averaged over weight draws.
    pub height: f64,
    pub width: f64,
    pub draws: usize,
}

/// Output side of every layer for a padding-free chain on `side` inputs.
fn chain_sides(spec: &ArchSpec, side: usize) -> Vec<usize> {
    let mut sides = Vec::with_capacity(spec.layers.len());
    let mut s = side;
    for l in &spec.layers {
        s = match *l {
            Layer::Conv { k, s: st } => {
                if s < k {
                    0
                } else {
                    (s - k) / st + 1
                }
            }
            Layer::Pool { factor } => s.div_ceil(factor),
            Layer::Upsample { factor } => (s as f64 * factor).round() as usize,
        };
        sides.push(s);
    }
    sides
}

/// Smallest input side (at least `min_side`) whose padding-free chain output
/// is non-empty.
pub fn min_input_side(spec: &ArchSpec, min_side: usize) -> usize {
    let mut side = min_side.max(1);
    while chain_sides(spec, side).last().copied().unwrap_or(side) == 0 {
        side += 1;
    }
    side
}

/// Gradient support of one output unit of the padding-free, linear version
/// of `spec` on a single-channel `image_size` input, averaged over random
/// weight draws. Pools are realized as plain subsampling. The default output
/// unit is the centre one.
pub fn empirical_rf(
    spec: &ArchSpec,
    image_size: usize,
    output_pixel: Option<(usize, usize)>,
    draws: usize,
    seed: u64,
) -> Result<EmpiricalRf> {
    spec.validate()?;
    let sides = chain_sides(spec, image_size);
    let out_side = sides.last().copied().unwrap_or(image_size);
    if out_side == 0 {
        return Err(R2dError::Shape(format!(
            "input side {image_size} too small for the chain"
        )));
    }
    let (oy, ox) = output_pixel.unwrap_or((out_side / 2, out_side / 2));
    if oy >= out_side || ox >= out_side {
        return Err(R2dError::Shape(format!(
            "output pixel ({oy}, {ox}) outside {out_side}x{out_side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::new();
    let draws = draws.max(1);
    let mut acc = EmpiricalRf {
        draws,
        ..EmpiricalRf::default()
    };
    for _ in 0..draws {
        let mut g = Graph::new(&store, Mode::Eval);
        let input = g.leaf(Tensor::zeros([1, 1, image_size, image_size]));
        let mut x = input;
        for &l in &spec.layers {
            x = match l {
                Layer::Conv { k, s } => {
                    let w =
                        Tensor::from_fn([1, 1, k, k], |_, _, _, _| StandardNormal.sample(&mut rng));
                    let w = g.leaf(w);
                    g.conv2d(x, w, None, s, 0)
                }
                Layer::Pool { factor } => g.subsample(x, factor),
                Layer::Upsample { factor } => {
                    let s = g.dims(x)[2];
                    let t = (s as f64 * factor).round() as usize;
                    g.resize(x, t, t)
                }
            };
        }
        let mut seed_grad = Tensor::zeros(g.dims(x));
        let idx = seed_grad.index(0, 0, oy, ox);
        seed_grad.data_mut()[idx] = 1.0;
        let grads = g.backward(vec![(x, seed_grad)]);
        let (h, w) = match grads.wrt(input) {
            Some(d) => bbox(d, GRAD_EPS),
            None => (0, 0),
        };
        if h == 0 {
            log::warn!("zero input gradient; reporting extent 0");
        }
        acc.height += h as f64;
        acc.width += w as f64;
    }
    acc.height /= draws as f64;
    acc.width /= draws as f64;
    Ok(acc)
}

/// Sides of the tight bounding box of `|t| > eps` over the first plane.
fn bbox(t: &Tensor, eps: f32) -> (usize, usize) {
    let (h, w) = (t.height(), t.width());
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if t.at(0, 0, y, x).abs() > eps {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        (0, 0)
    } else {
        (y1 - y0 + 1, x1 - x0 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfRow {
    pub column: String,
    pub stage: String,
    pub extent: f64,
    pub jump: f64,
    pub footprint: f64,
    pub empirical: f64,
    /// Theory and measurement disagree by more than one pixel.
    pub mismatch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfReport {
    pub side: usize,
    pub rows: Vec<RfRow>,
    pub notes: Vec<String>,
}

impl RfReport {
    pub fn column(&self, name: &str) -> Vec<&RfRow> {
        self.rows.iter().filter(|r| r.column == name).collect()
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Receptive fields at input side {}\n", self.side);
        let _ = writeln!(
            s,
            "| column | stage | extent | jump | footprint | empirical | mismatch |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.4} | {:.3} | {:.1} | {} |",
                r.column,
                r.stage,
                r.extent,
                r.jump,
                r.footprint,
                r.empirical,
                if r.mismatch { "yes" } else { "" }
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "\n{n}");
        }
        s
    }
}

fn backbone_chain(stages: usize) -> Vec<Layer> {
    (0..stages)
        .flat_map(|_| [Layer::Conv { k: 3, s: 2 }, Layer::Conv { k: 3, s: 1 }])
        .collect()
}

/// Theoretical and empirical fields of every backbone tap, coarse-context
/// output and fine-context block of the detector at input side `side`.
pub fn rf_report(det: &DetectorConfig, side: usize, seed: u64) -> Result<RfReport> {
    det.fcd.validate()?;
    let mut chains: Vec<(&str, String, ArchSpec)> = Vec::new();
    for i in 1..=5 {
        chains.push((
            "backbone",
            format!("L{i}"),
            ArchSpec::new(backbone_chain(i)),
        ));
    }
    for i in 1..=5 {
        let mut l = backbone_chain(i);
        l.extend([Layer::Conv { k: 3, s: 1 }, Layer::Conv { k: 3, s: 1 }]);
        chains.push(("ccd", format!("F{i}"), ArchSpec::new(l)));
    }
    let l1 = side / 2;
    let mut fcd = backbone_chain(1);
    let mut prev = l1;
    for (j, s) in det.fcd.block_sides(l1).into_iter().enumerate() {
        fcd.push(Layer::Conv { k: 3, s: 1 });
        let theory = ArchSpec::new(fcd.clone());
        chains.push(("fcd", format!("block{}", j + 1), theory));
        fcd.push(Layer::Upsample {
            factor: s as f64 / prev as f64,
        });
        prev = s;
    }
    let mut rows = Vec::with_capacity(chains.len());
    for (column, stage, spec) in chains {
        let th = theoretical_rf(&spec);
        let extent = th.extent();
        let input = min_input_side(&spec, side.max(extent.ceil() as usize + 8));
        let emp = empirical_rf(&spec, input, None, 3, seed)?;
        rows.push(RfRow {
            column: column.to_string(),
            stage,
            extent,
            jump: th.jump(),
            footprint: th.last_footprint().unwrap_or(0.0),
            empirical: emp.height.max(emp.width),
            mismatch: (emp.height.max(emp.width) - extent.ceil()).abs() > 1.0,
        });
    }
    Ok(RfReport {
        side,
        rows,
        notes: vec![
            "extent: side of the input region feeding one unit; footprint: last kernel size times its incoming jump, i.e. the per-layer field whose square is k*k scaled by the accumulated pooling or upsampling.".into(),
            "Bilinear upsampling counts as a 2-tap smear followed by dividing the jump; empirical values come from padding-free linear chains.".into(),
        ],
    })
}
