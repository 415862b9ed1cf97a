//! Shadow detector: coarse context blocks over every backbone tap, a fine
//! context chain that upsamples between convolutions, distraction-aware
//! modulation, per-scale side predictions and a fusion head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureTap};
use crate::error::{R2dError, Result};
use crate::nn::{Conv2d, ConvBnRelu, Graph, Init, ParamStore, Var};

/// Scale applied to He initialization of the prediction heads so the
/// initial logits stay small.
const HEAD_INIT_SCALE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcdConfig {
    pub width: usize,
    pub norm: bool,
}

impl Default for CcdConfig {
    fn default() -> Self {
        CcdConfig {
            width: 64,
            norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcdConfig {
    pub depth: usize,
    pub growth_px: usize,
    pub channels: usize,
    /// Pins the side of the last block's output instead of `+growth_px`.
    pub final_side: Option<usize>,
}

impl Default for FcdConfig {
    fn default() -> Self {
        FcdConfig {
            depth: 4,
            growth_px: 50,
            channels: 32,
            final_side: None,
        }
    }
}

impl FcdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.growth_px < 1 || self.channels < 1 {
            return Err(R2dError::Config(
                "fcd.depth, fcd.growth_px and fcd.channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Output side of the chain for an input of side `l1_side`.
    pub fn output_side(&self, l1_side: usize) -> usize {
        self.final_side
            .unwrap_or(l1_side + self.depth * self.growth_px)
    }

    /// Side after each block.
    pub fn block_sides(&self, l1_side: usize) -> Vec<usize> {
        let mut sides: Vec<usize> = (1..=self.depth)
            .map(|i| l1_side + i * self.growth_px)
            .collect();
        if let Some(s) = self.final_side {
            *sides.last_mut().unwrap() = s;
        }
        sides
    }
}

/// Which detector parts are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorLayout {
    pub ccd: bool,
    pub fcd: bool,
}

/// Two 3x3 conv blocks per tap mapping every tap to a common width.
#[derive(Clone, Debug)]
pub struct Ccd {
    pub blocks: Vec<[ConvBnRelu; 2]>,
}

impl Ccd {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: &[usize; 5],
        cfg: &CcdConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("{prefix}.{}", i + 1);
                [
                    ConvBnRelu::new(
                        store,
                        &format!("{name}.0"),
                        c,
                        cfg.width,
                        3,
                        1,
                        cfg.norm,
                        rng,
                    ),
                    ConvBnRelu::new(
                        store,
                        &format!("{name}.1"),
                        cfg.width,
                        cfg.width,
                        3,
                        1,
                        cfg.norm,
                        rng,
                    ),
                ]
            })
            .collect();
        Ccd { blocks }
    }

    pub fn forward(&self, g: &mut Graph, taps: &[FeatureTap]) -> Vec<Var> {
        self.blocks
            .iter()
            .zip(taps)
            .map(|([a, b], t)| {
                let h = a.forward(g, t.var);
                b.forward(g, h)
            })
            .collect()
    }
}

/// `depth` blocks of `conv3x3 -> bilinear upsample -> relu`.
#[derive(Clone, Debug)]
pub struct Fcd {
    pub convs: Vec<Conv2d>,
    pub config: FcdConfig,
}

impl Fcd {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: &FcdConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = (0..cfg.depth)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { cfg.channels };
                Conv2d::new(
                    store,
                    &format!("{prefix}.{i}"),
                    cin,
                    cfg.channels,
                    3,
                    1,
                    true,
                    Init::Kaiming,
                    rng,
                )
            })
            .collect();
        Fcd {
            convs,
            config: cfg.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, l1: Var) -> Var {
        let side = g.dims(l1)[2];
        let mut x = l1;
        for (conv, s) in self.convs.iter().zip(self.config.block_sides(side)) {
            x = conv.forward(g, x);
            x = g.resize(x, s, s);
            x = g.relu(x);
        }
        x
    }
}

/// Predicts false-positive and false-negative attention maps and modulates
/// the features with `1 + A_fn - A_fp`.
#[derive(Clone, Debug)]
pub struct DsModule {
    pub fp_head: Conv2d,
    pub fn_head: Conv2d,
}

pub struct DsOutput {
    pub ds: Var,
    pub a_fp: Var,
    pub a_fn: Var,
}

impl DsModule {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let fp_head = Conv2d::new(
            store,
            &format!("{prefix}.fp"),
            channels,
            1,
            3,
            1,
            true,
            Init::Kaiming,
            rng,
        );
        let fn_head = Conv2d::new(
            store,
            &format!("{prefix}.fn"),
            channels,
            1,
            3,
            1,
            true,
            Init::Kaiming,
            rng,
        );
        store.param_mut(fp_head.weight).value.scale(HEAD_INIT_SCALE);
        store.param_mut(fn_head.weight).value.scale(HEAD_INIT_SCALE);
        DsModule { fp_head, fn_head }
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> DsOutput {
        let fp = self.fp_head.forward(g, f);
        let a_fp = g.sigmoid(fp);
        let fnl = self.fn_head.forward(g, f);
        let a_fn = g.sigmoid(fnl);
        let diff = g.sub(a_fn, a_fp);
        let m = g.add_scalar(diff, 1.0);
        let ds = g.mul_plane(f, m);
        DsOutput { ds, a_fp, a_fn }
    }
}

/// Per-scale maps fed to the fusion head.
#[derive(Clone, Copy, Debug)]
pub struct ScaleFeatures {
    pub f: Var,
    pub ds: Option<DsVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct DsVars {
    pub ds: Var,
    pub a_fp: Var,
    pub a_fn: Var,
}

/// Predictions of one scale, all at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct ScalePrediction {
    pub f: Var,
    pub ds: Option<Var>,
    pub side: Var,
    pub fp: Option<Var>,
    pub fn_: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ScaleOutputs {
    pub scales: Vec<ScalePrediction>,
    pub final_pred: Var,
}

impl ScaleOutputs {
    /// Every map the fusion head consumed: all `F_i`, then all `DS_i`.
    pub fn fusion_inputs(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.scales.iter().map(|s| s.f).collect();
        v.extend(self.scales.iter().filter_map(|s| s.ds));
        v
    }
}

/// Side heads and the fused head.
///
/// A 1x1 convolution over a concatenation of bilinearly resized maps equals
/// the sum of per-map 1x1 convolutions resized afterwards, because resizing
/// is linear and acts per channel. The per-map form runs each convolution at
/// the map's native resolution.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub side_heads: Vec<Conv2d>,
    pub fuse: Vec<Conv2d>,
}

impl Fusion {
    /// `scale_channels[i]` is `(channels of F_i, has DS_i)`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        scale_channels: &[(usize, bool)],
        rng: &mut impl Rng,
    ) -> Self {
        let mut side_heads = Vec::new();
        for (i, &(c, has_ds)) in scale_channels.iter().enumerate() {
            let cin = if has_ds { 2 * c } else { c };
            let h = Conv2d::new(
                store,
                &format!("{prefix}.side{}", i + 1),
                cin,
                1,
                1,
                1,
                true,
                Init::Kaiming,
                rng,
            );
            store.param_mut(h.weight).value.scale(HEAD_INIT_SCALE);
            side_heads.push(h);
        }
        let mut inputs: Vec<(String, usize)> = scale_channels
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| (format!("f{}", i + 1), c))
            .collect();
        inputs.extend(
            scale_channels
                .iter()
                .enumerate()
                .filter(|(_, &(_, ds))| ds)
                .map(|(i, &(c, _))| (format!("ds{}", i + 1), c)),
        );
        let fuse = inputs
            .iter()
            .enumerate()
            .map(|(j, (name, c))| {
                let h = Conv2d::new(
                    store,
                    &format!("{prefix}.fuse.{name}"),
                    *c,
                    1,
                    1,
                    1,
                    j == 0,
                    Init::Kaiming,
                    rng,
                );
                store.param_mut(h.weight).value.scale(HEAD_INIT_SCALE);
                h
            })
            .collect();
        Fusion { side_heads, fuse }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        scales: &[ScaleFeatures],
        out_h: usize,
        out_w: usize,
    ) -> ScaleOutputs {
        let mut preds = Vec::with_capacity(scales.len());
        for (s, head) in scales.iter().zip(&self.side_heads) {
            let input = match s.ds {
                Some(d) => g.concat(&[s.f, d.ds]),
                None => s.f,
            };
            let logit = head.forward(g, input);
            let logit = g.resize(logit, out_h, out_w);
            let side = g.sigmoid(logit);
            let fp = s.ds.map(|d| g.resize(d.a_fp, out_h, out_w));
            let fn_ = s.ds.map(|d| g.resize(d.a_fn, out_h, out_w));
            preds.push(ScalePrediction {
                f: s.f,
                ds: s.ds.map(|d| d.ds),
                side,
                fp,
                fn_,
            });
        }
        let mut maps: Vec<Var> = scales.iter().map(|s| s.f).collect();
        maps.extend(scales.iter().filter_map(|s| s.ds.map(|d| d.ds)));
        let mut acc: Option<Var> = None;
        for (m, conv) in maps.into_iter().zip(&self.fuse) {
            let l = conv.forward(g, m);
            let l = g.resize(l, out_h, out_w);
            acc = Some(match acc {
                Some(a) => g.add(a, l),
                None => l,
            });
        }
        let final_pred = g.sigmoid(acc.expect("fusion has inputs"));
        ScaleOutputs {
            scales: preds,
            final_pred,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub ccd: CcdConfig,
    pub fcd: FcdConfig,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub backbone: Backbone,
    pub ccd: Option<Ccd>,
    pub fcd: Option<Fcd>,
    pub ds: Vec<Option<DsModule>>,
    pub fusion: Fusion,
    pub layout: DetectorLayout,
}

/// Injections added to the L2 and L5 taps before the detector heads.
#[derive(Clone, Copy, Debug)]
pub struct Injections {
    pub c1: Var,
    pub c2: Var,
}

impl Detector {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &DetectorConfig,
        layout: DetectorLayout,
        rng: &mut impl Rng,
    ) -> Self {
        let backbone = Backbone::new(store, &format!("{prefix}.backbone"), &cfg.backbone, rng);
        let chans = cfg.backbone.channels;
        let ccd = layout
            .ccd
            .then(|| Ccd::new(store, &format!("{prefix}.ccd"), &chans, &cfg.ccd, rng));
        let fcd = layout
            .fcd
            .then(|| Fcd::new(store, &format!("{prefix}.fcd"), chans[0], &cfg.fcd, rng));
        // (channels, has DS) per scale; raw backbone taps get no DS module
        let mut scales: Vec<(usize, bool)> = if layout.ccd {
            vec![(cfg.ccd.width, true); 5]
        } else {
            chans.iter().map(|&c| (c, false)).collect()
        };
        if layout.fcd {
            scales.push((cfg.fcd.channels, true));
        }
        let ds = scales
            .iter()
            .enumerate()
            .map(|(i, &(c, has))| {
                has.then(|| DsModule::new(store, &format!("{prefix}.ds{}", i + 1), c, rng))
            })
            .collect();
        let fusion = Fusion::new(store, &format!("{prefix}.fusion"), &scales, rng);
        Detector {
            backbone,
            ccd,
            fcd,
            ds,
            fusion,
            layout,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.ds.len()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        image: Var,
        injections: Option<Injections>,
    ) -> Result<ScaleOutputs> {
        let [_, _, h, w] = g.dims(image);
        let mut taps = self.backbone.forward(g, image)?;
        if let Some(inj) = injections {
            for (idx, c) in [(1, inj.c1), (4, inj.c2)] {
                let (td, cd) = (g.dims(taps[idx].var), g.dims(c));
                if td != cd {
                    return Err(R2dError::Shape(format!(
                        "injection {cd:?} does not match tap {} {td:?}",
                        taps[idx].name
                    )));
                }
                taps[idx].var = g.add(taps[idx].var, c);
            }
        }
        let mut feats: Vec<Var> = match &self.ccd {
            Some(ccd) => ccd.forward(g, &taps),
            None => taps.iter().map(|t| t.var).collect(),
        };
        if let Some(fcd) = &self.fcd {
            feats.push(fcd.forward(g, taps[0].var));
        }
        let scales: Vec<ScaleFeatures> = feats
            .into_iter()
            .zip(&self.ds)
            .map(|(f, ds)| ScaleFeatures {
                f,
                ds: ds.as_ref().map(|m| {
                    let o = m.forward(g, f);
                    DsVars {
                        ds: o.ds,
                        a_fp: o.a_fp,
                        a_fn: o.a_fn,
                    }
                }),
            })
            .collect();
        Ok(self.fusion.forward(g, &scales, h, w))
    }
}
