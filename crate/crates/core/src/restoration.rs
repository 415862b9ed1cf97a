//! Restoration U-Net, the complementary feature bridge into the detector, and
//! the residual-thresholding baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::check_side;
use crate::error::{R2dError, Result};
use crate::fcsd::Injections;
use crate::nn::{BatchNorm2d, Conv2d, Graph, Init, ParamStore, Tensor, Var};

/// Input clamp before the logit of the residual head.
const LOGIT_CLAMP: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderOrder {
    #[default]
    ConvNormReluPool,
    ConvPoolNormRelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// `sigmoid(logit(image) + conv)`, identity at zero init.
    #[default]
    Residual,
    /// `sigmoid(conv)`.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub enc_channels: [usize; 5],
    /// Divides every width; 1 keeps the nominal filter counts.
    pub width_divisor: usize,
    pub encoder_order: EncoderOrder,
    pub head: OutputHead,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            enc_channels: [32, 64, 128, 256, 512],
            width_divisor: 2,
            encoder_order: EncoderOrder::ConvNormReluPool,
            head: OutputHead::Residual,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 || self.enc_channels.iter().any(|&c| c < self.width_divisor) {
            return Err(R2dError::Config(
                "unet.enc_channels must be >= unet.width_divisor > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 5] {
        self.enc_channels.map(|c| c / self.width_divisor)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<EncoderLevel>,
    dec: Vec<DecoderLevel>,
    head: Conv2d,
    pub config: UNetConfig,
}

pub struct UNetOutput {
    pub restored: Var,
    /// Encoder level-2 output, stride 4.
    pub r1: Var,
    /// Encoder level-5 output, stride 32.
    pub r2: Var,
}

impl UNet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &UNetConfig, rng: &mut impl Rng) -> Self {
        let ch = cfg.channels();
        let mut enc = Vec::with_capacity(5);
        let mut cin = 3;
        for (l, &c) in ch.iter().enumerate() {
            let name = format!("{prefix}.enc{}", l + 1);
            enc.push(EncoderLevel {
                conv: Conv2d::new(
                    store,
                    &format!("{name}.conv"),
                    cin,
                    c,
                    3,
                    1,
                    false,
                    Init::Kaiming,
                    rng,
                ),
                bn: BatchNorm2d::new(store, &format!("{name}.bn"), c),
            });
            cin = c;
        }
        // decoder level l consumes level l+1's output (or the bottleneck)
        // and concatenates encoder skip l
        let mut dec = Vec::with_capacity(5);
        for l in (0..5).rev() {
            let cin = if l == 4 { ch[4] } else { 2 * ch[l + 1] };
            let name = format!("{prefix}.dec{}", l + 1);
            dec.push(DecoderLevel {
                conv: Conv2d::new(
                    store,
                    &format!("{name}.conv"),
                    cin,
                    ch[l],
                    3,
                    1,
                    false,
                    Init::Kaiming,
                    rng,
                ),
                bn: BatchNorm2d::new(store, &format!("{name}.bn"), ch[l]),
            });
        }
        let init = match cfg.head {
            OutputHead::Residual => Init::Zeros,
            OutputHead::Direct => Init::Kaiming,
        };
        let head = Conv2d::new(
            store,
            &format!("{prefix}.head"),
            2 * ch[0],
            3,
            3,
            1,
            true,
            init,
            rng,
        );
        UNet {
            enc,
            dec,
            head,
            config: cfg.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<UNetOutput> {
        let [_, c, h, w] = g.dims(image);
        if c != 3 {
            return Err(R2dError::Shape(format!(
                "restoration expects 3 channels, got {c}"
            )));
        }
        check_side(h, w)?;
        let mut x = image;
        let mut skips = Vec::with_capacity(5);
        let mut outs = Vec::with_capacity(5);
        for lvl in &self.enc {
            let conv = lvl.conv.forward(g, x);
            let (skip, out) = match self.config.encoder_order {
                EncoderOrder::ConvNormReluPool => {
                    let n = lvl.bn.forward(g, conv);
                    let s = g.relu(n);
                    (s, g.max_pool2(s))
                }
                EncoderOrder::ConvPoolNormRelu => {
                    let s = g.relu(conv);
                    let p = g.max_pool2(conv);
                    let n = lvl.bn.forward(g, p);
                    (s, g.relu(n))
                }
            };
            skips.push(skip);
            outs.push(out);
            x = out;
        }
        let mut y = outs[4];
        for (lvl, l) in self.dec.iter().zip((0..5).rev()) {
            let [_, _, sh, sw] = g.dims(skips[l]);
            let conv = lvl.conv.forward(g, y);
            let up = g.resize(conv, sh, sw);
            let n = lvl.bn.forward(g, up);
            let r = g.relu(n);
            y = g.concat(&[r, skips[l]]);
        }
        let head = self.head.forward(g, y);
        let logit = match self.config.head {
            OutputHead::Residual => {
                let base = g.value(image).map(|v| {
                    let v = v.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                    (v / (1.0 - v)).ln()
                });
                let base = g.input(base);
                g.add(base, head)
            }
            OutputHead::Direct => head,
        };
        let restored = g.sigmoid(logit);
        Ok(UNetOutput {
            restored,
            r1: outs[1],
            r2: outs[4],
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeKind {
    /// 1x1 projection, 3x3 conv, resize.
    #[default]
    Full,
    /// 1x1 projection and resize only.
    Direct,
}

/// Source levels are fixed to encoder levels 2 and 5, targets to taps L2 and L5.
#[derive(Clone, Debug)]
pub struct Cfl {
    proj: [Conv2d; 2],
    refine: Option<[Conv2d; 2]>,
}

impl Cfl {
    /// `sources` and `targets` are channel counts of (R1, R2) and (L2, L5).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sources: [usize; 2],
        targets: [usize; 2],
        kind: BridgeKind,
        rng: &mut impl Rng,
    ) -> Self {
        let proj_init = match kind {
            BridgeKind::Full => Init::Kaiming,
            BridgeKind::Direct => Init::Zeros,
        };
        let proj = [0, 1].map(|i| {
            Conv2d::new(
                store,
                &format!("{prefix}.proj{}", i + 1),
                sources[i],
                targets[i],
                1,
                1,
                true,
                proj_init,
                rng,
            )
        });
        let refine = (kind == BridgeKind::Full).then(|| {
            [0, 1].map(|i| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.refine{}", i + 1),
                    targets[i],
                    targets[i],
                    3,
                    1,
                    true,
                    Init::Zeros,
                    rng,
                )
            })
        });
        Cfl { proj, refine }
    }

    /// `targets` holds the `(h, w)` of L2 and L5.
    pub fn forward(
        &self,
        g: &mut Graph,
        r1: Var,
        r2: Var,
        targets: [(usize, usize); 2],
    ) -> Result<Injections> {
        let mut out = [r1, r2];
        for i in 0..2 {
            let cin = g.dims(out[i])[1];
            if cin != self.proj[i].in_channels {
                return Err(R2dError::Shape(format!(
                    "bridge source {} has {cin} channels, expected {}",
                    i + 1,
                    self.proj[i].in_channels
                )));
            }
            let mut x = self.proj[i].forward(g, out[i]);
            if let Some(refine) = &self.refine {
                x = refine[i].forward(g, x);
            }
            out[i] = g.resize(x, targets[i].0, targets[i].1);
        }
        Ok(Injections {
            c1: out[0],
            c2: out[1],
        })
    }
}

/// Marks pixels whose channel-mean residual magnitude exceeds `tau`.
pub fn residual_predict(image: &Tensor, restored: &Tensor, tau: f32) -> Result<Tensor> {
    if image.dims() != restored.dims() || image.channels() != 3 {
        return Err(R2dError::Shape(format!(
            "residual needs matching 3-channel images, got {:?} and {:?}",
            image.dims(),
            restored.dims()
        )));
    }
    let [n, _, h, w] = image.dims();
    Ok(Tensor::from_fn([n, 1, h, w], |ni, _, y, x| {
        let r: f32 = (0..3)
            .map(|c| image.at(ni, c, y, x) - restored.at(ni, c, y, x))
            .sum::<f32>()
            / 3.0;
        if r.abs() > tau {
            1.0
        } else {
            0.0
        }
    }))
}
