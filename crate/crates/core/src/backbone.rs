//! Five-stage convolutional feature extractor with taps L1..L5 at strides
//! 2, 4, 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};
use crate::nn::{ConvBnRelu, Graph, ParamStore, Var};

pub const TAP_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

/// A feature map flowing between network parts, with its scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub name: String,
    pub var: Var,
    /// Input side divided by the tap's width.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: [usize; 5],
    pub norm: bool,
    pub trainable: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 32, 64, 128, 256],
            norm: true,
            trainable: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(R2dError::Config(
                "backbone.channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rejects input sides the stride-32 schedule cannot tile.
pub fn check_side(h: usize, w: usize) -> Result<()> {
    if h == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) || h != w {
        return Err(R2dError::Shape(format!(
            "input must be square with a side divisible by 32, got {h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<[ConvBnRelu; 2]>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut stages = Vec::with_capacity(5);
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("{prefix}.stage{}", i + 1);
            stages.push([
                ConvBnRelu::new(store, &format!("{name}.0"), cin, c, 3, 2, config.norm, rng),
                ConvBnRelu::new(store, &format!("{name}.1"), c, c, 3, 1, config.norm, rng),
            ]);
            cin = c;
        }
        if !config.trainable {
            store.set_trainable(&format!("{prefix}."), false);
        }
        Backbone {
            stages,
            config: config.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<FeatureTap>> {
        let [_, c, h, w] = g.dims(image);
        if c != 3 {
            return Err(R2dError::Shape(format!(
                "backbone expects 3 input channels, got {c}"
            )));
        }
        check_side(h, w)?;
        let mut x = image;
        let mut taps = Vec::with_capacity(5);
        for (i, [a, b]) in self.stages.iter().enumerate() {
            x = a.forward(g, x);
            x = b.forward(g, x);
            taps.push(FeatureTap {
                name: format!("L{}", i + 1),
                var: x,
                stride: TAP_STRIDES[i],
            });
        }
        Ok(taps)
    }
}
