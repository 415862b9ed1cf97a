//! Assembly of the detector, the restoration network and the bridge into the
//! trainable variants compared in the ablation ladder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::check_side;
use crate::error::{R2dError, Result};
use crate::fcsd::{Detector, DetectorConfig, DetectorLayout, Injections, ScaleOutputs};
use crate::nn::{Graph, ParamStore, Var};
use crate::restoration::{BridgeKind, Cfl, UNet, UNetConfig};

pub const DETECTOR_PREFIX: &str = "det";
pub const UNET_PREFIX: &str = "unet";
pub const CFL_PREFIX: &str = "cfl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchMode {
    BbOnly,
    BbCcd,
    BbFcd,
    #[serde(alias = "fcsd_only")]
    BbCcdFcd,
    R2dNoCfl,
    R2dFull,
}

impl ArchMode {
    pub const ALL: [ArchMode; 6] = [
        ArchMode::BbOnly,
        ArchMode::BbCcd,
        ArchMode::BbFcd,
        ArchMode::BbCcdFcd,
        ArchMode::R2dNoCfl,
        ArchMode::R2dFull,
    ];

    pub fn layout(self) -> DetectorLayout {
        match self {
            ArchMode::BbOnly => DetectorLayout {
                ccd: false,
                fcd: false,
            },
            ArchMode::BbCcd => DetectorLayout {
                ccd: true,
                fcd: false,
            },
            ArchMode::BbFcd => DetectorLayout {
                ccd: false,
                fcd: true,
            },
            _ => DetectorLayout {
                ccd: true,
                fcd: true,
            },
        }
    }

    pub fn bridge(self) -> Option<BridgeKind> {
        match self {
            ArchMode::R2dNoCfl => Some(BridgeKind::Direct),
            ArchMode::R2dFull => Some(BridgeKind::Full),
            _ => None,
        }
    }

    pub fn uses_restoration(self) -> bool {
        self.bridge().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchMode::BbOnly => "bb_only",
            ArchMode::BbCcd => "bb_ccd",
            ArchMode::BbFcd => "bb_fcd",
            ArchMode::BbCcdFcd => "bb_ccd_fcd",
            ArchMode::R2dNoCfl => "r2d_no_cfl",
            ArchMode::R2dFull => "r2d_full",
        }
    }
}

impl fmt::Display for ArchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchMode {
    type Err = R2dError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fcsd_only" {
            return Ok(ArchMode::BbCcdFcd);
        }
        ArchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| R2dError::Config(format!("unknown mode {s}")))
    }
}

/// Everything that determines the parameter layout and forward computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub mode: ArchMode,
    /// Training and inference resolution.
    pub side: usize,
    pub detector: DetectorConfig,
    pub unet: UNetConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            mode: ArchMode::BbCcdFcd,
            side: 160,
            detector: DetectorConfig::default(),
            unet: UNetConfig::default(),
        }
    }
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(32) {
            return Err(R2dError::Config(format!(
                "arch.side must be a positive multiple of 32, got {}",
                self.side
            )));
        }
        self.detector.backbone.validate()?;
        self.detector.fcd.validate()?;
        if self.detector.ccd.width == 0 {
            return Err(R2dError::Config(
                "arch.detector.ccd.width must be positive".into(),
            ));
        }
        self.unet.validate()
    }

    pub fn fingerprint(&self) -> String {
        sha256_json(self)
    }
}

/// Fingerprint of a stand-alone restoration network.
pub fn unet_fingerprint(cfg: &UNetConfig) -> String {
    sha256_json(&("unet", cfg))
}

#[derive(Clone, Debug)]
pub struct R2dNet {
    pub config: ArchConfig,
    pub detector: Detector,
    pub unet: Option<UNet>,
    pub cfl: Option<Cfl>,
}

pub struct ForwardOutput {
    pub det: ScaleOutputs,
    pub restored: Option<Var>,
}

impl R2dNet {
    /// Builds the network; the detector is initialized first so a variant
    /// with the restoration branch shares its detector weights with the
    /// plain detector for the same seed.
    pub fn new(store: &mut ParamStore, config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let detector = Detector::new(
            store,
            DETECTOR_PREFIX,
            &config.detector,
            config.mode.layout(),
            &mut rng,
        );
        let (unet, cfl) = match config.mode.bridge() {
            Some(kind) => {
                let unet = UNet::new(store, UNET_PREFIX, &config.unet, &mut rng);
                let uc = config.unet.channels();
                let bc = config.detector.backbone.channels;
                let cfl = Cfl::new(
                    store,
                    CFL_PREFIX,
                    [uc[1], uc[4]],
                    [bc[1], bc[4]],
                    kind,
                    &mut rng,
                );
                (Some(unet), Some(cfl))
            }
            None => (None, None),
        };
        Ok(R2dNet {
            config: config.clone(),
            detector,
            unet,
            cfl,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<ForwardOutput> {
        let [_, _, h, w] = g.dims(image);
        check_side(h, w)?;
        match (&self.unet, &self.cfl) {
            (Some(unet), Some(cfl)) => {
                let u = unet.forward(g, image)?;
                let inj = cfl.forward(g, u.r1, u.r2, [(h / 4, w / 4), (h / 32, w / 32)])?;
                let det = self.detector.forward(g, image, Some(inj))?;
                Ok(ForwardOutput {
                    det,
                    restored: Some(u.restored),
                })
            }
            _ => Ok(ForwardOutput {
                det: self.detector.forward(g, image, None)?,
                restored: None,
            }),
        }
    }

    /// Detector forward with caller-supplied injections.
    pub fn forward_injected(
        &self,
        g: &mut Graph,
        image: Var,
        injections: Option<Injections>,
    ) -> Result<ScaleOutputs> {
        self.detector.forward(g, image, injections)
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: R2dNet,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = R2dNet::new(&mut store, config, seed)?;
        Ok(Model { net, store })
    }

    pub fn fingerprint(&self) -> String {
        self.net.config.fingerprint()
    }
}

/// A restoration network on its own, as used in pretraining.
#[derive(Clone, Debug)]
pub struct RestorationModel {
    pub unet: UNet,
    pub store: ParamStore,
}

impl RestorationModel {
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNet::new(&mut store, UNET_PREFIX, config, &mut rng);
        Ok(RestorationModel { unet, store })
    }

    pub fn fingerprint(&self) -> String {
        unet_fingerprint(&self.unet.config)
    }
}
