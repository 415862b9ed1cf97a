//! Sample model, image/mask I/O, manifests and augmentation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{R2dError, Result};
use crate::nn::kernels::{resize_plane, AxisTaps};
use crate::nn::Tensor;

/// 8-bit threshold used when binarizing mask files.
pub const MASK_THRESHOLD_U8: u8 = 128;

/// One training or evaluation unit.
///
/// Images are `[1, 3, H, W]` tensors in `[0, 1]`; masks and distraction maps
/// are `[1, 1, H, W]` tensors with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub clean: Option<Tensor>,
    pub fp_map: Option<Tensor>,
    pub fn_map: Option<Tensor>,
}

impl ShadowSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Check the shape, binarity and distraction-support invariants.
    pub fn validate(&self) -> Result<()> {
        let [n, c, h, w] = self.image.dims();
        if n != 1 || c != 3 {
            return Err(R2dError::Integrity(format!(
                "{}: image must be 1x3xHxW",
                self.id
            )));
        }
        let plane = [1, 1, h, w];
        if self.mask.dims() != plane {
            return Err(R2dError::Integrity(format!(
                "{}: mask {:?} does not match image {h}x{w}",
                self.id,
                self.mask.dims()
            )));
        }
        if let Some(clean) = &self.clean {
            if clean.dims() != self.image.dims() {
                return Err(R2dError::Integrity(format!(
                    "{}: clean image size mismatch",
                    self.id
                )));
            }
        }
        for (name, m) in [
            ("mask", Some(&self.mask)),
            ("fp_map", self.fp_map.as_ref()),
            ("fn_map", self.fn_map.as_ref()),
        ] {
            let Some(m) = m else { continue };
            if m.dims() != plane {
                return Err(R2dError::Integrity(format!(
                    "{}: {name} size mismatch",
                    self.id
                )));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(R2dError::Integrity(format!(
                    "{}: {name} is not binary",
                    self.id
                )));
            }
        }
        let mask = self.mask.data();
        if let Some(fp) = &self.fp_map {
            if fp.data().iter().zip(mask).any(|(&f, &m)| f * m != 0.0) {
                return Err(R2dError::Integrity(format!(
                    "{}: fp_map overlaps the shadow mask",
                    self.id
                )));
            }
        }
        if let Some(fnm) = &self.fn_map {
            if fnm
                .data()
                .iter()
                .zip(mask)
                .any(|(&f, &m)| f * (1.0 - m) != 0.0)
            {
                return Err(R2dError::Integrity(format!(
                    "{}: fn_map lies outside the shadow mask",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Paths are relative to the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fn_map: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetManifest {
            root: root.into(),
            split,
            entries: Vec::new(),
        }
    }

    /// Read a manifest and check that ids are unique and every file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| R2dError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(R2dError::Integrity(format!("duplicate sample id {}", e.id)));
            }
            for p in [
                Some(&e.image),
                Some(&e.mask),
                e.clean.as_ref(),
                e.fp_map.as_ref(),
                e.fn_map.as_ref(),
            ]
            .into_iter()
            .flatten()
            {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(R2dError::Load {
                        path: full,
                        msg: "file does not exist".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| R2dError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load_all(&self) -> Result<Vec<ShadowSample>> {
        self.entries.iter().map(|e| load_sample(self, e)).collect()
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(R2dError::Load {
            path: path.to_path_buf(),
            msg: "file does not exist".into(),
        });
    }
    image::open(path).map_err(|source| R2dError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            if p.0[0] >= MASK_THRESHOLD_U8 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec([1, 1, h as usize, w as usize], data))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.height(), t.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_u8(t.at(0, 0, y, x)),
            to_u8(t.at(0, 1, y, x)),
            to_u8(t.at(0, 2, y, x)),
        ])
    })
}

/// Grayscale 8-bit rendering of a single-channel map in `[0, 1]`.
pub fn plane_to_gray(t: &Tensor) -> GrayImage {
    let (h, w) = (t.height(), t.width());
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(t.at(0, 0, y as usize, x as usize))])
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| R2dError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    tensor_to_rgb(t)
        .save(path)
        .map_err(|source| R2dError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Masks persist as 8-bit grayscale PNG: 0 for non-shadow, 255 for shadow.
pub fn write_mask(path: &Path, m: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    plane_to_gray(m)
        .save(path)
        .map_err(|source| R2dError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<ShadowSample> {
    let image = read_rgb(&manifest.resolve(&entry.image))?;
    let mask = read_mask(&manifest.resolve(&entry.mask))?;
    let clean = entry
        .clean
        .as_ref()
        .map(|p| read_rgb(&manifest.resolve(p)))
        .transpose()?;
    let fp_map = entry
        .fp_map
        .as_ref()
        .map(|p| read_mask(&manifest.resolve(p)))
        .transpose()?;
    let fn_map = entry
        .fn_map
        .as_ref()
        .map(|p| read_mask(&manifest.resolve(p)))
        .transpose()?;
    let s = ShadowSample {
        id: entry.id.clone(),
        image,
        mask,
        clean,
        fp_map,
        fn_map,
    };
    s.validate()?;
    Ok(s)
}

/// Bilinear resize of every channel of every sample in `t`.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.dims();
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let (ty, tx) = (AxisTaps::new(h, out_h), AxisTaps::new(w, out_w));
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let plane = out_h * out_w;
    for (i, dst) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        resize_plane(t.channel(i / c, i % c), w, &ty, &tx, dst);
    }
    out
}

/// Nearest-neighbour resize followed by re-binarization at 0.5.
pub fn resize_nearest_binary(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = t.dims();
    let src = |o: usize, inp: usize, out: usize| {
        (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1)
    };
    Tensor::from_fn([n, c, out_h, out_w], |ni, ci, y, x| {
        let v = t.at(ni, ci, src(y, h, out_h), src(x, w, out_w));
        if v >= 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

pub fn resize_sample(s: &ShadowSample, side: usize) -> Result<ShadowSample> {
    if side < 32 {
        return Err(R2dError::Config(format!(
            "resize side {side} is below the minimum of 32"
        )));
    }
    let mask = resize_nearest_binary(&s.mask, side, side);
    let fp_map = s.fp_map.as_ref().map(|m| {
        let r = resize_nearest_binary(m, side, side);
        mask_and_not(&r, &mask)
    });
    let fn_map = s.fn_map.as_ref().map(|m| {
        let r = resize_nearest_binary(m, side, side);
        mask_and(&r, &mask)
    });
    Ok(ShadowSample {
        id: s.id.clone(),
        image: resize_bilinear(&s.image, side, side),
        clean: s.clean.as_ref().map(|c| resize_bilinear(c, side, side)),
        mask,
        fp_map,
        fn_map,
    })
}

fn mask_and(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_vec(
        a.dims(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

fn mask_and_not(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_vec(
        a.dims(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x * (1.0 - y))
            .collect(),
    )
}

pub fn flip_tensor(t: &Tensor) -> Tensor {
    let w = t.width();
    Tensor::from_fn(t.dims(), |n, c, y, x| t.at(n, c, y, w - 1 - x))
}

/// Horizontal mirror of every tensor of the sample.
pub fn flip_sample(s: &ShadowSample) -> ShadowSample {
    ShadowSample {
        id: s.id.clone(),
        image: flip_tensor(&s.image),
        mask: flip_tensor(&s.mask),
        clean: s.clean.as_ref().map(flip_tensor),
        fp_map: s.fp_map.as_ref().map(flip_tensor),
        fn_map: s.fn_map.as_ref().map(flip_tensor),
    }
}

/// Joint horizontal flip with probability 0.5.
pub fn augment_flip(s: &ShadowSample, rng: &mut impl Rng) -> ShadowSample {
    if rng.random_bool(0.5) {
        flip_sample(s)
    } else {
        s.clone()
    }
}

/// False-positive and false-negative maps of `pred` (binarized at `tau`)
/// against the ground truth `gt`.
pub fn derive_distraction_gt(pred: &Tensor, gt: &Tensor, tau: f32) -> Result<(Tensor, Tensor)> {
    if pred.dims() != gt.dims() {
        return Err(R2dError::Integrity(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut fp = Vec::with_capacity(pred.len());
    let mut fnm = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pb = p >= tau;
        let gb = g >= 0.5;
        fp.push(if pb && !gb { 1.0 } else { 0.0 });
        fnm.push(if !pb && gb { 1.0 } else { 0.0 });
    }
    Ok((
        Tensor::from_vec(pred.dims(), fp),
        Tensor::from_vec(pred.dims(), fnm),
    ))
}
