//! Procedural shadow triplets: textured clean image, soft-edged multiplicative
//! shadow, exact mask, and optional dark confounder patches.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_distraction_gt, write_mask, write_rgb, DatasetManifest, ManifestEntry, ShadowSample,
    Split,
};
use crate::error::{R2dError, Result};
use crate::nn::Tensor;

const MAX_LAYOUT_ATTEMPTS: usize = 64;
const MAX_CONFOUNDER_ATTEMPTS: usize = 32;
/// Blur applied to the blob union before re-thresholding, which rounds
/// polygon corners.
const BLOB_SMOOTH_SIGMA: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub side: usize,
    pub n_samples: usize,
    pub n_test: usize,
    pub seed: u64,
    pub attenuation_range: (f32, f32),
    pub blob_count_range: (usize, usize),
    pub blob_area_frac_range: (f32, f32),
    pub confounder_prob: f64,
    pub edge_blur_sigma_range: (f32, f32),
    /// Threshold of the heuristic detector used to derive distraction maps.
    pub heuristic_tau: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            side: 160,
            n_samples: 250,
            n_test: 50,
            seed: 0,
            attenuation_range: (0.3, 0.7),
            blob_count_range: (1, 4),
            blob_area_frac_range: (0.05, 0.35),
            confounder_prob: 0.5,
            edge_blur_sigma_range: (0.5, 2.0),
            heuristic_tau: 0.02,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(R2dError::Config(format!("gen.{m}")));
        let (a_lo, a_hi) = self.attenuation_range;
        let (b_lo, b_hi) = self.blob_count_range;
        let (f_lo, f_hi) = self.blob_area_frac_range;
        let (s_lo, s_hi) = self.edge_blur_sigma_range;
        if self.side < 32 {
            return err("side must be at least 32");
        }
        if !(a_lo > 0.0 && a_lo <= a_hi && a_hi <= 1.0) {
            return err("attenuation_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(1 <= b_lo && b_lo <= b_hi) {
            return err("blob_count_range must satisfy 1 <= lo <= hi");
        }
        if !(f_lo > 0.0 && f_lo <= f_hi && f_hi < 1.0) {
            return err("blob_area_frac_range must satisfy 0 < lo <= hi < 1");
        }
        if !(0.0..=1.0).contains(&self.confounder_prob) {
            return err("confounder_prob must lie in [0, 1]");
        }
        if !(s_lo >= 0.0 && s_lo <= s_hi) {
            return err("edge_blur_sigma_range must satisfy 0 <= lo <= hi");
        }
        if self.heuristic_tau.is_nan() || self.heuristic_tau <= 0.0 {
            return err("heuristic_tau must be positive");
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Single-channel square plane helpers.
struct Plane {
    side: usize,
    data: Vec<f32>,
}

impl Plane {
    fn zeros(side: usize) -> Self {
        Plane {
            side,
            data: vec![0.0; side * side],
        }
    }

    fn fraction(&self) -> f32 {
        self.data.iter().filter(|&&v| v > 0.5).count() as f32 / self.data.len() as f32
    }

    /// Separable Gaussian blur truncated at `3 sigma`; borders replicate.
    fn blurred(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return Plane {
                side: self.side,
                data: self.data.clone(),
            };
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f32> = (-r..=r)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let n = self.side as isize;
        let clamp = |i: isize| i.clamp(0, n - 1) as usize;
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..n {
            for x in 0..n {
                tmp[(y * n + x) as usize] = (-r..=r)
                    .map(|d| k[(d + r) as usize] * self.data[(y * n) as usize + clamp(x + d)])
                    .sum();
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..n {
            for x in 0..n {
                out[(y * n + x) as usize] = (-r..=r)
                    .map(|d| k[(d + r) as usize] * tmp[clamp(y + d) * self.side + x as usize])
                    .sum();
            }
        }
        Plane {
            side: self.side,
            data: out,
        }
    }
}

enum Shape {
    Ellipse {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        theta: f32,
    },
    Star {
        vertices: Vec<(f32, f32)>,
    },
}

impl Shape {
    fn random(rng: &mut impl Rng, side: f32, area: f32) -> Shape {
        let cx = uniform(rng, 0.15 * side, 0.85 * side);
        let cy = uniform(rng, 0.15 * side, 0.85 * side);
        if rng.random_bool(0.5) {
            let aspect = uniform(rng, 0.5, 2.0);
            let r = (area / std::f32::consts::PI).sqrt();
            Shape::Ellipse {
                cx,
                cy,
                rx: r * aspect.sqrt(),
                ry: r / aspect.sqrt(),
                theta: uniform(rng, 0.0, std::f32::consts::PI),
            }
        } else {
            let n = rng.random_range(5..=8);
            let phase = uniform(rng, 0.0, std::f32::consts::TAU);
            let radii: Vec<f32> = (0..n).map(|_| uniform(rng, 0.6, 1.0)).collect();
            // polygon area for unit scale, used to hit the requested area
            let step = std::f32::consts::TAU / n as f32;
            let unit: f32 = (0..n)
                .map(|i| 0.5 * radii[i] * radii[(i + 1) % n] * step.sin())
                .sum();
            let scale = (area / unit).sqrt();
            let vertices = (0..n)
                .map(|i| {
                    let t = phase + i as f32 * step;
                    (
                        cx + scale * radii[i] * t.cos(),
                        cy + scale * radii[i] * t.sin(),
                    )
                })
                .collect();
            Shape::Star { vertices }
        }
    }

    fn contains(&self, px: f32, py: f32) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                theta,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let (s, c) = theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Star { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn blob_mask(cfg: &GenConfig, rng: &mut impl Rng) -> Result<Plane> {
    let side = cfg.side;
    let (f_lo, f_hi) = cfg.blob_area_frac_range;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let count = rng.random_range(cfg.blob_count_range.0..=cfg.blob_count_range.1);
        let target = uniform(rng, f_lo, f_hi);
        let total = target * (side * side) as f32;
        let shares: Vec<f32> = (0..count).map(|_| uniform(rng, 0.5, 1.5)).collect();
        let share_sum: f32 = shares.iter().sum();
        let shapes: Vec<Shape> = shares
            .iter()
            .map(|s| Shape::random(rng, side as f32, total * s / share_sum))
            .collect();
        let mut raw = Plane::zeros(side);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if shapes.iter().any(|s| s.contains(px, py)) {
                    raw.data[y * side + x] = 1.0;
                }
            }
        }
        let mut mask = raw.blurred(BLOB_SMOOTH_SIGMA);
        mask.data
            .iter_mut()
            .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        let frac = mask.fraction();
        if frac >= f_lo && frac <= f_hi {
            return Ok(mask);
        }
    }
    Err(R2dError::Generation(format!(
        "no blob layout with area fraction in [{f_lo}, {f_hi}] after {MAX_LAYOUT_ATTEMPTS} attempts"
    )))
}

fn background(side: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f32; 3] = std::array::from_fn(|_| uniform(rng, 0.35, 0.85));
    let grad: [(f32, f32); 3] =
        std::array::from_fn(|_| (uniform(rng, -0.25, 0.25), uniform(rng, -0.25, 0.25)));
    let mut img = Tensor::from_fn([1, 3, side, side], |_, c, y, x| {
        let u = x as f32 / side as f32 - 0.5;
        let v = y as f32 / side as f32 - 0.5;
        base[c] + grad[c].0 * u + grad[c].1 * v
    });
    let n_rect = rng.random_range(2..=5);
    for _ in 0..n_rect {
        let w = rng.random_range(side / 10..=side / 3);
        let h = rng.random_range(side / 10..=side / 3);
        let x0 = rng.random_range(0..side - w);
        let y0 = rng.random_range(0..side - h);
        let color: [f32; 3] = std::array::from_fn(|_| uniform(rng, 0.3, 1.0));
        for (c, &col) in color.iter().enumerate() {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let i = img.index(0, c, y, x);
                    img.data_mut()[i] = col;
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + uniform(rng, -0.04, 0.04)).clamp(0.1, 1.0);
    }
    img
}

/// Paints a flat dark patch outside the blurred shadow support. The patch is
/// written into both images so it carries no residual.
fn paint_confounder(
    clean: &mut Tensor,
    image: &mut Tensor,
    support: &Plane,
    cfg: &GenConfig,
    rng: &mut impl Rng,
) {
    let side = cfg.side;
    for _ in 0..MAX_CONFOUNDER_ATTEMPTS {
        let w = rng.random_range(side / 12..=side / 5);
        let h = rng.random_range(side / 12..=side / 5);
        let x0 = rng.random_range(0..side - w);
        let y0 = rng.random_range(0..side - h);
        // one pixel of clearance around the patch
        let ys = y0.saturating_sub(1)..(y0 + h + 1).min(side);
        let clear = ys
            .flat_map(|y| (x0.saturating_sub(1)..(x0 + w + 1).min(side)).map(move |x| (y, x)))
            .all(|(y, x)| support.data[y * side + x] == 0.0);
        if !clear {
            continue;
        }
        let a = uniform(rng, cfg.attenuation_range.0, cfg.attenuation_range.1);
        for c in 0..3 {
            let mut mean = 0.0;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mean += clean.at(0, c, y, x);
                }
            }
            let value = a * mean / (w * h) as f32;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let i = clean.index(0, c, y, x);
                    clean.data_mut()[i] = value;
                    image.data_mut()[i] = value;
                }
            }
        }
        return;
    }
}

/// Predicts shadow where the channel-mean darkening exceeds `tau`.
pub fn heuristic_detector(image: &Tensor, clean: &Tensor, tau: f32) -> Tensor {
    let (h, w) = (image.height(), image.width());
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        let d: f32 = (0..3)
            .map(|c| clean.at(0, c, y, x) - image.at(0, c, y, x))
            .sum::<f32>()
            / 3.0;
        if d > tau {
            1.0
        } else {
            0.0
        }
    })
}

/// One triplet drawn from `rng`; distraction maps come from the heuristic
/// detector.
pub fn generate_triplet(cfg: &GenConfig, id: &str, rng: &mut impl Rng) -> Result<ShadowSample> {
    cfg.validate()?;
    let side = cfg.side;
    let mut clean = background(side, rng);
    let mask = blob_mask(cfg, rng)?;
    let a = uniform(rng, cfg.attenuation_range.0, cfg.attenuation_range.1);
    let sigma = uniform(
        rng,
        cfg.edge_blur_sigma_range.0,
        cfg.edge_blur_sigma_range.1,
    );
    let soft = mask.blurred(sigma);
    let mut image = clean.clone();
    let plane = side * side;
    for c in 0..3 {
        for i in 0..plane {
            let s = soft.data[i];
            if s > 0.0 {
                image.data_mut()[c * plane + i] =
                    clean.data()[c * plane + i] * (1.0 - (1.0 - a) * s);
            }
        }
    }
    if rng.random_bool(cfg.confounder_prob) {
        paint_confounder(&mut clean, &mut image, &soft, cfg, rng);
    }
    let mask = Tensor::from_vec([1, 1, side, side], mask.data);
    let pred = heuristic_detector(&image, &clean, cfg.heuristic_tau);
    let (fp, fnm) = derive_distraction_gt(&pred, &mask, 0.5)?;
    Ok(ShadowSample {
        id: id.to_string(),
        image,
        mask,
        clean: Some(clean),
        fp_map: Some(fp),
        fn_map: Some(fnm),
    })
}

/// Sample `index` of the stream seeded by `cfg.seed`; independent of every
/// other index.
pub fn generate_indexed(cfg: &GenConfig, index: u64) -> Result<ShadowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    generate_triplet(cfg, &format!("synth_{index:05}"), &mut rng)
}

/// Training split uses indices `0..n_samples`, test `n_samples..n_samples+n_test`.
pub fn generate_split(cfg: &GenConfig, split: Split) -> Result<Vec<ShadowSample>> {
    let range = match split {
        Split::Train => 0..cfg.n_samples as u64,
        Split::Test => cfg.n_samples as u64..(cfg.n_samples + cfg.n_test) as u64,
    };
    range.map(|i| generate_indexed(cfg, i)).collect()
}

pub fn shadow_prevalence(samples: &[ShadowSample]) -> f64 {
    let pos: f64 = samples.iter().map(|s| s.mask.sum()).sum();
    let total: usize = samples.iter().map(|s| s.mask.len()).sum();
    pos / total.max(1) as f64
}

/// Writes `<out>/<split>/{images,masks,clean,fp,fn}/<id>.png` and the
/// manifests `<out>/train.json`, `<out>/test.json`.
pub fn write_dataset(cfg: &GenConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let mut paths = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let mut manifest = DatasetManifest::new(out, split);
        for s in generate_split(cfg, split)? {
            let rel = |kind: &str| PathBuf::from(name).join(kind).join(format!("{}.png", s.id));
            let entry = ManifestEntry {
                id: s.id.clone(),
                image: rel("images"),
                mask: rel("masks"),
                clean: Some(rel("clean")),
                fp_map: Some(rel("fp")),
                fn_map: Some(rel("fn")),
            };
            write_rgb(&out.join(&entry.image), &s.image)?;
            write_mask(&out.join(&entry.mask), &s.mask)?;
            write_rgb(
                &out.join(entry.clean.as_ref().unwrap()),
                s.clean.as_ref().unwrap(),
            )?;
            write_mask(
                &out.join(entry.fp_map.as_ref().unwrap()),
                s.fp_map.as_ref().unwrap(),
            )?;
            write_mask(
                &out.join(entry.fn_map.as_ref().unwrap()),
                s.fn_map.as_ref().unwrap(),
            )?;
            manifest.entries.push(entry);
        }
        let path = out.join(format!("{name}.json"));
        manifest.save(&path)?;
        paths.push(path);
    }
    Ok((paths.remove(0), paths.remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            side: 64,
            n_samples: 6,
            n_test: 2,
            seed: 3,
            ..GenConfig::default()
        }
    }

    #[test]
    fn no_attenuation_leaves_image_untouched() {
        let cfg = GenConfig {
            attenuation_range: (1.0, 1.0),
            ..small()
        };
        for i in 0..4 {
            let s = generate_indexed(&cfg, i).unwrap();
            assert_eq!(s.image, *s.clean.as_ref().unwrap());
            assert_eq!(
                heuristic_detector(&s.image, s.clean.as_ref().unwrap(), 0.02).sum(),
                0.0
            );
        }
    }

    #[test]
    fn mask_area_fraction_is_within_bounds() {
        let cfg = small();
        for i in 0..20 {
            let s = generate_indexed(&cfg, i).unwrap();
            let count = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            let frac = count as f32 / (64.0 * 64.0);
            assert!((0.05..=0.35).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_index_independent() {
        let cfg = small();
        assert_eq!(
            generate_indexed(&cfg, 4).unwrap(),
            generate_indexed(&cfg, 4).unwrap()
        );
        assert_ne!(
            generate_indexed(&cfg, 4).unwrap().image,
            generate_indexed(&cfg, 5).unwrap().image
        );
        let a = generate_split(&cfg, Split::Train).unwrap();
        let b = generate_split(&cfg, Split::Train).unwrap();
        assert_eq!(shadow_prevalence(&a), shadow_prevalence(&b));
    }

    #[test]
    fn shadows_only_darken_and_leave_the_outside_exact() {
        let cfg = small();
        for i in 0..10 {
            let s = generate_indexed(&cfg, i).unwrap();
            let clean = s.clean.as_ref().unwrap();
            for (a, b) in s.image.data().iter().zip(clean.data()) {
                assert!(*a <= *b + 1e-6);
            }
            s.validate().unwrap();
        }
    }

    #[test]
    fn outside_support_is_bit_exact() {
        // widest blur and its 3-sigma support, dilated from the emitted mask
        let cfg = GenConfig {
            edge_blur_sigma_range: (2.0, 2.0),
            ..small()
        };
        let r = 6isize;
        for i in 0..6 {
            let s = generate_indexed(&cfg, i).unwrap();
            let clean = s.clean.as_ref().unwrap();
            for y in 0..64isize {
                for x in 0..64isize {
                    let near = (-r..=r).any(|dy| {
                        (-r..=r).any(|dx| {
                            let (yy, xx) = (y + dy, x + dx);
                            (0..64).contains(&yy)
                                && (0..64).contains(&xx)
                                && s.mask.at(0, 0, yy as usize, xx as usize) == 1.0
                        })
                    });
                    if !near {
                        for c in 0..3 {
                            assert_eq!(
                                s.image.at(0, c, y as usize, x as usize),
                                clean.at(0, c, y as usize, x as usize)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn heuristic_matches_hard_edged_mask() {
        let cfg = GenConfig {
            attenuation_range: (0.5, 0.5),
            edge_blur_sigma_range: (0.0, 0.0),
            ..small()
        };
        for i in 0..6 {
            let s = generate_indexed(&cfg, i).unwrap();
            let pred = heuristic_detector(&s.image, s.clean.as_ref().unwrap(), 0.02);
            for y in 1..63 {
                for x in 1..63 {
                    let band = [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dy, dx)| {
                        s.mask.at(0, 0, y + dy - 1, x + dx - 1) != s.mask.at(0, 0, y, x)
                    });
                    if !band {
                        assert_eq!(pred.at(0, 0, y, x), s.mask.at(0, 0, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn confounders_carry_no_residual() {
        let cfg = GenConfig {
            confounder_prob: 1.0,
            ..small()
        };
        let mut painted = 0;
        for i in 0..6 {
            let s = generate_indexed(&cfg, i).unwrap();
            let clean = s.clean.as_ref().unwrap();
            let pred = heuristic_detector(&s.image, clean, 0.02);
            let flat = (0..64 * 64).filter(|&p| {
                let (y, x) = (p / 64, p % 64);
                x + 1 < 64
                    && clean.at(0, 0, y, x) == clean.at(0, 0, y, x + 1)
                    && s.image.at(0, 0, y, x) == clean.at(0, 0, y, x)
            });
            let flat: Vec<usize> = flat.collect();
            if flat.len() > 20 {
                painted += 1;
                assert!(flat.iter().all(|&p| pred.data()[p] == 0.0));
            }
        }
        assert!(painted > 0);
    }

    #[test]
    fn infeasible_area_is_a_generation_error() {
        let cfg = GenConfig {
            blob_area_frac_range: (0.9, 0.95),
            blob_count_range: (1, 1),
            ..small()
        };
        assert!(matches!(
            generate_indexed(&cfg, 0),
            Err(R2dError::Generation(_))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = [
            GenConfig {
                attenuation_range: (0.7, 0.3),
                ..small()
            },
            GenConfig {
                blob_area_frac_range: (0.3, 0.1),
                ..small()
            },
            GenConfig {
                blob_count_range: (0, 2),
                ..small()
            },
            GenConfig {
                confounder_prob: 1.5,
                ..small()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(R2dError::Config(_))));
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (train, test) = write_dataset(&cfg, dir.path()).unwrap();
        let train = DatasetManifest::load(&train).unwrap().load_all().unwrap();
        let test = DatasetManifest::load(&test).unwrap().load_all().unwrap();
        assert_eq!((train.len(), test.len()), (6, 2));
        let direct = generate_indexed(&cfg, 0).unwrap();
        assert_eq!(train[0].mask, direct.mask);
        assert_eq!(train[0].fp_map, direct.fp_map);
        assert_eq!(test[0].id, "synth_00006");
    }

    #[test]
    fn mask_survives_resize_round_trip() {
        use crate::data::resize_sample;
        let cfg = GenConfig {
            side: 128,
            ..small()
        };
        for i in 0..5 {
            let s = generate_indexed(&cfg, i).unwrap();
            let back = resize_sample(&resize_sample(&s, 64).unwrap(), 128).unwrap();
            let (mut inter, mut union) = (0.0, 0.0);
            for (a, b) in s.mask.data().iter().zip(back.mask.data()) {
                inter += a * b;
                union += a + b - a * b;
            }
            assert!(inter / union >= 0.9, "IoU {}", inter / union);
        }
    }
}
