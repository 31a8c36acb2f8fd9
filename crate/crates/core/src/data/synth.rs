//! Synthetic defect-dataset generation for desk-scale verification.
//!
//! Writes two categories, `texture_a` and `texture_b`, in the standard
//! layout (`test/good`, `test/defect` + `ground_truth/defect`), each holding
//! textured images of one family with defects injected into half of them.
//! Defects differ from the background in color statistics, not just phase,
//! so a randomly initialized encoder plus trained linear alignment can
//! separate them. Every pixel a defect touches is recorded in its mask, and
//! generation is a pure function of the spec: the same seed reproduces every
//! file bit for bit, and [`synth_sample`] regenerates any sample in memory
//! for verification.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{scan_dataset, DatasetIndex};
use crate::data::images::{save_gray, save_rgb};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Noise,
    Cells,
}

impl TextureFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stripes" => Ok(TextureFamily::Stripes),
            "noise" => Ok(TextureFamily::Noise),
            "cells" => Ok(TextureFamily::Cells),
            other => Err(Error::InvalidConfig(format!(
                "unknown texture family {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectFamily {
    Blob,
    Scratch,
    ColorShift,
}

impl DefectFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "blob" => Ok(DefectFamily::Blob),
            "scratch" | "scratch-line" => Ok(DefectFamily::Scratch),
            "color-shift" | "shift" => Ok(DefectFamily::ColorShift),
            other => Err(Error::InvalidConfig(format!(
                "unknown defect family {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Image count of the `texture_a` category (the training source).
    pub train_count: usize,
    /// Image count of the `texture_b` category (the held-out split).
    pub test_count: usize,
    pub image_size: usize,
    pub texture: TextureFamily,
    pub defect: DefectFamily,
    /// Bounds on the defect pixel count per abnormal image.
    pub defect_size: (usize, usize),
    /// Blend strength of the defect color, in (0, 1].
    pub contrast: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            train_count: 200,
            test_count: 100,
            image_size: 240,
            texture: TextureFamily::Stripes,
            defect: DefectFamily::Blob,
            defect_size: (1200, 6000),
            contrast: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        if self.defect_size.0 == 0 || self.defect_size.0 > self.defect_size.1 {
            return Err(Error::InvalidConfig(
                "defect_size must be a nonempty (min, max) pixel range".into(),
            ));
        }
        if self.defect_size.1 > self.image_size * self.image_size / 2 {
            return Err(Error::InvalidConfig(
                "defect_size max exceeds half the image".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.contrast) || self.contrast == 0.0 {
            return Err(Error::InvalidConfig("contrast must be in (0, 1]".into()));
        }
        Ok(())
    }
}

pub const CATEGORY_TRAIN: &str = "texture_a";
pub const CATEGORY_TEST: &str = "texture_b";

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn sample_rng(spec: &SyntheticSpec, category_idx: u64, sample_idx: u64) -> ChaCha8Rng {
    let stream = splitmix(spec.seed ^ splitmix(category_idx ^ splitmix(sample_idx)));
    ChaCha8Rng::seed_from_u64(stream)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Palette anchor shared by every image of a dataset: a category has a
/// consistent appearance, and the complement of the anchor is the shared
/// defect-color family — the transferable cue between the two categories.
fn palette_anchor(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed_ba5e));
    [
        0.25 + rng.random::<f64>() * 0.3,
        0.25 + rng.random::<f64>() * 0.3,
        0.25 + rng.random::<f64>() * 0.3,
    ]
}

fn render_texture(
    rng: &mut ChaCha8Rng,
    size: usize,
    family: TextureFamily,
    anchor: [f64; 3],
) -> (Tensor, [f64; 3]) {
    let c0 = [
        (anchor[0] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
        (anchor[1] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
        (anchor[2] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
    ];
    let mut c1 = [
        0.2 + rng.random::<f64>() * 0.5,
        0.2 + rng.random::<f64>() * 0.5,
        0.2 + rng.random::<f64>() * 0.5,
    ];
    // Keep the palette within a narrow band so the defect color stands out.
    for ch in 0..3 {
        c1[ch] = c0[ch] + (c1[ch] - c0[ch]) * 0.25;
    }
    let mean = lerp3(c0, c1, 0.5);
    let mut img = Tensor::zeros(&[size, size, 3]);
    match family {
        TextureFamily::Stripes => {
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let freq = 2.0 + rng.random::<f64>() * 4.0;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * dx + y as f64 * dy) / size as f64;
                    let t = 0.5 * (1.0 + (std::f64::consts::TAU * freq * u + phase).sin());
                    let c = lerp3(c0, c1, t);
                    for ch in 0..3 {
                        img.set(&[y, x, ch], c[ch]);
                    }
                }
            }
        }
        TextureFamily::Noise => {
            let cells = 8;
            let grid_vals: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
            let grid = Tensor::from_vec(&[cells, cells], grid_vals);
            let field = bilinear_resize(&grid, size, size);
            for y in 0..size {
                for x in 0..size {
                    let c = lerp3(c0, c1, field.at(&[y, x]));
                    for ch in 0..3 {
                        img.set(&[y, x, ch], c[ch]);
                    }
                }
            }
        }
        TextureFamily::Cells => {
            let count = 10 + (rng.random::<u32>() % 7) as usize;
            let sites: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random::<f64>() * size as f64,
                        rng.random::<f64>() * size as f64,
                        rng.random::<f64>(),
                    )
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (i, &(sy, sx, _)) in sites.iter().enumerate() {
                        let d = (sy - y as f64).powi(2) + (sx - x as f64).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = i;
                        }
                    }
                    let c = lerp3(c0, c1, sites[best].2);
                    for ch in 0..3 {
                        img.set(&[y, x, ch], c[ch]);
                    }
                }
            }
        }
    }
    // Fine per-pixel grain.
    for v in img.data_mut() {
        let noise = (rng.random::<f64>() - 0.5) * 0.02;
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    (img, mean)
}

/// Rasterized defect pixel set plus its color treatment.
struct Defect {
    pixels: Vec<(usize, usize)>,
    color: [f64; 3],
    additive: bool,
}

fn draw_defect(
    rng: &mut ChaCha8Rng,
    size: usize,
    family: DefectFamily,
    size_range: (usize, usize),
    anchor: [f64; 3],
) -> Result<Defect> {
    // A color far from the palette band; the anchor complement plus jitter.
    let color = [
        (1.0 - anchor[0] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
        (1.0 - anchor[1] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
        (1.0 - anchor[2] + (rng.random::<f64>() - 0.5) * 0.1).clamp(0.05, 0.95),
    ];
    let (lo, hi) = size_range;
    for _attempt in 0..100 {
        let target = lo as f64 + rng.random::<f64>() * (hi - lo) as f64;
        let pixels = match family {
            DefectFamily::Blob => {
                let aspect = 0.5 + rng.random::<f64>() * 1.5;
                let a = (target * aspect / std::f64::consts::PI).sqrt();
                let b = target / (std::f64::consts::PI * a);
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let margin = a.max(b) + 2.0;
                if 2.0 * margin >= size as f64 {
                    continue;
                }
                let cy = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                let cx = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                let (ct, st) = (theta.cos(), theta.sin());
                rasterize(size, |y, x| {
                    let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                    let u = rx * ct + ry * st;
                    let v = -rx * st + ry * ct;
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                })
            }
            DefectFamily::Scratch => {
                let thickness = 2.0 + rng.random::<f64>() * 3.0;
                let len = (target / thickness).min(size as f64 * 0.8);
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let (dx, dy) = (theta.cos(), theta.sin());
                let margin = len / 2.0 + thickness + 2.0;
                if 2.0 * margin >= size as f64 {
                    continue;
                }
                let cy = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                let cx = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                let half = len / 2.0;
                let r = thickness / 2.0;
                rasterize(size, |y, x| {
                    let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                    let along = (rx * dx + ry * dy).clamp(-half, half);
                    let py = along * dy;
                    let px = along * dx;
                    (rx - px).powi(2) + (ry - py).powi(2) <= r * r
                })
            }
            DefectFamily::ColorShift => {
                let aspect = 0.6 + rng.random::<f64>() * 1.2;
                // Superellipse (power 4) fill factor relative to its box.
                let fill = 0.93;
                let w = (target / fill * aspect).sqrt();
                let h = target / fill / w;
                let margin = w.max(h) / 2.0 + 2.0;
                if 2.0 * margin >= size as f64 {
                    continue;
                }
                let cy = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                let cx = margin + rng.random::<f64>() * (size as f64 - 2.0 * margin);
                rasterize(size, |y, x| {
                    let u = (x as f64 - cx) / (w / 2.0);
                    let v = (y as f64 - cy) / (h / 2.0);
                    u.powi(4) + v.powi(4) <= 1.0
                })
            }
        };
        if pixels.len() >= lo && pixels.len() <= hi {
            return Ok(Defect {
                pixels,
                color,
                additive: family == DefectFamily::ColorShift,
            });
        }
    }
    Err(Error::InvalidConfig(format!(
        "could not fit a {family:?} defect into pixel range {lo}..={hi} at image size {size}"
    )))
}

fn rasterize(size: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if inside(y, x) {
                pixels.push((y, x));
            }
        }
    }
    pixels
}

/// Regenerate one sample in memory. `category_idx` is 0 for `texture_a`,
/// 1 for `texture_b`; samples with `sample_idx < count/2` are normal.
pub fn synth_sample(
    spec: &SyntheticSpec,
    category_idx: usize,
    sample_idx: usize,
) -> Result<(Tensor, Option<Tensor>)> {
    spec.validate()?;
    let count = if category_idx == 0 {
        spec.train_count
    } else {
        spec.test_count
    };
    let is_defect = sample_idx >= count.div_ceil(2);
    let mut rng = sample_rng(spec, category_idx as u64, sample_idx as u64);
    let anchor = palette_anchor(spec.seed);
    let (mut img, _palette_mean) = render_texture(&mut rng, spec.image_size, spec.texture, anchor);
    if !is_defect {
        return Ok((img, None));
    }
    let defect = draw_defect(
        &mut rng,
        spec.image_size,
        spec.defect,
        spec.defect_size,
        anchor,
    )?;
    let mut mask = Tensor::zeros(&[spec.image_size, spec.image_size]);
    let beta = spec.contrast;
    for &(y, x) in &defect.pixels {
        for ch in 0..3 {
            let old = img.at(&[y, x, ch]);
            let new = if defect.additive {
                (old + beta * (defect.color[ch] - 0.5)).clamp(0.0, 1.0)
            } else {
                old * (1.0 - beta) + beta * defect.color[ch]
            };
            img.set(&[y, x, ch], new);
        }
        mask.set(&[y, x], 1.0);
    }
    Ok((img, Some(mask)))
}

/// Generate both categories under `out_root` and rescan them into indices.
/// Re-running with the same spec reproduces every file bitwise.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_root: &Path,
) -> Result<(DatasetIndex, DatasetIndex)> {
    spec.validate()?;
    for (cat_idx, (category, count)) in [
        (CATEGORY_TRAIN, spec.train_count),
        (CATEGORY_TEST, spec.test_count),
    ]
    .iter()
    .enumerate()
    {
        let good_dir = out_root.join(category).join("test").join("good");
        let defect_dir = out_root.join(category).join("test").join("defect");
        let gt_dir = out_root.join(category).join("ground_truth").join("defect");
        std::fs::create_dir_all(&good_dir)?;
        std::fs::create_dir_all(&defect_dir)?;
        std::fs::create_dir_all(&gt_dir)?;
        let good_count = count.div_ceil(2);
        for i in 0..*count {
            let (img, mask) = synth_sample(spec, cat_idx, i)?;
            if let Some(mask) = mask {
                let name = format!("{:03}", i - good_count);
                save_rgb(&defect_dir.join(format!("{name}.png")), &img)?;
                save_gray(&gt_dir.join(format!("{name}_mask.png")), &mask)?;
            } else {
                save_rgb(&good_dir.join(format!("{i:03}.png")), &img)?;
            }
        }
    }
    Ok((
        scan_dataset(out_root, CATEGORY_TRAIN)?,
        scan_dataset(out_root, CATEGORY_TEST)?,
    ))
}
