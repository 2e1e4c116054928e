//! Procedural multi-class texture dataset with injected local defects.

use std::f32::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use maae_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SyntheticSpec;
use crate::dataset::{DatasetIndex, Label, Record, Split};
use crate::error::{MaaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// A square patch replaced by another class's texture.
    PatchSwap,
    /// A disk with shifted brightness.
    IntensityBlob,
    /// A band where the pattern is flattened to its mean color.
    StripeBreak,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::PatchSwap, AnomalyKind::IntensityBlob, AnomalyKind::StripeBreak];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::PatchSwap => "patch_swap",
            AnomalyKind::IntensityBlob => "intensity_blob",
            AnomalyKind::StripeBreak => "stripe_break",
        }
    }
}

/// Seeded sinusoid-plus-checker texture of one class.
#[derive(Debug, Clone)]
pub struct ClassTexture {
    waves: [(f32, f32, f32); 2],
    checker_cell: usize,
    checker_weight: f32,
    colors: [[f32; 3]; 2],
}

pub(crate) fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9) ^ c.wrapping_mul(0x94d049bb133111eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl ClassTexture {
    pub fn new(seed: u64, class_id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xc1a55, class_id as u64, 0));
        // classes get well-separated orientations and frequencies
        let base_angle = class_id as f32 * 1.1 + rng.random_range(0.0..0.3);
        let waves = [
            (rng.random_range(2.0..5.0) + class_id as f32 * 1.5, base_angle, 0.25),
            (rng.random_range(3.0..7.0), base_angle + rng.random_range(0.8..1.6), 0.15),
        ];
        let mut color = || {
            [
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
            ]
        };
        let colors = [color(), color()];
        ClassTexture {
            waves,
            checker_cell: [4, 8, 16][class_id % 3],
            checker_weight: rng.random_range(0.05..0.15),
            colors,
        }
    }

    fn intensity(&self, x: f32, y: f32, size: f32) -> f32 {
        let mut v = 0.5;
        for &(freq, angle, amp) in &self.waves {
            let t = (x * angle.cos() + y * angle.sin()) / size;
            v += amp * (2.0 * PI * freq * t).sin();
        }
        let cell = self.checker_cell as f32;
        let parity = ((x / cell).floor() as i64 + (y / cell).floor() as i64).rem_euclid(2);
        v += self.checker_weight * if parity == 0 { 1.0 } else { -1.0 };
        v.clamp(0.0, 1.0)
    }

    fn rgb(&self, v: f32) -> [f32; 3] {
        let [a, b] = self.colors;
        [0, 1, 2].map(|c| a[c] * v + b[c] * (1.0 - v))
    }

    /// Renders the texture shifted by `(dx, dy)` pixels.
    pub fn render(&self, size: usize, dx: f32, dy: f32) -> Vec<[f32; 3]> {
        let s = size as f32;
        (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f32 + dy, (i % size) as f32 + dx);
                self.rgb(self.intensity(x, y, s))
            })
            .collect()
    }
}

/// One rendered image (`size×size` RGB) and its defect mask.
pub struct Sample {
    pub pixels: Vec<[f32; 3]>,
    pub mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn to_tensor(&self, size: usize) -> Tensor<f32> {
        let plane = size * size;
        Tensor::from_fn(&[3, size, size], |i| self.pixels[i % plane][i / plane])
    }
}

/// A jittered normal copy of the class texture, plus an optional defect.
pub fn render_sample(spec: &SyntheticSpec, class_id: usize, anomaly: Option<AnomalyKind>, rng: &mut ChaCha8Rng) -> Sample {
    let size = spec.image_size;
    let tex = ClassTexture::new(spec.seed, class_id);
    let (dx, dy) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
    let gain = rng.random_range(-0.03..0.03);
    let mut pixels = tex.render(size, dx, dy);
    let Some(kind) = anomaly else {
        add_noise(&mut pixels, gain, rng);
        return Sample { pixels, mask: None };
    };
    let mut mask = vec![false; size * size];
    let margin = size / 8;
    match kind {
        AnomalyKind::PatchSwap => {
            let side = rng.random_range(size / 4..=size / 3);
            let (x0, y0) = (
                rng.random_range(margin..size - margin - side),
                rng.random_range(margin..size - margin - side),
            );
            let other = ClassTexture::new(spec.seed, class_id + spec.num_classes.max(1) + 7);
            let foreign = other.render(size, dx, dy);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    pixels[y * size + x] = foreign[y * size + x];
                    mask[y * size + x] = true;
                }
            }
        }
        AnomalyKind::IntensityBlob => {
            let r = rng.random_range(size as f32 / 8.0..size as f32 / 5.0);
            let (cx, cy) = (
                rng.random_range(margin as f32..(size - margin) as f32),
                rng.random_range(margin as f32..(size - margin) as f32),
            );
            let delta = if rng.random::<bool>() { 0.5 } else { -0.5 };
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    if d2 <= r * r {
                        let p = &mut pixels[y * size + x];
                        *p = p.map(|v| (v + delta).clamp(0.0, 1.0));
                        mask[y * size + x] = true;
                    }
                }
            }
        }
        AnomalyKind::StripeBreak => {
            let width = rng.random_range(size / 10..=size / 6).max(2);
            let length = rng.random_range(size / 3..=size / 2);
            let vertical = rng.random::<bool>();
            let (a0, b0) = (
                rng.random_range(margin..size - margin - width),
                rng.random_range(margin..size - margin - length),
            );
            let mean = tex.rgb(0.5);
            for a in a0..a0 + width {
                for b in b0..b0 + length {
                    let (x, y) = if vertical { (a, b) } else { (b, a) };
                    pixels[y * size + x] = mean;
                    mask[y * size + x] = true;
                }
            }
        }
    }
    add_noise(&mut pixels, gain, rng);
    Sample { pixels, mask: Some(mask) }
}

fn add_noise(pixels: &mut [[f32; 3]], gain: f32, rng: &mut ChaCha8Rng) {
    for p in pixels.iter_mut() {
        for v in p.iter_mut() {
            *v = (*v + gain + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        }
    }
}

fn to_png(pixels: &[[f32; 3]], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = pixels[y as usize * size + x as usize];
        Rgb(p.map(|v| (v * 255.0).round() as u8))
    })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| MaaeError::io(dir, e))?;
    }
    img(path).map_err(|e| MaaeError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn class_name(class_id: usize) -> String {
    format!("class_{class_id}")
}

/// Writes an MVTec-style tree plus `manifest.tsv` under `root`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<DatasetIndex> {
    let size = spec.image_size;
    let mut index = DatasetIndex {
        records: Vec::new(),
        class_names: (0..spec.num_classes).map(class_name).collect(),
    };
    for class_id in 0..spec.num_classes {
        let dir = root.join(class_name(class_id));
        let mut emit = |split: Split, idx: usize, kind: Option<AnomalyKind>| -> Result<()> {
            let stream = match (split, kind) {
                (Split::Train, _) => 0,
                (Split::Test, None) => 1,
                (Split::Test, Some(_)) => 2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, class_id as u64, stream, idx as u64));
            let sample = render_sample(spec, class_id, kind, &mut rng);
            let sub = match (split, kind) {
                (Split::Train, _) => "train/good".to_string(),
                (Split::Test, None) => "test/good".to_string(),
                (Split::Test, Some(k)) => format!("test/{}", k.name()),
            };
            let path = dir.join(&sub).join(format!("{idx:03}.png"));
            save(|p| to_png(&sample.pixels, size).save(p), &path)?;
            let mask = match (kind, &sample.mask) {
                (Some(k), Some(m)) => {
                    let mpath = dir.join("ground_truth").join(k.name()).join(format!("{idx:03}_mask.png"));
                    let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
                        Luma([if m[y as usize * size + x as usize] { 255 } else { 0 }])
                    });
                    save(|p| img.save(p), &mpath)?;
                    Some(mpath)
                }
                _ => None,
            };
            index.records.push(Record {
                path,
                class_id,
                split,
                label: if kind.is_some() { Label::Anomalous } else { Label::Normal },
                mask,
            });
            Ok(())
        };
        for i in 0..spec.train_per_class {
            emit(Split::Train, i, None)?;
        }
        for i in 0..spec.test_normal_per_class {
            emit(Split::Test, i, None)?;
        }
        for i in 0..spec.test_anomalous_per_class {
            emit(Split::Test, i, Some(AnomalyKind::ALL[i % 3]))?;
        }
    }
    index.write_manifest(&root.join("manifest.tsv"))?;
    Ok(index)
}
