//! Synthetic fundus-like images with known vessel masks.
//!
//! Each image is a bright disk (the field of view) with smooth illumination,
//! crossed by random curved vessels 1 to 5 pixels wide that darken the green
//! channel, thin vessels more faintly than thick ones, plus pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::raster::{write_image_png, write_mask_png};
use crate::dataio::{BinaryMask, DatasetManifest, FundusImage, ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub min_vessels: usize,
    pub max_vessels: usize,
    pub min_width: usize,
    pub max_width: usize,
    /// Standard deviation of the additive pixel noise, in 8-bit levels.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            min_vessels: 6,
            max_vessels: 10,
            min_width: 1,
            max_width: 5,
            noise: 6.0,
        }
    }
}

pub struct SynthSample {
    pub image: FundusImage,
    pub vessels: BinaryMask,
    pub fov: BinaryMask,
}

fn paint(
    mask: &mut BinaryMask,
    fov: &BinaryMask,
    depth: &mut [f64],
    y: f64,
    x: f64,
    width: usize,
    darkening: f64,
) {
    let size = mask.width() as isize;
    let lo = -((width as isize - 1) / 2);
    let hi = width as isize / 2;
    let (r0, c0) = (y.round() as isize, x.round() as isize);
    for dr in lo..=hi {
        for dc in lo..=hi {
            let (r, c) = (r0 + dr, c0 + dc);
            if (0..size).contains(&r) && (0..size).contains(&c) {
                let (r, c) = (r as usize, c as usize);
                if !fov.get(r, c) {
                    continue;
                }
                mask.set(r, c, true);
                let d = &mut depth[r * mask.width() + c];
                *d = d.max(darkening);
            }
        }
    }
}

/// One image with `rng`-drawn vessels.
pub fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    if cfg.size < 8
        || cfg.min_width == 0
        || cfg.min_width > cfg.max_width
        || cfg.min_vessels > cfg.max_vessels
    {
        return Err(Error::Config(format!("invalid synthetic settings {cfg:?}")));
    }
    let n = cfg.size;
    let centre = (n as f64 - 1.0) / 2.0;
    let radius = 0.47 * n as f64;
    let fov_data = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64 - centre, (i % n) as f64 - centre);
            (r * r + c * c).sqrt() <= radius
        })
        .collect();
    let fov = BinaryMask::new(n, n, fov_data)?;

    let mut vessels = BinaryMask::empty(n, n);
    let mut depth = vec![0.0; n * n];
    let count = rng.gen_range(cfg.min_vessels..=cfg.max_vessels);
    for _ in 0..count {
        let width = rng.gen_range(cfg.min_width..=cfg.max_width);
        let darkening = 14.0 + 9.0 * width as f64;
        let angle0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let start = rng.gen_range(0.0..radius * 0.9);
        let (mut y, mut x) = (centre + start * angle0.sin(), centre + start * angle0.cos());
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut turn = 0.0;
        let length = rng.gen_range(0.6 * n as f64..1.4 * n as f64);
        let mut travelled = 0.0;
        while travelled < length {
            paint(&mut vessels, &fov, &mut depth, y, x, width, darkening);
            turn = 0.9 * turn + rng.gen_range(-0.02..0.02);
            heading += turn;
            y += 0.5 * heading.sin();
            x += 0.5 * heading.cos();
            travelled += 0.5;
            let (dy, dx) = (y - centre, x - centre);
            if (dy * dy + dx * dx).sqrt() > radius {
                break;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;
    let tilt = rng.gen_range(-0.15..0.15);
    let mut data = Vec::with_capacity(3 * n * n);
    for i in 0..n * n {
        if !fov.data()[i] {
            data.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let (r, c) = ((i / n) as f64 - centre, (i % n) as f64 - centre);
        let rim = (r * r + c * c).sqrt() / radius;
        let light = 1.0 - 0.25 * rim * rim + tilt * c / radius;
        let green = 150.0 * light - depth[i] + noise.sample(rng);
        let red = 200.0 * light - 0.4 * depth[i];
        let blue = 60.0 * light;
        let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        data.extend_from_slice(&[q(red), q(green), q(blue)]);
    }
    Ok(SynthSample {
        image: FundusImage::new(n, n, data)?,
        vessels,
        fov,
    })
}

/// Writes `train + test` images under `dir` (`images/`, `gt/`, `fov/`) and a
/// `manifest.csv` listing them; returns the manifest.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    train: usize,
    test: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["images", "gt", "fov"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(train + test);
    for i in 0..train + test {
        let sample = generate(cfg, &mut rng)?;
        let split = if i < train { Split::Train } else { Split::Test };
        let name = format!("{:03}_{split}.png", i + 1);
        let entry = ManifestEntry {
            image: dir.join("images").join(&name),
            ground_truth: dir.join("gt").join(&name),
            fov: Some(dir.join("fov").join(&name)),
            split,
        };
        write_image_png(&entry.image, &sample.image)?;
        write_mask_png(&entry.ground_truth, &sample.vessels)?;
        write_mask_png(entry.fov.as_ref().expect("set above"), &sample.fov)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest { entries };
    let relative = DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                image: e.image.strip_prefix(dir).unwrap_or(&e.image).to_path_buf(),
                ground_truth: e
                    .ground_truth
                    .strip_prefix(dir)
                    .unwrap_or(&e.ground_truth)
                    .to_path_buf(),
                fov: e
                    .fov
                    .as_ref()
                    .map(|f| f.strip_prefix(dir).unwrap_or(f).to_path_buf()),
                split: e.split,
            })
            .collect(),
    };
    let path = dir.join("manifest.csv");
    std::fs::write(&path, relative.to_csv()).map_err(|e| Error::io(&path, e))?;
    manifest.validate()?;
    Ok(manifest)
}
