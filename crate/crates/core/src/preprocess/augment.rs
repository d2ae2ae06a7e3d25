use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{reflect, GrayImage, PatchSample};
use crate::error::{Error, Result};
use crate::labelgen::ClassMap;

/// Random augmentation ranges. Angles are in degrees; ranges are symmetric
/// around zero unless given as `(low, high)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub shear_deg: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_deg: 30.0,
            scale: (0.9, 1.1),
            shear_deg: 5.0,
            noise_sigma: 0.02,
            brightness: 0.1,
            contrast: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            shear_deg: 0.0,
            noise_sigma: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=180.0).contains(&self.rotation_deg)
            && ordered(self.scale)
            && (0.0..45.0).contains(&self.shear_deg)
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.brightness)
            && ordered(self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid augmentation settings {self:?}"
            )))
        }
    }
}

/// One concrete draw of every augmentation parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

fn between(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl Transform {
    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            flip_horizontal: rng.gen::<f64>() < cfg.flip_prob,
            flip_vertical: rng.gen::<f64>() < cfg.flip_prob,
            rotation_deg: symmetric(rng, cfg.rotation_deg),
            scale: between(rng, cfg.scale),
            shear_deg: symmetric(rng, cfg.shear_deg),
            brightness: symmetric(rng, cfg.brightness),
            contrast: between(rng, cfg.contrast),
            noise_sigma: cfg.noise_sigma,
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.shear_deg == 0.0
    }

    /// Source coordinates `(x, y)` of output pixel `(row, col)` under the inverse
    /// of rotate . shear . scale about the patch centre, before flipping.
    fn source(&self, row: usize, col: usize, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (dx, dy) = (col as f64 - cx, row as f64 - cy);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let u = u - self.shear_deg.to_radians().tan() * v;
        (u / self.scale + cx, v / self.scale + cy)
    }

    fn flip(&self, row: usize, col: usize, width: usize, height: usize) -> (usize, usize) {
        (
            if self.flip_vertical {
                height - 1 - row
            } else {
                row
            },
            if self.flip_horizontal {
                width - 1 - col
            } else {
                col
            },
        )
    }

    /// Applies the geometric part to input and labels and the photometric part
    /// to the input; noise is drawn from `rng`.
    pub fn apply(&self, sample: &PatchSample, rng: &mut ChaCha8Rng) -> PatchSample {
        let (w, h) = (sample.input.width(), sample.input.height());
        let mut input = Vec::with_capacity(w * h);
        let mut labels = Vec::with_capacity(w * h);
        let identity = self.is_affine_identity();
        for row in 0..h {
            for col in 0..w {
                if identity {
                    let (r, c) = self.flip(row, col, w, h);
                    input.push(sample.input.get(r, c));
                    labels.push(sample.labels.get(r, c));
                    continue;
                }
                let (x, y) = self.source(row, col, w, h);
                let (r, c) = (
                    reflect(y.round() as isize, h),
                    reflect(x.round() as isize, w),
                );
                let (r, c) = self.flip(r, c, w, h);
                labels.push(sample.labels.get(r, c));
                input.push(self.bilinear(&sample.input, x, y));
            }
        }
        self.photometric(&mut input, rng);
        PatchSample {
            input: GrayImage::new(w, h, input).expect("values clamped to [0, 1]"),
            labels: ClassMap::new(w, h, labels).expect("sizes agree"),
            origin: sample.origin,
            source: sample.source,
        }
    }

    fn bilinear(&self, img: &GrayImage, x: f64, y: f64) -> f32 {
        let (w, h) = (img.width(), img.height());
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |dy: isize, dx: isize| {
            let r = reflect(y0 as isize + dy, h);
            let c = reflect(x0 as isize + dx, w);
            let (r, c) = self.flip(r, c, w, h);
            img.get(r, c) as f64
        };
        let top = at(0, 0) * (1.0 - fx) + at(0, 1) * fx;
        let bottom = at(1, 0) * (1.0 - fx) + at(1, 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    fn photometric(&self, values: &mut [f32], rng: &mut ChaCha8Rng) {
        if self.contrast != 1.0 {
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
            for v in values.iter_mut() {
                *v = ((*v as f64 - mean) * self.contrast + mean) as f32;
            }
        }
        if self.brightness != 0.0 {
            for v in values.iter_mut() {
                *v += self.brightness as f32;
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma is positive");
            for v in values.iter_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
        for v in values.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Draws a [`Transform`] from `cfg` and applies it.
pub fn augment(sample: &PatchSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> PatchSample {
    Transform::draw(cfg, rng).apply(sample, rng)
}

/// Mirrors input and labels left to right.
pub fn flip_horizontal(sample: &PatchSample) -> PatchSample {
    let t = Transform {
        flip_horizontal: true,
        flip_vertical: false,
        rotation_deg: 0.0,
        scale: 1.0,
        shear_deg: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        noise_sigma: 0.0,
    };
    t.apply(sample, &mut rand::SeedableRng::seed_from_u64(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(seed: u64) -> PatchSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = (0..96 * 96).map(|_| rng.gen::<f32>()).collect();
        let labels = (0..96 * 96).map(|_| rng.gen_range(0..5u8)).collect();
        PatchSample {
            input: GrayImage::new(96, 96, input).unwrap(),
            labels: ClassMap::new(96, 96, labels).unwrap(),
            origin: (0, 0),
            source: 0,
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(1);
        let once = flip_horizontal(&s);
        assert_ne!(once, s);
        assert_eq!(once.labels.get(3, 0), s.labels.get(3, 95));
        assert_eq!(flip_horizontal(&once), s);
    }

    #[test]
    fn identity_config_leaves_sample_unchanged() {
        let s = sample(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(&s, &AugmentConfig::identity(), &mut rng), s);
    }

    #[test]
    fn same_seed_gives_same_output() {
        let s = sample(3);
        let cfg = AugmentConfig::default();
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let c = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn photometric_changes_leave_labels_alone() {
        let s = sample(6);
        let cfg = AugmentConfig {
            noise_sigma: 0.05,
            brightness: 0.2,
            contrast: (0.5, 1.5),
            ..AugmentConfig::identity()
        };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.labels, s.labels);
        assert_ne!(out.input, s.input);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let cfg = AugmentConfig {
            scale: (1.2, 0.8),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
