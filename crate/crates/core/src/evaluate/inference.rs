use crate::dataio::{BinaryMask, Checkpoint};
use crate::error::{Error, Result};
use crate::labelgen::{LabelScheme, DEFAULT_BAND_RADIUS, NUM_CLASSES};
use crate::network::{Mode, NetConfig, ParamStore, Tensor, UNet};
use crate::preprocess::patches::pad_gray;
use crate::preprocess::{patch_origins, GrayImage};
use crate::training::load_model;

/// Per-pixel class probabilities of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    classes: usize,
    /// Class-major planes: `data[c * H * W + pixel]`.
    data: Vec<f32>,
    vessel_classes: Vec<u8>,
}

impl ProbabilityMap {
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f32>,
        vessel_classes: &[u8],
    ) -> Result<Self> {
        if data.len() != width * height * classes {
            return Err(Error::Shape(format!(
                "{classes}x{height}x{width} probability map needs {} values, got {}",
                width * height * classes,
                data.len()
            )));
        }
        if vessel_classes.iter().any(|&c| c as usize >= classes) {
            return Err(Error::Argument(format!(
                "vessel classes {vessel_classes:?} outside {classes}"
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
            vessel_classes: vessel_classes.to_vec(),
        })
    }

    /// Sample `s` of a `(N, K, H, W)` probability tensor.
    pub fn from_tensor(t: &Tensor<f32>, s: usize, vessel_classes: &[u8]) -> Result<Self> {
        let (_, k, h, w) = t.dims4()?;
        Self::new(w, h, k, t.sample(s).to_vec(), vessel_classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn vessel_classes(&self) -> &[u8] {
        &self.vessel_classes
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f32 {
        self.data[class * self.width * self.height + pixel]
    }

    /// Class-major planes.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Summed probability of the vessel classes at each pixel.
    pub fn vessel_scores(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|px| {
                self.vessel_classes
                    .iter()
                    .map(|&c| self.prob(c as usize, px) as f64)
                    .sum()
            })
            .collect()
    }

    /// Most probable class per pixel, ties going to the lower index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.width * self.height)
            .map(|px| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.prob(c, px) > self.prob(best, px) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Vessel where the argmax class is a vessel class; boundary classes count as background.
pub fn binarize(p: &ProbabilityMap) -> BinaryMask {
    let data = p
        .argmax()
        .iter()
        .map(|c| p.vessel_classes.contains(c))
        .collect();
    BinaryMask::new(p.width, p.height, data).expect("sizes agree")
}

/// The label scheme a network with `classes` outputs was trained for.
pub fn scheme_for_classes(classes: usize) -> Result<LabelScheme> {
    match classes {
        NUM_CLASSES => Ok(LabelScheme::EdgeAware {
            band_radius: DEFAULT_BAND_RADIUS,
        }),
        2 => Ok(LabelScheme::Binary),
        k => Err(Error::Config(format!("no label scheme has {k} classes"))),
    }
}

/// Fused and side probability maps of one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub fused: ProbabilityMap,
    /// Deepest decoder stage first.
    pub sides: Vec<ProbabilityMap>,
}

/// A trained network ready for whole-image inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub scheme: LabelScheme,
}

/// Tiles per forward call; the result does not depend on it.
const TILE_BATCH: usize = 8;

impl Model {
    pub fn new(net: UNet, params: ParamStore<f32>) -> Result<Self> {
        net.check_store(&params)?;
        let scheme = scheme_for_classes(net.config().classes)?;
        Ok(Self {
            net,
            params,
            scheme,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, base: &NetConfig) -> Result<Self> {
        let (net, params) = load_model(ckpt, base)?;
        Self::new(net, params)
    }

    /// Fused probabilities from overlapping `patch`-sized tiles at `stride`.
    pub fn predict(&self, img: &GrayImage, patch: usize, stride: usize) -> Result<ProbabilityMap> {
        Ok(self.predict_all(img, patch, stride)?.fused)
    }

    /// Like [`Model::predict`] but also stitches every side output.
    ///
    /// Overlapping tiles are averaged per class and renormalized per pixel;
    /// pixels covered by a single tile keep the network output unchanged.
    pub fn predict_all(&self, img: &GrayImage, patch: usize, stride: usize) -> Result<Prediction> {
        if stride == 0 || stride > patch {
            return Err(Error::Argument(format!(
                "stride {stride} must be in 1..={patch}"
            )));
        }
        let padded = pad_gray(img, patch, patch);
        let (w, h) = (padded.width(), padded.height());
        let tiles: Vec<(usize, usize)> = patch_origins(h, patch, stride)
            .into_iter()
            .flat_map(|r| {
                patch_origins(w, patch, stride)
                    .into_iter()
                    .map(move |c| (r, c))
            })
            .collect();
        let k = self.net.config().classes;
        let maps = 1 + self.net.config().stages();
        let mut sums = vec![vec![0f64; k * w * h]; maps];
        let mut count = vec![0u32; w * h];
        for group in tiles.chunks(TILE_BATCH) {
            let mut input = Vec::with_capacity(group.len() * patch * patch);
            for &(r, c) in group {
                input.extend_from_slice(padded.crop(r, c, patch, patch).data());
            }
            let x = Tensor::from_vec(&[group.len(), 1, patch, patch], input)?;
            let (out, _) = self.net.forward(&x, &self.params, Mode::Eval)?;
            for (t, &(r0, c0)) in group.iter().enumerate() {
                for (m, map) in std::iter::once(&out.fused).chain(&out.sides).enumerate() {
                    let probs = map.sample(t);
                    for cls in 0..k {
                        for pr in 0..patch {
                            let src = &probs[(cls * patch + pr) * patch..][..patch];
                            let dst = &mut sums[m][cls * w * h + (r0 + pr) * w + c0..][..patch];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s as f64;
                            }
                        }
                    }
                }
                for pr in 0..patch {
                    for v in &mut count[(r0 + pr) * w + c0..][..patch] {
                        *v += 1;
                    }
                }
            }
        }
        let (iw, ih) = (img.width(), img.height());
        let vessel = self.scheme.vessel_classes();
        let mut stitched = sums.into_iter().map(|sum| {
            let mut data = vec![0f32; k * iw * ih];
            for r in 0..ih {
                for c in 0..iw {
                    let n = count[r * w + c];
                    let values = (0..k).map(|cls| sum[cls * w * h + r * w + c]);
                    let total: f64 = if n > 1 { values.clone().sum() } else { 1.0 };
                    for (cls, v) in values.enumerate() {
                        data[cls * iw * ih + r * iw + c] = (v / total) as f32;
                    }
                }
            }
            ProbabilityMap::new(iw, ih, k, data, vessel)
        });
        let fused = stitched.next().expect("fused map")?;
        let sides = stitched.collect::<Result<Vec<_>>>()?;
        Ok(Prediction { fused, sides })
    }
}
