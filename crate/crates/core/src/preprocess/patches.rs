use super::{reflect, GrayImage};
use crate::error::{Error, Result};
use crate::labelgen::ClassMap;

pub const PATCH_SIZE: usize = 96;

/// A training or inference window cut from a larger image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub input: GrayImage,
    pub labels: ClassMap,
    /// Top-left corner `(row, col)` in the (padded) source image.
    pub origin: (usize, usize),
    /// Manifest index of the source image.
    pub source: usize,
}

/// Window starts along one axis: steps of `stride`, with the last window
/// moved back so it ends exactly at `len`. Requires `len >= patch` and
/// `1 <= stride <= patch`.
pub fn patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + patch <= len)
        .collect();
    if origins.last().is_none_or(|&o| o + patch < len) {
        origins.push(len - patch);
    }
    origins
}

/// Mirror-pads `img` on the bottom and right to at least `height x width`.
pub fn pad_gray(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    let (h, w) = (height.max(img.height()), width.max(img.width()));
    let data = (0..h * w)
        .map(|i| {
            img.get(
                reflect((i / w) as isize, img.height()),
                reflect((i % w) as isize, img.width()),
            )
        })
        .collect();
    GrayImage::new(w, h, data).expect("values copied from a valid image")
}

/// Mirror-pads class labels like [`pad_gray`].
pub fn pad_labels(map: &ClassMap, height: usize, width: usize) -> ClassMap {
    let (h, w) = (height.max(map.height()), width.max(map.width()));
    let data = (0..h * w)
        .map(|i| {
            map.get(
                reflect((i / w) as isize, map.height()),
                reflect((i % w) as isize, map.width()),
            )
        })
        .collect();
    ClassMap::new(w, h, data).expect("sizes agree")
}

/// Cuts `patch x patch` windows on a `stride` grid that covers every pixel.
///
/// Images smaller than a patch are mirror-padded first; origins then refer to
/// the padded image.
pub fn extract_patches(
    img: &GrayImage,
    labels: &ClassMap,
    patch: usize,
    stride: usize,
    source: usize,
) -> Result<Vec<PatchSample>> {
    if patch == 0 || stride == 0 || stride > patch {
        return Err(Error::Argument(format!(
            "stride {stride} must be in 1..={patch} for the windows to cover the image"
        )));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Argument(
            "cannot cut patches from an empty image".into(),
        ));
    }
    if (img.width(), img.height()) != (labels.width(), labels.height()) {
        return Err(Error::Shape(format!(
            "image {}x{} and labels {}x{} differ",
            img.width(),
            img.height(),
            labels.width(),
            labels.height()
        )));
    }
    let img = pad_gray(img, patch, patch);
    let labels = pad_labels(labels, patch, patch);
    let mut out = Vec::new();
    for &r in &patch_origins(img.height(), patch, stride) {
        for &c in &patch_origins(img.width(), patch, stride) {
            out.push(PatchSample {
                input: img.crop(r, c, patch, patch),
                labels: labels.crop(r, c, patch, patch),
                origin: (r, c),
                source,
            });
        }
    }
    Ok(out)
}
