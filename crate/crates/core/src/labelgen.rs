//! Edge-aware relabeling of binary vessel ground truth.
//!
//! Vessels are split into thick and thin by a morphological opening, and
//! background bands around each kind are found by dilation, giving five
//! classes:
//!
//! | class | meaning                     |
//! |-------|-----------------------------|
//! | 0     | other background            |
//! | 1     | background near thick vessel|
//! | 2     | background near thin vessel |
//! | 3     | thick vessel                |
//! | 4     | thin vessel                 |

use std::path::Path;

use crate::dataio::raster::{self, BinaryMask};
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const NEAR_THICK: u8 = 1;
pub const NEAR_THIN: u8 = 2;
pub const THICK: u8 = 3;
pub const THIN: u8 = 4;
pub const NUM_CLASSES: usize = 5;

/// Default background band radius around vessels.
pub const DEFAULT_BAND_RADIUS: usize = 2;

/// Binary structuring element with odd side lengths, anchored at its center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl StructuringElement {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) || cells.len() != rows * cols {
            return Err(Error::Argument(format!(
                "structuring element must be odd-sized with {rows}x{cols} cells"
            )));
        }
        if !cells[(rows / 2) * cols + cols / 2] {
            return Err(Error::Argument(
                "structuring element anchor must be set".into(),
            ));
        }
        Ok(Self { rows, cols, cells })
    }

    /// `side x side` square; `side` must be odd.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side, vec![true; side * side])
    }

    /// `(row, col)` offsets of the set cells relative to the anchor.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let (cr, cc) = ((self.rows / 2) as isize, (self.cols / 2) as isize);
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.cells[r * self.cols + c])
            .map(|(r, c)| (r as isize - cr, c as isize - cc))
            .collect()
    }
}

/// Applies `combine` over the mask shifted by every element offset.
/// Pixels shifted in from outside the image read as background.
fn shifted_fold(
    mask: &BinaryMask,
    offsets: &[(isize, isize)],
    init: bool,
    combine: impl Fn(bool, bool) -> bool,
) -> BinaryMask {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let mut out = vec![init; mask.data().len()];
    for &(dr, dc) in offsets {
        for r in 0..h {
            let sr = r + dr;
            let row_out = &mut out[(r * w) as usize..((r + 1) * w) as usize];
            if sr < 0 || sr >= h {
                row_out.iter_mut().for_each(|v| *v = combine(*v, false));
                continue;
            }
            let src = &mask.data()[(sr * w) as usize..((sr + 1) * w) as usize];
            for (c, v) in row_out.iter_mut().enumerate() {
                let sc = c as isize + dc;
                let s = sc >= 0 && sc < w && src[sc as usize];
                *v = combine(*v, s);
            }
        }
    }
    BinaryMask::new(mask.width(), mask.height(), out).expect("same dimensions")
}

/// Minkowski erosion: a pixel survives iff the element placed there lies inside the mask.
pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    shifted_fold(mask, &se.offsets(), true, |a, b| a && b)
}

/// Minkowski dilation: union of the element translated to every mask pixel.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let reflected: Vec<(isize, isize)> = se.offsets().into_iter().map(|(r, c)| (-r, -c)).collect();
    shifted_fold(mask, &reflected, false, |a, b| a || b)
}

pub fn opening(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}

/// Thick vessels survive an opening with a 3x3 square; what it removes
/// (structures 1 or 2 pixels wide) is thin.
pub fn split_thick_thin(vessels: &BinaryMask) -> (BinaryMask, BinaryMask) {
    let se = StructuringElement::square(3).expect("3 is odd");
    let thick = opening(vessels, &se);
    let thin = vessels.minus(&thick);
    (thick, thin)
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} class map needs {} labels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Pixel count per class for `classes` classes.
    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    /// Pixels whose label is in `classes`.
    pub fn mask_of(&self, classes: &[u8]) -> BinaryMask {
        let data = self.data.iter().map(|c| classes.contains(c)).collect();
        BinaryMask::new(self.width, self.height, data).expect("same dimensions")
    }

    /// Sub-window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> ClassMap {
        let mut data = Vec::with_capacity(width * height);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        ClassMap {
            width,
            height,
            data,
        }
    }
}

/// Five-class edge-aware labels from a binary vessel mask.
///
/// Background within the `(2r+1)`-square dilation of thin vessels is class 2,
/// otherwise within that of thick vessels class 1. Thin wins where both apply.
pub fn build_class_map(vessels: &BinaryMask, band_radius: usize) -> Result<ClassMap> {
    if band_radius == 0 {
        return Err(Error::Argument("band radius must be at least 1".into()));
    }
    let (thick, thin) = split_thick_thin(vessels);
    let band = StructuringElement::square(2 * band_radius + 1)?;
    let near_thick = dilate(&thick, &band);
    let near_thin = dilate(&thin, &band);
    let data = (0..vessels.data().len())
        .map(|i| {
            if thick.data()[i] {
                THICK
            } else if thin.data()[i] {
                THIN
            } else if near_thin.data()[i] {
                NEAR_THIN
            } else if near_thick.data()[i] {
                NEAR_THICK
            } else {
                BACKGROUND
            }
        })
        .collect();
    ClassMap::new(vessels.width(), vessels.height(), data)
}

/// How ground truth is turned into training targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelScheme {
    /// The five-class thick/thin/boundary scheme.
    EdgeAware { band_radius: usize },
    /// Plain vessel (1) versus background (0).
    Binary,
}

impl Default for LabelScheme {
    fn default() -> Self {
        LabelScheme::EdgeAware {
            band_radius: DEFAULT_BAND_RADIUS,
        }
    }
}

impl LabelScheme {
    pub fn classes(self) -> usize {
        match self {
            LabelScheme::EdgeAware { .. } => NUM_CLASSES,
            LabelScheme::Binary => 2,
        }
    }

    /// Class indices counted as vessel when reducing to a binary decision.
    pub fn vessel_classes(self) -> &'static [u8] {
        match self {
            LabelScheme::EdgeAware { .. } => &[THICK, THIN],
            LabelScheme::Binary => &[1],
        }
    }

    pub fn labels(self, vessels: &BinaryMask) -> Result<ClassMap> {
        match self {
            LabelScheme::EdgeAware { band_radius } => build_class_map(vessels, band_radius),
            LabelScheme::Binary => ClassMap::new(
                vessels.width(),
                vessels.height(),
                vessels.data().iter().map(|&v| v as u8).collect(),
            ),
        }
    }

    /// Hand-set weights: boundary classes heavier than plain background,
    /// thin structures heaviest.
    pub fn default_weights(self) -> ClassWeights {
        match self {
            LabelScheme::EdgeAware { .. } => ClassWeights(vec![1.0, 2.0, 4.0, 2.0, 4.0]),
            LabelScheme::Binary => ClassWeights(vec![1.0, 4.0]),
        }
    }
}

/// Positive per-class loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Argument(format!(
                "class weights must be positive: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Comma-separated values, the format of the weights file.
    pub fn to_line(&self) -> String {
        self.0
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let weights = line
            .trim()
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad class weight {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }
}

/// Inverse-frequency weights `total / (K * count_c)` (counts floored at 1),
/// scaled by `boost` and renormalized so the smallest weight is 1.
pub fn weights_from_frequencies(maps: &[ClassMap], boost: &[f64]) -> Result<ClassWeights> {
    if maps.is_empty() {
        return Err(Error::Argument("need at least one class map".into()));
    }
    let k = boost.len();
    if k == 0 || boost.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Argument(format!(
            "boost must be positive per class: {boost:?}"
        )));
    }
    let mut counts = vec![0u64; k];
    for m in maps {
        for &c in m.data() {
            let c = c as usize;
            if c >= k {
                return Err(Error::Argument(format!("label {c} outside {k} classes")));
            }
            counts[c] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .zip(boost)
        .map(|(&n, &b)| total as f64 / (k as f64 * n.max(1) as f64) * b)
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    ClassWeights::new(raw.iter().map(|w| w / min).collect())
}

/// Gray level used to store each class in a class-map PNG.
pub const CLASS_GRAY_STEP: u8 = 60;

pub fn write_class_map_png(path: impl AsRef<Path>, map: &ClassMap) -> Result<()> {
    let data: Vec<u8> = map.data().iter().map(|&c| c * CLASS_GRAY_STEP).collect();
    raster::write_png(path, map.width(), map.height(), 1, &data)
}

/// Reads a class map written by [`write_class_map_png`].
pub fn read_class_map_png(path: impl AsRef<Path>) -> Result<ClassMap> {
    let img = raster::load_image(path)?;
    let data = img
        .channel(0)
        .into_iter()
        .map(|v| ((v as f64) / CLASS_GRAY_STEP as f64).round() as u8)
        .collect();
    ClassMap::new(img.width(), img.height(), data)
}
