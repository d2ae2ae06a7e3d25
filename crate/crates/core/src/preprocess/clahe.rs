use super::{reflect, GrayImage};
use crate::dataio::FundusImage;
use crate::error::{Error, Result};

const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Multiple of the mean bin height at which tile histograms are clipped.
    pub clip_limit: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            tile_rows: 8,
            tile_cols: 8,
            clip_limit: 2.0,
        }
    }
}

/// Green channel scaled to `[0, 1]`.
pub fn green_channel(img: &FundusImage) -> GrayImage {
    let data = img
        .channel(1)
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    GrayImage::new(img.width(), img.height(), data).expect("dimensions from a valid image")
}

/// Per-tile lookup tables, row-major over the tile grid.
///
/// The image is mirror-padded so every tile has `ceil(H/rows) x ceil(W/cols)` pixels.
pub fn tile_luts(
    gray: &[u8],
    width: usize,
    height: usize,
    cfg: &ClaheConfig,
) -> Result<Vec<[u8; BINS]>> {
    if width == 0 || height == 0 {
        return Err(Error::Argument("CLAHE needs a non-empty image".into()));
    }
    if cfg.tile_rows == 0 || cfg.tile_cols == 0 || !(cfg.clip_limit > 0.0) {
        return Err(Error::Argument(format!("invalid CLAHE settings {cfg:?}")));
    }
    let tile_h = height.div_ceil(cfg.tile_rows);
    let tile_w = width.div_ceil(cfg.tile_cols);
    let area = tile_h * tile_w;
    let clip = ((cfg.clip_limit * area as f64 / BINS as f64) as usize).max(1);
    let mut luts = Vec::with_capacity(cfg.tile_rows * cfg.tile_cols);
    for ty in 0..cfg.tile_rows {
        for tx in 0..cfg.tile_cols {
            let mut hist = [0usize; BINS];
            for r in ty * tile_h..(ty + 1) * tile_h {
                let row = reflect(r as isize, height) * width;
                for c in tx * tile_w..(tx + 1) * tile_w {
                    hist[gray[row + reflect(c as isize, width)] as usize] += 1;
                }
            }
            clip_histogram(&mut hist, clip);
            let scale = 255.0 / area as f64;
            let mut lut = [0u8; BINS];
            let mut sum = 0;
            for (v, &count) in hist.iter().enumerate() {
                sum += count;
                lut[v] = (sum as f64 * scale).round().min(255.0) as u8;
            }
            luts.push(lut);
        }
    }
    Ok(luts)
}

/// Clips bins at `clip` and spreads the excess evenly, the remainder one count
/// per bin at evenly spaced positions across the whole range.
fn clip_histogram(hist: &mut [usize; BINS], clip: usize) {
    let mut excess = 0;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let share = excess / BINS;
    let residual = excess % BINS;
    for h in hist.iter_mut() {
        *h += share;
    }
    for k in 0..residual {
        hist[k * BINS / residual] += 1;
    }
}

/// Contrast-limited adaptive histogram equalization of the green channel.
///
/// Each pixel blends the lookup tables of the four nearest tile centres bilinearly;
/// outside the outermost centres the nearest tables are used.
pub fn to_gray_clahe(img: &FundusImage, cfg: &ClaheConfig) -> Result<GrayImage> {
    let (width, height) = (img.width(), img.height());
    let gray = img.channel(1);
    let luts = tile_luts(&gray, width, height, cfg)?;
    let tile_h = height.div_ceil(cfg.tile_rows) as f64;
    let tile_w = width.div_ceil(cfg.tile_cols) as f64;
    let axis = |pos: usize, tile: f64, tiles: usize| {
        let f = pos as f64 / tile - 0.5;
        let lo = f.floor();
        let frac = f - lo;
        let lo = lo as isize;
        let a = lo.clamp(0, tiles as isize - 1) as usize;
        let b = (lo + 1).clamp(0, tiles as isize - 1) as usize;
        (a, b, frac)
    };
    let cols: Vec<_> = (0..width).map(|c| axis(c, tile_w, cfg.tile_cols)).collect();
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        let (ty0, ty1, fy) = axis(r, tile_h, cfg.tile_rows);
        for (c, &(tx0, tx1, fx)) in cols.iter().enumerate() {
            let v = gray[r * width + c] as usize;
            let at = |ty: usize, tx: usize| luts[ty * cfg.tile_cols + tx][v] as f64;
            let top = at(ty0, tx0) * (1.0 - fx) + at(ty0, tx1) * fx;
            let bottom = at(ty1, tx0) * (1.0 - fx) + at(ty1, tx1) * fx;
            let mapped = top * (1.0 - fy) + bottom * fy;
            data.push((mapped / 255.0).clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(width, height, data)
}
