//! Direct, slow reference implementations used to check the library.

use vesselseg::dataio::BinaryMask;
use vesselseg::labelgen::ClassMap;

/// Square `(2r+1)`-element erosion by explicit double loop; outside reads as background.
pub fn erode_square(m: &BinaryMask, r: isize) -> BinaryMask {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let mut out = BinaryMask::empty(m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && yy < h && xx >= 0 && xx < w;
                    if !inside || !m.get(yy as usize, xx as usize) {
                        all = false;
                    }
                }
            }
            out.set(y as usize, x as usize, all);
        }
    }
    out
}

pub fn dilate_square(m: &BinaryMask, r: isize) -> BinaryMask {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let mut out = BinaryMask::empty(m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w && m.get(yy as usize, xx as usize) {
                        any = true;
                    }
                }
            }
            out.set(y as usize, x as usize, any);
        }
    }
    out
}

/// Opening as the union of every 3x3 square that fits inside the mask.
pub fn open3(m: &BinaryMask) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    let mut out = BinaryMask::empty(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let fits = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| m.get(yy, xx)));
            if fits {
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
    }
    out
}

/// Five-class labels: thick and thin from the opening, then the nearest-band rule
/// evaluated per pixel by scanning its `(2r+1)`-square neighbourhood.
pub fn class_map(m: &BinaryMask, r: isize) -> ClassMap {
    let thick = open3(m);
    let (w, h) = (m.width() as isize, m.height() as isize);
    let mut data = Vec::with_capacity(m.data().len());
    for y in 0..h {
        for x in 0..w {
            let (yu, xu) = (y as usize, x as usize);
            let label = if thick.get(yu, xu) {
                3
            } else if m.get(yu, xu) {
                4
            } else {
                let (mut near_thick, mut near_thin) = (false, false);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h || xx < 0 || xx >= w {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if thick.get(yy, xx) {
                            near_thick = true;
                        } else if m.get(yy, xx) {
                            near_thin = true;
                        }
                    }
                }
                if near_thin {
                    2
                } else if near_thick {
                    1
                } else {
                    0
                }
            };
            data.push(label);
        }
    }
    ClassMap::new(m.width(), m.height(), data).unwrap()
}

/// Pairwise Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly, ties count half.
pub fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &n) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Real-valued CLAHE without padding (dimensions must divide evenly): clipped
/// excess is spread as fractions over all 256 bins and the mapping is the
/// unrounded scaled CDF, blended between the tiles whose centres bracket each pixel.
pub fn clahe(
    gray: &[u8],
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    clip_limit: f64,
) -> Vec<f64> {
    assert!(height.is_multiple_of(rows) && width.is_multiple_of(cols));
    let (th, tw) = (height / rows, width / cols);
    let area = (th * tw) as f64;
    let limit = ((clip_limit * area / 256.0).floor()).max(1.0);
    let mut maps = vec![vec![0.0; 256]; rows * cols];
    for ty in 0..rows {
        for tx in 0..cols {
            let mut hist = vec![0.0; 256];
            for y in ty * th..(ty + 1) * th {
                for x in tx * tw..(tx + 1) * tw {
                    hist[gray[y * width + x] as usize] += 1.0;
                }
            }
            let excess: f64 = hist.iter().map(|&v: &f64| (v - limit).max(0.0)).sum();
            let mut cdf = 0.0;
            for v in 0..256 {
                cdf += hist[v].min(limit) + excess / 256.0;
                maps[ty * cols + tx][v] = 255.0 * cdf / area;
            }
        }
    }
    // Position of a pixel between tile centres: (lower tile, upper tile, weight of upper).
    let bracket = |p: usize, tile: usize, n: usize| -> (usize, usize, f64) {
        let centre = |t: usize| (t as f64 + 0.5) * tile as f64;
        let p = p as f64;
        if p <= centre(0) {
            return (0, 0, 0.0);
        }
        if p >= centre(n - 1) {
            return (n - 1, n - 1, 0.0);
        }
        let t = (0..n - 1).rev().find(|&t| centre(t) <= p).unwrap();
        (t, t + 1, (p - centre(t)) / tile as f64)
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, wy) = bracket(y, th, rows);
        for x in 0..width {
            let (x0, x1, wx) = bracket(x, tw, cols);
            let v = gray[y * width + x] as usize;
            let m = |ty: usize, tx: usize| maps[ty * cols + tx][v];
            let top = m(y0, x0) * (1.0 - wx) + m(y0, x1) * wx;
            let bottom = m(y1, x0) * (1.0 - wx) + m(y1, x1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}
