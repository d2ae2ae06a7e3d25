use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FundusImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl FundusImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
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

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel `c` (0 red, 1 green, 2 blue) as a plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

/// Per-pixel boolean raster (vessel ground truth or field of view).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} mask needs {} values, got {}",
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

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `self` and not `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Decoded raster before channel policy is applied.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::Decode {
            offset: 0,
            message: "unrecognized raster signature (expected PNG, binary PGM or PPM)".into(),
        })
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let png_err = |e: png::DecodingError| Error::Decode {
        offset: 0,
        message: format!("png: {e}"),
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Decode {
                offset: 0,
                message: "indexed png was not expanded".into(),
            })
        }
    };
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.
fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode {
                offset: start,
                message: "expected a header number".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: start,
                message: "header number out of range".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Decode {
            offset: pos,
            message: format!("zero-area raster {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Decode {
            offset: pos,
            message: format!("unsupported maxval {maxval} (8-bit only)"),
        });
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Decode {
            offset: pos,
            message: "missing whitespace after header".into(),
        });
    }
    pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - pos;
    if have < need {
        return Err(Error::Decode {
            offset: bytes.len(),
            message: format!(
                "pixel data truncated: need {need} bytes from offset {pos}, have {have}"
            ),
        });
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

impl Raster {
    fn into_rgb(self) -> Result<FundusImage> {
        let px = self.width * self.height;
        let mut rgb = Vec::with_capacity(px * 3);
        for i in 0..px {
            let s = &self.data[i * self.channels..(i + 1) * self.channels];
            match self.channels {
                1 | 2 => rgb.extend_from_slice(&[s[0], s[0], s[0]]),
                _ => rgb.extend_from_slice(&s[..3]),
            }
        }
        FundusImage::new(self.width, self.height, rgb)
    }

    fn first_channel(&self) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().step_by(self.channels).copied()
    }
}

/// Loads a PNG or binary PPM/PGM; grayscale sources are replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<FundusImage> {
    decode(&read_file(path.as_ref())?)?.into_rgb()
}

/// Loads a raster as a mask: a pixel is set iff its first channel exceeds `threshold`.
pub fn load_mask(path: impl AsRef<Path>, threshold: u8) -> Result<BinaryMask> {
    let raster = decode(&read_file(path.as_ref())?)?;
    let data = raster.first_channel().map(|v| v > threshold).collect();
    BinaryMask::new(raster.width, raster.height, data)
}

pub const DEFAULT_MASK_THRESHOLD: u8 = 127;

/// Writes 8-bit grayscale (1 channel) or RGB (3 channels) PNG.
pub fn write_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    channels: usize,
    data: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "png {width}x{height}x{channels} needs {} bytes, got {}",
            width * height * channels,
            data.len()
        )));
    }
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::Argument(format!(
                "cannot write {channels}-channel png"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Writes binary PGM (`channels == 1`) or PPM (`channels == 3`).
pub fn write_pnm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    channels: usize,
    data: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Argument(format!(
                "cannot write {channels}-channel pnm"
            )))
        }
    };
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    write_png(path, mask.width(), mask.height(), 1, &data)
}

pub fn write_image_png(path: impl AsRef<Path>, img: &FundusImage) -> Result<()> {
    write_png(path, img.width(), img.height(), 3, img.data())
}
