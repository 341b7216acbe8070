//! RGB images in [0,1] and their file formats (binary PPM/PGM, PNG).

use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::{Elem, Tensor};

/// Planar RGB image, `data` laid out `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != 3 * h * w {
            return Err(dim_err!("image {h}x{w} with {} values", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.h + r) * self.w + c]
    }

    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f32) {
        self.data[(ch * self.h + r) * self.w + c] = v;
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        [self.get(0, r, c), self.get(1, r, c), self.get(2, r, c)]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        for (ch, v) in rgb.into_iter().enumerate() {
            self.set(ch, r, c, v);
        }
    }

    pub fn from_tensor<T: Elem>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(dim_err!("image tensor needs 3 channels, got {c}"));
        }
        Self::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_tensor<T: Elem>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.h, self.w], |i| T::of(self.data[i] as f64))
    }

    /// Zeroes pixels outside `m`.
    pub fn masked(&self, m: &Mask) -> Result<Self> {
        self.check_mask(m)?;
        let n = self.h * self.w;
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if m.cells()[i % n] == 0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    /// Takes pixels from `other` where `m` is set.
    pub fn composite(&self, other: &Image, m: &Mask) -> Result<Self> {
        self.check_mask(m)?;
        if other.dims() != self.dims() {
            return Err(dim_err!("image {:?} vs {:?}", self.dims(), other.dims()));
        }
        let n = self.h * self.w;
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if m.cells()[i % n] == 1 {
                *v = other.data[i];
            }
        }
        Ok(out)
    }

    pub fn check_mask(&self, m: &Mask) -> Result<()> {
        if m.dims() != self.dims() {
            return Err(dim_err!("mask {:?} does not match image {:?}", m.dims(), self.dims()));
        }
        Ok(())
    }

    /// Clamps to [0,1] and rounds to the 8-bit grid.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Self { h: self.h, w: self.w, data }
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.h * self.w;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for ch in 0..3 {
                out.push(to_u8(self.data[ch * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        let n = h * w;
        if bytes.len() != 3 * n {
            return Err(Error::Data(format!("expected {} RGB bytes, got {}", 3 * n, bytes.len())));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for ch in 0..3 {
                data[ch * n + i] = bytes[3 * i + ch] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Places `parts` on a `rows × cols` grid of equally sized tiles.
    pub fn tile(parts: &[&Image], cols: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("tile needs at least one image".into()))?;
        let (h, w) = first.dims();
        if parts.iter().any(|p| p.dims() != (h, w)) {
            return Err(dim_err!("tiles must share extents"));
        }
        let rows = parts.len().div_ceil(cols);
        let mut out = Image::filled(rows * h, cols * w, [0.0; 3]);
        for (k, p) in parts.iter().enumerate() {
            let (tr, tc) = (k / cols, k % cols);
            for r in 0..h {
                for c in 0..w {
                    out.set_pixel(tr * h + r, tc * w + c, p.pixel(r, c));
                }
            }
        }
        Ok(out)
    }

    pub fn abs_diff(&self, other: &Image) -> Result<Self> {
        if other.dims() != self.dims() {
            return Err(dim_err!("image {:?} vs {:?}", self.dims(), other.dims()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).collect();
        Ok(Self { h: self.h, w: self.w, data })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a binary PNM header, returning (magic, width, height, offset of pixel data).
fn pnm_header(buf: &[u8]) -> Result<(&[u8], usize, usize, usize)> {
    let mut pos = 0;
    let mut fields: Vec<&[u8]> = Vec::new();
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(&buf[start..pos]);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad PNM header field".into()))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::Data(format!("only 8-bit PNM is supported (maxval {max})")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Data("empty PNM raster".into()));
    }
    Ok((fields[0], w, h, pos))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn is_png(buf: &[u8]) -> bool {
    buf.starts_with(b"\x89PNG")
}

pub fn decode_image(buf: &[u8]) -> Result<Image> {
    if is_png(buf) {
        let img = ::image::load_from_memory_with_format(buf, ::image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("PNG decode: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        return Image::from_rgb8(h as usize, w as usize, img.as_raw());
    }
    let (magic, w, h, off) = pnm_header(buf)?;
    if magic != b"P6" {
        return Err(Error::Data("expected a binary PPM (P6) or PNG image".into()));
    }
    let raster = buf.get(off..off + 3 * w * h).ok_or_else(|| Error::Data("truncated PPM raster".into()))?;
    Image::from_rgb8(h, w, raster)
}

pub fn decode_mask(buf: &[u8]) -> Result<Mask> {
    let (h, w, gray) = if is_png(buf) {
        let img = ::image::load_from_memory_with_format(buf, ::image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("PNG decode: {e}")))?
            .to_luma8();
        let (w, h) = img.dimensions();
        (h as usize, w as usize, img.into_raw())
    } else {
        let (magic, w, h, off) = pnm_header(buf)?;
        if magic != b"P5" {
            return Err(Error::Data("expected a binary PGM (P5) or PNG mask".into()));
        }
        let raster = buf.get(off..off + w * h).ok_or_else(|| Error::Data("truncated PGM raster".into()))?;
        (h, w, raster.to_vec())
    };
    Mask::new(h, w, gray.iter().map(|&v| (v >= 128) as u8).collect())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn encode_pgm(m: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.cells().iter().map(|&c| c * 255));
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read_bytes(path)?).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes PNG when the extension is `.png`, binary PPM otherwise.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let buf = ::image::RgbImage::from_raw(img.w as u32, img.h as u32, img.to_rgb8())
            .ok_or_else(|| Error::Data("image buffer size".into()))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: PNG encode: {e}", path.display())))
    } else {
        write_bytes(path, &encode_ppm(img))
    }
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_bytes(path, &encode_pgm(m))
}
