//! Single-channel luminance images and 8-bit binary PGM interchange.

use std::io::{Read, Write};
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// `height × width` luminance grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel access with coordinates clamped to the border.
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_dims(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |y, x| {
            self.get(top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Values as a `[1, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone())
            .expect("image dims are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        match s {
            [1, h, w] | [h, w] => Image::new(*h, *w, t.data().to_vec()),
            _ => Err(Error::Dimension(format!("expected a [1, h, w] map, got {s:?}"))),
        }
    }

    /// Quantizes to 8 bits with rounding; values are clamped to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(mut input: R) -> Result<Image> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        parse_pgm(&buf)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.pixels.len() + 20);
        self.write_pgm(&mut bytes)?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        parse_pgm(&bytes)
    }
}

fn pgm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "PGM",
        detail: detail.into(),
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| pgm_err("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(pgm_err(format!("unsupported magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| pgm_err(format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(pgm_err(format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or_else(|| pgm_err("truncated raster"))?;
    Image::from_bytes(height, width, raster)
}

/// 3×3 Sobel responses `(gx, gy)` with replicated borders.
pub fn sobel(img: &Image) -> (Image, Image) {
    let (h, w) = img.dims();
    let at = |y: usize, x: usize, dy: isize, dx: isize| img.get_clamped(y as isize + dy, x as isize + dx);
    let gx = Image::from_fn(h, w, |y, x| {
        (at(y, x, -1, 1) + 2.0 * at(y, x, 0, 1) + at(y, x, 1, 1))
            - (at(y, x, -1, -1) + 2.0 * at(y, x, 0, -1) + at(y, x, 1, -1))
    });
    let gy = Image::from_fn(h, w, |y, x| {
        (at(y, x, 1, -1) + 2.0 * at(y, x, 1, 0) + at(y, x, 1, 1))
            - (at(y, x, -1, -1) + 2.0 * at(y, x, -1, 0) + at(y, x, -1, 1))
    });
    (gx, gy)
}

/// Sobel kernels as a `[2, 1, 3, 3]` tensor (x response, then y response).
pub fn sobel_kernel() -> Tensor {
    #[rustfmt::skip]
    let data = vec![
        -1.0, 0.0, 1.0,
        -2.0, 0.0, 2.0,
        -1.0, 0.0, 1.0,

        -1.0, -2.0, -1.0,
         0.0,  0.0,  0.0,
         1.0,  2.0,  1.0,
    ];
    Tensor::new(vec![2, 1, 3, 3], data).expect("static shape")
}

/// Normalized 1-D Gaussian taps of length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable filtering that only keeps fully covered positions.
pub fn filter_valid(img: &Image, taps: &[f64]) -> Option<Image> {
    let k = taps.len();
    let (h, w) = img.dims();
    if h < k || w < k {
        return None;
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let rows = Image::from_fn(h, ow, |y, x| {
        taps.iter().enumerate().map(|(i, t)| t * img.get(y, x + i)).sum()
    });
    Some(Image::from_fn(oh, ow, |y, x| {
        taps.iter().enumerate().map(|(i, t)| t * rows.get(y + i, x)).sum()
    }))
}

/// Same-size separable filtering; taps falling outside the image are dropped
/// and the remaining weights renormalized.
pub fn filter_same(img: &Image, taps: &[f64]) -> Image {
    let k = taps.len() as isize;
    let c = k / 2;
    let (h, w) = img.dims();
    let pass = |len: usize, idx: usize, get: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.0;
        let mut mass = 0.0;
        for (i, t) in taps.iter().enumerate() {
            let s = idx as isize + i as isize - c;
            if s >= 0 && s < len as isize {
                acc += t * get(s as usize);
                mass += t;
            }
        }
        acc / mass
    };
    let rows = Image::from_fn(h, w, |y, x| pass(w, x, &|s| img.get(y, s)));
    Image::from_fn(h, w, |y, x| pass(h, y, &|s| rows.get(s, x)))
}

/// Mean over a `size × size` window, same size output.
pub fn box_blur(img: &Image, size: usize) -> Image {
    filter_same(img, &vec![1.0 / size as f64; size])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Image::from_fn(5, 7, |y, x| ((y * 7 + x) % 256) as f64 / 255.0);
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n7 5\n255\n"));
        let back = Image::read_pgm(&buf[..]).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
        assert_eq!(back.dims(), (5, 7));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[0, 255]);
        let img = Image::read_pgm(&buf[..]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_ascii_and_truncation() {
        assert!(Image::read_pgm(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(Image::read_pgm(&b"P5\n4 4\n255\n\x01\x02"[..]).is_err());
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let (gx, gy) = sobel(&Image::filled(6, 6, 0.4));
        assert!(gx.pixels().iter().chain(gy.pixels()).all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_of_ramp() {
        let img = Image::from_fn(5, 5, |_, x| x as f64);
        let (gx, gy) = sobel(&img);
        assert_eq!(gx.get(2, 2), 8.0);
        assert_eq!(gy.get(2, 2), 0.0);
    }

    #[test]
    fn filters_preserve_constants() {
        let img = Image::filled(9, 12, 0.25);
        let taps = gaussian_taps(5, 1.0);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let same = filter_same(&img, &taps);
        assert!(same.pixels().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let valid = filter_valid(&img, &taps).unwrap();
        assert_eq!(valid.dims(), (5, 8));
        assert!(filter_valid(&Image::filled(3, 3, 0.0), &taps).is_none());
    }
}
