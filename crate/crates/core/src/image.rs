//! In-memory RGB images and binary PPM (P6) I/O.
//!
//! Pixels are interleaved RGB `f64` in `[0, 1]`. Pixel centers sit on integer
//! coordinates, so the valid continuous domain of a `w x h` image is
//! `[0, w-1] x [0, h-1]`; samples outside it clamp to the edge.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a P6 ppm (magic {0:?})")]
    BadMagic(String),
    #[error("malformed ppm header")]
    BadHeader,
    #[error("unsupported maxval {0}, only 255 is handled")]
    UnsupportedMaxval(u32),
    #[error("pixel data truncated: expected {expected} bytes, got {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("zero-sized image {w}x{h}")]
    ZeroSized { w: usize, h: usize },
}

/// Interleaved RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub w: usize,
    pub h: usize,
    /// `w * h * 3` values, row-major, RGB interleaved.
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![0.0; w * h * 3] }
    }

    pub fn filled(w: usize, h: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(w, h);
        for p in 0..w * h {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.w + x) * 3
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous coordinates, clamping to the edge.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let xc = x.clamp(0.0, (self.w - 1) as f64);
        let yc = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Mirrors the image left-right in place.
    pub fn hflip(&mut self) {
        for y in 0..self.h {
            for x in 0..self.w / 2 {
                let a = self.get(x, y);
                let b = self.get(self.w - 1 - x, y);
                self.set(x, y, b);
                self.set(self.w - 1 - x, y, a);
            }
        }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Separable Gaussian blur with kernel radius `ceil(3 sigma)`, edge clamp.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageBuf {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for t in -radius..=radius {
            let v = (-(t as f64 * t as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }

        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = ImageBuf::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = [0.0; 3];
                for (ki, t) in (-radius..=radius).enumerate() {
                    let p = self.get(clamp(x as isize + t, self.w), y);
                    for c in 0..3 {
                        acc[c] += kernel[ki] * p[c];
                    }
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = ImageBuf::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = [0.0; 3];
                for (ki, t) in (-radius..=radius).enumerate() {
                    let p = tmp.get(x, clamp(y as isize + t, self.h));
                    for c in 0..3 {
                        acc[c] += kernel[ki] * p[c];
                    }
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Per-channel median filter over a `(2r+1)^2` window, edge clamp.
    pub fn median_blur(&self, radius: usize) -> ImageBuf {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = ImageBuf::new(self.w, self.h);
        let mut window: Vec<f64> = Vec::with_capacity((2 * radius + 1).pow(2));
        for y in 0..self.h {
            for x in 0..self.w {
                let mut rgb = [0.0; 3];
                for (c, out_c) in rgb.iter_mut().enumerate() {
                    window.clear();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let px = clamp(x as isize + dx, self.w);
                            let py = clamp(y as isize + dy, self.h);
                            window.push(self.get(px, py)[c]);
                        }
                    }
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    *out_c = window[window.len() / 2];
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    /// Overwrites an axis-aligned rectangle (clipped to bounds) with `rgb`.
    pub fn fill_rect(&mut self, x0: isize, y0: isize, rw: usize, rh: usize, rgb: [f64; 3]) {
        let xa = x0.max(0) as usize;
        let ya = y0.max(0) as usize;
        let xb = ((x0 + rw as isize).max(0) as usize).min(self.w);
        let yb = ((y0 + rh as isize).max(0) as usize).min(self.h);
        for y in ya..yb {
            for x in xa..xb {
                self.set(x, y, rgb);
            }
        }
    }

    /// Rotates every pixel's RGB vector by `angle_rad` about the gray axis
    /// `(1,1,1)/sqrt(3)` (Rodrigues' formula). 120 degrees is exactly the
    /// cyclic channel permutation `(r,g,b) -> (b,r,g)`. Output is not
    /// re-clamped; call [`clamp01`](Self::clamp01) if needed.
    pub fn rotate_hue(&mut self, angle_rad: f64) {
        let (s, c) = angle_rad.sin_cos();
        let k = 1.0 / 3f64.sqrt();
        // Rotation matrix for axis (k,k,k): c*I + s*[axis]_x + (1-c)*(axis axis^T).
        let m = [
            [c + (1.0 - c) / 3.0, (1.0 - c) / 3.0 - s * k, (1.0 - c) / 3.0 + s * k],
            [(1.0 - c) / 3.0 + s * k, c + (1.0 - c) / 3.0, (1.0 - c) / 3.0 - s * k],
            [(1.0 - c) / 3.0 - s * k, (1.0 - c) / 3.0 + s * k, c + (1.0 - c) / 3.0],
        ];
        for p in 0..self.w * self.h {
            let i = p * 3;
            let v = [self.data[i], self.data[i + 1], self.data[i + 2]];
            for (r, row) in m.iter().enumerate() {
                self.data[i + r] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }

    /// Mean absolute difference over all channels of two same-sized images.
    pub fn mean_abs_diff(&self, other: &ImageBuf) -> f64 {
        assert_eq!((self.w, self.h), (other.w, other.h), "image size mismatch");
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Writes binary PPM (P6, maxval 255). Values are clamped then rounded.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "P6\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_ppm<P: AsRef<Path>>(&self, path: P) -> Result<(), ImageError> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    /// Reads binary PPM (P6, maxval 255). `#` comments in the header are
    /// skipped, as the format allows.
    pub fn read_ppm<R: Read>(mut r: R) -> Result<ImageBuf, ImageError> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let mut pos = 0usize;

        let mut next_token = |raw: &[u8]| -> Result<String, ImageError> {
            loop {
                while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < raw.len() && raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::BadHeader);
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };

        let magic = next_token(&raw)?;
        if magic != "P6" {
            return Err(ImageError::BadMagic(magic));
        }
        let w: usize = next_token(&raw)?.parse().map_err(|_| ImageError::BadHeader)?;
        let h: usize = next_token(&raw)?.parse().map_err(|_| ImageError::BadHeader)?;
        let maxval: u32 = next_token(&raw)?.parse().map_err(|_| ImageError::BadHeader)?;
        if maxval != 255 {
            return Err(ImageError::UnsupportedMaxval(maxval));
        }
        if w == 0 || h == 0 {
            return Err(ImageError::ZeroSized { w, h });
        }
        // Exactly one whitespace byte separates the header from the data.
        pos += 1;
        let expected = w * h * 3;
        let got = raw.len().saturating_sub(pos);
        if got < expected {
            return Err(ImageError::TruncatedData { expected, got });
        }
        let data = raw[pos..pos + expected]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(ImageBuf { w, h, data })
    }

    pub fn load_ppm<P: AsRef<Path>>(path: P) -> Result<ImageBuf, ImageError> {
        let f = std::fs::File::open(path)?;
        Self::read_ppm(std::io::BufReader::new(f))
    }
}
