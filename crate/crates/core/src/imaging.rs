//! RGB images, binary masks, and their PPM/PGM encodings.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Dense `height x width x 3` pixel grid with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension {
                op: "image",
                left: vec![height, width, 3],
                right: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn paint(&mut self, mask: &Mask, rgb: [f64; 3]) {
        for (y, x) in mask.pixels() {
            self.set_pixel(y, x, rgb);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, maxval, body) = parse_netpbm_header(bytes)?;
        if magic != "P6" || maxval != 255 {
            return Err(Error::Format(format!("expected P6/255, got {magic}/{maxval}")));
        }
        if body.len() < w * h * 3 {
            return Err(Error::Format("truncated PPM body".into()));
        }
        let data = body[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(h, w, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

/// Binary `height x width` mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![height, width],
                right: vec![bits.len()],
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// Row-major iterator over set pixels as `(y, x)`.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Mean `(y, x)` of pixel centres, if nonempty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.area();
        if n == 0 {
            return None;
        }
        let (sy, sx) = self
            .pixels()
            .fold((0.0, 0.0), |(a, b), (y, x)| (a + y as f64 + 0.5, b + x as f64 + 0.5));
        Some((sy / n as f64, sx / n as f64))
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for (y, x) in self.pixels() {
            let y0 = y.saturating_sub(radius);
            let x0 = x.saturating_sub(radius);
            let y1 = (y + radius).min(self.height - 1);
            let x1 = (x + radius).min(self.width - 1);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    out.set(yy, xx, true);
                }
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, maxval, body) = parse_netpbm_header(bytes)?;
        if magic != "P5" || maxval != 255 {
            return Err(Error::Format(format!("expected P5/255, got {magic}/{maxval}")));
        }
        if body.len() < w * h {
            return Err(Error::Format("truncated PGM body".into()));
        }
        let mut bits = Vec::with_capacity(w * h);
        for &b in &body[..w * h] {
            match b {
                0 => bits.push(false),
                255 => bits.push(true),
                other => return Err(Error::Format(format!("mask value {other} not in {{0,255}}"))),
            }
        }
        Self::from_bits(h, w, bits)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    // exactly one whitespace byte separates the header from the body
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    Ok((fields[0].clone(), w, h, maxval, bytes.get(i..).unwrap_or(&[])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let mut img = Image::filled(3, 2, [0.0, 0.0, 0.0]);
        img.set_pixel(1, 1, [230.0 / 255.0, 25.0 / 255.0, 1.0]);
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip_and_value_check() {
        let mut m = Mask::empty(2, 3);
        m.set(0, 2, true);
        assert_eq!(Mask::from_pgm(&m.to_pgm()).unwrap(), m);
        let mut bad = m.to_pgm();
        *bad.last_mut().unwrap() = 7;
        assert!(Mask::from_pgm(&bad).is_err());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate(1).area(), 9);
        assert_eq!(m.dilate(2).area(), 25);
    }
}
