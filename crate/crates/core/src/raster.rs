//! Dense images, binary morphology, connected components and 16-bit PGM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid { width, height, data: vec![fill; width * height] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Grid { width, height, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.index(x, y);
        self.data[i] = v;
    }

    /// Value at signed coordinates, `None` outside the frame.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> Option<&T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(&self.data[y as usize * self.width + x as usize])
        }
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }
}

/// Per-pixel instance labels; 0 is background.
pub type LabelImage = Grid<u16>;

/// Binary pixel mask.
pub type Mask = Grid<bool>;

fn morph3(mask: &Mask, want: bool) -> Mask {
    // `want == true` dilates, `want == false` erodes. Out-of-frame neighbors
    // are ignored.
    let (w, h) = (mask.width, mask.height);
    // Separable 3×3 square: rows first, then columns.
    let mut tmp = Grid::new(w, h, !want);
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            let hit = (x0..=x1).any(|xx| *mask.get(xx, y) == want);
            tmp.set(x, y, if hit { want } else { !want });
        }
    }
    let mut out = Grid::new(w, h, !want);
    for y in 0..h {
        let y0 = y.saturating_sub(1);
        let y1 = (y + 1).min(h - 1);
        for x in 0..w {
            let hit = (y0..=y1).any(|yy| *tmp.get(x, yy) == want);
            out.set(x, y, if hit { want } else { !want });
        }
    }
    out
}

pub fn dilate3(mask: &Mask) -> Mask {
    if mask.data.is_empty() {
        return mask.clone();
    }
    morph3(mask, true)
}

pub fn erode3(mask: &Mask) -> Mask {
    if mask.data.is_empty() {
        return mask.clone();
    }
    morph3(mask, false)
}

/// 3×3 opening (erode then dilate).
pub fn open3(mask: &Mask) -> Mask {
    dilate3(&erode3(mask))
}

/// 3×3 closing (dilate then erode).
pub fn close3(mask: &Mask) -> Mask {
    erode3(&dilate3(mask))
}

/// 8-connected component labeling. Components are numbered from 1 in
/// raster order of their first pixel; 0 marks unset pixels.
pub fn connected_components8(mask: &Mask) -> (Grid<u32>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = Grid::new(w, h, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || labels.data[start] != 0 {
            continue;
        }
        next += 1;
        labels.data[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && labels.data[j] == 0 {
                        labels.data[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Separable Gaussian blur with clamped borders; kernel radius ⌈3σ⌉.
pub fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 || img.data.is_empty() {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = Grid::new(img.width, img.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = (x + ki as i64 - r).clamp(0, w - 1);
                acc += k * img.data[(y * w + xx) as usize];
            }
            tmp.data[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Grid::new(img.width, img.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = (y + ki as i64 - r).clamp(0, h - 1);
                acc += k * tmp.data[(yy * w + x) as usize];
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Encodes a 16-bit binary PGM (P5, maxval 65535, big-endian samples).
pub fn encode_pgm16(img: &LabelImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, img: &LabelImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm16(img))?;
    Ok(())
}

/// Decodes a binary PGM. 8-bit files (maxval < 256) are widened to u16.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelImage> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(Error::Format(format!("bad PGM magic {magic:?}")));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let width = num(token(bytes)?)?;
    let height = num(token(bytes)?)?;
    let maxval = num(token(bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated PGM raster".into()));
    }
    let raster = &bytes[pos..pos + need];
    let data = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Grid::from_vec(width, height, data))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelImage> {
    decode_pgm(&fs::read(path)?)
}
