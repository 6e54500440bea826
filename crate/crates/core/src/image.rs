//! Minimal RGB image buffer with plain-text PPM/PGM serialization.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, row-major, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    /// Write as binary PPM (P6), 8 bits per channel.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        for &v in &self.pixels {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let (magic, width, height, maxval) = read_pnm_header(&mut reader)?;
        if magic != "P6" {
            return Err(Error::Domain(format!("expected P6 PPM, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::Domain(format!("unsupported maxval {maxval}")));
        }
        let mut raw = vec![0u8; width * height * 3];
        reader.read_exact(&mut raw)?;
        Ok(Image {
            height,
            width,
            pixels: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

/// Grayscale mask, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    /// Write as binary PGM (P5), 8 bits.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        save_pgm_bytes(
            path,
            self.width,
            self.height,
            self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        )
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let (magic, width, height, maxval) = read_pnm_header(&mut reader)?;
        if magic != "P5" {
            return Err(Error::Domain(format!("expected P5 PGM, got {magic}")));
        }
        if maxval != 255 {
            return Err(Error::Domain(format!("unsupported maxval {maxval}")));
        }
        let mut raw = vec![0u8; width * height];
        reader.read_exact(&mut raw)?;
        Ok(Mask {
            height,
            width,
            values: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

pub fn save_pgm_bytes(
    path: &Path,
    width: usize,
    height: usize,
    bytes: impl Iterator<Item = u8>,
) -> Result<()> {
    let mut out = Vec::with_capacity(width * height + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_pnm_header(reader: &mut impl BufRead) -> Result<(String, usize, usize, u32)> {
    let mut fields = Vec::new();
    let mut magic = String::new();
    // Header fields are whitespace separated; '#' starts a comment line.
    while fields.len() < 3 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Domain("truncated PNM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        for tok in content.split_whitespace() {
            if magic.is_empty() {
                magic = tok.to_string();
            } else {
                fields.push(tok.to_string());
            }
        }
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Domain(format!("bad PNM header field {s:?}")))
    };
    let width = parse(&fields[0])?;
    let height = parse(&fields[1])?;
    let maxval = parse(&fields[2])? as u32;
    Ok((magic, width, height, maxval))
}
