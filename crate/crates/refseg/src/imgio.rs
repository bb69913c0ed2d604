//! Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// 8-bit RGB raster, row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// 8-bit single-channel raster; masks use 0 and 255.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut buf = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            buf.extend_from_slice(&rgb);
        }
        Raster { width, height, rgb: buf }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }
}

pub fn write_ppm(path: &Path, img: &Raster) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.rgb)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_netpbm(&bytes, b"P6", 3, path)?;
    Ok(Raster { width: w, height: h, rgb: data })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_netpbm(&bytes, b"P5", 1, path)?;
    Ok(GrayImage { width: w, height: h, pixels: data })
}

fn parse_netpbm(
    bytes: &[u8],
    magic: &[u8],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<Vec<u8>> {
        // Skip whitespace and '#' comment lines between header tokens.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse(format!("{}: truncated header", path.display())));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    if token(&mut pos)? != magic {
        return Err(bad("wrong magic"));
    }
    let parse_num = |t: Vec<u8>| -> Result<usize> {
        String::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))
    };
    let w = parse_num(token(&mut pos)?)?;
    let h = parse_num(token(&mut pos)?)?;
    let maxval = parse_num(token(&mut pos)?)?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}
