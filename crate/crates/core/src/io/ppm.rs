use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl ImageFile {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        ImageFile { width, height, rgb: fill.repeat(width * height) }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != 3 * width * height {
            return Err(Error::Format(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                rgb.len()
            )));
        }
        Ok(ImageFile { width, height, rgb })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

pub fn ppm_encode(img: &ImageFile) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed PPM header: bad {what}")))
    }
}

pub fn ppm_decode(bytes: &[u8]) -> Result<ImageFile> {
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some(b"P3") => return Err(Error::Format("ASCII PPM unsupported".into())),
        _ => return Err(Error::Format("not a binary PPM (missing P6 magic)".into())),
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("PPM has empty dimensions {width}x{height}")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Format("malformed PPM header: missing separator before payload".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Format(format!("short PPM payload: {} bytes, expected {need}", payload.len())));
    }
    ImageFile::from_rgb(width, height, payload[..need].to_vec())
}

pub fn ppm_read(path: impl AsRef<Path>) -> Result<ImageFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ppm_decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn ppm_write(path: impl AsRef<Path>, img: &ImageFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ppm_encode(img)).map_err(|e| Error::io(path, e))
}
