//! Minimal raster I/O: binary PPM (P6) and PGM (P5) plus PNG output.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("malformed {kind} file: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("image is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    Dimensions {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ppm" => Ok(ImageFormat::Ppm),
            "png" => Ok(ImageFormat::Png),
            other => Err(format!("unknown image format `{other}` (expected ppm or png)")),
        }
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[3 * row * self.width..3 * (row + 1) * self.width]
    }

    /// `P6\n<w> <h>\n255\n` followed by the raw bytes.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()
    }

    pub fn write_png<W: Write>(&self, w: W) -> Result<(), ImageError> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.data)?;
        writer.finish()?;
        Ok(())
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, data) = parse_netpbm(bytes, b"P6", 3, "PPM")?;
        Ok(RgbImage {
            width: w,
            height: h,
            data: data.to_vec(),
        })
    }
}

/// Writes `image` to `path` in the requested format.
pub fn write_image(image: &RgbImage, path: &Path, format: ImageFormat) -> Result<(), ImageError> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        ImageFormat::Ppm => image.write_ppm(file)?,
        ImageFormat::Png => image.write_png(file)?,
    }
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageError> {
    RgbImage::from_ppm_bytes(&std::fs::read(path)?)
}

/// Display mask: `true` marks a cell hidden from the rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub masked: Vec<bool>,
}

impl Mask {
    pub fn none(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            masked: vec![false; width * height],
        }
    }

    pub fn is_masked(&self, col: usize, row: usize) -> bool {
        self.masked[row * self.width + col]
    }

    /// Binary PGM where a zero sample means masked.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, data) = parse_netpbm(bytes, b"P5", 1, "PGM")?;
        Ok(Mask {
            width: w,
            height: h,
            masked: data.iter().map(|&v| v == 0).collect(),
        })
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.masked.iter().map(|&m| if m { 0u8 } else { 255 }));
        out
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        Mask::from_pgm_bytes(&std::fs::read(path)?)
    }
}

fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    channels: usize,
    kind: &'static str,
) -> Result<(usize, usize, &'a [u8]), ImageError> {
    let bad = |reason: &str| ImageError::Malformed {
        kind,
        reason: reason.to_string(),
    };
    if !bytes.starts_with(magic) {
        return Err(bad("bad magic number"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let need = w * h * channels;
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_ppm_is_byte_exact() {
        let img = RgbImage::filled(1, 1, [255, 0, 0]);
        assert_eq!(img.to_ppm_bytes(), b"P6\n1 1\n255\n\xff\x00\x00".to_vec());
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(buf, img.to_ppm_bytes());
    }

    #[test]
    fn payload_is_row_major() {
        let mut img = RgbImage::new(2, 1);
        img.set_pixel(0, 0, [0, 255, 0]);
        img.set_pixel(1, 0, [0, 0, 255]);
        let bytes = img.to_ppm_bytes();
        assert_eq!(&bytes[b"P6\n2 1\n255\n".len()..], &[0, 255, 0, 0, 0, 255]);
    }

    #[test]
    fn ppm_size_is_header_plus_three_bytes_per_pixel() {
        let img = RgbImage::new(1024, 512);
        let bytes = img.to_ppm_bytes();
        assert_eq!(bytes.len(), b"P6\n1024 512\n255\n".len() + 3 * 1024 * 512);
        assert_eq!(3 * 1024 * 512, 1_572_864);
    }

    #[test]
    fn ppm_parses_back() {
        let mut img = RgbImage::new(3, 2);
        img.set_pixel(2, 1, [1, 2, 3]);
        let back = RgbImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back, img);
        let commented = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        assert_eq!(RgbImage::from_ppm_bytes(commented).unwrap().pixel(0, 0), [1, 2, 3]);
        assert!(RgbImage::from_ppm_bytes(b"P3\n1 1\n255\n").is_err());
        assert!(RgbImage::from_ppm_bytes(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn pgm_mask_zero_means_masked() {
        let m = Mask::from_pgm_bytes(b"P5\n3 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(m.masked, vec![true, false, false]);
        assert_eq!(Mask::from_pgm_bytes(&m.to_pgm_bytes()).unwrap(), m);
    }

    #[test]
    fn png_has_signature() {
        let mut buf = Vec::new();
        RgbImage::filled(4, 2, [10, 20, 30]).write_png(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn format_parsing() {
        assert_eq!("PNG".parse::<ImageFormat>().unwrap(), ImageFormat::Png);
        assert!("gif".parse::<ImageFormat>().is_err());
    }
}
