//! RGB float images and the on-disk formats the tools read and write.
//!
//! * Color renders: binary PPM (`P6`), 8 bits per sample, maxval 255.
//!   Values are clamped to `[0, 1]` and stored as `round(v * 255)`.
//! * Depth diagnostics: binary PGM (`P5`), maxval 65535, two bytes per
//!   sample in big-endian order (as the netpbm format requires). A sample
//!   holds `round(depth * 1000)` saturated to 65535, i.e. thousandths of a
//!   world unit; pixels with no coverage are 0.
//! * PNG input is accepted for 8-bit RGB/RGBA/gray images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width × 3` image with samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be non-zero".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.data[(y * width + x) * 3 + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Single channel `c` as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize8(v)).collect();
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)
        .and_then(|_| w.write_all(&bytes))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a depth map (row-major, world units) as a 16-bit PGM.
pub fn write_depth_pgm(path: impl AsRef<Path>, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if depth.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} depth samples for {width}x{height}",
            depth.len()
        )));
    }
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        let q = if d.is_finite() && d > 0.0 {
            (d * 1000.0).round().min(65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n65535\n")
        .and_then(|_| w.write_all(&bytes))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Loads a PPM (`P6`) or PNG image, dispatching on the file extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        _ => read_ppm(path),
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::Image(format!("{}: {m}", path.display())))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        // Skip whitespace and comments between header tokens.
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
            return Err("truncated header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P6" {
        return Err(format!("unsupported magic {}", header[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad maxval {maxval}"));
    }
    pos += 1;
    let wide = maxval > 255;
    let n = w * h * 3;
    let need = if wide { n * 2 } else { n };
    let raster = bytes.get(pos..pos + need).ok_or("truncated raster")?;
    let scale = maxval as f64;
    let data = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / scale).collect()
    };
    ImageBuffer::from_vec(w, h, data).map_err(|e| e.to_string())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let err = |m: String| Error::Image(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(err(format!("unsupported color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
    }
    ImageBuffer::from_vec(w, h, data)
}
