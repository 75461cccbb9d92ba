//! Image containers and their on-disk formats: 8-bit PNG for colour and masks, 16-bit PNG
//! for label maps, and a small float-grid dump for probability/opacity/depth channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, c: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }
}

/// Binary bitmap, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Bitmap {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Bitmap { width, height, data }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn same_shape(&self, other: &Bitmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_area(&self, other: &Bitmap) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &Bitmap) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Bitmap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Bitmap::from_fn(width, height, |r, c| {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sr.min(self.height - 1), sc.min(self.width - 1))
        })
    }
}

/// Integer label map (0 is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        LabelImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    /// Sorted distinct labels present in the map.
    pub fn labels(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn mask_of(&self, label: u32) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| *v == label).collect(),
        }
    }
}

/// Rendered object probabilities: `num_slots` channels plus opacity and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityImage {
    pub num_slots: usize,
    pub width: usize,
    pub height: usize,
    /// Slot-major: `values[n * H * W + row * W + col]`.
    pub values: Vec<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
}

impl ProbabilityImage {
    pub fn new(num_slots: usize, width: usize, height: usize) -> Self {
        let px = width * height;
        ProbabilityImage {
            num_slots,
            width,
            height,
            values: vec![0.0; num_slots * px],
            opacity: vec![0.0; px],
            depth: vec![0.0; px],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, slot: usize) -> &[f64] {
        let px = self.pixels();
        &self.values[slot * px..(slot + 1) * px]
    }

    pub fn value(&self, slot: usize, pixel: usize) -> f64 {
        self.values[slot * self.pixels() + pixel]
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

struct DecodedPng {
    width: usize,
    height: usize,
    channels: usize,
    sixteen: bool,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err(path, "unexpanded palette image")),
    };
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        sixteen: info.bit_depth == png::BitDepth::Sixteen,
        data: buf,
    })
}

impl DecodedPng {
    /// Sample `ch` of pixel `i`, scaled to `[0, 1]`.
    fn sample(&self, i: usize, ch: usize) -> f32 {
        let idx = i * self.channels + ch;
        if self.sixteen {
            u16::from_be_bytes([self.data[2 * idx], self.data[2 * idx + 1]]) as f32 / 65535.0
        } else {
            self.data[idx] as f32 / 255.0
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    write_png(path, img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let png = read_png(path)?;
    let mut img = RgbImage::new(png.width, png.height);
    for i in 0..png.width * png.height {
        for ch in 0..3 {
            let src = if png.channels < 3 { 0 } else { ch };
            img.data[i * 3 + ch] = png.sample(i, src);
        }
    }
    Ok(img)
}

/// Writes a single-channel 8-bit image of values in `[0, 1]`.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(shape_err(width * height, values.len()));
    }
    let bytes: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

pub fn write_mask_png(path: &Path, mask: &Bitmap) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

/// Reads a mask; any nonzero first channel counts as set.
pub fn read_mask_png(path: &Path) -> Result<Bitmap> {
    let png = read_png(path)?;
    Ok(Bitmap {
        width: png.width,
        height: png.height,
        data: (0..png.width * png.height).map(|i| png.sample(i, 0) >= 0.5).collect(),
    })
}

pub fn write_label_png(path: &Path, labels: &LabelImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.data.len() * 2);
    for v in &labels.data {
        let v = u16::try_from(*v).map_err(|_| Error::InvalidInput(format!("label {v} does not fit in 16 bits")))?;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_png(path, labels.width, labels.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn read_label_png(path: &Path) -> Result<LabelImage> {
    let png = read_png(path)?;
    if png.channels != 1 {
        return Err(png_err(path, "label map must be single-channel"));
    }
    let data = (0..png.width * png.height)
        .map(|i| {
            if png.sixteen {
                u16::from_be_bytes([png.data[2 * i], png.data[2 * i + 1]]) as u32
            } else {
                png.data[i] as u32
            }
        })
        .collect();
    Ok(LabelImage {
        width: png.width,
        height: png.height,
        data,
    })
}

const GRID_MAGIC: &[u8; 4] = b"SLFG";
const GRID_VERSION: u32 = 1;

/// Multi-channel float grid (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatGrid {
    /// Slot channels followed by opacity and depth.
    pub fn from_probabilities(p: &ProbabilityImage) -> Self {
        let data = p.values.iter().chain(&p.opacity).chain(&p.depth).map(|v| *v as f32).collect();
        FloatGrid {
            channels: p.num_slots + 2,
            height: p.height,
            width: p.width,
            data,
        }
    }
}

pub fn write_float_grid(path: &Path, grid: &FloatGrid) -> Result<()> {
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(16 + grid.data.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, grid.channels as u32, grid.height as u32, grid.width as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &grid.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_float_grid(path: &Path) -> Result<FloatGrid> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Data(format!("{}: not a float grid", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != GRID_VERSION as usize {
        return Err(Error::Data(format!("{}: unsupported float grid version {}", path.display(), word(0))));
    }
    let (channels, height, width) = (word(1), word(2), word(3));
    let n = channels * height * width;
    if bytes.len() != 20 + 4 * n {
        return Err(Error::Data(format!("{}: truncated float grid", path.display())));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FloatGrid {
        channels,
        height,
        width,
        data,
    })
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 15.0) / 255.0;
        }
        let p = dir.path().join("a/rgb.png");
        write_rgb_png(&p, &img).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), img);

        let mask = Bitmap::from_fn(5, 4, |r, c| (r + c) % 3 == 0);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);

        let labels = LabelImage {
            width: 2,
            height: 2,
            data: vec![0, 1, 300, 65535],
        };
        let p = dir.path().join("l.png");
        write_label_png(&p, &labels).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), labels);
    }

    #[test]
    fn float_grid_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ProbabilityImage::new(2, 3, 2);
        for (i, v) in p.values.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        p.opacity.fill(0.5);
        p.depth.fill(2.5);
        let g = FloatGrid::from_probabilities(&p);
        let path = dir.path().join("g.bin");
        write_float_grid(&path, &g).unwrap();
        let back = read_float_grid(&path).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.channels, 4);
    }

    #[test]
    fn resize_nearest() {
        let m = Bitmap::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let small = m.resized(2, 2);
        assert_eq!(small.data, vec![true, false, false, false]);
        let big = small.resized(4, 4);
        assert_eq!(big, m);
    }

    #[test]
    fn psnr_of_known_error() {
        let a = vec![0.0f32; 100];
        let b = vec![0.1f32; 100];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }
}
