use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{GaitError, Result};

pub const ALIGNED_HEIGHT: usize = 64;
pub const ALIGNED_WIDTH: usize = 44;

/// A grayscale foreground mask with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Silhouette {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(GaitError::ShapeMismatch(format!(
                "{height}x{width} silhouette given {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(GaitError::ShapeMismatch(
                "silhouette intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Silhouette {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Silhouette {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Writes one pixel, clamped to [0, 1].
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn is_aligned(&self) -> bool {
        self.height == ALIGNED_HEIGHT && self.width == ALIGNED_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p <= 0.0)
    }

    /// Reads an 8-bit image as grayscale, dividing by 255.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| GaitError::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let image_err = |reason: String| GaitError::Image {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| image_err("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| image_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(image_err("unexpanded palette".into())),
        };
        let stride = info.line_size;
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &buf[y * stride..y * stride + w * channels];
            for x in 0..w {
                let px = &row[x * channels..(x + 1) * channels];
                let gray = if channels >= 3 {
                    (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32).round()
                } else {
                    px[0] as f32
                };
                pixels.push(gray / 255.0);
            }
        }
        Silhouette::new(h, w, pixels)
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| GaitError::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| {
            GaitError::io(path, std::io::Error::other(e.to_string()))
        };
        let mut writer = encoder.write_header().map_err(to_io)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    /// Box-average downsampling by an integer factor (trailing remainder dropped).
    pub fn downsample(&self, factor: usize) -> Silhouette {
        if factor <= 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f32;
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(y * factor + dy, x * factor + dx);
                    }
                }
                pixels.push(acc / norm);
            }
        }
        Silhouette {
            height: h,
            width: w,
            pixels,
        }
    }
}

const MAX_ALIGN_PASSES: usize = 16;

/// Nearest-neighbor index that maps both endpoints onto both endpoints.
fn corner_index(i: usize, out_len: usize, in_len: usize) -> usize {
    if out_len <= 1 || in_len <= 1 {
        return 0;
    }
    let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    (pos.round() as usize).min(in_len - 1)
}

/// Normalizes a raw silhouette to 64x44: crop to the nonzero rows, scale the
/// crop to height 64 (width scaled by the same factor), then take a 44-wide
/// window centered on the horizontal center of mass of the upper half.
///
/// When the window cuts off part of the figure the pass is repeated on its
/// own output until nothing changes, so the result is always a fixed point.
pub fn align_silhouette(raw: &Silhouette) -> Result<Silhouette> {
    let mut out = align_pass(raw)?;
    for _ in 0..MAX_ALIGN_PASSES {
        let next = align_pass(&out)?;
        if next == out {
            return Ok(out);
        }
        out = next;
    }
    Err(GaitError::UnstableAlignment)
}

fn align_pass(raw: &Silhouette) -> Result<Silhouette> {
    let rows_nonzero: Vec<usize> = (0..raw.height)
        .filter(|&y| (0..raw.width).any(|x| raw.get(y, x) > 0.0))
        .collect();
    let (top, bottom) = match (rows_nonzero.first(), rows_nonzero.last()) {
        (Some(&t), Some(&b)) => (t, b),
        _ => return Err(GaitError::EmptySilhouette),
    };
    let crop_h = bottom - top + 1;
    let scale = ALIGNED_HEIGHT as f64 / crop_h as f64;
    let scaled_w = ((raw.width as f64 * scale).round() as usize).max(1);

    let mut scaled = vec![0f32; ALIGNED_HEIGHT * scaled_w];
    for y in 0..ALIGNED_HEIGHT {
        let sy = top + corner_index(y, ALIGNED_HEIGHT, crop_h);
        for x in 0..scaled_w {
            let sx = corner_index(x, scaled_w, raw.width);
            scaled[y * scaled_w + x] = raw.get(sy, sx);
        }
    }

    let center_of_mass = |rows: std::ops::Range<usize>| -> Option<f64> {
        let (mut mass, mut moment) = (0.0f64, 0.0f64);
        for y in rows {
            for x in 0..scaled_w {
                let v = scaled[y * scaled_w + x] as f64;
                mass += v;
                moment += v * x as f64;
            }
        }
        (mass > 0.0).then(|| moment / mass)
    };
    let cx = center_of_mass(0..ALIGNED_HEIGHT / 2)
        .or_else(|| center_of_mass(0..ALIGNED_HEIGHT))
        .unwrap_or((scaled_w as f64 - 1.0) / 2.0);
    // Window [left, left + 44) whose center column 21.5 sits within half a
    // pixel of cx; flooring makes an aligned output a fixed point.
    let half = (ALIGNED_WIDTH as f64 - 1.0) / 2.0;
    let window_left = |c: f64| (c - half + 0.5).floor() as isize;
    let occupied: Vec<usize> = (0..scaled_w)
        .filter(|&x| (0..ALIGNED_HEIGHT).any(|y| scaled[y * scaled_w + x] > 0.0))
        .collect();
    let mut left = window_left(cx);
    let in_window = |x: usize| (x as isize) >= left && (x as isize) < left + ALIGNED_WIDTH as isize;
    if !occupied.iter().any(|&x| in_window(x)) {
        // the center of mass fell in a gap; snap to the nearest occupied column
        let nearest = occupied
            .iter()
            .copied()
            .min_by(|&a, &b| (a as f64 - cx).abs().total_cmp(&(b as f64 - cx).abs()))
            .ok_or(GaitError::EmptySilhouette)?;
        left = window_left(nearest as f64);
    }

    let mut out = Silhouette::zeros(ALIGNED_HEIGHT, ALIGNED_WIDTH);
    for y in 0..ALIGNED_HEIGHT {
        for x in 0..ALIGNED_WIDTH {
            let sx = left + x as isize;
            if sx >= 0 && (sx as usize) < scaled_w {
                out.pixels[y * ALIGNED_WIDTH + x] = scaled[y * scaled_w + sx as usize];
            }
        }
    }
    Ok(out)
}
