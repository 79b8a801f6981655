//! Planar RGB images in `[0, 1]`, PNG I/O and the resampling used for
//! local crops and global thumbnails.
//!
//! Resampling is separable bilinear (triangle) filtering. When shrinking,
//! the triangle support widens with the scale factor so every source pixel
//! contributes, which keeps mean intensity stable under large reductions.
//! Output pixel centres map onto the source through `x1 + (i + 0.5)·scale`,
//! so a same-size crop at integer offsets is an exact copy.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use waymark_nn::Tensor;

use crate::bbox::BBox;
use crate::dataset::DatasetError;

/// Side of the local patch fed to the selector's local branch.
pub const LOCAL_CROP: usize = 224;
/// Side of the whole-frame thumbnail fed to the global branch.
pub const THUMBNAIL: usize = 64;

/// RGB image stored channel-planar (`CHW`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for (c, v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(*v);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn put_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Mean over channels and pixels of the integer pixel rectangle
    /// `[x1, x2) × [y1, y2)`.
    pub fn region_mean(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> f64 {
        let mut acc = 0.0f64;
        for c in 0..3 {
            for y in y1..y2 {
                for x in x1..x2 {
                    acc += self.get(c, y, x) as f64;
                }
            }
        }
        acc / (3 * (x2 - x1) * (y2 - y1)).max(1) as f64
    }

    pub fn hflip(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, self.width - 1 - x, self.get(c, y, x));
                }
            }
        }
        out
    }

    /// `[3, H, W]` tensor sharing the planar layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([3, self.height, self.width], self.data.clone())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        if w == 0 || h == 0 {
            return Err(DatasetError::Image(format!("{}: empty image", path.display())));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(DatasetError::Image(format!("{}: unsupported color type {other:?}", path.display()))),
        };
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[(y * w + x) * channels..];
                let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
                img.put_rgb(y, x, rgb.map(|v| v as f32 / 255.0));
            }
        }
        Ok(img)
    }

    /// Quantises to 8-bit RGB and writes a PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| DatasetError::Image(format!("{}: {e}", path.display())))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| DatasetError::Image(e.to_string()))?;
        writer.write_image_data(&self.to_rgb8()).map_err(|e| DatasetError::Image(e.to_string()))?;
        writer.finish().map_err(|e| DatasetError::Image(e.to_string()))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        bytes
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Resamples the continuous region `region` to `out_w × out_h`.
    pub fn resample(&self, region: &BBox, out_w: usize, out_h: usize) -> RgbImage {
        let xs = filter_taps(region.x1, region.width(), out_w, self.width);
        let ys = filter_taps(region.y1, region.height(), out_h, self.height);
        let mut tmp = vec![0.0f32; self.height * out_w];
        let mut out = RgbImage::new(out_w, out_h);
        for c in 0..3 {
            let src = self.plane(c);
            // horizontal pass over only the rows the vertical taps touch
            let (row_lo, row_hi) = ys.iter().flat_map(|t| t.iter().map(|&(i, _)| i)).fold((usize::MAX, 0), |(lo, hi), i| (lo.min(i), hi.max(i)));
            for y in row_lo..=row_hi.min(self.height - 1) {
                let srow = &src[y * self.width..(y + 1) * self.width];
                for (ox, taps) in xs.iter().enumerate() {
                    tmp[y * out_w + ox] = taps.iter().map(|&(i, w)| srow[i] * w).sum();
                }
            }
            let dst = out.plane_mut(c);
            for (oy, taps) in ys.iter().enumerate() {
                for ox in 0..out_w {
                    let v: f32 = taps.iter().map(|&(i, w)| tmp[i * out_w + ox] * w).sum();
                    dst[oy * out_w + ox] = v.clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Normalised triangle-filter taps for each output sample along one axis.
fn filter_taps(start: f64, extent: f64, out: usize, size: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = extent / out as f64;
    let support = scale.max(1.0);
    (0..out)
        .map(|i| {
            let centre = start + (i as f64 + 0.5) * scale;
            let lo = ((centre - support).floor() as isize).max(0) as usize;
            let hi = ((centre + support).ceil() as isize).clamp(0, size as isize) as usize;
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|p| {
                    let w = 1.0 - ((p as f64 + 0.5) - centre).abs() / support;
                    (w > 0.0).then_some((p, w))
                })
                .collect();
            if taps.is_empty() {
                let p = (centre.floor().max(0.0) as usize).min(size - 1);
                taps.push((p, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(p, w)| (p, (w / total) as f32)).collect()
        })
        .collect()
}

/// Resamples the box region to the selector's 224×224 local patch.
pub fn crop_local(image: &RgbImage, region: &BBox) -> Result<RgbImage, DatasetError> {
    if !region.is_valid() || region.area() < 1.0 {
        return Err(DatasetError::DegenerateBox(*region));
    }
    if !region.within(image.width() as f64, image.height() as f64) {
        return Err(DatasetError::OutOfBounds(*region));
    }
    Ok(image.resample(region, LOCAL_CROP, LOCAL_CROP))
}

/// Resamples the whole frame to the 64×64 global thumbnail.
pub fn thumbnail(image: &RgbImage) -> RgbImage {
    let full = BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64);
    image.resample(&full, THUMBNAIL, THUMBNAIL)
}
