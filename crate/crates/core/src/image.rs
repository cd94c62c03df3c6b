//! 8-bit PNG I/O, bicubic resampling and conversion to tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dims3, Tensor};

/// Channels-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    /// Values are clamped to `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err("image", format!("degenerate extent {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(shape_err("image", format!("{channels} channels (need 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(shape_err(
                "image",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        clamp_unit(&mut data);
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone())
            .expect("image extents are nonzero")
    }

    /// `[H, W, C]` tensor to an image, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = dims3("image_from_tensor", t)?;
        Self::new(h, w, c, t.data().to_vec())
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            data,
            channels: 3,
            ..*self
        }
    }

    /// Top-left `height x width` region.
    pub fn crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(shape_err(
                "crop",
                format!("{height}x{width} from {}x{}", self.height, self.width),
            ));
        }
        Image::from_fn(height, width, self.channels, |y, x, c| self.at(y, x, c))
    }

    /// Round-half-up 8-bit quantisation.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Reconstruct what saving and reloading would produce.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect();
        Image { data, ..*self }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut decoder = png::Decoder::new(reader);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::InvalidArgument("PNG too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf)?;
        let (h, w) = (info.height as usize, info.width as usize);
        let src_channels = info.color_type.samples();
        let keep = match info.color_type {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
            _ => 3,
        };
        let mut data = Vec::with_capacity(h * w * keep);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                let px = &row[x * src_channels..];
                data.extend(px[..keep].iter().map(|&v| v as f32 / 255.0));
            }
        }
        Self::new(h, w, keep, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        };
        write_png(path, self.width, self.height, color, None, &self.to_u8())
    }
}

fn clamp_unit(data: &mut [f32]) {
    for v in data {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        encoder.set_palette(p);
    }
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// One byte per pixel, looked up in `palette` (at most 256 entries).
pub fn write_indexed_png(
    path: &Path,
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    if indices.len() != width * height || palette.is_empty() || palette.len() > 256 {
        return Err(shape_err(
            "write_indexed_png",
            format!(
                "{} indices for {width}x{height}, palette of {}",
                indices.len(),
                palette.len()
            ),
        ));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= palette.len()) {
        return Err(Error::IndexOutOfRange {
            op: "write_indexed_png",
            index: bad as usize,
            bound: palette.len(),
        });
    }
    let flat = palette.iter().flatten().copied().collect();
    write_png(path, width, height, png::ColorType::Indexed, Some(flat), indices)
}

/// Bicubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source indices and normalised weights for every output position along
/// one axis. Downscaling widens the kernel by `1/scale`.
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (stretch, width) = if scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    (0..out_len)
        .map(|i| {
            let centre = (i as f64 + 0.5) / scale - 0.5;
            let first = (centre - width / 2.0).floor() as i64;
            let taps = width.ceil() as i64 + 2;
            let mut w: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            for j in first..first + taps {
                let k = stretch * cubic(stretch * (centre - j as f64));
                if k == 0.0 {
                    continue;
                }
                let src = j.clamp(0, in_len as i64 - 1) as usize;
                match w.iter_mut().find(|(s, _)| *s == src) {
                    Some(e) => e.1 += k,
                    None => w.push((src, k)),
                }
            }
            let total: f64 = w.iter().map(|e| e.1).sum();
            for e in &mut w {
                e.1 /= total;
            }
            w
        })
        .collect()
}

/// Separable bicubic resize to `out_h x out_w`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err(
            "bicubic_resize",
            format!("degenerate output {out_h}x{out_w}"),
        ));
    }
    let c = img.channels;
    let wy = resize_weights(img.height, out_h);
    let wx = resize_weights(img.width, out_w);

    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; img.height * out_w * c];
    for y in 0..img.height {
        for (x, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * out_w + x) * c + ch] =
                    taps.iter().map(|&(s, k)| k * img.at(y, s, ch) as f64).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for taps in &wy {
        for x in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps
                    .iter()
                    .map(|&(s, k)| k * tmp[(s * out_w + x) * c + ch])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Resize by the rational factor `num / den`; extents are rounded.
pub fn bicubic_rescale(img: &Image, num: usize, den: usize) -> Result<Image> {
    if num == 0 || den == 0 {
        return Err(Error::InvalidArgument(format!("scale {num}/{den}")));
    }
    let h = (img.height * num + den / 2) / den;
    let w = (img.width * num + den / 2) / den;
    bicubic_resize(img, h, w)
}

/// The synthetic low-quality input for an `r`-times SR pair. The HQ extents
/// must be multiples of `r`.
pub fn degrade(hq: &Image, r: usize) -> Result<Image> {
    if r == 0 || hq.height % r != 0 || hq.width % r != 0 {
        return Err(shape_err(
            "degrade",
            format!("{}x{} not divisible by {r}", hq.height, hq.width),
        ));
    }
    bicubic_resize(hq, hq.height / r, hq.width / r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| (y * w + x) as f32 / (h * w) as f32).unwrap()
    }

    #[test]
    fn identity_scale() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0).unwrap();
        let out = bicubic_resize(&img, 5, 7).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_is_preserved() {
        let img = Image::new(6, 6, 1, vec![0.3; 36]).unwrap();
        for (h, w) in [(3, 3), (12, 12), (5, 9)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn ramp_downscale_matches_kernel_sum() {
        let img = ramp(4, 4);
        let out = bicubic_resize(&img, 2, 2).unwrap();
        // Direct 2-D kernel sum with clamped borders, kernel stretched x2.
        for oy in 0..2 {
            for ox in 0..2 {
                let cy = (oy as f64 + 0.5) * 2.0 - 0.5;
                let cx = (ox as f64 + 0.5) * 2.0 - 0.5;
                let (mut num, mut den) = (0.0, 0.0);
                for sy in -6i64..10 {
                    for sx in -6i64..10 {
                        let k = cubic((cy - sy as f64) / 2.0) * cubic((cx - sx as f64) / 2.0);
                        let v = img.at(sy.clamp(0, 3) as usize, sx.clamp(0, 3) as usize, 0);
                        num += k * v as f64;
                        den += k;
                    }
                }
                let expect = (num / den) as f32;
                assert!((out.at(oy, ox, 0) - expect).abs() < 1e-5, "{oy},{ox}");
            }
        }
    }

    #[test]
    fn degenerate_output_rejected() {
        assert!(bicubic_resize(&ramp(4, 4), 0, 2).is_err());
        assert!(degrade(&ramp(5, 4), 2).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 5, 3, |y, x, c| ((y + x + c) % 7) as f32 / 6.0).unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());

        let grey = ramp(4, 4);
        grey.save(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap().channels, 1);
    }

    #[test]
    fn quantisation_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.49 / 255.0), 1);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(-1.0), 0);
    }

    #[test]
    fn indexed_png_checks_palette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        write_indexed_png(&path, 2, 1, &[0, 1], &[[0, 0, 0], [255, 0, 0]]).unwrap();
        assert!(write_indexed_png(&path, 2, 1, &[0, 2], &[[0, 0, 0], [255, 0, 0]]).is_err());
        let back = Image::load(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.to_u8(), vec![0, 0, 0, 255, 0, 0]);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(input in 1usize..40, output in 1usize..40) {
            for taps in resize_weights(input, output) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crop_keeps_top_left() {
        let img = Image::from_fn(3, 4, 1, |y, x, _| (y * 4 + x) as f32 / 20.0).unwrap();
        let c = img.crop(2, 3).unwrap();
        assert_eq!((c.height, c.width), (2, 3));
        assert_eq!(c.at(1, 2, 0), img.at(1, 2, 0));
        assert!(img.crop(4, 1).is_err());
    }
}
