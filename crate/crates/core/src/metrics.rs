//! PSNR and SSIM on `[0, 1]` images.

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    Rgb,
    YChannel,
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "y" | "y-channel" => Ok(Self::YChannel),
            _ => Err(Error::InvalidArgument(format!("unknown channel mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricResult {
    /// `+inf` for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
}

impl MetricResult {
    /// `{"image":…, "psnr":…, "ssim":…}`; an infinite PSNR is written as
    /// the string `"inf"`.
    pub fn json_line(&self, image: &str) -> String {
        let psnr = if self.psnr_db.is_finite() {
            json!(self.psnr_db)
        } else {
            Value::String("inf".into())
        };
        json!({ "image": image, "psnr": psnr, "ssim": self.ssim, "mode": self.channel_mode })
            .to_string()
    }
}

pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".into()
    } else {
        format!("{db:.4}")
    }
}

/// BT.601 luma in `[0, 1]` (studio range, as used for SR evaluation).
pub fn rgb_to_y(r: f64, g: f64, b: f64) -> f64 {
    (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
}

/// Planes `[C][H*W]` after channel conversion and border crop.
fn planes(img: &Image, mode: ChannelMode, crop: usize) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if 2 * crop >= img.height || 2 * crop >= img.width {
        return Err(shape_err(
            "metrics",
            format!("crop {crop} leaves nothing of {}x{}", img.height, img.width),
        ));
    }
    let h = img.height - 2 * crop;
    let w = img.width - 2 * crop;
    let pixel = |y: usize, x: usize, c: usize| img.at(y + crop, x + crop, c) as f64;
    let out = match (mode, img.channels) {
        (ChannelMode::YChannel, 3) => {
            let mut p = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    p.push(rgb_to_y(pixel(y, x, 0), pixel(y, x, 1), pixel(y, x, 2)));
                }
            }
            vec![p]
        }
        _ => (0..img.channels)
            .map(|c| {
                let mut p = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        p.push(pixel(y, x, c));
                    }
                }
                p
            })
            .collect(),
    };
    Ok((h, w, out))
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(shape_err(
            "metrics",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            ),
        ));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image, mode: ChannelMode, crop_border: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (_, _, pa) = planes(a, mode, crop_border)?;
    let (_, _, pb) = planes(b, mode, crop_border)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            sum += (u - v) * (u - v);
        }
        count += x.len();
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = SSIM_WINDOW;
    let mut total = 0.0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = win[i * n + j];
                    let u = a[(y + i) * w + x + j];
                    let v = b[(y + i) * w + x + j];
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / ((h - n + 1) * (w - n + 1)) as f64
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim(a: &Image, b: &Image, mode: ChannelMode, crop_border: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, pa) = planes(a, mode, crop_border)?;
    let (_, _, pb) = planes(b, mode, crop_border)?;
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let s: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| ssim_plane(x, y, h, w, &win))
        .sum();
    Ok(s / pa.len() as f64)
}

/// PSNR plus SSIM when the image is large enough (otherwise SSIM is NaN).
pub fn evaluate(a: &Image, b: &Image, mode: ChannelMode, crop_border: usize) -> Result<MetricResult> {
    let psnr_db = psnr(a, b, mode, crop_border)?;
    let ssim = match ssim(a, b, mode, crop_border) {
        Ok(v) => v,
        Err(Error::InvalidArgument(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricResult {
        psnr_db,
        ssim,
        channel_mode: mode,
    })
}
