//! PNG I/O, luma conversion, MATLAB-style bicubic resizing, augmentation and
//! aligned patch sampling.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Resize factor `num / den`; output size is `ceil(in · num / den)`.
pub type Scale = Ratio<usize>;

/// Name of the optional file in a dataset directory listing image paths, one per line.
pub const MANIFEST: &str = "manifest.txt";

/// An RGB image as a `[1, 3, H, W]` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub tensor: Tensor<f32>,
    pub source: String,
}

impl Image {
    /// Clamps into `[0, 1]`. The tensor must be `[1, 3, H, W]`.
    pub fn new(tensor: Tensor<f32>, source: impl Into<String>) -> Result<Self> {
        let [n, c, _, _] = tensor.shape();
        if n != 1 || c != 3 {
            return Err(Error::shape("image", format!("expected [1, 3, H, W], got {:?}", tensor.shape())));
        }
        Ok(Self { tensor: tensor.map(|v| v.clamp(0.0, 1.0)), source: source.into() })
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }
}

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Loads an 8- or 16-bit PNG. Alpha is dropped and grayscale is replicated to three channels.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(image_err(path, "not a PNG file"));
    }
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let planar: Vec<f32> = if wide {
        let rgb = img.to_rgb16();
        planes(rgb.as_raw(), h * w, |v| v as f32 / 65535.0)
    } else {
        let rgb = img.to_rgb8();
        planes(rgb.as_raw(), h * w, |v| v as f32 / 255.0)
    };
    Image::new(Tensor::new([1, 3, h, w], planar)?, path.display().to_string())
}

fn planes<P: Copy>(interleaved: &[P], hw: usize, f: impl Fn(P) -> f32) -> Vec<f32> {
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = f(px[c]);
        }
    }
    out
}

/// 8-bit quantisation with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Saves as 8-bit RGB PNG.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height(), img.width());
    let hw = h * w;
    let d = img.tensor.data();
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            buf.push(quantize(d[c * hw + i]));
        }
    }
    let rgb = RgbImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    rgb.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Luma convention for [`rgb_to_y`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LumaRange {
    /// BT.601 studio swing, `Y ∈ [16/255, 235/255]`.
    #[default]
    Studio,
    /// BT.601 full swing, `Y ∈ [0, 1]`.
    Full,
}

/// BT.601 luma of a `[N, 3, H, W]` tensor, as `[N, 1, H, W]` in `f64`.
pub fn rgb_to_y<T: Real>(rgb: &Tensor<T>, range: LumaRange) -> Result<Tensor<f64>> {
    let [n, c, h, w] = rgb.shape();
    if c != 3 {
        return Err(Error::shape("rgb_to_y", format!("expected 3 channels, got {c}")));
    }
    let (off, kr, kg, kb) = match range {
        LumaRange::Studio => (16.0 / 255.0, 65.481 / 255.0, 128.553 / 255.0, 24.966 / 255.0),
        LumaRange::Full => (0.0, 0.299, 0.587, 0.114),
    };
    Ok(Tensor::from_fn([n, 1, h, w], |ni, _, y, x| {
        off + kr * rgb.at(ni, 0, y, x).as_f64() + kg * rgb.at(ni, 1, y, x).as_f64() + kb * rgb.at(ni, 2, y, x).as_f64()
    }))
}

/// Studio-swing luma of an image.
pub fn rgb_to_ycbcr_y(img: &Image) -> Tensor<f64> {
    rgb_to_y(&img.tensor, LumaRange::Studio).expect("images have 3 channels")
}

/// Crops the bottom/right so both sides are multiples of `scale`.
pub fn modcrop(img: &Image, scale: usize) -> Result<Image> {
    let (h, w) = (img.height() / scale * scale, img.width() / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::shape("modcrop", format!("{}x{} is smaller than scale {scale}", img.height(), img.width())));
    }
    Ok(Image { tensor: crop(&img.tensor, 0, 0, h, w)?, source: img.source.clone() })
}

/// Window `[y, y+h) × [x, x+w)` of every plane.
pub fn crop<T: Real>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, th, tw] = t.shape();
    if y + h > th || x + w > tw {
        return Err(Error::shape("crop", format!("window {h}x{w} at ({y},{x}) exceeds {th}x{tw}")));
    }
    Ok(Tensor::from_fn([n, c, h, w], |ni, ci, yy, xx| t.at(ni, ci, y + yy, x + xx)))
}

/// How [`bicubic_resize`] reads past the image edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Boundary {
    /// Mirror including the edge pixel (`… 2 1 | 1 2 3 … n | n n-1 …`), as MATLAB `imresize` does.
    #[default]
    Symmetric,
    /// Repeat the edge pixel.
    Replicate,
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source indices and normalised weights for each output position along one axis.
fn contributions(in_len: usize, out_len: usize, scale: f64, boundary: Boundary) -> Vec<(Vec<usize>, Vec<f64>)> {
    let antialias = scale < 1.0;
    let width = if antialias { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as isize + 2;
    let n = in_len as isize;
    (1..=out_len)
        .map(|i| {
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut idx = Vec::with_capacity(taps as usize);
            let mut wts = Vec::with_capacity(taps as usize);
            for t in 0..taps {
                let j = left + t;
                let d = u - j as f64;
                let wt = if antialias { scale * cubic(scale * d) } else { cubic(d) };
                if wt == 0.0 {
                    continue;
                }
                let src = match boundary {
                    Boundary::Symmetric => {
                        let m = (j - 1).rem_euclid(2 * n);
                        if m < n { m } else { 2 * n - 1 - m }
                    }
                    Boundary::Replicate => (j - 1).clamp(0, n - 1),
                };
                idx.push(src as usize);
                wts.push(wt);
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= sum);
            (idx, wts)
        })
        .collect()
}

fn resize_axis(src: &[f64], planes: usize, h: usize, w: usize, vertical: bool, out_len: usize, contrib: &[(Vec<usize>, Vec<f64>)]) -> Vec<f64> {
    let (oh, ow) = if vertical { (out_len, w) } else { (h, out_len) };
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (idx, wts) = &contrib[if vertical { y } else { x }];
                d[y * ow + x] = idx
                    .iter()
                    .zip(wts)
                    .map(|(&j, &wt)| wt * if vertical { s[j * w + x] } else { s[y * w + j] })
                    .sum();
            }
        }
    }
    out
}

/// Output size `ceil(len · scale)`.
pub fn scaled_len(len: usize, scale: Scale) -> usize {
    (len * scale.numer()).div_ceil(*scale.denom())
}

/// Bicubic resize of every plane of `t` by `scale`, compatible with MATLAB `imresize`:
/// antialiased when shrinking, the more strongly shrunk axis first (height on ties).
pub fn resize_tensor(t: &Tensor<f32>, scale: Scale, boundary: Boundary) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.shape();
    if *scale.numer() == 0 {
        return Err(Error::shape("bicubic_resize", "scale must be positive"));
    }
    let (oh, ow) = (scaled_len(h, scale), scaled_len(w, scale));
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::shape("bicubic_resize", format!("{h}x{w} by {scale} gives {oh}x{ow}")));
    }
    let s = *scale.numer() as f64 / *scale.denom() as f64;
    let planes = n * c;
    let mut data: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    // Equal factors on both axes, so the height pass always goes first.
    data = resize_axis(&data, planes, h, w, true, oh, &contributions(h, oh, s, boundary));
    data = resize_axis(&data, planes, oh, w, false, ow, &contributions(w, ow, s, boundary));
    Tensor::new([n, c, oh, ow], data.into_iter().map(|v| v as f32).collect())
}

/// Bicubic resize of an image; values are clamped back into `[0, 1]`.
pub fn bicubic_resize(img: &Image, scale: Scale) -> Result<Image> {
    Image::new(resize_tensor(&img.tensor, scale, Boundary::Symmetric)?, img.source.clone())
}

/// Bicubic degradation: modcrop to a multiple of `scale`, then shrink by `1/scale`.
pub fn degrade(hr: &Image, scale: usize) -> Result<(Image, Image)> {
    let hr = modcrop(hr, scale)?;
    let lr = bicubic_resize(&hr, Scale::new(1, scale))?;
    Ok((hr, lr))
}

/// One of the 8 dihedral variants: `variant % 4` quarter turns counter-clockwise,
/// then a horizontal flip if `variant >= 4`.
pub fn augment_tensor<T: Real>(t: &Tensor<T>, variant: usize) -> Result<Tensor<T>> {
    if variant >= 8 {
        return Err(Error::Config(format!("augmentation variant {variant} out of range 0..8")));
    }
    let mut out = t.clone();
    for _ in 0..variant % 4 {
        let [n, c, h, w] = out.shape();
        let src = out;
        out = Tensor::from_fn([n, c, w, h], |ni, ci, y, x| src.at(ni, ci, x, w - 1 - y));
    }
    if variant >= 4 {
        let [n, c, h, w] = out.shape();
        let src = out;
        out = Tensor::from_fn([n, c, h, w], |ni, ci, y, x| src.at(ni, ci, y, w - 1 - x));
    }
    Ok(out)
}

pub fn augment(img: &Image, variant: usize) -> Result<Image> {
    Ok(Image { tensor: augment_tensor(&img.tensor, variant)?, source: img.source.clone() })
}

/// The variant that undoes `variant`.
pub fn inverse_variant(variant: usize) -> usize {
    if variant >= 4 { variant } else { (4 - variant) % 4 }
}

/// Aligned low/high resolution windows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    /// Top-left corner of the LR window.
    pub origin: (usize, usize),
}

/// An HR image and its bicubic LR counterpart, ready for patch extraction.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub scale: usize,
    pub name: String,
}

impl ImagePair {
    pub fn from_hr(hr: &Image, scale: usize) -> Result<Self> {
        let (hr, lr) = degrade(hr, scale)?;
        Ok(Self { hr: hr.tensor, lr: lr.tensor, scale, name: hr.source })
    }

    /// LR window of side `patch` at `(y, x)` and the HR window at `(s·y, s·x)` of side `s·patch`.
    pub fn patch(&self, y: usize, x: usize, patch: usize) -> Result<PatchPair> {
        let s = self.scale;
        Ok(PatchPair {
            lr: crop(&self.lr, y, x, patch, patch)?,
            hr: crop(&self.hr, s * y, s * x, s * patch, s * patch)?,
            origin: (y, x),
        })
    }

    /// Uniform random window position, drawn from `rng`.
    pub fn random_patch(&self, patch: usize, rng: &mut impl Rng) -> Result<PatchPair> {
        let (h, w) = (self.lr.height(), self.lr.width());
        if h < patch || w < patch {
            return Err(Error::Dataset(format!(
                "{}: LR size {h}x{w} is smaller than the {patch}x{patch} patch",
                self.name
            )));
        }
        let y = rng.gen_range(0..=h - patch);
        let x = rng.gen_range(0..=w - patch);
        self.patch(y, x, patch)
    }
}

/// `count` aligned patch pairs at uniform random positions, deterministic in `seed`.
pub fn sample_patches(hr: &Image, scale: usize, patch: usize, count: usize, seed: u64) -> Result<Vec<PatchPair>> {
    let pair = ImagePair::from_hr(hr, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| pair.random_patch(patch, &mut rng)).collect()
}

/// Image files of a dataset directory: the entries of `manifest.txt` if present,
/// otherwise every `*.png` in the directory, sorted by file name.
pub fn list_dataset(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    let files = if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| dir.join(l))
            .collect::<Vec<_>>()
    } else {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        files
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
    }
    for f in &files {
        if !f.is_file() {
            return Err(Error::Dataset(format!("listed image {} does not exist", f.display())));
        }
    }
    Ok(files)
}

/// A procedurally generated RGB test image: smooth gradients, oriented
/// sinusoidal texture and a few hard-edged discs and bars.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)));
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let period = rng.gen_range(4.0..16.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.03..0.12);
            (theta, period, phase, amp, std::array::from_fn(|_| rng.gen_range(0.3..1.0)))
        })
        .collect();
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..5)
        .map(|_| {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let r = rng.gen_range(3.0..(h.min(w) as f64 / 4.0).max(4.0));
            (cy, cx, r, std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        })
        .collect();
    let bars: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let offset = rng.gen_range(-0.5..0.5) * h.max(w) as f64;
            let width = rng.gen_range(1.5..6.0);
            (theta, offset, width, std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        })
        .collect();
    let (fh, fw) = (h as f64, w as f64);
    let t = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + grad[c].0 * (yf / fh - 0.5) + grad[c].1 * (xf / fw - 0.5);
        for (theta, period, phase, amp, tint) in &waves {
            let s = xf * theta.cos() + yf * theta.sin();
            v += amp * tint[c] * (2.0 * PI * s / period + phase).sin();
        }
        for (theta, offset, width, color) in &bars {
            let d = xf * theta.cos() + yf * theta.sin() - fw * 0.5 * theta.cos() - fh * 0.5 * theta.sin() - offset;
            if d.abs() < *width {
                v = 0.5 * v + 0.5 * color[c];
            }
        }
        for (cy, cx, r, color) in &discs {
            if (yf - cy).powi(2) + (xf - cx).powi(2) < r * r {
                v = 0.3 * v + 0.7 * color[c];
            }
        }
        v.clamp(0.0, 1.0) as f32
    });
    Image::new(t, format!("synthetic-{seed}")).expect("3-channel tensor")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Independent resizer: for each output pixel, weights over the whole
    /// (reflected) input line straight from the continuous kernel definition.
    fn reference_resize(t: &Tensor<f32>, s: f64, oh: usize, ow: usize) -> Tensor<f64> {
        let [_, c, h, w] = t.shape();
        let line = |n: usize, u: f64| -> Vec<(usize, f64)> {
            let ks = s.min(1.0);
            let mut acc = vec![0.0; n];
            // integer positions far enough out to cover the kernel support
            let reach = (2.0 / ks).ceil() as isize + 2;
            let center = u.floor() as isize;
            for j in center - reach..=center + reach {
                let wt = ks * cubic(ks * (u - j as f64));
                // 1-based j reflected into 1..=n
                let mut k = j;
                loop {
                    if k < 1 {
                        k = 1 - k;
                    } else if k > n as isize {
                        k = 2 * n as isize + 1 - k;
                    } else {
                        break;
                    }
                }
                acc[(k - 1) as usize] += wt;
            }
            let sum: f64 = acc.iter().sum();
            acc.into_iter().enumerate().filter(|(_, v)| *v != 0.0).map(|(i, v)| (i, v / sum)).collect()
        };
        let pos = |i: usize| (i + 1) as f64 / s + 0.5 * (1.0 - 1.0 / s);
        Tensor::from_fn([1, c, oh, ow], |_, ci, y, x| {
            let ys = line(h, pos(y));
            let xs = line(w, pos(x));
            let mut v = 0.0;
            for &(yy, wy) in &ys {
                for &(xx, wx) in &xs {
                    v += wy * wx * t.at(0, ci, yy, xx) as f64;
                }
            }
            v
        })
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert_eq!(cubic(0.5), 0.5625);
        assert_eq!(cubic(1.5), -0.0625);
        // partition of unity at any offset
        for k in 0..10 {
            let f = k as f64 / 10.0;
            let s: f64 = (-2..=2).map(|j| cubic(f - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn luma_values() {
        let white = Image::new(Tensor::ones([1, 3, 1, 1]), "w").unwrap();
        let black = Image::new(Tensor::zeros([1, 3, 1, 1]), "b").unwrap();
        assert!((rgb_to_ycbcr_y(&white).data()[0] - 235.0 / 255.0).abs() < 1e-12);
        assert!((rgb_to_ycbcr_y(&black).data()[0] - 16.0 / 255.0).abs() < 1e-12);
        for g in [0.1f32, 0.25, 0.5, 0.9] {
            let gray = Image::new(Tensor::full([1, 3, 1, 1], g), "g").unwrap();
            let want = (16.0 + 219.0 * g as f64) / 255.0;
            assert!((rgb_to_ycbcr_y(&gray).data()[0] - want).abs() < 1e-7);
        }
        let full = rgb_to_y(&Tensor::<f32>::ones([1, 3, 1, 1]), LumaRange::Full).unwrap();
        assert!((full.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_sizes_and_errors() {
        let img = synthetic_image(17, 10, 1);
        assert_eq!(bicubic_resize(&img, Scale::new(1, 2)).unwrap().tensor.shape(), [1, 3, 9, 5]);
        assert_eq!(bicubic_resize(&img, Scale::new(3, 1)).unwrap().tensor.shape(), [1, 3, 51, 30]);
        assert_eq!(bicubic_resize(&img, Scale::new(2, 3)).unwrap().tensor.shape(), [1, 3, 12, 7]);
        assert!(bicubic_resize(&img, Scale::new(0, 1)).is_err());
    }

    #[test]
    fn resize_constant_is_constant() {
        let img = Image::new(Tensor::full([1, 3, 13, 11], 0.37), "c").unwrap();
        for s in [Scale::new(1, 2), Scale::new(1, 3), Scale::new(1, 4), Scale::new(2, 1), Scale::new(3, 1), Scale::new(4, 1)] {
            let out = bicubic_resize(&img, s).unwrap();
            assert!(out.tensor.data().iter().all(|&v| (v - 0.37).abs() < 1e-6), "{s}");
        }
    }

    #[test]
    fn resize_by_one_is_identity() {
        let img = synthetic_image(12, 9, 2);
        let out = bicubic_resize(&img, Scale::new(1, 1)).unwrap();
        assert!(out.tensor.max_abs_diff(&img.tensor) <= 1e-6);
    }

    #[test]
    fn downscale_matches_reference_resizer() {
        for seed in 0..3 {
            let img = synthetic_image(30 + seed as usize, 24, seed);
            for k in [2usize, 3, 4] {
                let out = resize_tensor(&img.tensor, Scale::new(1, k), Boundary::Symmetric).unwrap();
                let [_, _, oh, ow] = out.shape();
                let want = reference_resize(&img.tensor, 1.0 / k as f64, oh, ow);
                assert!(out.cast::<f64>().max_abs_diff(&want) <= 1e-5, "seed {seed} x{k}");
            }
            let up = resize_tensor(&img.tensor, Scale::new(3, 1), Boundary::Symmetric).unwrap();
            let want = reference_resize(&img.tensor, 3.0, up.height(), up.width());
            assert!(up.cast::<f64>().max_abs_diff(&want) <= 1e-5);
        }
    }

    #[test]
    fn replicate_boundary_differs_only_near_edges() {
        let img = synthetic_image(32, 32, 4);
        let a = resize_tensor(&img.tensor, Scale::new(1, 4), Boundary::Symmetric).unwrap();
        let b = resize_tensor(&img.tensor, Scale::new(1, 4), Boundary::Replicate).unwrap();
        let inner = |t: &Tensor<f32>| crop(t, 2, 2, 4, 4).unwrap();
        assert_eq!(inner(&a), inner(&b));
    }

    #[test]
    fn upscale_then_downscale_of_constant_round_trips() {
        let img = Image::new(Tensor::full([1, 3, 8, 8], 0.6), "c").unwrap();
        let up = bicubic_resize(&img, Scale::new(4, 1)).unwrap();
        let down = bicubic_resize(&up, Scale::new(1, 4)).unwrap();
        assert!(down.tensor.max_abs_diff(&img.tensor) <= 1e-6);
    }

    #[test]
    fn png_round_trip_and_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic_image(9, 7, 5);
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let once = load_png(&p).unwrap();
        save_png(&once, dir.path().join("b.png")).unwrap();
        let twice = load_png(dir.path().join("b.png")).unwrap();
        assert_eq!(once.tensor, twice.tensor);
        assert!(once.tensor.max_abs_diff(&img.tensor) <= 0.5 / 255.0 + 1e-6);

        let gray = image::GrayImage::from_raw(2, 1, vec![255, 0]).unwrap();
        let gp = dir.path().join("g.png");
        gray.save(&gp).unwrap();
        let g = load_png(&gp).unwrap();
        assert_eq!(g.tensor.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);

        let rgba = image::RgbaImage::from_raw(1, 1, vec![10, 20, 30, 0]).unwrap();
        let ap = dir.path().join("a16.png");
        DynamicImage::ImageRgba8(rgba).into_rgba16().save(&ap).unwrap();
        let a = load_png(&ap).unwrap();
        assert_eq!(a.tensor.shape(), [1, 3, 1, 1]);
        assert_eq!(quantize(a.tensor.data()[1]), 20);
    }

    #[test]
    fn load_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(load_png(&p).unwrap_err().to_string().contains("bad.png"));
        assert!(load_png(dir.path().join("missing.png")).unwrap_err().to_string().contains("missing.png"));
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn augment_variants() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(augment_tensor(&x, 0).unwrap(), x);
        let variants: Vec<_> = (0..8).map(|v| augment_tensor(&x, v).unwrap()).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(variants[i], variants[j], "{i} {j}");
            }
        }
        let mut r = x.clone();
        for _ in 0..4 {
            r = augment_tensor(&r, 1).unwrap();
        }
        assert_eq!(r, x);
        // one quarter turn counter-clockwise: top-right moves to top-left
        assert_eq!(variants[1].data(), &[2.0, 4.0, 1.0, 3.0]);
        assert!(augment_tensor(&x, 8).is_err());
    }

    #[test]
    fn augment_variants_form_a_group() {
        let x = Tensor::<f32>::from_fn([1, 1, 3, 2], |_, _, y, x| (y * 2 + x) as f32);
        let all: Vec<_> = (0..8).map(|v| augment_tensor(&x, v).unwrap()).collect();
        for a in 0..8 {
            for b in 0..8 {
                let ab = augment_tensor(&all[a], b).unwrap();
                assert!(all.contains(&ab), "{a}∘{b} not closed");
            }
            assert_eq!(augment_tensor(&all[a], inverse_variant(a)).unwrap(), x);
        }
    }

    #[test]
    fn patches_are_aligned_and_deterministic() {
        let hr = synthetic_image(64, 56, 6);
        let a = sample_patches(&hr, 2, 12, 10, 3).unwrap();
        let b = sample_patches(&hr, 2, 12, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(sample_patches(&hr, 2, 12, 0, 3).unwrap().is_empty());
        assert!(sample_patches(&hr, 2, 40, 1, 3).is_err());
        for p in &a {
            let (y, x) = p.origin;
            assert_eq!(p.lr.shape(), [1, 3, 12, 12]);
            assert_eq!(p.hr, crop(&hr.tensor, 2 * y, 2 * x, 24, 24).unwrap());
            let down = resize_tensor(&p.hr, Scale::new(1, 2), Boundary::Symmetric).unwrap();
            let mad: f64 = down.data().iter().zip(p.lr.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / down.numel() as f64;
            assert!(mad < 0.02, "{mad}");
        }
    }

    #[test]
    fn dataset_listing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(list_dataset(dir.path()).is_err());
        for name in ["b.png", "a.png", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let files = list_dataset(dir.path()).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.png", "b.png"]);
        std::fs::write(dir.path().join(MANIFEST), "b.png\n# comment\n\n").unwrap();
        assert_eq!(list_dataset(dir.path()).unwrap().len(), 1);
        std::fs::write(dir.path().join(MANIFEST), "c.png\n").unwrap();
        assert!(list_dataset(dir.path()).is_err());
    }

    #[test]
    fn modcrop_trims_to_multiple() {
        let img = synthetic_image(13, 10, 7);
        let m = modcrop(&img, 4).unwrap();
        assert_eq!((m.height(), m.width()), (12, 8));
        assert_eq!(m.tensor.at(0, 1, 11, 7), img.tensor.at(0, 1, 11, 7));
        assert!(modcrop(&synthetic_image(3, 3, 0), 4).is_err());
    }

    #[test]
    fn synthetic_images_are_deterministic_and_textured() {
        let a = synthetic_image(32, 32, 9);
        assert_eq!(a, synthetic_image(32, 32, 9));
        assert_ne!(a, synthetic_image(32, 32, 10));
        let d = a.tensor.data();
        let mean = d.iter().sum::<f32>() / d.len() as f32;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d.len() as f32;
        assert!(var > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augment_is_a_permutation(h in 1usize..6, w in 1usize..6, v in 0usize..8, seed in 0u64..100) {
            let img = synthetic_image(h, w, seed);
            let out = augment(&img, v).unwrap();
            let mut a: Vec<f32> = img.tensor.data().to_vec();
            let mut b: Vec<f32> = out.tensor.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(augment(&out, inverse_variant(v)).unwrap(), img);
        }

        #[test]
        fn resized_values_stay_in_range(h in 4usize..20, w in 4usize..20, k in 2usize..5, seed in 0u64..100) {
            let img = synthetic_image(h, w, seed);
            for s in [Scale::new(1, k), Scale::new(k, 1)] {
                let out = bicubic_resize(&img, s).unwrap();
                prop_assert!(out.tensor.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
