//! PSNR and SSIM on the luma channel.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{load_png, list_dataset, modcrop, quantize, rgb_to_y, Image, LumaRange};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// How images are reduced to the plane that gets scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricOptions {
    /// Pixels dropped from each side before scoring.
    pub shave: usize,
    pub luma: LumaRange,
    /// Quantise luma to 8-bit levels (`round(255·Y)/255`) before scoring.
    pub round_luma: bool,
}

impl MetricOptions {
    /// Shave of `scale` pixels, studio-swing luma, unrounded.
    pub fn for_scale(scale: usize) -> Self {
        Self { shave: scale, luma: LumaRange::Studio, round_luma: false }
    }
}

fn scored_plane(img: &Image, opts: &MetricOptions) -> Result<Tensor<f64>> {
    let y = rgb_to_y(&img.tensor, opts.luma)?;
    let y = if opts.round_luma { y.map(|v| (v * 255.0).round() / 255.0) } else { y };
    let [_, _, h, w] = y.shape();
    let s = opts.shave;
    if 2 * s >= h || 2 * s >= w {
        return Err(Error::shape("metrics", format!("shave {s} leaves nothing of a {h}x{w} image")));
    }
    Ok(Tensor::from_fn([1, 1, h - 2 * s, w - 2 * s], |_, _, yy, xx| y.at(0, 0, yy + s, xx + s)))
}

fn planes(sr: &Image, hr: &Image, opts: &MetricOptions) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if sr.tensor.shape() != hr.tensor.shape() {
        return Err(Error::shape(
            "metrics",
            format!(
                "{} is {}x{} but {} is {}x{}",
                sr.source,
                sr.height(),
                sr.width(),
                hr.source,
                hr.height(),
                hr.width()
            ),
        ));
    }
    Ok((scored_plane(sr, opts)?, scored_plane(hr, opts)?))
}

/// PSNR in dB of two single planes with data range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.numel() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single planes with data range 1.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let [_, _, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &g);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &g);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Luma PSNR with a border of `scale` pixels removed.
pub fn psnr_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    psnr_y_with(sr, hr, &MetricOptions::for_scale(scale))
}

pub fn psnr_y_with(sr: &Image, hr: &Image, opts: &MetricOptions) -> Result<f64> {
    let (a, b) = planes(sr, hr, opts)?;
    Ok(psnr(&a, &b))
}

/// Luma SSIM with a border of `scale` pixels removed.
pub fn ssim_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    ssim_y_with(sr, hr, &MetricOptions::for_scale(scale))
}

pub fn ssim_y_with(sr: &Image, hr: &Image, opts: &MetricOptions) -> Result<f64> {
    let (a, b) = planes(sr, hr, opts)?;
    ssim(&a, &b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores in file-name order plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalResult {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("nothing to evaluate".into()));
        }
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(Self { images, mean_psnr, mean_ssim })
    }

    /// `name,psnr,ssim` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for r in &self.images {
            let _ = writeln!(s, "{},{:.4},{:.6}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.4},{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn render_table(&self) -> String {
        let width = self.images.iter().map(|r| r.name.len()).chain([4]).max().unwrap_or(4);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "name", "PSNR(dB)", "SSIM");
        for r in &self.images {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}", "MEAN", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Scores `(name, sr, hr)` triples in the given order.
pub fn evaluate(items: &[(String, Image, Image)], opts: &MetricOptions) -> Result<EvalResult> {
    let scores = items
        .par_iter()
        .map(|(name, sr, hr)| {
            let (a, b) = planes(sr, hr, opts)?;
            Ok(ImageScore { name: name.clone(), psnr: psnr(&a, &b), ssim: ssim(&a, &b)? })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_scores(scores)
}

/// Scores every HR image in `hr_dir` against the file of the same name in `sr_dir`.
/// HR images are cropped to a multiple of `scale` first.
pub fn eval_dataset(sr_dir: impl AsRef<Path>, hr_dir: impl AsRef<Path>, scale: usize) -> Result<EvalResult> {
    eval_dataset_with(sr_dir, hr_dir, scale, &MetricOptions::for_scale(scale))
}

pub fn eval_dataset_with(
    sr_dir: impl AsRef<Path>,
    hr_dir: impl AsRef<Path>,
    scale: usize,
    opts: &MetricOptions,
) -> Result<EvalResult> {
    let sr_dir = sr_dir.as_ref();
    let hr_files = list_dataset(hr_dir)?;
    let mut jobs = Vec::with_capacity(hr_files.len());
    for hr in &hr_files {
        let name = hr.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let sr = sr_dir.join(&name);
        if !sr.is_file() {
            return Err(Error::Dataset(format!("missing counterpart {} for {}", sr.display(), hr.display())));
        }
        jobs.push((name, sr, hr.clone()));
    }
    let items = jobs
        .par_iter()
        .map(|(name, sr, hr)| Ok((name.clone(), load_png(sr)?, modcrop(&load_png(hr)?, scale)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items, opts)
}

/// The image after an 8-bit save/load round trip.
pub fn quantized(img: &Image) -> Image {
    Image { tensor: img.tensor.map(|v| quantize(v) as f32 / 255.0), source: img.source.clone() }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::imaging::{save_png, synthetic_image};

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        Image::new(Tensor::from_fn([1, 3, h, w], |_, _, y, x| f(y, x)), "gray").unwrap()
    }

    /// Gray level whose studio luma is `y`.
    fn level(y: f64) -> f32 {
        ((y * 255.0 - 16.0) / 219.0) as f32
    }

    fn noisy(img: &Image, amp: f32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f32> = (0..img.tensor.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = img.tensor.clone();
        t.data_mut().iter_mut().zip(&noise).for_each(|(v, n)| *v += amp * n);
        Image::new(t, "noisy").unwrap()
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = synthetic_image(20, 20, 0);
        assert_eq!(psnr_y(&a, &a, 2).unwrap(), PSNR_CAP);
        assert!((ssim_y(&a, &a, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::full([1, 1, 4, 4], 0.5);
        let b = Tensor::full([1, 1, 4, 4], 0.25);
        assert!((psnr(&a, &b) - 12.041199826559248).abs() < 1e-9);
        let sa = gray(8, 8, |_, _| level(0.5));
        let sb = gray(8, 8, |_, _| level(0.25));
        assert!((psnr_y(&sa, &sb, 1).unwrap() - 12.0412).abs() < 1e-4);
    }

    #[test]
    fn doubling_error_costs_six_db() {
        let base = Tensor::full([1, 1, 3, 3], 0.4);
        let e1 = base.map(|v| v + 0.01);
        let e2 = base.map(|v| v + 0.02);
        let drop = psnr(&base, &e1) - psnr(&base, &e2);
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let hr = synthetic_image(32, 32, 1);
        let scores: Vec<f64> = [0.01, 0.02, 0.04, 0.08, 0.16].iter().map(|&a| psnr_y(&noisy(&hr, a, 3), &hr, 2).unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
    }

    #[test]
    fn inverted_checkerboard_has_negative_ssim() {
        let board = gray(24, 24, |y, x| if (y + x) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = gray(24, 24, |y, x| if (y + x) % 2 == 0 { 0.0 } else { 1.0 });
        let s = ssim_y(&inv, &board, 0).unwrap();
        assert!(s < -0.5, "{s}");
    }

    #[test]
    fn constant_planes_leave_only_luminance_term() {
        let (a, e) = (0.3, 0.05);
        let x = Tensor::full([1, 1, 15, 15], a);
        let y = Tensor::full([1, 1, 15, 15], a + e);
        let c1 = SSIM_K1 * SSIM_K1;
        let want = (2.0 * a * (a + e) + c1) / (a * a + (a + e) * (a + e) + c1);
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = synthetic_image(30, 28, 4);
        let b = noisy(&a, 0.05, 5);
        assert_eq!(psnr_y(&a, &b, 3).unwrap(), psnr_y(&b, &a, 3).unwrap());
        assert!((ssim_y(&a, &b, 3).unwrap() - ssim_y(&b, &a, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn border_pixels_are_ignored() {
        let hr = synthetic_image(30, 30, 6);
        let sr = noisy(&hr, 0.03, 7);
        let mut t = sr.tensor.clone();
        for c in 0..3 {
            for i in 0..30 {
                for s in [0, 1, 28, 29] {
                    t.set(0, c, i, s, 0.0);
                    t.set(0, c, s, i, 1.0);
                }
            }
        }
        let edited = Image::new(t, "edited").unwrap();
        assert_eq!(psnr_y(&sr, &hr, 2).unwrap(), psnr_y(&edited, &hr, 2).unwrap());
        assert_eq!(ssim_y(&sr, &hr, 2).unwrap(), ssim_y(&edited, &hr, 2).unwrap());
        assert_ne!(psnr_y(&sr, &hr, 1).unwrap(), psnr_y(&edited, &hr, 1).unwrap());
    }

    #[test]
    fn size_errors() {
        let a = synthetic_image(20, 20, 0);
        let b = synthetic_image(20, 21, 0);
        assert!(psnr_y(&a, &b, 2).is_err());
        let small = synthetic_image(14, 14, 0);
        assert!(ssim_y(&small, &small, 2).is_err());
        assert!(psnr_y(&small, &small, 7).is_err());
    }

    #[test]
    fn rounding_option_snaps_luma() {
        let a = gray(16, 16, |y, _| y as f32 / 40.0);
        let b = gray(16, 16, |y, _| y as f32 / 40.0 + 0.0005);
        let mut opts = MetricOptions::for_scale(0);
        assert!(psnr_y_with(&a, &b, &opts).unwrap() < PSNR_CAP);
        opts.round_luma = true;
        let p = psnr_y_with(&a, &b, &opts).unwrap();
        assert!(p > 50.0, "{p}");
    }

    #[test]
    fn csv_and_table() {
        let r = EvalResult::from_scores(vec![
            ImageScore { name: "a.png".into(), psnr: 30.0, ssim: 0.9 },
            ImageScore { name: "b.png".into(), psnr: 32.0, ssim: 0.8 },
        ])
        .unwrap();
        assert_eq!(r.mean_psnr, 31.0);
        assert!((r.mean_ssim - 0.85).abs() < 1e-12);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "name,psnr,ssim");
        assert_eq!(lines[3], "MEAN,31.0000,0.850000");
        assert!(r.render_table().lines().last().unwrap().starts_with("MEAN"));
        assert!(EvalResult::from_scores(vec![]).is_err());
    }

    #[test]
    fn dataset_evaluation() {
        let root = tempfile::tempdir().unwrap();
        let (sr, hr) = (root.path().join("sr"), root.path().join("hr"));
        std::fs::create_dir_all(&sr).unwrap();
        std::fs::create_dir_all(&hr).unwrap();
        assert!(eval_dataset(&sr, &hr, 2).is_err());
        for (i, name) in ["b.png", "a.png"].iter().enumerate() {
            let img = synthetic_image(25, 24, i as u64);
            save_png(&img, hr.join(name)).unwrap();
            save_png(&modcrop(&noisy(&img, 0.02, i as u64), 2).unwrap(), sr.join(name)).unwrap();
        }
        let r = eval_dataset(&sr, &hr, 2).unwrap();
        let names: Vec<_> = r.images.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png"]);
        assert!(r.images.iter().all(|s| s.psnr > 20.0 && s.psnr < 60.0 && s.ssim > 0.0 && s.ssim <= 1.0));

        std::fs::remove_file(sr.join("b.png")).unwrap();
        let err = eval_dataset(&sr, &hr, 2).unwrap_err().to_string();
        assert!(err.contains("b.png"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scores_stay_in_range(seed in 0u64..1000, amp in 0.0f32..0.5) {
            let hr = synthetic_image(24, 24, seed);
            let sr = noisy(&hr, amp, seed + 1);
            let p = psnr_y(&sr, &hr, 2).unwrap();
            let s = ssim_y(&sr, &hr, 2).unwrap();
            prop_assert!((0.0..=PSNR_CAP).contains(&p));
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
