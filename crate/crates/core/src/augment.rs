//! Training-time augmentation of image/mask pairs.
//!
//! Photometric stages touch only the image. Geometric stages apply one
//! transform to both planes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image8, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Brightness offsets are drawn from `[-range, range]`.
    pub brightness_range: i32,
    pub gauss_sigma_max: f64,
    pub uniform_range: f64,
    pub pad_fraction_max: f64,
    pub crop_size: usize,
    pub seed: u64,
    pub brightness: bool,
    pub noise: bool,
    pub flip: bool,
    pub pad_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_range: 20,
            gauss_sigma_max: 20.0,
            uniform_range: 20.0,
            pad_fraction_max: 0.25,
            crop_size: 64,
            seed: 0,
            brightness: true,
            noise: true,
            flip: true,
            pad_crop: true,
        }
    }
}

impl AugmentConfig {
    pub fn for_size(size: usize) -> Self {
        AugmentConfig {
            crop_size: size,
            ..Default::default()
        }
    }

    /// Every modality switched off.
    pub fn disabled(size: usize) -> Self {
        AugmentConfig {
            crop_size: size,
            brightness: false,
            noise: false,
            flip: false,
            pad_crop: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("augmentation: {what}")));
        if self.brightness_range < 0 {
            return bad("brightness_range must be non-negative");
        }
        if !(self.gauss_sigma_max >= 0.0) || !(self.uniform_range >= 0.0) {
            return bad("noise ranges must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.pad_fraction_max) {
            return bad("pad_fraction_max must lie in [0, 1]");
        }
        if self.crop_size == 0 {
            return bad("crop_size must be positive");
        }
        Ok(())
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Adds `offset` to every pixel, saturating at 0 and 255.
pub fn shift_brightness(image: &Image8, offset: i32) -> Image8 {
    image.map(|p| (i32::from(p) + offset).clamp(0, 255) as u8)
}

/// One integer offset per image, uniform on `[-range, range]`.
pub fn adjust_brightness(image: &Image8, range: i32, rng: &mut impl Rng) -> Image8 {
    let b = rng.gen_range(-range..=range);
    shift_brightness(image, b)
}

pub fn add_gaussian_noise(image: &Image8, sigma: f64, rng: &mut impl Rng) -> Image8 {
    if sigma == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    image.map(|p| clamp_u8(f64::from(p) + normal.sample(rng)))
}

pub fn add_uniform_noise(image: &Image8, range: f64, rng: &mut impl Rng) -> Image8 {
    if range == 0.0 {
        return image.clone();
    }
    image.map(|p| clamp_u8(f64::from(p) + rng.gen_range(-range..=range)))
}

/// Fair coin between Gaussian noise with `sigma ~ U[0, gauss_sigma_max]`
/// and uniform noise on `[-uniform_range, uniform_range]`.
pub fn add_noise(image: &Image8, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image8 {
    if rng.gen_bool(0.5) {
        let sigma = rng.gen_range(0.0..=cfg.gauss_sigma_max);
        add_gaussian_noise(image, sigma, rng)
    } else {
        add_uniform_noise(image, cfg.uniform_range, rng)
    }
}

fn check_pair(image: &Image8, mask: &Mask, op: &'static str) -> Result<()> {
    if image.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![image.height(), image.width()],
            right: vec![mask.height(), mask.width()],
        });
    }
    Ok(())
}

/// Independent horizontal and vertical flips, each with probability 1/2.
pub fn random_flip(image: &Image8, mask: &Mask, rng: &mut impl Rng) -> Result<(Image8, Mask)> {
    check_pair(image, mask, "random_flip")?;
    let (mut img, mut m) = (image.clone(), mask.clone());
    if rng.gen_bool(0.5) {
        img = img.flip_horizontal();
        m = m.flip_horizontal();
    }
    if rng.gen_bool(0.5) {
        img = img.flip_vertical();
        m = m.flip_vertical();
    }
    Ok((img, m))
}

/// Zero-pads by `round(f * side)` pixels per axis, split evenly between the
/// two sides, then cuts a `crop x crop` window at `(left, top)`.
pub fn pad_crop_with(
    image: &Image8,
    mask: &Mask,
    fx: f64,
    fy: f64,
    crop: usize,
    window: impl FnOnce(usize, usize) -> (usize, usize),
) -> Result<(Image8, Mask)> {
    check_pair(image, mask, "pad_and_crop")?;
    let (w, h) = image.dims();
    let pad_x = (fx * w as f64).round() as usize;
    let pad_y = (fy * h as f64).round() as usize;
    let (pw, ph) = (w + pad_x, h + pad_y);
    if crop > pw || crop > ph {
        return Err(Error::invalid(format!(
            "pad_and_crop: crop window {crop}x{crop} does not fit the padded {pw}x{ph} image (original {w}x{h})"
        )));
    }
    let (left, top) = (pad_x / 2, pad_y / 2);
    let img = image.pad(left, top, pw, ph, 0);
    let m = mask.pad(left, top, pw, ph, false);
    let (cx, cy) = window(pw - crop, ph - crop);
    Ok((img.crop(cx, cy, crop, crop)?, m.crop(cx, cy, crop, crop)?))
}

pub fn pad_and_crop(
    image: &Image8,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Image8, Mask)> {
    let (w, h) = image.dims();
    let max_x = w + (cfg.pad_fraction_max * w as f64).round() as usize;
    let max_y = h + (cfg.pad_fraction_max * h as f64).round() as usize;
    if cfg.crop_size > max_x || cfg.crop_size > max_y {
        return Err(Error::invalid(format!(
            "pad_and_crop: crop {0}x{0} exceeds the largest padded size {max_x}x{max_y} of a {w}x{h} image",
            cfg.crop_size
        )));
    }
    // redraw the pad until the window fits; terminates because f = max fits
    let (fx, fy) = loop {
        let fx = rng.gen_range(0.0..=cfg.pad_fraction_max);
        let fy = rng.gen_range(0.0..=cfg.pad_fraction_max);
        let fits = |f: f64, side: usize| side + (f * side as f64).round() as usize >= cfg.crop_size;
        if fits(fx, w) && fits(fy, h) {
            break (fx, fy);
        }
    };
    pad_crop_with(image, mask, fx, fy, cfg.crop_size, |sx, sy| {
        (rng.gen_range(0..=sx), rng.gen_range(0..=sy))
    })
}

/// Brightness, noise, flips, then pad-and-crop, each only when enabled.
/// With pad-and-crop disabled the pair is resized to `crop_size` instead.
pub fn compose_pipeline(
    image: &Image8,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Image8, Mask)> {
    check_pair(image, mask, "compose_pipeline")?;
    let mut img = image.clone();
    let mut m = mask.clone();
    if cfg.brightness {
        img = adjust_brightness(&img, cfg.brightness_range, rng);
    }
    if cfg.noise {
        img = add_noise(&img, cfg, rng);
    }
    if cfg.flip {
        (img, m) = random_flip(&img, &m, rng)?;
    }
    if cfg.pad_crop {
        (img, m) = pad_and_crop(&img, &m, cfg, rng)?;
    } else {
        img = img.resize_nearest(cfg.crop_size, cfg.crop_size);
        m = m.resize_nearest(cfg.crop_size, cfg.crop_size);
    }
    Ok((img, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Plane;
    use crate::rng::stream_rng;

    #[test]
    fn brightness_examples() {
        let img = Plane::from_vec(3, 1, vec![255u8, 100, 0]).unwrap();
        assert_eq!(shift_brightness(&img, 20).data(), &[255, 120, 20]);
        assert_eq!(shift_brightness(&img, -20).data(), &[235, 80, 0]);
        assert_eq!(shift_brightness(&img, 0), img);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = Plane::from_fn(8, 8, |x, y| (x * 30 + y) as u8);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut stream_rng(1, 0)), img);
    }

    #[test]
    fn uniform_noise_is_bounded() {
        let img = Image8::new(64, 64, 128);
        let out = add_uniform_noise(&img, 20.0, &mut stream_rng(2, 0));
        assert!(out.data().iter().all(|&p| (108..=148).contains(&p)));
    }

    #[test]
    fn padding_at_304() {
        let img = Image8::new(304, 304, 7);
        let mask = Mask::new(304, 304, true);
        let (i, m) = pad_crop_with(&img, &mask, 0.25, 0.25, 304, |sx, sy| {
            assert_eq!((sx, sy), (76, 76));
            (sx, sy)
        })
        .unwrap();
        assert_eq!(i.dims(), (304, 304));
        assert_eq!(m.dims(), (304, 304));
    }

    #[test]
    fn infeasible_crop_names_sizes() {
        let img = Image8::new(10, 10, 0);
        let mask = Mask::new(10, 10, false);
        let cfg = AugmentConfig {
            crop_size: 20,
            ..Default::default()
        };
        let err = pad_and_crop(&img, &mask, &cfg, &mut stream_rng(0, 0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("20x20") && err.contains("10x10"), "{err}");
    }

    #[test]
    fn flip_rejects_mismatch() {
        let img = Image8::new(4, 3, 0);
        assert!(random_flip(&img, &Mask::new(3, 4, false), &mut stream_rng(0, 0)).is_err());
    }
}
