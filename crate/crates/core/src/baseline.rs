//! Global (Otsu) and local (windowed mean) thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image8, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    LocalMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub method: ThresholdMethod,
    pub window: usize,
    pub offset: i32,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            method: ThresholdMethod::Otsu,
            window: 15,
            offset: 5,
        }
    }
}

impl ThresholdConfig {
    pub fn local() -> Self {
        ThresholdConfig {
            method: ThresholdMethod::LocalMean,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "threshold window must be odd and at least 3, got {}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image8) -> Result<Mask> {
        self.validate()?;
        Ok(match self.method {
            ThresholdMethod::Otsu => otsu_threshold(image),
            ThresholdMethod::LocalMean => local_mean_threshold(image, self),
        })
    }
}

/// The `t` maximizing between-class variance of `{<= t}` and `{> t}`, the
/// smallest such `t` on ties. `None` when every split has zero variance,
/// which happens exactly for constant images.
pub fn otsu_level(image: &Image8) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &p in image.data() {
        hist[p as usize] += 1;
    }
    let total = image.data().len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as f64 * c as f64)
        .sum();
    let (mut n0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(u8, f64)> = None;
    for (t, &count) in hist.iter().enumerate().take(255) {
        n0 += count as f64;
        sum0 += t as f64 * count as f64;
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / n0, (sum_all - sum0) / n1);
        let between = n0 * n1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.filter(|&(_, b)| b > 0.0).map(|(t, _)| t)
}

/// Foreground is `intensity > t` for the Otsu level; constant images are all
/// background.
pub fn otsu_threshold(image: &Image8) -> Mask {
    match otsu_level(image) {
        Some(t) => image.map(|p| p > t),
        None => image.map(|_| false),
    }
}

/// Foreground is `intensity > window mean + offset`. Windows near the border
/// repeat the edge pixels.
pub fn local_mean_threshold(image: &Image8, cfg: &ThresholdConfig) -> Mask {
    let (w, h) = image.dims();
    let r = cfg.window / 2;
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    // summed-area table over the edge-replicated image, one extra row/col of zeros
    let mut sat = vec![0i64; (pw + 1) * (ph + 1)];
    for y in 0..ph {
        let sy = y.saturating_sub(r).min(h - 1);
        let mut row = 0i64;
        for x in 0..pw {
            let sx = x.saturating_sub(r).min(w - 1);
            row += i64::from(image.get(sx, sy));
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    let k = cfg.window;
    let n = (k * k) as i64;
    let offset = i64::from(cfg.offset);
    Mask::from_fn(w, h, |x, y| {
        // window in padded coordinates is [x, x + k) x [y, y + k)
        let at = |xx: usize, yy: usize| sat[yy * (pw + 1) + xx];
        let sum = at(x + k, y + k) - at(x, y + k) - at(x + k, y) + at(x, y);
        i64::from(image.get(x, y)) * n > sum + offset * n
    })
}
