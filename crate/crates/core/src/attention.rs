//! Gaussian attention stage.
//!
//! A six-channel head output is squashed into per-pixel bivariate normal
//! parameters `(c, mu_x, mu_y, sigma_x, sigma_y, rho)`. Every pixel then emits
//! one confidence-weighted Gaussian; the sum `S` of all of them is passed
//! through `tanh` to form the attention map `A` in `[0, 1)`, which multiplies
//! the backbone probabilities.
//!
//! The density uses the usual negative exponent:
//!
//! ```text
//! phi(x, y) = exp(-q / (2 (1 - rho^2))) / (2 pi sx sy sqrt(1 - rho^2))
//! q = u^2/sx^2 + v^2/sy^2 - 2 rho u v / (sx sy),  u = x - mu_x,  v = y - mu_y
//! ```
//!
//! Centers are bounded offsets (at most [`R_MAX`] pixels) from the emitting
//! pixel, so truncated rendering only has to visit a local window.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ops::{logistic, softplus};
use crate::scalar::Scalar;
use crate::tensor::{check_same_shape, Shape, Tensor};

pub const PARAM_CHANNELS: usize = 6;
pub const R_MAX: f64 = 2.0;
pub const SIGMA_MIN: f64 = 0.1;
pub const RHO_MAX: f64 = 0.99;
/// Truncated rendering ignores sources with confidence below this.
pub const CONFIDENCE_FLOOR: f64 = 1e-3;
pub const DEFAULT_TRUNCATION: f64 = 5.0;

/// Channel order of a parameter map.
pub mod channel {
    pub const CONFIDENCE: usize = 0;
    pub const MU_X: usize = 1;
    pub const MU_Y: usize = 2;
    pub const SIGMA_X: usize = 3;
    pub const SIGMA_Y: usize = 4;
    pub const RHO: usize = 5;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RenderMode {
    /// Every source contributes to every output pixel.
    Exact,
    /// Sources farther than `k * max(sigma) + R_MAX` from an output pixel,
    /// or with confidence below [`CONFIDENCE_FLOOR`], are skipped.
    Truncated(f64),
}

impl RenderMode {
    pub fn truncated() -> Self {
        RenderMode::Truncated(DEFAULT_TRUNCATION)
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            RenderMode::Truncated(k) if k.is_nan() || k < 3.0 => Err(Error::invalid(format!(
                "truncation multiplier must be at least 3, got {k}"
            ))),
            m => Ok(m),
        }
    }
}

impl Default for RenderMode {
    fn default() -> Self {
        RenderMode::truncated()
    }
}

/// `exact` or `truncated:<k>`.
impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RenderMode::Exact => write!(f, "exact"),
            RenderMode::Truncated(k) => write!(f, "truncated:{k}"),
        }
    }
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s.trim() {
            "exact" => RenderMode::Exact,
            "truncated" => RenderMode::truncated(),
            other => {
                let k = other
                    .strip_prefix("truncated:")
                    .and_then(|k| k.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown render mode `{other}`")))?;
                RenderMode::Truncated(k)
            }
        };
        mode.validate()
    }
}

/// Constrained per-pixel Gaussian parameters, shape `(B, H, W, 6)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParamMap<T: Scalar> {
    values: Tensor<T>,
    allow_zero_rho: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub confidence: T,
    pub mu_x: T,
    pub mu_y: T,
    pub sigma_x: T,
    pub sigma_y: T,
    pub rho: T,
}

impl<T: Scalar> GaussianParamMap<T> {
    /// Wraps an already-constrained map, checking every invariant.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let map = GaussianParamMap {
            values,
            allow_zero_rho: false,
        };
        map.validate()?;
        Ok(map)
    }

    /// Like [`GaussianParamMap::new`] but also admits `rho = 0`, which the
    /// closed-form isotropic test cases need.
    pub fn verification(values: Tensor<T>) -> Result<Self> {
        let map = GaussianParamMap {
            values,
            allow_zero_rho: true,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    pub fn shape(&self) -> Shape {
        self.values.shape()
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize) -> GaussianParams<T> {
        let s = self.values.shape();
        let o = s.index(b, i, j, 0);
        let p = &self.values.data()[o..o + PARAM_CHANNELS];
        GaussianParams {
            confidence: p[0],
            mu_x: p[1],
            mu_y: p[2],
            sigma_x: p[3],
            sigma_y: p[4],
            rho: p[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.values.shape();
        if s.channels != PARAM_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "gaussian parameter map",
                left: s.dims(),
                right: s.with_channels(PARAM_CHANNELS).dims(),
            });
        }
        self.values.ensure_finite("gaussian parameter map")?;
        let sigma_min = T::of(SIGMA_MIN);
        let rho_max = T::of(RHO_MAX);
        let r_max = R_MAX;
        for b in 0..s.batch {
            for i in 0..s.height {
                for j in 0..s.width {
                    let p = self.get(b, i, j);
                    let at = || format!("pixel ({b}, {i}, {j})");
                    if p.confidence < T::zero() || p.confidence > T::one() {
                        return Err(Error::invalid(format!(
                            "{}: confidence {} outside [0, 1]",
                            at(),
                            p.confidence
                        )));
                    }
                    if p.sigma_x < sigma_min || p.sigma_y < sigma_min {
                        return Err(Error::invalid(format!(
                            "{}: sigma ({}, {}) below minimum {SIGMA_MIN}",
                            at(),
                            p.sigma_x,
                            p.sigma_y
                        )));
                    }
                    let rho_ok = if self.allow_zero_rho {
                        p.rho >= T::zero()
                    } else {
                        p.rho > T::zero()
                    };
                    if !rho_ok || p.rho > rho_max {
                        return Err(Error::invalid(format!(
                            "{}: rho {} outside (0, {RHO_MAX}]",
                            at(),
                            p.rho
                        )));
                    }
                    // Offset bound, with slack for rounding of j + r tanh(.)
                    let slack = r_max + 1e-4 * (1.0 + i.max(j) as f64);
                    let dx = (p.mu_x.to_f64_lossy() - j as f64).abs();
                    let dy = (p.mu_y.to_f64_lossy() - i as f64).abs();
                    if dx > slack || dy > slack {
                        return Err(Error::invalid(format!(
                            "{}: center offset ({dx}, {dy}) exceeds {R_MAX} px",
                            at()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_raw<T: Scalar>(raw: &Tensor<T>) -> Result<()> {
    let s = raw.shape();
    if s.channels != PARAM_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "activate_params",
            left: s.dims(),
            right: s.with_channels(PARAM_CHANNELS).dims(),
        });
    }
    raw.ensure_finite("activate_params")
}

/// Squashes raw head output into a valid [`GaussianParamMap`].
///
/// `c = logistic(r0)`, `mu_x = j + R_MAX tanh(r1)`, `mu_y = i + R_MAX tanh(r2)`,
/// `sigma = SIGMA_MIN + softplus(r3 | r4)`, `rho = RHO_MAX logistic(r5)`.
pub fn activate_params<T: Scalar>(raw: &Tensor<T>) -> Result<GaussianParamMap<T>> {
    check_raw(raw)?;
    let s = raw.shape();
    let r_max = T::of(R_MAX);
    let sigma_min = T::of(SIGMA_MIN);
    let rho_max = T::of(RHO_MAX);
    let mut out = Vec::with_capacity(raw.len());
    for b in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                let o = s.index(b, i, j, 0);
                let r = &raw.data()[o..o + PARAM_CHANNELS];
                out.push(logistic(r[0]));
                out.push(T::of(j as f64) + r_max * r[1].tanh());
                out.push(T::of(i as f64) + r_max * r[2].tanh());
                out.push(sigma_min + softplus(r[3]));
                out.push(sigma_min + softplus(r[4]));
                // logistic underflows to 0 far below -700 (f64) or -100 (f32)
                out.push((rho_max * logistic(r[5])).max(T::min_positive_value()));
            }
        }
    }
    Ok(GaussianParamMap {
        values: Tensor::from_vec(s, out)?,
        allow_zero_rho: false,
    })
}

/// Chains gradients on the constrained parameters back to the raw channels.
pub fn activate_params_backward<T: Scalar>(raw: &Tensor<T>, grad_params: &[T]) -> Vec<T> {
    let r_max = T::of(R_MAX);
    let rho_max = T::of(RHO_MAX);
    let one = T::one();
    let mut out = Vec::with_capacity(raw.len());
    for (r, g) in raw
        .data()
        .chunks_exact(PARAM_CHANNELS)
        .zip(grad_params.chunks_exact(PARAM_CHANNELS))
    {
        let c = logistic(r[0]);
        let tx = r[1].tanh();
        let ty = r[2].tanh();
        let s = logistic(r[5]);
        out.push(g[0] * c * (one - c));
        out.push(g[1] * r_max * (one - tx * tx));
        out.push(g[2] * r_max * (one - ty * ty));
        out.push(g[3] * logistic(r[3]));
        out.push(g[4] * logistic(r[4]));
        out.push(g[5] * rho_max * s * (one - s));
    }
    out
}

/// Output of [`render_attention`]: the squashed map and the raw density sum.
#[derive(Clone, Debug)]
pub struct Rendering<T: Scalar> {
    /// `A = tanh(S)`, shape `(B, H, W, 1)`.
    pub attention: Tensor<T>,
    /// `S`, the confidence-weighted density sum, shape `(B, H, W, 1)`.
    pub density: Tensor<T>,
    pub mode: RenderMode,
}

/// Per-source precomputed quantities of one Gaussian.
struct Source<T> {
    mu_x: T,
    mu_y: T,
    inv_sx: T,
    inv_sy: T,
    rho: T,
    one_minus_rho2: T,
    /// `c / (2 pi sx sy sqrt(1 - rho^2))`
    weight: T,
    /// `-1 / (2 (1 - rho^2))`
    exponent: T,
}

impl<T: Scalar> Source<T> {
    fn new(p: GaussianParams<T>) -> Self {
        let d = T::one() - p.rho * p.rho;
        let two_pi = T::of(2.0 * PI);
        Source {
            mu_x: p.mu_x,
            mu_y: p.mu_y,
            inv_sx: p.sigma_x.recip(),
            inv_sy: p.sigma_y.recip(),
            rho: p.rho,
            one_minus_rho2: d,
            weight: p.confidence / (two_pi * p.sigma_x * p.sigma_y * d.sqrt()),
            exponent: -(T::one() / (T::of(2.0) * d)),
        }
    }

    /// Returns `(a, b, q, e)` at output pixel `(y, x)`, where
    /// `a = u / sx`, `b = v / sy` and `c * phi = weight * e`.
    #[inline]
    fn eval(&self, y: T, x: T) -> (T, T, T, T) {
        let a = (x - self.mu_x) * self.inv_sx;
        let b = (y - self.mu_y) * self.inv_sy;
        let q = a * a + b * b - T::of(2.0) * self.rho * a * b;
        (a, b, q, (self.exponent * q).exp())
    }
}

/// Output pixels a source at `(i, j)` reaches, as row and column ranges plus
/// the squared cutoff radius. `None` means the source is skipped entirely.
struct Window {
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    radius2: Option<f64>,
}

fn window<T: Scalar>(
    mode: RenderMode,
    p: &GaussianParams<T>,
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> Option<Window> {
    match mode {
        RenderMode::Exact => Some(Window {
            rows: 0..h,
            cols: 0..w,
            radius2: None,
        }),
        RenderMode::Truncated(k) => {
            if p.confidence.to_f64_lossy() < CONFIDENCE_FLOOR {
                return None;
            }
            let sigma = p.sigma_x.max(p.sigma_y).to_f64_lossy();
            let r = k * sigma + R_MAX;
            if !r.is_finite() {
                return Some(Window {
                    rows: 0..h,
                    cols: 0..w,
                    radius2: None,
                });
            }
            let span = |center: usize, len: usize| {
                let lo = (center as f64 - r).ceil().max(0.0) as usize;
                let hi = ((center as f64 + r).floor() as usize).min(len - 1);
                lo..hi + 1
            };
            Some(Window {
                rows: span(i, h),
                cols: span(j, w),
                radius2: Some(r * r),
            })
        }
    }
}

#[inline]
fn within(radius2: Option<f64>, i: usize, j: usize, y: usize, x: usize) -> bool {
    match radius2 {
        None => true,
        Some(r2) => {
            let dy = y as f64 - i as f64;
            let dx = x as f64 - j as f64;
            dy * dy + dx * dx <= r2
        }
    }
}

/// Renders `A = tanh(sum_s c_s phi_s)` over the map's own pixel grid.
///
/// Sources are accumulated in raster order for every output pixel, so
/// `Truncated(inf)` reproduces `Exact` bit for bit.
pub fn render_attention<T: Scalar>(
    params: &GaussianParamMap<T>,
    mode: RenderMode,
) -> Result<Rendering<T>> {
    let mode = mode.validate()?;
    params.validate()?;
    let s = params.shape();
    let (h, w) = (s.height, s.width);
    let out_shape = s.with_channels(1);
    let mut density = vec![T::zero(); out_shape.len()];
    for b in 0..s.batch {
        let plane = &mut density[b * h * w..(b + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let p = params.get(b, i, j);
                let Some(win) = window(mode, &p, i, j, h, w) else {
                    continue;
                };
                let src = Source::new(p);
                for y in win.rows.clone() {
                    let yf = T::of(y as f64);
                    for x in win.cols.clone() {
                        if within(win.radius2, i, j, y, x) {
                            plane[y * w + x] += src.weight * src.eval(yf, T::of(x as f64)).3;
                        }
                    }
                }
            }
        }
    }
    let density = Tensor::from_vec(out_shape, density)?;
    density.ensure_finite("render_attention")?;
    // tanh rounds to exactly 1 once S passes ~9 (f32) or ~19 (f64)
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    let attention = density.map(|v| v.tanh().min(below_one));
    Ok(Rendering {
        attention,
        density,
        mode,
    })
}

/// Gradients of the loss with respect to the six constrained channels of
/// every source pixel, given `dL/dA` on the output grid.
pub fn attention_backward<T: Scalar>(
    params: &GaussianParamMap<T>,
    rendering: &Rendering<T>,
    mode: RenderMode,
    upstream: &[T],
) -> Result<Vec<T>> {
    if mode != rendering.mode {
        return Err(Error::invalid(format!(
            "attention_backward: rendered with {:?} but differentiated with {:?}",
            rendering.mode, mode
        )));
    }
    let s = params.shape();
    let (h, w) = (s.height, s.width);
    if upstream.len() != s.pixels() {
        return Err(Error::ShapeMismatch {
            op: "attention_backward",
            left: s.with_channels(1).dims(),
            right: vec![upstream.len()],
        });
    }
    // dL/dS = dL/dA * (1 - A^2)
    let g_density: Vec<T> = upstream
        .iter()
        .zip(rendering.attention.data())
        .map(|(&g, &a)| g * (T::one() - a * a))
        .collect();

    let mut grads = vec![T::zero(); s.len()];
    for b in 0..s.batch {
        let plane = &g_density[b * h * w..(b + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let p = params.get(b, i, j);
                let Some(win) = window(mode, &p, i, j, h, w) else {
                    continue;
                };
                let src = Source::new(p);
                let unit = src.weight_unit();
                let d = src.one_minus_rho2;
                let rho = src.rho;
                let (mut gc, mut gmx, mut gmy, mut gsx, mut gsy, mut grho) = (
                    T::zero(),
                    T::zero(),
                    T::zero(),
                    T::zero(),
                    T::zero(),
                    T::zero(),
                );
                for y in win.rows.clone() {
                    let yf = T::of(y as f64);
                    for x in win.cols.clone() {
                        let g = plane[y * w + x];
                        if g == T::zero() || !within(win.radius2, i, j, y, x) {
                            continue;
                        }
                        let (a, bb, q, e) = src.eval(yf, T::of(x as f64));
                        let gv = g * src.weight * e;
                        let ax = a - rho * bb;
                        let by = bb - rho * a;
                        gc += g * unit * e;
                        gmx += gv * ax * src.inv_sx / d;
                        gmy += gv * by * src.inv_sy / d;
                        gsx += gv * (a * ax / d - T::one()) * src.inv_sx;
                        gsy += gv * (bb * by / d - T::one()) * src.inv_sy;
                        grho += gv * ((rho + a * bb) / d - rho * q / (d * d));
                    }
                }
                let o = s.index(b, i, j, 0);
                grads[o] = gc;
                grads[o + 1] = gmx;
                grads[o + 2] = gmy;
                grads[o + 3] = gsx;
                grads[o + 4] = gsy;
                grads[o + 5] = grho;
            }
        }
    }
    if !crate::tensor::all_finite(&grads) {
        return Err(Error::NonFinite {
            op: "attention_backward",
        });
    }
    Ok(grads)
}

impl<T: Scalar> Source<T> {
    /// `1 / (2 pi sx sy sqrt(1 - rho^2))`, the density prefactor without `c`.
    fn weight_unit(&self) -> T {
        self.inv_sx * self.inv_sy / (T::of(2.0 * PI) * self.one_minus_rho2.sqrt())
    }
}

/// `p = backbone_prob * A`, elementwise.
pub fn apply_attention<T: Scalar>(
    backbone_prob: &Tensor<T>,
    attention: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same_shape("apply_attention", backbone_prob.shape(), attention.shape())?;
    crate::ops::elementwise_forward(backbone_prob, attention, crate::ops::Binary::Mul)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_source(
        h: usize,
        w: usize,
        at: (usize, usize),
        sigma: f64,
        rho: f64,
    ) -> GaussianParamMap<f64> {
        let s = Shape::new(1, h, w, PARAM_CHANNELS);
        let t = Tensor::from_fn(s, |_, i, j, c| match c {
            channel::CONFIDENCE => f64::from((i, j) == at),
            channel::MU_X => j as f64,
            channel::MU_Y => i as f64,
            channel::SIGMA_X | channel::SIGMA_Y => sigma,
            _ => rho,
        });
        GaussianParamMap::verification(t).unwrap()
    }

    #[test]
    fn zero_raw_activates_to_documented_values() {
        let raw = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 6));
        let p = activate_params(&raw).unwrap();
        let g = p.get(0, 2, 1);
        assert_eq!(g.confidence, 0.5);
        assert_eq!(g.mu_x, 1.0);
        assert_eq!(g.mu_y, 2.0);
        assert!((g.sigma_x - 0.793147).abs() < 1e-6);
        assert!((g.sigma_y - (0.1 + std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((g.rho - 0.495).abs() < 1e-15);
    }

    #[test]
    fn activation_saturates_at_limits() {
        let mut raw = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 6));
        raw.data_mut()[0] = -1e4;
        raw.data_mut()[1] = 1e4;
        let p = activate_params(&raw).unwrap();
        let g = p.get(0, 0, 0);
        assert_eq!(g.confidence, 0.0);
        assert_eq!(g.mu_x, 2.0);
    }

    #[test]
    fn activation_rejects_wrong_channel_count() {
        assert!(activate_params(&Tensor::<f64>::zeros(Shape::new(1, 2, 2, 5))).is_err());
    }

    #[test]
    fn zero_confidence_renders_zero() {
        let p = single_source(5, 5, (9, 9), 1.0, 0.0);
        for mode in [RenderMode::Exact, RenderMode::truncated()] {
            let r = render_attention(&p, mode).unwrap();
            assert!(r.attention.data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn isotropic_peak_and_one_sigma() {
        let p = single_source(7, 7, (3, 3), 1.0, 0.0);
        let r = render_attention(&p, RenderMode::Exact).unwrap();
        let peak = 1.0 / (2.0 * PI);
        assert!((r.density.at(0, 3, 3, 0) - peak).abs() < 1e-12);
        assert!((r.attention.at(0, 3, 3, 0) - 0.157825).abs() < 1e-6);
        assert!((r.density.at(0, 3, 4, 0) - peak * (-0.5f64).exp()).abs() < 1e-12);
        assert!((r.density.at(0, 3, 4, 0) - 0.096532).abs() < 1e-6);
    }

    #[test]
    fn render_rejects_bypassed_activation() {
        let mut t = single_source(3, 3, (1, 1), 1.0, 0.2).into_tensor();
        t.data_mut()[channel::SIGMA_X] = 0.05;
        assert!(GaussianParamMap::new(t.clone()).is_err());
        let mut t = single_source(3, 3, (1, 1), 1.0, 0.2).into_tensor();
        t.data_mut()[channel::RHO] = 0.995;
        assert!(GaussianParamMap::new(t).is_err());
        let t = single_source(3, 3, (1, 1), 1.0, 0.0).into_tensor();
        assert!(GaussianParamMap::new(t.clone()).is_err());
        assert!(GaussianParamMap::verification(t).is_ok());
    }

    #[test]
    fn truncation_multiplier_below_three_rejected() {
        let p = single_source(3, 3, (1, 1), 1.0, 0.1);
        assert!(render_attention(&p, RenderMode::Truncated(2.5)).is_err());
    }

    #[test]
    fn backward_mode_mismatch_rejected() {
        let p = single_source(4, 4, (1, 1), 1.0, 0.1);
        let r = render_attention(&p, RenderMode::Exact).unwrap();
        let up = vec![1.0; 16];
        assert!(attention_backward(&p, &r, RenderMode::truncated(), &up).is_err());
        assert!(attention_backward(&p, &r, RenderMode::Exact, &up).is_ok());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let raw = Tensor::<f64>::from_fn(Shape::new(1, 4, 4, 6), |_, i, j, c| {
            ((i * 4 + j + c) as f64 * 0.37).sin()
        });
        let p = activate_params(&raw).unwrap();
        let r = render_attention(&p, RenderMode::Exact).unwrap();
        let g = attention_backward(&p, &r, RenderMode::Exact, &[0.0; 16]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_attention_product() {
        let s = Shape::new(1, 1, 1, 1);
        let p = apply_attention(&Tensor::<f64>::scalar(0.8), &Tensor::scalar(0.5)).unwrap();
        assert!((p.item() - 0.4).abs() < 1e-15);
        assert!(apply_attention(
            &Tensor::<f64>::zeros(s),
            &Tensor::zeros(Shape::new(1, 2, 1, 1))
        )
        .is_err());
    }
}
