//! Single-channel rasters: 8-bit images, binary masks, and their PNG form.

use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Row-major single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Plane<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

pub type Image8 = Plane<u8>;
pub type Mask = Plane<bool>;

impl<P: Copy> Plane<P> {
    pub fn new(width: usize, height: usize, fill: P) -> Self {
        Plane {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "plane of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: P) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<Q: Copy>(&self, mut f: impl FnMut(P) -> Q) -> Plane<Q> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Plane::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Plane::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }

    /// Embeds the plane at `(left, top)` inside a `width x height` canvas of `fill`.
    pub fn pad(&self, left: usize, top: usize, width: usize, height: usize, fill: P) -> Self {
        debug_assert!(left + self.width <= width && top + self.height <= height);
        let mut out = Plane::new(width, height, fill);
        for y in 0..self.height {
            let src = &self.data[y * self.width..(y + 1) * self.width];
            let start = (y + top) * width + left;
            out.data[start..start + self.width].copy_from_slice(src);
        }
        out
    }

    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Self> {
        if left + width > self.width || top + height > self.height {
            return Err(Error::invalid(format!(
                "crop window {width}x{height} at ({left}, {top}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Plane::from_fn(width, height, |x, y| {
            self.get(x + left, y + top)
        }))
    }

    /// Nearest-neighbour resample.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        Plane::from_fn(width, height, |x, y| {
            self.get(x * self.width / width, y * self.height / height)
        })
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// 0 / 255 grayscale rendering.
    pub fn to_image(&self) -> Image8 {
        self.map(|v| if v { 255 } else { 0 })
    }
}

impl Image8 {
    /// Pixels above 127 are foreground.
    pub fn to_mask(&self) -> Mask {
        self.map(|v| v > 127)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("sized buffer")
    }

    pub fn from_gray_image(img: &GrayImage) -> Self {
        Plane {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }
}

/// Maps `[0, 1]` to `[0, 255]` with round-half-up.
pub fn to_u8_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn read_png(path: &Path) -> Result<Image8> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Image8::from_gray_image(&img.to_luma8()))
}

pub fn write_png(path: &Path, image: &Image8) -> Result<()> {
    let buf = image.to_gray_image();
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_png(path)?.to_mask())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_png(path, &mask.to_image())
}

/// Stacks 8-bit images into a `(B, H, W, 1)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&Image8]) -> Result<Tensor<T>> {
    planes_to_tensor(images, |v| T::of(f64::from(v) / 255.0))
}

pub fn masks_to_tensor<T: Scalar>(masks: &[&Mask]) -> Result<Tensor<T>> {
    planes_to_tensor(masks, |v| if v { T::one() } else { T::zero() })
}

fn planes_to_tensor<P: Copy, T: Scalar>(
    planes: &[&Plane<P>],
    f: impl Fn(P) -> T,
) -> Result<Tensor<T>> {
    let first = planes
        .first()
        .ok_or_else(|| Error::invalid("no images to stack"))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(planes.len() * w * h);
    for p in planes {
        if p.dims() != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "stack images",
                left: vec![h, w],
                right: vec![p.height, p.width],
            });
        }
        data.extend(p.data.iter().map(|&v| f(v)));
    }
    Tensor::from_vec(Shape::new(planes.len(), h, w, 1), data)
}

/// One `(H, W)` channel of batch item `b` as an image, scaled by 255.
pub fn tensor_channel_to_image<T: Scalar>(t: &Tensor<T>, b: usize, c: usize) -> Image8 {
    let s = t.shape();
    Plane::from_fn(s.width, s.height, |x, y| {
        to_u8_unit(t.at(b, y, x, c).to_f64_lossy())
    })
}
