//! RGB images in `[0, 1]`, stored channel-planar.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// `3 x height x width`, planar.
    data: Vec<f32>,
    pub source_path: Option<PathBuf>,
    pub domain_label: Option<usize>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Data(format!(
                "{height}x{width} image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data, source_path: None, domain_label: None })
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        Image { height, width, data, source_path: None, domain_label: None }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.domain_label = Some(label);
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Pixels rounded to 8 bits, planar.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let n = self.num_pixels() as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Data(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Image::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x));
        out.domain_label = self.domain_label;
        out.source_path = self.source_path.clone();
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x));
        out.domain_label = self.domain_label;
        out.source_path = self.source_path.clone();
        out
    }

    /// Reflect-pads bottom/right so both sides are multiples of `multiple`
    /// and at least `min_side`.
    pub fn pad_reflect(&self, multiple: usize, min_side: usize) -> Image {
        let target = |n: usize| n.max(min_side).div_ceil(multiple) * multiple;
        let (h, w) = (target(self.height), target(self.width));
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::from_fn(h, w, |c, y, x| {
            self.get(c, reflect_index(y, self.height), reflect_index(x, self.width))
        });
        out.domain_label = self.domain_label;
        out.source_path = self.source_path.clone();
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        let mut out = Image::from_fn(h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0);
        out.source_path = Some(path.to_path_buf());
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let mut raw = vec![0u8; h * w * 3];
        for c in 0..3 {
            for (i, &v) in self.plane(c).iter().enumerate() {
                raw[i * 3 + c] = to_u8(v);
            }
        }
        let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
        buf.save(path.as_ref())?;
        Ok(())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        batch_tensor(std::slice::from_ref(self)).expect("single image batch")
    }
}

/// Stacks same-sized images into an `[N, 3, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Data(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Extracts sample `index` of an `[N, 3, H, W]` tensor, clamping into `[0, 1]`.
pub fn image_from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Image> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 || index >= s[0] {
        return Err(Error::Codec(format!("cannot read image {index} from tensor {s:?}")));
    }
    let n = 3 * s[2] * s[3];
    let plane = &t.data()[index * n..(index + 1) * n];
    Ok(Image {
        height: s[2],
        width: s[3],
        data: plane.iter().map(|v| clamp01(v.as_f64() as f32)).collect(),
        source_path: None,
        domain_label: None,
    })
}

pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Mirror index for reflect padding, valid for any overshoot.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}
