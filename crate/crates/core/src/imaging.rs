//! Image decoding, resizing and conversion to model input tensors.

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::neuralops::{Real, Tensor};

/// An RGB image with its smoke boxes; no boxes means a smoke-free image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub boxes: Vec<BoundingBox>,
}

impl LabeledImage {
    pub fn is_smoke(&self) -> bool {
        !self.boxes.is_empty()
    }
}

/// Manifest line of a labeled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    /// 1 for smoke, 0 for smoke-free.
    pub label: u8,
    pub boxes: Vec<BoundingBox>,
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

/// Normalised `(1, channels, h, w)` tensor. One channel means luma.
pub fn image_to_tensor<T: Real>(img: &RgbImage, channels: usize) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let norm = |v: f64| (v / 255.0 - 0.5) / 0.25;
    let mut data = vec![0.0f64; channels * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        if channels == 1 {
            let [r, g, b] = px.0.map(f64::from);
            data[i] = norm(0.299 * r + 0.587 * g + 0.114 * b);
        } else {
            for c in 0..channels {
                data[c * h * w + i] = norm(px.0[c.min(2)] as f64);
            }
        }
    }
    Tensor::from_f64([1, channels, h, w], data).expect("non-empty image")
}

/// Resizes to `(width, height)` and returns the scale from model pixels back
/// to source pixels.
pub fn resize_for_model(img: &RgbImage, width: usize, height: usize) -> (RgbImage, (f64, f64)) {
    let (sw, sh) = img.dimensions();
    let back = (sw as f64 / width as f64, sh as f64 / height as f64);
    if (sw as usize, sh as usize) == (width, height) {
        return (img.clone(), back);
    }
    (
        imageops::resize(img, width as u32, height as u32, FilterType::Triangle),
        back,
    )
}

/// Resizes image and boxes together.
pub fn resize_labeled(sample: &LabeledImage, width: usize, height: usize) -> LabeledImage {
    let (image, (bx, by)) = resize_for_model(&sample.image, width, height);
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|b| b.scaled(1.0 / bx, 1.0 / by).ok())
        .collect();
    LabeledImage { image, boxes }
}

/// Mirrors a `(1, C, H, W)` tensor left-right.
pub fn flip_tensor<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut data = Vec::with_capacity(t.len());
    for b in 0..n {
        for ch in 0..c {
            let plane = t.plane(b, ch);
            for y in 0..h {
                data.extend(plane[y * w..(y + 1) * w].iter().rev());
            }
        }
    }
    Tensor::from_vec([n, c, h, w], data).expect("same shape")
}

pub fn flip_box(b: &BoundingBox, width: f64) -> BoundingBox {
    BoundingBox::new(width - b.x1(), b.y0(), width - b.x0(), b.y1()).expect("mirrored box stays valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_and_normalisation() {
        let mut img = RgbImage::new(3, 2);
        img.put_pixel(2, 1, image::Rgb([255, 0, 128]));
        let t: Tensor<f64> = image_to_tensor(&img, 3);
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        assert_eq!(t.at(0, 0, 1, 2), 2.0);
        assert_eq!(t.at(0, 1, 1, 2), -2.0);
        assert_eq!(t.at(0, 0, 0, 0), -2.0);
        let gray: Tensor<f64> = image_to_tensor(&img, 1);
        assert_eq!(gray.shape(), [1, 1, 2, 3]);
    }

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::<f32>::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(flip_tensor(&t).data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(flip_tensor(&flip_tensor(&t)), t);
        let b = BoundingBox::new(1.0, 2.0, 5.0, 9.0).unwrap();
        assert_eq!(flip_box(&b, 10.0), BoundingBox::new(5.0, 2.0, 9.0, 9.0).unwrap());
    }

    #[test]
    fn resize_scales_boxes() {
        let s = LabeledImage {
            image: RgbImage::new(256, 128),
            boxes: vec![BoundingBox::new(64.0, 32.0, 128.0, 96.0).unwrap()],
        };
        let r = resize_labeled(&s, 128, 64);
        assert_eq!(r.image.dimensions(), (128, 64));
        assert_eq!(r.boxes[0], BoundingBox::new(32.0, 16.0, 64.0, 48.0).unwrap());
    }
}
