//! Channels-last float images in `[0, 1]` and their conversions.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 8;

/// An `height x width x channels` image with values in `[0, 1]`, stored channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    ///
    /// Non-finite values are rejected rather than clamped.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        Self::check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidImage("non-finite pixel value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "image {height}x{width} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copy of the `size x size` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::InvalidImage(format!(
                "window {size}x{size} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in top..top + size {
            let row = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[row..row + size * self.channels]);
        }
        Self::new(size, size, self.channels, data)
    }

    /// Luminance plane as the channel mean, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Three-channel copy; grayscale is replicated, RGB is returned as is.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            channels: 3,
            data,
            ..self.clone()
        }
    }

    /// Snaps every value onto the 16-bit grid so a 16-bit PNG round trip is exact.
    pub fn quantized_u16(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| (v * 65535.0).round() as u16 as f32 / 65535.0)
            .collect();
        Self {
            data,
            ..self.clone()
        }
    }

    /// Planar `C x H x W` copy of the data.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * channels {
            return Err(Error::shape(chw.len(), (channels, height, width)));
        }
        let mut data = vec![0.0; plane * channels];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = chw[c * plane + i];
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Stacks images into an `N x C x H x W` tensor.
    pub fn stack(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidImage("cannot stack zero images".into()))?;
        let (h, w, c) = first.shape();
        let mut buf = Vec::with_capacity(images.len() * first.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::shape(first.shape(), img.shape()));
            }
            buf.extend(img.to_chw());
        }
        let t = Tensor::from_vec(buf, (images.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `N x C x H x W` tensor back into images, clamping to `[0, 1]`.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = c * h * w;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let chw: Vec<f32> = flat[i * per..(i + 1) * per]
                .iter()
                .map(|v| if v.is_finite() { *v } else { 0.0 })
                .collect();
            out.push(Self::from_chw(h, w, c, &chw)?);
        }
        Ok(out)
    }

    /// Decodes PNG/JPEG bytes. 8-bit data is divided by 255 and 16-bit data by 65535.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_dynamic(img)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma16(buf) => {
                let data = buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
                Self::new(h, w, 1, data)
            }
            DynamicImage::ImageLuma8(buf) => {
                let data = buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
                Self::new(h, w, 1, data)
            }
            DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLumaA16(_) => {
                let data = img
                    .to_rgb16()
                    .into_raw()
                    .iter()
                    .map(|&v| v as f32 / 65535.0)
                    .collect();
                Self::new(h, w, 3, data)
            }
            other => {
                let data = other
                    .to_rgb8()
                    .into_raw()
                    .iter()
                    .map(|&v| v as f32 / 255.0)
                    .collect();
                Self::new(h, w, 3, data)
            }
        }
    }

    /// Encodes as a 16-bit PNG. Lossless for images on the 16-bit grid.
    pub fn encode_png16(&self) -> Result<Vec<u8>> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v * 65535.0).round() as u16)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let mut out = Cursor::new(Vec::new());
        if self.channels == 1 {
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, raw)
                .ok_or_else(|| Error::InvalidImage("buffer size".into()))?;
            buf.write_to(&mut out, ImageFormat::Png)?;
        } else {
            let buf: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_raw(w, h, raw)
                .ok_or_else(|| Error::InvalidImage("buffer size".into()))?;
            buf.write_to(&mut out, ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }

    /// Encodes as an 8-bit PNG for viewing.
    pub fn encode_png8(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let mut out = Cursor::new(Vec::new());
        if self.channels == 1 {
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, raw)
                .ok_or_else(|| Error::InvalidImage("buffer size".into()))?;
            buf.write_to(&mut out, ImageFormat::Png)?;
        } else {
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, raw)
                .ok_or_else(|| Error::InvalidImage("buffer size".into()))?;
            buf.write_to(&mut out, ImageFormat::Png)?;
        }
        Ok(out.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_and_nonfinite() {
        assert!(ImageTensor::filled(7, 8, 3, 0.5).is_err());
        assert!(ImageTensor::filled(8, 8, 2, 0.5).is_err());
        let mut v = vec![0.5; 8 * 8];
        v[3] = f32::NAN;
        assert!(ImageTensor::new(8, 8, 1, v).is_err());
    }

    #[test]
    fn clamps_out_of_range() {
        let img = ImageTensor::new(8, 8, 1, vec![1.5; 64]).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png16_round_trip_is_exact_on_grid() {
        let img = ImageTensor::from_fn(9, 11, 3, |y, x, c| ((y * 31 + x * 7 + c) % 97) as f32 / 96.0)
            .unwrap()
            .quantized_u16();
        let back = ImageTensor::decode(&img.encode_png16().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn chw_and_tensor_round_trip() {
        let img = ImageTensor::from_fn(8, 10, 3, |y, x, c| (y + 2 * x + 3 * c) as f32 / 40.0).unwrap();
        let t = ImageTensor::stack(&[&img, &img], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims4().unwrap(), (2, 3, 8, 10));
        let back = ImageTensor::unstack(&t).unwrap();
        assert_eq!(back[1], img);
    }
}
