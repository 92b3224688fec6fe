use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension {
                what: "raster buffer".into(),
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    /// Load an 8-bit or 16-bit single-channel PNG, scaling into `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageLuma8(buf) => {
                buf.into_raw().iter().map(|&p| p as f32 / 255.0).collect()
            }
            image::DynamicImage::ImageLuma16(buf) => buf
                .into_raw()
                .iter()
                .map(|&p| p as f32 / 65535.0)
                .collect(),
            other => {
                // Tolerate channel-expanded grayscale by converting down.
                let buf = other.into_luma8();
                buf.into_raw().iter().map(|&p| p as f32 / 255.0).collect()
            }
        };
        Raster::new(h, w, data)
    }

    /// Write as an 8-bit single-channel PNG, quantizing with rounding.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Crop window plus target size for preprocessing.
///
/// `origin` is the top-left (row, col) of the crop window in the source
/// image; `size` its (height, width); `output` the resize target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub origin: (usize, usize),
    pub size: (usize, usize),
    pub output: (usize, usize),
}

impl CropSpec {
    pub fn new(origin: (usize, usize), size: (usize, usize), output: (usize, usize)) -> Result<Self> {
        if output.0 == 0 || output.1 == 0 {
            return Err(Error::Geometry(format!(
                "output size must be at least 1x1, got {}x{}",
                output.0, output.1
            )));
        }
        if size.0 == 0 || size.1 == 0 {
            return Err(Error::Geometry(format!(
                "crop size must be at least 1x1, got {}x{}",
                size.0, size.1
            )));
        }
        Ok(CropSpec {
            origin,
            size,
            output,
        })
    }

    /// Crop window of `size` centered in a `src_h` x `src_w` image.
    pub fn centered(src: (usize, usize), size: (usize, usize), output: (usize, usize)) -> Result<Self> {
        if size.0 > src.0 || size.1 > src.1 {
            return Err(Error::Geometry(format!(
                "centered crop {}x{} exceeds source {}x{}",
                size.0, size.1, src.0, src.1
            )));
        }
        CropSpec::new(((src.0 - size.0) / 2, (src.1 - size.1) / 2), size, output)
    }
}

/// Crop then bilinearly resize a grayscale raster.
///
/// The crop window must lie entirely within the source. Resizing maps
/// destination pixel centers onto source coordinates, so resizing to the
/// same size is the identity.
pub fn preprocess_image(image: &Raster, spec: &CropSpec) -> Result<Raster> {
    let (r0, c0) = spec.origin;
    let (ch, cw) = spec.size;
    if r0 + ch > image.height || c0 + cw > image.width {
        return Err(Error::Geometry(format!(
            "crop window origin ({}, {}) size {}x{} exceeds source bounds {}x{}",
            r0, c0, ch, cw, image.height, image.width
        )));
    }
    let mut cropped = Raster::zeros(ch, cw);
    for r in 0..ch {
        let src = (r0 + r) * image.width + c0;
        cropped.data[r * cw..(r + 1) * cw].copy_from_slice(&image.data[src..src + cw]);
    }
    Ok(bilinear_resize(&cropped, spec.output.0, spec.output.1))
}

/// Bilinear resample with pixel-center alignment and edge clamping.
pub fn bilinear_resize(src: &Raster, dst_h: usize, dst_w: usize) -> Raster {
    if dst_h == src.height && dst_w == src.width {
        return src.clone();
    }
    let mut dst = Raster::zeros(dst_h, dst_w);
    let sy = src.height as f64 / dst_h as f64;
    let sx = src.width as f64 / dst_w as f64;
    for r in 0..dst_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = (fy - y0 as f64) as f32;
        for c in 0..dst_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = src.get(y0, x0) * (1.0 - wx) + src.get(y0, x1) * wx;
            let bot = src.get(y1, x0) * (1.0 - wx) + src.get(y1, x1) * wx;
            dst.set(r, c, top * (1.0 - wy) + bot * wy);
        }
    }
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_raster(h: usize, w: usize) -> Raster {
        let data = (0..h * w)
            .map(|i| (i % 251) as f32 / 250.0)
            .collect();
        Raster::new(h, w, data).unwrap()
    }

    #[test]
    fn crop_680_to_340_resize_224() {
        let img = gradient_raster(680, 680);
        let spec = CropSpec::centered((680, 680), (340, 340), (224, 224)).unwrap();
        assert_eq!(spec.origin, (170, 170));
        let out = preprocess_image(&img, &spec).unwrap();
        assert_eq!((out.height, out.width), (224, 224));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_480_to_340_resize_224() {
        let img = gradient_raster(480, 480);
        let spec = CropSpec::centered((480, 480), (340, 340), (224, 224)).unwrap();
        assert_eq!(spec.origin, (70, 70));
        let out = preprocess_image(&img, &spec).unwrap();
        assert_eq!((out.height, out.width), (224, 224));
    }

    #[test]
    fn crop_window_out_of_bounds() {
        let img = gradient_raster(100, 100);
        let spec = CropSpec::new((0, 0), (340, 340), (224, 224)).unwrap();
        let err = preprocess_image(&img, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("340x340"), "message carries crop geometry: {msg}");
        assert!(msg.contains("100x100"), "message carries source geometry: {msg}");
    }

    #[test]
    fn identity_preprocess_is_exact() {
        let img = gradient_raster(224, 224);
        let spec = CropSpec::new((0, 0), (224, 224), (224, 224)).unwrap();
        let out = preprocess_image(&img, &spec).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Raster::new(17, 31, vec![0.25; 17 * 31]).unwrap();
        let out = bilinear_resize(&img, 224, 224);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn png_round_trip_8bit(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = gradient_raster(32, 48);
        img.save_png(&path).unwrap();
        let back = Raster::load_png(&path).unwrap();
        assert_eq!((back.height, back.width), (32, 48));
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
